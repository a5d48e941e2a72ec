//! Drift and diffusion parameterizations, the speed-fixing conventions, and
//! shift-scale interventions.
//!
//! Two drift families are provided, each modeling the coordinates
//! independently:
//!
//! - linear: `f(x)_j = b_j + w_j . x`, with the self-weight `W_jj` held fixed
//!   (at -1 under the training convention) and excluded from gradients;
//! - MLP: `f(x)_j = b_j + w_j . g(U_j x + v_j) - x_j` with logistic `g`,
//!   where column `j` of `U_j` is held at zero and the explicit `-x_j` term
//!   provides the fixed self-regulation.
//!
//! Fixing the self-regulating dependence removes the speed-scaling freedom
//! `f -> s f`, `Sigma -> s Sigma`, which leaves stationary densities
//! unchanged and would otherwise let the objective shrink by slowing the
//! dynamics.
//!
//! Diffusions are constant diagonal matrices `sigma = diag(exp(s))`
//! parameterized by log-scales. A shift-scale intervention adds `delta_j` to
//! the drift and multiplies `sigma_j` by `beta_j` on its target coordinates
//! only; non-target mechanisms are untouched.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::io;
use crate::{Error, Result};

/// Numerically stable logistic sigmoid `exp(z) / (exp(z) + 1)`.
#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// A time-homogeneous SDE with state-independent diagonal diffusion:
/// `dx_t = f(x_t) dt + diag(sigma) dW_t`.
///
/// Implementations must be pure; evaluation is safe to call concurrently.
pub trait Sde {
    fn dim(&self) -> usize;

    /// Writes the drift `f(x)` into `out`.
    fn drift_into(&self, x: &[f64], out: &mut [f64]);

    /// Writes the diagonal of `Sigma = sigma sigma^T` into `out`.
    fn sigma2_into(&self, out: &mut [f64]);

    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        self.drift_into(x.as_slice(), out.as_mut_slice());
        out
    }

    /// Diagonal of `Sigma = sigma sigma^T`.
    fn sigma2(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        self.sigma2_into(out.as_mut_slice());
        out
    }

    /// Diagonal of `sigma` (positive square root of [`Sde::sigma2`]).
    fn sigma_diag(&self) -> DVector<f64> {
        self.sigma2().map(f64::sqrt)
    }
}

/// Linear drift `f(x) = b + W x`.
///
/// Under the training convention the diagonal of `W` is fixed (initialized to
/// -1) and never receives gradient; the struct itself stores whatever values
/// it was constructed with so that ground-truth systems with arbitrary
/// diagonals can be represented too.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDrift {
    pub bias: DVector<f64>,
    pub weights: DMatrix<f64>,
}

impl LinearDrift {
    pub fn new(bias: DVector<f64>, weights: DMatrix<f64>) -> Self {
        assert!(
            weights.is_square() && weights.nrows() == bias.len(),
            "weight matrix must be d x d matching the bias"
        );
        Self { bias, weights }
    }

    /// Zero bias and `W = -I`: the self-regulating skeleton the trainer
    /// starts from.
    pub fn self_regulating(dim: usize) -> Self {
        Self {
            bias: DVector::zeros(dim),
            weights: -DMatrix::identity(dim, dim),
        }
    }
}

/// Per-coordinate MLP drift unit: `b + w . g(U x + v) - x_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpUnit {
    pub bias: f64,
    /// Output weights `w`, length `h`.
    pub out_weights: DVector<f64>,
    /// Input weights `U`, shape `h x d`; column `j` is fixed at zero.
    pub in_weights: DMatrix<f64>,
    /// Hidden biases `v`, length `h`.
    pub hidden_bias: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpDrift {
    pub units: Vec<MlpUnit>,
}

impl MlpDrift {
    pub fn zeros(dim: usize, hidden: usize) -> Self {
        let units = (0..dim)
            .map(|_| MlpUnit {
                bias: 0.0,
                out_weights: DVector::zeros(hidden),
                in_weights: DMatrix::zeros(hidden, dim),
                hidden_bias: DVector::zeros(hidden),
            })
            .collect();
        Self { units }
    }

    pub fn hidden(&self) -> usize {
        self.units.first().map_or(0, |u| u.out_weights.len())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DriftParams {
    Linear(LinearDrift),
    Mlp(MlpDrift),
}

impl DriftParams {
    pub fn dim(&self) -> usize {
        match self {
            DriftParams::Linear(l) => l.bias.len(),
            DriftParams::Mlp(m) => m.units.len(),
        }
    }

    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        assert_eq!(x.len(), d, "drift input dimension mismatch");
        assert_eq!(out.len(), d, "drift output dimension mismatch");
        match self {
            DriftParams::Linear(l) => {
                out.copy_from_slice(l.bias.as_slice());
                let w = l.weights.as_slice(); // column-major
                for i in 0..d {
                    let xi = x[i];
                    let col = &w[i * d..(i + 1) * d];
                    for j in 0..d {
                        out[j] += col[j] * xi;
                    }
                }
            }
            DriftParams::Mlp(m) => {
                for (j, unit) in m.units.iter().enumerate() {
                    let h = unit.hidden_bias.len();
                    let u = unit.in_weights.as_slice(); // column-major h x d
                    let mut acc = unit.bias - x[j];
                    let mut z = unit.hidden_bias.clone_owned();
                    for i in 0..d {
                        let xi = x[i];
                        let col = &u[i * h..(i + 1) * h];
                        for k in 0..h {
                            z[k] += col[k] * xi;
                        }
                    }
                    for k in 0..h {
                        acc += unit.out_weights[k] * sigmoid(z[k]);
                    }
                    out[j] = acc;
                }
            }
        }
    }

    /// Accumulates `scale * cotangent^T (d f / d theta)` into `grad`, which
    /// must have the same shape as `self`. Entries of fixed parameters (the
    /// diagonal of `W`, column `j` of `U_j`) are never written.
    pub fn accumulate_vjp(&self, x: &[f64], cotangent: &[f64], scale: f64, grad: &mut DriftParams) {
        let d = self.dim();
        assert_eq!(x.len(), d, "vjp input dimension mismatch");
        assert_eq!(cotangent.len(), d, "vjp cotangent dimension mismatch");
        match (self, grad) {
            (DriftParams::Linear(_), DriftParams::Linear(g)) => {
                for j in 0..d {
                    let cj = scale * cotangent[j];
                    if cj == 0.0 {
                        continue;
                    }
                    g.bias[j] += cj;
                    for i in 0..d {
                        if i != j {
                            g.weights[(j, i)] += cj * x[i];
                        }
                    }
                }
            }
            (DriftParams::Mlp(m), DriftParams::Mlp(g)) => {
                for j in 0..d {
                    let cj = scale * cotangent[j];
                    if cj == 0.0 {
                        continue;
                    }
                    let unit = &m.units[j];
                    let gu = &mut g.units[j];
                    let h = unit.hidden_bias.len();
                    let u = unit.in_weights.as_slice();
                    let mut z = unit.hidden_bias.clone_owned();
                    for i in 0..d {
                        let xi = x[i];
                        let col = &u[i * h..(i + 1) * h];
                        for k in 0..h {
                            z[k] += col[k] * xi;
                        }
                    }
                    gu.bias += cj;
                    for k in 0..h {
                        let a = sigmoid(z[k]);
                        let t = unit.out_weights[k] * a * (1.0 - a);
                        gu.out_weights[k] += cj * a;
                        gu.hidden_bias[k] += cj * t;
                        for i in 0..d {
                            if i != j {
                                gu.in_weights[(k, i)] += cj * t * x[i];
                            }
                        }
                    }
                }
            }
            _ => panic!("gradient container shape does not match drift parameterization"),
        }
    }

    pub fn zeros_like(&self) -> DriftParams {
        match self {
            DriftParams::Linear(l) => DriftParams::Linear(LinearDrift {
                bias: DVector::zeros(l.bias.len()),
                weights: DMatrix::zeros(l.weights.nrows(), l.weights.ncols()),
            }),
            DriftParams::Mlp(m) => {
                DriftParams::Mlp(MlpDrift::zeros(m.units.len(), self.mlp_hidden()))
            }
        }
    }

    fn mlp_hidden(&self) -> usize {
        match self {
            DriftParams::Mlp(m) => m.hidden(),
            DriftParams::Linear(_) => 0,
        }
    }

    fn visit<F: FnMut(f64)>(&self, mut f: F) {
        match self {
            DriftParams::Linear(l) => {
                l.bias.iter().for_each(|&v| f(v));
                l.weights.as_slice().iter().for_each(|&v| f(v));
            }
            DriftParams::Mlp(m) => {
                for u in &m.units {
                    f(u.bias);
                    u.out_weights.iter().for_each(|&v| f(v));
                    u.in_weights.as_slice().iter().for_each(|&v| f(v));
                    u.hidden_bias.iter().for_each(|&v| f(v));
                }
            }
        }
    }

    fn visit_mut<F: FnMut(&mut f64)>(&mut self, mut f: F) {
        match self {
            DriftParams::Linear(l) => {
                l.bias.iter_mut().for_each(&mut f);
                l.weights.as_mut_slice().iter_mut().for_each(&mut f);
            }
            DriftParams::Mlp(m) => {
                for u in &mut m.units {
                    f(&mut u.bias);
                    u.out_weights.iter_mut().for_each(&mut f);
                    u.in_weights.as_mut_slice().iter_mut().for_each(&mut f);
                    u.hidden_bias.iter_mut().for_each(&mut f);
                }
            }
        }
    }

    /// Marks trainable positions in the flat layout; `false` entries are the
    /// fixed self-regulation parameters.
    fn trainable_mask_into(&self, out: &mut Vec<bool>) {
        match self {
            DriftParams::Linear(l) => {
                let d = l.bias.len();
                out.extend(std::iter::repeat(true).take(d));
                // column-major weight order: entry (j, i) frozen when i == j
                for i in 0..d {
                    for j in 0..d {
                        out.push(i != j);
                    }
                }
            }
            DriftParams::Mlp(m) => {
                let d = m.units.len();
                for (j, u) in m.units.iter().enumerate() {
                    let h = u.hidden_bias.len();
                    out.push(true); // bias
                    out.extend(std::iter::repeat(true).take(h)); // out_weights
                    for i in 0..d {
                        out.extend(std::iter::repeat(i != j).take(h)); // in_weights col i
                    }
                    out.extend(std::iter::repeat(true).take(h)); // hidden_bias
                }
            }
        }
    }
}

/// Constant diagonal diffusion `sigma = diag(exp(s))`, stored as log-scales.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionParams {
    pub log_scale: DVector<f64>,
}

impl DiffusionParams {
    pub fn unit(dim: usize) -> Self {
        Self {
            log_scale: DVector::zeros(dim),
        }
    }
}

/// A parameterized SDE model: drift parameters plus diffusion log-scales.
#[derive(Debug, Clone, PartialEq)]
pub struct SdeModel {
    pub drift: DriftParams,
    pub diffusion: DiffusionParams,
}

impl SdeModel {
    pub fn new(drift: DriftParams, diffusion: DiffusionParams) -> Self {
        assert_eq!(
            drift.dim(),
            diffusion.log_scale.len(),
            "drift and diffusion dimensions must match"
        );
        Self { drift, diffusion }
    }

    pub fn linear(bias: DVector<f64>, weights: DMatrix<f64>, log_scale: DVector<f64>) -> Self {
        Self::new(
            DriftParams::Linear(LinearDrift::new(bias, weights)),
            DiffusionParams { log_scale },
        )
    }

    /// Total number of stored parameters (including fixed entries).
    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.drift.visit(|_| n += 1);
        n + self.diffusion.log_scale.len()
    }

    /// Flat parameter vector in the canonical layout (drift, then
    /// log-scales). The same layout is used by [`ParamGrad::flatten`], the
    /// optimizer state, and the trainable mask.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.drift.visit(|v| out.push(v));
        out.extend(self.diffusion.log_scale.iter().copied());
        out
    }

    /// Adds `delta` elementwise in the canonical flat layout.
    pub fn apply_flat_delta(&mut self, delta: &[f64]) {
        assert_eq!(delta.len(), self.num_params(), "flat delta length mismatch");
        let mut it = delta.iter();
        self.drift.visit_mut(|v| *v += *it.next().unwrap());
        for s in self.diffusion.log_scale.iter_mut() {
            *s += *it.next().unwrap();
        }
    }

    /// `true` for trainable positions in the flat layout, `false` for the
    /// fixed self-regulation entries. Diffusion log-scales are reported
    /// trainable; the trainer may still freeze them by configuration.
    pub fn trainable_mask(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.num_params());
        self.drift.trainable_mask_into(&mut out);
        out.extend(std::iter::repeat(true).take(self.diffusion.log_scale.len()));
        out
    }
}

impl Sde for SdeModel {
    fn dim(&self) -> usize {
        self.drift.dim()
    }

    fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        self.drift.eval_into(x, out);
    }

    fn sigma2_into(&self, out: &mut [f64]) {
        for (o, s) in out.iter_mut().zip(self.diffusion.log_scale.iter()) {
            *o = (2.0 * s).exp();
        }
    }
}

/// Gradient of a scalar objective with respect to an [`SdeModel`], laid out
/// in the same shapes as the model parameters.
#[derive(Debug, Clone)]
pub struct ParamGrad {
    pub drift: DriftParams,
    pub log_scale: DVector<f64>,
}

impl ParamGrad {
    pub fn zeros_like(model: &SdeModel) -> Self {
        Self {
            drift: model.drift.zeros_like(),
            log_scale: DVector::zeros(model.dim()),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.drift.visit(|v| out.push(v));
        out.extend(self.log_scale.iter().copied());
        out
    }

    /// `self += scale * other` (matching shapes).
    pub fn add_scaled(&mut self, other: &ParamGrad, scale: f64) {
        let o = other.flatten();
        let mut it = o.iter();
        self.drift.visit_mut(|v| *v += scale * *it.next().unwrap());
        for (s, g) in self.log_scale.iter_mut().zip(it) {
            *s += scale * *g;
        }
    }
}

/// Vector-Jacobian product `cotangent^T (d f_theta(x) / d theta)`.
///
/// The result has the drift's parameter shape; fixed-parameter entries are
/// zero. The diffusion does not enter `f`, so only drift parameters appear.
pub fn drift_vjp(model: &SdeModel, x: &DVector<f64>, cotangent: &DVector<f64>) -> DriftParams {
    let mut grad = model.drift.zeros_like();
    model
        .drift
        .accumulate_vjp(x.as_slice(), cotangent.as_slice(), 1.0, &mut grad);
    grad
}

/// Shift-scale intervention parameters on a set of target coordinates.
///
/// `delta` shifts the drift and `beta = exp(log_beta)` scales the diffusion
/// on targets; all other coordinates keep the base mechanisms bit-identical.
/// An empty parameter set is the observational (identity) intervention.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InterventionParams {
    targets: Vec<usize>,
    delta: Vec<f64>,
    log_beta: Vec<f64>,
}

impl InterventionParams {
    /// The identity intervention (observational environment).
    pub fn empty() -> Self {
        Self::default()
    }

    /// Shift-only intervention; `log_beta` defaults to zero.
    pub fn shifts(pairs: &[(usize, f64)]) -> Result<Self> {
        let mut sorted: Vec<(usize, f64)> = pairs.to_vec();
        sorted.sort_by_key(|(t, _)| *t);
        if sorted.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::Config("duplicate intervention target".to_string()));
        }
        Ok(Self {
            targets: sorted.iter().map(|(t, _)| *t).collect(),
            delta: sorted.iter().map(|(_, v)| *v).collect(),
            log_beta: vec![0.0; sorted.len()],
        })
    }

    pub fn with_log_beta(mut self, target: usize, log_beta: f64) -> Result<Self> {
        match self.targets.iter().position(|&t| t == target) {
            Some(i) => {
                self.log_beta[i] = log_beta;
                Ok(self)
            }
            None => Err(Error::Config(format!(
                "coordinate {target} is not a target of this intervention"
            ))),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn delta(&self) -> &[f64] {
        &self.delta
    }

    pub fn delta_mut(&mut self) -> &mut [f64] {
        &mut self.delta
    }

    pub fn log_beta(&self) -> &[f64] {
        &self.log_beta
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if let Some(&t) = self.targets.iter().find(|&&t| t >= dim) {
            return Err(Error::Config(format!(
                "intervention target {t} out of range for dimension {dim}"
            )));
        }
        Ok(())
    }
}

/// Borrowed view of a model under an intervention; evaluates the modified
/// mechanisms without copying parameters.
#[derive(Debug, Clone, Copy)]
pub struct IntervenedSde<'a> {
    pub model: &'a SdeModel,
    pub phi: &'a InterventionParams,
}

/// Applies an intervention to a model, validating the targets.
pub fn apply_intervention<'a>(
    model: &'a SdeModel,
    phi: &'a InterventionParams,
) -> Result<IntervenedSde<'a>> {
    phi.validate(model.dim())?;
    Ok(IntervenedSde { model, phi })
}

impl Sde for IntervenedSde<'_> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        self.model.drift.eval_into(x, out);
        for (&t, &d) in self.phi.targets.iter().zip(&self.phi.delta) {
            out[t] += d;
        }
    }

    fn sigma2_into(&self, out: &mut [f64]) {
        self.model.sigma2_into(out);
        for (&t, &lb) in self.phi.targets.iter().zip(&self.phi.log_beta) {
            out[t] *= (2.0 * lb).exp();
        }
    }
}

/// Diagonal of `Sigma` for an intervened model:
/// `Sigma_jj = exp(2 s_j) beta_j^2` with `beta_j = 1` off-target.
pub fn diffusion_matrix(model: &SdeModel, phi: &InterventionParams) -> Result<DVector<f64>> {
    Ok(apply_intervention(model, phi)?.sigma2())
}

// --- serialization ---------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct MatrixDoc {
    rows: usize,
    cols: usize,
    /// Row-major hex float entries.
    data: Vec<String>,
}

impl MatrixDoc {
    fn from_matrix(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.nrows() * m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(io::format_hex_f64(m[(i, j)]));
            }
        }
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }

    fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::Format(format!(
                "matrix payload has {} entries, expected {}x{}",
                self.data.len(),
                self.rows,
                self.cols
            )));
        }
        Ok(DMatrix::from_row_slice(
            self.rows,
            self.cols,
            &io::parse_hex_vec(&self.data)?,
        ))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MlpUnitDoc {
    bias: String,
    out_weights: Vec<String>,
    in_weights: MatrixDoc,
    hidden_bias: Vec<String>,
}

/// On-disk form of an [`SdeModel`]: shape metadata plus hex float payloads.
#[derive(Debug, Serialize, Deserialize)]
pub struct ModelDoc {
    #[serde(rename = "type")]
    kind: String,
    dimension: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    hidden: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bias: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    weights: Option<MatrixDoc>,
    #[serde(skip_serializing_if = "Option::is_none")]
    units: Option<Vec<MlpUnitDoc>>,
    log_scale: Vec<String>,
}

impl ModelDoc {
    pub fn from_model(model: &SdeModel) -> Self {
        let log_scale = io::hex_vec(model.diffusion.log_scale.as_slice());
        match &model.drift {
            DriftParams::Linear(l) => ModelDoc {
                kind: "linear".to_string(),
                dimension: l.bias.len(),
                hidden: None,
                bias: Some(io::hex_vec(l.bias.as_slice())),
                weights: Some(MatrixDoc::from_matrix(&l.weights)),
                units: None,
                log_scale,
            },
            DriftParams::Mlp(m) => ModelDoc {
                kind: "mlp".to_string(),
                dimension: m.units.len(),
                hidden: Some(m.hidden()),
                bias: None,
                weights: None,
                units: Some(
                    m.units
                        .iter()
                        .map(|u| MlpUnitDoc {
                            bias: io::format_hex_f64(u.bias),
                            out_weights: io::hex_vec(u.out_weights.as_slice()),
                            in_weights: MatrixDoc::from_matrix(&u.in_weights),
                            hidden_bias: io::hex_vec(u.hidden_bias.as_slice()),
                        })
                        .collect(),
                ),
                log_scale,
            },
        }
    }

    pub fn to_model(&self) -> Result<SdeModel> {
        let log_scale = DVector::from_vec(io::parse_hex_vec(&self.log_scale)?);
        if log_scale.len() != self.dimension {
            return Err(Error::Format("log_scale length mismatch".to_string()));
        }
        let drift = match self.kind.as_str() {
            "linear" => {
                let bias = self
                    .bias
                    .as_ref()
                    .ok_or_else(|| Error::Format("linear model missing bias".to_string()))?;
                let weights = self
                    .weights
                    .as_ref()
                    .ok_or_else(|| Error::Format("linear model missing weights".to_string()))?;
                DriftParams::Linear(LinearDrift::new(
                    DVector::from_vec(io::parse_hex_vec(bias)?),
                    weights.to_matrix()?,
                ))
            }
            "mlp" => {
                let units = self
                    .units
                    .as_ref()
                    .ok_or_else(|| Error::Format("mlp model missing units".to_string()))?;
                DriftParams::Mlp(MlpDrift {
                    units: units
                        .iter()
                        .map(|u| {
                            Ok(MlpUnit {
                                bias: io::parse_hex_f64(&u.bias)?,
                                out_weights: DVector::from_vec(io::parse_hex_vec(&u.out_weights)?),
                                in_weights: u.in_weights.to_matrix()?,
                                hidden_bias: DVector::from_vec(io::parse_hex_vec(&u.hidden_bias)?),
                            })
                        })
                        .collect::<Result<Vec<_>>>()?,
                })
            }
            other => {
                return Err(Error::Format(format!("unknown model type {other:?}")));
            }
        };
        if drift.dim() != self.dimension {
            return Err(Error::Format("drift dimension mismatch".to_string()));
        }
        Ok(SdeModel::new(drift, DiffusionParams { log_scale }))
    }
}

/// On-disk form of [`InterventionParams`].
#[derive(Debug, Serialize, Deserialize)]
pub struct InterventionDoc {
    targets: Vec<usize>,
    delta: Vec<String>,
    log_beta: Vec<String>,
}

impl InterventionDoc {
    pub fn from_params(phi: &InterventionParams) -> Self {
        Self {
            targets: phi.targets.clone(),
            delta: io::hex_vec(&phi.delta),
            log_beta: io::hex_vec(&phi.log_beta),
        }
    }

    pub fn to_params(&self) -> Result<InterventionParams> {
        if self.delta.len() != self.targets.len() || self.log_beta.len() != self.targets.len() {
            return Err(Error::Format(
                "intervention payload lengths do not match targets".to_string(),
            ));
        }
        Ok(InterventionParams {
            targets: self.targets.clone(),
            delta: io::parse_hex_vec(&self.delta)?,
            log_beta: io::parse_hex_vec(&self.log_beta)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_linear(d: usize, rng: &mut impl Rng) -> SdeModel {
        let bias = DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0));
        let mut weights = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
        for j in 0..d {
            weights[(j, j)] = -1.0;
        }
        let log_scale = DVector::from_fn(d, |_, _| rng.gen_range(-0.5..0.5));
        SdeModel::linear(bias, weights, log_scale)
    }

    fn random_mlp(d: usize, h: usize, rng: &mut impl Rng) -> SdeModel {
        let units = (0..d)
            .map(|j| {
                let mut in_weights = DMatrix::from_fn(h, d, |_, _| rng.gen_range(-1.0..1.0));
                in_weights.column_mut(j).fill(0.0);
                MlpUnit {
                    bias: rng.gen_range(-1.0..1.0),
                    out_weights: DVector::from_fn(h, |_, _| rng.gen_range(-1.0..1.0)),
                    in_weights,
                    hidden_bias: DVector::from_fn(h, |_, _| rng.gen_range(-1.0..1.0)),
                }
            })
            .collect();
        SdeModel::new(
            DriftParams::Mlp(MlpDrift { units }),
            DiffusionParams {
                log_scale: DVector::from_fn(d, |_, _| rng.gen_range(-0.5..0.5)),
            },
        )
    }

    #[test]
    fn linear_drift_examples() {
        // pure OU: b = 0, W = -I
        let m = SdeModel::linear(
            DVector::zeros(3),
            -DMatrix::identity(3, 3),
            DVector::zeros(3),
        );
        let x = DVector::from_vec(vec![0.3, -1.0, 2.5]);
        assert_eq!(m.drift(&x), -x.clone());

        // 1d: b = 1, w = -1 at x = 0.5 gives 0.5
        let m1 = SdeModel::linear(
            DVector::from_element(1, 1.0),
            DMatrix::from_element(1, 1, -1.0),
            DVector::zeros(1),
        );
        assert_eq!(m1.drift(&DVector::from_element(1, 0.5))[0], 0.5);
    }

    #[test]
    fn mlp_zero_parameters_is_negative_identity() {
        let m = SdeModel::new(
            DriftParams::Mlp(MlpDrift::zeros(4, 8)),
            DiffusionParams::unit(4),
        );
        let x = DVector::from_vec(vec![1.0, -2.0, 0.0, 0.25]);
        assert_eq!(m.drift(&x), -x);
    }

    #[test]
    fn sigmoid_is_stable_and_correct() {
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
        assert_relative_eq!(sigmoid(0.0), 0.5);
        assert_relative_eq!(sigmoid(1.0), 1.0 / (1.0 + (-1.0f64).exp()), max_relative = 1e-15);
    }

    #[test]
    fn linear_vjp_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_linear(3, &mut rng);
        let x = DVector::from_vec(vec![0.5, -1.5, 2.0]);
        let cot = DVector::from_vec(vec![0.0, 1.0, 0.0]); // e_2
        let g = drift_vjp(&m, &x, &cot);
        let DriftParams::Linear(g) = g else { panic!() };
        assert_eq!(g.bias.as_slice(), &[0.0, 1.0, 0.0]);
        // row 1 of W gets x, except the fixed diagonal
        assert_eq!(g.weights[(1, 0)], x[0]);
        assert_eq!(g.weights[(1, 1)], 0.0);
        assert_eq!(g.weights[(1, 2)], x[2]);
        assert_eq!(g.weights.row(0).iter().copied().sum::<f64>(), 0.0);
    }

    #[test]
    fn zero_cotangent_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for model in [random_linear(3, &mut rng), random_mlp(3, 4, &mut rng)] {
            let x = DVector::from_vec(vec![0.1, 0.2, 0.3]);
            let g = drift_vjp(&model, &x, &DVector::zeros(3));
            let mut pg = ParamGrad::zeros_like(&model);
            pg.drift = g;
            assert!(pg.flatten().iter().all(|&v| v == 0.0));
        }
    }

    /// Central finite differences of `cot . f(x)` over every trainable
    /// parameter, via the flat layout.
    fn vjp_matches_fd(model: &SdeModel, x: &DVector<f64>, cot: &DVector<f64>) {
        let grad = drift_vjp(model, x, cot);
        let flat_grad = ParamGrad {
            drift: grad,
            log_scale: DVector::zeros(model.dim()),
        }
        .flatten();
        let mask = model.trainable_mask();
        let n_drift = flat_grad.len() - model.dim();
        let h = 1e-5;
        for i in 0..n_drift {
            if !mask[i] {
                assert_eq!(flat_grad[i], 0.0, "fixed entry {i} must have zero gradient");
                continue;
            }
            let mut delta = vec![0.0; flat_grad.len()];
            delta[i] = h;
            let mut up = model.clone();
            up.apply_flat_delta(&delta);
            delta[i] = -h;
            let mut dn = model.clone();
            dn.apply_flat_delta(&delta);
            let fd = (cot.dot(&up.drift(x)) - cot.dot(&dn.drift(x))) / (2.0 * h);
            let scale = fd.abs().max(flat_grad[i].abs()).max(1e-8);
            assert!(
                (fd - flat_grad[i]).abs() / scale < 1e-6,
                "param {i}: analytic {} vs fd {fd}",
                flat_grad[i]
            );
        }
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let d = rng.gen_range(1..=4);
            let x = DVector::from_fn(d, |_, _| rng.gen_range(-2.0..2.0));
            let cot = DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0));
            vjp_matches_fd(&random_linear(d, &mut rng), &x, &cot);
            vjp_matches_fd(&random_mlp(d, 3, &mut rng), &x, &cot);
        }
    }

    #[test]
    fn empty_intervention_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random_linear(3, &mut rng);
        let phi = InterventionParams::empty();
        let view = apply_intervention(&m, &phi).unwrap();
        let x = DVector::from_vec(vec![0.4, -0.2, 1.1]);
        assert_eq!(view.drift(&x), m.drift(&x));
        assert_eq!(view.sigma2(), m.sigma2());
    }

    #[test]
    fn shift_intervention_adds_to_drift() {
        let m = SdeModel::linear(
            DVector::zeros(1),
            DMatrix::from_element(1, 1, -1.0),
            DVector::zeros(1),
        );
        let phi = InterventionParams::shifts(&[(0, 2.0)]).unwrap();
        let view = apply_intervention(&m, &phi).unwrap();
        assert_eq!(view.drift(&DVector::zeros(1))[0], 2.0);
    }

    #[test]
    fn scale_intervention_scales_sigma2() {
        let m = SdeModel::linear(
            DVector::zeros(2),
            -DMatrix::identity(2, 2),
            DVector::zeros(2),
        );
        let phi = InterventionParams::shifts(&[(1, 0.0)])
            .unwrap()
            .with_log_beta(1, (2.0f64).ln())
            .unwrap();
        let sigma2 = diffusion_matrix(&m, &phi).unwrap();
        assert_relative_eq!(sigma2[0], 1.0);
        assert_relative_eq!(sigma2[1], 4.0, max_relative = 1e-15);
    }

    #[test]
    fn diffusion_matrix_examples() {
        // s = log(2)/2 gives Sigma = 2
        let m = SdeModel::linear(
            DVector::zeros(1),
            DMatrix::from_element(1, 1, -1.0),
            DVector::from_element(1, 0.5 * (2.0f64).ln()),
        );
        assert_relative_eq!(
            diffusion_matrix(&m, &InterventionParams::empty()).unwrap()[0],
            2.0,
            max_relative = 1e-15
        );
        // beta = 3 on coordinate 0 in d = 2
        let m2 = SdeModel::linear(
            DVector::zeros(2),
            -DMatrix::identity(2, 2),
            DVector::zeros(2),
        );
        let phi = InterventionParams::shifts(&[(0, 0.0)])
            .unwrap()
            .with_log_beta(0, (3.0f64).ln())
            .unwrap();
        let s2 = diffusion_matrix(&m2, &phi).unwrap();
        assert_relative_eq!(s2[0], 9.0, max_relative = 1e-14);
        assert_relative_eq!(s2[1], 1.0);
    }

    #[test]
    fn out_of_range_target_rejected() {
        let m = SdeModel::linear(
            DVector::zeros(2),
            -DMatrix::identity(2, 2),
            DVector::zeros(2),
        );
        let phi = InterventionParams::shifts(&[(5, 1.0)]).unwrap();
        assert!(apply_intervention(&m, &phi).is_err());
        assert!(InterventionParams::shifts(&[(0, 1.0), (0, 2.0)]).is_err());
    }

    #[test]
    fn flat_layout_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for model in [random_linear(4, &mut rng), random_mlp(3, 5, &mut rng)] {
            let flat = model.flatten();
            assert_eq!(flat.len(), model.num_params());
            assert_eq!(flat.len(), model.trainable_mask().len());
            let mut copy = model.clone();
            copy.apply_flat_delta(&vec![0.0; flat.len()]);
            assert_eq!(copy, model);
            // bumping one slot changes exactly one stored value
            let mut delta = vec![0.0; flat.len()];
            delta[1] = 1.5;
            copy.apply_flat_delta(&delta);
            let changed: Vec<usize> = copy
                .flatten()
                .iter()
                .zip(&flat)
                .enumerate()
                .filter(|(_, (a, b))| a != b)
                .map(|(i, _)| i)
                .collect();
            assert_eq!(changed, vec![1]);
        }
    }

    #[test]
    fn model_serialization_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for model in [random_linear(4, &mut rng), random_mlp(3, 8, &mut rng)] {
            let doc = ModelDoc::from_model(&model);
            let text = serde_json::to_string(&doc).unwrap();
            let parsed: ModelDoc = serde_json::from_str(&text).unwrap();
            let back = parsed.to_model().unwrap();
            assert_eq!(model.flatten(), back.flatten());
        }
    }

    #[test]
    fn intervention_serialization_round_trips() {
        let phi = InterventionParams::shifts(&[(2, -3.75), (0, 0.1)])
            .unwrap()
            .with_log_beta(2, 0.5)
            .unwrap();
        let doc = InterventionDoc::from_params(&phi);
        let back: InterventionParams =
            serde_json::from_str::<InterventionDoc>(&serde_json::to_string(&doc).unwrap())
                .unwrap()
                .to_params()
                .unwrap();
        assert_eq!(phi, back);
    }
}
