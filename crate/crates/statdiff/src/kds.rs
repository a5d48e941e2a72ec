//! The deviation-from-stationarity objective: generator bilinear form,
//! unbiased estimators, and analytic parameter gradients.
//!
//! For an SDE with drift `f` and constant diagonal diffusion `Sigma`, the
//! generator is `L h = f . grad h + 1/2 sum_j Sigma_jj d^2 h / dx_j^2`.
//! Applying `L` to each argument of the kernel gives the pair function
//!
//! ```text
//! L_x L_x' k = f(x)^T [grad_x grad_x' k] f(x')
//!            + 1/2 f(x)  . grad_x  Delta^{Sigma'}_{x'} k
//!            + 1/2 f(x') . grad_x' Delta^{Sigma}_{x}  k
//!            + 1/4 Delta^{Sigma}_{x} Delta^{Sigma'}_{x'} k
//! ```
//!
//! where `Delta^C` is the `C`-weighted sum of unmixed second derivatives.
//! The deviation from stationarity is the double expectation of this pair
//! function under the data distribution; it is nonnegative in population (a
//! squared RKHS norm) and zero exactly when the distribution is stationary
//! for the model. [`kds_ustat`] is the unbiased U-statistic over all ordered
//! sample pairs, [`kds_linear`] the linear-time variant over consecutive
//! disjoint pairs, and [`kds_grad`] the analytic gradient with respect to all
//! trainable parameters, reusing the kernel quantities of each pair for both
//! the value and the gradient.
//!
//! Estimates are reported as-is: the empirical U-statistic may be negative,
//! and clamping would bias the training signal.
//!
//! # Determinism and concurrency
//!
//! The pair set is partitioned into fixed 64-row blocks that may be processed
//! by any number of worker threads; block results are reduced in block order.
//! The summation order is therefore a function of the input sizes alone, and
//! results are bit-identical for every worker count (stronger than the
//! documented 1e-12 relative summation-order tolerance).

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::kernel::KernelConfig;
use crate::models::{InterventionParams, ParamGrad, Sde, SdeModel};
use crate::{Error, Result};

/// Rows per parallel block of the pair partition. Fixed so that accumulation
/// order does not depend on the worker count.
const ROW_BLOCK: usize = 64;

/// Batch quantities shared by every pair: row-major samples and drifts, the
/// diffusion diagonal, and kernel constants.
struct Prepared {
    n: usize,
    d: usize,
    x: Vec<f64>,
    f: Vec<f64>,
    sigma2: Vec<f64>,
    /// `sum_j Sigma_jj`
    c_sum: f64,
    /// `sum_j Sigma_jj^2`
    c2_sum: f64,
    inv_g2: f64,
}

impl Prepared {
    fn new<S: Sde>(kernel: &KernelConfig, model: &S, data: &DMatrix<f64>) -> Self {
        let n = data.nrows();
        let d = data.ncols();
        assert_eq!(model.dim(), d, "model and data dimensions must match");
        let mut x = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                x[i * d + j] = data[(i, j)];
            }
        }
        let mut f = vec![0.0; n * d];
        for i in 0..n {
            model.drift_into(&x[i * d..(i + 1) * d], &mut f[i * d..(i + 1) * d]);
        }
        let mut sigma2 = vec![0.0; d];
        model.sigma2_into(&mut sigma2);
        let c_sum = sigma2.iter().sum();
        let c2_sum = sigma2.iter().map(|&s| s * s).sum();
        Self {
            n,
            d,
            x,
            f,
            sigma2,
            c_sum,
            c2_sum,
            inv_g2: kernel.inv_gamma2(),
        }
    }

    #[inline]
    fn row(&self, m: usize) -> (&[f64], &[f64]) {
        let lo = m * self.d;
        let hi = lo + self.d;
        (&self.x[lo..hi], &self.f[lo..hi])
    }
}

/// Scalar contractions of one sample pair, computed in a single pass.
struct PairScalars {
    k: f64,
    /// `f(x_m) . f(x_n)`
    ff: f64,
    /// `f(x_m) . r`, `f(x_n) . r` with `r = x_m - x_n`
    fmr: f64,
    fnr: f64,
    /// `f . (Sigma r)` for each side
    fmsr: f64,
    fnsr: f64,
    /// `sum_j Sigma_jj q_j` and `sum_j Sigma_jj^2 q_j` with `q_j = r_j^2/g^2`
    t: f64,
    t2: f64,
}

#[inline]
fn pair_scalars(p: &Prepared, m: usize, n: usize) -> PairScalars {
    let (xm, fm) = p.row(m);
    let (xn, fn_) = p.row(n);
    let g2 = p.inv_g2;
    let mut q = 0.0;
    let mut ff = 0.0;
    let mut fmr = 0.0;
    let mut fnr = 0.0;
    let mut fmsr = 0.0;
    let mut fnsr = 0.0;
    let mut t = 0.0;
    let mut t2 = 0.0;
    for i in 0..p.d {
        let r = xm[i] - xn[i];
        let qi = r * r * g2;
        let s = p.sigma2[i];
        q += qi;
        ff += fm[i] * fn_[i];
        fmr += fm[i] * r;
        fnr += fn_[i] * r;
        fmsr += fm[i] * s * r;
        fnsr += fn_[i] * s * r;
        t += s * qi;
        t2 += s * s * qi;
    }
    PairScalars {
        k: (-0.5 * q).exp(),
        ff,
        fmr,
        fnr,
        fmsr,
        fnsr,
        t,
        t2,
    }
}

/// Generator pair value from the cached scalars (both generator slots share
/// the same `Sigma`).
#[inline]
fn pair_value(p: &Prepared, s: &PairScalars) -> f64 {
    let g2 = p.inv_g2;
    let g4 = g2 * g2;
    let kg4 = s.k * g4;
    // representer of the weighted Laplacian: S = k g2 (T - C)
    let lap = s.k * g2 * (s.t - p.c_sum);
    let term1 = s.k * (s.ff * g2 - s.fmr * s.fnr * g4);
    let term2 = kg4 * s.fmsr - 0.5 * lap * g2 * s.fmr;
    let term3 = -(kg4 * s.fnsr - 0.5 * lap * g2 * s.fnr);
    let term4 = 0.25 * kg4 * (2.0 * (p.c2_sum - 2.0 * s.t2) + (p.c_sum - s.t) * (p.c_sum - s.t));
    term1 + term2 + term3 + term4
}

/// The generator bilinear form `L_x L_x' k(x, x')` for two (possibly
/// distinct) models sharing the kernel and dimension.
///
/// In estimator use both slots carry the same intervened model; the two-model
/// form exists so that tests can probe the bilinearity directly.
pub fn generator_pair<A: Sde, B: Sde>(
    kernel: &KernelConfig,
    model_x: &A,
    model_xp: &B,
    x: &DVector<f64>,
    xp: &DVector<f64>,
) -> f64 {
    let d = x.len();
    assert_eq!(xp.len(), d, "points must share dimension");
    assert_eq!(model_x.dim(), d, "model_x dimension mismatch");
    assert_eq!(model_xp.dim(), d, "model_xp dimension mismatch");
    let g2 = kernel.inv_gamma2();
    let g4 = g2 * g2;

    let fx = model_x.drift(x);
    let fxp = model_xp.drift(xp);
    let cx = model_x.sigma2();
    let cxp = model_xp.sigma2();

    let mut q = 0.0;
    let mut ff = 0.0;
    let mut fxr = 0.0;
    let mut fxpr = 0.0;
    let mut fx_cxp_r = 0.0;
    let mut fxp_cx_r = 0.0;
    let mut tx = 0.0;
    let mut txp = 0.0;
    let mut cross = 0.0;
    for i in 0..d {
        let r = x[i] - xp[i];
        let qi = r * r * g2;
        q += qi;
        ff += fx[i] * fxp[i];
        fxr += fx[i] * r;
        fxpr += fxp[i] * r;
        fx_cxp_r += fx[i] * cxp[i] * r;
        fxp_cx_r += fxp[i] * cx[i] * r;
        tx += cx[i] * qi;
        txp += cxp[i] * qi;
        cross += cx[i] * cxp[i] * (1.0 - 2.0 * qi);
    }
    let k = (-0.5 * q).exp();
    let csum_x: f64 = cx.iter().sum();
    let csum_xp: f64 = cxp.iter().sum();
    let lap_xp = k * g2 * (txp - csum_xp); // Delta^{Sigma'}_{x'} k
    let lap_x = k * g2 * (tx - csum_x); // Delta^{Sigma}_{x} k
    let term1 = k * (ff * g2 - fxr * fxpr * g4);
    let term2 = k * g4 * fx_cxp_r - 0.5 * lap_xp * g2 * fxr;
    let term3 = -(k * g4 * fxp_cx_r - 0.5 * lap_x * g2 * fxpr);
    let term4 = 0.25 * k * g4 * (2.0 * cross + (csum_x - tx) * (csum_xp - txp));
    term1 + term2 + term3 + term4
}

fn check_sample_count(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::EstimatorUndefined(n));
    }
    Ok(())
}

/// Unbiased quadratic-cost estimate: the mean of the generator pair function
/// over all ordered pairs of distinct samples,
/// `1/(N(N-1)) sum_m sum_{n != m} L_x L_x' k(x^m, x^n)`.
///
/// Invariant under row permutations (up to summation order); may be negative.
pub fn kds_ustat<S: Sde>(kernel: &KernelConfig, model: &S, data: &DMatrix<f64>) -> Result<f64> {
    check_sample_count(data.nrows())?;
    let p = Prepared::new(kernel, model, data);
    let n = p.n;
    let n_blocks = n.div_ceil(ROW_BLOCK);
    let partials: Vec<f64> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let m0 = b * ROW_BLOCK;
            let m1 = (m0 + ROW_BLOCK).min(n);
            let mut acc = 0.0;
            for m in m0..m1 {
                for nn in (m + 1)..n {
                    let s = pair_scalars(&p, m, nn);
                    acc += pair_value(&p, &s);
                }
            }
            acc
        })
        .collect();
    // each unordered pair stands for two equal ordered terms
    let total: f64 = partials.iter().sum();
    Ok(2.0 * total / (n as f64 * (n as f64 - 1.0)))
}

/// Linear-cost unbiased estimate over the `floor(N/2)` disjoint pairs
/// `(x^1, x^2), (x^3, x^4), ...` in dataset order.
///
/// Unlike [`kds_ustat`] this depends on the row order; with `N = 2` the two
/// estimators coincide.
pub fn kds_linear<S: Sde>(kernel: &KernelConfig, model: &S, data: &DMatrix<f64>) -> Result<f64> {
    check_sample_count(data.nrows())?;
    let p = Prepared::new(kernel, model, data);
    let pairs = p.n / 2;
    let mut acc = 0.0;
    for m in 0..pairs {
        let s = pair_scalars(&p, 2 * m, 2 * m + 1);
        acc += pair_value(&p, &s);
    }
    Ok(acc / pairs as f64)
}

/// Value and analytic gradients of [`kds_ustat`] for an intervened model.
#[derive(Debug, Clone)]
pub struct KdsGradients {
    pub value: f64,
    /// Gradient with respect to the model parameters; fixed entries are zero.
    pub theta: ParamGrad,
    /// Gradient with respect to the intervention shifts, aligned with
    /// `phi.targets()`.
    pub delta: Vec<f64>,
}

struct BlockAccum {
    value: f64,
    /// Per-sample drift cotangents, row-major `n x d`.
    cot: Vec<f64>,
    /// Accumulated `d(sum of pair terms)/d Sigma_jj`.
    dsigma: Vec<f64>,
}

/// Gradient of the U-statistic with respect to all trainable parameters of
/// `model` and the shifts of `phi`.
///
/// Per ordered pair the drift enters through the cotangent
/// `a(x^m) = [grad grad' k] f(x^n) + 1/2 grad_x Delta^{Sigma}_{x'} k`
/// accumulated over partner samples and pulled back through the drift
/// vector-Jacobian product; the diffusion log-scales enter through
/// `d Sigma_jj / d s_j = 2 Sigma_jj`, and each shift `delta_t` exactly like
/// the drift bias of its target coordinate.
pub fn kds_grad(
    kernel: &KernelConfig,
    model: &SdeModel,
    phi: &InterventionParams,
    data: &DMatrix<f64>,
) -> Result<KdsGradients> {
    check_sample_count(data.nrows())?;
    let view = crate::models::apply_intervention(model, phi)?;
    let p = Prepared::new(kernel, &view, data);
    let (n, d) = (p.n, p.d);
    let g2 = p.inv_g2;
    let g4 = g2 * g2;

    let n_blocks = n.div_ceil(ROW_BLOCK);
    let blocks: Vec<BlockAccum> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let m0 = b * ROW_BLOCK;
            let m1 = (m0 + ROW_BLOCK).min(n);
            let mut acc = BlockAccum {
                value: 0.0,
                cot: vec![0.0; n * d],
                dsigma: vec![0.0; d],
            };
            for m in m0..m1 {
                for nn in (m + 1)..n {
                    let s = pair_scalars(&p, m, nn);
                    acc.value += pair_value(&p, &s);
                    let (xm, fm) = p.row(m);
                    let (xn, fn_) = p.row(nn);
                    let kg2 = s.k * g2;
                    let kg4 = s.k * g4;
                    let lap = kg2 * (s.t - p.c_sum);
                    // coefficients of r in the two slot-x cotangents
                    let coef_m = -kg4 * s.fnr - 0.5 * lap * g2;
                    let coef_n = -kg4 * s.fmr + 0.5 * lap * g2;
                    let c_t = p.c_sum - s.t;
                    let cm = &mut acc.cot[m * d..(m + 1) * d];
                    for i in 0..d {
                        let r = xm[i] - xn[i];
                        cm[i] += kg2 * fn_[i] + r * (kg4 * p.sigma2[i] + coef_m);
                    }
                    let cn = &mut acc.cot[nn * d..(nn + 1) * d];
                    for i in 0..d {
                        let r = xm[i] - xn[i];
                        cn[i] += kg2 * fm[i] + r * (-kg4 * p.sigma2[i] + coef_n);
                    }
                    for j in 0..d {
                        let r = xm[j] - xn[j];
                        let qj = r * r * g2;
                        let hj = kg2 * (qj - 1.0);
                        let dsig = kg4 * r * (fm[j] - fn_[j])
                            - 0.5 * g2 * hj * (s.fmr - s.fnr)
                            + 0.5 * kg4 * (2.0 * p.sigma2[j] * (1.0 - 2.0 * qj) + c_t * (1.0 - qj));
                        // the value is even under swapping the pair, so the
                        // reversed ordered pair contributes the same amount
                        acc.dsigma[j] += 2.0 * dsig;
                    }
                }
            }
            acc
        })
        .collect();

    let mut value = 0.0;
    let mut cot = vec![0.0; n * d];
    let mut dsigma = vec![0.0; d];
    for b in &blocks {
        value += b.value;
        for (a, v) in cot.iter_mut().zip(&b.cot) {
            *a += v;
        }
        for (a, v) in dsigma.iter_mut().zip(&b.dsigma) {
            *a += v;
        }
    }

    let pairs_norm = 1.0 / (n as f64 * (n as f64 - 1.0));
    let value = 2.0 * value * pairs_norm;

    let mut theta = ParamGrad::zeros_like(model);
    let mut delta = vec![0.0; phi.targets().len()];
    let scale = 2.0 * pairs_norm;
    for m in 0..n {
        let (xm, _) = p.row(m);
        let cm = &cot[m * d..(m + 1) * d];
        model.drift.accumulate_vjp(xm, cm, scale, &mut theta.drift);
        for (slot, &t) in phi.targets().iter().enumerate() {
            delta[slot] += scale * cm[t];
        }
    }
    for j in 0..d {
        theta.log_scale[j] = dsigma[j] * pairs_norm * 2.0 * p.sigma2[j];
    }

    Ok(KdsGradients {
        value,
        theta,
        delta,
    })
}

/// Deterministic tensor-product Gauss-Hermite estimate of the population
/// objective `E_{x, x' ~ N(mean, cov)}[L_x L_x' k(x, x')]`.
///
/// Supports `d <= 2` with at least 30 points per axis; intended as a test
/// oracle, not a training path. The value is a squared RKHS norm in
/// population, hence nonnegative up to quadrature error.
pub fn population_kds_oracle<S: Sde>(
    kernel: &KernelConfig,
    model: &S,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    points_per_axis: usize,
) -> Result<f64> {
    let d = model.dim();
    if d > 2 {
        return Err(Error::Unsupported(format!(
            "population oracle supports d <= 2, got {d}"
        )));
    }
    if points_per_axis < 30 {
        return Err(Error::Config(format!(
            "population oracle needs at least 30 quadrature points per axis, got {points_per_axis}"
        )));
    }
    assert_eq!(mean.len(), d, "target mean dimension mismatch");
    assert!(
        cov.nrows() == d && cov.ncols() == d,
        "target covariance dimension mismatch"
    );
    let chol = nalgebra::Cholesky::new(cov.clone())
        .ok_or_else(|| Error::Config("target covariance must be positive definite".to_string()))?;
    let l = chol.l();

    let (nodes_1d, weights_1d) = gauss_hermite(points_per_axis);

    // tensor product nodes mapped through x = mean + sqrt(2) L z, with the
    // product weights normalized by pi^{d/2}
    let mut nodes: Vec<DVector<f64>> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    let norm = std::f64::consts::PI.powf(d as f64 / 2.0);
    match d {
        1 => {
            for (z, w) in nodes_1d.iter().zip(&weights_1d) {
                nodes.push(mean + &l * DVector::from_vec(vec![std::f64::consts::SQRT_2 * z]));
                weights.push(w / norm);
            }
        }
        2 => {
            for (z1, w1) in nodes_1d.iter().zip(&weights_1d) {
                for (z2, w2) in nodes_1d.iter().zip(&weights_1d) {
                    let z =
                        DVector::from_vec(vec![std::f64::consts::SQRT_2 * z1, std::f64::consts::SQRT_2 * z2]);
                    nodes.push(mean + &l * z);
                    weights.push(w1 * w2 / norm);
                }
            }
        }
        _ => unreachable!(),
    }

    // precompute drifts once, then reuse the fused pair evaluation
    let nn = nodes.len();
    let mut data = DMatrix::zeros(nn, d);
    for (i, node) in nodes.iter().enumerate() {
        for j in 0..d {
            data[(i, j)] = node[j];
        }
    }
    let p = Prepared::new(kernel, model, &data);
    let mut total = 0.0;
    for i in 0..nn {
        let s = pair_scalars(&p, i, i);
        total += weights[i] * weights[i] * pair_value(&p, &s);
        for j in (i + 1)..nn {
            let s = pair_scalars(&p, i, j);
            total += 2.0 * weights[i] * weights[j] * pair_value(&p, &s);
        }
    }
    Ok(total)
}

/// Gauss-Hermite nodes and weights for weight function `exp(-z^2)`, via the
/// symmetric tridiagonal Jacobi matrix (Golub-Welsch).
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut jacobi = DMatrix::zeros(n, n);
    for k in 1..n {
        let off = (k as f64 / 2.0).sqrt();
        jacobi[(k - 1, k)] = off;
        jacobi[(k, k - 1)] = off;
    }
    let eig = nalgebra::SymmetricEigen::new(jacobi);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let mu0 = std::f64::consts::PI.sqrt();
    let nodes: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let weights: Vec<f64> = order
        .iter()
        .map(|&i| {
            let v0 = eig.eigenvectors[(0, i)];
            mu0 * v0 * v0
        })
        .collect();
    (nodes, weights)
}
