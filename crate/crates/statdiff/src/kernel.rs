//! Gaussian kernel and the cross-derivative quantities used by the generator
//! bilinear form.
//!
//! Everything here is a closed form in the difference `r = x - x'`. For the
//! Gaussian kernel `k(x, x') = exp(-||r||^2 / 2 gamma^2)` the derivatives that
//! appear when applying a second-order differential operator to each argument
//! of `k` are polynomials in `r` times `k`:
//!
//! - first derivative: `d k / d x_i = -(r_i / g^2) k`
//! - cross Hessian: `d^2 k / d x_i d x'_j = (delta_ij / g^2 - r_i r_j / g^4) k`
//! - unmixed second derivative (either argument):
//!   `d^2 k / d x'_j^2 = (r_j^2 / g^4 - 1 / g^2) k`
//! - the weighted third- and fourth-order contractions below.
//!
//! Closed forms are used instead of automatic differentiation so that the
//! shared factors (`k`, `r`, `||r||^2`) are computed once per pair and reused
//! across all contractions; the estimator loops in [`crate::kds`] rely on
//! this. Each operation is checked against central finite differences of
//! [`KernelConfig::eval`] in the test suite.

use crate::{Error, Result};

/// Gaussian kernel with bandwidth `gamma`.
///
/// `k(x, x') = exp(-||x - x'||^2 / (2 gamma^2))`, so `k(x, x) = 1` and the
/// kernel is symmetric in its arguments. Rescaling inputs and bandwidth
/// together (`x -> a x`, `gamma -> a gamma`) leaves the kernel unchanged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelConfig {
    gamma: f64,
}

impl KernelConfig {
    /// Creates a kernel configuration. `gamma` must be strictly positive and
    /// finite; degenerate bandwidths are rejected rather than clamped.
    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::Config(format!(
                "kernel bandwidth must be a positive finite number, got {gamma}"
            )));
        }
        Ok(Self { gamma })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    #[inline]
    pub(crate) fn inv_gamma2(&self) -> f64 {
        1.0 / (self.gamma * self.gamma)
    }

    /// Kernel value `exp(-||x - x'||^2 / 2 gamma^2)`, in `(0, 1]`.
    pub fn eval(&self, x: &[f64], xp: &[f64]) -> f64 {
        assert_eq!(x.len(), xp.len(), "kernel arguments must share dimension");
        let g2 = self.inv_gamma2();
        let sq: f64 = x.iter().zip(xp).map(|(a, b)| (a - b) * (a - b)).sum();
        (-0.5 * sq * g2).exp()
    }

    /// First derivative with respect to the first argument,
    /// `(grad_x k)(x, x') = -(r / gamma^2) k` with `r = x - x'`.
    pub fn grad_x(&self, x: &[f64], xp: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), xp.len(), "kernel arguments must share dimension");
        let g2 = self.inv_gamma2();
        let k = self.eval(x, xp);
        x.iter()
            .zip(xp)
            .map(|(a, b)| -(a - b) * g2 * k)
            .collect()
    }

    /// Bilinear form of the cross Hessian, `u^T [d^2 k / dx dx'] v`.
    ///
    /// The cross Hessian is `(delta_ij / g^2 - r_i r_j / g^4) k`, so the
    /// contraction needs only the three dot products `u.v`, `u.r`, `v.r`. At
    /// `x = x'` the matrix is `I / gamma^2`.
    pub fn cross_hessian_bilinear(&self, x: &[f64], xp: &[f64], u: &[f64], v: &[f64]) -> f64 {
        let d = x.len();
        assert!(
            xp.len() == d && u.len() == d && v.len() == d,
            "kernel arguments must share dimension"
        );
        let g2 = self.inv_gamma2();
        let mut sq = 0.0;
        let mut uv = 0.0;
        let mut ur = 0.0;
        let mut vr = 0.0;
        for i in 0..d {
            let r = x[i] - xp[i];
            sq += r * r;
            uv += u[i] * v[i];
            ur += u[i] * r;
            vr += v[i] * r;
        }
        let k = (-0.5 * sq * g2).exp();
        k * (uv * g2 - ur * vr * g2 * g2)
    }

    /// Gradient with respect to `x` of the `c`-weighted Laplacian in `x'`:
    /// `grad_x [ sum_j c_j d^2 k / d x'_j^2 ]`.
    ///
    /// Component `i` equals `(r_i k / g^4) (2 c_i + C - T)` where
    /// `C = sum_j c_j` and `T = sum_j c_j r_j^2 / g^2`. For uniform unit
    /// weights this is `(r_i / g^4)(2 + d - ||r||^2 / g^2) k`. The weights are
    /// diffusion diagonals, hence must be nonnegative.
    pub fn grad_weighted_laplacian(&self, x: &[f64], xp: &[f64], c: &[f64]) -> Result<Vec<f64>> {
        let d = x.len();
        assert!(
            xp.len() == d && c.len() == d,
            "kernel arguments must share dimension"
        );
        check_weights(c)?;
        let g2 = self.inv_gamma2();
        let mut sq = 0.0;
        let mut csum = 0.0;
        let mut t = 0.0;
        for i in 0..d {
            let r = x[i] - xp[i];
            sq += r * r;
            csum += c[i];
            t += c[i] * r * r * g2;
        }
        let k = (-0.5 * sq * g2).exp();
        let g4 = g2 * g2;
        Ok((0..d)
            .map(|i| {
                let r = x[i] - xp[i];
                r * k * g4 * (2.0 * c[i] + csum - t)
            })
            .collect())
    }

    /// Doubly weighted bilaplacian
    /// `sum_i cx_i d^2/dx_i^2 [ sum_j cxp_j d^2 k / d x'_j^2 ]`.
    ///
    /// In terms of `q_i = r_i^2 / g^2`, `C = sum cx`, `T = sum cx_i q_i`,
    /// `C' = sum cxp`, `T' = sum cxp_j q_j`:
    ///
    /// `(k / g^4) [ 2 sum_i cx_i cxp_i (1 - 2 q_i) + (C - T)(C' - T') ]`
    ///
    /// At `r = 0` with uniform unit weights this reduces to `d (d + 2) / g^4`.
    pub fn weighted_bilaplacian(&self, x: &[f64], xp: &[f64], cx: &[f64], cxp: &[f64]) -> Result<f64> {
        let d = x.len();
        assert!(
            xp.len() == d && cx.len() == d && cxp.len() == d,
            "kernel arguments must share dimension"
        );
        check_weights(cx)?;
        check_weights(cxp)?;
        let g2 = self.inv_gamma2();
        let mut sq = 0.0;
        let mut cross = 0.0;
        let mut c = 0.0;
        let mut t = 0.0;
        let mut cp = 0.0;
        let mut tp = 0.0;
        for i in 0..d {
            let r = x[i] - xp[i];
            let q = r * r * g2;
            sq += r * r;
            cross += cx[i] * cxp[i] * (1.0 - 2.0 * q);
            c += cx[i];
            t += cx[i] * q;
            cp += cxp[i];
            tp += cxp[i] * q;
        }
        let k = (-0.5 * sq * g2).exp();
        Ok(k * g2 * g2 * (2.0 * cross + (c - t) * (cp - tp)))
    }
}

fn check_weights(c: &[f64]) -> Result<()> {
    for (i, &w) in c.iter().enumerate() {
        if !(w.is_finite() && w >= 0.0) {
            return Err(Error::Domain(format!(
                "diffusion weight {i} must be nonnegative and finite, got {w}"
            )));
        }
    }
    Ok(())
}
