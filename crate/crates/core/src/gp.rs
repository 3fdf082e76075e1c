//! Gaussian process over (time, angle).
//!
//! The covariance is `σ² exp(−σ⁴ (t₁−t₂)²) cos(θ₁−θ₂)`. It arises from
//! convolving a Gaussian kernel in time and a half-period cosine kernel in
//! angle with white noise; [`convolution_cov_quadrature`] evaluates that
//! construction numerically so the closed form can be checked against it.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use nalgebra::{DMatrix, DVector, Vector4};

use crate::circular::{Angle, mod_2pi};
use crate::error::{Error, Result};
use crate::linalg::{Factor, JitterPolicy};
use crate::quadrature::{GaussLegendre, composite};

/// An input `(t, θ)` to the linear-circular process.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinCircPoint {
    pub t: f64,
    pub theta: Angle,
}

impl LinCircPoint {
    pub fn new(t: f64, theta: f64) -> Result<Self> {
        if !t.is_finite() {
            return Err(Error::NonFinite("time coordinate"));
        }
        Ok(Self { t, theta: mod_2pi(theta)? })
    }

    pub fn from_angle(t: f64, theta: Angle) -> Self {
        Self { t, theta }
    }
}

/// Process scale `σ`. The kernel bandwidth is `ψ = 1/(2σ²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpScale {
    sigma: f64,
}

impl GpScale {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::invalid(format!("GP scale must be positive, got {sigma}")));
        }
        Ok(Self { sigma })
    }

    pub fn from_variance(sigma2: f64) -> Result<Self> {
        Self::new(sigma2.sqrt())
    }

    pub fn from_psi(psi: f64) -> Result<Self> {
        if !(psi > 0.0) {
            return Err(Error::invalid("kernel bandwidth must be positive"));
        }
        Self::new((0.5 / psi).sqrt())
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma * self.sigma
    }

    pub fn psi(&self) -> f64 {
        0.5 / self.sigma2()
    }

    /// Time-decay rate `σ⁴`.
    fn decay(&self) -> f64 {
        let s2 = self.sigma2();
        s2 * s2
    }
}

/// Regression basis `(1, t, cos θ, sin θ)`.
pub fn basis_h(p: &LinCircPoint) -> Vector4<f64> {
    let th = p.theta.value();
    Vector4::new(1.0, p.t, th.cos(), th.sin())
}

/// Correlation `exp(−σ⁴Δt²) cos(Δθ)`.
#[inline]
pub fn correlation(p1: &LinCircPoint, p2: &LinCircPoint, s: &GpScale) -> f64 {
    let dt = p1.t - p2.t;
    (-s.decay() * dt * dt).exp() * angle_cos(p1.theta.value() - p2.theta.value())
}

/// `cos d` for `d ∈ (−2π, 2π)`, exactly zero at `d = ±π/2`.
#[inline]
fn angle_cos(d: f64) -> f64 {
    let d = d.abs();
    let d = if d > PI { TAU - d } else { d };
    (FRAC_PI_2 - d).sin()
}

pub fn cov(p1: &LinCircPoint, p2: &LinCircPoint, s: &GpScale) -> f64 {
    s.sigma2() * correlation(p1, p2, s)
}

/// Correlation matrix `A` (unit diagonal).
pub fn corr_matrix(points: &[LinCircPoint], s: &GpScale) -> DMatrix<f64> {
    let n = points.len();
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n {
        a[(i, i)] = 1.0;
        for j in 0..i {
            let c = correlation(&points[i], &points[j], s);
            a[(i, j)] = c;
            a[(j, i)] = c;
        }
    }
    a
}

/// Covariance matrix `σ² A`.
pub fn cov_matrix(points: &[LinCircPoint], s: &GpScale) -> DMatrix<f64> {
    corr_matrix(points, s) * s.sigma2()
}

/// Correlations between each query and each training point (`queries × train`).
pub fn cross_corr(queries: &[LinCircPoint], train: &[LinCircPoint], s: &GpScale) -> DMatrix<f64> {
    DMatrix::from_fn(queries.len(), train.len(), |i, j| correlation(&queries[i], &train[j], s))
}

/// Correlation vector `s(p) = (c(p, p₁), …, c(p, pₙ))`.
pub fn corr_vector(p: &LinCircPoint, train: &[LinCircPoint], s: &GpScale) -> DVector<f64> {
    DVector::from_iterator(train.len(), train.iter().map(|q| correlation(p, q, s)))
}

/// Design matrix with rows `h(p)'`.
pub fn design_matrix(points: &[LinCircPoint]) -> DMatrix<f64> {
    let mut h = DMatrix::zeros(points.len(), 4);
    for (i, p) in points.iter().enumerate() {
        h.set_row(i, &basis_h(p).transpose());
    }
    h
}

/// Clamps a slightly negative conditional variance to zero; larger negative
/// values mean the conditioning broke down.
pub(crate) fn clamp_variance(v: f64, sigma2: f64, context: &str) -> Result<f64> {
    if v >= 0.0 {
        Ok(v)
    } else if v >= -1e-8 * sigma2 {
        if v < -1e-12 * sigma2 {
            log::warn!("{context}: conditional variance {v:e} clamped to 0");
        }
        Ok(0.0)
    } else {
        Err(Error::Degenerate(format!("{context}: conditional variance {v:e} is negative")))
    }
}

/// Noise-free GP regression: moments of the process at `query` given its
/// values at `train`, with mean function `h'β`.
pub fn gp_condition(
    train: &[LinCircPoint],
    values: &DVector<f64>,
    query: &[LinCircPoint],
    beta: &Vector4<f64>,
    s: &GpScale,
    policy: &JitterPolicy,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if values.len() != train.len() {
        return Err(Error::invalid("training values and points differ in length"));
    }
    let hq = design_matrix(query);
    let prior_mean = &hq * beta;
    let cqq = corr_matrix(query, s);
    if train.is_empty() {
        return Ok((prior_mean, cqq * s.sigma2()));
    }
    let a = corr_matrix(train, s);
    let factor = Factor::new(&a, policy, "GP training correlation")?;
    let resid = values - design_matrix(train) * beta;
    let cross = cross_corr(train, query, s); // train × query
    let weights = factor.solve_mat(&cross);
    let mean = prior_mean + weights.transpose() * resid;
    let mut c = (cqq - cross.transpose() * &weights) * s.sigma2();
    crate::linalg::symmetrize(&mut c);
    for i in 0..c.nrows() {
        c[(i, i)] = clamp_variance(c[(i, i)], s.sigma2(), "gp_condition")?;
    }
    Ok((mean, c))
}

/// Quadrature estimate with a bound on its error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureEstimate {
    pub value: f64,
    pub error: f64,
}

/// Covariance of the kernel-convolution construction, evaluated numerically:
///
/// `ψ⁻² π^{−3/2} ∫ exp(−((y−t₁)² + (y−t₂)²)/(2ψ²)) dy · ∫₀^π cos(u−θ₁) cos(u−θ₂) du`.
///
/// The time integral runs over `±8ψ` around the midpoint of `t₁, t₂`. The
/// reported error is the gap between `n_quad` and `n_quad/2` node rules.
pub fn convolution_cov_quadrature(
    p1: &LinCircPoint,
    p2: &LinCircPoint,
    psi: f64,
    n_quad: usize,
) -> Result<QuadratureEstimate> {
    if !(psi > 0.0) || !psi.is_finite() {
        return Err(Error::invalid("kernel bandwidth must be positive"));
    }
    if n_quad < 1000 {
        return Err(Error::invalid("quadrature needs at least 1000 nodes"));
    }
    const ORDER: usize = 20;
    let rule = GaussLegendre::new(ORDER);
    let (t1, t2) = (p1.t, p2.t);
    let (th1, th2) = (p1.theta.value(), p2.theta.value());
    let mid = 0.5 * (t1 + t2);
    // widen so both kernels are covered even when t₁, t₂ are far apart
    let half = 8.0 * psi + 0.5 * (t1 - t2).abs();
    let time_integrand = |y: f64| {
        let a = y - t1;
        let b = y - t2;
        (-(a * a + b * b) / (2.0 * psi * psi)).exp()
    };
    let angle_integrand = |u: f64| (u - th1).cos() * (u - th2).cos();

    let estimate = |nodes: usize| {
        let panels = (nodes / ORDER).max(1);
        let ti = composite(&rule, time_integrand, mid - half, mid + half, panels);
        let ai = composite(&rule, angle_integrand, 0.0, std::f64::consts::PI, panels.min(64));
        ti * ai / (psi * psi * std::f64::consts::PI.powf(1.5))
    };
    let fine = estimate(n_quad);
    let coarse = estimate(n_quad / 2);
    let error = (fine - coarse).abs();
    let tolerance = 1e-9 * (1.0 + fine.abs());
    if error > tolerance {
        return Err(Error::Quadrature { error, tolerance });
    }
    Ok(QuadratureEstimate { value: fine, error })
}
