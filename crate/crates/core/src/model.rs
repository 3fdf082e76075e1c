//! The hierarchical model: parameters and priors, the look-up grid with the
//! conditionals of the grid values `D_z`, the observation layer, and a
//! forward sampler for complete latent paths.
//!
//! Model time runs `1..=T` for observations and `T+1` for the one-step-ahead
//! state. The transition into `x_t` evaluates `g*` at `(t, x_{t−1})`.

use std::f64::consts::TAU;

use nalgebra::{DMatrix, DVector, Vector4};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::circular::{Angle, VonMisesParams, WrapCounter, von_mises_sample};
use crate::error::{Error, Result};
use crate::gp::{
    GpScale, LinCircPoint, basis_h, clamp_variance, corr_matrix, corr_vector, cov_matrix,
    design_matrix,
};
use crate::linalg::{Factor, JitterPolicy};

// ---------------------------------------------------------------------------
// Priors

/// Prior on a variance parameter.
///
/// `InverseGamma { alpha, gamma }` has density proportional to
/// `v^{−(α+2)/2} exp(−γ/(2v))`, i.e. an inverse gamma with shape `α/2` and
/// scale `γ/2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VariancePrior {
    InverseGamma { alpha: f64, gamma: f64 },
    Fixed { value: f64 },
}

impl VariancePrior {
    pub fn validate(&self) -> Result<()> {
        match *self {
            VariancePrior::InverseGamma { alpha, gamma } if alpha > 0.0 && gamma > 0.0 => Ok(()),
            VariancePrior::Fixed { value } if value > 0.0 && value.is_finite() => Ok(()),
            _ => Err(Error::invalid(format!("bad variance prior {self:?}"))),
        }
    }

    /// Normalized log density at `v`.
    pub fn log_density(&self, v: f64) -> f64 {
        match *self {
            VariancePrior::InverseGamma { alpha, gamma } => {
                if v <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                let (a, b) = (0.5 * alpha, 0.5 * gamma);
                a * b.ln() - ln_gamma(a) - (a + 1.0) * v.ln() - b / v
            }
            VariancePrior::Fixed { value } => {
                if v == value {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    pub fn mode(&self) -> f64 {
        match *self {
            VariancePrior::InverseGamma { alpha, gamma } => gamma / (alpha + 2.0),
            VariancePrior::Fixed { value } => value,
        }
    }

    pub fn is_fixed(&self) -> bool {
        matches!(self, VariancePrior::Fixed { .. })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            VariancePrior::InverseGamma { alpha, gamma } => {
                let g = Gamma::new(0.5 * alpha, 2.0 / gamma).expect("validated prior");
                1.0 / g.sample(rng)
            }
            VariancePrior::Fixed { value } => value,
        }
    }
}

/// Multivariate normal prior.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalPrior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl NormalPrior {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::invalid("prior mean and covariance dimensions differ"));
        }
        if (&cov - cov.transpose()).amax() > 1e-12 * (1.0 + cov.amax()) {
            return Err(Error::invalid("prior covariance is not symmetric"));
        }
        if !mean.is_empty() && cov.clone().symmetric_eigenvalues().min() < -1e-12 * (1.0 + cov.amax()) {
            return Err(Error::invalid("prior covariance is not positive semidefinite"));
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Marginal over the listed components.
    pub fn marginal(&self, idx: &[usize]) -> NormalPrior {
        NormalPrior {
            mean: DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.mean[i])),
            cov: DMatrix::from_fn(idx.len(), idx.len(), |a, b| self.cov[(idx[a], idx[b])]),
        }
    }

    pub fn precision(&self) -> Result<DMatrix<f64>> {
        Ok(Factor::new(&self.cov, &JitterPolicy::default(), "normal prior covariance")?.inverse())
    }

    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        let f = Factor::new(&self.cov, &JitterPolicy::default(), "normal prior covariance")?;
        Ok(f.mvn_log_pdf(x, &self.mean))
    }

    /// Components with zero prior variance are returned at their mean.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DVector<f64>> {
        let live: Vec<usize> = (0..self.dim()).filter(|&i| self.cov[(i, i)] > 0.0).collect();
        let mut out = self.mean.clone();
        if live.is_empty() {
            return Ok(out);
        }
        let sub = self.marginal(&live);
        let f = Factor::new(&sub.cov, &JitterPolicy::default(), "normal prior covariance")?;
        let draw = f.color(&standard_normal_vec(live.len(), rng));
        for (k, &i) in live.iter().enumerate() {
            out[i] += draw[k];
        }
        Ok(out)
    }
}

pub(crate) fn standard_normal_vec<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(rng)))
}

/// All prior hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSpec {
    pub x0: VonMisesParams,
    pub sigma2_eps: VariancePrior,
    pub sigma2_eta: VariancePrior,
    pub sigma2_f: VariancePrior,
    pub sigma2_g: VariancePrior,
    /// Normal prior on the four components of `β_f`.
    pub beta_f: NormalPrior,
    /// Normal prior on all four components of `β_g`; only the free components
    /// (see [`ModelParams::beta_g_fixed`]) enter the posterior.
    pub beta_g: NormalPrior,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self {
            x0: VonMisesParams { mu: std::f64::consts::PI, kappa: 1.0 },
            sigma2_eps: VariancePrior::InverseGamma { alpha: 4.01, gamma: 0.005 * 5.01 },
            sigma2_eta: VariancePrior::InverseGamma { alpha: 4.01, gamma: 0.1 * 5.01 },
            sigma2_f: VariancePrior::InverseGamma { alpha: 4.01, gamma: 0.1 * 5.01 },
            sigma2_g: VariancePrior::InverseGamma { alpha: 4.01, gamma: 0.1 * 5.01 },
            beta_f: NormalPrior {
                mean: DVector::zeros(4),
                cov: DMatrix::identity(4, 4),
            },
            beta_g: NormalPrior {
                mean: DVector::from_vec(vec![2.5, 0.04, 1.0, 1.0]),
                cov: DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0, 0.0, 0.0])),
            },
        }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        VonMisesParams::new(self.x0.mu, self.x0.kappa)?;
        for p in [self.sigma2_eps, self.sigma2_eta, self.sigma2_f, self.sigma2_g] {
            p.validate()?;
        }
        if self.beta_f.dim() != 4 || self.beta_g.dim() != 4 {
            return Err(Error::invalid("regression priors must be four-dimensional"));
        }
        NormalPrior::new(self.beta_f.mean.clone(), self.beta_f.cov.clone())?;
        NormalPrior::new(self.beta_g.mean.clone(), self.beta_g.cov.clone())?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Parameters

/// Regression coefficients and variances of both layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub beta_f: Vector4<f64>,
    pub beta_g: Vector4<f64>,
    /// Components of `β_g` held fixed; the default fixes the cosine and sine
    /// coefficients, which are not identified separately from the latent angle.
    pub beta_g_fixed: [bool; 4],
    pub sigma2_eps: f64,
    pub sigma2_eta: f64,
    pub sigma2_f: f64,
    pub sigma2_g: f64,
}

pub const DEFAULT_BETA_G_FIXED: [bool; 4] = [false, false, true, true];

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sigma2_eps", self.sigma2_eps),
            ("sigma2_eta", self.sigma2_eta),
            ("sigma2_f", self.sigma2_f),
            ("sigma2_g", self.sigma2_g),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.beta_f.iter().chain(self.beta_g.iter()).any(|b| !b.is_finite()) {
            return Err(Error::NonFinite("regression coefficients"));
        }
        Ok(())
    }

    /// Prior means for the coefficients, prior modes for `σ²_ε` and `σ²_f`,
    /// and the supplied values for `σ²_g`, `σ²_η`.
    pub fn from_prior(prior: &PriorSpec, sigma2_g: f64, sigma2_eta: f64) -> Result<Self> {
        let p = Self {
            beta_f: Vector4::from_iterator(prior.beta_f.mean.iter().copied()),
            beta_g: Vector4::from_iterator(prior.beta_g.mean.iter().copied()),
            beta_g_fixed: DEFAULT_BETA_G_FIXED,
            sigma2_eps: prior.sigma2_eps.mode(),
            sigma2_eta,
            sigma2_f: prior.sigma2_f.mode(),
            sigma2_g,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn scale_f(&self) -> GpScale {
        GpScale::from_variance(self.sigma2_f).expect("validated variance")
    }

    pub fn scale_g(&self) -> GpScale {
        GpScale::from_variance(self.sigma2_g).expect("validated variance")
    }

    /// Indices of the free components of `β_g`.
    pub fn beta_g_free(&self) -> Vec<usize> {
        (0..4).filter(|&i| !self.beta_g_fixed[i]).collect()
    }
}

// ---------------------------------------------------------------------------
// Look-up grid

/// How grid times are placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridMode {
    /// Times drawn from `[2πi/n, 2π(i+1)/n]`, the same subintervals as the angles.
    AngleRange,
    /// Times drawn from the `i`-th of `n` equal subintervals of the time range.
    #[default]
    TimeScaled,
}

/// Grid points `(t_i, z_i)` with their correlation matrix and its factor.
#[derive(Debug, Clone)]
pub struct LookupGrid {
    points: Vec<LinCircPoint>,
    corr: DMatrix<f64>,
    design: DMatrix<f64>,
    factor: Factor,
    scale: GpScale,
}

const GRID_ATTEMPTS: usize = 5;

/// Draws a grid of `n` points: angular midpoints of `n` equal arcs and one
/// uniform time per subinterval. A grid whose correlation matrix cannot be
/// factorized is redrawn, up to five times.
pub fn build_grid<R: Rng + ?Sized>(
    n: usize,
    t_range: (f64, f64),
    mode: GridMode,
    scale: &GpScale,
    policy: &JitterPolicy,
    rng: &mut R,
) -> Result<LookupGrid> {
    if n < 2 {
        return Err(Error::invalid("look-up grid needs at least 2 points"));
    }
    let (lo, hi) = match mode {
        GridMode::AngleRange => (0.0, TAU),
        GridMode::TimeScaled => t_range,
    };
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::invalid(format!("bad grid time range ({lo}, {hi})")));
    }
    let width = (hi - lo) / n as f64;
    let mut last_err = None;
    for _ in 0..GRID_ATTEMPTS {
        let points: Vec<LinCircPoint> = (0..n)
            .map(|i| {
                let z = (2 * i + 1) as f64 * std::f64::consts::PI / n as f64;
                let t = lo + width * (i as f64 + rng.random::<f64>());
                LinCircPoint::from_angle(t, Angle::new(z).expect("finite"))
            })
            .collect();
        match LookupGrid::from_points(points, *scale, policy) {
            Ok(g) => return Ok(g),
            Err(e) => {
                log::warn!("look-up grid rejected, redrawing: {e}");
                last_err = Some(e);
            }
        }
    }
    Err(last_err.expect("at least one attempt"))
}

impl LookupGrid {
    pub fn from_points(points: Vec<LinCircPoint>, scale: GpScale, policy: &JitterPolicy) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::invalid("look-up grid needs at least 2 points"));
        }
        let corr = corr_matrix(&points, &scale);
        let factor = Factor::new(&corr, policy, "look-up grid correlation")?;
        let design = design_matrix(&points);
        Ok(Self { points, corr, design, factor, scale })
    }

    /// Same points, correlation rebuilt for another `σ_g`.
    pub fn with_scale(&self, scale: GpScale, policy: &JitterPolicy) -> Result<Self> {
        Self::from_points(self.points.clone(), scale, policy)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[LinCircPoint] {
        &self.points
    }

    /// Correlation matrix `A` (without jitter).
    pub fn corr(&self) -> &DMatrix<f64> {
        &self.corr
    }

    /// Rows `h(t_i, z_i)'`.
    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn factor(&self) -> &Factor {
        &self.factor
    }

    pub fn scale(&self) -> GpScale {
        self.scale
    }

    /// Correlations between `p` and every grid point.
    pub fn corr_to(&self, p: &LinCircPoint) -> DVector<f64> {
        corr_vector(p, &self.points, &self.scale)
    }

    pub(crate) fn check_scale(&self, p: &ModelParams) -> Result<()> {
        if (self.scale.sigma2() - p.sigma2_g).abs() > 1e-12 * p.sigma2_g {
            return Err(Error::invalid(format!(
                "grid built for sigma2_g = {}, parameters have {}",
                self.scale.sigma2(),
                p.sigma2_g
            )));
        }
        Ok(())
    }
}

/// `E[D_z] = Hβ_g`, `V[D_z] = σ²_g A`.
pub fn dz_prior_moments(grid: &LookupGrid, p: &ModelParams) -> (DVector<f64>, DMatrix<f64>) {
    (grid.design() * p.beta_g, grid.corr() * p.sigma2_g)
}

/// Moments of `D_z` given `g*(1, x₀) = g1`.
pub fn dz_given_g1(
    grid: &LookupGrid,
    x0: Angle,
    g1: f64,
    p: &ModelParams,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    grid.check_scale(p)?;
    let q = LinCircPoint::from_angle(1.0, x0);
    let s = grid.corr_to(&q);
    let resid = g1 - basis_h(&q).dot(&p.beta_g);
    let mean = grid.design() * p.beta_g + &s * resid;
    let cov = (grid.corr() - &s * s.transpose()) * p.sigma2_g;
    Ok((mean, cov))
}

/// Conditional law of `g*` at new inputs given the grid values. Holds
/// `A⁻¹(D_z − Hβ_g)` so each query costs one triangular solve.
#[derive(Debug, Clone)]
pub struct GstarPredictor<'a> {
    grid: &'a LookupGrid,
    beta_g: Vector4<f64>,
    sigma2_g: f64,
    alpha: DVector<f64>,
}

impl<'a> GstarPredictor<'a> {
    pub fn new(grid: &'a LookupGrid, dz: &DVector<f64>, p: &ModelParams) -> Result<Self> {
        grid.check_scale(p)?;
        if dz.len() != grid.len() {
            return Err(Error::invalid("D_z length does not match the grid"));
        }
        let alpha = grid_alpha(grid, dz, &p.beta_g);
        Ok(Self { grid, beta_g: p.beta_g, sigma2_g: p.sigma2_g, alpha })
    }

    /// Mean and variance of `g*(t, x_prev)` given `D_z`.
    pub fn moments(&self, t: f64, x_prev: Angle) -> Result<(f64, f64)> {
        gstar_moments(self.grid, &self.beta_g, self.sigma2_g, &self.alpha, t, x_prev)
    }
}

/// `g*` conditional with a precomputed `alpha = A⁻¹(D_z − Hβ_g)`.
pub(crate) fn gstar_moments(
    grid: &LookupGrid,
    beta_g: &Vector4<f64>,
    sigma2_g: f64,
    alpha: &DVector<f64>,
    t: f64,
    x_prev: Angle,
) -> Result<(f64, f64)> {
    let q = LinCircPoint::from_angle(t, x_prev);
    let s = grid.corr_to(&q);
    let mu = basis_h(&q).dot(beta_g) + s.dot(alpha);
    let explained = grid.factor().quad_form(&s);
    let var = clamp_variance(sigma2_g * (1.0 - explained), sigma2_g, "g* conditional")?;
    Ok((mu, var))
}

/// `A⁻¹(D_z − Hβ_g)`.
pub(crate) fn grid_alpha(grid: &LookupGrid, dz: &DVector<f64>, beta_g: &Vector4<f64>) -> DVector<f64> {
    grid.factor().solve_vec(&(dz - grid.design() * beta_g))
}

pub fn gstar_conditional(
    t: f64,
    x_prev: Angle,
    dz: &DVector<f64>,
    grid: &LookupGrid,
    p: &ModelParams,
) -> Result<(f64, f64)> {
    GstarPredictor::new(grid, dz, p)?.moments(t, x_prev)
}

/// Mean and variance of the unwrapped state `x*_t`: the `g*` conditional plus
/// evolution noise.
pub fn transition_moments(
    t: f64,
    x_prev: Angle,
    dz: &DVector<f64>,
    grid: &LookupGrid,
    p: &ModelParams,
) -> Result<(f64, f64)> {
    let (mu, v) = gstar_conditional(t, x_prev, dz, grid, p)?;
    let var = v + p.sigma2_eta;
    if !(var > 0.0) {
        return Err(Error::Degenerate(format!("transition variance {var:e} at t = {t}")));
    }
    Ok((mu, var))
}

// ---------------------------------------------------------------------------
// Observation layer

/// Inputs `(t, x_t)` for `t = 1..=T`.
pub fn obs_points(x: &[Angle]) -> Vec<LinCircPoint> {
    x.iter()
        .enumerate()
        .map(|(i, &a)| LinCircPoint::from_angle((i + 1) as f64, a))
        .collect()
}

/// Marginal mean `H β_f` and covariance `σ²_f A_f + σ²_ε I` of `y_{1:T}`
/// given latent angles `x_1..x_T`.
pub fn obs_marginal_moments(x: &[Angle], p: &ModelParams) -> (DVector<f64>, DMatrix<f64>) {
    let pts = obs_points(x);
    let mean = design_matrix(&pts) * p.beta_f;
    let mut cov = cov_matrix(&pts, &p.scale_f());
    for i in 0..cov.nrows() {
        cov[(i, i)] += p.sigma2_eps;
    }
    (mean, cov)
}

/// `log N(y; Hβ_f, σ²_f A_f + σ²_ε I)`.
pub fn obs_log_density(y: &DVector<f64>, x: &[Angle], p: &ModelParams, policy: &JitterPolicy) -> Result<f64> {
    if y.len() != x.len() {
        return Err(Error::invalid("observation and latent lengths differ"));
    }
    let (mean, cov) = obs_marginal_moments(x, p);
    Ok(Factor::new(&cov, policy, "observation covariance")?.mvn_log_pdf(y, &mean))
}

// ---------------------------------------------------------------------------
// Latent path

/// Splits an unwrapped value into its angle and wrap counter.
pub fn wrap(xstar: f64) -> Result<(Angle, WrapCounter)> {
    if !xstar.is_finite() {
        return Err(Error::NonFinite("unwrapped state"));
    }
    let mut k = (xstar / TAU).floor();
    let mut r = xstar - TAU * k;
    if r >= TAU {
        r -= TAU;
        k += 1.0;
    } else if r < 0.0 {
        r += TAU;
        k -= 1.0;
    }
    let r = if r >= TAU { 0.0 } else { r };
    Ok((Angle::from_reduced(r), k as WrapCounter))
}

/// `x₀, x₁, …, x_{T+1}` with wrap counters and `g*(1, x₀)`.
///
/// `x[t]` and `k[t]` are indexed by time; `k[0]` is unused and kept at 0.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPath {
    pub x: Vec<Angle>,
    pub k: Vec<WrapCounter>,
    pub g1: f64,
}

impl LatentPath {
    /// Number of observed time points `T`.
    pub fn len_obs(&self) -> usize {
        self.x.len() - 2
    }

    pub fn x0(&self) -> Angle {
        self.x[0]
    }

    /// `x*_t = x_t + 2πK_t`.
    pub fn xstar(&self, t: usize) -> f64 {
        self.x[t].value() + TAU * self.k[t] as f64
    }

    /// Observed-period angles `x_1..x_T`.
    pub fn observed(&self) -> &[Angle] {
        &self.x[1..self.x.len() - 1]
    }
}

/// A full draw from the generative model.
#[derive(Debug, Clone)]
pub struct GeneratedPath {
    pub path: LatentPath,
    pub dz: DVector<f64>,
    pub y: DVector<f64>,
}

/// Draws `x₀`, `g*(1,x₀)`, `D_z`, the wrapped latent path up to `T+1`, and
/// `y_{1:T}` jointly from the observation marginal.
pub fn generate_path<R: Rng + ?Sized>(
    t_len: usize,
    grid: &LookupGrid,
    p: &ModelParams,
    prior: &PriorSpec,
    policy: &JitterPolicy,
    rng: &mut R,
) -> Result<GeneratedPath> {
    p.validate()?;
    let x0 = von_mises_sample(&prior.x0, rng);
    let (g1, dz) = draw_g1_dz(grid, x0, p, policy, rng)?;

    let mut x = Vec::with_capacity(t_len + 2);
    let mut k = Vec::with_capacity(t_len + 2);
    x.push(x0);
    k.push(0);
    let z: f64 = StandardNormal.sample(rng);
    let (x1, k1) = wrap(g1 + p.sigma2_eta.sqrt() * z)?;
    x.push(x1);
    k.push(k1);

    let pred = GstarPredictor::new(grid, &dz, p)?;
    for t in 2..=t_len + 1 {
        let (mu, v) = pred.moments(t as f64, x[t - 1])?;
        let z: f64 = StandardNormal.sample(rng);
        let (xt, kt) = wrap(mu + (v + p.sigma2_eta).sqrt() * z)?;
        x.push(xt);
        k.push(kt);
    }
    let path = LatentPath { x, k, g1 };

    let (mean, cov) = obs_marginal_moments(path.observed(), p);
    let f = Factor::new(&cov, policy, "observation covariance")?;
    let y = mean + f.color(&standard_normal_vec(t_len, rng));
    Ok(GeneratedPath { path, dz, y })
}

/// `g*(1,x₀)` from its prior and `D_z` given it.
pub(crate) fn draw_g1_dz<R: Rng + ?Sized>(
    grid: &LookupGrid,
    x0: Angle,
    p: &ModelParams,
    policy: &JitterPolicy,
    rng: &mut R,
) -> Result<(f64, DVector<f64>)> {
    let q = LinCircPoint::from_angle(1.0, x0);
    let z: f64 = StandardNormal.sample(rng);
    let g1 = basis_h(&q).dot(&p.beta_g) + p.sigma2_g.sqrt() * z;
    let (mean, cov) = dz_given_g1(grid, x0, g1, p)?;
    let f = Factor::new(&cov, policy, "D_z given g*(1, x0)")?;
    let dz = mean + f.color(&standard_normal_vec(grid.len(), rng));
    Ok((g1, dz))
}
