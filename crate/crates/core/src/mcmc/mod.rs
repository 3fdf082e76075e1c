//! Metropolis-within-Gibbs sampler over the full latent state.
//!
//! Gibbs blocks: `β_f`, the free part of `β_g`, `g*(1,x₀)`, `D_z` and the
//! truncated-normal draw of `x_{T+1}`. Metropolis blocks: the standard
//! deviations `σ_ε`, `σ_f` (and optionally `σ_η`, `σ_g`), `x₀`, each `x_t`,
//! and each wrap counter `K_t`. All proposals are symmetric.

mod obs;

use std::f64::consts::TAU;

use nalgebra::{DMatrix, DVector, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::circular::{
    Angle, DEFAULT_K_MAX, VonMisesMixture, VonMisesParams, WrapCounter, discrete_rw_propose,
    normal_log_pdf, truncated_normal_sample, von_mises_log_density, von_mises_sample,
    warn_if_tail_heavy,
};
use crate::error::{Error, Result};
use crate::gp::{GpScale, LinCircPoint, cross_corr};
use crate::linalg::{Factor, JitterPolicy, symmetrize};
use crate::model::{
    LatentPath, LookupGrid, ModelParams, PriorSpec, VariancePrior, draw_g1_dz, grid_alpha,
    gstar_moments, obs_log_density, standard_normal_vec,
};

use obs::ObsCache;

/// Relative floor on the variance of `g*(1,x₀)` given `D_z`.
const G1_VAR_FLOOR: f64 = 1e-12;

/// Sampler settings.
#[derive(Debug, Clone, PartialEq)]
pub struct McmcConfig {
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Variance of the normal walk on `σ_ε` and `σ_f`.
    pub sigma_walk_var: f64,
    /// Walk on `log σ` instead of `σ`.
    pub log_scale_walk: bool,
    /// Concentration of the von Mises proposal for `x₀`.
    pub x0_kappa: f64,
    /// Proposal for `x_1..x_T`.
    pub x_proposal: VonMisesMixture,
    pub k_walk_var: f64,
    pub k_max: WrapCounter,
    /// Also update `σ²_η` and `σ²_g`. Their posterior is improper under the
    /// default priors, so this should only be used with bounded priors.
    pub sample_g_variances: bool,
    /// Compare cached and freshly computed log densities every this many
    /// iterations (0 disables).
    pub audit_every: usize,
    /// Rebuild the observation cache from scratch every this many iterations.
    pub rebuild_every: usize,
    pub jitter: JitterPolicy,
    pub seed: u64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            n_iter: 5000,
            burn_in: 2500,
            thin: 1,
            sigma_walk_var: 0.05,
            log_scale_walk: false,
            x0_kappa: 3.0,
            x_proposal: VonMisesMixture::new(vec![0.5, 3.0], vec![0.5, 0.5]).expect("valid mixture"),
            k_walk_var: 1.0,
            k_max: DEFAULT_K_MAX,
            sample_g_variances: false,
            audit_every: 100,
            rebuild_every: 500,
            jitter: JitterPolicy::default(),
            seed: 0,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.n_iter {
            return Err(Error::Config(format!(
                "burn_in ({}) must be smaller than n_iter ({})",
                self.burn_in, self.n_iter
            )));
        }
        if self.thin == 0 {
            return Err(Error::Config("thin must be at least 1".into()));
        }
        for (name, v) in [
            ("sigma_walk_var", self.sigma_walk_var),
            ("x0_kappa", self.x0_kappa),
            ("k_walk_var", self.k_walk_var),
        ] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.k_max < 0 {
            return Err(Error::Config("k_max must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Everything the sampler moves.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub params: ModelParams,
    pub path: LatentPath,
    pub dz: DVector<f64>,
}

impl ChainState {
    /// Coefficients at prior means, `σ²_ε` and `σ²_f` at prior modes, `x₀` at
    /// the prior location, `x_t` uniform on the circle, `K_t = 0`, and
    /// `g*(1,x₀)`, `D_z` drawn from their prior conditionals.
    pub fn initial<R: Rng + ?Sized>(
        t_len: usize,
        grid: &LookupGrid,
        prior: &PriorSpec,
        sigma2_g: f64,
        sigma2_eta: f64,
        policy: &JitterPolicy,
        rng: &mut R,
    ) -> Result<Self> {
        let params = ModelParams::from_prior(prior, sigma2_g, sigma2_eta)?;
        let x0 = Angle::new(prior.x0.mu)?;
        let mut x = vec![x0];
        for _ in 0..=t_len {
            x.push(von_mises_sample(&VonMisesParams::uniform(), rng));
        }
        let k = vec![0; t_len + 2];
        let (g1, dz) = draw_g1_dz(grid, x0, &params, policy, rng)?;
        Ok(Self { params, path: LatentPath { x, k, g1 }, dz })
    }

    pub fn t_len(&self) -> usize {
        self.path.len_obs()
    }
}

/// Linear-Gaussian pieces of the `g` layer: for each transition `k`, the
/// query input, its correlations `s_k` with the grid, `w_k = A⁻¹ s_k`, the
/// observed value and the noise variance around `w_k'(D_z − Hβ_g) + h_k'β_g`.
///
/// Entry 0 is `g*(1,x₀)` itself; entry `k ≥ 1` is `x*_{k+1}` given `x_k`.
#[derive(Debug, Clone)]
pub(crate) struct GLayerTerms {
    s: DMatrix<f64>,
    w: DMatrix<f64>,
    h: DMatrix<f64>,
    obs: DVector<f64>,
    noise: DVector<f64>,
}

impl GLayerTerms {
    fn build(grid: &LookupGrid, p: &ModelParams, path: &LatentPath) -> Result<Self> {
        let t_len = path.len_obs();
        let mut queries = Vec::with_capacity(t_len + 1);
        queries.push(LinCircPoint::from_angle(1.0, path.x0()));
        for t in 2..=t_len + 1 {
            queries.push(LinCircPoint::from_angle(t as f64, path.x[t - 1]));
        }
        let s = cross_corr(grid.points(), &queries, &grid.scale());
        let w = grid.factor().solve_mat(&s);
        let m = queries.len();
        let h = crate::gp::design_matrix(&queries);
        let mut obs = DVector::zeros(m);
        let mut noise = DVector::zeros(m);
        for k in 0..m {
            let explained = s.column(k).dot(&w.column(k));
            let v = crate::gp::clamp_variance(p.sigma2_g * (1.0 - explained), p.sigma2_g, "g* conditional")?;
            if k == 0 {
                obs[k] = path.g1;
                noise[k] = v.max(G1_VAR_FLOOR * p.sigma2_g);
            } else {
                obs[k] = path.xstar(k + 1);
                noise[k] = v + p.sigma2_eta;
            }
        }
        Ok(Self { s, w, h, obs, noise })
    }
}

fn dz_marginal_log_density(grid: &LookupGrid, p: &ModelParams, dz: &DVector<f64>) -> f64 {
    let n = grid.len() as f64;
    let r = dz - grid.design() * p.beta_g;
    let f = grid.factor();
    -0.5 * (f.quad_form(&r) / p.sigma2_g + f.log_det() + n * (p.sigma2_g.ln() + TAU.ln()))
}

/// `log [D_z] + log [g*(1,x₀) | D_z] + Σ_t log [x*_t | …]`.
pub fn g_layer_log_density(
    grid: &LookupGrid,
    p: &ModelParams,
    path: &LatentPath,
    dz: &DVector<f64>,
) -> Result<f64> {
    let terms = GLayerTerms::build(grid, p, path)?;
    let e = dz - grid.design() * p.beta_g;
    let mut lp = dz_marginal_log_density(grid, p, dz);
    for k in 0..terms.obs.len() {
        let mean = terms.h.row(k).transpose().dot(&p.beta_g) + terms.w.column(k).dot(&e);
        lp += normal_log_pdf(terms.obs[k], mean, terms.noise[k]);
    }
    lp += normal_log_pdf(path.xstar(1), path.g1, p.sigma2_eta);
    Ok(lp)
}

fn prior_log_density(prior: &PriorSpec, p: &ModelParams, x0: Angle, with_g_variances: bool) -> Result<f64> {
    let mut lp = prior.beta_f.log_density(&DVector::from_iterator(4, p.beta_f.iter().copied()))?;
    let free = p.beta_g_free();
    if !free.is_empty() {
        let b = DVector::from_iterator(free.len(), free.iter().map(|&i| p.beta_g[i]));
        lp += prior.beta_g.marginal(&free).log_density(&b)?;
    }
    lp += prior.sigma2_eps.log_density(p.sigma2_eps) + prior.sigma2_f.log_density(p.sigma2_f);
    if with_g_variances {
        lp += prior.sigma2_eta.log_density(p.sigma2_eta) + prior.sigma2_g.log_density(p.sigma2_g);
    }
    lp += von_mises_log_density(x0.value(), &prior.x0);
    Ok(lp)
}

/// Joint log density of the state and the data, computed from scratch.
/// Priors of `σ²_η`, `σ²_g` are included only when `with_g_variances`.
pub fn log_joint(
    state: &ChainState,
    y: &DVector<f64>,
    grid: &LookupGrid,
    prior: &PriorSpec,
    with_g_variances: bool,
    policy: &JitterPolicy,
) -> Result<f64> {
    let p = &state.params;
    let lp = prior_log_density(prior, p, state.path.x0(), with_g_variances)?
        + g_layer_log_density(grid, p, &state.path, &state.dz)?
        + obs_log_density(y, state.path.observed(), p, policy)?;
    Ok(lp)
}

/// Proposal and acceptance counts of one Metropolis block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BlockRate {
    pub proposed: u64,
    pub accepted: u64,
}

impl BlockRate {
    fn record(&mut self, accepted: bool) {
        self.proposed += 1;
        self.accepted += u64::from(accepted);
    }

    pub fn rate(&self) -> f64 {
        if self.proposed == 0 { f64::NAN } else { self.accepted as f64 / self.proposed as f64 }
    }
}

/// Acceptance counts per Metropolis block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Acceptance {
    pub sigma_eps: BlockRate,
    pub sigma_f: BlockRate,
    pub sigma_eta: BlockRate,
    pub sigma_g: BlockRate,
    pub x0: BlockRate,
    pub x: BlockRate,
    pub k: BlockRate,
}

impl Acceptance {
    pub fn named(&self) -> [(&'static str, BlockRate); 7] {
        [
            ("sigma_eps", self.sigma_eps),
            ("sigma_f", self.sigma_f),
            ("sigma_eta", self.sigma_eta),
            ("sigma_g", self.sigma_g),
            ("x0", self.x0),
            ("x", self.x),
            ("K", self.k),
        ]
    }
}

fn mh_accept<R: Rng + ?Sized>(log_ratio: f64, rng: &mut R) -> bool {
    if log_ratio.is_nan() {
        return false;
    }
    if log_ratio >= 0.0 {
        return true;
    }
    let u: f64 = rng.random();
    u.ln() < log_ratio
}

/// Draws `N(Q⁻¹b, Q⁻¹)` given a precision factor.
fn draw_from_precision<R: Rng + ?Sized>(q: &Factor, b: &DVector<f64>, rng: &mut R) -> DVector<f64> {
    q.solve_vec(b) + q.uncolor_t(&standard_normal_vec(b.len(), rng))
}

/// Sampler with its caches. The caches are kept consistent with `state`
/// after every public method.
#[derive(Debug, Clone)]
pub struct Sampler {
    y: DVector<f64>,
    grid: LookupGrid,
    prior: PriorSpec,
    cfg: McmcConfig,
    state: ChainState,
    obs: ObsCache,
    alpha: DVector<f64>,
    /// `trans[t] = (μ_t, σ²_{x_t})` for `t = 2..=T+1`.
    trans: Vec<(f64, f64)>,
    acceptance: Acceptance,
}

impl Sampler {
    pub fn new(y: DVector<f64>, grid: LookupGrid, prior: PriorSpec, cfg: McmcConfig, state: ChainState) -> Result<Self> {
        prior.validate()?;
        state.params.validate()?;
        if state.path.x.len() != y.len() + 2 || state.path.k.len() != y.len() + 2 {
            return Err(Error::invalid("latent path length must be T + 2"));
        }
        if state.dz.len() != grid.len() {
            return Err(Error::invalid("D_z length does not match the grid"));
        }
        let grid = if (grid.scale().sigma2() - state.params.sigma2_g).abs() > 1e-12 * state.params.sigma2_g {
            grid.with_scale(state.params.scale_g(), &cfg.jitter)?
        } else {
            grid
        };
        let obs = ObsCache::build(state.path.observed(), &state.params, &cfg.jitter)?;
        let mut s = Self {
            y,
            grid,
            prior,
            cfg,
            state,
            obs,
            alpha: DVector::zeros(0),
            trans: Vec::new(),
            acceptance: Acceptance::default(),
        };
        s.refresh_g_cache()?;
        Ok(s)
    }

    pub fn state(&self) -> &ChainState {
        &self.state
    }

    pub fn grid(&self) -> &LookupGrid {
        &self.grid
    }

    pub fn config(&self) -> &McmcConfig {
        &self.cfg
    }

    pub fn acceptance(&self) -> &Acceptance {
        &self.acceptance
    }

    pub fn t_len(&self) -> usize {
        self.y.len()
    }

    /// Replaces the state and rebuilds every cache.
    pub fn set_state(&mut self, state: ChainState) -> Result<()> {
        let y = std::mem::replace(&mut self.y, DVector::zeros(0));
        let fresh = Sampler::new(y, self.grid.clone(), self.prior.clone(), self.cfg.clone(), state)?;
        let acc = self.acceptance;
        *self = fresh;
        self.acceptance = acc;
        Ok(())
    }

    fn refresh_g_cache(&mut self) -> Result<()> {
        let p = &self.state.params;
        self.alpha = grid_alpha(&self.grid, &self.state.dz, &p.beta_g);
        let t_len = self.t_len();
        self.trans = vec![(0.0, 0.0); t_len + 2];
        for t in 2..=t_len + 1 {
            self.trans[t] = self.transition_at(t, self.state.path.x[t - 1])?;
        }
        Ok(())
    }

    fn rebuild_obs(&mut self) -> Result<()> {
        self.obs = ObsCache::build(self.state.path.observed(), &self.state.params, &self.cfg.jitter)?;
        Ok(())
    }

    /// `(μ, σ²)` of `x*_t` when the previous angle is `x_prev`, for `t ≥ 2`.
    fn transition_at(&self, t: usize, x_prev: Angle) -> Result<(f64, f64)> {
        let p = &self.state.params;
        let (mu, v) = gstar_moments(&self.grid, &p.beta_g, p.sigma2_g, &self.alpha, t as f64, x_prev)?;
        let var = v + p.sigma2_eta;
        if !(var > 0.0) {
            return Err(Error::Degenerate(format!("transition variance {var:e} at t = {t}")));
        }
        Ok((mu, var))
    }

    /// `(μ, σ²)` of `x*_t` under the current state, `t = 1..=T+1`.
    pub fn own_moments(&self, t: usize) -> (f64, f64) {
        if t == 1 { (self.state.path.g1, self.state.params.sigma2_eta) } else { self.trans[t] }
    }

    /// Mean and variance of `g*(1, x0)` given `D_z` for a candidate `x0`.
    fn g1_given_dz(&self, x0: Angle) -> Result<(f64, f64)> {
        let p = &self.state.params;
        let (m, v) = gstar_moments(&self.grid, &p.beta_g, p.sigma2_g, &self.alpha, 1.0, x0)?;
        Ok((m, v.max(G1_VAR_FLOOR * p.sigma2_g)))
    }

    /// Joint log density assembled from the caches.
    pub fn log_joint_cached(&self) -> Result<f64> {
        let p = &self.state.params;
        let path = &self.state.path;
        let mut lp = prior_log_density(&self.prior, p, path.x0(), self.cfg.sample_g_variances)?;
        lp += dz_marginal_log_density(&self.grid, p, &self.state.dz);
        let (m1, v1) = self.g1_given_dz(path.x0())?;
        lp += normal_log_pdf(path.g1, m1, v1);
        for t in 1..=self.t_len() + 1 {
            let (mu, var) = self.own_moments(t);
            lp += normal_log_pdf(path.xstar(t), mu, var);
        }
        lp += self.obs.log_lik(&self.y, &p.beta_f);
        Ok(lp)
    }

    /// Joint log density from scratch.
    pub fn log_joint_fresh(&self) -> Result<f64> {
        log_joint(&self.state, &self.y, &self.grid, &self.prior, self.cfg.sample_g_variances, &self.cfg.jitter)
    }

    // -----------------------------------------------------------------------
    // β_f

    /// Precision and linear term of the `β_f` full conditional.
    fn beta_f_system(&self) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let h = self.obs.design();
        let ph = self.obs.prec() * h;
        let prior_prec = self.prior.beta_f.precision()?;
        let mut q = h.transpose() * &ph + &prior_prec;
        symmetrize(&mut q);
        let b = ph.transpose() * &self.y + &prior_prec * &self.prior.beta_f.mean;
        Ok((q, b))
    }

    /// Mean and covariance of `β_f` given everything else.
    pub fn beta_f_conditional(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (q, b) = self.beta_f_system()?;
        let f = Factor::new(&q, &self.cfg.jitter, "beta_f precision")?;
        Ok((f.solve_vec(&b), f.inverse()))
    }

    pub fn update_beta_f<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let (q, b) = self.beta_f_system()?;
        let f = Factor::new(&q, &self.cfg.jitter, "beta_f precision")?;
        let draw = draw_from_precision(&f, &b, rng);
        self.state.params.beta_f = Vector4::from_iterator(draw.iter().copied());
        Ok(())
    }

    // -----------------------------------------------------------------------
    // β_g

    fn beta_g_system(&self, free: &[usize]) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let p = &self.state.params;
        let nf = free.len();
        let fixed: Vec<usize> = (0..4).filter(|i| !free.contains(i)).collect();
        let prior = self.prior.beta_g.marginal(free);
        let prior_prec = prior.precision()?;
        let mut q = prior_prec.clone();
        let mut b = &prior_prec * &prior.mean;

        let hd = self.grid.design();
        let h_free = DMatrix::from_fn(hd.nrows(), nf, |i, j| hd[(i, free[j])]);
        let mut resid = self.state.dz.clone();
        for &r in &fixed {
            resid -= hd.column(r) * p.beta_g[r];
        }
        let ainv_hf = self.grid.factor().solve_mat(&h_free);
        q += h_free.transpose() * &ainv_hf / p.sigma2_g;
        b += ainv_hf.transpose() * &resid / p.sigma2_g;

        let terms = GLayerTerms::build(&self.grid, p, &self.state.path)?;
        for k in 0..terms.obs.len() {
            let wk = terms.w.column(k);
            // u = h_k − H'w_k
            let u = terms.h.row(k).transpose() - hd.transpose() * wk;
            let mut r = terms.obs[k] - wk.dot(&self.state.dz);
            for &i in &fixed {
                r -= u[i] * p.beta_g[i];
            }
            let uf = DVector::from_iterator(nf, free.iter().map(|&i| u[i]));
            q += &uf * uf.transpose() / terms.noise[k];
            b += &uf * (r / terms.noise[k]);
        }
        symmetrize(&mut q);
        Ok((q, b))
    }

    /// Mean and covariance of the free components of `β_g`.
    pub fn beta_g_conditional(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let free = self.state.params.beta_g_free();
        let (q, b) = self.beta_g_system(&free)?;
        let f = Factor::new(&q, &self.cfg.jitter, "beta_g precision")?;
        Ok((f.solve_vec(&b), f.inverse()))
    }

    pub fn update_beta_g<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let free = self.state.params.beta_g_free();
        if free.is_empty() {
            return Ok(());
        }
        let (q, b) = self.beta_g_system(&free)?;
        let f = Factor::new(&q, &self.cfg.jitter, "beta_g precision")?;
        let draw = draw_from_precision(&f, &b, rng);
        for (j, &i) in free.iter().enumerate() {
            self.state.params.beta_g[i] = draw[j];
        }
        self.refresh_g_cache()
    }

    // -----------------------------------------------------------------------
    // Variances

    fn propose_sd<R: Rng + ?Sized>(&self, current_var: f64, rng: &mut R) -> Option<(f64, f64, f64)> {
        let sd = self.cfg.sigma_walk_var.sqrt();
        let z: f64 = StandardNormal.sample(rng);
        let sigma = current_var.sqrt();
        if self.cfg.log_scale_walk {
            let s_new = (sigma.ln() + sd * z).exp();
            // density of log σ: p(σ²) · 2σ²
            Some((s_new * s_new, (2.0 * s_new * s_new).ln(), (2.0 * current_var).ln()))
        } else {
            let s_new = sigma + sd * z;
            if s_new <= 0.0 {
                return None;
            }
            Some((s_new * s_new, (2.0 * s_new).ln(), (2.0 * sigma).ln()))
        }
    }

    /// Log target of `σ_ε` at `sigma` (on the walk scale, up to a constant).
    pub fn sigma_eps_log_target(&self, sigma: f64) -> Result<f64> {
        let mut p = self.state.params.clone();
        p.sigma2_eps = sigma * sigma;
        self.obs_variance_target(&p, self.prior.sigma2_eps, p.sigma2_eps, sigma)
    }

    /// Log target of `σ_f` at `sigma`.
    pub fn sigma_f_log_target(&self, sigma: f64) -> Result<f64> {
        let mut p = self.state.params.clone();
        p.sigma2_f = sigma * sigma;
        self.obs_variance_target(&p, self.prior.sigma2_f, p.sigma2_f, sigma)
    }

    fn obs_variance_target(&self, p: &ModelParams, prior: VariancePrior, v: f64, sigma: f64) -> Result<f64> {
        let cache = ObsCache::build(self.state.path.observed(), p, &self.cfg.jitter)?;
        let jac = if self.cfg.log_scale_walk { (2.0 * v).ln() } else { (2.0 * sigma).ln() };
        Ok(prior.log_density(v) + jac + cache.log_lik(&self.y, &p.beta_f))
    }

    pub fn update_sigma2_eps<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        if self.prior.sigma2_eps.is_fixed() {
            return Ok(());
        }
        let cur = self.state.params.sigma2_eps;
        let Some((v_new, jac_new, jac_old)) = self.propose_sd(cur, rng) else {
            self.acceptance.sigma_eps.record(false);
            return Ok(());
        };
        let mut p = self.state.params.clone();
        p.sigma2_eps = v_new;
        let accepted = self.obs_variance_step(p, self.prior.sigma2_eps, cur, v_new, jac_new - jac_old, rng)?;
        self.acceptance.sigma_eps.record(accepted);
        Ok(())
    }

    pub fn update_sigma2_f<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        if self.prior.sigma2_f.is_fixed() {
            return Ok(());
        }
        let cur = self.state.params.sigma2_f;
        let Some((v_new, jac_new, jac_old)) = self.propose_sd(cur, rng) else {
            self.acceptance.sigma_f.record(false);
            return Ok(());
        };
        let mut p = self.state.params.clone();
        p.sigma2_f = v_new;
        let accepted = self.obs_variance_step(p, self.prior.sigma2_f, cur, v_new, jac_new - jac_old, rng)?;
        self.acceptance.sigma_f.record(accepted);
        Ok(())
    }

    fn obs_variance_step<R: Rng + ?Sized>(
        &mut self,
        p: ModelParams,
        prior: VariancePrior,
        v_old: f64,
        v_new: f64,
        log_jac: f64,
        rng: &mut R,
    ) -> Result<bool> {
        let cache = match ObsCache::build(self.state.path.observed(), &p, &self.cfg.jitter) {
            Ok(c) => c,
            Err(Error::Singular { .. }) => return Ok(false),
            Err(e) => return Err(e),
        };
        let ll_new = cache.log_lik(&self.y, &p.beta_f);
        let ll_old = self.obs.log_lik(&self.y, &self.state.params.beta_f);
        let log_ratio = prior.log_density(v_new) - prior.log_density(v_old) + log_jac + ll_new - ll_old;
        let accepted = mh_accept(log_ratio, rng);
        if accepted {
            self.state.params = p;
            self.obs = cache;
        }
        Ok(accepted)
    }

    /// Metropolis step on `σ_η` (only with [`McmcConfig::sample_g_variances`]).
    pub fn update_sigma2_eta<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let cur = self.state.params.sigma2_eta;
        let Some((v_new, jac_new, jac_old)) = self.propose_sd(cur, rng) else {
            self.acceptance.sigma_eta.record(false);
            return Ok(());
        };
        let mut p = self.state.params.clone();
        p.sigma2_eta = v_new;
        let old = g_layer_log_density(&self.grid, &self.state.params, &self.state.path, &self.state.dz)?;
        let new = g_layer_log_density(&self.grid, &p, &self.state.path, &self.state.dz)?;
        let prior = self.prior.sigma2_eta;
        let log_ratio = prior.log_density(v_new) - prior.log_density(cur) + jac_new - jac_old + new - old;
        let accepted = mh_accept(log_ratio, rng);
        if accepted {
            self.state.params = p;
            self.refresh_g_cache()?;
        }
        self.acceptance.sigma_eta.record(accepted);
        Ok(())
    }

    /// Metropolis step on `σ_g`; rebuilds the grid correlation on acceptance.
    pub fn update_sigma2_g<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let cur = self.state.params.sigma2_g;
        let Some((v_new, jac_new, jac_old)) = self.propose_sd(cur, rng) else {
            self.acceptance.sigma_g.record(false);
            return Ok(());
        };
        let mut p = self.state.params.clone();
        p.sigma2_g = v_new;
        let grid = match self.grid.with_scale(GpScale::from_variance(v_new)?, &self.cfg.jitter) {
            Ok(g) => g,
            Err(Error::Singular { .. }) => {
                self.acceptance.sigma_g.record(false);
                return Ok(());
            }
            Err(e) => return Err(e),
        };
        let old = g_layer_log_density(&self.grid, &self.state.params, &self.state.path, &self.state.dz)?;
        let new = match g_layer_log_density(&grid, &p, &self.state.path, &self.state.dz) {
            Ok(v) => v,
            Err(Error::Degenerate(_)) => f64::NEG_INFINITY,
            Err(e) => return Err(e),
        };
        let prior = self.prior.sigma2_g;
        let log_ratio = prior.log_density(v_new) - prior.log_density(cur) + jac_new - jac_old + new - old;
        let accepted = mh_accept(log_ratio, rng);
        if accepted {
            self.state.params = p;
            self.grid = grid;
            self.refresh_g_cache()?;
        }
        self.acceptance.sigma_g.record(accepted);
        Ok(())
    }

    // -----------------------------------------------------------------------
    // x₀ and g*(1, x₀)

    /// `log [x₀] + log [g*(1,x₀) | D_z, x₀]` at a candidate `x₀`.
    pub fn x0_log_target(&self, x0: Angle) -> Result<f64> {
        let (m, v) = self.g1_given_dz(x0)?;
        Ok(von_mises_log_density(x0.value(), &self.prior.x0) + normal_log_pdf(self.state.path.g1, m, v))
    }

    pub fn update_x0<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let cur = self.state.path.x0();
        let prop = von_mises_sample(&VonMisesParams { mu: cur.value(), kappa: self.cfg.x0_kappa }, rng);
        let log_ratio = self.x0_log_target(prop)? - self.x0_log_target(cur)?;
        let accepted = mh_accept(log_ratio, rng);
        if accepted {
            self.state.path.x[0] = prop;
        }
        self.acceptance.x0.record(accepted);
        Ok(())
    }

    /// Mean and variance of `g*(1,x₀)` given everything else.
    pub fn g1_conditional(&self) -> Result<(f64, f64)> {
        let (m, v) = self.g1_given_dz(self.state.path.x0())?;
        let eta = self.state.params.sigma2_eta;
        let prec = 1.0 / v + 1.0 / eta;
        let mean = (m / v + self.state.path.xstar(1) / eta) / prec;
        Ok((mean, 1.0 / prec))
    }

    pub fn update_g1<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let (mean, var) = self.g1_conditional()?;
        let z: f64 = StandardNormal.sample(rng);
        self.state.path.g1 = mean + var.sqrt() * z;
        Ok(())
    }

    // -----------------------------------------------------------------------
    // D_z

    /// Gain `K = σ²_g S G⁻¹` and centred observations for the `D_z` update,
    /// where `G = σ²_g S'A⁻¹S + V`.
    fn dz_gain(&self) -> Result<(GLayerTerms, DMatrix<f64>, DVector<f64>)> {
        let p = &self.state.params;
        let terms = GLayerTerms::build(&self.grid, p, &self.state.path)?;
        let mut g = terms.s.transpose() * &terms.w * p.sigma2_g;
        for k in 0..g.nrows() {
            g[(k, k)] += terms.noise[k];
        }
        symmetrize(&mut g);
        let gf = Factor::new(&g, &self.cfg.jitter, "D_z innovation covariance")?;
        let gain = gf.solve_mat(&(terms.s.transpose() * p.sigma2_g)).transpose();
        let centred = &terms.obs - &terms.h * p.beta_g;
        Ok((terms, gain, centred))
    }

    /// Mean and covariance of `D_z` given everything else.
    pub fn dz_conditional(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let p = &self.state.params;
        let (terms, gain, centred) = self.dz_gain()?;
        let mean = self.grid.design() * p.beta_g + &gain * centred;
        let mut prior_cov = self.grid.corr().clone();
        for i in 0..prior_cov.nrows() {
            prior_cov[(i, i)] += self.grid.factor().jitter();
        }
        let mut cov = (prior_cov - &gain * terms.s.transpose()) * p.sigma2_g;
        symmetrize(&mut cov);
        Ok((mean, cov))
    }

    pub fn update_dz<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let p = &self.state.params;
        let (terms, gain, centred) = self.dz_gain()?;
        // Matheron's rule: prior draw corrected by the gain
        let e0 = self.grid.factor().color(&standard_normal_vec(self.grid.len(), rng)) * p.sigma2_g.sqrt();
        let noise = standard_normal_vec(terms.obs.len(), rng).component_mul(&terms.noise.map(f64::sqrt));
        let simulated = terms.w.transpose() * &e0 + noise;
        let e = e0 + &gain * (centred - simulated);
        self.state.dz = self.grid.design() * p.beta_g + e;
        self.refresh_g_cache()
    }

    // -----------------------------------------------------------------------
    // x_t, x_{T+1}, K_t

    /// Terms of the log target of `x_t` (`1 ≤ t ≤ T`) that change with its
    /// value: own transition, next transition and `log p(y_t | y_{−t})`.
    /// Returns the target at `a` minus the target at the current value.
    pub fn x_log_target_delta(&self, t: usize, a: Angle) -> Result<f64> {
        let (delta, _, _) = self.x_delta(t, a)?;
        Ok(delta)
    }

    fn x_delta(&self, t: usize, a: Angle) -> Result<(f64, (f64, f64), obs::RowProposal)> {
        let path = &self.state.path;
        let cur = path.x[t];
        let (mu, var) = self.own_moments(t);
        let shift = TAU * path.k[t] as f64;
        let own = normal_log_pdf(a.value() + shift, mu, var) - normal_log_pdf(cur.value() + shift, mu, var);
        let next_new = self.transition_at(t + 1, a)?;
        let next_old = self.trans[t + 1];
        let x_next = path.xstar(t + 1);
        let next = normal_log_pdf(x_next, next_new.0, next_new.1) - normal_log_pdf(x_next, next_old.0, next_old.1);
        let row = self.obs.propose_row(t, a, &self.y, &self.state.params.beta_f);
        let delta = own + next + row.log_cond_new - row.log_cond_old;
        Ok((delta, next_new, row))
    }

    pub fn update_x<R: Rng + ?Sized>(&mut self, t: usize, rng: &mut R) -> Result<()> {
        if t == 0 || t > self.t_len() {
            return Err(Error::invalid(format!("x update index {t} outside 1..={}", self.t_len())));
        }
        let prop = self.cfg.x_proposal.sample(self.state.path.x[t], rng);
        let (delta, next, row) = self.x_delta(t, prop)?;
        let accepted = mh_accept(delta, rng);
        if accepted {
            self.obs.accept_row(row)?;
            self.state.path.x[t] = prop;
            self.trans[t + 1] = next;
        }
        self.acceptance.x.record(accepted);
        Ok(())
    }

    /// `(μ, σ², lo, hi)` of the truncated normal for `x*_{T+1}`.
    pub fn x_last_conditional(&self) -> (f64, f64, f64, f64) {
        let t = self.t_len() + 1;
        let (mu, var) = self.own_moments(t);
        let lo = TAU * self.state.path.k[t] as f64;
        (mu, var, lo, lo + TAU)
    }

    pub fn update_x_last<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let t = self.t_len() + 1;
        let (mu, var, lo, hi) = self.x_last_conditional();
        let xs = truncated_normal_sample(mu, var.sqrt(), lo, hi, rng)?;
        let r = (xs - lo).clamp(0.0, TAU);
        let r = if r >= TAU { TAU - TAU * f64::EPSILON } else { r };
        self.state.path.x[t] = Angle::new(r)?;
        Ok(())
    }

    /// `log N(x_t + 2πk; μ_t, σ²_t)`, the part of the joint that depends on `K_t`.
    pub fn k_log_target(&self, t: usize, k: WrapCounter) -> f64 {
        let (mu, var) = self.own_moments(t);
        normal_log_pdf(self.state.path.x[t].value() + TAU * k as f64, mu, var)
    }

    pub fn update_k<R: Rng + ?Sized>(&mut self, t: usize, rng: &mut R) -> Result<()> {
        if t == 0 || t > self.t_len() + 1 {
            return Err(Error::invalid(format!("K update index {t} outside 1..={}", self.t_len() + 1)));
        }
        let cur = self.state.path.k[t];
        let prop = discrete_rw_propose(cur, self.cfg.k_walk_var, rng);
        let accepted = if prop == cur {
            true
        } else if prop.abs() > self.cfg.k_max {
            false
        } else {
            mh_accept(self.k_log_target(t, prop) - self.k_log_target(t, cur), rng)
        };
        // K_t enters only through x*_t; later transitions read the wrapped x_t
        if accepted {
            self.state.path.k[t] = prop;
        }
        self.acceptance.k.record(accepted);
        Ok(())
    }

    // -----------------------------------------------------------------------
    // Sweeps

    /// One full systematic scan.
    pub fn sweep<R: Rng + ?Sized>(&mut self, iteration: usize, rng: &mut R) -> Result<()> {
        let wrap = |block: &'static str| move |e: Error| Error::Block { iteration, block, source: Box::new(e) };
        self.update_beta_f(rng).map_err(wrap("beta_f"))?;
        self.update_beta_g(rng).map_err(wrap("beta_g"))?;
        self.update_sigma2_eps(rng).map_err(wrap("sigma2_eps"))?;
        self.update_sigma2_f(rng).map_err(wrap("sigma2_f"))?;
        if self.cfg.sample_g_variances {
            self.update_sigma2_eta(rng).map_err(wrap("sigma2_eta"))?;
            self.update_sigma2_g(rng).map_err(wrap("sigma2_g"))?;
        }
        self.update_x0(rng).map_err(wrap("x0"))?;
        self.update_g1(rng).map_err(wrap("g1"))?;
        self.update_dz(rng).map_err(wrap("D_z"))?;
        for t in 1..=self.t_len() {
            self.update_x(t, rng).map_err(wrap("x"))?;
        }
        self.update_x_last(rng).map_err(wrap("x_T+1"))?;
        for t in 1..=self.t_len() + 1 {
            self.update_k(t, rng).map_err(wrap("K"))?;
        }
        Ok(())
    }

    /// Recomputes the joint from scratch, returns the discrepancy with the
    /// cached value, and rebuilds the observation cache.
    pub fn audit(&mut self) -> Result<f64> {
        let cached = self.log_joint_cached()?;
        let fresh = self.log_joint_fresh()?;
        self.rebuild_obs()?;
        Ok((cached - fresh).abs())
    }

    fn warn_heavy_wrap_tails(&self) {
        for t in 1..=self.t_len() + 1 {
            let (mu, var) = self.own_moments(t);
            warn_if_tail_heavy(mu, var.sqrt(), self.cfg.k_max);
        }
    }
}

/// One stored draw.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRow {
    pub iter: usize,
    pub logp: f64,
    pub beta_f: [f64; 4],
    pub beta_g_free: Vec<f64>,
    pub sigma2_eps: f64,
    pub sigma2_f: f64,
    /// `x_0..x_{T+1}`.
    pub x: Vec<f64>,
    /// `K_1..K_{T+1}`.
    pub k: Vec<WrapCounter>,
}

/// Output of one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub t_len: usize,
    /// Component indices (0-based) of the stored free `β_g` entries.
    pub beta_g_free: Vec<usize>,
    pub rows: Vec<SampleRow>,
    /// Joint log density after every iteration, burn-in included.
    pub trace: Vec<f64>,
    pub acceptance: Acceptance,
    /// Largest cached-versus-fresh log density gap seen by the audits.
    pub max_audit_error: f64,
}

impl SampleSet {
    /// Draws of `x_t` across stored rows.
    pub fn x_column(&self, t: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r.x[t]).collect()
    }

    /// Concatenates chains with the same layout.
    pub fn merge(sets: &[SampleSet]) -> Result<SampleSet> {
        let first = sets.first().ok_or_else(|| Error::invalid("no chains to merge"))?;
        let mut out = SampleSet { rows: Vec::new(), trace: Vec::new(), ..first.clone() };
        out.max_audit_error = 0.0;
        out.acceptance = Acceptance::default();
        for s in sets {
            if s.t_len != first.t_len || s.beta_g_free != first.beta_g_free {
                return Err(Error::invalid("chains have different layouts"));
            }
            out.rows.extend(s.rows.iter().cloned());
            out.trace.extend(&s.trace);
            out.max_audit_error = out.max_audit_error.max(s.max_audit_error);
            for (dst, src) in [
                (&mut out.acceptance.sigma_eps, s.acceptance.sigma_eps),
                (&mut out.acceptance.sigma_f, s.acceptance.sigma_f),
                (&mut out.acceptance.sigma_eta, s.acceptance.sigma_eta),
                (&mut out.acceptance.sigma_g, s.acceptance.sigma_g),
                (&mut out.acceptance.x0, s.acceptance.x0),
                (&mut out.acceptance.x, s.acceptance.x),
                (&mut out.acceptance.k, s.acceptance.k),
            ] {
                dst.proposed += src.proposed;
                dst.accepted += src.accepted;
            }
        }
        Ok(out)
    }
}

fn snapshot(state: &ChainState, iter: usize, logp: f64) -> SampleRow {
    let p = &state.params;
    SampleRow {
        iter,
        logp,
        beta_f: [p.beta_f[0], p.beta_f[1], p.beta_f[2], p.beta_f[3]],
        beta_g_free: p.beta_g_free().iter().map(|&i| p.beta_g[i]).collect(),
        sigma2_eps: p.sigma2_eps,
        sigma2_f: p.sigma2_f,
        x: state.path.x.iter().map(|a| a.value()).collect(),
        k: state.path.k[1..].to_vec(),
    }
}

/// Runs one chain from the default initialization.
pub fn run_chain(
    y: &DVector<f64>,
    grid: &LookupGrid,
    prior: &PriorSpec,
    mle_variances: (f64, f64),
    cfg: &McmcConfig,
) -> Result<SampleSet> {
    cfg.validate()?;
    if y.is_empty() {
        return Err(Error::invalid("cannot fit an empty series"));
    }
    let (sigma2_g, sigma2_eta) = mle_variances;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let grid = if (grid.scale().sigma2() - sigma2_g).abs() > 1e-12 * sigma2_g {
        grid.with_scale(GpScale::from_variance(sigma2_g)?, &cfg.jitter)?
    } else {
        grid.clone()
    };
    let state = ChainState::initial(y.len(), &grid, prior, sigma2_g, sigma2_eta, &cfg.jitter, &mut rng)?;
    let mut sampler = Sampler::new(y.clone(), grid, prior.clone(), cfg.clone(), state)?;

    let mut rows = Vec::new();
    let mut trace = Vec::with_capacity(cfg.n_iter);
    let mut max_audit_error: f64 = 0.0;
    for iter in 1..=cfg.n_iter {
        sampler.sweep(iter, &mut rng)?;
        if cfg.audit_every > 0 && iter % cfg.audit_every == 0 {
            let err = sampler.audit().map_err(|e| Error::Block { iteration: iter, block: "audit", source: Box::new(e) })?;
            if err > 1e-8 {
                log::warn!("iteration {iter}: cached log density off by {err:e}");
            }
            max_audit_error = max_audit_error.max(err);
        } else if cfg.rebuild_every > 0 && iter % cfg.rebuild_every == 0 {
            sampler.rebuild_obs()?;
        }
        if cfg.rebuild_every > 0 && iter % cfg.rebuild_every == 0 {
            sampler.warn_heavy_wrap_tails();
        }
        let logp = sampler.log_joint_cached()?;
        if !logp.is_finite() {
            return Err(Error::Block {
                iteration: iter,
                block: "log density",
                source: Box::new(Error::NonFinite("joint log density")),
            });
        }
        trace.push(logp);
        if iter > cfg.burn_in && (iter - cfg.burn_in).is_multiple_of(cfg.thin) {
            rows.push(snapshot(sampler.state(), iter, logp));
        }
    }
    Ok(SampleSet {
        t_len: y.len(),
        beta_g_free: sampler.state().params.beta_g_free(),
        rows,
        trace,
        acceptance: *sampler.acceptance(),
        max_audit_error,
    })
}

/// Seed of chain `i` derived from a master seed.
pub fn chain_seed(master: u64, chain: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(chain as u64 + 1);
    rng.random()
}
