//! Simulated-annealing maximization of the Monte Carlo integrated likelihood
//! over `(σ_g, σ_η)`.

use nalgebra::{DVector, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::circular::{Angle, von_mises_sample};
use crate::error::{Error, Result};
use crate::gp::GpScale;
use crate::linalg::JitterPolicy;
use crate::model::{
    GstarPredictor, LookupGrid, ModelParams, PriorSpec, DEFAULT_BETA_G_FIXED, draw_g1_dz,
    obs_log_density, wrap,
};

#[derive(Debug, Clone, PartialEq)]
pub struct AnnealConfig {
    /// Starting `(σ_g, σ_η)`.
    pub init: (f64, f64),
    /// Standard deviation of the walk on `(log σ_g, log σ_η)`.
    pub proposal_sd: (f64, f64),
    pub initial_temperature: f64,
    /// Geometric cooling factor per iteration.
    pub cooling: f64,
    pub iterations: usize,
    /// Monte Carlo draws per likelihood evaluation.
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        Self {
            init: (0.3, 0.3),
            proposal_sd: (0.2, 0.2),
            initial_temperature: 1.0,
            cooling: 0.98,
            iterations: 300,
            mc_samples: 200,
            seed: 0,
        }
    }
}

impl AnnealConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [self.init.0, self.init.1, self.proposal_sd.0, self.proposal_sd.1, self.initial_temperature];
        if pos.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Config("annealing start, proposal scales and temperature must be positive".into()));
        }
        if !(self.cooling > 0.0 && self.cooling < 1.0) {
            return Err(Error::Config(format!("cooling factor must lie in (0, 1), got {}", self.cooling)));
        }
        if self.mc_samples == 0 {
            return Err(Error::Config("mc_samples must be at least 1".into()));
        }
        Ok(())
    }
}

/// Log of the average observation likelihood over `m` draws of everything
/// except `(σ_g, σ_η)` from the priors and the generative model.
///
/// Draw `i` uses stream `i` of a generator seeded with `seed`, so repeated
/// evaluations at different `(σ_g, σ_η)` share their random numbers.
#[allow(clippy::too_many_arguments)]
pub fn integrated_loglik_mc(
    sigma_g: f64,
    sigma_eta: f64,
    y: &DVector<f64>,
    grid: &LookupGrid,
    prior: &PriorSpec,
    m: usize,
    seed: u64,
    policy: &JitterPolicy,
) -> Result<f64> {
    if m == 0 {
        return Err(Error::invalid("need at least one Monte Carlo draw"));
    }
    if !(sigma_g > 0.0) || !(sigma_eta > 0.0) {
        return Err(Error::invalid("sigma_g and sigma_eta must be positive"));
    }
    let grid = grid.with_scale(GpScale::new(sigma_g)?, policy)?;
    let logs: Vec<f64> = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            one_draw(sigma_g * sigma_g, sigma_eta * sigma_eta, y, &grid, prior, policy, &mut rng)
        })
        .collect::<Result<_>>()?;
    log_mean_exp(&logs).ok_or(Error::Underflow(m))
}

fn log_mean_exp(v: &[f64]) -> Option<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return None;
    }
    let s: f64 = v.iter().map(|x| (x - max).exp()).sum();
    Some(max + (s / v.len() as f64).ln())
}

fn one_draw<R: Rng + ?Sized>(
    sigma2_g: f64,
    sigma2_eta: f64,
    y: &DVector<f64>,
    grid: &LookupGrid,
    prior: &PriorSpec,
    policy: &JitterPolicy,
    rng: &mut R,
) -> Result<f64> {
    let beta_f = prior.beta_f.sample(rng)?;
    let beta_g = prior.beta_g.sample(rng)?;
    let mut p = ModelParams {
        beta_f: Vector4::from_iterator(beta_f.iter().copied()),
        beta_g: Vector4::from_iterator(beta_g.iter().copied()),
        beta_g_fixed: DEFAULT_BETA_G_FIXED,
        sigma2_eps: prior.sigma2_eps.sample(rng),
        sigma2_eta,
        sigma2_f: prior.sigma2_f.sample(rng),
        sigma2_g,
    };
    for (i, fixed) in p.beta_g_fixed.iter().enumerate() {
        if *fixed {
            p.beta_g[i] = prior.beta_g.mean[i];
        }
    }
    let x = latent_angles(y.len(), grid, &p, prior, policy, rng)?;
    obs_log_density(y, &x, &p, policy)
}

/// `x_1..x_T` from the generative model.
fn latent_angles<R: Rng + ?Sized>(
    t_len: usize,
    grid: &LookupGrid,
    p: &ModelParams,
    prior: &PriorSpec,
    policy: &JitterPolicy,
    rng: &mut R,
) -> Result<Vec<Angle>> {
    let x0 = von_mises_sample(&prior.x0, rng);
    let (g1, dz) = draw_g1_dz(grid, x0, p, policy, rng)?;
    let eta = p.sigma2_eta.sqrt();
    let z: f64 = StandardNormal.sample(rng);
    let mut x = Vec::with_capacity(t_len);
    x.push(wrap(g1 + eta * z)?.0);
    let pred = GstarPredictor::new(grid, &dz, p)?;
    for t in 2..=t_len {
        let (mu, v) = pred.moments(t as f64, x[t - 2])?;
        let z: f64 = StandardNormal.sample(rng);
        x.push(wrap(mu + (v + p.sigma2_eta).sqrt() * z)?.0);
    }
    x.truncate(t_len);
    Ok(x)
}

/// One annealing iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnealStep {
    pub iter: usize,
    pub temperature: f64,
    pub proposed: (f64, f64),
    pub proposed_loglik: f64,
    pub accepted: bool,
    pub current: (f64, f64),
    pub current_loglik: f64,
    pub best_loglik: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnealResult {
    pub sigma_g: f64,
    pub sigma_eta: f64,
    pub best_loglik: f64,
    pub trace: Vec<AnnealStep>,
}

/// Random walk on `(log σ_g, log σ_η)` accepting with `min(1, exp(Δ/T_k))`,
/// `T_k = T₀ c^k`. Returns the best pair seen.
pub fn anneal(
    y: &DVector<f64>,
    grid: &LookupGrid,
    prior: &PriorSpec,
    cfg: &AnnealConfig,
    policy: &JitterPolicy,
) -> Result<AnnealResult> {
    cfg.validate()?;
    let mc_seed = cfg.seed;
    let mut walk = ChaCha8Rng::seed_from_u64(cfg.seed);
    walk.set_stream(u64::MAX);
    let eval = |sg: f64, se: f64| integrated_loglik_mc(sg, se, y, grid, prior, cfg.mc_samples, mc_seed, policy);

    let mut current = cfg.init;
    let mut current_ll = eval(current.0, current.1)?;
    let mut best = (current, current_ll);
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut temperature = cfg.initial_temperature;
    for iter in 0..cfg.iterations {
        let z1: f64 = StandardNormal.sample(&mut walk);
        let z2: f64 = StandardNormal.sample(&mut walk);
        let proposed = (
            (current.0.ln() + cfg.proposal_sd.0 * z1).exp(),
            (current.1.ln() + cfg.proposal_sd.1 * z2).exp(),
        );
        let proposed_ll = match eval(proposed.0, proposed.1) {
            Ok(v) => v,
            Err(Error::Underflow(_)) | Err(Error::Singular { .. }) | Err(Error::Degenerate(_)) => {
                log::debug!("annealing proposal {proposed:?} has no usable likelihood");
                f64::NEG_INFINITY
            }
            Err(e) => return Err(e),
        };
        let delta = proposed_ll - current_ll;
        let u: f64 = walk.random();
        let accepted = proposed_ll.is_finite() && (delta >= 0.0 || u.ln() < delta / temperature);
        if accepted {
            current = proposed;
            current_ll = proposed_ll;
            if current_ll > best.1 {
                best = (current, current_ll);
            }
        }
        trace.push(AnnealStep {
            iter,
            temperature,
            proposed,
            proposed_loglik: proposed_ll,
            accepted,
            current,
            current_loglik: current_ll,
            best_loglik: best.1,
        });
        temperature *= cfg.cooling;
    }
    Ok(AnnealResult { sigma_g: best.0.0, sigma_eta: best.0.1, best_loglik: best.1, trace })
}
