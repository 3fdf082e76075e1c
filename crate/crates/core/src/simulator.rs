//! Data generators and a replicate harness for coverage studies.

use std::f64::consts::PI;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::circular::{Angle, mod_2pi};
use crate::error::{Error, Result};
use crate::forecast::{DensityGrid, hpd_interval};
use crate::mcmc::chain_seed;

/// Settings of the nonlinear benchmark
/// `tan((θ_t−π)/2) = α w + β w/(1+w²) + γ cos(1.2(t−1)) + u_t`, with
/// `w = tan((θ_{t−1}−π)/2)`, observed through `y_t = tan²(θ_t)/20 + v_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NonlinearSimConfig {
    pub t_len: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub sigma_u: f64,
    pub sigma_v: f64,
    pub theta0: Angle,
    pub seed: u64,
}

impl Default for NonlinearSimConfig {
    fn default() -> Self {
        Self {
            t_len: 101,
            alpha: 0.05,
            beta: 0.1,
            gamma: 0.2,
            sigma_u: 0.1,
            sigma_v: 0.1,
            theta0: Angle::new(PI).expect("finite"),
            seed: 0,
        }
    }
}

/// Output of [`simulate_nonlinear`].
#[derive(Debug, Clone, PartialEq)]
pub struct NonlinearSeries {
    /// `y_1..y_T`.
    pub y: Vec<f64>,
    /// `θ_0..θ_T`.
    pub theta: Vec<f64>,
    /// `w_1..w_T`.
    pub w: Vec<f64>,
}

const SINGULAR_TOL: f64 = 1e-12;

pub fn simulate_nonlinear(cfg: &NonlinearSimConfig) -> Result<NonlinearSeries> {
    if cfg.sigma_u < 0.0 || cfg.sigma_v < 0.0 || !cfg.sigma_u.is_finite() || !cfg.sigma_v.is_finite() {
        return Err(Error::invalid("noise scales must be nonnegative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let u = Normal::new(0.0, cfg.sigma_u).map_err(|e| Error::invalid(e.to_string()))?;
    let v = Normal::new(0.0, cfg.sigma_v).map_err(|e| Error::invalid(e.to_string()))?;
    let mut theta = vec![cfg.theta0.value()];
    let mut y = Vec::with_capacity(cfg.t_len);
    let mut w = Vec::with_capacity(cfg.t_len);
    for t in 1..=cfg.t_len {
        let half = 0.5 * (theta[t - 1] - PI);
        if half.cos().abs() < SINGULAR_TOL {
            return Err(Error::Simulation { step: t, message: format!("angle {} hits the tangent singularity", theta[t - 1]) });
        }
        let wp = half.tan();
        let wt = cfg.alpha * wp
            + cfg.beta * wp / (1.0 + wp * wp)
            + cfg.gamma * (1.2 * (t as f64 - 1.0)).cos()
            + u.sample(&mut rng);
        let th = mod_2pi(PI + 2.0 * wt.atan())?.value();
        if th.cos().abs() < SINGULAR_TOL {
            return Err(Error::Simulation { step: t, message: format!("tan({th}) overflows") });
        }
        let tan = th.tan();
        y.push(tan * tan / 20.0 + v.sample(&mut rng));
        theta.push(th);
        w.push(wt);
    }
    Ok(NonlinearSeries { y, theta, w })
}

/// A generated data set for the harness.
#[derive(Debug, Clone, PartialEq)]
pub struct Replicate {
    /// Full series; the last value is held out.
    pub y: Vec<f64>,
    /// True latent angles `x_1..x_{T}` of the training period, when known.
    pub theta_true: Option<Vec<f64>>,
}

/// What a fit returns to the harness.
#[derive(Debug, Clone, PartialEq)]
pub struct FitSummary {
    pub predictive: Vec<f64>,
    pub density: Option<DensityGrid>,
}

/// Scores of one replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateScore {
    pub holdout: f64,
    pub hpd: (f64, f64),
    pub covered: bool,
    /// Training times whose true angle sits in the top-50% bins.
    pub latent_hits: usize,
    pub latent_total: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateRow {
    pub rep: usize,
    pub seed: u64,
    pub outcome: std::result::Result<ReplicateScore, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HarnessReport {
    pub level: f64,
    pub rows: Vec<ReplicateRow>,
}

impl HarnessReport {
    pub fn scores(&self) -> impl Iterator<Item = &ReplicateScore> {
        self.rows.iter().filter_map(|r| r.outcome.as_ref().ok())
    }

    pub fn n_ok(&self) -> usize {
        self.scores().count()
    }

    pub fn n_covered(&self) -> usize {
        self.scores().filter(|s| s.covered).count()
    }

    /// Pooled `(hits, total)` over all (replicate, time) pairs.
    pub fn latent_coverage(&self) -> (usize, usize) {
        self.scores().fold((0, 0), |(h, n), s| (h + s.latent_hits, n + s.latent_total))
    }

    pub fn mean_width(&self) -> f64 {
        let w: Vec<f64> = self.scores().map(|s| s.hpd.1 - s.hpd.0).collect();
        w.iter().sum::<f64>() / w.len().max(1) as f64
    }
}

/// Runs `generator → hold out last y → fit → score` for each replicate, in
/// parallel, with seeds derived from `master_seed`. A failing replicate is
/// recorded; the harness fails only if every replicate does.
pub fn replicate_harness<G, F>(n_reps: usize, master_seed: u64, level: f64, generator: G, fit: F) -> Result<HarnessReport>
where
    G: Fn(u64) -> Result<Replicate> + Sync,
    F: Fn(&DVector<f64>, u64) -> Result<FitSummary> + Sync,
{
    if n_reps == 0 {
        return Err(Error::invalid("harness needs at least one replicate"));
    }
    let rows: Vec<ReplicateRow> = (0..n_reps)
        .into_par_iter()
        .map(|rep| {
            let seed = chain_seed(master_seed, rep);
            let outcome = run_one(seed, level, &generator, &fit).map_err(|e| e.to_string());
            if let Err(e) = &outcome {
                log::warn!("replicate {rep} failed: {e}");
            }
            ReplicateRow { rep, seed, outcome }
        })
        .collect();
    let report = HarnessReport { level, rows };
    if report.n_ok() == 0 {
        let first = report.rows[0].outcome.clone().err().unwrap_or_default();
        return Err(Error::invalid(format!("all {n_reps} replicates failed; first error: {first}")));
    }
    Ok(report)
}

fn run_one<G, F>(seed: u64, level: f64, generator: &G, fit: &F) -> Result<ReplicateScore>
where
    G: Fn(u64) -> Result<Replicate>,
    F: Fn(&DVector<f64>, u64) -> Result<FitSummary>,
{
    let data = generator(seed)?;
    let n = data.y.len();
    if n < 2 {
        return Err(Error::invalid("replicate series too short to hold out a value"));
    }
    let holdout = data.y[n - 1];
    let train = DVector::from_column_slice(&data.y[..n - 1]);
    let summary = fit(&train, seed.wrapping_add(1))?;
    let hpd = hpd_interval(&summary.predictive, level)?;
    let covered = hpd.0 <= holdout && holdout <= hpd.1;
    let (latent_hits, latent_total) = match (&summary.density, &data.theta_true) {
        (Some(grid), Some(truth)) => {
            let m = truth.len().min(grid.columns.len());
            let hits = (0..m).filter(|&t| grid.in_high_mass(t, truth[t], 0.5)).count();
            (hits, m)
        }
        _ => (0, 0),
    };
    Ok(ReplicateScore { holdout, hpd, covered, latent_hits, latent_total })
}
