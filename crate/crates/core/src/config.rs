//! Run configuration read from TOML.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::anneal::AnnealConfig;
use crate::circular::{Angle, DEFAULT_K_MAX, VonMisesMixture, VonMisesParams, WrapCounter};
use crate::error::{Error, Result};
use crate::mcmc::McmcConfig;
use crate::model::{GridMode, NormalPrior, PriorSpec, VariancePrior};
use crate::simulator::NonlinearSimConfig;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Input series; relative paths resolve against the output directory.
    pub path: PathBuf,
    /// Angles in the input file are in degrees.
    pub degrees: bool,
    pub detrend: bool,
    /// Hold the last observation out of the fit.
    pub holdout: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { path: PathBuf::from("dataset.csv"), degrees: false, detrend: false, holdout: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub n: usize,
    pub mode: GridMode,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { n: 20, mode: GridMode::TimeScaled }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSection {
    pub x0_mu: f64,
    pub x0_kappa: f64,
    pub sigma2_eps: VariancePrior,
    pub sigma2_eta: VariancePrior,
    pub sigma2_f: VariancePrior,
    pub sigma2_g: VariancePrior,
    pub beta_f_mean: [f64; 4],
    pub beta_f_var: [f64; 4],
    pub beta_g_mean: [f64; 4],
    pub beta_g_var: [f64; 4],
}

impl Default for PriorSection {
    fn default() -> Self {
        let p = PriorSpec::default();
        let arr = |v: &DVector<f64>| [v[0], v[1], v[2], v[3]];
        Self {
            x0_mu: p.x0.mu,
            x0_kappa: p.x0.kappa,
            sigma2_eps: p.sigma2_eps,
            sigma2_eta: p.sigma2_eta,
            sigma2_f: p.sigma2_f,
            sigma2_g: p.sigma2_g,
            beta_f_mean: arr(&p.beta_f.mean),
            beta_f_var: arr(&p.beta_f.cov.diagonal()),
            beta_g_mean: arr(&p.beta_g.mean),
            beta_g_var: arr(&p.beta_g.cov.diagonal()),
        }
    }
}

impl PriorSection {
    pub fn to_spec(&self) -> Result<PriorSpec> {
        let normal = |m: &[f64; 4], v: &[f64; 4]| {
            NormalPrior::new(DVector::from_column_slice(m), DMatrix::from_diagonal(&DVector::from_column_slice(v)))
        };
        let spec = PriorSpec {
            x0: VonMisesParams::new(self.x0_mu, self.x0_kappa)?,
            sigma2_eps: self.sigma2_eps,
            sigma2_eta: self.sigma2_eta,
            sigma2_f: self.sigma2_f,
            sigma2_g: self.sigma2_g,
            beta_f: normal(&self.beta_f_mean, &self.beta_f_var)?,
            beta_g: normal(&self.beta_g_mean, &self.beta_g_var)?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// `(σ_g, σ_η)` used by `fit` and `simulate` when no estimate file is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub sigma_g: f64,
    pub sigma_eta: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { sigma_g: 0.1, sigma_eta: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmcSection {
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub chains: usize,
    pub sigma_walk_var: f64,
    pub log_scale_walk: bool,
    pub x0_kappa: f64,
    pub x_kappas: Vec<f64>,
    pub x_weights: Vec<f64>,
    pub k_walk_var: f64,
    pub k_max: WrapCounter,
    pub sample_g_variances: bool,
    pub audit_every: usize,
    pub rebuild_every: usize,
}

impl Default for McmcSection {
    fn default() -> Self {
        let d = McmcConfig::default();
        Self {
            n_iter: d.n_iter,
            burn_in: d.burn_in,
            thin: d.thin,
            chains: 1,
            sigma_walk_var: d.sigma_walk_var,
            log_scale_walk: d.log_scale_walk,
            x0_kappa: d.x0_kappa,
            x_kappas: d.x_proposal.kappas().to_vec(),
            x_weights: d.x_proposal.weights().to_vec(),
            k_walk_var: d.k_walk_var,
            k_max: DEFAULT_K_MAX,
            sample_g_variances: d.sample_g_variances,
            audit_every: d.audit_every,
            rebuild_every: d.rebuild_every,
        }
    }
}

impl McmcSection {
    pub fn to_config(&self, seed: u64) -> Result<McmcConfig> {
        let cfg = McmcConfig {
            n_iter: self.n_iter,
            burn_in: self.burn_in,
            thin: self.thin,
            sigma_walk_var: self.sigma_walk_var,
            log_scale_walk: self.log_scale_walk,
            x0_kappa: self.x0_kappa,
            x_proposal: VonMisesMixture::new(self.x_kappas.clone(), self.x_weights.clone())?,
            k_walk_var: self.k_walk_var,
            k_max: self.k_max,
            sample_g_variances: self.sample_g_variances,
            audit_every: self.audit_every,
            rebuild_every: self.rebuild_every,
            seed,
            ..McmcConfig::default()
        };
        cfg.validate()?;
        if self.chains == 0 {
            return Err(Error::Config("chains must be at least 1".into()));
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnealSection {
    pub init_sigma_g: f64,
    pub init_sigma_eta: f64,
    pub proposal_sd: f64,
    pub initial_temperature: f64,
    pub cooling: f64,
    pub iterations: usize,
    pub mc_samples: usize,
}

impl Default for AnnealSection {
    fn default() -> Self {
        let d = AnnealConfig::default();
        Self {
            init_sigma_g: d.init.0,
            init_sigma_eta: d.init.1,
            proposal_sd: d.proposal_sd.0,
            initial_temperature: d.initial_temperature,
            cooling: d.cooling,
            iterations: d.iterations,
            mc_samples: d.mc_samples,
        }
    }
}

impl AnnealSection {
    pub fn to_config(&self, seed: u64) -> Result<AnnealConfig> {
        let cfg = AnnealConfig {
            init: (self.init_sigma_g, self.init_sigma_eta),
            proposal_sd: (self.proposal_sd, self.proposal_sd),
            initial_temperature: self.initial_temperature,
            cooling: self.cooling,
            iterations: self.iterations,
            mc_samples: self.mc_samples,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimKind {
    /// The tangent-recursion benchmark.
    Nonlinear,
    /// Draws from the fitted model itself.
    Model,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub kind: SimKind,
    pub t_len: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub sigma_u: f64,
    pub sigma_v: f64,
    pub theta0: f64,
}

impl Default for SimulateSection {
    fn default() -> Self {
        let d = NonlinearSimConfig::default();
        Self {
            kind: SimKind::Nonlinear,
            t_len: d.t_len,
            alpha: d.alpha,
            beta: d.beta,
            gamma: d.gamma,
            sigma_u: d.sigma_u,
            sigma_v: d.sigma_v,
            theta0: d.theta0.value(),
        }
    }
}

impl SimulateSection {
    pub fn to_nonlinear(&self, seed: u64) -> Result<NonlinearSimConfig> {
        Ok(NonlinearSimConfig {
            t_len: self.t_len,
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            sigma_u: self.sigma_u,
            sigma_v: self.sigma_v,
            theta0: Angle::new(self.theta0)?,
            seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastSection {
    pub level: f64,
    /// Angular bins of the latent density grid.
    pub density_bins: usize,
}

impl Default for ForecastSection {
    fn default() -> Self {
        Self { level: 0.95, density_bins: 36 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidateGpSection {
    pub psi: Vec<f64>,
    pub dt: Vec<f64>,
    pub dtheta: Vec<f64>,
    pub n_quad: usize,
    pub tolerance: f64,
}

impl Default for ValidateGpSection {
    fn default() -> Self {
        use std::f64::consts::PI;
        Self {
            psi: vec![0.5, 1.0, 2.0],
            dt: vec![0.0, 0.5, 2.0],
            dtheta: vec![0.0, PI / 4.0, PI / 2.0, PI],
            n_quad: 4000,
            tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub data: DataSection,
    pub grid: GridSection,
    pub prior: PriorSection,
    pub model: ModelSection,
    pub mcmc: McmcSection,
    pub anneal: AnnealSection,
    pub simulate: SimulateSection,
    pub forecast: ForecastSection,
    pub validate_gp: ValidateGpSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Seed from the command line, else from the file.
    pub fn resolve_seed(&self, cli: Option<u64>) -> Result<u64> {
        cli.or(self.seed).ok_or_else(|| Error::Config("no seed given in the config or with --seed".into()))
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML form, seed excluded.
    pub fn hash(&self) -> String {
        let canonical = toml::to_string(&RunConfig { seed: None, ..self.clone() }).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.prior.to_spec()?;
        self.mcmc.to_config(0)?;
        self.anneal.to_config(0)?;
        if self.grid.n < 2 {
            return Err(Error::Config("grid.n must be at least 2".into()));
        }
        if !(self.model.sigma_g > 0.0 && self.model.sigma_eta > 0.0) {
            return Err(Error::Config("model.sigma_g and model.sigma_eta must be positive".into()));
        }
        if !(self.forecast.level > 0.0 && self.forecast.level < 1.0) || self.forecast.density_bins == 0 {
            return Err(Error::Config("forecast.level must lie in (0, 1) and density_bins be positive".into()));
        }
        Ok(())
    }
}

/// First line of every output file.
pub fn stamp(cfg: &RunConfig, seed: u64) -> String {
    format!("circ-ssm {VERSION} config_hash={} seed={seed}", cfg.hash())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.prior.to_spec().unwrap(), PriorSpec::default());
        assert_eq!(cfg.mcmc.to_config(3).unwrap(), McmcConfig { seed: 3, ..McmcConfig::default() });
        assert_eq!(cfg.anneal.to_config(3).unwrap(), AnnealConfig { seed: 3, ..AnnealConfig::default() });
    }

    #[test]
    fn sections_parse_and_unknown_keys_fail() {
        let cfg = RunConfig::parse(
            "seed = 4\n[mcmc]\nn_iter = 100\nburn_in = 10\n[prior]\nsigma2_eps = { kind = \"fixed\", value = 0.01 }\n",
        )
        .unwrap();
        assert_eq!(cfg.mcmc.n_iter, 100);
        assert_eq!(cfg.prior.sigma2_eps, VariancePrior::Fixed { value: 0.01 });
        assert_eq!(cfg.resolve_seed(None).unwrap(), 4);
        assert_eq!(cfg.resolve_seed(Some(9)).unwrap(), 9);
        assert!(RunConfig::parse("[mcmc]\nn_itr = 5\n").is_err());
        assert!(RunConfig::parse("bogus = 1\n").is_err());
        assert!(RunConfig::default().resolve_seed(None).is_err());
    }

    #[test]
    fn hash_ignores_seed_and_tracks_content() {
        let a = RunConfig::default();
        let b = RunConfig { seed: Some(3), ..RunConfig::default() };
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
        let mut c = RunConfig::default();
        c.mcmc.n_iter += 1;
        assert_ne!(a.hash(), c.hash());
    }
}
