//! Command-line front end.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::anneal::anneal;
use crate::config::{RunConfig, SimKind, stamp};
use crate::error::{Error, Result};
use crate::forecast::{hpd_interval, latent_density_grid, latent_draws, predictive_from_samples};
use crate::gp::{GpScale, LinCircPoint, convolution_cov_quadrature, cov};
use crate::io::{
    Dataset, Trend, detrend_linear, read_dataset, read_samples, write_dataset, write_file, write_samples, write_table,
};
use crate::linalg::JitterPolicy;
use crate::mcmc::{SampleSet, chain_seed, run_chain};
use crate::model::{LookupGrid, ModelParams, build_grid, generate_path};
use crate::simulator::simulate_nonlinear;

#[derive(Debug, Parser)]
#[command(name = "circ-ssm", version, about = "State-space model with a circular latent process")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed (overrides the config file).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Number of parallel chains for `fit` (overrides the config file).
    #[arg(long, global = true)]
    pub chains: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset.
    Simulate,
    /// Estimate (sigma_g, sigma_eta) by simulated annealing.
    Mle,
    /// Run the sampler and write the stored draws.
    Fit,
    /// One-step-ahead predictive draws and HPD interval.
    Forecast,
    /// Latent density grid, parameter traces and acceptance rates.
    Diagnose,
    /// Compare the closed-form covariance with numerical kernel convolution.
    ValidateGp,
}

struct Ctx {
    cfg: RunConfig,
    seed: u64,
    out: PathBuf,
    stamp: String,
    policy: JitterPolicy,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn data_path(&self) -> PathBuf {
        let p = &self.cfg.data.path;
        if p.is_absolute() { p.clone() } else { self.out.join(p) }
    }
}

/// Parses arguments and runs the command.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Config(e.to_string()))?;
    execute(&cli)
}

pub fn execute(cli: &Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(c) = cli.chains {
        cfg.mcmc.chains = c;
    }
    cfg.validate()?;
    let seed = cfg.resolve_seed(cli.seed)?;
    fs::create_dir_all(&cli.out)?;
    let ctx = Ctx { stamp: stamp(&cfg, seed), cfg, seed, out: cli.out.clone(), policy: JitterPolicy::default() };
    log::info!("{} command={:?}", ctx.stamp, cli.command);
    match cli.command {
        Command::Simulate => simulate(&ctx),
        Command::Mle => mle(&ctx),
        Command::Fit => fit(&ctx),
        Command::Forecast => forecast(&ctx),
        Command::Diagnose => diagnose(&ctx),
        Command::ValidateGp => validate_gp(&ctx),
    }
}

fn grid_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    rng
}

fn lookup_grid(ctx: &Ctx, t_len: usize, sigma_g: f64) -> Result<LookupGrid> {
    build_grid(
        ctx.cfg.grid.n,
        (1.0, (t_len + 1) as f64),
        ctx.cfg.grid.mode,
        &GpScale::new(sigma_g)?,
        &ctx.policy,
        &mut grid_rng(ctx.seed),
    )
}

fn simulate(ctx: &Ctx) -> Result<()> {
    let s = &ctx.cfg.simulate;
    let data = match s.kind {
        SimKind::Nonlinear => {
            let series = simulate_nonlinear(&s.to_nonlinear(ctx.seed)?)?;
            let times = (1..=series.y.len()).map(|t| t as f64).collect();
            Dataset::new(times, series.y, Some(series.theta[1..].to_vec()))?
        }
        SimKind::Model => {
            let m = &ctx.cfg.model;
            let prior = ctx.cfg.prior.to_spec()?;
            let grid = lookup_grid(ctx, s.t_len, m.sigma_g)?;
            let p = ModelParams::from_prior(&prior, m.sigma_g.powi(2), m.sigma_eta.powi(2))?;
            let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
            rng.set_stream(1);
            let gen = generate_path(s.t_len, &grid, &p, &prior, &ctx.policy, &mut rng)?;
            let theta = gen.path.observed().iter().map(|a| a.value()).collect();
            Dataset::new((1..=s.t_len).map(|t| t as f64).collect(), gen.y.iter().copied().collect(), Some(theta))?
        }
    };
    write_file(&ctx.path("dataset.csv"), |w| write_dataset(w, &data, Some(&ctx.stamp)))
}

/// Series used for fitting, the held-out value and the trend.
struct Prepared {
    full: Dataset,
    fit: Dataset,
    holdout: Option<f64>,
    trend: Option<Trend>,
}

impl Prepared {
    fn y(&self) -> DVector<f64> {
        self.fit.y_vector()
    }

    /// Time of the forecast target.
    fn next_time(&self) -> f64 {
        let t = &self.full.times;
        match self.holdout {
            Some(_) => t[t.len() - 1],
            None if t.len() >= 2 => 2.0 * t[t.len() - 1] - t[t.len() - 2],
            None => t[t.len() - 1] + 1.0,
        }
    }
}

fn prepare(ctx: &Ctx) -> Result<Prepared> {
    let full = read_dataset(&ctx.data_path(), ctx.cfg.data.degrees)?;
    if full.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    let (mut fit, holdout) = if ctx.cfg.data.holdout {
        let (d, h) = full.split_last()?;
        (d, Some(h))
    } else {
        (full.clone(), None)
    };
    let trend = if ctx.cfg.data.detrend {
        let (d, tr) = detrend_linear(&fit)?;
        fit = d;
        Some(tr)
    } else {
        None
    };
    Ok(Prepared { full, fit, holdout, trend })
}

fn mle(ctx: &Ctx) -> Result<()> {
    let data = prepare(ctx)?;
    let prior = ctx.cfg.prior.to_spec()?;
    let acfg = ctx.cfg.anneal.to_config(ctx.seed)?;
    let grid = lookup_grid(ctx, data.fit.len(), acfg.init.0)?;
    let res = anneal(&data.y(), &grid, &prior, &acfg, &ctx.policy)?;
    write_file(&ctx.path("mle.txt"), |w| {
        use std::io::Write;
        writeln!(w, "# {}", ctx.stamp)?;
        writeln!(w, "sigma_g = {}", res.sigma_g)?;
        writeln!(w, "sigma_eta = {}", res.sigma_eta)?;
        writeln!(w, "loglik = {}", res.best_loglik)?;
        Ok(())
    })?;
    let rows: Vec<Vec<String>> = res
        .trace
        .iter()
        .map(|s| {
            vec![
                s.iter.to_string(),
                s.temperature.to_string(),
                s.proposed.0.to_string(),
                s.proposed.1.to_string(),
                s.proposed_loglik.to_string(),
                u8::from(s.accepted).to_string(),
                s.current.0.to_string(),
                s.current.1.to_string(),
                s.current_loglik.to_string(),
                s.best_loglik.to_string(),
            ]
        })
        .collect();
    let cols = [
        "iter", "temperature", "prop_sigma_g", "prop_sigma_eta", "prop_loglik", "accepted", "sigma_g", "sigma_eta",
        "loglik", "best_loglik",
    ];
    write_file(&ctx.path("anneal_trace.csv"), |w| write_table(w, Some(&ctx.stamp), &cols, &rows))
}

/// `(σ_g, σ_η)` from `mle.txt` in the output directory, else from the config.
fn scales(ctx: &Ctx) -> Result<(f64, f64)> {
    let path = ctx.path("mle.txt");
    if !path.exists() {
        return Ok((ctx.cfg.model.sigma_g, ctx.cfg.model.sigma_eta));
    }
    let est = read_estimates(&path)?;
    let get = |key: &str| {
        est.iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Config(format!("{} has no {key}", path.display())))
    };
    Ok((get("sigma_g")?, get("sigma_eta")?))
}

fn fit(ctx: &Ctx) -> Result<()> {
    let data = prepare(ctx)?;
    let y = data.y();
    let prior = ctx.cfg.prior.to_spec()?;
    let (sg, se) = scales(ctx)?;
    log::info!("fitting with sigma_g = {sg}, sigma_eta = {se}");
    let grid = lookup_grid(ctx, y.len(), sg)?;
    let n_chains = ctx.cfg.mcmc.chains;
    let cfgs: Vec<_> = (0..n_chains)
        .map(|i| ctx.cfg.mcmc.to_config(if n_chains == 1 { ctx.seed } else { chain_seed(ctx.seed, i) }))
        .collect::<Result<_>>()?;
    let chains: Vec<Result<SampleSet>> = std::thread::scope(|s| {
        let handles: Vec<_> = cfgs
            .iter()
            .map(|c| s.spawn(|| run_chain(&y, &grid, &prior, (sg * sg, se * se), c)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("chain thread panicked")).collect()
    });
    let chains: Vec<SampleSet> = chains.into_iter().collect::<Result<_>>()?;
    let merged = SampleSet::merge(&chains)?;
    write_file(&ctx.path("samples.csv"), |w| write_samples(w, &merged, Some(&ctx.stamp)))?;

    let mut trace = Vec::new();
    for (c, s) in chains.iter().enumerate() {
        for (i, lp) in s.trace.iter().enumerate() {
            trace.push(vec![c.to_string(), (i + 1).to_string(), lp.to_string()]);
        }
    }
    write_file(&ctx.path("trace.csv"), |w| write_table(w, Some(&ctx.stamp), &["chain", "iter", "logp"], &trace))?;

    let acc: Vec<Vec<String>> = merged
        .acceptance
        .named()
        .iter()
        .map(|(n, r)| vec![n.to_string(), r.proposed.to_string(), r.accepted.to_string(), r.rate().to_string()])
        .collect();
    write_file(&ctx.path("acceptance.csv"), |w| {
        write_table(w, Some(&ctx.stamp), &["block", "proposed", "accepted", "rate"], &acc)
    })?;

    if let Some(tr) = data.trend {
        write_file(&ctx.path("trend.txt"), |w| {
            use std::io::Write;
            writeln!(w, "# {}", ctx.stamp)?;
            writeln!(w, "intercept = {}", tr.intercept)?;
            writeln!(w, "slope = {}", tr.slope)?;
            Ok(())
        })?;
    }
    Ok(())
}

fn load_samples(ctx: &Ctx, t_len: usize) -> Result<SampleSet> {
    let s = read_samples(&ctx.path("samples.csv"))?;
    if s.t_len != t_len {
        return Err(Error::Config(format!(
            "samples.csv covers {} observations but the prepared dataset has {t_len}",
            s.t_len
        )));
    }
    Ok(s)
}

fn forecast(ctx: &Ctx) -> Result<()> {
    let data = prepare(ctx)?;
    let y = data.y();
    let samples = load_samples(ctx, y.len())?;
    let mut rng_seed = ChaCha8Rng::seed_from_u64(ctx.seed);
    rng_seed.set_stream(2);
    let draws = predictive_from_samples(&samples, &y, &ctx.policy, rand::Rng::random(&mut rng_seed))?;
    let shift = data.trend.map_or(0.0, |tr| tr.at(data.next_time()));
    let values: Vec<f64> = draws.iter().map(|d| d.y_next).collect();
    let level = ctx.cfg.forecast.level;
    let (lo, hi) = hpd_interval(&values, level)?;
    let mean = values.iter().sum::<f64>() / values.len() as f64;

    let rows: Vec<Vec<String>> = draws
        .iter()
        .map(|d| vec![d.iter.to_string(), d.y_next.to_string(), (d.y_next + shift).to_string()])
        .collect();
    write_file(&ctx.path("predictive.csv"), |w| {
        write_table(w, Some(&ctx.stamp), &["iter", "y_next_model", "y_next_original"], &rows)
    })?;
    write_file(&ctx.path("forecast.txt"), |w| {
        use std::io::Write;
        writeln!(w, "# {}", ctx.stamp)?;
        writeln!(w, "level = {level}")?;
        writeln!(w, "t_next = {}", data.next_time())?;
        writeln!(w, "mean_model = {mean}")?;
        writeln!(w, "hpd_lower_model = {lo}")?;
        writeln!(w, "hpd_upper_model = {hi}")?;
        writeln!(w, "mean_original = {}", mean + shift)?;
        writeln!(w, "hpd_lower_original = {}", lo + shift)?;
        writeln!(w, "hpd_upper_original = {}", hi + shift)?;
        if let Some(h) = data.holdout {
            writeln!(w, "holdout_original = {h}")?;
            writeln!(w, "holdout_covered = {}", lo + shift <= h && h <= hi + shift)?;
        }
        Ok(())
    })
}

fn diagnose(ctx: &Ctx) -> Result<()> {
    let data = prepare(ctx)?;
    let samples = load_samples(ctx, data.fit.len())?;
    let bins = ctx.cfg.forecast.density_bins;
    let grid = latent_density_grid(&latent_draws(&samples), bins)?;

    let mut rows = Vec::new();
    for (t, col) in grid.columns.iter().enumerate() {
        for (b, d) in col.iter().enumerate() {
            rows.push(vec![(t + 1).to_string(), b.to_string(), grid.bin_center(b).to_string(), d.to_string()]);
        }
    }
    write_file(&ctx.path("density_grid.csv"), |w| {
        write_table(w, Some(&ctx.stamp), &["t", "bin", "angle", "mass"], &rows)
    })?;

    let truth = data.fit.theta_true.as_ref();
    let mut cols = vec!["t", "median"];
    if truth.is_some() {
        cols.extend(["theta_true", "in_high_mass"]);
    }
    let rows: Vec<Vec<String>> = grid
        .medians
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let mut r = vec![(i + 1).to_string(), m.to_string()];
            if let Some(th) = truth {
                r.push(th[i].to_string());
                r.push(grid.in_high_mass(i, th[i], 0.5).to_string());
            }
            r
        })
        .collect();
    write_file(&ctx.path("latent_summary.csv"), |w| write_table(w, Some(&ctx.stamp), &cols, &rows))?;

    let mut pcols: Vec<String> = ["iter", "logp", "beta_f_1", "beta_f_2", "beta_f_3", "beta_f_4"].map(String::from).to_vec();
    pcols.extend(samples.beta_g_free.iter().map(|i| format!("beta_g_{}", i + 1)));
    pcols.extend(["sigma2_eps".to_string(), "sigma2_f".to_string()]);
    let rows: Vec<Vec<String>> = samples
        .rows
        .iter()
        .map(|r| {
            let mut v = vec![r.iter.to_string(), r.logp.to_string()];
            v.extend(r.beta_f.iter().map(f64::to_string));
            v.extend(r.beta_g_free.iter().map(f64::to_string));
            v.push(r.sigma2_eps.to_string());
            v.push(r.sigma2_f.to_string());
            v
        })
        .collect();
    let refs: Vec<&str> = pcols.iter().map(String::as_str).collect();
    write_file(&ctx.path("parameter_trace.csv"), |w| write_table(w, Some(&ctx.stamp), &refs, &rows))?;

    let acc = ctx.path("acceptance.csv");
    if !acc.exists() {
        log::warn!("{} not found; run `fit` first for acceptance rates", acc.display());
    }
    Ok(())
}

fn validate_gp(ctx: &Ctx) -> Result<()> {
    let v = &ctx.cfg.validate_gp;
    let mut rows = Vec::new();
    let mut failures = 0;
    for &psi in &v.psi {
        let scale = GpScale::from_psi(psi)?;
        for &dt in &v.dt {
            for &dth in &v.dtheta {
                let p1 = LinCircPoint::new(0.0, 0.0)?;
                let p2 = LinCircPoint::new(dt, dth)?;
                let closed = cov(&p1, &p2, &scale);
                let q = convolution_cov_quadrature(&p1, &p2, psi, v.n_quad)?;
                let err = (closed - q.value).abs();
                let pass = err <= v.tolerance;
                failures += usize::from(!pass);
                rows.push(vec![
                    psi.to_string(),
                    dt.to_string(),
                    dth.to_string(),
                    closed.to_string(),
                    q.value.to_string(),
                    err.to_string(),
                    q.error.to_string(),
                    if pass { "pass" } else { "fail" }.to_string(),
                ]);
            }
        }
    }
    let cols = ["psi", "dt", "dtheta", "closed_form", "quadrature", "abs_error", "quad_error", "status"];
    write_file(&ctx.path("validate_gp.csv"), |w| write_table(w, Some(&ctx.stamp), &cols, &rows))?;
    if failures > 0 {
        return Err(Error::InvalidInput(format!("{failures} of {} covariance checks failed", rows.len())));
    }
    Ok(())
}

/// Reads a `key = value` file as written by `mle`.
pub fn read_estimates(path: &Path) -> Result<Vec<(String, f64)>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim_start().starts_with('#') && !l.trim().is_empty())
        .map(|(i, l)| {
            let (k, v) = l.split_once('=').ok_or_else(|| Error::Parse { line: i + 1, message: "expected key = value".into() })?;
            let v = v.trim().parse().map_err(|_| Error::Parse { line: i + 1, message: format!("bad number {:?}", v.trim()) })?;
            Ok((k.trim().to_string(), v))
        })
        .collect()
}
