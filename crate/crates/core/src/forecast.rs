//! Posterior predictive draws for `y_{T+1}`, HPD intervals, and per-time
//! histograms of the latent angles.

use std::f64::consts::TAU;

use nalgebra::{DVector, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::circular::{Angle, arc_distance};
use crate::error::{Error, Result};
use crate::gp::{GpScale, LinCircPoint, basis_h, corr_vector};
use crate::linalg::{Factor, JitterPolicy};
use crate::mcmc::{SampleRow, SampleSet};
use crate::model::{ModelParams, obs_marginal_moments, obs_points};

/// One draw of `y_{T+1}` and the stored iteration it came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictiveDraw {
    pub y_next: f64,
    pub iter: usize,
}

/// The `f`-layer quantities a predictive draw needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsLayer {
    pub beta_f: Vector4<f64>,
    pub sigma2_eps: f64,
    pub sigma2_f: f64,
    /// `x_1..x_T`.
    pub x: Vec<Angle>,
    pub x_next: Angle,
}

impl ObsLayer {
    pub fn from_row(row: &SampleRow) -> Result<Self> {
        let n = row.x.len();
        if n < 2 {
            return Err(Error::invalid("sample row has no latent states"));
        }
        let x = row.x[1..n - 1].iter().map(|&v| Angle::new(v)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            beta_f: Vector4::from(row.beta_f),
            sigma2_eps: row.sigma2_eps,
            sigma2_f: row.sigma2_f,
            x,
            x_next: Angle::new(row.x[n - 1])?,
        })
    }

    pub fn from_state(p: &ModelParams, x_all: &[Angle]) -> Result<Self> {
        let n = x_all.len();
        if n < 2 {
            return Err(Error::invalid("latent path too short"));
        }
        Ok(Self {
            beta_f: p.beta_f,
            sigma2_eps: p.sigma2_eps,
            sigma2_f: p.sigma2_f,
            x: x_all[1..n - 1].to_vec(),
            x_next: x_all[n - 1],
        })
    }
}

/// Mean and variance of `y_{T+1}` given `y_{1:T}` and the latent angles:
/// `h'β_f + c'Σ⁻¹(y − Hβ_f)` and `σ²_f + σ²_ε − c'Σ⁻¹c`, with `Σ` the
/// observation covariance and `c` the covariances of `f(T+1, x_{T+1})` with
/// the training inputs.
pub fn predictive_moments(layer: &ObsLayer, y: &DVector<f64>, policy: &JitterPolicy) -> Result<(f64, f64)> {
    if y.len() != layer.x.len() {
        return Err(Error::invalid("observation and latent lengths differ"));
    }
    let t_next = (y.len() + 1) as f64;
    let q = LinCircPoint::from_angle(t_next, layer.x_next);
    let h = basis_h(&q);
    let prior_var = layer.sigma2_f + layer.sigma2_eps;
    if y.is_empty() {
        return Ok((h.dot(&layer.beta_f), prior_var));
    }
    let p = ModelParams {
        beta_f: layer.beta_f,
        beta_g: Vector4::zeros(),
        beta_g_fixed: [false; 4],
        sigma2_eps: layer.sigma2_eps,
        sigma2_eta: 1.0,
        sigma2_f: layer.sigma2_f,
        sigma2_g: 1.0,
    };
    let (mean, cov) = obs_marginal_moments(&layer.x, &p);
    let f = Factor::new(&cov, policy, "observation covariance")?;
    let scale = GpScale::from_variance(layer.sigma2_f)?;
    let c = corr_vector(&q, &obs_points(&layer.x), &scale) * layer.sigma2_f;
    let w = f.solve_vec(&c);
    let m = h.dot(&layer.beta_f) + w.dot(&(y - mean));
    let v = prior_var - w.dot(&c);
    if !(v > 0.0) {
        return Err(Error::Degenerate(format!("predictive variance {v:e}")));
    }
    Ok((m, v))
}

pub fn predictive_draw<R: Rng + ?Sized>(
    layer: &ObsLayer,
    y: &DVector<f64>,
    iter: usize,
    policy: &JitterPolicy,
    rng: &mut R,
) -> Result<PredictiveDraw> {
    let (m, v) = predictive_moments(layer, y, policy)?;
    let z: f64 = StandardNormal.sample(rng);
    Ok(PredictiveDraw { y_next: m + v.sqrt() * z, iter })
}

/// One predictive draw per stored row.
pub fn predictive_from_samples(
    samples: &SampleSet,
    y: &DVector<f64>,
    policy: &JitterPolicy,
    seed: u64,
) -> Result<Vec<PredictiveDraw>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    samples
        .rows
        .iter()
        .map(|row| predictive_draw(&ObsLayer::from_row(row)?, y, row.iter, policy, &mut rng))
        .collect()
}

/// Shortest interval covering `⌈level·n⌉` of the sorted samples.
pub fn hpd_interval(samples: &[f64], level: f64) -> Result<(f64, f64)> {
    if samples.len() < 100 {
        return Err(Error::invalid(format!("HPD interval needs at least 100 samples, got {}", samples.len())));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!("HPD level must lie in (0, 1), got {level}")));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("HPD samples"));
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let m = ((level * n as f64).ceil() as usize).clamp(1, n);
    let (lo, hi) = (0..=n - m)
        .map(|i| (s[i], s[i + m - 1]))
        .min_by(|a, b| (a.1 - a.0).total_cmp(&(b.1 - b.0)))
        .expect("nonempty");
    Ok((lo, hi))
}

/// Per-time histograms of latent angles over equal bins of `[0, 2π)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    pub n_bins: usize,
    /// `columns[t][b]`: share of draws at time index `t` in bin `b`.
    pub columns: Vec<Vec<f64>>,
    /// Circular median per time index.
    pub medians: Vec<f64>,
}

impl DensityGrid {
    pub fn bin_of(&self, angle: f64) -> usize {
        bin_index(angle, self.n_bins)
    }

    pub fn bin_center(&self, b: usize) -> f64 {
        (b as f64 + 0.5) * TAU / self.n_bins as f64
    }

    /// Bins holding the most mass in column `t`, taken greedily until their
    /// total reaches `mass`.
    pub fn high_mass_bins(&self, t: usize, mass: f64) -> Vec<bool> {
        let col = &self.columns[t];
        let mut order: Vec<usize> = (0..self.n_bins).collect();
        order.sort_by(|&a, &b| col[b].total_cmp(&col[a]).then(a.cmp(&b)));
        let mut keep = vec![false; self.n_bins];
        let mut acc = 0.0;
        for b in order {
            if acc >= mass {
                break;
            }
            keep[b] = true;
            acc += col[b];
        }
        keep
    }

    /// Whether `angle` falls in the top-`mass` bins of column `t`.
    pub fn in_high_mass(&self, t: usize, angle: f64, mass: f64) -> bool {
        self.high_mass_bins(t, mass)[self.bin_of(angle)]
    }
}

fn bin_index(angle: f64, n_bins: usize) -> usize {
    let a = angle.rem_euclid(TAU);
    ((a / TAU * n_bins as f64) as usize).min(n_bins - 1)
}

/// Builds the histogram grid from per-time draws.
pub fn latent_density_grid(draws_by_time: &[Vec<f64>], n_bins: usize) -> Result<DensityGrid> {
    if n_bins == 0 {
        return Err(Error::invalid("density grid needs at least one bin"));
    }
    if draws_by_time.is_empty() || draws_by_time.iter().any(|c| c.is_empty()) {
        return Err(Error::invalid("density grid needs draws at every time"));
    }
    let mut columns = Vec::with_capacity(draws_by_time.len());
    let mut medians = Vec::with_capacity(draws_by_time.len());
    for draws in draws_by_time {
        let mut counts = vec![0usize; n_bins];
        for &a in draws {
            if !a.is_finite() {
                return Err(Error::NonFinite("latent draw"));
            }
            counts[bin_index(a, n_bins)] += 1;
        }
        let n = draws.len() as f64;
        columns.push(counts.iter().map(|&c| c as f64 / n).collect());
        medians.push(circular_median(draws, n_bins));
    }
    Ok(DensityGrid { n_bins, columns, medians })
}

/// Latent draws `x_1..x_T` of a sample set, grouped by time.
pub fn latent_draws(samples: &SampleSet) -> Vec<Vec<f64>> {
    (1..=samples.t_len).map(|t| samples.x_column(t)).collect()
}

/// Bin centre minimizing the mean arc distance to the draws.
pub fn circular_median(draws: &[f64], n_bins: usize) -> f64 {
    let mut best = (f64::INFINITY, 0.0);
    for b in 0..n_bins {
        let c = (b as f64 + 0.5) * TAU / n_bins as f64;
        let d: f64 = draws.iter().map(|&a| arc_distance(a, c)).sum();
        if d < best.0 {
            best = (d, c);
        }
    }
    best.1
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use std::f64::consts::FRAC_PI_2;

    fn layer(x: Vec<f64>, x_next: f64, sigma2_f: f64) -> ObsLayer {
        ObsLayer {
            beta_f: Vector4::new(0.4, 0.1, -0.3, 0.8),
            sigma2_eps: 0.02,
            sigma2_f,
            x: x.into_iter().map(|v| Angle::new(v).unwrap()).collect(),
            x_next: Angle::new(x_next).unwrap(),
        }
    }

    #[test]
    fn no_gp_limit() {
        let l = layer(vec![0.3, 1.2, 2.0], 0.7, 1e-14);
        let y = DVector::from_vec(vec![3.0, -2.0, 1.0]);
        let (m, v) = predictive_moments(&l, &y, &JitterPolicy::default()).unwrap();
        let h = basis_h(&LinCircPoint::new(4.0, 0.7).unwrap());
        assert!((m - h.dot(&l.beta_f)).abs() < 1e-9);
        assert!((v - 0.02).abs() < 1e-9);
    }

    #[test]
    fn orthogonal_next_angle_ignores_data() {
        let l = layer(vec![1.0, 1.0, 1.0], 1.0 + FRAC_PI_2, 0.7);
        let y = DVector::from_vec(vec![3.0, -2.0, 1.0]);
        let (m, v) = predictive_moments(&l, &y, &JitterPolicy::default()).unwrap();
        let h = basis_h(&LinCircPoint::new(4.0, 1.0 + FRAC_PI_2).unwrap());
        assert!((m - h.dot(&l.beta_f)).abs() < 1e-12);
        assert!((v - 0.72).abs() < 1e-12);
    }

    #[test]
    fn hpd_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let normal: Vec<f64> = (0..100_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let (lo, hi) = hpd_interval(&normal, 0.95).unwrap();
        assert!((lo + 1.96).abs() < 0.05 && (hi - 1.96).abs() < 0.05, "{lo} {hi}");
        assert_eq!(hpd_interval(&[2.5; 200], 0.9).unwrap(), (2.5, 2.5));
        let unif: Vec<f64> = (0..100_000).map(|_| rng.random::<f64>()).collect();
        let (lo, hi) = hpd_interval(&unif, 0.5).unwrap();
        assert!((hi - lo - 0.5).abs() < 0.02);
        assert!(hpd_interval(&[1.0; 50], 0.9).is_err());
        assert!(hpd_interval(&normal, 1.0).is_err());
    }

    #[test]
    fn hpd_nested_in_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s: Vec<f64> = (0..5000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut prev = hpd_interval(&s, 0.1).unwrap();
        for l in [0.3, 0.5, 0.8, 0.95, 0.99] {
            let cur = hpd_interval(&s, l).unwrap();
            assert!(cur.0 <= prev.0 && cur.1 >= prev.1);
            prev = cur;
        }
    }

    #[test]
    fn density_grid_examples() {
        let g = latent_density_grid(&[vec![1.0], vec![5.0]], 100).unwrap();
        for col in &g.columns {
            assert_eq!(col.iter().filter(|&&v| v == 1.0).count(), 1);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * TAU).collect();
        let g = latent_density_grid(std::slice::from_ref(&draws), 20).unwrap();
        let tol = 5.0 / (n as f64).sqrt();
        assert!(g.columns[0].iter().all(|v| (v - 0.05).abs() < tol));
        assert!((g.columns[0].iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let mut rev = draws;
        rev.reverse();
        assert_eq!(latent_density_grid(&[rev], 20).unwrap(), g);
    }

    #[test]
    fn circular_median_across_zero() {
        let draws = [6.1, 6.2, 0.05, 0.1, 0.15];
        let m = circular_median(&draws, 200);
        assert!(arc_distance(m, 0.05) < 0.05);
    }

    #[test]
    fn high_mass_bins() {
        let g = DensityGrid { n_bins: 4, columns: vec![vec![0.1, 0.45, 0.3, 0.15]], medians: vec![0.0] };
        assert_eq!(g.high_mass_bins(0, 0.5), vec![false, true, true, false]);
        assert!(g.in_high_mass(0, 2.0, 0.5));
        assert!(!g.in_high_mass(0, 0.1, 0.5));
    }
}
