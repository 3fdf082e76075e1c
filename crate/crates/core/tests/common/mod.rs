//! Independent reference computations shared by the integration tests.
//!
//! Nothing here calls the crate's kernels, factorizations or density
//! helpers; covariances are rebuilt from `exp`/`cos`, densities use LU
//! inverses and determinants, and priors use statrs or direct series.
#![allow(dead_code)]

pub mod suites;

use std::f64::consts::{PI, TAU};

use circ_ssm::circular::Angle;
use circ_ssm::gp::GpScale;
use circ_ssm::linalg::JitterPolicy;
use circ_ssm::mcmc::{ChainState, McmcConfig, Sampler};
use circ_ssm::model::{GridMode, LookupGrid, PriorSpec, VariancePrior, build_grid};
use nalgebra::{DMatrix, DVector, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{Continuous, InverseGamma};

pub fn kernel(t1: f64, th1: f64, t2: f64, th2: f64, sigma2: f64) -> f64 {
    let dt = t1 - t2;
    sigma2 * (-(sigma2 * sigma2) * dt * dt).exp() * (th1 - th2).cos()
}

pub fn h(t: f64, th: f64) -> Vector4<f64> {
    Vector4::new(1.0, t, th.cos(), th.sin())
}

pub fn normal_lpdf(x: f64, m: f64, v: f64) -> f64 {
    -0.5 * (2.0 * PI * v).ln() - 0.5 * (x - m).powi(2) / v
}

/// Dense MVN log density through LU.
pub fn mvn_lpdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let n = x.len() as f64;
    let lu = cov.clone().lu();
    let det = lu.determinant();
    let r = x - mean;
    let sol = lu.solve(&r).expect("nonsingular covariance");
    -0.5 * (n * (2.0 * PI).ln() + det.ln() + r.dot(&sol))
}

/// Conditional moments of block `a` given block `b = xb` of a joint Gaussian.
pub fn condition(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    a: &[usize],
    b: &[usize],
    xb: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let pick = |rows: &[usize], cols: &[usize]| DMatrix::from_fn(rows.len(), cols.len(), |i, j| cov[(rows[i], cols[j])]);
    let saa = pick(a, a);
    let sab = pick(a, b);
    let sbb_inv = pick(b, b).try_inverse().expect("invertible block");
    let ma = DVector::from_iterator(a.len(), a.iter().map(|&i| mean[i]));
    let mb = DVector::from_iterator(b.len(), b.iter().map(|&i| mean[i]));
    let gain = &sab * sbb_inv;
    (ma + &gain * (xb - mb), saa - &gain * sab.transpose())
}

pub fn ig_lpdf(prior: &VariancePrior, v: f64) -> f64 {
    match *prior {
        VariancePrior::InverseGamma { alpha, gamma } => InverseGamma::new(alpha / 2.0, gamma / 2.0).unwrap().ln_pdf(v),
        VariancePrior::Fixed { .. } => 0.0,
    }
}

pub fn von_mises_lpdf(x: f64, mu: f64, kappa: f64) -> f64 {
    // I₀ by its power series
    let mut i0 = 0.0;
    let mut term = 1.0;
    for k in 1..200 {
        i0 += term;
        term *= (kappa / 2.0).powi(2) / (k as f64).powi(2);
    }
    kappa * (x - mu).cos() - (2.0 * PI * i0).ln()
}

/// Grid correlation plus the factorization nugget, times σ²_g.
pub fn grid_cov(grid: &LookupGrid, sigma2: f64) -> DMatrix<f64> {
    let pts = grid.points();
    let n = pts.len();
    let j = grid.factor().jitter();
    DMatrix::from_fn(n, n, |a, b| {
        kernel(pts[a].t, pts[a].theta.value(), pts[b].t, pts[b].theta.value(), sigma2) + if a == b { j * sigma2 } else { 0.0 }
    })
}

pub fn grid_mean(grid: &LookupGrid, beta: &Vector4<f64>) -> DVector<f64> {
    DVector::from_iterator(grid.len(), grid.points().iter().map(|p| h(p.t, p.theta.value()).dot(beta)))
}

/// Moments of `g*(t, θ)` given the grid values.
pub fn gstar_oracle(grid: &LookupGrid, dz: &DVector<f64>, beta: &Vector4<f64>, s2: f64, t: f64, th: f64) -> (f64, f64) {
    let n = grid.len();
    let pts = grid.points();
    let mut cov = DMatrix::zeros(n + 1, n + 1);
    cov.view_mut((0, 0), (n, n)).copy_from(&grid_cov(grid, s2));
    for i in 0..n {
        let c = kernel(pts[i].t, pts[i].theta.value(), t, th, s2);
        cov[(i, n)] = c;
        cov[(n, i)] = c;
    }
    cov[(n, n)] = s2;
    let mut mean = grid_mean(grid, beta).push(0.0);
    mean[n] = h(t, th).dot(beta);
    let b: Vec<usize> = (0..n).collect();
    let (m, v) = condition(&mean, &cov, &[n], &b, dz);
    (m[0], v[(0, 0)])
}

/// Log joint density of a chain state, assembled independently.
pub fn oracle_log_joint(state: &ChainState, y: &DVector<f64>, grid: &LookupGrid, prior: &PriorSpec) -> f64 {
    let p = &state.params;
    let path = &state.path;
    let t_len = y.len();
    let mut lp = 0.0;

    // priors
    lp += mvn_lpdf(&DVector::from_iterator(4, p.beta_f.iter().copied()), &prior.beta_f.mean, &prior.beta_f.cov);
    let free: Vec<usize> = (0..4).filter(|&i| !p.beta_g_fixed[i]).collect();
    if !free.is_empty() {
        let b = DVector::from_iterator(free.len(), free.iter().map(|&i| p.beta_g[i]));
        let m = DVector::from_iterator(free.len(), free.iter().map(|&i| prior.beta_g.mean[i]));
        let c = DMatrix::from_fn(free.len(), free.len(), |a, c| prior.beta_g.cov[(free[a], free[c])]);
        lp += mvn_lpdf(&b, &m, &c);
    }
    lp += ig_lpdf(&prior.sigma2_eps, p.sigma2_eps) + ig_lpdf(&prior.sigma2_f, p.sigma2_f);
    lp += von_mises_lpdf(path.x[0].value(), prior.x0.mu, prior.x0.kappa);

    // (D_z, g1) jointly
    let s2 = p.sigma2_g;
    let n = grid.len();
    let x0 = path.x[0].value();
    let pts = grid.points();
    let mut cov = DMatrix::zeros(n + 1, n + 1);
    cov.view_mut((0, 0), (n, n)).copy_from(&grid_cov(grid, s2));
    for i in 0..n {
        let c = kernel(pts[i].t, pts[i].theta.value(), 1.0, x0, s2);
        cov[(i, n)] = c;
        cov[(n, i)] = c;
    }
    cov[(n, n)] = s2;
    let mut mean = grid_mean(grid, &p.beta_g).push(0.0);
    mean[n] = h(1.0, x0).dot(&p.beta_g);
    lp += mvn_lpdf(&state.dz.clone().push(path.g1), &mean, &cov);

    // latent transitions
    let xstar = |t: usize| path.x[t].value() + TAU * path.k[t] as f64;
    lp += normal_lpdf(xstar(1), path.g1, p.sigma2_eta);
    for t in 2..=t_len + 1 {
        let (m, v) = gstar_oracle(grid, &state.dz, &p.beta_g, s2, t as f64, path.x[t - 1].value());
        lp += normal_lpdf(xstar(t), m, v + p.sigma2_eta);
    }

    // observations
    let cov = DMatrix::from_fn(t_len, t_len, |a, b| {
        kernel((a + 1) as f64, path.x[a + 1].value(), (b + 1) as f64, path.x[b + 1].value(), p.sigma2_f)
            + if a == b { p.sigma2_eps } else { 0.0 }
    });
    let mean = DVector::from_fn(t_len, |a, _| h((a + 1) as f64, path.x[a + 1].value()).dot(&p.beta_f));
    lp += mvn_lpdf(y, &mean, &cov);
    lp
}

pub fn angle(v: f64) -> Angle {
    Angle::new(v.rem_euclid(TAU)).unwrap()
}

pub fn std_normal_vec<R: Rng>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// A tiny random sampler instance with a perturbed state.
pub struct Instance {
    pub sampler: Sampler,
    pub y: DVector<f64>,
    pub grid: LookupGrid,
    pub prior: PriorSpec,
    pub rng: ChaCha8Rng,
}

impl Instance {
    pub fn oracle(&self, state: &ChainState) -> f64 {
        oracle_log_joint(state, &self.y, &self.grid, &self.prior)
    }

    pub fn state(&self) -> ChainState {
        self.sampler.state().clone()
    }
}

pub fn random_instance(seed: u64, max_t: usize, max_n: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_len = rng.random_range(1..=max_t);
    let n = rng.random_range(2..=max_n);
    let policy = JitterPolicy::default();
    let sigma2_g: f64 = rng.random_range(0.2..1.0);
    let sigma2_eta: f64 = rng.random_range(0.05..0.5);
    let grid = build_grid(
        n,
        (1.0, (t_len + 1) as f64),
        GridMode::TimeScaled,
        &GpScale::from_variance(sigma2_g).unwrap(),
        &policy,
        &mut rng,
    )
    .unwrap();
    let prior = PriorSpec::default();
    let mut state = ChainState::initial(t_len, &grid, &prior, sigma2_g, sigma2_eta, &policy, &mut rng).unwrap();
    let p = &mut state.params;
    for i in 0..4 {
        p.beta_f[i] = rng.random_range(-1.0..1.0);
    }
    p.beta_g[0] += rng.random_range(-0.5..0.5);
    p.beta_g[1] += rng.random_range(-0.05..0.05);
    p.sigma2_eps = rng.random_range(0.02..0.3);
    p.sigma2_f = rng.random_range(0.1..1.0);
    for t in 0..state.path.x.len() {
        state.path.x[t] = angle(rng.random_range(0.0..TAU));
    }
    for t in 1..state.path.k.len() {
        state.path.k[t] = rng.random_range(-1..=1);
    }
    let y = std_normal_vec(t_len, &mut rng) * 0.7;
    // put D_z and g1 near their prior so the Gaussian terms are moderate
    let noise = std_normal_vec(n, &mut rng) * (0.3 * sigma2_g.sqrt());
    state.dz = grid_mean(&grid, &state.params.beta_g) + noise;
    state.path.g1 = state.path.x[1].value() + TAU * state.path.k[1] as f64 + rng.random_range(-0.3..0.3);
    let cfg = McmcConfig { n_iter: 10, burn_in: 5, seed, ..McmcConfig::default() };
    let sampler = Sampler::new(y.clone(), grid.clone(), prior.clone(), cfg, state).unwrap();
    Instance { sampler, y, grid, prior, rng }
}
