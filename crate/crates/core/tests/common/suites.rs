//! Checks shared by the focused integration tests and the acceptance run.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use circ_ssm::circular::{Angle, wrap_weight};
use circ_ssm::forecast::{ObsLayer, predictive_moments};
use circ_ssm::gp::{GpScale, LinCircPoint, convolution_cov_quadrature, cov};
use circ_ssm::linalg::JitterPolicy;
use circ_ssm::mcmc::ChainState;
use circ_ssm::model::{GridMode, ModelParams, build_grid, dz_given_g1, gstar_conditional};
use nalgebra::{DMatrix, DVector, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

/// Largest ratio-test error per block on one instance.
pub fn conditional_errors(inst: &mut Instance) -> Vec<(&'static str, f64)> {
    let s = &inst.sampler;
    let base = inst.state();
    let rng = &mut inst.rng;
    let mut out = Vec::new();
    let oracle = |st: &ChainState| oracle_log_joint(st, &inst.y, &inst.grid, &inst.prior);

    let draw_near = |m: &DVector<f64>, c: &DMatrix<f64>, rng: &mut ChaCha8Rng| {
        let l = c.clone().cholesky().expect("conditional covariance").l();
        m + l * std_normal_vec(m.len(), rng)
    };

    // β_f
    let (m, c) = s.beta_f_conditional().unwrap();
    let (a, b) = (draw_near(&m, &c, rng), draw_near(&m, &c, rng));
    let with = |v: &DVector<f64>| {
        let mut st = base.clone();
        st.params.beta_f = Vector4::from_iterator(v.iter().copied());
        st
    };
    let err = (oracle(&with(&a)) - oracle(&with(&b))) - (mvn_lpdf(&a, &m, &c) - mvn_lpdf(&b, &m, &c));
    out.push(("beta_f", err.abs()));

    // β_g (free components)
    let free = base.params.beta_g_free();
    let (m, c) = s.beta_g_conditional().unwrap();
    let (a, b) = (draw_near(&m, &c, rng), draw_near(&m, &c, rng));
    let with = |v: &DVector<f64>| {
        let mut st = base.clone();
        for (j, &i) in free.iter().enumerate() {
            st.params.beta_g[i] = v[j];
        }
        st
    };
    let err = (oracle(&with(&a)) - oracle(&with(&b))) - (mvn_lpdf(&a, &m, &c) - mvn_lpdf(&b, &m, &c));
    out.push(("beta_g", err.abs()));

    // g*(1, x0)
    let (m, v) = s.g1_conditional().unwrap();
    let a = m + v.sqrt() * rng.random_range(-2.0..2.0);
    let b = m + v.sqrt() * rng.random_range(-2.0..2.0);
    let with = |g: f64| {
        let mut st = base.clone();
        st.path.g1 = g;
        st
    };
    let err = (oracle(&with(a)) - oracle(&with(b))) - (normal_lpdf(a, m, v) - normal_lpdf(b, m, v));
    out.push(("g1", err.abs()));

    // D_z
    let (m, c) = s.dz_conditional().unwrap();
    let (a, b) = (draw_near(&m, &c, rng), draw_near(&m, &c, rng));
    let with = |d: &DVector<f64>| ChainState { dz: d.clone(), ..base.clone() };
    let err = (oracle(&with(&a)) - oracle(&with(&b))) - (mvn_lpdf(&a, &m, &c) - mvn_lpdf(&b, &m, &c));
    out.push(("D_z", err.abs()));

    // x_{T+1} on its band
    let last = s.t_len() + 1;
    let (mu, var, lo, hi) = s.x_last_conditional();
    let mut band_err = if (lo - TAU * base.path.k[last] as f64).abs() > 0.0 || (hi - lo - TAU).abs() > 1e-12 {
        f64::INFINITY
    } else {
        0.0
    };
    let (a, b) = (rng.random_range(0.0..TAU), rng.random_range(0.0..TAU));
    let with = |x: f64| {
        let mut st = base.clone();
        st.path.x[last] = Angle::new(x).unwrap();
        st
    };
    let err = (oracle(&with(a)) - oracle(&with(b))) - (normal_lpdf(a + lo, mu, var) - normal_lpdf(b + lo, mu, var));
    band_err = band_err.max(err.abs());
    out.push(("x_last", band_err));

    // Metropolis targets
    let (a, b) = (angle(rng.random_range(0.0..TAU)), angle(rng.random_range(0.0..TAU)));
    let with = |x: Angle| {
        let mut st = base.clone();
        st.path.x[0] = x;
        st
    };
    let err = (oracle(&with(a)) - oracle(&with(b))) - (s.x0_log_target(a).unwrap() - s.x0_log_target(b).unwrap());
    out.push(("x0 target", err.abs()));

    let cur = oracle(&base);
    let mut worst: f64 = 0.0;
    for t in 1..=s.t_len() {
        let a = angle(rng.random_range(0.0..TAU));
        let mut st = base.clone();
        st.path.x[t] = a;
        worst = worst.max(((oracle(&st) - cur) - s.x_log_target_delta(t, a).unwrap()).abs());
    }
    out.push(("x_t target", worst));

    let mut worst: f64 = 0.0;
    for t in 1..=s.t_len() + 1 {
        let (k1, k2) = (rng.random_range(-2..=2), rng.random_range(-2..=2));
        let with = |k| {
            let mut st = base.clone();
            st.path.k[t] = k;
            st
        };
        let err = (oracle(&with(k1)) - oracle(&with(k2))) - (s.k_log_target(t, k1) - s.k_log_target(t, k2));
        worst = worst.max(err.abs());
    }
    out.push(("K_t target", worst));

    for (name, is_eps) in [("sigma_eps target", true), ("sigma_f target", false)] {
        let cur = if is_eps { base.params.sigma2_eps } else { base.params.sigma2_f }.sqrt();
        let (a, b) = (cur * rng.random_range(0.7..1.4), cur * rng.random_range(0.7..1.4));
        let with = |sd: f64| {
            let mut st = base.clone();
            if is_eps {
                st.params.sigma2_eps = sd * sd;
            } else {
                st.params.sigma2_f = sd * sd;
            }
            st
        };
        let target = |sd| if is_eps { s.sigma_eps_log_target(sd).unwrap() } else { s.sigma_f_log_target(sd).unwrap() };
        // the walk is on σ, so the target carries |dσ²/dσ| = 2σ
        let lhs = oracle(&with(a)) + (2.0 * a).ln() - oracle(&with(b)) - (2.0 * b).ln();
        out.push((name, (lhs - (target(a) - target(b))).abs()));
    }
    out
}

/// Largest error of the partitioned-Gaussian comparisons on one instance.
pub fn gaussian_oracle_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let policy = JitterPolicy::default();
    let n = rng.random_range(2..=6);
    let s2: f64 = rng.random_range(0.2..1.5);
    let grid = build_grid(n, (1.0, 6.0), GridMode::TimeScaled, &GpScale::from_variance(s2).unwrap(), &policy, &mut rng)
        .unwrap();
    let beta_g = Vector4::new(rng.random_range(0.0..3.0), rng.random_range(-0.2..0.2), 1.0, 1.0);
    let p = ModelParams {
        beta_f: Vector4::new(rng.random_range(-1.0..1.0), 0.1, rng.random_range(-1.0..1.0), 0.3),
        beta_g,
        beta_g_fixed: [false, false, true, true],
        sigma2_eps: rng.random_range(0.01..0.3),
        sigma2_eta: 0.1,
        sigma2_f: rng.random_range(0.1..1.0),
        sigma2_g: s2,
    };
    let mut out = Vec::new();

    // D_z | g1 from the joint of (D_z, g1) without nugget
    let x0: f64 = rng.random_range(0.0..TAU);
    let g1 = h(1.0, x0).dot(&beta_g) + rng.random_range(-1.0..1.0);
    let pts = grid.points();
    let mut c = DMatrix::zeros(n + 1, n + 1);
    for i in 0..=n {
        for j in 0..=n {
            let (ti, thi) = if i < n { (pts[i].t, pts[i].theta.value()) } else { (1.0, x0) };
            let (tj, thj) = if j < n { (pts[j].t, pts[j].theta.value()) } else { (1.0, x0) };
            c[(i, j)] = kernel(ti, thi, tj, thj, s2);
        }
    }
    let mut mean = grid_mean(&grid, &beta_g).push(0.0);
    mean[n] = h(1.0, x0).dot(&beta_g);
    let a: Vec<usize> = (0..n).collect();
    let (m_ref, c_ref) = condition(&mean, &c, &a, &[n], &DVector::from_element(1, g1));
    let (m, cc) = dz_given_g1(&grid, angle(x0), g1, &p).unwrap();
    out.push(("dz_given_g1", (m - m_ref).amax().max((cc - c_ref).amax())));

    // g* at a random input given D_z
    let dz = grid_mean(&grid, &beta_g) + std_normal_vec(n, &mut rng) * s2.sqrt();
    let (t, th) = (rng.random_range(1.0..6.0), rng.random_range(0.0..TAU));
    let (m_ref, v_ref) = gstar_oracle(&grid, &dz, &beta_g, s2, t, th);
    let (m, v) = gstar_conditional(t, angle(th), &dz, &grid, &p).unwrap();
    out.push(("gstar_conditional", (m - m_ref).abs().max((v - v_ref).abs())));

    // y_{T+1} | y_{1:T} from the joint of T + 1 observations
    let t_len = rng.random_range(1..=5);
    let xs: Vec<f64> = (0..=t_len).map(|_| rng.random_range(0.0..TAU)).collect();
    let joint_cov = DMatrix::from_fn(t_len + 1, t_len + 1, |a, b| {
        kernel((a + 1) as f64, xs[a], (b + 1) as f64, xs[b], p.sigma2_f) + if a == b { p.sigma2_eps } else { 0.0 }
    });
    let joint_mean = DVector::from_fn(t_len + 1, |a, _| h((a + 1) as f64, xs[a]).dot(&p.beta_f));
    let y = std_normal_vec(t_len, &mut rng);
    let b: Vec<usize> = (0..t_len).collect();
    let (m_ref, v_ref) = condition(&joint_mean, &joint_cov, &[t_len], &b, &y);
    let mut x_all: Vec<Angle> = vec![angle(0.0)];
    x_all.extend(xs.iter().map(|&v| angle(v)));
    let layer = ObsLayer::from_state(&p, &x_all).unwrap();
    let (m, v) = predictive_moments(&layer, &y, &policy).unwrap();
    out.push(("predictive", (m - m_ref[0]).abs().max((v - v_ref[(0, 0)]).abs())));
    out
}

pub struct CovCase {
    pub psi: f64,
    pub dt: f64,
    pub dtheta: f64,
    pub closed: f64,
    pub quad: f64,
}

/// Closed-form covariance against kernel-convolution quadrature over the
/// full ψ × Δt × Δθ grid.
pub fn covariance_cases() -> Vec<CovCase> {
    let mut out = Vec::new();
    for psi in [0.5, 1.0, 2.0] {
        let scale = GpScale::from_psi(psi).unwrap();
        for dt in [0.0, 0.5, 2.0] {
            for dtheta in [0.0, PI / 4.0, FRAC_PI_2, PI] {
                let p1 = LinCircPoint::new(0.0, 0.0).unwrap();
                let p2 = LinCircPoint::new(dt, dtheta).unwrap();
                let closed = cov(&p1, &p2, &scale);
                let quad = convolution_cov_quadrature(&p1, &p2, psi, 4000).unwrap().value;
                out.push(CovCase { psi, dt, dtheta, closed, quad });
            }
        }
    }
    out
}

/// Largest deviation of Σ_k wrap_weight from 1 over random (μ, σ ≤ 2).
pub fn wrap_weight_sum_error(seed: u64, cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let mu = rng.random_range(-30.0..30.0);
        let sigma = rng.random_range(0.01..2.0);
        let total: f64 = (-20..=20).map(|k| wrap_weight(k, mu, sigma).unwrap()).sum();
        worst = worst.max((total - 1.0).abs());
    }
    worst
}

/// Alternating the truncated-normal draw of `x_{T+1}` with the `K_{T+1}`
/// walk targets `N(μ, σ²)` on the unwrapped line, so the counter must follow
/// the band masses.
pub fn counter_histogram(seed: u64, draws: usize, thin: usize) -> (Vec<usize>, Vec<f64>) {
    let mut inst = random_instance(seed, 3, 3);
    let mut st = inst.state();
    st.params.sigma2_eta = 4.0;
    inst.sampler.set_state(st).unwrap();
    let last = inst.sampler.t_len() + 1;
    let (mu, var) = inst.sampler.own_moments(last);
    let k_max = inst.sampler.config().k_max;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0usize; (2 * k_max + 1) as usize];
    for _ in 0..draws {
        for _ in 0..thin {
            inst.sampler.update_x_last(&mut rng).unwrap();
            inst.sampler.update_k(last, &mut rng).unwrap();
        }
        counts[(inst.sampler.state().path.k[last] + k_max) as usize] += 1;
    }
    let w: Vec<f64> = (-k_max..=k_max).map(|k| wrap_weight(k, mu, var.sqrt()).unwrap()).collect();
    let total: f64 = w.iter().sum();
    (counts, w.iter().map(|v| v / total).collect())
}
