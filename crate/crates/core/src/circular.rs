//! Angle arithmetic and the circular / wrapped distributions used by the
//! latent process: von Mises densities and samplers, wrapped-normal band
//! masses, truncated normal draws and the discrete random walk that moves
//! wrap counters.

use std::f64::consts::{PI, TAU};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use libm::erfc;
use statrs::function::erf::erfc_inv;

use crate::error::{Error, Result};

/// Integer number of full turns separating a linear value from its circular image.
pub type WrapCounter = i64;

/// Default support bound for wrap counters, `|k| <= K_MAX`.
pub const DEFAULT_K_MAX: WrapCounter = 10;

/// An angle in radians, always reduced to `[0, 2π)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default)]
pub struct Angle(f64);

impl Angle {
    pub const ZERO: Angle = Angle(0.0);

    /// Reduces `x` modulo 2π.
    pub fn new(x: f64) -> Result<Self> {
        mod_2pi(x)
    }

    /// Wraps an already-reduced value. Debug builds check the range.
    pub(crate) fn from_reduced(x: f64) -> Self {
        debug_assert!((0.0..TAU).contains(&x), "angle {x} not reduced");
        Angle(x)
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }
}

impl From<Angle> for f64 {
    fn from(a: Angle) -> f64 {
        a.0
    }
}

/// `x − 2π·floor(x/2π)`, with the upper end `2π` mapped to `0`.
pub fn mod_2pi(x: f64) -> Result<Angle> {
    if !x.is_finite() {
        return Err(Error::NonFinite("mod_2pi argument"));
    }
    if (0.0..TAU).contains(&x) {
        return Ok(Angle(x));
    }
    let r = x - TAU * (x / TAU).floor();
    // rounding can land exactly on 2π (or a hair outside) for tiny negative x
    let r = if !(0.0..TAU).contains(&r) { 0.0 } else { r };
    Ok(Angle(r))
}

/// Arc-length distance between two angles, in `[0, π]`.
pub fn arc_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TAU);
    d.min(TAU - d)
}

// ---------------------------------------------------------------------------
// Standard normal helpers

/// Standard normal CDF, evaluated through `erfc` so both tails keep full
/// relative precision.
pub fn norm_cdf(x: f64) -> f64 {
    if x == f64::INFINITY {
        1.0
    } else if x == f64::NEG_INFINITY {
        0.0
    } else {
        0.5 * erfc(-x / std::f64::consts::SQRT_2)
    }
}

/// Upper tail `1 − Φ(x)`.
pub fn norm_sf(x: f64) -> f64 {
    norm_cdf(-x)
}

/// Inverse of the standard normal CDF.
pub fn norm_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        f64::NEG_INFINITY
    } else if p >= 1.0 {
        f64::INFINITY
    } else {
        -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p)
    }
}

/// Log density of `N(mean, var)` at `x`.
pub fn normal_log_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * ((TAU * var).ln() + d * d / var)
}

// ---------------------------------------------------------------------------
// Von Mises

/// Location and concentration of a von Mises law.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VonMisesParams {
    pub mu: f64,
    pub kappa: f64,
}

impl VonMisesParams {
    pub fn new(mu: f64, kappa: f64) -> Result<Self> {
        if !mu.is_finite() {
            return Err(Error::NonFinite("von Mises location"));
        }
        if kappa.is_nan() || kappa < 0.0 {
            return Err(Error::invalid(format!(
                "von Mises concentration must be >= 0, got {kappa}"
            )));
        }
        Ok(Self { mu, kappa })
    }

    pub fn uniform() -> Self {
        Self { mu: 0.0, kappa: 0.0 }
    }
}

/// `ln I₀(x)` for `x >= 0`: power series below 50, asymptotic expansion above.
pub fn log_bessel_i0(x: f64) -> f64 {
    let x = x.abs();
    if x < 50.0 {
        let q = 0.25 * x * x;
        let mut term = 1.0;
        let mut sum = 1.0;
        let mut k = 1.0;
        loop {
            term *= q / (k * k);
            sum += term;
            if term < sum * 1e-17 {
                break;
            }
            k += 1.0;
        }
        sum.ln()
    } else {
        // e^x / sqrt(2πx) · Σ ((2k−1)!!)² / (k! (8x)^k)
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 1..40 {
            let kf = k as f64;
            let odd = 2.0 * kf - 1.0;
            term *= odd * odd / (kf * 8.0 * x);
            sum += term;
            if term < sum * 1e-17 {
                break;
            }
        }
        x - 0.5 * (TAU * x).ln() + sum.ln()
    }
}

pub fn von_mises_log_density(theta: f64, p: &VonMisesParams) -> f64 {
    p.kappa * (theta - p.mu).cos() - TAU.ln() - log_bessel_i0(p.kappa)
}

/// Density `exp(κ cos(θ−μ)) / (2π I₀(κ))`.
pub fn von_mises_density(theta: Angle, p: &VonMisesParams) -> Result<f64> {
    if p.kappa < 0.0 || p.kappa.is_nan() {
        return Err(Error::invalid("von Mises concentration must be >= 0"));
    }
    Ok(von_mises_log_density(theta.value(), p).exp())
}

/// Draws from a von Mises law with the Best–Fisher rejection scheme.
pub fn von_mises_sample<R: Rng + ?Sized>(p: &VonMisesParams, rng: &mut R) -> Angle {
    let kappa = p.kappa;
    if kappa.is_infinite() {
        return mod_2pi(p.mu).unwrap_or(Angle::ZERO);
    }
    if kappa < 1e-8 {
        let u: f64 = rng.random();
        return mod_2pi(p.mu + TAU * u).unwrap_or(Angle::ZERO);
    }
    if kappa > 1e6 {
        // wrapped normal limit; the rejection envelope loses precision here
        let z: f64 = StandardNormal.sample(rng);
        return mod_2pi(p.mu + z / kappa.sqrt()).unwrap_or(Angle::ZERO);
    }
    let tau = 1.0 + (1.0 + 4.0 * kappa * kappa).sqrt();
    let rho = (tau - (2.0 * tau).sqrt()) / (2.0 * kappa);
    let r = (1.0 + rho * rho) / (2.0 * rho);
    loop {
        let u1: f64 = rng.random();
        let u2: f64 = rng.random();
        let u3: f64 = rng.random();
        let z = (PI * u1).cos();
        let f = (1.0 + r * z) / (r + z);
        let c = kappa * (r - f);
        if c * (2.0 - c) - u2 > 0.0 || (c / u2).ln() + 1.0 - c >= 0.0 {
            let theta = f.clamp(-1.0, 1.0).acos();
            let theta = if u3 < 0.5 { -theta } else { theta };
            return mod_2pi(p.mu + theta).unwrap_or(Angle::ZERO);
        }
    }
}

/// Finite mixture of von Mises components sharing a common centre. Used as a
/// symmetric random-walk proposal on the circle.
#[derive(Debug, Clone, PartialEq)]
pub struct VonMisesMixture {
    kappas: Vec<f64>,
    weights: Vec<f64>,
}

impl VonMisesMixture {
    pub fn new(kappas: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if kappas.is_empty() {
            return Err(Error::invalid("von Mises mixture needs at least one component"));
        }
        if kappas.len() != weights.len() {
            return Err(Error::invalid("mixture kappas and weights differ in length"));
        }
        if kappas.iter().any(|k| k.is_nan() || *k < 0.0) {
            return Err(Error::invalid("mixture concentrations must be >= 0"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("mixture weights must be nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("mixture weights sum to {total}, not 1")));
        }
        Ok(Self { kappas, weights })
    }

    pub fn kappas(&self) -> &[f64] {
        &self.kappas
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn sample<R: Rng + ?Sized>(&self, center: Angle, rng: &mut R) -> Angle {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut idx = self.kappas.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                idx = i;
                break;
            }
        }
        let p = VonMisesParams { mu: center.value(), kappa: self.kappas[idx] };
        von_mises_sample(&p, rng)
    }

    /// Proposal density of moving from `center` to `theta`.
    pub fn density(&self, theta: Angle, center: Angle) -> f64 {
        self.kappas
            .iter()
            .zip(&self.weights)
            .filter(|(_, w)| **w > 0.0)
            .map(|(k, w)| {
                let p = VonMisesParams { mu: center.value(), kappa: *k };
                w * von_mises_log_density(theta.value(), &p).exp()
            })
            .sum()
    }
}

/// Samples one component of the mixture given explicit parts.
pub fn von_mises_mixture_sample<R: Rng + ?Sized>(
    center: Angle,
    kappas: &[f64],
    weights: &[f64],
    rng: &mut R,
) -> Result<Angle> {
    let mix = VonMisesMixture::new(kappas.to_vec(), weights.to_vec())?;
    Ok(mix.sample(center, rng))
}

// ---------------------------------------------------------------------------
// Wrapped normal bands

/// Mass that a `N(mu, sigma²)` variable puts on the band `[2πk, 2π(k+1))`.
pub fn wrap_weight(k: WrapCounter, mu: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("wrap_weight needs sigma > 0, got {sigma}")));
    }
    if !mu.is_finite() {
        return Err(Error::NonFinite("wrap_weight mean"));
    }
    let a = (TAU * k as f64 - mu) / sigma;
    let b = (TAU * (k as f64 + 1.0) - mu) / sigma;
    Ok(band_mass(a, b))
}

/// `Φ(b) − Φ(a)` for `a <= b`, computed on whichever tail avoids cancellation.
pub(crate) fn band_mass(a: f64, b: f64) -> f64 {
    let m = if a >= 0.0 {
        norm_sf(a) - norm_sf(b)
    } else {
        norm_cdf(b) - norm_cdf(a)
    };
    m.max(0.0)
}

/// Mass of `N(mu, sigma²)` outside the bands `−k_max..=k_max`.
pub fn wrap_tail_mass(mu: f64, sigma: f64, k_max: WrapCounter) -> f64 {
    let lo = (-TAU * k_max as f64 - mu) / sigma;
    let hi = (TAU * (k_max as f64 + 1.0) - mu) / sigma;
    norm_cdf(lo) + norm_sf(hi)
}

pub(crate) fn warn_if_tail_heavy(mu: f64, sigma: f64, k_max: WrapCounter) {
    let tail = wrap_tail_mass(mu, sigma, k_max);
    if tail > 1e-8 {
        log::warn!(
            "wrapped normal N({mu:.4}, {:.4}²) leaves mass {tail:.3e} beyond |K| <= {k_max}",
            sigma
        );
    }
}

// ---------------------------------------------------------------------------
// Truncated normal

/// Exact draw from `N(mu, sigma²)` restricted to `[lo, hi]` by inversion of the
/// CDF on the tail nearer the interval, falling back to exponential rejection
/// when the interval sits beyond the reach of double-precision tail masses.
pub fn truncated_normal_sample<R: Rng + ?Sized>(
    mu: f64,
    sigma: f64,
    lo: f64,
    hi: f64,
    rng: &mut R,
) -> Result<f64> {
    if !(sigma > 0.0) || !sigma.is_finite() || !mu.is_finite() {
        return Err(Error::invalid("truncated normal needs finite mu and sigma > 0"));
    }
    if lo.is_nan() || hi.is_nan() || lo >= hi {
        return Err(Error::invalid(format!("truncation bounds need lo < hi, got [{lo}, {hi}]")));
    }
    let a = (lo - mu) / sigma;
    let b = (hi - mu) / sigma;
    let z = if a >= 0.0 {
        upper_tail_draw(a, b, rng)
    } else if b <= 0.0 {
        -upper_tail_draw(-b, -a, rng)
    } else {
        let pa = norm_cdf(a);
        let pb = norm_cdf(b);
        let u: f64 = rng.random();
        norm_quantile(pa + u * (pb - pa))
    };
    Ok((mu + sigma * z.clamp(a, b)).clamp(lo, hi))
}

/// Standard normal restricted to `[a, b]` with `0 <= a < b`.
fn upper_tail_draw<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    let qa = norm_sf(a);
    let qb = norm_sf(b);
    let u: f64 = rng.random();
    if qa > 1e-290 && qa - qb > qa * 1e-12 {
        let q = qa - u * (qa - qb);
        // inverse of the upper tail: sqrt(2)·erfc⁻¹(2q)
        return std::f64::consts::SQRT_2 * erfc_inv(2.0 * q);
    }
    // exponential proposal shifted to a (Robert 1995)
    let rate = 0.5 * (a + (a * a + 4.0).sqrt());
    loop {
        let u: f64 = rng.random();
        let e = -(-u).ln_1p() / rate;
        let z = a + e;
        if z > b {
            continue;
        }
        let accept = (-0.5 * (z - rate) * (z - rate)).exp();
        if rng.random::<f64>() <= accept {
            return z;
        }
    }
}

// ---------------------------------------------------------------------------
// Discrete walk

/// Symmetric integer walk `k + round(z)`, `z ~ N(0, var)`.
pub fn discrete_rw_propose<R: Rng + ?Sized>(k: WrapCounter, var: f64, rng: &mut R) -> WrapCounter {
    let z: f64 = StandardNormal.sample(rng);
    k + (z * var.sqrt()).round() as WrapCounter
}
