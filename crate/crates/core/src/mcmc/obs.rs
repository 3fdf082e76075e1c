//! Cached precision of the observation covariance.
//!
//! Single-angle moves change one row and column of `Σ_y = σ²_f A_f + σ²_ε I`.
//! The cache keeps `P = Σ_y⁻¹` and `log det Σ_y`, evaluates
//! `p(y_t | y_{−t})` for a proposed angle in `O(T²)`, and applies an accepted
//! move with a block update of `P` instead of a new factorization.

use nalgebra::{DMatrix, DVector, Vector4};

use crate::circular::Angle;
use crate::error::{Error, Result};
use crate::gp::{GpScale, LinCircPoint, basis_h, correlation};
use crate::linalg::{Factor, JitterPolicy};
use crate::model::{ModelParams, obs_marginal_moments, obs_points};

const LN_TAU: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone)]
pub(crate) struct ObsCache {
    points: Vec<LinCircPoint>,
    design: DMatrix<f64>,
    sigma: DMatrix<f64>,
    prec: DMatrix<f64>,
    log_det: f64,
    scale: GpScale,
    sigma2_f: f64,
    sigma2_eps: f64,
}

/// A proposed replacement of one latent angle, scored against the cache.
#[derive(Debug, Clone)]
pub(crate) struct RowProposal {
    t: usize,
    point: LinCircPoint,
    h: Vector4<f64>,
    col: DVector<f64>,
    bc: DVector<f64>,
    cond_var: f64,
    pub log_cond_new: f64,
    pub log_cond_old: f64,
}

impl ObsCache {
    pub fn build(x: &[Angle], p: &ModelParams, policy: &JitterPolicy) -> Result<Self> {
        let points = obs_points(x);
        let (_, sigma) = obs_marginal_moments(x, p);
        let factor = Factor::new(&sigma, policy, "observation covariance")?;
        let design = crate::gp::design_matrix(&points);
        Ok(Self {
            points,
            design,
            prec: factor.inverse(),
            log_det: factor.log_det(),
            sigma,
            scale: p.scale_f(),
            sigma2_f: p.sigma2_f,
            sigma2_eps: p.sigma2_eps,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn prec(&self) -> &DMatrix<f64> {
        &self.prec
    }

    pub fn log_lik(&self, y: &DVector<f64>, beta_f: &Vector4<f64>) -> f64 {
        let r = y - &self.design * beta_f;
        let q = r.dot(&(&self.prec * &r));
        -0.5 * (q + self.log_det + self.len() as f64 * LN_TAU)
    }

    /// Scores moving `x_t` (1-based time) to `a` through `log p(y_t | y_{−t})`.
    pub fn propose_row(
        &self,
        t: usize,
        a: Angle,
        y: &DVector<f64>,
        beta_f: &Vector4<f64>,
    ) -> RowProposal {
        let i = t - 1;
        let n = self.len();
        let point = LinCircPoint::from_angle(t as f64, a);
        let h = basis_h(&point);
        let mut col = DVector::zeros(n);
        for j in 0..n {
            if j != i {
                col[j] = self.sigma2_f * correlation(&point, &self.points[j], &self.scale);
            }
        }
        let r = y - &self.design * beta_f;
        let u = &self.prec * &col;
        let ptt = self.prec[(i, i)];
        let mut bc = DVector::zeros(n);
        for j in 0..n {
            if j != i {
                bc[j] = u[j] - self.prec[(j, i)] * u[i] / ptt;
            }
        }
        let diag = self.sigma2_f + self.sigma2_eps;
        let cond_var = diag - col.dot(&bc);
        let mut cond_mean = h.dot(beta_f);
        for j in 0..n {
            if j != i {
                cond_mean += bc[j] * r[j];
            }
        }
        let log_cond_new = normal_lp(y[i], cond_mean, cond_var);

        let old_var = 1.0 / ptt;
        let mut old_mean = y[i] - r[i];
        for j in 0..n {
            if j != i {
                old_mean -= self.prec[(i, j)] * r[j] / ptt;
            }
        }
        let log_cond_old = normal_lp(y[i], old_mean, old_var);
        RowProposal { t, point, h, col, bc, cond_var, log_cond_new, log_cond_old }
    }

    pub fn accept_row(&mut self, prop: RowProposal) -> Result<()> {
        let i = prop.t - 1;
        let n = self.len();
        let s = prop.cond_var;
        if !(s > 0.0) {
            return Err(Error::Degenerate(format!("conditional observation variance {s:e}")));
        }
        let ptt = self.prec[(i, i)];
        let pcol = self.prec.column(i).clone_owned();
        for k in 0..n {
            if k == i {
                continue;
            }
            for j in 0..n {
                if j == i {
                    continue;
                }
                self.prec[(j, k)] += prop.bc[j] * prop.bc[k] / s - pcol[j] * pcol[k] / ptt;
            }
        }
        for j in 0..n {
            let v = if j == i { 1.0 / s } else { -prop.bc[j] / s };
            self.prec[(j, i)] = v;
            self.prec[(i, j)] = v;
        }
        self.log_det += ptt.ln() + s.ln();
        for j in 0..n {
            if j != i {
                self.sigma[(j, i)] = prop.col[j];
                self.sigma[(i, j)] = prop.col[j];
            }
        }
        self.points[i] = prop.point;
        self.design.set_row(i, &prop.h.transpose());
        Ok(())
    }
}

fn normal_lp(x: f64, mean: f64, var: f64) -> f64 {
    if !(var > 0.0) {
        return f64::NEG_INFINITY;
    }
    let d = x - mean;
    -0.5 * (LN_TAU + var.ln() + d * d / var)
}
