//! Cholesky factorization with escalating diagonal jitter.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// How much diagonal jitter to try before declaring a matrix singular.
///
/// The first attempt uses no jitter. Retries add
/// `initial_rel · mean(diag) · factor^(i−1)` for `i = 1..=max_retries`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterPolicy {
    pub initial_rel: f64,
    pub factor: f64,
    pub max_retries: u32,
    /// A pivot below `pivot_rel · mean(diag)` counts as a failed factorization.
    pub pivot_rel: f64,
}

impl Default for JitterPolicy {
    fn default() -> Self {
        Self { initial_rel: 1e-10, factor: 10.0, max_retries: 6, pivot_rel: 1e-13 }
    }
}

/// A Cholesky factor of `A + jitter·I`.
#[derive(Debug, Clone)]
pub struct Factor {
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
    log_det: f64,
}

impl Factor {
    pub fn new(a: &DMatrix<f64>, policy: &JitterPolicy, context: &str) -> Result<Self> {
        let n = a.nrows();
        if n != a.ncols() {
            return Err(Error::invalid(format!("{context}: matrix is {}x{}", n, a.ncols())));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::Singular { context: context.to_string(), attempts: 0, jitter: 0.0 });
        }
        if n == 0 {
            let chol = Cholesky::new(DMatrix::<f64>::zeros(0, 0))
                .ok_or_else(|| Error::invalid("empty factorization"))?;
            return Ok(Self { chol, jitter: 0.0, log_det: 0.0 });
        }
        let mean_diag = a.diagonal().iter().map(|v| v.abs()).sum::<f64>() / n as f64;
        let scale = if mean_diag > 0.0 { mean_diag } else { 1.0 };
        let mut jitter = 0.0;
        for attempt in 0..=policy.max_retries {
            if attempt > 0 {
                jitter = policy.initial_rel * scale * policy.factor.powi(attempt as i32 - 1);
            }
            let mut m = a.clone();
            for i in 0..n {
                m[(i, i)] += jitter;
            }
            if let Some(chol) = Cholesky::new(m) {
                let l = chol.l_dirty();
                let min_pivot = (0..n).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
                if min_pivot > policy.pivot_rel * scale {
                    let log_det = 2.0 * (0..n).map(|i| l[(i, i)].ln()).sum::<f64>();
                    if attempt > 0 {
                        log::debug!("{context}: factorized with jitter {jitter:e}");
                    }
                    return Ok(Self { chol, jitter, log_det });
                }
            }
        }
        Err(Error::Singular {
            context: context.to_string(),
            attempts: policy.max_retries + 1,
            jitter,
        })
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Lower-triangular factor `L`.
    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    /// `L⁻¹ b`; its squared norm is `b' A⁻¹ b`.
    pub fn whiten(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut v = b.clone();
        self.chol.l_dirty().solve_lower_triangular_mut(&mut v);
        v
    }

    /// `b' A⁻¹ b`.
    pub fn quad_form(&self, b: &DVector<f64>) -> f64 {
        self.whiten(b).norm_squared()
    }

    /// `L z`, mapping a standard normal vector to `N(0, A)`.
    pub fn color(&self, z: &DVector<f64>) -> DVector<f64> {
        self.chol.l_dirty().lower_triangle() * z
    }

    /// `L'⁻¹ z`. When `A` is a precision matrix this maps a standard normal
    /// vector to `N(0, A⁻¹)`.
    pub fn uncolor_t(&self, z: &DVector<f64>) -> DVector<f64> {
        let mut v = z.clone();
        self.chol.l_dirty().tr_solve_lower_triangular_mut(&mut v);
        v
    }

    /// Log density of `N(mean, A)` at `x`.
    pub fn mvn_log_pdf(&self, x: &DVector<f64>, mean: &DVector<f64>) -> f64 {
        let n = x.len() as f64;
        -0.5 * (self.quad_form(&(x - mean)) + self.log_det + n * std::f64::consts::TAU.ln())
    }
}

/// Solves `A x = b` through a jittered Cholesky factor and reports the
/// log-determinant and jitter that were used.
pub fn chol_solve(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    policy: &JitterPolicy,
    context: &str,
) -> Result<(DMatrix<f64>, f64, f64)> {
    let f = Factor::new(a, policy, context)?;
    Ok((f.solve_mat(b), f.log_det(), f.jitter()))
}

/// Symmetrizes in place, averaging `(i, j)` and `(j, i)`.
pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_and_diagonal() {
        let p = JitterPolicy::default();
        let b = DMatrix::from_column_slice(3, 1, &[1.0, -2.0, 3.0]);
        let (x, log_det, jitter) = chol_solve(&DMatrix::identity(3, 3), &b, &p, "identity").unwrap();
        assert_eq!(x, b);
        assert_eq!(log_det, 0.0);
        assert_eq!(jitter, 0.0);

        let a = DMatrix::from_element(1, 1, 4.0);
        let b = DMatrix::from_element(1, 1, 2.0);
        let (x, log_det, _) = chol_solve(&a, &b, &p, "diag").unwrap();
        assert!((x[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((log_det - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn random_spd_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 10;
        let m = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
        let a = &m * m.transpose() + DMatrix::identity(n, n) * 0.1;
        let b = DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>());
        let (x, _, _) = chol_solve(&a, &b, &JitterPolicy::default(), "spd").unwrap();
        let r = &a * &x - &b;
        assert!(r.amax() < 1e-8);
    }

    #[test]
    fn singular_matrix_gets_jitter() {
        // rank one
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let a = &v * v.transpose();
        let f = Factor::new(&a, &JitterPolicy::default(), "rank one").unwrap();
        assert!(f.jitter() > 0.0);
    }

    #[test]
    fn indefinite_matrix_fails_with_context() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let err = Factor::new(&a, &JitterPolicy::default(), "indefinite test").unwrap_err();
        assert!(err.to_string().contains("indefinite test"));
    }
}
