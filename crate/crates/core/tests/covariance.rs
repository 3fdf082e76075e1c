//! Closed-form covariance against the kernel-convolution integral.

mod common;

use std::f64::consts::FRAC_PI_2;

use circ_ssm::gp::{GpScale, LinCircPoint, cov};
use common::suites::covariance_cases;

#[test]
fn closed_form_matches_quadrature() {
    let cases = covariance_cases();
    assert_eq!(cases.len(), 36);
    for c in &cases {
        assert!(
            (c.closed - c.quad).abs() < 1e-6,
            "psi {} dt {} dtheta {}: {} vs {}",
            c.psi,
            c.dt,
            c.dtheta,
            c.closed,
            c.quad
        );
        if c.dtheta == FRAC_PI_2 {
            assert_eq!(c.closed, 0.0);
        }
    }
}

#[test]
fn coincident_points_give_half_inverse_psi() {
    for psi in [0.5, 1.0, 2.0, 7.5] {
        let s = GpScale::from_psi(psi).unwrap();
        let p = LinCircPoint::new(3.0, 1.1).unwrap();
        assert!((cov(&p, &p, &s) - 0.5 / psi).abs() < 1e-15);
    }
}
