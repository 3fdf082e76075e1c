//! Conditional moments against generic joint-Gaussian conditioning.

mod common;

use common::suites::gaussian_oracle_errors;

#[test]
fn conditionals_match_partitioned_gaussian() {
    for seed in 0..50 {
        for (name, err) in gaussian_oracle_errors(seed) {
            assert!(err < 1e-10, "seed {seed}, {name}: {err:e}");
        }
    }
}
