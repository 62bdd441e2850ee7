mod common;

use common::checks;

#[test]
fn matches_dense_normal_equations_on_random_instances() {
    for seed in [2024, 7] {
        let err = checks::ridge_oracle_error(seed);
        assert!(err < 1e-8, "seed {seed}: max abs weight error {err:e}");
    }
}

#[test]
fn zero_lambda_interpolates_when_n_is_d_plus_one() {
    let err = checks::ridge_interpolation_error();
    assert!(err < 1e-8, "{err:e}");
}

#[test]
fn huge_lambda_shrinks_to_the_target_mean() {
    let s = checks::ridge_shrinkage();
    assert!(s.holds(), "norms {:?}, gap {:e}", s.norms, s.mean_gap);
}
