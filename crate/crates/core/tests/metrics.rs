mod common;

use common::checks;

#[test]
fn ssim_matches_scalar_loops() {
    let err = checks::ssim_error();
    assert!(err < 1e-6, "{err:e}");
}

#[test]
fn pcc_matches_scalar_loops() {
    let err = checks::pcc_error();
    assert!(err < 1e-6, "{err:e}");
}

#[test]
fn cosine_matches_scalar_loops() {
    let err = checks::cosine_error();
    assert!(err < 1e-6, "{err:e}");
}

#[test]
fn fid_matches_dense_eigensolve() {
    let err = checks::fid_error();
    assert!(err < 1e-6, "{err:e}");
}

#[test]
fn fid_of_a_set_with_itself_is_zero() {
    let d = checks::fid_self();
    assert!(d.abs() < 1e-9, "{d}");
}

#[test]
fn fid_of_a_mean_shift_is_its_squared_norm() {
    let rel = checks::fid_shift_relative_error();
    assert!(rel < 0.1, "{rel}");
}
