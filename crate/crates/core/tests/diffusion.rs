mod common;

use common::checks;
use mindloop_core::generator::{forward_diffuse, make_schedule};
use mindloop_core::rng::seeded;
use mindloop_core::Tensor;

#[test]
fn oracle_denoiser_inverts_the_closed_form() {
    let err = checks::oracle_inversion_error();
    assert!(err < 1e-6, "{err:e}");
}

#[test]
fn alpha_bar_decreases_strictly() {
    assert!(checks::alpha_bar_strictly_decreasing());
}

#[test]
fn forward_diffusion_preserves_unit_variance() {
    let dev = checks::forward_variance_deviation();
    assert!(dev < 0.05, "{dev}");
}

#[test]
fn final_step_is_nearly_pure_noise() {
    let schedule = make_schedule(50, 1e-4, 0.02).unwrap();
    let mut rng = seeded(13);
    let z = Tensor::randn(&[256], 1.0, &mut rng);
    let eps = Tensor::randn(&[256], 1.0, &mut rng);
    let zt = forward_diffuse(&z, &schedule, 50, &eps).unwrap();
    let ab = schedule.alpha_bar(50);
    for ((a, x), e) in zt.data().iter().zip(z.data()).zip(eps.data()) {
        assert!((a - (ab.sqrt() * x + (1.0 - ab).sqrt() * e)).abs() < 1e-15);
    }
    assert!(forward_diffuse(&z, &schedule, 51, &eps).is_err());
}
