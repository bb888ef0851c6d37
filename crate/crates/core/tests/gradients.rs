mod common;

use common::*;

const TOL: f64 = 1e-4;

fn check(name: &str, f: fn(u64) -> f64) {
    for seed in 0..20 {
        let err = f(seed);
        assert!(err <= TOL, "{name}: instance {seed} has relative error {err:e}");
    }
}

#[test]
fn denoising_loss_gradient() {
    check("denoising", denoising_grad_error);
}

#[test]
fn scene_loss_gradient() {
    check("scene", scene_grad_error);
}

#[test]
fn point_loss_gradient() {
    check("point", point_grad_error);
}

#[test]
fn surrogate_gradient_with_frozen_difference() {
    check("surrogate", surrogate_grad_error);
}
