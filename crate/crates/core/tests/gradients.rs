mod common;

use common::*;

const SEEDS: u64 = 20;
const TOL: f64 = 1e-4;

fn run(name: &str, tol: f64, check: impl Fn(u64) -> f64) {
    let worst = (0..SEEDS).map(|s| (check(s), s)).fold((0.0, 0), |a, b| if b.0 > a.0 { b } else { a });
    assert!(worst.0 < tol, "{name}: relative error {:.3e} at seed {}", worst.0, worst.1);
}

#[test]
fn encoder_gradients() {
    run("encoder", TOL, gradcheck_encoder);
}

#[test]
fn ccvi_gradients() {
    run("ccvi", TOL, gradcheck_ccvi);
}

#[test]
fn radiance_gradients() {
    run("radiance", TOL, gradcheck_radiance);
}

#[test]
fn composite_gradients() {
    run("composite", TOL, gradcheck_composite);
}

#[test]
fn geometry_loss_gradients() {
    run("loss_geometry", TOL, gradcheck_loss_geometry);
}

#[test]
fn appearance_loss_gradients() {
    run("loss_appearance", TOL, gradcheck_loss_appearance);
}

#[test]
fn end_to_end_gradients() {
    let scene = tiny_scene(3);
    run("end-to-end", 1e-3, |s| gradcheck_end_to_end(s, &scene));
}
