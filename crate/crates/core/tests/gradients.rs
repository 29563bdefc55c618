mod common;

use std::time::Instant;

use common::gradcheck;

#[test]
fn conv2d() {
    gradcheck::conv2d();
}

#[test]
fn relu() {
    gradcheck::relu();
}

#[test]
fn add() {
    gradcheck::add();
}

#[test]
fn bilinear_warp_image_and_homography() {
    gradcheck::bilinear_warp_image_and_homography();
}

#[test]
fn dlkfm() {
    gradcheck::dlkfm();
}

#[test]
fn loss_terms() {
    gradcheck::loss_terms();
}

#[test]
fn total_loss_parameter_gradient() {
    gradcheck::total_loss_parameter_gradient();
}

#[test]
fn suite_is_fast() {
    let start = Instant::now();
    gradcheck::all();
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 60.0, "gradient suite took {secs:.1} s");
}
