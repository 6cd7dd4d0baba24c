//! Central-difference checks of every differentiable op and of whole
//! networks, in f64.

use tomorib_nn::gradcheck::{self, GradCheck};
use tomorib_nn::{ConvDims, ConvNetSpec};

const SEEDS: u64 = 20;
const TOL: f64 = 1e-5;

fn ok(c: GradCheck) {
    assert!(c.probes > 0, "{}: nothing probed", c.name);
    assert!(c.max_rel_err <= TOL, "{}: relative error {}", c.name, c.max_rel_err);
}

#[test]
fn conv2d_gradients() {
    ok(gradcheck::check_conv(ConvDims::Two, SEEDS).unwrap());
}

#[test]
fn conv3d_gradients() {
    ok(gradcheck::check_conv(ConvDims::Three, SEEDS).unwrap());
}

#[test]
fn add_scale_relu_sum_gradients() {
    ok(gradcheck::check_elementwise(SEEDS).unwrap());
}

#[test]
fn l1_gradients() {
    ok(gradcheck::check_l1(SEEDS).unwrap());
}

#[test]
fn pool_and_upsample_gradients() {
    ok(gradcheck::check_pool_upsample(ConvDims::Two, SEEDS).unwrap());
    ok(gradcheck::check_pool_upsample(ConvDims::Three, SEEDS).unwrap());
}

#[test]
fn network_input_gradients() {
    let mut spec = ConvNetSpec::uniform(ConvDims::Two, 2, 1, 2, 4);
    spec.blocks[1].channels = 3;
    ok(gradcheck::check_network_input("net2d", spec, &[2, 2, 6, 4], SEEDS).unwrap());
    let mut spec = ConvNetSpec::uniform(ConvDims::Three, 1, 1, 1, 3);
    spec.pool_level = true;
    ok(gradcheck::check_network_input("net3d-pool", spec, &[1, 1, 4, 2, 4], SEEDS).unwrap());
}

#[test]
fn network_parameter_gradients() {
    ok(gradcheck::check_network_params(SEEDS).unwrap());
}

#[test]
fn a_wrong_gradient_is_caught() {
    // The second addend copies x off the tape, so the analytic gradient
    // misses half of the true derivative.
    let c = gradcheck::check_graph(
        "detached copy",
        3,
        1,
        &|r| vec![gradcheck::random(r, &[4], 1.0)],
        &|t, v| {
            let copy = t.value(v[0]).clone();
            let h = t.leaf(copy, false);
            let a = t.add(v[0], h)?;
            Ok((t.sum(a)?, vec![]))
        },
    )
    .unwrap();
    assert!(c.max_rel_err > 0.4, "{}", c.max_rel_err);
}
