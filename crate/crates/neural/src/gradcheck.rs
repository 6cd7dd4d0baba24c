//! Central-difference gradient checks in `f64`.
//!
//! Each case draws random inputs, rejects draws that sit within
//! [`KINK_MARGIN`] of a ReLU or L1 kink, and compares the tape's gradient
//! with `(f(x + h) - f(x - h)) / 2h` on sampled coordinates. The relative
//! error is `|a - n| / max(|a|, |n|, 1)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conv::ConvDims;
use crate::error::{NnError, Result};
use crate::net::{ConvNetSpec, ResidualCnn};
use crate::ops::l1_loss;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
/// Minimum distance from a ReLU or L1 kink for a draw to be usable.
pub const KINK_MARGIN: f64 = 1e-4;
/// Coordinates probed per input tensor and seed.
pub const PROBES: usize = 12;
const MAX_DRAWS: usize = 1000;

/// Worst relative error seen for one case over all seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub seeds: u64,
    pub probes: usize,
    pub max_rel_err: f64,
}

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<(Var, Vec<(Var, Var)>)>;
/// Inputs and the analytic gradients of the probed ones.
type Draw = (Vec<Tensor<f64>>, Vec<Vec<f64>>);

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).expect("shape matches data")
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

fn eval(build: &Build, inputs: &[Tensor<f64>], probed: usize, with_grad: bool) -> Result<(f64, f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().enumerate().map(|(i, t)| tape.leaf(t.clone(), with_grad && i < probed)).collect();
    let (loss, pairs) = build(&mut tape, &vars)?;
    let mut margin = f64::INFINITY;
    for t in tape.relu_inputs() {
        for &v in t.data() {
            margin = margin.min(v.abs());
        }
    }
    for (p, q) in pairs {
        for (&a, &b) in tape.value(p).data().iter().zip(tape.value(q).data()) {
            margin = margin.min((a - b).abs());
        }
    }
    let value = tape.value(loss).data()[0];
    let mut grads = Vec::new();
    if with_grad {
        tape.backward(loss)?;
        for &v in &vars[..probed] {
            grads.push(tape.grad(v).ok_or_else(|| NnError::State("probed input has no gradient".into()))?.to_vec());
        }
    }
    Ok((value, margin, grads))
}

fn usable_draw(
    rng: &mut ChaCha8Rng,
    probed: usize,
    make: &dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
    build: &Build,
) -> Result<Draw> {
    for _ in 0..MAX_DRAWS {
        let inputs = make(rng);
        let (_, margin, grads) = eval(build, &inputs, probed, true)?;
        if margin > KINK_MARGIN {
            return Ok((inputs, grads));
        }
    }
    Err(NnError::State("every draw landed on a kink".into()))
}

/// Check the first `probed` inputs of `build`; the rest are constants.
pub fn check_graph(
    name: &str,
    seeds: u64,
    probed: usize,
    make: &dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
    build: &Build,
) -> Result<GradCheck> {
    let mut worst = 0.0f64;
    let mut probes = 0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + 13);
        let (inputs, grads) = usable_draw(&mut rng, probed, make, build)?;
        for (i, t) in inputs[..probed].iter().enumerate() {
            for _ in 0..PROBES.min(t.len()) {
                let k = rng.gen_range(0..t.len());
                let mut plus = inputs.clone();
                plus[i].data_mut()[k] += STEP;
                let mut minus = inputs.clone();
                minus[i].data_mut()[k] -= STEP;
                let numeric = (eval(build, &plus, probed, false)?.0 - eval(build, &minus, probed, false)?.0) / (2.0 * STEP);
                worst = worst.max(rel_err(grads[i][k], numeric));
                probes += 1;
            }
        }
    }
    Ok(GradCheck { name: name.to_string(), seeds, probes, max_rel_err: worst })
}

/// Reduce an activation to a scalar with a non-uniform weighting so every
/// output element gets a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape<f64>, x: Var, w: Var) -> Result<Var> {
    let a = tape.add(x, w)?;
    let a = tape.relu(a)?;
    tape.sum(a)
}

pub fn check_conv(dims: ConvDims, seeds: u64) -> Result<GradCheck> {
    let (x, w, y): (&[usize], &[usize], &[usize]) = match dims {
        ConvDims::Two => (&[2, 3, 5, 6], &[4, 3, 3, 3], &[2, 4, 5, 6]),
        ConvDims::Three => (&[1, 2, 4, 3, 5], &[3, 2, 3, 3, 3], &[1, 3, 4, 3, 5]),
    };
    let cout = w[0];
    check_graph(
        &format!("conv{}", if dims == ConvDims::Two { "2d" } else { "3d" }),
        seeds,
        4,
        &|r| vec![random(r, x, 1.0), random(r, w, 0.5), random(r, &[cout], 0.5), random(r, y, 2.0)],
        &move |t, v| {
            let out = t.conv(v[0], v[1], v[2], dims)?;
            Ok((weighted_sum(t, out, v[3])?, vec![]))
        },
    )
}

/// Residual add, scaling, ReLU and sum in one graph.
pub fn check_elementwise(seeds: u64) -> Result<GradCheck> {
    check_graph(
        "add/scale/relu/sum",
        seeds,
        2,
        &|r| vec![random(r, &[3, 7], 1.0), random(r, &[3, 7], 1.0)],
        &|t, v| {
            let a = t.add(v[0], v[1])?;
            let a = t.scale(a, -1.7)?;
            let a = t.relu(a)?;
            let b = t.add(a, v[0])?;
            Ok((t.sum(b)?, vec![]))
        },
    )
}

pub fn check_l1(seeds: u64) -> Result<GradCheck> {
    check_graph(
        "l1",
        seeds,
        2,
        &|r| vec![random(r, &[2, 1, 4, 4], 1.0), random(r, &[2, 1, 4, 4], 1.0)],
        &|t, v| Ok((t.l1_loss(v[0], v[1], 20.0)?, vec![(v[0], v[1])])),
    )
}

pub fn check_pool_upsample(dims: ConvDims, seeds: u64) -> Result<GradCheck> {
    let shape: &'static [usize] = if dims == ConvDims::Two { &[1, 2, 4, 6] } else { &[1, 2, 4, 2, 6] };
    check_graph(
        &format!("pool/upsample {}", if dims == ConvDims::Two { "2d" } else { "3d" }),
        seeds,
        2,
        &|r| vec![random(r, shape, 1.0), random(r, shape, 2.0)],
        &move |t, v| {
            let p = t.avg_pool2(v[0], dims)?;
            let p = t.scale(p, 3.0)?;
            let u = t.upsample2(p, dims)?;
            let u = t.add(u, v[0])?;
            Ok((weighted_sum(t, u, v[1])?, vec![]))
        },
    )
}

/// Gradient with respect to the input of a whole network, with every
/// parameter (including the head) randomized.
pub fn check_network_input(name: &str, spec: ConvNetSpec, input: &'static [usize], seeds: u64) -> Result<GradCheck> {
    let template = ResidualCnn::<f64>::new(spec.clone(), 1)?;
    let shapes: Vec<Vec<usize>> = template.params().iter().map(|p| p.shape().to_vec()).collect();
    let mut out_shape = input.to_vec();
    out_shape[1] = spec.out_channels;
    let n_params = shapes.len();
    check_graph(
        name,
        seeds,
        1,
        &|r| {
            let mut v = vec![random(r, input, 1.0), random(r, &out_shape, 1.0)];
            v.extend(shapes.iter().map(|s| random(r, s, 0.4)));
            v
        },
        &move |t, v| {
            let params: Vec<Tensor<f64>> = v[2..2 + n_params].iter().map(|&p| t.value(p).clone()).collect();
            let net = ResidualCnn::from_params(spec.clone(), params)?;
            let (out, _) = net.forward(t, v[0])?;
            Ok((t.l1_loss(out, v[1], 50.0)?, vec![(out, v[1])]))
        },
    )
}

/// Gradient with respect to every parameter tensor of a small 2D network.
pub fn check_network_params(seeds: u64) -> Result<GradCheck> {
    let spec = ConvNetSpec::uniform(ConvDims::Two, 1, 1, 2, 3);
    let mut worst = 0.0f64;
    let mut probes = 0;
    let mut checked = 0;
    let mut seed = 0u64;
    while checked < seeds {
        if seed >= seeds * 50 {
            return Err(NnError::State("too many draws landed on a kink".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 500);
        seed += 1;
        let mut net = ResidualCnn::<f64>::new(spec.clone(), seed)?;
        for p in net.params_mut() {
            let shape = p.shape().to_vec();
            *p = random(&mut rng, &shape, 0.4);
        }
        let x = random(&mut rng, &[2, 1, 5, 4], 1.0);
        let target = random(&mut rng, &[2, 1, 5, 4], 1.0);
        let loss_of = |net: &ResidualCnn<f64>| -> Result<f64> { l1_loss(&net.predict(&x)?, &target, 20.0) };
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let tv = tape.leaf(target.clone(), false);
        let (out, pv) = net.forward(&mut tape, xv)?;
        let margin = tape
            .relu_inputs()
            .flat_map(|t| t.data().iter().copied())
            .chain(tape.value(out).data().iter().zip(target.data()).map(|(a, b)| a - b))
            .fold(f64::INFINITY, |m, v| m.min(v.abs()));
        if margin < KINK_MARGIN {
            continue;
        }
        checked += 1;
        let loss = tape.l1_loss(out, tv, 20.0)?;
        tape.backward(loss)?;
        for (i, &p) in pv.iter().enumerate() {
            let g = tape.grad(p).ok_or_else(|| NnError::State("parameter has no gradient".into()))?.to_vec();
            for _ in 0..PROBES.min(g.len()) {
                let k = rng.gen_range(0..g.len());
                let mut plus = net.clone();
                plus.params_mut()[i].data_mut()[k] += STEP;
                let mut minus = net.clone();
                minus.params_mut()[i].data_mut()[k] -= STEP;
                let numeric = (loss_of(&plus)? - loss_of(&minus)?) / (2.0 * STEP);
                worst = worst.max(rel_err(g[k], numeric));
                probes += 1;
            }
        }
    }
    Ok(GradCheck { name: "network parameters".into(), seeds, probes, max_rel_err: worst })
}

/// Every op and both network paths, `seeds` draws each.
pub fn run_suite(seeds: u64) -> Result<Vec<GradCheck>> {
    let mut net2d = ConvNetSpec::uniform(ConvDims::Two, 2, 1, 2, 4);
    net2d.blocks[1].channels = 3;
    let mut net3d = ConvNetSpec::uniform(ConvDims::Three, 1, 1, 1, 3);
    net3d.pool_level = true;
    Ok(vec![
        check_conv(ConvDims::Two, seeds)?,
        check_conv(ConvDims::Three, seeds)?,
        check_elementwise(seeds)?,
        check_l1(seeds)?,
        check_pool_upsample(ConvDims::Two, seeds)?,
        check_pool_upsample(ConvDims::Three, seeds)?,
        check_network_input("network input 2d", net2d, &[2, 2, 6, 4], seeds)?,
        check_network_input("network input 3d pooled", net3d, &[1, 1, 4, 2, 4], seeds)?,
        check_network_params(seeds)?,
    ])
}
