//! Configurable residual CNN used for the projection, volume and
//! aggregation networks.
//!
//! Layout: a stem convolution lifts the input to the first block width,
//! then each residual block computes `x + conv_b(relu(conv_a(relu(x))))`
//! (with a 1-wide projection on the skip when the width changes), and a
//! head convolution maps to the output channels. The head is
//! zero-initialized so a fresh network predicts exactly zero. With
//! `pool_level` set, the blocks run at half resolution between an average
//! pool and a nearest-neighbour upsample, and the stem output is added back
//! before the head.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conv::{conv_forward, ConvDims};
use crate::error::{NnError, Result};
use crate::ops;
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpec {
    pub channels: usize,
    pub kernel: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvNetSpec {
    pub dims: ConvDims,
    pub in_channels: usize,
    pub blocks: Vec<BlockSpec>,
    pub out_channels: usize,
    pub pool_level: bool,
}

impl ConvNetSpec {
    /// `n_blocks` residual blocks of `channels` width with 3-wide kernels.
    pub fn uniform(
        dims: ConvDims,
        in_channels: usize,
        out_channels: usize,
        n_blocks: usize,
        channels: usize,
    ) -> Self {
        Self {
            dims,
            in_channels,
            blocks: vec![
                BlockSpec {
                    channels,
                    kernel: 3
                };
                n_blocks
            ],
            out_channels,
            pool_level: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(NnError::InvalidArgument(
                "network needs at least one block".into(),
            ));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(NnError::InvalidArgument(
                "channel counts must be positive".into(),
            ));
        }
        for b in &self.blocks {
            if b.channels == 0 || b.kernel % 2 == 0 {
                return Err(NnError::InvalidArgument(format!(
                    "block needs positive width and odd kernel, got {b:?}"
                )));
            }
        }
        Ok(())
    }

    /// Kernel extent for a cubic/square kernel of side `k`.
    fn kernel_shape(&self, cout: usize, cin: usize, k: usize) -> Vec<usize> {
        match self.dims {
            ConvDims::Two => vec![cout, cin, k, k],
            ConvDims::Three => vec![cout, cin, k, k, k],
        }
    }

    /// Shapes of every parameter tensor, in storage order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        let first = self.blocks[0].channels;
        shapes.push(self.kernel_shape(first, self.in_channels, 3));
        shapes.push(vec![first]);
        let mut prev = first;
        for b in &self.blocks {
            shapes.push(self.kernel_shape(b.channels, prev, b.kernel));
            shapes.push(vec![b.channels]);
            shapes.push(self.kernel_shape(b.channels, b.channels, b.kernel));
            shapes.push(vec![b.channels]);
            if b.channels != prev {
                shapes.push(self.kernel_shape(b.channels, prev, 1));
                shapes.push(vec![b.channels]);
            }
            prev = b.channels;
        }
        if self.pool_level && prev != first {
            shapes.push(self.kernel_shape(first, prev, 1));
            shapes.push(vec![first]);
            prev = first;
        }
        shapes.push(self.kernel_shape(self.out_channels, prev, 3));
        shapes.push(vec![self.out_channels]);
        shapes
    }

    /// Compact one-line description, echoed into checkpoints.
    pub fn describe(&self) -> String {
        let blocks: Vec<String> = self
            .blocks
            .iter()
            .map(|b| format!("{}x{}", b.channels, b.kernel))
            .collect();
        format!(
            "dims={} in={} out={} pool={} blocks={}",
            self.dims.count(),
            self.in_channels,
            self.out_channels,
            self.pool_level as u8,
            blocks.join(",")
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut dims = None;
        let mut inc = None;
        let mut outc = None;
        let mut pool = false;
        let mut blocks = Vec::new();
        for tok in text.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| NnError::Format(format!("bad spec token {tok:?}")))?;
            let num = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| NnError::Format(format!("bad number in {tok:?}")))
            };
            match k {
                "dims" => dims = Some(ConvDims::from_count(num(v)?)?),
                "in" => inc = Some(num(v)?),
                "out" => outc = Some(num(v)?),
                "pool" => pool = num(v)? != 0,
                "blocks" => {
                    for b in v.split(',') {
                        let (c, kk) = b
                            .split_once('x')
                            .ok_or_else(|| NnError::Format(format!("bad block {b:?}")))?;
                        blocks.push(BlockSpec {
                            channels: num(c)?,
                            kernel: num(kk)?,
                        });
                    }
                }
                _ => return Err(NnError::Format(format!("unknown spec key {k:?}"))),
            }
        }
        let spec = Self {
            dims: dims.ok_or_else(|| NnError::Format("spec missing dims".into()))?,
            in_channels: inc.ok_or_else(|| NnError::Format("spec missing in".into()))?,
            out_channels: outc.ok_or_else(|| NnError::Format("spec missing out".into()))?,
            blocks,
            pool_level: pool,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualCnn<T: Real> {
    spec: ConvNetSpec,
    params: Vec<Tensor<T>>,
}

impl<T: Real> ResidualCnn<T> {
    /// Kaiming-uniform (fan-in) weights from a seeded stream, zero biases,
    /// and a zero head.
    pub fn new(spec: ConvNetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = spec.param_shapes();
        let n = shapes.len();
        let params = shapes
            .iter()
            .enumerate()
            .map(|(i, shape)| {
                let is_head = i >= n - 2;
                if shape.len() == 1 || is_head {
                    return Tensor::zeros(shape);
                }
                let fan_in: usize = shape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                let len: usize = shape.iter().product();
                let data = (0..len)
                    .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
                    .collect();
                Tensor::new(shape, data).expect("parameter shape")
            })
            .collect();
        Ok(Self { spec, params })
    }

    pub fn from_params(spec: ConvNetSpec, params: Vec<Tensor<T>>) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.param_shapes();
        if shapes.len() != params.len() {
            return Err(NnError::Shape(format!(
                "spec needs {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for (s, p) in shapes.iter().zip(&params) {
            if s.as_slice() != p.shape() {
                return Err(NnError::Shape(format!(
                    "parameter {:?} expected {:?}",
                    p.shape(),
                    s
                )));
            }
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &ConvNetSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ResidualCnn<U> {
        ResidualCnn {
            spec: self.spec.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let nd = self.spec.dims.count();
        if shape.len() != nd + 2 || shape[1] != self.spec.in_channels {
            return Err(NnError::Shape(format!(
                "network expects [N, {}, {}D spatial], got {:?}",
                self.spec.in_channels, nd, shape
            )));
        }
        Ok(())
    }

    /// Record the forward pass on `tape`. Returns the output and the
    /// parameter leaves in storage order.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<(Var, Vec<Var>)> {
        self.check_input(tape.value(x).shape())?;
        let pv: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.clone(), true))
            .collect();
        let dims = self.spec.dims;
        let mut it = pv.iter().copied();
        let mut next = || it.next().expect("parameter layout");
        let stem = tape.conv(x, next(), next(), dims)?;
        let mut h = if self.spec.pool_level {
            tape.avg_pool2(stem, dims)?
        } else {
            stem
        };
        let mut prev = self.spec.blocks[0].channels;
        for b in &self.spec.blocks {
            let (wa, ba, wb, bb) = (next(), next(), next(), next());
            let a = tape.relu(h)?;
            let a = tape.conv(a, wa, ba, dims)?;
            let a = tape.relu(a)?;
            let a = tape.conv(a, wb, bb, dims)?;
            let skip = if b.channels != prev {
                tape.conv(h, next(), next(), dims)?
            } else {
                h
            };
            h = tape.add(skip, a)?;
            prev = b.channels;
        }
        if self.spec.pool_level {
            if prev != self.spec.blocks[0].channels {
                h = tape.conv(h, next(), next(), dims)?;
            }
            h = tape.upsample2(h, dims)?;
            h = tape.add(h, stem)?;
        }
        let out = tape.conv(h, next(), next(), dims)?;
        Ok((out, pv))
    }

    /// Inference without recording a tape. Numerically identical to
    /// [`forward`](Self::forward).
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x.shape())?;
        let dims = self.spec.dims;
        let mut it = self.params.iter();
        let mut next = || it.next().expect("parameter layout");
        let stem = conv_forward(x, next(), next(), dims)?;
        let mut h = if self.spec.pool_level {
            ops::avg_pool2(&stem, dims)?
        } else {
            stem.clone()
        };
        let mut prev = self.spec.blocks[0].channels;
        for b in &self.spec.blocks {
            let (wa, ba, wb, bb) = (next(), next(), next(), next());
            let a = conv_forward(&ops::relu(&h), wa, ba, dims)?;
            let a = conv_forward(&ops::relu(&a), wb, bb, dims)?;
            let skip = if b.channels != prev {
                conv_forward(&h, next(), next(), dims)?
            } else {
                h
            };
            h = ops::add(&skip, &a)?;
            prev = b.channels;
        }
        if self.spec.pool_level {
            if prev != self.spec.blocks[0].channels {
                h = conv_forward(&h, next(), next(), dims)?;
            }
            h = ops::add(&ops::upsample2(&h, dims)?, &stem)?;
        }
        conv_forward(&h, next(), next(), dims)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_network_predicts_zero() {
        let spec = ConvNetSpec::uniform(ConvDims::Two, 1, 1, 2, 4);
        let net = ResidualCnn::<f32>::new(spec, 3).unwrap();
        let x = Tensor::filled(&[2, 1, 6, 5], 0.7f32);
        let y = net.predict(&x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spec_round_trips_through_text() {
        let mut spec = ConvNetSpec::uniform(ConvDims::Three, 2, 1, 3, 8);
        spec.blocks[1].channels = 12;
        spec.pool_level = true;
        assert_eq!(ConvNetSpec::parse(&spec.describe()).unwrap(), spec);
    }

    #[test]
    fn predict_matches_tape_forward() {
        let mut spec = ConvNetSpec::uniform(ConvDims::Three, 2, 1, 2, 4);
        spec.blocks[1].channels = 6;
        spec.pool_level = true;
        let mut net = ResidualCnn::<f32>::new(spec, 11).unwrap();
        // give the head weights so the comparison is not trivially zero
        let n = net.params().len();
        let head = &mut net.params_mut()[n - 2];
        head.data_mut()
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = (i as f32 * 0.37).sin() * 0.1);
        let x = Tensor::new(
            &[1, 2, 4, 6, 4],
            (0..192).map(|i| (i as f32 * 0.13).cos()).collect(),
        )
        .unwrap();
        let direct = net.predict(&x).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(x, false);
        let (out, _) = net.forward(&mut tape, xv).unwrap();
        assert_eq!(tape.value(out).data(), direct.data());
        assert!(direct.max_abs() > 0.0);
    }

    #[test]
    fn same_seed_same_weights() {
        let spec = ConvNetSpec::uniform(ConvDims::Three, 1, 1, 4, 16);
        let a = ResidualCnn::<f32>::new(spec.clone(), 5).unwrap();
        let b = ResidualCnn::<f32>::new(spec.clone(), 5).unwrap();
        let c = ResidualCnn::<f32>::new(spec, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_wrong_input_channels() {
        let net =
            ResidualCnn::<f32>::new(ConvNetSpec::uniform(ConvDims::Two, 2, 1, 1, 4), 0).unwrap();
        assert!(net.predict(&Tensor::zeros(&[1, 1, 4, 4])).is_err());
        assert!(
            ResidualCnn::<f32>::new(ConvNetSpec::uniform(ConvDims::Two, 1, 1, 0, 4), 0).is_err()
        );
    }
}
