//! Same-padded, stride-1 cross-correlation in two and three spatial
//! dimensions.
//!
//! Each batch item is zero-padded once, after which every kernel tap is a
//! constant flat offset into the padded buffer. The convolution is then a
//! sum over taps of `W_tap[Co x Ci] * X_padded[Ci, p + offset_tap]`, which
//! maps straight onto strided GEMM calls without an im2col copy. Output is
//! produced on the padded grid and the interior is extracted afterwards.

use crate::error::{NnError, Result};
use crate::real::{gemm, MatView, Real};
use crate::tensor::Tensor;

/// Number of spatial axes of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConvDims {
    Two,
    Three,
}

impl ConvDims {
    pub fn count(self) -> usize {
        match self {
            ConvDims::Two => 2,
            ConvDims::Three => 3,
        }
    }

    pub fn from_count(n: usize) -> Result<Self> {
        match n {
            2 => Ok(ConvDims::Two),
            3 => Ok(ConvDims::Three),
            _ => Err(NnError::InvalidArgument(format!(
                "dims must be 2 or 3, got {n}"
            ))),
        }
    }

    /// Spatial extent as `[d, h, w]`, with `d = 1` in 2D.
    pub(crate) fn spatial(self, shape: &[usize]) -> [usize; 3] {
        match self {
            ConvDims::Two => [1, shape[shape.len() - 2], shape[shape.len() - 1]],
            ConvDims::Three => {
                let n = shape.len();
                [shape[n - 3], shape[n - 2], shape[n - 1]]
            }
        }
    }
}

const CHUNK: usize = 2048;

/// Geometry shared by the forward and backward passes.
struct Layout {
    cin: usize,
    cout: usize,
    spatial: [usize; 3],
    pad: [usize; 3],
    padded: [usize; 3],
    kvol: usize,
    /// Flat offset of each tap relative to the output position.
    taps: Vec<isize>,
}

impl Layout {
    fn new(x: &[usize], w: &[usize], dims: ConvDims) -> Result<Self> {
        let nd = dims.count();
        if x.len() != nd + 2 || w.len() != nd + 2 {
            return Err(NnError::Shape(format!(
                "{nd}D convolution needs rank-{} input and kernel, got {x:?} and {w:?}",
                nd + 2
            )));
        }
        if w[1] != x[1] {
            return Err(NnError::Shape(format!(
                "kernel expects {} input channels, input has {}",
                w[1], x[1]
            )));
        }
        let spatial = dims.spatial(x);
        let kernel = dims.spatial(w);
        if kernel.iter().any(|&k| k % 2 == 0) {
            return Err(NnError::InvalidArgument(format!(
                "kernel must be odd-sized, got {kernel:?}"
            )));
        }
        let pad = [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2];
        let padded = [
            spatial[0] + 2 * pad[0],
            spatial[1] + 2 * pad[1],
            spatial[2] + 2 * pad[2],
        ];
        let mut taps = Vec::with_capacity(kernel.iter().product());
        let (hp, wp) = (padded[1] as isize, padded[2] as isize);
        for kz in 0..kernel[0] {
            for ky in 0..kernel[1] {
                for kx in 0..kernel[2] {
                    let dz = kz as isize - pad[0] as isize;
                    let dy = ky as isize - pad[1] as isize;
                    let dx = kx as isize - pad[2] as isize;
                    taps.push((dz * hp + dy) * wp + dx);
                }
            }
        }
        Ok(Self {
            cin: x[1],
            cout: w[0],
            spatial,
            pad,
            padded,
            kvol: kernel.iter().product(),
            taps,
        })
    }

    fn padded_len(&self) -> usize {
        self.padded.iter().product()
    }

    fn spatial_len(&self) -> usize {
        self.spatial.iter().product()
    }

    fn flat_padded(&self, z: usize, y: usize, x: usize) -> usize {
        ((z + self.pad[0]) * self.padded[1] + y + self.pad[1]) * self.padded[2] + x + self.pad[2]
    }

    /// Range of padded flat positions covering every interior voxel.
    fn interior_range(&self) -> (usize, usize) {
        let [d, h, w] = self.spatial;
        (
            self.flat_padded(0, 0, 0),
            self.flat_padded(d - 1, h - 1, w - 1) + 1,
        )
    }

    /// Copy one channel-major item into a zeroed padded buffer.
    fn pad_item<T: Real>(&self, item: &[T], channels: usize) -> Vec<T> {
        let [d, h, w] = self.spatial;
        let pv = self.padded_len();
        let mut out = vec![T::zero(); channels * pv];
        for c in 0..channels {
            for z in 0..d {
                for y in 0..h {
                    let src = ((c * d + z) * h + y) * w;
                    let dst = c * pv + self.flat_padded(z, y, 0);
                    out[dst..dst + w].copy_from_slice(&item[src..src + w]);
                }
            }
        }
        out
    }

    /// Inverse of [`pad_item`](Self::pad_item): gather interior values.
    fn unpad_item<T: Real>(&self, padded: &[T], channels: usize, out: &mut [T]) {
        let [d, h, w] = self.spatial;
        let pv = self.padded_len();
        for c in 0..channels {
            for z in 0..d {
                for y in 0..h {
                    let dst = ((c * d + z) * h + y) * w;
                    let src = c * pv + self.flat_padded(z, y, 0);
                    out[dst..dst + w].copy_from_slice(&padded[src..src + w]);
                }
            }
        }
    }

    fn chunks(&self) -> impl Iterator<Item = (usize, usize)> {
        let (lo, hi) = self.interior_range();
        (lo..hi)
            .step_by(CHUNK)
            .map(move |s| (s, (s + CHUNK).min(hi) - s))
    }
}

/// Forward convolution: `x [N, Ci, *S]`, `w [Co, Ci, *K]`, `b [Co]`.
///
/// The output has shape `[N, Co, *S]` (same padding, stride 1).
pub fn conv_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    dims: ConvDims,
) -> Result<Tensor<T>> {
    let lay = Layout::new(x.shape(), w.shape(), dims)?;
    if b.len() != lay.cout {
        return Err(NnError::Shape(format!(
            "bias has {} entries, expected {}",
            b.len(),
            lay.cout
        )));
    }
    let batch = x.shape()[0];
    let mut out_shape = x.shape().to_vec();
    out_shape[1] = lay.cout;
    let mut out = Tensor::zeros(&out_shape);
    let in_item = lay.cin * lay.spatial_len();
    let out_item = lay.cout * lay.spatial_len();
    let pv = lay.padded_len();
    let sv = lay.spatial_len();
    let mut op = vec![T::zero(); lay.cout * pv];
    for n in 0..batch {
        let xp = lay.pad_item(&x.data()[n * in_item..(n + 1) * in_item], lay.cin);
        op.iter_mut().for_each(|v| *v = T::zero());
        for (start, len) in lay.chunks() {
            for (k, &tap) in lay.taps.iter().enumerate() {
                let av = MatView {
                    offset: k,
                    rows: lay.cout,
                    cols: lay.cin,
                    row_stride: lay.cin * lay.kvol,
                    col_stride: lay.kvol,
                };
                let bv = MatView {
                    offset: (start as isize + tap) as usize,
                    rows: lay.cin,
                    cols: len,
                    row_stride: pv,
                    col_stride: 1,
                };
                let cv = MatView {
                    offset: start,
                    rows: lay.cout,
                    cols: len,
                    row_stride: pv,
                    col_stride: 1,
                };
                gemm(w.data(), av, &xp, bv, T::one(), &mut op, cv);
            }
        }
        let dst = &mut out.data_mut()[n * out_item..(n + 1) * out_item];
        lay.unpad_item(&op, lay.cout, dst);
        for (co, chunk) in dst.chunks_mut(sv).enumerate() {
            let bias = b.data()[co];
            chunk.iter_mut().for_each(|v| *v = *v + bias);
        }
    }
    Ok(out)
}

/// Gradients of [`conv_forward`] with respect to input, kernel and bias.
pub struct ConvGrads<T: Real> {
    /// `None` when the input gradient was not requested.
    pub dx: Option<Tensor<T>>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

pub fn conv_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dout: &Tensor<T>,
    dims: ConvDims,
    need_dx: bool,
) -> Result<ConvGrads<T>> {
    let lay = Layout::new(x.shape(), w.shape(), dims)?;
    let batch = x.shape()[0];
    let mut expect = x.shape().to_vec();
    expect[1] = lay.cout;
    if dout.shape() != expect.as_slice() {
        return Err(NnError::Shape(format!(
            "output gradient {:?} does not match {:?}",
            dout.shape(),
            expect
        )));
    }
    let pv = lay.padded_len();
    let sv = lay.spatial_len();
    let in_item = lay.cin * sv;
    let out_item = lay.cout * sv;
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[lay.cout]);
    let mut dxp = if need_dx {
        vec![T::zero(); lay.cin * pv]
    } else {
        Vec::new()
    };
    for n in 0..batch {
        let xp = lay.pad_item(&x.data()[n * in_item..(n + 1) * in_item], lay.cin);
        let g_item = &dout.data()[n * out_item..(n + 1) * out_item];
        let gp = lay.pad_item(g_item, lay.cout);
        for (co, chunk) in g_item.chunks(sv).enumerate() {
            let s = chunk.iter().fold(T::zero(), |a, &v| a + v);
            db.data_mut()[co] = db.data()[co] + s;
        }
        dxp.iter_mut().for_each(|v| *v = T::zero());
        for (start, len) in lay.chunks() {
            for (k, &tap) in lay.taps.iter().enumerate() {
                let shifted = (start as isize + tap) as usize;
                // dW_k += dOut[Co, chunk] * Xp[Ci, chunk + tap]^T
                gemm(
                    &gp,
                    MatView {
                        offset: start,
                        rows: lay.cout,
                        cols: len,
                        row_stride: pv,
                        col_stride: 1,
                    },
                    &xp,
                    MatView {
                        offset: shifted,
                        rows: len,
                        cols: lay.cin,
                        row_stride: 1,
                        col_stride: pv,
                    },
                    T::one(),
                    dw.data_mut(),
                    MatView {
                        offset: k,
                        rows: lay.cout,
                        cols: lay.cin,
                        row_stride: lay.cin * lay.kvol,
                        col_stride: lay.kvol,
                    },
                );
                if !need_dx {
                    continue;
                }
                // dXp[Ci, chunk + tap] += W_k^T * dOut[Co, chunk]
                gemm(
                    w.data(),
                    MatView {
                        offset: k,
                        rows: lay.cin,
                        cols: lay.cout,
                        row_stride: lay.kvol,
                        col_stride: lay.cin * lay.kvol,
                    },
                    &gp,
                    MatView {
                        offset: start,
                        rows: lay.cout,
                        cols: len,
                        row_stride: pv,
                        col_stride: 1,
                    },
                    T::one(),
                    &mut dxp,
                    MatView {
                        offset: shifted,
                        rows: lay.cin,
                        cols: len,
                        row_stride: pv,
                        col_stride: 1,
                    },
                );
            }
        }
        if need_dx {
            lay.unpad_item(
                &dxp,
                lay.cin,
                &mut dx.data_mut()[n * in_item..(n + 1) * in_item],
            );
        }
    }
    Ok(ConvGrads {
        dx: need_dx.then_some(dx),
        dw,
        db,
    })
}
