//! Elementwise, reduction and resampling kernels used by the tape.

use crate::conv::ConvDims;
use crate::error::{NnError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of ReLU; the derivative at exactly zero is taken as zero.
pub fn relu_backward<T: Real>(x: &Tensor<T>, g: &[T]) -> Vec<T> {
    x.data()
        .iter()
        .zip(g)
        .map(|(&v, &d)| if v > T::zero() { d } else { T::zero() })
        .collect()
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if !a.same_shape(b) {
        return Err(NnError::Shape(format!(
            "add {:?} + {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x + y)
        .collect();
    Tensor::new(a.shape(), data)
}

/// `weight * mean(|pred - target|)`.
pub fn l1_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, weight: f64) -> Result<T> {
    if !pred.same_shape(target) {
        return Err(NnError::Shape(format!(
            "l1 loss between {:?} and {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if pred.is_empty() {
        return Err(NnError::InvalidArgument(
            "l1 loss of an empty tensor".into(),
        ));
    }
    let sum = pred
        .data()
        .iter()
        .zip(target.data())
        .fold(0.0f64, |acc, (&p, &t)| acc + (p - t).abs().to_f64());
    Ok(T::from_f64(weight * sum / pred.len() as f64))
}

/// Subgradient of [`l1_loss`] w.r.t. `pred`; zero residuals get zero.
pub fn l1_loss_backward<T: Real>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    weight: f64,
    upstream: T,
) -> Vec<T> {
    let scale = upstream * T::from_f64(weight / pred.len() as f64);
    pred.data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p - t;
            if d > T::zero() {
                scale
            } else if d < T::zero() {
                -scale
            } else {
                T::zero()
            }
        })
        .collect()
}

fn check_poolable(shape: &[usize], dims: ConvDims) -> Result<[usize; 3]> {
    if shape.len() != dims.count() + 2 {
        return Err(NnError::Shape(format!(
            "{:?} is not a {}D activation",
            shape,
            dims.count()
        )));
    }
    let s = dims.spatial(shape);
    let first = if dims == ConvDims::Two { 1 } else { 0 };
    if s[first..].iter().any(|&v| v % 2 != 0) {
        return Err(NnError::Shape(format!(
            "pooling needs even spatial extents, got {s:?}"
        )));
    }
    Ok(s)
}

/// 2x average pooling over every spatial axis.
pub fn avg_pool2<T: Real>(x: &Tensor<T>, dims: ConvDims) -> Result<Tensor<T>> {
    let [d, h, w] = check_poolable(x.shape(), dims)?;
    let (fd, od) = if dims == ConvDims::Three {
        (2, d / 2)
    } else {
        (1, 1)
    };
    let (oh, ow) = (h / 2, w / 2);
    let planes = x.shape()[0] * x.shape()[1];
    let mut shape = x.shape().to_vec();
    let n = shape.len();
    shape[n - 1] = ow;
    shape[n - 2] = oh;
    if dims == ConvDims::Three {
        shape[n - 3] = od;
    }
    let mut out = Tensor::zeros(&shape);
    let scale = T::from_f64(1.0 / (fd * 4) as f64);
    let src = x.data();
    let dst = out.data_mut();
    for p in 0..planes {
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = T::zero();
                    for dz in 0..fd {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                acc = acc
                                    + src[((p * d + z * fd + dz) * h + 2 * y + dy) * w
                                        + 2 * xx
                                        + dx];
                            }
                        }
                    }
                    dst[((p * od + z) * oh + y) * ow + xx] = acc * scale;
                }
            }
        }
    }
    Ok(out)
}

pub fn avg_pool2_backward<T: Real>(x_shape: &[usize], g: &[T], dims: ConvDims) -> Vec<T> {
    let s = dims.spatial(x_shape);
    let [d, h, w] = s;
    let fd = if dims == ConvDims::Three { 2 } else { 1 };
    let (od, oh, ow) = (d / fd, h / 2, w / 2);
    let planes = x_shape[0] * x_shape[1];
    let scale = T::from_f64(1.0 / (fd * 4) as f64);
    let mut out = vec![T::zero(); planes * d * h * w];
    for p in 0..planes {
        for z in 0..d {
            for y in 0..h {
                for xx in 0..w {
                    out[((p * d + z) * h + y) * w + xx] =
                        g[((p * od + z / fd) * oh + y / 2) * ow + xx / 2] * scale;
                }
            }
        }
    }
    out
}

/// Nearest-neighbour 2x upsampling over every spatial axis.
pub fn upsample2<T: Real>(x: &Tensor<T>, dims: ConvDims) -> Result<Tensor<T>> {
    if x.ndim() != dims.count() + 2 {
        return Err(NnError::Shape(format!(
            "{:?} is not a {}D activation",
            x.shape(),
            dims.count()
        )));
    }
    let [d, h, w] = dims.spatial(x.shape());
    let fd = if dims == ConvDims::Three { 2 } else { 1 };
    let (ud, uh, uw) = (d * fd, h * 2, w * 2);
    let planes = x.shape()[0] * x.shape()[1];
    let mut shape = x.shape().to_vec();
    let n = shape.len();
    shape[n - 1] = uw;
    shape[n - 2] = uh;
    if dims == ConvDims::Three {
        shape[n - 3] = ud;
    }
    let mut out = Tensor::zeros(&shape);
    let src = x.data();
    let dst = out.data_mut();
    for p in 0..planes {
        for z in 0..ud {
            for y in 0..uh {
                for xx in 0..uw {
                    dst[((p * ud + z) * uh + y) * uw + xx] =
                        src[((p * d + z / fd) * h + y / 2) * w + xx / 2];
                }
            }
        }
    }
    Ok(out)
}

pub fn upsample2_backward<T: Real>(x_shape: &[usize], g: &[T], dims: ConvDims) -> Vec<T> {
    let [d, h, w] = dims.spatial(x_shape);
    let fd = if dims == ConvDims::Three { 2 } else { 1 };
    let (ud, uh, uw) = (d * fd, h * 2, w * 2);
    let planes = x_shape[0] * x_shape[1];
    let mut out = vec![T::zero(); planes * d * h * w];
    for p in 0..planes {
        for z in 0..ud {
            for y in 0..uh {
                for xx in 0..uw {
                    let i = ((p * d + z / fd) * h + y / 2) * w + xx / 2;
                    out[i] = out[i] + g[((p * ud + z) * uh + y) * uw + xx];
                }
            }
        }
    }
    out
}
