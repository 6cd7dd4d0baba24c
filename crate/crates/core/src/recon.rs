//! Filtered backprojection.
//!
//! Each detector row (the motion direction) is ramp filtered in the
//! frequency domain after zero padding to a power of two at least twice the
//! row length. The sampled transfer function is `H[k] = |k'| / L` with `k'`
//! the signed frequency index, which makes the spatial kernel the periodic
//! discrete ramp: `h[0] = 1/4`, `h[m] = -1 / (L^2 sin^2(pi m / L))` for odd
//! `m` and zero for even `m`. Filtered values are divided by the detector
//! pitch at the isocenter so that reconstructions come out in mm^-1.
//!
//! Backprojection is voxel driven: every voxel center is projected from each
//! source position onto the detector, the filtered view is sampled
//! bilinearly (zero off the detector), weighted by `(sid / (sid - y))^2` and
//! summed in view order. The sum is scaled by the angular step in radians.

use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{CoreError, Result};
use crate::geometry::ConeBeamGeometry;
use crate::projector::{Projection2D, ProjectionSet};
use crate::volume::{axis_center, flat_index, Volume3};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterKind {
    RamLak,
    Hann,
}

impl std::fmt::Display for FilterKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FilterKind::RamLak => "ram-lak",
            FilterKind::Hann => "hann",
        })
    }
}

impl FromStr for FilterKind {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ram-lak" => Ok(FilterKind::RamLak),
            "hann" => Ok(FilterKind::Hann),
            _ => Err(CoreError::Config(format!("filter must be ram-lak or hann, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RampFilterSpec {
    pub kind: FilterKind,
    /// FFT length; `None` picks the smallest power of two >= 2 * cols.
    pub padded_len: Option<usize>,
}

impl Default for RampFilterSpec {
    fn default() -> Self {
        Self { kind: FilterKind::RamLak, padded_len: None }
    }
}

impl RampFilterSpec {
    pub fn padded_len_for(&self, cols: usize) -> Result<usize> {
        let min = (2 * cols).next_power_of_two();
        match self.padded_len {
            None => Ok(min),
            Some(l) if l.is_power_of_two() && l >= 2 * cols => Ok(l),
            Some(l) => Err(CoreError::InvalidArgument(format!(
                "padded length {l} must be a power of two >= {}",
                2 * cols
            ))),
        }
    }
}

/// Sampled transfer function of length `len`.
pub fn transfer_function(kind: FilterKind, len: usize) -> Vec<f64> {
    (0..len)
        .map(|k| {
            let kk = if k <= len / 2 { k as f64 } else { k as f64 - len as f64 };
            let ramp = kk.abs() / len as f64;
            match kind {
                FilterKind::RamLak => ramp,
                FilterKind::Hann => {
                    ramp * 0.5 * (1.0 + (2.0 * std::f64::consts::PI * kk / len as f64).cos())
                }
            }
        })
        .collect()
}

/// Row filter with a cached FFT plan.
pub struct RampFilter {
    cols: usize,
    h: Vec<f64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl RampFilter {
    pub fn new(spec: &RampFilterSpec, cols: usize) -> Result<Self> {
        if cols == 0 {
            return Err(CoreError::InvalidArgument("cannot filter empty rows".into()));
        }
        let len = spec.padded_len_for(cols)?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            cols,
            h: transfer_function(spec.kind, len),
            fwd: planner.plan_fft_forward(len),
            inv: planner.plan_fft_inverse(len),
        })
    }

    pub fn transfer(&self) -> &[f64] {
        &self.h
    }

    /// Filter one row into `out` (same length), without physical scaling.
    pub fn filter_row(&self, row: &[f32], out: &mut [f64]) {
        assert_eq!(row.len(), self.cols, "row length");
        let len = self.h.len();
        let mut buf: Vec<Complex<f64>> = row
            .iter()
            .map(|&v| Complex::new(v as f64, 0.0))
            .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
            .take(len)
            .collect();
        self.fwd.process(&mut buf);
        for (b, &h) in buf.iter_mut().zip(&self.h) {
            *b *= h;
        }
        self.inv.process(&mut buf);
        let norm = 1.0 / len as f64;
        for (o, b) in out.iter_mut().zip(&buf) {
            *o = b.re * norm;
        }
    }

    /// Filter every row of `p`, dividing by the sample spacing `sample_mm`.
    pub fn apply(&self, p: &Projection2D, sample_mm: f64) -> Result<Projection2D> {
        if p.cols != self.cols {
            return Err(CoreError::Geometry(format!("filter planned for {} columns, view has {}", self.cols, p.cols)));
        }
        let mut out = p.clone();
        let mut tmp = vec![0.0f64; p.cols];
        for (src, dst) in p.data.chunks(p.cols).zip(out.data.chunks_mut(p.cols)) {
            self.filter_row(src, &mut tmp);
            for (d, &t) in dst.iter_mut().zip(&tmp) {
                *d = (t / sample_mm) as f32;
            }
        }
        Ok(out)
    }
}

/// Ramp filter one view. Rows are filtered independently and divided by
/// `sample_mm`, the detector pitch referred to the isocenter.
pub fn ramp_filter(p: &Projection2D, spec: &RampFilterSpec, sample_mm: f64) -> Result<Projection2D> {
    RampFilter::new(spec, p.cols)?.apply(p, sample_mm)
}

pub fn filter_all(ps: &ProjectionSet, spec: &RampFilterSpec) -> Result<ProjectionSet> {
    let filter = RampFilter::new(spec, ps.geometry.detector_cols)?;
    let tau = ps.geometry.iso_pixel_mm();
    let projections = ps.projections.par_iter().map(|p| filter.apply(p, tau)).collect::<Result<Vec<_>>>()?;
    Ok(ProjectionSet { geometry: ps.geometry.clone(), projections })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackprojectOptions {
    pub distance_weight: bool,
}

impl Default for BackprojectOptions {
    fn default() -> Self {
        Self { distance_weight: true }
    }
}

#[inline]
fn bilinear_or_zero(p: &Projection2D, u: f64, v: f64) -> f64 {
    let (cols, rows) = (p.cols as isize, p.rows as isize);
    if !(u > -1.0 && v > -1.0 && u < cols as f64 && v < rows as f64) {
        return 0.0;
    }
    let (u0, v0) = (u.floor() as isize, v.floor() as isize);
    let (fu, fv) = (u - u0 as f64, v - v0 as f64);
    let tap = |r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r >= rows || c >= cols {
            0.0
        } else {
            p.data[r as usize * p.cols + c as usize] as f64
        }
    };
    (1.0 - fv) * ((1.0 - fu) * tap(v0, u0) + fu * tap(v0, u0 + 1))
        + fv * ((1.0 - fu) * tap(v0 + 1, u0) + fu * tap(v0 + 1, u0 + 1))
}

/// Backproject already filtered views onto the geometry's voxel grid.
pub fn backproject(ps: &ProjectionSet, geom: &ConeBeamGeometry, opts: &BackprojectOptions) -> Result<Volume3> {
    geom.validate()?;
    ps.validate()?;
    if &ps.geometry != geom {
        return Err(CoreError::InvalidArgument("projection set was acquired with a different geometry".into()));
    }
    let shape = geom.volume_shape;
    let spacing = geom.spacing();
    let sources = geom.angles.angles().iter().map(|&a| geom.source_position(a)).collect::<Result<Vec<_>>>()?;
    let dtheta = geom.angles.spacing_rad();
    let mut vol = Volume3::zeros(shape, spacing);
    let slab = shape[1] * shape[2];
    vol.data.par_chunks_mut(slab).enumerate().for_each(|(i, out)| {
        let x = axis_center(i, shape[0], spacing[0]);
        for j in 0..shape[1] {
            let y = axis_center(j, shape[1], spacing[1]);
            let w = if opts.distance_weight { (geom.sid_mm / (geom.sid_mm - y)).powi(2) } else { 1.0 };
            for k in 0..shape[2] {
                let z = axis_center(k, shape[2], spacing[2]);
                let mut acc = 0.0f64;
                for (p, &s) in ps.projections.iter().zip(&sources) {
                    let (u, v, _) = geom.project_point(s, [x, y, z]);
                    acc += bilinear_or_zero(p, u, v);
                }
                out[flat_index([1, shape[1], shape[2]], 0, j, k)] = (acc * w * dtheta) as f32;
            }
        }
    });
    Ok(vol)
}

/// Filter then backproject.
pub fn fbp(ps: &ProjectionSet, spec: &RampFilterSpec, opts: &BackprojectOptions) -> Result<Volume3> {
    let filtered = filter_all(ps, spec)?;
    backproject(&filtered, &ps.geometry, opts)
}
