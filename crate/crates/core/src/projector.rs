//! Ray-cast forward projection (digitally reconstructed radiographs).
//!
//! Each detector pixel integrates the trilinearly interpolated volume along
//! the ray from the source to the pixel center. Integration uses the
//! composite trapezoid rule over the ray's intersection with the volume's
//! bounding box, with `n = ceil(length / step)` equal sub-intervals. Samples
//! between the outermost voxel centers and the box faces clamp to the edge
//! voxel.

use rayon::prelude::*;

use crate::error::{CoreError, Result};
use crate::geometry::{ConeBeamGeometry, Ray};
use crate::phantom::Spectrum;
use crate::volume::Volume3;

#[derive(Debug, Clone, PartialEq)]
pub struct Projection2D {
    pub rows: usize,
    pub cols: usize,
    pub pixel_mm: f64,
    pub theta_deg: f64,
    /// Row-major `[row][col]`.
    pub data: Vec<f32>,
}

impl Projection2D {
    pub fn zeros(rows: usize, cols: usize, pixel_mm: f64, theta_deg: f64) -> Self {
        Self { rows, cols, pixel_mm, theta_deg, data: vec![0.0; rows * cols] }
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.cols + col]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    pub geometry: ConeBeamGeometry,
    pub projections: Vec<Projection2D>,
}

impl ProjectionSet {
    pub fn new(geometry: ConeBeamGeometry, projections: Vec<Projection2D>) -> Result<Self> {
        let s = Self { geometry, projections };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.geometry;
        if self.projections.len() != g.angles.n_views() {
            return Err(CoreError::Geometry(format!(
                "{} projections for {} angles",
                self.projections.len(),
                g.angles.n_views()
            )));
        }
        for (p, &a) in self.projections.iter().zip(g.angles.angles()) {
            if p.rows != g.detector_rows
                || p.cols != g.detector_cols
                || p.pixel_mm != g.detector_pixel_mm
                || p.theta_deg != a
                || p.data.len() != p.rows * p.cols
            {
                return Err(CoreError::Geometry(format!(
                    "view at {} deg ({}x{} @ {} mm) does not match the detector and angle {a}",
                    p.theta_deg, p.rows, p.cols, p.pixel_mm
                )));
            }
        }
        Ok(())
    }

    pub fn n_views(&self) -> usize {
        self.projections.len()
    }

    pub fn zeros(geometry: &ConeBeamGeometry) -> Self {
        let projections = geometry
            .angles
            .angles()
            .iter()
            .map(|&a| Projection2D::zeros(geometry.detector_rows, geometry.detector_cols, geometry.detector_pixel_mm, a))
            .collect();
        Self { geometry: geometry.clone(), projections }
    }

    pub fn zip_with(&self, other: &ProjectionSet, f: impl Fn(f32, f32) -> f32) -> Result<ProjectionSet> {
        if self.geometry != other.geometry {
            return Err(CoreError::Geometry("projection sets come from different geometries".into()));
        }
        let projections = self
            .projections
            .iter()
            .zip(&other.projections)
            .map(|(a, b)| Projection2D { data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(), ..a.clone() })
            .collect();
        Ok(ProjectionSet { geometry: self.geometry.clone(), projections })
    }

    pub fn sub(&self, other: &ProjectionSet) -> Result<ProjectionSet> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> ProjectionSet {
        let projections = self
            .projections
            .iter()
            .map(|p| Projection2D { data: p.data.iter().map(|&v| f(v)).collect(), ..p.clone() })
            .collect();
        ProjectionSet { geometry: self.geometry.clone(), projections }
    }

    pub fn values(&self) -> impl Iterator<Item = f32> + '_ {
        self.projections.iter().flat_map(|p| p.data.iter().copied())
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.values().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    }
}

/// Entry and exit distances of `ray` through the axis-aligned box centered
/// on the origin with extents `fov`, or `None` on a miss.
pub fn clip_to_box(ray: &Ray, fov: [f64; 3]) -> Option<(f64, f64)> {
    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        let (lo, hi) = (-fov[a] / 2.0, fov[a] / 2.0);
        let (o, d) = (ray.origin[a], ray.dir[a]);
        if d == 0.0 {
            if o < lo || o > hi {
                return None;
            }
            continue;
        }
        let (mut ta, mut tb) = ((lo - o) / d, (hi - o) / d);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    (t1 > t0).then_some((t0, t1))
}

/// Trilinear interpolation at physical point `p`, clamped to the edge voxels.
#[inline]
pub fn sample_trilinear(vol: &Volume3, p: [f64; 3]) -> f64 {
    let s = vol.shape;
    let mut base = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..3 {
        let n = s[a];
        let c = (p[a] + n as f64 * vol.spacing[a] / 2.0) / vol.spacing[a] - 0.5;
        let c = c.clamp(0.0, (n - 1) as f64);
        let i0 = (c.floor() as usize).min(n.saturating_sub(2));
        base[a] = i0;
        frac[a] = if n > 1 { c - i0 as f64 } else { 0.0 };
    }
    let (sy, sz) = (s[1] * s[2], s[2]);
    let step = [if s[0] > 1 { sy } else { 0 }, if s[1] > 1 { sz } else { 0 }, if s[2] > 1 { 1 } else { 0 }];
    let i = base[0] * sy + base[1] * sz + base[2];
    let d = &vol.data;
    let v = |o: usize| d[i + o] as f64;
    let [fx, fy, fz] = frac;
    let c00 = v(0) * (1.0 - fz) + v(step[2]) * fz;
    let c01 = v(step[1]) * (1.0 - fz) + v(step[1] + step[2]) * fz;
    let c10 = v(step[0]) * (1.0 - fz) + v(step[0] + step[2]) * fz;
    let c11 = v(step[0] + step[1]) * (1.0 - fz) + v(step[0] + step[1] + step[2]) * fz;
    let c0 = c00 * (1.0 - fy) + c01 * fy;
    let c1 = c10 * (1.0 - fy) + c11 * fy;
    c0 * (1.0 - fx) + c1 * fx
}

pub fn line_integral(vol: &Volume3, ray: &Ray, step_mm: f64) -> Result<f64> {
    if !(step_mm > 0.0 && step_mm.is_finite()) {
        return Err(CoreError::InvalidArgument(format!("step must be positive, got {step_mm}")));
    }
    let Some((t0, t1)) = clip_to_box(ray, vol.fov()) else {
        return Ok(0.0);
    };
    let len = t1 - t0;
    let n = ((len / step_mm).ceil() as usize).max(1);
    let h = len / n as f64;
    let at = |t: f64| sample_trilinear(vol, [0, 1, 2].map(|a| ray.origin[a] + t * ray.dir[a]));
    let mut acc = 0.5 * (at(t0) + at(t1));
    for k in 1..n {
        acc += at(t0 + k as f64 * h);
    }
    Ok(acc * h)
}

/// Integral of the trilinear interpolant along `ray`, exact up to rounding.
/// Splits the ray wherever it crosses a plane of voxel centers, where the
/// interpolant is a cubic in the ray parameter, and applies Simpson's rule
/// on each piece.
pub fn line_integral_exact(vol: &Volume3, ray: &Ray) -> f64 {
    let Some((t0, t1)) = clip_to_box(ray, vol.fov()) else {
        return 0.0;
    };
    let mut cuts = vec![t0, t1];
    for a in 0..3 {
        let d = ray.dir[a];
        if d == 0.0 {
            continue;
        }
        let n = vol.shape[a];
        for i in 0..n {
            let x = (i as f64 + 0.5) * vol.spacing[a] - n as f64 * vol.spacing[a] / 2.0;
            let t = (x - ray.origin[a]) / d;
            if t > t0 && t < t1 {
                cuts.push(t);
            }
        }
    }
    cuts.sort_by(|a, b| a.partial_cmp(b).expect("finite cut"));
    let at = |t: f64| sample_trilinear(vol, [0, 1, 2].map(|a| ray.origin[a] + t * ray.dir[a]));
    cuts.windows(2)
        .map(|w| {
            let (a, b) = (w[0], w[1]);
            (b - a) / 6.0 * (at(a) + 4.0 * at(0.5 * (a + b)) + at(b))
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectorOptions {
    /// Ray-marching step; `None` means half the smallest voxel spacing.
    pub step_mm: Option<f64>,
    /// Sub-pixel rays per axis; 1 samples pixel centers only.
    pub supersample: usize,
}

impl Default for ProjectorOptions {
    fn default() -> Self {
        Self { step_mm: None, supersample: 1 }
    }
}

impl ProjectorOptions {
    pub fn step_for(&self, vol: &Volume3) -> f64 {
        self.step_mm.unwrap_or_else(|| vol.spacing.iter().cloned().fold(f64::INFINITY, f64::min) / 2.0)
    }
}

fn check_volumes(vols: &[Volume3], geom: &ConeBeamGeometry, spectrum: &Spectrum) -> Result<()> {
    if vols.len() != spectrum.len() {
        return Err(CoreError::InvalidArgument(format!(
            "{} volumes for a {}-bin spectrum",
            vols.len(),
            spectrum.len()
        )));
    }
    for v in vols {
        if !v.same_grid(geom.volume_shape, geom.spacing()) {
            return Err(CoreError::Geometry(format!(
                "volume grid {:?}@{:?} does not match the geometry",
                v.shape, v.spacing
            )));
        }
    }
    Ok(())
}

fn project_row(
    vols: &[Volume3],
    geom: &ConeBeamGeometry,
    theta: f64,
    spectrum: &Spectrum,
    opts: &ProjectorOptions,
    row: usize,
    out: &mut [f32],
) -> Result<()> {
    let ss = opts.supersample.max(1);
    let step = opts.step_for(&vols[0]);
    let mut p = vec![0.0f64; vols.len()];
    for (col, slot) in out.iter_mut().enumerate() {
        p.iter_mut().for_each(|x| *x = 0.0);
        for sv in 0..ss {
            for su in 0..ss {
                let du = (su as f64 + 0.5) / ss as f64 - 0.5;
                let dv = (sv as f64 + 0.5) / ss as f64 - 0.5;
                let ray = geom.ray_through(theta, col as f64 + du, row as f64 + dv)?;
                for (b, v) in vols.iter().enumerate() {
                    p[b] += line_integral(v, &ray, step)?;
                }
            }
        }
        let norm = (ss * ss) as f64;
        *slot = if vols.len() == 1 {
            (p[0] / norm) as f32
        } else {
            let s: f64 = spectrum.weights().iter().zip(&p).map(|(&w, &pb)| w * (-pb / norm).exp()).sum();
            (-s.ln()) as f32
        };
    }
    Ok(())
}

/// `-ln sum_b eta_b exp(-p_b)` per pixel, with `p_b` the line integral through
/// the bin-`b` volume. A single bin returns the line integral itself.
pub fn forward_project(
    vols_by_bin: &[Volume3],
    geom: &ConeBeamGeometry,
    theta_deg: f64,
    spectrum: &Spectrum,
    opts: &ProjectorOptions,
) -> Result<Projection2D> {
    check_volumes(vols_by_bin, geom, spectrum)?;
    let mut proj = Projection2D::zeros(geom.detector_rows, geom.detector_cols, geom.detector_pixel_mm, theta_deg);
    proj.data
        .par_chunks_mut(geom.detector_cols)
        .enumerate()
        .try_for_each(|(row, out)| project_row(vols_by_bin, geom, theta_deg, spectrum, opts, row, out))?;
    Ok(proj)
}

pub fn project_all(
    vols_by_bin: &[Volume3],
    geom: &ConeBeamGeometry,
    spectrum: &Spectrum,
    opts: &ProjectorOptions,
) -> Result<ProjectionSet> {
    geom.validate()?;
    check_volumes(vols_by_bin, geom, spectrum)?;
    let projections = geom
        .angles
        .angles()
        .par_iter()
        .map(|&theta| {
            forward_project(vols_by_bin, geom, theta, spectrum, opts)
                .map_err(|e| e.context(format!("projecting view at {theta} deg")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ProjectionSet { geometry: geom.clone(), projections })
}

/// Monoenergetic projection of a single volume with default options.
pub fn project_mono(vol: &Volume3, geom: &ConeBeamGeometry) -> Result<ProjectionSet> {
    project_all(std::slice::from_ref(vol), geom, &Spectrum::mono(60.0), &ProjectorOptions::default())
}
