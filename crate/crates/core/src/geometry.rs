//! Stationary-detector tomosynthesis geometry.
//!
//! Coordinates are in millimetres with the isocenter at the origin. The
//! central ray runs along `-y`: the source sits at height `sid_mm` on the
//! `+y` side and the flat detector lies in the plane `y = -(sdd_mm - sid_mm)`
//! for every view. The source translates along the motion axis (`x` by
//! default) to `sid_mm * tan(theta)`, so every view shares one detector.
//!
//! Detector column `u` runs along the motion axis and row `v` along the
//! other lateral axis. Pixel `(u, v)` is centered at
//! `((u - (cols - 1) / 2) * pitch, (v - (rows - 1) / 2) * pitch)`.

use std::fmt;
use std::str::FromStr;

use crate::config::{KvWriter, SectionReader};
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AngleSet {
    angles: Vec<f64>,
    alpha: f64,
}

/// Equiangular views over `[-alpha/2, alpha/2]`, endpoints included.
pub fn make_angle_set(alpha_deg: f64, n_views: usize) -> Result<AngleSet> {
    if !(alpha_deg >= 0.0 && alpha_deg.is_finite()) {
        return Err(CoreError::InvalidArgument(format!("angular range must be >= 0, got {alpha_deg}")));
    }
    if n_views == 0 {
        return Err(CoreError::InvalidArgument("need at least one view".into()));
    }
    if alpha_deg >= 180.0 {
        return Err(CoreError::InvalidArgument(format!("angular range {alpha_deg} must stay below 180 degrees")));
    }
    if n_views == 1 {
        return Ok(AngleSet { angles: vec![0.0], alpha: alpha_deg });
    }
    if alpha_deg == 0.0 {
        return Err(CoreError::InvalidArgument(format!("{n_views} views cannot share a zero angular range")));
    }
    // Written as alpha * (2i - (n-1)) / (2(n-1)) so angle[i] == -angle[n-1-i] exactly.
    let m = (n_views - 1) as f64;
    let angles = (0..n_views).map(|i| alpha_deg * (2.0 * i as f64 - m) / (2.0 * m)).collect();
    Ok(AngleSet { angles, alpha: alpha_deg })
}

impl AngleSet {
    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn n_views(&self) -> usize {
        self.angles.len()
    }

    /// Angular step in radians used to weight backprojection. A single view
    /// gets unit weight.
    pub fn spacing_rad(&self) -> f64 {
        if self.angles.len() < 2 {
            1.0
        } else {
            (self.alpha / (self.angles.len() - 1) as f64).to_radians()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotionAxis {
    X,
    Z,
}

impl MotionAxis {
    /// Volume axis the source moves along, and the other lateral axis.
    pub fn axes(self) -> (usize, usize) {
        match self {
            MotionAxis::X => (0, 2),
            MotionAxis::Z => (2, 0),
        }
    }
}

impl fmt::Display for MotionAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MotionAxis::X => "x",
            MotionAxis::Z => "z",
        })
    }
}

impl FromStr for MotionAxis {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" => Ok(MotionAxis::X),
            "z" => Ok(MotionAxis::Z),
            _ => Err(CoreError::Config(format!("motion axis must be x or z, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    pub dir: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConeBeamGeometry {
    pub sid_mm: f64,
    pub sdd_mm: f64,
    pub detector_rows: usize,
    pub detector_cols: usize,
    pub detector_pixel_mm: f64,
    pub fov_mm: [f64; 3],
    pub volume_shape: [usize; 3],
    pub motion_axis: MotionAxis,
    pub angles: AngleSet,
}

impl Default for ConeBeamGeometry {
    fn default() -> Self {
        Self {
            sid_mm: 1000.0,
            sdd_mm: 1200.0,
            detector_rows: 64,
            detector_cols: 64,
            detector_pixel_mm: 8.0,
            fov_mm: [409.6, 300.0, 409.6],
            volume_shape: [64, 32, 64],
            motion_axis: MotionAxis::X,
            angles: make_angle_set(30.0, 59).expect("default angle set"),
        }
    }
}

impl ConeBeamGeometry {
    pub fn validate(&self) -> Result<()> {
        if !(self.sid_mm > 0.0 && self.sdd_mm > self.sid_mm && self.sdd_mm.is_finite()) {
            return Err(CoreError::InvalidArgument(format!(
                "need sdd > sid > 0, got sid {} sdd {}",
                self.sid_mm, self.sdd_mm
            )));
        }
        if self.detector_rows == 0 || self.detector_cols == 0 || self.volume_shape.contains(&0) {
            return Err(CoreError::InvalidArgument("detector and volume counts must be positive".into()));
        }
        if !(self.detector_pixel_mm > 0.0) || self.fov_mm.iter().any(|&f| !(f > 0.0 && f.is_finite())) {
            return Err(CoreError::InvalidArgument("pixel pitch and field of view must be positive".into()));
        }
        if self.fov_mm[1] / 2.0 >= self.sid_mm {
            return Err(CoreError::InvalidArgument("volume reaches the source plane".into()));
        }
        Ok(())
    }

    pub fn with_angles(&self, angles: AngleSet) -> Self {
        Self { angles, ..self.clone() }
    }

    pub fn spacing(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.fov_mm[a] / self.volume_shape[a] as f64)
    }

    pub fn detector_y(&self) -> f64 {
        -(self.sdd_mm - self.sid_mm)
    }

    /// Detector pitch scaled back to the isocenter plane.
    pub fn iso_pixel_mm(&self) -> f64 {
        self.detector_pixel_mm * self.sid_mm / self.sdd_mm
    }

    pub fn source_position(&self, theta_deg: f64) -> Result<[f64; 3]> {
        if !(theta_deg.abs() < 90.0) {
            return Err(CoreError::InvalidArgument(format!("view angle {theta_deg} outside (-90, 90)")));
        }
        let (m, _) = self.motion_axis.axes();
        let mut s = [0.0, self.sid_mm, 0.0];
        s[m] = self.sid_mm * theta_deg.to_radians().tan();
        Ok(s)
    }

    pub fn pixel_center(&self, u: f64, v: f64) -> [f64; 3] {
        let (m, o) = self.motion_axis.axes();
        let mut p = [0.0, self.detector_y(), 0.0];
        p[m] = (u - (self.detector_cols as f64 - 1.0) / 2.0) * self.detector_pixel_mm;
        p[o] = (v - (self.detector_rows as f64 - 1.0) / 2.0) * self.detector_pixel_mm;
        p
    }

    /// Unit ray from the source at `theta_deg` to the center of pixel `(u, v)`.
    /// Fractional indices are allowed within half a pixel of the detector edge.
    pub fn ray_through(&self, theta_deg: f64, u: f64, v: f64) -> Result<Ray> {
        let (cols, rows) = (self.detector_cols as f64, self.detector_rows as f64);
        if !(u >= -0.5 && u <= cols - 0.5 && v >= -0.5 && v <= rows - 0.5) {
            return Err(CoreError::InvalidArgument(format!("pixel ({u}, {v}) outside a {cols}x{rows} detector")));
        }
        let origin = self.source_position(theta_deg)?;
        let target = self.pixel_center(u, v);
        let d = [0, 1, 2].map(|a| target[a] - origin[a]);
        let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        Ok(Ray { origin, dir: d.map(|c| c / norm) })
    }

    /// Fractional detector indices `(u, v)` where the ray from `source`
    /// through `p` meets the detector, plus the magnification
    /// `sdd / (sid - p_y)`. `p` must lie strictly below the source plane.
    pub fn project_point(&self, source: [f64; 3], p: [f64; 3]) -> (f64, f64, f64) {
        let (m, o) = self.motion_axis.axes();
        let t = self.sdd_mm / (self.sid_mm - p[1]);
        let pm = source[m] + t * (p[m] - source[m]);
        let po = source[o] + t * (p[o] - source[o]);
        (
            pm / self.detector_pixel_mm + (self.detector_cols as f64 - 1.0) / 2.0,
            po / self.detector_pixel_mm + (self.detector_rows as f64 - 1.0) / 2.0,
            t,
        )
    }

    pub fn write_kv(&self, w: &mut KvWriter) {
        w.kv("sid_mm", self.sid_mm)
            .kv("sdd_mm", self.sdd_mm)
            .kv("detector_rows", self.detector_rows)
            .kv("detector_cols", self.detector_cols)
            .kv("detector_pixel_mm", self.detector_pixel_mm)
            .kv("fov_mm_x", self.fov_mm[0])
            .kv("fov_mm_y", self.fov_mm[1])
            .kv("fov_mm_z", self.fov_mm[2])
            .kv("vol_nx", self.volume_shape[0])
            .kv("vol_ny", self.volume_shape[1])
            .kv("vol_nz", self.volume_shape[2])
            .kv("motion_axis", self.motion_axis)
            .kv("alpha_deg", self.angles.alpha())
            .kv("n_views", self.angles.n_views());
    }

    /// Read the keys written by [`write_kv`](Self::write_kv); absent keys
    /// keep their defaults.
    pub fn read_kv(s: &mut SectionReader<'_>) -> Result<Self> {
        let d = Self::default();
        let alpha = s.get_or("alpha_deg", d.angles.alpha())?;
        let n_views = s.get_or("n_views", d.angles.n_views())?;
        let g = Self {
            sid_mm: s.get_or("sid_mm", d.sid_mm)?,
            sdd_mm: s.get_or("sdd_mm", d.sdd_mm)?,
            detector_rows: s.get_or("detector_rows", d.detector_rows)?,
            detector_cols: s.get_or("detector_cols", d.detector_cols)?,
            detector_pixel_mm: s.get_or("detector_pixel_mm", d.detector_pixel_mm)?,
            fov_mm: [
                s.get_or("fov_mm_x", d.fov_mm[0])?,
                s.get_or("fov_mm_y", d.fov_mm[1])?,
                s.get_or("fov_mm_z", d.fov_mm[2])?,
            ],
            volume_shape: [
                s.get_or("vol_nx", d.volume_shape[0])?,
                s.get_or("vol_ny", d.volume_shape[1])?,
                s.get_or("vol_nz", d.volume_shape[2])?,
            ],
            motion_axis: s.get_or("motion_axis", d.motion_axis)?,
            angles: make_angle_set(alpha, n_views)?,
        };
        g.validate()?;
        Ok(g)
    }
}
