//! Voxel grids.
//!
//! Axis order is `[x, y, z]` (superior-inferior, anterior-posterior depth,
//! left-right) and storage is row-major with `z` fastest. The grid is
//! centered on the isocenter, so voxel `(i, j, k)` sits at
//! `(i + 0.5) * spacing[0] - fov[0] / 2` and likewise on the other axes.

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Volume3 {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mask3 {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub data: Vec<u8>,
}

fn check_grid(shape: [usize; 3], spacing: [f64; 3], len: usize) -> Result<()> {
    if shape.iter().any(|&n| n == 0) {
        return Err(CoreError::InvalidArgument(format!("volume shape {shape:?} has a zero axis")));
    }
    if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(CoreError::InvalidArgument(format!("voxel spacing {spacing:?} must be positive")));
    }
    if len != shape.iter().product::<usize>() {
        return Err(CoreError::InvalidArgument(format!(
            "{len} values do not fill a {shape:?} grid"
        )));
    }
    Ok(())
}

#[inline]
pub fn flat_index(shape: [usize; 3], i: usize, j: usize, k: usize) -> usize {
    (i * shape[1] + j) * shape[2] + k
}

/// Physical center of voxel index `idx` along an axis of `n` voxels.
#[inline]
pub fn axis_center(idx: usize, n: usize, spacing: f64) -> f64 {
    (idx as f64 + 0.5) * spacing - n as f64 * spacing / 2.0
}

impl Volume3 {
    pub fn new(shape: [usize; 3], spacing: [f64; 3], data: Vec<f32>) -> Result<Self> {
        check_grid(shape, spacing, data.len())?;
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(CoreError::InvalidArgument(format!("non-finite voxel value {v}")));
        }
        Ok(Self { shape, spacing, data })
    }

    pub fn zeros(shape: [usize; 3], spacing: [f64; 3]) -> Self {
        Self::filled(shape, spacing, 0.0)
    }

    pub fn filled(shape: [usize; 3], spacing: [f64; 3], value: f32) -> Self {
        check_grid(shape, spacing, shape.iter().product()).expect("valid grid");
        Self { shape, spacing, data: vec![value; shape.iter().product()] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn fov(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.shape[a] as f64 * self.spacing[a])
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[flat_index(self.shape, i, j, k)]
    }

    pub fn center(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            axis_center(i, self.shape[0], self.spacing[0]),
            axis_center(j, self.shape[1], self.spacing[1]),
            axis_center(k, self.shape[2], self.spacing[2]),
        ]
    }

    pub fn same_grid(&self, shape: [usize; 3], spacing: [f64; 3]) -> bool {
        self.shape == shape && self.spacing == spacing
    }

    fn check_match(&self, other_shape: [usize; 3], other_spacing: [f64; 3]) -> Result<()> {
        if !self.same_grid(other_shape, other_spacing) {
            return Err(CoreError::Geometry(format!(
                "grid {:?}@{:?} vs {:?}@{:?}",
                self.shape, self.spacing, other_shape, other_spacing
            )));
        }
        Ok(())
    }

    pub fn zip_with(&self, other: &Volume3, f: impl Fn(f32, f32) -> f32) -> Result<Volume3> {
        self.check_match(other.shape, other.spacing)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Volume3 { shape: self.shape, spacing: self.spacing, data })
    }

    pub fn sub(&self, other: &Volume3) -> Result<Volume3> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add(&self, other: &Volume3) -> Result<Volume3> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Volume3 {
        Volume3 { shape: self.shape, spacing: self.spacing, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn range(&self) -> f32 {
        let (lo, hi) = self.min_max();
        hi - lo
    }

    pub fn max_abs_diff(&self, other: &Volume3) -> Result<f32> {
        self.check_match(other.shape, other.spacing)?;
        Ok(self.data.iter().zip(&other.data).fold(0.0f32, |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn check_mask(&self, mask: &Mask3) -> Result<()> {
        self.check_match(mask.shape, mask.spacing)
    }
}

impl Mask3 {
    pub fn new(shape: [usize; 3], spacing: [f64; 3], data: Vec<u8>) -> Result<Self> {
        check_grid(shape, spacing, data.len())?;
        if data.iter().any(|&v| v > 1) {
            return Err(CoreError::InvalidArgument("mask values must be 0 or 1".into()));
        }
        Ok(Self { shape, spacing, data })
    }

    pub fn empty(shape: [usize; 3], spacing: [f64; 3]) -> Self {
        Self::new(shape, spacing, vec![0; shape.iter().product()]).expect("valid grid")
    }

    pub fn full(shape: [usize; 3], spacing: [f64; 3]) -> Self {
        Self::new(shape, spacing, vec![1; shape.iter().product()]).expect("valid grid")
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.data[flat_index(self.shape, i, j, k)] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    fn combine(&self, other: &Mask3, f: impl Fn(bool, bool) -> bool) -> Result<Mask3> {
        if self.shape != other.shape || self.spacing != other.spacing {
            return Err(CoreError::Geometry(format!("mask grids {:?} vs {:?}", self.shape, other.shape)));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a != 0, b != 0) as u8).collect();
        Ok(Mask3 { shape: self.shape, spacing: self.spacing, data })
    }

    pub fn and(&self, other: &Mask3) -> Result<Mask3> {
        self.combine(other, |a, b| a && b)
    }

    pub fn minus(&self, other: &Mask3) -> Result<Mask3> {
        self.combine(other, |a, b| a && !b)
    }

    pub fn is_subset_of(&self, other: &Mask3) -> Result<bool> {
        Ok(self.minus(other)?.count() == 0)
    }

    /// Chebyshev dilation by `r` voxels in each axis.
    pub fn dilate(&self, r: [usize; 3]) -> Mask3 {
        let s = self.shape;
        let mut out = self.data.clone();
        for i in 0..s[0] {
            for j in 0..s[1] {
                for k in 0..s[2] {
                    if !self.get(i, j, k) {
                        continue;
                    }
                    for a in i.saturating_sub(r[0])..(i + r[0] + 1).min(s[0]) {
                        for b in j.saturating_sub(r[1])..(j + r[1] + 1).min(s[1]) {
                            for c in k.saturating_sub(r[2])..(k + r[2] + 1).min(s[2]) {
                                out[flat_index(s, a, b, c)] = 1;
                            }
                        }
                    }
                }
            }
        }
        Mask3 { shape: s, spacing: self.spacing, data: out }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centers_are_symmetric_about_isocenter() {
        let v = Volume3::zeros([4, 3, 2], [2.0, 1.0, 5.0]);
        assert_eq!(v.center(0, 0, 0), [-3.0, -1.0, -2.5]);
        assert_eq!(v.center(3, 2, 1), [3.0, 1.0, 2.5]);
        assert_eq!(v.fov(), [8.0, 3.0, 10.0]);
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(Volume3::new([2, 2, 2], [1.0; 3], vec![0.0; 7]).is_err());
        assert!(Volume3::new([2, 2, 2], [1.0, 0.0, 1.0], vec![0.0; 8]).is_err());
        assert!(Volume3::new([1, 1, 1], [1.0; 3], vec![f32::NAN]).is_err());
        assert!(Mask3::new([1, 1, 1], [1.0; 3], vec![2]).is_err());
    }

    #[test]
    fn mask_algebra() {
        let a = Mask3::new([1, 1, 4], [1.0; 3], vec![1, 1, 0, 0]).unwrap();
        let b = Mask3::new([1, 1, 4], [1.0; 3], vec![0, 1, 1, 0]).unwrap();
        assert_eq!(a.and(&b).unwrap().data, vec![0, 1, 0, 0]);
        assert_eq!(a.minus(&b).unwrap().data, vec![1, 0, 0, 0]);
        assert!(a.and(&b).unwrap().is_subset_of(&a).unwrap());
        assert_eq!(b.dilate([0, 0, 1]).data, vec![1, 1, 1, 1]);
    }
}
