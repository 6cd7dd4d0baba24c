//! On-disk containers and PNG export.
//!
//! Volume / mask file: a 64-byte header followed by the raw voxels.
//!
//! ```text
//! 0   8  magic "TRVOL001"
//! 8   1  dtype (0 = f32 LE, 1 = u8)
//! 9   3  zero
//! 12 12  shape as 3 x u32 LE
//! 24 24  spacing as 3 x f64 LE
//! 48 16  zero
//! ```
//!
//! Projection stack: magic "TRPRJ001", n_views / rows / cols as u32,
//! pixel pitch as f64, n_views angles as f64, then the views as f32 LE in
//! view-major, row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::geometry::ConeBeamGeometry;
use crate::projector::{Projection2D, ProjectionSet};
use crate::volume::{flat_index, Mask3, Volume3};

const VOL_MAGIC: &[u8; 8] = b"TRVOL001";
const PRJ_MAGIC: &[u8; 8] = b"TRPRJ001";
const HEADER_LEN: usize = 64;

fn ctx<T>(r: Result<T>, what: &str, path: &Path) -> Result<T> {
    r.map_err(|e| e.context(format!("{what} {}", path.display())))
}

fn header(dtype: u8, shape: [usize; 3], spacing: [f64; 3]) -> Result<[u8; HEADER_LEN]> {
    let mut h = [0u8; HEADER_LEN];
    h[..8].copy_from_slice(VOL_MAGIC);
    h[8] = dtype;
    for (a, &n) in shape.iter().enumerate() {
        let n = u32::try_from(n).map_err(|_| CoreError::InvalidArgument(format!("axis length {n} too large")))?;
        h[12 + 4 * a..16 + 4 * a].copy_from_slice(&n.to_le_bytes());
    }
    for (a, &s) in spacing.iter().enumerate() {
        h[24 + 8 * a..32 + 8 * a].copy_from_slice(&s.to_le_bytes());
    }
    Ok(h)
}

fn parse_header(h: &[u8; HEADER_LEN]) -> Result<(u8, [usize; 3], [f64; 3])> {
    if &h[..8] != VOL_MAGIC {
        return Err(CoreError::Format("not a volume container".into()));
    }
    let shape = [0, 1, 2].map(|a| u32::from_le_bytes(h[12 + 4 * a..16 + 4 * a].try_into().unwrap()) as usize);
    let spacing = [0, 1, 2].map(|a| f64::from_le_bytes(h[24 + 8 * a..32 + 8 * a].try_into().unwrap()));
    Ok((h[8], shape, spacing))
}

pub fn write_volume_to(w: &mut impl Write, v: &Volume3) -> Result<()> {
    w.write_all(&header(0, v.shape, v.spacing)?)?;
    let mut buf = Vec::with_capacity(4 * v.len());
    for x in &v.data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_volume_from(r: &mut impl Read) -> Result<Volume3> {
    let mut h = [0u8; HEADER_LEN];
    r.read_exact(&mut h)?;
    let (dtype, shape, spacing) = parse_header(&h)?;
    if dtype != 0 {
        return Err(CoreError::Format(format!("expected an f32 volume, found dtype {dtype}")));
    }
    let n: usize = shape.iter().product();
    let mut raw = vec![0u8; 4 * n];
    r.read_exact(&mut raw)?;
    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Volume3::new(shape, spacing, data)
}

pub fn write_mask_to(w: &mut impl Write, m: &Mask3) -> Result<()> {
    w.write_all(&header(1, m.shape, m.spacing)?)?;
    w.write_all(&m.data)?;
    Ok(())
}

pub fn read_mask_from(r: &mut impl Read) -> Result<Mask3> {
    let mut h = [0u8; HEADER_LEN];
    r.read_exact(&mut h)?;
    let (dtype, shape, spacing) = parse_header(&h)?;
    if dtype != 1 {
        return Err(CoreError::Format(format!("expected a u8 mask, found dtype {dtype}")));
    }
    let mut data = vec![0u8; shape.iter().product()];
    r.read_exact(&mut data)?;
    Mask3::new(shape, spacing, data)
}

pub fn save_volume(path: &Path, v: &Volume3) -> Result<()> {
    let run = || -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_volume_to(&mut w, v)?;
        w.flush()?;
        Ok(())
    };
    ctx(run(), "writing", path)
}

pub fn load_volume(path: &Path) -> Result<Volume3> {
    ctx(File::open(path).map_err(CoreError::from).and_then(|f| read_volume_from(&mut BufReader::new(f))), "reading", path)
}

pub fn save_mask(path: &Path, m: &Mask3) -> Result<()> {
    let run = || -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_mask_to(&mut w, m)?;
        w.flush()?;
        Ok(())
    };
    ctx(run(), "writing", path)
}

pub fn load_mask(path: &Path) -> Result<Mask3> {
    ctx(File::open(path).map_err(CoreError::from).and_then(|f| read_mask_from(&mut BufReader::new(f))), "reading", path)
}

pub fn write_projections_to(w: &mut impl Write, ps: &ProjectionSet) -> Result<()> {
    ps.validate()?;
    let g = &ps.geometry;
    w.write_all(PRJ_MAGIC)?;
    for n in [ps.n_views(), g.detector_rows, g.detector_cols] {
        w.write_all(&(n as u32).to_le_bytes())?;
    }
    w.write_all(&g.detector_pixel_mm.to_le_bytes())?;
    for a in g.angles.angles() {
        w.write_all(&a.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(4 * g.detector_rows * g.detector_cols);
    for p in &ps.projections {
        buf.clear();
        for x in &p.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

/// Read a projection stack and check it against `geom` (detector size,
/// pitch and every view angle must match exactly).
pub fn read_projections_from(r: &mut impl Read, geom: &ConeBeamGeometry) -> Result<ProjectionSet> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != PRJ_MAGIC {
        return Err(CoreError::Format("not a projection stack".into()));
    }
    let mut u = [0u8; 4];
    let mut dims = [0usize; 3];
    for d in &mut dims {
        r.read_exact(&mut u)?;
        *d = u32::from_le_bytes(u) as usize;
    }
    let [n, rows, cols] = dims;
    let mut f = [0u8; 8];
    r.read_exact(&mut f)?;
    let pitch = f64::from_le_bytes(f);
    let mut angles = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut f)?;
        angles.push(f64::from_le_bytes(f));
    }
    if rows != geom.detector_rows || cols != geom.detector_cols || pitch != geom.detector_pixel_mm {
        return Err(CoreError::Geometry(format!(
            "stack detector {rows}x{cols} @ {pitch} mm, configured {}x{} @ {} mm",
            geom.detector_rows, geom.detector_cols, geom.detector_pixel_mm
        )));
    }
    if angles != geom.angles.angles() {
        return Err(CoreError::Geometry(format!(
            "stack has {n} views over {:?}, configured {} views of {} deg",
            angles.first().zip(angles.last()),
            geom.angles.n_views(),
            geom.angles.alpha()
        )));
    }
    let mut raw = vec![0u8; 4 * rows * cols];
    let mut projections = Vec::with_capacity(n);
    for &a in &angles {
        r.read_exact(&mut raw)?;
        let mut p = Projection2D::zeros(rows, cols, pitch, a);
        for (d, c) in p.data.iter_mut().zip(raw.chunks_exact(4)) {
            *d = f32::from_le_bytes(c.try_into().unwrap());
        }
        projections.push(p);
    }
    ProjectionSet::new(geom.clone(), projections)
}

pub fn save_projections(path: &Path, ps: &ProjectionSet) -> Result<()> {
    let run = || -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_projections_to(&mut w, ps)?;
        w.flush()?;
        Ok(())
    };
    ctx(run(), "writing", path)
}

pub fn load_projections(path: &Path, geom: &ConeBeamGeometry) -> Result<ProjectionSet> {
    ctx(
        File::open(path).map_err(CoreError::from).and_then(|f| read_projections_from(&mut BufReader::new(f), geom)),
        "reading",
        path,
    )
}

/// Slice orientation. Coronal slices fix depth (y), axial slices fix the
/// superior-inferior index (x), sagittal slices fix z.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Plane {
    Axial,
    Coronal,
    Sagittal,
}

impl std::str::FromStr for Plane {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "axial" => Ok(Plane::Axial),
            "coronal" => Ok(Plane::Coronal),
            "sagittal" => Ok(Plane::Sagittal),
            _ => Err(CoreError::Config(format!("unknown plane {s:?}"))),
        }
    }
}

/// A grayscale image of raw values, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice2 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

/// Extract a slice. Coronal images have x down and z across.
pub fn extract_slice(v: &Volume3, plane: Plane, index: usize) -> Result<Slice2> {
    let s = v.shape;
    let fixed = match plane {
        Plane::Axial => 0,
        Plane::Coronal => 1,
        Plane::Sagittal => 2,
    };
    if index >= s[fixed] {
        return Err(CoreError::Range(format!("slice {index} outside axis of length {}", s[fixed])));
    }
    let (height, width) = match plane {
        Plane::Axial => (s[1], s[2]),
        Plane::Coronal => (s[0], s[2]),
        Plane::Sagittal => (s[0], s[1]),
    };
    let mut data = Vec::with_capacity(width * height);
    for r in 0..height {
        for c in 0..width {
            let (i, j, k) = match plane {
                Plane::Axial => (index, r, c),
                Plane::Coronal => (r, index, c),
                Plane::Sagittal => (r, c, index),
            };
            data.push(v.data[flat_index(s, i, j, k)]);
        }
    }
    Ok(Slice2 { width, height, data })
}

/// Window/level mapping to 8 bits: `level - width/2` maps to 0 and
/// `level + width/2` to 255, clamped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window {
    pub level: f32,
    pub width: f32,
}

impl Window {
    pub fn from_range(lo: f32, hi: f32) -> Self {
        let width = if hi > lo { hi - lo } else { 1.0 };
        Self { level: 0.5 * (lo + hi), width }
    }

    pub fn apply(&self, v: f32) -> u8 {
        let t = (v - (self.level - 0.5 * self.width)) / self.width;
        (t.clamp(0.0, 1.0) * 255.0).round() as u8
    }
}

pub fn write_gray_png(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(CoreError::InvalidArgument(format!("{} pixels for a {width}x{height} image", pixels.len())));
    }
    let run = || -> Result<()> {
        let w = BufWriter::new(File::create(path)?);
        let mut enc = png::Encoder::new(w, width as u32, height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| CoreError::Format(e.to_string()))?;
        writer.write_image_data(pixels).map_err(|e| CoreError::Format(e.to_string()))?;
        writer.finish().map_err(|e| CoreError::Format(e.to_string()))?;
        Ok(())
    };
    ctx(run(), "writing", path)
}

/// Lay out same-sized panels left to right with a `gap`-pixel black border
/// and write them as one PNG.
pub fn write_panels_png(path: &Path, panels: &[(Slice2, Window)], gap: usize) -> Result<()> {
    let Some((first, _)) = panels.first() else {
        return Err(CoreError::InvalidArgument("no panels to write".into()));
    };
    let (w, h) = (first.width, first.height);
    if panels.iter().any(|(s, _)| s.width != w || s.height != h) {
        return Err(CoreError::InvalidArgument("panels differ in size".into()));
    }
    let total_w = panels.len() * w + (panels.len() + 1) * gap;
    let total_h = h + 2 * gap;
    let mut px = vec![0u8; total_w * total_h];
    for (n, (s, win)) in panels.iter().enumerate() {
        let x0 = gap + n * (w + gap);
        for r in 0..h {
            for c in 0..w {
                px[(gap + r) * total_w + x0 + c] = win.apply(s.data[r * w + c]);
            }
        }
    }
    write_gray_png(path, total_w, total_h, &px)
}

pub fn write_slice_png(path: &Path, v: &Volume3, plane: Plane, index: usize, window: Window) -> Result<()> {
    let s = extract_slice(v, plane, index)?;
    let px: Vec<u8> = s.data.iter().map(|&x| window.apply(x)).collect();
    write_gray_png(path, s.width, s.height, &px)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_maps_ends() {
        let w = Window { level: 0.5, width: 1.0 };
        assert_eq!(w.apply(0.0), 0);
        assert_eq!(w.apply(1.0), 255);
        assert_eq!(w.apply(-3.0), 0);
        assert_eq!(w.apply(0.5), 128);
        assert_eq!(Window::from_range(2.0, 2.0).width, 1.0);
    }

    #[test]
    fn header_layout() {
        let h = header(1, [3, 4, 5], [1.0, 2.0, 0.5]).unwrap();
        assert_eq!(&h[..8], b"TRVOL001");
        assert_eq!(h[8], 1);
        assert_eq!(u32::from_le_bytes(h[16..20].try_into().unwrap()), 4);
        assert_eq!(f64::from_le_bytes(h[40..48].try_into().unwrap()), 0.5);
        assert!(h[48..].iter().all(|&b| b == 0));
        assert_eq!(parse_header(&h).unwrap(), (1, [3, 4, 5], [1.0, 2.0, 0.5]));
    }
}
