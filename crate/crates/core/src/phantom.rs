//! Procedural chest phantoms with exact tissue masks.
//!
//! Anatomy is laid out in a reference frame sized for a
//! 409.6 x 300 x 409.6 mm field of view and stretched per axis to the
//! configured one. The body is an elliptic cylinder along `x`; two lung
//! ellipsoids sit at `z = +-75`; each rib pair is a tube swept along two
//! partial elliptical arcs around the lungs, sloping in `x` with depth; a
//! bone cylinder behind the lungs stands in for the spine; spherical
//! lesions sit inside the lungs. The rib-free companion writes soft tissue
//! into every rib voxel, so the two volumes differ only on the rib mask.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{KvWriter, SectionReader};
use crate::error::{CoreError, Result};
use crate::geometry::ConeBeamGeometry;
use crate::volume::{axis_center, flat_index, Mask3, Volume3};

const REF_FOV: [f64; 3] = [409.6, 300.0, 409.6];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Material {
    Air = 0,
    Soft = 1,
    Lung = 2,
    Bone = 3,
    Lesion = 4,
}

impl Material {
    fn from_label(l: u8) -> Material {
        match l {
            1 => Material::Soft,
            2 => Material::Lung,
            3 => Material::Bone,
            4 => Material::Lesion,
            _ => Material::Air,
        }
    }
}

/// Soft-tissue fraction of the lesion mixture; the rest is lung.
pub const LESION_SOFT_FRACTION: f64 = 0.65;

/// Linear attenuation (mm^-1) of each base material at tabulated energies.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialTable {
    pub energies_kev: Vec<f64>,
    pub soft: Vec<f64>,
    pub lung: Vec<f64>,
    pub bone: Vec<f64>,
}

impl Default for MaterialTable {
    fn default() -> Self {
        // Water-like soft tissue, inflated lung and cortical-bone-like values,
        // rounded so the 60 keV column is 0.02 / 0.004 / 0.048.
        Self {
            energies_kev: vec![30.0, 40.0, 60.0, 80.0, 120.0],
            soft: vec![0.03701, 0.02625, 0.02, 0.01780, 0.01572],
            lung: vec![0.00728, 0.0052, 0.004, 0.00356, 0.00315],
            bone: vec![0.20295, 0.10147, 0.048, 0.03399, 0.02592],
        }
    }
}

fn loglog(es: &[f64], mus: &[f64], e: f64) -> f64 {
    if let Some(i) = es.iter().position(|&x| x == e) {
        return mus[i];
    }
    let i = es.partition_point(|&x| x < e).clamp(1, es.len() - 1);
    let t = (e.ln() - es[i - 1].ln()) / (es[i].ln() - es[i - 1].ln());
    (mus[i - 1].ln() + t * (mus[i].ln() - mus[i - 1].ln())).exp()
}

impl MaterialTable {
    /// Log-log interpolated coefficient of `m` at `e_kev`.
    pub fn attenuation_at_energy(&self, m: Material, e_kev: f64) -> Result<f64> {
        let (lo, hi) = (self.energies_kev[0], *self.energies_kev.last().expect("non-empty table"));
        if !(e_kev >= lo && e_kev <= hi) {
            return Err(CoreError::Range(format!("energy {e_kev} keV outside table [{lo}, {hi}]")));
        }
        let es = &self.energies_kev;
        Ok(match m {
            Material::Air => 0.0,
            Material::Soft => loglog(es, &self.soft, e_kev),
            Material::Lung => loglog(es, &self.lung, e_kev),
            Material::Bone => loglog(es, &self.bone, e_kev),
            Material::Lesion => {
                LESION_SOFT_FRACTION * loglog(es, &self.soft, e_kev)
                    + (1.0 - LESION_SOFT_FRACTION) * loglog(es, &self.lung, e_kev)
            }
        })
    }

    /// Coefficients indexed by material label at one energy.
    fn lut(&self, e_kev: f64) -> Result<[f32; 5]> {
        let mut out = [0.0f32; 5];
        for (l, slot) in out.iter_mut().enumerate() {
            *slot = self.attenuation_at_energy(Material::from_label(l as u8), e_kev)? as f32;
        }
        Ok(out)
    }
}

/// Discrete X-ray spectrum: energies and normalized weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    bins_kev: Vec<f64>,
    weights: Vec<f64>,
}

impl Spectrum {
    pub fn new(bins_kev: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if bins_kev.is_empty() || bins_kev.len() != weights.len() {
            return Err(CoreError::InvalidArgument(format!(
                "spectrum needs matching non-empty bins and weights, got {} and {}",
                bins_kev.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) || bins_kev.iter().any(|&e| !(e > 0.0)) {
            return Err(CoreError::InvalidArgument("spectrum energies must be positive and weights >= 0".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(CoreError::InvalidArgument(format!("spectrum weights sum to {total}, not 1")));
        }
        Ok(Self { bins_kev, weights })
    }

    pub fn mono(e_kev: f64) -> Self {
        Self::new(vec![e_kev], vec![1.0]).expect("valid single bin")
    }

    pub fn bins_kev(&self) -> &[f64] {
        &self.bins_kev
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.bins_kev.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins_kev.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomConfig {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub n_ribs: usize,
    pub rib_radius_mm: f64,
    pub min_lesions: usize,
    pub max_lesions: usize,
    pub lesion_radius_mm: [f64; 2],
    pub energy_kev: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self::for_geometry(&ConeBeamGeometry::default())
    }
}

impl PhantomConfig {
    pub fn for_geometry(g: &ConeBeamGeometry) -> Self {
        Self {
            shape: g.volume_shape,
            spacing: g.spacing(),
            n_ribs: 10,
            rib_radius_mm: 7.0,
            min_lesions: 1,
            max_lesions: 3,
            lesion_radius_mm: [10.0, 16.0],
            energy_kev: 60.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.contains(&0) || self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(CoreError::InvalidArgument("phantom grid must be non-empty with positive spacing".into()));
        }
        if !(self.rib_radius_mm > 0.0) || self.min_lesions > self.max_lesions {
            return Err(CoreError::InvalidArgument("rib radius must be positive and min_lesions <= max_lesions".into()));
        }
        let [r0, r1] = self.lesion_radius_mm;
        if !(r0 > 0.0 && r1 >= r0) {
            return Err(CoreError::InvalidArgument(format!("lesion radius range [{r0}, {r1}] is invalid")));
        }
        Ok(())
    }

    pub fn write_kv(&self, w: &mut KvWriter) {
        w.kv("n_ribs", self.n_ribs)
            .kv("rib_radius_mm", self.rib_radius_mm)
            .kv("min_lesions", self.min_lesions)
            .kv("max_lesions", self.max_lesions)
            .kv("lesion_radius_min_mm", self.lesion_radius_mm[0])
            .kv("lesion_radius_max_mm", self.lesion_radius_mm[1])
            .kv("energy_kev", self.energy_kev);
    }

    /// Grid comes from the geometry; anatomy keys from the section.
    pub fn read_kv(g: &ConeBeamGeometry, s: &mut SectionReader<'_>) -> Result<Self> {
        let d = Self::for_geometry(g);
        let c = Self {
            n_ribs: s.get_or("n_ribs", d.n_ribs)?,
            rib_radius_mm: s.get_or("rib_radius_mm", d.rib_radius_mm)?,
            min_lesions: s.get_or("min_lesions", d.min_lesions)?,
            max_lesions: s.get_or("max_lesions", d.max_lesions)?,
            lesion_radius_mm: [
                s.get_or("lesion_radius_min_mm", d.lesion_radius_mm[0])?,
                s.get_or("lesion_radius_max_mm", d.lesion_radius_mm[1])?,
            ],
            energy_kev: s.get_or("energy_kev", d.energy_kev)?,
            ..d
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub full: Volume3,
    pub rib_free: Volume3,
    pub rib_mask: Mask3,
    pub lung_mask: Mask3,
    pub lesion_mask: Mask3,
    /// Lung ellipsoids before rib voxels are cut out.
    pub lung_region: Mask3,
    pub labels_full: Vec<u8>,
    pub labels_rib_free: Vec<u8>,
    pub seed: u64,
}

impl Phantom {
    /// Attenuation volumes at every spectrum bin, `(full, rib_free)`.
    pub fn volumes_for(&self, table: &MaterialTable, spectrum: &Spectrum) -> Result<(Vec<Volume3>, Vec<Volume3>)> {
        let (shape, spacing) = (self.full.shape, self.full.spacing);
        let mut full = Vec::with_capacity(spectrum.len());
        let mut free = Vec::with_capacity(spectrum.len());
        for &e in spectrum.bins_kev() {
            let lut = table.lut(e)?;
            full.push(Volume3 { shape, spacing, data: self.labels_full.iter().map(|&l| lut[l as usize]).collect() });
            free.push(Volume3 {
                shape,
                spacing,
                data: self.labels_rib_free.iter().map(|&l| lut[l as usize]).collect(),
            });
        }
        Ok((full, free))
    }
}

pub fn rib_free_of(p: &Phantom) -> Volume3 {
    p.rib_free.clone()
}

struct Lung {
    center: [f64; 3],
    semi: [f64; 3],
}

impl Lung {
    fn level(&self, r: [f64; 3]) -> f64 {
        (0..3).map(|a| ((r[a] - self.center[a]) / self.semi[a]).powi(2)).sum()
    }
}

struct Grid {
    shape: [usize; 3],
    spacing: [f64; 3],
    scale: [f64; 3],
}

impl Grid {
    /// Reference-frame coordinates of a voxel center.
    fn reference(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        let idx = [i, j, k];
        [0, 1, 2].map(|a| axis_center(idx[a], self.shape[a], self.spacing[a]) / self.scale[a])
    }

    /// Voxel index range whose centers may lie within `r` of reference point `c`.
    fn span(&self, c: [f64; 3], r: f64) -> [(usize, usize); 3] {
        [0, 1, 2].map(|a| {
            let n = self.shape[a] as f64;
            let to_idx = |x: f64| (x * self.scale[a] + n * self.spacing[a] / 2.0) / self.spacing[a] - 0.5;
            let lo = to_idx(c[a] - r).ceil().max(0.0);
            let hi = to_idx(c[a] + r).floor().min(n - 1.0);
            if hi < lo {
                (1, 0)
            } else {
                (lo as usize, hi as usize)
            }
        })
    }
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

pub fn generate_phantom(seed: u64, config: &PhantomConfig) -> Result<Phantom> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = config.shape;
    let spacing = config.spacing;
    let n: usize = shape.iter().product();
    let grid = Grid { shape, spacing, scale: [0, 1, 2].map(|a| shape[a] as f64 * spacing[a] / REF_FOV[a]) };

    // Draw every random parameter up front in a fixed order.
    let body = [rng.gen_range(108.0..118.0), rng.gen_range(165.0..180.0)];
    let lung_x = rng.gen_range(-15.0..0.0);
    let lungs: Vec<Lung> = [-1.0, 1.0]
        .iter()
        .map(|&side| Lung {
            center: [lung_x, rng.gen_range(-8.0..0.0), side * 75.0],
            semi: [rng.gen_range(140.0..155.0), rng.gen_range(72.0..80.0), rng.gen_range(52.0..58.0)],
        })
        .collect();
    let rib_ring = [rng.gen_range(96.0..104.0), rng.gen_range(152.0..160.0)];
    let rib_span = 2.0 * rng.gen_range(120.0..140.0);
    let rib_start = rng.gen_range(-145.0..-130.0);
    let ribs: Vec<(f64, f64, f64, f64)> = (0..config.n_ribs)
        .map(|k| {
            let step = if config.n_ribs > 1 { rib_span / (config.n_ribs - 1) as f64 } else { 0.0 };
            let x = rib_start + k as f64 * step + rng.gen_range(-3.0..3.0);
            let slope = rng.gen_range(0.15..0.35);
            let phi_max = rng.gen_range(60.0f64..72.0).to_radians();
            let radius = config.rib_radius_mm * rng.gen_range(0.9..1.1);
            (x, slope, phi_max, radius)
        })
        .collect();
    let spine = [rng.gen_range(82.0..88.0), rng.gen_range(16.0..20.0)];

    let mut labels = vec![Material::Air as u8; n];
    let mut lung_region = vec![0u8; n];
    for i in 0..shape[0] {
        for j in 0..shape[1] {
            for k in 0..shape[2] {
                let r = grid.reference(i, j, k);
                let idx = flat_index(shape, i, j, k);
                if (r[1] / body[0]).powi(2) + (r[2] / body[1]).powi(2) > 1.0 {
                    continue;
                }
                labels[idx] = Material::Soft as u8;
                if lungs.iter().any(|l| l.level(r) <= 1.0) {
                    labels[idx] = Material::Lung as u8;
                    lung_region[idx] = 1;
                } else if (r[1] - spine[0]).powi(2) + r[2].powi(2) <= spine[1] * spine[1] {
                    labels[idx] = Material::Bone as u8;
                }
            }
        }
    }

    let mut rib = vec![0u8; n];
    for &(x0, slope, phi_max, radius) in &ribs {
        for side in [-1.0, 1.0] {
            let arc_len = phi_max * 2.0 * rib_ring[1];
            let samples = (arc_len / 1.0).ceil() as usize + 1;
            for s in 0..samples {
                let phi = -phi_max + 2.0 * phi_max * s as f64 / (samples - 1) as f64;
                let y = rib_ring[0] * phi.sin();
                let c = [x0 + slope * y, y, side * rib_ring[1] * phi.cos()];
                let sp = grid.span(c, radius);
                for i in sp[0].0..=sp[0].1 {
                    for j in sp[1].0..=sp[1].1 {
                        for k in sp[2].0..=sp[2].1 {
                            if dist2(grid.reference(i, j, k), c) <= radius * radius {
                                let idx = flat_index(shape, i, j, k);
                                if labels[idx] != Material::Air as u8 {
                                    rib[idx] = 1;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    let lung: Vec<u8> = (0..n).map(|i| (lung_region[i] == 1 && rib[i] == 0) as u8).collect();
    let n_lesions = rng.gen_range(config.min_lesions..=config.max_lesions);
    let mut lesion = vec![0u8; n];
    for li in 0..n_lesions {
        let mut placed = false;
        for _ in 0..1000 {
            let radius = rng.gen_range(config.lesion_radius_mm[0]..=config.lesion_radius_mm[1]);
            let l = &lungs[rng.gen_range(0..2)];
            let c = [0, 1, 2].map(|a| l.center[a] + l.semi[a] * rng.gen_range(-1.0..1.0));
            let sp = grid.span(c, radius);
            let mut voxels = Vec::new();
            let mut ok = true;
            'scan: for i in sp[0].0..=sp[0].1 {
                for j in sp[1].0..=sp[1].1 {
                    for k in sp[2].0..=sp[2].1 {
                        if dist2(grid.reference(i, j, k), c) <= radius * radius {
                            let idx = flat_index(shape, i, j, k);
                            if lung[idx] == 0 || lesion[idx] == 1 {
                                ok = false;
                                break 'scan;
                            }
                            voxels.push(idx);
                        }
                    }
                }
            }
            // Require the sphere to be resolved and surrounded by lung.
            let margin_ok = ok && {
                let sp = grid.span(c, radius * 1.5);
                (sp[0].0..=sp[0].1).all(|i| {
                    (sp[1].0..=sp[1].1).all(|j| {
                        (sp[2].0..=sp[2].1).all(|k| {
                            dist2(grid.reference(i, j, k), c) > (radius * 1.5).powi(2)
                                || lung_region[flat_index(shape, i, j, k)] == 1
                        })
                    })
                })
            };
            if margin_ok && !voxels.is_empty() {
                for idx in voxels {
                    lesion[idx] = 1;
                }
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(CoreError::LesionPlacement(format!(
                "seed {seed}: lesion {} of {n_lesions} does not fit inside the lungs",
                li + 1
            )));
        }
    }

    let mut labels_full = labels.clone();
    let mut labels_rib_free = labels;
    for i in 0..n {
        if lesion[i] == 1 {
            labels_full[i] = Material::Lesion as u8;
            labels_rib_free[i] = Material::Lesion as u8;
        }
        if rib[i] == 1 {
            labels_full[i] = Material::Bone as u8;
            labels_rib_free[i] = Material::Soft as u8;
        }
    }

    let lut = MaterialTable::default().lut(config.energy_kev)?;
    let to_vol = |labels: &[u8]| Volume3 { shape, spacing, data: labels.iter().map(|&l| lut[l as usize]).collect() };
    let mask = |data: Vec<u8>| Mask3 { shape, spacing, data };
    Ok(Phantom {
        full: to_vol(&labels_full),
        rib_free: to_vol(&labels_rib_free),
        rib_mask: mask(rib),
        lung_mask: mask(lung),
        lesion_mask: mask(lesion),
        lung_region: mask(lung_region),
        labels_full,
        labels_rib_free,
        seed,
    })
}

/// Ball of attenuation `mu` centered at `center_mm` with partial-volume
/// edges: each voxel holds `mu` times the fraction of its `sub^3` sub-voxel
/// centers inside the ball.
pub fn sphere_volume(
    shape: [usize; 3],
    spacing: [f64; 3],
    center_mm: [f64; 3],
    radius_mm: f64,
    mu: f32,
    sub: usize,
) -> Volume3 {
    let sub = sub.max(1);
    let mut v = Volume3::zeros(shape, spacing);
    let r2 = radius_mm * radius_mm;
    let reach = radius_mm + spacing.iter().cloned().fold(0.0, f64::max);
    for i in 0..shape[0] {
        for j in 0..shape[1] {
            for k in 0..shape[2] {
                let c = v.center(i, j, k);
                if dist2(c, center_mm) > reach * reach {
                    continue;
                }
                let mut inside = 0usize;
                for a in 0..sub {
                    for b in 0..sub {
                        for d in 0..sub {
                            let off = |q: usize, ax: usize| ((q as f64 + 0.5) / sub as f64 - 0.5) * spacing[ax];
                            let p = [c[0] + off(a, 0), c[1] + off(b, 1), c[2] + off(d, 2)];
                            if dist2(p, center_mm) <= r2 {
                                inside += 1;
                            }
                        }
                    }
                }
                v.data[flat_index(shape, i, j, k)] = mu * inside as f32 / (sub * sub * sub) as f32;
            }
        }
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_nodes_are_exact_and_decreasing() {
        let t = MaterialTable::default();
        for m in [Material::Soft, Material::Lung, Material::Bone, Material::Lesion] {
            let mut last = f64::INFINITY;
            for e in (30..=120).map(f64::from) {
                let mu = t.attenuation_at_energy(m, e).unwrap();
                assert!(mu < last, "{m:?} at {e}");
                last = mu;
            }
        }
        assert_eq!(t.attenuation_at_energy(Material::Soft, 60.0).unwrap(), 0.02);
        assert_eq!(t.attenuation_at_energy(Material::Bone, 60.0).unwrap(), 0.048);
        assert_eq!(t.attenuation_at_energy(Material::Lung, 80.0).unwrap(), 0.00356);
        assert!(t.attenuation_at_energy(Material::Soft, 20.0).is_err());
        assert!(t.attenuation_at_energy(Material::Soft, 150.0).is_err());
    }

    #[test]
    fn loglog_interpolates_power_laws_exactly() {
        // mu = 3 E^-2 is a straight line in log-log space.
        let es = [10.0, 20.0, 40.0];
        let mus = es.map(|e: f64| 3.0 * e.powi(-2));
        let v = loglog(&es, &mus, 28.0);
        assert!((v - 3.0 * 28.0f64.powi(-2)).abs() < 1e-15);
    }

    #[test]
    fn spectrum_validation() {
        assert!(Spectrum::new(vec![60.0, 80.0], vec![0.5, 0.5]).is_ok());
        assert!(Spectrum::new(vec![60.0], vec![0.9]).is_err());
        assert!(Spectrum::new(vec![60.0, 80.0], vec![1.5, -0.5]).is_err());
        assert!(Spectrum::new(vec![], vec![]).is_err());
    }

    #[test]
    fn lesions_that_cannot_fit_are_reported() {
        let c = PhantomConfig { lesion_radius_mm: [90.0, 95.0], ..Default::default() };
        assert!(matches!(generate_phantom(3, &c), Err(CoreError::LesionPlacement(_))));
    }
}
