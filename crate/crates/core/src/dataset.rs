//! Paired training cases: projections and reconstructions of each phantom
//! with and without ribs, plus their differences.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::{KvDoc, KvWriter, SectionReader};
use crate::error::{CoreError, Result};
use crate::geometry::ConeBeamGeometry;
use crate::io::{load_mask, load_projections, load_volume, save_mask, save_projections, save_volume};
use crate::phantom::{generate_phantom, MaterialTable, Phantom, PhantomConfig, Spectrum};
use crate::projector::{project_all, ProjectionSet, ProjectorOptions};
use crate::recon::{fbp, BackprojectOptions, FilterKind, RampFilterSpec};
use crate::volume::{Mask3, Volume3};

/// Everything between a phantom and its reconstructions.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationSettings {
    pub table: MaterialTable,
    pub spectrum: Spectrum,
    pub projector: ProjectorOptions,
    pub filter: RampFilterSpec,
    pub backproject: BackprojectOptions,
}

impl Default for SimulationSettings {
    fn default() -> Self {
        Self {
            table: MaterialTable::default(),
            spectrum: Spectrum::mono(60.0),
            projector: ProjectorOptions::default(),
            filter: RampFilterSpec::default(),
            backproject: BackprojectOptions::default(),
        }
    }
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn split_list<T: std::str::FromStr>(s: &str, key: &str) -> Result<Vec<T>> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| t.trim().parse().map_err(|_| CoreError::Config(format!("{key}: cannot parse {t:?}"))))
        .collect()
}

impl SimulationSettings {
    pub fn write_kv(&self, w: &mut KvWriter) {
        w.kv("spectrum_kev", join(self.spectrum.bins_kev()))
            .kv("spectrum_weights", join(self.spectrum.weights()))
            .kv("step_mm", self.projector.step_mm.unwrap_or(0.0))
            .kv("supersample", self.projector.supersample)
            .kv("filter", self.filter.kind)
            .kv("padded_len", self.filter.padded_len.unwrap_or(0))
            .kv("distance_weight", self.backproject.distance_weight);
    }

    /// `step_mm = 0` and `padded_len = 0` select the automatic values.
    pub fn read_kv(s: &mut SectionReader<'_>) -> Result<Self> {
        let d = Self::default();
        let spectrum = match (s.raw("spectrum_kev"), s.raw("spectrum_weights")) {
            (None, None) => d.spectrum,
            (Some(k), None) => {
                let bins: Vec<f64> = split_list(k, "spectrum_kev")?;
                let n = bins.len().max(1);
                Spectrum::new(bins, vec![1.0 / n as f64; n])?
            }
            (Some(k), Some(w)) => Spectrum::new(split_list(k, "spectrum_kev")?, split_list(w, "spectrum_weights")?)?,
            (None, Some(_)) => return Err(CoreError::Config("spectrum_weights given without spectrum_kev".into())),
        };
        let step: f64 = s.get_or("step_mm", 0.0)?;
        let padded: usize = s.get_or("padded_len", 0)?;
        Ok(Self {
            table: d.table,
            spectrum,
            projector: ProjectorOptions {
                step_mm: (step > 0.0).then_some(step),
                supersample: s.get_or("supersample", 1usize)?.max(1),
            },
            filter: RampFilterSpec {
                kind: s.get_or("filter", FilterKind::RamLak)?,
                padded_len: (padded > 0).then_some(padded),
            },
            backproject: BackprojectOptions { distance_weight: s.get_or("distance_weight", true)? },
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub seed: u64,
    pub proj_full: ProjectionSet,
    pub proj_ribfree: ProjectionSet,
    pub proj_delta: ProjectionSet,
    pub vol_full: Volume3,
    pub vol_ribfree: Volume3,
    /// `vol_full - vol_ribfree`.
    pub vol_delta: Volume3,
    pub lung_mask: Mask3,
    pub lesion_mask: Mask3,
    /// max |vol_delta - fbp(proj_delta)|, recorded at simulation time.
    pub linearity_residual: f32,
}

impl Case {
    pub fn geometry(&self) -> &ConeBeamGeometry {
        &self.proj_full.geometry
    }
}

pub fn simulate_case(phantom: &Phantom, geom: &ConeBeamGeometry, settings: &SimulationSettings) -> Result<Case> {
    let (full_bins, free_bins) = phantom.volumes_for(&settings.table, &settings.spectrum)?;
    let proj_full = project_all(&full_bins, geom, &settings.spectrum, &settings.projector)?;
    let proj_ribfree = project_all(&free_bins, geom, &settings.spectrum, &settings.projector)?;
    let proj_delta = proj_full.sub(&proj_ribfree)?;
    let vol_full = fbp(&proj_full, &settings.filter, &settings.backproject)?;
    let vol_ribfree = fbp(&proj_ribfree, &settings.filter, &settings.backproject)?;
    let vol_delta = vol_full.sub(&vol_ribfree)?;
    let direct = fbp(&proj_delta, &settings.filter, &settings.backproject)?;
    let linearity_residual = vol_delta.max_abs_diff(&direct)?;
    Ok(Case {
        seed: phantom.seed,
        proj_full,
        proj_ribfree,
        proj_delta,
        vol_full,
        vol_ribfree,
        vol_delta,
        lung_mask: phantom.lung_mask.clone(),
        lesion_mask: phantom.lesion_mask.clone(),
        linearity_residual,
    })
}

/// Min/max of the training projections and volumes (full and rib-free).
/// Inputs map to `(x - min) / range`; rib components (differences) map to
/// `d / range` so that the offset cancels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub proj_min: f32,
    pub proj_max: f32,
    pub vol_min: f32,
    pub vol_max: f32,
}

fn nonzero(r: f32) -> f32 {
    if r > 0.0 {
        r
    } else {
        1.0
    }
}

impl NormStats {
    pub fn from_cases(cases: &[Case]) -> Result<Self> {
        if cases.is_empty() {
            return Err(CoreError::InvalidArgument("normalization needs at least one case".into()));
        }
        let fold = |acc: (f32, f32), (lo, hi): (f32, f32)| (acc.0.min(lo), acc.1.max(hi));
        let mut p = (f32::INFINITY, f32::NEG_INFINITY);
        let mut v = p;
        for c in cases {
            p = fold(fold(p, c.proj_full.min_max()), c.proj_ribfree.min_max());
            v = fold(fold(v, c.vol_full.min_max()), c.vol_ribfree.min_max());
        }
        Ok(Self { proj_min: p.0, proj_max: p.1, vol_min: v.0, vol_max: v.1 })
    }

    pub fn proj_range(&self) -> f32 {
        nonzero(self.proj_max - self.proj_min)
    }

    pub fn vol_range(&self) -> f32 {
        nonzero(self.vol_max - self.vol_min)
    }

    pub fn norm_proj(&self, x: f32) -> f32 {
        (x - self.proj_min) / self.proj_range()
    }

    pub fn norm_vol(&self, x: f32) -> f32 {
        (x - self.vol_min) / self.vol_range()
    }

    pub fn write_kv(&self, w: &mut KvWriter) {
        w.kv("proj_min", self.proj_min).kv("proj_max", self.proj_max).kv("vol_min", self.vol_min).kv("vol_max", self.vol_max);
    }

    pub fn read_kv(s: &mut SectionReader<'_>) -> Result<Self> {
        Ok(Self {
            proj_min: s.require("proj_min")?,
            proj_max: s.require("proj_max")?,
            vol_min: s.require("vol_min")?,
            vol_max: s.require("vol_max")?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub geometry: ConeBeamGeometry,
    pub phantom: PhantomConfig,
    pub settings: SimulationSettings,
    pub train: Vec<Case>,
    pub test: Vec<Case>,
    pub stats: NormStats,
}

pub fn simulate_seed(seed: u64, geom: &ConeBeamGeometry, config: &PhantomConfig, settings: &SimulationSettings) -> Result<Case> {
    let run = || simulate_case(&generate_phantom(seed, config)?, geom, settings);
    run().map_err(|e| e.context(format!("phantom seed {seed}")))
}

/// Seeds `base_seed ..` in order; the first `n_train` go to training.
pub fn build_dataset(
    n_train: usize,
    n_test: usize,
    base_seed: u64,
    geom: &ConeBeamGeometry,
    config: &PhantomConfig,
    settings: &SimulationSettings,
) -> Result<DatasetSplit> {
    if n_train == 0 || n_test == 0 {
        return Err(CoreError::InvalidArgument("need at least one training and one test case".into()));
    }
    let seeds: Vec<u64> = (0..(n_train + n_test) as u64).map(|i| base_seed + i).collect();
    let mut cases = seeds.par_iter().map(|&s| simulate_seed(s, geom, config, settings)).collect::<Result<Vec<_>>>()?;
    let test = cases.split_off(n_train);
    let stats = NormStats::from_cases(&cases)?;
    Ok(DatasetSplit { geometry: geom.clone(), phantom: config.clone(), settings: settings.clone(), train: cases, test, stats })
}

const CASE_FILES: [&str; 8] = [
    "proj_full.prj",
    "proj_ribfree.prj",
    "proj_delta.prj",
    "vol_full.vol",
    "vol_ribfree.vol",
    "vol_delta.vol",
    "lung_mask.msk",
    "lesion_mask.msk",
];

pub fn case_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("case_{seed}"))
}

pub fn save_case(dir: &Path, case: &Case, settings: &SimulationSettings) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_projections(&dir.join(CASE_FILES[0]), &case.proj_full)?;
    save_projections(&dir.join(CASE_FILES[1]), &case.proj_ribfree)?;
    save_projections(&dir.join(CASE_FILES[2]), &case.proj_delta)?;
    save_volume(&dir.join(CASE_FILES[3]), &case.vol_full)?;
    save_volume(&dir.join(CASE_FILES[4]), &case.vol_ribfree)?;
    save_volume(&dir.join(CASE_FILES[5]), &case.vol_delta)?;
    save_mask(&dir.join(CASE_FILES[6]), &case.lung_mask)?;
    save_mask(&dir.join(CASE_FILES[7]), &case.lesion_mask)?;
    let mut w = KvWriter::new();
    w.comment("simulated case");
    w.section("case").kv("seed", case.seed).kv("linearity_residual", case.linearity_residual).kv("files", CASE_FILES.join(","));
    w.section("geometry");
    case.geometry().write_kv(&mut w);
    w.section("simulation");
    settings.write_kv(&mut w);
    fs::write(dir.join("manifest.txt"), w.finish())?;
    Ok(())
}

pub fn load_case(dir: &Path, geom: &ConeBeamGeometry) -> Result<Case> {
    let run = || -> Result<Case> {
        let text = fs::read_to_string(dir.join("manifest.txt"))?;
        let doc = KvDoc::parse(&text)?;
        let mut c = doc.section("case");
        let seed: u64 = c.require("seed")?;
        let linearity_residual: f32 = c.require("linearity_residual")?;
        let stored = ConeBeamGeometry::read_kv(&mut doc.section("geometry"))?;
        if &stored != geom {
            return Err(CoreError::Geometry("case was simulated with a different geometry".into()));
        }
        Ok(Case {
            seed,
            proj_full: load_projections(&dir.join(CASE_FILES[0]), geom)?,
            proj_ribfree: load_projections(&dir.join(CASE_FILES[1]), geom)?,
            proj_delta: load_projections(&dir.join(CASE_FILES[2]), geom)?,
            vol_full: load_volume(&dir.join(CASE_FILES[3]))?,
            vol_ribfree: load_volume(&dir.join(CASE_FILES[4]))?,
            vol_delta: load_volume(&dir.join(CASE_FILES[5]))?,
            lung_mask: load_mask(&dir.join(CASE_FILES[6]))?,
            lesion_mask: load_mask(&dir.join(CASE_FILES[7]))?,
            linearity_residual,
        })
    };
    run().map_err(|e| e.context(format!("loading case {}", dir.display())))
}

/// Writes `dataset.txt` plus one `case_<seed>` directory per case.
pub fn save_split(root: &Path, split: &DatasetSplit) -> Result<()> {
    fs::create_dir_all(root)?;
    for c in split.train.iter().chain(&split.test) {
        save_case(&case_dir(root, c.seed), c, &split.settings)?;
    }
    let seeds = |cs: &[Case]| join(&cs.iter().map(|c| c.seed).collect::<Vec<_>>());
    let mut w = KvWriter::new();
    w.comment("dataset split; normalization stats come from the training cases only");
    w.section("split").kv("train_seeds", seeds(&split.train)).kv("test_seeds", seeds(&split.test));
    w.section("stats");
    split.stats.write_kv(&mut w);
    w.section("geometry");
    split.geometry.write_kv(&mut w);
    w.section("phantom");
    split.phantom.write_kv(&mut w);
    w.section("simulation");
    split.settings.write_kv(&mut w);
    fs::write(root.join("dataset.txt"), w.finish())?;
    Ok(())
}

pub fn load_split(root: &Path) -> Result<DatasetSplit> {
    let path = root.join("dataset.txt");
    let text = fs::read_to_string(&path).map_err(|e| CoreError::from(e).context(format!("reading {}", path.display())))?;
    let doc = KvDoc::parse(&text)?;
    doc.check_sections(&["", "split", "stats", "geometry", "phantom", "simulation"])?;
    let geometry = ConeBeamGeometry::read_kv(&mut doc.section("geometry"))?;
    let phantom = PhantomConfig::read_kv(&geometry, &mut doc.section("phantom"))?;
    let settings = SimulationSettings::read_kv(&mut doc.section("simulation"))?;
    let stats = NormStats::read_kv(&mut doc.section("stats"))?;
    let mut s = doc.section("split");
    let train_seeds: Vec<u64> = split_list(s.require::<String>("train_seeds")?.as_str(), "train_seeds")?;
    let test_seeds: Vec<u64> = split_list(s.require::<String>("test_seeds")?.as_str(), "test_seeds")?;
    let load = |seeds: &[u64]| seeds.iter().map(|&sd| load_case(&case_dir(root, sd), &geometry)).collect::<Result<Vec<_>>>();
    Ok(DatasetSplit { train: load(&train_seeds)?, test: load(&test_seeds)?, geometry, phantom, settings, stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::KvDoc;

    #[test]
    fn settings_round_trip() {
        let s = SimulationSettings {
            spectrum: Spectrum::new(vec![50.0, 70.0], vec![0.25, 0.75]).unwrap(),
            projector: ProjectorOptions { step_mm: Some(0.75), supersample: 2 },
            filter: RampFilterSpec { kind: FilterKind::Hann, padded_len: Some(256) },
            backproject: BackprojectOptions { distance_weight: false },
            ..Default::default()
        };
        let mut w = KvWriter::new();
        w.section("simulation");
        s.write_kv(&mut w);
        let doc = KvDoc::parse(&w.finish()).unwrap();
        let mut r = doc.section("simulation");
        assert_eq!(SimulationSettings::read_kv(&mut r).unwrap(), s);
        r.finish().unwrap();
        let empty = KvDoc::parse("").unwrap();
        assert_eq!(SimulationSettings::read_kv(&mut empty.section("simulation")).unwrap(), SimulationSettings::default());
    }

    #[test]
    fn stats_normalize_to_unit_interval() {
        let st = NormStats { proj_min: 1.0, proj_max: 3.0, vol_min: -1.0, vol_max: 1.0 };
        assert_eq!(st.norm_proj(1.0), 0.0);
        assert_eq!(st.norm_proj(3.0), 1.0);
        assert_eq!(st.norm_vol(0.0), 0.5);
        let flat = NormStats { proj_min: 2.0, proj_max: 2.0, vol_min: 0.0, vol_max: 0.0 };
        assert_eq!(flat.proj_range(), 1.0);
    }
}
