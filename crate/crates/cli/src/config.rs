//! Run configuration: one `key = value` file with fixed sections.
//!
//! Every key is optional and falls back to the desk-scale default. Unknown
//! sections and keys are errors.

use std::fs;
use std::path::{Path, PathBuf};

use tomorib_core::config::{KvDoc, KvWriter, SectionReader};
use tomorib_core::dataset::SimulationSettings;
use tomorib_core::geometry::{make_angle_set, ConeBeamGeometry};
use tomorib_core::io::Plane;
use tomorib_core::phantom::PhantomConfig;
use tomorib_core::suppression::{Lambdas, NetConfig, Stage, TrainConfig};
use tomorib_core::{CoreError, Result};

pub const SECTIONS: [&str; 8] = ["geometry", "phantom", "simulation", "dataset", "network", "training", "export", "output"];

/// Sweep presets: total angle in degrees and the matching view count.
pub const ALPHA_PRESETS: [(u32, usize); 2] = [(15, 29), (30, 59)];

pub fn alpha_preset(alpha: u32) -> Result<(f64, usize)> {
    ALPHA_PRESETS
        .iter()
        .find(|(a, _)| *a == alpha)
        .map(|&(a, n)| (a as f64, n))
        .ok_or_else(|| CoreError::Config(format!("alpha must be 15 or 30, got {alpha}")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub base_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { n_train: 8, n_test: 2, base_seed: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub base: TrainConfig,
    /// Step count per stage, indexed like `Stage::ALL`.
    pub steps: [usize; 3],
    pub lambdas: Lambdas,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let base = TrainConfig::default();
        Self { steps: [base.steps; 3], base, lambdas: Lambdas::default() }
    }
}

impl TrainingConfig {
    pub fn for_stage(&self, s: Stage) -> TrainConfig {
        let k = Stage::ALL.iter().position(|&x| x == s).unwrap_or(0);
        TrainConfig { steps: self.steps[k], ..self.base.clone() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExportConfig {
    pub png: bool,
    pub plane: Plane,
    /// Slice index along the plane's fixed axis; `None` is the middle.
    pub slice: Option<usize>,
}

impl Default for ExportConfig {
    fn default() -> Self {
        Self { png: true, plane: Plane::Coronal, slice: None }
    }
}

pub fn plane_name(p: Plane) -> &'static str {
    match p {
        Plane::Axial => "axial",
        Plane::Coronal => "coronal",
        Plane::Sagittal => "sagittal",
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub geometry: ConeBeamGeometry,
    pub phantom: PhantomConfig,
    pub simulation: SimulationSettings,
    pub dataset: DatasetConfig,
    pub network: NetConfig,
    pub training: TrainingConfig,
    pub export: ExportConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let geometry = ConeBeamGeometry::default();
        Self {
            phantom: PhantomConfig::for_geometry(&geometry),
            geometry,
            simulation: SimulationSettings::default(),
            dataset: DatasetConfig::default(),
            network: NetConfig::default(),
            training: TrainingConfig::default(),
            export: ExportConfig::default(),
            out_dir: PathBuf::from("out"),
        }
    }
}

fn triple(s: &str, key: &str) -> Result<[usize; 3]> {
    let v: Vec<usize> = s
        .split(',')
        .map(|t| t.trim().parse().map_err(|_| CoreError::Config(format!("[training] {key}: cannot parse {s:?}"))))
        .collect::<Result<_>>()?;
    v.try_into().map_err(|_| CoreError::Config(format!("[training] {key}: expected three comma-separated sizes")))
}

fn read_section<T>(doc: &KvDoc, name: &str, f: impl FnOnce(&mut SectionReader<'_>) -> Result<T>) -> Result<T> {
    let mut s = doc.section(name);
    let v = f(&mut s)?;
    s.finish()?;
    Ok(v)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let doc = KvDoc::parse(text)?;
        let mut known = vec![""];
        known.extend(SECTIONS);
        doc.check_sections(&known)?;
        read_section(&doc, "", |_| Ok(()))?;
        let geometry = read_section(&doc, "geometry", ConeBeamGeometry::read_kv)?;
        let phantom = read_section(&doc, "phantom", |s| PhantomConfig::read_kv(&geometry, s))?;
        let simulation = read_section(&doc, "simulation", SimulationSettings::read_kv)?;
        let dataset = read_section(&doc, "dataset", |s| {
            let d = DatasetConfig::default();
            Ok(DatasetConfig {
                n_train: s.get_or("n_train", d.n_train)?,
                n_test: s.get_or("n_test", d.n_test)?,
                base_seed: s.get_or("base_seed", d.base_seed)?,
            })
        })?;
        let network = read_section(&doc, "network", NetConfig::read_kv)?;
        let training = read_section(&doc, "training", |s| {
            let d = TrainConfig::default();
            let steps = s.get_or("steps", d.steps)?;
            let patch = match s.raw("patch_3d") {
                Some(p) => triple(p, "patch_3d")?,
                None => d.patch_3d,
            };
            let base = TrainConfig {
                lr: s.get_or("lr", d.lr)?,
                steps,
                batch_2d: s.get_or("batch_2d", d.batch_2d)?,
                patch_3d: patch,
                seed: s.get_or("seed", d.seed)?,
                log_every: s.get_or("log_every", d.log_every)?,
            };
            base.validate()?;
            let l = Lambdas::default();
            Ok(TrainingConfig {
                steps: [s.get_or("steps_m2d", steps)?, s.get_or("steps_m3d", steps)?, s.get_or("steps_f", steps)?],
                lambdas: Lambdas {
                    m2d: s.get_or("lambda_m2d", l.m2d)?,
                    m3d: s.get_or("lambda_m3d", l.m3d)?,
                    f: s.get_or("lambda_f", l.f)?,
                },
                base,
            })
        })?;
        let export = read_section(&doc, "export", |s| {
            let d = ExportConfig::default();
            let slice: i64 = s.get_or("slice", -1)?;
            Ok(ExportConfig {
                png: s.get_or("png", d.png)?,
                plane: s.get_or("plane", d.plane)?,
                slice: usize::try_from(slice).ok(),
            })
        })?;
        let out_dir = read_section(&doc, "output", |s| Ok(PathBuf::from(s.get_or("dir", String::from("out"))?)))?;
        Ok(Self { geometry, phantom, simulation, dataset, network, training, export, out_dir })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CoreError::from(e).context(format!("reading {}", path.display())))?;
        Self::parse(&text).map_err(|e| e.context(format!("in {}", path.display())))
    }

    /// Same configuration with a preset sweep.
    pub fn with_alpha(&self, alpha: u32) -> Result<Self> {
        let (a, n) = alpha_preset(alpha)?;
        Ok(Self { geometry: self.geometry.with_angles(make_angle_set(a, n)?), ..self.clone() })
    }

    /// Fully resolved configuration in the same format [`parse`](Self::parse) reads.
    pub fn write_kv(&self, w: &mut KvWriter) {
        w.section("geometry");
        self.geometry.write_kv(w);
        w.section("phantom");
        self.phantom.write_kv(w);
        w.section("simulation");
        self.simulation.write_kv(w);
        w.section("dataset")
            .kv("n_train", self.dataset.n_train)
            .kv("n_test", self.dataset.n_test)
            .kv("base_seed", self.dataset.base_seed);
        w.section("network");
        self.network.write_kv(w);
        let t = &self.training;
        let p = t.base.patch_3d;
        w.section("training")
            .kv("lr", t.base.lr)
            .kv("steps", t.base.steps)
            .kv("steps_m2d", t.steps[0])
            .kv("steps_m3d", t.steps[1])
            .kv("steps_f", t.steps[2])
            .kv("batch_2d", t.base.batch_2d)
            .kv("patch_3d", format!("{},{},{}", p[0], p[1], p[2]))
            .kv("seed", t.base.seed)
            .kv("log_every", t.base.log_every)
            .kv("lambda_m2d", t.lambdas.m2d)
            .kv("lambda_m3d", t.lambdas.m3d)
            .kv("lambda_f", t.lambdas.f);
        w.section("export")
            .kv("png", self.export.png)
            .kv("plane", plane_name(self.export.plane))
            .kv("slice", self.export.slice.map_or(-1, |s| s as i64));
        w.section("output").kv("dir", self.out_dir.display());
    }

    pub fn to_text(&self) -> String {
        let mut w = KvWriter::new();
        self.write_kv(&mut w);
        w.finish()
    }
}
