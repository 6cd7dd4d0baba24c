//! Rib suppression with three networks.
//!
//! * `m2d` predicts the rib component of each projection, with one set of
//!   weights for every view angle.
//! * `m3d` predicts the rib-artifact volume directly from the
//!   reconstruction.
//! * `f` fuses the reconstruction of the `m2d` predictions (channel 0) with
//!   the `m3d` prediction (channel 1).
//!
//! Networks see min-max normalized inputs (train-split stats) and predict
//! rib components divided by the matching range. All public prediction
//! functions take and return physical units (projection line integrals,
//! mm^-1 volumes).
//!
//! Training is staged: `m2d` and `m3d` independently, then `f` with both
//! frozen. Each step is single-threaded; full-set loss evaluation and
//! inference fan out over views or cases.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use tomorib_nn::{adam_step, AdamState, Checkpoint, ConvDims, ConvNetSpec, ResidualCnn, Tape, Tensor};

use crate::config::{KvDoc, KvWriter, SectionReader};
use crate::dataset::{Case, NormStats, SimulationSettings};
use crate::error::{CoreError, Result};
use crate::projector::{Projection2D, ProjectionSet};
use crate::recon::fbp;
use crate::volume::Volume3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    M2d,
    M3d,
    F,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::M2d, Stage::M3d, Stage::F];

    fn index(self) -> usize {
        match self {
            Stage::M2d => 0,
            Stage::M3d => 1,
            Stage::F => 2,
        }
    }

    pub fn checkpoint_name(self) -> String {
        format!("{self}.ckpt")
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::M2d => "m2d",
            Stage::M3d => "m3d",
            Stage::F => "f",
        })
    }
}

impl FromStr for Stage {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "m2d" => Ok(Stage::M2d),
            "m3d" => Ok(Stage::M3d),
            "f" => Ok(Stage::F),
            _ => Err(CoreError::Config(format!("stage must be m2d, m3d or f, got {s:?}"))),
        }
    }
}

/// Loss weights per stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lambdas {
    pub m2d: f64,
    pub m3d: f64,
    pub f: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Self { m2d: 20.0, m3d: 50.0, f: 50.0 }
    }
}

impl Lambdas {
    pub fn get(&self, s: Stage) -> f64 {
        match s {
            Stage::M2d => self.m2d,
            Stage::M3d => self.m3d,
            Stage::F => self.f,
        }
    }
}

/// Shape of the three networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetConfig {
    pub blocks: usize,
    pub channels: usize,
    pub pool_level: bool,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { blocks: 4, channels: 16, pool_level: false, seed: 0 }
    }
}

impl NetConfig {
    pub fn spec(&self, stage: Stage) -> ConvNetSpec {
        let (dims, cin) = match stage {
            Stage::M2d => (ConvDims::Two, 1),
            Stage::M3d => (ConvDims::Three, 1),
            Stage::F => (ConvDims::Three, 2),
        };
        ConvNetSpec { pool_level: self.pool_level, ..ConvNetSpec::uniform(dims, cin, 1, self.blocks, self.channels) }
    }

    pub fn write_kv(&self, w: &mut KvWriter) {
        w.kv("blocks", self.blocks).kv("channels", self.channels).kv("pool_level", self.pool_level).kv("seed", self.seed);
    }

    pub fn read_kv(s: &mut SectionReader<'_>) -> Result<Self> {
        let d = Self::default();
        let c = Self {
            blocks: s.get_or("blocks", d.blocks)?,
            channels: s.get_or("channels", d.channels)?,
            pool_level: s.get_or("pool_level", d.pool_level)?,
            seed: s.get_or("seed", d.seed)?,
        };
        if c.blocks == 0 || c.channels == 0 {
            return Err(CoreError::Config("network needs at least one block and one channel".into()));
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    /// Views per 2D step.
    pub batch_2d: usize,
    /// Random crop size for 3D steps, clamped to the volume.
    pub patch_3d: [usize; 3],
    pub seed: u64,
    /// Steps per averaged entry of the loss curve.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 1e-4, steps: 200, batch_2d: 4, patch_3d: [32, 32, 32], seed: 0, log_every: 10 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(CoreError::Config(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        if self.batch_2d == 0 || self.patch_3d.contains(&0) || self.log_every == 0 {
            return Err(CoreError::Config("batch, patch and log interval must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub stage: Stage,
    pub steps: usize,
    /// Weighted L1 over the whole training set before the first step.
    pub initial_loss: f64,
    /// Same, after the last step.
    pub final_loss: f64,
    /// Mean minibatch loss per `log_every` steps.
    pub curve: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripleNet {
    pub m2d: ResidualCnn<f32>,
    pub m3d: ResidualCnn<f32>,
    pub f: ResidualCnn<f32>,
    pub net_config: NetConfig,
    pub lambdas: Lambdas,
    pub stats: NormStats,
    /// Reconstruction settings for the 2D branch.
    pub settings: SimulationSettings,
    /// Optimizer step count per stage; zero means never trained or loaded.
    pub steps: [u64; 3],
    pub ready: [bool; 3],
    pub adam: [Option<AdamState<f32>>; 3],
}

fn nn<T>(r: tomorib_nn::Result<T>) -> Result<T> {
    r.map_err(CoreError::from)
}

fn volume_tensor(vols: &[&[f32]], shape: [usize; 3]) -> Result<Tensor<f32>> {
    let data: Vec<f32> = vols.iter().flat_map(|v| v.iter().copied()).collect();
    nn(Tensor::new(&[1, vols.len(), shape[0], shape[1], shape[2]], data))
}

/// Crop `size` voxels starting at `origin` from each channel, channel-major.
fn crop(vols: &[&[f32]], shape: [usize; 3], origin: [usize; 3], size: [usize; 3]) -> Vec<f32> {
    let mut out = Vec::with_capacity(vols.len() * size.iter().product::<usize>());
    for v in vols {
        for i in origin[0]..origin[0] + size[0] {
            for j in origin[1]..origin[1] + size[1] {
                let row = (i * shape[1] + j) * shape[2];
                out.extend_from_slice(&v[row + origin[2]..row + origin[2] + size[2]]);
            }
        }
    }
    out
}

fn mean_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum::<f64>() / a.len() as f64
}

/// Input/target pairs for one 3D stage, all in network units.
struct VolumePairs {
    shape: [usize; 3],
    inputs: Vec<Vec<Vec<f32>>>,
    targets: Vec<Vec<f32>>,
}

impl VolumePairs {
    fn sample(&self, rng: &mut ChaCha8Rng, patch: [usize; 3]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let c = rng.gen_range(0..self.inputs.len());
        let size = [0, 1, 2].map(|a| patch[a].min(self.shape[a]));
        let origin = [0, 1, 2].map(|a| rng.gen_range(0..=self.shape[a] - size[a]));
        let chans: Vec<&[f32]> = self.inputs[c].iter().map(Vec::as_slice).collect();
        let x = crop(&chans, self.shape, origin, size);
        let y = crop(&[&self.targets[c]], self.shape, origin, size);
        Ok((
            nn(Tensor::new(&[1, chans.len(), size[0], size[1], size[2]], x))?,
            nn(Tensor::new(&[1, 1, size[0], size[1], size[2]], y))?,
        ))
    }

    /// `lambda * mean |net(x) - y|` over every voxel of every case.
    fn loss(&self, net: &ResidualCnn<f32>, lambda: f64) -> Result<f64> {
        let per_case = (0..self.inputs.len())
            .into_par_iter()
            .map(|c| {
                let chans: Vec<&[f32]> = self.inputs[c].iter().map(Vec::as_slice).collect();
                let out = nn(net.predict(&volume_tensor(&chans, self.shape)?))?;
                Ok(mean_abs_diff(out.data(), &self.targets[c]))
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(lambda * per_case.iter().sum::<f64>() / per_case.len() as f64)
    }
}

/// Normalized 2D pairs: every view of every case.
struct ViewPairs {
    rows: usize,
    cols: usize,
    inputs: Vec<Vec<f32>>,
    targets: Vec<Vec<f32>>,
}

impl ViewPairs {
    fn batch(&self, idx: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let shape = [idx.len(), 1, self.rows, self.cols];
        let x = idx.iter().flat_map(|&i| self.inputs[i].iter().copied()).collect();
        let y = idx.iter().flat_map(|&i| self.targets[i].iter().copied()).collect();
        Ok((nn(Tensor::new(&shape, x))?, nn(Tensor::new(&shape, y))?))
    }

    fn loss(&self, net: &ResidualCnn<f32>, lambda: f64) -> Result<f64> {
        let chunks: Vec<Vec<usize>> =
            (0..self.inputs.len()).collect::<Vec<_>>().chunks(8).map(|c| c.to_vec()).collect();
        let sums = chunks
            .par_iter()
            .map(|idx| {
                let (x, y) = self.batch(idx)?;
                let out = nn(net.predict(&x))?;
                Ok(out.data().chunks(self.rows * self.cols).zip(y.data().chunks(self.rows * self.cols)).map(|(a, b)| mean_abs_diff(a, b)).sum::<f64>())
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(lambda * sums.iter().sum::<f64>() / self.inputs.len() as f64)
    }
}

/// Adam on `lambda * L1` for `cfg.steps` minibatches from `sample`.
fn optimize(
    net: &mut ResidualCnn<f32>,
    adam: &mut AdamState<f32>,
    cfg: &TrainConfig,
    lambda: f64,
    rng: &mut ChaCha8Rng,
    mut sample: impl FnMut(&mut ChaCha8Rng) -> Result<(Tensor<f32>, Tensor<f32>)>,
) -> Result<Vec<f64>> {
    let mut curve = Vec::new();
    let mut window = Vec::new();
    for step in 0..cfg.steps {
        let (x, y) = sample(rng)?;
        let mut tape = Tape::new();
        let xv = tape.leaf(x, false);
        let yv = tape.leaf(y, false);
        let (out, params) = nn(net.forward(&mut tape, xv))?;
        let loss = nn(tape.l1_loss(out, yv, lambda))?;
        window.push(tape.value(loss).data()[0] as f64);
        nn(tape.backward(loss))?;
        let grads: Vec<Vec<f32>> = params
            .iter()
            .zip(net.params())
            .map(|(&p, t)| tape.take_grad(p).unwrap_or_else(|| vec![0.0; t.len()]))
            .collect();
        nn(adam_step(net.params_mut(), &grads, adam))?;
        if window.len() == cfg.log_every || step + 1 == cfg.steps {
            curve.push(window.iter().sum::<f64>() / window.len() as f64);
            window.clear();
        }
    }
    Ok(curve)
}

fn stage_seed(base: u64, stage: Stage) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stage.index() as u64 + 1)
}

impl TripleNet {
    /// Fresh networks; every head is zero so all predictions start at zero.
    pub fn new(net_config: NetConfig, lambdas: Lambdas, stats: NormStats, settings: SimulationSettings) -> Result<Self> {
        let make = |s: Stage| nn(ResidualCnn::new(net_config.spec(s), stage_seed(net_config.seed, s)));
        Ok(Self {
            m2d: make(Stage::M2d)?,
            m3d: make(Stage::M3d)?,
            f: make(Stage::F)?,
            net_config,
            lambdas,
            stats,
            settings,
            steps: [0; 3],
            ready: [false; 3],
            adam: [None, None, None],
        })
    }

    pub fn net(&self, s: Stage) -> &ResidualCnn<f32> {
        match s {
            Stage::M2d => &self.m2d,
            Stage::M3d => &self.m3d,
            Stage::F => &self.f,
        }
    }

    fn net_mut(&mut self, s: Stage) -> &mut ResidualCnn<f32> {
        match s {
            Stage::M2d => &mut self.m2d,
            Stage::M3d => &mut self.m3d,
            Stage::F => &mut self.f,
        }
    }

    pub fn is_ready(&self, s: Stage) -> bool {
        self.ready[s.index()]
    }

    /// Back to the freshly initialized network for `s`, dropping its step
    /// count and optimizer state.
    pub fn reset_stage(&mut self, s: Stage) -> Result<()> {
        let k = s.index();
        *self.net_mut(s) = nn(ResidualCnn::new(self.net_config.spec(s), stage_seed(self.net_config.seed, s)))?;
        self.steps[k] = 0;
        self.ready[k] = false;
        self.adam[k] = None;
        Ok(())
    }

    /// Physical rib-component predictions for a batch of raw views.
    pub fn m2d_predict_views(&self, views: &[Projection2D]) -> Result<Vec<Projection2D>> {
        let (lo, r) = (self.stats.proj_min, self.stats.proj_range());
        let chunks: Vec<&[Projection2D]> = views.chunks(8).collect();
        let out = chunks
            .par_iter()
            .map(|chunk| {
                let (rows, cols) = (chunk[0].rows, chunk[0].cols);
                if chunk.iter().any(|p| p.rows != rows || p.cols != cols) {
                    return Err(CoreError::Geometry("views in one batch differ in size".into()));
                }
                let x: Vec<f32> = chunk.iter().flat_map(|p| p.data.iter().map(|&v| (v - lo) / r)).collect();
                let y = nn(self.m2d.predict(&nn(Tensor::new(&[chunk.len(), 1, rows, cols], x))?))?;
                Ok(chunk
                    .iter()
                    .zip(y.data().chunks(rows * cols))
                    .map(|(p, d)| Projection2D { data: d.iter().map(|&v| v * r).collect(), ..p.clone() })
                    .collect::<Vec<_>>())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(out.into_iter().flatten().collect())
    }

    pub fn m2d_predict(&self, view: &Projection2D) -> Result<Projection2D> {
        Ok(self.m2d_predict_views(std::slice::from_ref(view))?.remove(0))
    }

    pub fn m2d_predict_set(&self, ps: &ProjectionSet) -> Result<ProjectionSet> {
        ProjectionSet::new(ps.geometry.clone(), self.m2d_predict_views(&ps.projections)?)
    }

    /// m3d output in network units (rib volume / volume range).
    fn m3d_raw(&self, v: &Volume3) -> Result<Vec<f32>> {
        let x: Vec<f32> = v.data.iter().map(|&a| self.stats.norm_vol(a)).collect();
        Ok(nn(self.m3d.predict(&volume_tensor(&[&x], v.shape)?))?.into_data())
    }

    /// Physical rib-artifact volume predicted from a raw reconstruction.
    pub fn m3d_predict(&self, v: &Volume3) -> Result<Volume3> {
        let r = self.stats.vol_range();
        let raw = self.m3d_raw(v)?;
        Ok(Volume3 { shape: v.shape, spacing: v.spacing, data: raw.iter().map(|&x| x * r).collect() })
    }

    /// Network-unit input channels of `f` from physical rib predictions:
    /// the reconstruction of the 2D predictions and the 3D prediction, both
    /// divided by the volume range.
    pub fn f_channels_from(&self, pred_proj_delta: &ProjectionSet, pred_vol_delta: &Volume3) -> Result<[Volume3; 2]> {
        let r = self.stats.vol_range();
        let ch0 = fbp(pred_proj_delta, &self.settings.filter, &self.settings.backproject)?.map(|x| x / r);
        if !ch0.same_grid(pred_vol_delta.shape, pred_vol_delta.spacing) {
            return Err(CoreError::Geometry("2D and 3D branches disagree on the volume grid".into()));
        }
        Ok([ch0, pred_vol_delta.map(|x| x / r)])
    }

    pub fn f_channels(&self, proj_full: &ProjectionSet, vol_full: &Volume3) -> Result<[Volume3; 2]> {
        self.f_channels_from(&self.m2d_predict_set(proj_full)?, &self.m3d_predict(vol_full)?)
    }

    /// Physical fused prediction from precomputed channels.
    pub fn f_predict(&self, ch: &[Volume3; 2]) -> Result<Volume3> {
        let out = nn(self.f.predict(&volume_tensor(&[&ch[0].data, &ch[1].data], ch[0].shape)?))?;
        let r = self.stats.vol_range();
        Ok(Volume3 { shape: ch[0].shape, spacing: ch[0].spacing, data: out.data().iter().map(|&x| x * r).collect() })
    }

    pub fn aggregate_predict(&self, proj_full: &ProjectionSet, vol_full: &Volume3) -> Result<Volume3> {
        self.f_predict(&self.f_channels(proj_full, vol_full)?)
    }

    /// `V - aggregate_predict`.
    pub fn suppress(&self, proj_full: &ProjectionSet, vol_full: &Volume3) -> Result<Volume3> {
        vol_full.sub(&self.aggregate_predict(proj_full, vol_full)?)
    }

    /// `V - fbp(m2d predictions)`.
    pub fn suppress_2d_only(&self, proj_full: &ProjectionSet, vol_full: &Volume3) -> Result<Volume3> {
        let pred = self.m2d_predict_set(proj_full)?;
        vol_full.sub(&fbp(&pred, &self.settings.filter, &self.settings.backproject)?)
    }

    /// `V - m3d prediction`.
    pub fn suppress_3d_only(&self, vol_full: &Volume3) -> Result<Volume3> {
        vol_full.sub(&self.m3d_predict(vol_full)?)
    }

    fn view_pairs(&self, cases: &[Case]) -> Result<ViewPairs> {
        let g = cases[0].geometry();
        let (lo, r) = (self.stats.proj_min, self.stats.proj_range());
        let mut p = ViewPairs { rows: g.detector_rows, cols: g.detector_cols, inputs: Vec::new(), targets: Vec::new() };
        for c in cases {
            for (i, d) in c.proj_full.projections.iter().zip(&c.proj_delta.projections) {
                if i.rows != p.rows || i.cols != p.cols {
                    return Err(CoreError::Geometry("training cases differ in detector size".into()));
                }
                p.inputs.push(i.data.iter().map(|&v| (v - lo) / r).collect());
                p.targets.push(d.data.iter().map(|&v| v / r).collect());
            }
        }
        Ok(p)
    }

    fn volume_pairs(&self, cases: &[Case], stage: Stage) -> Result<VolumePairs> {
        let shape = cases[0].vol_full.shape;
        let r = self.stats.vol_range();
        let mut p = VolumePairs { shape, inputs: Vec::new(), targets: Vec::new() };
        for c in cases {
            if c.vol_full.shape != shape {
                return Err(CoreError::Geometry("training cases differ in volume shape".into()));
            }
            let inputs = match stage {
                Stage::M3d => vec![c.vol_full.data.iter().map(|&v| self.stats.norm_vol(v)).collect()],
                _ => self.f_channels(&c.proj_full, &c.vol_full)?.map(|v| v.data).to_vec(),
            };
            p.inputs.push(inputs);
            p.targets.push(c.vol_delta.data.iter().map(|&v| v / r).collect());
        }
        Ok(p)
    }

    /// Weighted L1 of one stage over `cases` with the current weights.
    pub fn stage_loss(&self, stage: Stage, cases: &[Case]) -> Result<f64> {
        if cases.is_empty() {
            return Err(CoreError::InvalidArgument("no cases to evaluate".into()));
        }
        let lambda = self.lambdas.get(stage);
        match stage {
            Stage::M2d => self.view_pairs(cases)?.loss(&self.m2d, lambda),
            s => self.volume_pairs(cases, s)?.loss(self.net(s), lambda),
        }
    }

    /// Train one stage on `cases`. Stage `f` needs both branches ready and
    /// leaves them untouched.
    pub fn train_stage(&mut self, stage: Stage, cases: &[Case], cfg: &TrainConfig) -> Result<TrainReport> {
        cfg.validate()?;
        if cases.is_empty() {
            return Err(CoreError::InvalidArgument("no training cases".into()));
        }
        if stage == Stage::F {
            for s in [Stage::M2d, Stage::M3d] {
                if !self.is_ready(s) {
                    return Err(CoreError::MissingCheckpoint(format!("stage f needs a trained {s} network")));
                }
            }
        }
        let lambda = self.lambdas.get(stage);
        let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(cfg.seed, stage));
        let k = stage.index();
        let mut adam = match self.adam[k].take() {
            Some(a) if self.steps[k] > 0 => AdamState { lr: cfg.lr, ..a },
            _ => nn(AdamState::new(cfg.lr, self.net(stage).params()))?,
        };
        let (initial_loss, curve, final_loss) = match stage {
            Stage::M2d => {
                let pairs = self.view_pairs(cases)?;
                let initial = pairs.loss(&self.m2d, lambda)?;
                let n = pairs.inputs.len();
                let b = cfg.batch_2d;
                let curve = optimize(&mut self.m2d, &mut adam, cfg, lambda, &mut rng, |rng| {
                    let idx: Vec<usize> = (0..b).map(|_| rng.gen_range(0..n)).collect();
                    pairs.batch(&idx)
                })?;
                (initial, curve, pairs.loss(&self.m2d, lambda)?)
            }
            s => {
                let pairs = self.volume_pairs(cases, s)?;
                let initial = pairs.loss(self.net(s), lambda)?;
                let patch = cfg.patch_3d;
                let net = self.net_mut(s);
                let curve = optimize(net, &mut adam, cfg, lambda, &mut rng, |rng| pairs.sample(rng, patch))?;
                (initial, curve, pairs.loss(self.net(s), lambda)?)
            }
        };
        self.steps[k] += cfg.steps as u64;
        self.ready[k] = true;
        self.adam[k] = Some(adam);
        Ok(TrainReport { stage, steps: cfg.steps, initial_loss, final_loss, curve })
    }

    pub fn write_kv(&self, w: &mut KvWriter) {
        w.section("network");
        self.net_config.write_kv(w);
        w.section("lambdas").kv("m2d", self.lambdas.m2d).kv("m3d", self.lambdas.m3d).kv("f", self.lambdas.f);
        w.section("stats");
        self.stats.write_kv(w);
        w.section("simulation");
        self.settings.write_kv(w);
    }

    /// Write `model.txt`, describing how to rebuild the networks.
    pub fn save_manifest(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut w = KvWriter::new();
        w.comment("rib suppression model; checkpoints sit next to this file");
        self.write_kv(&mut w);
        fs::write(dir.join("model.txt"), w.finish())?;
        Ok(())
    }

    pub fn checkpoint_path(dir: &Path, s: Stage) -> PathBuf {
        dir.join(s.checkpoint_name())
    }

    pub fn save_stage(&self, dir: &Path, s: Stage) -> Result<()> {
        fs::create_dir_all(dir)?;
        let k = s.index();
        let ck = Checkpoint { net: self.net(s).clone(), step: self.steps[k], adam: self.adam[k].clone() };
        let path = Self::checkpoint_path(dir, s);
        nn(ck.save(&path)).map_err(|e| e.context(format!("writing {}", path.display())))
    }

    /// Rebuild from `model.txt` and load every checkpoint that exists.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("model.txt");
        let text = fs::read_to_string(&path)
            .map_err(|e| CoreError::MissingCheckpoint(format!("{}: {e}", path.display())))?;
        let doc = KvDoc::parse(&text)?;
        doc.check_sections(&["", "network", "lambdas", "stats", "simulation"])?;
        let mut ls = doc.section("lambdas");
        let lambdas = Lambdas { m2d: ls.require("m2d")?, m3d: ls.require("m3d")?, f: ls.require("f")? };
        ls.finish()?;
        let mut ns = doc.section("network");
        let net_config = NetConfig::read_kv(&mut ns)?;
        ns.finish()?;
        let mut ss = doc.section("stats");
        let stats = NormStats::read_kv(&mut ss)?;
        ss.finish()?;
        let mut sim = doc.section("simulation");
        let settings = SimulationSettings::read_kv(&mut sim)?;
        sim.finish()?;
        let mut net = Self::new(net_config, lambdas, stats, settings)?;
        for s in Stage::ALL {
            let p = Self::checkpoint_path(dir, s);
            if p.exists() {
                net.load_stage(dir, s)?;
            }
        }
        Ok(net)
    }

    pub fn load_stage(&mut self, dir: &Path, s: Stage) -> Result<()> {
        let path = Self::checkpoint_path(dir, s);
        if !path.exists() {
            return Err(CoreError::MissingCheckpoint(format!("{} not found", path.display())));
        }
        let ck = nn(Checkpoint::load(&path)).map_err(|e| e.context(format!("reading {}", path.display())))?;
        if ck.net.spec() != &self.net_config.spec(s) {
            return Err(CoreError::Config(format!(
                "{} holds a {} network, model.txt describes {}",
                path.display(),
                ck.net.spec().describe(),
                self.net_config.spec(s).describe()
            )));
        }
        let k = s.index();
        *self.net_mut(s) = ck.net;
        self.steps[k] = ck.step;
        self.adam[k] = ck.adam;
        self.ready[k] = true;
        Ok(())
    }
}
