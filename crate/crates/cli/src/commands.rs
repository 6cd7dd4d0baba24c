//! The subcommands. Each works under `<out>/alpha<deg>/` for the configured
//! sweep (phantoms go to `<out>/phantoms/`) and writes `manifest.txt` into
//! every directory it creates:
//!
//! ```text
//! alpha30/data/       simulated cases, dataset.txt
//! alpha30/model/      model.txt, <stage>.ckpt, train_<stage>.txt
//! alpha30/suppress/   case_<seed>/suppressed.vol, panels.png
//! alpha30/ablate/     case_<seed>/<method>.vol, methods.png, diffs.png
//! alpha30/eval/       metrics.csv, metrics.txt
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use tomorib_core::config::KvWriter;
use tomorib_core::dataset::{build_dataset, case_dir, load_split, save_split, Case, DatasetSplit};
use tomorib_core::geometry::ConeBeamGeometry;
use tomorib_core::io::{extract_slice, save_mask, save_volume, write_panels_png, Plane, Window};
use tomorib_core::metrics::{evaluate_methods, format_csv, format_table, mean_by_method, MetricsReport};
use tomorib_core::phantom::generate_phantom;
use tomorib_core::suppression::{Stage, TrainReport, TripleNet};
use tomorib_core::volume::Volume3;
use tomorib_core::{CoreError, Result};

use crate::config::{RunConfig, ALPHA_PRESETS};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Reconstructions and phantoms, mm^-1.
pub const VOLUME_WINDOW: Window = Window { level: 0.006, width: 0.02 };
/// Differences against the rib-free reconstruction, mm^-1.
pub const DIFF_WINDOW: Window = Window { level: 0.0, width: 0.008 };
pub const PHANTOM_WINDOW: Window = Window { level: 0.025, width: 0.05 };

pub const METHODS: [&str; 4] = ["unsuppressed", "m2d-only", "m3d-only", "triple"];

pub fn alpha_dir(out: &Path, g: &ConeBeamGeometry) -> PathBuf {
    out.join(format!("alpha{}", g.angles.alpha()))
}

/// `manifest.txt`: tool version and command as comments, then the resolved
/// configuration. It parses as a config file, so rerunning `command` with
/// it and the same `--out` reproduces the directory.
pub fn write_manifest(dir: &Path, command: &str, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = KvWriter::new();
    w.comment(&format!("tomorib {VERSION}\ncommand: {command}"));
    cfg.write_kv(&mut w);
    let text = w.finish();
    // The output directory is where this file lives; leave it out so that
    // runs into different directories produce identical manifests.
    let text = text.split("\n[output]").next().unwrap_or(&text).trim_end().to_string() + "\n";
    fs::write(dir.join("manifest.txt"), text)?;
    Ok(())
}

fn seeds(cfg: &RunConfig) -> Vec<u64> {
    let n = (cfg.dataset.n_train + cfg.dataset.n_test) as u64;
    (0..n).map(|i| cfg.dataset.base_seed + i).collect()
}

fn slice_index(cfg: &RunConfig, v: &Volume3) -> usize {
    let axis = match cfg.export.plane {
        Plane::Axial => 0,
        Plane::Coronal => 1,
        Plane::Sagittal => 2,
    };
    cfg.export.slice.unwrap_or(v.shape[axis] / 2)
}

fn panels(cfg: &RunConfig, path: &Path, vols: &[(&Volume3, Window)]) -> Result<()> {
    if !cfg.export.png {
        return Ok(());
    }
    let idx = slice_index(cfg, vols[0].0);
    let slices = vols
        .iter()
        .map(|(v, w)| Ok((extract_slice(v, cfg.export.plane, idx)?, *w)))
        .collect::<Result<Vec<_>>>()?;
    write_panels_png(path, &slices, 2)
}

/// Phantoms for every dataset seed with masks and a full / rib-free preview.
pub fn cmd_phantom(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let root = out.join("phantoms");
    for seed in seeds(cfg) {
        let p = generate_phantom(seed, &cfg.phantom).map_err(|e| e.context(format!("phantom seed {seed}")))?;
        let dir = root.join(format!("phantom_{seed}"));
        fs::create_dir_all(&dir)?;
        save_volume(&dir.join("full.vol"), &p.full)?;
        save_volume(&dir.join("rib_free.vol"), &p.rib_free)?;
        save_mask(&dir.join("rib_mask.msk"), &p.rib_mask)?;
        save_mask(&dir.join("lung_mask.msk"), &p.lung_mask)?;
        save_mask(&dir.join("lesion_mask.msk"), &p.lesion_mask)?;
        panels(cfg, &dir.join("preview.png"), &[(&p.full, PHANTOM_WINDOW), (&p.rib_free, PHANTOM_WINDOW)])?;
    }
    write_manifest(&root, "phantom", cfg)?;
    Ok(root)
}

pub fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<DatasetSplit> {
    let dir = alpha_dir(out, &cfg.geometry).join("data");
    let d = &cfg.dataset;
    let split = build_dataset(d.n_train, d.n_test, d.base_seed, &cfg.geometry, &cfg.phantom, &cfg.simulation)?;
    save_split(&dir, &split)?;
    write_manifest(&dir, "simulate", cfg)?;
    Ok(split)
}

/// The simulated split for `cfg`, refusing data made with other settings.
pub fn open_data(cfg: &RunConfig, out: &Path) -> Result<DatasetSplit> {
    let dir = alpha_dir(out, &cfg.geometry).join("data");
    if !dir.join("dataset.txt").exists() {
        return Err(CoreError::MissingInput(format!("no dataset in {}; run simulate first", dir.display())));
    }
    let split = load_split(&dir)?;
    if split.geometry != cfg.geometry {
        return Err(CoreError::Geometry(format!("{} was simulated with a different geometry; rerun simulate", dir.display())));
    }
    let seeds_now: Vec<u64> = split.train.iter().chain(&split.test).map(|c| c.seed).collect();
    if split.phantom != cfg.phantom || split.settings != cfg.simulation || seeds_now != seeds(cfg) || split.train.len() != cfg.dataset.n_train {
        return Err(CoreError::Config(format!("{} was simulated with different settings; rerun simulate", dir.display())));
    }
    Ok(split)
}

fn model_dir(cfg: &RunConfig, out: &Path) -> PathBuf {
    alpha_dir(out, &cfg.geometry).join("model")
}

/// Existing model for this configuration, or fresh networks.
pub fn open_model(cfg: &RunConfig, split: &DatasetSplit, dir: &Path) -> Result<TripleNet> {
    if !dir.join("model.txt").exists() {
        return TripleNet::new(cfg.network, cfg.training.lambdas, split.stats, split.settings.clone());
    }
    let net = TripleNet::load(dir)?;
    if net.net_config != cfg.network || net.lambdas != cfg.training.lambdas || net.stats != split.stats || net.settings != split.settings {
        return Err(CoreError::Config(format!("{} belongs to a different configuration; use another --out", dir.display())));
    }
    Ok(net)
}

fn trained_model(cfg: &RunConfig, split: &DatasetSplit, out: &Path) -> Result<TripleNet> {
    let dir = model_dir(cfg, out);
    let net = open_model(cfg, split, &dir)?;
    for s in Stage::ALL {
        if !net.is_ready(s) {
            return Err(CoreError::MissingCheckpoint(format!("{} has no {s} checkpoint; run train first", dir.display())));
        }
    }
    Ok(net)
}

pub fn report_text(r: &TrainReport) -> String {
    let mut w = KvWriter::new();
    w.kv("stage", r.stage)
        .kv("steps", r.steps)
        .kv("initial_loss", r.initial_loss)
        .kv("final_loss", r.final_loss)
        .kv("ratio", r.final_loss / r.initial_loss)
        .kv("curve", r.curve.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","));
    w.finish()
}

/// Train `stages` in order. Each stage restarts from initialization;
/// retraining a branch discards a fusion checkpoint built on the old one.
pub fn cmd_train(cfg: &RunConfig, out: &Path, stages: &[Stage]) -> Result<Vec<TrainReport>> {
    let split = open_data(cfg, out)?;
    let dir = model_dir(cfg, out);
    let mut net = open_model(cfg, &split, &dir)?;
    fs::create_dir_all(&dir)?;
    let mut reports = Vec::new();
    for &s in stages {
        if s == Stage::F {
            for b in [Stage::M2d, Stage::M3d] {
                if !net.is_ready(b) {
                    return Err(CoreError::MissingCheckpoint(format!("stage f needs {} in {}", b.checkpoint_name(), dir.display())));
                }
            }
        } else if net.is_ready(Stage::F) || TripleNet::checkpoint_path(&dir, Stage::F).exists() {
            net.reset_stage(Stage::F)?;
            for stale in [TripleNet::checkpoint_path(&dir, Stage::F), dir.join("train_f.txt")] {
                if stale.exists() {
                    fs::remove_file(stale)?;
                }
            }
        }
        net.reset_stage(s)?;
        let r = net.train_stage(s, &split.train, &cfg.training.for_stage(s))?;
        eprintln!("trained {s}: loss {:.5} -> {:.5} (ratio {:.3})", r.initial_loss, r.final_loss, r.final_loss / r.initial_loss);
        net.save_stage(&dir, s)?;
        fs::write(dir.join(format!("train_{s}.txt")), report_text(&r))?;
        reports.push(r);
    }
    net.save_manifest(&dir)?;
    let names: Vec<String> = stages.iter().map(|s| s.to_string()).collect();
    write_manifest(&dir, &format!("train --stage {}", names.join(",")), cfg)?;
    Ok(reports)
}

/// `(name, volume)` for every method in [`METHODS`] order.
pub fn method_volumes(net: &TripleNet, c: &Case) -> Result<Vec<(String, Volume3)>> {
    let vols = [
        c.vol_full.clone(),
        net.suppress_2d_only(&c.proj_full, &c.vol_full)?,
        net.suppress_3d_only(&c.vol_full)?,
        net.suppress(&c.proj_full, &c.vol_full)?,
    ];
    Ok(METHODS.iter().map(|m| m.to_string()).zip(vols).collect())
}

pub fn cmd_suppress(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let split = open_data(cfg, out)?;
    let net = trained_model(cfg, &split, out)?;
    let root = alpha_dir(out, &cfg.geometry).join("suppress");
    for c in &split.test {
        let dir = case_dir(&root, c.seed);
        fs::create_dir_all(&dir)?;
        let s = net.suppress(&c.proj_full, &c.vol_full)?;
        save_volume(&dir.join("suppressed.vol"), &s)?;
        let diff = s.sub(&c.vol_ribfree)?;
        panels(
            cfg,
            &dir.join("panels.png"),
            &[(&c.vol_full, VOLUME_WINDOW), (&s, VOLUME_WINDOW), (&c.vol_ribfree, VOLUME_WINDOW), (&diff, DIFF_WINDOW)],
        )?;
    }
    write_manifest(&root, "suppress", cfg)?;
    Ok(root)
}

pub fn cmd_ablate(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let split = open_data(cfg, out)?;
    let net = trained_model(cfg, &split, out)?;
    let root = alpha_dir(out, &cfg.geometry).join("ablate");
    for c in &split.test {
        let dir = case_dir(&root, c.seed);
        fs::create_dir_all(&dir)?;
        let methods = method_volumes(&net, c)?;
        let diffs = methods.iter().map(|(_, v)| v.sub(&c.vol_ribfree)).collect::<Result<Vec<_>>>()?;
        for (name, v) in methods.iter().skip(1) {
            save_volume(&dir.join(format!("{name}.vol")), v)?;
        }
        let mut imgs = vec![(&c.vol_ribfree, VOLUME_WINDOW)];
        imgs.extend(methods.iter().map(|(_, v)| (v, VOLUME_WINDOW)));
        panels(cfg, &dir.join("methods.png"), &imgs)?;
        let d: Vec<(&Volume3, Window)> = diffs.iter().map(|v| (v, DIFF_WINDOW)).collect();
        panels(cfg, &dir.join("diffs.png"), &d)?;
    }
    write_manifest(&root, "ablate", cfg)?;
    Ok(root)
}

/// Per-case metrics of every method on the test cases, in dataset-normalized
/// intensities.
pub fn cmd_eval(cfg: &RunConfig, out: &Path) -> Result<Vec<MetricsReport>> {
    let split = open_data(cfg, out)?;
    let net = trained_model(cfg, &split, out)?;
    let dir = alpha_dir(out, &cfg.geometry).join("eval");
    let mut reports = Vec::new();
    for c in &split.test {
        reports.extend(evaluate_methods(c, &method_volumes(&net, c)?, Some(&split.stats))?);
    }
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("metrics.csv"), format_csv(&reports))?;
    let alpha = format!("{}", cfg.geometry.angles.alpha());
    let mut text = format_table(&format!("alpha = {alpha} deg, per test case"), &reports);
    text.push('\n');
    let means: Vec<(String, MetricsReport)> = mean_by_method(&reports).into_iter().map(|r| (alpha.clone(), r)).collect();
    text.push_str(&format_summary(&format!("alpha = {alpha} deg, mean over {} test cases", split.test.len()), &means));
    fs::write(dir.join("metrics.txt"), text)?;
    write_manifest(&dir, "eval", cfg)?;
    Ok(reports)
}

/// Method means keyed by sweep, L1 columns x1e2 and L2 columns x1e4.
pub fn format_summary(title: &str, rows: &[(String, MetricsReport)]) -> String {
    let mut out = String::new();
    if !title.is_empty() {
        writeln!(out, "{title}").unwrap();
    }
    writeln!(out, "{:<6} {:<13} {:>10} {:>10} {:>13} {:>13} {:>9}", "alpha", "method", "L1(x1e-2)", "L2(x1e-4)", "L1_LA(x1e-2)", "L2_LA(x1e-4)", "PSNR(dB)")
        .unwrap();
    for (alpha, r) in rows {
        let psnr = match r.psnr {
            None => "n/a".to_string(),
            Some(p) if p.infinite => "inf".to_string(),
            Some(p) => format!("{:.2}", p.db),
        };
        writeln!(
            out,
            "{alpha:<6} {:<13} {:>10.4} {:>10.4} {:>13.4} {:>13.4} {psnr:>9}",
            r.method,
            r.l1 * 1e2,
            r.l2 * 1e4,
            r.l1_la * 1e2,
            r.l2_la * 1e4
        )
        .unwrap();
    }
    out
}

pub const SUMMARY_CSV_HEADER: &str = "alpha,method,l1,l2,l1_la,l2_la,psnr_db";

pub fn summary_csv(rows: &[(String, MetricsReport)]) -> String {
    let mut out = format!("{SUMMARY_CSV_HEADER}\n");
    for (alpha, r) in rows {
        let psnr = r.psnr.map_or(String::new(), |p| if p.infinite { "inf".into() } else { p.db.to_string() });
        writeln!(out, "{alpha},{},{},{},{},{},{psnr}", r.method, r.l1, r.l2, r.l1_la, r.l2_la).unwrap();
    }
    out
}

#[derive(Debug, Clone)]
pub struct DemoResult {
    /// Per sweep: degrees, training reports and per-case metrics.
    pub runs: Vec<(u32, Vec<TrainReport>, Vec<MetricsReport>)>,
    pub summary: Vec<(String, MetricsReport)>,
}

/// Simulate, train, suppress and evaluate at both preset sweeps, then write
/// `demo_metrics.{txt,csv}` and `demo_training.txt` under `out`.
pub fn cmd_demo(cfg: &RunConfig, out: &Path) -> Result<DemoResult> {
    let mut runs = Vec::new();
    let mut summary = Vec::new();
    let mut training = String::from("alpha,stage,steps,initial_loss,final_loss,ratio\n");
    for (alpha, _) in ALPHA_PRESETS {
        let c = cfg.with_alpha(alpha)?;
        eprintln!("alpha {alpha}: simulating {} cases", c.dataset.n_train + c.dataset.n_test);
        cmd_simulate(&c, out)?;
        let reports = cmd_train(&c, out, &Stage::ALL)?;
        cmd_suppress(&c, out)?;
        let metrics = cmd_eval(&c, out)?;
        for r in &reports {
            writeln!(training, "{alpha},{},{},{},{},{}", r.stage, r.steps, r.initial_loss, r.final_loss, r.final_loss / r.initial_loss).unwrap();
        }
        summary.extend(mean_by_method(&metrics).into_iter().map(|r| (alpha.to_string(), r)));
        runs.push((alpha, reports, metrics));
    }
    fs::create_dir_all(out)?;
    let title = format!("test-case means, {} train / {} test cases per sweep", cfg.dataset.n_train, cfg.dataset.n_test);
    fs::write(out.join("demo_metrics.txt"), format_summary(&title, &summary))?;
    fs::write(out.join("demo_metrics.csv"), summary_csv(&summary))?;
    fs::write(out.join("demo_training.txt"), training)?;
    write_manifest(out, "demo", cfg)?;
    Ok(DemoResult { runs, summary })
}
