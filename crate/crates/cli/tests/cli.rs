use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tomorib_cli::exit;

fn conf(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tomorib")).args(args).env("TOMORIB_THREADS", "1").output().unwrap()
}

fn tiny(cmd: &[&str], out: &Path) -> Output {
    let c = conf("tiny.conf");
    let mut args: Vec<&str> = cmd.to_vec();
    args.extend(["--config", c.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    run(&args)
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn shipped_configs_parse() {
    for name in ["desk.conf", "tiny.conf"] {
        tomorib_cli::config::RunConfig::load(&conf(name)).unwrap();
    }
}

#[test]
fn config_errors_have_their_own_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.conf");
    std::fs::write(&bad, "[dataset]\nn_trian = 3\n").unwrap();
    let o = run(&["simulate", "--config", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), exit::CONFIG as i32);
    assert!(stderr(&o).contains("n_trian"), "{}", stderr(&o));

    let o = tiny(&["simulate", "--alpha", "20"], dir.path());
    assert_eq!(code(&o), exit::CONFIG as i32);

    let o = run(&["simulate", "--config", dir.path().join("absent.conf").to_str().unwrap()]);
    assert_eq!(code(&o), exit::MISSING_INPUT as i32);

    let o = run(&["frobnicate"]);
    assert_eq!(code(&o), exit::USAGE as i32);
}

#[test]
fn thread_variable_is_validated() {
    let o = Command::new(env!("CARGO_BIN_EXE_tomorib")).args(["eval"]).env("TOMORIB_THREADS", "many").output().unwrap();
    assert_eq!(code(&o), exit::CONFIG as i32);
}

#[test]
fn simulate_is_idempotent_and_leaves_manifests() {
    let dir = tempfile::tempdir().unwrap();
    assert!(tiny(&["simulate"], dir.path()).status.success());
    let data = dir.path().join("alpha30/data");
    let first = std::fs::read(data.join("case_7/vol_full.vol")).unwrap();
    let manifest = std::fs::read_to_string(data.join("manifest.txt")).unwrap();
    assert!(manifest.starts_with("# tomorib "));
    assert!(manifest.contains("command: simulate"));
    // A manifest is itself a usable config.
    let again = tomorib_cli::config::RunConfig::parse(&manifest).unwrap();
    assert_eq!(again.dataset.base_seed, 7);

    assert!(tiny(&["simulate"], dir.path()).status.success());
    assert_eq!(std::fs::read(data.join("case_7/vol_full.vol")).unwrap(), first);
}

#[test]
fn downstream_commands_need_their_inputs() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["train", "suppress", "ablate", "eval"] {
        assert_eq!(code(&tiny(&[cmd], dir.path())), exit::MISSING_INPUT as i32, "{cmd}");
    }
    assert!(tiny(&["simulate"], dir.path()).status.success());
    for cmd in ["suppress", "ablate", "eval"] {
        let o = tiny(&[cmd], dir.path());
        assert_eq!(code(&o), exit::MISSING_CHECKPOINT as i32, "{cmd}");
        assert!(stderr(&o).contains("missing checkpoint"));
    }
}

#[test]
fn changed_geometry_is_a_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    assert!(tiny(&["simulate"], dir.path()).status.success());
    let other = dir.path().join("other.conf");
    let text = std::fs::read_to_string(conf("tiny.conf")).unwrap().replace("vol_ny = 16", "vol_ny = 8");
    std::fs::write(&other, text).unwrap();
    let o = run(&["train", "--config", other.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), exit::GEOMETRY as i32, "{}", stderr(&o));
}

#[test]
fn full_pipeline_at_one_sweep() {
    let dir = tempfile::tempdir().unwrap();
    assert!(tiny(&["phantom"], dir.path()).status.success());
    assert!(dir.path().join("phantoms/phantom_7/preview.png").exists());
    assert!(dir.path().join("phantoms/manifest.txt").exists());
    for cmd in [&["simulate", "--alpha", "15"][..], &["train", "--alpha", "15"], &["suppress", "--alpha", "15"], &["ablate", "--alpha", "15"]] {
        let o = tiny(cmd, dir.path());
        assert!(o.status.success(), "{cmd:?}: {}", stderr(&o));
    }
    let o = tiny(&["eval", "--alpha", "15"], dir.path());
    assert!(o.status.success());
    let a = dir.path().join("alpha15");
    for sub in ["data", "model", "suppress", "ablate", "eval"] {
        assert!(a.join(sub).join("manifest.txt").exists(), "{sub}");
    }
    assert!(a.join("suppress/case_9/panels.png").exists());
    assert!(a.join("ablate/case_9/diffs.png").exists());
    let csv = std::fs::read_to_string(a.join("eval/metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);
    let table = String::from_utf8_lossy(&o.stdout);
    for m in ["unsuppressed", "m2d-only", "m3d-only", "triple"] {
        assert!(table.contains(m));
    }

    // Retraining a branch invalidates the fusion checkpoint built on it.
    assert!(a.join("model/f.ckpt").exists());
    assert!(tiny(&["train", "--alpha", "15", "--stage", "m3d"], dir.path()).status.success());
    assert!(!a.join("model/f.ckpt").exists());
    assert_eq!(code(&tiny(&["suppress", "--alpha", "15"], dir.path())), exit::MISSING_CHECKPOINT as i32);
}
