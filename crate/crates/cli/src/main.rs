use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tomorib_cli::commands::{cmd_ablate, cmd_demo, cmd_eval, cmd_phantom, cmd_simulate, cmd_suppress, cmd_train};
use tomorib_cli::config::RunConfig;
use tomorib_cli::{categorize, exit};
use tomorib_core::suppression::Stage;
use tomorib_core::{CoreError, Result};

/// Chest tomosynthesis phantoms, reconstruction and learned rib suppression.
#[derive(Parser, Debug)]
#[command(name = "tomorib", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (key = value sections); defaults apply without it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root; overrides [output] dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Sweep preset: 15 (29 views) or 30 (59 views); overrides [geometry].
    #[arg(long, global = true)]
    alpha: Option<u32>,
    /// First phantom seed; overrides [dataset] base_seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to TOMORIB_THREADS, then all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate phantoms and masks for every dataset seed.
    Phantom,
    /// Simulate projections and reconstructions for the dataset.
    Simulate,
    /// Train one stage (or all three in order).
    Train {
        #[arg(long, value_parser = parse_stage)]
        stage: Option<Stage>,
    },
    /// Suppress ribs in the test cases and export images.
    Suppress,
    /// Write every method's output for the test cases.
    Ablate,
    /// Metric tables for every method on the test cases.
    Eval,
    /// Simulate, train, suppress and evaluate at both sweep presets.
    Demo,
}

fn parse_stage(s: &str) -> std::result::Result<Stage, String> {
    s.parse().map_err(|e: CoreError| e.to_string())
}

fn threads(flag: Option<usize>) -> Result<Option<usize>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("TOMORIB_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CoreError::Config(format!("TOMORIB_THREADS must be a positive integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = threads(cli.threads)? {
        if n == 0 {
            return Err(CoreError::Config("thread count must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CoreError::State(format!("thread pool: {e}")))?;
    }
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(a) = cli.alpha {
        cfg = cfg.with_alpha(a)?;
    }
    if let Some(s) = cli.seed {
        cfg.dataset.base_seed = s;
    }
    if let Some(o) = cli.out {
        cfg.out_dir = o;
    }
    let out = cfg.out_dir.clone();
    match cli.command {
        Command::Phantom => println!("{}", cmd_phantom(&cfg, &out)?.display()),
        Command::Simulate => {
            let split = cmd_simulate(&cfg, &out)?;
            let worst = split.train.iter().chain(&split.test).map(|c| c.linearity_residual).fold(0.0f32, f32::max);
            println!("simulated {} + {} cases, worst linearity residual {worst:e}", split.train.len(), split.test.len());
        }
        Command::Train { stage } => {
            let stages = stage.map_or(Stage::ALL.to_vec(), |s| vec![s]);
            for r in cmd_train(&cfg, &out, &stages)? {
                println!("{}: {} steps, loss {} -> {}", r.stage, r.steps, r.initial_loss, r.final_loss);
            }
        }
        Command::Suppress => println!("{}", cmd_suppress(&cfg, &out)?.display()),
        Command::Ablate => println!("{}", cmd_ablate(&cfg, &out)?.display()),
        Command::Eval => {
            cmd_eval(&cfg, &out)?;
            let dir = tomorib_cli::commands::alpha_dir(&out, &cfg.geometry).join("eval");
            print!("{}", std::fs::read_to_string(dir.join("metrics.txt"))?);
        }
        Command::Demo => {
            cmd_demo(&cfg, &out)?;
            print!("{}", std::fs::read_to_string(out.join("demo_metrics.txt"))?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE } else { exit::OK });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::from(exit::OK),
        Err(e) => {
            let (cat, code) = categorize(&e);
            eprintln!("error ({cat}): {e}");
            ExitCode::from(code)
        }
    }
}
