//! Command-line harness: `cvd gen-data | train | eval | ablate`.

pub mod checkpoint;
pub mod config;
pub mod train;

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::cli::checkpoint::load_checkpoint;
use crate::cli::config::{parse_ratio, RunConfig};
use crate::cli::train::{evaluate_model, restore_model, run_train, split_dataset, EvalSummary};
use crate::error::{CvdError, Result};
use crate::synthdata::{generate_dataset, read_dataset, write_dataset};

#[derive(Parser)]
#[command(name = "cvd", about = "Content-viewpoint disentanglement lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic CVDS dataset file
    #[command(name = "gen-data")]
    GenData {
        #[arg(long)]
        scenes: usize,
        #[arg(long)]
        views: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from a run configuration
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Resume from a checkpoint file
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Comma-separated seed list; runs each seed in a subdirectory
        /// and writes per-seed plus mean rows to summary.csv
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Evaluate a checkpoint on a dataset's test split
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Where to write the report CSV (default: eval.csv next to the
        /// checkpoint)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep one hyperparameter axis, one training run per value
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        axis: String,
        /// Comma-separated values for the axis
        #[arg(long)]
        values: String,
        /// Where to write the sweep CSV (default: ablation.csv in the
        /// config's out_dir)
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

const SUMMARY_COLS: &str = "r1_ds,r5_ds,r10_ds,r1pct_ds,ap_ds,r1_sd,ap_sd,psnr,ssim,probe_c,probe_v";

fn cmd_gen_data(scenes: usize, views: usize, size: usize, seed: u64, out: &Path) -> Result<()> {
    let ds = generate_dataset(scenes, views, size, seed)?;
    write_dataset(&ds, out)?;
    let bytes = std::fs::read(out)?;
    let digest = Sha256::digest(&bytes);
    println!("records: {}", ds.records.len());
    println!("sha256: {}", hex(&digest));
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn print_summary(s: &EvalSummary) {
    for r in [&s.ds, &s.sd] {
        println!(
            "direction {}: AP {} R@1 {} R@5 {} R@10 {} R@1% {} ({} queries, {} gallery)",
            r.direction,
            r.ap,
            r.recall(1),
            r.recall(5),
            r.recall(10),
            r.r_at_1pct,
            r.n_queries,
            r.n_gallery
        );
    }
    println!("psnr: {}", s.psnr);
    println!("ssim: {}", s.ssim);
    println!("probe content: {}", s.probe_c);
    println!("probe viewpoint: {}", s.probe_v);
}

fn cmd_train(config: &Path, resume: Option<&Path>, seeds: Option<&str>) -> Result<()> {
    let base = RunConfig::load(config)?;
    let Some(seeds) = seeds else {
        let r = run_train(&base, resume)?;
        print_summary(&r.summary);
        println!("checkpoint: {}", r.checkpoint_path.display());
        println!("metrics: {}", r.metrics_path.display());
        return Ok(());
    };
    if resume.is_some() {
        return Err(CvdError::Config("--resume cannot be combined with --seeds".into()));
    }
    let seed_list: Vec<u64> = seeds
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| CvdError::Config(format!("invalid seed '{s}'")))
        })
        .collect::<Result<_>>()?;
    if seed_list.is_empty() {
        return Err(CvdError::Config("empty seed list".into()));
    }
    std::fs::create_dir_all(&base.out_dir)?;
    let summary_path = base.out_dir.join("summary.csv");
    let mut out = File::create(&summary_path)?;
    writeln!(out, "seed,{SUMMARY_COLS}")?;
    let mut acc = vec![0.0; 11];
    for &seed in &seed_list {
        let mut cfg = base.clone();
        cfg.model.seed = seed;
        cfg.out_dir = base.out_dir.join(format!("seed_{seed}"));
        let r = run_train(&cfg, None)?;
        let fields = r.summary.csv_fields();
        writeln!(out, "{seed},{fields}")?;
        for (a, v) in acc.iter_mut().zip(fields.split(',')) {
            *a += v.parse::<f64>().unwrap();
        }
        println!("seed {seed} done: R@1(d->s) {}", r.summary.ds.recall(1));
    }
    let n = seed_list.len() as f64;
    let mean: Vec<String> = acc.iter().map(|a| format!("{}", a / n)).collect();
    writeln!(out, "mean,{}", mean.join(","))?;
    println!("summary: {}", summary_path.display());
    Ok(())
}

fn cmd_eval(checkpoint: &Path, dataset: &Path, out: Option<&Path>) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let (cfg, model, _) = restore_model(&ck)?;
    let full = read_dataset(dataset)?;
    if full.size as usize != cfg.model.image_size || full.channels as usize != cfg.model.channels {
        return Err(CvdError::Config(format!(
            "dataset is {}x{} px, {} ch; checkpoint expects {} px, {} ch",
            full.size, full.size, full.channels, cfg.model.image_size, cfg.model.channels
        )));
    }
    let (_, test_ds) = split_dataset(&full);
    let summary = evaluate_model(&model, &test_ds)?;
    print_summary(&summary);
    let out_path = match out {
        Some(p) => p.to_path_buf(),
        None => checkpoint
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("eval.csv"),
    };
    let mut f = File::create(&out_path)?;
    writeln!(f, "{SUMMARY_COLS}")?;
    writeln!(f, "{}", summary.csv_fields())?;
    println!("report: {}", out_path.display());
    Ok(())
}

/// Apply one ablation-axis value to a run configuration.
fn apply_axis(cfg: &mut RunConfig, axis: &str, value: &str) -> Result<()> {
    match axis {
        "alpha" => {
            if value == "nosqueeze" {
                cfg.model.squeeze = false;
            } else {
                cfg.model.squeeze = true;
                cfg.model.alpha = parse_ratio(value)?;
            }
        }
        "tau" => cfg.model.tau = parse_ratio(value)?,
        "K" => {
            cfg.model.n_projections = value
                .parse()
                .map_err(|_| CvdError::Config(format!("invalid projection count '{value}'")))?
        }
        "constraints" => match value {
            "none" => {
                cfg.model.lambda1 = 0.0;
                cfg.model.lambda2 = 0.0;
            }
            "iic" => cfg.model.lambda2 = 0.0,
            "irc" => cfg.model.lambda1 = 0.0,
            "both" => {}
            _ => {
                return Err(CvdError::Config(format!(
                    "unknown constraints value '{value}' (expected none|iic|irc|both)"
                )))
            }
        },
        _ => {
            return Err(CvdError::Config(format!(
                "unknown ablation axis '{axis}' (expected alpha|tau|K|constraints)"
            )))
        }
    }
    Ok(())
}

fn cmd_ablate(config: &Path, axis: &str, values: &str, out: Option<&Path>) -> Result<()> {
    let base = RunConfig::load(config)?;
    let values: Vec<&str> = values.split(',').map(str::trim).collect();
    if values.is_empty() || values.iter().any(|v| v.is_empty()) {
        return Err(CvdError::Config("empty ablation value list".into()));
    }
    std::fs::create_dir_all(&base.out_dir)?;
    let out_path = match out {
        Some(p) => p.to_path_buf(),
        None => base.out_dir.join("ablation.csv"),
    };
    let mut f = File::create(&out_path)?;
    writeln!(f, "axis,value,{SUMMARY_COLS}")?;
    for value in values {
        let mut cfg = base.clone();
        apply_axis(&mut cfg, axis, value)?;
        cfg.validate()?;
        cfg.out_dir = base.out_dir.join(format!("{axis}_{}", value.replace('/', "-")));
        let r = run_train(&cfg, None)?;
        writeln!(f, "{axis},{value},{}", r.summary.csv_fields())?;
        println!("{axis}={value} done: R@1(d->s) {}", r.summary.ds.recall(1));
    }
    println!("table: {}", out_path.display());
    Ok(())
}

/// Parse argv and run; returns the process exit code.
pub fn main_entry() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version as "errors" with exit 0
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::GenData {
            scenes,
            views,
            size,
            seed,
            out,
        } => cmd_gen_data(*scenes, *views, *size, *seed, out),
        Command::Train {
            config,
            resume,
            seeds,
        } => cmd_train(config, resume.as_deref(), seeds.as_deref()),
        Command::Eval {
            checkpoint,
            dataset,
            out,
        } => cmd_eval(checkpoint, dataset, out.as_deref()),
        Command::Ablate {
            config,
            axis,
            values,
            out,
        } => cmd_ablate(config, axis, values, out.as_deref()),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
