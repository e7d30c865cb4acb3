//! `pct`: generate synthetic data, train, evaluate, run ablations and export
//! attention maps.
//!
//! Exit codes: 0 on success, 1 on a usage error, 2 when a command fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;

use pct_core::ablation::{parse_variants, run_ablation, Variant};
use pct_core::config::{KeyValue, RunConfig};
use pct_core::export::{attention_maps, write_attention};
use pct_core::fairness::DEFAULT_FPR_GRID;
use pct_core::model::Model;
use pct_core::pipeline::{evaluate, evaluate_pair_list, metrics, train};
use pct_core::report::{
    published_checks, published_csv, write_json, write_metrics, RunReport, REPORT_JSON,
};
use pct_core::synth::{generate, read_dataset, read_pairs, write_dataset, DatasetSpec, PAIRS_FILE};
use pct_core::Tensor;

const CHECKPOINT_FILE: &str = "model.ckpt";

#[derive(Debug, Parser)]
#[command(name = "pct", version, about = "Progressive cross transformer on synthetic face-like data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset: images, pair list and manifest.
    Generate {
        /// Dataset settings (`key = value` lines); defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on a dataset, then evaluate on its pair list.
    Train {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Evaluate a checkpoint on a pair list.
    Eval {
        #[arg(long, required_unless_present = "published")]
        checkpoint: Option<PathBuf>,
        /// Dataset directory; pair paths are relative to it.
        #[arg(long, required_unless_present = "published")]
        data: Option<PathBuf>,
        /// Pair list; defaults to the dataset's own.
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_fpr_grid)]
        fpr_grid: Option<FprGrid>,
        /// Summarize the built-in published accuracy rows instead.
        #[arg(long, conflicts_with_all = ["checkpoint", "data", "pairs"])]
        published: bool,
    },
    /// Train and evaluate model variants over a seed range.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated: pct, no-ct, ct-stage-K, heads-H. Defaults to
        /// the full grid.
        #[arg(long)]
        variants: Option<String>,
        /// Seeds `seed .. seed + num_seeds`.
        #[arg(long, default_value_t = 5)]
        num_seeds: u64,
    },
    /// Write attention maps of a checkpoint for one test image.
    ExportAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Index into the dataset's test images.
        #[arg(long, default_value_t = 0)]
        sample: usize,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Run config (`key = value` lines); defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_fpr_grid)]
    fpr_grid: Option<FprGrid>,
}

#[derive(Debug, Clone)]
struct FprGrid(Vec<f64>);

fn parse_fpr_grid(s: &str) -> Result<FprGrid, String> {
    let grid = s
        .split(',')
        .map(|t| {
            let v: f64 = t.trim().parse().map_err(|_| format!("not a number: {t:?}"))?;
            if v > 0.0 && v < 1.0 {
                Ok(v)
            } else {
                Err(format!("target FPR must lie in (0, 1), got {v}"))
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(FprGrid(grid))
}

fn grid(g: &Option<FprGrid>) -> Vec<f64> {
    g.as_ref().map_or_else(|| DEFAULT_FPR_GRID.to_vec(), |g| g.0.clone())
}

fn out_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn run_config(args: &RunArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn cmd_generate(config: Option<&Path>, out: &Path, seed: u64) -> anyhow::Result<()> {
    let spec = match config {
        Some(path) => DatasetSpec::load(path)?,
        None => DatasetSpec::default(),
    };
    let ds = generate(&spec, seed)?;
    out_dir(out)?;
    let hash = write_dataset(&ds, out)?;
    info!("wrote {} train and {} test images", ds.train.len(), ds.test.len());
    println!("manifest sha256 {hash}");
    Ok(())
}

fn cmd_train(args: &RunArgs) -> anyhow::Result<()> {
    let cfg = run_config(args)?;
    let ds = read_dataset(&args.data)?;
    out_dir(&args.out)?;
    let run = train(&cfg, &ds)?;
    let ckpt = args.out.join(CHECKPOINT_FILE);
    run.model.save(&ckpt)?;
    let m = evaluate(&run.model, &ds, &grid(&args.fpr_grid))?;
    write_metrics(&args.out, &m)?;
    let report = RunReport {
        config: cfg,
        epochs: run.epochs,
        metrics: m,
        wall_secs: run.wall_secs,
        checkpoint: Some(ckpt.display().to_string()),
    };
    write_json(&args.out.join(REPORT_JSON), &report)?;
    let acc = &report.metrics.accuracy.metrics;
    println!("ave {:.4} std {:.4}", acc.ave, acc.std);
    Ok(())
}

fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    pairs: Option<&Path>,
    out: &Path,
    fpr_grid: &[f64],
) -> anyhow::Result<()> {
    let model = Model::load(checkpoint)?;
    let list = read_pairs(&pairs.map_or_else(|| data.join(PAIRS_FILE), Path::to_path_buf))?;
    let e = evaluate_pair_list(&model, data, &list)?;
    let m = metrics(&e.scores, fpr_grid)?;
    out_dir(out)?;
    write_metrics(out, &m)?;
    Tensor::from_rows(&e.embeddings)?.save(out.join("embeddings.pct"))?;
    fs::write(out.join("embeddings.txt"), e.paths.join("\n") + "\n")
        .with_context(|| format!("writing {}", out.display()))?;
    let acc = &m.accuracy.metrics;
    println!("ave {:.4} std {:.4}", acc.ave, acc.std);
    Ok(())
}

fn cmd_published(out: &Path) -> anyhow::Result<()> {
    let checks = published_checks()?;
    out_dir(out)?;
    write_json(&out.join("published.json"), &checks)?;
    fs::write(out.join("published.csv"), published_csv(&checks))
        .with_context(|| format!("writing {}", out.display()))?;
    let matched = checks.iter().filter(|c| c.matches).count();
    println!("{matched}/{} rows reproduce at 2 decimals", checks.len());
    Ok(())
}

fn cmd_ablate(args: &RunArgs, variants: Option<&str>, num_seeds: u64) -> anyhow::Result<()> {
    let base = run_config(args)?;
    let variants = match variants {
        Some(list) => parse_variants(list)?,
        None => Variant::default_grid(base.stage_widths.len()),
    };
    if num_seeds == 0 {
        bail!("num_seeds must be positive");
    }
    let seeds: Vec<u64> = (base.seed..base.seed + num_seeds).collect();
    let ds = read_dataset(&args.data)?;
    out_dir(&args.out)?;
    let table = run_ablation(&base, &variants, &seeds, &ds, &grid(&args.fpr_grid), |r| {
        println!("{} seed {}: ave {:.4} std {:.4}", r.variant, r.seed.unwrap_or_default(), r.ave, r.std);
    })?;
    write_json(&args.out.join("ablation.json"), &table)?;
    fs::write(args.out.join("ablation.csv"), table.to_csv())
        .with_context(|| format!("writing {}", args.out.display()))?;
    if variants.contains(&Variant::Pct) && variants.contains(&Variant::NoCt) {
        let (wins, total) = table.std_wins(&Variant::Pct, &Variant::NoCt);
        println!("pct std below no-ct on {wins}/{total} seeds");
    }
    Ok(())
}

fn cmd_export(checkpoint: &Path, data: &Path, out: &Path, sample: usize) -> anyhow::Result<()> {
    let model = Model::load(checkpoint)?;
    let ds = read_dataset(data)?;
    let Some(s) = ds.test.get(sample) else {
        bail!("sample {sample} out of range: {} test images", ds.test.len());
    };
    let maps = attention_maps(&model, &s.image)?;
    if maps.is_empty() {
        bail!("the checkpoint has no CT stages");
    }
    out_dir(out)?;
    let files = write_attention(out, &maps)?;
    println!("wrote {} files for {}", files.len(), s.rel_path());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate { config, out, seed } => cmd_generate(config.as_deref(), &out, seed),
        Command::Train { run } => cmd_train(&run),
        Command::Eval {
            checkpoint,
            data,
            pairs,
            out,
            fpr_grid,
            published,
        } => {
            if published {
                return cmd_published(&out);
            }
            let (Some(checkpoint), Some(data)) = (checkpoint, data) else {
                bail!("--checkpoint and --data are required");
            };
            cmd_eval(&checkpoint, &data, pairs.as_deref(), &out, &grid(&fpr_grid))
        }
        Command::Ablate {
            run,
            variants,
            num_seeds,
        } => cmd_ablate(&run, variants.as_deref(), num_seeds),
        Command::ExportAttn {
            checkpoint,
            data,
            out,
            sample,
        } => cmd_export(&checkpoint, &data, &out, sample),
    }
}

/// Caps the worker pool used for embedding extraction.
fn init_threads() -> Result<(), String> {
    let Ok(value) = std::env::var("PCT_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("PCT_THREADS must be a positive integer, got {value:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(msg) = init_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(1);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
