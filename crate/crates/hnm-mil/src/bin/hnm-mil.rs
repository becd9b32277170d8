//! Command-line front end: data generation, training, evaluation, and the
//! two ablation sweeps (hard-negative ratio and ranking-loss weight).
//!
//! Exit codes: 0 on success, 2 when inputs fail validation, 1 on any other
//! runtime failure.

use clap::{Parser, Subcommand};
use hnm_mil::checkpoint::Checkpoint;
use hnm_mil::config::TrainConfig;
use hnm_mil::data::{generate_synthetic, load_features, save_dataset, split, Dataset, SyntheticSpec};
use hnm_mil::error::{Error, Result};
use hnm_mil::eval::emit_heatmap;
use hnm_mil::selftrain::{self, run_to_dir, RunSummary};
use hnm_mil::seeds::{self, Stream};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

#[derive(Parser)]
#[command(name = "hnm-mil", version, about = "Hard-negative-mining self-training for MIL")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a spec file into a data directory.
    GenData {
        /// JSON file describing the synthetic dataset.
        #[arg(long)]
        config: PathBuf,
        /// Output directory for manifest.json and feature files.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the self-training loop and write a run directory.
    Train {
        /// Training config JSON; missing fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Data directory (with manifest.json), a manifest file, or a
        /// synthetic spec JSON.
        #[arg(long)]
        data: PathBuf,
        /// Run directory to create.
        #[arg(long)]
        out: PathBuf,
        /// Master seed override.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate the best checkpoint of a finished run on one split.
    Evaluate {
        /// Run directory written by `train`.
        run_dir: PathBuf,
        /// Split to evaluate: train, val, or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Also write one heatmap CSV+PPM per positive coord-bearing bag.
        #[arg(long)]
        heatmaps: bool,
        /// Output directory; defaults to `<run_dir>/eval_<split>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Ablation sweeps over the hard-negative ratio or the ranking weight.
    Ablate {
        /// Training config JSON; missing fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Data source, as for `train`.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for per-arm runs and the comparison CSV.
        #[arg(long)]
        out: PathBuf,
        /// `negatives` (r_n sweep) or `ranking` (w_r on/off).
        #[arg(long)]
        mode: String,
        /// Seeds to repeat each arm over; may repeat. Defaults to the
        /// config seed.
        #[arg(long = "seed")]
        seeds: Vec<u64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData { config, out } => cmd_gen_data(&config, &out),
        Command::Train { config, data, out, seed } => cmd_train(config.as_deref(), &data, &out, seed),
        Command::Evaluate { run_dir, split, heatmaps, out } => {
            cmd_evaluate(&run_dir, &split, heatmaps, out.as_deref())
        }
        Command::Ablate { config, data, out, mode, seeds } => {
            cmd_ablate(config.as_deref(), &data, &out, &mode, &seeds)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    let cfg: TrainConfig = match path {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)
            .map_err(|e| Error::Validation(format!("config {}: {e}", p.display())))?,
        None => TrainConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Load a dataset from a directory with `manifest.json`, a manifest file,
/// or a synthetic spec JSON. Returns the dataset and the source path as
/// recorded in `run.json`.
fn load_data(path: &Path) -> Result<(Dataset, String)> {
    if !path.exists() {
        return Err(Error::Validation(format!("data path {} does not exist", path.display())));
    }
    let manifest = if path.is_dir() { path.join("manifest.json") } else { path.to_path_buf() };
    if manifest.file_name().map_or(false, |n| n == "manifest.json") {
        let ds = load_features(&manifest)?;
        return Ok((ds, manifest.display().to_string()));
    }
    let spec: SyntheticSpec = serde_json::from_str(&fs::read_to_string(&manifest)?)
        .map_err(|e| Error::Validation(format!("synthetic spec {}: {e}", manifest.display())))?;
    Ok((generate_synthetic(&spec)?, manifest.display().to_string()))
}

fn cmd_gen_data(spec_path: &Path, out: &Path) -> Result<()> {
    let spec: SyntheticSpec = serde_json::from_str(&fs::read_to_string(spec_path)?)
        .map_err(|e| Error::Validation(format!("synthetic spec {}: {e}", spec_path.display())))?;
    let dataset = generate_synthetic(&spec)?;
    let manifest = save_dataset(&dataset, out)?;
    println!(
        "wrote {} bags ({} instances) to {}",
        dataset.bags.len(),
        dataset.n_instances(),
        manifest.display()
    );
    Ok(())
}

fn cmd_train(config: Option<&Path>, data: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let (dataset, source) = load_data(data)?;
    let outcome = run_to_dir(&dataset, &cfg, out, Some(source))?;
    for rec in outcome.records() {
        println!(
            "iter {}: val bag auc {:.4}{}{}",
            rec.iteration,
            rec.val.bag.auc,
            rec.val
                .instance
                .as_ref()
                .map(|m| format!(", instance auc {:.4}", m.auc))
                .unwrap_or_default(),
            if rec.skipped_finetune { " (fine-tune skipped)" } else { "" },
        );
    }
    println!("best iteration: {} -> {}", outcome.best_iteration, out.display());
    Ok(())
}

fn pick_split<'a>(
    splits: (&'a Dataset, &'a Dataset, &'a Dataset),
    name: &str,
) -> Result<&'a Dataset> {
    match name {
        "train" => Ok(splits.0),
        "val" => Ok(splits.1),
        "test" => Ok(splits.2),
        other => Err(Error::Validation(format!(
            "unknown split {other:?}; expected train, val, or test"
        ))),
    }
}

fn cmd_evaluate(run_dir: &Path, split_name: &str, heatmaps: bool, out: Option<&Path>) -> Result<()> {
    let summary_path = run_dir.join("run.json");
    let summary: RunSummary = serde_json::from_str(&fs::read_to_string(&summary_path)?)
        .map_err(|e| Error::Validation(format!("run summary {}: {e}", summary_path.display())))?;
    let data_path = summary.data_manifest.ok_or_else(|| {
        Error::Validation(format!("{} records no data source", summary_path.display()))
    })?;
    let (dataset, _) = load_data(Path::new(&data_path))?;
    let cfg = &summary.config;
    let (train, val, test) = split(
        &dataset,
        cfg.train_frac,
        cfg.val_frac,
        seeds::derive(cfg.seed, Stream::Split, 0),
    )?;
    let target = pick_split((&train, &val, &test), split_name)?;

    let ckpt = Checkpoint::load(
        &run_dir.join(format!("iter_{}", summary.best_iteration)).join("model.ckpt"),
    )?;
    let report = selftrain::evaluate(&ckpt.encoder, &ckpt.aggregator, target)?;
    let json = serde_json::to_string_pretty(&report)?;

    let out_dir = out.map(Path::to_path_buf).unwrap_or_else(|| run_dir.join(format!("eval_{split_name}")));
    fs::create_dir_all(&out_dir)?;
    fs::write(out_dir.join("metrics.json"), &json)?;
    println!("{json}");

    if heatmaps {
        let scored = selftrain::score_bags(&ckpt.encoder, &ckpt.aggregator, target)?;
        let mut emitted = 0;
        for (bag, scores) in target.bags.iter().zip(&scored.instance_scores) {
            if bag.label == 1 && bag.instances.iter().all(|i| i.coord.is_some()) {
                emit_heatmap(
                    bag,
                    scores,
                    cfg.pseudo_threshold,
                    &out_dir.join(format!("{}.heatmap.csv", bag.id)),
                    &out_dir.join(format!("{}.heatmap.ppm", bag.id)),
                )?;
                emitted += 1;
            }
        }
        println!("wrote {emitted} heatmaps to {}", out_dir.display());
    }
    Ok(())
}

/// One ablation arm: run the loop, evaluate the best checkpoint on the test
/// split, and count fine-tune work.
struct ArmResult {
    bag_acc: f64,
    bag_auc: f64,
    instance_auc: Option<f64>,
    finetune_instances: usize,
    seconds: f64,
}

fn run_arm(dataset: &Dataset, cfg: &TrainConfig, out_dir: &Path) -> Result<ArmResult> {
    let started = Instant::now();
    let outcome = run_to_dir(dataset, cfg, out_dir, None)?;
    let ckpt = outcome.best();
    let report = selftrain::evaluate(&ckpt.encoder, &ckpt.aggregator, &outcome.test)?;
    let finetune_instances = outcome
        .records()
        .iter()
        .filter_map(|r| r.finetune.as_ref().map(|f| f.instances_processed))
        .sum();
    Ok(ArmResult {
        bag_acc: report.bag.acc,
        bag_auc: report.bag.auc,
        instance_auc: report.instance.map(|m| m.auc),
        finetune_instances,
        seconds: started.elapsed().as_secs_f64(),
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

const NEGATIVE_RATIOS: [f64; 5] = [0.02, 0.05, 0.10, 0.20, 1.00];
const RANKING_WEIGHTS: [f64; 2] = [0.0, 0.1];

fn cmd_ablate(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    mode: &str,
    seeds: &[u64],
) -> Result<()> {
    let base = load_config(config)?;
    let (dataset, _) = load_data(data)?;
    let seeds: Vec<u64> = if seeds.is_empty() { vec![base.seed] } else { seeds.to_vec() };
    fs::create_dir_all(out)?;

    let csv = match mode {
        "negatives" => {
            let mut csv = String::from("seed,ratio,bag_acc,bag_auc,instance_auc,finetune_instances,seconds\n");
            for &seed in &seeds {
                for &r_n in &NEGATIVE_RATIOS {
                    let mut cfg = base.clone();
                    cfg.seed = seed;
                    cfg.r_n = r_n;
                    let arm_dir = out.join(format!("negatives_seed{seed}_rn{r_n}"));
                    let arm = run_arm(&dataset, &cfg, &arm_dir)?;
                    csv.push_str(&format!(
                        "{seed},{r_n},{},{},{},{},{}\n",
                        arm.bag_acc,
                        arm.bag_auc,
                        fmt_opt(arm.instance_auc),
                        arm.finetune_instances,
                        arm.seconds,
                    ));
                }
            }
            csv
        }
        "ranking" => {
            let mut csv = String::from("seed,w_rank,bag_acc,bag_auc,instance_auc\n");
            for &seed in &seeds {
                for &w_r in &RANKING_WEIGHTS {
                    let mut cfg = base.clone();
                    cfg.seed = seed;
                    cfg.w_rank = w_r;
                    let arm_dir = out.join(format!("ranking_seed{seed}_wr{w_r}"));
                    let arm = run_arm(&dataset, &cfg, &arm_dir)?;
                    csv.push_str(&format!(
                        "{seed},{w_r},{},{},{}\n",
                        arm.bag_acc,
                        arm.bag_auc,
                        fmt_opt(arm.instance_auc),
                    ));
                }
            }
            csv
        }
        other => {
            return Err(Error::Validation(format!(
                "unknown ablation mode {other:?}; expected negatives or ranking"
            )))
        }
    };
    let csv_path = out.join(format!("{mode}.csv"));
    fs::write(&csv_path, &csv)?;
    print!("{csv}");
    println!("wrote {}", csv_path.display());
    Ok(())
}
