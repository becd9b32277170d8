//! The self-training loop: train the aggregator on current embeddings,
//! pseudo-label the training instances, build the instance banks, fine-tune
//! the encoder contrastively, re-embed everything, and repeat.
//!
//! Iteration 0 is the baseline (aggregator training only); each later
//! iteration runs the full cycle. The loop keeps the iteration whose
//! validation bag AUC is highest. All randomness derives from the master
//! seed, so a run is a pure function of (dataset, config) up to wall-clock
//! timings, which are reported separately from the deterministic artifacts.

use crate::aggregator::{
    self, bag_predict, instance_scores, AggregatorParams, AggregatorTrainConfig, EpochStats,
};
use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::contrastive::{
    build_banks, finetune_encoder, BagSide, FinetuneConfig, FinetuneStats, InstanceBanks,
    PseudoLabelRow, PseudoLabelTable,
};
use crate::data::{split, Dataset};
use crate::encoder::{EncoderArch, EncoderParams};
use crate::error::Result;
use crate::eval::MetricReport;
use crate::numerics::{Graph, Tensor};
use crate::seeds::{self, Stream};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;
use std::time::Instant;

/// Classification threshold for accuracy reporting (not the pseudo-label
/// threshold, which comes from the config).
pub const EVAL_THRESHOLD: f64 = 0.5;

/// Scores for one dataset under a fixed model pair.
pub struct ScoredBags {
    /// One bag probability per bag.
    pub bag_probs: Vec<f64>,
    /// Instance scores, one vector per bag.
    pub instance_scores: Vec<Vec<f64>>,
}

/// Score every bag and instance with the given encoder and aggregator.
pub fn score_bags(
    encoder: &EncoderParams,
    aggregator: &AggregatorParams,
    dataset: &Dataset,
) -> Result<ScoredBags> {
    let mut bag_probs = Vec::with_capacity(dataset.bags.len());
    let mut per_bag = Vec::with_capacity(dataset.bags.len());
    for bag in &dataset.bags {
        let rows: Vec<Vec<f64>> = bag.instances.iter().map(|i| i.features.clone()).collect();
        let h = encoder.embed_rows(&rows)?;
        let g = Graph::new();
        let vars = aggregator.vars(&g);
        let hv = g.input(h);
        let fwd = bag_predict(&g, &vars, hv)?;
        bag_probs.push(g.value_scalar(fwd.probability));
        per_bag.push(g.value(fwd.scores).data().to_vec());
    }
    Ok(ScoredBags {
        bag_probs,
        instance_scores: per_bag,
    })
}

/// Evaluate a model pair on a dataset. Instance metrics appear only when
/// every instance carries a truth label.
pub fn evaluate(
    encoder: &EncoderParams,
    aggregator: &AggregatorParams,
    dataset: &Dataset,
) -> Result<MetricReport> {
    let scored = score_bags(encoder, aggregator, dataset)?;
    let bag_labels: Vec<u8> = dataset.bags.iter().map(|b| b.label).collect();
    let instance = if dataset.has_truth_labels() {
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for (bag, s) in dataset.bags.iter().zip(&scored.instance_scores) {
            scores.extend_from_slice(s);
            labels.extend(bag.instances.iter().map(|i| i.truth_label.unwrap()));
        }
        Some((scores, labels))
    } else {
        None
    };
    MetricReport::compute(
        &scored.bag_probs,
        &bag_labels,
        instance.as_ref().map(|(s, l)| (s.as_slice(), l.as_slice())),
        EVAL_THRESHOLD,
    )
}

/// Score every training instance and attach pseudo-labels: positive-bag
/// instances are labeled 1 iff their score strictly exceeds `threshold`;
/// negative-bag instances are labeled 0 unconditionally.
pub fn assign_pseudo_labels(
    encoder: &EncoderParams,
    aggregator: &AggregatorParams,
    dataset: &Dataset,
    threshold: f64,
) -> Result<PseudoLabelTable> {
    let mut table = PseudoLabelTable::default();
    for (bag_index, bag) in dataset.bags.iter().enumerate() {
        let rows: Vec<Vec<f64>> = bag.instances.iter().map(|i| i.features.clone()).collect();
        let h = encoder.embed_rows(&rows)?;
        let g = Graph::new();
        let vars = aggregator.vars(&g);
        let s = instance_scores(&g, &vars, g.input(h))?;
        let scores = g.value(s);
        let source = if bag.label == 1 {
            BagSide::Positive
        } else {
            BagSide::Negative
        };
        for (instance_index, &score) in scores.data().iter().enumerate() {
            let pseudo_label = match source {
                BagSide::Positive => u8::from(score > threshold),
                BagSide::Negative => 0,
            };
            table.rows.push(PseudoLabelRow {
                bag_index,
                bag_id: bag.id.clone(),
                instance_index,
                score,
                pseudo_label,
                source,
            });
        }
    }
    Ok(table)
}

/// Wall-clock seconds per phase of one iteration. Reported separately from
/// the deterministic artifacts.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub pseudo_label: f64,
    pub bank_build: f64,
    pub finetune: f64,
    pub embed: f64,
    pub aggregator: f64,
    pub evaluate: f64,
}

/// Deterministic summary of one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Counts encoder updates; re-embedding must observe every bump.
    pub embedding_version: u64,
    pub bank_pos: usize,
    pub bank_neg: usize,
    pub skipped_finetune: bool,
    pub finetune: Option<FinetuneStats>,
    pub val: MetricReport,
}

/// Everything one iteration produced.
pub struct IterationOutput {
    pub record: IterationRecord,
    pub history: Vec<EpochStats>,
    pub pseudo: Option<PseudoLabelTable>,
    pub banks: Option<InstanceBanks>,
    pub checkpoint: Checkpoint,
    pub timings: PhaseTimings,
}

/// A finished run: `iterations.len() == config.iterations + 1` (baseline
/// included), plus the dataset splits the run used.
pub struct RunOutcome {
    pub iterations: Vec<IterationOutput>,
    /// Index of the iteration with the best validation bag AUC (earliest on
    /// ties).
    pub best_iteration: usize,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl RunOutcome {
    pub fn best(&self) -> &Checkpoint {
        &self.iterations[self.best_iteration].checkpoint
    }

    pub fn records(&self) -> Vec<IterationRecord> {
        self.iterations.iter().map(|i| i.record.clone()).collect()
    }
}

fn embed_all(encoder: &EncoderParams, dataset: &Dataset) -> Result<Vec<Tensor>> {
    dataset
        .bags
        .iter()
        .map(|b| {
            let rows: Vec<Vec<f64>> = b.instances.iter().map(|i| i.features.clone()).collect();
            encoder.embed_rows(&rows)
        })
        .collect()
}

fn seconds(since: Instant) -> f64 {
    since.elapsed().as_secs_f64()
}

/// Run the full self-training loop on `dataset` under `cfg`.
pub fn run(dataset: &Dataset, cfg: &TrainConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let (train, val, test) = split(
        dataset,
        cfg.train_frac,
        cfg.val_frac,
        seeds::derive(cfg.seed, Stream::Split, 0),
    )?;

    let mut arch_dims = vec![dataset.d_in];
    arch_dims.extend_from_slice(&cfg.hidden_dims);
    arch_dims.push(cfg.embedding_dim);
    let arch = EncoderArch {
        dims: arch_dims,
        proj_dim: cfg.proj_dim,
        normalize: cfg.normalize_projection,
    };
    let mut encoder =
        EncoderParams::init(arch, &mut seeds::rng(cfg.seed, Stream::EncoderInit, 0))?;
    let mut embedding_version: u64 = 0;
    let mut embedded_at_version: u64;

    let agg_cfg = AggregatorTrainConfig {
        epochs: cfg.aggregator_epochs,
        learning_rate: cfg.learning_rate,
        top_k: cfg.top_k,
        w_bag_loss: cfg.w_bag_loss,
        w_rank: cfg.w_rank,
    };
    let ft_cfg = FinetuneConfig {
        epochs: cfg.finetune_epochs,
        learning_rate: cfg.learning_rate,
        n_same: cfg.n_same,
        n_diff: cfg.n_diff,
        temperature: cfg.temperature,
    };

    let mut iterations: Vec<IterationOutput> = Vec::with_capacity(cfg.iterations + 1);
    let mut aggregator: Option<AggregatorParams> = None;

    for iteration in 0..=cfg.iterations {
        let mut timings = PhaseTimings::default();
        let mut pseudo = None;
        let mut banks: Option<InstanceBanks> = None;
        let mut finetune_stats = None;

        if iteration > 0 {
            let prev_agg = aggregator.as_ref().expect("baseline ran first");

            let t = Instant::now();
            let table = assign_pseudo_labels(&encoder, prev_agg, &train, cfg.pseudo_threshold)
                .map_err(|e| e.in_phase(iteration, "pseudo-label"))?;
            timings.pseudo_label = seconds(t);

            let t = Instant::now();
            let built = build_banks(&table, cfg.r_p, cfg.r_n, cfg.pseudo_threshold)
                .map_err(|e| e.in_phase(iteration, "bank-build"))?;
            timings.bank_build = seconds(t);

            if !built.skip_finetune() {
                let t = Instant::now();
                let (tuned, stats) = finetune_encoder(
                    encoder.clone(),
                    &train,
                    &built,
                    &ft_cfg,
                    seeds::derive(cfg.seed, Stream::Finetune, iteration as u64),
                )
                .map_err(|e| e.in_phase(iteration, "finetune"))?;
                timings.finetune = seconds(t);
                encoder = tuned;
                embedding_version += 1;
                finetune_stats = Some(stats);
            }
            pseudo = Some(table);
            banks = Some(built);
        }

        // full re-embedding; the aggregator below must never see stale rows
        let t = Instant::now();
        let embeddings =
            embed_all(&encoder, &train).map_err(|e| e.in_phase(iteration, "embed"))?;
        embedded_at_version = embedding_version;
        timings.embed = seconds(t);

        let init = match (&aggregator, cfg.warm_start) {
            (Some(prev), true) => prev.clone(),
            _ => AggregatorParams::init(
                cfg.embedding_dim,
                cfg.query_dim,
                &mut seeds::rng(cfg.seed, Stream::AggregatorInit, iteration as u64),
            ),
        };
        let t = Instant::now();
        assert_eq!(embedded_at_version, embedding_version, "stale embeddings");
        let (trained, history) = aggregator::train_aggregator(
            &train,
            &embeddings,
            init,
            &agg_cfg,
            seeds::derive(cfg.seed, Stream::AggregatorTrain, iteration as u64),
        )
        .map_err(|e| e.in_phase(iteration, "aggregator"))?;
        timings.aggregator = seconds(t);

        let t = Instant::now();
        let val_metrics =
            evaluate(&encoder, &trained, &val).map_err(|e| e.in_phase(iteration, "evaluate"))?;
        timings.evaluate = seconds(t);

        let (bank_pos, bank_neg) = banks
            .as_ref()
            .map_or((0, 0), |b| (b.pos.len(), b.neg.len()));
        iterations.push(IterationOutput {
            record: IterationRecord {
                iteration,
                embedding_version,
                bank_pos,
                bank_neg,
                skipped_finetune: iteration > 0 && finetune_stats.is_none(),
                finetune: finetune_stats,
                val: val_metrics,
            },
            history,
            pseudo,
            banks,
            checkpoint: Checkpoint {
                encoder: encoder.clone(),
                aggregator: trained.clone(),
            },
            timings,
        });
        aggregator = Some(trained);
    }

    let best_iteration = iterations
        .iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| {
            a.record
                .val
                .bag
                .auc
                .partial_cmp(&b.record.val.bag.auc)
                .expect("finite AUC")
                .then(ib.cmp(ia)) // earliest iteration wins ties
        })
        .map(|(i, _)| i)
        .expect("at least the baseline iteration exists");

    Ok(RunOutcome {
        iterations,
        best_iteration,
        train,
        val,
        test,
    })
}

/// Top-level `run.json` contents.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: TrainConfig,
    /// Manifest the data came from, when it came from disk.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_manifest: Option<String>,
    pub best_iteration: usize,
    pub iterations: Vec<IterationRecord>,
}

/// Run the loop and write the run directory:
/// `run.json`, `timings.json`, and one `iter_k/` per iteration holding
/// `model.ckpt`, `metrics.json`, `history.csv`, and (from iteration 1 on)
/// `pseudo_labels.csv`, `banks.csv`, `banks.json`. Timings stay out of
/// every other file so those are byte-deterministic.
pub fn run_to_dir(
    dataset: &Dataset,
    cfg: &TrainConfig,
    out_dir: &Path,
    data_manifest: Option<String>,
) -> Result<RunOutcome> {
    let outcome = run(dataset, cfg)?;
    fs::create_dir_all(out_dir)?;

    for out in &outcome.iterations {
        let dir = out_dir.join(format!("iter_{}", out.record.iteration));
        fs::create_dir_all(&dir)?;
        out.checkpoint.save(&dir.join("model.ckpt"))?;
        fs::write(
            dir.join("metrics.json"),
            serde_json::to_string_pretty(&out.record.val)?,
        )?;
        fs::write(dir.join("history.csv"), aggregator::history_csv(&out.history))?;
        if let Some(pseudo) = &out.pseudo {
            fs::write(dir.join("pseudo_labels.csv"), pseudo.to_csv())?;
        }
        if let Some(banks) = &out.banks {
            fs::write(dir.join("banks.csv"), banks.to_csv(&outcome.train))?;
            fs::write(
                dir.join("banks.json"),
                serde_json::to_string_pretty(&serde_json::json!({
                    "pos": banks.pos.len(),
                    "neg": banks.neg.len(),
                    "build_params": banks.build_params,
                }))?,
            )?;
        }
    }

    let summary = RunSummary {
        config: cfg.clone(),
        data_manifest,
        best_iteration: outcome.best_iteration,
        iterations: outcome.records(),
    };
    fs::write(out_dir.join("run.json"), serde_json::to_string_pretty(&summary)?)?;

    let timings: Vec<serde_json::Value> = outcome
        .iterations
        .iter()
        .map(|o| {
            serde_json::json!({
                "iteration": o.record.iteration,
                "phases": o.timings,
            })
        })
        .collect();
    fs::write(
        out_dir.join("timings.json"),
        serde_json::to_string_pretty(&timings)?,
    )?;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            d_in: 6,
            bags_per_class: 10,
            instances_min: 6,
            instances_max: 10,
            witness_rate: 0.4,
            hard_negative_fraction: 0.3,
            mu_neg: 0.0,
            mu_pos: 2.0,
            alpha: 0.5,
            sigma: 0.5,
            grid_side: 4,
            seed,
        }
    }

    fn quick_cfg(iterations: usize) -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.iterations = iterations;
        cfg.aggregator_epochs = 6;
        cfg.finetune_epochs = 2;
        cfg.learning_rate = 0.01;
        cfg.hidden_dims = vec![8];
        cfg.embedding_dim = 6;
        cfg.proj_dim = 4;
        cfg.query_dim = 4;
        cfg.n_same = 3;
        cfg.n_diff = 3;
        cfg.train_frac = 0.5;
        cfg.val_frac = 0.25;
        cfg.seed = 11;
        cfg
    }

    fn trained_pair(ds: &Dataset) -> (EncoderParams, AggregatorParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let encoder = EncoderParams::init(
            EncoderArch {
                dims: vec![ds.d_in, 6],
                proj_dim: 4,
                normalize: true,
            },
            &mut rng,
        )
        .unwrap();
        let aggregator = AggregatorParams::init(6, 4, &mut rng);
        (encoder, aggregator)
    }

    #[test]
    fn pseudo_labels_cover_every_instance() {
        let ds = generate_synthetic(&spec(1)).unwrap();
        let (enc, agg) = trained_pair(&ds);
        let table = assign_pseudo_labels(&enc, &agg, &ds, 0.3).unwrap();
        assert_eq!(table.rows.len(), ds.n_instances());
        // negative-bag instances are always 0; positive-bag rows obey the
        // strict threshold
        for r in &table.rows {
            match r.source {
                BagSide::Negative => assert_eq!(r.pseudo_label, 0),
                BagSide::Positive => assert_eq!(r.pseudo_label, u8::from(r.score > 0.3)),
            }
        }
    }

    #[test]
    fn pseudo_label_boundary_is_strict() {
        let ds = generate_synthetic(&spec(1)).unwrap();
        let (enc, agg) = trained_pair(&ds);
        // threshold above every possible sigmoid output -> all labels 0
        let table = assign_pseudo_labels(&enc, &agg, &ds, 0.999_999).unwrap();
        assert!(table.rows.iter().all(|r| r.pseudo_label == 0));
    }

    #[test]
    fn zero_iterations_yield_baseline_only() {
        let ds = generate_synthetic(&spec(2)).unwrap();
        let outcome = run(&ds, &quick_cfg(0)).unwrap();
        assert_eq!(outcome.iterations.len(), 1);
        assert_eq!(outcome.best_iteration, 0);
        let r = &outcome.iterations[0].record;
        assert_eq!(r.embedding_version, 0);
        assert!(!r.skipped_finetune);
        assert!(r.pseudo_label_free());
    }

    impl IterationRecord {
        fn pseudo_label_free(&self) -> bool {
            self.bank_pos == 0 && self.bank_neg == 0 && self.finetune.is_none()
        }
    }

    #[test]
    fn n_iterations_yield_n_plus_one_records() {
        let ds = generate_synthetic(&spec(3)).unwrap();
        let outcome = run(&ds, &quick_cfg(2)).unwrap();
        assert_eq!(outcome.iterations.len(), 3);
        for (k, out) in outcome.iterations.iter().enumerate() {
            assert_eq!(out.record.iteration, k);
            let m = &out.record.val;
            assert!(m.bag.auc >= 0.0 && m.bag.auc <= 1.0);
        }
    }

    #[test]
    fn run_is_deterministic() {
        let ds = generate_synthetic(&spec(4)).unwrap();
        let cfg = quick_cfg(1);
        let a = run(&ds, &cfg).unwrap();
        let b = run(&ds, &cfg).unwrap();
        assert_eq!(a.records(), b.records());
        assert_eq!(a.best(), b.best());
    }

    #[test]
    fn embedding_version_tracks_finetunes() {
        let ds = generate_synthetic(&spec(5)).unwrap();
        let outcome = run(&ds, &quick_cfg(2)).unwrap();
        let mut expected = 0;
        for out in &outcome.iterations {
            if out.record.finetune.is_some() {
                expected += 1;
            }
            assert_eq!(out.record.embedding_version, expected);
        }
    }

    #[test]
    fn finetune_instance_budget_holds() {
        let ds = generate_synthetic(&spec(6)).unwrap();
        let cfg = quick_cfg(1);
        let outcome = run(&ds, &cfg).unwrap();
        for out in &outcome.iterations {
            if let Some(ft) = &out.record.finetune {
                let bank_total = out.record.bank_pos + out.record.bank_neg;
                assert!(ft.instances_processed <= bank_total * cfg.finetune_epochs);
            }
        }
    }

    #[test]
    fn run_dir_has_expected_layout() {
        let ds = generate_synthetic(&spec(7)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let outcome = run_to_dir(&ds, &quick_cfg(1), dir.path(), None).unwrap();
        assert!(dir.path().join("run.json").is_file());
        assert!(dir.path().join("timings.json").is_file());
        assert!(dir.path().join("iter_0/model.ckpt").is_file());
        assert!(dir.path().join("iter_0/metrics.json").is_file());
        assert!(dir.path().join("iter_0/history.csv").is_file());
        assert!(!dir.path().join("iter_0/pseudo_labels.csv").exists());
        assert!(dir.path().join("iter_1/pseudo_labels.csv").is_file());
        assert!(dir.path().join("iter_1/banks.csv").is_file());

        // run.json re-parses to the identical config and records
        let text = fs::read_to_string(dir.path().join("run.json")).unwrap();
        let summary: RunSummary = serde_json::from_str(&text).unwrap();
        assert_eq!(summary.config, quick_cfg(1));
        assert_eq!(summary.iterations, outcome.records());

        // checkpoints reload bit-exactly
        let loaded = Checkpoint::load(&dir.path().join(format!(
            "iter_{}/model.ckpt",
            outcome.best_iteration
        )))
        .unwrap();
        assert_eq!(&loaded, outcome.best());
    }
}
