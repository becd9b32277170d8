//! Pseudo-label-driven instance banks and supervised contrastive
//! fine-tuning.
//!
//! The positive bank keeps the top slice of confidently-scored positive-bag
//! instances; the hard-negative bank keeps the highest-scoring fraction of
//! negative-bag instances (guaranteed-negative by the MIL definition, but
//! the ones that most resemble positives). Fine-tuning pulls same-bank
//! projections together and pushes cross-bank projections apart.

use crate::data::Dataset;
use crate::encoder::{encode_rows, project_rows, EncoderParams};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::optim::Adam;
use crate::seeds::{self, Stream};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Which side of the MIL dataset an instance came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BagSide {
    Positive,
    Negative,
}

impl BagSide {
    pub fn as_str(self) -> &'static str {
        match self {
            BagSide::Positive => "positive-bag",
            BagSide::Negative => "negative-bag",
        }
    }
}

/// One scored instance of one self-training iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelRow {
    pub bag_index: usize,
    pub bag_id: String,
    pub instance_index: usize,
    pub score: f64,
    pub pseudo_label: u8,
    pub source: BagSide,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PseudoLabelTable {
    pub rows: Vec<PseudoLabelRow>,
}

impl PseudoLabelTable {
    /// CSV with header `bag_id,instance_index,score,pseudo_label,source`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bag_id,instance_index,score,pseudo_label,source\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.bag_id,
                r.instance_index,
                r.score,
                r.pseudo_label,
                r.source.as_str()
            ));
        }
        out
    }
}

/// Reference into a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceRef {
    pub bag_index: usize,
    pub instance_index: usize,
}

/// Parameters a bank pair was built with, recorded alongside the banks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankBuildParams {
    pub r_p: f64,
    pub r_n: f64,
    pub threshold: f64,
}

/// The positive and hard-negative instance banks.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceBanks {
    pub pos: Vec<InstanceRef>,
    pub neg: Vec<InstanceRef>,
    pub build_params: BankBuildParams,
}

impl InstanceBanks {
    /// An empty bank means this iteration skips fine-tuning; it is a
    /// signal, not an error.
    pub fn skip_finetune(&self) -> bool {
        self.pos.is_empty() || self.neg.is_empty()
    }

    /// CSV of references: `bank,bag_id,instance_index` (bag ids resolved
    /// against `dataset`).
    pub fn to_csv(&self, dataset: &Dataset) -> String {
        let mut out = String::from("bank,bag_id,instance_index\n");
        for (name, refs) in [("pos", &self.pos), ("neg", &self.neg)] {
            for r in refs {
                out.push_str(&format!(
                    "{name},{},{}\n",
                    dataset.bags[r.bag_index].id, r.instance_index
                ));
            }
        }
        out
    }
}

fn sorted_descending(mut rows: Vec<&PseudoLabelRow>) -> Vec<&PseudoLabelRow> {
    rows.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("non-finite score in bank build")
            .then_with(|| a.bag_id.cmp(&b.bag_id))
            .then(a.instance_index.cmp(&b.instance_index))
    });
    rows
}

/// Build the instance banks from a pseudo-label table.
///
/// Positive bank: positive-bag instances scoring strictly above
/// `threshold`, score-descending, truncated to `ceil(r_p * count of
/// positive-bag instances)`. Negative bank: all negative-bag instances
/// score-descending, truncated to `ceil(r_n * count of negative-bag
/// instances)`. Ties break by `(bag_id, instance_index)`.
pub fn build_banks(
    table: &PseudoLabelTable,
    r_p: f64,
    r_n: f64,
    threshold: f64,
) -> Result<InstanceBanks> {
    if !(r_p > 0.0 && r_p <= 1.0) || !(r_n > 0.0 && r_n <= 1.0) {
        return Err(Error::Validation(format!(
            "bank ratios must lie in (0, 1], got r_p={r_p} r_n={r_n}"
        )));
    }
    if table.rows.is_empty() {
        return Err(Error::EmptyInput("build_banks table".into()));
    }
    let pos_total = table.rows.iter().filter(|r| r.source == BagSide::Positive).count();
    let neg_total = table.rows.len() - pos_total;

    let pos_rows = sorted_descending(
        table
            .rows
            .iter()
            .filter(|r| r.source == BagSide::Positive && r.score > threshold)
            .collect(),
    );
    let neg_rows = sorted_descending(
        table.rows.iter().filter(|r| r.source == BagSide::Negative).collect(),
    );

    let pos_cap = (r_p * pos_total as f64).ceil() as usize;
    let neg_cap = (r_n * neg_total as f64).ceil() as usize;
    let as_refs = |rows: &[&PseudoLabelRow], cap: usize| -> Vec<InstanceRef> {
        rows.iter()
            .take(cap)
            .map(|r| InstanceRef {
                bag_index: r.bag_index,
                instance_index: r.instance_index,
            })
            .collect()
    };
    let banks = InstanceBanks {
        pos: as_refs(&pos_rows, pos_cap),
        neg: as_refs(&neg_rows, neg_cap),
        build_params: BankBuildParams { r_p, r_n, threshold },
    };
    debug_assert!(banks.pos.iter().all(|p| !banks.neg.contains(p)));
    Ok(banks)
}

/// Sample contrastive partners for `anchor`: same-bank instances (minus the
/// anchor) and cross-bank instances, without replacement, truncated to bank
/// size. Deterministic in `seed`.
pub fn sample_pairs(
    banks: &InstanceBanks,
    anchor: InstanceRef,
    n_same: usize,
    n_diff: usize,
    seed: u64,
) -> Result<(Vec<InstanceRef>, Vec<InstanceRef>)> {
    let (same_bank, diff_bank) = if banks.pos.contains(&anchor) {
        (&banks.pos, &banks.neg)
    } else if banks.neg.contains(&anchor) {
        (&banks.neg, &banks.pos)
    } else {
        return Err(Error::Contract(format!(
            "anchor {anchor:?} belongs to neither bank"
        )));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |candidates: Vec<InstanceRef>, n: usize| -> Vec<InstanceRef> {
        let mut c = candidates;
        let take = n.min(c.len());
        for i in 0..take {
            let j = rng.gen_range(i..c.len());
            c.swap(i, j);
        }
        c.truncate(take);
        c
    };
    let same = draw(
        same_bank.iter().copied().filter(|&r| r != anchor).collect(),
        n_same,
    );
    let diff = draw(diff_bank.to_vec(), n_diff);
    Ok((same, diff))
}

/// Supervised contrastive loss for one anchor.
///
/// With `sim(a, b) = exp(a . b / tau)`, the loss is the mean over
/// same-label partners `s` of `-log(sim(z, z_s) / (sum_S sim + sum_D sim))`.
/// `same [ns x p]` needs at least one row; `diff` may be absent.
pub fn supcon_loss(
    g: &Graph,
    anchor: Var,
    same: Var,
    diff: Option<Var>,
    tau: f64,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Validation(format!("temperature must be > 0, got {tau}")));
    }
    if g.value(same).rows() == 0 {
        return Err(Error::Contract("supcon_loss needs at least one same-label partner".into()));
    }
    let d_same = g.scale(g.matvec(same, anchor)?, 1.0 / tau);
    let mut denom = g.sum(g.exp(d_same));
    if let Some(diff) = diff {
        let d_diff = g.scale(g.matvec(diff, anchor)?, 1.0 / tau);
        denom = g.add(denom, g.sum(g.exp(d_diff)))?;
    }
    g.sub(g.ln(denom)?, g.mean(d_same)?)
}

/// Hyperparameters of one fine-tuning phase.
#[derive(Debug, Clone)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub n_same: usize,
    pub n_diff: usize,
    pub temperature: f64,
}

/// What the fine-tuning phase touched.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneStats {
    /// Anchors stepped, summed over epochs.
    pub instances_processed: usize,
    pub mean_final_epoch_loss: f64,
}

fn features_of(dataset: &Dataset, r: InstanceRef) -> Vec<f64> {
    dataset.bags[r.bag_index].instances[r.instance_index]
        .features
        .clone()
}

/// Fine-tune the encoder on the banks with the supervised contrastive
/// loss. Anchors iterate over `pos` then `neg` in a per-epoch seeded
/// shuffle; each anchor takes one Adam step. Deterministic in `seed`.
pub fn finetune_encoder(
    params: EncoderParams,
    dataset: &Dataset,
    banks: &InstanceBanks,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<(EncoderParams, FinetuneStats)> {
    if banks.skip_finetune() {
        return Err(Error::Contract(
            "finetune_encoder called with an empty bank; caller should skip".into(),
        ));
    }
    let mut params = params;
    let mut flat = params.flat();
    let mut adam = Adam::new(cfg.learning_rate, &flat);
    let mut stats = FinetuneStats::default();

    let anchors: Vec<InstanceRef> =
        banks.pos.iter().chain(banks.neg.iter()).copied().collect();

    for epoch in 0..cfg.epochs {
        let mut rng = seeds::rng(seed, Stream::Finetune, epoch as u64);
        let mut order: Vec<usize> = (0..anchors.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0usize;
        for (slot, &ai) in order.iter().enumerate() {
            let anchor = anchors[ai];
            let pair_seed = seeds::derive(
                seed,
                Stream::PairSampling,
                ((epoch as u64) << 32) | slot as u64,
            );
            let (same, diff) =
                sample_pairs(banks, anchor, cfg.n_same, cfg.n_diff, pair_seed)?;
            if same.is_empty() {
                continue;
            }

            let g = Graph::new();
            params.set_flat(&flat);
            let vars = params.vars(&g);
            let step = (|| -> Result<(f64, Vec<Tensor>)> {
                let project = |x_rows: &[Vec<f64>]| -> Result<Var> {
                    let x = g.input(Tensor::from_rows(x_rows)?);
                    project_rows(&g, &vars, encode_rows(&g, &vars, x)?)
                };
                let anchor_z = g.row(project(&[features_of(dataset, anchor)])?, 0)?;
                let same_rows: Vec<Vec<f64>> =
                    same.iter().map(|&r| features_of(dataset, r)).collect();
                let same_z = project(&same_rows)?;
                let diff_z = if diff.is_empty() {
                    None
                } else {
                    let diff_rows: Vec<Vec<f64>> =
                        diff.iter().map(|&r| features_of(dataset, r)).collect();
                    Some(project(&diff_rows)?)
                };
                let loss = supcon_loss(&g, anchor_z, same_z, diff_z, cfg.temperature)?;
                let grads = g.backward(loss)?;
                Ok((
                    g.value_scalar(loss),
                    vars.flat().iter().map(|&v| grads.get(v)).collect(),
                ))
            })();
            let (loss_value, grad_tensors) = match step {
                Ok(v) => v,
                // a relu-dead instance projects to the zero vector, where the
                // normalized similarity is undefined; skip that anchor rather
                // than abort the run (the skip is deterministic)
                Err(Error::DegenerateInput(_)) => continue,
                Err(e) => return Err(e),
            };
            epoch_loss += loss_value;
            epoch_steps += 1;
            adam.step(&mut flat, &grad_tensors);
            stats.instances_processed += 1;
        }
        if epoch_steps > 0 {
            stats.mean_final_epoch_loss = epoch_loss / epoch_steps as f64;
        }
    }
    params.set_flat(&flat);
    Ok((params, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::encoder::EncoderArch;

    fn row(
        bag_index: usize,
        instance_index: usize,
        score: f64,
        source: BagSide,
    ) -> PseudoLabelRow {
        PseudoLabelRow {
            bag_index,
            bag_id: format!("bag_{bag_index:03}"),
            instance_index,
            score,
            pseudo_label: u8::from(source == BagSide::Positive && score > 0.3),
            source,
        }
    }

    #[test]
    fn negative_bank_takes_top_fraction() {
        let mut table = PseudoLabelTable::default();
        for i in 0..100 {
            table.rows.push(row(0, i, i as f64 / 100.0, BagSide::Negative));
        }
        table.rows.push(row(1, 0, 0.9, BagSide::Positive));
        let banks = build_banks(&table, 0.2, 0.05, 0.3).unwrap();
        // 100 negative instances, r_n = 0.05 -> the 5 highest
        assert_eq!(banks.neg.len(), 5);
        let picked: Vec<usize> = banks.neg.iter().map(|r| r.instance_index).collect();
        assert_eq!(picked, vec![99, 98, 97, 96, 95]);
    }

    #[test]
    fn empty_positive_bank_is_a_skip_signal() {
        let mut table = PseudoLabelTable::default();
        for i in 0..10 {
            table.rows.push(row(0, i, 0.2, BagSide::Positive));
            table.rows.push(row(1, i, 0.5, BagSide::Negative));
        }
        let banks = build_banks(&table, 0.2, 0.05, 0.3).unwrap();
        assert!(banks.pos.is_empty());
        assert!(banks.skip_finetune());
    }

    #[test]
    fn positive_bank_filters_then_caps() {
        let mut table = PseudoLabelTable::default();
        for i in 0..10 {
            table.rows.push(row(0, i, 0.1 * i as f64, BagSide::Positive));
        }
        table.rows.push(row(9, 0, 0.5, BagSide::Negative));
        // 10 positive-bag rows, cap = ceil(0.3*10) = 3; scores > 0.3: indices 4..9
        let banks = build_banks(&table, 0.3, 1.0, 0.3).unwrap();
        let picked: Vec<usize> = banks.pos.iter().map(|r| r.instance_index).collect();
        assert_eq!(picked, vec![9, 8, 7]);
    }

    #[test]
    fn ratio_out_of_range_rejected() {
        let table = PseudoLabelTable {
            rows: vec![row(0, 0, 0.5, BagSide::Negative)],
        };
        assert!(build_banks(&table, 0.0, 0.05, 0.3).is_err());
        assert!(build_banks(&table, 0.2, 1.5, 0.3).is_err());
    }

    fn demo_banks() -> InstanceBanks {
        InstanceBanks {
            pos: vec![
                InstanceRef { bag_index: 0, instance_index: 0 },
                InstanceRef { bag_index: 0, instance_index: 1 },
                InstanceRef { bag_index: 1, instance_index: 0 },
            ],
            neg: vec![InstanceRef { bag_index: 2, instance_index: 4 }],
            build_params: BankBuildParams { r_p: 0.2, r_n: 0.05, threshold: 0.3 },
        }
    }

    #[test]
    fn pair_sampling_respects_banks() {
        let banks = demo_banks();
        let anchor = banks.pos[0];
        let (same, diff) = sample_pairs(&banks, anchor, 2, 1, 11).unwrap();
        assert_eq!(same.len(), 2);
        assert!(!same.contains(&anchor));
        assert!(same.iter().all(|r| banks.pos.contains(r)));
        assert_eq!(diff, banks.neg);

        // anchor in the negative bank mirrors the roles
        let (same_n, diff_n) = sample_pairs(&banks, banks.neg[0], 5, 5, 11).unwrap();
        assert!(same_n.is_empty());
        assert_eq!(diff_n.len(), 3);

        // truncation: more requested than available
        let (same_t, _) = sample_pairs(&banks, anchor, 5, 0, 11).unwrap();
        assert_eq!(same_t.len(), 2);

        let stranger = InstanceRef { bag_index: 9, instance_index: 9 };
        assert!(sample_pairs(&banks, stranger, 1, 1, 11).is_err());
    }

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    fn supcon_value(anchor: Vec<f64>, same: Vec<Vec<f64>>, diff: Vec<Vec<f64>>, tau: f64) -> f64 {
        let g = Graph::new();
        let a = g.input(Tensor::vector(anchor));
        let s = g.input(Tensor::from_rows(&same).unwrap());
        let d = if diff.is_empty() {
            None
        } else {
            Some(g.input(Tensor::from_rows(&diff).unwrap()))
        };
        g.value_scalar(supcon_loss(&g, a, s, d, tau).unwrap())
    }

    #[test]
    fn supcon_degenerate_and_symmetric_cases() {
        let a = unit(vec![1.0, 1.0]);
        // |S| = 1, |D| = 0 -> -log(1) = 0
        let v = supcon_value(a.clone(), vec![a.clone()], vec![], 0.5);
        assert!(v.abs() < 1e-12, "{v}");
        // |S| = 1, |D| = 1 with equal similarities -> log 2
        let sym = supcon_value(
            unit(vec![1.0, 0.0]),
            vec![unit(vec![0.0, 1.0])],
            vec![unit(vec![0.0, -1.0])],
            0.5,
        );
        assert!((sym - std::f64::consts::LN_2).abs() < 1e-12, "{sym}");
        // large tau: every similarity tends to e^0, loss -> log 2
        let flat = supcon_value(
            unit(vec![1.0, 0.0]),
            vec![unit(vec![0.3, 0.7])],
            vec![unit(vec![-0.9, 0.1])],
            1e9,
        );
        assert!((flat - std::f64::consts::LN_2).abs() < 1e-9, "{flat}");
    }

    #[test]
    fn supcon_is_nonnegative() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut v = |n: usize| -> Vec<Vec<f64>> {
                (0..n)
                    .map(|_| unit((0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()))
                    .collect()
            };
            let anchor = v(1).pop().unwrap();
            let same = v(3);
            let diff = v(2);
            assert!(supcon_value(anchor, same, diff, 0.5) >= 0.0);
        }
    }

    fn small_dataset() -> Dataset {
        generate_synthetic(&SyntheticSpec {
            d_in: 4,
            bags_per_class: 3,
            instances_min: 6,
            instances_max: 8,
            witness_rate: 0.5,
            hard_negative_fraction: 0.3,
            mu_neg: 0.0,
            mu_pos: 2.0,
            alpha: 0.5,
            sigma: 0.4,
            grid_side: 0,
            seed: 31,
        })
        .unwrap()
    }

    fn truth_banks(ds: &Dataset) -> InstanceBanks {
        // truth-labeled banks, small, for focused fine-tuning tests
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (bi, bag) in ds.bags.iter().enumerate() {
            for (ii, inst) in bag.instances.iter().enumerate() {
                let r = InstanceRef { bag_index: bi, instance_index: ii };
                if inst.truth_label == Some(1) {
                    pos.push(r);
                } else if bag.label == 0 {
                    neg.push(r);
                }
            }
        }
        neg.truncate(6);
        InstanceBanks {
            pos,
            neg,
            build_params: BankBuildParams { r_p: 1.0, r_n: 1.0, threshold: 0.0 },
        }
    }

    fn cfg(epochs: usize) -> FinetuneConfig {
        FinetuneConfig {
            epochs,
            learning_rate: 1e-3,
            n_same: 4,
            n_diff: 4,
            temperature: 0.5,
        }
    }

    fn init_encoder(seed: u64) -> EncoderParams {
        EncoderParams::init(
            EncoderArch { dims: vec![4, 8, 4], proj_dim: 3, normalize: true },
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap()
    }

    #[test]
    fn zero_epochs_leave_encoder_unchanged() {
        let ds = small_dataset();
        let banks = truth_banks(&ds);
        let init = init_encoder(1);
        let (out, stats) = finetune_encoder(init.clone(), &ds, &banks, &cfg(0), 5).unwrap();
        assert_eq!(out, init);
        assert_eq!(stats.instances_processed, 0);
    }

    #[test]
    fn finetune_is_deterministic_and_bounded() {
        let ds = small_dataset();
        let banks = truth_banks(&ds);
        let init = init_encoder(1);
        let (a, sa) = finetune_encoder(init.clone(), &ds, &banks, &cfg(3), 5).unwrap();
        let (b, sb) = finetune_encoder(init, &ds, &banks, &cfg(3), 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        assert!(sa.instances_processed <= (banks.pos.len() + banks.neg.len()) * 3);
    }

    #[test]
    fn finetune_tightens_positive_bank_cosines() {
        let ds = small_dataset();
        let banks = truth_banks(&ds);
        let init = init_encoder(2);
        let mean_cos = |p: &EncoderParams| -> f64 {
            let zs: Vec<Vec<f64>> = banks
                .pos
                .iter()
                .map(|&r| p.project(&p.encode(&features_of(&ds, r)).unwrap()).unwrap())
                .collect();
            let mut acc = 0.0;
            let mut count = 0usize;
            for i in 0..zs.len() {
                for j in i + 1..zs.len() {
                    acc += zs[i].iter().zip(&zs[j]).map(|(a, b)| a * b).sum::<f64>();
                    count += 1;
                }
            }
            acc / count as f64
        };
        let before = mean_cos(&init);
        let (tuned, _) = finetune_encoder(init, &ds, &banks, &cfg(8), 5).unwrap();
        let after = mean_cos(&tuned);
        assert!(after > before, "cosine {before} -> {after} did not tighten");
    }

    #[test]
    fn empty_bank_rejected() {
        let ds = small_dataset();
        let mut banks = truth_banks(&ds);
        banks.pos.clear();
        assert!(finetune_encoder(init_encoder(1), &ds, &banks, &cfg(1), 5).is_err());
    }
}
