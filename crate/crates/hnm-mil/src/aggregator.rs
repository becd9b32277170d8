//! Dual-stream MIL head.
//!
//! Instance scores come from a linear classifier on embeddings; the bag
//! probability averages (at the logit level) the instance classifier on the
//! max-scoring instance with a bag classifier on an attention-weighted
//! embedding sum. Attention weights are softmax-normalized inner products of
//! learned query projections against the max instance's query, which keeps
//! the aggregated embedding a convex combination. Training adds a hinge
//! ranking loss separating top-K positive-bag scores from top-K
//! negative-bag scores.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{argmax, top_k_indices, Graph, Tensor, Var};
use crate::optim::Adam;
use crate::seeds::{self, Stream};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorParams {
    /// Instance classifier weights `[L]`.
    pub w_ins: Tensor,
    /// Bag classifier weights `[L]`.
    pub w_bag: Tensor,
    /// Attention query transform `[L x q]`.
    pub w_q: Tensor,
}

impl AggregatorParams {
    /// Seeded initialization. The classifier vectors start at zero so every
    /// instance scores exactly 0.5 at step one; a random start instead puts
    /// all scores on one side of 0.5 (embeddings live in the rectified cone),
    /// and the resulting correction phase hits the largest-norm instances
    /// hardest, which can invert the score ordering before top-K selection
    /// ever surfaces the instances the ranking loss needs. From zero the
    /// expected first step points along the positive-minus-negative bag mean.
    /// Only the query transform, which carries no score orientation, draws
    /// random entries.
    pub fn init(embedding_dim: usize, query_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, (1.0 / embedding_dim as f64).sqrt()).expect("positive std");
        AggregatorParams {
            w_ins: Tensor::vector(vec![0.0; embedding_dim]),
            w_bag: Tensor::vector(vec![0.0; embedding_dim]),
            w_q: Tensor::new(
                vec![embedding_dim, query_dim],
                (0..embedding_dim * query_dim).map(|_| normal.sample(rng)).collect(),
            )
            .expect("w_q shape"),
        }
    }

    pub fn flat(&self) -> Vec<Tensor> {
        vec![self.w_ins.clone(), self.w_bag.clone(), self.w_q.clone()]
    }

    pub fn set_flat(&mut self, flat: &[Tensor]) {
        debug_assert_eq!(flat.len(), 3);
        self.w_ins = flat[0].clone();
        self.w_bag = flat[1].clone();
        self.w_q = flat[2].clone();
    }

    pub fn vars(&self, g: &Graph) -> AggregatorVars {
        AggregatorVars {
            w_ins: g.input(self.w_ins.clone()),
            w_bag: g.input(self.w_bag.clone()),
            w_q: g.input(self.w_q.clone()),
        }
    }
}

pub struct AggregatorVars {
    pub w_ins: Var,
    pub w_bag: Var,
    pub w_q: Var,
}

impl AggregatorVars {
    pub fn flat(&self) -> Vec<Var> {
        vec![self.w_ins, self.w_bag, self.w_q]
    }
}

/// Forward pass of one bag, with graph handles for training and plain
/// values for inspection.
pub struct BagForward {
    /// Instance scores in (0, 1).
    pub scores: Var,
    /// Index of the max-scoring instance (ties to the lowest index).
    pub max_index: usize,
    /// Softmax attention weights over instances.
    pub attention: Var,
    /// Bag probability.
    pub probability: Var,
}

/// Instance scores `sigmoid(w_ins . h_i)` for all rows of `h [n x L]`.
pub fn instance_scores(g: &Graph, vars: &AggregatorVars, h: Var) -> Result<Var> {
    Ok(g.sigmoid(g.matvec(h, vars.w_ins)?))
}

/// Softmax attention over instances against the max-scoring instance `m`.
pub fn attention_weights(g: &Graph, vars: &AggregatorVars, h: Var, m: usize) -> Result<Var> {
    let q = g.matmul(h, vars.w_q)?;
    let qm = g.row(q, m)?;
    g.softmax(g.matvec(q, qm)?)
}

/// Dual-stream bag prediction over embeddings `h [n x L]`.
///
/// The instance and bag classifier outputs are averaged at the logit level
/// and squashed once; the choice of the max index is discrete and carries
/// no gradient.
pub fn bag_predict(g: &Graph, vars: &AggregatorVars, h: Var) -> Result<BagForward> {
    let n = g.value(h).rows();
    if n == 0 {
        return Err(Error::EmptyInput("bag_predict".into()));
    }
    let scores = instance_scores(g, vars, h)?;
    let max_index = argmax(g.value(scores).data());
    let attention = attention_weights(g, vars, h, max_index)?;
    let h_max = g.row(h, max_index)?;
    let logit_ins = g.dot(vars.w_ins, h_max)?;
    let aggregated = g.weighted_sum_rows(h, attention)?;
    let logit_bag = g.dot(vars.w_bag, aggregated)?;
    let probability = g.sigmoid(g.scale(g.add(logit_ins, logit_bag)?, 0.5));
    Ok(BagForward {
        scores,
        max_index,
        attention,
        probability,
    })
}

/// Hinge ranking loss between top-K mean scores of a positive and a
/// negative bag: `max(0, 1 - mean(topK(pos)) + mean(topK(neg)))`.
///
/// Top-K takes `min(K, n)` items with ties broken by lowest index and the
/// mean divides by the count actually taken; the subgradient reaches only
/// the selected scores.
pub fn mi_ranking_loss(g: &Graph, pos_scores: Var, neg_scores: Var, k: usize) -> Result<Var> {
    if k == 0 {
        return Err(Error::Contract("mi_ranking_loss needs K >= 1".into()));
    }
    let (pv, nv) = (g.value(pos_scores), g.value(neg_scores));
    if pv.is_empty() || nv.is_empty() {
        return Err(Error::Contract("mi_ranking_loss needs nonempty score lists".into()));
    }
    let top_pos = g.gather(pos_scores, &top_k_indices(pv.data(), k))?;
    let top_neg = g.gather(neg_scores, &top_k_indices(nv.data(), k))?;
    let mean_pos = g.mean(top_pos)?;
    let mean_neg = g.mean(top_neg)?;
    let margin = g.add(g.sub(g.constant(1.0), mean_pos)?, mean_neg)?;
    Ok(g.relu(margin))
}

/// Combined aggregator objective: `w_b * BCE + w_r * rank`.
pub fn mil_loss(
    g: &Graph,
    probability: Var,
    label: u8,
    rank_loss: Option<Var>,
    w_b: f64,
    w_r: f64,
) -> Result<Var> {
    let bce = g.bce(probability, label as f64)?;
    let weighted = g.scale(bce, w_b);
    match rank_loss {
        Some(r) => g.add(weighted, g.scale(r, w_r)),
        None => Ok(weighted),
    }
}

/// Hyperparameters of one aggregator training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregatorTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub top_k: usize,
    pub w_bag_loss: f64,
    pub w_rank: f64,
}

/// Per-epoch loss history row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub bce: f64,
    pub rank: f64,
    pub total: f64,
}

/// Train the aggregator on fixed embeddings (one `[n_i x L]` tensor per
/// bag, aligned with `train.bags`).
///
/// Each epoch pairs every positive bag with a seeded-random negative bag
/// and optimizes the combined loss on the pair's score sets; negative bags
/// left unpaired that epoch contribute a BCE-only step. Updates are
/// sequential, one bag (pair) per Adam step.
pub fn train_aggregator(
    train: &Dataset,
    embeddings: &[Tensor],
    params: AggregatorParams,
    cfg: &AggregatorTrainConfig,
    seed: u64,
) -> Result<(AggregatorParams, Vec<EpochStats>)> {
    if embeddings.len() != train.bags.len() {
        return Err(Error::Contract(format!(
            "embeddings for {} bags, dataset has {}",
            embeddings.len(),
            train.bags.len()
        )));
    }
    let pos_idx = train.positive_bag_indices();
    let neg_idx = train.negative_bag_indices();
    if pos_idx.is_empty() || neg_idx.is_empty() {
        return Err(Error::SingleClass("aggregator training set".into()));
    }

    let mut params = params;
    let mut flat = params.flat();
    let mut adam = Adam::new(cfg.learning_rate, &flat);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut rng = seeds::rng(seed, Stream::AggregatorTrain, epoch as u64);
        let mut paired = vec![false; train.bags.len()];
        let pairs: Vec<(usize, usize)> = pos_idx
            .iter()
            .map(|&p| {
                let n = neg_idx[rng.gen_range(0..neg_idx.len())];
                paired[n] = true;
                (p, n)
            })
            .collect();

        let mut bce_sum = 0.0;
        let mut bce_count = 0usize;
        let mut rank_sum = 0.0;

        let mut step = |flat: &mut Vec<Tensor>,
                        adam: &mut Adam,
                        bag_index: usize,
                        pair_neg: Option<usize>|
         -> Result<(f64, Option<f64>)> {
            let g = Graph::new();
            params.set_flat(flat);
            let vars = params.vars(&g);
            let h = g.input(embeddings[bag_index].clone());
            let fwd = bag_predict(&g, &vars, h)?;
            let rank = match pair_neg {
                Some(nb) => {
                    let hn = g.input(embeddings[nb].clone());
                    let neg_scores = instance_scores(&g, &vars, hn)?;
                    Some(mi_ranking_loss(&g, fwd.scores, neg_scores, cfg.top_k)?)
                }
                None => None,
            };
            let label = train.bags[bag_index].label;
            let loss = mil_loss(&g, fwd.probability, label, rank, cfg.w_bag_loss, cfg.w_rank)?;
            let bce_value = {
                // recover the unweighted pieces for the history row
                let total = g.value_scalar(loss);
                let rank_value = rank.map(|r| g.value_scalar(r));
                let bce = (total - cfg.w_rank * rank_value.unwrap_or(0.0)) / cfg.w_bag_loss;
                (bce, rank_value)
            };
            let grads = g.backward(loss)?;
            let grad_tensors: Vec<Tensor> = vars.flat().iter().map(|&v| grads.get(v)).collect();
            adam.step(flat, &grad_tensors);
            Ok(bce_value)
        };

        for &(p, nb) in &pairs {
            let (bce, rank) = step(&mut flat, &mut adam, p, Some(nb))?;
            bce_sum += bce;
            bce_count += 1;
            rank_sum += rank.expect("pair step has rank term");
        }
        for &nb in &neg_idx {
            if !paired[nb] {
                let (bce, _) = step(&mut flat, &mut adam, nb, None)?;
                bce_sum += bce;
                bce_count += 1;
            }
        }

        let bce = bce_sum / bce_count as f64;
        let rank = rank_sum / pairs.len() as f64;
        history.push(EpochStats {
            epoch,
            bce,
            rank,
            total: cfg.w_bag_loss * bce + cfg.w_rank * rank,
        });
    }

    params.set_flat(&flat);
    Ok((params, history))
}

/// Write the per-epoch history as CSV `epoch,bce,rank,total`.
pub fn history_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,bce,rank,total\n");
    for row in history {
        out.push_str(&format!("{},{},{},{}\n", row.epoch, row.bce, row.rank, row.total));
    }
    out
}
