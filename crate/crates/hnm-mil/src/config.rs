//! Run configuration with paper-default hyperparameters.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

fn d_top_k() -> usize { 10 }
fn d_w_bag_loss() -> f64 { 0.5 }
fn d_w_rank() -> f64 { 0.1 }
fn d_r_p() -> f64 { 0.2 }
fn d_r_n() -> f64 { 0.05 }
fn d_pseudo_threshold() -> f64 { 0.3 }
fn d_temperature() -> f64 { 0.5 }
fn d_aggregator_epochs() -> usize { 350 }
fn d_finetune_epochs() -> usize { 25 }
fn d_learning_rate() -> f64 { 0.0001 }
fn d_iterations() -> usize { 5 }
fn d_seed() -> u64 { 0 }
fn d_hidden_dims() -> Vec<usize> { vec![64] }
fn d_embedding_dim() -> usize { 32 }
fn d_proj_dim() -> usize { 16 }
fn d_query_dim() -> usize { 16 }
fn d_n_same() -> usize { 8 }
fn d_n_diff() -> usize { 8 }
fn d_train_frac() -> f64 { 0.6 }
fn d_val_frac() -> f64 { 0.2 }

/// Every hyperparameter of a training run. Serialized with explicit
/// values so each run directory carries one auditable artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Top-K size of the ranking loss.
    #[serde(default = "d_top_k")]
    pub top_k: usize,
    /// Cross-entropy weight in the combined aggregator loss.
    #[serde(default = "d_w_bag_loss")]
    pub w_bag_loss: f64,
    /// Ranking-loss weight in the combined aggregator loss.
    #[serde(default = "d_w_rank")]
    pub w_rank: f64,
    /// Positive-bank fraction.
    #[serde(default = "d_r_p")]
    pub r_p: f64,
    /// Hard-negative-bank fraction.
    #[serde(default = "d_r_n")]
    pub r_n: f64,
    /// Pseudo-label score threshold (strictly exceed to mark positive).
    #[serde(default = "d_pseudo_threshold")]
    pub pseudo_threshold: f64,
    /// Contrastive temperature.
    #[serde(default = "d_temperature")]
    pub temperature: f64,
    #[serde(default = "d_aggregator_epochs")]
    pub aggregator_epochs: usize,
    #[serde(default = "d_finetune_epochs")]
    pub finetune_epochs: usize,
    #[serde(default = "d_learning_rate")]
    pub learning_rate: f64,
    /// Self-training iterations after the baseline.
    #[serde(default = "d_iterations")]
    pub iterations: usize,
    /// Master seed; every stream in the run derives from it.
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default = "d_hidden_dims")]
    pub hidden_dims: Vec<usize>,
    #[serde(default = "d_embedding_dim")]
    pub embedding_dim: usize,
    #[serde(default = "d_proj_dim")]
    pub proj_dim: usize,
    /// Attention query dimension of the aggregator.
    #[serde(default = "d_query_dim")]
    pub query_dim: usize,
    /// Same-pseudo-label partners sampled per anchor.
    #[serde(default = "d_n_same")]
    pub n_same: usize,
    /// Different-pseudo-label partners sampled per anchor.
    #[serde(default = "d_n_diff")]
    pub n_diff: usize,
    /// Carry aggregator parameters across iterations instead of
    /// re-initializing.
    #[serde(default)]
    pub warm_start: bool,
    /// L2-normalize contrastive projections.
    #[serde(default = "crate::config::default_true")]
    pub normalize_projection: bool,
    #[serde(default = "d_train_frac")]
    pub train_frac: f64,
    #[serde(default = "d_val_frac")]
    pub val_frac: f64,
}

pub(crate) fn default_true() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults are total")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, detail: String| {
            if ok {
                Ok(())
            } else {
                Err(Error::Validation(format!("config field {field}: {detail}")))
            }
        };
        check(self.top_k >= 1, "top_k", format!("must be >= 1, got {}", self.top_k))?;
        check(
            self.w_bag_loss > 0.0,
            "w_bag_loss",
            format!("must be > 0, got {}", self.w_bag_loss),
        )?;
        check(self.w_rank >= 0.0, "w_rank", format!("must be >= 0, got {}", self.w_rank))?;
        check(
            self.r_p > 0.0 && self.r_p <= 1.0,
            "r_p",
            format!("must be in (0, 1], got {}", self.r_p),
        )?;
        check(
            self.r_n > 0.0 && self.r_n <= 1.0,
            "r_n",
            format!("must be in (0, 1], got {}", self.r_n),
        )?;
        check(
            (0.0..1.0).contains(&self.pseudo_threshold),
            "pseudo_threshold",
            format!("must be in [0, 1), got {}", self.pseudo_threshold),
        )?;
        check(
            self.temperature > 0.0,
            "temperature",
            format!("must be > 0, got {}", self.temperature),
        )?;
        check(
            self.learning_rate > 0.0,
            "learning_rate",
            format!("must be > 0, got {}", self.learning_rate),
        )?;
        check(
            self.embedding_dim >= 2,
            "embedding_dim",
            format!("must be >= 2, got {}", self.embedding_dim),
        )?;
        check(
            self.proj_dim >= 1 && self.query_dim >= 1,
            "proj_dim",
            "projection and query dims must be >= 1".into(),
        )?;
        check(
            self.n_same >= 1,
            "n_same",
            format!("must be >= 1, got {}", self.n_same),
        )?;
        check(
            self.train_frac > 0.0
                && self.train_frac < 1.0
                && self.val_frac > 0.0
                && self.val_frac < 1.0
                && self.train_frac + self.val_frac < 1.0,
            "train_frac",
            format!(
                "fractions must lie in (0, 1) and sum below 1, got {}/{}",
                self.train_frac, self.val_frac
            ),
        )?;
        Ok(())
    }
}
