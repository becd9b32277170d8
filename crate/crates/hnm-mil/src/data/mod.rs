//! Bag/instance data model, synthetic generation, feature-file ingestion,
//! and dataset splits.

mod formats;
mod split;
mod synthetic;

pub use formats::{load_features, read_milf, save_dataset, write_milf};
pub use split::{k_folds, split};
pub use synthetic::{generate_synthetic, SyntheticSpec};

use crate::error::{Error, Result};
use std::path::PathBuf;

/// One instance (patch) of a bag. Truth labels exist only for synthetic or
/// evaluation data and are never visible to training.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub features: Vec<f64>,
    pub truth_label: Option<u8>,
    pub coord: Option<(u32, u32)>,
}

/// A labeled bag of instances. Label 0 means every instance is negative.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub id: String,
    pub label: u8,
    pub instances: Vec<Instance>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    Synthetic(SyntheticSpec),
    Manifest(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub bags: Vec<Bag>,
    pub d_in: usize,
    pub provenance: Provenance,
}

impl Dataset {
    /// Validates the structural invariants shared by every data source.
    pub fn validate(&self) -> Result<()> {
        if self.bags.is_empty() {
            return Err(Error::Validation("dataset has no bags".into()));
        }
        for bag in &self.bags {
            if bag.instances.is_empty() {
                return Err(Error::Validation(format!("bag {} is empty", bag.id)));
            }
            if bag.label > 1 {
                return Err(Error::Validation(format!(
                    "bag {} has non-binary label {}",
                    bag.id, bag.label
                )));
            }
            for (j, inst) in bag.instances.iter().enumerate() {
                if inst.features.len() != self.d_in {
                    return Err(Error::Validation(format!(
                        "bag {} instance {j}: feature length {} != d_in {}",
                        bag.id,
                        inst.features.len(),
                        self.d_in
                    )));
                }
                if !inst.features.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite(format!("bag {} instance {j}", bag.id)));
                }
                if let Some(t) = inst.truth_label {
                    if t > 1 {
                        return Err(Error::Validation(format!(
                            "bag {} instance {j}: non-binary truth label {t}",
                            bag.id
                        )));
                    }
                    if bag.label == 0 && t != 0 {
                        return Err(Error::Validation(format!(
                            "bag {} is negative but instance {j} has truth label 1",
                            bag.id
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn n_instances(&self) -> usize {
        self.bags.iter().map(|b| b.instances.len()).sum()
    }

    pub fn positive_bag_indices(&self) -> Vec<usize> {
        (0..self.bags.len()).filter(|&i| self.bags[i].label == 1).collect()
    }

    pub fn negative_bag_indices(&self) -> Vec<usize> {
        (0..self.bags.len()).filter(|&i| self.bags[i].label == 0).collect()
    }

    pub fn has_both_classes(&self) -> bool {
        !self.positive_bag_indices().is_empty() && !self.negative_bag_indices().is_empty()
    }

    pub fn has_truth_labels(&self) -> bool {
        self.bags
            .iter()
            .all(|b| b.instances.iter().all(|i| i.truth_label.is_some()))
    }

    /// Sub-dataset with the given bag indices, preserving order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            bags: indices.iter().map(|&i| self.bags[i].clone()).collect(),
            d_in: self.d_in,
            provenance: self.provenance.clone(),
        }
    }
}
