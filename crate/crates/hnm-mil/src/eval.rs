//! Instance- and bag-level metrics, plus score-heatmap emission.
//!
//! AUC is the exact tie-aware Mann-Whitney statistic (probability a random
//! positive outscores a random negative, ties at half) rather than a
//! trapezoidal ROC integral. AUPRC is the step-wise (non-interpolated)
//! precision-recall area over descending-score thresholds with tied scores
//! grouped.

use crate::data::Bag;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

/// Fraction of points where `(score > threshold)` matches the label.
/// A score exactly at the threshold predicts 0.
pub fn accuracy(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::EmptyInput(format!(
            "accuracy needs equal nonempty inputs, got {} scores / {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(s, &l)| u8::from(**s > threshold) == l)
        .count();
    Ok(hits as f64 / scores.len() as f64)
}

/// Tie-aware Mann-Whitney AUC via average ranks.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("auc", &[scores.len()], &[labels.len()]));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "auc needs both classes present".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .expect("non-finite score in auc")
            .then(a.cmp(&b))
    });
    // average ranks over tie groups, 1-based
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Step-wise area under the precision-recall curve, tied scores grouped.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("auprc", &[scores.len()], &[labels.len()]));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    if n_pos == 0 {
        return Err(Error::UndefinedMetric("auprc needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("non-finite score in auprc")
            .then(a.cmp(&b))
    });
    let mut area = 0.0;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / n_pos as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Ok(area)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceMetrics {
    pub acc: f64,
    pub auc: f64,
    pub auprc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagMetrics {
    pub acc: f64,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub bags: usize,
    pub instances: usize,
}

/// Metric surface of one evaluation. Instance metrics are present only
/// when truth labels exist.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub instance: Option<InstanceMetrics>,
    pub bag: BagMetrics,
    pub counts: Counts,
}

impl MetricReport {
    /// Bag scores/labels are required; instance scores/labels optional.
    pub fn compute(
        bag_scores: &[f64],
        bag_labels: &[u8],
        instance_scores: Option<(&[f64], &[u8])>,
        threshold: f64,
    ) -> Result<MetricReport> {
        let bag = BagMetrics {
            acc: accuracy(bag_scores, bag_labels, threshold)?,
            auc: auc(bag_scores, bag_labels)?,
        };
        let (instance, n_inst) = match instance_scores {
            Some((s, l)) => (
                Some(InstanceMetrics {
                    acc: accuracy(s, l, threshold)?,
                    auc: auc(s, l)?,
                    auprc: auprc(s, l)?,
                }),
                s.len(),
            ),
            None => (None, 0),
        };
        Ok(MetricReport {
            instance,
            bag,
            counts: Counts {
                bags: bag_scores.len(),
                instances: n_inst,
            },
        })
    }
}

/// Write a score heatmap for one coordinate-bearing bag: a CSV grid
/// `row,col,score,visible` and a binary PPM (P6) render. Scores strictly
/// below `alpha_threshold` are invisible (background); a score exactly at
/// the threshold is visible.
pub fn emit_heatmap(
    bag: &Bag,
    scores: &[f64],
    alpha_threshold: f64,
    csv_path: &Path,
    ppm_path: &Path,
) -> Result<()> {
    if scores.len() != bag.instances.len() {
        return Err(Error::shape("emit_heatmap", &[bag.instances.len()], &[scores.len()]));
    }
    let coords: Vec<(u32, u32)> = bag
        .instances
        .iter()
        .map(|i| {
            i.coord.ok_or_else(|| {
                Error::Validation(format!("bag {} has instances without coords", bag.id))
            })
        })
        .collect::<Result<_>>()?;

    let mut csv = String::from("row,col,score,visible\n");
    for ((r, c), &s) in coords.iter().zip(scores) {
        let visible = u8::from(s >= alpha_threshold);
        csv.push_str(&format!("{r},{c},{s},{visible}\n"));
    }
    fs::write(csv_path, csv)?;

    let rows = coords.iter().map(|&(r, _)| r).max().unwrap_or(0) as usize + 1;
    let cols = coords.iter().map(|&(_, c)| c).max().unwrap_or(0) as usize + 1;
    // white background; visible cells shade toward red with score
    let mut pixels = vec![255u8; rows * cols * 3];
    for ((r, c), &s) in coords.iter().zip(scores) {
        if s >= alpha_threshold {
            let base = ((*r as usize) * cols + *c as usize) * 3;
            let cool = ((1.0 - s.clamp(0.0, 1.0)) * 255.0).round() as u8;
            pixels[base] = 255;
            pixels[base + 1] = cool;
            pixels[base + 2] = cool;
        }
    }
    let mut ppm = format!("P6\n{cols} {rows}\n255\n").into_bytes();
    ppm.extend_from_slice(&pixels);
    fs::write(ppm_path, ppm)?;
    Ok(())
}
