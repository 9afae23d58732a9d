//! Structure-recovery metrics over off-diagonal ordered pairs.

use serde::{Deserialize, Serialize};

use crate::data::{ordered_pairs, CausalGraph, EdgeMatrix};
use crate::error::{contract, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureScore {
    pub acc: f64,
    pub auroc: f64,
    pub n_edges_evaluated: usize,
}

/// Fraction of off-diagonal pairs on which `pred` and `truth` agree.
pub fn structural_accuracy(pred: &CausalGraph, truth: &CausalGraph) -> Result<f64> {
    let n = truth.n_nodes();
    if pred.n_nodes() != n {
        return Err(contract!("graphs over {} and {n} nodes", pred.n_nodes()));
    }
    let pairs = ordered_pairs(n);
    if pairs.is_empty() {
        return Err(contract!("accuracy needs at least two nodes"));
    }
    let agree = pairs
        .iter()
        .filter(|&&(i, j)| pred.has_edge(i, j) == truth.has_edge(i, j))
        .count();
    Ok(agree as f64 / pairs.len() as f64)
}

/// Mann–Whitney AUROC of real scores against binary labels, ties counted as one half.
pub fn auroc_scores(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(contract!("{} scores for {} labels", scores.len(), labels.len()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs both classes, got {n_pos} positives and {n_neg} negatives"
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(contract!("scores contain NaN"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // Ranks start..end (1-based start+1..=end) share their mean.
        let avg_rank = (start + 1 + end) as f64 / 2.0;
        let pos_in_group = order[start..end].iter().filter(|&&k| labels[k]).count();
        rank_sum_pos += avg_rank * pos_in_group as f64;
        start = end;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * q))
}

/// AUROC of edge scores against a ground-truth graph, diagonal excluded.
pub fn auroc(edge_probs: &EdgeMatrix, truth: &CausalGraph) -> Result<f64> {
    let n = truth.n_nodes();
    if edge_probs.n_nodes() != n {
        return Err(contract!("scores over {} nodes, truth over {n}", edge_probs.n_nodes()));
    }
    let labels: Vec<bool> = ordered_pairs(n).iter().map(|&(i, j)| truth.has_edge(i, j)).collect();
    auroc_scores(&edge_probs.pair_values(), &labels)
}

pub fn score_structure(edge_probs: &EdgeMatrix, threshold: f64, truth: &CausalGraph) -> Result<StructureScore> {
    let n = truth.n_nodes();
    Ok(StructureScore {
        acc: structural_accuracy(&edge_probs.threshold(threshold), truth)?,
        auroc: auroc(edge_probs, truth)?,
        n_edges_evaluated: n * (n - 1),
    })
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
