//! Structure evaluation over shops and the `metrics.json` document.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{CausalGraph, EdgeMatrix, NormalizedShop, ShopSample};
use crate::encoder::{encode_shops, gumbel_sample, infer_graph, EDGE_THRESHOLD};
use crate::error::{contract, Result};
use crate::evalkit::metrics::{mean_std, score_structure, StructureScore};
use crate::model::ModelParams;
use crate::rng::{substream, Purpose};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureSummary {
    pub acc_mean: f64,
    pub acc_std: f64,
    pub auroc_mean: f64,
    pub auroc_std: f64,
    pub per_shop: Vec<StructureScore>,
}

impl StructureSummary {
    pub fn from_scores(per_shop: Vec<StructureScore>) -> Self {
        let acc: Vec<f64> = per_shop.iter().map(|s| s.acc).collect();
        let auc: Vec<f64> = per_shop.iter().map(|s| s.auroc).collect();
        let (acc_mean, acc_std) = mean_std(&acc);
        let (auroc_mean, auroc_std) = mean_std(&auc);
        StructureSummary {
            acc_mean,
            acc_std,
            auroc_mean,
            auroc_std,
            per_shop,
        }
    }
}

fn normalized(shops: &[ShopSample], model: &ModelParams) -> Result<Vec<NormalizedShop>> {
    shops
        .iter()
        .map(|s| NormalizedShop::padded(s, model.config.length))
        .collect()
}

fn check_pairs(shops: &[ShopSample], graphs: &[CausalGraph]) -> Result<()> {
    if shops.is_empty() || shops.len() != graphs.len() {
        return Err(contract!("{} shops but {} graphs", shops.len(), graphs.len()));
    }
    Ok(())
}

/// Noise-free edge probabilities scored against each shop's true graph.
pub fn evaluate_structure(model: &ModelParams, shops: &[ShopSample], graphs: &[CausalGraph]) -> Result<StructureSummary> {
    check_pairs(shops, graphs)?;
    let norm = normalized(shops, model)?;
    let mut scores = Vec::with_capacity(shops.len());
    for (shop, truth) in norm.iter().zip(graphs) {
        let logits = encode_shops(&[shop], model)?.remove(0);
        let (_, probs) = infer_graph(&logits);
        scores.push(score_structure(&probs, EDGE_THRESHOLD, truth)?);
    }
    Ok(StructureSummary::from_scores(scores))
}

/// Shop-averaged ACC/AUROC for each of `draws` relaxed posterior samples; the
/// summary's mean/std run over draws.
pub fn posterior_structure(
    model: &ModelParams,
    shops: &[ShopSample],
    graphs: &[CausalGraph],
    draws: usize,
    tau: f64,
    seed: u64,
) -> Result<StructureSummary> {
    check_pairs(shops, graphs)?;
    if draws < 1 {
        return Err(contract!("need at least one posterior draw"));
    }
    let norm = normalized(shops, model)?;
    let logits: Vec<_> = norm
        .iter()
        .map(|s| encode_shops(&[s], model).map(|mut v| v.remove(0)))
        .collect::<Result<_>>()?;
    let n = model.config.n_nodes();
    let mut per_draw = Vec::with_capacity(draws);
    for draw in 0..draws {
        let mut acc = 0.0;
        let mut auc = 0.0;
        for (k, (l, truth)) in logits.iter().zip(graphs).enumerate() {
            let mut rng = substream(seed, Purpose::EvalNoise, &[draw as u64, k as u64]);
            let z = gumbel_sample(l, tau, &mut rng)?;
            let probs = EdgeMatrix::from_pairs(n, &z.edge_weights());
            let s = score_structure(&probs, EDGE_THRESHOLD, truth)?;
            acc += s.acc;
            auc += s.auroc;
        }
        let k = graphs.len() as f64;
        per_draw.push(StructureScore {
            acc: acc / k,
            auroc: auc / k,
            n_edges_evaluated: n * (n - 1),
        });
    }
    Ok(StructureSummary::from_scores(per_draw))
}

/// Contents of `metrics.json`; fields are filled in by whichever commands ran.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acc_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acc_std: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auroc_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auroc_std: Option<f64>,
    /// Noise-free (posterior mode) structure metrics averaged over shops.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acc_noise_free: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auroc_noise_free: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub mse: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub baseline: BTreeMap<String, serde_json::Value>,
}
