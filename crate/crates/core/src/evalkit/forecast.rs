//! Multi-step target forecasting errors in normalized units.

use crate::data::{NormalizedShop, ShopSample};
use crate::decoder::rollout_normalized;
use crate::encoder::{encode_shops, infer_graph, EdgeSample};
use crate::error::{contract, Result};
use crate::evalkit::granger::{fit_var, BaselineConfig};
use crate::model::ModelParams;

fn check_horizon(sample: &ShopSample, horizon: usize) -> Result<()> {
    if horizon < 1 || sample.len() <= horizon {
        return Err(contract!(
            "horizon {horizon} needs 1 ≤ M < T (T={})",
            sample.len()
        ));
    }
    Ok(())
}

fn target_mse(pred: &[f64], shop: &NormalizedShop, start: usize) -> f64 {
    let truth = shop.target_series();
    pred.iter()
        .enumerate()
        .map(|(m, p)| (p - truth[start + m]).powi(2))
        .sum::<f64>()
        / pred.len() as f64
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Model target MSE over each shop's final `M` steps (burn-in `T − M`, hard inferred
/// graph), averaged over shops.
pub fn forecast_mse(model: &ModelParams, shops: &[ShopSample], horizon: usize) -> Result<f64> {
    let per_shop = forecast_mse_per_shop(model, shops, horizon)?;
    Ok(mean(&per_shop))
}

pub fn forecast_mse_per_shop(model: &ModelParams, shops: &[ShopSample], horizon: usize) -> Result<Vec<f64>> {
    if shops.is_empty() {
        return Err(contract!("no shops to evaluate"));
    }
    let mut out = Vec::with_capacity(shops.len());
    for sample in shops {
        check_horizon(sample, horizon)?;
        let shop = NormalizedShop::padded(sample, model.config.length)?;
        let logits = encode_shops(&[&shop], model)?.remove(0);
        let z = EdgeSample::hard(&infer_graph(&logits).0);
        let burn_in = shop.len() - horizon;
        let f = rollout_normalized(&shop, &z, burn_in, horizon, model)?;
        out.push(target_mse(&f.target_means(), &shop, burn_in));
    }
    Ok(out)
}

/// Copy-last-value forecast error.
pub fn persistence_mse(shops: &[ShopSample], horizon: usize) -> Result<f64> {
    if shops.is_empty() {
        return Err(contract!("no shops to evaluate"));
    }
    let mut per_shop = Vec::with_capacity(shops.len());
    for sample in shops {
        check_horizon(sample, horizon)?;
        let shop = NormalizedShop::from_sample(sample);
        let start = shop.len() - horizon;
        let last = shop.target_series()[start - 1];
        per_shop.push(target_mse(&vec![last; horizon], &shop, start));
    }
    Ok(mean(&per_shop))
}

/// Ridge-VAR recursive forecast error; the VAR sees only the steps before the horizon.
pub fn var_forecast_mse(shops: &[ShopSample], horizon: usize, cfg: &BaselineConfig) -> Result<f64> {
    if shops.is_empty() {
        return Err(contract!("no shops to evaluate"));
    }
    let mut per_shop = Vec::with_capacity(shops.len());
    for sample in shops {
        check_horizon(sample, horizon)?;
        let shop = NormalizedShop::from_sample(sample);
        let n = shop.n_nodes();
        let start = shop.len() - horizon;
        let history = &shop.obs()[..start * n];
        cfg.validate(start)?;
        let var = fit_var(history, n, cfg.lag, cfg.ridge)?;
        let pred: Vec<f64> = var.forecast(history, horizon).iter().map(|r| r[n - 1]).collect();
        per_shop.push(target_mse(&pred, &shop, start));
    }
    Ok(mean(&per_shop))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn persistence_on_a_constant_tail_is_exact() {
        let y = vec![1.0, 3.0, 2.0, 2.0, 2.0];
        let s = ShopSample::new(1, vec![0.0; 5], y, vec![]).unwrap();
        assert_eq!(persistence_mse(&[s.clone()], 2).unwrap(), 0.0);
        assert!(persistence_mse(&[s], 5).is_err());
    }
}
