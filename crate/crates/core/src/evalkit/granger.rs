//! Linear Granger baseline: ridge-regularized VAR fitted by closed-form normal equations.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{EdgeMatrix, ShopSample};
use crate::error::{contract, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub lag: usize,
    pub ridge: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig { lag: 5, ridge: 1.0 }
    }
}

impl BaselineConfig {
    pub fn validate(&self, length: usize) -> Result<()> {
        if self.lag < 1 || self.lag >= length {
            return Err(contract!("need 1 ≤ lag < T, got lag {} for T={length}", self.lag));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(contract!("ridge must be nonnegative, got {}", self.ridge));
        }
        Ok(())
    }
}

/// A fitted VAR(lag) on centered series: `x_t - m = Σ_k A_k (x_{t-k} - m)`.
#[derive(Clone, Debug)]
pub struct VarModel {
    pub lag: usize,
    pub n: usize,
    /// `(n·lag) × n`; row `k·n + i` holds the coefficient of `x_i^{t-k-1}`.
    pub coef: DMatrix<f64>,
    pub mean: Vec<f64>,
}

/// Fits a ridge VAR on `len × n` row-major series.
pub fn fit_var(series: &[f64], n: usize, lag: usize, ridge: f64) -> Result<VarModel> {
    let len = series.len() / n;
    if lag < 1 || lag >= len {
        return Err(contract!("need 1 ≤ lag < T, got lag {lag} for T={len}"));
    }
    let mean: Vec<f64> = (0..n)
        .map(|j| (0..len).map(|t| series[t * n + j]).sum::<f64>() / len as f64)
        .collect();
    let rows = len - lag;
    let design = DMatrix::from_fn(rows, n * lag, |r, c| {
        let (k, i) = (c / n, c % n);
        series[(r + lag - k - 1) * n + i] - mean[i]
    });
    let target = DMatrix::from_fn(rows, n, |r, j| series[(r + lag) * n + j] - mean[j]);
    let mut gram = design.transpose() * &design;
    for k in 0..n * lag {
        gram[(k, k)] += ridge;
    }
    let rhs = design.transpose() * target;
    let chol = gram.cholesky().ok_or_else(|| {
        if ridge == 0.0 {
            Error::Numeric(
                "singular normal equations in the VAR fit; use a ridge penalty > 0".into(),
            )
        } else {
            Error::Numeric(format!("VAR normal equations not positive definite at ridge {ridge}"))
        }
    })?;
    Ok(VarModel {
        lag,
        n,
        coef: chol.solve(&rhs),
        mean,
    })
}

impl VarModel {
    /// Recursive forecast of `horizon` rows following the given history (`≥ lag` rows).
    pub fn forecast(&self, history: &[f64], horizon: usize) -> Vec<Vec<f64>> {
        let n = self.n;
        let mut buf: Vec<Vec<f64>> = history
            .chunks(n)
            .rev()
            .take(self.lag)
            .map(|row| row.iter().zip(&self.mean).map(|(v, m)| v - m).collect())
            .collect();
        // buf[0] is the most recent row.
        let mut out = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            let lagged = DVector::from_fn(n * self.lag, |c, _| buf[c / n][c % n]);
            let next: Vec<f64> = (self.coef.transpose() * lagged).iter().copied().collect();
            out.push(next.iter().zip(&self.mean).map(|(v, m)| v + m).collect());
            buf.insert(0, next);
            buf.truncate(self.lag);
        }
        out
    }
}

fn zscore_nodes(sample: &ShopSample) -> Vec<f64> {
    let n = sample.n_nodes();
    let len = sample.len();
    let mut out = vec![0.0; len * n];
    for j in 0..n {
        let s = sample.node_series(j);
        let mean = s.iter().sum::<f64>() / len as f64;
        let sd = (s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len as f64).sqrt();
        let sd = if sd > 1e-12 { sd } else { 1.0 };
        for t in 0..len {
            out[t * n + j] = (s[t] - mean) / sd;
        }
    }
    out
}

/// Edge scores `Σ_k |A_k[j, i]|` for `i → j`, min-max scaled to `[0,1]`, diagonal 0.
/// Series are z-scored first, so scores do not depend on per-series units.
pub fn linear_granger(sample: &ShopSample, cfg: &BaselineConfig) -> Result<EdgeMatrix> {
    cfg.validate(sample.len())?;
    let n = sample.n_nodes();
    let model = fit_var(&zscore_nodes(sample), n, cfg.lag, cfg.ridge)?;
    let mut scores = EdgeMatrix::zeros(n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let s: f64 = (0..cfg.lag).map(|k| model.coef[(k * n + i, j)].abs()).sum();
                scores.set(i, j, s);
            }
        }
    }
    let vals = scores.pair_values();
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let v = if range > 0.0 { (scores.get(i, j) - lo) / range } else { 0.0 };
                scores.set(i, j, v);
            }
        }
    }
    Ok(scores)
}
