//! Joint encoder–decoder training on the negative ELBO: one-step Gaussian NLL plus
//! a λ-weighted KL to a sparse factorized edge prior.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{CausalGraph, NormalizedShop, ShopSample};
use crate::decoder::{curve_terms, teacher_forced_nll, ShopTerms, TeacherBatch};
use crate::diffcore::{adam_step, AdamHyper, AdamState, Bound, GradientMap, ParamSet, Tape, Tensor, Var};
use crate::encoder::{check_tau, encode_on_tape, encode_shops, gumbel_noise, infer_graph, EdgeLogits};
use crate::error::{contract, Error, Result};
use crate::evalkit::auroc;
use crate::model::{ModelConfig, ModelParams};
use crate::rng::{substream, Purpose, Rng};

/// Shops per tape. Fixed so results do not depend on the thread count.
pub const MICRO_BATCH: usize = 4;
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub tau: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub prior_edge_prob: f64,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub train_m: usize,
    /// Decoder hidden width.
    pub hidden: usize,
    /// Encoder hidden width.
    pub encoder_hidden: usize,
    pub sigma: f64,
    /// Forward hard one-hot samples while keeping the relaxed gradient.
    pub straight_through: bool,
    /// Epochs over which the KL weight ramps linearly from λ/warmup to λ.
    /// Validation always uses the full λ.
    pub kl_warmup: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 10.0,
            tau: 0.5,
            lr: 2e-3,
            epochs: 300,
            batch: 4,
            prior_edge_prob: 0.1,
            early_stop_patience: 100,
            seed: 0,
            train_m: 1,
            hidden: crate::model::DEFAULT_HIDDEN,
            encoder_hidden: crate::model::DEFAULT_HIDDEN,
            sigma: crate::model::DEFAULT_SIGMA,
            straight_through: false,
            kl_warmup: 30,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(contract!("lambda must be nonnegative, got {}", self.lambda));
        }
        check_tau(self.tau)?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(contract!("lr must be positive, got {}", self.lr));
        }
        if self.epochs < 1 || self.batch < 1 {
            return Err(contract!("epochs and batch must be at least 1"));
        }
        if !(self.prior_edge_prob > 0.0 && self.prior_edge_prob < 1.0) {
            return Err(contract!("prior_edge_prob must lie in (0,1), got {}", self.prior_edge_prob));
        }
        if self.train_m != 1 {
            return Err(contract!("only one-step training (train_m = 1) is supported"));
        }
        if self.hidden < 1 || self.encoder_hidden < 1 || !(self.sigma > 0.0) {
            return Err(contract!("hidden widths must be ≥ 1 and sigma > 0"));
        }
        Ok(())
    }

    pub fn model_config(&self, n_channels: usize, length: usize, context_dim: usize) -> ModelConfig {
        ModelConfig {
            n_channels,
            length,
            context_dim,
            hidden: self.hidden,
            encoder_hidden: self.encoder_hidden,
            sigma: self.sigma,
        }
    }
}

/// Loss components for one shop or averaged over shops.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub loss: f64,
    pub nll: f64,
    pub kl: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_auroc: Option<f64>,
    pub kl_term: f64,
    pub nll_term: f64,
    pub wall_ms: u128,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub rows: Vec<HistoryRow>,
    pub best_epoch: usize,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| format!("{v:.16e}"))
}

impl TrainHistory {
    /// Deterministic columns only; wall time lives in [`TrainHistory::timing_csv`].
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_auroc,kl_term,nll_term\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.16e},{:.16e},{},{:.16e},{:.16e}\n",
                r.epoch,
                r.train_loss,
                r.val_loss,
                fmt_opt(r.val_auroc),
                r.kl_term,
                r.nll_term
            ));
        }
        out
    }

    pub fn timing_csv(&self) -> String {
        let mut out = String::from("epoch,wall_ms\n");
        for r in &self.rows {
            out.push_str(&format!("{},{}\n", r.epoch, r.wall_ms));
        }
        out
    }

    pub fn total_wall_ms(&self) -> u128 {
        self.rows.iter().map(|r| r.wall_ms).sum()
    }
}

/// Shop indices of the train/validation/test split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Seeded 80/10/10 split; validation and test get at least one shop once `N ≥ 3`.
    pub fn new(n_shops: usize, seed: u64) -> Self {
        let mut idx: Vec<usize> = (0..n_shops).collect();
        idx.shuffle(&mut substream(seed, Purpose::Split, &[]));
        let tenth = if n_shops >= 3 { ((n_shops as f64) * 0.1).round().max(1.0) as usize } else { 0 };
        let test = idx.split_off(n_shops - tenth);
        let val = idx.split_off(idx.len() - tenth);
        Split { train: idx, val, test }
    }
}

/// `Σ_pairs KL(softmax(logits) ‖ (1−p, p))`.
pub fn kl_term(logits: &EdgeLogits, prior_edge_prob: f64) -> f64 {
    let log_prior = [(1.0 - prior_edge_prob).ln(), prior_edge_prob.ln()];
    logits
        .values()
        .iter()
        .map(|l| {
            let m = l[0].max(l[1]);
            let lse = m + ((l[0] - m).exp() + (l[1] - m).exp()).ln();
            (0..2)
                .map(|c| {
                    let logq = l[c] - lse;
                    logq.exp() * (logq - log_prior[c])
                })
                .sum::<f64>()
        })
        .sum()
}

fn kl_on_tape(tape: &mut Tape, logits: Var, prior_edge_prob: f64) -> Result<Var> {
    let rows = tape.value(logits).rows();
    let log_prior = [(1.0 - prior_edge_prob).ln(), prior_edge_prob.ln()];
    let prior = Tensor::matrix(rows, 2, log_prior.repeat(rows))?;
    let logq = tape.log_softmax(logits, 1)?;
    let q = tape.softmax(logits, 1)?;
    let prior = tape.constant(prior);
    let diff = tape.sub(logq, prior)?;
    let terms = tape.mul(q, diff)?;
    tape.sum_all(terms)
}

/// Scalar graph nodes of a batch objective.
#[derive(Clone, Copy, Debug)]
pub struct BatchObjective {
    pub loss: Var,
    pub nll: Var,
    pub kl: Var,
}

/// Records `Σ_shops (NLL + λ·KL)` for a batch with the given Gumbel noise (one
/// `[P, 2]` block per shop).
pub fn record_objective(
    tape: &mut Tape,
    p: &Bound,
    model: &ModelParams,
    shops: &[&NormalizedShop],
    noise: &[Vec<f64>],
    cfg: &TrainConfig,
) -> Result<BatchObjective> {
    let logits = encode_on_tape(tape, p, model, shops)?;
    let rows = tape.value(logits).rows();
    let flat: Vec<f64> = noise.iter().flatten().copied().collect();
    let z = crate::encoder::gumbel_on_tape(tape, logits, Tensor::matrix(rows, 2, flat)?, cfg.tau)?;
    let z = if cfg.straight_through {
        let soft = tape.value(z).clone();
        let hard = soft.map(|v| if v > 0.5 { 1.0 } else { 0.0 });
        let shift = tape.constant(Tensor::new(soft.shape().to_vec(), hard.data().iter().zip(soft.data()).map(|(h, s)| h - s).collect())?);
        tape.add(z, shift)?
    } else {
        z
    };
    let contexts: Vec<&[f64]> = shops.iter().map(|s| s.context()).collect();
    let (alpha, gamma) = curve_terms(tape, p, model, &contexts)?;
    let batch = TeacherBatch::new(shops)?;
    let nll = teacher_forced_nll(tape, p, model, &batch, ShopTerms { z, alpha, gamma })?;
    let kl = kl_on_tape(tape, logits, cfg.prior_edge_prob)?;
    let weighted = tape.scale(kl, cfg.lambda)?;
    let loss = tape.add(nll, weighted)?;
    Ok(BatchObjective { loss, nll, kl })
}

/// Single-shop negative ELBO with noise drawn from `rng`.
pub fn elbo_loss(sample: &ShopSample, model: &ModelParams, cfg: &TrainConfig, rng: &mut Rng) -> Result<LossParts> {
    let shop = NormalizedShop::padded(sample, model.config.length)?;
    let noise = gumbel_noise(rng, 2 * model.config.n_pairs());
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let obj = record_objective(&mut tape, &p, model, &[&shop], &[noise], cfg)?;
    let parts = LossParts {
        loss: tape.value(obj.loss).item(),
        nll: tape.value(obj.nll).item(),
        kl: tape.value(obj.kl).item(),
    };
    if !parts.loss.is_finite() {
        return Err(Error::Numeric("non-finite loss".into()));
    }
    Ok(parts)
}

struct MicroResult {
    grads: Option<GradientMap>,
    parts: LossParts,
}

fn run_micro(
    model: &ModelParams,
    shops: &[&NormalizedShop],
    noise: &[Vec<f64>],
    cfg: &TrainConfig,
    with_grads: bool,
) -> Result<MicroResult> {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let obj = record_objective(&mut tape, &p, model, shops, noise, cfg)?;
    let parts = LossParts {
        loss: tape.value(obj.loss).item(),
        nll: tape.value(obj.nll).item(),
        kl: tape.value(obj.kl).item(),
    };
    let grads = if with_grads { Some(tape.backward(obj.loss)?) } else { None };
    Ok(MicroResult { grads, parts })
}

/// Loss over `indices` (mean per shop) and, optionally, the mean gradient.
fn batch_pass(
    model: &ModelParams,
    shops: &[NormalizedShop],
    indices: &[usize],
    noise_of: &(dyn Fn(usize) -> Vec<f64> + Sync),
    cfg: &TrainConfig,
    with_grads: bool,
) -> Result<(LossParts, Option<GradientMap>)> {
    let chunks: Vec<&[usize]> = indices.chunks(MICRO_BATCH).collect();
    let results: Vec<Result<MicroResult>> = chunks
        .par_iter()
        .map(|chunk| {
            let refs: Vec<&NormalizedShop> = chunk.iter().map(|&k| &shops[k]).collect();
            let noise: Vec<Vec<f64>> = chunk.iter().map(|&k| noise_of(k)).collect();
            run_micro(model, &refs, &noise, cfg, with_grads)
        })
        .collect();
    let mut total = LossParts::default();
    let mut grads: Option<GradientMap> = None;
    for r in results {
        let r = r?;
        total.loss += r.parts.loss;
        total.nll += r.parts.nll;
        total.kl += r.parts.kl;
        if let Some(g) = r.grads {
            match &mut grads {
                None => grads = Some(g),
                Some(acc) => acc.accumulate(&g),
            }
        }
    }
    let k = indices.len() as f64;
    total.loss /= k;
    total.nll /= k;
    total.kl /= k;
    if let Some(g) = &mut grads {
        g.scale(1.0 / k);
    }
    Ok((total, grads))
}

fn numeric_context(e: Error, what: &str) -> Error {
    match e {
        Error::Overflow(m) | Error::Numeric(m) | Error::Domain(m) => {
            Error::Numeric(format!("{what}: {m}"))
        }
        other => other,
    }
}

/// Inputs to [`fit`]: shops, optional ground truth for logging, and the model length.
pub struct TrainData<'a> {
    pub samples: &'a [ShopSample],
    pub graphs: Option<&'a [CausalGraph]>,
}

pub struct FitOutcome {
    pub model: ModelParams,
    pub history: TrainHistory,
    pub split: Split,
}

/// Mini-batch Adam on the train split with early stopping on validation loss.
/// Returns the best-validation parameters.
pub fn fit(data: TrainData<'_>, cfg: &TrainConfig) -> Result<FitOutcome> {
    fit_with_split(data, cfg, None)
}

pub fn fit_with_split(data: TrainData<'_>, cfg: &TrainConfig, split: Option<Split>) -> Result<FitOutcome> {
    cfg.validate()?;
    let samples = data.samples;
    let first = samples.first().ok_or_else(|| contract!("cannot train on an empty dataset"))?;
    let length = samples.iter().map(ShopSample::len).max().unwrap_or(0);
    let model_cfg = cfg.model_config(first.n_channels(), length, first.context().len());
    let mut model = ModelParams::init(model_cfg, cfg.seed)?;
    let shops: Vec<NormalizedShop> = samples
        .iter()
        .map(|s| {
            if s.n_channels() != first.n_channels() || s.context().len() != first.context().len() {
                return Err(contract!("all shops must share channel count and context size"));
            }
            NormalizedShop::padded(s, length)
        })
        .collect::<Result<_>>()?;
    if let Some(g) = data.graphs {
        if g.len() != samples.len() {
            return Err(contract!("{} graphs for {} shops", g.len(), samples.len()));
        }
    }
    let split = split.unwrap_or_else(|| Split::new(samples.len(), cfg.seed));
    if split.train.is_empty() {
        return Err(contract!("the training split is empty"));
    }
    let monitor: Vec<usize> = if split.val.is_empty() { split.train.clone() } else { split.val.clone() };
    let n_noise = 2 * model.config.n_pairs();
    let seed = cfg.seed;
    let val_noise = move |k: usize| gumbel_noise(&mut substream(seed, Purpose::ValNoise, &[k as u64]), n_noise);

    let hyper = AdamHyper {
        lr: cfg.lr,
        ..AdamHyper::default()
    };
    let mut state = AdamState::new(model.params.tensors());
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, ParamSet)> = None;
    let mut since_best = 0;
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut order = split.train.clone();
        order.shuffle(&mut substream(seed, Purpose::EpochOrder, &[epoch as u64]));
        let train_noise = move |k: usize| {
            gumbel_noise(&mut substream(seed, Purpose::TrainNoise, &[epoch as u64, k as u64]), n_noise)
        };
        let mut sums = LossParts::default();
        let ramp = if cfg.kl_warmup == 0 { 1.0 } else { (epoch as f64 / cfg.kl_warmup as f64).min(1.0) };
        let train_cfg = TrainConfig { lambda: cfg.lambda * ramp, ..cfg.clone() };
        for batch in order.chunks(cfg.batch) {
            let (parts, grads) = batch_pass(&model, &shops, batch, &train_noise, &train_cfg, true)
                .map_err(|e| numeric_context(e, &format!("epoch {epoch}, shops {batch:?}")))?;
            // the KL term is bounded, so only the data fit can run away
            if !(parts.nll.abs() <= DIVERGENCE_LIMIT && parts.loss.is_finite()) {
                return Err(Error::Numeric(format!(
                    "training diverged at epoch {epoch}: batch NLL {} exceeds {DIVERGENCE_LIMIT:e} (shops {batch:?})",
                    parts.nll
                )));
            }
            let grads = grads.expect("gradients requested");
            if !grads.all_finite() {
                return Err(Error::Numeric(format!("non-finite gradient at epoch {epoch}")));
            }
            adam_step(model.params.tensors_mut(), &grads, &mut state, &hyper)?;
            let w = batch.len() as f64;
            sums.loss += parts.loss * w;
            sums.nll += parts.nll * w;
            sums.kl += parts.kl * w;
        }
        let n_train = split.train.len() as f64;
        let (val, _) = batch_pass(&model, &shops, &monitor, &val_noise, cfg, false)
            .map_err(|e| numeric_context(e, &format!("validation at epoch {epoch}")))?;
        let val_auroc = match data.graphs {
            Some(graphs) => Some(monitor_auroc(&model, &shops, graphs, &monitor)?),
            None => None,
        };
        history.rows.push(HistoryRow {
            epoch,
            train_loss: sums.loss / n_train,
            val_loss: val.loss,
            val_auroc,
            kl_term: sums.kl / n_train,
            nll_term: sums.nll / n_train,
            wall_ms: started.elapsed().as_millis(),
        });
        log::debug!(
            "epoch {epoch}: train {:.4} val {:.4} auroc {:?}",
            sums.loss / n_train,
            val.loss,
            val_auroc
        );
        if !model.params.all_finite() {
            return Err(Error::Numeric(format!("non-finite parameters after epoch {epoch}")));
        }
        if best.as_ref().map_or(true, |(b, _)| val.loss < *b) {
            best = Some((val.loss, model.params.clone()));
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.early_stop_patience {
                log::info!("early stop at epoch {epoch}; best epoch {}", history.best_epoch);
                break;
            }
        }
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok(FitOutcome { model, history, split })
}

fn monitor_auroc(model: &ModelParams, shops: &[NormalizedShop], graphs: &[CausalGraph], idx: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for &k in idx {
        let logits = encode_shops(&[&shops[k]], model)?.remove(0);
        total += auroc(&infer_graph(&logits).1, &graphs[k])?;
    }
    Ok(total / idx.len() as f64)
}
