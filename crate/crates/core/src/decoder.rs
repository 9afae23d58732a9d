//! Response decoder: edge-gated messages, per-role GRU state, channel predictions,
//! and a context-conditioned Hill curve for the target.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::data::{NormalizedShop, Scaler, ShopSample};
use crate::diffcore::{Bound, Tape, Tensor, Var};
use crate::encoder::EdgeSample;
use crate::error::{contract, Error, Result};
use crate::model::{ModelParams, PairIndex, POW_FLOOR};

/// Row layout of `steps × shops × nodes` decoder inputs.
#[derive(Clone, Debug)]
pub struct StepLayout {
    pub steps: usize,
    pub shops: usize,
    pub n_nodes: usize,
    pairs: PairIndex,
    /// Pair row → row of the per-shop edge-weight column.
    z_rows: Arc<[usize]>,
    channel_rows: Arc<[usize]>,
    target_rows: Arc<[usize]>,
    /// Target row → shop, for broadcasting per-shop curve parameters.
    target_shop: Arc<[usize]>,
}

impl StepLayout {
    pub fn new(steps: usize, shops: usize, n_nodes: usize) -> Self {
        let n_pairs = n_nodes * (n_nodes - 1);
        let blocks = steps * shops;
        let z_rows = (0..blocks * n_pairs).map(|q| q % (shops * n_pairs)).collect();
        let mut channel_rows = Vec::with_capacity(blocks * (n_nodes - 1));
        let mut target_rows = Vec::with_capacity(blocks);
        for block in 0..blocks {
            channel_rows.extend((0..n_nodes - 1).map(|j| block * n_nodes + j));
            target_rows.push(block * n_nodes + n_nodes - 1);
        }
        StepLayout {
            steps,
            shops,
            n_nodes,
            pairs: PairIndex::new(n_nodes, blocks),
            z_rows,
            channel_rows: channel_rows.into(),
            target_rows: target_rows.into(),
            target_shop: (0..blocks).map(|b| b % shops).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.steps * self.shops * self.n_nodes
    }

    pub fn channel_rows(&self) -> &[usize] {
        &self.channel_rows
    }

    pub fn target_rows(&self) -> &[usize] {
        &self.target_rows
    }
}

/// Per-shop quantities that stay fixed across decoder steps.
#[derive(Clone, Copy, Debug)]
pub struct ShopTerms {
    /// Edge weights `[B·P, 1]`.
    pub z: Var,
    /// Hill shape and inflexion per shop, `[B, 1]` each.
    pub alpha: Var,
    pub gamma: Var,
}

/// Hidden states of the channel rows `[B·d, H]` and target rows `[B, H]`.
#[derive(Clone, Copy, Debug)]
pub struct HiddenVars {
    pub channel: Var,
    pub target: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct StepOutputs {
    /// Channel means, rows `(step, shop, channel)`.
    pub mu_channel: Var,
    /// Target means, rows `(step, shop)`.
    pub mu_target: Var,
    pub hidden: HiddenVars,
}

pub fn zero_hidden(tape: &mut Tape, model: &ModelParams, shops: usize) -> HiddenVars {
    let h = model.config.hidden;
    let d = model.config.n_channels;
    HiddenVars {
        channel: tape.constant(Tensor::zeros(&[shops * d, h])),
        target: tape.constant(Tensor::zeros(&[shops, h])),
    }
}

/// Hill-curve parameters for a batch of shop contexts `[B, p]`.
pub fn curve_terms(tape: &mut Tape, p: &Bound, model: &ModelParams, contexts: &[&[f64]]) -> Result<(Var, Var)> {
    let dim = model.config.context_dim;
    let mut data = Vec::with_capacity(contexts.len() * dim);
    for c in contexts {
        if c.len() != dim {
            return Err(contract!("context has {} entries, the model expects {dim}", c.len()));
        }
        data.extend_from_slice(c);
    }
    let ctx = tape.constant(Tensor::matrix(contexts.len(), dim, data)?);
    let alpha = model.dec.alpha.forward(tape, p, ctx, contexts.len())?;
    let gamma = model.dec.gamma.forward(tape, p, ctx, contexts.len())?;
    Ok((alpha, gamma))
}

/// Runs `layout.steps` decoder steps on the given inputs `[rows, 1]` (rows
/// `(step, shop, node)`), starting from `hidden`. Every step consumes the given
/// input, so this is teacher forcing when the inputs are observations.
pub fn decode_steps(
    tape: &mut Tape,
    p: &Bound,
    model: &ModelParams,
    layout: &StepLayout,
    inputs: Var,
    terms: ShopTerms,
    hidden: HiddenVars,
) -> Result<StepOutputs> {
    let dec = &model.dec;
    let h = model.config.hidden;
    let (steps, shops) = (layout.steps, layout.shops);
    let d = layout.n_nodes - 1;
    let rows = layout.rows();
    if tape.value(inputs).shape() != [rows, 1] {
        return Err(contract!(
            "decoder inputs have shape {:?}, expected [{rows}, 1]",
            tape.value(inputs).shape()
        ));
    }

    // Messages: MSG_j = Σ_i z_ij f̃(o_i, o_j), with the second linear layer applied
    // after aggregation since it commutes with the weighted sum.
    let pre = dec.msg.first_layer(tape, p, inputs, &layout.pairs)?;
    let act = tape.elu(pre)?;
    let zq = tape.gather(terms.z, layout.z_rows.clone())?;
    let weighted = tape.mul_col(act, zq)?;
    let agg = tape.scatter_add(weighted, layout.pairs.dst.clone(), rows)?;
    let zsum = tape.scatter_add(zq, layout.pairs.dst.clone(), rows)?;
    let msg = tape.matmul(agg, p[dec.msg.w2])?;
    let bias = tape.matmul(zsum, p[dec.msg.b2])?;
    let msg = tape.add(msg, bias)?;
    let gru_in = tape.concat(&[msg, inputs], 1)?;

    let run_role = |tape: &mut Tape, idx: &Arc<[usize]>, gru: &crate::model::Gru, pre: &crate::model::Mlp, h0: Var, per_step: usize| -> Result<(Var, Var)> {
        let x = tape.gather(gru_in, idx.clone())?;
        let own = tape.gather(inputs, idx.clone())?;
        let gi = gru.project_input(tape, p, x)?;
        let mut state = h0;
        let mut states = Vec::with_capacity(steps);
        for s in 0..steps {
            let gi_s = tape.slice_rows(gi, s * per_step, (s + 1) * per_step)?;
            state = gru.step(tape, p, gi_s, state, h).map_err(|e| at_step(e, s))?;
            states.push(state);
        }
        let all = if states.len() == 1 { states[0] } else { tape.concat(&states, 0)? };
        let feat = tape.concat(&[all, own], 1)?;
        Ok((pre.forward(tape, p, feat)?, state))
    };

    let (mu_channel, h_channel) = run_role(tape, &layout.channel_rows, &dec.gru_channel, &dec.pre_channel, hidden.channel, shops * d)?;
    let (raw, h_target) = run_role(tape, &layout.target_rows, &dec.gru_target, &dec.pre_target, hidden.target, shops)?;

    let r = tape.softplus(raw)?;
    let r = tape.clamp_min(r, POW_FLOOR)?;
    let alpha = tape.gather(terms.alpha, layout.target_shop.clone())?;
    let gamma = tape.gather(terms.gamma, layout.target_shop.clone())?;
    let mu_target = hill(tape, r, alpha, gamma)?;
    Ok(StepOutputs {
        mu_channel,
        mu_target,
        hidden: HiddenVars {
            channel: h_channel,
            target: h_target,
        },
    })
}

fn at_step(e: Error, step: usize) -> Error {
    match e {
        Error::Overflow(m) | Error::Numeric(m) => {
            Error::Numeric(format!("non-finite decoder state at step {step}: {m}"))
        }
        other => other,
    }
}

/// `r^α / (r^α + γ)`.
pub fn hill(tape: &mut Tape, r: Var, alpha: Var, gamma: Var) -> Result<Var> {
    let ra = tape.pow(r, alpha)?;
    let den = tape.add(ra, gamma)?;
    tape.div(ra, den)
}

/// Scalar Gaussian negative log-likelihood with fixed `σ`, constants included.
pub fn gaussian_nll(pred: &[f64], truth: &[f64], sigma: f64) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(contract!(
            "prediction has {} cells, truth has {}",
            pred.len(),
            truth.len()
        ));
    }
    let sq: f64 = pred.iter().zip(truth).map(|(p, t)| (t - p).powi(2)).sum();
    Ok(sq / (2.0 * sigma * sigma) + pred.len() as f64 * nll_constant(sigma))
}

/// `ln(σ√(2π))`.
pub fn nll_constant(sigma: f64) -> f64 {
    (sigma * (2.0 * PI).sqrt()).ln()
}

/// Teacher-forced one-step targets for a batch: inputs are steps `0..T-1`, truths `1..T`.
#[derive(Clone, Debug)]
pub struct TeacherBatch {
    pub layout: StepLayout,
    pub inputs: Tensor,
    pub truth_channel: Tensor,
    pub truth_target: Tensor,
    /// 1 where both the input and the predicted step are observed.
    pub mask_channel: Tensor,
    pub mask_target: Tensor,
}

impl TeacherBatch {
    pub fn new(shops: &[&NormalizedShop]) -> Result<Self> {
        let first = shops.first().ok_or_else(|| contract!("empty shop batch"))?;
        let (n, len) = (first.n_nodes(), first.len());
        if len < 2 {
            return Err(contract!("teacher forcing needs at least 2 steps"));
        }
        let steps = len - 1;
        let b = shops.len();
        let d = n - 1;
        let mut inputs = Vec::with_capacity(steps * b * n);
        let mut tc = Vec::with_capacity(steps * b * d);
        let mut tt = Vec::with_capacity(steps * b);
        let mut mc = Vec::with_capacity(steps * b * d);
        let mut mt = Vec::with_capacity(steps * b);
        for s in 0..steps {
            for shop in shops {
                if shop.len() != len || shop.n_nodes() != n {
                    return Err(contract!("shops in a batch must share node count and length"));
                }
                inputs.extend_from_slice(shop.row(s));
                let next = shop.row(s + 1);
                tc.extend_from_slice(&next[..d]);
                tt.push(next[d]);
                let m = if shop.observed()[s] && shop.observed()[s + 1] { 1.0 } else { 0.0 };
                mc.extend(std::iter::repeat(m).take(d));
                mt.push(m);
            }
        }
        Ok(TeacherBatch {
            layout: StepLayout::new(steps, b, n),
            inputs: Tensor::column(inputs),
            truth_channel: Tensor::column(tc),
            truth_target: Tensor::column(tt),
            mask_channel: Tensor::column(mc),
            mask_target: Tensor::column(mt),
        })
    }

    pub fn observed_cells(&self) -> f64 {
        self.mask_channel.data().iter().sum::<f64>() + self.mask_target.data().iter().sum::<f64>()
    }
}

/// Records teacher-forced predictions and returns the summed Gaussian NLL (scalar).
pub fn teacher_forced_nll(
    tape: &mut Tape,
    p: &Bound,
    model: &ModelParams,
    batch: &TeacherBatch,
    terms: ShopTerms,
) -> Result<Var> {
    let inputs = tape.constant(batch.inputs.clone());
    let hidden = zero_hidden(tape, model, batch.layout.shops);
    let out = decode_steps(tape, p, model, &batch.layout, inputs, terms, hidden)?;
    let sigma = model.config.sigma;
    let mut sq_total = None;
    for (mu, truth, mask) in [
        (out.mu_channel, &batch.truth_channel, &batch.mask_channel),
        (out.mu_target, &batch.truth_target, &batch.mask_target),
    ] {
        let truth = tape.constant(truth.clone());
        let diff = tape.sub(mu, truth)?;
        let mask = tape.constant(mask.clone());
        let diff = tape.mul_col(diff, mask)?;
        let sq = tape.mul(diff, diff)?;
        let sq = tape.sum_all(sq)?;
        sq_total = Some(match sq_total {
            None => sq,
            Some(acc) => tape.add(acc, sq)?,
        });
    }
    let quad = tape.scale(sq_total.expect("two roles"), 1.0 / (2.0 * sigma * sigma))?;
    let constant = tape.constant(Tensor::scalar(batch.observed_cells() * nll_constant(sigma)));
    tape.add(quad, constant)
}

/// Hidden state of every node after some steps.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    /// `[d, H]` channel rows.
    pub channel: Tensor,
    /// `[1, H]` target row.
    pub target: Tensor,
}

impl DecoderState {
    pub fn zeros(model: &ModelParams) -> Self {
        let h = model.config.hidden;
        DecoderState {
            channel: Tensor::zeros(&[model.config.n_channels, h]),
            target: Tensor::zeros(&[1, h]),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.channel.all_finite() && self.target.all_finite()
    }
}

fn z_column(z: &EdgeSample, model: &ModelParams) -> Result<Tensor> {
    if z.n_nodes() != model.config.n_nodes() {
        return Err(contract!(
            "edge sample covers {} nodes, the model has {}",
            z.n_nodes(),
            model.config.n_nodes()
        ));
    }
    Ok(Tensor::column(z.edge_weights()))
}

/// One decoder step for one shop: returns the next state and the predicted means.
pub fn step(
    obs: &[f64],
    state: &DecoderState,
    z: &EdgeSample,
    context: &[f64],
    model: &ModelParams,
) -> Result<(DecoderState, Vec<f64>)> {
    let n = model.config.n_nodes();
    if obs.len() != n {
        return Err(contract!("observation has {} entries, expected {n}", obs.len()));
    }
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let (alpha, gamma) = curve_terms(&mut tape, &p, model, &[context])?;
    let terms = ShopTerms {
        z: tape.constant(z_column(z, model)?),
        alpha,
        gamma,
    };
    let hidden = HiddenVars {
        channel: tape.constant(state.channel.clone()),
        target: tape.constant(state.target.clone()),
    };
    let inputs = tape.constant(Tensor::column(obs.to_vec()));
    let out = decode_steps(&mut tape, &p, model, &StepLayout::new(1, 1, n), inputs, terms, hidden)?;
    let mut mu = tape.value(out.mu_channel).data().to_vec();
    mu.push(tape.value(out.mu_target).item());
    let next = DecoderState {
        channel: tape.value(out.hidden.channel).clone(),
        target: tape.value(out.hidden.target).clone(),
    };
    Ok((next, mu))
}

/// `M` recursive predictions after a teacher-forced warm-up.
#[derive(Clone, Debug, PartialEq)]
pub struct Forecast {
    /// `M × (d+1)` predicted means in normalized units.
    pub mu: Vec<Vec<f64>>,
    pub sigma: f64,
    pub scaler: Scaler,
}

impl Forecast {
    pub fn horizon(&self) -> usize {
        self.mu.len()
    }

    pub fn target_means(&self) -> Vec<f64> {
        self.mu.iter().map(|row| *row.last().expect("nonempty row")).collect()
    }

    /// `step,mu_x1..mu_xd,mu_y,y_descaled`, one row per horizon step.
    pub fn to_csv(&self) -> String {
        let d = self.mu.first().map_or(0, |r| r.len() - 1);
        let mut out = String::from("step");
        for j in 1..=d {
            out.push_str(&format!(",mu_x{j}"));
        }
        out.push_str(",mu_y,y_descaled\n");
        for (m, row) in self.mu.iter().enumerate() {
            out.push_str(&(m + 1).to_string());
            for v in row {
                out.push_str(&format!(",{v:.16e}"));
            }
            let y = self.scaler.descale_target(row[d]);
            out.push_str(&format!(",{y:.16e}\n"));
        }
        out
    }
}

/// Teacher-forced warm-up on steps `0..burn_in`, then `M` recursive predictions.
pub fn rollout(
    sample: &ShopSample,
    z: &EdgeSample,
    burn_in: usize,
    horizon: usize,
    model: &ModelParams,
) -> Result<Forecast> {
    if horizon < 1 {
        return Err(contract!("forecast horizon must be at least 1"));
    }
    if burn_in < 1 || burn_in + horizon > sample.len() {
        return Err(contract!(
            "burn-in {burn_in} plus horizon {horizon} needs 1 ≤ burn-in and ≤ {} steps",
            sample.len()
        ));
    }
    let shop = NormalizedShop::from_sample(sample);
    rollout_normalized(&shop, z, burn_in, horizon, model)
}

pub fn rollout_normalized(
    shop: &NormalizedShop,
    z: &EdgeSample,
    burn_in: usize,
    horizon: usize,
    model: &ModelParams,
) -> Result<Forecast> {
    let n = model.config.n_nodes();
    if shop.n_nodes() != n {
        return Err(contract!("shop has {} nodes, the model expects {n}", shop.n_nodes()));
    }
    if horizon < 1 || burn_in < 1 || burn_in + horizon > shop.len() {
        return Err(contract!(
            "burn-in {burn_in} and horizon {horizon} do not fit {} steps",
            shop.len()
        ));
    }
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let (alpha, gamma) = curve_terms(&mut tape, &p, model, &[shop.context()])?;
    let terms = ShopTerms {
        z: tape.constant(z_column(z, model)?),
        alpha,
        gamma,
    };
    let warm: Vec<f64> = shop.obs()[..burn_in * n].to_vec();
    let inputs = tape.constant(Tensor::column(warm));
    let hidden = zero_hidden(&mut tape, model, 1);
    let layout = StepLayout::new(burn_in, 1, n);
    let mut out = decode_steps(&mut tape, &p, model, &layout, inputs, terms, hidden)?;
    let one = StepLayout::new(1, 1, n);
    let mut mu = Vec::with_capacity(horizon);
    loop {
        let c = tape.value(out.mu_channel).data();
        let mut row = c[c.len() - (n - 1)..].to_vec();
        row.push(*tape.value(out.mu_target).data().last().expect("target row"));
        mu.push(row.clone());
        if mu.len() == horizon {
            break;
        }
        let inputs = tape.constant(Tensor::column(row));
        out = decode_steps(&mut tape, &p, model, &one, inputs, terms, out.hidden)?;
    }
    Ok(Forecast {
        mu,
        sigma: model.config.sigma,
        scaler: shop.scaler().clone(),
    })
}
