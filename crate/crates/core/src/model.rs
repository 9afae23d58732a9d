//! Model configuration, parameter layout, and the small layers both halves share.

use serde::{Deserialize, Serialize};

use crate::diffcore::{glorot, Bound, Checkpoint, ParamId, ParamSet, Tape, Tensor, Var};
use crate::error::{contract, Error, Result};
use crate::rng::{substream, Purpose};

pub const DEFAULT_HIDDEN: usize = 16;
pub const DEFAULT_SIGMA: f64 = 0.1;
pub const ALPHA_BOUNDS: (f64, f64) = (0.2, 5.0);
pub const GAMMA_BOUNDS: (f64, f64) = (0.05, 5.0);
/// Floor applied to the saturation base before `pow`.
pub const POW_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_channels: usize,
    /// Series length `T` the encoder embedding is built for.
    pub length: usize,
    pub context_dim: usize,
    /// Decoder width (message MLP, GRUs, readouts, curve heads).
    pub hidden: usize,
    /// Encoder width (embedding, edge and vertex MLPs).
    pub encoder_hidden: usize,
    pub sigma: f64,
}

impl ModelConfig {
    pub fn new(n_channels: usize, length: usize, context_dim: usize) -> Self {
        ModelConfig {
            n_channels,
            length,
            context_dim,
            hidden: DEFAULT_HIDDEN,
            encoder_hidden: DEFAULT_HIDDEN,
            sigma: DEFAULT_SIGMA,
        }
    }

    /// Sets both encoder and decoder widths.
    pub fn with_hidden(mut self, hidden: usize) -> Self {
        self.hidden = hidden;
        self.encoder_hidden = hidden;
        self
    }

    pub fn n_nodes(&self) -> usize {
        self.n_channels + 1
    }

    pub fn n_pairs(&self) -> usize {
        let n = self.n_nodes();
        n * (n - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_channels < 1 || self.length < 2 || self.hidden < 1 || self.encoder_hidden < 1 {
            return Err(contract!(
                "model needs n_channels ≥ 1, length ≥ 2, widths ≥ 1 (got {}, {}, {}, {})",
                self.n_channels,
                self.length,
                self.hidden,
                self.encoder_hidden
            ));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(contract!("sigma must be positive, got {}", self.sigma));
        }
        Ok(())
    }
}

/// Two-layer ELU perceptron.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    /// Apply ELU to the output as well.
    pub out_elu: bool,
}

/// Two-layer perceptron over the concatenation `[x_i, x_j]` of two node rows.
///
/// The first layer is split into sender and receiver halves so it can be applied
/// per node and gathered per pair.
#[derive(Clone, Copy, Debug)]
pub struct PairMlp {
    pub w_src: ParamId,
    pub w_dst: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// GRU cell with gate order (reset, update, candidate).
#[derive(Clone, Copy, Debug)]
pub struct Gru {
    pub w_i: ParamId,
    pub b_i: ParamId,
    pub w_h: ParamId,
    pub b_h: ParamId,
}

/// Context head producing a bounded positive scalar per shop.
#[derive(Clone, Copy, Debug)]
pub struct BoundedHead {
    /// Hidden layer, absent when there is no context.
    pub hidden: Option<(ParamId, ParamId, ParamId)>,
    pub bias: ParamId,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderIds {
    pub emb: Mlp,
    pub edge1: PairMlp,
    pub vertex: Mlp,
    pub edge2: PairMlp,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderIds {
    pub msg: PairMlp,
    pub gru_channel: Gru,
    pub gru_target: Gru,
    pub pre_channel: Mlp,
    pub pre_target: Mlp,
    pub alpha: BoundedHead,
    pub gamma: BoundedHead,
}

#[derive(Clone, Debug)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub enc: EncoderIds,
    pub dec: DecoderIds,
}

/// Sigmoid pre-activation that maps to `target` under `lo + (hi-lo)·sigmoid`.
fn bounded_logit(target: f64, lo: f64, hi: f64) -> f64 {
    let p = (target - lo) / (hi - lo);
    (p / (1.0 - p)).ln()
}

struct Builder<'a> {
    set: ParamSet,
    rng: &'a mut crate::rng::Rng,
}

impl Builder<'_> {
    fn weight(&mut self, name: &str, fan_in: usize, fan_out: usize) -> ParamId {
        let t = glorot(fan_in, fan_out, self.rng);
        self.set.add(name, t)
    }

    fn bias(&mut self, name: &str, width: usize) -> ParamId {
        self.set.add(name, Tensor::zeros(&[1, width]))
    }

    fn mlp(&mut self, name: &str, dims: (usize, usize, usize), out_elu: bool) -> Mlp {
        Mlp {
            w1: self.weight(&format!("{name}.w1"), dims.0, dims.1),
            b1: self.bias(&format!("{name}.b1"), dims.1),
            w2: self.weight(&format!("{name}.w2"), dims.1, dims.2),
            b2: self.bias(&format!("{name}.b2"), dims.2),
            out_elu,
        }
    }

    fn pair_mlp(&mut self, name: &str, dims: (usize, usize, usize)) -> PairMlp {
        // Glorot bound of the joint [2·in, hidden] layer.
        let w_src = self.weight(&format!("{name}.w_src"), dims.0, dims.1);
        let w_dst = self.weight(&format!("{name}.w_dst"), dims.0, dims.1);
        let rescale = ((dims.0 + dims.1) as f64 / (2 * dims.0 + dims.1) as f64).sqrt();
        self.set.get_mut(w_src).scale_in_place(rescale);
        self.set.get_mut(w_dst).scale_in_place(rescale);
        PairMlp {
            w_src,
            w_dst,
            b1: self.bias(&format!("{name}.b1"), dims.1),
            w2: self.weight(&format!("{name}.w2"), dims.1, dims.2),
            b2: self.bias(&format!("{name}.b2"), dims.2),
        }
    }

    fn gru(&mut self, name: &str, input: usize, hidden: usize) -> Gru {
        Gru {
            w_i: self.weight(&format!("{name}.w_i"), input, 3 * hidden),
            b_i: self.bias(&format!("{name}.b_i"), 3 * hidden),
            w_h: self.weight(&format!("{name}.w_h"), hidden, 3 * hidden),
            b_h: self.bias(&format!("{name}.b_h"), 3 * hidden),
        }
    }

    fn head(&mut self, name: &str, context_dim: usize, hidden: usize, bounds: (f64, f64), init: f64) -> BoundedHead {
        let hidden_ids = (context_dim > 0).then(|| {
            (
                self.weight(&format!("{name}.w1"), context_dim, hidden),
                self.bias(&format!("{name}.b1"), hidden),
                self.weight(&format!("{name}.w2"), hidden, 1),
            )
        });
        let bias = self.set.add(
            format!("{name}.b2"),
            Tensor::filled(&[1, 1], bounded_logit(init, bounds.0, bounds.1)),
        );
        BoundedHead {
            hidden: hidden_ids,
            bias,
            lo: bounds.0,
            hi: bounds.1,
        }
    }
}

impl ModelParams {
    /// Glorot-initialized parameters; identical for identical `(config, seed)`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let he = config.encoder_hidden;
        let mut rng = substream(seed, Purpose::Init, &[]);
        let mut b = Builder {
            set: ParamSet::new(),
            rng: &mut rng,
        };
        let enc = EncoderIds {
            emb: b.mlp("enc.emb", (config.length, he, he), true),
            edge1: b.pair_mlp("enc.edge1", (he, he, he)),
            vertex: b.mlp("enc.vertex", (he, he, he), true),
            edge2: b.pair_mlp("enc.edge2", (he, he, 2)),
        };
        let dec = DecoderIds {
            msg: b.pair_mlp("dec.msg", (1, h, h)),
            gru_channel: b.gru("dec.gru_channel", h + 1, h),
            gru_target: b.gru("dec.gru_target", h + 1, h),
            pre_channel: b.mlp("dec.pre_channel", (h + 1, h, 1), false),
            pre_target: b.mlp("dec.pre_target", (h + 1, h, 1), false),
            alpha: b.head("dec.alpha", config.context_dim, h, ALPHA_BOUNDS, 1.0),
            gamma: b.head("dec.gamma", config.context_dim, h, GAMMA_BOUNDS, 0.5),
        };
        let mut params = b.set;
        // messages start silent; random initial messages push every edge towards "off"
        params.get_mut(dec.msg.w2).scale_in_place(0.0);
        Ok(ModelParams {
            config,
            params,
            enc,
            dec,
        })
    }

    pub fn config_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.config).expect("config serializes")
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_params(self.config_json(), &self.params)
    }

    /// Rebuilds the model described by the checkpoint and loads its tensors.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(ckpt.model_config.clone())
            .map_err(|e| Error::Parse(format!("checkpoint model_config: {e}")))?;
        let mut model = ModelParams::init(config, 0)?;
        ckpt.restore_into(&mut model.params)?;
        Ok(model)
    }
}

/// `x · w + b`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

impl Mlp {
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = linear(tape, x, p[self.w1], p[self.b1])?;
        let h = tape.elu(h)?;
        let y = linear(tape, h, p[self.w2], p[self.b2])?;
        if self.out_elu {
            tape.elu(y)
        } else {
            Ok(y)
        }
    }
}

/// Row indices linking pairs to their sender and receiver rows.
#[derive(Clone, Debug)]
pub struct PairIndex {
    pub src: std::sync::Arc<[usize]>,
    pub dst: std::sync::Arc<[usize]>,
}

impl PairIndex {
    /// Pairs of `blocks` consecutive groups of `n` node rows, in canonical pair order.
    pub fn new(n_nodes: usize, blocks: usize) -> Self {
        let pairs = crate::data::ordered_pairs(n_nodes);
        let mut src = Vec::with_capacity(blocks * pairs.len());
        let mut dst = Vec::with_capacity(blocks * pairs.len());
        for block in 0..blocks {
            for &(i, j) in &pairs {
                src.push(block * n_nodes + i);
                dst.push(block * n_nodes + j);
            }
        }
        PairIndex {
            src: src.into(),
            dst: dst.into(),
        }
    }
}

impl PairMlp {
    /// First-layer pre-activation `[x_i, x_j] W1 + b1` for every pair.
    pub fn first_layer(&self, tape: &mut Tape, p: &Bound, x: Var, idx: &PairIndex) -> Result<Var> {
        let a = tape.matmul(x, p[self.w_src])?;
        let b = tape.matmul(x, p[self.w_dst])?;
        let a = tape.gather(a, idx.src.clone())?;
        let b = tape.gather(b, idx.dst.clone())?;
        let s = tape.add(a, b)?;
        tape.add_bias(s, p[self.b1])
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, idx: &PairIndex, out_elu: bool) -> Result<Var> {
        let h = self.first_layer(tape, p, x, idx)?;
        let h = tape.elu(h)?;
        let y = linear(tape, h, p[self.w2], p[self.b2])?;
        if out_elu {
            tape.elu(y)
        } else {
            Ok(y)
        }
    }
}

impl Gru {
    /// Input projections for many rows at once.
    pub fn project_input(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        linear(tape, x, p[self.w_i], p[self.b_i])
    }

    /// One recurrence step from projected inputs `gi` and hidden state `h`.
    pub fn step(&self, tape: &mut Tape, p: &Bound, gi: Var, h: Var, hidden: usize) -> Result<Var> {
        let gh = linear(tape, h, p[self.w_h], p[self.b_h])?;
        let gi_rz = tape.slice_cols(gi, 0, 2 * hidden)?;
        let gh_rz = tape.slice_cols(gh, 0, 2 * hidden)?;
        let rz = tape.add(gi_rz, gh_rz)?;
        let rz = tape.sigmoid(rz)?;
        let r = tape.slice_cols(rz, 0, hidden)?;
        let z = tape.slice_cols(rz, hidden, 2 * hidden)?;
        let gi_n = tape.slice_cols(gi, 2 * hidden, 3 * hidden)?;
        let gh_n = tape.slice_cols(gh, 2 * hidden, 3 * hidden)?;
        let gated = tape.mul(r, gh_n)?;
        let n = tape.add(gi_n, gated)?;
        let n = tape.tanh(n)?;
        // h' = (1 − z)·n + z·h = n + z·(h − n)
        let diff = tape.sub(h, n)?;
        let keep = tape.mul(z, diff)?;
        tape.add(n, keep)
    }
}

impl BoundedHead {
    /// One bounded value per context row, `[rows, 1]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, context: Var, rows: usize) -> Result<Var> {
        let raw = match self.hidden {
            Some((w1, b1, w2)) => {
                let h = linear(tape, context, p[w1], p[b1])?;
                let h = tape.elu(h)?;
                linear(tape, h, p[w2], p[self.bias])?
            }
            None => tape.gather(p[self.bias], vec![0; rows].into())?,
        };
        let s = tape.sigmoid(raw)?;
        let s = tape.scale(s, self.hi - self.lo)?;
        let lo = tape.constant(Tensor::scalar(self.lo));
        tape.add(s, lo)
    }
}
