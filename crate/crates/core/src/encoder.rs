//! Relational encoder: per-node series embedding, pairwise and global message
//! exchange on the complete graph, two-class edge logits, and Gumbel-softmax sampling.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{ordered_pairs, CausalGraph, EdgeMatrix, NormalizedShop, ShopSample};
use crate::diffcore::{Bound, Tape, Tensor, Var};
use crate::error::{contract, Result};
use crate::model::{ModelParams, PairIndex};
use crate::rng::Rng;

/// Decision threshold on edge probabilities (strict).
pub const EDGE_THRESHOLD: f64 = 0.5;

/// Two-class logits `(no edge, edge)` per ordered off-diagonal pair.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeLogits {
    n_nodes: usize,
    values: Vec<[f64; 2]>,
}

fn softmax2(a: f64, b: f64) -> [f64; 2] {
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    let s = ea + eb;
    [ea / s, eb / s]
}

impl EdgeLogits {
    pub fn new(n_nodes: usize, values: Vec<[f64; 2]>) -> Result<Self> {
        if values.len() != n_nodes * n_nodes.saturating_sub(1) {
            return Err(contract!(
                "{} logit pairs do not fit {n_nodes} nodes",
                values.len()
            ));
        }
        Ok(EdgeLogits { n_nodes, values })
    }

    /// Splits a `[B·P, 2]` logit tensor into one entry per shop.
    pub fn split_batch(n_nodes: usize, t: &Tensor) -> Vec<EdgeLogits> {
        let pairs = n_nodes * (n_nodes - 1);
        t.data()
            .chunks(2 * pairs)
            .map(|chunk| EdgeLogits {
                n_nodes,
                values: chunk.chunks(2).map(|c| [c[0], c[1]]).collect(),
            })
            .collect()
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_pairs(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[[f64; 2]] {
        &self.values
    }

    /// `softmax(logits)` per pair.
    pub fn probs(&self) -> Vec<[f64; 2]> {
        self.values.iter().map(|l| softmax2(l[0], l[1])).collect()
    }

    /// Flattened `[P, 2]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.values.iter().flat_map(|l| l.iter().copied()).collect();
        Tensor::matrix(self.values.len(), 2, data).expect("pair logits form a matrix")
    }
}

/// A point on the two-class simplex per pair; the edge weight is the second component.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeSample {
    n_nodes: usize,
    z: Vec<[f64; 2]>,
}

impl EdgeSample {
    pub fn new(n_nodes: usize, z: Vec<[f64; 2]>) -> Result<Self> {
        if z.len() != n_nodes * n_nodes.saturating_sub(1) {
            return Err(contract!("{} samples do not fit {n_nodes} nodes", z.len()));
        }
        Ok(EdgeSample { n_nodes, z })
    }

    /// Exact one-hot sample of a graph.
    pub fn hard(graph: &CausalGraph) -> Self {
        let n = graph.n_nodes();
        let z = ordered_pairs(n)
            .into_iter()
            .map(|(i, j)| if graph.has_edge(i, j) { [0.0, 1.0] } else { [1.0, 0.0] })
            .collect();
        EdgeSample { n_nodes: n, z }
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn components(&self) -> &[[f64; 2]] {
        &self.z
    }

    /// Edge weights `z_ij` in canonical pair order.
    pub fn edge_weights(&self) -> Vec<f64> {
        self.z.iter().map(|z| z[1]).collect()
    }
}

/// Per-shop structure export record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureExport {
    pub shop_id: usize,
    pub edge_probs: Vec<Vec<f64>>,
    pub adjacency: Vec<Vec<u8>>,
}

/// Node series as encoder rows `[B·n, T]`.
pub fn encoder_input(shops: &[&NormalizedShop]) -> Result<Tensor> {
    let first = shops.first().ok_or_else(|| contract!("empty shop batch"))?;
    let (n, len) = (first.n_nodes(), first.len());
    let mut data = Vec::with_capacity(shops.len() * n * len);
    for shop in shops {
        if shop.n_nodes() != n || shop.len() != len {
            return Err(contract!("shops in a batch must share node count and length"));
        }
        for j in 0..n {
            data.extend((0..len).map(|t| shop.at(t, j)));
        }
    }
    Tensor::matrix(shops.len() * n, len, data)
}

/// Records the encoder for a batch of shops; returns logits `[B·P, 2]`.
pub fn encode_on_tape(tape: &mut Tape, p: &Bound, model: &ModelParams, shops: &[&NormalizedShop]) -> Result<Var> {
    let cfg = &model.config;
    let n = cfg.n_nodes();
    for shop in shops {
        if shop.len() != cfg.length || shop.n_nodes() != n {
            return Err(contract!(
                "shop has {} steps and {} nodes, the model expects {} and {n}",
                shop.len(),
                shop.n_nodes(),
                cfg.length
            ));
        }
    }
    let x = tape.constant(encoder_input(shops)?);
    let idx = PairIndex::new(n, shops.len());
    let enc = &model.enc;
    let h1 = enc.emb.forward(tape, p, x)?;
    let he = enc.edge1.forward(tape, p, h1, &idx, true)?;
    let agg = tape.scatter_add(he, idx.dst.clone(), shops.len() * n)?;
    let h2 = enc.vertex.forward(tape, p, agg)?;
    enc.edge2.forward(tape, p, h2, &idx, false)
}

/// Logits for a single shop. Shorter series are left-padded to the model length.
pub fn encode(sample: &ShopSample, model: &ModelParams) -> Result<EdgeLogits> {
    if sample.n_channels() != model.config.n_channels {
        return Err(contract!(
            "shop has {} channels, the model expects {}",
            sample.n_channels(),
            model.config.n_channels
        ));
    }
    let shop = NormalizedShop::padded(sample, model.config.length)?;
    let logits = encode_shops(&[&shop], model)?;
    Ok(logits.into_iter().next().expect("one shop"))
}

/// Noise-free logits for already normalized shops.
pub fn encode_shops(shops: &[&NormalizedShop], model: &ModelParams) -> Result<Vec<EdgeLogits>> {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let out = encode_on_tape(&mut tape, &p, model, shops)?;
    Ok(EdgeLogits::split_batch(model.config.n_nodes(), tape.value(out)))
}

/// I.i.d. standard Gumbel draws.
pub fn gumbel_noise(rng: &mut Rng, count: usize) -> Vec<f64> {
    (0..count)
        .map(|_| {
            let u: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
            -(-u.ln()).ln()
        })
        .collect()
}

pub fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(contract!("temperature must be positive, got {tau}"))
    }
}

/// `softmax((logits + g) / τ)` per pair with fresh Gumbel noise `g`.
pub fn gumbel_sample(logits: &EdgeLogits, tau: f64, rng: &mut Rng) -> Result<EdgeSample> {
    check_tau(tau)?;
    let g = gumbel_noise(rng, 2 * logits.n_pairs());
    Ok(gumbel_sample_with_noise(logits, &g, tau))
}

pub fn gumbel_sample_with_noise(logits: &EdgeLogits, noise: &[f64], tau: f64) -> EdgeSample {
    let z = logits
        .values
        .iter()
        .zip(noise.chunks(2))
        .map(|(l, g)| softmax2((l[0] + g[0]) / tau, (l[1] + g[1]) / tau))
        .collect();
    EdgeSample {
        n_nodes: logits.n_nodes,
        z,
    }
}

/// Differentiable relaxed sample on the tape; returns the edge-weight column `[rows, 1]`.
pub fn gumbel_on_tape(tape: &mut Tape, logits: Var, noise: Tensor, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let g = tape.constant(noise);
    let s = tape.add(logits, g)?;
    let s = tape.scale(s, 1.0 / tau)?;
    let z = tape.softmax(s, 1)?;
    tape.slice_cols(z, 1, 2)
}

/// Noise-free edge probabilities and the thresholded graph.
pub fn infer_graph(logits: &EdgeLogits) -> (CausalGraph, EdgeMatrix) {
    let probs: Vec<f64> = logits.probs().iter().map(|p| p[1]).collect();
    let m = EdgeMatrix::from_pairs(logits.n_nodes, &probs);
    (m.threshold(EDGE_THRESHOLD), m)
}

pub fn export_structure(shop_id: usize, logits: &EdgeLogits) -> StructureExport {
    let (graph, probs) = infer_graph(logits);
    StructureExport {
        shop_id,
        edge_probs: probs.rows(),
        adjacency: graph.to_matrix(),
    }
}
