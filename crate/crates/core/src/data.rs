//! Shop records, causal graphs, and per-shop normalization.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// Lower/upper bounds of the min-max scaled target.
pub const TARGET_LO: f64 = 0.05;
pub const TARGET_HI: f64 = 0.95;

/// One shop: `T×d` channel spends, a length-`T` target, and a context vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ShopSample {
    n_channels: usize,
    /// Row-major `T×d`.
    x: Vec<f64>,
    y: Vec<f64>,
    context: Vec<f64>,
}

impl ShopSample {
    pub fn new(n_channels: usize, x: Vec<f64>, y: Vec<f64>, context: Vec<f64>) -> Result<Self> {
        if n_channels == 0 {
            return Err(contract!("a shop needs at least one channel"));
        }
        if x.len() != y.len() * n_channels {
            return Err(contract!(
                "channel matrix has {} values, expected {}×{}",
                x.len(),
                y.len(),
                n_channels
            ));
        }
        Ok(ShopSample {
            n_channels,
            x,
            y,
            context,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    /// Channels plus the target.
    pub fn n_nodes(&self) -> usize {
        self.n_channels + 1
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn x_at(&self, t: usize, channel: usize) -> f64 {
        self.x[t * self.n_channels + channel]
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn context(&self) -> &[f64] {
        &self.context
    }

    /// Series of node `j` (channels `0..d`, target `d`).
    pub fn node_series(&self, j: usize) -> Vec<f64> {
        if j == self.n_channels {
            self.y.clone()
        } else {
            (0..self.len()).map(|t| self.x_at(t, j)).collect()
        }
    }

    /// Replaces the series of node `j`.
    pub fn set_node_series(&mut self, j: usize, series: &[f64]) {
        assert_eq!(series.len(), self.len());
        if j == self.n_channels {
            self.y.copy_from_slice(series);
        } else {
            for (t, v) in series.iter().enumerate() {
                self.x[t * self.n_channels + j] = *v;
            }
        }
    }
}

/// Directed graph over `d` channels plus the target (last node); no self-loops.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CausalGraph {
    n: usize,
    adj: Vec<bool>,
}

impl CausalGraph {
    pub fn empty(n_nodes: usize) -> Self {
        CausalGraph {
            n: n_nodes,
            adj: vec![false; n_nodes * n_nodes],
        }
    }

    /// From a 0/1 matrix; row `i` → column `j` means edge `i→j`. The diagonal must be 0.
    pub fn from_matrix(rows: &[Vec<u8>]) -> Result<Self> {
        let n = rows.len();
        let mut g = CausalGraph::empty(n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(contract!("adjacency row {i} has {} entries, expected {n}", row.len()));
            }
            for (j, &v) in row.iter().enumerate() {
                match (v, i == j) {
                    (0, _) => {}
                    (1, false) => g.adj[i * n + j] = true,
                    (1, true) => return Err(contract!("self-loop on node {i}")),
                    _ => return Err(contract!("adjacency entry ({i},{j}) = {v} is not 0/1")),
                }
            }
        }
        Ok(g)
    }

    pub fn to_matrix(&self) -> Vec<Vec<u8>> {
        (0..self.n)
            .map(|i| (0..self.n).map(|j| u8::from(self.has_edge(i, j))).collect())
            .collect()
    }

    pub fn n_nodes(&self) -> usize {
        self.n
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.adj[from * self.n + to]
    }

    pub fn set_edge(&mut self, from: usize, to: usize, present: bool) {
        assert_ne!(from, to, "self-loops are excluded");
        self.adj[from * self.n + to] = present;
    }

    pub fn parents(&self, node: usize) -> Vec<usize> {
        (0..self.n).filter(|&i| self.has_edge(i, node)).collect()
    }

    pub fn children(&self, node: usize) -> Vec<usize> {
        (0..self.n).filter(|&j| self.has_edge(node, j)).collect()
    }

    pub fn edge_count(&self) -> usize {
        self.adj.iter().filter(|&&e| e).count()
    }

    /// `true` when a directed path `from → … → to` exists.
    pub fn reaches(&self, from: usize, to: usize) -> bool {
        let mut seen = vec![false; self.n];
        let mut stack = vec![from];
        while let Some(v) = stack.pop() {
            for w in self.children(v) {
                if w == to {
                    return true;
                }
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        false
    }
}

/// Ordered off-diagonal pairs `(i, j)`, row-major. This is the edge order used everywhere.
pub fn ordered_pairs(n_nodes: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(n_nodes * n_nodes.saturating_sub(1));
    for i in 0..n_nodes {
        for j in 0..n_nodes {
            if i != j {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Square real matrix over graph nodes (edge probabilities or scores); diagonal is 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeMatrix {
    n: usize,
    values: Vec<f64>,
}

impl EdgeMatrix {
    pub fn zeros(n_nodes: usize) -> Self {
        EdgeMatrix {
            n: n_nodes,
            values: vec![0.0; n_nodes * n_nodes],
        }
    }

    /// From per-pair values in [`ordered_pairs`] order.
    pub fn from_pairs(n_nodes: usize, pair_values: &[f64]) -> Self {
        let mut m = EdgeMatrix::zeros(n_nodes);
        for (&(i, j), &v) in ordered_pairs(n_nodes).iter().zip(pair_values) {
            m.set(i, j, v);
        }
        m
    }

    pub fn n_nodes(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.n + j] = v;
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.values.chunks(self.n).map(<[f64]>::to_vec).collect()
    }

    /// Off-diagonal values in [`ordered_pairs`] order.
    pub fn pair_values(&self) -> Vec<f64> {
        ordered_pairs(self.n).iter().map(|&(i, j)| self.get(i, j)).collect()
    }

    /// Hard graph: edge where the value exceeds `threshold` strictly.
    pub fn threshold(&self, threshold: f64) -> CausalGraph {
        let mut g = CausalGraph::empty(self.n);
        for (i, j) in ordered_pairs(self.n) {
            if self.get(i, j) > threshold {
                g.set_edge(i, j, true);
            }
        }
        g
    }
}

/// Per-shop normalization: z-scored channels and min-max scaled target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub channel_mean: Vec<f64>,
    pub channel_std: Vec<f64>,
    pub target_min: f64,
    pub target_max: f64,
}

impl Scaler {
    pub fn fit(sample: &ShopSample) -> Self {
        let t = sample.len().max(1) as f64;
        let d = sample.n_channels();
        let mut channel_mean = vec![0.0; d];
        let mut channel_std = vec![0.0; d];
        for j in 0..d {
            let series = sample.node_series(j);
            let mean = series.iter().sum::<f64>() / t;
            let var = series.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t;
            channel_mean[j] = mean;
            channel_std[j] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        }
        let target_min = sample.y().iter().copied().fold(f64::INFINITY, f64::min);
        let target_max = sample.y().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Scaler {
            channel_mean,
            channel_std,
            target_min,
            target_max,
        }
    }

    fn target_range(&self) -> f64 {
        let r = self.target_max - self.target_min;
        if r > 1e-12 {
            r
        } else {
            1.0
        }
    }

    pub fn scale_target(&self, y: f64) -> f64 {
        TARGET_LO + (TARGET_HI - TARGET_LO) * (y - self.target_min) / self.target_range()
    }

    pub fn descale_target(&self, scaled: f64) -> f64 {
        self.target_min + (scaled - TARGET_LO) / (TARGET_HI - TARGET_LO) * self.target_range()
    }

    pub fn scale_channel(&self, j: usize, x: f64) -> f64 {
        (x - self.channel_mean[j]) / self.channel_std[j]
    }

    pub fn descale_channel(&self, j: usize, scaled: f64) -> f64 {
        scaled * self.channel_std[j] + self.channel_mean[j]
    }
}

/// A shop in model units, `T×(d+1)` with the target in the last column.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedShop {
    n_nodes: usize,
    obs: Vec<f64>,
    /// `false` for left-padded steps.
    observed: Vec<bool>,
    context: Vec<f64>,
    scaler: Scaler,
}

impl NormalizedShop {
    pub fn from_sample(sample: &ShopSample) -> Self {
        let scaler = Scaler::fit(sample);
        let n = sample.n_nodes();
        let d = sample.n_channels();
        let mut obs = Vec::with_capacity(sample.len() * n);
        for t in 0..sample.len() {
            for j in 0..d {
                obs.push(scaler.scale_channel(j, sample.x_at(t, j)));
            }
            obs.push(scaler.scale_target(sample.y()[t]));
        }
        NormalizedShop {
            n_nodes: n,
            observed: vec![true; sample.len()],
            obs,
            context: sample.context().to_vec(),
            scaler,
        }
    }

    /// Left-pads with zeros up to `len` steps; statistics come from observed steps only.
    pub fn padded(sample: &ShopSample, len: usize) -> Result<Self> {
        if sample.len() > len {
            return Err(contract!(
                "series of length {} exceeds model length {len}",
                sample.len()
            ));
        }
        let mut shop = NormalizedShop::from_sample(sample);
        let pad = len - sample.len();
        if pad > 0 {
            let mut obs = vec![0.0; pad * shop.n_nodes];
            obs.extend_from_slice(&shop.obs);
            let mut observed = vec![false; pad];
            observed.extend_from_slice(&shop.observed);
            shop.obs = obs;
            shop.observed = observed;
        }
        Ok(shop)
    }

    pub fn len(&self) -> usize {
        self.observed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observed.is_empty()
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn obs(&self) -> &[f64] {
        &self.obs
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.obs[t * self.n_nodes..(t + 1) * self.n_nodes]
    }

    pub fn at(&self, t: usize, j: usize) -> f64 {
        self.obs[t * self.n_nodes + j]
    }

    pub fn observed(&self) -> &[bool] {
        &self.observed
    }

    pub fn context(&self) -> &[f64] {
        &self.context
    }

    pub fn scaler(&self) -> &Scaler {
        &self.scaler
    }

    pub fn target_series(&self) -> Vec<f64> {
        (0..self.len()).map(|t| self.at(t, self.n_nodes - 1)).collect()
    }
}
