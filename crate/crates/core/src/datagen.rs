//! Heterogeneous synthetic marketing-mix data with known causal graphs.
//!
//! Generation has three stages: sample `R` template graphs, draw NARMA source
//! channels and lag-window children for every shop, then build the target from
//! its parent channels (optionally passed through a context-driven Hill curve).

use std::collections::BTreeMap;

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{CausalGraph, ShopSample};
use crate::error::{contract, Error, Result};
use crate::rng::{substream, Purpose, Rng};

/// Noise standard deviation (variance 0.01).
pub const NOISE_STD: f64 = 0.1;
/// Standard deviation of NARMA coefficients (variance 0.1).
pub const COEF_STD: f64 = 0.316_227_766_016_837_94;
pub const CLIP: f64 = 10.0;
const MAX_GRAPH_RESAMPLES: usize = 1000;
const MAX_REGENERATIONS: usize = 20;
/// Lower end of the rescaled response before the Hill curve, keeping outputs off zero.
const HILL_INPUT_FLOOR: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimMode {
    /// Target is the raw lag-window response.
    Sim1,
    /// Target passes through a shop-specific Hill curve set by the context.
    Sim2,
}

impl std::fmt::Display for SimMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SimMode::Sim1 => "sim1",
            SimMode::Sim2 => "sim2",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub n_shops: usize,
    pub n_channels: usize,
    pub length: usize,
    pub n_structures: usize,
    /// NARMA order and lag window `K`.
    pub narma_order: usize,
    pub mode: SimMode,
    pub context_dim: usize,
    pub edge_prob: f64,
    pub seed: u64,
    /// One lag-window projection shared by every edge of every shop.
    pub shared_mechanism: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_shops: 50,
            n_channels: 5,
            length: 120,
            n_structures: 5,
            narma_order: 5,
            mode: SimMode::Sim1,
            context_dim: 0,
            edge_prob: 0.3,
            seed: 0,
            shared_mechanism: true,
        }
    }
}

impl SimConfig {
    pub fn sim1(n_channels: usize, length: usize, seed: u64) -> Self {
        SimConfig {
            n_channels,
            length,
            seed,
            ..SimConfig::default()
        }
    }

    pub fn sim2(n_channels: usize, length: usize, seed: u64) -> Self {
        SimConfig {
            n_shops: 100,
            n_channels,
            length,
            mode: SimMode::Sim2,
            context_dim: 2,
            seed,
            ..SimConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_structures < 1 || self.n_shops < self.n_structures {
            return Err(contract!(
                "need n_shops ≥ n_structures ≥ 1, got {} and {}",
                self.n_shops,
                self.n_structures
            ));
        }
        if self.n_channels < 2 {
            return Err(contract!("need at least 2 channels, got {}", self.n_channels));
        }
        if self.narma_order < 1 || self.length <= self.narma_order {
            return Err(contract!(
                "need length > narma_order ≥ 1, got {} and {}",
                self.length,
                self.narma_order
            ));
        }
        if self.mode == SimMode::Sim2 && self.context_dim < 1 {
            return Err(contract!("sim2 needs context_dim ≥ 1"));
        }
        if !(self.edge_prob > 0.0 && self.edge_prob < 1.0) {
            return Err(contract!("edge_prob must lie in (0,1), got {}", self.edge_prob));
        }
        Ok(())
    }

    pub fn n_nodes(&self) -> usize {
        self.n_channels + 1
    }
}

/// Per-shop generator parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ShopGenParams {
    /// NARMA coefficients per channel (used for source channels).
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    /// Edge weight and lag-window projection per `(parent, child)` edge.
    pub omega: BTreeMap<(usize, usize), f64>,
    pub eta: BTreeMap<(usize, usize), Vec<f64>>,
    pub context: Vec<f64>,
    /// Seeds of each channel's private noise stream, then the target's.
    pub noise_seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthDataset {
    pub samples: Vec<ShopSample>,
    pub graphs: Vec<CausalGraph>,
    /// Index into `templates` for each shop.
    pub structure_assignment: Vec<usize>,
    pub templates: Vec<CausalGraph>,
    pub params: Vec<ShopGenParams>,
    pub config: SimConfig,
}

/// Independent-edge graph over `n` nodes, before any constraint is applied.
pub fn sample_raw_graph(n_nodes: usize, edge_prob: f64, rng: &mut Rng) -> CausalGraph {
    let mut g = CausalGraph::empty(n_nodes);
    for i in 0..n_nodes {
        for j in 0..n_nodes {
            if i != j && rng.gen_bool(edge_prob) {
                g.set_edge(i, j, true);
            }
        }
    }
    g
}

/// Applies the target-sink rule and checks the remaining constraints.
fn constrain(mut g: CausalGraph, n_channels: usize) -> Option<CausalGraph> {
    let target = n_channels;
    for j in 0..n_channels {
        g.set_edge(target, j, false);
    }
    let target_has_parent = !g.parents(target).is_empty();
    let has_source = (0..n_channels).any(|j| g.parents(j).is_empty());
    (target_has_parent && has_source).then_some(g)
}

/// `R` distinct graphs meeting the target-sink and source-existence constraints.
pub fn sample_structures(cfg: &SimConfig, rng: &mut Rng) -> Result<Vec<CausalGraph>> {
    cfg.validate()?;
    let mut graphs: Vec<CausalGraph> = Vec::with_capacity(cfg.n_structures);
    let mut attempts = 0;
    while graphs.len() < cfg.n_structures {
        if attempts == MAX_GRAPH_RESAMPLES {
            return Err(Error::Generation(format!(
                "no valid set of {} graphs after {MAX_GRAPH_RESAMPLES} resamples (d={}, edge_prob={})",
                cfg.n_structures, cfg.n_channels, cfg.edge_prob
            )));
        }
        attempts += 1;
        let raw = sample_raw_graph(cfg.n_nodes(), cfg.edge_prob, rng);
        if let Some(g) = constrain(raw, cfg.n_channels) {
            if !graphs.contains(&g) {
                graphs.push(g);
            }
        }
    }
    Ok(graphs)
}

/// Uniform structure index per shop.
pub fn assign_structures(n_shops: usize, n_structures: usize, rng: &mut Rng) -> Vec<usize> {
    (0..n_shops).map(|_| rng.gen_range(0..n_structures)).collect()
}

fn normal(std: f64) -> Normal<f64> {
    Normal::new(0.0, std).expect("positive std")
}

fn draw_projection(k: usize, rng: &mut Rng) -> Vec<f64> {
    let scale = 1.0 / (k as f64).sqrt();
    let n = normal(1.0);
    (0..k).map(|_| n.sample(rng) * scale).collect()
}

/// The lag-window projection shared by all edges when `shared_mechanism` is set.
pub fn draw_mechanism(cfg: &SimConfig) -> Vec<f64> {
    let mut rng = substream(cfg.seed, Purpose::Mechanism, &[]);
    draw_projection(cfg.narma_order, &mut rng)
}

pub fn draw_shop_params(
    graph: &CausalGraph,
    cfg: &SimConfig,
    mechanism: Option<&[f64]>,
    rng: &mut Rng,
) -> ShopGenParams {
    let d = cfg.n_channels;
    let coef = normal(COEF_STD);
    let alpha = (0..d).map(|_| coef.sample(rng)).collect();
    let beta = (0..d).map(|_| coef.sample(rng)).collect();
    let gamma = (0..d).map(|_| coef.sample(rng)).collect();
    let mut omega = BTreeMap::new();
    let mut eta = BTreeMap::new();
    for child in 0..cfg.n_nodes() {
        for parent in graph.parents(child) {
            omega.insert((parent, child), 1.0);
            let projection = match mechanism {
                Some(m) => m.to_vec(),
                None => draw_projection(cfg.narma_order, rng),
            };
            eta.insert((parent, child), projection);
        }
    }
    let context = (0..cfg.context_dim).map(|_| rng.gen::<f64>()).collect();
    let noise_seeds = (0..=d).map(|_| rng.gen()).collect();
    ShopGenParams {
        alpha,
        beta,
        gamma,
        omega,
        eta,
        context,
        noise_seeds,
    }
}

fn noise_series(seed: u64, len: usize) -> (Vec<f64>, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = normal(NOISE_STD);
    let eps = (0..len).map(|_| n.sample(&mut rng)).collect();
    (eps, rng)
}

/// NARMA-K source series: `x_t = a x_{t-1} + b x_{t-1} Σ_{k=1..K} x_{t-k} + c ε_{t-K} ε_{t-1} + ε_t`.
pub fn narma_series(a: f64, b: f64, c: f64, order: usize, eps: &[f64]) -> (Vec<f64>, usize) {
    let len = eps.len();
    let mut x = vec![0.0; len];
    let mut clipped = 0;
    for t in 0..len {
        let v = if t < order {
            eps[t]
        } else {
            let window: f64 = (1..=order).map(|k| x[t - k]).sum();
            a * x[t - 1] + b * x[t - 1] * window + c * eps[t - order] * eps[t - 1] + eps[t]
        };
        if !v.is_finite() || v.abs() > CLIP {
            clipped += 1;
            x[t] = if v.is_nan() { 0.0 } else { v.clamp(-CLIP, CLIP) };
        } else {
            x[t] = v;
        }
    }
    (x, clipped)
}

/// Generates one source channel from its private noise stream, redrawing coefficients
/// while clipping hits more than 1% of steps.
pub fn generate_source(
    channel: usize,
    params: &mut ShopGenParams,
    cfg: &SimConfig,
) -> Result<Vec<f64>> {
    let (eps, mut coef_rng) = noise_series(params.noise_seeds[channel], cfg.length);
    let coef = normal(COEF_STD);
    for attempt in 0..=MAX_REGENERATIONS {
        if attempt > 0 {
            params.alpha[channel] = coef.sample(&mut coef_rng);
            params.beta[channel] = coef.sample(&mut coef_rng);
            params.gamma[channel] = coef.sample(&mut coef_rng);
        }
        let (x, clipped) = narma_series(
            params.alpha[channel],
            params.beta[channel],
            params.gamma[channel],
            cfg.narma_order,
            &eps,
        );
        if (clipped as f64) <= 0.01 * cfg.length as f64 {
            return Ok(x);
        }
    }
    Err(Error::Generation(format!(
        "channel {channel} diverged after {MAX_REGENERATIONS} regenerations"
    )))
}

/// `Σ_k η_k tanh(x_{t-k})`, `k = 1..K`.
fn lag_response(eta: &[f64], series: impl Fn(usize) -> f64, t: usize) -> f64 {
    eta.iter()
        .enumerate()
        .map(|(k, e)| e * series(t - k - 1).tanh())
        .sum()
}

/// `T×d` channel matrix: NARMA sources, lag-window children of their channel parents.
pub fn generate_channels(
    graph: &CausalGraph,
    params: &mut ShopGenParams,
    cfg: &SimConfig,
) -> Result<Vec<f64>> {
    let (d, len, order) = (cfg.n_channels, cfg.length, cfg.narma_order);
    if len <= order {
        return Err(contract!("length {len} must exceed narma order {order}"));
    }
    let mut x = vec![0.0; len * d];
    let parents: Vec<Vec<usize>> = (0..d).map(|j| graph.parents(j)).collect();
    let mut child_noise = vec![Vec::new(); d];
    for j in 0..d {
        if parents[j].is_empty() {
            let series = generate_source(j, params, cfg)?;
            for (t, v) in series.into_iter().enumerate() {
                x[t * d + j] = v;
            }
        } else {
            child_noise[j] = noise_series(params.noise_seeds[j], len).0;
        }
    }
    for t in 0..len {
        for j in (0..d).filter(|&j| !parents[j].is_empty()) {
            let mut v = child_noise[j][t];
            if t >= order {
                for &i in &parents[j] {
                    let w = params.omega[&(i, j)];
                    v += w * lag_response(&params.eta[&(i, j)], |s| x[s * d + i], t);
                }
            }
            x[t * d + j] = v.clamp(-CLIP, CLIP);
        }
    }
    Ok(x)
}

/// Hill-curve shape and inflexion point for a sim2 context.
pub fn hill_params(context: &[f64]) -> (f64, f64) {
    let alpha = 0.5 + 2.5 * context.first().copied().unwrap_or(0.5);
    let gamma = 0.2 + 0.8 * context.get(1).copied().unwrap_or(0.5);
    (alpha, gamma)
}

pub fn generate_response(
    channels: &[f64],
    graph: &CausalGraph,
    params: &ShopGenParams,
    cfg: &SimConfig,
) -> Result<Vec<f64>> {
    let (d, len, order) = (cfg.n_channels, cfg.length, cfg.narma_order);
    let target = d;
    let parents = graph.parents(target);
    if parents.is_empty() {
        return Err(contract!("the target has no parents"));
    }
    let (eps, _) = noise_series(params.noise_seeds[target], len);
    let u: Vec<f64> = (0..len)
        .map(|t| {
            let mut v = eps[t];
            if t >= order {
                for &i in &parents {
                    v += params.omega[&(i, target)]
                        * lag_response(&params.eta[&(i, target)], |s| channels[s * d + i], t);
                }
            }
            v
        })
        .collect();
    Ok(match cfg.mode {
        SimMode::Sim1 => u,
        SimMode::Sim2 => {
            let (alpha, gamma) = hill_params(&params.context);
            let lo = u.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let range = if hi - lo > 1e-12 { hi - lo } else { 1.0 };
            u.iter()
                .map(|&v| {
                    let scaled = HILL_INPUT_FLOOR + (2.0 - HILL_INPUT_FLOOR) * (v - lo) / range;
                    let p = scaled.powf(alpha);
                    p / (p + gamma)
                })
                .collect()
        }
    })
}

pub fn generate_dataset(cfg: &SimConfig) -> Result<GroundTruthDataset> {
    cfg.validate()?;
    let templates = sample_structures(cfg, &mut substream(cfg.seed, Purpose::Graphs, &[]))?;
    let structure_assignment = assign_structures(
        cfg.n_shops,
        cfg.n_structures,
        &mut substream(cfg.seed, Purpose::Assignment, &[]),
    );
    let mechanism = cfg.shared_mechanism.then(|| draw_mechanism(cfg));
    let mut samples = Vec::with_capacity(cfg.n_shops);
    let mut graphs = Vec::with_capacity(cfg.n_shops);
    let mut params = Vec::with_capacity(cfg.n_shops);
    for (shop, &s) in structure_assignment.iter().enumerate() {
        let graph = templates[s].clone();
        let mut rng = substream(cfg.seed, Purpose::Shop, &[shop as u64]);
        let mut p = draw_shop_params(&graph, cfg, mechanism.as_deref(), &mut rng);
        let x = generate_channels(&graph, &mut p, cfg)
            .map_err(|e| Error::Generation(format!("shop {shop}: {e}")))?;
        let y = generate_response(&x, &graph, &p, cfg)?;
        samples.push(ShopSample::new(cfg.n_channels, x, y, p.context.clone())?);
        graphs.push(graph);
        params.push(p);
    }
    Ok(GroundTruthDataset {
        samples,
        graphs,
        structure_assignment,
        templates,
        params,
        config: cfg.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_edge_probability_cannot_satisfy_constraints() {
        let cfg = SimConfig {
            n_channels: 2,
            edge_prob: 1e-300,
            ..SimConfig::default()
        };
        let err = sample_structures(&cfg, &mut substream(1, Purpose::Graphs, &[])).unwrap_err();
        assert!(matches!(err, Error::Generation(_)));
    }

    #[test]
    fn structures_are_deterministic_and_constrained() {
        let cfg = SimConfig {
            seed: 7,
            ..SimConfig::default()
        };
        let a = sample_structures(&cfg, &mut substream(7, Purpose::Graphs, &[])).unwrap();
        let b = sample_structures(&cfg, &mut substream(7, Purpose::Graphs, &[])).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        for (k, g) in a.iter().enumerate() {
            assert!(g.children(5).is_empty());
            assert!(!g.parents(5).is_empty());
            assert!((0..5).any(|j| g.parents(j).is_empty()));
            assert!(a[..k].iter().all(|h| h != g));
        }
    }

    #[test]
    fn raw_edge_density_matches_probability() {
        let mut rng = substream(3, Purpose::Graphs, &[]);
        let n = 11;
        let total: usize = (0..1000).map(|_| sample_raw_graph(n, 0.3, &mut rng).edge_count()).sum();
        let density = total as f64 / (1000 * n * (n - 1)) as f64;
        assert!((density - 0.3).abs() < 0.02, "density {density}");
    }

    #[test]
    fn collapsed_narma_is_plain_noise() {
        let eps: Vec<f64> = (0..50).map(|t| (t as f64 * 0.37).sin() * 0.1).collect();
        let (x, clipped) = narma_series(0.0, 0.0, 0.0, 5, &eps);
        assert_eq!(x, eps);
        assert_eq!(clipped, 0);
    }

    #[test]
    fn graph_without_channel_edges_gives_pure_sources() {
        let cfg = SimConfig::default();
        let mut g = CausalGraph::empty(6);
        g.set_edge(0, 5, true);
        let mut rng = substream(1, Purpose::Shop, &[0]);
        let mut p = draw_shop_params(&g, &cfg, None, &mut rng);
        let x = generate_channels(&g, &mut p, &cfg).unwrap();
        for j in 0..5 {
            let (eps, _) = noise_series(p.noise_seeds[j], cfg.length);
            let (expected, _) = narma_series(p.alpha[j], p.beta[j], p.gamma[j], 5, &eps);
            let got: Vec<f64> = (0..cfg.length).map(|t| x[t * 5 + j]).collect();
            assert_eq!(got, expected);
        }
    }

    #[test]
    fn sim1_with_zero_projection_is_noise() {
        let cfg = SimConfig::default();
        let mut g = CausalGraph::empty(6);
        g.set_edge(0, 5, true);
        let mut rng = substream(2, Purpose::Shop, &[0]);
        let mut p = draw_shop_params(&g, &cfg, None, &mut rng);
        p.eta.insert((0, 5), vec![0.0; 5]);
        let x = generate_channels(&g, &mut p, &cfg).unwrap();
        let y = generate_response(&x, &g, &p, &cfg).unwrap();
        assert_eq!(y, noise_series(p.noise_seeds[5], cfg.length).0);
    }

    #[test]
    fn hill_parameter_endpoints() {
        assert_eq!(hill_params(&[0.0, 0.0]), (0.5, 0.2));
        assert_eq!(hill_params(&[1.0, 1.0]), (3.0, 1.0));
    }

    #[test]
    fn target_without_parents_is_rejected() {
        let cfg = SimConfig::default();
        let g = CausalGraph::empty(6);
        let mut rng = substream(2, Purpose::Shop, &[0]);
        let p = draw_shop_params(&g, &cfg, None, &mut rng);
        let x = vec![0.0; cfg.length * 5];
        assert!(matches!(generate_response(&x, &g, &p, &cfg), Err(Error::Contract(_))));
    }
}
