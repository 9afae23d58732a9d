use std::time::Instant;

use cmmm_core::data::{CausalGraph, NormalizedShop, ShopSample};
use cmmm_core::decoder::{
    curve_terms, decode_steps, hill, rollout, step, zero_hidden, DecoderState, ShopTerms, TeacherBatch,
};
use cmmm_core::diffcore::{Tape, Tensor};
use cmmm_core::encoder::EdgeSample;
use cmmm_core::model::{ModelConfig, ModelParams};
use cmmm_core::rng::{substream, Purpose};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn random_shop(d: usize, len: usize, ctx: usize, rng: &mut impl Rng) -> ShopSample {
    let x = (0..len * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let y = (0..len).map(|_| rng.gen_range(0.0..5.0)).collect();
    let c = (0..ctx).map(|_| rng.gen_range(0.0..1.0)).collect();
    ShopSample::new(d, x, y, c).unwrap()
}

fn random_graph(n: usize, density: f64, rng: &mut impl Rng) -> CausalGraph {
    let mut g = CausalGraph::empty(n);
    for i in 0..n {
        for j in 0..n {
            if i != j && rng.gen_bool(density) {
                g.set_edge(i, j, true);
            }
        }
    }
    g
}

/// Initialized model with every weight moved off its start value, so message paths are live.
fn live_model(cfg: ModelConfig, seed: u64) -> ModelParams {
    let mut m = ModelParams::init(cfg, seed).unwrap();
    let mut rng = substream(seed, Purpose::Init, &[7]);
    for id in 0..m.params.len() {
        for v in m.params.get_mut(id).data_mut() {
            *v += 0.3 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    m
}

/// One-step predictions `μ^{t+1}` for `t = 0..T-1`, decoding one step at a time.
fn stepwise(model: &ModelParams, shop: &NormalizedShop, z: &EdgeSample) -> Vec<Vec<f64>> {
    let mut state = DecoderState::zeros(model);
    let mut out = Vec::new();
    for t in 0..shop.len() - 1 {
        let (next, mu) = step(shop.row(t), &state, z, shop.context(), model).unwrap();
        state = next;
        out.push(mu);
    }
    out
}

/// Same predictions from the batched teacher-forced pass used in training.
fn batched(model: &ModelParams, shop: &NormalizedShop, z: &EdgeSample) -> Vec<Vec<f64>> {
    let batch = TeacherBatch::new(&[shop]).unwrap();
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let (alpha, gamma) = curve_terms(&mut tape, &p, model, &[shop.context()]).unwrap();
    let terms = ShopTerms {
        z: tape.constant(Tensor::column(z.edge_weights())),
        alpha,
        gamma,
    };
    let inputs = tape.constant(batch.inputs.clone());
    let hidden = zero_hidden(&mut tape, model, 1);
    let out = decode_steps(&mut tape, &p, model, &batch.layout, inputs, terms, hidden).unwrap();
    let d = model.config.n_channels;
    let ch = tape.value(out.mu_channel).data();
    let tg = tape.value(out.mu_target).data();
    (0..batch.layout.steps)
        .map(|s| {
            let mut row = ch[s * d..(s + 1) * d].to_vec();
            row.push(tg[s]);
            row
        })
        .collect()
}

#[test]
fn zero_edge_blocks_information_bit_exactly() {
    let mut rng = substream(11, Purpose::Init, &[]);
    let mut checked = 0;
    for trial in 0..100u64 {
        let d = rng.gen_range(2..=5);
        let n = d + 1;
        let ctx = rng.gen_range(0..=2);
        let len = rng.gen_range(6..=14);
        let cfg = ModelConfig::new(d, len, ctx).with_hidden(rng.gen_range(2..=6));
        let model = live_model(cfg, trial);
        let (graph, candidates) = loop {
            let g = random_graph(n, 0.35, &mut rng);
            let c: Vec<(usize, usize)> = (0..n)
                .flat_map(|i| (0..n).map(move |j| (i, j)))
                .filter(|&(i, j)| i != j && !g.reaches(i, j))
                .collect();
            if !c.is_empty() {
                break (g, c);
            }
        };
        let (i, j) = candidates[rng.gen_range(0..candidates.len())];
        let sample = random_shop(d, len, ctx, &mut rng);
        let mut perturbed = sample.clone();
        let noise: Vec<f64> = (0..len).map(|_| rng.gen_range(0.5..3.0)).collect();
        let series: Vec<f64> = sample.node_series(i).iter().zip(&noise).map(|(v, e)| v * e + e).collect();
        perturbed.set_node_series(i, &series);
        let z = EdgeSample::hard(&graph);
        let a = batched(&model, &NormalizedShop::from_sample(&sample), &z);
        let b = batched(&model, &NormalizedShop::from_sample(&perturbed), &z);
        for t in 0..a.len() {
            assert_eq!(a[t][j].to_bits(), b[t][j].to_bits(), "trial {trial}: {i}->{j} leaked at step {t}");
        }
        checked += 1;
    }
    assert_eq!(checked, 100);
}

#[test]
fn active_edge_carries_information() {
    let mut rng = substream(12, Purpose::Init, &[]);
    let model = live_model(ModelConfig::new(2, 10, 0).with_hidden(4), 5);
    let mut graph = CausalGraph::empty(3);
    graph.set_edge(0, 1, true);
    let sample = random_shop(2, 10, 0, &mut rng);
    let mut perturbed = sample.clone();
    let series: Vec<f64> = sample.node_series(0).iter().map(|v| -2.0 * v).collect();
    perturbed.set_node_series(0, &series);
    let z = EdgeSample::hard(&graph);
    let a = batched(&model, &NormalizedShop::from_sample(&sample), &z);
    let b = batched(&model, &NormalizedShop::from_sample(&perturbed), &z);
    assert!(a.iter().zip(&b).any(|(x, y)| x[1] != y[1]));
    assert!(a.iter().zip(&b).all(|(x, y)| x[2] == y[2]));
}

#[test]
fn teacher_forcing_matches_stepwise_decoding() {
    let mut rng = substream(13, Purpose::Init, &[]);
    for seed in 0..5 {
        let ctx = (seed % 3) as usize;
        let model = live_model(ModelConfig::new(3, 12, ctx).with_hidden(5), seed);
        let shop = NormalizedShop::from_sample(&random_shop(3, 12, ctx, &mut rng));
        let weights: Vec<[f64; 2]> = (0..12)
            .map(|_| {
                let w: f64 = rng.gen_range(0.0..1.0);
                [1.0 - w, w]
            })
            .collect();
        let z = EdgeSample::new(4, weights).unwrap();
        let a = batched(&model, &shop, &z);
        let b = stepwise(&model, &shop, &z);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
            assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()), "{x} vs {y}");
        }
    }
}

#[test]
fn one_step_rollout_equals_teacher_forced_prediction() {
    let mut rng = substream(14, Purpose::Init, &[]);
    let model = live_model(ModelConfig::new(2, 15, 1).with_hidden(4), 2);
    let sample = random_shop(2, 15, 1, &mut rng);
    let shop = NormalizedShop::from_sample(&sample);
    let z = EdgeSample::hard(&random_graph(3, 0.5, &mut rng));
    let tf = batched(&model, &shop, &z);
    for burn_in in [1, 7, 14] {
        let f = rollout(&sample, &z, burn_in, 1, &model).unwrap();
        for (x, y) in f.mu[0].iter().zip(&tf[burn_in - 1]) {
            assert!((x - y).abs() <= 1e-12, "burn-in {burn_in}: {x} vs {y}");
        }
    }
    let long = rollout(&sample, &z, 5, 10, &model).unwrap();
    assert_eq!(long.horizon(), 10);
    assert!(long.target_means().iter().all(|&y| y > 0.0 && y < 1.0));
    assert!(rollout(&sample, &z, 10, 6, &model).is_err());
    assert!(rollout(&sample, &z, 0, 3, &model).is_err());
}

#[test]
fn forecast_csv_layout() {
    let mut rng = substream(15, Purpose::Init, &[]);
    let model = ModelParams::init(ModelConfig::new(2, 10, 0).with_hidden(3), 1).unwrap();
    let sample = random_shop(2, 10, 0, &mut rng);
    let z = EdgeSample::hard(&CausalGraph::empty(3));
    let f = rollout(&sample, &z, 7, 3, &model).unwrap();
    let csv = f.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,mu_x1,mu_x2,mu_y,y_descaled");
    assert_eq!(lines.len(), 4);
    let last: Vec<f64> = lines[3].split(',').skip(1).map(|v| v.parse().unwrap()).collect();
    let y = sample.y();
    let (lo, hi) = y.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    // min-max scaling into [0.05, 0.95], inverted by hand
    let expected = lo + (last[2] - 0.05) / 0.9 * (hi - lo);
    assert!((last[3] - expected).abs() < 1e-9 * (1.0 + expected.abs()));
}

#[test]
fn decoding_time_is_linear_in_length() {
    let model = ModelParams::init(ModelConfig::new(4, 400, 0).with_hidden(16), 0).unwrap();
    let mut rng = substream(16, Purpose::Init, &[]);
    let z = EdgeSample::new(5, vec![[0.5, 0.5]; 20]).unwrap();
    let time = |len: usize, rng: &mut _| {
        let shop = NormalizedShop::from_sample(&random_shop(4, len, 0, rng));
        let mut best = f64::MAX;
        for _ in 0..5 {
            let t0 = Instant::now();
            std::hint::black_box(batched(&model, &shop, &z));
            best = best.min(t0.elapsed().as_secs_f64());
        }
        best
    };
    let short = time(200, &mut rng);
    let long = time(400, &mut rng);
    let ratio = long / short;
    assert!((1.4..=2.6).contains(&ratio), "doubling T changed time by {ratio}");
}

proptest! {
    #[test]
    fn saturation_is_monotone(r1 in 0.0f64..50.0, dr in 0.0f64..50.0, alpha in 0.2f64..5.0, gamma in 0.05f64..5.0) {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::column(vec![alpha, alpha]));
        let g = tape.constant(Tensor::column(vec![gamma, gamma]));
        let r = tape.constant(Tensor::column(vec![r1.max(1e-6), (r1 + dr).max(1e-6)]));
        let mu = hill(&mut tape, r, a, g).unwrap();
        let v = tape.value(mu).data();
        prop_assert!(v[1] >= v[0]);
        prop_assert!(v[0] >= 0.0 && v[1] <= 1.0);
    }

    #[test]
    fn target_prediction_stays_inside_unit_interval(
        seed in 0u64..1000,
        obs in prop::collection::vec(-50.0f64..50.0, 3),
        ctx in prop::collection::vec(-5.0f64..5.0, 2),
    ) {
        let model = ModelParams::init(ModelConfig::new(2, 4, 2).with_hidden(4), seed).unwrap();
        let z = EdgeSample::new(3, vec![[0.2, 0.8]; 6]).unwrap();
        let (next, mu) = step(&obs, &DecoderState::zeros(&model), &z, &ctx, &model).unwrap();
        prop_assert!(mu[2] > 0.0 && mu[2] < 1.0, "{}", mu[2]);
        prop_assert!(next.all_finite());
    }
}
