use cmmm_core::datagen::{generate_dataset, SimConfig};
use cmmm_core::encoder::{encode, EdgeLogits};
use cmmm_core::model::{ModelConfig, ModelParams};
use cmmm_core::rng::{substream, Purpose};
use cmmm_core::trainer::{elbo_loss, fit, kl_term, TrainConfig, TrainData};
use proptest::prelude::*;
use rand::Rng;

fn small_data(n_shops: usize, seed: u64) -> cmmm_core::datagen::GroundTruthDataset {
    generate_dataset(&SimConfig {
        n_shops,
        n_structures: 2,
        narma_order: 3,
        ..SimConfig::sim1(3, 30, seed)
    })
    .unwrap()
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        hidden: 4,
        encoder_hidden: 6,
        batch: 4,
        ..TrainConfig::default()
    }
}

/// Two-class KL computed directly from probabilities.
fn kl_oracle(l: [f64; 2], prior: f64) -> f64 {
    let e0 = 1.0 / (1.0 + (l[1] - l[0]).exp());
    let e1 = 1.0 - e0;
    let mut kl = 0.0;
    if e0 > 0.0 {
        kl += e0 * (e0 / (1.0 - prior)).ln();
    }
    if e1 > 0.0 {
        kl += e1 * (e1 / prior).ln();
    }
    kl
}

#[test]
fn kl_matches_closed_form() {
    let mut rng = substream(41, Purpose::Init, &[]);
    for _ in 0..200 {
        let values: Vec<[f64; 2]> = (0..12).map(|_| [rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0)]).collect();
        let prior = rng.gen_range(0.01..0.99);
        let expected: f64 = values.iter().map(|&l| kl_oracle(l, prior)).sum();
        let got = kl_term(&EdgeLogits::new(4, values).unwrap(), prior);
        assert!((got - expected).abs() < 1e-10, "{got} vs {expected}");
    }
    let at_prior = EdgeLogits::new(2, vec![[0.9f64.ln(), 0.1f64.ln()]; 2]).unwrap();
    assert!(kl_term(&at_prior, 0.1).abs() < 1e-15);
}

#[test]
fn zero_lambda_loss_is_the_nll() {
    let data = small_data(4, 2);
    let cfg = TrainConfig { lambda: 0.0, ..small_cfg() };
    let model = ModelParams::init(cfg.model_config(3, 30, 0), 5).unwrap();
    for (k, s) in data.samples.iter().enumerate() {
        let parts = elbo_loss(s, &model, &cfg, &mut substream(1, Purpose::TrainNoise, &[k as u64])).unwrap();
        assert!((parts.loss - parts.nll).abs() <= 1e-12 * parts.nll.abs().max(1.0));
        assert!(parts.kl > 0.0);
    }
}

#[test]
fn fit_is_deterministic_and_finite() {
    let data = small_data(12, 3);
    let run = || fit(TrainData { samples: &data.samples, graphs: Some(&data.graphs) }, &small_cfg()).unwrap();
    let a = run();
    let b = run();
    let strip = |h: &cmmm_core::trainer::TrainHistory| {
        h.rows.iter().map(|r| (r.epoch, r.train_loss.to_bits(), r.val_loss.to_bits(), r.val_auroc.map(f64::to_bits))).collect::<Vec<_>>()
    };
    assert_eq!(strip(&a.history), strip(&b.history));
    assert_eq!(a.model.to_checkpoint(), b.model.to_checkpoint());
    assert_eq!(a.split, b.split);
    assert!(a.model.params.all_finite());
    assert_eq!(a.history.rows.len(), 3);
    assert!(a.history.rows.windows(2).all(|w| w[0].epoch < w[1].epoch));
}

#[test]
fn empty_dataset_is_a_contract_error() {
    let err = fit(TrainData { samples: &[], graphs: None }, &small_cfg()).err().unwrap();
    assert_eq!(err.kind(), "contract");
}

#[test]
fn huge_lambda_pulls_the_posterior_to_the_prior() {
    let data = small_data(20, 4);
    let cfg = TrainConfig {
        lambda: 1e6,
        epochs: 40,
        lr: 1e-2,
        ..small_cfg()
    };
    let out = fit(TrainData { samples: &data.samples, graphs: None }, &cfg).unwrap();
    let mut gaps = Vec::new();
    for s in &data.samples {
        for p in encode(s, &out.model).unwrap().probs() {
            gaps.push((p[1] - cfg.prior_edge_prob).abs());
        }
    }
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    assert!(mean < 0.05, "mean |p - prior| = {mean}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn kl_is_nonnegative(values in prop::collection::vec(-20.0f64..20.0, 24), prior in 0.01f64..0.99) {
        let logits = EdgeLogits::new(4, values.chunks(2).map(|c| [c[0], c[1]]).collect()).unwrap();
        prop_assert!(kl_term(&logits, prior) >= -1e-12);
    }
}

#[test]
fn model_config_carries_both_widths() {
    let cfg = small_cfg();
    let m = cfg.model_config(3, 30, 2);
    assert_eq!(m, ModelConfig { hidden: 4, encoder_hidden: 6, ..ModelConfig::new(3, 30, 2) });
}
