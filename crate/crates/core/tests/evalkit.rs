use cmmm_core::data::{CausalGraph, EdgeMatrix, ShopSample};
use cmmm_core::datagen::{generate_dataset, SimConfig};
use cmmm_core::evalkit::{
    auroc, auroc_scores, linear_granger, mean_std, persistence_mse, structural_accuracy, BaselineConfig,
};
use cmmm_core::rng::{substream, Purpose};
use proptest::prelude::*;
use rand::Rng;

/// ROC area by sweeping every distinct threshold and integrating with trapezoids.
fn sweep_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let p = labels.iter().filter(|&&l| l).count() as f64;
    let n = labels.len() as f64 - p;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut points = vec![(0.0, 0.0)];
    for &t in &thresholds {
        let tp = scores.iter().zip(labels).filter(|&(&s, &l)| l && s >= t).count() as f64;
        let fp = scores.iter().zip(labels).filter(|&(&s, &l)| !l && s >= t).count() as f64;
        points.push((fp / n, tp / p));
    }
    points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
}

#[test]
fn auroc_matches_threshold_sweep() {
    let mut rng = substream(51, Purpose::Init, &[]);
    let mut done = 0;
    while done < 1000 {
        let m = rng.gen_range(2..=20);
        let labels: Vec<bool> = (0..m).map(|_| rng.gen_bool(0.4)).collect();
        if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
            continue;
        }
        // coarse levels force ties in about half the instances
        let levels = if done % 2 == 0 { 4 } else { 1_000_000 };
        let scores: Vec<f64> = (0..m).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
        let a = auroc_scores(&scores, &labels).unwrap();
        let b = sweep_auroc(&scores, &labels);
        assert!((a - b).abs() <= 1e-9, "{a} vs {b} on {scores:?} {labels:?}");
        done += 1;
    }
}

#[test]
fn auroc_edge_cases() {
    assert_eq!(auroc_scores(&[0.1, 0.9], &[false, true]).unwrap(), 1.0);
    assert_eq!(auroc_scores(&[0.9, 0.1], &[false, true]).unwrap(), 0.0);
    assert_eq!(auroc_scores(&[0.5, 0.5], &[false, true]).unwrap(), 0.5);
    let err = auroc_scores(&[0.1, 0.2], &[true, true]).unwrap_err();
    assert_eq!(err.kind(), "undefined_metric");
    assert_eq!(auroc_scores(&[0.1], &[true, false]).unwrap_err().kind(), "contract");
}

#[test]
fn graph_auroc_ignores_the_diagonal() {
    let truth = CausalGraph::from_matrix(&[vec![0, 1, 0], vec![0, 0, 1], vec![0, 0, 0]]).unwrap();
    let mut scores = EdgeMatrix::zeros(3);
    scores.set(0, 1, 0.9);
    scores.set(1, 2, 0.8);
    scores.set(2, 0, 0.1);
    // a diagonal entry would rank first if it were counted as a negative
    scores.set(0, 0, 1.0);
    assert_eq!(auroc(&scores, &truth).unwrap(), 1.0);
    let pred = CausalGraph::from_matrix(&[vec![0, 1, 1], vec![0, 0, 0], vec![0, 0, 0]]).unwrap();
    assert_eq!(structural_accuracy(&pred, &truth).unwrap(), 4.0 / 6.0);
}

#[test]
fn granger_scores_do_not_depend_on_units() {
    let data = generate_dataset(&SimConfig::sim1(4, 120, 5)).unwrap();
    let cfg = BaselineConfig { lag: 3, ridge: 0.5 };
    for s in data.samples.iter().take(5) {
        let a = linear_granger(s, &cfg).unwrap();
        assert_eq!(a.rows(), linear_granger(s, &cfg).unwrap().rows());
        let x: Vec<f64> = s.x().iter().enumerate().map(|(k, v)| v * (1.0 + (k % 4) as f64) + 3.0).collect();
        let y: Vec<f64> = s.y().iter().map(|v| 250.0 * v - 7.0).collect();
        let rescaled = ShopSample::new(4, x, y, vec![]).unwrap();
        let b = linear_granger(&rescaled, &cfg).unwrap();
        for (u, v) in a.pair_values().iter().zip(b.pair_values()) {
            assert!((u - v).abs() < 1e-8, "{u} vs {v}");
        }
        assert!(a.pair_values().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn persistence_error_by_hand() {
    // T=6, M=2: the last observed target is y[3]; targets scale into [0.05, 0.95]
    let y = vec![0.0, 10.0, 5.0, 5.0, 10.0, 0.0];
    let s = ShopSample::new(1, vec![0.0; 6], y, vec![]).unwrap();
    let scale = |v: f64| 0.05 + 0.9 * v / 10.0;
    let last = scale(5.0);
    let expected = ((scale(10.0) - last).powi(2) + (scale(0.0) - last).powi(2)) / 2.0;
    assert!((persistence_mse(&[s], 2).unwrap() - expected).abs() < 1e-15);
}

proptest! {
    #[test]
    fn auroc_is_invariant_to_monotone_maps(
        raw in prop::collection::vec((0.0f64..1.0, any::<bool>()), 2..20),
    ) {
        let labels: Vec<bool> = raw.iter().map(|r| r.1).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let scores: Vec<f64> = raw.iter().map(|r| r.0).collect();
        let mapped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 2.0).collect();
        let a = auroc_scores(&scores, &labels).unwrap();
        prop_assert!((a - auroc_scores(&mapped, &labels).unwrap()).abs() < 1e-12);
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        prop_assert!((a + auroc_scores(&scores, &flipped).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mean_std_matches_two_pass(values in prop::collection::vec(-100.0f64..100.0, 2..30)) {
        let (m, s) = mean_std(&values);
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        prop_assert!((m - mean).abs() < 1e-9 && (s - var.sqrt()).abs() < 1e-9);
    }
}
