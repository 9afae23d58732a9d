use serde::{Deserialize, Serialize};

use super::tape::GradientMap;
use super::tensor::Tensor;
use crate::error::{contract, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// Bias-corrected Adam update. Parameters missing from `grads` see a zero gradient.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &GradientMap,
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<()> {
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(contract!(
            "optimizer state holds {} moments for {} parameters",
            state.m.len(),
            params.len()
        ));
    }
    for (id, g) in grads.iter() {
        let p = params
            .get(id)
            .ok_or_else(|| contract!("gradient for unknown parameter {id}"))?;
        if p.shape() != g.shape() {
            return Err(contract!(
                "gradient shape {:?} does not match parameter {id} {:?}",
                g.shape(),
                p.shape()
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for (id, p) in params.iter_mut().enumerate() {
        if state.m[id].shape() != p.shape() {
            return Err(contract!("moment shape mismatch for parameter {id}"));
        }
        let g = grads.get(id);
        let m = state.m[id].data_mut();
        let v = state.v[id].data_mut();
        for (k, w) in p.data_mut().iter_mut().enumerate() {
            let gk = g.map_or(0.0, |g| g.data()[k]);
            m[k] = hyper.beta1 * m[k] + (1.0 - hyper.beta1) * gk;
            v[k] = hyper.beta2 * v[k] + (1.0 - hyper.beta2) * gk * gk;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            *w -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grads_of(values: &[(usize, Tensor)]) -> GradientMap {
        let mut g = GradientMap::default();
        for (id, t) in values {
            g.insert(*id, t.clone());
        }
        g
    }

    #[test]
    fn zero_gradients_leave_fresh_params_unchanged() {
        let mut params = vec![Tensor::column(vec![1.0, -2.0])];
        let mut state = AdamState::new(&params);
        let grads = grads_of(&[(0, Tensor::zeros(&[2, 1]))]);
        adam_step(&mut params, &grads, &mut state, &AdamHyper::default()).unwrap();
        assert_eq!(params[0].data(), &[1.0, -2.0]);
    }

    #[test]
    fn moments_decay_under_zero_gradients() {
        let mut params = vec![Tensor::scalar(1.0)];
        let mut state = AdamState::new(&params);
        let hyper = AdamHyper::default();
        adam_step(&mut params, &grads_of(&[(0, Tensor::scalar(1.0))]), &mut state, &hyper).unwrap();
        let m0 = state.m[0].item();
        let v0 = state.v[0].item();
        adam_step(&mut params, &grads_of(&[(0, Tensor::scalar(0.0))]), &mut state, &hyper).unwrap();
        assert_eq!(state.m[0].item(), 0.9 * m0);
        assert_eq!(state.v[0].item(), 0.999 * v0);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut params = vec![Tensor::scalar(1.0)];
        let mut state = AdamState::new(&params);
        let hyper = AdamHyper { lr: 0.1, ..AdamHyper::default() };
        adam_step(&mut params, &grads_of(&[(0, Tensor::scalar(1.0))]), &mut state, &hyper).unwrap();
        assert!((params[0].item() - 0.9).abs() < 1e-7);
    }

    #[test]
    fn converges_on_convex_quadratic() {
        let mut params = vec![Tensor::scalar(0.0)];
        let mut state = AdamState::new(&params);
        let hyper = AdamHyper { lr: 0.1, ..AdamHyper::default() };
        for _ in 0..100 {
            let p = params[0].item();
            let g = grads_of(&[(0, Tensor::scalar(2.0 * (p - 3.0)))]);
            adam_step(&mut params, &g, &mut state, &hyper).unwrap();
        }
        assert!((params[0].item() - 3.0).abs() < 0.1, "p = {}", params[0].item());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = vec![Tensor::scalar(0.0)];
        let mut state = AdamState::new(&params);
        let g = grads_of(&[(0, Tensor::zeros(&[2]))]);
        assert!(adam_step(&mut params, &g, &mut state, &AdamHyper::default()).is_err());
    }
}
