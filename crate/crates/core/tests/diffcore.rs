//! Central finite-difference checks for every primitive, gradient linearity, and purity.

use std::sync::Arc;

use cmmm_core::diffcore::{Primitive, Tape, Tensor};
use cmmm_core::rng::{substream, Purpose, Rng};
use rand::Rng as _;

const H: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64, avoid: Option<f64>) -> Tensor {
    let n: usize = shape.iter().product::<usize>().max(1);
    let data = (0..n)
        .map(|_| loop {
            let v = rng.gen_range(lo..hi);
            if avoid.map_or(true, |k| (v - k).abs() > 1e-2) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `Σ w ⊙ prim(inputs)` with fixed random weights `w`.
fn weighted(prim: &Primitive, inputs: &[Tensor], w: Option<&Tensor>, with_grads: bool) -> (f64, Vec<Tensor>, Tensor) {
    let mut tape = Tape::new();
    let vars: Vec<_> = inputs.iter().enumerate().map(|(k, t)| tape.param(k, t.clone())).collect();
    let out = tape.apply(prim.clone(), &vars).unwrap();
    let value = tape.value(out).clone();
    let w = w.cloned().unwrap_or_else(|| Tensor::new(value.shape().to_vec(), vec![1.0; value.len()]).unwrap());
    let wv = tape.constant(w);
    let prod = tape.mul(out, wv).unwrap();
    let loss = tape.sum_all(prod).unwrap();
    let grads = if with_grads {
        let g = tape.backward(loss).unwrap();
        (0..inputs.len()).map(|k| g.get(k).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()))).collect()
    } else {
        Vec::new()
    };
    (tape.value(loss).item(), grads, value)
}

fn check(name: &str, prim: Primitive, inputs: Vec<Tensor>, rng: &mut Rng) {
    let (_, _, out) = weighted(&prim, &inputs, None, false);
    let w = uniform(rng, out.shape(), -1.0, 1.0, None);
    let (_, grads, _) = weighted(&prim, &inputs, Some(&w), true);
    for (k, input) in inputs.iter().enumerate() {
        for e in 0..input.len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[e] += H;
            let mut minus = inputs.clone();
            minus[k].data_mut()[e] -= H;
            let fd = (weighted(&prim, &plus, Some(&w), false).0 - weighted(&prim, &minus, Some(&w), false).0) / (2.0 * H);
            let an = grads[k].data()[e];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(rel < TOL, "{name}: operand {k} entry {e}: analytic {an}, numeric {fd}");
        }
    }
}

#[test]
fn every_primitive_matches_finite_differences() {
    let mut rng = substream(31, Purpose::Init, &[]);
    for _ in 0..5 {
        let (r, c, k) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4));
        let m = |rng: &mut Rng, s: &[usize]| uniform(rng, s, -2.0, 2.0, None);
        let a = m(&mut rng, &[r, c]);
        check("matmul", Primitive::MatMul, vec![a.clone(), m(&mut rng, &[c, k])], &mut rng);
        for (name, p) in [("add", Primitive::Add), ("sub", Primitive::Sub), ("mul", Primitive::Mul)] {
            check(name, p.clone(), vec![a.clone(), m(&mut rng, &[r, c])], &mut rng);
            check(name, p.clone(), vec![a.clone(), m(&mut rng, &[])], &mut rng);
            check(name, p, vec![m(&mut rng, &[]), a.clone()], &mut rng);
        }
        let away = uniform(&mut rng, &[r, c], 0.3, 2.0, None);
        check("div", Primitive::Div, vec![a.clone(), away.clone()], &mut rng);
        check("div", Primitive::Div, vec![m(&mut rng, &[]), away], &mut rng);
        check("add_bias", Primitive::AddBias, vec![a.clone(), m(&mut rng, &[1, c])], &mut rng);
        check("mul_col", Primitive::MulCol, vec![a.clone(), m(&mut rng, &[r, 1])], &mut rng);
        check("concat0", Primitive::Concat(0), vec![a.clone(), m(&mut rng, &[2, c])], &mut rng);
        check("concat1", Primitive::Concat(1), vec![a.clone(), m(&mut rng, &[r, 2]), m(&mut rng, &[r, 1])], &mut rng);
        check("sum0", Primitive::Sum(0), vec![a.clone()], &mut rng);
        check("sum1", Primitive::Sum(1), vec![a.clone()], &mut rng);
        check("sum_all", Primitive::SumAll, vec![a.clone()], &mut rng);
        let big = m(&mut rng, &[4, 5]);
        check("slice_rows", Primitive::SliceRows(1, 3), vec![big.clone()], &mut rng);
        check("slice_cols", Primitive::SliceCols(2, 5), vec![big.clone()], &mut rng);
        let idx: Arc<[usize]> = Arc::from(vec![3, 0, 3, 1, 2, 0]);
        check("gather", Primitive::Gather(idx.clone()), vec![big.clone()], &mut rng);
        check("scatter_add", Primitive::ScatterAdd(idx, 5), vec![m(&mut rng, &[6, 3])], &mut rng);
        check("scale", Primitive::Scale(-1.7), vec![a.clone()], &mut rng);
        check("clamp_min", Primitive::ClampMin(0.25), vec![uniform(&mut rng, &[r, c], -2.0, 2.0, Some(0.25))], &mut rng);
        for (name, p) in [
            ("tanh", Primitive::Tanh),
            ("sigmoid", Primitive::Sigmoid),
            ("softplus", Primitive::Softplus),
            ("exp", Primitive::Exp),
        ] {
            check(name, p, vec![a.clone()], &mut rng);
        }
        check("log", Primitive::Log, vec![uniform(&mut rng, &[r, c], 0.1, 3.0, None)], &mut rng);
        let base = uniform(&mut rng, &[r, c], 0.1, 3.0, None);
        check("pow", Primitive::Pow, vec![base.clone(), m(&mut rng, &[r, c])], &mut rng);
        check("pow", Primitive::Pow, vec![base, m(&mut rng, &[])], &mut rng);
        let kinked = uniform(&mut rng, &[r, c], -2.0, 2.0, Some(0.0));
        check("relu", Primitive::Relu, vec![kinked.clone()], &mut rng);
        check("elu", Primitive::Elu, vec![kinked], &mut rng);
        check("softmax0", Primitive::Softmax(0), vec![big.clone()], &mut rng);
        check("softmax1", Primitive::Softmax(1), vec![big.clone()], &mut rng);
        check("log_softmax0", Primitive::LogSoftmax(0), vec![big.clone()], &mut rng);
        check("log_softmax1", Primitive::LogSoftmax(1), vec![big], &mut rng);
    }
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = substream(32, Purpose::Init, &[]);
    for _ in 0..20 {
        let x = uniform(&mut rng, &[3, 4], -2.0, 2.0, None);
        let w = uniform(&mut rng, &[4, 2], -2.0, 2.0, None);
        let build = |tape: &mut Tape| {
            let xv = tape.param(0, x.clone());
            let wv = tape.param(1, w.clone());
            let y = tape.matmul(xv, wv).unwrap();
            let l1 = tape.tanh(y).unwrap();
            let l1 = tape.sum_all(l1).unwrap();
            let e = tape.exp(xv).unwrap();
            let l2 = tape.log_softmax(e, 1).unwrap();
            let l2 = tape.sum_all(l2).unwrap();
            (l1, l2)
        };
        let mut tape = Tape::new();
        let (l1, l2) = build(&mut tape);
        let total = tape.add(l1, l2).unwrap();
        let g = tape.backward(total).unwrap();
        let g1 = tape.backward(l1).unwrap();
        let g2 = tape.backward(l2).unwrap();
        for id in 0..2 {
            let sum: Vec<f64> = g1.get(id).unwrap().data().iter().zip(g2.get(id).unwrap().data()).map(|(a, b)| a + b).collect();
            for (a, b) in g.get(id).unwrap().data().iter().zip(&sum) {
                assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
            }
        }
    }
}

#[test]
fn application_is_pure() {
    let mut rng = substream(33, Purpose::Init, &[]);
    let a = uniform(&mut rng, &[5, 3], -2.0, 2.0, None);
    let b = uniform(&mut rng, &[3, 4], -2.0, 2.0, None);
    let mut tape = Tape::new();
    let av = tape.constant(a);
    let bv = tape.constant(b);
    let first = tape.matmul(av, bv).unwrap();
    let first = tape.softmax(first, 1).unwrap();
    let second = tape.matmul(av, bv).unwrap();
    let second = tape.softmax(second, 1).unwrap();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(tape.value(first)), bits(tape.value(second)));
}
