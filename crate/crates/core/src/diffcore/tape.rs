//! Reverse-mode differentiation over a linear tape of primitive applications.
//!
//! Every primitive records its operands and keeps its output value; the backward
//! pass walks the tape once in reverse, so operands always precede results.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use super::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};
use crate::error::{Error, Result};

pub type ParamId = usize;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum Primitive {
    /// `[m,k] · [k,n]`.
    MatMul,
    /// Elementwise; either operand may be a scalar.
    Add,
    Sub,
    Mul,
    Div,
    /// `[r,c] + [1,c]` row bias.
    AddBias,
    /// `[r,c] ⊙ [r,1]` per-row scaling.
    MulCol,
    Concat(usize),
    /// Keep-dim sum of a rank-2 tensor along an axis.
    Sum(usize),
    SumAll,
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    /// `out[r] = in[idx[r]]` over rows.
    Gather(Arc<[usize]>),
    /// `out[idx[r]] += in[r]`, producing the given number of rows.
    ScatterAdd(Arc<[usize]>, usize),
    Scale(f64),
    ClampMin(f64),
    Tanh,
    Sigmoid,
    Softplus,
    Exp,
    Log,
    /// `base ^ exponent` elementwise, `base > 0`; exponent may be a scalar.
    Pow,
    Relu,
    Elu,
    Softmax(usize),
    LogSoftmax(usize),
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::AddBias => "add_bias",
            Primitive::MulCol => "mul_col",
            Primitive::Concat(_) => "concat",
            Primitive::Sum(_) => "sum",
            Primitive::SumAll => "sum_all",
            Primitive::SliceRows(..) => "slice_rows",
            Primitive::SliceCols(..) => "slice_cols",
            Primitive::Gather(_) => "gather",
            Primitive::ScatterAdd(..) => "scatter_add",
            Primitive::Scale(_) => "scale",
            Primitive::ClampMin(_) => "clamp_min",
            Primitive::Tanh => "tanh",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Softplus => "softplus",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Pow => "pow",
            Primitive::Relu => "relu",
            Primitive::Elu => "elu",
            Primitive::Softmax(_) => "softmax",
            Primitive::LogSoftmax(_) => "log_softmax",
        };
        f.write_str(name)
    }
}

struct Node {
    value: Tensor,
    prim: Option<Primitive>,
    inputs: Vec<usize>,
    param: Option<ParamId>,
}

/// Gradients of a scalar loss with respect to the parameters bound on a tape.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientMap {
    grads: BTreeMap<ParamId, Tensor>,
}

impl GradientMap {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor) {
        self.grads.insert(id, grad);
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Adds `other` into `self`, entry by entry.
    pub fn accumulate(&mut self, other: &GradientMap) {
        for (id, g) in &other.grads {
            match self.grads.get_mut(id) {
                Some(mine) => mine.add_assign(g),
                None => {
                    self.grads.insert(*id, g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.values_mut() {
            g.scale_in_place(factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(Tensor::all_finite)
    }
}

/// Per-node gradients from a backward pass, including constants and intermediates.
pub struct NodeGrads {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl NodeGrads {
    /// Gradient of the loss with respect to `var`; zeros when `var` does not reach the loss.
    pub fn wrt(&self, var: Var) -> Tensor {
        self.grads[var.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant (no parameter identity).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, None)
    }

    /// Records a trainable parameter leaf.
    pub fn param(&mut self, id: ParamId, value: Tensor) -> Var {
        self.push_leaf(value, Some(id))
    }

    fn push_leaf(&mut self, value: Tensor, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            prim: None,
            inputs: Vec::new(),
            param,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Applies a primitive to recorded operands and records the result.
    pub fn apply(&mut self, prim: Primitive, operands: &[Var]) -> Result<Var> {
        let inputs: Vec<&Tensor> = operands.iter().map(|v| &self.nodes[v.0].value).collect();
        let value = forward(&prim, &inputs)?;
        if !value.all_finite() {
            return Err(Error::Overflow(format!("{prim} produced a non-finite value")));
        }
        self.nodes.push(Node {
            value,
            prim: Some(prim),
            inputs: operands.iter().map(|v| v.0).collect(),
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Div, &[a, b])
    }
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.apply(Primitive::AddBias, &[a, bias])
    }
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        self.apply(Primitive::MulCol, &[a, col])
    }
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.apply(Primitive::Concat(axis), parts)
    }
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::Sum(axis), &[a])
    }
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::SumAll, &[a])
    }
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.apply(Primitive::SliceRows(start, end), &[a])
    }
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.apply(Primitive::SliceCols(start, end), &[a])
    }
    pub fn gather(&mut self, a: Var, index: Arc<[usize]>) -> Result<Var> {
        self.apply(Primitive::Gather(index), &[a])
    }
    pub fn scatter_add(&mut self, a: Var, index: Arc<[usize]>, rows: usize) -> Result<Var> {
        self.apply(Primitive::ScatterAdd(index, rows), &[a])
    }
    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.apply(Primitive::Scale(factor), &[a])
    }
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.apply(Primitive::ClampMin(floor), &[a])
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Tanh, &[a])
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sigmoid, &[a])
    }
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Softplus, &[a])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Exp, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Log, &[a])
    }
    pub fn pow(&mut self, base: Var, exponent: Var) -> Result<Var> {
        self.apply(Primitive::Pow, &[base, exponent])
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[a])
    }
    pub fn elu(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Elu, &[a])
    }
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::Softmax(axis), &[a])
    }
    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::LogSoftmax(axis), &[a])
    }

    /// Reverse pass returning gradients for every parameter leaf on the tape.
    pub fn backward(&self, loss: Var) -> Result<GradientMap> {
        let node_grads = self.backward_nodes(loss)?;
        let mut out = GradientMap::default();
        for (idx, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let Some(id) = node.param {
                let g = node_grads.wrt(Var(idx));
                match out.grads.get_mut(&id) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        out.grads.insert(id, g);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Reverse pass returning gradients for every node up to `loss`.
    pub fn backward_nodes(&self, loss: Var) -> Result<NodeGrads> {
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.len() != 1 || loss_value.rank() > 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(loss_value.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(dout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if let Some(prim) = &node.prim {
                let inputs: Vec<&Tensor> =
                    node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
                let input_grads = vjp(prim, &inputs, &node.value, &dout);
                for (&input, g) in node.inputs.iter().zip(input_grads) {
                    match &mut grads[input] {
                        Some(acc) => acc.add_assign(&g),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            grads[idx] = Some(dout);
        }
        let shapes = self.nodes[..=loss.0]
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(NodeGrads { grads, shapes })
    }
}

fn dim_err(prim: &Primitive, detail: String) -> Error {
    Error::Dimension(format!("{prim}: {detail}"))
}

fn expect_arity(prim: &Primitive, inputs: &[&Tensor], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(dim_err(prim, format!("expected {n} operands, got {}", inputs.len())));
    }
    Ok(())
}

fn expect_rank2(prim: &Primitive, t: &Tensor) -> Result<()> {
    if t.rank() != 2 {
        return Err(dim_err(prim, format!("expected a matrix, got shape {:?}", t.shape())));
    }
    Ok(())
}

/// Elementwise binary op with scalar broadcasting on either side.
fn broadcast_binary(
    prim: &Primitive,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(a.shape().to_vec(), data))
    } else if b.is_scalar() {
        let y = b.item();
        Ok(a.map(|x| f(x, y)))
    } else if a.is_scalar() {
        let x = a.item();
        Ok(b.map(|y| f(x, y)))
    } else {
        Err(dim_err(
            prim,
            format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ))
    }
}

/// Reduces an elementwise gradient back to an operand's shape (sums for broadcast scalars).
fn reduce_to(shape: &[usize], g: Vec<f64>, full_shape: &[usize]) -> Tensor {
    if shape == full_shape {
        Tensor::from_parts(shape.to_vec(), g)
    } else {
        Tensor::from_parts(shape.to_vec(), vec![g.iter().sum()])
    }
}

/// Lane layout for axis-wise ops: (lane count, lane length, stride, start of lane `i`).
fn lanes(shape: &[usize], axis: usize) -> Option<(usize, usize, usize, Box<dyn Fn(usize) -> usize>)> {
    match (shape.len(), axis) {
        (1, 0) => Some((1, shape[0], 1, Box::new(|_| 0))),
        (2, 1) => {
            let c = shape[1];
            Some((shape[0], c, 1, Box::new(move |i| i * c)))
        }
        (2, 0) => {
            let c = shape[1];
            Some((c, shape[0], c, Box::new(|i| i)))
        }
        _ => None,
    }
}

fn softmax_forward(x: &Tensor, axis: usize, log: bool) -> Option<Tensor> {
    let (count, len, stride, start) = lanes(x.shape(), axis)?;
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for lane in 0..count {
        let s = start(lane);
        let max = (0..len).map(|k| src[s + k * stride]).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..len).map(|k| (src[s + k * stride] - max).exp()).sum();
        let log_denom = denom.ln();
        for k in 0..len {
            let idx = s + k * stride;
            out[idx] = if log {
                src[idx] - max - log_denom
            } else {
                (src[idx] - max).exp() / denom
            };
        }
    }
    Some(Tensor::from_parts(x.shape().to_vec(), out))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn forward(prim: &Primitive, inputs: &[&Tensor]) -> Result<Tensor> {
    use Primitive::*;
    match prim {
        MatMul => {
            expect_arity(prim, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            expect_rank2(prim, a)?;
            expect_rank2(prim, b)?;
            if a.cols() != b.rows() {
                return Err(dim_err(
                    prim,
                    format!("{:?} · {:?}", a.shape(), b.shape()),
                ));
            }
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            Ok(Tensor::from_parts(vec![m, n], matmul_nn(a.data(), b.data(), m, k, n)))
        }
        Add | Sub | Mul | Div => {
            expect_arity(prim, inputs, 2)?;
            let f: fn(f64, f64) -> f64 = match prim {
                Add => |x, y| x + y,
                Sub => |x, y| x - y,
                Mul => |x, y| x * y,
                _ => |x, y| x / y,
            };
            broadcast_binary(prim, inputs[0], inputs[1], f)
        }
        AddBias => {
            expect_arity(prim, inputs, 2)?;
            let (a, bias) = (inputs[0], inputs[1]);
            expect_rank2(prim, a)?;
            if bias.len() != a.cols() || bias.rank() > 2 || (bias.rank() == 2 && bias.rows() != 1) {
                return Err(dim_err(
                    prim,
                    format!("bias {:?} for matrix {:?}", bias.shape(), a.shape()),
                ));
            }
            let c = a.cols();
            let mut out = a.data().to_vec();
            for row in out.chunks_mut(c) {
                for (v, b) in row.iter_mut().zip(bias.data()) {
                    *v += b;
                }
            }
            Ok(Tensor::from_parts(a.shape().to_vec(), out))
        }
        MulCol => {
            expect_arity(prim, inputs, 2)?;
            let (a, col) = (inputs[0], inputs[1]);
            expect_rank2(prim, a)?;
            if col.shape() != [a.rows(), 1] {
                return Err(dim_err(
                    prim,
                    format!("column {:?} for matrix {:?}", col.shape(), a.shape()),
                ));
            }
            let c = a.cols();
            let mut out = a.data().to_vec();
            for (row, &s) in out.chunks_mut(c.max(1)).zip(col.data()) {
                for v in row {
                    *v *= s;
                }
            }
            Ok(Tensor::from_parts(a.shape().to_vec(), out))
        }
        Concat(axis) => {
            if inputs.is_empty() {
                return Err(dim_err(prim, "no operands".into()));
            }
            for t in inputs {
                expect_rank2(prim, t)?;
            }
            match axis {
                0 => {
                    let c = inputs[0].cols();
                    if inputs.iter().any(|t| t.cols() != c) {
                        return Err(dim_err(prim, "column counts differ".into()));
                    }
                    let rows = inputs.iter().map(|t| t.rows()).sum();
                    let data = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
                    Ok(Tensor::from_parts(vec![rows, c], data))
                }
                1 => {
                    let r = inputs[0].rows();
                    if inputs.iter().any(|t| t.rows() != r) {
                        return Err(dim_err(prim, "row counts differ".into()));
                    }
                    let cols: usize = inputs.iter().map(|t| t.cols()).sum();
                    let mut data = Vec::with_capacity(r * cols);
                    for i in 0..r {
                        for t in inputs {
                            data.extend_from_slice(t.row(i));
                        }
                    }
                    Ok(Tensor::from_parts(vec![r, cols], data))
                }
                _ => Err(dim_err(prim, format!("axis {axis} out of range"))),
            }
        }
        Sum(axis) => {
            expect_arity(prim, inputs, 1)?;
            let a = inputs[0];
            expect_rank2(prim, a)?;
            let (r, c) = (a.rows(), a.cols());
            match axis {
                0 => {
                    let mut out = vec![0.0; c];
                    for row in a.data().chunks(c.max(1)) {
                        for (o, v) in out.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    Ok(Tensor::from_parts(vec![1, c], out))
                }
                1 => {
                    let out = (0..r).map(|i| a.row(i).iter().sum()).collect();
                    Ok(Tensor::from_parts(vec![r, 1], out))
                }
                _ => Err(dim_err(prim, format!("axis {axis} out of range"))),
            }
        }
        SumAll => {
            expect_arity(prim, inputs, 1)?;
            Ok(Tensor::scalar(inputs[0].data().iter().sum()))
        }
        SliceRows(start, end) => {
            expect_arity(prim, inputs, 1)?;
            let a = inputs[0];
            expect_rank2(prim, a)?;
            if start > end || *end > a.rows() {
                return Err(dim_err(prim, format!("rows {start}..{end} of {:?}", a.shape())));
            }
            let c = a.cols();
            Ok(Tensor::from_parts(
                vec![end - start, c],
                a.data()[start * c..end * c].to_vec(),
            ))
        }
        SliceCols(start, end) => {
            expect_arity(prim, inputs, 1)?;
            let a = inputs[0];
            expect_rank2(prim, a)?;
            if start > end || *end > a.cols() {
                return Err(dim_err(prim, format!("cols {start}..{end} of {:?}", a.shape())));
            }
            let mut data = Vec::with_capacity(a.rows() * (end - start));
            for i in 0..a.rows() {
                data.extend_from_slice(&a.row(i)[*start..*end]);
            }
            Ok(Tensor::from_parts(vec![a.rows(), end - start], data))
        }
        Gather(index) => {
            expect_arity(prim, inputs, 1)?;
            let a = inputs[0];
            expect_rank2(prim, a)?;
            let c = a.cols();
            let mut data = Vec::with_capacity(index.len() * c);
            for &r in index.iter() {
                if r >= a.rows() {
                    return Err(dim_err(prim, format!("row {r} of {:?}", a.shape())));
                }
                data.extend_from_slice(a.row(r));
            }
            Ok(Tensor::from_parts(vec![index.len(), c], data))
        }
        ScatterAdd(index, rows) => {
            expect_arity(prim, inputs, 1)?;
            let a = inputs[0];
            expect_rank2(prim, a)?;
            if index.len() != a.rows() {
                return Err(dim_err(
                    prim,
                    format!("{} indices for {} rows", index.len(), a.rows()),
                ));
            }
            let c = a.cols();
            let mut out = vec![0.0; rows * c];
            for (src, &dst) in index.iter().enumerate() {
                if dst >= *rows {
                    return Err(dim_err(prim, format!("target row {dst} of {rows}")));
                }
                let o = &mut out[dst * c..(dst + 1) * c];
                for (ov, v) in o.iter_mut().zip(a.row(src)) {
                    *ov += v;
                }
            }
            Ok(Tensor::from_parts(vec![*rows, c], out))
        }
        Scale(f) => {
            expect_arity(prim, inputs, 1)?;
            let f = *f;
            Ok(inputs[0].map(|x| x * f))
        }
        ClampMin(floor) => {
            expect_arity(prim, inputs, 1)?;
            let floor = *floor;
            Ok(inputs[0].map(|x| x.max(floor)))
        }
        Tanh => {
            expect_arity(prim, inputs, 1)?;
            Ok(inputs[0].map(f64::tanh))
        }
        Sigmoid => {
            expect_arity(prim, inputs, 1)?;
            Ok(inputs[0].map(sigmoid))
        }
        Softplus => {
            expect_arity(prim, inputs, 1)?;
            Ok(inputs[0].map(softplus))
        }
        Exp => {
            expect_arity(prim, inputs, 1)?;
            Ok(inputs[0].map(f64::exp))
        }
        Log => {
            expect_arity(prim, inputs, 1)?;
            if let Some(bad) = inputs[0].data().iter().find(|&&x| x <= 0.0) {
                return Err(Error::Domain(format!("log of non-positive value {bad}")));
            }
            Ok(inputs[0].map(f64::ln))
        }
        Pow => {
            expect_arity(prim, inputs, 2)?;
            if let Some(bad) = inputs[0].data().iter().find(|&&x| x <= 0.0) {
                return Err(Error::Domain(format!("pow with non-positive base {bad}")));
            }
            broadcast_binary(prim, inputs[0], inputs[1], f64::powf)
        }
        Relu => {
            expect_arity(prim, inputs, 1)?;
            Ok(inputs[0].map(|x| x.max(0.0)))
        }
        Elu => {
            expect_arity(prim, inputs, 1)?;
            Ok(inputs[0].map(|x| if x > 0.0 { x } else { x.exp_m1() }))
        }
        Softmax(axis) | LogSoftmax(axis) => {
            expect_arity(prim, inputs, 1)?;
            softmax_forward(inputs[0], *axis, matches!(prim, LogSoftmax(_))).ok_or_else(|| {
                dim_err(prim, format!("axis {axis} for shape {:?}", inputs[0].shape()))
            })
        }
    }
}

/// Vector-Jacobian products: gradient for each operand given the output gradient.
fn vjp(prim: &Primitive, inputs: &[&Tensor], out: &Tensor, dout: &Tensor) -> Vec<Tensor> {
    use Primitive::*;
    let unary = |f: &dyn Fn(f64, f64, f64) -> f64| -> Vec<Tensor> {
        let x = inputs[0];
        let data = x
            .data()
            .iter()
            .zip(out.data())
            .zip(dout.data())
            .map(|((&xv, &yv), &g)| f(xv, yv, g))
            .collect();
        vec![Tensor::from_parts(x.shape().to_vec(), data)]
    };
    match prim {
        MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            let da = matmul_nt(dout.data(), b.data(), m, n, k);
            let db = matmul_tn(a.data(), dout.data(), m, k, n);
            vec![
                Tensor::from_parts(vec![m, k], da),
                Tensor::from_parts(vec![k, n], db),
            ]
        }
        Add | Sub | Mul | Div | Pow => {
            let (a, b) = (inputs[0], inputs[1]);
            let full = out.shape();
            let n = out.len();
            let av = |i: usize| if a.is_scalar() && !full.is_empty() { a.item() } else { a.data()[i] };
            let bv = |i: usize| if b.is_scalar() && !full.is_empty() { b.item() } else { b.data()[i] };
            let mut ga = vec![0.0; n];
            let mut gb = vec![0.0; n];
            for i in 0..n {
                let g = dout.data()[i];
                let (x, y) = (av(i), bv(i));
                let (da, db) = match prim {
                    Add => (g, g),
                    Sub => (g, -g),
                    Mul => (g * y, g * x),
                    Div => (g / y, -g * x / (y * y)),
                    _ => {
                        let p = out.data()[i];
                        (g * y * x.powf(y - 1.0), g * p * x.ln())
                    }
                };
                ga[i] = da;
                gb[i] = db;
            }
            vec![reduce_to(a.shape(), ga, full), reduce_to(b.shape(), gb, full)]
        }
        AddBias => {
            let bias = inputs[1];
            let c = dout.cols();
            let mut gb = vec![0.0; c];
            for row in dout.data().chunks(c.max(1)) {
                for (o, v) in gb.iter_mut().zip(row) {
                    *o += v;
                }
            }
            vec![dout.clone(), Tensor::from_parts(bias.shape().to_vec(), gb)]
        }
        MulCol => {
            let (a, col) = (inputs[0], inputs[1]);
            let c = a.cols();
            let mut ga = dout.data().to_vec();
            let mut gc = vec![0.0; a.rows()];
            for (i, row) in ga.chunks_mut(c.max(1)).enumerate() {
                let s = col.data()[i];
                let arow = a.row(i);
                let mut acc = 0.0;
                for (gv, &xv) in row.iter_mut().zip(arow) {
                    acc += *gv * xv;
                    *gv *= s;
                }
                gc[i] = acc;
            }
            vec![
                Tensor::from_parts(a.shape().to_vec(), ga),
                Tensor::from_parts(col.shape().to_vec(), gc),
            ]
        }
        Concat(axis) => {
            let mut grads = Vec::with_capacity(inputs.len());
            if *axis == 0 {
                let mut offset = 0;
                for t in inputs {
                    let len = t.len();
                    grads.push(Tensor::from_parts(
                        t.shape().to_vec(),
                        dout.data()[offset..offset + len].to_vec(),
                    ));
                    offset += len;
                }
            } else {
                let mut col = 0;
                for t in inputs {
                    let c = t.cols();
                    let mut data = Vec::with_capacity(t.len());
                    for i in 0..t.rows() {
                        data.extend_from_slice(&dout.row(i)[col..col + c]);
                    }
                    grads.push(Tensor::from_parts(t.shape().to_vec(), data));
                    col += c;
                }
            }
            grads
        }
        Sum(axis) => {
            let a = inputs[0];
            let (r, c) = (a.rows(), a.cols());
            let mut g = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    g[i * c + j] = if *axis == 0 { dout.data()[j] } else { dout.data()[i] };
                }
            }
            vec![Tensor::from_parts(a.shape().to_vec(), g)]
        }
        SumAll => vec![Tensor::filled(inputs[0].shape(), dout.item())],
        SliceRows(start, _) => {
            let a = inputs[0];
            let c = a.cols();
            let mut g = vec![0.0; a.len()];
            g[start * c..start * c + dout.len()].copy_from_slice(dout.data());
            vec![Tensor::from_parts(a.shape().to_vec(), g)]
        }
        SliceCols(start, end) => {
            let a = inputs[0];
            let c = a.cols();
            let mut g = vec![0.0; a.len()];
            for i in 0..a.rows() {
                g[i * c + start..i * c + end].copy_from_slice(dout.row(i));
            }
            vec![Tensor::from_parts(a.shape().to_vec(), g)]
        }
        Gather(index) => {
            let a = inputs[0];
            let c = a.cols();
            let mut g = vec![0.0; a.len()];
            for (src, &dst) in index.iter().enumerate() {
                let o = &mut g[dst * c..(dst + 1) * c];
                for (ov, v) in o.iter_mut().zip(dout.row(src)) {
                    *ov += v;
                }
            }
            vec![Tensor::from_parts(a.shape().to_vec(), g)]
        }
        ScatterAdd(index, _) => {
            let a = inputs[0];
            let c = a.cols();
            let mut g = Vec::with_capacity(a.len());
            for &dst in index.iter() {
                g.extend_from_slice(&dout.data()[dst * c..(dst + 1) * c]);
            }
            vec![Tensor::from_parts(a.shape().to_vec(), g)]
        }
        Scale(f) => vec![dout.map(|g| g * f)],
        ClampMin(floor) => unary(&|x, _, g| if x > *floor { g } else { 0.0 }),
        Tanh => unary(&|_, y, g| g * (1.0 - y * y)),
        Sigmoid => unary(&|_, y, g| g * y * (1.0 - y)),
        Softplus => unary(&|x, _, g| g * sigmoid(x)),
        Exp => unary(&|_, y, g| g * y),
        Log => unary(&|x, _, g| g / x),
        Relu => unary(&|x, _, g| if x > 0.0 { g } else { 0.0 }),
        Elu => unary(&|x, y, g| if x > 0.0 { g } else { g * (y + 1.0) }),
        Softmax(axis) | LogSoftmax(axis) => {
            let x = inputs[0];
            let (count, len, stride, start) =
                lanes(x.shape(), *axis).expect("validated in forward");
            let y = out.data();
            let gy = dout.data();
            let mut g = vec![0.0; x.len()];
            let is_log = matches!(prim, LogSoftmax(_));
            for lane in 0..count {
                let s = start(lane);
                if is_log {
                    let total: f64 = (0..len).map(|k| gy[s + k * stride]).sum();
                    for k in 0..len {
                        let i = s + k * stride;
                        g[i] = gy[i] - y[i].exp() * total;
                    }
                } else {
                    let dot: f64 = (0..len).map(|k| gy[s + k * stride] * y[s + k * stride]).sum();
                    for k in 0..len {
                        let i = s + k * stride;
                        g[i] = y[i] * (gy[i] - dot);
                    }
                }
            }
            vec![Tensor::from_parts(x.shape().to_vec(), g)]
        }
    }
}
