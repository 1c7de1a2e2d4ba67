use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use super::conv::{conv3d_backward, conv3d_forward, Conv3dSpec};
use super::{axis_split, for_each_lane, Tensor, LOG_EPS, NORM_EPS};
use crate::error::{Error, Result};

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    ScaleBy(usize, usize),
    AddRow(usize, usize),
    Exp(usize),
    Ln(usize),
    Sigmoid(usize),
    Relu(usize),
    Clamp(usize, f64, f64),
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Transpose(usize),
    Reshape(usize),
    SumAxis(usize, usize),
    MeanAxis(usize, usize),
    SumAll(usize),
    Softmax(usize, usize),
    LogSoftmax(usize, usize),
    L2Normalize(usize),
    Concat(Vec<usize>, usize),
    SliceCols(usize, usize),
    Diagonal(usize),
    Conv3d {
        input: usize,
        weight: usize,
        bias: usize,
        spec: Conv3dSpec,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

/// Records operations for one forward pass. Append order is a valid
/// topological order, so backward simply walks the nodes in reverse.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<Vec<(String, usize)>>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A tape that evaluates values only; [`Tape::backward`] fails on it.
    pub fn no_grad() -> Self {
        Tape {
            recording: false,
            ..Tape::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let op = if self.recording { op } else { Op::Leaf };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    /// A named leaf whose gradient is reported by [`Gradients::params`].
    pub fn param(&self, name: &str, value: Tensor) -> Var<'_> {
        let v = self.push(value, Op::Leaf);
        self.params.borrow_mut().push((name.to_string(), v.id));
        v
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !self.recording {
            return Err(Error::Config("backward on a no-grad tape".into()));
        }
        let loss_value = loss.value();
        if loss_value.numel() != 1 {
            return Err(Error::shape("backward", loss_value.shape(), &[]));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::new(loss_value.shape().to_vec(), vec![1.0])?);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            let val = |i: usize| &*nodes[i].value;
            let mut acc = |i: usize, t: Tensor| accumulate(&mut grads[i], t);
            match &node.op {
                Op::Leaf => unreachable!(),
                &Op::Add(a, b) => {
                    acc(a, g.clone());
                    acc(b, g.clone());
                }
                &Op::Sub(a, b) => {
                    acc(a, g.clone());
                    acc(b, g.scale(-1.0));
                }
                &Op::Mul(a, b) => {
                    acc(a, g.mul(val(b))?);
                    acc(b, g.mul(val(a))?);
                }
                &Op::Scale(a, f) => acc(a, g.scale(f)),
                &Op::ScaleBy(a, s) => {
                    let sv = val(s).item();
                    acc(a, g.scale(sv));
                    let gs = super::dot(g.data(), val(a).data());
                    acc(s, Tensor::new(val(s).shape().to_vec(), vec![gs])?);
                }
                &Op::AddRow(a, b) => {
                    let m = val(b).numel();
                    let mut gb = vec![0.0; m];
                    for row in g.data().chunks(m.max(1)) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                    acc(a, g.clone());
                    acc(b, Tensor::vector(gb));
                }
                &Op::Exp(a) => acc(a, g.mul(&node.value)?),
                &Op::Ln(a) => {
                    let x = val(a);
                    acc(a, g.zip_with(x, "ln", |gv, xv| if xv > LOG_EPS { gv / xv } else { 0.0 })?)
                }
                &Op::Sigmoid(a) => {
                    acc(a, g.zip_with(&node.value, "sigmoid", |gv, y| gv * y * (1.0 - y))?)
                }
                &Op::Relu(a) => {
                    acc(a, g.zip_with(val(a), "relu", |gv, x| if x > 0.0 { gv } else { 0.0 })?)
                }
                &Op::Clamp(a, lo, hi) => acc(
                    a,
                    g.zip_with(val(a), "clamp", |gv, x| if x > lo && x < hi { gv } else { 0.0 })?,
                ),
                &Op::MatMul(a, b) => {
                    acc(a, g.matmul_t(val(b))?);
                    acc(b, val(a).transpose()?.matmul(&g)?);
                }
                &Op::MatMulT(a, b) => {
                    acc(a, g.matmul(val(b))?);
                    acc(b, g.transpose()?.matmul(val(a))?);
                }
                &Op::Transpose(a) => acc(a, g.transpose()?),
                &Op::Reshape(a) => acc(a, g.reshape(val(a).shape().to_vec())?),
                &Op::SumAxis(a, axis) => acc(a, broadcast_axis(&g, val(a).shape(), axis, 1.0)),
                &Op::MeanAxis(a, axis) => {
                    let n = val(a).shape()[axis] as f64;
                    acc(a, broadcast_axis(&g, val(a).shape(), axis, 1.0 / n))
                }
                &Op::SumAll(a) => acc(a, Tensor::full(val(a).shape().to_vec(), g.item())),
                &Op::Softmax(a, axis) => {
                    let y = &node.value;
                    let mut ga = g.mul(y)?;
                    for_each_lane(y.shape(), axis, |idx| {
                        let s: f64 = idx.clone().map(|i| g.data()[i] * y.data()[i]).sum();
                        for i in idx {
                            ga.data_mut()[i] -= y.data()[i] * s;
                        }
                    });
                    acc(a, ga);
                }
                &Op::LogSoftmax(a, axis) => {
                    let y = &node.value;
                    let mut ga = g.clone();
                    for_each_lane(y.shape(), axis, |idx| {
                        let s: f64 = idx.clone().map(|i| g.data()[i]).sum();
                        for i in idx {
                            ga.data_mut()[i] -= y.data()[i].exp() * s;
                        }
                    });
                    acc(a, ga);
                }
                &Op::L2Normalize(a) => {
                    let x = val(a);
                    let y = &node.value;
                    let m = *x.shape().last().unwrap();
                    let mut ga = vec![0.0; x.numel()];
                    for r in 0..x.numel() / m {
                        let span = r * m..(r + 1) * m;
                        let xs = &x.data()[span.clone()];
                        let ys = &y.data()[span.clone()];
                        let gs = &g.data()[span.clone()];
                        let s = (xs.iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
                        let yg = super::dot(ys, gs);
                        for (k, out) in ga[span].iter_mut().enumerate() {
                            *out = (gs[k] - ys[k] * yg) / s;
                        }
                    }
                    acc(a, Tensor::new(x.shape().to_vec(), ga)?);
                }
                Op::Concat(parts, axis) => {
                    let axis = *axis;
                    let (outer, total, inner) = axis_split(g.shape(), axis);
                    let mut offset = 0;
                    for &p in parts {
                        let shape = val(p).shape().to_vec();
                        let n = shape[axis];
                        let mut data = Vec::with_capacity(val(p).numel());
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            data.extend_from_slice(&g.data()[start..start + n * inner]);
                        }
                        offset += n;
                        acc(p, Tensor::new(shape, data)?);
                    }
                }
                &Op::SliceCols(a, start) => {
                    let (r, c) = val(a).dims2("slice_cols")?;
                    let w = g.shape()[1];
                    let mut ga = Tensor::zeros(vec![r, c]);
                    for i in 0..r {
                        ga.data_mut()[i * c + start..i * c + start + w]
                            .copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                    }
                    acc(a, ga);
                }
                &Op::Diagonal(a) => {
                    let n = g.numel();
                    let mut ga = Tensor::zeros(vec![n, n]);
                    for i in 0..n {
                        ga.data_mut()[i * n + i] = g.data()[i];
                    }
                    acc(a, ga);
                }
                &Op::Conv3d {
                    input,
                    weight,
                    bias,
                    spec,
                } => {
                    let (gi, gw, gb) = conv3d_backward(val(input), val(weight), val(bias), spec, &g)?;
                    acc(input, gi);
                    acc(weight, gw);
                    acc(bias, gb);
                }
            }
        }

        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            grads,
            shapes,
            params: self.params.borrow().clone(),
        })
    }
}

fn accumulate(slot: &mut Option<Tensor>, t: Tensor) {
    match slot {
        Some(existing) => existing
            .data_mut()
            .iter_mut()
            .zip(t.data())
            .for_each(|(a, b)| *a += b),
        None => *slot = Some(t),
    }
}

/// Repeats `g` (shape with `axis` removed) along `axis`, times `factor`.
fn broadcast_axis(g: &Tensor, shape: &[usize], axis: usize, factor: f64) -> Tensor {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut out = Tensor::zeros(shape.to_vec());
    for o in 0..outer {
        for j in 0..n {
            for i in 0..inner {
                out.data_mut()[(o * n + j) * inner + i] = g.data()[o * inner + i] * factor;
            }
        }
    }
    out
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(String, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; zeros if disconnected.
    pub fn get(&self, var: Var<'_>) -> Tensor {
        self.by_id(var.id)
    }

    fn by_id(&self, id: usize) -> Tensor {
        self.grads[id]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[id].clone()))
    }

    /// Gradients keyed by parameter name. A name registered more than
    /// once on the tape has its contributions summed.
    pub fn params(&self) -> BTreeMap<String, Tensor> {
        let mut out: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, id) in &self.params {
            let g = self.by_id(*id);
            match out.get_mut(name) {
                Some(existing) => {
                    let mut slot = Some(std::mem::replace(existing, Tensor::scalar(0.0)));
                    accumulate(&mut slot, g);
                    *existing = slot.unwrap();
                }
                None => {
                    out.insert(name.clone(), g);
                }
            }
        }
        out
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn unary(self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(value, op)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().add(&other.value())?;
        Ok(self.unary(v, Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().sub(&other.value())?;
        Ok(self.unary(v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().mul(&other.value())?;
        Ok(self.unary(v, Op::Mul(self.id, other.id)))
    }

    pub fn scale(self, factor: f64) -> Var<'t> {
        let v = self.value().scale(factor);
        self.unary(v, Op::Scale(self.id, factor))
    }

    /// Multiplies every element by the single-element `scalar`.
    pub fn scale_by(self, scalar: Var<'t>) -> Result<Var<'t>> {
        let s = scalar.value();
        if s.numel() != 1 {
            return Err(Error::shape("scale_by", &self.shape(), s.shape()));
        }
        let v = self.value().scale(s.item());
        Ok(self.unary(v, Op::ScaleBy(self.id, scalar.id)))
    }

    pub fn add_row(self, bias: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().add_row(&bias.value())?;
        Ok(self.unary(v, Op::AddRow(self.id, bias.id)))
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.value().exp();
        self.unary(v, Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'t> {
        let v = self.value().ln();
        self.unary(v, Op::Ln(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        let v = self.value().sigmoid();
        self.unary(v, Op::Sigmoid(self.id))
    }

    pub fn relu(self) -> Var<'t> {
        let v = self.value().relu();
        self.unary(v, Op::Relu(self.id))
    }

    /// Clips into `[lo, hi]`; the gradient is zero where clipping bites.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        let v = self.value().map(|x| x.clamp(lo, hi));
        self.unary(v, Op::Clamp(self.id, lo, hi))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().matmul(&other.value())?;
        Ok(self.unary(v, Op::MatMul(self.id, other.id)))
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().matmul_t(&other.value())?;
        Ok(self.unary(v, Op::MatMulT(self.id, other.id)))
    }

    /// `self · weight + bias`.
    pub fn affine(self, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        self.matmul(weight)?.add_row(bias)
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let v = self.value().transpose()?;
        Ok(self.unary(v, Op::Transpose(self.id)))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let v = self.value().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let v = self.value().sum_axis(axis)?;
        Ok(self.unary(v, Op::SumAxis(self.id, axis)))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let v = self.value().mean_axis(axis)?;
        Ok(self.unary(v, Op::MeanAxis(self.id, axis)))
    }

    pub fn sum(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum_all());
        self.unary(v, Op::SumAll(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let v = self.value().softmax(axis)?;
        Ok(self.unary(v, Op::Softmax(self.id, axis)))
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'t>> {
        let v = self.value().log_softmax(axis)?;
        Ok(self.unary(v, Op::LogSoftmax(self.id, axis)))
    }

    pub fn l2_normalize(self) -> Result<Var<'t>> {
        let v = self.value().l2_normalize()?;
        Ok(self.unary(v, Op::L2Normalize(self.id)))
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", &[], &[]))?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| &**v).collect();
        let v = Tensor::concat(&refs, axis)?;
        Ok(first.unary(v, Op::Concat(parts.iter().map(|p| p.id).collect(), axis)))
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t>> {
        let v = self.value().slice_cols(start, end)?;
        Ok(self.unary(v, Op::SliceCols(self.id, start)))
    }

    pub fn diagonal(self) -> Result<Var<'t>> {
        let v = self.value().diagonal()?;
        Ok(self.unary(v, Op::Diagonal(self.id)))
    }

    /// 3-D convolution of a channels-last volume; see [`Conv3dSpec`].
    pub fn conv3d(self, weight: Var<'t>, bias: Var<'t>, spec: Conv3dSpec) -> Result<Var<'t>> {
        let v = conv3d_forward(&self.value(), &weight.value(), &bias.value(), spec)?;
        Ok(self.unary(
            v,
            Op::Conv3d {
                input: self.id,
                weight: weight.id,
                bias: bias.id,
                spec,
            },
        ))
    }
}
