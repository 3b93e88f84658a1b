//! Reverse-mode differentiation over a dynamically recorded tape.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order of the (acyclic) graph. [`Tape::backward`] walks it
//! once from the loss back to the first node.

use std::cell::{Cell, RefCell};

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Square(usize),
    Tanh(usize),
    MatMul(usize, usize),
    BatchMatMul(usize, usize),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    SoftmaxLast(usize),
    SumLast(usize),
    SumAll(usize),
    ExpandLast(usize),
    SelectLast(usize, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Deliberate gradient-rule corruption for negative-control tests of the
/// gradient checker. Never enabled on a normal tape.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fault {
    /// Multiply the softmax input-gradient by this factor.
    SoftmaxGradScale(f64),
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    fault: Cell<Option<Fault>>,
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

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient w.r.t. `var`; zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.grads[var.id]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.id]))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn inject_fault(&self, fault: Option<Fault>) {
        self.fault.set(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that gradients are tracked for.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn unary(&self, a: usize, op: Op, f: impl FnOnce(&Tensor) -> Result<Tensor>) -> Result<Var<'_>> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            (f(&nodes[a].value)?, nodes[a].requires_grad)
        };
        Ok(self.push(value, op, rg))
    }

    fn binary(
        &self,
        a: usize,
        b: usize,
        op: Op,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor>,
    ) -> Result<Var<'_>> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            (
                f(&nodes[a].value, &nodes[b].value)?,
                nodes[a].requires_grad || nodes[b].requires_grad,
            )
        };
        Ok(self.push(value, op, rg))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Contract("loss belongs to another tape".into()));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let fault = self.fault.get();
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::ones(nodes[loss.id].value.shape()));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let val = |k: usize| &nodes[k].value;
            let wants = |k: usize| nodes[k].requires_grad;
            let mut contributions: Vec<(usize, Tensor)> = Vec::with_capacity(2);
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    if wants(*b) {
                        contributions.push((*b, g.reduce_to_suffix(val(*b).shape())?));
                    }
                    if wants(*a) {
                        contributions.push((*a, g));
                    }
                }
                Op::Sub(a, b) => {
                    if wants(*b) {
                        contributions.push((*b, g.reduce_to_suffix(val(*b).shape())?.scale(-1.0)));
                    }
                    if wants(*a) {
                        contributions.push((*a, g));
                    }
                }
                Op::Mul(a, b) => {
                    if wants(*a) {
                        contributions.push((*a, g.mul(val(*b))?));
                    }
                    if wants(*b) {
                        let gb = g.mul(val(*a))?.reduce_to_suffix(val(*b).shape())?;
                        contributions.push((*b, gb));
                    }
                }
                Op::Div(a, b) => {
                    if wants(*a) {
                        contributions.push((*a, g.zip_map(val(*b), "div", |x, y| x / y)?));
                    }
                    if wants(*b) {
                        // d(a/b)/db = -a/b^2 = -out/b
                        let t = g.mul(&node.value)?.reduce_to_suffix(val(*b).shape())?;
                        let gb = t.zip_map(val(*b), "div", |x, y| -x / y)?;
                        contributions.push((*b, gb));
                    }
                }
                Op::Scale(a, c) => contributions.push((*a, g.scale(*c))),
                Op::Shift(a) => contributions.push((*a, g)),
                Op::Exp(a) => contributions.push((*a, g.mul(&node.value)?)),
                Op::Ln(a) => contributions.push((*a, g.zip_map(val(*a), "ln", |x, y| x / y)?)),
                Op::Sqrt(a) => {
                    contributions.push((*a, g.zip_map(&node.value, "sqrt", |x, y| x / (2.0 * y))?))
                }
                Op::Square(a) => {
                    contributions.push((*a, g.zip_map(val(*a), "square", |x, y| 2.0 * x * y)?))
                }
                Op::Tanh(a) => {
                    contributions.push((*a, g.zip_map(&node.value, "tanh", |x, y| x * (1.0 - y * y))?))
                }
                Op::MatMul(a, b) => {
                    if wants(*a) {
                        contributions.push((*a, g.matmul(&val(*b).transpose2d()?)?));
                    }
                    if wants(*b) {
                        contributions.push((*b, val(*a).transpose2d()?.matmul(&g)?));
                    }
                }
                Op::BatchMatMul(a, b) => {
                    if wants(*a) {
                        let bt = val(*b).permute(&[0, 2, 1])?;
                        contributions.push((*a, g.batch_matmul(&bt)?));
                    }
                    if wants(*b) {
                        let at = val(*a).permute(&[0, 2, 1])?;
                        contributions.push((*b, at.batch_matmul(&g)?));
                    }
                }
                Op::Permute(a, perm) => {
                    let mut inverse = vec![0; perm.len()];
                    for (k, &p) in perm.iter().enumerate() {
                        inverse[p] = k;
                    }
                    contributions.push((*a, g.permute(&inverse)?));
                }
                Op::Reshape(a) => contributions.push((*a, g.reshape(val(*a).shape())?)),
                Op::SoftmaxLast(a) => {
                    // dx = y * (g - <g, y>) per last-dim slice
                    let y = &node.value;
                    let n = y.last_dim();
                    let mut out = vec![0.0; y.numel()];
                    for ((o, gs), ys) in out
                        .chunks_mut(n)
                        .zip(g.data().chunks(n))
                        .zip(y.data().chunks(n))
                    {
                        let dot: f64 = gs.iter().zip(ys).map(|(p, q)| p * q).sum();
                        for ((ov, gv), yv) in o.iter_mut().zip(gs).zip(ys) {
                            *ov = yv * (gv - dot);
                        }
                    }
                    let mut gx = Tensor::new(y.shape(), out)?;
                    if let Some(Fault::SoftmaxGradScale(c)) = fault {
                        gx = gx.scale(c);
                    }
                    contributions.push((*a, gx));
                }
                Op::SumLast(a) => contributions.push((*a, g.expand_last(val(*a).last_dim()))),
                Op::SumAll(a) => {
                    let s = g.item()?;
                    contributions.push((*a, Tensor::full(val(*a).shape(), s)));
                }
                Op::ExpandLast(a) => contributions.push((*a, g.sum_lastdim()?)),
                Op::SelectLast(a, idx) => {
                    let n = val(*a).last_dim();
                    let mut out = vec![0.0; val(*a).numel()];
                    for (row, gv) in out.chunks_mut(n).zip(g.data()) {
                        row[*idx] = *gv;
                    }
                    contributions.push((*a, Tensor::new(val(*a).shape(), out)?));
                }
            }
            for (parent, contribution) in contributions {
                if !wants(parent) {
                    continue;
                }
                grads[parent] = Some(match grads[parent].take() {
                    Some(acc) => acc.add(&contribution)?,
                    None => contribution,
                });
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        grads.resize(nodes.len(), None);
        Ok(Gradients { grads, shapes })
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// Runs `f` against the recorded value without cloning it.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|v| v.shape().to_vec())
    }

    pub fn item(&self) -> Result<f64> {
        self.with_value(|v| v.item())
    }

    fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Contract("operands recorded on different tapes".into()))
        }
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs)?;
        self.tape.binary(self.id, rhs.id, Op::Add(self.id, rhs.id), |a, b| a.add(b))
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs)?;
        self.tape.binary(self.id, rhs.id, Op::Sub(self.id, rhs.id), |a, b| a.sub(b))
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs)?;
        self.tape.binary(self.id, rhs.id, Op::Mul(self.id, rhs.id), |a, b| a.mul(b))
    }

    pub fn div(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs)?;
        self.tape.binary(self.id, rhs.id, Op::Div(self.id, rhs.id), |a, b| {
            a.zip_map(b, "div", |x, y| x / y)
        })
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        self.tape.unary(self.id, Op::Scale(self.id, c), |a| Ok(a.scale(c)))
    }

    /// Adds the constant `c` to every element.
    pub fn shift(self, c: f64) -> Result<Var<'t>> {
        self.tape.unary(self.id, Op::Shift(self.id), |a| Ok(a.map(|v| v + c)))
    }

    /// `c - self`.
    pub fn rsub(self, c: f64) -> Result<Var<'t>> {
        self.scale(-1.0)?.shift(c)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.tape.unary(self.id, Op::Exp(self.id), |a| Ok(a.map(f64::exp)))
    }

    pub fn ln(self) -> Result<Var<'t>> {
        self.tape.unary(self.id, Op::Ln(self.id), |a| Ok(a.map(f64::ln)))
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        self.tape.unary(self.id, Op::Sqrt(self.id), |a| Ok(a.map(f64::sqrt)))
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.tape.unary(self.id, Op::Square(self.id), |a| Ok(a.map(|v| v * v)))
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        self.tape.unary(self.id, Op::Tanh(self.id), |a| Ok(a.map(f64::tanh)))
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs)?;
        self.tape.binary(self.id, rhs.id, Op::MatMul(self.id, rhs.id), |a, b| a.matmul(b))
    }

    pub fn batch_matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs)?;
        self.tape.binary(self.id, rhs.id, Op::BatchMatMul(self.id, rhs.id), |a, b| {
            a.batch_matmul(b)
        })
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        self.tape
            .unary(self.id, Op::Permute(self.id, perm.to_vec()), |a| a.permute(perm))
    }

    pub fn transpose2d(self) -> Result<Var<'t>> {
        self.permute(&[1, 0])
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        self.tape.unary(self.id, Op::Reshape(self.id), |a| a.reshape(shape))
    }

    pub fn softmax_lastdim(self) -> Result<Var<'t>> {
        self.tape.unary(self.id, Op::SoftmaxLast(self.id), |a| a.softmax_lastdim())
    }

    pub fn sum_lastdim(self) -> Result<Var<'t>> {
        self.tape.unary(self.id, Op::SumLast(self.id), |a| a.sum_lastdim())
    }

    pub fn sum_all(self) -> Result<Var<'t>> {
        self.tape.unary(self.id, Op::SumAll(self.id), |a| Ok(Tensor::scalar(a.sum())))
    }

    pub fn mean_all(self) -> Result<Var<'t>> {
        let n = self.with_value(|v| v.numel()) as f64;
        self.sum_all()?.scale(1.0 / n)
    }

    pub fn expand_last(self, n: usize) -> Result<Var<'t>> {
        self.tape.unary(self.id, Op::ExpandLast(self.id), |a| Ok(a.expand_last(n)))
    }

    pub fn select_last(self, idx: usize) -> Result<Var<'t>> {
        self.tape
            .unary(self.id, Op::SelectLast(self.id, idx), |a| a.select_last(idx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let z = tape.leaf(Tensor::new(&[2, 3], vec![0.5, -1.0, 2.0, 3.0, 4.0, 5.0]).unwrap());
        let loss = z.sum_all().unwrap();
        let g = tape.backward(loss).unwrap().wrt(z);
        assert_eq!(g, Tensor::ones(&[2, 3]));
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let tape = Tape::new();
        let z = tape.leaf(Tensor::from_vec(vec![3.0, 4.0]));
        let loss = z.square().unwrap().sum_all().unwrap().scale(0.5).unwrap();
        assert_eq!(loss.item().unwrap(), 12.5);
        let g = tape.backward(loss).unwrap().wrt(z);
        assert_eq!(g.data(), &[3.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let z = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(z), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient_path() {
        let tape = Tape::new();
        let w = tape.constant(Tensor::from_vec(vec![2.0, 2.0]));
        let z = tape.leaf(Tensor::from_vec(vec![1.0, 1.0]));
        let loss = z.mul(w).unwrap().sum_all().unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(z).data(), &[2.0, 2.0]);
        assert_eq!(grads.wrt(w).data(), &[0.0, 0.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let tape = Tape::new();
        let z = tape.leaf(Tensor::from_vec(vec![2.0]));
        // z*z + z => 2z + 1
        let loss = z.mul(z).unwrap().add(z).unwrap().sum_all().unwrap();
        assert_eq!(tape.backward(loss).unwrap().wrt(z).data(), &[5.0]);
    }
}
