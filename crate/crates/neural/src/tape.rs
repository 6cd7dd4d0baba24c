//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and the indices
//! of its inputs. [`Tape::backward`] walks the nodes in reverse, so the
//! recorded order is a valid topological order by construction.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::conv::{conv_backward, conv_forward, ConvDims};
use crate::error::{NnError, Result};
use crate::ops;
use crate::real::Real;
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv {
        x: usize,
        w: usize,
        b: usize,
        dims: ConvDims,
    },
    Relu(usize),
    Add(usize, usize),
    Scale(usize, f64),
    Sum(usize),
    L1 {
        pred: usize,
        target: usize,
        weight: f64,
    },
    AvgPool(usize, ConvDims),
    Upsample(usize, ConvDims),
}

#[derive(Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape<T: Real> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(NnError::State(
                "variable does not belong to this tape".into(),
            ));
        }
        Ok(v.index)
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Record an input. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[self.idx(v).expect("foreign variable")].value
    }

    /// Gradient accumulated into a leaf by the last [`backward`](Self::backward).
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.idx(v)
            .ok()
            .and_then(|i| self.nodes[i].value.grad.as_deref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        let i = self.idx(v).ok()?;
        self.nodes[i].value.grad.take()
    }

    pub fn conv(&mut self, x: Var, w: Var, b: Var, dims: ConvDims) -> Result<Var> {
        let (xi, wi, bi) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let out = conv_forward(
            &self.nodes[xi].value,
            &self.nodes[wi].value,
            &self.nodes[bi].value,
            dims,
        )?;
        let rg = self.needs(xi) || self.needs(wi) || self.needs(bi);
        Ok(self.push(
            out,
            Op::Conv {
                x: xi,
                w: wi,
                b: bi,
                dims,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = ops::relu(&self.nodes[xi].value);
        let rg = self.needs(xi);
        Ok(self.push(out, Op::Relu(xi), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let out = ops::add(&self.nodes[ai].value, &self.nodes[bi].value)?;
        let rg = self.needs(ai) || self.needs(bi);
        Ok(self.push(out, Op::Add(ai, bi), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let xi = self.idx(x)?;
        let f = T::from_f64(factor);
        let out = self.nodes[xi].value.map(|v| v * f);
        let rg = self.needs(xi);
        Ok(self.push(out, Op::Scale(xi, factor), rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let s = self.nodes[xi]
            .value
            .data()
            .iter()
            .fold(T::zero(), |a, &v| a + v);
        let rg = self.needs(xi);
        Ok(self.push(Tensor::scalar(s), Op::Sum(xi), rg))
    }

    /// `weight * mean(|pred - target|)` as a scalar node.
    pub fn l1_loss(&mut self, pred: Var, target: Var, weight: f64) -> Result<Var> {
        let (pi, ti) = (self.idx(pred)?, self.idx(target)?);
        let v = ops::l1_loss(&self.nodes[pi].value, &self.nodes[ti].value, weight)?;
        let rg = self.needs(pi) || self.needs(ti);
        Ok(self.push(
            Tensor::scalar(v),
            Op::L1 {
                pred: pi,
                target: ti,
                weight,
            },
            rg,
        ))
    }

    pub fn avg_pool2(&mut self, x: Var, dims: ConvDims) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = ops::avg_pool2(&self.nodes[xi].value, dims)?;
        let rg = self.needs(xi);
        Ok(self.push(out, Op::AvgPool(xi, dims), rg))
    }

    pub fn upsample2(&mut self, x: Var, dims: ConvDims) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = ops::upsample2(&self.nodes[xi].value, dims)?;
        let rg = self.needs(xi);
        Ok(self.push(out, Op::Upsample(xi, dims), rg))
    }

    /// Values of every ReLU input on the tape, for kink-avoidance in
    /// finite-difference checks.
    pub fn relu_inputs(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.nodes.iter().filter_map(move |n| match n.op {
            Op::Relu(i) => Some(&self.nodes[i].value),
            _ => None,
        })
    }

    /// Back-propagate from a scalar node. Gradients land on leaves that
    /// were recorded with `requires_grad`; gradients from an earlier call
    /// are cleared first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes.iter().any(|n| !matches!(n.op, Op::Leaf)) {
            return Err(NnError::State(
                "backward called before any forward operation".into(),
            ));
        }
        let root = self.idx(loss)?;
        if self.nodes[root].value.len() != 1 {
            return Err(NnError::Shape(format!(
                "backward needs a scalar, got {:?}",
                self.nodes[root].value.shape()
            )));
        }
        for n in &mut self.nodes {
            n.value.grad = None;
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; root + 1];
        grads[root] = Some(vec![T::one()]);
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {
                    self.nodes[i].value.grad = Some(g);
                }
                Op::Conv { x, w, b, dims } => {
                    let dout = Tensor::new(self.nodes[i].value.shape(), g)?;
                    let cg = conv_backward(
                        &self.nodes[x].value,
                        &self.nodes[w].value,
                        &dout,
                        dims,
                        self.needs(x),
                    )?;
                    if let Some(dx) = cg.dx {
                        self.accumulate(&mut grads, x, dx.into_data());
                    }
                    self.accumulate(&mut grads, w, cg.dw.into_data());
                    self.accumulate(&mut grads, b, cg.db.into_data());
                }
                Op::Relu(x) => {
                    let dx = ops::relu_backward(&self.nodes[x].value, &g);
                    self.accumulate(&mut grads, x, dx);
                }
                Op::Add(a, b) => {
                    if a == b {
                        let doubled = g.iter().map(|&v| v + v).collect();
                        self.accumulate(&mut grads, a, doubled);
                    } else {
                        self.accumulate(&mut grads, a, g.clone());
                        self.accumulate(&mut grads, b, g);
                    }
                }
                Op::Scale(x, f) => {
                    let f = T::from_f64(f);
                    self.accumulate(&mut grads, x, g.into_iter().map(|v| v * f).collect());
                }
                Op::Sum(x) => {
                    let n = self.nodes[x].value.len();
                    self.accumulate(&mut grads, x, vec![g[0]; n]);
                }
                Op::L1 {
                    pred,
                    target,
                    weight,
                } => {
                    let dp = ops::l1_loss_backward(
                        &self.nodes[pred].value,
                        &self.nodes[target].value,
                        weight,
                        g[0],
                    );
                    if self.needs(target) {
                        let dt = dp.iter().map(|&v| -v).collect();
                        self.accumulate(&mut grads, target, dt);
                    }
                    self.accumulate(&mut grads, pred, dp);
                }
                Op::AvgPool(x, dims) => {
                    let dx = ops::avg_pool2_backward(self.nodes[x].value.shape(), &g, dims);
                    self.accumulate(&mut grads, x, dx);
                }
                Op::Upsample(x, dims) => {
                    let dx = ops::upsample2_backward(self.nodes[x].value.shape(), &g, dims);
                    self.accumulate(&mut grads, x, dx);
                }
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], i: usize, g: Vec<T>) {
        if !self.nodes[i].requires_grad {
            return;
        }
        match &mut grads[i] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, v)| *a = *a + v),
            slot @ None => *slot = Some(g),
        }
    }
}
