//! The recording tape and differentiable variables.
//!
//! Every backward rule is written in terms of `Var` operations, so running
//! [`Tape::grad`] with `create_graph = true` records the gradient computation
//! itself and the result can be differentiated again.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::conv::{self, ConvGeom};
use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(T),
    AddScalar,
    BroadcastTo,
    SumTo,
    Reshape,
    Narrow { axis: usize, start: usize },
    Unnarrow { axis: usize, start: usize },
    Square,
    Sqrt,
    SafeRecip,
    Abs,
    Tanh,
    Relu,
    LeakyRelu(T),
    Conv2d(ConvGeom),
    ConvTranspose2d(ConvGeom),
    ConvWeightGrad { geom: ConvGeom },
}

type Input<T> = (Rc<Tensor<T>>, Option<usize>);

struct Node<T> {
    op: Op<T>,
    inputs: Vec<Input<T>>,
    output: Rc<Tensor<T>>,
}

struct Inner<T> {
    nodes: RefCell<Vec<Node<T>>>,
    recording: Cell<bool>,
    /// Running hash of which side of its kink every piecewise op landed on.
    branches: Cell<Option<u64>>,
}

/// Append-only record of differentiable operations.
pub struct Tape<T> {
    inner: Rc<Inner<T>>,
}

impl<T> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Self {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            inner: Rc::new(Inner {
                nodes: RefCell::new(Vec::new()),
                recording: Cell::new(true),
                branches: Cell::new(None),
            }),
        }
    }

    fn same(&self, other: &Tape<T>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable leaf.
    pub fn var(&self, value: Tensor<T>) -> Var<T> {
        let value = Rc::new(value);
        let mut nodes = self.inner.nodes.borrow_mut();
        nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            output: Rc::clone(&value),
        });
        Var {
            value,
            id: Some(nodes.len() - 1),
            tape: self.clone(),
        }
    }

    /// A value that is never differentiated.
    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        Var {
            value: Rc::new(value),
            id: None,
            tape: self.clone(),
        }
    }

    pub fn scalar(&self, v: T) -> Var<T> {
        self.constant(Tensor::scalar(v))
    }

    /// Starts hashing the branch taken by every `abs`, `relu` and
    /// `leaky_relu` element from here on.
    pub fn track_branches(&self) {
        self.inner.branches.set(Some(0xcbf2_9ce4_8422_2325));
    }

    /// Equal signatures for two evaluations of the same program mean every
    /// piecewise op took the same branches, so the program was smooth between
    /// them. `None` unless tracking was enabled.
    pub fn branch_signature(&self) -> Option<u64> {
        self.inner.branches.get()
    }

    fn note_branches(&self, x: &Tensor<T>) {
        let Some(mut h) = self.inner.branches.get() else { return };
        for &a in x.data() {
            let side: u64 = if a > T::zero() {
                1
            } else if a < T::zero() {
                2
            } else {
                3
            };
            h = (h ^ side).wrapping_mul(0x0100_0000_01b3);
        }
        self.inner.branches.set(Some(h));
    }

    /// Runs `f` without recording; every result is a constant.
    pub fn no_grad<R>(&self, f: impl FnOnce() -> R) -> R {
        let prev = self.inner.recording.replace(false);
        let out = f();
        self.inner.recording.set(prev);
        out
    }

    fn record(&self, value: Tensor<T>, op: Op<T>, inputs: &[&Var<T>]) -> Var<T> {
        for v in inputs {
            assert!(self.same(&v.tape), "variables from different tapes");
        }
        let track = self.inner.recording.get() && inputs.iter().any(|v| v.id.is_some());
        let value = Rc::new(value);
        let id = if track {
            let mut nodes = self.inner.nodes.borrow_mut();
            nodes.push(Node {
                op,
                inputs: inputs
                    .iter()
                    .map(|v| (Rc::clone(&v.value), v.id))
                    .collect(),
                output: Rc::clone(&value),
            });
            Some(nodes.len() - 1)
        } else {
            None
        };
        Var {
            value,
            id,
            tape: self.clone(),
        }
    }

    /// Gradients of `output` (summed over its elements) with respect to `wrt`.
    ///
    /// Returns `None` for variables `output` does not depend on. With
    /// `create_graph` the returned gradients are themselves recorded and can be
    /// differentiated further.
    pub fn grad(
        &self,
        output: &Var<T>,
        wrt: &[&Var<T>],
        create_graph: bool,
    ) -> Result<Vec<Option<Var<T>>>> {
        let Some(out_id) = output.id else {
            return Ok(vec![None; wrt.len()]);
        };
        for v in wrt {
            if !self.same(&v.tape) {
                return Err(TensorError::Grad("variable from a different tape".into()));
            }
        }
        let mut wanted = vec![false; out_id + 1];
        for v in wrt {
            if let Some(i) = v.id {
                if i <= out_id {
                    wanted[i] = true;
                }
            }
        }
        // needed[i]: node i lies on a path from some wrt variable to the output.
        let mut needed = wanted.clone();
        {
            let nodes = self.inner.nodes.borrow();
            for (i, node) in nodes.iter().enumerate().take(out_id + 1) {
                if !needed[i] && node.inputs.iter().any(|(_, id)| id.is_some_and(|k| needed[k])) {
                    needed[i] = true;
                }
            }
        }
        let mut grads: Vec<Option<Var<T>>> = vec![None; out_id + 1];
        let mut found: Vec<Option<Var<T>>> = vec![None; out_id + 1];
        grads[out_id] = Some(self.constant(Tensor::ones(output.value.shape())));

        let prev = self.inner.recording.replace(create_graph);
        for id in (0..=out_id).rev() {
            if !needed[id] {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if wanted[id] {
                found[id] = Some(g.clone());
            }
            let (op, inputs, out_value) = {
                let nodes = self.inner.nodes.borrow();
                let n = &nodes[id];
                (n.op.clone(), n.inputs.clone(), Rc::clone(&n.output))
            };
            if matches!(op, Op::Leaf) {
                continue;
            }
            let inputs: Vec<Var<T>> = inputs
                .into_iter()
                .map(|(value, id)| Var {
                    value,
                    id,
                    tape: self.clone(),
                })
                .collect();
            let needs: Vec<bool> = inputs
                .iter()
                .map(|v| v.id.is_some_and(|k| needed[k]))
                .collect();
            let out = Var {
                value: out_value,
                id: Some(id),
                tape: self.clone(),
            };
            let local = backward(&op, &inputs, &out, &g, &needs);
            for ((input, gi), need) in inputs.iter().zip(local).zip(needs) {
                let (Some(k), Some(gi), true) = (input.id, gi, need) else {
                    continue;
                };
                grads[k] = Some(match grads[k].take() {
                    Some(acc) => acc.add(&gi),
                    None => gi,
                });
            }
        }
        self.inner.recording.set(prev);

        Ok(wrt
            .iter()
            .map(|v| v.id.and_then(|i| found.get(i).cloned().flatten()))
            .collect())
    }
}

fn backward<T: Real>(
    op: &Op<T>,
    inputs: &[Var<T>],
    out: &Var<T>,
    g: &Var<T>,
    needs: &[bool],
) -> Vec<Option<Var<T>>> {
    let need = |i: usize| needs.get(i).copied().unwrap_or(false);
    let when = |i: usize, f: &dyn Fn() -> Var<T>| if need(i) { Some(f()) } else { None };
    let x = &inputs[0];
    match op {
        Op::Leaf => Vec::new(),
        Op::Add => vec![when(0, &|| g.clone()), when(1, &|| g.clone())],
        Op::Sub => vec![when(0, &|| g.clone()), when(1, &|| g.neg())],
        Op::Mul => {
            let y = &inputs[1];
            vec![when(0, &|| g.mul(y)), when(1, &|| g.mul(x))]
        }
        Op::Div => {
            let y = &inputs[1];
            vec![when(0, &|| g.div(y)), when(1, &|| g.mul(out).div(y).neg())]
        }
        Op::Neg => vec![when(0, &|| g.neg())],
        Op::Scale(c) => vec![when(0, &|| g.scale(*c))],
        Op::AddScalar => vec![when(0, &|| g.clone())],
        Op::BroadcastTo => vec![when(0, &|| g.sum_to(x.shape()))],
        Op::SumTo => vec![when(0, &|| g.broadcast_to(x.shape()))],
        Op::Reshape => vec![when(0, &|| g.reshape(x.shape()))],
        Op::Narrow { axis, start } => {
            vec![when(0, &|| g.unnarrow(*axis, *start, x.shape()[*axis]))]
        }
        Op::Unnarrow { axis, start } => {
            vec![when(0, &|| g.narrow(*axis, *start, x.shape()[*axis]))]
        }
        Op::Square => vec![when(0, &|| g.mul(x).scale(T::from_f64_lossy(2.0)))],
        Op::Sqrt => vec![when(0, &|| {
            g.mul(&out.safe_recip()).scale(T::from_f64_lossy(0.5))
        })],
        Op::SafeRecip => vec![when(0, &|| g.mul(&out.square()).neg())],
        Op::Abs => vec![when(0, &|| {
            let sign = x.value.map(|v| {
                if v > T::zero() {
                    T::one()
                } else if v < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            });
            g.mul(&x.tape.constant(sign))
        })],
        Op::Tanh => vec![when(0, &|| g.sub(&g.mul(&out.square())))],
        Op::Relu => vec![when(0, &|| {
            let mask = x.value.map(|v| if v > T::zero() { T::one() } else { T::zero() });
            g.mul(&x.tape.constant(mask))
        })],
        Op::LeakyRelu(slope) => vec![when(0, &|| {
            let s = *slope;
            let mask = x.value.map(|v| if v > T::zero() { T::one() } else { s });
            g.mul(&x.tape.constant(mask))
        })],
        Op::Conv2d(geom) => {
            let w = &inputs[1];
            let k = w.shape()[2];
            let hw = (x.shape()[2], x.shape()[3]);
            vec![
                when(0, &|| g.conv_transpose2d(w, *geom, hw)),
                when(1, &|| x.conv2d_weight_grad(g, k, *geom)),
            ]
        }
        Op::ConvTranspose2d(geom) => {
            let w = &inputs[1];
            let k = w.shape()[2];
            vec![
                when(0, &|| g.conv2d(w, *geom)),
                when(1, &|| g.conv2d_weight_grad(x, k, *geom)),
            ]
        }
        Op::ConvWeightGrad { geom, .. } => {
            let gy = &inputs[1];
            let hw = (x.shape()[2], x.shape()[3]);
            vec![
                when(0, &|| gy.conv_transpose2d(g, *geom, hw)),
                when(1, &|| x.conv2d(g, *geom)),
            ]
        }
    }
}

/// A tensor value with an optional position on a tape.
pub struct Var<T> {
    value: Rc<Tensor<T>>,
    id: Option<usize>,
    tape: Tape<T>,
}

impl<T> Clone for Var<T> {
    fn clone(&self) -> Self {
        Self {
            value: Rc::clone(&self.value),
            id: self.id,
            tape: self.tape.clone(),
        }
    }
}

impl<T: std::fmt::Debug> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("value", &self.value)
            .finish()
    }
}

fn check_same_shape<T: Real>(op: &str, a: &Var<T>, b: &Var<T>) {
    assert_eq!(
        a.shape(),
        b.shape(),
        "{op}: shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
}

impl<T: Real> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    /// Whether this variable is recorded on the tape.
    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }

    pub fn item(&self) -> T {
        self.value.item()
    }

    /// Same value, cut off from the tape.
    pub fn detach(&self) -> Var<T> {
        Var {
            value: Rc::clone(&self.value),
            id: None,
            tape: self.tape.clone(),
        }
    }

    fn unary(&self, value: Tensor<T>, op: Op<T>) -> Var<T> {
        self.tape.record(value, op, &[self])
    }

    fn binary(&self, other: &Var<T>, value: Tensor<T>, op: Op<T>) -> Var<T> {
        self.tape.record(value, op, &[self, other])
    }

    pub fn add(&self, other: &Var<T>) -> Var<T> {
        check_same_shape("add", self, other);
        let v = self.value.zip_map(&other.value, |a, b| a + b);
        self.binary(other, v, Op::Add)
    }

    pub fn sub(&self, other: &Var<T>) -> Var<T> {
        check_same_shape("sub", self, other);
        let v = self.value.zip_map(&other.value, |a, b| a - b);
        self.binary(other, v, Op::Sub)
    }

    pub fn mul(&self, other: &Var<T>) -> Var<T> {
        check_same_shape("mul", self, other);
        let v = self.value.zip_map(&other.value, |a, b| a * b);
        self.binary(other, v, Op::Mul)
    }

    pub fn div(&self, other: &Var<T>) -> Var<T> {
        check_same_shape("div", self, other);
        let v = self.value.zip_map(&other.value, |a, b| a / b);
        self.binary(other, v, Op::Div)
    }

    /// `self + other` with `other` broadcast to `self`'s shape.
    pub fn add_b(&self, other: &Var<T>) -> Var<T> {
        self.add(&other.broadcast_to(self.shape()))
    }

    /// `self - other` with `other` broadcast to `self`'s shape.
    pub fn sub_b(&self, other: &Var<T>) -> Var<T> {
        self.sub(&other.broadcast_to(self.shape()))
    }

    /// `self * other` with `other` broadcast to `self`'s shape.
    pub fn mul_b(&self, other: &Var<T>) -> Var<T> {
        self.mul(&other.broadcast_to(self.shape()))
    }

    pub fn neg(&self) -> Var<T> {
        self.unary(self.value.map(|a| -a), Op::Neg)
    }

    pub fn scale(&self, c: T) -> Var<T> {
        self.unary(self.value.map(|a| a * c), Op::Scale(c))
    }

    pub fn add_scalar(&self, c: T) -> Var<T> {
        self.unary(self.value.map(|a| a + c), Op::AddScalar)
    }

    /// `c - self`
    pub fn rsub_scalar(&self, c: T) -> Var<T> {
        self.neg().add_scalar(c)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Var<T> {
        if self.shape() == shape {
            return self.clone();
        }
        let v = self
            .value
            .broadcast_to(shape)
            .unwrap_or_else(|e| panic!("{e}"));
        self.unary(v, Op::BroadcastTo)
    }

    pub fn sum_to(&self, shape: &[usize]) -> Var<T> {
        if self.shape() == shape {
            return self.clone();
        }
        let v = self.value.sum_to(shape).unwrap_or_else(|e| panic!("{e}"));
        self.unary(v, Op::SumTo)
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<T> {
        let v = self.value.reshape(shape).unwrap_or_else(|e| panic!("{e}"));
        self.unary(v, Op::Reshape)
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var<T> {
        let v = self
            .value
            .narrow(axis, start, len)
            .unwrap_or_else(|e| panic!("{e}"));
        self.unary(v, Op::Narrow { axis, start })
    }

    pub fn unnarrow(&self, axis: usize, start: usize, full: usize) -> Var<T> {
        let v = self
            .value
            .unnarrow(axis, start, full)
            .unwrap_or_else(|e| panic!("{e}"));
        self.unary(v, Op::Unnarrow { axis, start })
    }

    /// Sum of all elements, rank 0.
    pub fn sum(&self) -> Var<T> {
        self.sum_to(&[])
    }

    /// Mean of all elements, rank 0.
    pub fn mean(&self) -> Var<T> {
        let n = T::from_usize(self.value.numel()).unwrap();
        self.sum().scale(T::one() / n)
    }

    /// Mean over every axis but the first, shape `(n, 1, ..., 1)`.
    pub fn mean_per_sample(&self) -> Var<T> {
        let mut shape = vec![1; self.shape().len()];
        shape[0] = self.shape()[0];
        let per = T::from_usize(self.value.numel() / shape[0]).unwrap();
        self.sum_to(&shape).scale(T::one() / per)
    }

    pub fn square(&self) -> Var<T> {
        self.unary(self.value.map(|a| a * a), Op::Square)
    }

    /// Square root whose derivative is taken as zero at the origin.
    pub fn sqrt(&self) -> Var<T> {
        self.unary(self.value.map(|a| a.sqrt()), Op::Sqrt)
    }

    /// `1 / x`, with zero mapped to zero.
    pub fn safe_recip(&self) -> Var<T> {
        let v = self.value.map(|a| if a == T::zero() { T::zero() } else { T::one() / a });
        self.unary(v, Op::SafeRecip)
    }

    pub fn recip(&self) -> Var<T> {
        self.tape.scalar(T::one()).broadcast_to(self.shape()).div(self)
    }

    pub fn abs(&self) -> Var<T> {
        self.tape.note_branches(&self.value);
        self.unary(self.value.map(|a| a.abs()), Op::Abs)
    }

    pub fn tanh(&self) -> Var<T> {
        self.unary(self.value.map(|a| a.tanh()), Op::Tanh)
    }

    pub fn relu(&self) -> Var<T> {
        self.tape.note_branches(&self.value);
        self.unary(self.value.map(|a| a.max(T::zero())), Op::Relu)
    }

    pub fn leaky_relu(&self, slope: T) -> Var<T> {
        self.tape.note_branches(&self.value);
        let v = self
            .value
            .map(|a| if a > T::zero() { a } else { a * slope });
        self.unary(v, Op::LeakyRelu(slope))
    }

    pub fn conv2d(&self, weight: &Var<T>, geom: ConvGeom) -> Var<T> {
        let v = conv::conv2d(&self.value, &weight.value, geom).unwrap_or_else(|e| panic!("{e}"));
        self.binary(weight, v, Op::Conv2d(geom))
    }

    pub fn conv_transpose2d(&self, weight: &Var<T>, geom: ConvGeom, out_hw: (usize, usize)) -> Var<T> {
        let v = conv::conv_transpose2d(&self.value, &weight.value, geom, out_hw)
            .unwrap_or_else(|e| panic!("{e}"));
        self.binary(weight, v, Op::ConvTranspose2d(geom))
    }

    pub fn conv2d_weight_grad(&self, grad_out: &Var<T>, k: usize, geom: ConvGeom) -> Var<T> {
        let v = conv::conv2d_weight_grad(&self.value, &grad_out.value, k, geom)
            .unwrap_or_else(|e| panic!("{e}"));
        self.binary(grad_out, v, Op::ConvWeightGrad { geom })
    }
}
