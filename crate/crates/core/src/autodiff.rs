//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is
//! a valid topological order. Gradients accumulate additively when a value
//! fans out to several consumers.

use crate::error::{Error, Result};
use crate::tensor::{self, numel, ConvSpec, PoolSpec, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Param(usize),
    Conv2d {
        input: Var,
        weights: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Dense {
        input: Var,
        weights: Var,
        bias: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    SumAll(Var),
    SoftmaxXent {
        logits: Var,
        probs: Tensor<T>,
        targets: Vec<usize>,
        weight: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    /// Whether any leaf or parameter upstream of this value wants a gradient.
    needs_grad: bool,
}

/// Single-owner record of one forward pass.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of a backward pass: one optional gradient per tape node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(usize, Var)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn of(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// `(registry index, gradient)` for every parameter leaf that received a gradient.
    pub fn params(&self) -> impl Iterator<Item = (usize, &[T])> + '_ {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.grads[v.0].as_deref().map(|g| (id, g)))
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, g: &[T]) {
    match slot {
        Some(acc) => {
            for (a, &b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        None => *slot = Some(g.to_vec()),
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let needs_grad = match &op {
            Op::Leaf | Op::Param(_) => true,
            Op::Conv2d { input, weights, bias, .. } => {
                self.needs(*input) || self.needs(*weights) || bias.is_some_and(|b| self.needs(b))
            }
            Op::MaxPool { input, .. } | Op::Slice { input, .. } => self.needs(*input),
            Op::Dense { input, weights, bias } => self.needs(*input) || self.needs(*weights) || self.needs(*bias),
            Op::Relu(a) | Op::Sigmoid(a) | Op::Tanh(a) | Op::Scale(a, _) | Op::Reshape(a) | Op::SumAll(a) => {
                self.needs(*a)
            }
            Op::Add(a, b) | Op::Mul(a, b) => self.needs(*a) || self.needs(*b),
            Op::Concat { parts, .. } => parts.iter().any(|&p| self.needs(p)),
            Op::SoftmaxXent { logits, .. } => self.needs(*logits),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Input data that never receives a gradient. Layers consuming only
    /// constants and parameters skip their input-gradient work.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].needs_grad = false;
        v
    }

    fn push_checked(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        let value = value.ensure_finite(name)?;
        Ok(self.push(value, op))
    }

    /// Constant input; receives a gradient but is not a parameter.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Trainable parameter, identified by its registry index.
    pub fn param(&mut self, registry_index: usize, value: Tensor<T>) -> Var {
        self.push(value, Op::Param(registry_index))
    }

    pub fn conv2d(&mut self, input: Var, weights: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let out = tensor::conv2d(self.value(input), self.value(weights), bias.map(|b| self.value(b)), &spec)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weights,
                bias,
                spec,
            },
        ))
    }

    pub fn maxpool2d(&mut self, input: Var, spec: PoolSpec) -> Result<Var> {
        let (out, argmax) = tensor::maxpool2d(self.value(input), &spec)?;
        Ok(self.push(out, Op::MaxPool { input, argmax }))
    }

    pub fn dense(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let out = tensor::dense(self.value(input), self.value(weights), self.value(bias))?;
        Ok(self.push(out, Op::Dense { input, weights, bias }))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.tanh());
        self.push(out, Op::Tanh(a))
    }

    fn zip_with(&self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::dim(op, format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("add", a, b, |p, q| p + q)?;
        self.push_checked(out, Op::Add(a, b), "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |p, q| p * q)?;
        self.push_checked(out, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let out = self.value(a).map(|v| v * factor);
        self.push_checked(out, Op::Scale(a, factor), "scale")
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = tensor::concat(&values, axis)?;
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    pub fn slice(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = tensor::slice_axis(self.value(input), axis, start, len)?;
        Ok(self.push(out, Op::Slice { input, axis, start }))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(input).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(input)))
    }

    /// Flattens everything after the leading axis.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input);
        let b = shape[0];
        let rest = numel(&shape[1..]);
        self.reshape(input, &[b, rest])
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s: T = self.value(a).data().iter().copied().sum();
        self.push_checked(Tensor::scalar(s), Op::SumAll(a), "sum")
    }

    /// Fused softmax + mean cross-entropy, scaled by `weight`. Returns a scalar.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize], weight: T) -> Result<Var> {
        let probs = tensor::softmax(self.value(logits))?;
        let loss = tensor::cross_entropy(&probs, targets)? * weight;
        let out = Tensor::scalar(loss);
        self.push_checked(
            out,
            Op::SoftmaxXent {
                logits,
                probs,
                targets: targets.to_vec(),
                weight,
            },
            "softmax_cross_entropy",
        )
    }

    /// Sum of scalar nodes.
    pub fn add_scalars(&mut self, terms: &[Var]) -> Result<Var> {
        let mut iter = terms.iter();
        let first = *iter.next().ok_or_else(|| Error::Argument("empty loss sum".into()))?;
        let mut acc = first;
        for &t in iter {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::State("backward called on a value not recorded by this tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::State(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.backward_node(idx, &g, &mut grads)?;
            // intermediate gradients are dropped once propagated
            if matches!(self.nodes[idx].op, Op::Leaf | Op::Param(_)) {
                grads[idx] = Some(g);
            }
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, Var(i))),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn backward_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv2d {
                input,
                weights,
                bias,
                spec,
            } => {
                let want_input = self.needs(*input);
                let r = tensor::conv2d_backward(self.value(*input), self.value(*weights), bias.is_some(), spec, g, want_input)?;
                if let Some(dx) = &r.input {
                    accumulate(&mut grads[input.0], dx.data());
                }
                accumulate(&mut grads[weights.0], r.weights.data());
                if let (Some(b), Some(db)) = (bias, r.bias) {
                    accumulate(&mut grads[b.0], db.data());
                }
            }
            Op::MaxPool { input, argmax } => {
                let dx = tensor::maxpool2d_backward(self.shape(*input), argmax, g);
                accumulate(&mut grads[input.0], dx.data());
            }
            Op::Dense { input, weights, bias } => {
                let r = tensor::dense_backward(self.value(*input), self.value(*weights), g);
                accumulate(&mut grads[input.0], r.input.data());
                accumulate(&mut grads[weights.0], r.weights.data());
                accumulate(&mut grads[bias.0], r.bias.data());
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d: Vec<T> = x
                    .iter()
                    .zip(g)
                    .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                accumulate(&mut grads[a.0], &d);
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let d: Vec<T> = y.iter().zip(g).map(|(&y, &g)| g * y * (T::one() - y)).collect();
                accumulate(&mut grads[a.0], &d);
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                let d: Vec<T> = y.iter().zip(g).map(|(&y, &g)| g * (T::one() - y * y)).collect();
                accumulate(&mut grads[a.0], &d);
            }
            Op::Add(a, b) => {
                accumulate(&mut grads[a.0], g);
                accumulate(&mut grads[b.0], g);
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                let da: Vec<T> = y.iter().zip(g).map(|(&y, &g)| g * y).collect();
                let db: Vec<T> = x.iter().zip(g).map(|(&x, &g)| g * x).collect();
                accumulate(&mut grads[a.0], &da);
                accumulate(&mut grads[b.0], &db);
            }
            Op::Scale(a, f) => {
                let d: Vec<T> = g.iter().map(|&g| g * *f).collect();
                accumulate(&mut grads[a.0], &d);
            }
            Op::Concat { parts, axis } => {
                let shapes: Vec<Vec<usize>> = parts.iter().map(|&p| self.shape(p).to_vec()).collect();
                let upstream = Tensor::new(node.value.shape().to_vec(), g.to_vec())?;
                let pieces = tensor::concat_backward(&shapes, *axis, &upstream)?;
                for (p, piece) in parts.iter().zip(pieces) {
                    accumulate(&mut grads[p.0], piece.data());
                }
            }
            Op::Slice { input, axis, start } => {
                let in_shape = self.shape(*input);
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let len = node.value.shape()[*axis];
                let n_axis = in_shape[*axis];
                let mut d = vec![T::zero(); numel(in_shape)];
                for o in 0..outer {
                    let dst = (o * n_axis + start) * inner;
                    let src = o * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                accumulate(&mut grads[input.0], &d);
            }
            Op::Reshape(a) => accumulate(&mut grads[a.0], g),
            Op::SumAll(a) => {
                let d = vec![g[0]; self.value(*a).len()];
                accumulate(&mut grads[a.0], &d);
            }
            Op::SoftmaxXent {
                logits,
                probs,
                targets,
                weight,
            } => {
                let n = probs.shape()[1];
                let scale = g[0] * *weight / T::lit(targets.len() as f64);
                let mut d: Vec<T> = probs.data().iter().map(|&p| p * scale).collect();
                for (row, &t) in targets.iter().enumerate() {
                    d[row * n + t] -= scale;
                }
                accumulate(&mut grads[logits.0], &d);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Padding;
    use approx::assert_abs_diff_eq;

    #[test]
    fn linear_form_gradient_is_input() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.5 - 1.0);
        let xv = tape.leaf(x.clone());
        let w = tape.param(0, Tensor::from_fn(&[2, 3], |i| i as f64));
        let prod = tape.mul(w, xv).unwrap();
        let loss = tape.sum_all(prod).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.of(w).unwrap(), x.data());
        let params: Vec<_> = grads.params().collect();
        assert_eq!(params.len(), 1);
        assert_eq!(params[0].0, 0);
    }

    #[test]
    fn fused_softmax_xent_gradient() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::new(vec![2, 3], vec![0.2, -1.0, 0.5, 1.5, 0.0, -0.3]).unwrap());
        let loss = tape.softmax_cross_entropy(logits, &[2, 0], 1.0).unwrap();
        let g = tape.backward(loss).unwrap();
        let probs = tensor::softmax(tape.value(logits)).unwrap();
        let got = g.of(logits).unwrap();
        for row in 0..2 {
            for c in 0..3 {
                let target = [2, 0][row];
                let expect = (probs.at(&[row, c]) - if c == target { 1.0 } else { 0.0 }) / 2.0;
                assert_abs_diff_eq!(got[row * 3 + c], expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::full(&[3], 2.0));
        let b = tape.add(a, a).unwrap();
        let s = tape.sum_all(b).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.of(a).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn backward_state_errors() {
        let tape = Tape::<f64>::new();
        assert!(matches!(tape.backward(Var(0)), Err(Error::State(_))));
        let mut tape = Tape::<f64>::new();
        let v = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(v), Err(Error::State(_))));
    }

    #[test]
    fn maxpool_gradient_only_at_argmax() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[1, 1, 4, 4], |i| ((i * 7) % 16) as f64));
        let y = tape.maxpool2d(x, PoolSpec::new((2, 2), (2, 2), Padding::Valid)).unwrap();
        let s = tape.sum_all(y).unwrap();
        let g = tape.backward(s).unwrap();
        let gx = g.of(x).unwrap();
        assert_eq!(gx.iter().filter(|&&v| v != 0.0).count(), 4);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64));
        let w = tape.param(0, Tensor::full(&[1, 1, 2, 2], 0.5));
        let y = tape.conv2d(x, w, None, ConvSpec::new(1, (2, 2), (1, 1), Padding::Valid)).unwrap();
        let s = tape.sum_all(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.of(x).is_none());
        assert_eq!(g.of(w).unwrap(), &[8.0, 12.0, 20.0, 24.0]);
    }

    #[test]
    fn nan_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::full(&[2], f64::MAX));
        let b = tape.leaf(Tensor::full(&[2], f64::MAX));
        assert!(matches!(tape.add(a, b), Err(Error::Numeric { .. })));
    }
}
