//! Tape-based reverse-mode differentiation over the operator set used by
//! the gradient descent unit.
//!
//! A [`Graph`] records every operation in execution order, so the tape is
//! already topologically sorted and `backward` is a single reverse sweep.
//! The graph is rebuilt for every forward pass; unroll depth may differ
//! between calls. Gradients persist only on leaves created with
//! `requires_grad`, and repeated `backward` calls add into them.

use std::sync::Arc;

use crate::batchnorm::{self, BatchStats, TrainCache};
use crate::conv::{self, ConvSpec};
use crate::degrade::Degradation;
use crate::error::{ensure_dim, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    },
    BatchNormTrain {
        input: Var,
        gamma: Var,
        beta: Var,
        cache: TrainCache<T>,
    },
    /// Frozen statistics: `out = scale * x + shift` per channel.
    BatchNormEval {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        scale: Vec<T>,
    },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, T),
    Sum(Var),
    /// `sum((x - target)^2)`.
    SquaredError {
        input: Var,
        target: Arc<Tensor<T>>,
    },
    /// `sum |dv x - dv t| + sum |dh x - dh t|` with forward differences.
    GradientL1 {
        input: Var,
        target: Arc<Tensor<T>>,
    },
    /// `A^T (A x - y)` per batch sample.
    Fidelity {
        input: Var,
        observed: Var,
        ops: Arc<[Degradation]>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// A recorded computation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let out = {
            let x = self.value(input);
            let w = self.value(weight);
            let b = bias.map(|b| self.value(b));
            if spec.transposed {
                conv::tconv2d(x, w, b, &spec)?
            } else {
                conv::conv2d(x, w, b, &spec)?
            }
        };
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            out,
            Op::Conv {
                input,
                weight,
                bias,
                spec,
            },
            rg,
        ))
    }

    /// Training-mode normalization; also returns the batch statistics so the
    /// caller can fold them into running estimates.
    pub fn batch_norm_train(&mut self, input: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        let (out, cache, stats) =
            batchnorm::forward_train(self.value(input), self.value(gamma), self.value(beta), eps)?;
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            out,
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                cache,
            },
            rg,
        );
        Ok((v, stats))
    }

    /// Eval-mode normalization with frozen statistics.
    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: T,
    ) -> Result<Var> {
        let x = self.value(input);
        batchnorm::check_channels(x, self.value(gamma))?;
        ensure_dim("batch_norm", "running stats", running_mean.len(), x.shape().c)?;
        ensure_dim("batch_norm", "running stats", running_var.len(), x.shape().c)?;
        let (scale, shift) =
            batchnorm::eval_affine(self.value(gamma), self.value(beta), running_mean, running_var, eps);
        let out = batchnorm::apply_affine(x, &scale, &shift);
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        // xhat only feeds the gamma gradient
        let xhat = if self.rg(gamma) {
            let inv: Vec<T> = running_var
                .data()
                .iter()
                .map(|&v| T::one() / (v + eps).sqrt())
                .collect();
            let neg: Vec<T> = running_mean.data().iter().zip(&inv).map(|(&m, &i)| -m * i).collect();
            batchnorm::apply_affine(x, &inv, &neg)
        } else {
            Tensor::zeros(Shape::new(0, 0, 0, 0))
        };
        Ok(self.push(
            out,
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                xhat,
                scale,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.value(input).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(input);
        self.push(out, Op::Relu(input), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// Sum of all elements, as a `1x1x1x1` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    /// `sum((x - target)^2)` as a scalar node.
    pub fn squared_error(&mut self, input: Var, target: Arc<Tensor<T>>) -> Result<Var> {
        let x = self.value(input);
        x.shape().ensure_eq("squared_error", &target.shape())?;
        let v: T = x
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        let rg = self.rg(input);
        Ok(self.push(Tensor::scalar(v), Op::SquaredError { input, target }, rg))
    }

    /// L1 discrepancy of vertical and horizontal forward differences.
    pub fn gradient_l1(&mut self, input: Var, target: Arc<Tensor<T>>) -> Result<Var> {
        let x = self.value(input);
        x.shape().ensure_eq("gradient_l1", &target.shape())?;
        let v = gradient_l1_value(x, &target)?;
        let rg = self.rg(input);
        Ok(self.push(Tensor::scalar(v), Op::GradientL1 { input, target }, rg))
    }

    /// `A^T (A x - y)` with one degradation per batch sample, or one shared by all.
    pub fn fidelity_gradient(&mut self, input: Var, observed: Var, ops: Arc<[Degradation]>) -> Result<Var> {
        let x = self.value(input);
        let y = self.value(observed);
        x.shape().ensure_eq("fidelity_gradient", &y.shape())?;
        let out = fidelity_batch(x, y, &ops)?;
        let rg = self.rg(input) || self.rg(observed);
        Ok(self.push(out, Op::Fidelity { input, observed, ops }, rg))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {}",
                self.value(loss).shape()
            )));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&g)?,
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let acc = |grads: &mut [Option<Tensor<T>>], v: Var, t: Tensor<T>| -> Result<()> {
            match &mut grads[v.0] {
                Some(a) => a.add_assign(&t),
                slot @ None => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv {
                input,
                weight,
                bias,
                spec,
            } => {
                let r = conv::conv_backward(
                    self.value(*input),
                    self.value(*weight),
                    g,
                    spec,
                    self.rg(*input),
                    self.rg(*weight),
                );
                if let Some(gi) = r.input {
                    acc(grads, *input, gi)?;
                }
                if let Some(gw) = r.weight {
                    acc(grads, *weight, gw)?;
                }
                if let Some(b) = bias.filter(|b| self.rg(*b)) {
                    acc(grads, b, r.bias)?;
                }
            }
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                cache,
            } => {
                let (dx, dg, db) = batchnorm::backward_train(g, self.value(*gamma), cache);
                if self.rg(*input) {
                    acc(grads, *input, dx)?;
                }
                if self.rg(*gamma) {
                    acc(grads, *gamma, dg)?;
                }
                if self.rg(*beta) {
                    acc(grads, *beta, db)?;
                }
            }
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                xhat,
                scale,
            } => {
                if self.rg(*input) {
                    acc(
                        grads,
                        *input,
                        batchnorm::apply_affine(g, scale, &vec![T::zero(); scale.len()]),
                    )?;
                }
                if self.rg(*gamma) {
                    let prod = g.zip_map(xhat, |a, b| a * b)?;
                    acc(grads, *gamma, conv::channel_sums(&prod))?;
                }
                if self.rg(*beta) {
                    acc(grads, *beta, conv::channel_sums(g))?;
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let d = g.zip_map(x, |gv, xv| if xv > T::zero() { gv } else { T::zero() })?;
                acc(grads, *a, d)?;
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    acc(grads, *a, g.clone())?;
                }
                if self.rg(*b) {
                    acc(grads, *b, g.clone())?;
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    acc(grads, *a, g.clone())?;
                }
                if self.rg(*b) {
                    acc(grads, *b, g.map(|v| -v))?;
                }
            }
            Op::Scale(a, s) => acc(grads, *a, g.scale(*s))?,
            Op::Sum(a) => {
                let gs = g.data()[0];
                acc(grads, *a, Tensor::full(self.value(*a).shape(), gs))?;
            }
            Op::SquaredError { input, target } => {
                let two_g = g.data()[0] + g.data()[0];
                let d = self.value(*input).zip_map(target, |x, t| two_g * (x - t))?;
                acc(grads, *input, d)?;
            }
            Op::GradientL1 { input, target } => {
                let d = gradient_l1_backward(self.value(*input), target, g.data()[0]);
                acc(grads, *input, d)?;
            }
            Op::Fidelity { input, observed, ops } => {
                // Jacobian w.r.t. x is A^T A (self-adjoint); w.r.t. y it is -A^T.
                if self.rg(*input) {
                    let d = per_sample(g, ops, |op, gs| op.apply_adjoint(&op.apply(gs)?))?;
                    acc(grads, *input, d)?;
                }
                if self.rg(*observed) {
                    let d = per_sample(g, ops, |op, gs| Ok(op.apply(gs)?.map(|v| -v)))?;
                    acc(grads, *observed, d)?;
                }
            }
        }
        Ok(())
    }
}

/// Applies `f` to each batch sample with its own degradation.
fn per_sample<T: Scalar>(
    x: &Tensor<T>,
    ops: &[Degradation],
    f: impl Fn(&Degradation, &Tensor<T>) -> Result<Tensor<T>>,
) -> Result<Tensor<T>> {
    let n = x.shape().n;
    if ops.len() == 1 {
        return f(&ops[0], x);
    }
    ensure_dim("fidelity_gradient", "degradations per batch", ops.len(), n)?;
    let mut out = Tensor::zeros(x.shape());
    for (i, op) in ops.iter().enumerate() {
        let r = f(op, &x.select(i))?;
        out.sample_mut(i).copy_from_slice(r.data());
    }
    Ok(out)
}

fn fidelity_batch<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, ops: &[Degradation]) -> Result<Tensor<T>> {
    let n = x.shape().n;
    if ops.len() == 1 {
        return ops[0].fidelity_gradient(x, y);
    }
    ensure_dim("fidelity_gradient", "degradations per batch", ops.len(), n)?;
    let mut out = Tensor::zeros(x.shape());
    for (i, op) in ops.iter().enumerate() {
        let r = op.fidelity_gradient(&x.select(i), &y.select(i))?;
        out.sample_mut(i).copy_from_slice(r.data());
    }
    Ok(out)
}

fn l1_sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

pub(crate) fn gradient_l1_value<T: Scalar>(x: &Tensor<T>, t: &Tensor<T>) -> Result<T> {
    let s = x.shape();
    if s.h < 2 || s.w < 2 {
        return Err(Error::invalid(format!(
            "image gradients need at least 2x2 pixels, got {}x{}",
            s.h, s.w
        )));
    }
    let mut total = T::zero();
    for n in 0..s.n {
        for c in 0..s.c {
            let (xp, tp) = (x.plane(n, c), t.plane(n, c));
            for y in 0..s.h {
                for col in 0..s.w {
                    let i = y * s.w + col;
                    if y + 1 < s.h {
                        let d = (xp[i + s.w] - xp[i]) - (tp[i + s.w] - tp[i]);
                        total += d.abs();
                    }
                    if col + 1 < s.w {
                        let d = (xp[i + 1] - xp[i]) - (tp[i + 1] - tp[i]);
                        total += d.abs();
                    }
                }
            }
        }
    }
    Ok(total)
}

fn gradient_l1_backward<T: Scalar>(x: &Tensor<T>, t: &Tensor<T>, g: T) -> Tensor<T> {
    let s = x.shape();
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let (xp, tp) = (x.plane(n, c), t.plane(n, c));
            let mut d = vec![T::zero(); s.plane()];
            for y in 0..s.h {
                for col in 0..s.w {
                    let i = y * s.w + col;
                    if y + 1 < s.h {
                        let sg = g * l1_sign((xp[i + s.w] - xp[i]) - (tp[i + s.w] - tp[i]));
                        d[i + s.w] += sg;
                        d[i] -= sg;
                    }
                    if col + 1 < s.w {
                        let sg = g * l1_sign((xp[i + 1] - xp[i]) - (tp[i + 1] - tp[i]));
                        d[i + 1] += sg;
                        d[i] -= sg;
                    }
                }
            }
            out.plane_mut(n, c).copy_from_slice(&d);
        }
    }
    out
}
