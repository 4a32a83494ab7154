//! Per-channel batch normalization.

use crate::error::{ensure_dim, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// Whether layers use batch statistics (and update running ones) or frozen ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Affine parameters plus running statistics of one normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: T,
    pub eps: T,
}

/// Statistics observed on one training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, as used for the running estimate.
    pub var: Vec<T>,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        let s = Shape::new(1, channels, 1, 1);
        BatchNormState {
            gamma: Tensor::full(s, T::one()),
            beta: Tensor::zeros(s),
            running_mean: Tensor::zeros(s),
            running_var: Tensor::full(s, T::one()),
            momentum: T::from_f64_lossy(DEFAULT_MOMENTUM),
            eps: T::from_f64_lossy(DEFAULT_EPS),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Exponential moving average update of the running statistics.
    pub fn absorb(&mut self, stats: &BatchStats<T>) {
        let m = self.momentum;
        let keep = T::one() - m;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = keep * *r + m * b;
        }
    }

    pub fn cast<U: Scalar>(&self) -> BatchNormState<U> {
        BatchNormState {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            running_mean: self.running_mean.cast(),
            running_var: self.running_var.cast(),
            momentum: U::from_f64_lossy(self.momentum.to_f64_lossy()),
            eps: U::from_f64_lossy(self.eps.to_f64_lossy()),
        }
    }
}

pub(crate) fn check_channels<T: Scalar>(input: &Tensor<T>, gamma: &Tensor<T>) -> Result<()> {
    ensure_dim("batch_norm", "channels", input.shape().c, gamma.len())?;
    let s = input.shape();
    if s.n * s.plane() == 0 {
        return Err(Error::invalid("batch_norm needs a nonzero batch x spatial extent"));
    }
    Ok(())
}

/// Saved forward quantities for the training-mode backward pass.
#[derive(Clone, Debug)]
pub(crate) struct TrainCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Training-mode normalization with batch statistics.
pub(crate) fn forward_train<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, TrainCache<T>, BatchStats<T>)> {
    check_channels(input, gamma)?;
    let s = input.shape();
    let count = s.n * s.plane();
    let m = T::from_usize(count).expect("count fits");
    let mut mean = vec![T::zero(); s.c];
    let mut var = vec![T::zero(); s.c];
    for c in 0..s.c {
        let mut acc = T::zero();
        for n in 0..s.n {
            acc += input.plane(n, c).iter().copied().sum::<T>();
        }
        mean[c] = acc / m;
        let mut sq = T::zero();
        for n in 0..s.n {
            sq += input
                .plane(n, c)
                .iter()
                .map(|&v| (v - mean[c]) * (v - mean[c]))
                .sum::<T>();
        }
        var[c] = sq / m;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(s);
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let (mu, is, g, b) = (mean[c], inv_std[c], gamma.data()[c], beta.data()[c]);
            let src = input.plane(n, c);
            for (xh, &v) in xhat.plane_mut(n, c).iter_mut().zip(src) {
                *xh = (v - mu) * is;
            }
            for (o, &v) in out.plane_mut(n, c).iter_mut().zip(xhat.plane(n, c)) {
                *o = g * v + b;
            }
        }
    }
    let unbiased = if count > 1 {
        let corr = m / (m - T::one());
        var.iter().map(|&v| v * corr).collect()
    } else {
        var
    };
    Ok((out, TrainCache { xhat, inv_std }, BatchStats { mean, var: unbiased }))
}

/// Gradients `(input, gamma, beta)` of training-mode normalization.
pub(crate) fn backward_train<T: Scalar>(
    grad_out: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &TrainCache<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = grad_out.shape();
    let m = T::from_usize(s.n * s.plane()).expect("count fits");
    let mut dgamma = Tensor::zeros(gamma.shape());
    let mut dbeta = Tensor::zeros(gamma.shape());
    let mut dx = Tensor::zeros(s);
    for c in 0..s.c {
        let (mut sum_g, mut sum_gx) = (T::zero(), T::zero());
        for n in 0..s.n {
            for (&g, &xh) in grad_out.plane(n, c).iter().zip(cache.xhat.plane(n, c)) {
                sum_g += g;
                sum_gx += g * xh;
            }
        }
        dbeta.data_mut()[c] = sum_g;
        dgamma.data_mut()[c] = sum_gx;
        let scale = gamma.data()[c] * cache.inv_std[c] / m;
        for n in 0..s.n {
            let xh = cache.xhat.plane(n, c);
            let g = grad_out.plane(n, c);
            for ((d, &gv), &xv) in dx.plane_mut(n, c).iter_mut().zip(g).zip(xh) {
                *d = scale * (m * gv - sum_g - xv * sum_gx);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Per-channel `(scale, shift)` so that eval output is `scale * x + shift`.
pub(crate) fn eval_affine<T: Scalar>(
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
    eps: T,
) -> (Vec<T>, Vec<T>) {
    let mut scale = Vec::with_capacity(gamma.len());
    let mut shift = Vec::with_capacity(gamma.len());
    for c in 0..gamma.len() {
        let s = gamma.data()[c] / (var.data()[c] + eps).sqrt();
        scale.push(s);
        shift.push(beta.data()[c] - s * mean.data()[c]);
    }
    (scale, shift)
}

pub(crate) fn apply_affine<T: Scalar>(input: &Tensor<T>, scale: &[T], shift: &[T]) -> Tensor<T> {
    let s = input.shape();
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            for (o, &v) in out.plane_mut(n, c).iter_mut().zip(input.plane(n, c)) {
                *o = scale[c] * v + shift[c];
            }
        }
    }
    out
}

/// Normalizes `input` with `state`. In train mode batch statistics are used
/// and folded into the running estimates; in eval mode the running
/// statistics are applied unchanged.
pub fn batch_norm<T: Scalar>(input: &Tensor<T>, state: &mut BatchNormState<T>, mode: Mode) -> Result<Tensor<T>> {
    match mode {
        Mode::Train => {
            let (out, _, stats) = forward_train(input, &state.gamma, &state.beta, state.eps)?;
            state.absorb(&stats);
            Ok(out)
        }
        Mode::Eval => {
            check_channels(input, &state.gamma)?;
            let (scale, shift) = eval_affine(
                &state.gamma,
                &state.beta,
                &state.running_mean,
                &state.running_var,
                state.eps,
            );
            Ok(apply_affine(input, &scale, &shift))
        }
    }
}
