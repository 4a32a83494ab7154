//! Training losses and the recursive-supervision objective.

use std::sync::Arc;

use crate::autograd::{gradient_l1_value, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Sum of squared differences.
pub fn loss_mse<T: Scalar>(truth: &Tensor<T>, estimate: &Tensor<T>) -> Result<f64> {
    truth.shape().ensure_eq("loss_mse", &estimate.shape())?;
    Ok(truth
        .data()
        .iter()
        .zip(estimate.data())
        .map(|(&a, &b)| {
            let d = a.to_f64_lossy() - b.to_f64_lossy();
            d * d
        })
        .sum())
}

/// L1 discrepancy between forward-difference image gradients, both directions.
pub fn loss_grad<T: Scalar>(truth: &Tensor<T>, estimate: &Tensor<T>) -> Result<f64> {
    truth.shape().ensure_eq("loss_grad", &estimate.shape())?;
    let a: Tensor<f64> = estimate.cast();
    let b: Tensor<f64> = truth.cast();
    gradient_l1_value(&a, &b)
}

/// Weights and balance of the recursive objective.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveWeights<'a> {
    pub kappa: &'a [f64],
    pub tau: f64,
}

fn check_lengths(estimates: usize, kappa: &[f64]) -> Result<()> {
    if estimates != kappa.len() || estimates == 0 {
        return Err(Error::invalid(format!(
            "objective needs one kappa per step: {} estimates, {} weights",
            estimates,
            kappa.len()
        )));
    }
    Ok(())
}

/// Batch mean of `sum_t kappa_t (mse_t + tau * grad_t) / S`, each loss
/// divided by the per-sample element count.
pub fn objective<T: Scalar>(truth: &Tensor<T>, estimates: &[Tensor<T>], w: &ObjectiveWeights) -> Result<f64> {
    check_lengths(estimates.len(), w.kappa)?;
    let s = truth.shape();
    let denom = (s.n * s.sample() * estimates.len()) as f64;
    let mut total = 0.0;
    for (est, &k) in estimates.iter().zip(w.kappa) {
        let mut term = loss_mse(truth, est)?;
        if w.tau != 0.0 {
            term += w.tau * loss_grad(truth, est)?;
        }
        total += k * term;
    }
    Ok(total / denom)
}

/// Records [`objective`] on a graph.
pub fn objective_graph<T: Scalar>(
    g: &mut Graph<T>,
    truth: &Arc<Tensor<T>>,
    estimates: &[Var],
    w: &ObjectiveWeights,
) -> Result<Var> {
    check_lengths(estimates.len(), w.kappa)?;
    let s = truth.shape();
    let denom = (s.n * s.sample() * estimates.len()) as f64;
    let mut total: Option<Var> = None;
    for (&est, &k) in estimates.iter().zip(w.kappa) {
        if k == 0.0 {
            continue;
        }
        let mut term = g.squared_error(est, truth.clone())?;
        if w.tau != 0.0 {
            let lg = g.gradient_l1(est, truth.clone())?;
            let lg = g.scale(lg, T::from_f64_lossy(w.tau));
            term = g.add(term, lg)?;
        }
        let term = g.scale(term, T::from_f64_lossy(k / denom));
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => Err(Error::invalid("all kappa weights are zero")),
    }
}

/// `kappa_t = eta^(S - t)` written as exact decimal ratios, so `eta = 1.1`
/// gives `(1.4641, 1.331, 1.21, 1.1, 1.0)` for five steps.
pub fn geometric_kappa(tenths: u32, steps: usize) -> Vec<f64> {
    (1..=steps)
        .map(|t| {
            let e = (steps - t) as u32;
            tenths.pow(e) as f64 / 10u64.pow(e) as f64
        })
        .collect()
}
