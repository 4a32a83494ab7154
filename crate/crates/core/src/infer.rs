//! Running a trained optimizer until the fitting error stops changing.

use std::fmt::Write as _;
use std::sync::Arc;

use crate::batchnorm::Mode;
use crate::degrade::{Degradation, Kernel};
use crate::error::{Error, Result};
use crate::gdu::GduParams;
use crate::metrics::psnr;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Stop when `|phi_t - phi_{t-1}| / |phi_t - phi_0| < epsilon` or after
/// `max_iters` steps, with `phi(x) = ||y - A x||^2`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StopRule {
    pub epsilon: f64,
    pub max_iters: usize,
}

impl Default for StopRule {
    fn default() -> Self {
        StopRule {
            epsilon: 1e-3,
            max_iters: 30,
        }
    }
}

impl StopRule {
    /// Exactly `n` steps.
    pub fn fixed(n: usize) -> Self {
        StopRule {
            epsilon: 0.0,
            max_iters: n,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub enum StopReason {
    /// Relative change fell below epsilon.
    Converged,
    /// The fitting error equals its starting value.
    NoProgress,
    MaxIters,
    /// A step produced a non-finite value; the previous estimate is kept.
    NonFinite,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct TracePoint {
    pub t: usize,
    pub phi: f64,
    pub psnr: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Restoration<T> {
    /// Final estimate clipped to `[0, 1]`.
    pub estimate: Tensor<T>,
    /// Final estimate as produced by the last step.
    pub raw: Tensor<T>,
    pub phi0: f64,
    pub trace: Vec<TracePoint>,
    pub reason: StopReason,
}

impl<T> Restoration<T> {
    pub fn iterations(&self) -> usize {
        self.trace.len()
    }

    pub fn flagged(&self) -> bool {
        self.reason == StopReason::NonFinite
    }

    /// `t,phi,psnr_if_truth_given`, starting with `t = 0`.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("t,phi,psnr_if_truth_given\n");
        let _ = writeln!(out, "0,{},", self.phi0);
        for p in &self.trace {
            let psnr = p.psnr.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{}", p.t, p.phi, psnr);
        }
        out
    }
}

/// Optional ground truth and crop for PSNR in the trace.
#[derive(Clone, Copy, Debug)]
pub struct Reference<'a> {
    pub truth: &'a Tensor<f64>,
    pub crop: usize,
}

/// Eval-mode iterations from `x0` (the observation if `None`).
pub fn restore<T: Scalar>(
    params: &GduParams<T>,
    y: &Tensor<T>,
    degradation: &Degradation,
    x0: Option<&Tensor<T>>,
    rule: &StopRule,
    reference: Option<Reference>,
) -> Result<Restoration<T>> {
    if rule.max_iters == 0 {
        return Err(Error::invalid("the stop rule needs at least one iteration"));
    }
    if !(rule.epsilon >= 0.0) {
        return Err(Error::invalid("epsilon must be nonnegative"));
    }
    if !y.is_finite() {
        return Err(Error::NonFinite("observation contains non-finite values".into()));
    }
    if let Some(k) = degradation.kernel() {
        let s = y.shape();
        if k.side() > s.h || k.side() > s.w {
            return Err(Error::KernelTooLarge {
                kernel: k.side(),
                height: s.h,
                width: s.w,
            });
        }
    }
    let x0 = x0.unwrap_or(y);
    x0.shape().ensure_eq("restore", &y.shape())?;
    let ops: Arc<[Degradation]> = Arc::from(vec![degradation.clone()]);
    let phi0 = degradation.fitting_error(x0, y)?;
    let mut x = x0.clone();
    let mut prev = phi0;
    let mut trace = Vec::new();
    let mut reason = StopReason::MaxIters;
    for t in 1..=rule.max_iters {
        let next = params.step(&x, y, &ops, Mode::Eval)?;
        let phi = if next.is_finite() {
            degradation.fitting_error(&next, y)?
        } else {
            f64::NAN
        };
        if !phi.is_finite() {
            log::warn!(
                "step {t} produced non-finite values; keeping the estimate of step {}",
                t - 1
            );
            reason = StopReason::NonFinite;
            break;
        }
        let score = match reference {
            Some(r) => Some(psnr(r.truth, &next.clamp(T::zero(), T::one()).cast(), r.crop)?),
            None => None,
        };
        trace.push(TracePoint { t, phi, psnr: score });
        x = next;
        let progress = (phi - phi0).abs();
        if progress == 0.0 {
            reason = StopReason::NoProgress;
            break;
        }
        if (phi - prev).abs() / progress < rule.epsilon {
            reason = StopReason::Converged;
            break;
        }
        prev = phi;
    }
    Ok(Restoration {
        estimate: x.clamp(T::zero(), T::one()),
        raw: x,
        phi0,
        trace,
        reason,
    })
}

pub fn deconvolve<T: Scalar>(
    params: &GduParams<T>,
    y: &Tensor<T>,
    k: &Kernel,
    rule: &StopRule,
    reference: Option<Reference>,
) -> Result<Restoration<T>> {
    restore(params, y, &Degradation::Blur(k.clone()), None, rule, reference)
}

/// Runs with `A = I`, so the fidelity term becomes `x - y`.
pub fn denoise<T: Scalar>(
    params: &GduParams<T>,
    y: &Tensor<T>,
    rule: &StopRule,
    reference: Option<Reference>,
) -> Result<Restoration<T>> {
    restore(params, y, &Degradation::Identity, None, rule, reference)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::{gen_kernel, synthetic_scene};
    use crate::gdu::{init_params, Subnets, Topology};

    fn params() -> GduParams<f64> {
        init_params(
            Topology {
                channels: 3,
                features: 4,
                kernel_size: 5,
            },
            Subnets::default(),
            8,
        )
        .unwrap()
    }

    #[test]
    fn single_iteration_is_one_step() {
        let p = params();
        let k = gen_kernel(5, 1).unwrap();
        let y = Degradation::Blur(k.clone()).apply(&synthetic_scene(16, 16, 0)).unwrap();
        let r = deconvolve(&p, &y, &k, &StopRule::fixed(1), None).unwrap();
        let ops: Arc<[Degradation]> = Arc::from(vec![Degradation::Blur(k)]);
        assert_eq!(r.raw, p.step(&y, &y, &ops, Mode::Eval).unwrap());
        assert_eq!(r.iterations(), 1);
    }

    #[test]
    fn zeroed_d_stops_on_no_progress() {
        let mut p = params();
        p.d.zero_output_layer();
        let y = synthetic_scene(16, 16, 1);
        let r = deconvolve(&p, &y, &gen_kernel(5, 2).unwrap(), &StopRule::default(), None).unwrap();
        assert_eq!(r.reason, StopReason::NoProgress);
        assert_eq!(r.iterations(), 1);
        assert_eq!(r.raw, y);
    }

    #[test]
    fn trace_never_exceeds_max_iters() {
        let p = params();
        let y = synthetic_scene(16, 16, 2);
        let r = denoise(&p, &y, &StopRule::default(), None).unwrap();
        assert!(r.iterations() <= 30);
        let csv = r.trace_csv();
        assert!(csv.starts_with("t,phi,psnr_if_truth_given\n0,"));
        assert_eq!(csv.lines().count(), r.iterations() + 2);
    }

    #[test]
    fn estimate_is_clipped_but_raw_is_not() {
        let p = params();
        let y = synthetic_scene(16, 16, 3);
        let r = denoise(&p, &y, &StopRule::fixed(3), None).unwrap();
        assert!(r.estimate.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(r.estimate, r.raw.clamp(0.0, 1.0));
    }

    #[test]
    fn reference_adds_psnr() {
        let p = params();
        let x = synthetic_scene(16, 16, 4);
        let k = gen_kernel(5, 3).unwrap();
        let y = Degradation::Blur(k.clone()).apply(&x).unwrap();
        let r = deconvolve(&p, &y, &k, &StopRule::fixed(2), Some(Reference { truth: &x, crop: 2 })).unwrap();
        assert!(r.trace.iter().all(|t| t.psnr.is_some()));
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = params();
        let y = synthetic_scene(8, 8, 5);
        assert!(deconvolve(&p, &y, &gen_kernel(11, 0).unwrap(), &StopRule::default(), None).is_err());
        assert!(denoise(&p, &y, &StopRule::fixed(0), None).is_err());
        let nan = y.map(|_| f64::NAN);
        assert!(denoise(&p, &nan, &StopRule::default(), None).is_err());
    }
}
