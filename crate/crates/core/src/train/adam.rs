//! Adam with bias correction.

use crate::error::{ensure_dim, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Moment estimates and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> OptState<T> {
    /// Zero moments shaped like `params`.
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let m: Vec<Tensor<T>> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        OptState {
            v: m.clone(),
            m,
            step: 0,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPSILON,
        }
    }

    /// Applies one step in place. Returns `false`, touching nothing, when any
    /// gradient is non-finite.
    pub fn update(&mut self, params: Vec<&mut Tensor<T>>, grads: &[Tensor<T>], lr: f64) -> Result<bool> {
        ensure_dim("adam_update", "parameter count", grads.len(), self.m.len())?;
        ensure_dim("adam_update", "parameter count", params.len(), self.m.len())?;
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            p.shape().ensure_eq("adam_update", &g.shape())?;
            m.shape().ensure_eq("adam_update", &g.shape())?;
        }
        if !grads.iter().all(Tensor::is_finite) {
            return Ok(false);
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let c1 = T::from_f64_lossy(1.0 / (1.0 - self.beta1.powi(t)));
        let c2 = T::from_f64_lossy(1.0 / (1.0 - self.beta2.powi(t)));
        let lr = T::from_f64_lossy(lr);
        let eps = T::from_f64_lossy(self.eps);
        let one = T::one();
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((p, &g), (m, v)) in it {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let mhat = *m * c1;
                let vhat = *v * c2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn param(vals: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(Shape::new(1, 1, 1, vals.len()), vals.to_vec()).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut p = param(&[1.0, -2.0]);
        let mut opt = OptState::new([&p]);
        opt.update(vec![&mut p], &[param(&[0.0, 0.0])], 0.1).unwrap();
        assert_eq!(p, param(&[1.0, -2.0]));

        opt.update(vec![&mut p], &[param(&[0.5, 0.5])], 0.1).unwrap();
        let (m, v) = (opt.m[0].clone(), opt.v[0].clone());
        opt.update(vec![&mut p], &[param(&[0.0, 0.0])], 0.1).unwrap();
        assert!((opt.m[0].data()[0] - 0.9 * m.data()[0]).abs() < 1e-15);
        assert!((opt.v[0].data()[0] - 0.999 * v.data()[0]).abs() < 1e-15);
    }

    #[test]
    fn first_step_matches_closed_form() {
        let g = [0.3, -2.0, 1e-3];
        let mut p = param(&[0.0; 3]);
        let mut opt = OptState::new([&p]);
        opt.update(vec![&mut p], &[param(&g)], 0.01).unwrap();
        for (i, &gi) in g.iter().enumerate() {
            // mhat = g, vhat = g^2
            let want = -0.01 * gi / (gi.abs() + 1e-8);
            assert!((p.data()[i] - want).abs() < 1e-15, "{i}");
        }
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        let mut p = param(&[0.0, 0.0]);
        let mut opt = OptState::new([&p]);
        let g = param(&[0.7, -3.0]);
        let mut prev = p.clone();
        for _ in 0..2000 {
            prev = p.clone();
            opt.update(vec![&mut p], std::slice::from_ref(&g), 1e-3).unwrap();
        }
        for i in 0..2 {
            let step = (p.data()[i] - prev.data()[i]).abs();
            assert!((step - 1e-3).abs() < 1e-8, "{step}");
        }
    }

    #[test]
    fn non_finite_gradient_skips() {
        let mut p = param(&[1.0]);
        let mut opt = OptState::new([&p]);
        assert!(!opt.update(vec![&mut p], &[param(&[f64::NAN])], 0.1).unwrap());
        assert_eq!(opt.step, 0);
        assert_eq!(p, param(&[1.0]));
        assert!(opt.m[0].data()[0] == 0.0);
        assert!(opt.update(vec![&mut p], &[param(&[1.0, 2.0])], 0.1).is_err());
    }
}
