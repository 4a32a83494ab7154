//! The blur operator `A` and its adjoint.
//!
//! `A x = k * x` with replicate (edge-clamp) padding, so every output pixel
//! sees a full kernel footprint. `A` factors as a valid convolution `V`
//! applied to the padding map `P`; the adjoint is `P^T V^T`, where `V^T`
//! scatters with the kernel into the padded grid and `P^T` folds the border
//! back onto the clamped edge pixels.

use crate::degrade::Kernel;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// The linear forward model applied to an estimate.
#[derive(Clone, Debug, PartialEq)]
pub enum Degradation {
    /// Convolution with a blur kernel.
    Blur(Kernel),
    /// `A = I`: pure denoising.
    Identity,
}

impl Degradation {
    pub fn kernel(&self) -> Option<&Kernel> {
        match self {
            Degradation::Blur(k) => Some(k),
            Degradation::Identity => None,
        }
    }

    pub fn apply<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Degradation::Blur(k) => apply_a(x, k),
            Degradation::Identity => Ok(x.clone()),
        }
    }

    pub fn apply_adjoint<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Degradation::Blur(k) => apply_at(x, k),
            Degradation::Identity => Ok(x.clone()),
        }
    }

    /// `A^T (A x - y)`; for [`Degradation::Identity`] this is `x - y`.
    pub fn fidelity_gradient<T: Scalar>(&self, x: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
        x.shape().ensure_eq("fidelity_gradient", &y.shape())?;
        match self {
            Degradation::Blur(k) => fidelity_gradient(x, y, k),
            Degradation::Identity => x.sub(y),
        }
    }

    /// Fitting error `||y - A x||^2`.
    pub fn fitting_error<T: Scalar>(&self, x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
        let r = self.apply(x)?.sub(y)?;
        Ok(r.data().iter().map(|v| v.to_f64_lossy().powi(2)).sum())
    }

    /// Margin discarded by boundary-cropped metrics.
    pub fn crop_margin(&self) -> usize {
        self.kernel().map_or(0, Kernel::radius)
    }
}

fn check_fits<T: Scalar>(x: &Tensor<T>, k: &Kernel) -> Result<()> {
    let s = x.shape();
    if k.side() > s.h || k.side() > s.w {
        return Err(Error::KernelTooLarge {
            kernel: k.side(),
            height: s.h,
            width: s.w,
        });
    }
    Ok(())
}

fn pad_replicate<T: Scalar>(src: &[T], h: usize, w: usize, r: usize, dst: &mut [T]) {
    let pw = w + 2 * r;
    for py in 0..h + 2 * r {
        let sy = py.saturating_sub(r).min(h - 1);
        let srow = &src[sy * w..(sy + 1) * w];
        let drow = &mut dst[py * pw..(py + 1) * pw];
        drow[..r].fill(srow[0]);
        drow[r..r + w].copy_from_slice(srow);
        drow[r + w..].fill(srow[w - 1]);
    }
}

/// Kernel taps in correlation order (rotated by 180 degrees), cast to `T`.
fn correlation_taps<T: Scalar>(k: &Kernel) -> Vec<T> {
    k.taps().iter().rev().map(|&v| T::from_f64_lossy(v)).collect()
}

/// `A x`: blur every plane of `x` with `k`.
pub fn apply_a<T: Scalar>(x: &Tensor<T>, k: &Kernel) -> Result<Tensor<T>> {
    check_fits(x, k)?;
    let s = x.shape();
    let (h, w, side, r) = (s.h, s.w, k.side(), k.radius());
    let (ph, pw) = (h + 2 * r, w + 2 * r);
    let taps = correlation_taps::<T>(k);
    let mut padded = vec![T::zero(); ph * pw];
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            pad_replicate(x.plane(n, c), h, w, r, &mut padded);
            let dst = out.plane_mut(n, c);
            for a in 0..side {
                for b in 0..side {
                    let kv = taps[a * side + b];
                    if kv == T::zero() {
                        continue;
                    }
                    for i in 0..h {
                        let src = &padded[(i + a) * pw + b..(i + a) * pw + b + w];
                        for (o, &p) in dst[i * w..(i + 1) * w].iter_mut().zip(src) {
                            *o += kv * p;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `A^T z`: the exact transpose of [`apply_a`] under replicate padding.
///
/// Away from the border this is convolution with the flipped kernel.
pub fn apply_at<T: Scalar>(z: &Tensor<T>, k: &Kernel) -> Result<Tensor<T>> {
    check_fits(z, k)?;
    let s = z.shape();
    let (h, w, side, r) = (s.h, s.w, k.side(), k.radius());
    let (ph, pw) = (h + 2 * r, w + 2 * r);
    let taps = correlation_taps::<T>(k);
    let mut padded = vec![T::zero(); ph * pw];
    let mut rows = vec![T::zero(); ph * w];
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = z.plane(n, c);
            padded.fill(T::zero());
            // V^T: scatter
            for a in 0..side {
                for b in 0..side {
                    let kv = taps[a * side + b];
                    if kv == T::zero() {
                        continue;
                    }
                    for i in 0..h {
                        let dst = &mut padded[(i + a) * pw + b..(i + a) * pw + b + w];
                        for (d, &v) in dst.iter_mut().zip(&src[i * w..(i + 1) * w]) {
                            *d += kv * v;
                        }
                    }
                }
            }
            // P^T: fold columns, then rows
            for py in 0..ph {
                let prow = &padded[py * pw..(py + 1) * pw];
                let row = &mut rows[py * w..(py + 1) * w];
                row.copy_from_slice(&prow[r..r + w]);
                for &v in &prow[..r] {
                    row[0] += v;
                }
                for &v in &prow[r + w..] {
                    row[w - 1] += v;
                }
            }
            let dst = out.plane_mut(n, c);
            dst.copy_from_slice(&rows[r * w..(r + h) * w]);
            for py in 0..r {
                for (d, &v) in dst[..w].iter_mut().zip(&rows[py * w..(py + 1) * w]) {
                    *d += v;
                }
            }
            for py in r + h..ph {
                for (d, &v) in dst[(h - 1) * w..].iter_mut().zip(&rows[py * w..(py + 1) * w]) {
                    *d += v;
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of `1/2 ||y - A x||^2`: `A^T (A x - y)`.
pub fn fidelity_gradient<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, k: &Kernel) -> Result<Tensor<T>> {
    x.shape().ensure_eq("fidelity_gradient", &y.shape())?;
    let residual = apply_a(x, k)?.sub(y)?;
    apply_at(&residual, k)
}
