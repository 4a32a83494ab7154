//! Same-padded, stride-1 convolution and its transpose.
//!
//! Both operators lower to `im2col` + GEMM per batch sample. Convolution is
//! cross-correlation: `out[o][y][x] = sum w[o][i][ky][kx] * in[i][y+ky-p][x+kx-p]`.
//! The transposed convolution with the same weights is its exact adjoint.

use crate::error::{ensure_dim, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Geometry of a convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    pub transposed: bool,
}

impl ConvSpec {
    /// Stride-1 layer with size-preserving padding.
    pub fn same(in_channels: usize, out_channels: usize, kernel_size: usize) -> Self {
        ConvSpec {
            out_channels,
            in_channels,
            kernel_size,
            stride: 1,
            padding: kernel_size.saturating_sub(1) / 2,
            transposed: false,
        }
    }

    pub fn same_transposed(in_channels: usize, out_channels: usize, kernel_size: usize) -> Self {
        ConvSpec {
            transposed: true,
            ..Self::same(in_channels, out_channels, kernel_size)
        }
    }

    /// Expected weight shape. Transposed layers store `(in, out, k, k)`, so a
    /// transposed layer and the forward layer it is the adjoint of share one
    /// weight layout.
    pub fn weight_shape(&self) -> Shape {
        let k = self.kernel_size;
        if self.transposed {
            Shape::new(self.in_channels, self.out_channels, k, k)
        } else {
            Shape::new(self.out_channels, self.in_channels, k, k)
        }
    }

    pub fn bias_shape(&self) -> Shape {
        Shape::new(1, self.out_channels, 1, 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size % 2 == 0 || self.kernel_size == 0 {
            return Err(Error::invalid(format!(
                "kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        if self.stride != 1 {
            return Err(Error::invalid(format!(
                "only stride 1 is supported, got {}",
                self.stride
            )));
        }
        if self.padding != (self.kernel_size - 1) / 2 {
            return Err(Error::invalid(format!(
                "padding must be {} for a size-preserving {}x{} layer, got {}",
                (self.kernel_size - 1) / 2,
                self.kernel_size,
                self.kernel_size,
                self.padding
            )));
        }
        Ok(())
    }

    fn check(&self, input: Shape, weight: Shape, bias: Option<Shape>) -> Result<()> {
        self.validate()?;
        let want = self.weight_shape();
        let op = if self.transposed { "tconv2d" } else { "conv2d" };
        ensure_dim(op, "weight dim 0", weight.n, want.n)?;
        ensure_dim(op, "weight dim 1", weight.c, want.c)?;
        ensure_dim(op, "weight height", weight.h, want.h)?;
        ensure_dim(op, "weight width", weight.w, want.w)?;
        ensure_dim(op, "input channels", input.c, self.in_channels)?;
        if let Some(b) = bias {
            ensure_dim(op, "bias channels", b.c, self.out_channels)?;
            ensure_dim(op, "bias length", b.numel(), self.out_channels)?;
        }
        Ok(())
    }

    fn kk(&self) -> usize {
        self.kernel_size * self.kernel_size
    }
}

/// Valid output-column range `[x0, x1)` whose source column `x + d` is in `[0, w)`.
#[inline]
fn valid_span(w: usize, d: isize) -> (usize, usize) {
    let w = w as isize;
    let x0 = (-d).clamp(0, w);
    let x1 = (w - d).clamp(x0, w);
    (x0 as usize, x1 as usize)
}

/// Unfolds a `(c, h, w)` sample into a `(c*k*k, h*w)` patch matrix.
pub(crate) fn im2col<T: Scalar>(src: &[T], c: usize, h: usize, w: usize, k: usize, pad: usize, col: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &src[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad as isize;
                let dx = kx as isize - pad as isize;
                let (x0, x1) = valid_span(w, dx);
                for y in 0..h {
                    let out = &mut dst[y * w..(y + 1) * w];
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let srow = &plane[sy as usize * w..(sy as usize + 1) * w];
                    out[..x0].fill(T::zero());
                    out[x1..].fill(T::zero());
                    let s0 = (x0 as isize + dx) as usize;
                    out[x0..x1].copy_from_slice(&srow[s0..s0 + (x1 - x0)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: folds a patch matrix back, accumulating into `dst`.
pub(crate) fn col2im<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, k: usize, pad: usize, dst: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dst[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad as isize;
                let dx = kx as isize - pad as isize;
                let (x0, x1) = valid_span(w, dx);
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let drow = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let s0 = (x0 as isize + dx) as usize;
                    for (d, &v) in drow[s0..s0 + (x1 - x0)].iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

fn add_bias<T: Scalar>(out: &mut Tensor<T>, bias: Option<&Tensor<T>>) {
    if let Some(b) = bias {
        let s = out.shape();
        for n in 0..s.n {
            for c in 0..s.c {
                let bv = b.data()[c];
                out.plane_mut(n, c).iter_mut().for_each(|v| *v += bv);
            }
        }
    }
}

/// Per-channel sums over batch and space, shaped like a bias.
pub(crate) fn channel_sums<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let s = t.shape();
    let mut out = Tensor::zeros(Shape::new(1, s.c, 1, 1));
    for n in 0..s.n {
        for c in 0..s.c {
            out.data_mut()[c] += t.plane(n, c).iter().copied().sum::<T>();
        }
    }
    out
}

/// Multiplies `(rows x cols_in)` weights into patch matrices, sample by sample.
fn forward_core<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, spec: &ConvSpec) -> Tensor<T> {
    let s = input.shape();
    let (k, pad, hw) = (spec.kernel_size, spec.padding, s.plane());
    let rows_in = spec.in_channels * spec.kk();
    let mut out = Tensor::zeros(Shape::new(s.n, spec.out_channels, s.h, s.w));
    if spec.transposed {
        // out = col2im(W^T x); W stored (in, out*k*k)
        let rows_out = spec.out_channels * spec.kk();
        let mut col = vec![T::zero(); rows_out * hw];
        for n in 0..s.n {
            T::gemm(
                rows_out,
                spec.in_channels,
                hw,
                weight.data(),
                true,
                input.sample(n),
                false,
                T::zero(),
                &mut col,
            );
            col2im(&col, spec.out_channels, s.h, s.w, k, pad, out.sample_mut(n));
        }
    } else {
        let mut col = vec![T::zero(); rows_in * hw];
        for n in 0..s.n {
            im2col(input.sample(n), spec.in_channels, s.h, s.w, k, pad, &mut col);
            T::gemm(
                spec.out_channels,
                rows_in,
                hw,
                weight.data(),
                false,
                &col,
                false,
                T::zero(),
                out.sample_mut(n),
            );
        }
    }
    out
}

/// Same-padded 2-D convolution (cross-correlation).
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    if spec.transposed {
        return Err(Error::invalid("conv2d called with a transposed spec"));
    }
    spec.check(input.shape(), weight.shape(), bias.map(|b| b.shape()))?;
    let mut out = forward_core(input, weight, spec);
    add_bias(&mut out, bias);
    Ok(out)
}

/// Transposed convolution: the adjoint of [`conv2d`] with the same weights.
pub fn tconv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    if !spec.transposed {
        return Err(Error::invalid("tconv2d called with a non-transposed spec"));
    }
    spec.check(input.shape(), weight.shape(), bias.map(|b| b.shape()))?;
    let mut out = forward_core(input, weight, spec);
    add_bias(&mut out, bias);
    Ok(out)
}

/// Gradients of a convolution-family layer.
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Tensor<T>,
}

/// Backward pass for [`conv2d`] or [`tconv2d`] given the upstream gradient.
pub fn conv_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: &ConvSpec,
    need_input: bool,
    need_weight: bool,
) -> ConvGrads<T> {
    let s = input.shape();
    let (k, pad, hw) = (spec.kernel_size, spec.padding, s.plane());
    let bias = channel_sums(grad_out);

    // The adjoint of a layer is its mirrored twin with identical weights.
    let input_grad = need_input.then(|| {
        let twin = ConvSpec {
            in_channels: spec.out_channels,
            out_channels: spec.in_channels,
            transposed: !spec.transposed,
            ..*spec
        };
        forward_core(grad_out, weight, &twin)
    });

    let weight_grad = need_weight.then(|| {
        let mut gw = Tensor::zeros(weight.shape());
        if spec.transposed {
            // out = col2im(W^T x)  =>  dW = x * im2col(g)^T
            let rows = spec.out_channels * spec.kk();
            let mut col = vec![T::zero(); rows * hw];
            for n in 0..s.n {
                im2col(grad_out.sample(n), spec.out_channels, s.h, s.w, k, pad, &mut col);
                T::gemm(
                    spec.in_channels,
                    hw,
                    rows,
                    input.sample(n),
                    false,
                    &col,
                    true,
                    T::one(),
                    gw.data_mut(),
                );
            }
        } else {
            // out = W im2col(x)  =>  dW = g * im2col(x)^T
            let rows = spec.in_channels * spec.kk();
            let mut col = vec![T::zero(); rows * hw];
            for n in 0..s.n {
                im2col(input.sample(n), spec.in_channels, s.h, s.w, k, pad, &mut col);
                T::gemm(
                    spec.out_channels,
                    hw,
                    rows,
                    grad_out.sample(n),
                    false,
                    &col,
                    true,
                    T::one(),
                    gw.data_mut(),
                );
            }
        }
        gw
    });

    ConvGrads {
        input: input_grad,
        weight: weight_grad,
        bias,
    }
}
