//! PSNR and SSIM on boundary-cropped images with values in `[0, 1]`.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Border discarded before measuring.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Crop {
    /// Half the blur kernel side, rounded down.
    Auto,
    Pixels(usize),
}

impl Crop {
    pub fn resolve(self, kernel_side: Option<usize>) -> usize {
        match self {
            Crop::Auto => kernel_side.map_or(0, |s| s / 2),
            Crop::Pixels(p) => p,
        }
    }
}

impl std::str::FromStr for Crop {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(Crop::Auto);
        }
        s.parse()
            .map(Crop::Pixels)
            .map_err(|_| Error::invalid(format!("crop must be `auto` or a pixel count, got `{s}`")))
    }
}

fn cropped<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    crop: usize,
    op: &'static str,
) -> Result<(Tensor<f64>, Tensor<f64>)> {
    a.shape().ensure_eq(op, &b.shape())?;
    let s = a.shape();
    if 2 * crop >= s.h || 2 * crop >= s.w {
        return Err(Error::invalid(format!(
            "{op}: crop {crop} leaves nothing of a {}x{} image",
            s.h, s.w
        )));
    }
    let (h, w) = (s.h - 2 * crop, s.w - 2 * crop);
    Ok((a.crop(crop, crop, h, w)?.cast(), b.crop(crop, crop, h, w)?.cast()))
}

/// `10 log10(1 / mse)` over all channels of the cropped region; identical
/// images give `f64::INFINITY`.
pub fn psnr<T: Scalar>(truth: &Tensor<T>, estimate: &Tensor<T>, crop: usize) -> Result<f64> {
    let (a, b) = cropped(truth, estimate, crop, "psnr")?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let taps: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Separable valid-mode filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| taps[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| taps[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean local SSIM with an 11x11 Gaussian window, per channel then averaged.
pub fn ssim<T: Scalar>(truth: &Tensor<T>, estimate: &Tensor<T>, crop: usize) -> Result<f64> {
    let (a, b) = cropped(truth, estimate, crop, "ssim")?;
    let s = a.shape();
    if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim: cropped region {}x{} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window",
            s.h, s.w
        )));
    }
    let taps = gaussian_window();
    let mut total = 0.0;
    for n in 0..s.n {
        for c in 0..s.c {
            let (x, y) = (a.plane(n, c), b.plane(n, c));
            let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
            let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
            let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
            let f = |p: &[f64]| filter_valid(p, s.h, s.w, &taps);
            let (mx, my, exx, eyy, exy) = (f(x), f(y), f(&xx), f(&yy), f(&xy));
            let mut sum = 0.0;
            for i in 0..mx.len() {
                let (ux, uy) = (mx[i], my[i]);
                let vx = exx[i] - ux * ux;
                let vy = eyy[i] - uy * uy;
                let cov = exy[i] - ux * uy;
                sum += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
            }
            total += sum / mx.len() as f64;
        }
    }
    Ok(total / (s.n * s.c) as f64)
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct ImageScore {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    pub crop: usize,
}

/// Per-image scores and their means.
#[derive(Clone, Debug, PartialEq, Default, serde::Serialize)]
pub struct EvalReport {
    pub images: Vec<ImageScore>,
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

impl EvalReport {
    pub fn push(
        &mut self,
        name: impl Into<String>,
        truth: &Tensor<f64>,
        estimate: &Tensor<f64>,
        crop: usize,
    ) -> Result<()> {
        self.images.push(ImageScore {
            name: name.into(),
            psnr: psnr(truth, estimate, crop)?,
            ssim: ssim(truth, estimate, crop)?,
            crop,
        });
        Ok(())
    }

    pub fn mean_psnr(&self) -> f64 {
        self.images.iter().map(|s| s.psnr).sum::<f64>() / self.images.len() as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.images.iter().map(|s| s.ssim).sum::<f64>() / self.images.len() as f64
    }

    /// Per-image rows followed by a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image,psnr,ssim,crop\n");
        for s in &self.images {
            let _ = writeln!(out, "{},{},{:.6},{}", s.name, fmt_db(s.psnr), s.ssim, s.crop);
        }
        let _ = writeln!(out, "mean,{},{:.6},", fmt_db(self.mean_psnr()), self.mean_ssim());
        out
    }

    pub fn summary(&self) -> String {
        let width = self.images.iter().map(|s| s.name.len()).max().unwrap_or(4).max(5);
        let mut out = format!("{:<width$}  {:>9}  {:>7}\n", "image", "PSNR dB", "SSIM");
        for s in &self.images {
            let _ = writeln!(out, "{:<width$}  {:>9}  {:>7.4}", s.name, fmt_db(s.psnr), s.ssim);
        }
        let _ = writeln!(
            out,
            "{:<width$}  {:>9}  {:>7.4}",
            "mean",
            fmt_db(self.mean_psnr()),
            self.mean_ssim()
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn psnr_examples() {
        let a = Tensor::full(Shape::new(1, 3, 16, 16), 0.3);
        assert_eq!(psnr(&a, &a, 0).unwrap(), f64::INFINITY);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b, 2).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &b, 8).is_err());
    }

    #[test]
    fn ssim_identity_is_exactly_one() {
        let x = crate::degrade::synthetic_scene(24, 30, 3);
        assert_eq!(ssim(&x, &x, 0).unwrap(), 1.0);
        assert_eq!(ssim(&x, &x, 4).unwrap(), 1.0);
        assert!(ssim(&x, &x, 7).is_err());
    }

    #[test]
    fn ssim_of_inverted_halves_is_low() {
        let x = Tensor::from_fn(Shape::new(1, 1, 32, 32), |_, _, _, c| if c < 16 { 0.0 } else { 1.0 });
        let inv = x.map(|v| 1.0 - v);
        assert!(ssim(&x, &inv, 0).unwrap() < 0.1);
    }

    #[test]
    fn window_is_normalized_and_symmetric() {
        let w = gaussian_window();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(w[0], w[10]);
        assert!(w[5] > w[4]);
    }

    #[test]
    fn crop_parsing_and_auto() {
        assert_eq!("auto".parse::<Crop>().unwrap(), Crop::Auto);
        assert_eq!("7".parse::<Crop>().unwrap(), Crop::Pixels(7));
        assert!("x".parse::<Crop>().is_err());
        assert_eq!(Crop::Auto.resolve(Some(21)), 10);
        assert_eq!(Crop::Auto.resolve(None), 0);
        assert_eq!(Crop::Pixels(3).resolve(Some(41)), 3);
    }

    #[test]
    fn report_means_and_csv() {
        let a = Tensor::full(Shape::new(1, 3, 16, 16), 0.5);
        let mut r = EvalReport::default();
        r.push("a", &a, &a.map(|v| v + 0.1), 0).unwrap();
        r.push("b", &a, &a.map(|v| v + 0.01), 0).unwrap();
        assert!((r.mean_psnr() - 30.0).abs() < 1e-9);
        let csv = r.to_csv();
        assert!(csv.starts_with("image,psnr,ssim,crop\na,20.0000,"));
        assert!(csv.lines().last().unwrap().starts_with("mean,30.0000,"));
        assert!(r.summary().contains("mean"));
    }
}
