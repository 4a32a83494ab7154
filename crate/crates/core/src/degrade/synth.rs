use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::degrade::{gen_kernel, Degradation, Kernel, PROTOCOL_SIDES};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// One sample: sharp image, forward model, degraded observation.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub truth: Tensor<f64>,
    pub degradation: Degradation,
    pub observed: Tensor<f64>,
    pub noise_sigma: f64,
    /// Seed that produced the kernel and noise.
    pub seed: u64,
}

impl Triplet {
    pub fn kernel(&self) -> Option<&Kernel> {
        self.degradation.kernel()
    }
}

/// 8-bit quantization of a value clipped to `[0, 1]`.
pub fn quantize8(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Adds i.i.d. `N(0, sigma^2)` noise to every element, channels independently.
pub fn add_noise(x: &Tensor<f64>, sigma: f64, rng: &mut impl Rng) -> Result<Tensor<f64>> {
    if sigma.is_nan() || sigma < 0.0 {
        return Err(Error::invalid(format!("noise sigma must be >= 0, got {sigma}")));
    }
    let mut out = x.clone();
    for v in out.data_mut() {
        let n: f64 = StandardNormal.sample(rng);
        *v += sigma * n;
    }
    Ok(out)
}

/// `y = quantize8(clip(A x + n))` with seeded Gaussian noise.
pub fn degrade_with(x: &Tensor<f64>, degradation: Degradation, sigma: f64, seed: u64) -> Result<Triplet> {
    if sigma.is_nan() || sigma < 0.0 {
        return Err(Error::invalid(format!("noise sigma must be >= 0, got {sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blurred = degradation.apply(x)?;
    let noisy = add_noise(&blurred, sigma, &mut rng)?;
    Ok(Triplet {
        truth: x.clone(),
        degradation,
        observed: noisy.map(quantize8),
        noise_sigma: sigma,
        seed,
    })
}

/// Blur with `k`, add noise of std `sigma`, clip and quantize.
pub fn degrade(x: &Tensor<f64>, k: &Kernel, sigma: f64, seed: u64) -> Result<Triplet> {
    degrade_with(x, Degradation::Blur(k.clone()), sigma, seed)
}

/// Parameters of the corpus synthesis protocol.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthConfig {
    pub kernels_per_image: usize,
    pub sigma_lo: f64,
    pub sigma_hi: f64,
    pub sizes: Vec<usize>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            kernels_per_image: 5,
            sigma_lo: 0.003,
            sigma_hi: 0.015,
            sizes: PROTOCOL_SIDES.to_vec(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernels_per_image == 0 {
            return Err(Error::invalid("kernels_per_image must be positive"));
        }
        if !(self.sigma_lo >= 0.0 && self.sigma_lo <= self.sigma_hi) {
            return Err(Error::invalid(format!(
                "sigma range [{}, {}] is invalid",
                self.sigma_lo, self.sigma_hi
            )));
        }
        if self.sizes.is_empty() {
            return Err(Error::invalid("no kernel sizes given"));
        }
        if let Some(s) = self.sizes.iter().find(|s| !PROTOCOL_SIDES.contains(s)) {
            return Err(Error::invalid(format!(
                "kernel size {s} is not one of {PROTOCOL_SIDES:?}"
            )));
        }
        Ok(())
    }
}

/// Generates `kernels_per_image` triplets per truth image.
///
/// Kernel side is uniform over `sizes` and noise std uniform over
/// `[sigma_lo, sigma_hi]`; each triplet gets its own derived seed.
pub fn synth_dataset(truth_images: &[Tensor<f64>], cfg: &SynthConfig) -> Result<Vec<Triplet>> {
    cfg.validate()?;
    if truth_images.is_empty() {
        return Err(Error::invalid("no truth images to synthesize from"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(truth_images.len() * cfg.kernels_per_image);
    for x in truth_images {
        for _ in 0..cfg.kernels_per_image {
            let side = *cfg.sizes.choose(&mut rng).expect("sizes non-empty");
            let sigma = if cfg.sigma_hi > cfg.sigma_lo {
                rng.gen_range(cfg.sigma_lo..=cfg.sigma_hi)
            } else {
                cfg.sigma_lo
            };
            let seed: u64 = rng.gen();
            let k = gen_kernel(side, seed)?;
            out.push(degrade(x, &k, sigma, seed)?);
        }
    }
    Ok(out)
}

/// Procedural piecewise-smooth RGB scene, quantized to 8 bits.
///
/// Smooth color gradients overlaid with random rectangles, discs and
/// strokes give the mix of flat regions and sharp edges that deconvolution
/// benchmarks exercise.
pub fn synthetic_scene(h: usize, w: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let color = |rng: &mut ChaCha8Rng| -> [f64; 3] {
        let base: f64 = rng.gen_range(0.1..0.9);
        [0, 1, 2].map(|_| (base + rng.gen_range(-0.25..0.25)).clamp(0.0, 1.0))
    };
    let c0 = color(&mut rng);
    let c1 = color(&mut rng);
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let diag = ((h * h + w * w) as f64).sqrt();

    let mut img = vec![[0.0f64; 3]; h * w];
    for y in 0..h {
        for x in 0..w {
            let t = (((x as f64) * ca + (y as f64) * sa) / diag + 0.5).clamp(0.0, 1.0);
            img[y * w + x] = [0, 1, 2].map(|c| c0[c] * (1.0 - t) + c1[c] * t);
        }
    }

    let shapes = rng.gen_range(4..10);
    for _ in 0..shapes {
        let col = color(&mut rng);
        let cy = rng.gen_range(0.0..h as f64);
        let cx = rng.gen_range(0.0..w as f64);
        let ry = rng.gen_range(2.0..(h as f64 / 3.0).max(3.0));
        let rx = rng.gen_range(2.0..(w as f64 / 3.0).max(3.0));
        let kind = rng.gen_range(0..3);
        let (ta, tb): (f64, f64) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let inside = match kind {
                    0 => dy.abs() <= ry && dx.abs() <= rx,
                    1 => (dy / ry).powi(2) + (dx / rx).powi(2) <= 1.0,
                    // stroke: thin band along a random line through the center
                    _ => {
                        (dy * ta - dx * tb).abs() / (ta * ta + tb * tb).sqrt().max(1e-6) <= 1.5
                            && dy.abs() <= ry
                            && dx.abs() <= rx
                    }
                };
                if inside {
                    let shade = 1.0 + 0.15 * (dy / ry.max(1.0));
                    img[y * w + x] = [0, 1, 2].map(|c| (col[c] * shade).clamp(0.0, 1.0));
                }
            }
        }
    }

    Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| quantize8(img[y * w + x][c]))
}
