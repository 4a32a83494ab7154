//! 8-bit PNG input and output.

use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};

use crate::degrade::quantize8;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

/// Loads an image as a `1 x 3 x H x W` tensor in `[0, 1]`.
///
/// Gray images are replicated across the three channels; alpha is dropped.
pub fn load_rgb(path: &Path) -> Result<Tensor<f64>> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    Ok(from_dynamic(img))
}

fn from_dynamic(img: DynamicImage) -> Tensor<f64> {
    let gray = matches!(
        img,
        DynamicImage::ImageLuma8(_)
            | DynamicImage::ImageLumaA8(_)
            | DynamicImage::ImageLuma16(_)
            | DynamicImage::ImageLumaA16(_)
    );
    if gray {
        let g = img.to_luma8();
        let (w, h) = g.dimensions();
        let t = Tensor::from_fn(Shape::new(1, 1, h as usize, w as usize), |_, _, y, x| {
            g.get_pixel(x as u32, y as u32).0[0] as f64 / 255.0
        });
        t.replicate_channels(3).expect("single channel")
    } else {
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        Tensor::from_fn(Shape::new(1, 3, h as usize, w as usize), |_, c, y, x| {
            rgb.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0
        })
    }
}

fn to_u8<T: Scalar>(v: T) -> u8 {
    (quantize8(v.to_f64_lossy()) * 255.0).round() as u8
}

/// Writes sample 0 of a 1- or 3-channel tensor as an 8-bit PNG, clipping to `[0, 1]`.
pub fn save_png<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let s = t.shape();
    let (w, h) = (s.w as u32, s.h as u32);
    let result = match s.c {
        1 => GrayImage::from_fn(w, h, |x, y| image::Luma([to_u8(t.at(0, 0, y as usize, x as usize))])).save(path),
        3 => RgbImage::from_fn(w, h, |x, y| {
            image::Rgb([0, 1, 2].map(|c| to_u8(t.at(0, c, y as usize, x as usize))))
        })
        .save(path),
        c => return Err(Error::invalid(format!("cannot write a {c}-channel tensor as PNG"))),
    };
    result.map_err(|e| image_err(path, e))
}
