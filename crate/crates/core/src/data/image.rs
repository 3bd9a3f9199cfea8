use std::path::Path;

use image::{DynamicImage, ImageReader, RgbImage};

use crate::error::{Error, Result};
use crate::ops::slice::{bracket, spatial_coord};
use crate::tensor::{Scalar, Tensor};

fn image_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Decodes an 8- or 16-bit RGB image (binary PPM or PNG) into `H×W×3`
/// values in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let img = reader.decode().map_err(|e| image_err(path, e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = match img {
        DynamicImage::ImageRgb8(buf) => buf.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        DynamicImage::ImageRgb16(buf) => buf.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect(),
        DynamicImage::ImageRgba8(buf) => buf
            .into_raw()
            .chunks_exact(4)
            .flat_map(|p| p[..3].iter().map(|&v| v as f32 / 255.0))
            .collect(),
        DynamicImage::ImageRgba16(buf) => buf
            .into_raw()
            .chunks_exact(4)
            .flat_map(|p| p[..3].iter().map(|&v| v as f32 / 65535.0))
            .collect(),
        DynamicImage::ImageLuma8(_)
        | DynamicImage::ImageLuma16(_)
        | DynamicImage::ImageLumaA8(_)
        | DynamicImage::ImageLumaA16(_) => {
            return Err(image_err(path, "grayscale images are not supported, expected RGB"))
        }
        other => return Err(image_err(path, format!("unsupported pixel format {:?}", other.color()))),
    };
    Tensor::new(&[h, w, 3], data)
}

/// Rounds half up after clamping to `[0, 1]`: `0.5 → 128`, `1.0 → 255`.
pub fn quantize<T: Scalar>(v: T) -> u8 {
    let v = v.as_f64().clamp(0.0, 1.0);
    (v * 255.0 + 0.5).floor() as u8
}

/// Writes an `H×W×3` image as 8-bit RGB; the container follows the file
/// extension (`.ppm` or `.png`).
pub fn save_image<T: Scalar>(img: &Tensor<T>, path: &Path) -> Result<()> {
    let &[h, w, 3] = img.shape() else {
        return Err(image_err(path, format!("expected H×W×3, got {:?}", img.shape())));
    };
    let bytes: Vec<u8> = img.data().iter().map(|&v| quantize(v)).collect();
    let buf = RgbImage::from_raw(w as u32, h as u32, bytes).expect("buffer length matches shape");
    buf.save(path).map_err(|e| image_err(path, e.to_string()))
}

/// Bilinear resize of `H×W×3` to `side×side×3` with center-aligned
/// sampling, clamped at the borders.
pub fn resize_to_lowres<T: Scalar>(img: &Tensor<T>, side: usize) -> Result<Tensor<T>> {
    let &[h, w, c] = img.shape() else {
        return Err(Error::shape("resize", format!("expected H×W×C, got {:?}", img.shape())));
    };
    if h < 2 || w < 2 || side == 0 {
        return Err(Error::shape("resize", format!("cannot resize {h}×{w} to {side}×{side}")));
    }
    let ys: Vec<_> = (0..side).map(|y| bracket(spatial_coord::<T>(y, side, h), h)).collect();
    let xs: Vec<_> = (0..side).map(|x| bracket(spatial_coord::<T>(x, side, w), w)).collect();
    let src = img.data();
    let at = |y: usize, x: usize, k: usize| src[(y * w + x) * c + k];
    let mut out = Vec::with_capacity(side * side * c);
    for by in &ys {
        for bx in &xs {
            for k in 0..c {
                let top = at(by.lo, bx.lo, k) * (T::one() - bx.frac) + at(by.lo, bx.hi, k) * bx.frac;
                let bottom = at(by.hi, bx.lo, k) * (T::one() - bx.frac) + at(by.hi, bx.hi, k) * bx.frac;
                out.push(top * (T::one() - by.frac) + bottom * by.frac);
            }
        }
    }
    Tensor::new(&[side, side, c], out)
}
