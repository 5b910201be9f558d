//! Image containers and conversions.
//!
//! Images are channel-first `(3, H, W)` arrays. Three value ranges appear in
//! the crate: 8-bit storage (`u8`), the model range `[-1, 1]` that the
//! diffusion process and networks operate in, and the unit range `[0, 1]`
//! used by the quality metrics.

use std::path::Path;

use ndarray::{Array2, Array3, ArrayView3, Zip};

use crate::error::{ensure, Error, Result};

/// Model-range image, shape `(3, H, W)`.
pub type Image = Array3<f32>;

/// 8-bit image, shape `(3, H, W)`.
pub type ByteImage = Array3<u8>;

/// Affine map `[0, 255] -> [-1, 1]`.
pub fn normalize(img: &ByteImage) -> Image {
    img.mapv(|v| v as f32 / 127.5 - 1.0)
}

/// Inverse of [`normalize`], clamping out-of-range values and rounding to the nearest byte.
pub fn denormalize(img: &Image) -> ByteImage {
    img.mapv(|v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8)
}

/// Model range `[-1, 1]` to unit range `[0, 1]`.
pub fn to_unit(img: &Image) -> Image {
    img.mapv(|v| (v + 1.0) * 0.5)
}

pub fn clamp_model_range(img: &mut Image) {
    img.mapv_inplace(|v| v.clamp(-1.0, 1.0));
}

/// ITU-R BT.601 luma of a 3-channel image.
pub fn luminance(img: ArrayView3<'_, f32>) -> Array2<f32> {
    let (_, h, w) = img.dim();
    let mut out = Array2::zeros((h, w));
    Zip::from(&mut out)
        .and(&img.index_axis(ndarray::Axis(0), 0))
        .and(&img.index_axis(ndarray::Axis(0), 1))
        .and(&img.index_axis(ndarray::Axis(0), 2))
        .for_each(|y, &r, &g, &b| *y = 0.299 * r + 0.587 * g + 0.114 * b);
    out
}

pub fn ensure_same_shape(a: &Image, b: &Image, what: &str) -> Result<()> {
    ensure!(
        a.dim() == b.dim(),
        InvalidArgument,
        "{what}: shape mismatch {:?} vs {:?}",
        a.dim(),
        b.dim()
    );
    Ok(())
}

/// Per-channel mean colour.
pub fn mean_color(img: &Image) -> [f32; 3] {
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        *o = img.index_axis(ndarray::Axis(0), c).mean().unwrap_or(0.0);
    }
    out
}

pub fn read_png(path: &Path) -> Result<ByteImage> {
    let img = image::open(path)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = px[c];
        }
    }
    Ok(out)
}

pub fn write_png(path: &Path, img: &ByteImage) -> Result<()> {
    let (c, h, w) = img.dim();
    ensure!(c == 3, InvalidArgument, "expected 3 channels, got {c}");
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        for ch in 0..3 {
            px[ch] = img[[ch, y as usize, x as usize]];
        }
    }
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}
