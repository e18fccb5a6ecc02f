//! Lossless 8-bit PNG storage of (3, H, W) images and binary masks.

use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat, RgbImage};

use objectcompose_core::mask::ObjectMask;
use objectcompose_core::tensor::Tensor;
use objectcompose_core::toy::scenes::{from_u8, to_u8};

use crate::error::{write_atomic, Error, IoContext, Result};

fn shape_of(img: &Tensor<f32>) -> Result<(usize, usize)> {
    match img.shape() {
        [3, h, w] => Ok((*h, *w)),
        s => Err(Error::Invalid(format!("expected a (3, H, W) image, got {s:?}"))),
    }
}

/// PNG bytes of an image; values are rounded to the nearest 8-bit level.
pub fn encode_png(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w) = shape_of(img)?;
    let d = img.data();
    let hw = h * w;
    let buf = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([0, 1, 2].map(|c| to_u8(d[c * hw + i] as f64)))
    });
    let mut out = Vec::new();
    buf.write_to(&mut Cursor::new(&mut out), ImageFormat::Png)
        .map_err(|e| Error::Invalid(format!("png encoding failed: {e}")))?;
    Ok(out)
}

pub fn save_png(path: &Path, img: &Tensor<f32>) -> Result<()> {
    write_atomic(path, &encode_png(img)?)
}

pub fn load_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).at(path)?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + i] = from_u8(p[c]);
        }
    }
    Ok(Tensor::from_vec(&[3, h, w], data)?)
}

/// Image as stored on disk: every value snapped to its 8-bit level.
pub fn quantized(img: &Tensor<f32>) -> Tensor<f32> {
    img.map(|v| from_u8(to_u8(v as f64)))
}

pub fn save_mask_png(path: &Path, mask: &ObjectMask) -> Result<()> {
    let w = mask.width();
    let buf = GrayImage::from_fn(w as u32, mask.height() as u32, |x, y| {
        image::Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }])
    });
    let mut out = Vec::new();
    buf.write_to(&mut Cursor::new(&mut out), ImageFormat::Png)
        .map_err(|e| Error::Invalid(format!("png encoding failed: {e}")))?;
    write_atomic(path, &out)
}

pub fn load_mask_png(path: &Path) -> Result<ObjectMask> {
    let img = image::open(path).at(path)?.into_luma8();
    let bits = img.pixels().map(|p| p[0] >= 128).collect();
    Ok(ObjectMask::new(img.height() as usize, img.width() as usize, bits)?)
}
