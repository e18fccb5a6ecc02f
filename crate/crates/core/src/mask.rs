//! Binary object masks: dilation, compositing and overlap.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, CoreError, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Binary H×W mask, `true` = object.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ObjectMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
    dilation_radius: usize,
}

impl ObjectMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return invalid(alloc::format!(
                "mask needs {} values, got {}",
                height * width,
                bits.len()
            ));
        }
        Ok(Self { height, width, bits, dilation_radius: 0 })
    }

    /// Rejects masks with no object pixels or no background pixels.
    pub fn require_separable(self) -> Result<Self> {
        if self.is_empty() {
            return Err(CoreError::UnsupportedImage("mask has no object pixels".into()));
        }
        if self.is_full() {
            return Err(CoreError::UnsupportedImage("mask covers the whole image".into()));
        }
        Ok(self)
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let bits = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self::new(height, width, bits)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn dilation_radius(&self) -> usize {
        self.dilation_radius
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn coverage(&self) -> f64 {
        self.count() as f64 / self.bits.len() as f64
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    pub fn is_full(&self) -> bool {
        self.bits.iter().all(|b| *b)
    }

    /// Mask as a (1, H, W) array of zeros and ones.
    pub fn to_tensor<F: Real>(&self) -> Tensor<F> {
        let data = self.bits.iter().map(|b| if *b { F::one() } else { F::zero() }).collect();
        Tensor::from_vec(&[1, self.height, self.width], data).expect("mask dims")
    }

    /// Average-pools to a coarser grid (fraction of object pixels per cell).
    pub fn downsample<F: Real>(&self, factor: usize) -> Result<Tensor<F>> {
        if factor == 0 || !self.height.is_multiple_of(factor) || !self.width.is_multiple_of(factor) {
            return invalid(alloc::format!("mask {}x{} not divisible by {factor}", self.height, self.width));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let norm = F::of((factor * factor) as f64);
        let mut out = vec![F::zero(); h * w];
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) {
                    out[(r / factor) * w + c / factor] += F::one();
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= norm);
        Tensor::from_vec(&[1, h, w], out)
    }
}

/// Morphological dilation with a (2r+1)×(2r+1) square structuring element.
pub fn dilate_mask(mask: &ObjectMask, radius: usize) -> ObjectMask {
    if radius == 0 {
        return mask.clone();
    }
    let (h, w) = (mask.height, mask.width);
    let mut rows = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            let lo = c.saturating_sub(radius);
            let hi = (c + radius).min(w - 1);
            rows[r * w + c] = (lo..=hi).any(|k| mask.bits[r * w + k]);
        }
    }
    let mut bits = vec![false; h * w];
    for r in 0..h {
        let lo = r.saturating_sub(radius);
        let hi = (r + radius).min(h - 1);
        for c in 0..w {
            bits[r * w + c] = (lo..=hi).any(|k| rows[k * w + c]);
        }
    }
    ObjectMask { height: h, width: w, bits, dilation_radius: mask.dilation_radius + radius }
}

/// Takes `original` where the mask is set and `generated` elsewhere.
///
/// Images are (channels, H, W); the mask must match H×W.
pub fn composite<F: Real>(
    original: &Tensor<F>,
    generated: &Tensor<F>,
    mask: &ObjectMask,
) -> Result<Tensor<F>> {
    original.check_same_shape(generated)?;
    let s = original.shape();
    if s.len() != 3 || s[1] != mask.height || s[2] != mask.width {
        return invalid(alloc::format!(
            "image {:?} does not match mask {}x{}",
            s,
            mask.height,
            mask.width
        ));
    }
    let hw = mask.height * mask.width;
    let mut out = generated.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if mask.bits[i % hw] {
            *v = original.data()[i];
        }
    }
    Ok(out)
}

/// Intersection over union of two equally sized bit sets; two empty sets give 1.
pub fn iou_bits(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return invalid(alloc::format!("mask sizes differ: {} vs {}", a.len(), b.len()));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.iter().zip(b) {
        inter += (*x && *y) as usize;
        union += (*x || *y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

pub fn iou(a: &ObjectMask, b: &ObjectMask) -> Result<f64> {
    if (a.height, a.width) != (b.height, b.width) {
        return invalid("mask shapes differ");
    }
    iou_bits(&a.bits, &b.bits)
}
