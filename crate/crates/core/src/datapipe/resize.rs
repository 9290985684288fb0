use serde::{Deserialize, Serialize};
use sslab_tensor::{Scalar, Tensor};

use super::{invalid, DataError, ImageBuffer};
use crate::viewgeom::{CropRect, ViewError};

/// Per-channel standardization `(v − mean) / std`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalize {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalize {
    pub fn identity() -> Self {
        Self { mean: [0.0; 3], std: [1.0; 3] }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.std.iter().any(|&s| !(s > 0.0) || !s.is_finite()) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(invalid(format!("bad normalization {self:?}")));
        }
        Ok(())
    }

    /// Standardizes a `[3, h, w]` tensor in place.
    pub fn apply<S: Scalar>(&self, t: &mut Tensor<S>) {
        let plane = t.numel() / 3;
        for (ch, chunk) in t.data_mut().chunks_mut(plane).enumerate() {
            let (m, inv) = (S::lit(self.mean[ch]), S::lit(1.0 / self.std[ch]));
            chunk.iter_mut().for_each(|v| *v = (*v - m) * inv);
        }
    }
}

/// Source-index pair and weight of the far neighbour for each output index.
fn taps(offset: usize, len: usize, out: usize) -> Vec<(usize, usize, f64)> {
    let scale = len as f64 / out as f64;
    (0..out)
        .map(|o| {
            let u = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
            let i0 = u.floor() as usize;
            let i1 = (i0 + 1).min(len - 1);
            (offset + i0, offset + i1, u - i0 as f64)
        })
        .collect()
}

/// Bilinear resample of `rect` to `out × out`, values in [0, 1], layout `[3, out, out]`.
///
/// Output pixel `o` samples the crop at `(o + ½)·len/out − ½` (pixel centres
/// at half-integers), clamped to the crop.
pub fn crop_resize_unit<S: Scalar>(img: &ImageBuffer, rect: &CropRect, out: usize) -> Result<Tensor<S>, DataError> {
    rect.validate()?;
    if rect.src_w != img.w || rect.src_h != img.h {
        return Err(ViewError::OutOfBounds(*rect).into());
    }
    if out == 0 {
        return Err(invalid("output resolution must be positive"));
    }
    if img.c != 3 && img.c != 1 {
        return Err(invalid(format!("{} channels", img.c)));
    }
    let xs = taps(rect.x, rect.w, out);
    let ys = taps(rect.y, rect.h, out);
    let mut data = vec![S::zero(); 3 * out * out];
    let plane = out * out;
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            for ch in 0..3 {
                let c = if img.c == 1 { 0 } else { ch };
                let p = |y, x| img.get(y, x, c) as f64;
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                data[ch * plane + oy * out + ox] = S::lit((top * (1.0 - fy) + bot * fy) / 255.0);
            }
        }
    }
    Ok(Tensor::new([3, out, out], data)?)
}

/// [`crop_resize_unit`] followed by standardization.
pub fn crop_resize<S: Scalar>(
    img: &ImageBuffer,
    rect: &CropRect,
    out: usize,
    norm: &Normalize,
) -> Result<Tensor<S>, DataError> {
    let mut t = crop_resize_unit(img, rect, out)?;
    norm.apply(&mut t);
    Ok(t)
}

/// Centered square crop covering `fraction` of the shorter side.
pub fn center_crop_rect(src_w: usize, src_h: usize, fraction: f64) -> Result<CropRect, DataError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(invalid(format!("center crop fraction {fraction}")));
    }
    let side = ((src_w.min(src_h) as f64 * fraction).round() as usize).max(1);
    Ok(CropRect::new((src_w - side) / 2, (src_h - side) / 2, side, side, src_w, src_h)?)
}
