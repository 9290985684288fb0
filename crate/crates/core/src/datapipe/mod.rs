//! Images, the raw dataset format, view rendering and batch assembly.

mod augment;
mod batch;
mod format;
mod resize;
mod shapes;

pub use augment::{augment, AugConfig};
pub use batch::{assemble_batch, MultiViewBatch, PipelineConfig};
pub use format::{load_raw_dataset, read_raw_dataset, save_raw_dataset, write_raw_dataset, MAGIC, VERSION};
pub use resize::{center_crop_rect, crop_resize, crop_resize_unit, Normalize};
pub use shapes::{gen_shapes_dataset, ShapeClass};

use thiserror::Error;

use crate::viewgeom::ViewError;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    Version(u16),
    #[error("truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("dimension overflow: {0}")]
    DimensionOverflow(String),
    #[error("trailing bytes after payload: {0}")]
    Trailing(u64),
    #[error(transparent)]
    View(#[from] ViewError),
    #[error(transparent)]
    Tensor(#[from] sslab_tensor::TensorError),
    #[error("invalid: {0}")]
    Invalid(String),
}

pub(crate) fn invalid(msg: impl Into<String>) -> DataError {
    DataError::Invalid(msg.into())
}

/// 8-bit interleaved image, `pixels[(y·w + x)·c + ch]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageBuffer {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub pixels: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(h: usize, w: usize, c: usize, pixels: Vec<u8>) -> Result<Self, DataError> {
        if h == 0 || w == 0 || c == 0 {
            return Err(invalid(format!("empty image {h}x{w}x{c}")));
        }
        if pixels.len() != h * w * c {
            return Err(invalid(format!("{} bytes for {h}x{w}x{c}", pixels.len())));
        }
        Ok(Self { h, w, c, pixels })
    }

    pub fn filled(h: usize, w: usize, rgb: [u8; 3]) -> Self {
        Self { h, w, c: 3, pixels: rgb.iter().copied().cycle().take(h * w * 3).collect() }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, ch: usize) -> u8 {
        self.pixels[(y * self.w + x) * self.c + ch]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub images: Vec<ImageBuffer>,
    pub labels: Vec<u8>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(images: Vec<ImageBuffer>, labels: Vec<u8>, class_count: usize) -> Result<Self, DataError> {
        let ds = Self { images, labels, class_count };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.images.len() != self.labels.len() {
            return Err(invalid(format!("{} images, {} labels", self.images.len(), self.labels.len())));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l as usize >= self.class_count) {
            return Err(invalid(format!("label {l} >= class count {}", self.class_count)));
        }
        if let Some(first) = self.images.first() {
            if self.images.iter().any(|im| (im.h, im.w, im.c) != (first.h, first.w, first.c)) {
                return Err(invalid("images differ in size"));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `(h, w, c)` of the (uniformly sized) images.
    pub fn dims(&self) -> Option<(usize, usize, usize)> {
        self.images.first().map(|im| (im.h, im.w, im.c))
    }

    /// Per-channel mean and standard deviation of pixel values in [0, 1].
    pub fn channel_stats(&self) -> Normalize {
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut n = 0u64;
        for im in &self.images {
            for px in im.pixels.chunks_exact(im.c) {
                for ch in 0..3.min(im.c) {
                    let v = px[ch] as f64 / 255.0;
                    sum[ch] += v;
                    sq[ch] += v * v;
                }
                n += 1;
            }
        }
        if n == 0 {
            return Normalize::identity();
        }
        let mut out = Normalize::identity();
        for ch in 0..3 {
            let m = sum[ch] / n as f64;
            out.mean[ch] = m;
            out.std[ch] = (sq[ch] / n as f64 - m * m).max(0.0).sqrt().max(1e-3);
        }
        out
    }

    /// Keeps the listed rows in the given order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }
}
