use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sslab_tensor::{Scalar, Tensor};

use super::{augment, crop_resize_unit, invalid, AugConfig, DataError, Dataset, Normalize};
use crate::seed;
use crate::viewgeom::{make_view_set, pixel_scale, PixelScale, View, ViewSetSpec};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub aug: AugConfig,
    pub normalize: Normalize,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        self.aug.validate()?;
        self.normalize.validate()
    }
}

/// Views of `B` images stacked view-major: `global[i]` is `[B, 3, gc, gc]`
/// holding the i-th global view of every image, likewise `local`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewBatch<S: Scalar = f64> {
    pub global: Vec<Tensor<S>>,
    pub local: Vec<Tensor<S>>,
    /// Per image, the crops in view order (globals first).
    pub crop_meta: Vec<Vec<View>>,
    pub labels: Vec<u8>,
}

impl<S: Scalar> MultiViewBatch<S> {
    pub fn batch_size(&self) -> usize {
        self.crop_meta.len()
    }

    /// All view tensors, globals first.
    pub fn views(&self) -> impl Iterator<Item = &Tensor<S>> {
        self.global.iter().chain(&self.local)
    }

    /// Per image, pixel scale of every view from its crop and emitted resolution.
    pub fn pixel_scales(&self) -> Vec<Vec<PixelScale>> {
        let n_g = self.global.len();
        self.crop_meta
            .iter()
            .map(|views| {
                views
                    .iter()
                    .enumerate()
                    .map(|(k, v)| {
                        let t = if k < n_g { &self.global[k] } else { &self.local[k - n_g] };
                        pixel_scale(&v.rect, t.shape()[3])
                    })
                    .collect()
            })
            .collect()
    }

    /// Mean of `PS_g / PS_l` over every (global, local) pair of every image.
    pub fn mean_ps_ratio(&self) -> Option<f64> {
        let (n_g, n_l) = (self.global.len(), self.local.len());
        if n_l == 0 || n_g == 0 || self.crop_meta.is_empty() {
            return None;
        }
        let mut acc = 0.0;
        for ps in self.pixel_scales() {
            for g in &ps[..n_g] {
                for l in &ps[n_g..] {
                    acc += g.0 / l.0;
                }
            }
        }
        Some(acc / (self.crop_meta.len() * n_g * n_l) as f64)
    }
}

/// Samples views for every indexed image, renders them at `gc`/`lc`,
/// augments and standardizes them.
///
/// One `u64` is drawn from `rng`; image `j` of the batch then uses the
/// stream `(that value, "views", j)`, so the result does not depend on
/// how images are distributed over threads.
pub fn assemble_batch<S: Scalar, R: Rng + ?Sized>(
    ds: &Dataset,
    indices: &[usize],
    spec: &ViewSetSpec,
    cfg: &PipelineConfig,
    rng: &mut R,
) -> Result<MultiViewBatch<S>, DataError> {
    spec.validate()?;
    cfg.validate()?;
    if let Some(&bad) = indices.iter().find(|&&i| i >= ds.len()) {
        return Err(invalid(format!("index {bad} outside dataset of {}", ds.len())));
    }
    let base: u64 = rng.random();
    let per_image: Vec<Result<(Vec<View>, Vec<Tensor<S>>), DataError>> = indices
        .par_iter()
        .enumerate()
        .map(|(j, &idx)| {
            let img = &ds.images[idx];
            let mut r = seed::stream(base, "views", j as u64);
            let views = make_view_set(&mut r, img.w, img.h, spec)?;
            let mut tensors = Vec::with_capacity(views.len());
            for v in &views {
                let mut t = crop_resize_unit::<S>(img, &v.rect, spec.resolution(v.role))?;
                augment(&mut t, &cfg.aug, &mut r)?;
                cfg.normalize.apply(&mut t);
                tensors.push(t);
            }
            Ok((views, tensors))
        })
        .collect();
    let mut crop_meta = Vec::with_capacity(indices.len());
    let mut rendered = Vec::with_capacity(indices.len());
    for p in per_image {
        let (views, tensors) = p?;
        crop_meta.push(views);
        rendered.push(tensors);
    }
    let stack = |k: usize, res: usize| -> Result<Tensor<S>, DataError> {
        let mut data = Vec::with_capacity(indices.len() * 3 * res * res);
        for tensors in &rendered {
            data.extend_from_slice(tensors[k].data());
        }
        Ok(Tensor::new([indices.len(), 3, res, res], data)?)
    };
    let global = (0..spec.n_g).map(|k| stack(k, spec.gc)).collect::<Result<_, _>>()?;
    let local = (0..spec.n_l).map(|k| stack(spec.n_g + k, spec.lc)).collect::<Result<_, _>>()?;
    Ok(MultiViewBatch { global, local, crop_meta, labels: indices.iter().map(|&i| ds.labels[i]).collect() })
}
