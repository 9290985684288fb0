//! Crop rectangles, the multi-crop view set, pixel scale and pair counts.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ViewError {
    #[error("degenerate source {0}x{1}")]
    DegenerateSource(usize, usize),
    #[error("invalid scale range [{0}, {1}]")]
    ScaleRange(f64, f64),
    #[error("invalid aspect range [{0}, {1}]")]
    AspectRange(f64, f64),
    #[error("crop {0:?} does not fit its source")]
    OutOfBounds(CropRect),
    #[error("invalid view spec: {0}")]
    Spec(String),
    #[error("no crop fitted after {0} draws")]
    NoFit(usize),
}

/// Axis-aligned integer rectangle inside a `src_w × src_h` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CropRect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub src_w: usize,
    pub src_h: usize,
}

impl CropRect {
    pub fn new(x: usize, y: usize, w: usize, h: usize, src_w: usize, src_h: usize) -> Result<Self, ViewError> {
        let r = Self { x, y, w, h, src_w, src_h };
        r.validate()?;
        Ok(r)
    }

    pub fn full(src_w: usize, src_h: usize) -> Self {
        Self { x: 0, y: 0, w: src_w, h: src_h, src_w, src_h }
    }

    pub fn validate(&self) -> Result<(), ViewError> {
        if self.w == 0 || self.h == 0 || self.x + self.w > self.src_w || self.y + self.h > self.src_h {
            return Err(ViewError::OutOfBounds(*self));
        }
        Ok(())
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn area_fraction(&self) -> f64 {
        self.area() as f64 / (self.src_w as f64 * self.src_h as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Global,
    Local,
}

/// What to do when no draw fits inside the source after `max_retries`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    /// Largest centered rectangle with aspect clamped into range.
    #[default]
    CenterCrop,
    /// Keep drawing (rejection sampling); never takes the centered path.
    Resample,
}

/// Upper bound on rounds of `max_retries` draws under [`Fallback::Resample`].
const RESAMPLE_ROUNDS: usize = 1000;

/// The multi-crop sampling policy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViewSetSpec {
    /// Lower bound of the global scale range `(s_g, 1]`.
    pub s_g: f64,
    /// Upper bound of the local scale range `(s_min_local, s_l)`.
    pub s_l: f64,
    pub s_min_local: f64,
    /// Global output resolution.
    pub gc: usize,
    /// Local output resolution.
    pub lc: usize,
    pub n_g: usize,
    pub n_l: usize,
    pub aspect_lo: f64,
    pub aspect_hi: f64,
    pub max_retries: usize,
    pub fallback: Fallback,
}

impl Default for ViewSetSpec {
    fn default() -> Self {
        Self {
            s_g: 0.3,
            s_l: 0.3,
            s_min_local: 0.05,
            gc: 224,
            lc: 128,
            n_g: 2,
            n_l: 6,
            aspect_lo: 3.0 / 4.0,
            aspect_hi: 4.0 / 3.0,
            max_retries: 10,
            fallback: Fallback::CenterCrop,
        }
    }
}

impl ViewSetSpec {
    pub fn validate(&self) -> Result<(), ViewError> {
        let bad = |m: &str| Err(ViewError::Spec(m.to_string()));
        if !(self.s_g > 0.0 && self.s_g <= 1.0) {
            return bad("s_g must lie in (0, 1]");
        }
        if !(self.s_min_local > 0.0 && self.s_min_local < self.s_l && self.s_l <= 1.0) {
            return bad("need 0 < s_min_local < s_l <= 1");
        }
        if !(self.aspect_lo > 0.0 && self.aspect_lo <= self.aspect_hi && self.aspect_hi.is_finite()) {
            return bad("need 0 < aspect_lo <= aspect_hi");
        }
        if !(self.gc >= self.lc && self.lc > 0) {
            return bad("need gc >= lc > 0");
        }
        if self.n_g == 0 {
            return bad("n_g must be at least 1");
        }
        if self.max_retries == 0 {
            return bad("max_retries must be at least 1");
        }
        Ok(())
    }

    pub fn global_params(&self) -> CropParams {
        CropParams {
            scale_lo: self.s_g,
            scale_hi: 1.0,
            aspect_lo: self.aspect_lo,
            aspect_hi: self.aspect_hi,
            max_retries: self.max_retries,
            fallback: self.fallback,
        }
    }

    pub fn local_params(&self) -> CropParams {
        CropParams { scale_lo: self.s_min_local, scale_hi: self.s_l, ..self.global_params() }
    }

    pub fn resolution(&self, role: Role) -> usize {
        match role {
            Role::Global => self.gc,
            Role::Local => self.lc,
        }
    }
}

/// Random-resized-crop parameters for one scale range.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropParams {
    pub scale_lo: f64,
    pub scale_hi: f64,
    pub aspect_lo: f64,
    pub aspect_hi: f64,
    pub max_retries: usize,
    pub fallback: Fallback,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampledCrop {
    pub rect: CropRect,
    /// The centered fallback produced this rectangle.
    pub fell_back: bool,
}

/// Random-resized crop: area fraction uniform in `[scale_lo, scale_hi]`,
/// aspect `w/h` log-uniform in `[aspect_lo, aspect_hi]`, position uniform.
/// After `max_retries` misfits, returns the largest centered rectangle with
/// aspect clamped into range.
#[allow(clippy::too_many_arguments)]
pub fn sample_crop<R: Rng + ?Sized>(
    rng: &mut R,
    src_w: usize,
    src_h: usize,
    scale_lo: f64,
    scale_hi: f64,
    aspect_lo: f64,
    aspect_hi: f64,
    max_retries: usize,
) -> Result<CropRect, ViewError> {
    let params = CropParams { scale_lo, scale_hi, aspect_lo, aspect_hi, max_retries, fallback: Fallback::CenterCrop };
    sample_crop_with(rng, src_w, src_h, &params).map(|s| s.rect)
}

pub fn sample_crop_with<R: Rng + ?Sized>(
    rng: &mut R,
    src_w: usize,
    src_h: usize,
    p: &CropParams,
) -> Result<SampledCrop, ViewError> {
    if src_w == 0 || src_h == 0 {
        return Err(ViewError::DegenerateSource(src_w, src_h));
    }
    if !(p.scale_lo > 0.0 && p.scale_lo <= p.scale_hi && p.scale_hi <= 1.0) {
        return Err(ViewError::ScaleRange(p.scale_lo, p.scale_hi));
    }
    if !(p.aspect_lo > 0.0 && p.aspect_lo <= p.aspect_hi && p.aspect_hi.is_finite()) {
        return Err(ViewError::AspectRange(p.aspect_lo, p.aspect_hi));
    }
    let area = src_w as f64 * src_h as f64;
    let (log_lo, log_hi) = (p.aspect_lo.ln(), p.aspect_hi.ln());
    let rounds = match p.fallback {
        Fallback::CenterCrop => 1,
        Fallback::Resample => RESAMPLE_ROUNDS,
    };
    for _ in 0..rounds * p.max_retries {
        let target = area * rng.random_range(p.scale_lo..=p.scale_hi);
        let aspect = rng.random_range(log_lo..=log_hi).exp();
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if w > 0 && h > 0 && w <= src_w && h <= src_h {
            let y = rng.random_range(0..=src_h - h);
            let x = rng.random_range(0..=src_w - w);
            return Ok(SampledCrop { rect: CropRect { x, y, w, h, src_w, src_h }, fell_back: false });
        }
    }
    if p.fallback == Fallback::Resample {
        return Err(ViewError::NoFit(rounds * p.max_retries));
    }
    let in_ratio = src_w as f64 / src_h as f64;
    let (w, h) = if in_ratio < p.aspect_lo {
        (src_w, ((src_w as f64 / p.aspect_lo).round() as usize).clamp(1, src_h))
    } else if in_ratio > p.aspect_hi {
        (((src_h as f64 * p.aspect_hi).round() as usize).clamp(1, src_w), src_h)
    } else {
        (src_w, src_h)
    };
    let rect = CropRect { x: (src_w - w) / 2, y: (src_h - h) / 2, w, h, src_w, src_h };
    Ok(SampledCrop { rect, fell_back: true })
}

/// Pixel scale of a view: output pixels per source pixel, `res² / area`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct PixelScale(pub f64);

pub fn pixel_scale(crop: &CropRect, output_res: usize) -> PixelScale {
    PixelScale((output_res as f64 * output_res as f64) / crop.area() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct View {
    pub rect: CropRect,
    pub role: Role,
}

/// Samples `n_g` global then `n_l` local crops from one source image.
pub fn make_view_set<R: Rng + ?Sized>(
    rng: &mut R,
    src_w: usize,
    src_h: usize,
    spec: &ViewSetSpec,
) -> Result<Vec<View>, ViewError> {
    spec.validate()?;
    let (gp, lp) = (spec.global_params(), spec.local_params());
    let mut views = Vec::with_capacity(spec.n_g + spec.n_l);
    for _ in 0..spec.n_g {
        views.push(View { rect: sample_crop_with(rng, src_w, src_h, &gp)?.rect, role: Role::Global });
    }
    for _ in 0..spec.n_l {
        views.push(View { rect: sample_crop_with(rng, src_w, src_h, &lp)?.rect, role: Role::Local });
    }
    Ok(views)
}

/// Ordered (teacher global, other view) pair counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairCounts {
    pub p_gg: usize,
    pub p_gl: usize,
}

impl PairCounts {
    pub fn from_views(n_g: usize, n_l: usize) -> Self {
        Self { p_gg: n_g * n_g.saturating_sub(1), p_gl: n_g * n_l }
    }

    pub fn total(&self) -> usize {
        self.p_gg + self.p_gl
    }
}

pub fn pair_counts(spec: &ViewSetSpec) -> PairCounts {
    PairCounts::from_views(spec.n_g, spec.n_l)
}
