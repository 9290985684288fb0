//! Monte-Carlo statistics of the global/local pixel-scale ratio
//! `PS_g / PS_l`, and the local resolution that brings its mean to a target.
//!
//! A sample pairs one global crop with one independent local crop. The ratio
//! factors as `(gc/lc)² · A_l/A_g`, so every estimator is accumulated over
//! the resolution-free quantity `A_l/A_g` and rescaled afterwards. That is
//! what lets one sample set answer every candidate `lc`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;
use crate::viewgeom::{sample_crop_with, ViewError, ViewSetSpec};

/// Pairs drawn per independent rng stream; fixes the reduction order.
pub const CHUNK: usize = 16_384;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error(transparent)]
    View(#[from] ViewError),
    #[error("need at least one sample")]
    NoSamples,
    #[error("target ratio {target} unreachable for lc in [1, {gc}] (ratio spans [{at_gc}, {at_one}])")]
    Unreachable { target: f64, gc: usize, at_gc: f64, at_one: f64 },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("empty sweep grid")]
    EmptyGrid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// `mean(PS_g/PS_l)` over pairs.
    #[default]
    MeanOfRatios,
    /// `mean(PS_g) / mean(PS_l)`.
    RatioOfMeans,
    /// `exp(mean(ln(PS_g/PS_l)))`.
    GeometricMean,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::MeanOfRatios => "mean_of_ratios",
            Estimator::RatioOfMeans => "ratio_of_means",
            Estimator::GeometricMean => "geometric_mean",
        }
    }
}

/// Sufficient statistics of the sampled area pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AreaStats {
    pub n: u64,
    sum_q: f64,
    sum_q2: f64,
    sum_lnq: f64,
    sum_lnq2: f64,
    sum_ig: f64,
    sum_ig2: f64,
    sum_il: f64,
    sum_il2: f64,
    sum_igil: f64,
    pub fallbacks: u64,
}

impl AreaStats {
    /// Adds one pair by crop areas (in source pixels).
    pub fn push(&mut self, area_global: u64, area_local: u64) {
        let (ag, al) = (area_global as f64, area_local as f64);
        let q = al / ag;
        let (ig, il) = (1.0 / ag, 1.0 / al);
        self.n += 1;
        self.sum_q += q;
        self.sum_q2 += q * q;
        self.sum_lnq += q.ln();
        self.sum_lnq2 += q.ln() * q.ln();
        self.sum_ig += ig;
        self.sum_ig2 += ig * ig;
        self.sum_il += il;
        self.sum_il2 += il * il;
        self.sum_igil += ig * il;
    }

    pub fn merge(&mut self, o: &Self) {
        self.n += o.n;
        self.sum_q += o.sum_q;
        self.sum_q2 += o.sum_q2;
        self.sum_lnq += o.sum_lnq;
        self.sum_lnq2 += o.sum_lnq2;
        self.sum_ig += o.sum_ig;
        self.sum_ig2 += o.sum_ig2;
        self.sum_il += o.sum_il;
        self.sum_il2 += o.sum_il2;
        self.sum_igil += o.sum_igil;
        self.fallbacks += o.fallbacks;
    }

    fn sample_var(&self, sum: f64, sum2: f64) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let n = self.n as f64;
        ((sum2 - sum * sum / n) / (n - 1.0)).max(0.0)
    }

    /// `(estimate, standard error)` of the pixel-scale ratio at resolutions `gc`, `lc`.
    pub fn estimate(&self, gc: usize, lc: usize, estimator: Estimator) -> (f64, f64) {
        let n = self.n as f64;
        let k = (gc as f64 / lc as f64).powi(2);
        match estimator {
            Estimator::MeanOfRatios => {
                let var = self.sample_var(self.sum_q, self.sum_q2);
                (k * self.sum_q / n, k * (var / n).sqrt())
            }
            Estimator::GeometricMean => {
                let var = self.sample_var(self.sum_lnq, self.sum_lnq2);
                let mean = k * (self.sum_lnq / n).exp();
                (mean, mean * (var / n).sqrt())
            }
            Estimator::RatioOfMeans => {
                let (mg, ml) = (self.sum_ig / n, self.sum_il / n);
                let r = k * mg / ml;
                let vg = self.sample_var(self.sum_ig, self.sum_ig2);
                let vl = self.sample_var(self.sum_il, self.sum_il2);
                let cov = if self.n < 2 { 0.0 } else { (self.sum_igil - self.sum_ig * self.sum_il / n) / (n - 1.0) };
                // delta method
                let rel = (vg / (mg * mg) + vl / (ml * ml) - 2.0 * cov / (mg * ml)).max(0.0) / n;
                (r, r * rel.sqrt())
            }
        }
    }
}

/// Draws `n_samples` independent (global, local) crop pairs.
///
/// Chunk `c` uses its own rng stream keyed by `(seed, c)` and chunks are
/// merged in index order, so the result does not depend on thread count.
pub fn sample_area_stats(
    spec: &ViewSetSpec,
    src_w: usize,
    src_h: usize,
    n_samples: u64,
    seed: u64,
) -> Result<AreaStats, CalibrationError> {
    spec.validate()?;
    if n_samples == 0 {
        return Err(CalibrationError::NoSamples);
    }
    let (gp, lp) = (spec.global_params(), spec.local_params());
    let chunks = n_samples.div_ceil(CHUNK as u64);
    let parts: Vec<Result<AreaStats, ViewError>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = seed::stream(seed, "calibration", c);
            let count = (n_samples - c * CHUNK as u64).min(CHUNK as u64);
            let mut st = AreaStats::default();
            for _ in 0..count {
                let g = sample_crop_with(&mut rng, src_w, src_h, &gp)?;
                let l = sample_crop_with(&mut rng, src_w, src_h, &lp)?;
                st.fallbacks += g.fell_back as u64 + l.fell_back as u64;
                st.push(g.rect.area(), l.rect.area());
            }
            Ok(st)
        })
        .collect();
    let mut total = AreaStats::default();
    for p in parts {
        total.merge(&p?);
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub mean_ratio: f64,
    pub std_err: f64,
    pub n_samples: u64,
    pub spec: ViewSetSpec,
    pub src_w: usize,
    pub src_h: usize,
    pub seed: u64,
    pub estimator: Estimator,
    /// Crops (of either role) that came from the centered fallback.
    pub fallbacks: u64,
}

impl CalibrationReport {
    pub fn from_stats(
        stats: &AreaStats,
        spec: &ViewSetSpec,
        src_w: usize,
        src_h: usize,
        seed: u64,
        estimator: Estimator,
    ) -> Self {
        let (mean_ratio, std_err) = stats.estimate(spec.gc, spec.lc, estimator);
        Self {
            mean_ratio,
            std_err,
            n_samples: stats.n,
            spec: *spec,
            src_w,
            src_h,
            seed,
            estimator,
            fallbacks: stats.fallbacks,
        }
    }

    pub const CSV_HEADER: &'static str = "s_g,s_l,s_min_local,gc,lc,n_g,n_l,aspect_lo,aspect_hi,max_retries,src_w,src_h,n_samples,seed,estimator,mean_ratio,std_err";

    pub fn csv_row(&self) -> String {
        let s = &self.spec;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            s.s_g,
            s.s_l,
            s.s_min_local,
            s.gc,
            s.lc,
            s.n_g,
            s.n_l,
            s.aspect_lo,
            s.aspect_hi,
            s.max_retries,
            self.src_w,
            self.src_h,
            self.n_samples,
            self.seed,
            self.estimator.name(),
            self.mean_ratio,
            self.std_err
        )
    }
}

pub fn estimate_ps_ratio(
    spec: &ViewSetSpec,
    src_w: usize,
    src_h: usize,
    n_samples: u64,
    seed: u64,
    estimator: Estimator,
) -> Result<CalibrationReport, CalibrationError> {
    let stats = sample_area_stats(spec, src_w, src_h, n_samples, seed)?;
    Ok(CalibrationReport::from_stats(&stats, spec, src_w, src_h, seed, estimator))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveRequest {
    pub target_ratio: f64,
    pub tol: f64,
    pub n_samples: u64,
    pub seed: u64,
    pub estimator: Estimator,
}

impl Default for SolveRequest {
    fn default() -> Self {
        Self { target_ratio: 1.0, tol: 0.05, n_samples: 1_000_000, seed: 0, estimator: Estimator::MeanOfRatios }
    }
}

/// Integer `lc ∈ [1, gc]` whose ratio estimate is closest to the target.
///
/// The ratio is strictly decreasing in `lc`, so a bisection locates the
/// crossing and the closer of its two neighbours is returned. `spec.lc` is
/// ignored. Fails when even the extreme resolutions miss the target by more
/// than `tol`.
pub fn solve_local_resolution(
    spec: &ViewSetSpec,
    src_w: usize,
    src_h: usize,
    req: &SolveRequest,
) -> Result<(usize, CalibrationReport), CalibrationError> {
    if !(req.target_ratio > 0.0 && req.target_ratio.is_finite()) || req.tol < 0.0 {
        return Err(CalibrationError::Invalid(format!("target {} tol {}", req.target_ratio, req.tol)));
    }
    let probe = ViewSetSpec { lc: spec.gc, ..*spec };
    let stats = sample_area_stats(&probe, src_w, src_h, req.n_samples, req.seed)?;
    let ratio = |lc: usize| stats.estimate(spec.gc, lc, req.estimator).0;
    let (at_gc, at_one) = (ratio(spec.gc), ratio(1));
    if at_gc > req.target_ratio + req.tol || at_one < req.target_ratio - req.tol {
        return Err(CalibrationError::Unreachable { target: req.target_ratio, gc: spec.gc, at_gc, at_one });
    }
    // smallest lc with ratio(lc) <= target
    let (mut lo, mut hi) = (1usize, spec.gc);
    if ratio(hi) > req.target_ratio {
        lo = hi;
    } else {
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            if ratio(mid) <= req.target_ratio {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
    }
    let best = [lo.saturating_sub(1).max(1), lo]
        .into_iter()
        .min_by(|&a, &b| {
            let da = (ratio(a) - req.target_ratio).abs();
            let db = (ratio(b) - req.target_ratio).abs();
            da.total_cmp(&db).then(b.cmp(&a))
        })
        .expect("two candidates");
    let solved = ViewSetSpec { lc: best, ..*spec };
    Ok((best, CalibrationReport::from_stats(&stats, &solved, src_w, src_h, req.seed, req.estimator)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub s_g: f64,
    pub s_l: f64,
    pub lc: usize,
    pub mean_ratio: f64,
    pub std_err: f64,
}

impl SweepRow {
    pub const CSV_HEADER: &'static str = "s_g,s_l,lc,mean_ratio,std_err";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.s_g, self.s_l, self.lc, self.mean_ratio, self.std_err)
    }
}

/// One report per `(s_g, s_l, lc)` grid point, all from the same seed.
pub fn sweep_scales(
    grid: &[(f64, f64, usize)],
    base: &ViewSetSpec,
    src_w: usize,
    src_h: usize,
    n_samples: u64,
    seed: u64,
    estimator: Estimator,
) -> Result<Vec<SweepRow>, CalibrationError> {
    if grid.is_empty() {
        return Err(CalibrationError::EmptyGrid);
    }
    grid.iter()
        .map(|&(s_g, s_l, lc)| {
            let spec = ViewSetSpec { s_g, s_l, lc, ..*base };
            let r = estimate_ps_ratio(&spec, src_w, src_h, n_samples, seed, estimator)?;
            Ok(SweepRow { s_g, s_l, lc, mean_ratio: r.mean_ratio, std_err: r.std_err })
        })
        .collect()
}

/// Running mean of per-pair ratios observed elsewhere (e.g. in training batches).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RatioMeter {
    n: u64,
    sum: f64,
    sum2: f64,
}

impl RatioMeter {
    pub fn push(&mut self, v: f64) {
        self.n += 1;
        self.sum += v;
        self.sum2 += v * v;
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.sum / self.n as f64
    }

    pub fn std_err(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let n = self.n as f64;
        (((self.sum2 - self.sum * self.sum / n) / (n - 1.0)).max(0.0) / n).sqrt()
    }
}
