use std::f64::consts::PI;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{invalid, DataError, Dataset, ImageBuffer};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeClass {
    Disk,
    Square,
    Triangle,
    Stripes,
    Checker,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 5] =
        [ShapeClass::Disk, ShapeClass::Square, ShapeClass::Triangle, ShapeClass::Stripes, ShapeClass::Checker];

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Disk => "disk",
            ShapeClass::Square => "square",
            ShapeClass::Triangle => "triangle",
            ShapeClass::Stripes => "stripes",
            ShapeClass::Checker => "checker",
        }
    }

    /// The first `n` classes in declaration order.
    pub fn first(n: usize) -> Result<Vec<ShapeClass>, DataError> {
        if n == 0 || n > Self::ALL.len() {
            return Err(invalid(format!("class count {n} outside 1..=5")));
        }
        Ok(Self::ALL[..n].to_vec())
    }
}

impl FromStr for ShapeClass {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, DataError> {
        Self::ALL.into_iter().find(|c| c.name() == s).ok_or_else(|| invalid(format!("unknown shape class {s:?}")))
    }
}

const TINT: f64 = 10.0;

/// Inside-test for one rendered figure, in pixel coordinates.
enum Figure {
    Disk { cx: f64, cy: f64, r: f64 },
    Polygon { cx: f64, cy: f64, r: f64, sides: usize, rot: f64 },
    Stripes { dir: (f64, f64), period: f64, phase: f64 },
    Checker { cell: f64, ox: f64, oy: f64 },
}

impl Figure {
    fn sample<R: Rng>(class: ShapeClass, size: f64, rng: &mut R) -> Self {
        let centre = |rng: &mut R| (rng.random_range(0.3..0.7) * size, rng.random_range(0.3..0.7) * size);
        match class {
            ShapeClass::Disk => {
                let (cx, cy) = centre(rng);
                Figure::Disk { cx, cy, r: rng.random_range(0.14..0.28) * size }
            }
            ShapeClass::Square | ShapeClass::Triangle => {
                let (cx, cy) = centre(rng);
                let sides = if class == ShapeClass::Square { 4 } else { 3 };
                let r = rng.random_range(0.18..0.34) * size;
                Figure::Polygon { cx, cy, r, sides, rot: rng.random_range(0.0..2.0 * PI) }
            }
            ShapeClass::Stripes => {
                let a: f64 = rng.random_range(0.0..PI);
                Figure::Stripes {
                    dir: (a.cos(), a.sin()),
                    period: rng.random_range(0.12..0.25) * size,
                    phase: rng.random_range(0.0..2.0 * PI),
                }
            }
            ShapeClass::Checker => Figure::Checker {
                cell: rng.random_range(0.08..0.18) * size,
                ox: rng.random_range(0.0..size),
                oy: rng.random_range(0.0..size),
            },
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Figure::Disk { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Figure::Polygon { cx, cy, r, sides, rot } => {
                // regular polygon with circumradius r: inside iff within every edge's half-plane
                let apothem = r * (PI / sides as f64).cos();
                let (dx, dy) = (x - cx, y - cy);
                (0..sides).all(|k| {
                    let a = rot + (2 * k + 1) as f64 * PI / sides as f64;
                    dx * a.cos() + dy * a.sin() <= apothem
                })
            }
            Figure::Stripes { dir, period, phase } => ((x * dir.0 + y * dir.1) * 2.0 * PI / period + phase).sin() > 0.0,
            Figure::Checker { cell, ox, oy } => {
                (((x + ox) / cell).floor() as i64 + ((y + oy) / cell).floor() as i64).rem_euclid(2) == 1
            }
        }
    }
}

fn render<R: Rng>(class: ShapeClass, size: usize, rng: &mut R) -> ImageBuffer {
    let dark_bg = rng.random_bool(0.5);
    // random luminance per layer with a faint per-channel tint
    let mut colour = |lo: f64, hi: f64| -> [f64; 3] {
        let l = rng.random_range(lo..hi);
        std::array::from_fn(|_| l + rng.random_range(-TINT..TINT))
    };
    let (bg, fg) =
        if dark_bg { (colour(20.0, 90.0), colour(160.0, 235.0)) } else { (colour(160.0, 235.0), colour(20.0, 90.0)) };
    let fig = Figure::sample(class, size as f64, rng);
    let mut pixels = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let base = if fig.contains(x as f64 + 0.5, y as f64 + 0.5) { fg } else { bg };
            for v in base {
                let noise: f64 = rng.random_range(-12.0..12.0);
                pixels.push((v + noise).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    ImageBuffer { h: size, w: size, c: 3, pixels }
}

/// Procedural labelled shapes. Image `j` has class `classes[j % k]` and is
/// rendered from its own rng stream, so any prefix of a larger dataset with
/// the same seed and classes is identical.
pub fn gen_shapes_dataset(
    seed: u64,
    n_per_class: usize,
    classes: &[ShapeClass],
    size: usize,
) -> Result<Dataset, DataError> {
    if size < 16 {
        return Err(invalid(format!("image size {size} below 16")));
    }
    if size > u16::MAX as usize {
        return Err(DataError::DimensionOverflow(format!("image size {size}")));
    }
    if classes.is_empty() {
        return Err(invalid("no classes"));
    }
    let k = classes.len();
    let mut images = Vec::with_capacity(n_per_class * k);
    let mut labels = Vec::with_capacity(n_per_class * k);
    for j in 0..n_per_class * k {
        let mut rng = seed::stream(seed, "shapes", j as u64);
        images.push(render(classes[j % k], size, &mut rng));
        labels.push((j % k) as u8);
    }
    Dataset::new(images, labels, k)
}
