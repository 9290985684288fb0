//! Forward/backward kernels for the heavier primitives.

use rayon::prelude::*;

use crate::scalar::Scalar;

/// Target number of im2col columns per sample group. Group size depends only
/// on the layer geometry, never on the thread count.
const GROUP_COLUMNS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn group(&self) -> usize {
        (GROUP_COLUMNS / self.out_plane()).clamp(1, self.n.max(1))
    }

    fn in_sample(&self) -> usize {
        self.c * self.h * self.w
    }
}

/// Output columns `ox` whose input column `ox·stride + k − pad` lies inside `[0, len)`.
fn valid_range(k: usize, pad: usize, stride: usize, len: usize, out: usize) -> std::ops::Range<usize> {
    let lo = pad.saturating_sub(k).div_ceil(stride);
    let hi = if len + pad > k { ((len + pad - k - 1) / stride + 1).min(out) } else { 0 };
    lo..hi.max(lo)
}

/// Writes patch row `r` of one sample to `col[r·ld .. r·ld + plane]`.
fn im2col<S: Scalar>(g: &ConvGeom, x: &[S], col: &mut [S], ld: usize) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for c in 0..g.c {
        for ki in 0..g.kh {
            let ys = valid_range(ki, g.pad, g.stride, g.h, oh);
            for kj in 0..g.kw {
                let xs = valid_range(kj, g.pad, g.stride, g.w, ow);
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * ld..row * ld + plane];
                dst.fill(S::zero());
                for oy in ys.clone() {
                    let src = &x[(c * g.h + oy * g.stride + ki - g.pad) * g.w..];
                    let out = &mut dst[oy * ow..(oy + 1) * ow];
                    for ox in xs.clone() {
                        out[ox] = src[ox * g.stride + kj - g.pad];
                    }
                }
            }
        }
    }
}

fn col2im<S: Scalar>(g: &ConvGeom, col: &[S], ld: usize, dx: &mut [S]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for c in 0..g.c {
        for ki in 0..g.kh {
            let ys = valid_range(ki, g.pad, g.stride, g.h, oh);
            for kj in 0..g.kw {
                let xs = valid_range(kj, g.pad, g.stride, g.w, ow);
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * ld..row * ld + plane];
                for oy in ys.clone() {
                    let dst = &mut dx[(c * g.h + oy * g.stride + ki - g.pad) * g.w..];
                    let inp = &src[oy * ow..(oy + 1) * ow];
                    for ox in xs.clone() {
                        dst[ox * g.stride + kj - g.pad] += inp[ox];
                    }
                }
            }
        }
    }
}

/// Samples are processed in groups of about [`GROUP_COLUMNS`] output pixels: one im2col buffer of
/// `patch × (group·plane)` columns and a single gemm per group.
pub fn conv2d_forward<S: Scalar>(g: &ConvGeom, x: &[S], w: &[S], b: Option<&[S]>) -> Vec<S> {
    let plane = g.out_plane();
    let patch = g.patch();
    let group = g.group();
    let mut out = vec![S::zero(); g.n * g.o * plane];
    out.par_chunks_mut(group * g.o * plane).enumerate().for_each(|(gi, y)| {
        let count = y.len() / (g.o * plane);
        let ld = count * plane;
        let mut col = vec![S::zero(); patch * ld];
        for j in 0..count {
            let n = gi * group + j;
            im2col(g, &x[n * g.in_sample()..(n + 1) * g.in_sample()], &mut col[j * plane..], ld);
        }
        let mut tmp = vec![S::zero(); g.o * ld];
        S::gemm(g.o, patch, ld, S::one(), w, (patch, 1), &col, (ld, 1), S::zero(), &mut tmp, (ld, 1));
        for j in 0..count {
            for o in 0..g.o {
                let dst = &mut y[(j * g.o + o) * plane..(j * g.o + o + 1) * plane];
                dst.copy_from_slice(&tmp[o * ld + j * plane..o * ld + (j + 1) * plane]);
                if let Some(b) = b {
                    dst.iter_mut().for_each(|v| *v += b[o]);
                }
            }
        }
    });
    out
}

/// Returns `(dx, dw, db)`; `dx` is left empty when `need_dx` is false.
///
/// Weight gradients are summed per sample group, then the group partials
/// are added in group order, so the result does not depend on thread count.
pub fn conv2d_backward<S: Scalar>(g: &ConvGeom, x: &[S], w: &[S], dy: &[S], need_dx: bool) -> (Vec<S>, Vec<S>, Vec<S>) {
    let plane = g.out_plane();
    let patch = g.patch();
    let group = g.group();
    let groups = g.n.div_ceil(group);
    let parts: Vec<(Vec<S>, Vec<S>)> = (0..groups)
        .into_par_iter()
        .map(|gi| {
            let first = gi * group;
            let count = group.min(g.n - first);
            let ld = count * plane;
            let mut col = vec![S::zero(); patch * ld];
            let mut dyg = vec![S::zero(); g.o * ld];
            for j in 0..count {
                let n = first + j;
                im2col(g, &x[n * g.in_sample()..(n + 1) * g.in_sample()], &mut col[j * plane..], ld);
                for o in 0..g.o {
                    let src = &dy[(n * g.o + o) * plane..(n * g.o + o + 1) * plane];
                    dyg[o * ld + j * plane..o * ld + (j + 1) * plane].copy_from_slice(src);
                }
            }
            // dW = dY · colᵀ
            let mut dw = vec![S::zero(); g.o * patch];
            S::gemm(g.o, ld, patch, S::one(), &dyg, (ld, 1), &col, (1, ld), S::zero(), &mut dw, (patch, 1));
            let mut dx = Vec::new();
            if need_dx {
                // dcol = Wᵀ · dY, reusing the im2col buffer
                S::gemm(patch, g.o, ld, S::one(), w, (1, patch), &dyg, (ld, 1), S::zero(), &mut col, (ld, 1));
                dx = vec![S::zero(); count * g.in_sample()];
                for j in 0..count {
                    col2im(g, &col[j * plane..], ld, &mut dx[j * g.in_sample()..(j + 1) * g.in_sample()]);
                }
            }
            (dx, dw)
        })
        .collect();
    let mut dx = Vec::with_capacity(if need_dx { g.n * g.in_sample() } else { 0 });
    let mut dw = vec![S::zero(); g.o * patch];
    for (pdx, pdw) in parts {
        dx.extend(pdx);
        for (a, b) in dw.iter_mut().zip(pdw) {
            *a += b;
        }
    }
    let mut db = vec![S::zero(); g.o];
    for n in 0..g.n {
        for (o, acc) in db.iter_mut().enumerate() {
            let start = (n * g.o + o) * plane;
            *acc += dy[start..start + plane].iter().copied().sum::<S>();
        }
    }
    (dx, dw, db)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl PoolGeom {
    pub fn out_h(&self) -> usize {
        (self.h - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w - self.kernel) / self.stride + 1
    }
}

pub fn avgpool_forward<S: Scalar>(g: &PoolGeom, x: &[S]) -> Vec<S> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let norm = S::one() / S::lit((g.kernel * g.kernel) as f64);
    let mut out = vec![S::zero(); g.planes * oh * ow];
    for p in 0..g.planes {
        let src = &x[p * g.h * g.w..(p + 1) * g.h * g.w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = S::zero();
                for ki in 0..g.kernel {
                    let row = (oy * g.stride + ki) * g.w + ox * g.stride;
                    acc += src[row..row + g.kernel].iter().copied().sum::<S>();
                }
                out[(p * oh + oy) * ow + ox] = acc * norm;
            }
        }
    }
    out
}

pub fn avgpool_backward<S: Scalar>(g: &PoolGeom, dy: &[S]) -> Vec<S> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let norm = S::one() / S::lit((g.kernel * g.kernel) as f64);
    let mut dx = vec![S::zero(); g.planes * g.h * g.w];
    for p in 0..g.planes {
        let dst = &mut dx[p * g.h * g.w..(p + 1) * g.h * g.w];
        for oy in 0..oh {
            for ox in 0..ow {
                let v = dy[(p * oh + oy) * ow + ox] * norm;
                for ki in 0..g.kernel {
                    let row = (oy * g.stride + ki) * g.w + ox * g.stride;
                    for d in &mut dst[row..row + g.kernel] {
                        *d += v;
                    }
                }
            }
        }
    }
    dx
}
