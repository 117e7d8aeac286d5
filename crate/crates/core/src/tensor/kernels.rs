//! Raw compute kernels behind the graph operations.
//!
//! Convolutions lower to one im2col + GEMM per batch element. Batch
//! elements run on the rayon pool; weight gradients are reduced in batch
//! order so results do not depend on the number of workers.

use rayon::prelude::*;

use crate::error::{Error, Result};

use super::Scalar;

/// Geometry of a (possibly 1D) cross-correlation. A 1D convolution is the
/// 2D case with `h == kh == 1` and no vertical padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub ph: usize,
    pub pw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ho: usize,
    pub wo: usize,
}

fn out_extent(len: usize, pad: usize, k: usize, stride: usize, axis: &str) -> Result<usize> {
    if stride == 0 {
        return Err(Error::invalid("convolution stride must be positive"));
    }
    let padded = len + 2 * pad;
    if padded < k {
        return Err(Error::shape(format!(
            "non-positive output extent along {axis}: input {len} + 2*{pad} < kernel {k}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

impl ConvGeom {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        batch: usize,
        cin: usize,
        (h, w): (usize, usize),
        cout: usize,
        (kh, kw): (usize, usize),
        (ph, pw): (usize, usize),
        (sh, sw): (usize, usize),
    ) -> Result<Self> {
        let ho = out_extent(h, ph, kh, sh, "height")?;
        let wo = out_extent(w, pw, kw, sw, "width")?;
        Ok(Self {
            batch,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            ph,
            pw,
            sh,
            sw,
            ho,
            wo,
        })
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    fn in_len(&self) -> usize {
        self.cin * self.h * self.w
    }

    fn out_len(&self) -> usize {
        self.cout * self.ho * self.wo
    }

    /// Output columns whose tap `kj` lands inside the input row.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let (w, pw, sw, wo) = (self.w as isize, self.pw as isize, self.sw as isize, self.wo);
        let kj = kj as isize;
        // ow*sw + kj - pw in [0, w)
        let lo = (pw - kj).max(0);
        let lo = ((lo + sw - 1) / sw) as usize;
        let hi_num = w - 1 + pw - kj;
        let hi = if hi_num < 0 {
            0
        } else {
            ((hi_num / sw) as usize + 1).min(wo)
        };
        (lo.min(wo), hi.max(lo.min(wo)))
    }

    fn in_row(&self, oh: usize, ki: usize) -> Option<usize> {
        let ih = (oh * self.sh + ki) as isize - self.ph as isize;
        (ih >= 0 && (ih as usize) < self.h).then_some(ih as usize)
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let n = g.col_cols();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * n..(row + 1) * n];
                let (lo, hi) = g.valid_cols(kj);
                for oh in 0..g.ho {
                    let seg = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                    match g.in_row(oh, ki) {
                        None => seg.fill(T::zero()),
                        Some(ih) => {
                            let src = &plane[ih * g.w..(ih + 1) * g.w];
                            seg[..lo].fill(T::zero());
                            seg[hi..].fill(T::zero());
                            let off = kj as isize - g.pw as isize;
                            if g.sw == 1 {
                                let start = (lo as isize + off) as usize;
                                seg[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                            } else {
                                for (ow, v) in seg.iter_mut().enumerate().take(hi).skip(lo) {
                                    *v = src[(ow as isize * g.sw as isize + off) as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let n = g.col_cols();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * n..(row + 1) * n];
                let (lo, hi) = g.valid_cols(kj);
                let off = kj as isize - g.pw as isize;
                for oh in 0..g.ho {
                    if let Some(ih) = g.in_row(oh, ki) {
                        let seg = &src[oh * g.wo..(oh + 1) * g.wo];
                        let dst = &mut plane[ih * g.w..(ih + 1) * g.w];
                        for ow in lo..hi {
                            dst[(ow as isize * g.sw as isize + off) as usize] += seg[ow];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (k, n) = (g.col_rows(), g.col_cols());
    let mut out = vec![T::zero(); g.batch * g.out_len()];
    out.par_chunks_mut(g.out_len()).enumerate().for_each_init(
        || vec![T::zero(); k * n],
        |col, (b, out_b)| {
            im2col(g, &x[b * g.in_len()..(b + 1) * g.in_len()], col);
            if let Some(bias) = bias {
                for (co, row) in out_b.chunks_mut(n).enumerate() {
                    row.fill(bias[co]);
                }
            }
            let beta = if bias.is_some() { T::one() } else { T::zero() };
            T::gemm(g.cout, k, n, T::one(), w, (k, 1), col, (n, 1), beta, out_b, (n, 1));
        },
    );
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

pub fn conv_backward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], dy: &[T], need_dx: bool) -> ConvGrads<T> {
    let (k, n) = (g.col_rows(), g.col_cols());
    let per_sample = |col: &mut Vec<T>, dcol: &mut Vec<T>, b: usize, dx_b: Option<&mut [T]>| {
        let x_b = &x[b * g.in_len()..(b + 1) * g.in_len()];
        let dy_b = &dy[b * g.out_len()..(b + 1) * g.out_len()];
        im2col(g, x_b, col);
        let mut dw_b = vec![T::zero(); g.cout * k];
        // dW_b = dY_b [cout x n] * col^T [n x k]
        T::gemm(
            g.cout,
            n,
            k,
            T::one(),
            dy_b,
            (n, 1),
            col,
            (1, n),
            T::zero(),
            &mut dw_b,
            (k, 1),
        );
        let db_b: Vec<T> = dy_b.chunks(n).map(|r| r.iter().copied().sum()).collect();
        if let Some(dx_b) = dx_b {
            // dcol = W^T [k x cout] * dY_b [cout x n]
            T::gemm(k, g.cout, n, T::one(), w, (1, k), dy_b, (n, 1), T::zero(), dcol, (n, 1));
            col2im_add(g, dcol, dx_b);
        }
        (dw_b, db_b)
    };

    let (dx, partials): (Option<Vec<T>>, Vec<(Vec<T>, Vec<T>)>) = if need_dx {
        let mut dx = vec![T::zero(); g.batch * g.in_len()];
        let partials = dx
            .par_chunks_mut(g.in_len())
            .enumerate()
            .map_init(
                || (vec![T::zero(); k * n], vec![T::zero(); k * n]),
                |(col, dcol), (b, dx_b)| per_sample(col, dcol, b, Some(dx_b)),
            )
            .collect();
        (Some(dx), partials)
    } else {
        let partials = (0..g.batch)
            .into_par_iter()
            .map_init(
                || (vec![T::zero(); k * n], Vec::new()),
                |(col, dcol), b| per_sample(col, dcol, b, None),
            )
            .collect();
        (None, partials)
    };

    let mut dw = vec![T::zero(); g.cout * k];
    let mut db = vec![T::zero(); g.cout];
    for (dw_b, db_b) in &partials {
        for (a, &v) in dw.iter_mut().zip(dw_b) {
            *a += v;
        }
        for (a, &v) in db.iter_mut().zip(db_b) {
            *a += v;
        }
    }
    ConvGrads { dx, dw, db }
}

/// `out[b, c] = sum_s x[b, c, s] * w[c, s] (+ bias[c])`.
pub fn channel_weighted_sum<T: Scalar>(
    batch: usize,
    channels: usize,
    span: usize,
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let mut out = Vec::with_capacity(batch * channels);
    for b in 0..batch {
        for c in 0..channels {
            let xs = &x[(b * channels + c) * span..(b * channels + c + 1) * span];
            let ws = &w[c * span..(c + 1) * span];
            let mut acc: T = xs.iter().zip(ws).map(|(&a, &b)| a * b).sum();
            if let Some(bias) = bias {
                acc += bias[c];
            }
            out.push(acc);
        }
    }
    out
}

pub fn avgpool2_forward<T: Scalar>(x: &[T], shape: &[usize]) -> Result<(Vec<T>, Vec<usize>)> {
    let half = T::from_f64_lossy(0.5);
    let quarter = T::from_f64_lossy(0.25);
    match *shape {
        [b, c, l] => {
            if l < 2 {
                return Err(Error::shape(format!("avgpool needs extent >= 2, got {l}")));
            }
            let lo = l / 2;
            let mut out = Vec::with_capacity(b * c * lo);
            for row in x.chunks(l) {
                for i in 0..lo {
                    out.push((row[2 * i] + row[2 * i + 1]) * half);
                }
            }
            Ok((out, vec![b, c, lo]))
        }
        [b, c, h, w] => {
            if h < 2 || w < 2 {
                return Err(Error::shape(format!("avgpool needs extents >= 2, got {h}x{w}")));
            }
            let (ho, wo) = (h / 2, w / 2);
            let mut out = Vec::with_capacity(b * c * ho * wo);
            for plane in x.chunks(h * w) {
                for i in 0..ho {
                    let r0 = &plane[2 * i * w..(2 * i + 1) * w];
                    let r1 = &plane[(2 * i + 1) * w..(2 * i + 2) * w];
                    for j in 0..wo {
                        out.push((r0[2 * j] + r0[2 * j + 1] + r1[2 * j] + r1[2 * j + 1]) * quarter);
                    }
                }
            }
            Ok((out, vec![b, c, ho, wo]))
        }
        _ => Err(Error::shape(format!(
            "avgpool expects rank 3 or 4 input, got {shape:?}"
        ))),
    }
}

pub fn avgpool2_backward<T: Scalar>(dy: &[T], in_shape: &[usize]) -> Vec<T> {
    let n: usize = in_shape.iter().product();
    let mut dx = vec![T::zero(); n];
    match *in_shape {
        [_, _, l] => {
            let lo = l / 2;
            let half = T::from_f64_lossy(0.5);
            for (row, g) in dx.chunks_mut(l).zip(dy.chunks(lo)) {
                for i in 0..lo {
                    row[2 * i] = g[i] * half;
                    row[2 * i + 1] = g[i] * half;
                }
            }
        }
        [_, _, h, w] => {
            let (ho, wo) = (h / 2, w / 2);
            let quarter = T::from_f64_lossy(0.25);
            for (plane, g) in dx.chunks_mut(h * w).zip(dy.chunks(ho * wo)) {
                for i in 0..ho {
                    for j in 0..wo {
                        let v = g[i * wo + j] * quarter;
                        plane[2 * i * w + 2 * j] = v;
                        plane[2 * i * w + 2 * j + 1] = v;
                        plane[(2 * i + 1) * w + 2 * j] = v;
                        plane[(2 * i + 1) * w + 2 * j + 1] = v;
                    }
                }
            }
        }
        _ => unreachable!("shape validated in forward"),
    }
    dx
}
