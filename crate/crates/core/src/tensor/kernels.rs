//! Raw forward/backward loops shared by the dense and sparse ops.

use std::ops::Range;

use crate::scalar::Scalar;

/// Output positions `o` whose input tap `o * stride + koff - pad` is in bounds.
#[inline]
pub(crate) fn tap_range(
    out_len: usize,
    in_len: usize,
    koff: usize,
    stride: usize,
    pad: usize,
) -> Range<usize> {
    let lo = if koff >= pad {
        0
    } else {
        (pad - koff).div_ceil(stride)
    };
    if in_len + pad < koff + 1 {
        return 0..0;
    }
    let hi = ((in_len - 1 + pad - koff) / stride + 1).min(out_len);
    lo.min(hi)..hi
}

#[inline]
pub(crate) fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::ZERO;
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Geometry of a dense `[N, Cin, D, H, W]` cross-correlation with a cubic kernel.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    fn in_plane(&self) -> usize {
        self.input.iter().product()
    }
    fn out_plane(&self) -> usize {
        self.output.iter().product()
    }

    /// Calls `f(kd, kh, kw, od, oh, ow_range, in_offset_of_row_start)` for
    /// every valid kernel tap and output row.
    #[inline]
    fn for_each_row(&self, mut f: impl FnMut(usize, usize, usize, Range<usize>, usize, usize)) {
        let [d, h, w] = self.input;
        let [od_n, oh_n, ow_n] = self.output;
        let (s, p, k) = (self.stride, self.pad, self.k);
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let rw = tap_range(ow_n, w, kw, s, p);
                    if rw.is_empty() {
                        continue;
                    }
                    let tap = (kd * k + kh) * k + kw;
                    for od in tap_range(od_n, d, kd, s, p) {
                        let id = od * s + kd - p;
                        for oh in tap_range(oh_n, h, kh, s, p) {
                            let ih = oh * s + kh - p;
                            // Input column of the first valid output column.
                            let iw0 = rw.start * s + kw - p;
                            f(tap, od, oh, rw.clone(), (id * h + ih) * w, iw0);
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv3d_forward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
    out: &mut [T],
) {
    let (ip, op, k3) = (g.in_plane(), g.out_plane(), g.k * g.k * g.k);
    let [_, oh_n, ow_n] = g.output;
    let s = g.stride;
    for n in 0..g.n {
        for co in 0..g.cout {
            let out_plane = &mut out[(n * g.cout + co) * op..][..op];
            let bias = b.map_or(T::ZERO, |b| b[co]);
            out_plane.fill(bias);
            for ci in 0..g.cin {
                let in_plane = &x[(n * g.cin + ci) * ip..][..ip];
                let wk = &w[(co * g.cin + ci) * k3..][..k3];
                g.for_each_row(|tap, od, oh, rw, row, iw0| {
                    let wv = wk[tap];
                    let dst = &mut out_plane[(od * oh_n + oh) * ow_n..][rw.clone()];
                    if s == 1 {
                        axpy(wv, &in_plane[row + iw0..][..dst.len()], dst);
                    } else {
                        for (j, o) in dst.iter_mut().enumerate() {
                            *o += wv * in_plane[row + iw0 + j * s];
                        }
                    }
                });
            }
        }
    }
}

/// Accumulates input, weight and bias gradients of [`conv3d_forward`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let (ip, op, k3) = (g.in_plane(), g.out_plane(), g.k * g.k * g.k);
    let [_, oh_n, ow_n] = g.output;
    let s = g.stride;
    if let Some(db) = db {
        for n in 0..g.n {
            for co in 0..g.cout {
                db[co] += dy[(n * g.cout + co) * op..][..op].iter().copied().sum::<T>();
            }
        }
    }
    for n in 0..g.n {
        for co in 0..g.cout {
            let dy_plane = &dy[(n * g.cout + co) * op..][..op];
            for ci in 0..g.cin {
                let in_plane = &x[(n * g.cin + ci) * ip..][..ip];
                let widx = (co * g.cin + ci) * k3;
                if let Some(dx) = dx.as_deref_mut() {
                    let dx_plane = &mut dx[(n * g.cin + ci) * ip..][..ip];
                    let wk = &w[widx..][..k3];
                    g.for_each_row(|tap, od, oh, rw, row, iw0| {
                        let wv = wk[tap];
                        let src = &dy_plane[(od * oh_n + oh) * ow_n..][rw.clone()];
                        if s == 1 {
                            axpy(wv, src, &mut dx_plane[row + iw0..][..src.len()]);
                        } else {
                            for (j, &d) in src.iter().enumerate() {
                                dx_plane[row + iw0 + j * s] += wv * d;
                            }
                        }
                    });
                }
                if let Some(dw) = dw.as_deref_mut() {
                    let dwk = &mut dw[widx..][..k3];
                    g.for_each_row(|tap, od, oh, rw, row, iw0| {
                        let src = &dy_plane[(od * oh_n + oh) * ow_n..][rw.clone()];
                        dwk[tap] += if s == 1 {
                            dot(src, &in_plane[row + iw0..][..src.len()])
                        } else {
                            src.iter()
                                .enumerate()
                                .map(|(j, &d)| d * in_plane[row + iw0 + j * s])
                                .sum()
                        };
                    });
                }
            }
        }
    }
}

/// `y[m, fout] = x[m, fin] · wᵀ + b`.
pub(crate) fn linear_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
    fin: usize,
    fout: usize,
    out: &mut [T],
) {
    for (xi, yi) in x.chunks_exact(fin).zip(out.chunks_exact_mut(fout)) {
        for (o, y) in yi.iter_mut().enumerate() {
            let bias = b.map_or(T::ZERO, |b| b[o]);
            *y = bias + dot(xi, &w[o * fin..][..fin]);
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    fin: usize,
    fout: usize,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    for (i, dyi) in dy.chunks_exact(fout).enumerate() {
        let xi = &x[i * fin..][..fin];
        for (o, &d) in dyi.iter().enumerate() {
            if let Some(dx) = dx.as_deref_mut() {
                axpy(d, &w[o * fin..][..fin], &mut dx[i * fin..][..fin]);
            }
            if let Some(dw) = dw.as_deref_mut() {
                axpy(d, xi, &mut dw[o * fin..][..fin]);
            }
            if let Some(db) = db.as_deref_mut() {
                db[o] += d;
            }
        }
    }
}

/// Normalization statistics for one group of elements.
#[derive(Clone, Copy, Debug)]
pub(crate) struct GroupStats<T> {
    pub mean: T,
    pub rstd: T,
}

/// Mean and reciprocal standard deviation (biased variance) of `values`.
pub(crate) fn group_stats<T: Scalar>(
    values: impl Iterator<Item = T> + Clone,
    count: usize,
    eps: T,
) -> GroupStats<T> {
    let cnt = T::from_f64(count as f64);
    let mean = values.clone().sum::<T>() / cnt;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<T>() / cnt;
    GroupStats {
        mean,
        rstd: T::ONE / (var + eps).sqrt(),
    }
}

/// Given per-element `dxhat` and `xhat` for one normalized group, returns the
/// two reductions needed by the normalization backward.
pub(crate) fn norm_backward_terms<T: Scalar>(
    pairs: impl Iterator<Item = (T, T)>,
    count: usize,
) -> (T, T) {
    let mut s1 = T::ZERO;
    let mut s2 = T::ZERO;
    for (dxh, xh) in pairs {
        s1 += dxh;
        s2 += dxh * xh;
    }
    let cnt = T::from_f64(count as f64);
    (s1 / cnt, s2 / cnt)
}

pub(crate) const GELU_C: f64 = 0.044_715;
pub(crate) const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

#[inline]
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(SQRT_2_OVER_PI);
    let half = T::from_f64(0.5);
    half * x * (T::ONE + (a * (x + c * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(SQRT_2_OVER_PI);
    let half = T::from_f64(0.5);
    let t = (a * (x + c * x * x * x)).tanh();
    let three = T::from_f64(3.0);
    half * (T::ONE + t) + half * x * (T::ONE - t * t) * a * (T::ONE + three * c * x * x)
}

/// In-place numerically stable softmax of one row.
pub(crate) fn softmax_row<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(row[0], T::max);
    let mut sum = T::ZERO;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tap_range_matches_enumeration() {
        for in_len in 1..9 {
            for k in [1usize, 3, 5] {
                for pad in 0..=k / 2 {
                    for stride in 1..4 {
                        if in_len + 2 * pad < k {
                            continue;
                        }
                        let out_len = (in_len + 2 * pad - k) / stride + 1;
                        for koff in 0..k {
                            let expect: Vec<usize> = (0..out_len)
                                .filter(|&o| {
                                    let i = (o * stride + koff) as isize - pad as isize;
                                    i >= 0 && (i as usize) < in_len
                                })
                                .collect();
                            let got: Vec<usize> =
                                tap_range(out_len, in_len, koff, stride, pad).collect();
                            assert_eq!(got, expect, "in {in_len} k {k} p {pad} s {stride} off {koff}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0f64, -1.0, -0.1, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
        assert_eq!(gelu(0.0f64), 0.0);
    }
}
