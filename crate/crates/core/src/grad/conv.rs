//! One-dimensional convolution kernels (cross-correlation, as in most deep
//! learning frameworks). Layout: input `[batch, c_in, len]`, weight
//! `[c_out, c_in, kernel]`, output `[batch, c_out, len_out]`.

use super::Scalar;
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dSpec {
    pub stride: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

impl Conv1dSpec {
    pub fn valid() -> Self {
        Self {
            stride: 1,
            pad_left: 0,
            pad_right: 0,
        }
    }

    /// Zero padding that keeps `len_out = ceil(len / stride)`; extra padding
    /// for even kernels goes on the right.
    pub fn same(kernel: usize, stride: usize) -> Self {
        let total = kernel - 1;
        Self {
            stride,
            pad_left: total / 2,
            pad_right: total - total / 2,
        }
    }
}

pub fn conv1d_output_len(len: usize, kernel: usize, spec: Conv1dSpec) -> Option<usize> {
    let padded = len + spec.pad_left + spec.pad_right;
    if spec.stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / spec.stride + 1)
}

#[derive(Clone, Copy)]
pub(super) struct Geometry {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub len: usize,
    pub kernel: usize,
    pub len_out: usize,
    pub spec: Conv1dSpec,
}

impl Geometry {
    fn cols_len(&self) -> usize {
        self.c_in * self.kernel * self.len_out
    }

    /// Valid output index range `[lo, hi)` for kernel tap `k`.
    fn tap_range(&self, k: usize) -> (usize, usize) {
        let s = self.spec.stride;
        let pl = self.spec.pad_left;
        // need 0 <= t*s + k - pl < len
        let lo = if pl > k { (pl - k).div_ceil(s) } else { 0 };
        let hi_excl = (self.len + pl).saturating_sub(k); // t*s < len + pl - k
        let hi = hi_excl.div_ceil(s).min(self.len_out);
        (lo.min(hi), hi)
    }

    fn im2col<S: Scalar>(&self, x: &[S], cols: &mut [S]) {
        let s = self.spec.stride;
        for ci in 0..self.c_in {
            let xrow = &x[ci * self.len..(ci + 1) * self.len];
            for k in 0..self.kernel {
                let row = &mut cols[(ci * self.kernel + k) * self.len_out..][..self.len_out];
                let (lo, hi) = self.tap_range(k);
                row[..lo].fill(S::zero());
                row[hi..].fill(S::zero());
                let base = k as isize - self.spec.pad_left as isize;
                if s == 1 {
                    let start = (lo as isize + base) as usize;
                    row[lo..hi].copy_from_slice(&xrow[start..start + (hi - lo)]);
                } else {
                    for (t, r) in row.iter_mut().enumerate().take(hi).skip(lo) {
                        *r = xrow[(t as isize * s as isize + base) as usize];
                    }
                }
            }
        }
    }

    fn col2im<S: Scalar>(&self, cols: &[S], dx: &mut [S]) {
        let s = self.spec.stride;
        for ci in 0..self.c_in {
            let dxrow = &mut dx[ci * self.len..(ci + 1) * self.len];
            for k in 0..self.kernel {
                let row = &cols[(ci * self.kernel + k) * self.len_out..][..self.len_out];
                let (lo, hi) = self.tap_range(k);
                let base = k as isize - self.spec.pad_left as isize;
                for (t, &r) in row.iter().enumerate().take(hi).skip(lo) {
                    let idx = (t as isize * s as isize + base) as usize;
                    dxrow[idx] = dxrow[idx] + r;
                }
            }
        }
    }
}

#[inline]
fn axpy<S: Scalar>(a: S, x: &[S], y: &mut [S]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv = *yv + a * xv;
    }
}

#[inline]
fn dot<S: Scalar>(x: &[S], y: &[S]) -> S {
    // Independent lanes so the loop vectorises without reassociation.
    let mut acc = [S::zero(); 8];
    let xs = x.chunks_exact(8);
    let ys = y.chunks_exact(8);
    let tail: S = xs.remainder().iter().zip(ys.remainder()).map(|(&a, &b)| a * b).sum();
    for (xc, yc) in xs.zip(ys) {
        for l in 0..8 {
            acc[l] = acc[l] + xc[l] * yc[l];
        }
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

pub(super) fn forward<S: Scalar>(g: Geometry, x: &[S], w: &[S], bias: Option<&[S]>) -> Vec<S> {
    let out_per = g.c_out * g.len_out;
    let ck = g.c_in * g.kernel;
    let mut out = vec![S::zero(); g.batch * out_per];
    par::for_each_chunk_mut(&mut out, out_per, |n, o| {
        let mut cols = vec![S::zero(); g.cols_len()];
        g.im2col(&x[n * g.c_in * g.len..(n + 1) * g.c_in * g.len], &mut cols);
        for co in 0..g.c_out {
            let orow = &mut o[co * g.len_out..(co + 1) * g.len_out];
            if let Some(b) = bias {
                orow.fill(b[co]);
            }
            for j in 0..ck {
                let wv = w[co * ck + j];
                axpy(wv, &cols[j * g.len_out..(j + 1) * g.len_out], orow);
            }
        }
    });
    out
}

pub(super) struct ConvGrads<S> {
    pub dx: Option<Vec<S>>,
    pub dw: Option<Vec<S>>,
    pub db: Option<Vec<S>>,
}

pub(super) fn backward<S: Scalar>(
    g: Geometry,
    x: &[S],
    w: &[S],
    gout: &[S],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<S> {
    let ck = g.c_in * g.kernel;
    let in_per = g.c_in * g.len;
    let out_per = g.c_out * g.len_out;

    // Per-sample partials, reduced in index order afterwards so the result
    // does not depend on scheduling.
    let partials = par::map_range(g.batch, |n| {
        let go = &gout[n * out_per..(n + 1) * out_per];
        let mut dw = Vec::new();
        let mut db = Vec::new();
        let mut dx = Vec::new();
        if need_dw {
            let mut cols = vec![S::zero(); g.cols_len()];
            g.im2col(&x[n * in_per..(n + 1) * in_per], &mut cols);
            dw = vec![S::zero(); g.c_out * ck];
            for co in 0..g.c_out {
                let grow = &go[co * g.len_out..(co + 1) * g.len_out];
                for j in 0..ck {
                    dw[co * ck + j] = dot(grow, &cols[j * g.len_out..(j + 1) * g.len_out]);
                }
            }
        }
        if need_db {
            db = (0..g.c_out)
                .map(|co| go[co * g.len_out..(co + 1) * g.len_out].iter().copied().sum())
                .collect();
        }
        if need_dx {
            let mut dcols = vec![S::zero(); g.cols_len()];
            for co in 0..g.c_out {
                let grow = &go[co * g.len_out..(co + 1) * g.len_out];
                for j in 0..ck {
                    axpy(w[co * ck + j], grow, &mut dcols[j * g.len_out..(j + 1) * g.len_out]);
                }
            }
            dx = vec![S::zero(); in_per];
            g.col2im(&dcols, &mut dx);
        }
        (dx, dw, db)
    });

    let mut grads = ConvGrads {
        dx: need_dx.then(|| Vec::with_capacity(g.batch * in_per)),
        dw: need_dw.then(|| vec![S::zero(); g.c_out * ck]),
        db: need_db.then(|| vec![S::zero(); g.c_out]),
    };
    for (dx, dw, db) in partials {
        if let Some(acc) = grads.dx.as_mut() {
            acc.extend_from_slice(&dx);
        }
        if let Some(acc) = grads.dw.as_mut() {
            acc.iter_mut().zip(&dw).for_each(|(a, &v)| *a = *a + v);
        }
        if let Some(acc) = grads.db.as_mut() {
            acc.iter_mut().zip(&db).for_each(|(a, &v)| *a = *a + v);
        }
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(g: Geometry, x: &[f64], w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.batch * g.c_out * g.len_out];
        for n in 0..g.batch {
            for co in 0..g.c_out {
                for t in 0..g.len_out {
                    let mut acc = 0.0;
                    for ci in 0..g.c_in {
                        for k in 0..g.kernel {
                            let idx = (t * g.spec.stride + k) as isize - g.spec.pad_left as isize;
                            if idx >= 0 && (idx as usize) < g.len {
                                acc += w[(co * g.c_in + ci) * g.kernel + k]
                                    * x[(n * g.c_in + ci) * g.len + idx as usize];
                            }
                        }
                    }
                    out[(n * g.c_out + co) * g.len_out + t] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn output_length() {
        assert_eq!(conv1d_output_len(10, 3, Conv1dSpec::valid()), Some(8));
        assert_eq!(conv1d_output_len(512, 9, Conv1dSpec::same(9, 2)), Some(256));
        assert_eq!(conv1d_output_len(512, 128, Conv1dSpec::same(128, 1)), Some(512));
        assert_eq!(conv1d_output_len(2, 3, Conv1dSpec::valid()), None);
    }

    #[test]
    fn im2col_matches_naive_for_strides_and_padding() {
        for &(len, kernel, stride, pl, pr) in
            &[(10, 3, 1, 0, 0), (11, 4, 2, 1, 2), (9, 9, 2, 4, 4), (7, 2, 3, 0, 1)]
        {
            let spec = Conv1dSpec {
                stride,
                pad_left: pl,
                pad_right: pr,
            };
            let len_out = conv1d_output_len(len, kernel, spec).unwrap();
            let g = Geometry {
                batch: 2,
                c_in: 3,
                c_out: 2,
                len,
                kernel,
                len_out,
                spec,
            };
            let x: Vec<f64> = (0..2 * 3 * len).map(|i| (i as f64 * 0.37).sin()).collect();
            let w: Vec<f64> = (0..2 * 3 * kernel).map(|i| (i as f64 * 0.71).cos()).collect();
            let fast = forward(g, &x, &w, None);
            let slow = naive(g, &x, &w);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }
}
