//! Raw loops behind the differentiable ops. All of them accumulate into `out`.

use super::tensor::Scalar;

#[inline]
pub(crate) fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * *xv;
    }
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (xa, xb) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut s = T::zero();
    for i in chunks * 8..a.len() {
        s += a[i] * b[i];
    }
    acc.iter().fold(s, |s, &v| s + v)
}

/// `c[m,n] += op(a) · op(b)`; `a` is `[m,k]` (or `[k,m]` when `ta`), `b` is `[k,n]` (or `[n,k]` when `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    ta: bool,
    tb: bool,
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
) {
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                let crow = &mut c[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = a[i * k + p];
                    if av != T::zero() {
                        axpy(av, &b[p * n..(p + 1) * n], crow);
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
                }
            }
        }
        (true, false) => {
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                for i in 0..m {
                    let av = a[p * m + i];
                    if av != T::zero() {
                        axpy(av, brow, &mut c[i * n..(i + 1) * n]);
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut s = T::zero();
                    for p in 0..k {
                        s += a[p * m + i] * b[j * k + p];
                    }
                    c[i * n + j] += s;
                }
            }
        }
    }
}

/// Kernel/stride/padding for a channels-last 3-D cross-correlation over `(t, h, w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvGeom {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    pub fn output_dims(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.pad[a];
            if padded < self.kernel[a] || self.stride[a] == 0 {
                return None;
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Some(out)
    }
}

pub(crate) struct ConvDims {
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub cin: usize,
    pub cout: usize,
}

/// Calls `f(out_pos, in_pos, kernel_offset)` for every in-bounds tap.
#[inline]
fn for_each_tap(geom: &ConvGeom, dims: &ConvDims, mut f: impl FnMut(usize, usize, usize)) {
    let [it, ih, iw] = dims.input;
    let [ot, oh, ow] = dims.output;
    let [kt, kh, kw] = geom.kernel;
    let [st, sh, sw] = geom.stride;
    let [pt, ph, pw] = geom.pad;
    for t in 0..ot {
        for h in 0..oh {
            for w in 0..ow {
                let opos = (t * oh + h) * ow + w;
                for dt in 0..kt {
                    let xt = (t * st + dt) as isize - pt as isize;
                    if xt < 0 || xt >= it as isize {
                        continue;
                    }
                    for dh in 0..kh {
                        let xh = (h * sh + dh) as isize - ph as isize;
                        if xh < 0 || xh >= ih as isize {
                            continue;
                        }
                        for dw in 0..kw {
                            let xw = (w * sw + dw) as isize - pw as isize;
                            if xw < 0 || xw >= iw as isize {
                                continue;
                            }
                            let ipos = ((xt as usize * ih) + xh as usize) * iw + xw as usize;
                            f(opos, ipos, (dt * kh + dh) * kw + dw);
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv3d_forward<T: Scalar>(
    geom: &ConvGeom,
    dims: &ConvDims,
    x: &[T],
    w: &[T],
    b: &[T],
    out: &mut [T],
) {
    let (ci, co) = (dims.cin, dims.cout);
    for o in out.chunks_mut(co) {
        o.copy_from_slice(b);
    }
    for_each_tap(geom, dims, |opos, ipos, k| {
        let xs = &x[ipos * ci..(ipos + 1) * ci];
        let os = &mut out[opos * co..(opos + 1) * co];
        let wk = &w[k * ci * co..(k + 1) * ci * co];
        for (c, &xv) in xs.iter().enumerate() {
            if xv != T::zero() {
                axpy(xv, &wk[c * co..(c + 1) * co], os);
            }
        }
    });
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3d_backward<T: Scalar>(
    geom: &ConvGeom,
    dims: &ConvDims,
    x: &[T],
    w: &[T],
    gout: &[T],
    gx: &mut [T],
    gw: &mut [T],
    gb: &mut [T],
) {
    let (ci, co) = (dims.cin, dims.cout);
    for g in gout.chunks(co) {
        for (acc, v) in gb.iter_mut().zip(g) {
            *acc += *v;
        }
    }
    for_each_tap(geom, dims, |opos, ipos, k| {
        let go = &gout[opos * co..(opos + 1) * co];
        let xs = &x[ipos * ci..(ipos + 1) * ci];
        let base = k * ci * co;
        for c in 0..ci {
            let wrow = &w[base + c * co..base + (c + 1) * co];
            gx[ipos * ci + c] += dot(wrow, go);
            let xv = xs[c];
            if xv != T::zero() {
                axpy(xv, go, &mut gw[base + c * co..base + (c + 1) * co]);
            }
        }
    });
}
