//! Raw dense kernels shared by the tape ops and the data pipeline.
//!
//! Everything here is layout-explicit (row-major) and allocation-free where
//! it matters. The matmul uses an i-k-j loop so the inner loop streams both
//! the output row and the `b` row; with opt-level 3 this autovectorizes.

use super::Element;

/// c[M×N] += a[M×K] · b[K×N]. `c` must be zeroed by the caller when a plain
/// product is wanted.
pub fn matmul_acc<E: Element>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == E::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// out[N×M] = transpose of a[M×N].
pub fn transpose_into<E: Element>(a: &[E], out: &mut [E], m: usize, n: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
}

/// How output sample positions map back onto the input axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AxisMap {
    /// src(o) = o·(in−1)/(out−1): endpoints pinned to endpoints. Used for
    /// arbitrary-size resampling (positional embeddings).
    AlignCorners,
    /// src(o) = o/f with edge clamp, for integer upscale factors. Output
    /// index f·i lands exactly on input index i, which makes integer-factor
    /// round trips exact.
    Stride(usize),
}

/// Per-output-sample interpolation stencil: (left index, right index, right weight).
pub fn axis_stencil(map: AxisMap, in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    assert!(in_len > 0 && out_len > 0);
    (0..out_len)
        .map(|o| {
            let src = match map {
                AxisMap::AlignCorners => {
                    if out_len == 1 {
                        0.0
                    } else {
                        o as f64 * (in_len - 1) as f64 / (out_len - 1) as f64
                    }
                }
                AxisMap::Stride(f) => (o as f64 / f as f64).min((in_len - 1) as f64),
            };
            let i0 = src.floor() as usize;
            let i0 = i0.min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let w1 = src - i0 as f64;
            (i0, i1, w1)
        })
        .collect()
}

/// Bilinear resample of a channels-last [h×w×c] grid into [oh×ow×c].
pub fn resample_grid<E: Element>(
    input: &[E],
    h: usize,
    w: usize,
    c: usize,
    oh: usize,
    ow: usize,
    map: AxisMap,
    out: &mut [E],
) {
    debug_assert_eq!(input.len(), h * w * c);
    debug_assert_eq!(out.len(), oh * ow * c);
    let rows = axis_stencil(map, h, oh);
    let cols = axis_stencil(map, w, ow);
    for (oi, &(r0, r1, wr)) in rows.iter().enumerate() {
        for (oj, &(c0, c1, wc)) in cols.iter().enumerate() {
            let o = (oi * ow + oj) * c;
            let w00 = E::from_f64((1.0 - wr) * (1.0 - wc));
            let w01 = E::from_f64((1.0 - wr) * wc);
            let w10 = E::from_f64(wr * (1.0 - wc));
            let w11 = E::from_f64(wr * wc);
            let p00 = (r0 * w + c0) * c;
            let p01 = (r0 * w + c1) * c;
            let p10 = (r1 * w + c0) * c;
            let p11 = (r1 * w + c1) * c;
            for ch in 0..c {
                out[o + ch] = w00 * input[p00 + ch]
                    + w01 * input[p01 + ch]
                    + w10 * input[p10 + ch]
                    + w11 * input[p11 + ch];
            }
        }
    }
}

/// Adjoint of [`resample_grid`]: scatters output-grid gradients back onto the
/// input grid with the same stencil weights.
pub fn resample_grid_adjoint<E: Element>(
    d_out: &[E],
    h: usize,
    w: usize,
    c: usize,
    oh: usize,
    ow: usize,
    map: AxisMap,
    d_in: &mut [E],
) {
    debug_assert_eq!(d_out.len(), oh * ow * c);
    debug_assert_eq!(d_in.len(), h * w * c);
    let rows = axis_stencil(map, h, oh);
    let cols = axis_stencil(map, w, ow);
    for (oi, &(r0, r1, wr)) in rows.iter().enumerate() {
        for (oj, &(c0, c1, wc)) in cols.iter().enumerate() {
            let o = (oi * ow + oj) * c;
            let w00 = E::from_f64((1.0 - wr) * (1.0 - wc));
            let w01 = E::from_f64((1.0 - wr) * wc);
            let w10 = E::from_f64(wr * (1.0 - wc));
            let w11 = E::from_f64(wr * wc);
            let p00 = (r0 * w + c0) * c;
            let p01 = (r0 * w + c1) * c;
            let p10 = (r1 * w + c0) * c;
            let p11 = (r1 * w + c1) * c;
            for ch in 0..c {
                let g = d_out[o + ch];
                d_in[p00 + ch] += w00 * g;
                d_in[p01 + ch] += w01 * g;
                d_in[p10 + ch] += w10 * g;
                d_in[p11 + ch] += w11 * g;
            }
        }
    }
}
