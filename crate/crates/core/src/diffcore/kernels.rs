//! Low-level compute kernels shared by forward and backward passes.
//!
//! All kernels are deterministic: parallel splits are pure functions of the
//! problem size, never of the thread count, and no reduction ever combines
//! partial sums across threads in arrival order.

use rayon::prelude::*;

use crate::diffcore::Scalar;

/// Minimum elements before an elementwise loop is worth parallelizing.
pub const PAR_ELEM_THRESHOLD: usize = 1 << 15;
const ELEM_CHUNK: usize = 1 << 13;
/// Row count above which matmul output is striped across threads.
const GEMM_STRIPE_MIN_ROWS: usize = 96;
const GEMM_STRIPES: usize = 4;

/// C(m x n) = A(m x k) * B(k x n) + beta * C, all row-major contiguous.
pub fn mm_nn<E: Scalar>(m: usize, k: usize, n: usize, a: &[E], b: &[E], c: &mut [E], beta: E) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    striped_gemm(m, k, n, a, k as isize, 1, b, n as isize, 1, c, beta);
}

/// C(m x n) = A(m x k) * B(n x k)^T + beta * C.
pub fn mm_nt<E: Scalar>(m: usize, k: usize, n: usize, a: &[E], b: &[E], c: &mut [E], beta: E) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    striped_gemm(m, k, n, a, k as isize, 1, b, 1, k as isize, c, beta);
}

/// C(m x n) = A(k x m)^T * B(k x n) + beta * C.
pub fn mm_tn<E: Scalar>(m: usize, k: usize, n: usize, a: &[E], b: &[E], c: &mut [E], beta: E) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    striped_gemm(m, k, n, a, 1, m as isize, b, n as isize, 1, c, beta);
}

#[allow(clippy::too_many_arguments)]
fn striped_gemm<E: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[E],
    rsa: isize,
    csa: isize,
    b: &[E],
    rsb: isize,
    csb: isize,
    c: &mut [E],
    beta: E,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == E::zero() {
            c.iter_mut().for_each(|x| *x = E::zero());
        }
        return;
    }
    let a_ptr = a.as_ptr() as usize;
    let b_ptr = b.as_ptr() as usize;
    if m >= GEMM_STRIPE_MIN_ROWS {
        let stripe = m.div_ceil(GEMM_STRIPES);
        c.par_chunks_mut(stripe * n).enumerate().for_each(|(i, cs)| {
            let rows = cs.len() / n;
            let row0 = i * stripe;
            unsafe {
                let ap = (a_ptr as *const E).offset(row0 as isize * rsa);
                E::gemm(rows, k, n, E::one(), ap, rsa, csa, b_ptr as *const E, rsb, csb, beta, cs.as_mut_ptr(), n as isize, 1);
            }
        });
    } else {
        unsafe {
            E::gemm(m, k, n, E::one(), a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
        }
    }
}

/// Batched C[i] = A[i] * B[i] over the leading axis; `nt` transposes B slices.
///
/// Attention-shaped slices (tiny inner or output widths) bypass the packed
/// gemm, whose per-call overhead dominates at these sizes, in favor of
/// register-friendly axpy loops.
pub fn bmm<E: Scalar>(
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a: &[E],
    b: &[E],
    c: &mut [E],
    nt: bool,
    beta: E,
) {
    let b_slice = if nt { n * k } else { k * n };
    let small = k <= 32 || n <= 32;
    if small {
        c.par_chunks_mut(m * n).enumerate().for_each(|(i, cs)| {
            let av = &a[i * m * k..(i + 1) * m * k];
            let bv = &b[i * b_slice..(i + 1) * b_slice];
            if nt {
                slice_mm_nt(m, k, n, av, bv, cs, beta);
            } else {
                slice_mm_nn(m, k, n, av, bv, cs, beta);
            }
        });
        return;
    }
    let (rsb, csb) = if nt { (1isize, k as isize) } else { (n as isize, 1isize) };
    let a_ptr = a.as_ptr() as usize;
    let b_ptr = b.as_ptr() as usize;
    c.par_chunks_mut(m * n).enumerate().for_each(|(i, cs)| unsafe {
        let ap = (a_ptr as *const E).add(i * m * k);
        let bp = (b_ptr as *const E).add(i * b_slice);
        E::gemm(m, k, n, E::one(), ap, k as isize, 1, bp, rsb, csb, beta, cs.as_mut_ptr(), n as isize, 1);
    });
    let _ = batch;
}

/// C[m,n] (+)= A[m,k] * B[k,n] with accumulators tiled to stay in registers.
fn slice_mm_nn<E: Scalar>(m: usize, k: usize, n: usize, a: &[E], b: &[E], c: &mut [E], beta: E) {
    const TILE: usize = 32;
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        let mut j0 = 0;
        while j0 < n {
            if n - j0 >= TILE {
                // Full tile with compile-time width so the inner loop unrolls.
                let mut acc = [E::zero(); TILE];
                if beta != E::zero() {
                    acc.copy_from_slice(&crow[j0..j0 + TILE]);
                }
                for (kk, &av) in arow.iter().enumerate() {
                    let brow: &[E; TILE] = b[kk * n + j0..kk * n + j0 + TILE].try_into().unwrap();
                    for j in 0..TILE {
                        acc[j] = acc[j] + av * brow[j];
                    }
                }
                crow[j0..j0 + TILE].copy_from_slice(&acc);
                j0 += TILE;
            } else {
                let jw = n - j0;
                let mut acc = [E::zero(); TILE];
                if beta != E::zero() {
                    acc[..jw].copy_from_slice(&crow[j0..j0 + jw]);
                }
                for (kk, &av) in arow.iter().enumerate() {
                    let brow = &b[kk * n + j0..kk * n + j0 + jw];
                    for (aj, &bj) in acc[..jw].iter_mut().zip(brow) {
                        *aj = *aj + av * bj;
                    }
                }
                crow[j0..j0 + jw].copy_from_slice(&acc[..jw]);
                j0 = n;
            }
        }
    }
}

/// C[m,n] (+)= A[m,k] * B[n,k]^T; transposes B once into scratch so the
/// inner loops run over contiguous memory.
fn slice_mm_nt<E: Scalar>(m: usize, k: usize, n: usize, a: &[E], b: &[E], c: &mut [E], beta: E) {
    let mut bt = vec![E::zero(); k * n];
    for j in 0..n {
        for kk in 0..k {
            bt[kk * n + j] = b[j * k + kk];
        }
    }
    slice_mm_nn(m, k, n, a, &bt, c, beta);
}

/// out[i] = f(a[i]) with deterministic chunking.
pub fn unary_map<E: Scalar, F: Fn(E) -> E + Sync>(a: &[E], out: &mut [E], f: F) {
    if a.len() >= PAR_ELEM_THRESHOLD {
        out.par_chunks_mut(ELEM_CHUNK).zip(a.par_chunks(ELEM_CHUNK)).for_each(|(o, x)| {
            for (o, &x) in o.iter_mut().zip(x) {
                *o = f(x);
            }
        });
    } else {
        for (o, &x) in out.iter_mut().zip(a) {
            *o = f(x);
        }
    }
}

/// out[i] = f(a[i], b[i]).
pub fn binary_map<E: Scalar, F: Fn(E, E) -> E + Sync>(a: &[E], b: &[E], out: &mut [E], f: F) {
    debug_assert_eq!(a.len(), b.len());
    if a.len() >= PAR_ELEM_THRESHOLD {
        out.par_chunks_mut(ELEM_CHUNK)
            .zip(a.par_chunks(ELEM_CHUNK).zip(b.par_chunks(ELEM_CHUNK)))
            .for_each(|(o, (x, y))| {
                for i in 0..o.len() {
                    o[i] = f(x[i], y[i]);
                }
            });
    } else {
        for i in 0..out.len() {
            out[i] = f(a[i], b[i]);
        }
    }
}

/// acc[i] += f(args[i]); used by backward accumulation.
pub fn accumulate<E: Scalar, F: Fn(usize) -> E + Sync>(acc: &mut [E], f: F) {
    if acc.len() >= PAR_ELEM_THRESHOLD {
        acc.par_chunks_mut(ELEM_CHUNK).enumerate().for_each(|(ci, chunk)| {
            let base = ci * ELEM_CHUNK;
            for (j, slot) in chunk.iter_mut().enumerate() {
                *slot = *slot + f(base + j);
            }
        });
    } else {
        for (j, slot) in acc.iter_mut().enumerate() {
            *slot = *slot + f(j);
        }
    }
}

/// Deterministic full-buffer sum: fixed-size block sums combined in order.
pub fn sum_all<E: Scalar>(a: &[E]) -> E {
    if a.len() >= PAR_ELEM_THRESHOLD {
        let blocks: Vec<E> = a
            .par_chunks(ELEM_CHUNK)
            .map(|c| c.iter().fold(E::zero(), |s, &x| s + x))
            .collect();
        blocks.into_iter().fold(E::zero(), |s, x| s + x)
    } else {
        a.iter().fold(E::zero(), |s, &x| s + x)
    }
}

/// Apply `f` to each row of an `[rows, w]` buffer, in parallel when large.
pub fn for_each_row<E: Scalar, F: Fn(usize, &mut [E]) + Sync>(data: &mut [E], w: usize, f: F) {
    if w == 0 {
        return;
    }
    let rows = data.len() / w;
    if rows * w >= PAR_ELEM_THRESHOLD && rows > 1 {
        data.par_chunks_mut(w).enumerate().for_each(|(r, row)| f(r, row));
    } else {
        for (r, row) in data.chunks_mut(w).enumerate() {
            f(r, row);
        }
    }
}

/// Read-only variant feeding an output buffer row by row.
pub fn map_rows<E: Scalar, F: Fn(usize, &[E], &mut [E]) + Sync>(
    src: &[E],
    out: &mut [E],
    w_in: usize,
    w_out: usize,
    f: F,
) {
    let rows = src.len() / w_in.max(1);
    if src.len() >= PAR_ELEM_THRESHOLD && rows > 1 {
        out.par_chunks_mut(w_out)
            .zip(src.par_chunks(w_in))
            .enumerate()
            .for_each(|(r, (o, s))| f(r, s, o));
    } else {
        for r in 0..rows {
            f(r, &src[r * w_in..(r + 1) * w_in], &mut out[r * w_out..(r + 1) * w_out]);
        }
    }
}

// ---------------------------------------------------------------------------
// Convolution / pooling (NCHW, square kernels, zero padding)
// ---------------------------------------------------------------------------

pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvDims {
    pub fn new(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: usize,
        pad: usize,
    ) -> Option<ConvDims> {
        if x_shape.len() != 4 || w_shape.len() != 4 || x_shape[1] != w_shape[1] {
            return None;
        }
        let (h, w) = (x_shape[2], x_shape[3]);
        let (kh, kw) = (w_shape[2], w_shape[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw || stride == 0 {
            return None;
        }
        Some(ConvDims {
            batch: x_shape[0],
            c_in: x_shape[1],
            h,
            w,
            c_out: w_shape[0],
            kh,
            kw,
            stride,
            pad,
            h_out: (h + 2 * pad - kh) / stride + 1,
            w_out: (w + 2 * pad - kw) / stride + 1,
        })
    }
}

pub fn conv2d_fwd<E: Scalar>(d: &ConvDims, x: &[E], wgt: &[E], bias: Option<&[E]>, out: &mut [E]) {
    let plane_in = d.h * d.w;
    let plane_out = d.h_out * d.w_out;
    let x_item = d.c_in * plane_in;
    out.par_chunks_mut(d.c_out * plane_out).enumerate().for_each(|(b, o_item)| {
        let xi = &x[b * x_item..(b + 1) * x_item];
        for co in 0..d.c_out {
            let wk = &wgt[co * d.c_in * d.kh * d.kw..(co + 1) * d.c_in * d.kh * d.kw];
            let b0 = bias.map(|bv| bv[co]).unwrap_or_else(E::zero);
            for oy in 0..d.h_out {
                for ox in 0..d.w_out {
                    let mut acc = b0;
                    for ci in 0..d.c_in {
                        for ky in 0..d.kh {
                            let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            for kx in 0..d.kw {
                                let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                                if ix < 0 || ix >= d.w as isize {
                                    continue;
                                }
                                acc = acc
                                    + xi[ci * plane_in + iy as usize * d.w + ix as usize]
                                        * wk[ci * d.kh * d.kw + ky * d.kw + kx];
                            }
                        }
                    }
                    o_item[co * plane_out + oy * d.w_out + ox] = acc;
                }
            }
        }
    });
}

pub fn conv2d_bwd<E: Scalar>(
    d: &ConvDims,
    x: &[E],
    wgt: &[E],
    g_out: &[E],
    gx: Option<&mut [E]>,
    gw: Option<&mut [E]>,
    gb: Option<&mut [E]>,
) {
    let plane_in = d.h * d.w;
    let plane_out = d.h_out * d.w_out;
    let x_item = d.c_in * plane_in;
    let g_item = d.c_out * plane_out;
    if let Some(gx) = gx {
        gx.par_chunks_mut(x_item).enumerate().for_each(|(b, gxi)| {
            let gi = &g_out[b * g_item..(b + 1) * g_item];
            for co in 0..d.c_out {
                let wk = &wgt[co * d.c_in * d.kh * d.kw..(co + 1) * d.c_in * d.kh * d.kw];
                for oy in 0..d.h_out {
                    for ox in 0..d.w_out {
                        let g = gi[co * plane_out + oy * d.w_out + ox];
                        for ci in 0..d.c_in {
                            for ky in 0..d.kh {
                                let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                                if iy < 0 || iy >= d.h as isize {
                                    continue;
                                }
                                for kx in 0..d.kw {
                                    let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                                    if ix < 0 || ix >= d.w as isize {
                                        continue;
                                    }
                                    let idx = ci * plane_in + iy as usize * d.w + ix as usize;
                                    gxi[idx] = gxi[idx]
                                        + g * wk[ci * d.kh * d.kw + ky * d.kw + kx];
                                }
                            }
                        }
                    }
                }
            }
        });
    }
    if let Some(gw) = gw {
        // Parallel over output channels: each thread owns disjoint kernel slices.
        gw.par_chunks_mut(d.c_in * d.kh * d.kw).enumerate().for_each(|(co, gwk)| {
            for b in 0..d.batch {
                let xi = &x[b * x_item..(b + 1) * x_item];
                let gi = &g_out[b * g_item..(b + 1) * g_item];
                for oy in 0..d.h_out {
                    for ox in 0..d.w_out {
                        let g = gi[co * plane_out + oy * d.w_out + ox];
                        for ci in 0..d.c_in {
                            for ky in 0..d.kh {
                                let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                                if iy < 0 || iy >= d.h as isize {
                                    continue;
                                }
                                for kx in 0..d.kw {
                                    let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                                    if ix < 0 || ix >= d.w as isize {
                                        continue;
                                    }
                                    let widx = ci * d.kh * d.kw + ky * d.kw + kx;
                                    gwk[widx] = gwk[widx]
                                        + g * xi[ci * plane_in + iy as usize * d.w + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        });
    }
    if let Some(gb) = gb {
        for co in 0..d.c_out {
            let mut s = E::zero();
            for b in 0..d.batch {
                let gi = &g_out[b * g_item + co * plane_out..b * g_item + (co + 1) * plane_out];
                for &g in gi {
                    s = s + g;
                }
            }
            gb[co] = gb[co] + s;
        }
    }
}
