//! Raw slice kernels shared by forward and backward passes.

use rayon::prelude::*;

use super::{strides, Element};

/// Work (multiply-adds) below which kernels stay on the calling thread.
const PAR_THRESHOLD: usize = 1 << 16;

/// `out[m, n] (+)= op(a)[m, k] * op(b)[k, n]` for one matrix pair.
///
/// `ta`: `a` is stored as `[k, m]`. `tb`: `b` is stored as `[n, k]`.
#[allow(clippy::too_many_arguments)]
fn gemm_single<T: Element>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
    accumulate: bool,
) {
    if !accumulate {
        out.iter_mut().for_each(|x| *x = T::zero());
    }
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                let row = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = a[i * k + p];
                    if av == T::zero() {
                        continue;
                    }
                    let brow = &b[p * n..(p + 1) * n];
                    for (o, &bv) in row.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &b[j * k..(j + 1) * k];
                    let mut acc = T::zero();
                    for (&x, &y) in arow.iter().zip(brow) {
                        acc += x * y;
                    }
                    out[i * n + j] += acc;
                }
            }
        }
        (true, false) => {
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                for i in 0..m {
                    let av = a[p * m + i];
                    if av == T::zero() {
                        continue;
                    }
                    let row = &mut out[i * n..(i + 1) * n];
                    for (o, &bv) in row.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = T::zero();
                    for p in 0..k {
                        acc += a[p * m + i] * b[j * k + p];
                    }
                    out[i * n + j] += acc;
                }
            }
        }
    }
}

/// Batched matrix product. `a` holds `batch` matrices; `b` holds either
/// `batch` matrices or a single shared one. `out` holds `batch` results.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Element>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_shared: bool,
    ta: bool,
    tb: bool,
    accumulate: bool,
) {
    let a_len = m * k;
    let b_len = if b_shared { 0 } else { k * n };
    let o_len = m * n;
    let work = batch * m * k * n;
    if batch == 1 && !ta && m > 1 && work >= PAR_THRESHOLD {
        // Row blocks of a single product.
        let rows = (m / rayon::current_num_threads().max(1)).clamp(1, 256);
        out.par_chunks_mut(rows * n)
            .enumerate()
            .for_each(|(ci, chunk)| {
                let r0 = ci * rows;
                let rm = chunk.len() / n;
                gemm_single(&a[r0 * k..(r0 + rm) * k], b, chunk, rm, k, n, false, tb, accumulate);
            });
        return;
    }
    if batch > 1 && work >= PAR_THRESHOLD {
        out.par_chunks_mut(o_len).enumerate().for_each(|(bi, o)| {
            let bs = if b_shared { b } else { &b[bi * b_len..(bi + 1) * b_len] };
            gemm_single(&a[bi * a_len..(bi + 1) * a_len], bs, o, m, k, n, ta, tb, accumulate);
        });
        return;
    }
    for bi in 0..batch {
        let bs = if b_shared { b } else { &b[bi * b_len..(bi + 1) * b_len] };
        gemm_single(
            &a[bi * a_len..(bi + 1) * a_len],
            bs,
            &mut out[bi * o_len..(bi + 1) * o_len],
            m,
            k,
            n,
            ta,
            tb,
            accumulate,
        );
    }
}

/// Gather `src` (shape `shape`) into the axis order `axes`.
pub(crate) fn permute<T: Element>(src: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    if rank == 0 {
        return src.to_vec();
    }
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let step: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    let inner = out_shape[rank - 1];
    let inner_step = step[rank - 1];
    if src.is_empty() {
        return out;
    }
    loop {
        let mut o = off;
        for _ in 0..inner {
            out.push(src[o]);
            o += inner_step;
        }
        // Advance the odometer over all but the innermost axis.
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            idx[d] += 1;
            off += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= step[d] * idx[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Split `shape` around `axis` into (outer, extent, inner) element counts.
pub(crate) fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax<T: Element>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, n, inner) = around(shape, axis);
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..n {
                max = max.max(x[base + j * inner]);
            }
            let mut sum = T::zero();
            for j in 0..n {
                let e = (x[base + j * inner] - max).exp();
                out[base + j * inner] = e;
                sum += e;
            }
            for j in 0..n {
                out[base + j * inner] = out[base + j * inner] / sum;
            }
        }
    }
    out
}
