//! Blocked row-major matrix multiply.
//!
//! Every output row is accumulated strictly in ascending-k order with fused
//! multiply-adds, so results are bit-identical whether a row is computed on
//! its own, inside a batch, or on a different number of threads. Parallelism
//! only ever splits work across output rows.

use super::Element;
use rayon::prelude::*;

/// k-panel height: keeps the active slice of `b` in cache while a block of
/// output rows is accumulated against it.
const K_BLOCK: usize = 128;
/// Output rows per parallel task.
const ROW_CHUNK: usize = 32;
/// Below this many flops the rayon dispatch costs more than it saves.
const PAR_THRESHOLD: usize = 1 << 18;

/// `out = a * b` (or `out += a * b` when `accumulate`), with `a` of shape
/// `m x k` and `b` of shape `k x n`, all row-major.
pub fn gemm<E: Element>(
    a: &[E],
    b: &[E],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [E],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs size");
    assert_eq!(b.len(), k * n, "gemm: rhs size");
    assert_eq!(out.len(), m * n, "gemm: out size");

    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(ROW_CHUNK * n)
            .zip(a.par_chunks(ROW_CHUNK * k))
            .for_each(|(oc, ac)| gemm_rows(ac, b, k, n, oc, accumulate));
    } else {
        gemm_rows(a, b, k, n, out, accumulate);
    }
}

fn gemm_rows<E: Element>(a: &[E], b: &[E], k: usize, n: usize, out: &mut [E], accumulate: bool) {
    if !accumulate {
        out.fill(E::ZERO);
    }
    let rows = out.len() / n;
    let mut k0 = 0;
    while k0 < k {
        let k1 = (k0 + K_BLOCK).min(k);
        for i in 0..rows {
            let a_row = &a[i * k..i * k + k];
            let out_row = &mut out[i * n..i * n + n];
            for kk in k0..k1 {
                let aik = a_row[kk];
                let b_row = &b[kk * n..kk * n + n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o = aik.mul_add(bv, *o);
                }
            }
        }
        k0 = k1;
    }
}

/// Row-major transpose of an `rows x cols` matrix.
pub fn transpose<E: Element>(a: &[E], rows: usize, cols: usize) -> Vec<E> {
    assert_eq!(a.len(), rows * cols, "transpose: size");
    let mut out = vec![E::ZERO; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}
