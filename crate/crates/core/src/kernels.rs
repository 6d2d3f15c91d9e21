//! Low-level compute kernels.
//!
//! Everything here is written so the data-parallel (rayon) path and the
//! sequential path produce bit-identical results: work is only ever split
//! across independent output rows, and the accumulation order within a row
//! never changes. The `parallel` feature selects the rayon path; with the
//! feature off (or a one-thread pool) the sequential code runs.
//!
//! Accumulation-order contract: `matmul_acc` adds `a[i,k]*b[k,j]` terms to
//! each output slot one `k` at a time in ascending order, which is exactly
//! the order `dot` uses. Score paths that must reproduce each other
//! bit-for-bit (dense vs candidate scoring) rely on this.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Minimum number of multiply-accumulates before a parallel split pays off.
#[cfg(feature = "parallel")]
const PAR_MIN_WORK: usize = 1 << 16;

/// Plain dot product, single accumulator, ascending index order.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b.iter()) {
        acc += x * y;
    }
    acc
}

/// y += alpha * x, elementwise over equal-length slices.
#[inline]
pub fn axpy(y: &mut [f32], alpha: f32, x: &[f32]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x.iter()) {
        *yi += alpha * xi;
    }
}

fn matmul_rows(out_rows: &mut [f32], a_rows: &[f32], b: &[f32], k: usize, n: usize) {
    let m = a_rows.len() / k;
    for i in 0..m {
        let arow = &a_rows[i * k..(i + 1) * k];
        let orow = &mut out_rows[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

/// out += a @ b with a: [m,k], b: [k,n], out: [m,n]. Sequential.
pub fn matmul_acc_seq(out: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    matmul_rows(out, a, b, k, n);
}

/// out += a @ b, splitting output rows across the rayon pool when the work
/// is large enough. Bit-identical to [`matmul_acc_seq`].
#[cfg(feature = "parallel")]
pub fn matmul_acc(out: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let threads = rayon::current_num_threads();
    if threads <= 1 || m < 2 || m * k * n < PAR_MIN_WORK {
        matmul_rows(out, a, b, k, n);
        return;
    }
    let chunk = m.div_ceil(threads);
    out.par_chunks_mut(chunk * n)
        .zip(a.par_chunks(chunk * k))
        .for_each(|(orows, arows)| matmul_rows(orows, arows, b, k, n));
}

#[cfg(not(feature = "parallel"))]
pub fn matmul_acc(out: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    matmul_acc_seq(out, a, b, m, k, n);
}

/// Transposed copy of a row-major [rows, cols] matrix.
pub fn transpose(src: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    debug_assert_eq!(src.len(), rows * cols);
    let mut out = vec![0.0f32; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

fn softmax_row(row: &mut [f32]) {
    let mut max = f32::NEG_INFINITY;
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// In-place row-wise softmax with max subtraction, over rows of length `cols`.
pub fn softmax_rows(data: &mut [f32], cols: usize) {
    debug_assert_eq!(data.len() % cols, 0);
    #[cfg(feature = "parallel")]
    {
        if rayon::current_num_threads() > 1 && data.len() >= PAR_MIN_WORK {
            data.par_chunks_mut(cols).for_each(softmax_row);
            return;
        }
    }
    for row in data.chunks_mut(cols) {
        softmax_row(row);
    }
}

/// Rowwise argmax with ties broken toward the smallest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0usize;
    let mut best_v = f32::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}
