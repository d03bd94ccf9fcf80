//! Dense matrix kernels with an optional rayon row-parallel path.
//!
//! The sequential path is the reference mode: single-threaded and bitwise
//! reproducible. The parallel path splits work by output row; each row is
//! computed by the same scalar loop, so results agree with the reference.

use std::sync::atomic::{AtomicBool, Ordering};

use crate::real::Real;

static REFERENCE_MODE: AtomicBool = AtomicBool::new(false);

/// Forces every kernel onto the single-threaded path.
pub fn set_reference_mode(on: bool) {
    REFERENCE_MODE.store(on, Ordering::SeqCst);
}

pub fn reference_mode() -> bool {
    REFERENCE_MODE.load(Ordering::Relaxed)
}

/// True when the parallel path will actually be taken.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && !reference_mode()
}

// Below this many multiply-adds a kernel stays sequential.
const PAR_THRESHOLD: usize = 1 << 15;

/// Applies `f(row_index, row)` to every `row_len`-sized chunk of `out`.
pub fn for_each_row<T, F>(out: &mut [T], row_len: usize, work_per_row: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if row_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        let rows = out.len() / row_len;
        if !reference_mode() && rows > 1 && rows * work_per_row >= PAR_THRESHOLD {
            use rayon::prelude::*;
            out.par_chunks_mut(row_len)
                .enumerate()
                .for_each(|(i, r)| f(i, r));
            return;
        }
    }
    let _ = work_per_row;
    for (i, r) in out.chunks_mut(row_len).enumerate() {
        f(i, r);
    }
}

/// Maps `f` over `0..n`, in parallel unless in reference mode.
pub fn par_map<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        if !reference_mode() && n > 1 {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `out[m,n] += a[m,k] · b[k,n]`
pub fn matmul_nn_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for_each_row(out, n, k * n, |i, row| {
        let ai = &a[i * k..(i + 1) * k];
        for (kk, &aik) in ai.iter().enumerate() {
            if aik != T::zero() {
                axpy(aik, &b[kk * n..(kk + 1) * n], row);
            }
        }
    });
}

/// `out[m,n] += a[m,k] · b[n,k]ᵀ`
pub fn matmul_nt_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for_each_row(out, n, k * n, |i, row| {
        let ai = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            *o += dot(ai, &b[j * k..(j + 1) * k]);
        }
    });
}

/// `out[m,n] += a[k,m]ᵀ · b[k,n]`
pub fn matmul_tn_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], k: usize, m: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for_each_row(out, n, k * n, |i, row| {
        for kk in 0..k {
            let aki = a[kk * m + i];
            if aki != T::zero() {
                axpy(aki, &b[kk * n..(kk + 1) * n], row);
            }
        }
    });
}
