//! Flat matrix kernels behind the graph operations.
//!
//! Loops are arranged so the innermost axis walks contiguous memory, which
//! lets the compiler vectorize them. Large products split across rows with
//! rayon; every output element is still produced by the same sequential
//! reduction, so results are bitwise identical for any thread count.

use super::tensor::Scalar;
use rayon::prelude::*;
use std::sync::OnceLock;

/// Work threshold (multiply-accumulate count) below which a kernel stays
/// serial; splitting tiny products costs more than it saves.
const PAR_MIN_MACS: usize = 1 << 16;

static THREAD_CAP: OnceLock<usize> = OnceLock::new();

/// Thread cap from `MIXREORG_THREADS` (defaults to the rayon default).
/// Installs the global rayon pool on first call; later calls are no-ops.
pub fn init_parallelism() -> usize {
    *THREAD_CAP.get_or_init(|| {
        let requested = std::env::var("MIXREORG_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n > 0);
        if let Some(n) = requested {
            // Ignore the error: some other component may have installed the
            // pool already, in which case its size wins.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            n
        } else {
            rayon::current_num_threads()
        }
    })
}

/// Number of worker threads in use (for run logs).
pub fn thread_count() -> usize {
    init_parallelism();
    rayon::current_num_threads()
}

/// out[i,j] = sum_p a[i,p] * b[p,j]   (a: m×k, b: k×n)
pub fn matmul<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |arow: &[F], orow: &mut [F]| {
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    };
    if m * k * n >= PAR_MIN_MACS && thread_count() > 1 {
        out.par_chunks_mut(n)
            .zip(a.par_chunks(k))
            .for_each(|(orow, arow)| row(arow, orow));
    } else {
        for (orow, arow) in out.chunks_mut(n).zip(a.chunks(k)) {
            row(arow, orow);
        }
    }
}

/// out[p,j] = sum_i a[i,p] * b[i,j]   (aᵀ·b; a: m×k, b: m×n, out: k×n)
pub fn matmul_at<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    let row = |p: usize, orow: &mut [F]| {
        for i in 0..m {
            let av = a[i * k + p];
            let brow = &b[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    };
    if m * k * n >= PAR_MIN_MACS && thread_count() > 1 {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(p, orow)| row(p, orow));
    } else {
        for (p, orow) in out.chunks_mut(n).enumerate() {
            row(p, orow);
        }
    }
}

/// out[i,p] = sum_j a[i,j] * b[p,j]   (a·bᵀ; a: m×n, b: k×n, out: m×k)
pub fn matmul_bt<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    let row = |arow: &[F], orow: &mut [F]| {
        for (p, o) in orow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = F::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc = acc + av * bv;
            }
            *o = *o + acc;
        }
    };
    if m * k * n >= PAR_MIN_MACS && thread_count() > 1 {
        out.par_chunks_mut(k)
            .zip(a.par_chunks(n))
            .for_each(|(orow, arow)| row(arow, orow));
    } else {
        for (orow, arow) in out.chunks_mut(k).zip(a.chunks(n)) {
            row(arow, orow);
        }
    }
}
