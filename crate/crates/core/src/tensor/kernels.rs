//! Forward/backward matrix kernels on raw row-major slices.
//!
//! Every kernel writes whole output rows, so splitting work across rows keeps
//! each output element's accumulation order fixed.

use crate::parallel;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    Parallel,
}

impl Exec {
    /// Parallel when the crate was built with the `parallel` feature.
    pub fn default_mode() -> Self {
        if parallel::enabled() {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

fn run_rows<F>(out: &mut [f64], n: usize, work: usize, exec: Exec, row: F)
where
    F: Fn(usize, &mut [f64]) + Send + Sync,
{
    match exec {
        Exec::Parallel => parallel::for_each_chunk(out, n, work, row),
        Exec::Sequential => out.chunks_mut(n).enumerate().for_each(|(i, r)| row(i, r)),
    }
}

/// `out[m×n] = a[m×k] · b[k×n]`
pub fn gemm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64], exec: Exec) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    run_rows(out, n, m * k * n, exec, |i, row| {
        row.iter_mut().for_each(|x| *x = 0.0);
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    });
}

/// `out[m×n] = a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64], exec: Exec) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    run_rows(out, n, m * k * n, exec, |i, row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            *o = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    });
}

/// `out[m×n] = a[k×m]ᵀ · b[k×n]`
pub fn gemm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64], exec: Exec) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    run_rows(out, n, m * k * n, exec, |i, row| {
        row.iter_mut().for_each(|x| *x = 0.0);
        for p in 0..k {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    });
}

/// Apply `f` to each of `batch` independent output slices of length `len`.
pub fn batched<F>(out: &mut [f64], batch: usize, len: usize, work: usize, exec: Exec, f: F)
where
    F: Fn(usize, &mut [f64]) + Send + Sync,
{
    debug_assert_eq!(out.len(), batch * len);
    match exec {
        // Inner kernels run sequentially; the batch axis carries the parallelism.
        Exec::Parallel => parallel::for_each_chunk(out, len, work, f),
        Exec::Sequential => out.chunks_mut(len).enumerate().for_each(|(i, c)| f(i, c)),
    }
}
