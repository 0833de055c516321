//! Dense matmul kernels over row-major `f64` buffers.
//!
//! Every kernel computes each output row independently and reduces each
//! output element in a fixed order, so the parallel and sequential paths are
//! bit-identical. The parallel path is only compiled with the `parallel`
//! feature and only taken when more than one thread is configured.

use std::sync::atomic::{AtomicUsize, Ordering};

static THREADS: AtomicUsize = AtomicUsize::new(0);

/// Environment variable controlling kernel parallelism (default 1).
pub const THREADS_ENV: &str = "BQF_THREADS";

/// Number of kernel threads. Reads `BQF_THREADS` on first use.
pub fn threads() -> usize {
    match THREADS.load(Ordering::Relaxed) {
        0 => {
            let n = std::env::var(THREADS_ENV)
                .ok()
                .and_then(|s| s.trim().parse::<usize>().ok())
                .filter(|&n| n > 0)
                .unwrap_or(1);
            THREADS.store(n, Ordering::Relaxed);
            n
        }
        n => n,
    }
}

pub fn set_threads(n: usize) {
    THREADS.store(n.max(1), Ordering::Relaxed);
}

#[cfg(feature = "parallel")]
fn pool() -> &'static rayon::ThreadPool {
    use std::sync::OnceLock;
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads())
            .build()
            .expect("failed to build kernel thread pool")
    })
}

/// Runs `f(row_index, row)` over every `width`-sized row of `out`.
pub fn for_each_row<F>(out: &mut [f64], width: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if width == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if threads() > 1 && out.len() >= 4096 {
        use rayon::prelude::*;
        pool().install(|| {
            out.par_chunks_mut(width)
                .enumerate()
                .for_each(|(i, row)| f(i, row))
        });
        return;
    }
    out.chunks_mut(width)
        .enumerate()
        .for_each(|(i, row)| f(i, row));
}

/// `c[m×n] = a[m×k] · b[k×n]`, sequential.
pub fn matmul_nn_seq(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        nn_row(a, b, &mut c[i * n..(i + 1) * n], i, k, n);
    }
}

#[inline]
fn nn_row(a: &[f64], b: &[f64], crow: &mut [f64], i: usize, k: usize, n: usize) {
    crow.fill(0.0);
    let arow = &a[i * k..(i + 1) * k];
    for (p, &av) in arow.iter().enumerate() {
        if av == 0.0 {
            continue;
        }
        let brow = &b[p * n..(p + 1) * n];
        for (cv, &bv) in crow.iter_mut().zip(brow) {
            *cv += av * bv;
        }
    }
}

/// `c[m×n] = a[m×k] · b[k×n]`, dispatched.
pub fn matmul_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for_each_row(c, n, |i, row| nn_row(a, b, row, i, k, n));
}

#[inline]
fn dot(x: &[f64], y: &[f64]) -> f64 {
    // four independent accumulators in a fixed order
    let mut acc = [0.0f64; 4];
    let chunks = x.len() / 4;
    for c in 0..chunks {
        let o = c * 4;
        acc[0] += x[o] * y[o];
        acc[1] += x[o + 1] * y[o + 1];
        acc[2] += x[o + 2] * y[o + 2];
        acc[3] += x[o + 3] * y[o + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for o in chunks * 4..x.len() {
        s += x[o] * y[o];
    }
    s
}

#[inline]
fn nt_row(a: &[f64], b: &[f64], crow: &mut [f64], i: usize, k: usize) {
    let arow = &a[i * k..(i + 1) * k];
    for (j, cv) in crow.iter_mut().enumerate() {
        *cv = dot(arow, &b[j * k..(j + 1) * k]);
    }
}

/// `c[m×n] = a[m×k] · b[n×k]ᵀ`, sequential.
pub fn matmul_nt_seq(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        nt_row(a, b, &mut c[i * n..(i + 1) * n], i, k);
    }
}

/// `c[m×n] = a[m×k] · b[n×k]ᵀ`, dispatched.
pub fn matmul_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for_each_row(c, n, |i, row| nt_row(a, b, row, i, k));
}

#[inline]
fn tn_row(a: &[f64], b: &[f64], crow: &mut [f64], p: usize, m: usize, k: usize, n: usize) {
    crow.fill(0.0);
    for i in 0..m {
        let av = a[i * k + p];
        if av == 0.0 {
            continue;
        }
        let brow = &b[i * n..(i + 1) * n];
        for (cv, &bv) in crow.iter_mut().zip(brow) {
            *cv += av * bv;
        }
    }
}

/// `c[k×n] = a[m×k]ᵀ · b[m×n]`, sequential.
pub fn matmul_tn_seq(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        tn_row(a, b, &mut c[p * n..(p + 1) * n], p, m, k, n);
    }
}

/// `c[k×n] = a[m×k]ᵀ · b[m×n]`, dispatched.
pub fn matmul_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for_each_row(c, n, |p, row| tn_row(a, b, row, p, m, k, n));
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn variants_agree_with_naive() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        matmul_nn(&a, &b, &mut c, m, k, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        let bt = transpose(&b, k, n);
        matmul_nt(&a, &bt, &mut c, m, k, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        let at = transpose(&a, m, k);
        matmul_tn(&at, &b, &mut c, k, m, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn dispatched_matches_sequential_bitwise() {
        let (m, k, n) = (64, 48, 80);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.013).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.029).cos()).collect();
        let mut seq = vec![0.0; m * n];
        let mut par = vec![0.0; m * n];
        matmul_nn_seq(&a, &b, &mut seq, m, k, n);
        matmul_nn(&a, &b, &mut par, m, k, n);
        assert_eq!(seq, par);
    }
}
