//! Deterministic parallel matrix products.
//!
//! All heavy products in the crate go through [`matmul`]. Work is split into
//! fixed row blocks regardless of thread count, so results are bit-identical
//! across runs and `HEADFIELD_THREADS` settings.

use ndarray::{s, Array2, ArrayView2, Axis};
use rayon::prelude::*;

/// Row block size for parallel GEMM. Fixed so the split (and therefore the
/// floating-point result) does not depend on the number of workers.
const ROW_BLOCK: usize = 128;

/// `a (n x k) * b (k x m)`, row-parallel.
pub fn matmul(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let n = a.nrows();
    let m = b.ncols();
    assert_eq!(a.ncols(), b.nrows(), "matmul inner dims");
    if n <= ROW_BLOCK {
        return a.dot(&b);
    }
    let mut c = Array2::<f64>::zeros((n, m));
    let mut chunks: Vec<(usize, ndarray::ArrayViewMut2<f64>)> = Vec::new();
    let mut rest = c.view_mut();
    let mut start = 0;
    while start < n {
        let len = ROW_BLOCK.min(n - start);
        let (head, tail) = rest.split_at(Axis(0), len);
        chunks.push((start, head));
        rest = tail;
        start += len;
    }
    chunks.into_par_iter().for_each(|(s0, mut out)| {
        let rows = out.nrows();
        out.assign(&a.slice(s![s0..s0 + rows, ..]).dot(&b));
    });
    c
}

/// `a^T (k x n)^T * b (k x m)` without materializing the transpose.
pub fn matmul_tn(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    matmul(a.t(), b)
}

/// `a (n x k) * b^T (m x k)^T` without materializing the transpose.
pub fn matmul_nt(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    matmul(a, b.t())
}

/// Configure the global worker pool once, honoring `HEADFIELD_THREADS`.
/// Later calls are no-ops; the pool can only be built once per process.
pub fn init_thread_pool() {
    let threads = std::env::var("HEADFIELD_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0);
    if let Some(n) = threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, m: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, m), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn blocked_matches_serial() {
        let a = random(301, 47, 1);
        let b = random(47, 33, 2);
        let c = matmul(a.view(), b.view());
        let reference = a.dot(&b);
        assert_eq!(c, reference);
    }

    #[test]
    fn transposed_variants() {
        let a = random(20, 7, 3);
        let b = random(20, 5, 4);
        let c = matmul_tn(a.view(), b.view());
        assert_eq!(c, a.t().dot(&b));
        let d = random(9, 7, 5);
        let e = matmul_nt(a.view(), d.view());
        assert_eq!(e, a.dot(&d.t()));
    }
}
