//! Data-parallel helpers with a sequential fallback.
//!
//! Every parallel loop here distributes whole output rows (or whole
//! independent work items) across threads while each element keeps the same
//! sequential accumulation order, so builds with and without the `parallel`
//! feature produce bitwise-identical results.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Apply `f` to each `width`-sized row of `data`, sequentially.
pub fn for_each_row_seq<F>(data: &mut [f64], width: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    for (i, row) in data.chunks_mut(width).enumerate() {
        f(i, row);
    }
}

/// Apply `f` to each `width`-sized row of `data` across the thread pool.
#[cfg(feature = "parallel")]
pub fn for_each_row_par<F>(data: &mut [f64], width: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    data.par_chunks_mut(width)
        .enumerate()
        .for_each(|(i, row)| f(i, row));
}

/// Row-parallel apply; dispatches on the `parallel` feature.
pub fn for_each_row<F>(data: &mut [f64], width: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    #[cfg(feature = "parallel")]
    for_each_row_par(data, width, f);
    #[cfg(not(feature = "parallel"))]
    for_each_row_seq(data, width, f);
}

/// Map `f` over `0..n`, returning results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

fn matmul_row(a_row: &[f64], b: &[f64], n: usize, out_row: &mut [f64]) {
    out_row.fill(0.0);
    for (kk, &av) in a_row.iter().enumerate() {
        let b_row = &b[kk * n..(kk + 1) * n];
        for j in 0..n {
            out_row[j] += av * b_row[j];
        }
    }
}

/// `out = a (m x k) * b (k x n)`, row-major, sequential.
pub fn matmul_into_seq(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for_each_row_seq(out, n, |i, row| matmul_row(&a[i * k..(i + 1) * k], b, n, row));
}

/// `out = a (m x k) * b (k x n)`, row-major, rows distributed across threads.
#[cfg(feature = "parallel")]
pub fn matmul_into_par(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for_each_row_par(out, n, |i, row| matmul_row(&a[i * k..(i + 1) * k], b, n, row));
}

/// Feature-dispatched matrix multiply.
pub fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    #[cfg(feature = "parallel")]
    matmul_into_par(a, b, m, k, n, out);
    #[cfg(not(feature = "parallel"))]
    matmul_into_seq(a, b, m, k, n, out);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_matmul_is_bitwise_equal_to_sequential() {
        let mut rng = 0x2545f4914f6cdd1du64;
        let mut next = || {
            rng ^= rng << 13;
            rng ^= rng >> 7;
            rng ^= rng << 17;
            (rng >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let (m, k, n) = (17, 23, 19);
        let a: Vec<f64> = (0..m * k).map(|_| next()).collect();
        let b: Vec<f64> = (0..k * n).map(|_| next()).collect();
        let mut seq = vec![0.0; m * n];
        let mut par = vec![0.0; m * n];
        matmul_into_seq(&a, &b, m, k, n, &mut seq);
        matmul_into_par(&a, &b, m, k, n, &mut par);
        assert!(seq.iter().zip(&par).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
