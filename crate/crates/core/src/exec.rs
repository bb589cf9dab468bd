//! Deterministic execution kernels.
//!
//! Every reduction in this crate must produce bitwise-identical results no
//! matter how many worker threads exist, so parallelism is only applied in
//! shapes where the floating-point evaluation order is fixed by construction:
//!
//! * index-mapped writes into pre-sized buffers (one owner per slot),
//! * sums chunked at a fixed width, each chunk compensated independently,
//!   chunk partials combined in index order,
//! * matrix products split into fixed-height row bands, each band computed
//!   by the same sequential kernel regardless of scheduling.
//!
//! The sequential variants are compiled unconditionally; with the `parallel`
//! feature (default) the public entry points dispatch the same chunk layout
//! onto rayon. Benches compare the two variants on identical inputs.

use ndarray::{s, Array2, ArrayView2};

/// Fixed chunk width for compensated sums. Chosen so a chunk stays in L1;
/// changing it changes results at the last-ulp level, so it is a constant,
/// not a tuning knob.
pub const SUM_CHUNK: usize = 4096;

/// Fixed row-band height for matrix products.
pub const GEMM_BAND: usize = 128;

/// Compensated (Kahan-Neumaier) accumulator.
#[derive(Clone, Copy, Debug, Default)]
pub struct Accumulator {
    sum: f64,
    comp: f64,
}

impl Accumulator {
    pub fn add(&mut self, value: f64) {
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.comp += (self.sum - t) + value;
        } else {
            self.comp += (value - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(self) -> f64 {
        self.sum + self.comp
    }
}

/// Compensated sum of a slice, single pass, fixed order.
pub fn kahan_sum(values: &[f64]) -> f64 {
    let mut acc = Accumulator::default();
    for &v in values {
        acc.add(v);
    }
    acc.value()
}

pub mod seq {
    use super::*;

    pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
    where
        F: Fn(usize) -> T,
    {
        (0..n).map(f).collect()
    }

    pub fn sum_indexed<F>(n: usize, f: F) -> f64
    where
        F: Fn(usize) -> f64,
    {
        let chunks = n.div_ceil(SUM_CHUNK);
        let mut total = Accumulator::default();
        for c in 0..chunks {
            let lo = c * SUM_CHUNK;
            let hi = (lo + SUM_CHUNK).min(n);
            let mut part = Accumulator::default();
            for i in lo..hi {
                part.add(f(i));
            }
            total.add(part.value());
        }
        total.value()
    }

    pub fn gemm_into(c: &mut Array2<f64>, a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) {
        let rows = a.nrows();
        let mut r0 = 0;
        while r0 < rows {
            let r1 = (r0 + GEMM_BAND).min(rows);
            let mut band = c.slice_mut(s![r0..r1, ..]);
            ndarray::linalg::general_mat_mul(1.0, &a.slice(s![r0..r1, ..]), &b, 0.0, &mut band);
            r0 = r1;
        }
    }
}

#[cfg(feature = "parallel")]
pub mod par {
    use super::*;
    use rayon::prelude::*;

    pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        (0..n).into_par_iter().map(f).collect()
    }

    pub fn sum_indexed<F>(n: usize, f: F) -> f64
    where
        F: Fn(usize) -> f64 + Sync + Send,
    {
        let chunks = n.div_ceil(SUM_CHUNK);
        let parts: Vec<f64> = (0..chunks)
            .into_par_iter()
            .map(|c| {
                let lo = c * SUM_CHUNK;
                let hi = (lo + SUM_CHUNK).min(n);
                let mut part = Accumulator::default();
                for i in lo..hi {
                    part.add(f(i));
                }
                part.value()
            })
            .collect();
        let mut total = Accumulator::default();
        for p in parts {
            total.add(p);
        }
        total.value()
    }

    pub fn gemm_into(c: &mut Array2<f64>, a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) {
        let rows = a.nrows();
        let bands = rows.div_ceil(GEMM_BAND);
        let row_len = c.ncols();
        let c_slice = c.as_slice_mut().expect("gemm destination must be contiguous");
        c_slice
            .par_chunks_mut(GEMM_BAND * row_len)
            .enumerate()
            .take(bands)
            .for_each(|(band, chunk)| {
                let r0 = band * GEMM_BAND;
                let r1 = (r0 + GEMM_BAND).min(rows);
                let mut dst =
                    ndarray::ArrayViewMut2::from_shape((r1 - r0, row_len), chunk).unwrap();
                ndarray::linalg::general_mat_mul(
                    1.0,
                    &a.slice(s![r0..r1, ..]),
                    &b,
                    0.0,
                    &mut dst,
                );
            });
    }
}

/// Maps `f` over `0..n` into a vector, one slot per index.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        par::map_indexed(n, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        seq::map_indexed(n, f)
    }
}

/// Deterministic compensated sum of `f(i)` over `0..n`.
pub fn sum_indexed<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        par::sum_indexed(n, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        seq::sum_indexed(n, f)
    }
}

/// Deterministic dot product of two equal-length slices.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    sum_indexed(a.len(), |i| a[i] * b[i])
}

/// Deterministic squared Euclidean norm.
pub fn norm_sq(a: &[f64]) -> f64 {
    sum_indexed(a.len(), |i| a[i] * a[i])
}

/// `c = a * b`, computed in fixed row bands.
pub fn gemm_into(c: &mut Array2<f64>, a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) {
    assert_eq!(a.ncols(), b.nrows());
    assert_eq!(c.nrows(), a.nrows());
    assert_eq!(c.ncols(), b.ncols());
    #[cfg(feature = "parallel")]
    {
        par::gemm_into(c, a, b)
    }
    #[cfg(not(feature = "parallel"))]
    {
        seq::gemm_into(c, a, b)
    }
}

/// `a * b` into a fresh matrix.
pub fn gemm(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut c = Array2::zeros((a.nrows(), b.ncols()));
    gemm_into(&mut c, a, b);
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    #[test]
    fn test_kahan_sum_matches_exact_rational() {
        // 0.1 summed 1000 times; compensated sum must be within one ulp of
        // the correctly rounded result 100.00000000000001 (fl closest).
        let values = vec![0.1_f64; 1000];
        let naive: f64 = values.iter().sum();
        let kahan = kahan_sum(&values);
        assert!((kahan - 100.0).abs() <= (naive - 100.0).abs());
        assert!((kahan - 100.0).abs() < 1e-12);
    }

    #[test]
    fn test_seq_and_default_sum_agree_bitwise() {
        let f = |i: usize| ((i as f64) * 0.37).sin() * 0.001 + 1.0e-7;
        for n in [0, 1, 5, SUM_CHUNK - 1, SUM_CHUNK, SUM_CHUNK + 1, 3 * SUM_CHUNK + 17] {
            let a = seq::sum_indexed(n, f);
            let b = sum_indexed(n, f);
            assert_eq!(a.to_bits(), b.to_bits(), "n = {n}");
        }
    }

    #[test]
    fn test_gemm_band_split_matches_single_call() {
        let a = Array::from_shape_fn((301, 97), |(i, j)| ((i * 31 + j * 7) % 13) as f64 * 0.1);
        let b = Array::from_shape_fn((97, 53), |(i, j)| ((i * 17 + j * 3) % 11) as f64 * 0.2 - 0.5);
        let mut banded = Array2::zeros((301, 53));
        gemm_into(&mut banded, a.view(), b.view());
        let mut seq_banded = Array2::zeros((301, 53));
        seq::gemm_into(&mut seq_banded, a.view(), b.view());
        assert_eq!(banded, seq_banded);
        // Sanity against ndarray's own product (identical up to banding).
        let reference = a.dot(&b);
        let max_diff = (&banded - &reference)
            .iter()
            .fold(0.0_f64, |m, v| m.max(v.abs()));
        assert!(max_diff < 1e-12, "max diff {max_diff}");
    }

    #[test]
    fn test_map_indexed_order() {
        let v = map_indexed(10, |i| i * i);
        assert_eq!(v, vec![0, 1, 4, 9, 16, 25, 36, 49, 64, 81]);
    }
}
