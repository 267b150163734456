use rayon::prelude::*;

use crate::element::Element;
use crate::error::{Error, Result};

/// Row-major 2-D matrix used by the im2col/GEMM convolution path.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<E: Element> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<E>,
}

impl<E: Element> Matrix<E> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![E::ZERO; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<E>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                what: "matrix construction",
                left: format!("{rows}x{cols}"),
                right: format!("{} data values", data.len()),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Matrix::zeros(dim, dim);
        for i in 0..dim {
            m.data[i * dim + i] = E::ONE;
        }
        m
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> E {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[E] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Matrix product with a fixed accumulation order.
///
/// Every output element accumulates over k in strictly increasing order, so
/// the dense and guided convolution paths (which feed this with the same
/// patch rows) produce bit-identical values, and parallel execution over
/// output rows is bit-identical to serial.
pub fn gemm<E: Element>(a: &Matrix<E>, b: &Matrix<E>) -> Result<Matrix<E>> {
    if a.cols != b.rows {
        return Err(Error::ShapeMismatch {
            what: "gemm",
            left: format!("{}x{}", a.rows, a.cols),
            right: format!("{}x{}", b.rows, b.cols),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    let k = a.cols;
    let n = b.cols;
    if n == 0 || a.rows == 0 {
        return Ok(out);
    }
    out.data
        .par_chunks_mut(n)
        .zip(a.data.par_chunks(k.max(1)))
        .for_each(|(out_row, a_row)| {
            gemm_row(a_row, &b.data, n, out_row);
        });
    Ok(out)
}

/// Serial block version used inside conv kernels: `a` holds `r` packed rows
/// of length `k`, `out` holds `r` rows of length `n`, `b` is k x n.
pub(crate) fn gemm_rows_into<E: Element>(a: &[E], k: usize, b: &[E], n: usize, out: &mut [E]) {
    debug_assert_eq!(a.len() % k.max(1), 0);
    debug_assert_eq!(out.len() % n.max(1), 0);
    for (out_row, a_row) in out.chunks_exact_mut(n).zip(a.chunks_exact(k)) {
        gemm_row(a_row, b, n, out_row);
    }
}

/// One output row: out[j] = sum_k a[k] * b[k][j], k strictly ascending.
#[inline]
fn gemm_row<E: Element>(a_row: &[E], b: &[E], n: usize, out_row: &mut [E]) {
    for v in out_row.iter_mut() {
        *v = E::ZERO;
    }
    for (kk, &av) in a_row.iter().enumerate() {
        let b_row = &b[kk * n..kk * n + n];
        for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
            *o += av * bv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_times_matrix_is_matrix() {
        let m = Matrix::from_vec(3, 2, vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let id = Matrix::identity(3);
        assert_eq!(gemm(&id, &m).unwrap(), m);
    }

    #[test]
    fn two_by_two_hand_computed() {
        // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
        let a = Matrix::from_vec(2, 2, vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let b = Matrix::from_vec(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = gemm(&a, &b).unwrap();
        assert_eq!(c.data, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn random_matches_naive_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let (m, k, n) = (8, 8, 8);
        let a = Matrix::from_vec(m, k, (0..m * k).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .unwrap();
        let b = Matrix::from_vec(k, n, (0..k * n).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .unwrap();
        let c = gemm(&a, &b).unwrap();
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f64;
                for kk in 0..k {
                    acc += a.at(i, kk) as f64 * b.at(kk, j) as f64;
                }
                let got = c.at(i, j) as f64;
                let rel = (got - acc).abs() / acc.abs().max(1e-12);
                assert!(rel < 1e-6, "({i},{j}): got {got}, want {acc}");
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let a = Matrix::<f32>::zeros(2, 3);
        let b = Matrix::<f32>::zeros(4, 2);
        assert!(gemm(&a, &b).is_err());
    }

    #[test]
    fn parallel_equals_serial_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Matrix::from_vec(64, 33, (0..64 * 33).map(|_| rng.gen_range(-2.0f32..2.0)).collect())
            .unwrap();
        let b = Matrix::from_vec(33, 17, (0..33 * 17).map(|_| rng.gen_range(-2.0f32..2.0)).collect())
            .unwrap();
        let pool1 = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let pool4 = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let c1 = pool1.install(|| gemm(&a, &b).unwrap());
        let c4 = pool4.install(|| gemm(&a, &b).unwrap());
        assert_eq!(c1, c4);
    }
}
