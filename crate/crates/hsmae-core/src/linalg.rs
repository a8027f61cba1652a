//! Minimal row-major matrix used by the transformer forward/backward
//! passes. Only the handful of products backprop needs, written with the
//! accumulation loop over the contiguous axis.

use crate::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Mat { rows, cols, data }
    }

    /// Row vector wrapper (rows = 1).
    pub fn row_vector(data: Vec<T>) -> Self {
        let cols = data.len();
        Mat {
            rows: 1,
            cols,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut T {
        &mut self.data[i * self.cols + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn fill(&mut self, v: T) {
        self.data.fill(v);
    }

    pub fn add_assign(&mut self, other: &Mat<T>) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, k: T) {
        for a in &mut self.data {
            *a *= k;
        }
    }

    /// Adds `bias` (length = cols) to every row.
    pub fn add_row_bias(&mut self, bias: &[T]) {
        assert_eq!(bias.len(), self.cols, "bias length");
        for i in 0..self.rows {
            for (a, b) in self.row_mut(i).iter_mut().zip(bias) {
                *a += *b;
            }
        }
    }

    /// C = A B with A: n x k, B: k x m.
    pub fn matmul(&self, other: &Mat<T>) -> Mat<T> {
        assert_eq!(self.cols, other.rows, "matmul inner dim");
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = Mat::zeros(n, m);
        for i in 0..n {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for (kk, &a) in a_row.iter().enumerate().take(k) {
                if a == T::zero() {
                    continue;
                }
                let b_row = other.row(kk);
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// C = A B^T with A: n x k, B: m x k. Inner products of contiguous rows.
    pub fn matmul_nt(&self, other: &Mat<T>) -> Mat<T> {
        assert_eq!(self.cols, other.cols, "matmul_nt inner dim");
        let (n, m) = (self.rows, other.rows);
        let mut out = Mat::zeros(n, m);
        for i in 0..n {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for (j, o) in out_row.iter_mut().enumerate().take(m) {
                let b_row = other.row(j);
                let mut acc = T::zero();
                for (&a, &b) in a_row.iter().zip(b_row) {
                    acc += a * b;
                }
                *o = acc;
            }
        }
        out
    }

    /// C = A^T B with A: k x n, B: k x m. Accumulates rank-1 updates.
    pub fn matmul_tn(&self, other: &Mat<T>) -> Mat<T> {
        assert_eq!(self.rows, other.rows, "matmul_tn inner dim");
        let (k, n, m) = (self.rows, self.cols, other.cols);
        let mut out = Mat::zeros(n, m);
        for kk in 0..k {
            let a_row = self.row(kk);
            let b_row = other.row(kk);
            for (i, &a) in a_row.iter().enumerate().take(n) {
                if a == T::zero() {
                    continue;
                }
                let out_row = out.row_mut(i);
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// Column sums as a length-`cols` vector; the bias gradient.
    pub fn col_sums(&self) -> Vec<T> {
        let mut sums = vec![T::zero(); self.cols];
        for i in 0..self.rows {
            for (s, &v) in sums.iter_mut().zip(self.row(i)) {
                *s += v;
            }
        }
        sums
    }

    /// Gathers the given rows into a new matrix, preserving order.
    pub fn gather_rows(&self, indices: &[usize]) -> Mat<T> {
        let mut out = Mat::zeros(indices.len(), self.cols);
        for (r, &idx) in indices.iter().enumerate() {
            out.row_mut(r).copy_from_slice(self.row(idx));
        }
        out
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree_with_scalar_loops() {
        let a = Mat::from_vec(2, 3, vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Mat::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = a.matmul(&b);
        assert_eq!(c.as_slice(), &[58.0, 64.0, 139.0, 154.0]);

        // A B^T via transposing b by hand
        let bt = Mat::from_vec(2, 3, vec![7.0, 9.0, 11.0, 8.0, 10.0, 12.0]);
        let c2 = a.matmul_nt(&bt);
        assert_eq!(c.as_slice(), c2.as_slice());

        // A^T B via transposing a by hand
        let at = Mat::from_vec(3, 2, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let c3 = at.matmul_tn(&b);
        assert_eq!(c3.shape(), (2, 2));
        assert_eq!(c.as_slice(), c3.as_slice());
    }

    #[test]
    fn gather_and_bias() {
        let m = Mat::from_vec(3, 2, vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let g = m.gather_rows(&[2, 0]);
        assert_eq!(g.as_slice(), &[5.0, 6.0, 1.0, 2.0]);

        let mut b = Mat::zeros(2, 2);
        b.add_row_bias(&[1.0, -1.0]);
        assert_eq!(b.as_slice(), &[1.0, -1.0, 1.0, -1.0]);
        assert_eq!(m.col_sums(), vec![9.0, 12.0]);
    }
}
