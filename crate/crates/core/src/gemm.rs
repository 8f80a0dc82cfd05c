//! Row-blocked parallel wrapper around `matrixmultiply::dgemm`.
//!
//! Output rows are split into fixed-size blocks independent of the thread
//! count, so results are bit-identical for any rayon pool size.

use rayon::prelude::*;

const ROW_BLOCK: usize = 256;

/// A read-only strided matrix view.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> View<'a> {
    /// Row-major `rows x cols`.
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        Self {
            data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }
}

/// `c = a · b + beta · c`, with `c` row-major `a.rows x b.cols`.
pub(crate) fn gemm(a: View, b: View, beta: f64, c: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    c.par_chunks_mut(ROW_BLOCK * n)
        .enumerate()
        .for_each(|(block, c_rows)| {
            let row0 = block * ROW_BLOCK;
            let rows = c_rows.len() / n;
            let offset = row0 * a.row_stride;
            // SAFETY: all strides and extents come from views whose backing
            // slices cover `rows x k` (for a) and `k x n` (for b); c_rows is
            // exactly `rows x n` row-major.
            unsafe {
                matrixmultiply::dgemm(
                    rows,
                    k,
                    n,
                    1.0,
                    a.data.as_ptr().add(offset),
                    a.row_stride as isize,
                    a.col_stride as isize,
                    b.data.as_ptr(),
                    b.row_stride as isize,
                    b.col_stride as isize,
                    beta,
                    c_rows.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: View, b: View) -> Vec<f64> {
        let mut c = vec![0.0; a.rows * b.cols];
        for i in 0..a.rows {
            for j in 0..b.cols {
                let mut s = 0.0;
                for p in 0..a.cols {
                    s += a.data[i * a.row_stride + p * a.col_stride]
                        * b.data[p * b.row_stride + j * b.col_stride];
                }
                c[i * b.cols + j] = s;
            }
        }
        c
    }

    #[test]
    fn matches_naive_with_transposes() {
        let a: Vec<f64> = (0..70 * 13).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let b: Vec<f64> = (0..13 * 9).map(|i| ((i * 3) % 5) as f64 * 0.5).collect();
        let av = View::new(&a, 70, 13);
        let bv = View::new(&b, 13, 9);
        let mut c = vec![0.0; 70 * 9];
        gemm(av, bv, 0.0, &mut c);
        assert_eq!(c, naive(av, bv));

        let bt: Vec<f64> = (0..9 * 13).map(|i| (i % 4) as f64).collect();
        let btv = View::new(&bt, 9, 13).t();
        let mut c2 = vec![1.0; 70 * 9];
        gemm(av, btv, 1.0, &mut c2);
        let expect = naive(av, btv);
        for (x, y) in c2.iter().zip(expect) {
            assert_eq!(*x, y + 1.0);
        }
    }
}
