//! Dense row-major matrices of `f64` and the handful of value-level kernels
//! (GEMM, Cholesky, triangular solves) the tape is built on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length {} does not match shape {rows}x{cols}", data.len());
        Tensor { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor::full(rows, cols, 0.0)
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        Tensor { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![value] }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn column(values: &[f64]) -> Self {
        Tensor::from_vec(values.len(), 1, values.to_vec())
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Tensor::from_vec(1, values.len(), values.to_vec())
    }

    /// Builds a matrix from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Tensor::from_vec(r, c, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.shape(), (1, 1), "item() on a non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "zip_map shape mismatch");
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scaled(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn reshape(&self, rows: usize, cols: usize) -> Tensor {
        Tensor::from_vec(rows, cols, self.data.clone())
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        gemm(self, false, other, false)
    }

    /// Lower triangle (diagonal included); strictly-upper entries zeroed.
    pub fn tril(&self) -> Tensor {
        let mut out = self.clone();
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                out.data[i * self.cols + j] = 0.0;
            }
        }
        out
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).collect()
    }

    pub fn slice(&self, r0: usize, c0: usize, nr: usize, nc: usize) -> Tensor {
        assert!(r0 + nr <= self.rows && c0 + nc <= self.cols, "slice out of bounds");
        let mut data = Vec::with_capacity(nr * nc);
        for i in r0..r0 + nr {
            data.extend_from_slice(&self.data[i * self.cols + c0..i * self.cols + c0 + nc]);
        }
        Tensor::from_vec(nr, nc, data)
    }

    pub fn concat_cols(parts: &[&Tensor]) -> Tensor {
        let rows = parts.first().map_or(0, |p| p.rows);
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                assert_eq!(p.rows, rows, "concat_cols row mismatch");
                data.extend_from_slice(p.row(i));
            }
        }
        Tensor::from_vec(rows, cols, data)
    }

    pub fn concat_rows(parts: &[&Tensor]) -> Tensor {
        let cols = parts.first().map_or(0, |p| p.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            assert_eq!(p.cols, cols, "concat_rows col mismatch");
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Tensor::from_vec(rows, cols, data)
    }

    pub fn gather_rows(&self, index: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(index.len() * self.cols);
        for &i in index {
            data.extend_from_slice(self.row(i));
        }
        Tensor::from_vec(index.len(), self.cols, data)
    }

    pub fn add_diag(&self, value: f64) -> Tensor {
        assert_eq!(self.rows, self.cols, "add_diag on a non-square tensor");
        let mut out = self.clone();
        for i in 0..self.rows {
            out.data[i * self.cols + i] += value;
        }
        out
    }
}

/// C = op(A) op(B) through `matrixmultiply`, where op transposes when asked.
pub fn gemm(a: &Tensor, trans_a: bool, b: &Tensor, trans_b: bool) -> Tensor {
    let (m, ka) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if trans_b { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(ka, kb, "matmul inner dimension mismatch: {:?} x {:?}", a.shape(), b.shape());
    let mut c = Tensor::zeros(m, n);
    if m == 0 || n == 0 || ka == 0 {
        return c;
    }
    let (rsa, csa) = if trans_a { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if trans_b { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: strides describe the row-major buffers above, whose lengths the
    // Tensor constructor checked; `c` is freshly allocated as m x n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            ka,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            0.0,
            c.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// Lower Cholesky factor of the symmetric part of `a`.
pub fn cholesky(a: &Tensor) -> Result<Tensor> {
    let n = a.rows;
    if a.cols != n {
        return Err(Error::Shape(format!("cholesky of non-square {:?}", a.shape())));
    }
    let mut l = Tensor::zeros(n, n);
    for j in 0..n {
        let mut d = a.get(j, j);
        let lj = &l.data[j * n..j * n + j];
        d -= lj.iter().map(|v| v * v).sum::<f64>();
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j });
        }
        let djj = d.sqrt();
        l.data[j * n + j] = djj;
        for i in (j + 1)..n {
            let sym = 0.5 * (a.get(i, j) + a.get(j, i));
            let (head, tail) = l.data.split_at(i * n);
            let li = &tail[..j];
            let lj = &head[j * n..j * n + j];
            let dot: f64 = li.iter().zip(lj).map(|(x, y)| x * y).sum();
            l.data[i * n + j] = (sym - dot) / djj;
        }
    }
    Ok(l)
}

/// Solves L X = B (or Lᵀ X = B when `transpose`) for lower-triangular L.
pub fn tri_solve(l: &Tensor, b: &Tensor, transpose: bool) -> Tensor {
    let n = l.rows;
    assert_eq!(l.cols, n, "tri_solve needs a square factor");
    assert_eq!(b.rows, n, "tri_solve rhs row mismatch");
    let c = b.cols;
    let mut x = b.clone();
    if !transpose {
        for i in 0..n {
            let (done, rest) = x.data.split_at_mut(i * c);
            let xi = &mut rest[..c];
            for j in 0..i {
                let lij = l.data[i * n + j];
                if lij != 0.0 {
                    let xj = &done[j * c..(j + 1) * c];
                    for (a, b) in xi.iter_mut().zip(xj) {
                        *a -= lij * b;
                    }
                }
            }
            let inv = 1.0 / l.data[i * n + i];
            for a in xi.iter_mut() {
                *a *= inv;
            }
        }
    } else {
        for i in (0..n).rev() {
            let (head, done) = x.data.split_at_mut((i + 1) * c);
            let xi = &mut head[i * c..];
            for j in (i + 1)..n {
                // (Lᵀ)_{ij} = L_{ji}
                let lji = l.data[j * n + i];
                if lji != 0.0 {
                    let xj = &done[(j - i - 1) * c..(j - i) * c];
                    for (a, b) in xi.iter_mut().zip(xj) {
                        *a -= lji * b;
                    }
                }
            }
            let inv = 1.0 / l.data[i * n + i];
            for a in xi.iter_mut() {
                *a *= inv;
            }
        }
    }
    x
}

/// Inverse of a symmetric positive definite matrix via its Cholesky factor.
pub fn spd_inverse(a: &Tensor) -> Result<Tensor> {
    let l = cholesky(a)?;
    let linv = tri_solve(&l, &Tensor::eye(a.rows), false);
    Ok(gemm(&linv, true, &linv, false))
}
