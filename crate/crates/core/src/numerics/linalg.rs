//! Dense row-major matrices and vectors, 64-bit throughout.
//!
//! Checked entry points (`matmul`, `softmax`, `logsumexp`, `Vector::add`)
//! return dimension errors; the remaining kernels assert shape agreement and
//! are meant for internal code that has already validated its operands.

use crate::error::{Error, Result};

/// Dense matrix, row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "matrix {}x{} needs {} values, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Build from nested rows; rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::Dimension(format!(
                    "ragged rows: expected {} columns, got {}",
                    c,
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix { rows: r, cols: c, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn add_at(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] += v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Standard matrix product. Fails with both shapes named when the inner
    /// dimensions disagree.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Dimension(format!(
                "matmul: {}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `A v` for a matrix of shape (rows x cols) and a vector of dim cols.
    pub fn matvec(&self, v: &Vector) -> Vector {
        assert_eq!(
            self.cols,
            v.dim(),
            "matvec: {}x{} * {}",
            self.rows,
            self.cols,
            v.dim()
        );
        let mut out = Vector::zeros(self.rows);
        for i in 0..self.rows {
            out.data[i] = dot(self.row(i), v.as_slice());
        }
        out
    }

    /// `A^T v` without materializing the transpose.
    pub fn matvec_t(&self, v: &Vector) -> Vector {
        assert_eq!(
            self.rows,
            v.dim(),
            "matvec_t: ({}x{})^T * {}",
            self.rows,
            self.cols,
            v.dim()
        );
        let mut out = Vector::zeros(self.cols);
        for i in 0..self.rows {
            let s = v.data[i];
            if s == 0.0 {
                continue;
            }
            for (o, a) in out.data.iter_mut().zip(self.row(i)) {
                *o += s * a;
            }
        }
        out
    }

    /// `self += scale * u v^T`.
    pub fn add_outer(&mut self, u: &Vector, v: &Vector, scale: f64) {
        assert_eq!(self.rows, u.dim(), "add_outer rows");
        assert_eq!(self.cols, v.dim(), "add_outer cols");
        for i in 0..self.rows {
            let s = scale * u.data[i];
            if s == 0.0 {
                continue;
            }
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (o, x) in row.iter_mut().zip(&v.data) {
                *o += s * x;
            }
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "add_assign shape");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Dense vector, 64-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn zeros(dim: usize) -> Self {
        Vector { data: vec![0.0; dim] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Vector { data }
    }

    pub fn from_slice(data: &[f64]) -> Self {
        Vector { data: data.to_vec() }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Checked elementwise sum.
    pub fn add(&self, other: &Vector) -> Result<Vector> {
        if self.dim() != other.dim() {
            return Err(Error::Dimension(format!(
                "vector add: {} vs {}",
                self.dim(),
                other.dim()
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Vector { data })
    }

    pub fn add_assign(&mut self, other: &Vector) {
        assert_eq!(self.dim(), other.dim(), "vector add_assign");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, other: &Vector, s: f64) {
        assert_eq!(self.dim(), other.dim(), "vector add_scaled");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        assert_eq!(self.dim(), other.dim(), "vector dot");
        dot(&self.data, &other.data)
    }

    /// Elementwise product, out of place.
    pub fn hadamard(&self, other: &Vector) -> Vector {
        assert_eq!(self.dim(), other.dim(), "vector hadamard");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect();
        Vector { data }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Vector {
        Vector { data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn concat(&self, other: &Vector) -> Vector {
        let mut data = Vec::with_capacity(self.dim() + other.dim());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Vector { data }
    }

    /// Split into two halves of the given first-half length.
    pub fn split_at(&self, mid: usize) -> (Vector, Vector) {
        let (a, b) = self.data.split_at(mid);
        (Vector::from_slice(a), Vector::from_slice(b))
    }

    pub fn l2_norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl std::ops::IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.data[i]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `u^T M v`.
pub fn bilinear(u: &Vector, m: &Matrix, v: &Vector) -> f64 {
    assert_eq!(m.rows(), u.dim(), "bilinear rows");
    assert_eq!(m.cols(), v.dim(), "bilinear cols");
    let mv = m.matvec(v);
    u.dot(&mv)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Max-shifted softmax; components are positive and sum to one.
pub fn softmax(z: &Vector) -> Result<Vector> {
    let w = softmax_slice(z.as_slice())?;
    Ok(Vector::from_vec(w))
}

pub fn softmax_slice(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::Dimension("softmax of empty vector".into()));
    }
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

/// Max-shifted log of the sum of exponentials.
pub fn logsumexp(z: &[f64]) -> Result<f64> {
    if z.is_empty() {
        return Err(Error::Dimension("logsumexp of empty vector".into()));
    }
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        // All entries -inf: the sum is zero, its log -inf.
        return Ok(max);
    }
    let sum: f64 = z.iter().map(|&v| (v - max).exp()).sum();
    Ok(max + sum.ln())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let i = Matrix::identity(2);
        assert_eq!(i.matmul(&a).unwrap(), a);
        assert_eq!(a.matmul(&i).unwrap(), a);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let z = Matrix::zeros(2, 2);
        let a = Matrix::from_rows(&[vec![5.0, -1.0], vec![0.25, 9.0]]).unwrap();
        assert_eq!(z.matmul(&a).unwrap(), Matrix::zeros(2, 2));
    }

    #[test]
    fn matmul_rectangular() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 2);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("2x3"), "{err}");
        assert!(err.contains("2x2"), "{err}");
    }

    #[test]
    fn matvec_t_matches_explicit_transpose() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let v = Vector::from_vec(vec![7.0, -2.0]);
        let direct = a.matvec_t(&v);
        let via_t = a.transpose().matvec(&v);
        assert_eq!(direct, via_t);
    }

    #[test]
    fn softmax_uniform_on_constant_input() {
        let s = softmax(&Vector::from_vec(vec![0.0, 0.0, 0.0])).unwrap();
        for i in 0..3 {
            assert!((s[i] - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let z = Vector::from_vec(vec![0.3, -1.2, 2.5, 0.0]);
        let shifted = z.map(|v| v + 123.456);
        let a = softmax(&z).unwrap();
        let b = softmax(&shifted).unwrap();
        for i in 0..z.dim() {
            assert!((a[i] - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_extreme_input_is_stable() {
        let s = softmax(&Vector::from_vec(vec![1000.0, 0.0])).unwrap();
        assert!(s.is_finite());
        assert!((s[0] - 1.0).abs() < 1e-12);
        assert!(s[1] < 1e-12);
    }

    #[test]
    fn softmax_empty_is_dimension_error() {
        assert!(matches!(
            softmax(&Vector::zeros(0)),
            Err(crate::error::Error::Dimension(_))
        ));
    }

    #[test]
    fn logsumexp_basics() {
        assert!((logsumexp(&[0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(logsumexp(&[3.25]).unwrap(), 3.25);
        let v = logsumexp(&[1000.0, 1000.0]).unwrap();
        assert!(v.is_finite());
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert!(logsumexp(&[]).is_err());
    }

    #[test]
    fn logsumexp_bounds() {
        let z = [0.4, -3.0, 2.2, 1.9];
        let l = logsumexp(&z).unwrap();
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(l >= max);
        assert!(l <= max + (z.len() as f64).ln() + 1e-15);
    }

    #[test]
    fn bilinear_direct_arithmetic() {
        let u = Vector::from_vec(vec![1.0, 2.0]);
        let m = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let v = Vector::from_vec(vec![3.0, 1.0]);
        assert_eq!(bilinear(&u, &m, &v), 7.0);
    }

    #[test]
    fn matmul_associativity_on_random_chains() {
        use crate::numerics::rng::{seeded, uniform_matrix};
        use rand::Rng;
        let mut rng = seeded(99);
        for _ in 0..50 {
            let (a, b, c, d) = (
                rng.gen_range(1..=5),
                rng.gen_range(1..=5),
                rng.gen_range(1..=5),
                rng.gen_range(1..=5),
            );
            let m1 = uniform_matrix(&mut rng, a, b, -2.0, 2.0);
            let m2 = uniform_matrix(&mut rng, b, c, -2.0, 2.0);
            let m3 = uniform_matrix(&mut rng, c, d, -2.0, 2.0);
            let left = m1.matmul(&m2).unwrap().matmul(&m3).unwrap();
            let right = m1.matmul(&m2.matmul(&m3).unwrap()).unwrap();
            for (x, y) in left.data().iter().zip(right.data()) {
                let rel = (x - y).abs() / x.abs().max(y.abs()).max(1.0);
                assert!(rel < 1e-9, "associativity drift {rel}");
            }
        }
    }

    #[test]
    fn softmax_simplex_over_random_vectors() {
        use crate::numerics::rng::{seeded, uniform_vector};
        use rand::Rng;
        let mut rng = seeded(100);
        for _ in 0..1000 {
            let dim = rng.gen_range(1..=64);
            let z = uniform_vector(&mut rng, dim, -50.0, 50.0);
            let s = softmax(&z).unwrap();
            let mut sum = 0.0;
            for i in 0..dim {
                assert!(s[i] > 0.0);
                sum += s[i];
            }
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
