use std::fmt;

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`. Vectors are stored as `n×1` columns.
#[derive(Clone, Default, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Tensor {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            write!(f, "  ")?;
            for c in 0..self.cols {
                write!(f, "{:>12.6} ", self.get(r, c))?;
            }
            writeln!(f)?;
        }
        write!(f, "]")
    }
}

impl Tensor {
    /// Builds a tensor from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Input(format!(
                "tensor data length {} does not match shape {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite entry at flat index {pos} of {rows}x{cols} tensor"
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self::from_raw(rows, cols, vec![value; rows * cols])
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 1.0)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_raw(1, 1, vec![v])
    }

    /// Column vector (`n×1`).
    pub fn column(values: &[f64]) -> Self {
        Self::from_raw(values.len(), 1, values.to_vec())
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Input("ragged rows".into()));
        }
        Self::new(r, c, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::from_raw(rows, cols, data)
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut t = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            t.data[i * n + i] = *v;
        }
        t
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self · other`, failing on inner-dimension mismatch.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(Error::dim("matmul", self.shape(), other.shape()));
        }
        Ok(self.mm(other))
    }

    pub(crate) fn mm(&self, other: &Tensor) -> Tensor {
        assert_eq!(
            self.cols, other.rows,
            "matmul {}x{} by {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.data[i * k..(i + 1) * k];
            let dst = &mut out[i * n..(i + 1) * n];
            for (p, &a) in row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let src = &other.data[p * n..(p + 1) * n];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        Tensor::from_raw(m, n, out)
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub(crate) fn tmm(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.rows, other.rows, "tmm row mismatch");
        let (k, m, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let a_row = &self.data[p * m..(p + 1) * m];
            let b_row = &other.data[p * n..(p + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let dst = &mut out[i * n..(i + 1) * n];
                for (d, b) in dst.iter_mut().zip(b_row) {
                    *d += a * b;
                }
            }
        }
        Tensor::from_raw(m, n, out)
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub(crate) fn mmt(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.cols, "mmt col mismatch");
        let (m, k, n) = (self.rows, self.cols, other.rows);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b = &other.data[j * k..(j + 1) * k];
                out[i * n + j] = a.iter().zip(b).map(|(x, y)| x * y).sum();
            }
        }
        Tensor::from_raw(m, n, out)
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Tensor::from_raw(self.cols, self.rows, out)
    }

    fn zip_checked(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(Error::dim(op, self.shape(), other.shape()));
        }
        Ok(self.zip(other, f))
    }

    pub(crate) fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "elementwise shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect();
        Tensor::from_raw(self.rows, self.cols, data)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_checked(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_checked(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_checked(other, "hadamard", |a, b| a * b)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_raw(self.rows, self.cols, self.data.iter().map(|v| f(*v)).collect())
    }

    /// `diag(v) · self`: scales row `r` by `v[r]`.
    pub fn scale_rows(&self, v: &[f64]) -> Result<Tensor> {
        if v.len() != self.rows {
            return Err(Error::dim("scale_rows", self.shape(), (v.len(), 1)));
        }
        let mut out = self.clone();
        for (r, s) in v.iter().enumerate() {
            for x in &mut out.data[r * self.cols..(r + 1) * self.cols] {
                *x *= s;
            }
        }
        Ok(out)
    }

    /// `self · diag(v)`: scales column `c` by `v[c]`.
    pub fn scale_cols(&self, v: &[f64]) -> Result<Tensor> {
        if v.len() != self.cols {
            return Err(Error::dim("scale_cols", self.shape(), (1, v.len())));
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.cols.max(1)) {
            for (x, s) in row.iter_mut().zip(v) {
                *x *= s;
            }
        }
        Ok(out)
    }

    /// Adds column vector `b` to every column.
    pub fn add_col(&self, b: &Tensor) -> Result<Tensor> {
        if b.cols != 1 || b.rows != self.rows {
            return Err(Error::dim("add_col", self.shape(), b.shape()));
        }
        let mut out = self.clone();
        for r in 0..self.rows {
            let v = b.data[r];
            for x in &mut out.data[r * self.cols..(r + 1) * self.cols] {
                *x += v;
            }
        }
        Ok(out)
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &r in idx {
            data.extend_from_slice(self.row(r));
        }
        Tensor::from_raw(idx.len(), self.cols, data)
    }

    pub fn select_cols(&self, idx: &[usize]) -> Tensor {
        Tensor::from_fn(self.rows, idx.len(), |r, c| self.get(r, idx[c]))
    }

    /// Leading `k` rows.
    pub fn top_rows(&self, k: usize) -> Tensor {
        Tensor::from_raw(k, self.cols, self.data[..k * self.cols].to_vec())
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn hstack(parts: &[&Tensor]) -> Result<Tensor> {
        let rows = parts.first().map_or(0, |t| t.rows);
        for p in parts {
            if p.rows != rows {
                return Err(Error::dim("hstack", (rows, 0), p.shape()));
            }
        }
        let cols = parts.iter().map(|p| p.cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            for r in 0..rows {
                out.data[r * cols + off..r * cols + off + p.cols].copy_from_slice(p.row(r));
            }
            off += p.cols;
        }
        Ok(out)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Largest entrywise deviation relative to the larger of the two
    /// tensors' max-abs (floored at 1).
    pub fn max_rel_diff(&self, other: &Tensor) -> f64 {
        let scale = self.max_abs().max(other.max_abs()).max(1.0);
        self.max_abs_diff(other) / scale
    }

    /// Subtracts each column's mean from its entries.
    pub fn center_columns(&self) -> Tensor {
        let mut out = self.clone();
        if self.rows == 0 {
            return out;
        }
        for c in 0..self.cols {
            let mean = (0..self.rows).map(|r| self.get(r, c)).sum::<f64>() / self.rows as f64;
            for r in 0..self.rows {
                out.data[r * self.cols + c] -= mean;
            }
        }
        out
    }
}

/// `R = I − (1/d)·11ᵀ`; `R·X` removes each column's mean across its `d` rows.
pub fn centering_matrix(d: usize) -> Tensor {
    let inv = 1.0 / d as f64;
    Tensor::from_fn(d, d, |r, c| if r == c { 1.0 - inv } else { -inv })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn naive(a: &Tensor, b: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    #[test]
    fn identity_times_a_is_a() {
        let mut rng = Rng::new(3);
        let a = rng.normal_tensor(3, 4, 1.0);
        assert_eq!(Tensor::eye(3).matmul(&a).unwrap(), a);
    }

    #[test]
    fn hand_product() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::column(&[1.0, 1.0]);
        assert_eq!(a.matmul(&b).unwrap(), Tensor::column(&[3.0, 7.0]));
    }

    #[test]
    fn random_product_matches_triple_loop() {
        let mut rng = Rng::new(11);
        let a = rng.normal_tensor(5, 7, 1.0);
        let b = rng.normal_tensor(7, 3, 1.0);
        let fast = a.matmul(&b).unwrap();
        assert!(fast.max_abs_diff(&naive(&a, &b)) < 1e-12);
        assert!(a.transpose().tmm(&b).max_abs_diff(&fast) < 1e-12);
        assert!(a.mmt(&b.transpose()).max_abs_diff(&fast) < 1e-12);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = Tensor::zeros(2, 3).matmul(&Tensor::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn new_rejects_nan() {
        assert!(matches!(Tensor::new(1, 2, vec![1.0, f64::NAN]), Err(Error::Numeric(_))));
        assert!(Tensor::new(1, 2, vec![1.0]).is_err());
    }

    #[test]
    fn centering_matrix_values() {
        assert_eq!(centering_matrix(1), Tensor::zeros(1, 1));
        let r2 = centering_matrix(2);
        assert_eq!(r2, Tensor::from_rows(&[vec![0.5, -0.5], vec![-0.5, 0.5]]).unwrap());
        let r5 = centering_matrix(5);
        assert!(r5.matmul(&r5).unwrap().max_abs_diff(&r5) < 1e-12);
    }

    #[test]
    fn centering_matrix_removes_column_means() {
        let mut rng = Rng::new(5);
        let x = rng.normal_tensor(6, 4, 2.0);
        let rx = centering_matrix(6).matmul(&x).unwrap();
        assert!(rx.max_abs_diff(&x.center_columns()) < 1e-12);
        for c in 0..4 {
            assert!(rx.col(c).iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn hstack_and_select() {
        let a = Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let h = Tensor::hstack(&[&a, &b]).unwrap();
        assert_eq!(h.row(1), &[2.0, 5.0, 6.0]);
        assert_eq!(h.select_cols(&[2, 0]).row(0), &[4.0, 1.0]);
        assert_eq!(h.select_rows(&[1]).row(0), &[2.0, 5.0, 6.0]);
    }
}
