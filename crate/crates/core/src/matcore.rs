// SPDX-License-Identifier: Apache-2.0

//! Small dense linear algebra: norms, commutators, the matrix exponential,
//! the two-column spectral norm and percentiles.

use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use crate::error::{Error, Result};

/// Taylor order used by [`mat_exp`] after scaling.
pub const EXP_TAYLOR_ORDER: usize = 12;

/// Upper bound on `‖A / 2^s‖_F` before the Taylor series is applied.
pub const EXP_SCALED_NORM: f64 = 0.5;

/// Row-major dense matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            if r > 0 {
                write!(f, "; ")?;
            }
            for c in 0..self.cols {
                if c > 0 {
                    write!(f, ", ")?;
                }
                write!(f, "{}", self.data[r * self.cols + c])?;
            }
        }
        write!(f, "]")
    }
}

impl DenseMatrix {
    /// Builds a matrix from row-major data. Entries must be finite.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::dim(format!(
                "matrix must be non-empty, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::dim(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite matrix entry {bad}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::dim("ragged rows"));
        }
        Self::new(
            r,
            c,
            rows.iter().flat_map(|row| row.iter().copied()).collect(),
        )
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix must be non-empty");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::dim(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = vec![0.0; self.rows * other.cols];
        for i in 0..self.rows {
            let out_row = &mut out[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Self {
            rows: self.rows,
            cols: other.cols,
            data: out,
        })
    }

    pub fn try_add(&self, other: &DenseMatrix) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn try_sub(&self, other: &DenseMatrix) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &DenseMatrix, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::dim(format!(
                "elementwise op on {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| f(*a, *b))
                .collect(),
        })
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

impl Add for &DenseMatrix {
    type Output = DenseMatrix;
    fn add(self, rhs: &DenseMatrix) -> DenseMatrix {
        self.try_add(rhs).expect("shape mismatch in add")
    }
}

impl Sub for &DenseMatrix {
    type Output = DenseMatrix;
    fn sub(self, rhs: &DenseMatrix) -> DenseMatrix {
        self.try_sub(rhs).expect("shape mismatch in sub")
    }
}

impl Mul for &DenseMatrix {
    type Output = DenseMatrix;
    fn mul(self, rhs: &DenseMatrix) -> DenseMatrix {
        self.matmul(rhs).expect("shape mismatch in matmul")
    }
}

impl Neg for &DenseMatrix {
    type Output = DenseMatrix;
    fn neg(self) -> DenseMatrix {
        self.scale(-1.0)
    }
}

/// `sqrt(Σ m_ij²)`.
pub fn frobenius_norm(m: &DenseMatrix) -> Result<f64> {
    if m.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("frobenius norm of non-finite matrix"));
    }
    Ok(m.norm_sq().sqrt())
}

/// `[a, b] = ab − ba`.
pub fn commutator(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if !a.is_square() || a.rows != b.rows || a.cols != b.cols {
        return Err(Error::dim(format!(
            "commutator needs equal square matrices, got {}x{} and {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    a.matmul(b)?.try_sub(&b.matmul(a)?)
}

/// Number of squarings so that `norm / 2^s ≤ EXP_SCALED_NORM`.
pub fn exp_squarings(norm: f64) -> u32 {
    let mut s = 0u32;
    let mut scaled = norm;
    while scaled > EXP_SCALED_NORM && s < 1074 {
        scaled *= 0.5;
        s += 1;
    }
    s
}

/// Matrix exponential by scaling and squaring with a fixed-order Taylor
/// polynomial evaluated in Horner form.
///
/// Only additions, scalar multiples and matrix products are used, so the
/// same composition can be recorded on a gradient tape
/// (see [`crate::gradcore::Graph::mat_exp`]).
pub fn mat_exp(a: &DenseMatrix) -> Result<DenseMatrix> {
    if !a.is_square() {
        return Err(Error::dim(format!(
            "mat_exp of non-square {}x{}",
            a.rows, a.cols
        )));
    }
    let norm = frobenius_norm(a)?;
    let s = exp_squarings(norm);
    let x = a.scale(0.5f64.powi(s as i32));
    let n = a.rows;
    let eye = DenseMatrix::identity(n);
    let mut p = eye.clone();
    for k in (1..=EXP_TAYLOR_ORDER).rev() {
        p = &eye + &x.matmul(&p)?.scale(1.0 / k as f64);
    }
    for _ in 0..s {
        p = p.matmul(&p)?;
    }
    Ok(p)
}

/// Largest singular value of the `len × 2` matrix `[c1 c2]`, from the
/// closed-form eigenvalues of its 2×2 Gram matrix.
pub fn two_column_sigma_max(c1: &[f64], c2: &[f64]) -> Result<f64> {
    if c1.len() != c2.len() || c1.is_empty() {
        return Err(Error::dim(format!(
            "two_column_sigma_max columns of length {} and {}",
            c1.len(),
            c2.len()
        )));
    }
    let g11: f64 = c1.iter().map(|v| v * v).sum();
    let g22: f64 = c2.iter().map(|v| v * v).sum();
    let g12: f64 = c1.iter().zip(c2).map(|(a, b)| a * b).sum();
    let half_trace = 0.5 * (g11 + g22);
    let half_gap = 0.5 * (g11 - g22);
    let lambda_max = half_trace + (half_gap * half_gap + g12 * g12).sqrt();
    Ok(lambda_max.max(0.0).sqrt())
}

/// Percentile with linear interpolation between closest ranks:
/// index `(p/100)(n−1)` into the sorted values.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("percentile of empty list"));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::invalid(format!("percentile {p} outside [0, 100]")));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::invalid("percentile of NaN"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let idx = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = idx.floor() as usize;
    let hi = idx.ceil() as usize;
    let frac = idx - lo as f64;
    if lo == hi {
        Ok(sorted[lo])
    } else {
        Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, SQRT_2};

    fn m(rows: &[&[f64]]) -> DenseMatrix {
        DenseMatrix::from_rows(rows).unwrap()
    }

    fn fro_dist(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
        frobenius_norm(&(a - b)).unwrap()
    }

    #[test]
    fn frobenius_examples() {
        assert_eq!(frobenius_norm(&DenseMatrix::identity(2)).unwrap(), SQRT_2);
        assert_eq!(frobenius_norm(&DenseMatrix::zeros(3, 3)).unwrap(), 0.0);
        assert_eq!(
            frobenius_norm(&m(&[&[3.0, 4.0], &[0.0, 0.0]])).unwrap(),
            5.0
        );
    }

    #[test]
    fn rejects_non_finite() {
        assert!(DenseMatrix::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(DenseMatrix::new(2, 2, vec![1.0; 3]).is_err());
    }

    #[test]
    fn commutator_examples() {
        let e = m(&[&[0.0, 1.0], &[0.0, 0.0]]);
        let f = m(&[&[0.0, 0.0], &[1.0, 0.0]]);
        assert_eq!(commutator(&e, &f).unwrap(), m(&[&[1.0, 0.0], &[0.0, -1.0]]));
        assert_eq!(commutator(&e, &e).unwrap(), DenseMatrix::zeros(2, 2));
        let d1 = m(&[&[2.0, 0.0], &[0.0, -3.0]]);
        let d2 = m(&[&[0.5, 0.0], &[0.0, 7.0]]);
        assert_eq!(commutator(&d1, &d2).unwrap(), DenseMatrix::zeros(2, 2));
        assert!(commutator(&e, &DenseMatrix::identity(3)).is_err());
    }

    #[test]
    fn exp_examples() {
        assert_eq!(
            mat_exp(&DenseMatrix::zeros(4, 4)).unwrap(),
            DenseMatrix::identity(4)
        );
        let nil = m(&[&[0.0, 0.5], &[0.0, 0.0]]);
        assert_eq!(mat_exp(&nil).unwrap(), m(&[&[1.0, 0.5], &[0.0, 1.0]]));
        let rot = m(&[&[0.0, -FRAC_PI_2], &[FRAC_PI_2, 0.0]]);
        let want = m(&[
            &[FRAC_PI_2.cos(), -FRAC_PI_2.sin()],
            &[FRAC_PI_2.sin(), FRAC_PI_2.cos()],
        ]);
        assert!(fro_dist(&mat_exp(&rot).unwrap(), &want) < 1e-10);
        assert!(mat_exp(&DenseMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn sigma_max_examples() {
        assert!((two_column_sigma_max(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 1.0).abs() < 1e-15);
        let v = [1.0, -2.0, 0.5];
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((two_column_sigma_max(&v, &v).unwrap() - SQRT_2 * norm).abs() < 1e-14);
        // Gram [[1,1],[1,2]] has eigenvalues (3 ± √5)/2.
        let want = ((3.0 + 5f64.sqrt()) / 2.0).sqrt();
        assert!((two_column_sigma_max(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - want).abs() < 1e-14);
        assert!(two_column_sigma_max(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn percentile_examples() {
        assert_eq!(percentile(&[5.0], 90.0).unwrap(), 5.0);
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.0).unwrap(), 1.0);
        assert_eq!(percentile(&v, 100.0).unwrap(), 10.0);
        assert!((percentile(&v, 90.0).unwrap() - 9.1).abs() < 1e-12);
        assert!(percentile(&[], 50.0).is_err());
        assert!(percentile(&v, 100.5).is_err());
    }

    fn power_iteration_sigma(c1: &[f64], c2: &[f64]) -> f64 {
        let g11: f64 = c1.iter().map(|v| v * v).sum();
        let g22: f64 = c2.iter().map(|v| v * v).sum();
        let g12: f64 = c1.iter().zip(c2).map(|(a, b)| a * b).sum();
        let (mut x, mut y) = (1.0, 0.7);
        let mut lambda = 0.0;
        for _ in 0..5000 {
            let nx = g11 * x + g12 * y;
            let ny = g12 * x + g22 * y;
            let n = (nx * nx + ny * ny).sqrt();
            if n == 0.0 {
                return 0.0;
            }
            lambda = n / (x * x + y * y).sqrt();
            x = nx / n;
            y = ny / n;
        }
        lambda.sqrt()
    }

    fn square(n: usize, bound: f64) -> impl Strategy<Value = DenseMatrix> {
        proptest::collection::vec(-bound..bound, n * n)
            .prop_map(move |d| DenseMatrix::new(n, n, d).unwrap())
    }

    proptest! {
        #[test]
        fn exp_inverse(a in square(4, 1.0)) {
            let a = if frobenius_norm(&a).unwrap() > 2.0 {
                a.scale(2.0 / frobenius_norm(&a).unwrap())
            } else { a };
            let prod = mat_exp(&a).unwrap().matmul(&mat_exp(&-&a).unwrap()).unwrap();
            prop_assert!(fro_dist(&prod, &DenseMatrix::identity(4)) < 1e-8);
        }

        #[test]
        fn exp_additive_on_commuting(p in proptest::collection::vec(-1.0f64..1.0, 3),
                                     q in proptest::collection::vec(-1.0f64..1.0, 3)) {
            let diag = |v: &[f64]| {
                let mut d = DenseMatrix::zeros(3, 3);
                for (i, x) in v.iter().enumerate() { d.set(i, i, *x); }
                d
            };
            let a = diag(&p);
            let b = diag(&q);
            let lhs = mat_exp(&(&a + &b)).unwrap();
            let rhs = mat_exp(&a).unwrap().matmul(&mat_exp(&b).unwrap()).unwrap();
            prop_assert!(fro_dist(&lhs, &rhs) < 1e-10);
        }

        #[test]
        fn sigma_max_matches_power_iteration(c1 in proptest::collection::vec(-3.0f64..3.0, 5),
                                             c2 in proptest::collection::vec(-3.0f64..3.0, 5)) {
            let got = two_column_sigma_max(&c1, &c2).unwrap();
            let want = power_iteration_sigma(&c1, &c2);
            prop_assert!((got - want).abs() < 1e-10 * want.max(1.0));
        }

        #[test]
        fn percentile_monotone(v in proptest::collection::vec(-100.0f64..100.0, 1..40),
                               p1 in 0.0f64..100.0, p2 in 0.0f64..100.0) {
            let (lo, hi) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
            prop_assert!(percentile(&v, lo).unwrap() <= percentile(&v, hi).unwrap());
        }

        #[test]
        fn commutator_antisymmetric(a in square(3, 5.0), b in square(3, 5.0)) {
            let ab = commutator(&a, &b).unwrap();
            let ba = commutator(&b, &a).unwrap();
            prop_assert_eq!(ab, -&ba);
        }
    }
}
