//! Dense matrices and the small set of statistics primitives the attention
//! and equity code is built on.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Default stabilizer for min-max normalization.
pub const MINMAX_EPSILON: f64 = 1e-8;
/// Lower bound applied to every EMA variance entry.
pub const VARIANCE_FLOOR: f64 = 1e-6;
/// Default EMA rate.
pub const DEFAULT_EMA_RATE: f64 = 0.1;

/// Row-major dense matrix of finite `f64` values.
///
/// Serializes as a list of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::DimensionMismatch {
                what: "matrix data",
                expected: rows * cols,
                actual: data.len(),
            });
        }
        check_finite("matrix", &data)?;
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::DimensionMismatch {
                    what: "matrix row",
                    expected: cols,
                    actual: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(rows.len(), cols, data)
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch {
                what: "matmul inner dimension",
                expected: self.cols,
                actual: other.rows,
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let lhs = self.row(i);
            let dst = out.row_mut(i);
            for (k, &a) in lhs.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (d, &b) in dst.iter_mut().zip(other.row(k)) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_transposed(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::DimensionMismatch {
                what: "matmul_transposed inner dimension",
                expected: self.cols,
                actual: other.cols,
            });
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            for j in 0..other.rows {
                out[(i, j)] = dot(self.row(i), other.row(j));
            }
        }
        Ok(out)
    }

    /// Columns `start..start + width` as a new matrix.
    pub fn column_block(&self, start: usize, width: usize) -> Matrix {
        let mut data = Vec::with_capacity(self.rows * width);
        for i in 0..self.rows {
            data.extend_from_slice(&self.row(i)[start..start + width]);
        }
        Matrix {
            rows: self.rows,
            cols: width,
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimensionMismatch {
                what: "matrix sum",
                expected: self.data.len(),
                actual: other.data.len(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Largest absolute elementwise difference; `None` when shapes differ.
    pub fn max_abs_diff(&self, other: &Matrix) -> Option<f64> {
        if self.rows != other.rows || self.cols != other.cols {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        )
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

impl TryFrom<Vec<Vec<f64>>> for Matrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Matrix::from_rows(&rows)
    }
}

impl From<Matrix> for Vec<Vec<f64>> {
    fn from(m: Matrix) -> Self {
        m.to_rows()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn check_finite(what: &'static str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { what, index }),
        None => Ok(()),
    }
}

/// Softmax of one row of logits, shifted by the row maximum.
pub fn stable_softmax_row(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Empty { what: "softmax row" });
    }
    check_finite("softmax row", logits)?;
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Unchecked variant for hot loops; `row` must be non-empty and finite.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// `(x - min) / (max - min + epsilon)`; a flat window maps to all zeros.
pub fn minmax_normalize(values: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Empty {
            what: "normalization window",
        });
    }
    check_finite("normalization window", values)?;
    if !(epsilon >= 0.0) {
        return Err(invalid("epsilon", "must be non-negative"));
    }
    let (min, max) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    if max == min {
        return Ok(vec![0.0; values.len()]);
    }
    let span = max - min + epsilon;
    Ok(values.iter().map(|&v| (v - min) / span).collect())
}

/// Diagonal-covariance Gaussian tracked with an exponential moving average.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaGaussian {
    mean: Vec<f64>,
    variance: Vec<f64>,
    count: u64,
    rate: f64,
    floor: f64,
}

impl EmaGaussian {
    /// Empty estimator; its dimension is fixed by the first observation.
    pub fn new(rate: f64) -> Result<Self> {
        Self::with_floor(rate, VARIANCE_FLOOR)
    }

    pub fn with_floor(rate: f64, floor: f64) -> Result<Self> {
        if !(rate > 0.0 && rate <= 1.0) {
            return Err(invalid("beta", format!("EMA rate {rate} outside (0, 1]")));
        }
        if !(floor > 0.0) || !floor.is_finite() {
            return Err(invalid("variance_floor", "must be positive"));
        }
        Ok(Self {
            mean: Vec::new(),
            variance: Vec::new(),
            count: 0,
            rate,
            floor,
        })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variance(&self) -> &[f64] {
        &self.variance
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn is_initialized(&self) -> bool {
        self.count > 0
    }

    /// Returns the state after observing `feature`, leaving `self` untouched.
    pub fn updated(&self, feature: &[f64]) -> Result<Self> {
        let mut next = self.clone();
        next.observe(feature)?;
        Ok(next)
    }

    /// In-place form of [`EmaGaussian::updated`].
    ///
    /// The first observation sets the mean and a unit variance. Afterwards the
    /// mean moves first and the variance is updated against the new mean.
    pub fn observe(&mut self, feature: &[f64]) -> Result<()> {
        if feature.is_empty() {
            return Err(Error::Empty { what: "feature" });
        }
        check_finite("feature", feature)?;
        if self.count == 0 {
            self.mean = feature.to_vec();
            self.variance = vec![1.0_f64.max(self.floor); feature.len()];
            self.count = 1;
            return Ok(());
        }
        if feature.len() != self.mean.len() {
            return Err(Error::DimensionMismatch {
                what: "feature",
                expected: self.mean.len(),
                actual: feature.len(),
            });
        }
        let beta = self.rate;
        for ((m, v), &f) in self.mean.iter_mut().zip(&mut self.variance).zip(feature) {
            *m = (1.0 - beta) * *m + beta * f;
            let dev = f - *m;
            *v = ((1.0 - beta) * *v + beta * dev * dev).max(self.floor);
        }
        self.count += 1;
        Ok(())
    }
}

/// Mahalanobis distance of `feature` under the diagonal Gaussian `state`.
pub fn mahalanobis_diag(feature: &[f64], state: &EmaGaussian) -> Result<f64> {
    if !state.is_initialized() {
        return Err(Error::Uninitialized);
    }
    if feature.len() != state.dim() {
        return Err(Error::DimensionMismatch {
            what: "feature",
            expected: state.dim(),
            actual: feature.len(),
        });
    }
    check_finite("feature", feature)?;
    let sq: f64 = feature
        .iter()
        .zip(state.mean())
        .zip(state.variance())
        .map(|((f, m), v)| (f - m) * (f - m) / v)
        .sum();
    Ok(sq.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        assert_eq!(stable_softmax_row(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(stable_softmax_row(&[1000.0, 1000.0]).unwrap(), vec![0.5, 0.5]);
        // exp(0) : exp(ln 3) = 1 : 3
        let p = stable_softmax_row(&[0.0, 3f64.ln()]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-15);
        assert!((p[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_bad_rows() {
        assert!(matches!(stable_softmax_row(&[]), Err(Error::Empty { .. })));
        assert!(matches!(
            stable_softmax_row(&[0.0, f64::NAN]),
            Err(Error::NonFinite { index: 1, .. })
        ));
        assert!(stable_softmax_row(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn minmax_examples() {
        assert_eq!(minmax_normalize(&[5.0, 5.0, 5.0], 1e-8).unwrap(), vec![0.0; 3]);
        assert_eq!(minmax_normalize(&[7.0], 1e-8).unwrap(), vec![0.0]);
        let x = minmax_normalize(&[1.0, 3.0, 5.0], 1e-8).unwrap();
        for (got, want) in x.iter().zip([0.0, 0.5, 1.0]) {
            assert!((got - want).abs() < 1e-8, "{got} vs {want}");
        }
        assert!(minmax_normalize(&[], 1e-8).is_err());
    }

    #[test]
    fn ema_examples() {
        let s = EmaGaussian::new(0.1).unwrap().updated(&[2.0, -1.0]).unwrap();
        assert_eq!(s.mean(), &[2.0, -1.0]);
        assert_eq!(s.variance(), &[1.0, 1.0]);
        assert_eq!(s.count(), 1);

        let full = EmaGaussian::new(1.0)
            .unwrap()
            .updated(&[3.0])
            .unwrap()
            .updated(&[-4.0])
            .unwrap();
        assert_eq!(full.mean(), &[-4.0]);
        // variance collapses to the floor when beta = 1
        assert_eq!(full.variance(), &[VARIANCE_FLOOR]);

        let half = EmaGaussian::new(0.5)
            .unwrap()
            .updated(&[0.0])
            .unwrap()
            .updated(&[1.0])
            .unwrap();
        assert_eq!(half.mean(), &[0.5]);
        // 0.5 * 1 + 0.5 * (1 - 0.5)^2
        assert_eq!(half.variance(), &[0.625]);
    }

    #[test]
    fn ema_errors() {
        assert!(EmaGaussian::new(0.0).is_err());
        assert!(EmaGaussian::new(1.5).is_err());
        let s = EmaGaussian::new(0.1).unwrap().updated(&[1.0, 2.0]).unwrap();
        assert!(matches!(
            s.updated(&[1.0]),
            Err(Error::DimensionMismatch {
                expected: 2,
                actual: 1,
                ..
            })
        ));
    }

    #[test]
    fn ema_does_not_mutate_input_state() {
        let s = EmaGaussian::new(0.3).unwrap().updated(&[1.0]).unwrap();
        let before = s.clone();
        let _ = s.updated(&[10.0]).unwrap();
        assert_eq!(s, before);
    }

    fn state(mean: &[f64], variance: &[f64]) -> EmaGaussian {
        EmaGaussian {
            mean: mean.to_vec(),
            variance: variance.to_vec(),
            count: 1,
            rate: 0.1,
            floor: VARIANCE_FLOOR,
        }
    }

    #[test]
    fn mahalanobis_examples() {
        let s = state(&[1.5, -2.0], &[0.3, 2.0]);
        assert_eq!(mahalanobis_diag(&[1.5, -2.0], &s).unwrap(), 0.0);
        let s = state(&[0.0, 0.0], &[1.0, 1.0]);
        assert_eq!(mahalanobis_diag(&[3.0, 4.0], &s).unwrap(), 5.0);
        let s = state(&[0.0], &[4.0]);
        assert_eq!(mahalanobis_diag(&[2.0], &s).unwrap(), 1.0);
    }

    #[test]
    fn mahalanobis_requires_observations() {
        let s = EmaGaussian::new(0.1).unwrap();
        assert!(matches!(mahalanobis_diag(&[1.0], &s), Err(Error::Uninitialized)));
    }

    #[test]
    fn ema_constant_stream_converges() {
        let target = [0.7, -3.0, 12.5];
        let mut s = EmaGaussian::new(0.1).unwrap().updated(&[0.0, 0.0, 0.0]).unwrap();
        for _ in 0..100 {
            s.observe(&target).unwrap();
        }
        let err = s
            .mean()
            .iter()
            .zip(target)
            .map(|(m, t)| (m - t).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-3, "mean error {err}");
    }

    #[test]
    fn matmul_small() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().to_rows(), vec![vec![2.0, 1.0], vec![4.0, 3.0]]);
        assert_eq!(
            a.matmul_transposed(&a).unwrap().to_rows(),
            vec![vec![5.0, 11.0], vec![11.0, 25.0]]
        );
    }

    #[test]
    fn matrix_rejects_nan_and_ragged_rows() {
        assert!(Matrix::new(1, 2, vec![0.0, f64::NAN]).is_err());
        assert!(Matrix::new(2, 2, vec![0.0; 3]).is_err());
        assert!(Matrix::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(
            v in prop::collection::vec(-50.0f64..50.0, 1..32),
            c in -1e3f64..1e3,
        ) {
            let a = stable_softmax_row(&v).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let b = stable_softmax_row(&shifted).unwrap();
            let total: f64 = a.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn minmax_order_preserving(v in prop::collection::vec(-1e3f64..1e3, 1..32)) {
            let out = minmax_normalize(&v, MINMAX_EPSILON).unwrap();
            for i in 0..v.len() {
                prop_assert!((0.0..1.0).contains(&out[i]));
                for j in 0..v.len() {
                    if v[i] <= v[j] {
                        prop_assert!(out[i] <= out[j]);
                    }
                }
            }
        }

        #[test]
        fn mahalanobis_permutation_invariant(
            rows in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0, 0.01f64..10.0), 1..12),
            rot in 0usize..12,
        ) {
            let f: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let m: Vec<f64> = rows.iter().map(|r| r.1).collect();
            let v: Vec<f64> = rows.iter().map(|r| r.2).collect();
            let k = rot % rows.len();
            let rotate = |x: &[f64]| -> Vec<f64> {
                let mut y = x.to_vec();
                y.rotate_left(k);
                y.reverse();
                y
            };
            let d1 = mahalanobis_diag(&f, &state(&m, &v)).unwrap();
            let d2 = mahalanobis_diag(&rotate(&f), &state(&rotate(&m), &rotate(&v))).unwrap();
            prop_assert!((d1 - d2).abs() <= 1e-12 * d1.max(1.0));
        }
    }
}
