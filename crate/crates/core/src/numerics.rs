//! Dense kernels for the disentangled model: a small row-major matrix, the
//! causal (masked) softmax, the softmax Jacobian, and the central-difference
//! gradient engine used as the independent oracle for the closed forms.

use std::fmt;
use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};
use crate::grad::GradSet;
use crate::model::DisentangledModel;

/// Row sums of stochastic rows must match 1 to this tolerance.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// Default step for central finite differences.
pub const DEFAULT_FD_EPSILON: f64 = 1e-5;

/// Row-major dense matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    /// The strictly lower shift matrix: ones at `(i, i-1)`.
    pub fn lower_shift(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j + 1 { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
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

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Dimension(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Row vector times matrix: `v · self`.
    pub fn vec_mul(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (k, &a) in v.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            for (o, &b) in out.iter_mut().zip(self.row(k)) {
                *o += a * b;
            }
        }
        out
    }

    /// Matrix times column vector: `self · v`.
    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    pub fn scale(&self, c: f64) -> Matrix {
        self.map(|x| x * c)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// `self += c * other`.
    pub fn add_scaled(&mut self, other: &Matrix, c: f64) {
        assert_eq!(self.shape(), other.shape(), "add_scaled shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Indices `(i, j)` of entries that are not exactly zero.
    pub fn support(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.rows {
            for j in 0..self.cols {
                if self[(i, j)] != 0.0 {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A probability vector: non-negative weights summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct Distribution(Vec<f64>);

impl Distribution {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Validation("empty distribution".into()));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::Validation(format!("invalid weight {w}")));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::Validation(format!("weights sum to {sum}, not 1")));
        }
        Ok(Self(weights))
    }

    pub fn one_hot(len: usize, k: usize) -> Self {
        let mut w = vec![0.0; len];
        w[k] = 1.0;
        Self(w)
    }

    pub fn uniform(len: usize) -> Self {
        Self(vec![1.0 / len as f64; len])
    }

    /// Wraps weights produced by a softmax or a convex combination of
    /// distributions; only checked in debug builds.
    pub(crate) fn from_simplex(weights: Vec<f64>) -> Self {
        debug_assert!(weights.iter().all(|w| *w >= 0.0 || w.is_nan()));
        Self(weights)
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl Index<usize> for Distribution {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Max-shifted softmax of a slice.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for o in &mut out {
        *o /= sum;
    }
    out
}

/// Causal row-wise softmax: row `t` normalizes over columns `0..=t` and
/// leaves the masked columns at exactly zero.
pub fn masked_softmax(logits: &Matrix) -> Result<Matrix> {
    if !logits.is_square() || logits.rows() == 0 {
        return Err(Error::Dimension(format!(
            "masked softmax needs a non-empty square matrix, got {}x{}",
            logits.rows(),
            logits.cols()
        )));
    }
    let n = logits.rows();
    let mut out = Matrix::zeros(n, n);
    for t in 0..n {
        let visible = softmax(&logits.row(t)[..=t]);
        out.row_mut(t)[..=t].copy_from_slice(&visible);
    }
    Ok(out)
}

/// `J(s) = diag(s) - s sᵀ`.
pub fn softmax_jacobian(s: &Distribution) -> Matrix {
    let w = s.weights();
    Matrix::from_fn(w.len(), w.len(), |i, j| {
        let diag = if i == j { w[i] } else { 0.0 };
        diag - w[i] * w[j]
    })
}

/// `J(s) · v` without materializing the Jacobian: `s ⊙ (v - (s·v) 𝟙)`.
pub fn jacobian_apply(s: &[f64], v: &[f64]) -> Vec<f64> {
    let sv = dot(s, v);
    s.iter().zip(v).map(|(si, vi)| si * (vi - sv)).collect()
}

/// Central-difference gradient of `loss_fn` with respect to every entry of
/// all four weight matrices.
pub fn finite_diff_grad<F>(loss_fn: F, model: &DisentangledModel, epsilon: f64) -> Result<GradSet>
where
    F: Fn(&DisentangledModel) -> Result<f64>,
{
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive, got {epsilon}"
        )));
    }
    let base = loss_fn(model)?;
    if !base.is_finite() {
        return Err(Error::Evaluation(format!("loss at the model point is {base}")));
    }

    let mut probe = model.clone();
    let mut grads: Vec<Matrix> = model
        .matrices()
        .iter()
        .map(|m| Matrix::zeros(m.rows(), m.cols()))
        .collect();

    for (which, grad) in grads.iter_mut().enumerate() {
        for idx in 0..grad.as_slice().len() {
            let orig = probe.matrices()[which].as_slice()[idx];

            probe.matrices_mut()[which].as_mut_slice()[idx] = orig + epsilon;
            let plus = loss_fn(&probe)?;
            probe.matrices_mut()[which].as_mut_slice()[idx] = orig - epsilon;
            let minus = loss_fn(&probe)?;
            probe.matrices_mut()[which].as_mut_slice()[idx] = orig;

            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Evaluation(format!(
                    "loss became non-finite perturbing matrix {which} entry {idx}"
                )));
            }
            grad.as_mut_slice()[idx] = (plus - minus) / (2.0 * epsilon);
        }
    }

    let [content1, positional1, content2, positional2]: [Matrix; 4] =
        grads.try_into().expect("four weight matrices");
    Ok(GradSet {
        content1,
        positional1,
        content2,
        positional2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_logits_give_uniform_prefix_rows() {
        let s = masked_softmax(&Matrix::zeros(4, 4)).unwrap();
        for t in 0..4 {
            for j in 0..4 {
                let want = if j <= t { 1.0 / (t + 1) as f64 } else { 0.0 };
                assert_eq!(s[(t, j)], want, "row {t} col {j}");
            }
        }
    }

    #[test]
    fn shifted_logits_match_closed_form_predecessor_weight() {
        let gamma = 10.0;
        let s = masked_softmax(&Matrix::lower_shift(10).scale(gamma)).unwrap();
        // 1-based row 5 is index 4; its predecessor is index 3.
        let t = 5.0;
        let denom = gamma.exp() + (t - 1.0);
        assert!((s[(4, 3)] - gamma.exp() / denom).abs() < 1e-15);
        for j in [0, 1, 2, 4] {
            assert!((s[(4, j)] - 1.0 / denom).abs() < 1e-15);
        }
    }

    #[test]
    fn random_logits_rows_are_causal_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let logits = Matrix::from_fn(10, 10, |_, _| rng.gen_range(-5.0..5.0));
        let s = masked_softmax(&logits).unwrap();
        for t in 0..10 {
            let sum: f64 = s.row(t).iter().sum();
            assert!((sum - 1.0).abs() < ROW_SUM_TOL);
            assert!(s.row(t)[t + 1..].iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn non_square_logits_rejected() {
        assert!(matches!(
            masked_softmax(&Matrix::zeros(2, 3)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn huge_logits_do_not_overflow() {
        let logits = Matrix::from_fn(3, 3, |i, j| if j < i { 800.0 } else { -800.0 });
        let s = masked_softmax(&logits).unwrap();
        assert!(s.is_finite());
        assert_eq!(s[(2, 0)], 0.5);
        assert_eq!(s[(0, 0)], 1.0);
    }

    #[test]
    fn jacobian_of_one_hot_is_zero() {
        let j = softmax_jacobian(&Distribution::one_hot(6, 2));
        assert_eq!(j.max_abs(), 0.0);
    }

    #[test]
    fn jacobian_of_uniform_prefix() {
        let r = 4;
        let mut w = vec![0.0; 7];
        w[..r].fill(0.25);
        let j = softmax_jacobian(&Distribution::new(w).unwrap());
        for a in 0..r {
            for b in 0..r {
                let want = if a == b { 1.0 / 4.0 } else { 0.0 } - 1.0 / 16.0;
                assert!((j[(a, b)] - want).abs() < 1e-15);
            }
        }
        assert!(j.row(5).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn jacobian_two_point_hand_values() {
        // diag(0.6, 0.4) - [[0.36, 0.24], [0.24, 0.16]]
        let j = softmax_jacobian(&Distribution::new(vec![0.6, 0.4]).unwrap());
        let want = [[0.24, -0.24], [-0.24, 0.24]];
        for a in 0..2 {
            for b in 0..2 {
                assert!((j[(a, b)] - want[a][b]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn jacobian_apply_matches_dense() {
        let s = Distribution::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let v = [1.0, -2.0, 0.5, 3.0];
        let dense = softmax_jacobian(&s).mul_vec(&v);
        let fast = jacobian_apply(s.weights(), &v);
        for (a, b) in dense.iter().zip(&fast) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn distribution_rejects_bad_weights() {
        assert!(Distribution::new(vec![0.5, 0.6]).is_err());
        assert!(Distribution::new(vec![1.5, -0.5]).is_err());
        assert!(Distribution::new(vec![]).is_err());
        assert!(Distribution::new(vec![f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[0.25; 4]), 0);
    }

    #[test]
    fn finite_diff_of_linear_loss_is_indicator() {
        let model = DisentangledModel::zeros(4, 3);
        let g = finite_diff_grad(
            |m| Ok(m.layer1.content.as_slice().iter().sum()),
            &model,
            1e-3,
        )
        .unwrap();
        assert!(g.content1.as_slice().iter().all(|&x| (x - 1.0).abs() < 1e-10));
        assert_eq!(g.positional1.max_abs(), 0.0);
        assert_eq!(g.content2.max_abs(), 0.0);
        assert_eq!(g.positional2.max_abs(), 0.0);
    }

    #[test]
    fn finite_diff_of_constant_is_zero() {
        let model = DisentangledModel::zeros(3, 3);
        let g = finite_diff_grad(|_| Ok(2.5), &model, DEFAULT_FD_EPSILON).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn finite_diff_propagates_non_finite() {
        let model = DisentangledModel::zeros(2, 2);
        let err = finite_diff_grad(
            |m| Ok(if m.layer2.positional[(1, 1)] > 0.0 { f64::INFINITY } else { 0.0 }),
            &model,
            1e-3,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Evaluation(_)));
        assert!(finite_diff_grad(|_| Ok(0.0), &model, 0.0).is_err());
    }
}
