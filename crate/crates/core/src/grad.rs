//! Closed-form gradients of the head losses with respect to all four weight
//! matrices.
//!
//! Attention logits use the query-left convention `a_ij = z_iᵀ W0 z_j`, so a
//! content gradient concentrated on one query token lands in that token's row
//! of `W0`.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::{ar_context, forward, neg_log, ContentMatrix, DisentangledModel, ForwardTrace, LossBreakdown, TrainingExample, PROB_FLOOR};
use crate::numerics::{finite_diff_grad, jacobian_apply, Matrix};

/// Gradient with respect to each weight matrix, in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradSet {
    /// `∂L/∂W0⁽¹⁾`
    pub content1: Matrix,
    /// `∂L/∂W1⁽¹⁾`
    pub positional1: Matrix,
    /// `∂L/∂W0⁽²⁾`
    pub content2: Matrix,
    /// `∂L/∂W1⁽²⁾`
    pub positional2: Matrix,
}

impl GradSet {
    pub const NAMES: [&'static str; 4] = ["dW0_1", "dW1_1", "dW0_2", "dW1_2"];

    pub fn zeros(seq_len: usize, vocab: usize) -> Self {
        GradSet {
            content1: Matrix::zeros(vocab, vocab),
            positional1: Matrix::zeros(seq_len, seq_len),
            content2: Matrix::zeros(vocab, vocab),
            positional2: Matrix::zeros(seq_len, seq_len),
        }
    }

    pub fn matrices(&self) -> [&Matrix; 4] {
        [&self.content1, &self.positional1, &self.content2, &self.positional2]
    }

    pub fn matrices_mut(&mut self) -> [&mut Matrix; 4] {
        [
            &mut self.content1,
            &mut self.positional1,
            &mut self.content2,
            &mut self.positional2,
        ]
    }

    pub fn max_abs(&self) -> f64 {
        self.matrices().iter().map(|m| m.max_abs()).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.matrices().iter().all(|m| m.is_finite())
    }

    /// `self += c · other`.
    pub fn add_scaled(&mut self, other: &GradSet, c: f64) {
        for (a, b) in self.matrices_mut().into_iter().zip(other.matrices()) {
            a.add_scaled(b, c);
        }
    }

    pub fn scale(&self, c: f64) -> GradSet {
        let mut out = self.clone();
        for m in out.matrices_mut() {
            *m = m.scale(c);
        }
        out
    }

    fn from_logit_grads(z: &ContentMatrix, d_a1: Matrix, d_a2: Option<Matrix>) -> GradSet {
        let t = d_a1.rows();
        let (content2, positional2) = match d_a2 {
            Some(d) => (z.scatter(&d), d),
            None => (Matrix::zeros(z.vocab(), z.vocab()), Matrix::zeros(t, t)),
        };
        GradSet {
            content1: z.scatter(&d_a1),
            positional1: d_a1,
            content2,
            positional2,
        }
    }
}

fn target_prob(p: f64) -> Result<f64> {
    if p < PROB_FLOOR || !p.is_finite() {
        return Err(Error::SingularLoss { probability: p });
    }
    Ok(p)
}

/// `∂L2/∂A1` for `L2 = -ln f2[y]`: only the last row is nonzero.
pub fn shallow_logit_grad(trace: &ForwardTrace, z: &ContentMatrix, y: usize) -> Result<Matrix> {
    let t = trace.seq_len();
    let q = target_prob(trace.f2[y])?;
    let row = jacobian_apply(trace.s1_last(), &z.indicator(y));
    let mut d_a1 = Matrix::zeros(t, t);
    for (dst, v) in d_a1.row_mut(t - 1).iter_mut().zip(row) {
        *dst = -v / q;
    }
    Ok(d_a1)
}

/// `(∂L1/∂A1, ∂L1/∂A2)` for `L1 = -ln f1[y]`.
///
/// With `s` the last row of `S2`, `u = Z e_y`, `h = S1 u` and `r = J(s) h`:
/// `∂L1/∂A2 = -(1/p) S1[T]ᵀ rᵀ`, and `∂L1/∂S1` collects the query path
/// (through the last row of `S1 A2`) and the value path (through `s`) before
/// the row-wise softmax Jacobian.
pub fn deep_logit_grads(trace: &ForwardTrace, z: &ContentMatrix, y: usize) -> Result<(Matrix, Matrix)> {
    let t = trace.seq_len();
    let last = t - 1;
    let p = target_prob(trace.f1[y])?;
    let u = z.indicator(y);
    let s = trace.s2_last();
    let h = trace.s1.mul_vec(&u);
    let r = jacobian_apply(s, &h);
    let s1_last = trace.s1_last();

    let d_a2 = Matrix::from_fn(t, t, |i, j| -s1_last[i] * r[j] / p);

    let a2r = trace.a2.mul_vec(&r);
    let mut d_a1 = Matrix::zeros(t, t);
    let mut g = vec![0.0; t];
    for k in 0..t {
        if s[k] == 0.0 && k != last {
            continue;
        }
        for (i, gi) in g.iter_mut().enumerate() {
            let query = if k == last { a2r[i] } else { 0.0 };
            *gi = -(query + s[k] * u[i]) / p;
        }
        d_a1.row_mut(k).copy_from_slice(&jacobian_apply(trace.s1.row(k), &g));
    }
    Ok((d_a1, d_a2))
}

/// Gradient of `L2 = -ln f2(Z)[y2]`. Layer-2 entries are exactly zero.
pub fn grad_shallow(trace: &ForwardTrace, z: &ContentMatrix, y2: usize) -> Result<GradSet> {
    Ok(GradSet::from_logit_grads(z, shallow_logit_grad(trace, z, y2)?, None))
}

/// Gradient of `L1 = -ln f1(Z)[y]` through all three paths.
pub fn grad_deep(trace: &ForwardTrace, z: &ContentMatrix, y: usize) -> Result<GradSet> {
    let (d_a1, d_a2) = deep_logit_grads(trace, z, y)?;
    Ok(GradSet::from_logit_grads(z, d_a1, Some(d_a2)))
}

/// Weights on the three head losses. The composite objective is
/// `l1a·L1a + l1b·L1b + l2·L2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub l1a: f64,
    pub l1b: f64,
    pub l2: f64,
}

impl LossWeights {
    /// `(1/2)[(1/2)(L1a + L1b) + L2]`.
    pub const MTP: LossWeights = LossWeights { l1a: 0.25, l1b: 0.25, l2: 0.5 };
    /// `L1a` alone.
    pub const NTP: LossWeights = LossWeights { l1a: 1.0, l1b: 0.0, l2: 0.0 };
    /// The composite objective with the autoregressive `L1b` term dropped.
    pub const CORE: LossWeights = LossWeights { l1a: 0.25, l1b: 0.0, l2: 0.5 };

    pub fn combine(&self, l: &LossBreakdown) -> f64 {
        // skip zero-weight terms so clamped values cannot leak in as 0·x
        let term = |w: f64, x: f64| if w == 0.0 { 0.0 } else { w * x };
        term(self.l1a, l.l1a) + term(self.l1b, l.l1b) + term(self.l2, l.l2)
    }
}

/// Loss components and the weighted gradient for one example. `L1b` (and the
/// second forward pass) is skipped when its weight is zero; it is then
/// reported as NaN.
pub fn loss_and_grad(
    model: &DisentangledModel,
    example: &TrainingExample,
    weights: LossWeights,
) -> Result<(LossBreakdown, GradSet)> {
    let z = &example.z;
    let trace = forward(model, z)?;
    let mut grad = GradSet::zeros(model.seq_len(), model.vocab());

    let (l1a, c1) = neg_log(trace.f1[example.y1]);
    let (l2, c3) = neg_log(trace.f2[example.y2]);
    if weights.l1a != 0.0 {
        grad.add_scaled(&grad_deep(&trace, z, example.y1)?, weights.l1a);
    }
    if weights.l2 != 0.0 {
        grad.add_scaled(&grad_shallow(&trace, z, example.y2)?, weights.l2);
    }
    let (l1b, c2) = if weights.l1b != 0.0 {
        let zp = ar_context(example);
        let tp = forward(model, &zp)?;
        grad.add_scaled(&grad_deep(&tp, &zp, example.y2)?, weights.l1b);
        neg_log(tp.f1[example.y2])
    } else {
        (f64::NAN, false)
    };
    let mut loss = LossBreakdown {
        total: 0.0,
        l1a,
        l1b,
        l2,
        clamped: c1 || c2 || c3,
    };
    loss.total = weights.combine(&loss);
    Ok((loss, grad))
}

/// Gradient of the composite multi-token loss
/// `(1/2)[(1/2)(L1a + L1b) + L2]`.
pub fn grad_total(model: &DisentangledModel, example: &TrainingExample) -> Result<GradSet> {
    Ok(loss_and_grad(model, example, LossWeights::MTP)?.1)
}

/// Entrywise relative error `|a - b| / (|a| + |b| + 1e-12)`, maximized.
pub fn max_rel_err(a: &Matrix, b: &Matrix) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs() / (x.abs() + y.abs() + 1e-12))
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckRow {
    pub matrix: &'static str,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub rows: Vec<GradCheckRow>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn worst(&self) -> f64 {
        self.rows.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("matrix,max_rel_err,pass\n");
        for r in &self.rows {
            writeln!(out, "{},{:e},{}", r.matrix, r.max_rel_err, r.pass).unwrap();
        }
        out
    }
}

/// Compares two gradient sets matrix by matrix.
pub fn compare(analytic: &GradSet, numeric: &GradSet, tol: f64) -> GradCheckReport {
    let rows = GradSet::NAMES
        .iter()
        .zip(analytic.matrices().into_iter().zip(numeric.matrices()))
        .map(|(&matrix, (a, b))| {
            let e = max_rel_err(a, b);
            GradCheckRow {
                matrix,
                max_rel_err: e,
                pass: e <= tol,
            }
        })
        .collect();
    GradCheckReport { rows, tol }
}

/// Closed-form composite gradient against central finite differences of the
/// composite loss.
pub fn check_grad(
    model: &DisentangledModel,
    example: &TrainingExample,
    epsilon: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    check_grad_weighted(model, example, LossWeights::MTP, epsilon, tol)
}

pub fn check_grad_weighted(
    model: &DisentangledModel,
    example: &TrainingExample,
    weights: LossWeights,
    epsilon: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol}")));
    }
    let (_, analytic) = loss_and_grad(model, example, weights)?;
    let numeric = finite_diff_grad(
        |m| Ok(loss_and_grad(m, example, weights)?.0.total),
        model,
        epsilon,
    )?;
    Ok(compare(&analytic, &numeric, tol))
}
