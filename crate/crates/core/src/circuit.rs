//! The reverse-reasoning circuit: explicit weights, the two attention
//! conditions that make it stationary, and probes of the autoregressive head
//! evaluated on the teacher-forced context.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::grad::{loss_and_grad, LossWeights};
use crate::model::{ar_context, forward, DisentangledModel, ForwardTrace, TrainingExample};
use crate::numerics::Matrix;

/// Default one-hotness tolerance for [`check_stationary`].
pub const DEFAULT_TOL: f64 = 1e-6;

/// Layer 1 points every position at its predecessor (`γ·L`); layer 2 matches
/// content (`γ·I`) and suppresses the prompt copy of the end node at position
/// `T - 2` (0-based).
pub fn construct_circuit(gamma: f64, seq_len: usize, vocab: usize) -> Result<DisentangledModel> {
    if !gamma.is_finite() || gamma < 0.0 {
        return Err(Error::InvalidArgument(format!("gamma must be finite and non-negative, got {gamma}")));
    }
    if seq_len < 2 {
        return Err(Error::Dimension("the circuit needs at least two positions".into()));
    }
    let mut m = DisentangledModel::zeros(seq_len, vocab);
    m.layer1.positional = Matrix::lower_shift(seq_len).scale(gamma);
    m.layer2.content = Matrix::identity(vocab).scale(gamma);
    m.layer2.positional[(seq_len - 2, seq_len - 2)] = -gamma;
    Ok(m)
}

/// Attention conditions under which every loss gradient vanishes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stationarity {
    /// The last row of `S1` and row `t_end_ctx` both point at their
    /// predecessor.
    pub predecessor_pointing: bool,
    /// The last row of `S2` sits on `t_end_ctx`.
    pub content_matching: bool,
}

impl Stationarity {
    pub fn both(&self) -> bool {
        self.predecessor_pointing && self.content_matching
    }
}

pub fn check_stationary(trace: &ForwardTrace, example: &TrainingExample, tol: f64) -> Stationarity {
    let last = trace.seq_len() - 1;
    let floor = 1.0 - tol;
    Stationarity {
        predecessor_pointing: trace.s1[(last, last - 1)] >= floor
            && trace.s1[(example.t_end_ctx, example.t_v_ctx)] >= floor,
        content_matching: trace.s2[(last, example.t_end_ctx)] >= floor,
    }
}

/// Measurements of one model on one example.
#[derive(Clone, Debug, PartialEq)]
pub struct CircuitReport {
    pub gamma: f64,
    pub l1a: f64,
    pub l1b: f64,
    pub l2: f64,
    /// `(1/2)[(1/2)(L1a + L1b) + L2]`.
    pub total: f64,
    /// Max-norm of the gradient of `total`.
    pub grad_max: f64,
    /// `S1` mass from the last position onto its predecessor.
    pub s1_last_pred: f64,
    /// `S1` mass from `t_end_ctx` onto `t_v_ctx`.
    pub s1_ctx_pred: f64,
    /// `S2` mass from the last position onto `t_end_ctx`.
    pub s2_mass: f64,
    /// Argmax of the deep head on `Z′` (ties go to the lowest index).
    pub ar_argmax: usize,
    /// The deep head on `Z′` predicts `y1`, the token already in context.
    pub ar_collapsed: bool,
    /// No token receives more than half of the deep head's mass on `Z′`.
    pub ar_diffuse: bool,
    /// Max-norm of the gradient of `L1b` alone.
    pub ar_grad_max: f64,
    /// `(1/2)[(1/2) L1a + L2]`: the loss without the `L1b` term.
    pub core_total: f64,
    /// Max-norm of the gradient of `core_total`.
    pub core_grad_max: f64,
    /// Any probability hit the log clamp.
    pub clamped: bool,
}

pub fn ar_collapse_probe(model: &DisentangledModel, example: &TrainingExample, gamma: f64) -> Result<CircuitReport> {
    let trace = forward(model, &example.z)?;
    let ar_trace = forward(model, &ar_context(example))?;
    let (loss, grad) = loss_and_grad(model, example, LossWeights::MTP)?;
    let ar_only = LossWeights { l1a: 0.0, l1b: 1.0, l2: 0.0 };
    let (_, ar_grad) = loss_and_grad(model, example, ar_only)?;
    let (_, core_grad) = loss_and_grad(model, example, LossWeights::CORE)?;
    let last = trace.seq_len() - 1;
    let ar_argmax = ar_trace.f1.argmax();
    Ok(CircuitReport {
        gamma,
        l1a: loss.l1a,
        l1b: loss.l1b,
        l2: loss.l2,
        total: loss.total,
        grad_max: grad.max_abs(),
        s1_last_pred: trace.s1[(last, last - 1)],
        s1_ctx_pred: trace.s1[(example.t_end_ctx, example.t_v_ctx)],
        s2_mass: trace.s2[(last, example.t_end_ctx)],
        ar_argmax,
        ar_collapsed: ar_argmax == example.y1,
        ar_diffuse: ar_trace.f1[ar_argmax] <= 0.5,
        ar_grad_max: ar_grad.max_abs(),
        core_total: loss.core(),
        core_grad_max: core_grad.max_abs(),
        clamped: loss.clamped,
    })
}

/// One averaged row of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub gamma: f64,
    pub l1a: f64,
    pub l1b: f64,
    pub l2: f64,
    pub total: f64,
    pub grad_max: f64,
    pub s1_last_pred: f64,
    pub s1_ctx_pred: f64,
    pub s2_mass: f64,
    /// Fraction of examples whose AR head collapsed onto `y1`.
    pub ar_collapsed: f64,
    pub core_total: f64,
    pub core_grad_max: f64,
    pub ar_grad_max: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

pub const SWEEP_HEADER: &str = "gamma,L1a,L1b,L2,total,grad_max,s1_T_max,s1_ctx_max,s2_mass,ar_argmax_correct,core_total,core_grad_max,ar_grad_max";

impl SweepTable {
    /// `total` never increases along the sweep.
    pub fn total_monotone(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].total <= w[0].total)
    }

    /// `core_total` never increases along the sweep.
    pub fn core_monotone(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].core_total <= w[0].core_total)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{SWEEP_HEADER}\n");
        for r in &self.rows {
            let cols = [
                r.gamma,
                r.l1a,
                r.l1b,
                r.l2,
                r.total,
                r.grad_max,
                r.s1_last_pred,
                r.s1_ctx_pred,
                r.s2_mass,
                r.ar_collapsed,
                r.core_total,
                r.core_grad_max,
                r.ar_grad_max,
            ];
            let line: Vec<String> = cols.iter().map(|v| format!("{v:e}")).collect();
            writeln!(out, "{}", line.join(",")).unwrap();
        }
        out
    }

    /// Least-squares slope of `ln(column)` against gamma.
    pub fn log_slope(&self, column: impl Fn(&SweepRow) -> f64) -> f64 {
        let xs: Vec<f64> = self.rows.iter().map(|r| r.gamma).collect();
        let ys: Vec<f64> = self.rows.iter().map(|r| column(r).ln()).collect();
        fit_slope(&xs, &ys)
    }
}

/// Ordinary least-squares slope of `ys` on `xs`.
pub fn fit_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Builds the circuit at each gamma and averages the probe over examples.
pub fn gamma_sweep(gammas: &[f64], examples: &[TrainingExample]) -> Result<SweepTable> {
    let Some(first) = examples.first() else {
        return Err(Error::InvalidArgument("sweep needs at least one example".into()));
    };
    if gammas.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one gamma".into()));
    }
    let (t, n) = (first.z.seq_len(), first.z.vocab());
    let mut rows = Vec::with_capacity(gammas.len());
    for &gamma in gammas {
        let model = construct_circuit(gamma, t, n)?;
        let reports = examples
            .iter()
            .map(|ex| ar_collapse_probe(&model, ex, gamma))
            .collect::<Result<Vec<_>>>()?;
        let mean = |f: fn(&CircuitReport) -> f64| reports.iter().map(f).sum::<f64>() / reports.len() as f64;
        rows.push(SweepRow {
            gamma,
            l1a: mean(|r| r.l1a),
            l1b: mean(|r| r.l1b),
            l2: mean(|r| r.l2),
            total: mean(|r| r.total),
            grad_max: mean(|r| r.grad_max),
            s1_last_pred: mean(|r| r.s1_last_pred),
            s1_ctx_pred: mean(|r| r.s1_ctx_pred),
            s2_mass: mean(|r| r.s2_mass),
            ar_collapsed: mean(|r| if r.ar_collapsed { 1.0 } else { 0.0 }),
            core_total: mean(|r| r.core_total),
            core_grad_max: mean(|r| r.core_grad_max),
            ar_grad_max: mean(|r| r.ar_grad_max),
        });
    }
    Ok(SweepTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::encode;
    use crate::taskgen::gen_star;

    fn example(seed: u64) -> TrainingExample {
        encode(&gen_star(2, 3, 10, seed).unwrap()).unwrap()
    }

    #[test]
    fn zero_gamma_is_zero_model() {
        assert_eq!(construct_circuit(0.0, 10, 10).unwrap(), DisentangledModel::zeros(10, 10));
        assert!(construct_circuit(-1.0, 10, 10).is_err());
        assert!(construct_circuit(f64::NAN, 10, 10).is_err());
    }

    #[test]
    fn predecessor_weight_at_gamma_ten() {
        let m = construct_circuit(10.0, 10, 10).unwrap();
        let tr = forward(&m, &example(0).z).unwrap();
        let e = 10f64.exp();
        // fifth position (0-based 4) sees five keys, one of them boosted
        assert!((tr.s1[(4, 3)] - e / (e + 4.0)).abs() < 1e-15);
        assert_eq!(tr.s1[(0, 0)], 1.0);
    }

    #[test]
    fn stationarity_conditions() {
        let ex = example(4);
        let m = construct_circuit(30.0, 10, 10).unwrap();
        let st = check_stationary(&forward(&m, &ex.z).unwrap(), &ex, DEFAULT_TOL);
        assert!(st.both());
        let z = DisentangledModel::zeros(10, 10);
        let st = check_stationary(&forward(&z, &ex.z).unwrap(), &ex, DEFAULT_TOL);
        assert_eq!(
            st,
            Stationarity {
                predecessor_pointing: false,
                content_matching: false
            }
        );
    }

    #[test]
    fn collapse_at_gamma_twenty() {
        let ex = example(12);
        let m = construct_circuit(20.0, 10, 10).unwrap();
        let r = ar_collapse_probe(&m, &ex, 20.0).unwrap();
        assert_eq!(r.ar_argmax, ex.y1);
        assert!(r.ar_collapsed && !r.ar_diffuse);
        assert!((17.0..=23.0).contains(&r.l1b), "L1b = {}", r.l1b);
        assert!(r.core_grad_max <= 1e-6);
        // the log-loss of a vanishing target keeps an O(1) gradient
        assert!(r.ar_grad_max > 0.1, "{}", r.ar_grad_max);
    }

    #[test]
    fn zero_model_probe_is_diffuse() {
        let ex = example(2);
        let r = ar_collapse_probe(&DisentangledModel::zeros(10, 10), &ex, 0.0).unwrap();
        assert!(r.ar_diffuse);
    }

    #[test]
    fn sweep_csv_layout() {
        let exs: Vec<_> = (0..3).map(example).collect();
        let t = gamma_sweep(&[5.0, 10.0], &exs).unwrap();
        let csv = t.to_csv();
        assert!(csv.starts_with("gamma,L1a,L1b,L2,total,grad_max,s1_T_max,s1_ctx_max,s2_mass,ar_argmax_correct"));
        assert_eq!(csv.lines().count(), 3);
        assert!(t.core_monotone());
        assert!(gamma_sweep(&[], &exs).is_err());
        assert!(gamma_sweep(&[1.0], &[]).is_err());
    }

    #[test]
    fn slope_of_exact_line() {
        assert!((fit_slope(&[0.0, 1.0, 2.0], &[1.0, -1.0, -3.0]) + 2.0).abs() < 1e-15);
    }
}
