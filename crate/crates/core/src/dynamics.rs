//! Reduced training dynamics: the Toeplitz flow that grows the predecessor
//! pointer, the expected next-token gradient on offset weights at zero init,
//! and layer-2 descent with layer 1 frozen at the pointer.

use std::fmt::Write as _;

use num_rational::Rational64;

use crate::error::{Error, Result};
use crate::grad::deep_logit_grads;
use crate::model::{forward, ContentMatrix, DisentangledModel, TrainingExample};
use crate::numerics::{softmax, Matrix};

/// Sequence length the reduced systems are stated for.
pub const CANONICAL_T: usize = 10;

/// Phase-II step budget when no explicit count is given.
pub const PHASE2_MAX_STEPS: usize = 100_000;

/// Offset weights of a Toeplitz positional bias as seen by the last row:
/// `w_q` on the diagonal, `w_p` at offset 1, `w_c` at every offset `k ≥ 2`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ToeplitzState {
    pub w_p: f64,
    pub w_c: f64,
    pub w_q: f64,
}

/// Softmax weights of the last row: predecessor, each context slot, self.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RowWeights {
    pub s_p: f64,
    pub s_c: f64,
    pub s_q: f64,
}

impl ToeplitzState {
    pub fn zero() -> Self {
        Self::default()
    }

    /// `w_p - w_c`.
    pub fn delta(&self) -> f64 {
        self.w_p - self.w_c
    }

    /// Last-row softmax over `w_q`, `w_p` and `T - 2` copies of `w_c`.
    pub fn row_weights(&self, seq_len: usize) -> RowWeights {
        let mut logits = vec![self.w_c; seq_len];
        logits[seq_len - 1] = self.w_q;
        logits[seq_len - 2] = self.w_p;
        let s = softmax(&logits);
        RowWeights {
            s_p: s[seq_len - 2],
            s_c: s[0],
            s_q: s[seq_len - 1],
        }
    }
}

fn check_seq_len(seq_len: usize) -> Result<()> {
    if seq_len < 3 {
        return Err(Error::InvalidArgument(format!(
            "the offset system needs T >= 3, got {seq_len}"
        )));
    }
    Ok(())
}

/// `(dw_p, dw_c)` of the Phase-I flow:
/// `dw_p = -s_p + s_p/(s_p+s_c)`, `dw_c = -s_c + (1/(T-2)) s_c/(s_p+s_c)`.
pub fn phase1_rhs(state: &ToeplitzState, seq_len: usize) -> Result<(f64, f64)> {
    check_seq_len(seq_len)?;
    let RowWeights { s_p, s_c, .. } = state.row_weights(seq_len);
    let pc = s_p + s_c;
    let ctx = (seq_len - 2) as f64;
    Ok((-s_p + s_p / pc, -s_c + s_c / (ctx * pc)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Phase1Point {
    pub step: usize,
    pub w_p: f64,
    pub w_c: f64,
    pub s_p: f64,
    pub delta: f64,
}

/// Explicit Euler on the Phase-I flow; returns `steps + 1` points including
/// the initial state.
pub fn integrate_phase1(
    initial: ToeplitzState,
    step: f64,
    steps: usize,
    seq_len: usize,
) -> Result<Vec<Phase1Point>> {
    check_seq_len(seq_len)?;
    if !step.is_finite() || step < 0.0 {
        return Err(Error::InvalidArgument(format!("step must be finite and non-negative, got {step}")));
    }
    let point = |i: usize, st: &ToeplitzState| Phase1Point {
        step: i,
        w_p: st.w_p,
        w_c: st.w_c,
        s_p: st.row_weights(seq_len).s_p,
        delta: st.delta(),
    };
    let mut state = initial;
    let mut out = Vec::with_capacity(steps + 1);
    out.push(point(0, &state));
    for i in 1..=steps {
        let (dp, dc) = phase1_rhs(&state, seq_len)?;
        state.w_p += step * dp;
        state.w_c += step * dc;
        if !state.w_p.is_finite() || !state.w_c.is_finite() {
            return Err(Error::Integration { step: i - 1 });
        }
        out.push(point(i, &state));
    }
    Ok(out)
}

pub fn phase1_csv(trajectory: &[Phase1Point]) -> String {
    let mut out = String::from("step,w_p,w_c,s_p,delta\n");
    for p in trajectory {
        writeln!(out, "{},{:e},{:e},{:e},{:e}", p.step, p.w_p, p.w_c, p.s_p, p.delta).unwrap();
    }
    out
}

/// Expected gradient of the deep next-token loss with respect to each offset
/// weight `w(k)`, `k = 1..T-1` (entry `k - 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetGradient {
    pub values: Vec<f64>,
    pub mu0: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExactOffsetGradient {
    pub values: Vec<Rational64>,
    pub mu0: Rational64,
}

impl ExactOffsetGradient {
    pub fn to_f64(&self) -> OffsetGradient {
        let f = |r: &Rational64| *r.numer() as f64 / *r.denom() as f64;
        OffsetGradient {
            values: self.values.iter().map(f).collect(),
            mu0: f(&self.mu0),
        }
    }
}

/// Closed form at zero init, with the target placed uniformly on one of the
/// `T - 2` context positions. Rows `r ≤ T-2` cancel in expectation; row `T-1`
/// adds `1/((T-1)²(T-2))` at every offset it can reach (`k ≤ T-2`); row `T`
/// adds `-1/T²` at `k = 1` and `2/(T²(T-2))` at `k ≥ 2`. The loss gradient is
/// `-1/μ0` times the `μ` gradient, all scaled by `1/T`.
pub fn ntp_expected_grad_closed(seq_len: usize, mu0: Rational64) -> Result<ExactOffsetGradient> {
    check_seq_len(seq_len)?;
    if mu0 <= Rational64::from_integer(0) {
        return Err(Error::InvalidArgument("mu0 must be positive".into()));
    }
    let t = seq_len as i64;
    let r = |n: i64, d: i64| Rational64::new(n, d);
    let row_prev = r(1, (t - 1) * (t - 1) * (t - 2));
    let scale = -r(1, t) / mu0;
    let values = (1..t)
        .map(|k| {
            let prev = if k <= t - 2 { row_prev } else { r(0, 1) };
            let last = if k == 1 { r(-1, t * t) } else { r(2, t * t * (t - 2)) };
            scale * (prev + last)
        })
        .collect();
    Ok(ExactOffsetGradient { values, mu0 })
}

/// Sum of the positional-logit gradient along offset `k` (entries `(r, r-k)`).
pub fn offset_sum(g: &Matrix, k: usize) -> f64 {
    (k..g.rows()).map(|r| g[(r, r - k)]).sum()
}

/// Enumerates the `T - 2` placements of the target at zero init, runs the
/// deep-head gradient on each, and returns `-E[∂μ]/E[μ]` per offset together
/// with `μ0 = E[μ]`.
pub fn ntp_expected_grad_empirical(seq_len: usize) -> Result<OffsetGradient> {
    check_seq_len(seq_len)?;
    let model = DisentangledModel::zeros(seq_len, 2);
    let placements = seq_len - 2;
    let mut dmu = vec![0.0; seq_len - 1];
    let mut mu_sum = 0.0;
    for pos in 0..placements {
        // token 0 is the target, token 1 fills every other slot
        let tokens = (0..seq_len).map(|i| usize::from(i != pos)).collect();
        let z = ContentMatrix::new(tokens, 2)?;
        let trace = forward(&model, &z)?;
        let mu = trace.f1[0];
        let (d_a1, _) = deep_logit_grads(&trace, &z, 0)?;
        for (k, acc) in dmu.iter_mut().enumerate() {
            // ∂L/∂w = -(1/μ) ∂μ/∂w
            *acc += -mu * offset_sum(&d_a1, k + 1);
        }
        mu_sum += mu;
    }
    let mu0 = mu_sum / placements as f64;
    Ok(OffsetGradient {
        values: dmu.iter().map(|d| -(d / placements as f64) / mu0).collect(),
        mu0,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Phase2Point {
    pub step: usize,
    /// Mean diagonal of `W0⁽²⁾`.
    pub diag_mean: f64,
    /// `W1⁽²⁾[T-2, T-2]` (0-based): the weight on the prompt copy of the end
    /// node.
    pub self_mask: f64,
    /// Mean `S2` mass from the last position onto `t_end_ctx`.
    pub s2_mass: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phase2Report {
    pub steps_run: usize,
    pub converged: bool,
    pub final_s2_mass: f64,
    /// `diag_mean` rose at every step.
    pub diag_increasing: bool,
    /// First step from which `self_mask` falls at every step to the end.
    /// Early steps can push it up when an edge ending in the target sits just
    /// before the prompt.
    pub self_mask_decreasing_from: Option<usize>,
    /// Largest magnitude reached by an off-diagonal entry of `W0⁽²⁾`.
    pub offdiag_max_abs: f64,
    /// Largest off-diagonal entry at the end (negative once the rows settle).
    pub offdiag_final_max: f64,
    /// Every per-example `W1⁽²⁾` gradient lived in row `T-2` alone.
    pub positional_rank1: bool,
    /// Every per-example `W0⁽²⁾` gradient lived in the row of that example's
    /// end node alone.
    pub content_rank1: bool,
    /// `W1⁽²⁾` stayed exactly zero outside row `T-2`.
    pub positional_outside_zero: bool,
}

impl Phase2Report {
    pub fn structure_holds(&self) -> bool {
        self.diag_increasing
            && self.self_mask_decreasing_from.is_some()
            && self.positional_rank1
            && self.content_rank1
            && self.positional_outside_zero
    }
}

#[derive(Clone, Debug)]
pub struct Phase2Run {
    pub model: DisentangledModel,
    pub trajectory: Vec<Phase2Point>,
    pub report: Phase2Report,
}

pub fn phase2_csv(trajectory: &[Phase2Point]) -> String {
    let mut out = String::from("step,diag_mean,self_mask,s2_mass\n");
    for p in trajectory {
        writeln!(out, "{},{:e},{:e},{:e}", p.step, p.diag_mean, p.self_mask, p.s2_mass).unwrap();
    }
    out
}

/// Layer 1 frozen at `gamma_frozen · L`; plain gradient descent on the mean
/// deep-head loss `L1a` over the layer-2 weights from zero. Stops early once
/// the mean `S2` mass on `t_end_ctx` reaches `0.99`.
pub fn phase2_simulate(
    gamma_frozen: f64,
    examples: &[TrainingExample],
    step: f64,
    steps: usize,
) -> Result<Phase2Run> {
    let Some(first) = examples.first() else {
        return Err(Error::InvalidArgument("phase II needs at least one example".into()));
    };
    let (t, n) = (first.z.seq_len(), first.z.vocab());
    let mut model = DisentangledModel::zeros(t, n);
    model.layer1.positional = Matrix::lower_shift(t).scale(gamma_frozen);
    phase2_descent(model, examples, step, steps, Some(0.99), |_, _| Ok(()))
}

/// Gradient descent on the mean `L1a` over the layer-2 weights only, starting
/// from `model` as given. Stops after `steps` updates, or earlier once the
/// mean `S2` mass on `t_end_ctx` reaches `stop_mass`. `on_step` sees the
/// model after every update.
pub fn phase2_descent(
    mut model: DisentangledModel,
    examples: &[TrainingExample],
    step: f64,
    steps: usize,
    stop_mass: Option<f64>,
    mut on_step: impl FnMut(usize, &DisentangledModel) -> Result<()>,
) -> Result<Phase2Run> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("phase II needs at least one example".into()));
    }
    if !step.is_finite() || step < 0.0 {
        return Err(Error::InvalidArgument(format!("step must be finite and non-negative, got {step}")));
    }
    let (t, n) = (model.seq_len(), model.vocab());
    let row = t - 2;

    let inv = 1.0 / examples.len() as f64;
    let mut trajectory = Vec::new();
    let mut report = Phase2Report {
        steps_run: 0,
        converged: false,
        final_s2_mass: 0.0,
        diag_increasing: true,
        self_mask_decreasing_from: None,
        offdiag_max_abs: 0.0,
        offdiag_final_max: f64::NEG_INFINITY,
        positional_rank1: true,
        content_rank1: true,
        positional_outside_zero: true,
    };

    let mut i = 0;
    loop {
        let mut g0 = Matrix::zeros(n, n);
        let mut g1 = Matrix::zeros(t, t);
        let mut mass = 0.0;
        for ex in examples {
            let trace = forward(&model, &ex.z)?;
            mass += trace.s2[(t - 1, ex.t_end_ctx)];
            let (_, d_a2) = deep_logit_grads(&trace, &ex.z, ex.y1)?;
            let d_w0 = ex.z.scatter(&d_a2);
            let end = ex.z.tokens()[row];
            report.positional_rank1 &= d_a2.support().iter().all(|&(r, _)| r == row);
            report.content_rank1 &= d_w0.support().iter().all(|&(r, _)| r == end);
            g0.add_scaled(&d_w0, inv);
            g1.add_scaled(&d_a2, inv);
        }
        mass *= inv;
        let point = Phase2Point {
            step: i,
            diag_mean: (0..n).map(|a| model.layer2.content[(a, a)]).sum::<f64>() / n as f64,
            self_mask: model.layer2.positional[(row, row)],
            s2_mass: mass,
        };
        if let Some(prev) = trajectory.last() {
            let prev: &Phase2Point = prev;
            report.diag_increasing &= point.diag_mean > prev.diag_mean;
        }
        trajectory.push(point);
        report.converged = stop_mass.is_some_and(|m| mass >= m);
        if report.converged || i >= steps {
            break;
        }
        model.layer2.content.add_scaled(&g0, -step);
        model.layer2.positional.add_scaled(&g1, -step);
        if !model.is_finite() {
            return Err(Error::Integration { step: i });
        }
        report.positional_outside_zero &= model.layer2.positional.support().iter().all(|&(r, _)| r == row);
        let off = (0..n)
            .flat_map(|a| (0..n).filter(move |&b| b != a).map(move |b| (a, b)))
            .map(|ab| model.layer2.content[ab]);
        for v in off {
            report.offdiag_max_abs = report.offdiag_max_abs.max(v.abs());
        }
        i += 1;
        on_step(i, &model)?;
    }
    report.steps_run = i;
    let mut from = trajectory.len() - 1;
    while from > 0 && trajectory[from].self_mask < trajectory[from - 1].self_mask {
        from -= 1;
    }
    report.self_mask_decreasing_from = (from + 1 < trajectory.len()).then_some(from);
    report.final_s2_mass = trajectory.last().map_or(0.0, |p| p.s2_mass);
    report.offdiag_final_max = (0..n)
        .flat_map(|a| (0..n).filter(move |&b| b != a).map(move |b| (a, b)))
        .map(|ab| model.layer2.content[ab])
        .filter(|v| *v != 0.0)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(Phase2Run {
        model,
        trajectory,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_weights_sum_to_one() {
        for st in [
            ToeplitzState::zero(),
            ToeplitzState { w_p: 3.0, w_c: -1.0, w_q: 0.0 },
            ToeplitzState { w_p: -20.0, w_c: 5.0, w_q: 0.0 },
        ] {
            let w = st.row_weights(10);
            assert!((w.s_p + 8.0 * w.s_c + w.s_q - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gap_rate_at_zero_is_seven_sixteenths() {
        let (dp, dc) = phase1_rhs(&ToeplitzState::zero(), 10).unwrap();
        assert!((dp - dc - 7.0 / 16.0).abs() < 1e-15);
    }

    #[test]
    fn predecessor_fixed_point() {
        let st = ToeplitzState { w_p: 60.0, w_c: 0.0, w_q: 0.0 };
        let (dp, _) = phase1_rhs(&st, 10).unwrap();
        assert!(dp.abs() < 1e-20);
    }

    #[test]
    fn zero_step_is_constant() {
        let st = ToeplitzState { w_p: 0.3, w_c: -0.2, w_q: 0.0 };
        let tr = integrate_phase1(st, 0.0, 5, 10).unwrap();
        assert_eq!(tr.len(), 6);
        assert!(tr.iter().all(|p| p.w_p == 0.3 && p.w_c == -0.2));
        assert!(integrate_phase1(st, -0.1, 5, 10).is_err());
    }

    #[test]
    fn first_euler_step_gap() {
        let tr = integrate_phase1(ToeplitzState::zero(), 0.1, 1, 10).unwrap();
        assert!((tr[1].delta - 0.1 * 7.0 / 16.0).abs() < 1e-15);
    }

    #[test]
    fn small_sequence_rejected() {
        assert!(phase1_rhs(&ToeplitzState::zero(), 2).is_err());
        assert!(ntp_expected_grad_closed(2, Rational64::from_integer(1)).is_err());
    }

    #[test]
    fn closed_form_constants() {
        let g = ntp_expected_grad_closed(10, Rational64::from_integer(1)).unwrap();
        assert_eq!(g.values.len(), 9);
        assert_eq!(g.values[0], Rational64::new(548, 648_000));
        for k in 2..=8 {
            assert_eq!(g.values[k - 1], Rational64::new(-2096, 5_184_000));
        }
        // the longest offset is reachable from the last row only
        assert_eq!(g.values[8], Rational64::new(-1, 4000));
    }

    #[test]
    fn smallest_enumeration_is_finite() {
        let e = ntp_expected_grad_empirical(3).unwrap();
        assert_eq!(e.values.len(), 2);
        assert!(e.values.iter().all(|v| v.is_finite()) && e.mu0 > 0.0);
    }
}
