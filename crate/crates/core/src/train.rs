//! Gradient-descent training on encoded star graphs, the two-phase cascaded
//! schedule, and evaluation.

use std::collections::HashSet;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::circuit::check_stationary;
use crate::dynamics::{offset_sum, phase2_descent, Phase2Report};
use crate::error::{Error, Result};
use crate::grad::{loss_and_grad, shallow_logit_grad, GradSet, LossWeights};
use crate::model::{ar_context, encode, forward, mtp_loss, DisentangledModel, TrainingExample};
use crate::numerics::Matrix;
use crate::taskgen::{gen_star, rng_for, StarInstance};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// `(1/2)[(1/2)(L1a + L1b) + L2]`.
    Mtp,
    /// `L1a` alone.
    Ntp,
    /// The composite objective without `L1b`: both heads read the final
    /// position of `Z` only.
    MtpCore,
    /// Layer 1 on `L2`, then layer 2 on `L1a` with layer 1 frozen.
    Cascaded,
}

impl Objective {
    pub fn weights(self) -> LossWeights {
        match self {
            Objective::Mtp => LossWeights::MTP,
            Objective::Ntp => LossWeights::NTP,
            Objective::MtpCore => LossWeights::CORE,
            Objective::Cascaded => LossWeights::NTP,
        }
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mtp" => Ok(Objective::Mtp),
            "ntp" => Ok(Objective::Ntp),
            "mtp-core" => Ok(Objective::MtpCore),
            "cascaded" => Ok(Objective::Cascaded),
            other => Err(Error::InvalidArgument(format!("unknown objective {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "a")]
pub enum Init {
    Zero,
    /// Every weight drawn from `uniform(-a, a)`.
    Uniform(f64),
}

impl FromStr for Init {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "zero" {
            return Ok(Init::Zero);
        }
        let a = s
            .strip_prefix("uniform:")
            .and_then(|a| a.parse::<f64>().ok())
            .ok_or_else(|| Error::InvalidArgument(format!("init must be `zero` or `uniform:<a>`, got {s:?}")))?;
        Ok(Init::Uniform(a))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub objective: Objective,
    pub learning_rate: f64,
    /// Examples per update; anything at or above the dataset size is full
    /// batch.
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub init: Init,
    /// Keep the layer-1 content weights at zero throughout.
    pub pin_content1: bool,
    /// Evaluate every this many epochs (the final epoch is always evaluated).
    pub eval_every: usize,
    /// Cascaded: pointer strength layer 1 is frozen at after Phase I. The
    /// default is large enough that the frozen attention is exactly one-hot
    /// in double precision.
    pub gamma_phase1: f64,
    /// Cascaded: Phase-I epochs (Phase II runs for `epochs`).
    pub epochs_phase1: usize,
    /// Cascaded: project Phase-I updates of the layer-1 positional weights
    /// onto offset-shared (Toeplitz) structure.
    pub toeplitz_phase1: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: Objective::Mtp,
            learning_rate: 0.5,
            batch_size: usize::MAX,
            epochs: 2000,
            seed: 0,
            init: Init::Zero,
            pin_content1: false,
            eval_every: 100,
            gamma_phase1: 1000.0,
            epochs_phase1: 2000,
            toeplitz_phase1: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::InvalidArgument("eval_every must be at least 1".into()));
        }
        if let Init::Uniform(a) = self.init {
            if !a.is_finite() || a < 0.0 {
                return Err(Error::InvalidArgument(format!("uniform init scale must be non-negative, got {a}")));
            }
        }
        if self.objective == Objective::Cascaded && !(self.gamma_phase1 > 0.0 && self.gamma_phase1.is_finite()) {
            return Err(Error::InvalidArgument("gamma_phase1 must be positive".into()));
        }
        Ok(())
    }
}

pub fn init_model(seq_len: usize, vocab: usize, config: &TrainConfig) -> DisentangledModel {
    let mut model = DisentangledModel::zeros(seq_len, vocab);
    if let Init::Uniform(a) = config.init {
        if a > 0.0 {
            let mut rng = rng_for(config.seed);
            for m in model.matrices_mut() {
                for x in m.as_mut_slice() {
                    *x = rng.gen_range(-a..a);
                }
            }
        }
    }
    if config.pin_content1 {
        model.layer1.content = Matrix::zeros(vocab, vocab);
    }
    model
}

/// Distinct two-path, three-node stars over `node_count` labels. Two
/// instances count as the same graph when their edge sets and endpoints
/// coincide, whatever the edge order.
pub fn star_dataset(count: usize, node_count: usize, seed: u64) -> Result<Vec<StarInstance>> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(count);
    let budget = count.saturating_mul(20).max(1000);
    for i in 0..budget as u64 {
        if out.len() == count {
            break;
        }
        let inst = gen_star(2, 3, node_count, seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i))?;
        let mut key = inst.edges.clone();
        key.sort_unstable();
        if seen.insert((key, inst.start, inst.end)) {
            out.push(inst);
        }
    }
    if out.len() < count {
        return Err(Error::Generation {
            attempts: budget,
            reason: format!("only {} distinct stars found", out.len()),
        });
    }
    Ok(out)
}

/// Encodes `train + eval` distinct stars and splits them by graph identity.
pub fn star_split(
    train: usize,
    eval: usize,
    node_count: usize,
    seed: u64,
) -> Result<(Vec<TrainingExample>, Vec<TrainingExample>)> {
    let all = star_dataset(train + eval, node_count, seed)?;
    let encoded = all.iter().map(encode).collect::<Result<Vec<_>>>()?;
    let (a, b) = encoded.split_at(train);
    Ok((a.to_vec(), b.to_vec()))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub count: usize,
    /// First decoding step: argmax of the deep head on `Z` is `v`.
    pub v_accuracy: f64,
    /// Both steps right; the second is teacher-forced through `Z′`.
    pub full_path_accuracy: f64,
    /// Both steps right, with the second node read from the shallow head
    /// `f2(Z)`, whose training target is that node.
    pub head_path_accuracy: f64,
    /// Mean `S1` mass from the last position onto its predecessor.
    pub s1_concentration: f64,
    /// Mean `S2` mass from the last position onto `t_end_ctx`.
    pub s2_concentration: f64,
    pub loss_total: f64,
    pub l1a: f64,
    pub l1b: f64,
    pub l2: f64,
}

pub fn evaluate(model: &DisentangledModel, examples: &[TrainingExample]) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let mut r = EvalReport {
        count: examples.len(),
        v_accuracy: 0.0,
        full_path_accuracy: 0.0,
        head_path_accuracy: 0.0,
        s1_concentration: 0.0,
        s2_concentration: 0.0,
        loss_total: 0.0,
        l1a: 0.0,
        l1b: 0.0,
        l2: 0.0,
    };
    let last = model.seq_len() - 1;
    for ex in examples {
        let tr = forward(model, &ex.z)?;
        let ar = forward(model, &ar_context(ex))?;
        let first = tr.f1.argmax() == ex.y1;
        let second = ar.f1.argmax() == ex.y2;
        r.v_accuracy += f64::from(u8::from(first));
        r.full_path_accuracy += f64::from(u8::from(first && second));
        r.head_path_accuracy += f64::from(u8::from(first && tr.f2.argmax() == ex.y2));
        r.s1_concentration += tr.s1[(last, last - 1)];
        r.s2_concentration += tr.s2[(last, ex.t_end_ctx)];
        let l = mtp_loss(model, ex)?;
        r.loss_total += l.total;
        r.l1a += l.l1a;
        r.l1b += l.l1b;
        r.l2 += l.l2;
    }
    let n = examples.len() as f64;
    for v in [
        &mut r.v_accuracy,
        &mut r.full_path_accuracy,
        &mut r.head_path_accuracy,
        &mut r.s1_concentration,
        &mut r.s2_concentration,
        &mut r.loss_total,
        &mut r.l1a,
        &mut r.l1b,
        &mut r.l2,
    ] {
        *v /= n;
    }
    Ok(r)
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRecord {
    pub epoch: usize,
    /// Mean training objective over the epoch's batches.
    pub train_objective: f64,
    pub loss_total: f64,
    #[serde(rename = "L1a")]
    pub l1a: f64,
    #[serde(rename = "L1b")]
    pub l1b: f64,
    #[serde(rename = "L2")]
    pub l2: f64,
    pub v_acc: f64,
    pub path_acc: f64,
    pub s1_conc: f64,
    pub s2_conc: f64,
    pub head_path_acc: f64,
}

impl MetricRecord {
    fn new(epoch: usize, train_objective: f64, e: &EvalReport) -> Self {
        MetricRecord {
            epoch,
            train_objective,
            loss_total: e.loss_total,
            l1a: e.l1a,
            l1b: e.l1b,
            l2: e.l2,
            v_acc: e.v_accuracy,
            path_acc: e.full_path_accuracy,
            s1_conc: e.s1_concentration,
            s2_conc: e.s2_concentration,
            head_path_acc: e.head_path_accuracy,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("metric records serialize")
    }
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub model: DisentangledModel,
    pub metrics: Vec<MetricRecord>,
    /// Present for cascaded runs.
    pub cascade: Option<CascadeReport>,
}

fn batch_gradient(
    model: &DisentangledModel,
    batch: &[&TrainingExample],
    weights: LossWeights,
) -> Result<(f64, GradSet)> {
    let mut grad = GradSet::zeros(model.seq_len(), model.vocab());
    let mut loss = 0.0;
    let inv = 1.0 / batch.len() as f64;
    for ex in batch {
        let (l, g) = loss_and_grad(model, ex, weights)?;
        loss += l.total * inv;
        grad.add_scaled(&g, inv);
    }
    Ok((loss, grad))
}

fn diverged(epoch: usize, last_good: &DisentangledModel) -> Error {
    Error::Divergence {
        epoch,
        checkpoint: last_good.to_checkpoint(),
    }
}

/// Gradient descent on the configured objective. `on_metric` sees each
/// metrics record as it is produced. Deterministic for fixed inputs.
pub fn train(
    config: &TrainConfig,
    train_set: &[TrainingExample],
    eval_set: &[TrainingExample],
    mut on_metric: impl FnMut(&MetricRecord),
) -> Result<TrainRun> {
    config.validate()?;
    let Some(first) = train_set.first() else {
        return Err(Error::InvalidArgument("empty training set".into()));
    };
    if eval_set.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    if config.objective == Objective::Cascaded {
        return train_cascaded(config, train_set, eval_set, on_metric);
    }
    let (t, n) = (first.z.seq_len(), first.z.vocab());
    let mut model = init_model(t, n, config);
    let weights = config.objective.weights();
    let mut rng = rng_for(config.seed ^ 0x5EED);
    let mut order: Vec<&TrainingExample> = train_set.iter().collect();
    let batch = config.batch_size.min(order.len());
    let mut metrics = Vec::new();

    for epoch in 1..=config.epochs {
        if batch < order.len() {
            order.shuffle(&mut rng);
        }
        let mut epoch_loss = 0.0;
        let chunks = order.chunks(batch).count() as f64;
        for chunk in order.chunks(batch) {
            let (loss, grad) = match batch_gradient(&model, chunk, weights) {
                Err(Error::SingularLoss { .. }) => return Err(diverged(epoch, &model)),
                r => r?,
            };
            if !loss.is_finite() || !grad.is_finite() {
                return Err(diverged(epoch, &model));
            }
            epoch_loss += loss / chunks;
            let prev = model.clone();
            for (w, g) in model.matrices_mut().into_iter().zip(grad.matrices()) {
                w.add_scaled(g, -config.learning_rate);
            }
            if config.pin_content1 {
                model.layer1.content = Matrix::zeros(n, n);
            }
            if !model.is_finite() {
                return Err(diverged(epoch, &prev));
            }
        }
        if epoch % config.eval_every == 0 || epoch == config.epochs {
            let rec = MetricRecord::new(epoch, epoch_loss, &evaluate(&model, eval_set)?);
            on_metric(&rec);
            metrics.push(rec);
        }
    }
    Ok(TrainRun {
        model,
        metrics,
        cascade: None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CascadeReport {
    /// Mean `S1` predecessor mass on the last row after Phase I, before the
    /// freeze.
    pub phase1_s1_concentration: f64,
    /// Same for row `t_end_ctx`.
    pub phase1_ctx_concentration: f64,
    #[serde(skip)]
    pub phase2: Option<Phase2Report>,
    /// Fraction of training examples meeting both stationarity conditions at
    /// tolerance `1e-2`.
    pub stationary_fraction: f64,
}

fn phase1_step(
    model: &mut DisentangledModel,
    examples: &[TrainingExample],
    lr: f64,
    toeplitz: bool,
) -> Result<f64> {
    let t = model.seq_len();
    let inv = 1.0 / examples.len() as f64;
    let mut d_a1 = Matrix::zeros(t, t);
    let mut loss = 0.0;
    for ex in examples {
        let tr = forward(model, &ex.z)?;
        loss += -tr.f2[ex.y2].ln() * inv;
        d_a1.add_scaled(&shallow_logit_grad(&tr, &ex.z, ex.y2)?, inv);
    }
    if toeplitz {
        // gradient along each shared offset weight, spread back over its
        // diagonal
        let mut proj = Matrix::zeros(t, t);
        for k in 0..t {
            let g = offset_sum(&d_a1, k);
            for r in k..t {
                proj[(r, r - k)] = g;
            }
        }
        d_a1 = proj;
    }
    model.layer1.positional.add_scaled(&d_a1, -lr);
    Ok(loss)
}

/// Phase I trains the layer-1 positional weights on `L2` with the layer-1
/// content weights at zero. Layer 1 is then frozen at `gamma_phase1 · L` and
/// Phase II trains layer 2 on `L1a` from zero.
pub fn train_cascaded(
    config: &TrainConfig,
    train_set: &[TrainingExample],
    eval_set: &[TrainingExample],
    mut on_metric: impl FnMut(&MetricRecord),
) -> Result<TrainRun> {
    config.validate()?;
    let Some(first) = train_set.first() else {
        return Err(Error::InvalidArgument("empty training set".into()));
    };
    let (t, n) = (first.z.seq_len(), first.z.vocab());
    let mut model = DisentangledModel::zeros(t, n);
    let mut metrics = Vec::new();

    for epoch in 1..=config.epochs_phase1 {
        let prev = model.clone();
        let loss = match phase1_step(&mut model, train_set, config.learning_rate, config.toeplitz_phase1) {
            Err(Error::SingularLoss { .. }) => return Err(diverged(epoch, &prev)),
            r => r?,
        };
        if !loss.is_finite() || !model.is_finite() {
            return Err(diverged(epoch, &prev));
        }
        if epoch % config.eval_every == 0 || epoch == config.epochs_phase1 {
            let rec = MetricRecord::new(epoch, loss, &evaluate(&model, eval_set)?);
            on_metric(&rec);
            metrics.push(rec);
        }
    }
    let last = t - 1;
    let mut s1_last = 0.0;
    let mut s1_ctx = 0.0;
    for ex in train_set {
        let tr = forward(&model, &ex.z)?;
        s1_last += tr.s1[(last, last - 1)];
        s1_ctx += tr.s1[(ex.t_end_ctx, ex.t_v_ctx)];
    }
    let inv = 1.0 / train_set.len() as f64;

    if config.epochs == 0 && config.epochs_phase1 == 0 {
        return Ok(TrainRun {
            model,
            metrics,
            cascade: None,
        });
    }

    model.layer1.positional = Matrix::lower_shift(t).scale(config.gamma_phase1);
    let offset = config.epochs_phase1;
    let run = phase2_descent(model, train_set, config.learning_rate, config.epochs, None, |step, m| {
        if step % config.eval_every == 0 || step == config.epochs {
            let rec = MetricRecord::new(offset + step, f64::NAN, &evaluate(m, eval_set)?);
            on_metric(&rec);
            metrics.push(rec);
        }
        Ok(())
    })?;
    let model = run.model;

    let mut stationary = 0usize;
    for ex in train_set {
        if check_stationary(&forward(&model, &ex.z)?, ex, 1e-2).both() {
            stationary += 1;
        }
    }
    Ok(TrainRun {
        model,
        metrics,
        cascade: Some(CascadeReport {
            phase1_s1_concentration: s1_last * inv,
            phase1_ctx_concentration: s1_ctx * inv,
            phase2: Some(run.report),
            stationary_fraction: stationary as f64 * inv,
        }),
    })
}
