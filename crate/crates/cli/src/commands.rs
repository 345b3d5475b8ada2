use std::collections::HashSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use num_rational::Rational64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use mtplab::circuit::{ar_collapse_probe, check_stationary, construct_circuit, gamma_sweep, DEFAULT_TOL};
use mtplab::dynamics::{
    integrate_phase1, ntp_expected_grad_closed, ntp_expected_grad_empirical, phase1_csv, phase1_rhs, phase2_csv,
    phase2_simulate, ToeplitzState,
};
use mtplab::grad::{check_grad, grad_shallow};
use mtplab::model::{encode, forward, DisentangledModel, TrainingExample};
use mtplab::taskgen::{self, ParseOptions, PromptOrder, StarInstance, TaskKind, TaskParams};
use mtplab::train::{evaluate, init_model, star_split, train, Init, Objective, TrainConfig};
use mtplab::Error;

use crate::config::ConfigFile;
use crate::manifest::{dir_of, RunManifest};
use crate::{heatmap, Command, Dynamics, Outcome, Task};
use crate::{CircuitLoss, DynamicsArgs, EvalArgs, GenArgs, HeatmapArgs, TrainArgs, VerifyCircuitArgs, VerifyGradientsArgs};

pub fn run(command: Command) -> Result<Outcome> {
    match command {
        Command::Gen(a) => gen(a),
        Command::VerifyGradients(a) => verify_gradients(a),
        Command::VerifyCircuit(a) => verify_circuit(a),
        Command::Dynamics(a) => dynamics(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Heatmap(a) => heatmap_cmd(a),
    }
}

/// Independent per-item seed derived from a run seed.
pub fn item_seed(seed: u64, i: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i)
}

/// Named pass/fail checks, printed one per line.
#[derive(Default)]
struct Checks {
    failed: usize,
}

impl Checks {
    fn check(&mut self, name: &str, ok: bool, detail: impl std::fmt::Display) {
        println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            self.failed += 1;
        }
    }

    fn outcome(&self) -> Outcome {
        if self.failed == 0 {
            Outcome::Pass
        } else {
            Outcome::Fail
        }
    }
}

fn create_parent(path: &Path) -> Result<PathBuf> {
    let dir = dir_of(path);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_file(path: &Path, contents: &str, manifest: &mut RunManifest) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    manifest.artifact(path);
    Ok(())
}

fn gen(a: GenArgs) -> Result<Outcome> {
    let params = match a.task {
        Task::Star => TaskParams::Star {
            path_count: a.paths,
            path_len: a.path_len,
            node_count: a.nodes,
        },
        Task::Tree => TaskParams::Tree { depth: a.depth },
        Task::Countdown => TaskParams::Countdown {
            operand_count: a.operands,
        },
        Task::Sat => TaskParams::Sat {
            var_count: a.vars,
            clause_count: a.clauses,
        },
    };
    let order: PromptOrder = a.order.into();
    let dir = create_parent(&a.out)?;
    let mut manifest = RunManifest::start(
        "gen",
        json!({
            "task": format!("{:?}", a.task).to_lowercase(),
            "params": format!("{params:?}"),
            "count": a.count,
            "order": format!("{:?}", a.order),
        }),
        Some(a.seed),
    );
    let mut lines = String::new();
    let mut distinct = HashSet::new();
    let mut verified = 0usize;
    let mut total_len = 0usize;
    for i in 0..a.count as u64 {
        let inst = taskgen::generate(params, item_seed(a.seed, i))?;
        if inst.verify()? {
            verified += 1;
        }
        let line = taskgen::serialize(&inst, order);
        total_len += line.len();
        distinct.insert(line.clone());
        lines.push_str(&line);
        lines.push('\n');
    }
    write_file(&a.out, &lines, &mut manifest)?;
    manifest.write(&dir)?;
    println!(
        "wrote {} instances to {} (distinct {}, verified {}, mean line length {:.1})",
        a.count,
        a.out.display(),
        distinct.len(),
        verified,
        total_len as f64 / a.count.max(1) as f64
    );
    let mut checks = Checks::default();
    checks.check("witnesses", verified == a.count, format!("{verified}/{}", a.count));
    Ok(checks.outcome())
}

/// Random star example over `nodes` labels and a uniform(-scale, scale)
/// model, both fixed by `seed`.
fn random_pair(seed: u64, scale: f64) -> Result<(DisentangledModel, TrainingExample)> {
    let ex = encode(&taskgen::gen_star(2, 3, 10, seed)?)?;
    let config = TrainConfig {
        init: Init::Uniform(scale),
        seed,
        ..TrainConfig::default()
    };
    Ok((init_model(ex.z.seq_len(), ex.z.vocab(), &config), ex))
}

fn verify_gradients(a: VerifyGradientsArgs) -> Result<Outcome> {
    if a.trials == 0 {
        bail!("--trials must be positive");
    }
    let dir = create_parent(&a.out)?;
    let mut manifest = RunManifest::start(
        "verify-gradients",
        json!({"trials": a.trials, "tol": a.tol, "scale": a.scale, "eps": a.eps}),
        Some(a.seed),
    );
    let mut csv = String::from("trial,matrix,max_rel_err,pass\n");
    let mut worst = 0.0f64;
    let mut failures = 0usize;
    let mut shallow_leak = 0.0f64;
    for trial in 0..a.trials {
        let (model, ex) = random_pair(item_seed(a.seed, trial as u64), a.scale)?;
        let report = check_grad(&model, &ex, a.eps, a.tol)?;
        for row in &report.rows {
            csv.push_str(&format!("{trial},{},{:e},{}\n", row.matrix, row.max_rel_err, row.pass));
        }
        worst = worst.max(report.worst());
        if !report.pass() {
            failures += 1;
        }
        let shallow = grad_shallow(&forward(&model, &ex.z)?, &ex.z, ex.y2)?;
        shallow_leak = shallow_leak.max(shallow.content2.max_abs()).max(shallow.positional2.max_abs());
    }
    write_file(&a.out, &csv, &mut manifest)?;
    manifest.write(&dir)?;
    let mut checks = Checks::default();
    checks.check(
        "finite-difference agreement",
        failures == 0,
        format!("{} trials, worst max relative error {worst:e} (tol {:e})", a.trials, a.tol),
    );
    checks.check(
        "shallow head leaves layer 2 untouched",
        shallow_leak == 0.0,
        format!("max |layer-2 grad of L2| = {shallow_leak:e}"),
    );
    Ok(checks.outcome())
}

fn circuit_examples(count: usize, seed: u64) -> Result<Vec<TrainingExample>> {
    (0..count as u64)
        .map(|i| Ok(encode(&taskgen::gen_star(2, 3, 10, item_seed(seed, i))?)?))
        .collect()
}

fn verify_circuit(a: VerifyCircuitArgs) -> Result<Outcome> {
    if a.gammas.len() < 2 {
        bail!("--gammas needs at least two values");
    }
    let examples = circuit_examples(a.instances, a.seed)?;
    let dir = create_parent(&a.out)?;
    let mut manifest = RunManifest::start(
        "verify-circuit",
        json!({
            "gammas": a.gammas,
            "stationary_gamma": a.stationary_gamma,
            "instances": a.instances,
            "loss": format!("{:?}", a.loss).to_lowercase(),
        }),
        Some(a.seed),
    );
    let table = gamma_sweep(&a.gammas, &examples)?;
    write_file(&a.out, &table.to_csv(), &mut manifest)?;

    let (loss_slope, grad_slope) = match a.loss {
        CircuitLoss::Total => (table.log_slope(|r| r.total), table.log_slope(|r| r.grad_max)),
        CircuitLoss::Core => (table.log_slope(|r| r.core_total), table.log_slope(|r| r.core_grad_max)),
    };
    let mut checks = Checks::default();
    checks.check(
        "loss decay slope",
        (loss_slope + 1.0).abs() <= 0.10,
        format!("{loss_slope:.4} (target -1 +/- 10%)"),
    );
    checks.check(
        "gradient decay slope",
        (grad_slope + 1.0).abs() <= 0.15,
        format!("{grad_slope:.4} (target -1 +/- 15%)"),
    );

    let model = construct_circuit(a.stationary_gamma, 10, 10)?;
    let mut grad_worst = 0.0f64;
    let mut l1b_min = f64::INFINITY;
    let mut stationary = 0usize;
    for ex in &examples {
        let r = ar_collapse_probe(&model, ex, a.stationary_gamma)?;
        grad_worst = grad_worst.max(match a.loss {
            CircuitLoss::Total => r.grad_max,
            CircuitLoss::Core => r.core_grad_max,
        });
        l1b_min = l1b_min.min(r.l1b);
        if check_stationary(&forward(&model, &ex.z)?, ex, DEFAULT_TOL).both() {
            stationary += 1;
        }
    }
    checks.check(
        "stationary gradient",
        grad_worst <= 1e-8,
        format!("max-norm {grad_worst:e} at gamma {} (tol 1e-8)", a.stationary_gamma),
    );
    checks.check(
        "attention conditions",
        stationary == examples.len(),
        format!("{stationary}/{} instances at tol {DEFAULT_TOL:e}", examples.len()),
    );
    if a.loss == CircuitLoss::Total {
        checks.check("trapped AR error", l1b_min >= 20.0, format!("min L1b {l1b_min:.3} (needs >= 20)"));
    }
    manifest.write(&dir)?;
    Ok(checks.outcome())
}

fn dynamics(a: DynamicsArgs) -> Result<Outcome> {
    let mut checks = Checks::default();
    match a.which {
        Dynamics::Phase1 {
            step,
            steps,
            seq_len,
            probes,
            seed,
            out,
        } => {
            let dir = create_parent(&out)?;
            let mut manifest = RunManifest::start(
                "dynamics phase1",
                json!({"step": step, "steps": steps, "seq_len": seq_len, "probes": probes}),
                Some(seed),
            );
            let traj = integrate_phase1(ToeplitzState::zero(), step, steps, seq_len)?;
            write_file(&out, &phase1_csv(&traj), &mut manifest)?;
            manifest.write(&dir)?;

            let (dp, dc) = phase1_rhs(&ToeplitzState::zero(), seq_len)?;
            if seq_len == 10 {
                let gap = dp - dc;
                checks.check("initial gap rate", (gap - 7.0 / 16.0).abs() <= 1e-15, format!("{gap:?} (7/16 = 0.4375)"));
            }
            let last = traj.last().expect("trajectory includes the start");
            checks.check(
                "predecessor concentration",
                last.s_p >= 0.999,
                format!("s_p = {:.6} after {steps} steps", last.s_p),
            );
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut bad = 0usize;
            for _ in 0..probes {
                let x = rng.gen_range(1.0..20.0);
                let w_c = rng.gen_range(-10.0..10.0);
                let st = ToeplitzState { w_p: w_c + x, w_c, w_q: 0.0 };
                let (dp, dc) = phase1_rhs(&st, seq_len)?;
                if !(dp - dc > 0.0) {
                    bad += 1;
                }
            }
            checks.check("gap keeps growing", bad == 0, format!("{bad}/{probes} random states with gap >= 1 fail"));
        }
        Dynamics::Phase2 {
            gamma,
            graphs,
            step,
            steps,
            seed,
            out,
        } => {
            let dir = create_parent(&out)?;
            let mut manifest = RunManifest::start(
                "dynamics phase2",
                json!({"gamma": gamma, "graphs": graphs, "step": step, "steps": steps}),
                Some(seed),
            );
            let examples = circuit_examples(graphs, seed)?;
            let run = phase2_simulate(gamma, &examples, step, steps)?;
            write_file(&out, &phase2_csv(&run.trajectory), &mut manifest)?;
            manifest.write(&dir)?;
            let r = &run.report;
            checks.check(
                "content matching reached",
                r.converged,
                format!("S2 mass {:.4} after {} steps", r.final_s2_mass, r.steps_run),
            );
            checks.check("diagonal grows", r.diag_increasing, "every step");
            checks.check(
                "self-mask falls",
                r.self_mask_decreasing_from.is_some(),
                format!("from step {:?}", r.self_mask_decreasing_from),
            );
            checks.check(
                "rank-1 gradients",
                r.positional_rank1 && r.content_rank1 && r.positional_outside_zero,
                format!(
                    "positional {} content {} outside-zero {}",
                    r.positional_rank1, r.content_rank1, r.positional_outside_zero
                ),
            );
            println!(
                "info off-diagonal content weight: peak |w| {:.4}, final max {:.4}",
                r.offdiag_max_abs, r.offdiag_final_max
            );
        }
        Dynamics::NtpField { seq_len, out } => {
            let dir = create_parent(&out)?;
            let mut manifest = RunManifest::start("dynamics ntp-field", json!({"seq_len": seq_len}), None);
            let exact = ntp_expected_grad_closed(seq_len, Rational64::from_integer(1))?;
            let closed = exact.to_f64();
            let emp = ntp_expected_grad_empirical(seq_len)?;
            let mut csv = String::from("k,closed_mu1,closed_exact,empirical,empirical_times_mu0\n");
            let mut worst = 0.0f64;
            for (i, (c, e)) in closed.values.iter().zip(&emp.values).enumerate() {
                let scaled = e * emp.mu0;
                worst = worst.max(((scaled - c) / c).abs());
                csv.push_str(&format!("{},{c:e},{},{e:e},{scaled:e}\n", i + 1, exact.values[i]));
            }
            write_file(&out, &csv, &mut manifest)?;
            manifest.write(&dir)?;
            println!("info mu0 = {:?}", emp.mu0);
            checks.check(
                "sign pattern",
                closed.values[0] > 0.0 && closed.values[1..].iter().all(|v| *v < 0.0),
                "+ at offset 1, - beyond",
            );
            checks.check("enumeration matches closed form", worst <= 1e-9, format!("worst relative error {worst:e}"));
        }
    }
    Ok(checks.outcome())
}

fn read_stars(path: &Path, order: PromptOrder, nodes: usize) -> Result<Vec<TrainingExample>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let opts = ParseOptions {
        order,
        node_count: Some(nodes),
    };
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(no, line)| {
            let inst = match taskgen::parse(line, TaskKind::Star, opts)? {
                taskgen::TaskInstance::Star(s) => s,
                _ => unreachable!("star parse yields stars"),
            };
            encode_star(&inst).with_context(|| format!("{}:{}", path.display(), no + 1))
        })
        .collect()
}

fn encode_star(inst: &StarInstance) -> Result<TrainingExample> {
    Ok(encode(inst)?)
}

fn train_cmd(a: TrainArgs) -> Result<Outcome> {
    let file = match &a.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let d = TrainConfig::default();
    let objective: Objective = file
        .resolve("objective", a.objective.clone(), "mtp".to_string())?
        .parse()?;
    let init: Init = file.resolve("init", a.init.clone(), "zero".to_string())?.parse()?;
    let batch_raw = file.resolve("batch_size", a.batch_size.map(|b| b.to_string()), "full".to_string())?;
    let batch_size = if batch_raw == "full" {
        usize::MAX
    } else {
        batch_raw.parse().with_context(|| format!("batch_size {batch_raw:?}"))?
    };
    let config = TrainConfig {
        objective,
        learning_rate: file.resolve("learning_rate", a.learning_rate, d.learning_rate)?,
        batch_size,
        epochs: file.resolve("epochs", a.epochs, d.epochs)?,
        seed: file.resolve("seed", a.seed, d.seed)?,
        init,
        pin_content1: file.resolve("pin_content1", a.pin_content1, d.pin_content1)?,
        eval_every: file.resolve("eval_every", a.eval_every, d.eval_every)?,
        gamma_phase1: file.resolve("gamma_phase1", a.gamma_phase1, d.gamma_phase1)?,
        epochs_phase1: file.resolve("epochs_phase1", a.epochs_phase1, d.epochs_phase1)?,
        toeplitz_phase1: file.resolve("toeplitz_phase1", a.toeplitz_phase1, d.toeplitz_phase1)?,
    };
    config.validate()?;
    let nodes = file.resolve("nodes", a.nodes, 10usize)?;
    let order_name = file.resolve(
        "order",
        a.order.map(|o| if o == crate::Order::StartEnd { "start-end".to_string() } else { "end-start".to_string() }),
        "end-start".to_string(),
    )?;
    let order: PromptOrder = order_name.parse()?;
    let train_count = file.resolve("train_count", a.train_count, 512usize)?;
    let eval_count = file.resolve("eval_count", a.eval_count, 256usize)?;
    let eval_fraction = file.resolve("eval_fraction", a.eval_fraction, 0.25f64)?;
    let known = [
        "objective", "learning_rate", "batch_size", "epochs", "seed", "init", "pin_content1", "eval_every",
        "gamma_phase1", "epochs_phase1", "toeplitz_phase1", "nodes", "order", "train_count", "eval_count",
        "eval_fraction",
    ];
    if let Some(k) = file.keys().find(|k| !known.contains(k)) {
        bail!("unknown config key {k:?}");
    }

    let (train_set, eval_set) = match (&a.data, &a.eval_data) {
        (Some(data), Some(eval_path)) => (read_stars(data, order, nodes)?, read_stars(eval_path, order, nodes)?),
        (Some(data), None) => {
            if !(0.0..1.0).contains(&eval_fraction) {
                bail!("eval_fraction must lie in [0, 1), got {eval_fraction}");
            }
            let all = read_stars(data, order, nodes)?;
            let held = ((all.len() as f64) * eval_fraction).round() as usize;
            let held = held.clamp(1, all.len().saturating_sub(1).max(1));
            if all.len() < 2 {
                bail!("{} needs at least two graphs to hold one out", data.display());
            }
            let (t, e) = all.split_at(all.len() - held);
            (t.to_vec(), e.to_vec())
        }
        (None, Some(_)) => bail!("--eval-data needs --data"),
        (None, None) => star_split(train_count, eval_count, nodes, config.seed)?,
    };

    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let mut manifest = RunManifest::start(
        "train",
        json!({
            "train": config,
            "nodes": nodes,
            "order": order_name,
            "data": a.data.as_ref().map(|p| p.display().to_string()),
            "eval_data": a.eval_data.as_ref().map(|p| p.display().to_string()),
            "train_examples": train_set.len(),
            "eval_examples": eval_set.len(),
        }),
        Some(config.seed),
    );
    let metrics_path = a.out_dir.join("metrics.jsonl");
    let mut metrics_file =
        fs::File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?;
    let mut write_err = None;
    let result = train(&config, &train_set, &eval_set, |rec| {
        if write_err.is_none() {
            if let Err(e) = writeln!(metrics_file, "{}", rec.to_json()) {
                write_err = Some(e);
            }
        }
    });
    if let Some(e) = write_err {
        return Err(e).context("writing metrics");
    }
    manifest.artifact(&metrics_path);
    let run = match result {
        Ok(run) => run,
        Err(Error::Divergence { epoch, checkpoint }) => {
            let path = a.out_dir.join("last_good.ckpt");
            write_file(&path, &checkpoint, &mut manifest)?;
            manifest.write(&a.out_dir)?;
            bail!("training diverged at epoch {epoch}; last good model saved to {}", path.display());
        }
        Err(e) => return Err(e.into()),
    };
    write_file(&a.out_dir.join("model.ckpt"), &run.model.to_checkpoint(), &mut manifest)?;
    if let Some(c) = &run.cascade {
        let mut doc = serde_json::to_value(c)?;
        if let Some(p) = &c.phase2 {
            doc["phase2"] = json!({
                "steps_run": p.steps_run,
                "final_s2_mass": p.final_s2_mass,
                "diag_increasing": p.diag_increasing,
                "self_mask_decreasing_from": p.self_mask_decreasing_from,
                "positional_rank1": p.positional_rank1,
                "content_rank1": p.content_rank1,
                "positional_outside_zero": p.positional_outside_zero,
            });
        }
        write_file(
            &a.out_dir.join("cascade.json"),
            &(serde_json::to_string_pretty(&doc)? + "\n"),
            &mut manifest,
        )?;
    }
    manifest.write(&a.out_dir)?;
    if let Some(last) = run.metrics.last() {
        println!("{}", last.to_json());
    }
    Ok(Outcome::Pass)
}

fn load_checkpoint(path: &Path) -> Result<DisentangledModel> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    DisentangledModel::from_checkpoint(&text).with_context(|| format!("loading {}", path.display()))
}

fn eval(a: EvalArgs) -> Result<Outcome> {
    let model = load_checkpoint(&a.checkpoint)?;
    let examples = read_stars(&a.data, a.order.into(), model.vocab())?;
    let report = evaluate(&model, &examples)?;
    let dir = create_parent(&a.out)?;
    let mut manifest = RunManifest::start(
        "eval",
        json!({
            "checkpoint": a.checkpoint.display().to_string(),
            "data": a.data.display().to_string(),
            "order": format!("{:?}", a.order),
            "min_v_accuracy": a.min_v_accuracy,
        }),
        None,
    );
    let text = serde_json::to_string_pretty(&report)? + "\n";
    write_file(&a.out, &text, &mut manifest)?;
    manifest.write(&dir)?;
    print!("{text}");
    let mut checks = Checks::default();
    if let Some(min) = a.min_v_accuracy {
        checks.check("v accuracy", report.v_accuracy >= min, format!("{} (needs >= {min})", report.v_accuracy));
    }
    Ok(checks.outcome())
}

fn heatmap_cmd(a: HeatmapArgs) -> Result<Outcome> {
    let loaded = a.checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let nodes = match &loaded {
        Some(m) => m.vocab(),
        None => a.nodes,
    };
    let star = StarInstance::parse(&a.instance, a.order.into(), Some(nodes))?;
    let ex = encode(&star)?;
    let (t, n) = (ex.z.seq_len(), ex.z.vocab());
    let model = match (loaded, a.circuit) {
        (Some(m), None) => m,
        (None, Some(gamma)) => construct_circuit(gamma, t, n)?,
        (None, None) => DisentangledModel::zeros(t, n),
        (Some(_), Some(_)) => bail!("--checkpoint and --circuit are exclusive"),
    };
    if model.seq_len() != t || model.vocab() != n {
        bail!(
            "model is {}x{} but the instance encodes to T = {t}, N = {n}",
            model.seq_len(),
            model.vocab()
        );
    }
    let trace = forward(&model, &ex.z)?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let mut manifest = RunManifest::start(
        "heatmap",
        json!({
            "checkpoint": a.checkpoint.as_ref().map(|p| p.display().to_string()),
            "circuit_gamma": a.circuit,
            "instance": a.instance,
            "order": format!("{:?}", a.order),
            "svg": a.svg,
        }),
        None,
    );
    for (name, m) in [("s1", &trace.s1), ("s2", &trace.s2)] {
        write_file(&a.out_dir.join(format!("{name}.csv")), &heatmap::to_csv(m), &mut manifest)?;
        if a.svg {
            let title = format!("{} ({t}x{t})", name.to_uppercase());
            write_file(&a.out_dir.join(format!("{name}.svg")), &heatmap::to_svg(m, &title), &mut manifest)?;
        }
    }
    manifest.write(&a.out_dir)?;
    println!(
        "S2 last-row mass at t_end_ctx (position {}): {:?}",
        ex.t_end_ctx + 1,
        trace.s2[(t - 1, ex.t_end_ctx)]
    );
    Ok(Outcome::Pass)
}
