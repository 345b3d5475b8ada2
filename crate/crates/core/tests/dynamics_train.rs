use mtplab::circuit::check_stationary;
use mtplab::dynamics::{
    integrate_phase1, ntp_expected_grad_closed, ntp_expected_grad_empirical, phase1_rhs, phase2_simulate,
    ToeplitzState,
};
use mtplab::model::{encode, forward, DisentangledModel, TrainingExample};
use mtplab::taskgen::gen_star;
use mtplab::train::{evaluate, init_model, star_split, train, Init, Objective, TrainConfig};
use num_rational::Rational64;
use proptest::prelude::*;

fn stars(count: u64, offset: u64) -> Vec<TrainingExample> {
    (offset..offset + count).map(|s| encode(&gen_star(2, 3, 10, s).unwrap()).unwrap()).collect()
}

fn config(objective: Objective, epochs: usize) -> TrainConfig {
    TrainConfig {
        objective,
        epochs,
        eval_every: epochs.max(1),
        ..TrainConfig::default()
    }
}

#[test]
fn phase1_gap_grows_and_concentrates() {
    let traj = integrate_phase1(ToeplitzState::zero(), 0.1, 20_000, 10).unwrap();
    assert!(traj.windows(2).all(|w| w[1].delta > w[0].delta));
    assert!(traj.last().unwrap().s_p >= 0.999);
    // 0.999 is first reached after roughly ten thousand steps
    let hit = traj.iter().position(|p| p.s_p >= 0.999).unwrap();
    assert!((10_000..11_000).contains(&hit), "{hit}");
}

proptest! {
    #[test]
    fn gap_rate_is_positive_once_the_gap_is_large(x in 1.0f64..40.0, w_c in -20.0f64..20.0, w_q in -5.0f64..5.0) {
        let (dp, dc) = phase1_rhs(&ToeplitzState { w_p: w_c + x, w_c, w_q }, 10).unwrap();
        prop_assert!(dp - dc > 0.0);
    }
}

#[test]
fn offset_field_matches_enumeration_for_several_lengths() {
    for t in 4..=12 {
        let emp = ntp_expected_grad_empirical(t).unwrap();
        let closed = ntp_expected_grad_closed(t, Rational64::from_integer(1)).unwrap().to_f64();
        for (k, (e, c)) in emp.values.iter().zip(&closed.values).enumerate() {
            let rel = ((e * emp.mu0 - c) / c).abs();
            assert!(rel <= 1e-9, "T={t} k={}: {e} vs {c}", k + 1);
        }
        assert!(closed.values[0] > 0.0);
        assert!(closed.values[1..].iter().all(|v| *v < 0.0), "T={t}");
    }
}

#[test]
fn phase2_recovers_content_matching() {
    let examples = stars(64, 0);
    let run = phase2_simulate(1000.0, &examples, 1.0, 20_000).unwrap();
    assert!(run.report.converged);
    assert!(run.report.structure_holds(), "{:?}", run.report);
    for ex in &examples {
        let tr = forward(&run.model, &ex.z).unwrap();
        assert!(check_stationary(&tr, ex, 5e-2).both());
    }
}

#[test]
fn phase2_without_a_pointer_never_matches_content() {
    // with layer 1 uniform the end-node copy cannot be told from the target
    let examples = stars(64, 0);
    let run = phase2_simulate(0.0, &examples, 1.0, 3000).unwrap();
    assert!(!run.report.converged);
    assert!(run.report.final_s2_mass < 0.9, "{}", run.report.final_s2_mass);
    let ex = &examples[0];
    let tr = forward(&run.model, &ex.z).unwrap();
    assert!(!check_stationary(&tr, ex, 1e-2).content_matching);
}

#[test]
fn zero_learning_rate_keeps_the_initial_model() {
    let data = stars(16, 0);
    for init in [Init::Zero, Init::Uniform(0.5)] {
        let cfg = TrainConfig {
            learning_rate: 0.0,
            init,
            seed: 3,
            ..config(Objective::Mtp, 5)
        };
        let run = train(&cfg, &data, &data, |_| {}).unwrap();
        assert_eq!(run.model, init_model(10, 10, &cfg));
    }
}

#[test]
fn zero_epochs_return_the_zero_model() {
    let data = stars(8, 0);
    let run = train(&config(Objective::Ntp, 0), &data, &data, |_| {}).unwrap();
    assert_eq!(run.model, DisentangledModel::zeros(10, 10));
    assert!(run.metrics.is_empty());
}

#[test]
fn training_is_deterministic() {
    let (tr, ev) = star_split(48, 16, 10, 7).unwrap();
    let cfg = TrainConfig {
        batch_size: 16,
        seed: 11,
        ..config(Objective::MtpCore, 30)
    };
    let a = train(&cfg, &tr, &ev, |_| {}).unwrap();
    let b = train(&cfg, &tr, &ev, |_| {}).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.metrics, b.metrics);
    let other = TrainConfig { seed: 12, ..cfg };
    assert_ne!(train(&other, &tr, &ev, |_| {}).unwrap().model, a.model);
}

#[test]
fn metrics_stream_matches_the_returned_records() {
    let data = stars(16, 0);
    let cfg = TrainConfig {
        eval_every: 4,
        ..config(Objective::Mtp, 10)
    };
    let mut seen = Vec::new();
    let run = train(&cfg, &data, &data, |r| seen.push(r.clone())).unwrap();
    assert_eq!(seen, run.metrics);
    let epochs: Vec<usize> = seen.iter().map(|r| r.epoch).collect();
    assert_eq!(epochs, vec![4, 8, 10]);
}

#[test]
fn pinned_content_stays_zero() {
    let data = stars(16, 0);
    let cfg = TrainConfig {
        pin_content1: true,
        init: Init::Uniform(0.3),
        ..config(Objective::Mtp, 20)
    };
    let run = train(&cfg, &data, &data, |_| {}).unwrap();
    assert_eq!(run.model.layer1.content.max_abs(), 0.0);
    assert!(run.model.layer2.content.max_abs() > 0.0);
}

#[test]
fn invalid_configs_are_rejected() {
    let data = stars(4, 0);
    for cfg in [
        TrainConfig {
            learning_rate: -1.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            eval_every: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            init: Init::Uniform(f64::NAN),
            ..TrainConfig::default()
        },
    ] {
        assert!(train(&cfg, &data, &data, |_| {}).is_err());
    }
    assert!(train(&TrainConfig::default(), &[], &data, |_| {}).is_err());
    assert!("uniform:x".parse::<Init>().is_err());
    assert!("adam".parse::<Objective>().is_err());
}

#[test]
fn core_objective_learns_the_first_step() {
    let (tr, ev) = star_split(128, 64, 10, 21).unwrap();
    let run = train(&config(Objective::MtpCore, 1500), &tr, &ev, |_| {}).unwrap();
    let r = evaluate(&run.model, &ev).unwrap();
    assert!(r.v_accuracy >= 0.9, "{r:?}");
    assert!(r.s1_concentration >= 0.9, "{r:?}");
}

#[test]
fn next_token_training_stays_near_chance() {
    let (tr, ev) = star_split(128, 64, 10, 21).unwrap();
    let run = train(&config(Objective::Ntp, 1500), &tr, &ev, |_| {}).unwrap();
    let r = evaluate(&run.model, &ev).unwrap();
    assert!(r.v_accuracy <= 0.7, "{r:?}");
}

#[test]
fn cascaded_schedule_builds_the_circuit() {
    let (tr, ev) = star_split(64, 32, 10, 5).unwrap();
    let cfg = TrainConfig {
        objective: Objective::Cascaded,
        epochs_phase1: 1500,
        epochs: 1500,
        eval_every: 500,
        ..TrainConfig::default()
    };
    let run = train(&cfg, &tr, &ev, |_| {}).unwrap();
    let c = run.cascade.expect("cascaded runs report");
    assert!(c.phase1_s1_concentration > 0.9, "{c:?}");
    let p2 = c.phase2.expect("phase II report");
    assert!(p2.positional_rank1 && p2.content_rank1 && p2.positional_outside_zero);
    let r = evaluate(&run.model, &ev).unwrap();
    assert_eq!(r.v_accuracy, 1.0, "{r:?}");
    assert_eq!(r.head_path_accuracy, 1.0, "{r:?}");
    // Phase I epochs come first in the metrics stream
    assert_eq!(run.metrics.last().unwrap().epoch, 3000);
}
