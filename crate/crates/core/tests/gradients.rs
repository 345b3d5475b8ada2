use mtplab::circuit::{check_stationary, construct_circuit};
use mtplab::grad::{check_grad_weighted, deep_logit_grads, loss_and_grad, shallow_logit_grad};
use mtplab::model::{encode, forward, mtp_loss, DisentangledModel, TrainingExample};
use mtplab::taskgen::{gen_star, StarInstance};
use mtplab::train::{init_model, Init, TrainConfig};
use mtplab::{grad_shallow, LossWeights};
use proptest::prelude::*;

fn random_pair(seed: u64, scale: f64) -> (DisentangledModel, TrainingExample) {
    let ex = encode(&gen_star(2, 3, 10, seed).unwrap()).unwrap();
    let config = TrainConfig {
        init: Init::Uniform(scale),
        seed: seed ^ 0xABCD,
        ..TrainConfig::default()
    };
    (init_model(10, 10, &config), ex)
}

#[test]
fn closed_form_matches_finite_differences_for_every_objective() {
    for seed in 0..120 {
        let (model, ex) = random_pair(seed, 1.0);
        let weights = [LossWeights::MTP, LossWeights::NTP, LossWeights::CORE][seed as usize % 3];
        let report = check_grad_weighted(&model, &ex, weights, 1e-5, 1e-4).unwrap();
        assert!(report.pass(), "seed {seed}: {}", report.to_csv());
    }
}

#[test]
fn larger_weights_still_match() {
    // tiny entries make small steps roundoff-bound at this scale
    for seed in 500..530 {
        let (model, ex) = random_pair(seed, 3.0);
        let report = check_grad_weighted(&model, &ex, LossWeights::MTP, 1e-3, 1e-4).unwrap();
        assert!(report.pass(), "seed {seed}: {}", report.to_csv());
    }
}

#[test]
fn shallow_head_gradient_is_decoupled() {
    for seed in 0..200 {
        let (model, ex) = random_pair(seed, 1.0);
        let tr = forward(&model, &ex.z).unwrap();
        let g = grad_shallow(&tr, &ex.z, ex.y2).unwrap();
        assert_eq!(g.content2.max_abs(), 0.0, "seed {seed}");
        assert_eq!(g.positional2.max_abs(), 0.0, "seed {seed}");
        // only the last query row of layer 1 receives signal
        let d = shallow_logit_grad(&tr, &ex.z, ex.y2).unwrap();
        for i in 0..9 {
            assert!(d.row(i).iter().all(|v| *v == 0.0), "seed {seed} row {i}");
        }
        assert_eq!(g.positional1, d);
    }
}

#[test]
fn deep_head_layer2_gradient_is_rank_one() {
    // the layer-2 logits enter as S1·A2, so dA2 = S1[T-1]ᵀ r
    for seed in 0..50 {
        let (model, ex) = random_pair(seed, 1.0);
        let tr = forward(&model, &ex.z).unwrap();
        let (_, d_a2) = deep_logit_grads(&tr, &ex.z, ex.y1).unwrap();
        let s = tr.s1_last();
        let r: Vec<f64> = d_a2.row(9).iter().map(|v| v / s[9]).collect();
        for i in 0..10 {
            for j in 0..10 {
                let want = s[i] * r[j];
                assert!((d_a2[(i, j)] - want).abs() <= 1e-12 * (1.0 + want.abs()), "seed {seed} ({i},{j})");
            }
        }
    }
}

#[test]
fn circuit_satisfies_both_attention_conditions() {
    let model = construct_circuit(30.0, 10, 10).unwrap();
    for seed in 0..100 {
        let ex = encode(&gen_star(2, 3, 10, seed).unwrap()).unwrap();
        let tr = forward(&model, &ex.z).unwrap();
        assert!(check_stationary(&tr, &ex, 1e-6).both(), "seed {seed}");
        let (loss, grad) = loss_and_grad(&model, &ex, LossWeights::CORE).unwrap();
        assert!(loss.total < 1e-11, "seed {seed}: {}", loss.total);
        assert!(grad.max_abs() < 1e-11, "seed {seed}: {}", grad.max_abs());
        // the autoregressive term stays trapped near gamma
        let full = mtp_loss(&model, &ex).unwrap();
        assert!((full.l1b - 30.0).abs() < 3.0, "seed {seed}: {}", full.l1b);
    }
}

fn relabel(star: &StarInstance, perm: &[usize]) -> StarInstance {
    let m = |k: u32| perm[k as usize - 1] as u32 + 1;
    StarInstance {
        edges: star.edges.iter().map(|&(a, b)| (m(a), m(b))).collect(),
        start: m(star.start),
        end: m(star.end),
        path: star.path.iter().map(|&k| m(k)).collect(),
        ..star.clone()
    }
}

fn permute_content(model: &DisentangledModel, perm: &[usize]) -> DisentangledModel {
    let mut out = model.clone();
    for (dst, src) in [
        (&mut out.layer1.content, &model.layer1.content),
        (&mut out.layer2.content, &model.layer2.content),
    ] {
        for a in 0..10 {
            for b in 0..10 {
                dst[(perm[a], perm[b])] = src[(a, b)];
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn relabelling_nodes_permutes_everything_consistently(
        seed in 0u64..10_000,
        perm in Just((0..10usize).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        let (model, ex) = random_pair(seed, 1.0);
        let star = gen_star(2, 3, 10, seed).unwrap();
        let ex2 = encode(&relabel(&star, &perm)).unwrap();
        let model2 = permute_content(&model, &perm);
        prop_assert_eq!(ex2.y1, perm[ex.y1]);
        prop_assert_eq!(ex2.t_end_ctx, ex.t_end_ctx);

        let (l, g) = loss_and_grad(&model, &ex, LossWeights::MTP).unwrap();
        let (l2, g2) = loss_and_grad(&model2, &ex2, LossWeights::MTP).unwrap();
        prop_assert!((l.total - l2.total).abs() <= 1e-12 * l.total.abs().max(1.0));
        prop_assert!((g.positional1.as_slice().iter().zip(g2.positional1.as_slice()))
            .all(|(a, b)| (a - b).abs() <= 1e-12));
        for a in 0..10 {
            for b in 0..10 {
                prop_assert!((g.content2[(a, b)] - g2.content2[(perm[a], perm[b])]).abs() <= 1e-12);
                prop_assert!((g.content1[(a, b)] - g2.content1[(perm[a], perm[b])]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn circuit_loss_ignores_labels(
        seed in 0u64..10_000,
        perm in Just((0..10usize).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        let model = construct_circuit(12.0, 10, 10).unwrap();
        let star = gen_star(2, 3, 10, seed).unwrap();
        let a = mtp_loss(&model, &encode(&star).unwrap()).unwrap();
        let b = mtp_loss(&model, &encode(&relabel(&star, &perm)).unwrap()).unwrap();
        prop_assert!((a.total - b.total).abs() <= 1e-12);
    }
}
