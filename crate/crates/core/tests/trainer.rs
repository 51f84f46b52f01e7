use fusionlab::losses::{compute_rloo_advantages, dpo_implicit_reward, LossHyper};
use fusionlab::tinylm::{init_model, reward_score, ArchConfig, PolicyModel, RewardSpec, SamplingParams};
use fusionlab::trainer::{
    collect_on_policy, train_fusepo, train_fusesft, train_on_policy, OptimizerKind, Stage, TrainConfig,
};
use fusionlab::types::{
    FusionSample, Method, PreferenceBatch, PreferenceMaterial, Prompt, Response, RewardedResponse, SplitTag, Token,
};
use fusionlab::weighting::{build_fusion_sample, build_preference_batch, WeightingConfig};
use fusionlab::Error;

fn small_model(seed: u64) -> PolicyModel {
    init_model(&ArchConfig {
        vocab_size: 12,
        context_width: 4,
        hidden_dims: vec![16],
        embed_dim: 6,
        init_seed: seed,
        init_scale: 0.3,
    })
    .unwrap()
}

fn rr(source: &str, j: usize, tokens: Vec<Token>, reward: f64) -> RewardedResponse {
    RewardedResponse::new(
        Response {
            tokens,
            source_id: source.into(),
            sample_index: j,
        },
        reward,
    )
}

/// Three sources with three responses each; source `m2` has tied rewards
/// when `with_tie` is set.
fn sample(i: usize, tag: SplitTag, with_tie: bool) -> FusionSample {
    let prompt = Prompt::new(format!("p{i}"), vec![1 + (i % 5) as Token, 3, 7]);
    let sources = (0..3)
        .map(|s| {
            let id = format!("m{s}");
            let rs = (0..3)
                .map(|j| {
                    let reward = if with_tie && s == 2 {
                        0.25
                    } else {
                        0.1 * (s + 1) as f64 + 0.05 * j as f64 + 0.01 * i as f64
                    };
                    rr(&id, j, vec![1 + ((i + s + j) % 9) as Token, 2 + j as Token, 0], reward)
                })
                .collect();
            (id, rs)
        })
        .collect();
    let cfg = WeightingConfig {
        alpha_sft: 0.1,
        alpha_po: 0.1,
        k_po: 3,
        ..WeightingConfig::default()
    };
    build_fusion_sample(&prompt, sources, &cfg, tag).unwrap()
}

fn batches(n: usize, method: Method, with_tie: bool) -> Vec<PreferenceBatch> {
    let cfg = WeightingConfig {
        alpha_po: 0.1,
        k_po: 3,
        ..WeightingConfig::default()
    };
    (0..n)
        .map(|i| build_preference_batch(&sample(i, SplitTag::Po, with_tie), method, &cfg).unwrap())
        .collect()
}

fn config(method: Method) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 2,
        learning_rate: 1e-2,
        hyper: LossHyper {
            method,
            ..LossHyper::default()
        },
        ..TrainConfig::default()
    }
}

fn bits(m: &PolicyModel) -> Vec<u64> {
    m.params().iter().map(|p| p.to_bits()).collect()
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let model = small_model(1);
    let cfg = TrainConfig {
        learning_rate: 0.0,
        ..config(Method::Dpo)
    };
    let sft: Vec<_> = (0..4).map(|i| sample(i, SplitTag::Sft, false)).collect();
    let (out, trace) = train_fusesft(model.clone(), &sft, &cfg, Stage::Fusesft).unwrap();
    assert_eq!(bits(&out), bits(&model));
    assert_eq!(trace.len(), 4);

    let (out, _) = train_fusepo(model.clone(), Some(&model), &batches(4, Method::Dpo, false), &cfg, Stage::Fusepo).unwrap();
    assert_eq!(bits(&out), bits(&model));
}

#[test]
fn training_is_deterministic() {
    let sft: Vec<_> = (0..6).map(|i| sample(i, SplitTag::Sft, false)).collect();
    let cfg = config(Method::Dpo);
    let a = train_fusesft(small_model(2), &sft, &cfg, Stage::Fusesft).unwrap();
    let b = train_fusesft(small_model(2), &sft, &cfg, Stage::Fusesft).unwrap();
    assert_eq!(bits(&a.0), bits(&b.0));
    assert_eq!(a.1, b.1);

    let po = batches(6, Method::Rloo, false);
    let cfg = config(Method::Rloo);
    let reference = a.0.clone();
    let x = train_fusepo(a.0.clone(), Some(&reference), &po, &cfg, Stage::Fusepo).unwrap();
    let y = train_fusepo(a.0, Some(&reference), &po, &cfg, Stage::Fusepo).unwrap();
    assert_eq!(bits(&x.0), bits(&y.0));
    assert_eq!(x.1, y.1);

    // A different shuffle seed visits batches in another order.
    let z = train_fusepo(reference.clone(), Some(&reference), &po, &TrainConfig { seed: 9, ..cfg }, Stage::Fusepo).unwrap();
    assert_ne!(bits(&x.0), bits(&z.0));
}

#[test]
fn plain_sft_descends_monotonically() {
    let prompt = Prompt::new("p0", vec![4, 2, 9]);
    let s = build_fusion_sample(
        &prompt,
        vec![("ideal".into(), vec![rr("ideal", 0, vec![9, 2, 4, 0], 1.0)])],
        &WeightingConfig::default(),
        SplitTag::Sft,
    )
    .unwrap();
    let model = small_model(3);
    assert!(model.params().len() <= 5000);
    let cfg = TrainConfig {
        epochs: 11,
        batch_size: 1,
        learning_rate: 1e-2,
        optimizer: OptimizerKind::Sgd,
        ..TrainConfig::default()
    };
    let (_, trace) = train_fusesft(model, &[s], &cfg, Stage::Sft).unwrap();
    let losses: Vec<f64> = trace.iter().map(|t| t.loss).collect();
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "{losses:?}");
    }
}

#[test]
fn baseline_sft_uses_one_response() {
    let sft: Vec<_> = (0..4).map(|i| sample(i, SplitTag::Sft, false)).collect();
    let (_, trace) = train_fusesft(small_model(4), &sft, &config(Method::Dpo), Stage::Sft).unwrap();
    assert!(trace.iter().all(|t| t.units.iter().all(|&u| u == 1)));
    let (_, trace) = train_fusesft(small_model(4), &sft, &config(Method::Dpo), Stage::Fusesft).unwrap();
    assert!(trace.iter().all(|t| t.units.iter().all(|&u| u == sft[0].selected.len())));
}

#[test]
fn dpo_starts_at_ln2_per_live_weight() {
    let batch = batches(1, Method::Dpo, true).remove(0);
    let live: f64 = batch
        .entries
        .iter()
        .filter(|e| matches!(&e.material, PreferenceMaterial::Pair(p) if !p.degenerate))
        .map(|e| e.weight)
        .sum();
    assert!(live < 1.0 && live > 0.0);
    let model = small_model(5);
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 1,
        ..config(Method::Dpo)
    };
    let (_, trace) = train_fusepo(model.clone(), Some(&model), &[batch], &cfg, Stage::Fusepo).unwrap();
    assert!((trace[0].loss - std::f64::consts::LN_2 * live).abs() < 1e-6, "{}", trace[0].loss);
    assert_eq!(trace[0].degenerate, 1);
}

#[test]
fn dpo_training_widens_margins() {
    let po = batches(4, Method::Dpo, false);
    let reference = small_model(6);
    let cfg = TrainConfig {
        epochs: 10,
        ..config(Method::Dpo)
    };
    let before = reference.params().iter().map(|p| p.to_bits()).collect::<Vec<_>>();
    let (trained, _) = train_fusepo(reference.clone(), Some(&reference), &po, &cfg, Stage::Fusepo).unwrap();
    assert_eq!(bits(&reference), before, "reference mutated");
    let margin = |m: &PolicyModel, b: &PreferenceBatch| -> f64 {
        b.entries
            .iter()
            .map(|e| match &e.material {
                PreferenceMaterial::Pair(p) => {
                    let w = dpo_implicit_reward(m, &reference, &b.prompt, p.chosen.tokens(), 0.1).unwrap();
                    let l = dpo_implicit_reward(m, &reference, &b.prompt, p.rejected.tokens(), 0.1).unwrap();
                    e.weight * (w - l)
                }
                _ => unreachable!(),
            })
            .sum()
    };
    for b in &po {
        assert_eq!(margin(&reference, b), 0.0);
        assert!(margin(&trained, b) > 0.0, "{}", b.prompt.id);
    }
}

#[test]
fn simpo_holds_one_model() {
    let po = batches(4, Method::Simpo, false);
    let (_, trace) = train_fusepo(small_model(7), None, &po, &config(Method::Simpo), Stage::Fusepo).unwrap();
    assert!(trace.iter().all(|t| t.models_resident == 1));

    let m = small_model(7);
    let (_, trace) = train_fusepo(m.clone(), Some(&m), &batches(4, Method::Dpo, false), &config(Method::Dpo), Stage::Fusepo).unwrap();
    assert!(trace.iter().all(|t| t.models_resident == 2));
}

#[test]
fn preference_stage_errors() {
    let m = small_model(8);
    let po = batches(2, Method::Dpo, false);
    let err = train_fusepo(m.clone(), None, &po, &config(Method::Dpo), Stage::Fusepo).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    let err = train_fusepo(m.clone(), Some(&m), &po, &config(Method::Rloo), Stage::Fusepo).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    let err = train_fusepo(m.clone(), Some(&m), &po, &config(Method::Dpo), Stage::Sft).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    let mixed = vec![sample(0, SplitTag::Po, false)];
    let err = train_fusesft(m, &mixed, &config(Method::Dpo), Stage::Fusesft).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn runaway_step_reports_non_finite_loss() {
    let sft: Vec<_> = (0..2).map(|i| sample(i, SplitTag::Sft, false)).collect();
    let cfg = TrainConfig {
        epochs: 5,
        batch_size: 2,
        learning_rate: 1e300,
        optimizer: OptimizerKind::Sgd,
        ..TrainConfig::default()
    };
    match train_fusesft(small_model(9), &sft, &cfg, Stage::Fusesft) {
        Err(Error::NonFiniteLoss { step, stage }) => {
            assert!(step >= 1);
            assert_eq!(stage, "fusesft");
        }
        other => panic!("expected non-finite loss, got {other:?}"),
    }
}

fn prompts(n: usize) -> Vec<Prompt> {
    (0..n)
        .map(|i| Prompt::new(format!("q{i}"), vec![1 + (i % 7) as Token, 5]))
        .collect()
}

#[test]
fn greedy_on_policy_is_a_null_update() {
    for method in [Method::Dpo, Method::Simpo, Method::Rloo] {
        let model = small_model(10);
        let cfg = TrainConfig {
            on_policy_sampling: SamplingParams::greedy(6),
            ..config(method)
        };
        let (out, trace) = train_on_policy(model.clone(), &prompts(4), &RewardSpec::default(), &cfg).unwrap();
        assert_eq!(bits(&out), bits(&model), "{method}");
        assert!(trace.iter().all(|t| t.grad_norm == 0.0));
        if method != Method::Rloo {
            assert!(trace.iter().all(|t| t.degenerate == t.units.len()));
        }
    }
}

#[test]
fn on_policy_is_deterministic() {
    let cfg = TrainConfig {
        on_policy_sampling: SamplingParams {
            temperature: 1.0,
            top_p: 1.0,
            ..SamplingParams::default()
        },
        ..config(Method::Rloo)
    };
    let a = train_on_policy(small_model(11), &prompts(4), &RewardSpec::default(), &cfg).unwrap();
    let b = train_on_policy(small_model(11), &prompts(4), &RewardSpec::default(), &cfg).unwrap();
    assert_eq!(bits(&a.0), bits(&b.0));
    assert_eq!(a.1, b.1);
    assert!(a.1.iter().any(|t| t.grad_norm > 0.0));
    assert!(a.1.iter().all(|t| t.models_resident == 2));
}

#[test]
fn two_on_policy_samples_give_opposite_advantages() {
    let spec = RewardSpec::default();
    let cfg = TrainConfig {
        on_policy_samples_per_prompt: 2,
        on_policy_sampling: SamplingParams {
            temperature: 1.5,
            top_p: 1.0,
            ..SamplingParams::default()
        },
        ..config(Method::Rloo)
    };
    let model = small_model(12);
    let mut seen_gap = false;
    for (i, p) in prompts(6).iter().enumerate() {
        let scored = collect_on_policy(&model, p, i, 0, &spec, &cfg).unwrap();
        assert_eq!(scored.len(), 2);
        for r in &scored {
            assert_eq!(r.reward, reward_score(&spec, p, r.tokens()));
        }
        let d = scored[0].reward - scored[1].reward;
        seen_gap |= d != 0.0;
        let adv = compute_rloo_advantages(&[scored[0].reward, scored[1].reward]).unwrap();
        assert_eq!(adv, vec![d, -d]);
    }
    assert!(seen_gap);
}

#[test]
fn on_policy_needs_two_samples() {
    let cfg = TrainConfig {
        on_policy_samples_per_prompt: 1,
        ..config(Method::Dpo)
    };
    let err = train_on_policy(small_model(13), &prompts(2), &RewardSpec::default(), &cfg).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}
