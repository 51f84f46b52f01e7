//! Two-stage optimization: weighted fine-tuning, then weighted preference
//! optimization, plus the single-response baselines and on-policy variants.
//!
//! Per-example losses and gradients inside a batch are computed in parallel
//! but reduced in example order, so runs are bit-reproducible.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{fusepo_loss, fusesft_loss, LossHyper};
use crate::seed;
use crate::tinylm::{reward_score, sample_response, Graph, PolicyModel, RewardSpec, SamplingParams};
use crate::types::{
    form_preference_pair, BatchEntry, FusionSample, Method, PreferenceBatch, PreferenceMaterial,
    Prompt, Response, RewardedResponse, SplitTag, Token,
};
use crate::weighting::single_best_unit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Weighted fine-tuning on several selected responses per prompt.
    Fusesft,
    /// Weighted preference optimization over several sources.
    Fusepo,
    /// Fine-tuning on the single best pooled response.
    Sft,
    /// Preference optimization on the single best source's pair.
    PoBaseline,
    /// Preference optimization on responses sampled from the policy itself.
    OnPolicyPo,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Fusesft,
        Stage::Fusepo,
        Stage::Sft,
        Stage::PoBaseline,
        Stage::OnPolicyPo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Fusesft => "fusesft",
            Stage::Fusepo => "fusepo",
            Stage::Sft => "sft",
            Stage::PoBaseline => "po_baseline",
            Stage::OnPolicyPo => "on_policy_po",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s || st.name().replace('_', "-") == s)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    AdaptiveMoment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip_norm: Option<f64>,
    pub seed: u64,
    pub hyper: LossHyper,
    pub on_policy_samples_per_prompt: usize,
    pub on_policy_sampling: SamplingParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 8,
            learning_rate: 1e-2,
            optimizer: OptimizerKind::AdaptiveMoment,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip_norm: None,
            seed: 0,
            hyper: LossHyper::default(),
            on_policy_samples_per_prompt: 4,
            on_policy_sampling: SamplingParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("train.epochs and train.batch_size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("train.learning_rate must be finite and >= 0".into()));
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config("train.grad_clip_norm must be > 0".into()));
            }
        }
        self.hyper.validate()
    }
}

/// First/second moment buffers for the adaptive optimizer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Euclidean norm of a gradient.
pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// One parameter update. Global-norm clipping, when configured, is applied
/// before the update rule.
pub fn optimizer_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Size(format!(
            "{} parameters but {} gradient entries",
            params.len(),
            grads.len()
        )));
    }
    let mut scale = 1.0;
    if let Some(clip) = cfg.grad_clip_norm {
        let norm = l2_norm(grads);
        if norm > clip {
            scale = clip / norm;
        }
    }
    let lr = cfg.learning_rate;
    match cfg.optimizer {
        OptimizerKind::Sgd => {
            for (p, g) in params.iter_mut().zip(grads) {
                *p -= lr * (g * scale);
            }
        }
        OptimizerKind::AdaptiveMoment => {
            if state.m.len() != params.len() {
                state.m = vec![0.0; params.len()];
                state.v = vec![0.0; params.len()];
                state.step = 0;
            }
            state.step += 1;
            let t = state.step as i32;
            let (b1, b2) = (cfg.beta1, cfg.beta2);
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            for i in 0..params.len() {
                let g = grads[i] * scale;
                state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
                state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
                let m_hat = state.m[i] / c1;
                let v_hat = state.v[i] / c2;
                params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
    }
    Ok(())
}

/// One optimizer step as logged to the trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub epoch: usize,
    pub stage: Stage,
    pub loss: f64,
    pub grad_norm: f64,
    /// Preference entries skipped as degenerate in this step.
    pub degenerate: usize,
    /// Weighted responses (fine-tuning) or preference entries used per prompt,
    /// one count per prompt in the batch.
    pub units: Vec<usize>,
    /// Policies held in memory by the step: the trained one plus a reference
    /// when the method needs it.
    pub models_resident: usize,
}

struct ExampleOut {
    loss: f64,
    grad: Vec<f64>,
    degenerate: usize,
    units: usize,
}

/// Generic epoch/batch loop shared by every stage.
fn run_steps<F>(
    mut model: PolicyModel,
    n_examples: usize,
    cfg: &TrainConfig,
    stage: Stage,
    models_resident: usize,
    example: F,
) -> Result<(PolicyModel, Vec<TraceRecord>)>
where
    F: Fn(&PolicyModel, usize, usize) -> Result<ExampleOut> + Sync,
{
    cfg.validate()?;
    let mut state = OptimizerState::default();
    let mut trace = Vec::new();
    let mut order: Vec<usize> = (0..n_examples).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, &[0x5348, epoch as u64]));
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let step = trace.len();
            let current = &model;
            let outs: Vec<Result<ExampleOut>> = batch
                .par_iter()
                .map(|&i| example(current, i, step))
                .collect();
            let inv = 1.0 / batch.len() as f64;
            let mut grad = vec![0.0; model.params().len()];
            let mut loss = 0.0;
            let mut degenerate = 0;
            let mut units = Vec::with_capacity(batch.len());
            for out in outs {
                // A blown-up forward pass surfaces as a numeric error; report
                // it against the step like a non-finite loss.
                let out = out.map_err(|e| match e {
                    Error::Numeric { .. } => Error::NonFiniteLoss {
                        step,
                        stage: stage.to_string(),
                    },
                    e => e,
                })?;
                loss += out.loss * inv;
                for (g, v) in grad.iter_mut().zip(&out.grad) {
                    *g += v * inv;
                }
                degenerate += out.degenerate;
                units.push(out.units);
            }
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    step,
                    stage: stage.to_string(),
                });
            }
            let grad_norm = l2_norm(&grad);
            optimizer_step(model.params_mut(), &grad, &mut state, cfg)?;
            trace.push(TraceRecord {
                step,
                epoch,
                stage,
                loss,
                grad_norm,
                degenerate,
                units,
                models_resident,
            });
        }
    }
    Ok((model, trace))
}

/// Stage one. `Stage::Fusesft` trains on each sample's weighted selected
/// responses; `Stage::Sft` on the single best pooled response.
pub fn train_fusesft(
    model: PolicyModel,
    samples: &[FusionSample],
    cfg: &TrainConfig,
    stage: Stage,
) -> Result<(PolicyModel, Vec<TraceRecord>)> {
    if !matches!(stage, Stage::Fusesft | Stage::Sft) {
        return Err(Error::Config(format!("{stage} is not a fine-tuning stage")));
    }
    if let Some(s) = samples.iter().find(|s| s.split_tag != SplitTag::Sft) {
        return Err(Error::Config(format!(
            "sample {} is tagged {}, expected sft",
            s.prompt.id, s.split_tag
        )));
    }
    run_steps(model, samples.len(), cfg, stage, 1, |m, i, _| {
        let sample = &samples[i];
        let units: Vec<(f64, &[Token])> = match stage {
            Stage::Fusesft => sample
                .selected
                .iter()
                .map(|u| (u.weight, sample.unit_response(u).tokens()))
                .collect(),
            _ => {
                let u = single_best_unit(sample);
                vec![(1.0, sample.unit_response(&u).tokens())]
            }
        };
        let mut g = Graph::new(m);
        let node = fusesft_loss(&mut g, &sample.prompt, &units)?;
        Ok(ExampleOut {
            loss: g.scalar(node),
            grad: g.backward(node)?,
            degenerate: 0,
            units: units.len(),
        })
    })
}

fn preference_example(
    m: &PolicyModel,
    reference: Option<&PolicyModel>,
    batch: &PreferenceBatch,
    hyper: &LossHyper,
) -> Result<ExampleOut> {
    let mut g = Graph::new(m);
    let out = fusepo_loss(&mut g, reference, batch, hyper)?;
    Ok(ExampleOut {
        loss: g.scalar(out.node),
        grad: g.backward(out.node)?,
        degenerate: out.skipped,
        units: batch.entries.len() - out.skipped,
    })
}

/// Stage two: gradient steps on the weighted preference loss. The reference
/// is borrowed immutably and ignored by reference-free methods.
pub fn train_fusepo(
    model: PolicyModel,
    reference: Option<&PolicyModel>,
    batches: &[PreferenceBatch],
    cfg: &TrainConfig,
    stage: Stage,
) -> Result<(PolicyModel, Vec<TraceRecord>)> {
    if !matches!(stage, Stage::Fusepo | Stage::PoBaseline) {
        return Err(Error::Config(format!("{stage} is not a preference stage")));
    }
    let hyper = &cfg.hyper;
    let reference = if hyper.needs_reference() {
        Some(reference.ok_or_else(|| {
            Error::Config(format!("method {} needs a reference model", hyper.method))
        })?)
    } else {
        None
    };
    for b in batches {
        if b.method != hyper.method {
            return Err(Error::Config(format!(
                "batch {} built for {} but training {}",
                b.prompt.id, b.method, hyper.method
            )));
        }
        b.check()?;
    }
    let resident = 1 + usize::from(reference.is_some());
    run_steps(model, batches.len(), cfg, stage, resident, |m, i, _| {
        preference_example(m, reference, &batches[i], hyper)
    })
}

/// Samples `on_policy_samples_per_prompt` responses from `model` and scores them.
pub fn collect_on_policy(
    model: &PolicyModel,
    prompt: &Prompt,
    prompt_index: usize,
    step: usize,
    reward: &RewardSpec,
    cfg: &TrainConfig,
) -> Result<Vec<RewardedResponse>> {
    (0..cfg.on_policy_samples_per_prompt)
        .map(|j| {
            let sp = SamplingParams {
                seed: seed::derive(cfg.seed, &[0x4f50, step as u64, prompt_index as u64, j as u64]),
                ..cfg.on_policy_sampling.clone()
            };
            let tokens = sample_response(model, prompt, &sp)?;
            let r = reward_score(reward, prompt, &tokens);
            Ok(RewardedResponse::new(
                Response {
                    tokens,
                    source_id: "policy".into(),
                    sample_index: j,
                },
                r,
            ))
        })
        .collect()
}

/// Preference optimization on the policy's own samples. The reference for
/// DPO and leave-one-out is a frozen copy of the input model.
pub fn train_on_policy(
    model: PolicyModel,
    prompts: &[Prompt],
    reward: &RewardSpec,
    cfg: &TrainConfig,
) -> Result<(PolicyModel, Vec<TraceRecord>)> {
    if cfg.on_policy_samples_per_prompt < 2 {
        return Err(Error::Config(
            "train.on_policy_samples_per_prompt must be >= 2".into(),
        ));
    }
    cfg.on_policy_sampling.validate()?;
    let hyper = &cfg.hyper;
    let snapshot = hyper.needs_reference().then(|| model.clone());
    let reference = snapshot.as_ref();
    let resident = 1 + usize::from(reference.is_some());
    run_steps(model, prompts.len(), cfg, Stage::OnPolicyPo, resident, |m, i, step| {
        let prompt = &prompts[i];
        let scored = collect_on_policy(m, prompt, i, step, reward, cfg)?;
        let material = match hyper.method {
            Method::Dpo | Method::Simpo => {
                PreferenceMaterial::Pair(form_preference_pair(&prompt.id, &scored)?)
            }
            Method::Rloo => PreferenceMaterial::Scored(scored),
        };
        let batch = PreferenceBatch {
            prompt: prompt.clone(),
            entries: vec![BatchEntry {
                source_id: "policy".into(),
                weight: 1.0,
                material,
            }],
            method: hyper.method,
        };
        preference_example(m, reference, &batch, hyper)
    })
}
