//! Self-contained numerical checks: every loss's tape gradient against
//! central finite differences, gradient linearity of the weighted preference
//! loss, and the Monte-Carlo variance checks of weighted aggregation.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    fusepo_gradients, mc_variance_rmse, verify_prop1, verify_prop2, Prop2Report,
};
use crate::error::Result;
use crate::losses::{
    compute_rloo_advantages, dpo_loss, fusepo_loss, fusesft_loss, kl_adjusted_reward, rloo_loss,
    rloo_surrogate, simpo_loss, sft_loss, LossHyper,
};
use crate::seed;
use crate::tinylm::{
    finite_diff_gradient, init_model, max_relative_error, ArchConfig, Graph, NodeId, PolicyModel,
};
use crate::types::{
    form_preference_pair, BatchEntry, Method, PreferenceBatch, PreferenceMaterial, Prompt, Response,
    RewardedResponse, Token, END_TOKEN,
};
use crate::weighting::compute_model_weights;

pub const GRAD_REL_TOL: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;

/// Architecture for gradient checks: 1,720 parameters.
pub fn check_arch() -> ArchConfig {
    ArchConfig {
        vocab_size: 16,
        context_width: 6,
        hidden_dims: vec![24],
        embed_dim: 8,
        init_seed: 0,
        init_scale: 0.5,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Sft,
    Fusesft,
    Dpo,
    Simpo,
    /// Leave-one-out surrogate with advantages held fixed.
    Rloo,
    FusepoDpo,
    FusepoSimpo,
    /// Weighted leave-one-out surrogates with advantages held fixed.
    FusepoRloo,
}

impl LossKind {
    pub const ALL: [LossKind; 8] = [
        LossKind::Sft,
        LossKind::Fusesft,
        LossKind::Dpo,
        LossKind::Simpo,
        LossKind::Rloo,
        LossKind::FusepoDpo,
        LossKind::FusepoSimpo,
        LossKind::FusepoRloo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Sft => "sft_loss",
            LossKind::Fusesft => "fusesft_loss",
            LossKind::Dpo => "dpo_loss",
            LossKind::Simpo => "simpo_loss",
            LossKind::Rloo => "rloo_loss",
            LossKind::FusepoDpo => "fusepo_loss.dpo",
            LossKind::FusepoSimpo => "fusepo_loss.simpo",
            LossKind::FusepoRloo => "fusepo_loss.rloo",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A random loss instance: prompt, scored responses from several sources,
/// and a frozen reference policy.
#[derive(Debug, Clone)]
pub struct GradCase {
    pub model: PolicyModel,
    pub reference: PolicyModel,
    pub prompt: Prompt,
    /// Per source: scored responses with pairwise distinct rewards.
    pub sources: Vec<Vec<RewardedResponse>>,
    pub weights: Vec<f64>,
    pub hyper: LossHyper,
}

fn random_tokens(rng: &mut ChaCha8Rng, vocab: usize, max_len: usize) -> Vec<Token> {
    let len = rng.gen_range(1..=max_len);
    let mut y: Vec<Token> = (0..len).map(|_| rng.gen_range(1..vocab as Token)).collect();
    if rng.gen_bool(0.5) {
        y.push(END_TOKEN);
    }
    y
}

/// Deterministic random case `index` drawn from `seed`.
pub fn random_case(seed: u64, index: u64) -> Result<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[0x4743, index]));
    let arch = check_arch();
    let model = init_model(&ArchConfig {
        init_seed: rng.gen(),
        ..arch.clone()
    })?;
    let reference = init_model(&ArchConfig {
        init_seed: rng.gen(),
        ..arch.clone()
    })?;
    let prompt = Prompt::new(format!("case{index}"), random_tokens(&mut rng, arch.vocab_size, 4)
        .into_iter()
        .filter(|&t| t != END_TOKEN)
        .collect());
    let k = rng.gen_range(2..=4);
    let n = rng.gen_range(2..=4);
    let sources: Vec<Vec<RewardedResponse>> = (0..k)
        .map(|s| {
            (0..n)
                .map(|j| {
                    RewardedResponse::new(
                        Response {
                            tokens: random_tokens(&mut rng, arch.vocab_size, 5),
                            source_id: format!("s{s}"),
                            sample_index: j,
                        },
                        // distinct rewards keep every pair non-degenerate
                        (j as f64 + rng.gen::<f64>()) / n as f64,
                    )
                })
                .collect()
        })
        .collect();
    let bests: Vec<f64> = sources
        .iter()
        .map(|rs| rs.iter().map(|r| r.reward).fold(f64::MIN, f64::max))
        .collect();
    let weights = compute_model_weights(&bests, rng.gen_range(0.05..1.0))?;
    let hyper = LossHyper {
        beta_dpo: rng.gen_range(0.05..1.0),
        beta_simpo: rng.gen_range(0.5..3.0),
        gamma_simpo: rng.gen_range(0.0..2.0),
        kl_coeff: rng.gen_range(0.0..0.1),
        method: Method::Dpo,
    };
    Ok(GradCase {
        model,
        reference,
        prompt,
        sources,
        weights,
        hyper,
    })
}

impl GradCase {
    fn pair(&self, s: usize) -> Result<crate::types::PreferencePair> {
        form_preference_pair(&self.prompt.id, &self.sources[s])
    }

    /// Leave-one-out advantages of source `s` at the base parameters.
    fn frozen_advantages(&self, s: usize) -> Result<Vec<f64>> {
        let adjusted = self.sources[s]
            .iter()
            .map(|r| {
                kl_adjusted_reward(
                    r.reward,
                    &self.model,
                    &self.reference,
                    &self.prompt,
                    r.tokens(),
                    self.hyper.kl_coeff,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        compute_rloo_advantages(&adjusted)
    }

    pub fn batch(&self, method: Method) -> Result<PreferenceBatch> {
        let entries = (0..self.sources.len())
            .map(|s| {
                let material = match method {
                    Method::Rloo => PreferenceMaterial::Scored(self.sources[s].clone()),
                    _ => PreferenceMaterial::Pair(self.pair(s)?),
                };
                Ok(BatchEntry {
                    source_id: format!("s{s}"),
                    weight: self.weights[s],
                    material,
                })
            })
            .collect::<Result<_>>()?;
        Ok(PreferenceBatch {
            prompt: self.prompt.clone(),
            entries,
            method,
        })
    }

    fn hyper_for(&self, method: Method) -> LossHyper {
        LossHyper {
            method,
            ..self.hyper.clone()
        }
    }

    /// Builds the loss of `kind` on `g`. Leave-one-out advantages are the
    /// ones at the base parameters, whatever parameters `g` carries.
    pub fn build(&self, kind: LossKind, g: &mut Graph) -> Result<NodeId> {
        let p = &self.prompt;
        let missing = || crate::Error::Check("unexpected degenerate pair".into());
        Ok(match kind {
            LossKind::Sft => sft_loss(g, p, self.sources[0][0].tokens())?,
            LossKind::Fusesft => {
                let units: Vec<(f64, &[Token])> = self
                    .weights
                    .iter()
                    .zip(&self.sources)
                    .map(|(&w, rs)| (w, rs[0].tokens()))
                    .collect();
                fusesft_loss(g, p, &units)?
            }
            LossKind::Dpo => dpo_loss(g, &self.reference, &self.pair(0)?, p, self.hyper.beta_dpo)?
                .ok_or_else(missing)?,
            LossKind::Simpo => simpo_loss(
                g,
                &self.pair(0)?,
                p,
                self.hyper.beta_simpo,
                self.hyper.gamma_simpo,
            )?
            .ok_or_else(missing)?,
            LossKind::Rloo => rloo_surrogate(g, p, &self.sources[0], &self.frozen_advantages(0)?)?,
            LossKind::FusepoDpo => {
                fusepo_loss(g, Some(&self.reference), &self.batch(Method::Dpo)?, &self.hyper_for(Method::Dpo))?.node
            }
            LossKind::FusepoSimpo => {
                fusepo_loss(g, None, &self.batch(Method::Simpo)?, &self.hyper_for(Method::Simpo))?.node
            }
            LossKind::FusepoRloo => {
                let mut terms = Vec::new();
                for s in 0..self.sources.len() {
                    let node = rloo_surrogate(g, p, &self.sources[s], &self.frozen_advantages(s)?)?;
                    terms.push((self.weights[s], node));
                }
                g.linear(terms, 0.0)
            }
        })
    }

    /// The exact loss entry point for `kind`, where it differs from the
    /// frozen-advantage form: `rloo_loss` and `fusepo_loss` with leave-one-out.
    fn build_unfrozen(&self, kind: LossKind, g: &mut Graph) -> Result<Option<NodeId>> {
        Ok(match kind {
            LossKind::Rloo => Some(rloo_loss(g, &self.reference, &self.prompt, &self.sources[0], &self.hyper)?),
            LossKind::FusepoRloo => Some(
                fusepo_loss(g, Some(&self.reference), &self.batch(Method::Rloo)?, &self.hyper_for(Method::Rloo))?
                    .node,
            ),
            _ => None,
        })
    }
}

/// Result of one gradient comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub loss: LossKind,
    pub case: u64,
    pub params: usize,
    pub max_rel_error: f64,
    /// For leave-one-out losses: the gap between the real entry point's
    /// gradient and the frozen-advantage surrogate's.
    pub entry_point_gap: f64,
    pub passed: bool,
}

/// Compares the tape gradient with central differences for one case.
/// `corrupt` perturbs the analytic gradient, for exercising failure paths.
pub fn check_gradient(case: &GradCase, kind: LossKind, index: u64, corrupt: bool) -> Result<GradCheck> {
    let mut g = Graph::new(&case.model);
    let node = case.build(kind, &mut g)?;
    let mut analytic = g.backward(node)?;
    let mut entry_point_gap = 0.0f64;
    let mut g2 = Graph::new(&case.model);
    if let Some(n2) = case.build_unfrozen(kind, &mut g2)? {
        let exact = g2.backward(n2)?;
        entry_point_gap = exact
            .iter()
            .zip(&analytic)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
    }
    if corrupt {
        analytic[0] += 1e-2;
    }
    let numeric = finite_diff_gradient(
        &case.model,
        |m| {
            let mut g = Graph::new(m);
            let node = case.build(kind, &mut g)?;
            Ok(g.scalar(node))
        },
        FD_STEP,
    )?;
    let max_rel_error = max_relative_error(&analytic, &numeric);
    Ok(GradCheck {
        loss: kind,
        case: index,
        params: case.model.params().len(),
        max_rel_error,
        entry_point_gap,
        passed: max_rel_error <= GRAD_REL_TOL && entry_point_gap <= 1e-12,
    })
}

/// `cases` random gradient checks of `kind`, run in parallel.
pub fn gradient_suite(kind: LossKind, cases: u64, seed: u64, corrupt: bool) -> Result<Vec<GradCheck>> {
    (0..cases)
        .into_par_iter()
        .map(|i| check_gradient(&random_case(seed, i)?, kind, i, corrupt && i == 0))
        .collect()
}

/// Linearity check of the weighted preference gradient on a random case.
pub fn linearity_case(seed: u64, index: u64, method: Method) -> Result<crate::analysis::Prop1Report> {
    let case = random_case(seed ^ 0x5031, index)?;
    let batch = case.batch(method)?;
    let hyper = case.hyper_for(method);
    let reference = hyper.needs_reference().then_some(&case.reference);
    let (aggregate, per_source) = fusepo_gradients(&case.model, reference, &batch, &hyper)?;
    verify_prop1(&case.weights, &per_source, &aggregate)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<NamedCheck>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!(
                "{} {} {}\n",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.detail
            ));
        }
        out
    }

    fn push(&mut self, name: impl Into<String>, passed: bool, detail: String) {
        self.checks.push(NamedCheck {
            name: name.into(),
            passed,
            detail,
        });
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    pub grad_cases: u64,
    pub linearity_cases: u64,
    pub mc_draws: usize,
    pub rmse_replicates: usize,
    /// Name of a gradient check (e.g. `grad.dpo_loss`) whose analytic
    /// gradient is deliberately corrupted. Test hook.
    pub inject_fault: Option<String>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            grad_cases: 20,
            linearity_cases: 20,
            mc_draws: 1_000_000,
            rmse_replicates: 40,
            inject_fault: None,
        }
    }
}

fn prop2_detail(r: &Prop2Report) -> String {
    format!(
        "mean {:.6} (se {:.2e}) variance {:.6} vs {:.6} rel {:.4} sum_w2 {:.6} strict {}",
        r.sample_mean,
        r.standard_error,
        r.sample_variance,
        r.theoretical_variance,
        r.variance_rel_error,
        r.sum_sq_weights,
        match r.strict_reduction {
            Some(b) => b.to_string(),
            None => "n/a".into(),
        }
    )
}

/// Runs every check. Failures are reported, not returned as errors.
pub fn run_verify(source_weights: &[f64], opts: &VerifyOptions) -> Result<VerifyReport> {
    let mut report = VerifyReport::default();
    for kind in LossKind::ALL {
        let name = format!("grad.{}", kind.name());
        let corrupt = opts.inject_fault.as_deref() == Some(name.as_str());
        let checks = gradient_suite(kind, opts.grad_cases, opts.seed, corrupt)?;
        let worst = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
        let gap = checks.iter().map(|c| c.entry_point_gap).fold(0.0, f64::max);
        report.push(
            name,
            checks.iter().all(|c| c.passed),
            format!("cases {} max_rel_error {worst:.3e} entry_gap {gap:.1e}", checks.len()),
        );
    }
    for method in [Method::Dpo, Method::Simpo, Method::Rloo] {
        let name = format!("linearity.{method}");
        let mut worst = 0.0f64;
        let mut ok = true;
        for i in 0..opts.linearity_cases {
            let r = linearity_case(opts.seed, i, method)?;
            worst = worst.max(r.max_abs_diff);
            ok &= r.passed();
        }
        if opts.inject_fault.as_deref() == Some(name.as_str()) {
            ok = false;
        }
        report.push(name, ok, format!("cases {} max_abs_diff {worst:.3e}", opts.linearity_cases));
    }
    let mut weight_sets: Vec<(String, Vec<f64>)> = vec![
        ("uniform4".into(), vec![0.25; 4]),
        ("two_source".into(), vec![0.8808, 0.1192]),
        ("single".into(), vec![1.0]),
    ];
    if !source_weights.is_empty() {
        weight_sets.push(("config".into(), source_weights.to_vec()));
    }
    for (i, (label, w)) in weight_sets.iter().enumerate() {
        let name = format!("variance.{label}");
        let r = verify_prop2(w, 0.1, 1.0, opts.mc_draws, seed::derive(opts.seed, &[0x5032, i as u64]))?;
        let ok = r.passed() && opts.inject_fault.as_deref() != Some(name.as_str());
        report.push(name, ok, prop2_detail(&r));
    }
    let w = [0.4, 0.3, 0.2, 0.1];
    let small = mc_variance_rmse(&w, 1.0, 1_000, opts.rmse_replicates, opts.seed)?;
    let large = mc_variance_rmse(&w, 1.0, 100_000, opts.rmse_replicates, opts.seed)?;
    let ratio = small / large;
    report.push(
        "variance.rate",
        (5.0..=20.0).contains(&ratio) && opts.inject_fault.as_deref() != Some("variance.rate"),
        format!("rmse n=1e3 {small:.3e} n=1e5 {large:.3e} ratio {ratio:.2}"),
    );
    Ok(report)
}
