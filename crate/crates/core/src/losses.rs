//! Fine-tuning and preference losses, built as nodes on a [`Graph`].
//!
//! Pairwise losses return `Ok(None)` for a degenerate pair (equal rewards):
//! the pair carries no preference signal and is skipped by the caller. That
//! is a data condition, not an error.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tinylm::{sequence_logprob, Graph, NodeId, PolicyModel};
use crate::types::{
    Method, PreferenceBatch, PreferenceMaterial, PreferencePair, Prompt, RewardedResponse, Token,
    WEIGHT_SUM_TOL,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossHyper {
    pub beta_dpo: f64,
    pub beta_simpo: f64,
    pub gamma_simpo: f64,
    pub kl_coeff: f64,
    pub method: Method,
}

impl Default for LossHyper {
    fn default() -> Self {
        Self {
            beta_dpo: 1e-2,
            beta_simpo: 10.0,
            gamma_simpo: 3.0,
            kl_coeff: 1e-2,
            method: Method::Dpo,
        }
    }
}

impl LossHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_dpo > 0.0 && self.beta_simpo > 0.0) {
            return Err(Error::Config("hyper.beta_dpo and hyper.beta_simpo must be > 0".into()));
        }
        if !(self.gamma_simpo >= 0.0 && self.kl_coeff >= 0.0) {
            return Err(Error::Config("hyper.gamma_simpo and hyper.kl_coeff must be >= 0".into()));
        }
        Ok(())
    }

    /// Whether the method reads a frozen reference policy.
    pub fn needs_reference(&self) -> bool {
        !matches!(self.method, Method::Simpo)
    }
}

/// Negative sequence log-likelihood of `y`.
pub fn sft_loss(g: &mut Graph, prompt: &Prompt, y: &[Token]) -> Result<NodeId> {
    let lp = g.sequence_logprob(prompt, y)?;
    Ok(g.scale(lp, -1.0))
}

/// Weighted sum of per-response fine-tuning losses; weights must sum to 1.
pub fn fusesft_loss(g: &mut Graph, prompt: &Prompt, units: &[(f64, &[Token])]) -> Result<NodeId> {
    if units.is_empty() {
        return Err(Error::Size("no weighted responses".into()));
    }
    let sum: f64 = units.iter().map(|(w, _)| w).sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::Domain(format!("response weights sum to {sum}, expected 1")));
    }
    let mut terms = Vec::with_capacity(units.len());
    for &(w, y) in units {
        let l = sft_loss(g, prompt, y)?;
        terms.push((w, l));
    }
    Ok(g.linear(terms, 0.0))
}

/// `beta * (log pi(y|x) - log pi_ref(y|x))`; the partition term cancels in
/// pairwise use and is omitted.
pub fn dpo_implicit_reward(
    policy: &PolicyModel,
    reference: &PolicyModel,
    prompt: &Prompt,
    y: &[Token],
    beta: f64,
) -> Result<f64> {
    let (lp, _) = sequence_logprob(policy, prompt, y)?;
    let (lr, _) = sequence_logprob(reference, prompt, y)?;
    Ok(beta * (lp - lr))
}

/// `-log sigmoid(r(chosen) - r(rejected))` with DPO implicit rewards.
pub fn dpo_loss(
    g: &mut Graph,
    reference: &PolicyModel,
    pair: &PreferencePair,
    prompt: &Prompt,
    beta: f64,
) -> Result<Option<NodeId>> {
    if pair.degenerate {
        return Ok(None);
    }
    let (ref_w, _) = sequence_logprob(reference, prompt, pair.chosen.tokens())?;
    let (ref_l, _) = sequence_logprob(reference, prompt, pair.rejected.tokens())?;
    let lp_w = g.sequence_logprob(prompt, pair.chosen.tokens())?;
    let lp_l = g.sequence_logprob(prompt, pair.rejected.tokens())?;
    let margin = g.linear(vec![(beta, lp_w), (-beta, lp_l)], -beta * (ref_w - ref_l));
    g.label(margin, "dpo margin");
    let ls = g.log_sigmoid(margin);
    Ok(Some(g.scale(ls, -1.0)))
}

/// Length-normalized reference-free reward `(beta / |y|) log pi(y|x)`.
pub fn simpo_reward(policy: &PolicyModel, prompt: &Prompt, y: &[Token], beta: f64) -> Result<f64> {
    let (lp, _) = sequence_logprob(policy, prompt, y)?;
    Ok(beta / y.len() as f64 * lp)
}

/// `-log sigmoid(r(chosen) - r(rejected) - gamma)` with length-normalized rewards.
pub fn simpo_loss(
    g: &mut Graph,
    pair: &PreferencePair,
    prompt: &Prompt,
    beta: f64,
    gamma: f64,
) -> Result<Option<NodeId>> {
    if pair.degenerate {
        return Ok(None);
    }
    let (yw, yl) = (pair.chosen.tokens(), pair.rejected.tokens());
    let lp_w = g.sequence_logprob(prompt, yw)?;
    let lp_l = g.sequence_logprob(prompt, yl)?;
    let arg = g.linear(
        vec![(beta / yw.len() as f64, lp_w), (-beta / yl.len() as f64, lp_l)],
        -gamma,
    );
    g.label(arg, "simpo margin");
    let ls = g.log_sigmoid(arg);
    Ok(Some(g.scale(ls, -1.0)))
}

/// Reward minus the sampled KL penalty `kl_coeff * (log pi - log pi_ref)`.
/// The result is a plain number; no gradient flows through it.
pub fn kl_adjusted_reward(
    reward: f64,
    policy: &PolicyModel,
    reference: &PolicyModel,
    prompt: &Prompt,
    y: &[Token],
    kl_coeff: f64,
) -> Result<f64> {
    if kl_coeff == 0.0 {
        return Ok(reward);
    }
    let (lp, _) = sequence_logprob(policy, prompt, y)?;
    let (lr, _) = sequence_logprob(reference, prompt, y)?;
    Ok(reward - kl_coeff * (lp - lr))
}

/// Each reward minus the mean of the other `k - 1` rewards.
pub fn compute_rloo_advantages(adjusted: &[f64]) -> Result<Vec<f64>> {
    let k = adjusted.len();
    if k < 2 {
        return Err(Error::Size(format!("leave-one-out needs k >= 2, got {k}")));
    }
    let total: f64 = adjusted.iter().sum();
    let denom = (k - 1) as f64;
    Ok(adjusted.iter().map(|r| r - (total - r) / denom).collect())
}

/// Surrogate `-(1/k) sum_i adv_i log pi(y_i|x)` whose gradient is the
/// leave-one-out policy-gradient estimate. Advantages are constants.
pub fn rloo_loss(
    g: &mut Graph,
    reference: &PolicyModel,
    prompt: &Prompt,
    responses: &[RewardedResponse],
    hyper: &LossHyper,
) -> Result<NodeId> {
    if responses.len() < 2 {
        return Err(Error::Size(format!(
            "leave-one-out needs at least 2 responses, got {}",
            responses.len()
        )));
    }
    let policy = g.model();
    let adjusted = responses
        .iter()
        .map(|r| kl_adjusted_reward(r.reward, policy, reference, prompt, r.tokens(), hyper.kl_coeff))
        .collect::<Result<Vec<_>>>()?;
    let adv = compute_rloo_advantages(&adjusted)?;
    rloo_surrogate(g, prompt, responses, &adv)
}

/// The surrogate for given, frozen advantages.
pub fn rloo_surrogate(
    g: &mut Graph,
    prompt: &Prompt,
    responses: &[RewardedResponse],
    advantages: &[f64],
) -> Result<NodeId> {
    if responses.len() != advantages.len() {
        return Err(Error::Size("one advantage per response required".into()));
    }
    let k = responses.len() as f64;
    let mut terms = Vec::with_capacity(responses.len());
    for (r, &a) in responses.iter().zip(advantages) {
        let lp = g.sequence_logprob(prompt, r.tokens())?;
        terms.push((-a / k, lp));
    }
    Ok(g.linear(terms, 0.0))
}

/// Outcome of a weighted preference loss over one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusePoLoss {
    pub node: NodeId,
    /// Entries skipped as degenerate pairs.
    pub skipped: usize,
    /// Total weight of skipped entries; the rest is not renormalized.
    pub skipped_weight: f64,
}

/// Per-source preference loss of a single batch entry.
pub fn entry_loss(
    g: &mut Graph,
    reference: Option<&PolicyModel>,
    prompt: &Prompt,
    material: &PreferenceMaterial,
    hyper: &LossHyper,
) -> Result<Option<NodeId>> {
    let need_ref = || {
        reference.ok_or_else(|| Error::Config(format!("method {} needs a reference model", hyper.method)))
    };
    match (material, hyper.method) {
        (PreferenceMaterial::Pair(pair), Method::Dpo) => dpo_loss(g, need_ref()?, pair, prompt, hyper.beta_dpo),
        (PreferenceMaterial::Pair(pair), Method::Simpo) => {
            simpo_loss(g, pair, prompt, hyper.beta_simpo, hyper.gamma_simpo)
        }
        (PreferenceMaterial::Scored(set), Method::Rloo) => {
            rloo_loss(g, need_ref()?, prompt, set, hyper).map(Some)
        }
        _ => Err(Error::Config(format!(
            "batch material does not match method {}",
            hyper.method
        ))),
    }
}

/// `sum_i w_i * L_pref(entry_i)`; degenerate entries contribute zero.
pub fn fusepo_loss(
    g: &mut Graph,
    reference: Option<&PolicyModel>,
    batch: &PreferenceBatch,
    hyper: &LossHyper,
) -> Result<FusePoLoss> {
    if batch.method != hyper.method {
        return Err(Error::Config(format!(
            "batch built for {} but training {}",
            batch.method, hyper.method
        )));
    }
    batch.check()?;
    let mut terms = Vec::with_capacity(batch.entries.len());
    let mut skipped = 0;
    let mut skipped_weight = 0.0;
    for entry in &batch.entries {
        match entry_loss(g, reference, &batch.prompt, &entry.material, hyper)? {
            Some(node) => terms.push((entry.weight, node)),
            None => {
                skipped += 1;
                skipped_weight += entry.weight;
            }
        }
    }
    Ok(FusePoLoss {
        node: g.linear(terms, 0.0),
        skipped,
        skipped_weight,
    })
}
