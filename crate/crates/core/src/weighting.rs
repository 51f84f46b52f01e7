//! Data construction: instruction split, per-source reward softmax weights,
//! pooled response selection and preference-batch assembly.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{
    argmax_reward, cmp_reward_then_index, form_preference_pair, BatchEntry, FusionSample, Method,
    PreferenceBatch, PreferenceMaterial, Prompt, RewardedResponse, SourceEntry, SplitTag,
    WeightedUnit,
};

/// How weighted fine-tuning picks its responses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    /// The k best responses of the whole pool, no per-source quota.
    TopkPooled,
    /// Each source's best response, weighted per source.
    Top1PerSource,
}

/// Which responses of a source feed the leave-one-out estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RlooSet {
    /// The highest- and lowest-reward responses only.
    Extremes,
    /// Every sampled response.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightingConfig {
    pub alpha_sft: f64,
    pub alpha_po: f64,
    pub k_sft: usize,
    /// Number of highest-scoring sources whose pairs enter the preference loss.
    pub k_po: usize,
    pub strategy: SelectionStrategy,
    pub rloo_set: RlooSet,
    pub split_ratio: f64,
    pub split_seed: u64,
}

impl Default for WeightingConfig {
    fn default() -> Self {
        Self {
            alpha_sft: 1e-2,
            alpha_po: 5e-3,
            k_sft: 4,
            k_po: 4,
            strategy: SelectionStrategy::TopkPooled,
            rloo_set: RlooSet::Extremes,
            split_ratio: 0.4,
            split_seed: 0,
        }
    }
}

impl WeightingConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, a) in [("alpha_sft", self.alpha_sft), ("alpha_po", self.alpha_po)] {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::Config(format!("weighting.{name} must be > 0, got {a}")));
            }
        }
        if self.k_sft == 0 {
            return Err(Error::Config("weighting.k_sft must be >= 1".into()));
        }
        if self.k_po == 0 {
            return Err(Error::Config("weighting.k_po must be >= 1".into()));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::Config(format!(
                "weighting.split_ratio must lie in (0, 1), got {}",
                self.split_ratio
            )));
        }
        Ok(())
    }
}

/// Partitions prompts into disjoint fine-tuning and preference sets.
///
/// The fine-tuning share has `round_half_up(split_ratio * n)` prompts. Both
/// halves keep the shuffled order drawn from `split_seed`.
pub fn split_instructions(
    prompts: &[Prompt],
    cfg: &WeightingConfig,
) -> Result<(Vec<Prompt>, Vec<Prompt>)> {
    cfg.validate()?;
    if prompts.is_empty() {
        return Err(Error::Size("cannot split an empty prompt list".into()));
    }
    let n_sft = (cfg.split_ratio * prompts.len() as f64 + 0.5).floor() as usize;
    if n_sft == 0 || n_sft >= prompts.len() {
        return Err(Error::Config(format!(
            "split ratio {} over {} prompts leaves an empty partition",
            cfg.split_ratio,
            prompts.len()
        )));
    }
    let mut shuffled = prompts.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.split_seed));
    let po = shuffled.split_off(n_sft);
    Ok((shuffled, po))
}

/// Temperature softmax over per-source best rewards.
pub fn compute_model_weights(best_rewards: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if best_rewards.is_empty() {
        return Err(Error::Size("need at least one reward".into()));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Domain(format!("temperature must be > 0, got {alpha}")));
    }
    if let Some(r) = best_rewards.iter().find(|r| !r.is_finite()) {
        return Err(Error::Domain(format!("reward {r} is not finite")));
    }
    let max = best_rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = best_rewards
        .iter()
        .map(|r| ((r - max) / alpha).exp())
        .collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Natural log of [`compute_model_weights`], computed without forming the
/// weights, so entries far below the maximum stay finite instead of
/// underflowing to zero.
pub fn log_model_weights(best_rewards: &[f64], alpha: f64) -> Result<Vec<f64>> {
    compute_model_weights(best_rewards, alpha)?;
    let max = best_rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: Vec<f64> = best_rewards.iter().map(|r| (r - max) / alpha).collect();
    let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
    Ok(z.into_iter().map(|v| v - lse).collect())
}

/// Indices of the `k` highest-reward responses of a source-major pool, sorted by
/// descending reward. Equal rewards keep pool order (source, then sample).
pub fn select_topk_pooled(pool: &[RewardedResponse], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > pool.len() {
        return Err(Error::Size(format!(
            "cannot select top {k} from a pool of {}",
            pool.len()
        )));
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    // stable sort keeps pool order among ties
    order.sort_by(|&a, &b| pool[b].reward.total_cmp(&pool[a].reward));
    order.truncate(k);
    Ok(order)
}

/// Builds the stored record for one prompt from every source's scored responses.
pub fn build_fusion_sample(
    prompt: &Prompt,
    sources: Vec<(String, Vec<RewardedResponse>)>,
    cfg: &WeightingConfig,
    stage: SplitTag,
) -> Result<FusionSample> {
    if sources.is_empty() {
        return Err(Error::Size("no source responses".into()));
    }
    let mut bests = Vec::with_capacity(sources.len());
    for (id, responses) in &sources {
        let best = argmax_reward(responses).ok_or_else(|| {
            Error::Size(format!("source {id} has no responses for {}", prompt.id))
        })?;
        bests.push(best);
    }
    let alpha = match stage {
        SplitTag::Sft => cfg.alpha_sft,
        SplitTag::Po => cfg.alpha_po,
    };
    let best_rewards: Vec<f64> = sources
        .iter()
        .zip(&bests)
        .map(|((_, rs), &b)| rs[b].reward)
        .collect();
    let weights = compute_model_weights(&best_rewards, alpha)?;
    let per_source: Vec<SourceEntry> = sources
        .into_iter()
        .zip(bests)
        .zip(&weights)
        .map(|(((source_id, responses), best_index), &weight)| SourceEntry {
            source_id,
            responses,
            best_index,
            weight,
        })
        .collect();

    let selected = match (stage, cfg.strategy) {
        (SplitTag::Po, _) => Vec::new(),
        (SplitTag::Sft, SelectionStrategy::Top1PerSource) => per_source
            .iter()
            .enumerate()
            .map(|(i, e)| WeightedUnit {
                source_index: i,
                sample_index: e.best_index,
                weight: e.weight,
            })
            .collect(),
        (SplitTag::Sft, SelectionStrategy::TopkPooled) => {
            let mut pool = Vec::new();
            let mut address = Vec::new();
            for (i, e) in per_source.iter().enumerate() {
                for (j, r) in e.responses.iter().enumerate() {
                    pool.push(r.clone());
                    address.push((i, j));
                }
            }
            let picked = select_topk_pooled(&pool, cfg.k_sft.min(pool.len()))?;
            let rewards: Vec<f64> = picked.iter().map(|&p| pool[p].reward).collect();
            let unit_weights = compute_model_weights(&rewards, cfg.alpha_sft)?;
            picked
                .iter()
                .zip(unit_weights)
                .map(|(&p, weight)| WeightedUnit {
                    source_index: address[p].0,
                    sample_index: address[p].1,
                    weight,
                })
                .collect()
        }
    };

    Ok(FusionSample {
        prompt: prompt.clone(),
        per_source,
        split_tag: stage,
        selected,
    })
}

/// The single best pooled response, used by the plain fine-tuning baseline.
pub fn single_best_unit(sample: &FusionSample) -> WeightedUnit {
    let mut best = (0, sample.per_source[0].best_index);
    for (i, e) in sample.per_source.iter().enumerate().skip(1) {
        let cand = &e.responses[e.best_index];
        let cur = &sample.per_source[best.0].responses[best.1];
        if cand.reward > cur.reward {
            best = (i, e.best_index);
        }
    }
    WeightedUnit {
        source_index: best.0,
        sample_index: best.1,
        weight: 1.0,
    }
}

/// Assembles the weighted preference batch for a preference-stage sample.
///
/// Only the `k_po` sources with the highest best reward contribute; their
/// weights are the temperature softmax over those best rewards, recomputed
/// over the retained subset so they stay normalized.
pub fn build_preference_batch(
    sample: &FusionSample,
    method: Method,
    cfg: &WeightingConfig,
) -> Result<PreferenceBatch> {
    let k = cfg.k_po.min(sample.per_source.len());
    let mut ranked: Vec<usize> = (0..sample.per_source.len()).collect();
    ranked.sort_by(|&a, &b| {
        cmp_reward_then_index(sample.per_source[b].best(), sample.per_source[a].best())
            .then(a.cmp(&b))
    });
    let mut keep = ranked[..k].to_vec();
    keep.sort_unstable();

    let rewards: Vec<f64> = keep.iter().map(|&i| sample.per_source[i].best().reward).collect();
    let weights = compute_model_weights(&rewards, cfg.alpha_po)?;
    let mut entries = Vec::with_capacity(k);
    for (&i, weight) in keep.iter().zip(weights) {
        let source = &sample.per_source[i];
        let pair = form_preference_pair(&sample.prompt.id, &source.responses)?;
        let material = match (method, cfg.rloo_set) {
            (Method::Dpo | Method::Simpo, _) => PreferenceMaterial::Pair(pair),
            (Method::Rloo, RlooSet::Extremes) => {
                PreferenceMaterial::Scored(vec![pair.chosen, pair.rejected])
            }
            (Method::Rloo, RlooSet::All) => PreferenceMaterial::Scored(source.responses.clone()),
        };
        entries.push(BatchEntry {
            source_id: source.source_id.clone(),
            weight,
            material,
        });
    }
    Ok(PreferenceBatch {
        prompt: sample.prompt.clone(),
        entries,
        method,
    })
}
