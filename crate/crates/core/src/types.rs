//! Domain records shared by data construction, training and analysis.
//!
//! Everything here is an immutable value once built. The helpers at the bottom
//! of the file validate stored samples and turn a scored response set into a
//! (chosen, rejected) preference pair.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Vocabulary index. Token 0 is reserved as end-of-sequence.
pub type Token = u32;

pub const END_TOKEN: Token = 0;

/// Tolerance on the sum of normalized source weights.
pub const WEIGHT_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prompt {
    pub id: String,
    pub text: Vec<Token>,
}

impl Prompt {
    pub fn new(id: impl Into<String>, text: Vec<Token>) -> Self {
        Self {
            id: id.into(),
            text,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Response {
    pub tokens: Vec<Token>,
    pub source_id: String,
    pub sample_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardedResponse {
    pub response: Response,
    pub reward: f64,
}

impl RewardedResponse {
    pub fn new(response: Response, reward: f64) -> Self {
        Self { response, reward }
    }

    pub fn tokens(&self) -> &[Token] {
        &self.response.tokens
    }
}

/// Which training stage a sample was built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Sft,
    Po,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitTag::Sft => "sft",
            SplitTag::Po => "po",
        })
    }
}

/// One source model's contribution to a [`FusionSample`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceEntry {
    pub source_id: String,
    pub responses: Vec<RewardedResponse>,
    pub best_index: usize,
    pub weight: f64,
}

impl SourceEntry {
    pub fn best(&self) -> &RewardedResponse {
        &self.responses[self.best_index]
    }
}

/// A response picked for weighted fine-tuning, addressed by
/// (source position, sample position) inside the owning sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedUnit {
    pub source_index: usize,
    pub sample_index: usize,
    pub weight: f64,
}

/// Everything stored for one prompt by the data-construction pass.
///
/// `selected` is the weighted response set used by weighted fine-tuning; it is
/// empty for preference-stage samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionSample {
    pub prompt: Prompt,
    pub per_source: Vec<SourceEntry>,
    pub split_tag: SplitTag,
    pub selected: Vec<WeightedUnit>,
}

impl FusionSample {
    pub fn unit_response(&self, unit: &WeightedUnit) -> &RewardedResponse {
        &self.per_source[unit.source_index].responses[unit.sample_index]
    }

    /// Single highest-reward response across all sources, ties to the earlier
    /// source then lower sample index.
    pub fn global_best(&self) -> &RewardedResponse {
        let mut best = self.per_source[0].best();
        for entry in &self.per_source[1..] {
            if entry.best().reward > best.reward {
                best = entry.best();
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt_id: String,
    pub source_id: String,
    pub chosen: RewardedResponse,
    pub rejected: RewardedResponse,
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Dpo,
    Simpo,
    Rloo,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Dpo => "dpo",
            Method::Simpo => "simpo",
            Method::Rloo => "rloo",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PreferenceMaterial {
    Pair(PreferencePair),
    Scored(Vec<RewardedResponse>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchEntry {
    pub source_id: String,
    pub weight: f64,
    pub material: PreferenceMaterial,
}

/// Weighted per-source preference material for one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceBatch {
    pub prompt: Prompt,
    pub entries: Vec<BatchEntry>,
    pub method: Method,
}

impl PreferenceBatch {
    /// Checks weight normalization and that every entry's shape fits the method.
    pub fn check(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Size(format!(
                "preference batch for {} has no entries",
                self.prompt.id
            )));
        }
        let sum: f64 = self.entries.iter().map(|e| e.weight).sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::Domain(format!(
                "preference batch weights sum to {sum}, expected 1"
            )));
        }
        for entry in &self.entries {
            let fits = matches!(
                (&entry.material, self.method),
                (PreferenceMaterial::Pair(_), Method::Dpo | Method::Simpo)
                    | (PreferenceMaterial::Scored(_), Method::Rloo)
            );
            if !fits {
                return Err(Error::Config(format!(
                    "entry for source {} does not match method {}",
                    entry.source_id, self.method
                )));
            }
        }
        Ok(())
    }
}

/// A single broken invariant found by [`validate_sample`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

/// Reports every [`FusionSample`] invariant that does not hold.
pub fn validate_sample(sample: &FusionSample) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |field: String, rule: &str| {
        out.push(Violation {
            field,
            rule: rule.to_string(),
        })
    };

    if sample.prompt.text.is_empty() {
        push("prompt.text".into(), "must be non-empty");
    }
    if sample.prompt.text.contains(&END_TOKEN) {
        push("prompt.text".into(), "must not contain the end token");
    }
    if sample.per_source.is_empty() {
        push("per_source".into(), "must hold at least one source");
        return out;
    }

    let n = sample.per_source[0].responses.len();
    let mut ids = HashSet::new();
    for (i, entry) in sample.per_source.iter().enumerate() {
        let field = |name: &str| format!("per_source[{i}].{name}");
        if !ids.insert(entry.source_id.as_str()) {
            push(field("source_id"), "must be unique within the sample");
        }
        if entry.responses.len() != n {
            push(field("responses"), "all sources must have the same count");
        }
        if entry.responses.is_empty() {
            push(field("responses"), "must be non-empty");
            continue;
        }
        for (j, r) in entry.responses.iter().enumerate() {
            if !r.reward.is_finite() {
                push(field(&format!("responses[{j}].reward")), "must be finite");
            }
            if r.response.tokens.is_empty() {
                push(field(&format!("responses[{j}].tokens")), "must be non-empty");
            }
        }
        match entry.responses.get(entry.best_index) {
            None => push(field("best_index"), "out of range"),
            Some(best) => {
                let max = entry
                    .responses
                    .iter()
                    .map(|r| r.reward)
                    .fold(f64::NEG_INFINITY, f64::max);
                if best.reward < max {
                    push(field("best_index"), "must point at a maximal reward");
                }
            }
        }
        if !(0.0..=1.0).contains(&entry.weight) {
            push(field("weight"), "must lie in [0, 1]");
        }
    }

    let sum: f64 = sample.per_source.iter().map(|e| e.weight).sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
        push("per_source.weight".into(), "weights must sum to 1");
    }

    // Higher best reward never receives strictly less weight.
    let bests: Vec<Option<f64>> = sample
        .per_source
        .iter()
        .map(|e| e.responses.get(e.best_index).map(|r| r.reward))
        .collect();
    'outer: for (a, ra) in bests.iter().enumerate() {
        for (b, rb) in bests.iter().enumerate() {
            if let (Some(ra), Some(rb)) = (ra, rb) {
                if ra > rb && sample.per_source[a].weight < sample.per_source[b].weight {
                    push(
                        "per_source.weight".into(),
                        "weight order must follow best-reward order",
                    );
                    break 'outer;
                }
            }
        }
    }

    if !sample.selected.is_empty() {
        if sample.split_tag != SplitTag::Sft {
            push("selected".into(), "only sft samples carry selected units");
        }
        let mut sum = 0.0;
        for (u, unit) in sample.selected.iter().enumerate() {
            let exists = sample
                .per_source
                .get(unit.source_index)
                .is_some_and(|e| unit.sample_index < e.responses.len());
            if !exists {
                push(format!("selected[{u}]"), "refers to a missing response");
            }
            if !(0.0..=1.0).contains(&unit.weight) {
                push(format!("selected[{u}].weight"), "must lie in [0, 1]");
            }
            sum += unit.weight;
        }
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            push("selected.weight".into(), "weights must sum to 1");
        }
    } else if sample.split_tag == SplitTag::Sft {
        push("selected".into(), "sft samples must carry selected units");
    }
    out
}

/// Orders responses by reward, then by lower sample index.
pub(crate) fn cmp_reward_then_index(a: &RewardedResponse, b: &RewardedResponse) -> Ordering {
    a.reward
        .total_cmp(&b.reward)
        .then_with(|| b.response.sample_index.cmp(&a.response.sample_index))
}

/// Position of the highest reward; ties go to the lowest sample index.
pub fn argmax_reward(responses: &[RewardedResponse]) -> Option<usize> {
    (0..responses.len()).reduce(|best, i| {
        if cmp_reward_then_index(&responses[i], &responses[best]) == Ordering::Greater {
            i
        } else {
            best
        }
    })
}

/// Pairs the highest-reward response with the lowest-reward one.
///
/// Ties resolve to the lowest sample index; the rejected response is always a
/// different element from the chosen one, so an all-equal set yields the first
/// two responses flagged as degenerate.
pub fn form_preference_pair(
    prompt_id: &str,
    responses: &[RewardedResponse],
) -> Result<PreferencePair> {
    if responses.len() < 2 {
        return Err(Error::Size(format!(
            "a preference pair needs at least 2 responses, got {}",
            responses.len()
        )));
    }
    let chosen = argmax_reward(responses).expect("non-empty");
    let rejected = (0..responses.len())
        .filter(|&i| i != chosen)
        .reduce(|low, i| {
            let (a, b) = (&responses[i], &responses[low]);
            match a.reward.total_cmp(&b.reward) {
                Ordering::Less => i,
                Ordering::Equal if a.response.sample_index < b.response.sample_index => i,
                _ => low,
            }
        })
        .expect("at least one other response");
    let chosen = responses[chosen].clone();
    let rejected = responses[rejected].clone();
    Ok(PreferencePair {
        prompt_id: prompt_id.to_string(),
        source_id: chosen.response.source_id.clone(),
        degenerate: chosen.reward == rejected.reward,
        chosen,
        rejected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rr(source: &str, idx: usize, reward: f64) -> RewardedResponse {
        RewardedResponse::new(
            Response {
                tokens: vec![1 + idx as Token],
                source_id: source.into(),
                sample_index: idx,
            },
            reward,
        )
    }

    fn sample(weights: &[f64], rewards: &[&[f64]]) -> FusionSample {
        let per_source = weights
            .iter()
            .zip(rewards)
            .enumerate()
            .map(|(i, (&w, rs))| {
                let responses: Vec<_> = rs
                    .iter()
                    .enumerate()
                    .map(|(j, &r)| rr(&format!("s{i}"), j, r))
                    .collect();
                SourceEntry {
                    source_id: format!("s{i}"),
                    best_index: argmax_reward(&responses).unwrap(),
                    responses,
                    weight: w,
                }
            })
            .collect();
        FusionSample {
            prompt: Prompt::new("p0", vec![3, 4, 5]),
            per_source,
            split_tag: SplitTag::Po,
            selected: vec![],
        }
    }

    #[test]
    fn well_formed_sample_has_no_violations() {
        let s = sample(
            &[0.4, 0.3, 0.2, 0.1],
            &[&[0.9, 0.1], &[0.8, 0.2], &[0.7, 0.3], &[0.6, 0.4]],
        );
        assert!(validate_sample(&s).is_empty(), "{:?}", validate_sample(&s));
    }

    #[test]
    fn unnormalized_weights_are_reported() {
        let s = sample(&[0.5, 0.4], &[&[0.9, 0.1], &[0.8, 0.2]]);
        let v = validate_sample(&s);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "per_source.weight");
        assert!(v[0].rule.contains("sum to 1"));
    }

    #[test]
    fn non_maximal_best_index_is_reported() {
        let mut s = sample(&[1.0], &[&[0.2, 0.7, 0.5]]);
        // linear scan for the max
        let rewards = [0.2, 0.7, 0.5];
        let mut max_at = 0;
        for (i, r) in rewards.iter().enumerate() {
            if *r > rewards[max_at] {
                max_at = i;
            }
        }
        assert_eq!(s.per_source[0].best_index, max_at);
        s.per_source[0].best_index = 2;
        let v = validate_sample(&s);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "per_source[0].best_index");
    }

    #[test]
    fn sft_samples_need_selected_units() {
        let mut s = sample(&[1.0], &[&[0.2, 0.7]]);
        s.split_tag = SplitTag::Sft;
        assert_eq!(validate_sample(&s)[0].field, "selected");
        s.selected = vec![WeightedUnit {
            source_index: 0,
            sample_index: 1,
            weight: 1.0,
        }];
        assert!(validate_sample(&s).is_empty());
        s.selected[0].sample_index = 9;
        assert_eq!(validate_sample(&s)[0].field, "selected[0]");
    }

    #[test]
    fn pair_picks_max_and_min() {
        let rs = vec![rr("a", 0, 0.1), rr("a", 1, 0.9), rr("a", 2, 0.5)];
        let p = form_preference_pair("p", &rs).unwrap();
        assert_eq!(p.chosen.response.sample_index, 1);
        assert_eq!(p.rejected.response.sample_index, 0);
        assert!(!p.degenerate);
    }

    #[test]
    fn tied_pair_is_degenerate() {
        let rs = vec![rr("a", 0, 0.7), rr("a", 1, 0.7)];
        let p = form_preference_pair("p", &rs).unwrap();
        assert_eq!(p.chosen.response.sample_index, 0);
        assert_eq!(p.rejected.response.sample_index, 1);
        assert!(p.degenerate);
    }

    #[test]
    fn pair_needs_two_responses() {
        assert!(matches!(
            form_preference_pair("p", &[rr("a", 0, 0.3)]),
            Err(Error::Size(_))
        ));
    }

    #[test]
    fn batch_check_catches_shape_mismatch() {
        let pair = form_preference_pair("p", &[rr("a", 0, 0.1), rr("a", 1, 0.9)]).unwrap();
        let mut batch = PreferenceBatch {
            prompt: Prompt::new("p", vec![1]),
            entries: vec![BatchEntry {
                source_id: "a".into(),
                weight: 1.0,
                material: PreferenceMaterial::Pair(pair),
            }],
            method: Method::Dpo,
        };
        assert!(batch.check().is_ok());
        batch.method = Method::Rloo;
        assert!(matches!(batch.check(), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn pair_matches_exhaustive_scan(rewards in prop::collection::vec(0.0f64..1.0, 5)) {
            let rs: Vec<_> = rewards.iter().enumerate().map(|(i, &r)| rr("a", i, r)).collect();
            let p = form_preference_pair("p", &rs).unwrap();
            let max = rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let min = rewards.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assert_eq!(p.chosen.reward, max);
            prop_assert_eq!(p.rejected.reward, min);
            prop_assert!(p.chosen.reward >= p.rejected.reward);
        }

        #[test]
        fn pair_is_permutation_stable(
            rewards in prop::collection::hash_set(0u32..10_000, 2..8),
            rot in 0usize..8,
        ) {
            let rewards: Vec<f64> = rewards.into_iter().map(|r| r as f64 / 10_000.0).collect();
            let rs: Vec<_> = rewards.iter().enumerate().map(|(i, &r)| rr("a", i, r)).collect();
            let mut permuted = rs.clone();
            let n = permuted.len();
            permuted.rotate_left(rot % n);
            permuted.reverse();
            let a = form_preference_pair("p", &rs).unwrap();
            let b = form_preference_pair("p", &permuted).unwrap();
            prop_assert_eq!(a.chosen.reward, b.chosen.reward);
            prop_assert_eq!(a.rejected.reward, b.rejected.reward);
        }
    }
}
