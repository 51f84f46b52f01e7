//! Evaluation metrics and numerical checks of the weighting's claims.
//!
//! Rank accuracies use a policy's average token log-probability as its
//! implicit reward and ask whether it orders the reward-best response above
//! the reward-worst one. Reward ties carry no order and are excluded.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{entry_loss, fusepo_loss, LossHyper};
use crate::seed;
use crate::tinylm::{avg_logprob, reward_score, sample_response, Graph, PolicyModel, RewardSpec, SamplingParams};
use crate::types::{form_preference_pair, FusionSample, PreferenceBatch, Prompt, RewardedResponse, Token};

/// Which response stands in for a source in the cross-source comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representative {
    /// The source's highest-reward response.
    Best,
    /// A uniformly drawn response, seeded per prompt and source.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankAccuracyReport {
    pub intra_rank: f64,
    pub cross_rank: f64,
    pub per_source_intra: Vec<f64>,
    /// Usable (non-tied) prompts per source, then for the cross comparison.
    pub intra_counts: Vec<usize>,
    pub cross_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasVarianceReport {
    pub abs_errors: Vec<f64>,
    pub absolute_bias: f64,
    pub variance: f64,
}

/// Per-source accuracy and usable count, plus the mean over sources.
#[derive(Debug, Clone, PartialEq)]
pub struct IntraRank {
    pub per_source: Vec<f64>,
    pub counts: Vec<usize>,
    pub mean: f64,
}

fn ordered(
    score: &(impl Fn(&Prompt, &[Token]) -> Result<f64> + ?Sized),
    prompt: &Prompt,
    responses: &[RewardedResponse],
) -> Result<Option<bool>> {
    let pair = form_preference_pair(&prompt.id, responses)?;
    if pair.degenerate {
        return Ok(None);
    }
    let w = score(prompt, pair.chosen.tokens())?;
    let l = score(prompt, pair.rejected.tokens())?;
    Ok(Some(w > l))
}

/// Intra-source rank accuracy under an arbitrary response scorer.
pub fn intra_rank_accuracy_by<F>(samples: &[FusionSample], score: F) -> Result<IntraRank>
where
    F: Fn(&Prompt, &[Token]) -> Result<f64>,
{
    let first = samples
        .first()
        .ok_or_else(|| Error::Size("empty evaluation set".into()))?;
    let k = first.per_source.len();
    let mut correct = vec![0usize; k];
    let mut counts = vec![0usize; k];
    for s in samples {
        if s.per_source.len() != k {
            return Err(Error::Size(format!(
                "prompt {} has {} sources, expected {k}",
                s.prompt.id,
                s.per_source.len()
            )));
        }
        for (i, e) in s.per_source.iter().enumerate() {
            if e.responses.len() < 2 {
                return Err(Error::Size(format!(
                    "source {} has fewer than 2 responses for {}",
                    e.source_id, s.prompt.id
                )));
            }
            if let Some(ok) = ordered(&score, &s.prompt, &e.responses)? {
                counts[i] += 1;
                correct[i] += usize::from(ok);
            }
        }
    }
    let mut per_source = Vec::with_capacity(k);
    for i in 0..k {
        if counts[i] == 0 {
            return Err(Error::Size(format!(
                "source {} has only tied responses; accuracy undefined",
                first.per_source[i].source_id
            )));
        }
        per_source.push(correct[i] as f64 / counts[i] as f64);
    }
    let mean = per_source.iter().sum::<f64>() / k as f64;
    Ok(IntraRank {
        per_source,
        counts,
        mean,
    })
}

/// Cross-source rank accuracy under an arbitrary response scorer. Returns the
/// accuracy and the number of usable prompts.
pub fn cross_rank_accuracy_by<F>(
    samples: &[FusionSample],
    representative: Representative,
    seed: u64,
    score: F,
) -> Result<(f64, usize)>
where
    F: Fn(&Prompt, &[Token]) -> Result<f64>,
{
    if samples.is_empty() {
        return Err(Error::Size("empty evaluation set".into()));
    }
    let mut correct = 0usize;
    let mut count = 0usize;
    for (pi, s) in samples.iter().enumerate() {
        if s.per_source.len() < 2 {
            return Err(Error::Size(format!(
                "cross-source accuracy needs at least 2 sources, prompt {} has {}",
                s.prompt.id,
                s.per_source.len()
            )));
        }
        let reps: Vec<RewardedResponse> = s
            .per_source
            .iter()
            .enumerate()
            .map(|(si, e)| match representative {
                Representative::Best => e.best().clone(),
                Representative::Random => {
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(seed::derive(seed, &[pi as u64, si as u64]));
                    e.responses[rng.gen_range(0..e.responses.len())].clone()
                }
            })
            .collect();
        if let Some(ok) = ordered(&score, &s.prompt, &reps)? {
            count += 1;
            correct += usize::from(ok);
        }
    }
    if count == 0 {
        return Err(Error::Size(
            "every prompt has tied representatives; accuracy undefined".into(),
        ));
    }
    Ok((correct as f64 / count as f64, count))
}

fn model_scorer(model: &PolicyModel) -> impl Fn(&Prompt, &[Token]) -> Result<f64> + '_ {
    move |p, y| avg_logprob(model, p, y)
}

pub fn intra_rank_accuracy(model: &PolicyModel, samples: &[FusionSample]) -> Result<IntraRank> {
    intra_rank_accuracy_by(samples, model_scorer(model))
}

pub fn cross_rank_accuracy(
    model: &PolicyModel,
    samples: &[FusionSample],
    representative: Representative,
    seed: u64,
) -> Result<(f64, usize)> {
    cross_rank_accuracy_by(samples, representative, seed, model_scorer(model))
}

pub fn rank_accuracy_report(
    model: &PolicyModel,
    samples: &[FusionSample],
    representative: Representative,
    seed: u64,
) -> Result<RankAccuracyReport> {
    let intra = intra_rank_accuracy(model, samples)?;
    let (cross_rank, cross_count) = cross_rank_accuracy(model, samples, representative, seed)?;
    Ok(RankAccuracyReport {
        intra_rank: intra.mean,
        cross_rank,
        per_source_intra: intra.per_source,
        intra_counts: intra.counts,
        cross_count,
    })
}

/// Mean and spread of the absolute score gaps to a reference.
pub fn bias_variance_report(model_scores: &[f64], reference_scores: &[f64]) -> Result<BiasVarianceReport> {
    if model_scores.len() != reference_scores.len() {
        return Err(Error::Size(format!(
            "{} model scores but {} reference scores",
            model_scores.len(),
            reference_scores.len()
        )));
    }
    if model_scores.is_empty() {
        return Err(Error::Size("no scores".into()));
    }
    let abs_errors: Vec<f64> = model_scores
        .iter()
        .zip(reference_scores)
        .map(|(m, r)| (m - r).abs())
        .collect();
    let n = abs_errors.len() as f64;
    let absolute_bias = abs_errors.iter().sum::<f64>() / n;
    let variance = abs_errors
        .iter()
        .map(|e| (e - absolute_bias).powi(2))
        .sum::<f64>()
        / n;
    Ok(BiasVarianceReport {
        abs_errors,
        absolute_bias,
        variance,
    })
}

/// Fraction of prompts where `a` out-scores `b`; ties count one half.
pub fn pairwise_winrate(
    a: &[(Prompt, Vec<Token>)],
    b: &[(Prompt, Vec<Token>)],
    reward: &RewardSpec,
) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Size(format!("{} vs {} responses", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Size("no prompts".into()));
    }
    let mut wins = 0.0;
    for ((pa, ya), (pb, yb)) in a.iter().zip(b) {
        if pa.id != pb.id || pa.text != pb.text {
            return Err(Error::Domain(format!(
                "prompt mismatch: {} vs {}",
                pa.id, pb.id
            )));
        }
        let (ra, rb) = (reward_score(reward, pa, ya), reward_score(reward, pb, yb));
        wins += if ra > rb {
            1.0
        } else if ra == rb {
            0.5
        } else {
            0.0
        };
    }
    Ok(wins / a.len() as f64)
}

/// Responses of one policy on held-out prompts with their rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct Generations {
    pub outputs: Vec<(Prompt, Vec<Token>)>,
    pub rewards: Vec<f64>,
}

impl Generations {
    pub fn mean_reward(&self) -> f64 {
        self.rewards.iter().sum::<f64>() / self.rewards.len().max(1) as f64
    }
}

/// Generates one response per prompt. The sampling seed is mixed with the
/// prompt index so each prompt gets its own stream.
pub fn generate(
    model: &PolicyModel,
    prompts: &[Prompt],
    reward: &RewardSpec,
    sampling: &SamplingParams,
) -> Result<Generations> {
    let outputs: Vec<(Prompt, Vec<Token>)> = prompts
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let sp = SamplingParams {
                seed: seed::derive(sampling.seed, &[i as u64]),
                ..sampling.clone()
            };
            Ok((p.clone(), sample_response(model, p, &sp)?))
        })
        .collect::<Result<_>>()?;
    let rewards = outputs
        .iter()
        .map(|(p, y)| reward_score(reward, p, y))
        .collect();
    Ok(Generations { outputs, rewards })
}

/// Per-prompt reward of the best source response: the reference for the
/// bias/variance report.
pub fn reference_scores(samples: &[FusionSample]) -> Vec<f64> {
    samples.iter().map(|s| s.global_best().reward).collect()
}

/// Outcome of the gradient-linearity check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop1Report {
    /// Largest elementwise gap between the aggregate and the weighted sum.
    pub max_abs_diff: f64,
    pub linear: bool,
    /// `w_i * |g_i|` per source.
    pub contribution_norms: Vec<f64>,
    /// Present only when all per-source gradients have equal norm.
    pub ranking_matches_weights: Option<bool>,
}

impl Prop1Report {
    pub fn passed(&self) -> bool {
        self.linear && self.ranking_matches_weights != Some(false)
    }
}

pub const LINEARITY_TOL: f64 = 1e-10;

/// `sum_i w_i g_i`.
pub fn weighted_gradient_sum(weights: &[f64], grads: &[Vec<f64>]) -> Result<Vec<f64>> {
    if weights.len() != grads.len() || grads.is_empty() {
        return Err(Error::Size(format!(
            "{} weights for {} gradients",
            weights.len(),
            grads.len()
        )));
    }
    let n = grads[0].len();
    if grads.iter().any(|g| g.len() != n) {
        return Err(Error::Size("gradient vectors differ in length".into()));
    }
    let mut out = vec![0.0; n];
    for (w, g) in weights.iter().zip(grads) {
        for (o, v) in out.iter_mut().zip(g) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// Checks that `aggregate` is the weighted sum of the per-source gradients,
/// and that with equal-norm gradients the contributions rank like the weights.
pub fn verify_prop1(weights: &[f64], grads: &[Vec<f64>], aggregate: &[f64]) -> Result<Prop1Report> {
    let expected = weighted_gradient_sum(weights, grads)?;
    if aggregate.len() != expected.len() {
        return Err(Error::Size(format!(
            "aggregate has {} entries, gradients have {}",
            aggregate.len(),
            expected.len()
        )));
    }
    let max_abs_diff = aggregate
        .iter()
        .zip(&expected)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let norms: Vec<f64> = grads.iter().map(|g| crate::trainer::l2_norm(g)).collect();
    let contribution_norms: Vec<f64> = weights.iter().zip(&norms).map(|(w, n)| w * n).collect();
    let n0 = norms[0];
    let equal = n0 > 0.0 && norms.iter().all(|n| (n - n0).abs() <= 1e-9 * n0);
    let ranking_matches_weights = equal.then(|| {
        (0..weights.len()).all(|i| {
            (0..weights.len()).all(|j| weights[i] <= weights[j] || contribution_norms[i] > contribution_norms[j])
        })
    });
    Ok(Prop1Report {
        max_abs_diff,
        linear: max_abs_diff <= LINEARITY_TOL,
        contribution_norms,
        ranking_matches_weights,
    })
}

/// Gradient of the weighted preference loss on `batch`, and the gradient of
/// each entry's own loss (zero for a degenerate entry).
pub fn fusepo_gradients(
    model: &PolicyModel,
    reference: Option<&PolicyModel>,
    batch: &PreferenceBatch,
    hyper: &LossHyper,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let mut g = Graph::new(model);
    let agg = fusepo_loss(&mut g, reference, batch, hyper)?;
    let aggregate = g.backward(agg.node)?;
    let mut per_source = Vec::with_capacity(batch.entries.len());
    for e in &batch.entries {
        let mut g = Graph::new(model);
        per_source.push(match entry_loss(&mut g, reference, &batch.prompt, &e.material, hyper)? {
            Some(node) => g.backward(node)?,
            None => vec![0.0; model.params().len()],
        });
    }
    Ok((aggregate, per_source))
}

/// Streaming mean / second central moment, merged in a fixed order.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        let d = x - self.mean;
        self.mean += d / self.n;
        self.m2 += d * (x - self.mean);
    }

    fn merge(self, o: Moments) -> Moments {
        if self.n == 0.0 {
            return o;
        }
        let n = self.n + o.n;
        let d = o.mean - self.mean;
        Moments {
            n,
            mean: self.mean + d * o.n / n,
            m2: self.m2 + o.m2 + d * d * self.n * o.n / n,
        }
    }
}

const MC_CHUNK: usize = 1 << 14;

/// Sample mean and unbiased sample variance of `sum_i w_i e_i` over `n`
/// draws with `e_i ~ Normal(mu, sigma^2)` i.i.d. Draws are split into fixed
/// chunks with their own seeded streams, so the result does not depend on
/// thread count.
pub fn mc_aggregate_moments(weights: &[f64], mu: f64, sigma: f64, n: usize, seed: u64) -> Result<(f64, f64)> {
    if weights.is_empty() || n < 2 {
        return Err(Error::Size("need weights and at least 2 draws".into()));
    }
    if !(sigma > 0.0 && sigma.is_finite() && mu.is_finite()) {
        return Err(Error::Domain(format!("need finite mu and sigma > 0, got {mu}, {sigma}")));
    }
    let chunks = n.div_ceil(MC_CHUNK);
    let parts: Vec<Moments> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[c as u64]));
            let len = MC_CHUNK.min(n - c * MC_CHUNK);
            let mut m = Moments::default();
            for _ in 0..len {
                let agg: f64 = weights
                    .iter()
                    .map(|w| w * (mu + sigma * rng.sample::<f64, _>(StandardNormal)))
                    .sum();
                m.push(agg);
            }
            m
        })
        .collect();
    let total = parts.into_iter().fold(Moments::default(), Moments::merge);
    Ok((total.mean, total.m2 / (total.n - 1.0)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop2Report {
    pub draws: usize,
    pub sample_mean: f64,
    pub standard_error: f64,
    /// Sample mean within 5 standard errors of `mu`.
    pub mean_preserved: bool,
    pub sample_variance: f64,
    pub theoretical_variance: f64,
    pub variance_rel_error: f64,
    /// Relative variance error within 5%.
    pub variance_matches: bool,
    pub sum_sq_weights: f64,
    /// `sum w^2 < 1`; `None` when the weights put all mass on one source.
    pub strict_reduction: Option<bool>,
}

impl Prop2Report {
    pub fn passed(&self) -> bool {
        self.mean_preserved && self.variance_matches && self.strict_reduction != Some(false)
    }
}

pub const PROP2_MIN_DRAWS: usize = 100_000;
pub const PROP2_MEAN_SE: f64 = 5.0;
pub const PROP2_VAR_REL_TOL: f64 = 0.05;

/// Monte-Carlo check that weighted aggregation of i.i.d. biases keeps their
/// mean and scales their variance by `sum w^2`.
pub fn verify_prop2(weights: &[f64], mu: f64, sigma: f64, n: usize, seed: u64) -> Result<Prop2Report> {
    if n < PROP2_MIN_DRAWS {
        return Err(Error::Size(format!("need at least {PROP2_MIN_DRAWS} draws, got {n}")));
    }
    let sum: f64 = weights.iter().sum();
    if weights.iter().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > crate::types::WEIGHT_SUM_TOL {
        return Err(Error::Domain("weights must be non-negative and sum to 1".into()));
    }
    let (sample_mean, sample_variance) = mc_aggregate_moments(weights, mu, sigma, n, seed)?;
    let sum_sq_weights: f64 = weights.iter().map(|w| w * w).sum();
    let theoretical_variance = sigma * sigma * sum_sq_weights;
    let standard_error = (sample_variance / n as f64).sqrt();
    let variance_rel_error = (sample_variance - theoretical_variance).abs() / theoretical_variance;
    let degenerate = weights.iter().any(|&w| w == 1.0);
    Ok(Prop2Report {
        draws: n,
        sample_mean,
        standard_error,
        mean_preserved: (sample_mean - mu).abs() <= PROP2_MEAN_SE * standard_error,
        sample_variance,
        theoretical_variance,
        variance_rel_error,
        variance_matches: variance_rel_error <= PROP2_VAR_REL_TOL,
        sum_sq_weights,
        strict_reduction: (!degenerate).then_some(sum_sq_weights < 1.0),
    })
}

/// `ln(1 - sum w^2)` from log-weights, via `1 - sum w^2 = 2 sum_{i<j} w_i w_j`.
/// Finite exactly when at least two weights are positive, even where the
/// weights themselves round to 0 and 1.
pub fn log_one_minus_sum_sq(log_weights: &[f64]) -> f64 {
    let mut terms = Vec::new();
    for i in 0..log_weights.len() {
        for j in i + 1..log_weights.len() {
            terms.push(log_weights[i] + log_weights[j]);
        }
    }
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    std::f64::consts::LN_2 + max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// Root-mean-square error of the Monte-Carlo variance estimate at `n` draws,
/// over `replicates` independent runs.
pub fn mc_variance_rmse(weights: &[f64], sigma: f64, n: usize, replicates: usize, seed: u64) -> Result<f64> {
    let target = sigma * sigma * weights.iter().map(|w| w * w).sum::<f64>();
    let mut acc = 0.0;
    for r in 0..replicates {
        let (_, v) = mc_aggregate_moments(weights, 0.0, sigma, n, seed::derive(seed, &[n as u64, r as u64]))?;
        acc += (v - target).powi(2);
    }
    Ok((acc / replicates.max(1) as f64).sqrt())
}
