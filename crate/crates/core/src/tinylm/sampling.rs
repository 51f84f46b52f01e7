use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Prompt, Token, END_TOKEN};

use super::PolicyModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingParams {
    pub top_p: f64,
    /// 0 selects greedy decoding.
    pub temperature: f64,
    pub repetition_penalty: f64,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            top_p: 0.95,
            temperature: 0.8,
            repetition_penalty: 1.0,
            max_len: 12,
            seed: 0,
        }
    }
}

impl SamplingParams {
    pub fn greedy(max_len: usize) -> Self {
        Self {
            top_p: 1.0,
            temperature: 0.0,
            repetition_penalty: 1.0,
            max_len,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!("sampling.top_p must lie in (0, 1], got {}", self.top_p)));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "sampling.temperature must be finite and >= 0, got {}",
                self.temperature
            )));
        }
        if !(self.repetition_penalty >= 1.0 && self.repetition_penalty.is_finite()) {
            return Err(Error::Config(format!(
                "sampling.repetition_penalty must be >= 1, got {}",
                self.repetition_penalty
            )));
        }
        if self.max_len == 0 {
            return Err(Error::Config("sampling.max_len must be >= 1".into()));
        }
        Ok(())
    }
}

/// Autoregressively samples a response; the trailing end token is kept when
/// produced before `max_len`.
pub fn sample_response(model: &PolicyModel, prompt: &Prompt, sp: &SamplingParams) -> Result<Vec<Token>> {
    sample_with_penalty_switch(model, prompt, sp, true)
}

pub(crate) fn sample_with_penalty_switch(
    model: &PolicyModel,
    prompt: &Prompt,
    sp: &SamplingParams,
    penalize: bool,
) -> Result<Vec<Token>> {
    sp.validate()?;
    model.check_prompt(prompt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sp.seed);
    let mut out: Vec<Token> = Vec::with_capacity(sp.max_len);
    while out.len() < sp.max_len {
        let mut logits = model.logits(&model.window(&prompt.text, &out));
        if penalize {
            apply_repetition_penalty(&mut logits, &out, sp.repetition_penalty);
        }
        let next = if sp.temperature == 0.0 {
            argmax(&logits)
        } else {
            logits.iter_mut().for_each(|l| *l /= sp.temperature);
            nucleus_draw(&logits, sp.top_p, rng.gen::<f64>())
        };
        out.push(next as Token);
        if next as Token == END_TOKEN {
            break;
        }
    }
    Ok(out)
}

/// Divides positive logits and multiplies non-positive ones of already
/// emitted tokens by the penalty.
fn apply_repetition_penalty(logits: &mut [f64], emitted: &[Token], penalty: f64) {
    let mut seen = vec![false; logits.len()];
    for &t in emitted {
        seen[t as usize] = true;
    }
    for (l, s) in logits.iter_mut().zip(seen) {
        if s {
            if *l > 0.0 {
                *l /= penalty;
            } else {
                *l *= penalty;
            }
        }
    }
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |best, i| if v[i] > v[best] { i } else { best })
}

/// Draws from the smallest probability-sorted prefix whose mass reaches
/// `top_p`, using the uniform variate `u` in [0, 1).
fn nucleus_draw(logits: &[f64], top_p: f64, u: f64) -> usize {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| exps[b].total_cmp(&exps[a]));
    let mut kept = 0;
    let mut mass = 0.0;
    for &i in &order {
        kept += 1;
        mass += exps[i] / total;
        if mass >= top_p {
            break;
        }
    }
    let target = u * mass;
    let mut cum = 0.0;
    for &i in &order[..kept] {
        cum += exps[i] / total;
        if target < cum {
            return i;
        }
    }
    order[kept - 1]
}
