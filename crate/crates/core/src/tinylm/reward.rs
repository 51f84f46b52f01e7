use serde::{Deserialize, Serialize};

use crate::types::{Prompt, Token, END_TOKEN};

/// Deterministic transform giving the ideal response for a prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IdealMap {
    Reverse,
    Copy,
    /// Move the first token to the end.
    Rotate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardSpec {
    pub ideal_map: IdealMap,
    pub length_cap: usize,
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self {
            ideal_map: IdealMap::Reverse,
            length_cap: 16,
        }
    }
}

impl RewardSpec {
    /// Ideal content tokens for a prompt, without the end token.
    pub fn ideal(&self, prompt: &Prompt) -> Vec<Token> {
        let mut out = prompt.text.clone();
        match self.ideal_map {
            IdealMap::Reverse => out.reverse(),
            IdealMap::Copy => {}
            IdealMap::Rotate => {
                if !out.is_empty() {
                    out.rotate_left(1)
                }
            }
        }
        out.truncate(self.length_cap);
        out
    }

    /// Ideal content followed by the end token: the fine-tuning target.
    pub fn ideal_response(&self, prompt: &Prompt) -> Vec<Token> {
        let mut out = self.ideal(prompt);
        out.push(END_TOKEN);
        out
    }
}

/// Token-level edit distance (unit insert, delete, substitute).
pub fn levenshtein(a: &[Token], b: &[Token]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ta) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, tb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ta != tb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 - lev(content, ideal) / max(|content|, |ideal|, 1)`, where `content` is
/// the response up to its first end token.
pub fn reward_score(spec: &RewardSpec, prompt: &Prompt, y: &[Token]) -> f64 {
    let content = match y.iter().position(|&t| t == END_TOKEN) {
        Some(end) => &y[..end],
        None => y,
    };
    let ideal = spec.ideal(prompt);
    let denom = content.len().max(ideal.len()).max(1);
    1.0 - levenshtein(content, &ideal) as f64 / denom as f64
}
