//! Tiny fixed-window next-token policies.
//!
//! A model embeds the last `context_width` tokens of `prompt ++ [SEP] ++ response`
//! (left-padded with PAD), concatenates the embeddings, runs them through tanh
//! hidden layers and projects onto vocabulary logits. PAD and SEP are extra
//! embedding rows past the vocabulary; they are never produced as outputs.

mod checkpoint;
mod gradcheck;
mod reward;
mod sampling;
mod tape;

pub use checkpoint::{
    load_checkpoint, parse_checkpoint, render_checkpoint, save_checkpoint, Checkpoint,
};
pub use gradcheck::{finite_diff_gradient, max_relative_error};
pub use reward::{levenshtein, reward_score, IdealMap, RewardSpec};
pub use sampling::{sample_response, SamplingParams};
pub use tape::{Graph, NodeId};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Prompt, Token, END_TOKEN};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub vocab_size: usize,
    pub context_width: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub init_seed: u64,
    pub init_scale: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            context_width: 8,
            hidden_dims: vec![32],
            embed_dim: 16,
            init_seed: 0,
            init_scale: 0.08,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config("arch.vocab_size must be >= 2".into()));
        }
        if self.context_width == 0 || self.embed_dim == 0 {
            return Err(Error::Config(
                "arch.context_width and arch.embed_dim must be >= 1".into(),
            ));
        }
        if self.hidden_dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("arch.hidden_dims entries must be >= 1".into()));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Config("arch.init_scale must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn pad_index(&self) -> usize {
        self.vocab_size
    }

    pub fn sep_index(&self) -> usize {
        self.vocab_size + 1
    }

    pub fn param_count(&self) -> usize {
        ParamLayout::new(self).total
    }

    /// Parameter count, or `None` when it overflows `usize`.
    pub fn checked_param_count(&self) -> Option<usize> {
        let mut total = (self.vocab_size.checked_add(2)?).checked_mul(self.embed_dim)?;
        let mut fan_in = self.context_width.checked_mul(self.embed_dim)?;
        for &width in self.hidden_dims.iter().chain(std::iter::once(&self.vocab_size)) {
            let block = width.checked_mul(fan_in.checked_add(1)?)?;
            total = total.checked_add(block)?;
            fan_in = width;
        }
        Some(total)
    }
}

/// One named block of the flat parameter vector, stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub segments: Vec<Segment>,
    pub total: usize,
}

impl ParamLayout {
    pub fn new(arch: &ArchConfig) -> Self {
        let mut segments = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, rows: usize, cols: usize| {
            segments.push(Segment {
                name,
                offset,
                rows,
                cols,
            });
            offset += rows * cols;
        };
        push("embed".into(), arch.vocab_size + 2, arch.embed_dim);
        let mut fan_in = arch.context_width * arch.embed_dim;
        for (l, &width) in arch.hidden_dims.iter().enumerate() {
            push(format!("hidden{l}.weight"), width, fan_in);
            push(format!("hidden{l}.bias"), width, 1);
            fan_in = width;
        }
        push("output.weight".into(), arch.vocab_size, fan_in);
        push("output.bias".into(), arch.vocab_size, 1);
        Self {
            total: offset,
            segments,
        }
    }

    pub fn embed(&self) -> &Segment {
        &self.segments[0]
    }

    /// (weight, bias) segment pairs for every affine map, output last.
    pub fn affine_pairs(&self) -> impl Iterator<Item = (&Segment, &Segment)> {
        self.segments[1..].chunks(2).map(|c| (&c[0], &c[1]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    arch: ArchConfig,
    params: Vec<f64>,
    layout: ParamLayout,
}

/// Draws every parameter i.i.d. uniform in `[-init_scale, init_scale]`.
pub fn init_model(arch: &ArchConfig) -> Result<PolicyModel> {
    arch.validate()?;
    let layout = ParamLayout::new(arch);
    let mut rng = ChaCha8Rng::seed_from_u64(arch.init_seed);
    let scale = arch.init_scale;
    let params = (0..layout.total)
        .map(|_| {
            let u: f64 = rng.gen();
            scale * (2.0 * u - 1.0)
        })
        .collect();
    Ok(PolicyModel {
        arch: arch.clone(),
        params,
        layout,
    })
}

impl PolicyModel {
    pub fn from_params(arch: ArchConfig, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let layout = ParamLayout::new(&arch);
        if params.len() != layout.total {
            return Err(Error::Size(format!(
                "expected {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        if let Some(i) = params.iter().position(|p| !p.is_finite()) {
            return Err(Error::Domain(format!("parameter {i} is not finite")));
        }
        Ok(Self {
            arch,
            params,
            layout,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn vocab_size(&self) -> usize {
        self.arch.vocab_size
    }

    /// Replaces the parameter vector; length must match the layout.
    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.layout.total {
            return Err(Error::Size(format!(
                "expected {} parameters, got {}",
                self.layout.total,
                params.len()
            )));
        }
        self.params = params;
        Ok(())
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub(crate) fn check_tokens(&self, tokens: &[Token], what: &str) -> Result<()> {
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= self.arch.vocab_size) {
            return Err(Error::Domain(format!(
                "{what} token {t} outside vocabulary of {}",
                self.arch.vocab_size
            )));
        }
        Ok(())
    }

    pub(crate) fn check_prompt(&self, prompt: &Prompt) -> Result<()> {
        self.check_tokens(&prompt.text, "prompt")?;
        if prompt.text.contains(&END_TOKEN) {
            return Err(Error::Domain(format!(
                "prompt {} contains the end token",
                prompt.id
            )));
        }
        Ok(())
    }

    /// Embedding-row window used to predict the token after `generated`.
    pub(crate) fn window(&self, prompt: &[Token], generated: &[Token]) -> Vec<usize> {
        let w = self.arch.context_width;
        let mut out = vec![self.arch.pad_index(); w];
        let seq = prompt
            .iter()
            .map(|&t| t as usize)
            .chain(std::iter::once(self.arch.sep_index()))
            .chain(generated.iter().map(|&t| t as usize));
        let len = prompt.len() + 1 + generated.len();
        for (i, tok) in seq.enumerate() {
            if i + w >= len {
                out[i + w - len] = tok;
            }
        }
        out
    }

    /// Raw next-token logits for an embedding-row window.
    pub fn logits(&self, window: &[usize]) -> Vec<f64> {
        let e = self.arch.embed_dim;
        let table = &self.params[self.layout.embed().range()];
        let mut x: Vec<f64> = Vec::with_capacity(window.len() * e);
        for &row in window {
            x.extend_from_slice(&table[row * e..(row + 1) * e]);
        }
        let pairs: Vec<_> = self.layout.affine_pairs().collect();
        let last = pairs.len() - 1;
        for (l, (w, b)) in pairs.into_iter().enumerate() {
            let wv = &self.params[w.range()];
            let bv = &self.params[b.range()];
            let mut y = bv.to_vec();
            for (r, out) in y.iter_mut().enumerate() {
                let row = &wv[r * w.cols..(r + 1) * w.cols];
                *out += row.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>();
            }
            if l != last {
                y.iter_mut().for_each(|v| *v = v.tanh());
            }
            x = y;
        }
        x
    }

    /// Normalized next-token log-probabilities.
    pub fn next_token_logprobs(&self, prompt: &[Token], generated: &[Token]) -> Vec<f64> {
        log_softmax(&self.logits(&self.window(prompt, generated)))
    }
}

pub(crate) fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

/// Total and per-token log-probability of `y` given the prompt.
pub fn sequence_logprob(
    model: &PolicyModel,
    prompt: &Prompt,
    y: &[Token],
) -> Result<(f64, Vec<f64>)> {
    if y.is_empty() {
        return Err(Error::Size("response must be non-empty".into()));
    }
    model.check_prompt(prompt)?;
    model.check_tokens(y, "response")?;
    let per_token: Vec<f64> = (0..y.len())
        .map(|t| model.next_token_logprobs(&prompt.text, &y[..t])[y[t] as usize])
        .collect();
    Ok((per_token.iter().sum(), per_token))
}

/// Length-normalized log-probability, used as a model's implicit score.
pub fn avg_logprob(model: &PolicyModel, prompt: &Prompt, y: &[Token]) -> Result<f64> {
    let (total, _) = sequence_logprob(model, prompt, y)?;
    Ok(total / y.len() as f64)
}
