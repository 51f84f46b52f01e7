//! Experiment configuration, read from TOML.
//!
//! Every section is optional and falls back to a small runnable default. The
//! digest is a SHA-256 over the canonical JSON form of the configuration with
//! the output directory left out, so the same experiment written to two
//! places shares one digest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::LossHyper;
use crate::tinylm::{ArchConfig, RewardSpec, SamplingParams};
use crate::trainer::{OptimizerKind, TrainConfig};
use crate::types::{Token, END_TOKEN};
use crate::weighting::WeightingConfig;
use crate::analysis::Representative;

/// Synthetic prompt corpus. Each prompt draws its tokens from one band,
/// chosen uniformly per prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub vocab_size: usize,
    pub train_prompts: usize,
    pub heldout_prompts: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Inclusive token ranges, each inside `1..vocab_size`.
    pub bands: Vec<[Token; 2]>,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            train_prompts: 50,
            heldout_prompts: 40,
            min_len: 2,
            max_len: 4,
            bands: vec![[1, 8], [9, 16], [17, 24], [25, 31]],
            seed: 1,
        }
    }
}

/// Plain fine-tuning of a source on ideal responses, mostly for prompts from
/// one band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub band: usize,
    /// Share of the pretraining prompts taken from `band`; the rest come
    /// from uniformly drawn bands.
    pub own_band_fraction: f64,
    pub prompts: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            band: 0,
            own_band_fraction: 0.5,
            prompts: 60,
            epochs: 20,
            learning_rate: 1e-2,
            batch_size: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceConfig {
    pub id: String,
    pub arch: ArchConfig,
    pub sampling: SamplingParams,
    pub pretrain: Option<PretrainConfig>,
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self {
            id: "source".into(),
            arch: ArchConfig::default(),
            sampling: SamplingParams::default(),
            pretrain: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    /// Weighted fine-tuning then weighted preference optimization.
    Fused,
    /// Fine-tuning on the single best response, then preference
    /// optimization on the best source's pair.
    Baseline,
    /// Fine-tuning on the single best response, then preference
    /// optimization on the policy's own samples.
    OnPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub mode: PipelineMode,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: PipelineMode::Fused,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub sampling: SamplingParams,
    pub mean_reward: bool,
    pub intra_rank: bool,
    pub cross_rank: bool,
    pub bias_variance: bool,
    pub representative: Representative,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            sampling: SamplingParams::greedy(12),
            mean_reward: true,
            intra_rank: true,
            cross_rank: true,
            bias_variance: true,
            representative: Representative::Best,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Mixed into every derived seed, so changing it alone reruns the whole
    /// experiment with fresh randomness.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub reward: RewardSpec,
    pub sources: Vec<SourceConfig>,
    pub samples_per_source: usize,
    pub target: ArchConfig,
    pub weighting: WeightingConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub pipeline: PipelineConfig,
    pub eval: EvalConfig,
}

fn default_sources() -> Vec<SourceConfig> {
    // three sources with the common sampling setting and one with a cooler,
    // more repetition-averse one
    let rows = [(0.95, 0.8, 1.0), (0.95, 0.8, 1.0), (0.95, 0.8, 1.0), (0.8, 0.7, 1.05)];
    let hidden = [vec![32], vec![24], vec![40], vec![32, 16]];
    rows.iter()
        .zip(hidden)
        .enumerate()
        .map(|(i, (&(top_p, temperature, repetition_penalty), hidden_dims))| SourceConfig {
            id: format!("m{i}"),
            arch: ArchConfig {
                hidden_dims,
                init_seed: 100 + i as u64,
                ..ArchConfig::default()
            },
            sampling: SamplingParams {
                top_p,
                temperature,
                repetition_penalty,
                ..SamplingParams::default()
            },
            pretrain: Some(PretrainConfig {
                band: i,
                ..PretrainConfig::default()
            }),
        })
        .collect()
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("fusionlab-out"),
            corpus: CorpusConfig::default(),
            reward: RewardSpec::default(),
            sources: default_sources(),
            samples_per_source: 5,
            target: ArchConfig::default(),
            weighting: WeightingConfig::default(),
            stage1: TrainConfig {
                epochs: 3,
                ..TrainConfig::default()
            },
            stage2: TrainConfig {
                epochs: 3,
                optimizer: OptimizerKind::AdaptiveMoment,
                learning_rate: 1e-3,
                hyper: LossHyper::default(),
                ..TrainConfig::default()
            },
            pipeline: PipelineConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn at(path: &str, e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("{path}: {m}")),
        other => other,
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks every section; the error names the offending field path.
    pub fn validate(&self) -> Result<()> {
        let c = &self.corpus;
        if c.vocab_size < 2 {
            return Err(Error::Config("corpus.vocab_size must be >= 2".into()));
        }
        if c.min_len == 0 || c.min_len > c.max_len {
            return Err(Error::Config("corpus.min_len must satisfy 1 <= min_len <= max_len".into()));
        }
        if c.train_prompts == 0 || c.heldout_prompts == 0 {
            return Err(Error::Config("corpus.train_prompts and corpus.heldout_prompts must be >= 1".into()));
        }
        if c.bands.is_empty() {
            return Err(Error::Config("corpus.bands must not be empty".into()));
        }
        for (i, [lo, hi]) in c.bands.iter().enumerate() {
            if *lo == END_TOKEN || lo > hi || *hi as usize >= c.vocab_size {
                return Err(Error::Config(format!(
                    "corpus.bands[{i}]: need 1 <= low <= high < vocab_size, got [{lo}, {hi}]"
                )));
            }
        }
        if self.reward.length_cap == 0 {
            return Err(Error::Config("reward.length_cap must be >= 1".into()));
        }
        if self.sources.is_empty() {
            return Err(Error::Config("sources: need at least one source".into()));
        }
        for (i, s) in self.sources.iter().enumerate() {
            let p = format!("sources[{i}]");
            if self.sources[..i].iter().any(|o| o.id == s.id) {
                return Err(Error::Config(format!("{p}.id: duplicate id {:?}", s.id)));
            }
            s.arch.validate().map_err(|e| at(&format!("{p}.arch"), e))?;
            if s.arch.vocab_size != c.vocab_size {
                return Err(Error::Config(format!("{p}.arch.vocab_size must equal corpus.vocab_size")));
            }
            s.sampling.validate().map_err(|e| at(&p, e))?;
            if let Some(pt) = &s.pretrain {
                if pt.band >= c.bands.len() {
                    return Err(Error::Config(format!("{p}.pretrain.band: no band {}", pt.band)));
                }
                if pt.prompts == 0 || pt.epochs == 0 || pt.batch_size == 0 || !(pt.learning_rate >= 0.0) {
                    return Err(Error::Config(format!(
                        "{p}.pretrain: prompts, epochs and batch_size must be >= 1, learning_rate >= 0"
                    )));
                }
                if !(0.0..=1.0).contains(&pt.own_band_fraction) {
                    return Err(Error::Config(format!("{p}.pretrain.own_band_fraction must lie in [0, 1]")));
                }
            }
        }
        if self.samples_per_source < 2 {
            return Err(Error::Config("samples_per_source must be >= 2".into()));
        }
        self.target.validate().map_err(|e| at("target", e))?;
        if self.target.vocab_size != c.vocab_size {
            return Err(Error::Config("target.vocab_size must equal corpus.vocab_size".into()));
        }
        self.weighting.validate().map_err(|e| at("weighting", e))?;
        self.stage1.validate().map_err(|e| at("stage1", e))?;
        self.stage2.validate().map_err(|e| at("stage2", e))?;
        if self.pipeline.mode == PipelineMode::OnPolicy {
            if self.stage2.on_policy_samples_per_prompt < 2 {
                return Err(Error::Config(
                    "stage2.on_policy_samples_per_prompt must be >= 2".into(),
                ));
            }
            self.stage2.on_policy_sampling.validate().map_err(|e| at("stage2.on_policy_sampling", e))?;
        }
        self.eval.sampling.validate().map_err(|e| at("eval", e))?;
        Ok(())
    }

    /// Stable hex SHA-256 of the configuration, excluding `output_dir`.
    pub fn digest(&self) -> String {
        let mut canon = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = canon.as_object_mut() {
            obj.remove("output_dir");
        }
        // serde_json maps are ordered by key, so this text is canonical
        let text = serde_json::to_string(&canon).expect("value serializes");
        Sha256::digest(text.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
