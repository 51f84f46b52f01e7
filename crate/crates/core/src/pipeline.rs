//! End-to-end experiment steps behind the command-line front end.
//!
//! The pure steps (`generate_data`, `run_stage1`, `run_stage2`, `evaluate`)
//! work in memory. The `cmd_*` functions wrap them with files under the
//! configured output directory and refuse artifacts whose config digest does
//! not match the running configuration.
//!
//! Every random choice draws from a seed derived from the global seed and a
//! per-unit counter path, so results do not depend on thread scheduling.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::analysis::{
    bias_variance_report, cross_rank_accuracy, generate, intra_rank_accuracy, reference_scores,
    BiasVarianceReport, Generations, IntraRank,
};
use crate::config::{ExperimentConfig, PipelineMode};
use crate::dataset::{load_dataset, save_dataset, DatasetHeader, DATASET_FORMAT, DATASET_VERSION};
use crate::error::{Error, Result};
use crate::seed;
use crate::tinylm::{init_model, load_checkpoint, reward_score, sample_response, save_checkpoint, ArchConfig, PolicyModel, SamplingParams};
use crate::trainer::{train_fusepo, train_fusesft, train_on_policy, Stage, TraceRecord, TrainConfig};
use crate::types::{FusionSample, Prompt, Response, RewardedResponse, SplitTag, WeightedUnit};
use crate::verify::{run_verify, VerifyOptions, VerifyReport};
use crate::weighting::{build_fusion_sample, build_preference_batch, split_instructions, WeightingConfig, SelectionStrategy};

const TAG_CORPUS: u64 = 1;
const TAG_INIT: u64 = 2;
const TAG_PRETRAIN: u64 = 3;
const TAG_SAMPLE: u64 = 4;
const TAG_SPLIT: u64 = 5;
const TAG_STAGE1: u64 = 6;
const TAG_STAGE2: u64 = 7;
const TAG_EVAL: u64 = 8;

const KIND_TRAIN: u64 = 0;
const KIND_HELDOUT: u64 = 1;

fn mix(cfg: &ExperimentConfig, tag: u64, component_seed: u64) -> u64 {
    seed::derive(cfg.seed, &[tag, component_seed])
}

/// File locations under the output directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn source_checkpoint(&self, id: &str) -> PathBuf {
        self.root.join("sources").join(format!("{id}.ckpt"))
    }

    pub fn dataset(&self, split: &str) -> PathBuf {
        self.root.join("data").join(format!("{split}.jsonl"))
    }

    pub fn checkpoint(&self, stage: Stage) -> PathBuf {
        self.root.join(format!("{stage}.ckpt"))
    }

    pub fn trace(&self, stage: Stage) -> PathBuf {
        self.root.join(format!("{stage}.trace.jsonl"))
    }

    pub fn report(&self, label: &str) -> PathBuf {
        self.root.join(format!("report.{label}.txt"))
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    ensure_dir(path)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Prompt `index` of a stream; the band is drawn per prompt unless forced.
fn make_prompt(cfg: &ExperimentConfig, id: String, stream: u64, index: u64, band: Option<usize>) -> Prompt {
    let c = &cfg.corpus;
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(mix(cfg, TAG_CORPUS, c.seed), &[stream, index]));
    let b = match band {
        Some(b) => b,
        None => rng.gen_range(0..c.bands.len()),
    };
    let [lo, hi] = c.bands[b];
    let len = rng.gen_range(c.min_len..=c.max_len);
    Prompt::new(id, (0..len).map(|_| rng.gen_range(lo..=hi)).collect())
}

/// Training and held-out prompts.
pub fn generate_corpus(cfg: &ExperimentConfig) -> (Vec<Prompt>, Vec<Prompt>) {
    let train = (0..cfg.corpus.train_prompts)
        .map(|i| make_prompt(cfg, format!("p{i}"), KIND_TRAIN, i as u64, None))
        .collect();
    let heldout = (0..cfg.corpus.heldout_prompts)
        .map(|i| make_prompt(cfg, format!("h{i}"), KIND_HELDOUT, i as u64, None))
        .collect();
    (train, heldout)
}

fn seeded_arch(cfg: &ExperimentConfig, arch: &ArchConfig) -> ArchConfig {
    ArchConfig {
        init_seed: mix(cfg, TAG_INIT, arch.init_seed),
        ..arch.clone()
    }
}

/// Initial target policy.
pub fn init_target(cfg: &ExperimentConfig) -> Result<PolicyModel> {
    init_model(&seeded_arch(cfg, &cfg.target))
}

/// One-response fine-tuning samples: the ideal response with reward 1.
fn ideal_samples(cfg: &ExperimentConfig, prompts: &[Prompt]) -> Vec<FusionSample> {
    prompts
        .iter()
        .map(|p| {
            let response = RewardedResponse::new(
                Response {
                    tokens: cfg.reward.ideal_response(p),
                    source_id: "ideal".into(),
                    sample_index: 0,
                },
                1.0,
            );
            FusionSample {
                prompt: p.clone(),
                per_source: vec![crate::types::SourceEntry {
                    source_id: "ideal".into(),
                    responses: vec![response],
                    best_index: 0,
                    weight: 1.0,
                }],
                split_tag: SplitTag::Sft,
                selected: vec![WeightedUnit {
                    source_index: 0,
                    sample_index: 0,
                    weight: 1.0,
                }],
            }
        })
        .collect()
}

/// Builds source `s`, fine-tuned on ideal responses for its band when the
/// config asks for it.
pub fn build_source(cfg: &ExperimentConfig, s: usize) -> Result<PolicyModel> {
    let src = &cfg.sources[s];
    let model = init_model(&seeded_arch(cfg, &src.arch))?;
    let Some(pt) = &src.pretrain else {
        return Ok(model);
    };
    let stream = 100 + s as u64;
    let own = (pt.own_band_fraction * pt.prompts as f64).round() as usize;
    let prompts: Vec<Prompt> = (0..pt.prompts)
        .map(|i| {
            let band = (i < own).then_some(pt.band);
            make_prompt(cfg, format!("{}-{i}", src.id), stream, i as u64, band)
        })
        .collect();
    let tc = TrainConfig {
        epochs: pt.epochs,
        batch_size: pt.batch_size,
        learning_rate: pt.learning_rate,
        seed: mix(cfg, TAG_PRETRAIN, s as u64),
        ..TrainConfig::default()
    };
    let (model, _) = train_fusesft(model, &ideal_samples(cfg, &prompts), &tc, Stage::Sft)?;
    Ok(model)
}

/// `samples_per_source` scored responses from every source for one prompt.
fn score_prompt(
    cfg: &ExperimentConfig,
    sources: &[PolicyModel],
    prompt: &Prompt,
    kind: u64,
    index: usize,
) -> Result<Vec<(String, Vec<RewardedResponse>)>> {
    sources
        .iter()
        .zip(&cfg.sources)
        .enumerate()
        .map(|(s, (model, sc))| {
            let responses = (0..cfg.samples_per_source)
                .map(|j| {
                    let sp = SamplingParams {
                        seed: seed::derive(
                            mix(cfg, TAG_SAMPLE, sc.sampling.seed),
                            &[kind, s as u64, index as u64, j as u64],
                        ),
                        ..sc.sampling.clone()
                    };
                    let tokens = sample_response(model, prompt, &sp)?;
                    let reward = reward_score(&cfg.reward, prompt, &tokens);
                    Ok(RewardedResponse::new(
                        Response {
                            tokens,
                            source_id: sc.id.clone(),
                            sample_index: j,
                        },
                        reward,
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((sc.id.clone(), responses))
        })
        .collect()
}

/// Everything the training stages and evaluation consume.
#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub sources: Vec<PolicyModel>,
    pub sft: Vec<FusionSample>,
    pub po: Vec<FusionSample>,
    /// Held-out prompts with scored source responses.
    pub eval: Vec<FusionSample>,
}

fn mixed_weighting(cfg: &ExperimentConfig) -> WeightingConfig {
    WeightingConfig {
        split_seed: mix(cfg, TAG_SPLIT, cfg.weighting.split_seed),
        ..cfg.weighting.clone()
    }
}

/// Builds sources, samples and scores responses, splits the instructions and
/// assembles the fusion samples.
pub fn generate_data(cfg: &ExperimentConfig) -> Result<GeneratedData> {
    cfg.validate()?;
    let sources = (0..cfg.sources.len())
        .into_par_iter()
        .map(|s| build_source(cfg, s))
        .collect::<Result<Vec<_>>>()?;
    let (train, heldout) = generate_corpus(cfg);
    let weighting = mixed_weighting(cfg);
    let index_of = |p: &Prompt| -> usize { p.id[1..].parse().expect("generated prompt id") };
    let (sft_prompts, po_prompts) = split_instructions(&train, &weighting)?;
    let build = |prompts: &[Prompt], kind: u64, tag: SplitTag| -> Result<Vec<FusionSample>> {
        prompts
            .par_iter()
            .map(|p| {
                let scored = score_prompt(cfg, &sources, p, kind, index_of(p))?;
                build_fusion_sample(p, scored, &weighting, tag)
            })
            .collect()
    };
    let sft = build(&sft_prompts, KIND_TRAIN, SplitTag::Sft)?;
    let po = build(&po_prompts, KIND_TRAIN, SplitTag::Po)?;
    let eval = build(&heldout, KIND_HELDOUT, SplitTag::Po)?;
    Ok(GeneratedData {
        sources,
        sft,
        po,
        eval,
    })
}

fn stage_config(cfg: &ExperimentConfig, stage: Stage) -> TrainConfig {
    let (base, tag) = match stage {
        Stage::Fusesft | Stage::Sft => (&cfg.stage1, TAG_STAGE1),
        _ => (&cfg.stage2, TAG_STAGE2),
    };
    TrainConfig {
        seed: mix(cfg, tag, base.seed),
        ..base.clone()
    }
}

/// The two stages a pipeline mode runs.
pub fn mode_stages(mode: PipelineMode) -> (Stage, Stage) {
    match mode {
        PipelineMode::Fused => (Stage::Fusesft, Stage::Fusepo),
        PipelineMode::Baseline => (Stage::Sft, Stage::PoBaseline),
        PipelineMode::OnPolicy => (Stage::Sft, Stage::OnPolicyPo),
    }
}

/// Stage one from a fresh target.
pub fn run_stage1(cfg: &ExperimentConfig, sft: &[FusionSample], stage: Stage) -> Result<(PolicyModel, Vec<TraceRecord>)> {
    train_fusesft(init_target(cfg)?, sft, &stage_config(cfg, stage), stage)
}

/// Preference batches for a stage-two run.
pub fn preference_batches(cfg: &ExperimentConfig, po: &[FusionSample], stage: Stage) -> Result<Vec<crate::types::PreferenceBatch>> {
    let weighting = match stage {
        Stage::PoBaseline => WeightingConfig {
            k_po: 1,
            ..cfg.weighting.clone()
        },
        _ => cfg.weighting.clone(),
    };
    po.iter()
        .map(|s| build_preference_batch(s, cfg.stage2.hyper.method, &weighting))
        .collect()
}

/// Stage two starting from, and referenced to, the stage-one model.
pub fn run_stage2(
    cfg: &ExperimentConfig,
    po: &[FusionSample],
    stage1: &PolicyModel,
    stage: Stage,
) -> Result<(PolicyModel, Vec<TraceRecord>)> {
    let tc = stage_config(cfg, stage);
    match stage {
        Stage::Fusepo | Stage::PoBaseline => {
            let batches = preference_batches(cfg, po, stage)?;
            train_fusepo(stage1.clone(), Some(stage1), &batches, &tc, stage)
        }
        Stage::OnPolicyPo => {
            let prompts: Vec<Prompt> = po.iter().map(|s| s.prompt.clone()).collect();
            train_on_policy(stage1.clone(), &prompts, &cfg.reward, &tc)
        }
        other => Err(Error::Config(format!("{other} is not a second-stage run"))),
    }
}

/// Metrics of one evaluated policy. Disabled metrics are `None`, as is
/// cross-source accuracy when there is only one source.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub digest: String,
    pub model: String,
    pub eval_seed: u64,
    pub prompts: usize,
    pub source_ids: Vec<String>,
    pub generations: Generations,
    pub mean_reward: Option<f64>,
    pub intra: Option<IntraRank>,
    pub cross: Option<(f64, usize)>,
    pub bias: Option<BiasVarianceReport>,
    pub reference_mean_reward: Option<f64>,
}

fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

impl EvalReport {
    /// Key-value text, one `key = value` per line, in a fixed order.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("format", "fusionlab-report 1".into());
        kv("digest", self.digest.clone());
        kv("model", self.model.clone());
        kv("eval_seed", self.eval_seed.to_string());
        kv("eval_prompts", self.prompts.to_string());
        if let Some(m) = self.mean_reward {
            kv("mean_reward", fmt_f64(m));
        }
        if let Some(intra) = &self.intra {
            kv("intra_rank", fmt_f64(intra.mean));
            for (id, (a, n)) in self.source_ids.iter().zip(intra.per_source.iter().zip(&intra.counts)) {
                kv(&format!("intra_rank.{id}"), fmt_f64(*a));
                kv(&format!("intra_rank.{id}.count"), n.to_string());
            }
        }
        if let Some((c, n)) = self.cross {
            kv("cross_rank", fmt_f64(c));
            kv("cross_rank.count", n.to_string());
        }
        if let Some(b) = &self.bias {
            kv("absolute_bias", fmt_f64(b.absolute_bias));
            kv("bias_variance", fmt_f64(b.variance));
        }
        if let Some(r) = self.reference_mean_reward {
            kv("reference_mean_reward", fmt_f64(r));
        }
        out
    }

    /// Parses rendered text back into key-value pairs.
    pub fn parse_pairs(text: &str) -> Vec<(String, String)> {
        text.lines()
            .filter_map(|l| l.split_once(" = "))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }
}

/// Runs the enabled metrics on the held-out samples.
pub fn evaluate(cfg: &ExperimentConfig, model: &PolicyModel, eval: &[FusionSample], label: &str) -> Result<EvalReport> {
    let ev = &cfg.eval;
    let sampling = SamplingParams {
        seed: mix(cfg, TAG_EVAL, ev.sampling.seed),
        ..ev.sampling.clone()
    };
    let prompts: Vec<Prompt> = eval.iter().map(|s| s.prompt.clone()).collect();
    let generations = generate(model, &prompts, &cfg.reward, &sampling)?;
    let intra = if ev.intra_rank { Some(intra_rank_accuracy(model, eval)?) } else { None };
    // Cross-source accuracy is undefined with a single source.
    let several = eval.first().is_some_and(|s| s.per_source.len() >= 2);
    let cross = if ev.cross_rank && several {
        Some(cross_rank_accuracy(model, eval, ev.representative, sampling.seed)?)
    } else {
        None
    };
    let refs = reference_scores(eval);
    let bias = if ev.bias_variance {
        Some(bias_variance_report(&generations.rewards, &refs)?)
    } else {
        None
    };
    Ok(EvalReport {
        digest: cfg.digest(),
        model: label.to_string(),
        eval_seed: sampling.seed,
        prompts: prompts.len(),
        source_ids: eval
            .first()
            .map(|s| s.per_source.iter().map(|e| e.source_id.clone()).collect())
            .unwrap_or_default(),
        mean_reward: ev.mean_reward.then(|| generations.mean_reward()),
        intra,
        cross,
        bias,
        reference_mean_reward: ev
            .bias_variance
            .then(|| refs.iter().sum::<f64>() / refs.len().max(1) as f64),
        generations,
    })
}

fn header(split: &str, digest: &str) -> DatasetHeader {
    DatasetHeader {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        split: split.into(),
        digest: digest.into(),
    }
}

fn check_digest(expected: &str, found: Option<&str>) -> Result<()> {
    match found {
        Some(f) if f == expected => Ok(()),
        other => Err(Error::Digest {
            expected: expected.into(),
            found: other.unwrap_or("-").into(),
        }),
    }
}

fn load_split(cfg: &ExperimentConfig, layout: &Layout, split: &str) -> Result<Vec<FusionSample>> {
    let (h, samples) = load_dataset(&layout.dataset(split))?;
    check_digest(&cfg.digest(), Some(&h.digest))?;
    if h.split != split {
        return Err(Error::Header(format!("expected a {split} dataset, found {}", h.split)));
    }
    Ok(samples)
}

/// Writes source checkpoints and the sft, po and eval datasets.
pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<GeneratedData> {
    let data = generate_data(cfg)?;
    let layout = Layout::new(&cfg.output_dir);
    let digest = cfg.digest();
    for (model, sc) in data.sources.iter().zip(&cfg.sources) {
        let path = layout.source_checkpoint(&sc.id);
        ensure_dir(&path)?;
        save_checkpoint(&path, model, Some(&digest))?;
    }
    for (split, samples) in [("sft", &data.sft), ("po", &data.po), ("eval", &data.eval)] {
        let path = layout.dataset(split);
        ensure_dir(&path)?;
        save_dataset(&path, &header(split, &digest), samples)?;
    }
    Ok(data)
}

fn render_trace(trace: &[TraceRecord]) -> String {
    trace
        .iter()
        .map(|r| serde_json::to_string(r).expect("trace serializes") + "\n")
        .collect()
}

/// Loads a checkpoint and checks it was produced under `cfg`.
pub fn load_checked(cfg: &ExperimentConfig, path: &Path) -> Result<PolicyModel> {
    let ck = load_checkpoint(path)?;
    check_digest(&cfg.digest(), ck.digest.as_deref())?;
    if ck.model.vocab_size() != cfg.target.vocab_size {
        return Err(Error::Config(format!(
            "checkpoint vocabulary {} does not match target.vocab_size {}",
            ck.model.vocab_size(),
            cfg.target.vocab_size
        )));
    }
    Ok(ck.model)
}

/// The stage-one checkpoint a second stage starts from by default.
pub fn default_stage1(stage: Stage) -> Stage {
    match stage {
        Stage::Fusepo => Stage::Fusesft,
        _ => Stage::Sft,
    }
}

/// Trains one stage from the files of earlier steps; writes `<stage>.ckpt`
/// and `<stage>.trace.jsonl`. Returns the checkpoint path.
pub fn cmd_train(cfg: &ExperimentConfig, stage: Stage, checkpoint: Option<&Path>) -> Result<PathBuf> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.output_dir);
    let (model, trace) = match stage {
        Stage::Fusesft | Stage::Sft => run_stage1(cfg, &load_split(cfg, &layout, "sft")?, stage)?,
        _ => {
            let start = checkpoint
                .map(Path::to_path_buf)
                .unwrap_or_else(|| layout.checkpoint(default_stage1(stage)));
            let stage1 = load_checked(cfg, &start)?;
            run_stage2(cfg, &load_split(cfg, &layout, "po")?, &stage1, stage)?
        }
    };
    let path = layout.checkpoint(stage);
    ensure_dir(&path)?;
    save_checkpoint(&path, &model, Some(&cfg.digest()))?;
    write_file(&layout.trace(stage), &render_trace(&trace))?;
    Ok(path)
}

/// Evaluates a checkpoint on the held-out set and writes the report to
/// `out`, or next to the checkpoint's stage name under the output directory.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path, out: Option<&Path>) -> Result<(EvalReport, PathBuf)> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.output_dir);
    let model = load_checked(cfg, checkpoint)?;
    let eval = load_split(cfg, &layout, "eval")?;
    let label = checkpoint
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("model")
        .to_string();
    let report = evaluate(cfg, &model, &eval, &label)?;
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| layout.report(&label));
    write_file(&path, &report.render())?;
    Ok((report, path))
}

/// Runs the numerical checks, including the weight profile of the
/// configured source count. The profile's temperature is floored at 0.1 so
/// that more than one weight stays away from zero.
pub fn cmd_verify(cfg: &ExperimentConfig, opts: &VerifyOptions) -> Result<VerifyReport> {
    cfg.validate()?;
    let k = cfg.sources.len();
    let profile: Vec<f64> = (0..k).map(|i| 1.0 - i as f64 / k as f64).collect();
    let weights = crate::weighting::compute_model_weights(&profile, cfg.weighting.alpha_po.max(0.1))?;
    run_verify(&weights, opts)
}

/// gen-data, both stages of the configured mode, and evaluation of the final
/// checkpoint, all through files.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<EvalReport> {
    cmd_gen_data(cfg)?;
    let (s1, s2) = mode_stages(cfg.pipeline.mode);
    cmd_train(cfg, s1, None)?;
    let ck = cmd_train(cfg, s2, None)?;
    Ok(cmd_eval(cfg, &ck, None)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    KSft,
    KPo,
    AlphaSft,
    AlphaPo,
    Strategy,
    SourceCount,
    TargetSize,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "k_sft" => Self::KSft,
            "k_po" => Self::KPo,
            "alpha_sft" => Self::AlphaSft,
            "alpha_po" => Self::AlphaPo,
            "strategy" => Self::Strategy,
            "source_count" => Self::SourceCount,
            "target_size" => Self::TargetSize,
            other => return Err(Error::Config(format!("unknown sweep axis {other:?}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::KSft => "k_sft",
            Self::KPo => "k_po",
            Self::AlphaSft => "alpha_sft",
            Self::AlphaPo => "alpha_po",
            Self::Strategy => "strategy",
            Self::SourceCount => "source_count",
            Self::TargetSize => "target_size",
        }
    }

    /// The config with this axis set to `value`.
    pub fn apply(self, cfg: &ExperimentConfig, value: &str) -> Result<ExperimentConfig> {
        let bad = || Error::Config(format!("{}: bad value {value:?}", self.name()));
        let int = || value.parse::<usize>().map_err(|_| bad());
        let real = || value.parse::<f64>().map_err(|_| bad());
        let mut c = cfg.clone();
        match self {
            Self::KSft => c.weighting.k_sft = int()?,
            Self::KPo => c.weighting.k_po = int()?,
            Self::AlphaSft => c.weighting.alpha_sft = real()?,
            Self::AlphaPo => c.weighting.alpha_po = real()?,
            Self::Strategy => {
                c.weighting.strategy = match value {
                    "topk_pooled" => SelectionStrategy::TopkPooled,
                    "top1_per_source" => SelectionStrategy::Top1PerSource,
                    _ => return Err(bad()),
                }
            }
            Self::SourceCount => {
                let n = int()?;
                if n == 0 || n > c.sources.len() {
                    return Err(Error::Config(format!(
                        "source_count {n} outside 1..={}",
                        c.sources.len()
                    )));
                }
                c.sources.truncate(n);
            }
            Self::TargetSize => {
                c.target.hidden_dims = value
                    .split('x')
                    .map(|d| d.parse::<usize>().map_err(|_| bad()))
                    .collect::<Result<_>>()?;
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// One sweep row; `error` is set when that run failed.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
    /// Direction of mean reward over the successful rows, in value order.
    pub trend: String,
}

/// `non_decreasing`, `non_increasing`, `constant`, `mixed`, or `n/a` for
/// fewer than two points.
pub fn trend(values: &[f64]) -> String {
    if values.len() < 2 {
        return "n/a".into();
    }
    let up = values.windows(2).all(|w| w[1] >= w[0]);
    let down = values.windows(2).all(|w| w[1] <= w[0]);
    match (up, down) {
        (true, true) => "constant",
        (true, false) => "non_decreasing",
        (false, true) => "non_increasing",
        _ => "mixed",
    }
    .into()
}

const SWEEP_COLUMNS: [&str; 5] = ["mean_reward", "intra_rank", "cross_rank", "absolute_bias", "bias_variance"];

impl SweepTable {
    pub fn render(&self) -> String {
        let mut out = format!("{}\tstatus\t{}\n", self.axis.name(), SWEEP_COLUMNS.join("\t"));
        for row in &self.rows {
            let cells: Vec<String> = match &row.report {
                Some(r) => {
                    let pairs = EvalReport::parse_pairs(&r.render());
                    SWEEP_COLUMNS
                        .iter()
                        .map(|c| {
                            pairs
                                .iter()
                                .find(|(k, _)| k == c)
                                .map(|(_, v)| v.clone())
                                .unwrap_or_else(|| "-".into())
                        })
                        .collect()
                }
                None => vec!["-".into(); SWEEP_COLUMNS.len()],
            };
            let status = match &row.error {
                None => "ok".to_string(),
                Some(e) => format!("error: {}", e.replace(['\t', '\n'], " ")),
            };
            let _ = writeln!(out, "{}\t{status}\t{}", row.value, cells.join("\t"));
        }
        let _ = writeln!(out, "# trend mean_reward = {}", self.trend);
        out
    }
}

/// Runs the full pipeline once per value, each in its own subdirectory, and
/// writes the table to `out` (default `sweep.<axis>.tsv`).
pub fn cmd_sweep(cfg: &ExperimentConfig, axis: SweepAxis, values: &[String], out: Option<&Path>) -> Result<(SweepTable, PathBuf)> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let root = cfg.output_dir.clone();
    let rows: Vec<SweepRow> = values
        .par_iter()
        .map(|v| {
            let run = axis.apply(cfg, v).and_then(|mut c| {
                c.output_dir = root.join("sweep").join(format!("{}={v}", axis.name()));
                cmd_run(&c)
            });
            match run {
                Ok(r) => SweepRow {
                    value: v.clone(),
                    report: Some(r),
                    error: None,
                },
                Err(e) => SweepRow {
                    value: v.clone(),
                    report: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let means: Vec<f64> = rows
        .iter()
        .filter_map(|r| r.report.as_ref().and_then(|r| r.mean_reward))
        .collect();
    let table = SweepTable {
        axis,
        trend: trend(&means),
        rows,
    };
    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| root.join(format!("sweep.{}.tsv", axis.name())));
    write_file(&path, &table.render())?;
    Ok((table, path))
}
