//! Line-delimited dataset files: one header line, then one fusion sample per
//! line. Rewards and weights are stored as hexadecimal IEEE-754 words so a
//! load after save reproduces every bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hexfloat;
use crate::types::{FusionSample, Prompt, Response, RewardedResponse, SourceEntry, SplitTag, Token, WeightedUnit};

pub const DATASET_FORMAT: &str = "fusionlab-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    /// Which split the file holds: `sft`, `po` or `eval`.
    pub split: String,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ResponseRecord {
    tokens: Vec<Token>,
    reward: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SourceRecord {
    source_id: String,
    responses: Vec<ResponseRecord>,
    best_index: usize,
    weight: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UnitRecord {
    source_index: usize,
    sample_index: usize,
    weight: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    prompt_id: String,
    text: Vec<Token>,
    split_tag: SplitTag,
    per_source: Vec<SourceRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    selected: Vec<UnitRecord>,
}

fn hex_field(s: &str, what: &str) -> std::result::Result<f64, String> {
    hexfloat::decode(s).ok_or_else(|| format!("{what}: malformed hex word {s:?}"))
}

impl SampleRecord {
    fn from_sample(s: &FusionSample) -> Self {
        SampleRecord {
            prompt_id: s.prompt.id.clone(),
            text: s.prompt.text.clone(),
            split_tag: s.split_tag,
            per_source: s
                .per_source
                .iter()
                .map(|e| SourceRecord {
                    source_id: e.source_id.clone(),
                    responses: e
                        .responses
                        .iter()
                        .map(|r| ResponseRecord {
                            tokens: r.response.tokens.clone(),
                            reward: hexfloat::encode(r.reward),
                        })
                        .collect(),
                    best_index: e.best_index,
                    weight: hexfloat::encode(e.weight),
                })
                .collect(),
            selected: s
                .selected
                .iter()
                .map(|u| UnitRecord {
                    source_index: u.source_index,
                    sample_index: u.sample_index,
                    weight: hexfloat::encode(u.weight),
                })
                .collect(),
        }
    }

    fn into_sample(self) -> std::result::Result<FusionSample, String> {
        let mut per_source = Vec::with_capacity(self.per_source.len());
        for src in self.per_source {
            let mut responses = Vec::with_capacity(src.responses.len());
            for (j, r) in src.responses.into_iter().enumerate() {
                let reward = hex_field(&r.reward, "reward")?;
                responses.push(RewardedResponse::new(
                    Response {
                        tokens: r.tokens,
                        source_id: src.source_id.clone(),
                        sample_index: j,
                    },
                    reward,
                ));
            }
            per_source.push(SourceEntry {
                weight: hex_field(&src.weight, "weight")?,
                source_id: src.source_id,
                responses,
                best_index: src.best_index,
            });
        }
        let selected = self
            .selected
            .into_iter()
            .map(|u| {
                Ok(WeightedUnit {
                    source_index: u.source_index,
                    sample_index: u.sample_index,
                    weight: hex_field(&u.weight, "selected weight")?,
                })
            })
            .collect::<std::result::Result<_, String>>()?;
        Ok(FusionSample {
            prompt: Prompt::new(self.prompt_id, self.text),
            per_source,
            split_tag: self.split_tag,
            selected,
        })
    }
}

/// One sample as a single JSON line, without the trailing newline.
pub fn render_record(sample: &FusionSample) -> String {
    serde_json::to_string(&SampleRecord::from_sample(sample)).expect("record serializes")
}

/// Parses one record line. `line` is the 1-based line number for errors.
/// Indices are checked against the stored lists so the result can be
/// indexed without panicking; the full sample invariants are left to
/// [`crate::types::validate_sample`].
pub fn parse_record(text: &str, line: usize) -> Result<FusionSample> {
    let parse = |detail: String| Error::Parse { line, detail };
    let rec: SampleRecord = serde_json::from_str(text).map_err(|e| parse(e.to_string()))?;
    let sample = rec.into_sample().map_err(parse)?;
    for e in &sample.per_source {
        if e.best_index >= e.responses.len() {
            return Err(parse(format!("best_index {} out of range", e.best_index)));
        }
    }
    for u in &sample.selected {
        let ok = sample
            .per_source
            .get(u.source_index)
            .is_some_and(|e| u.sample_index < e.responses.len());
        if !ok {
            return Err(parse(format!(
                "selected unit ({}, {}) out of range",
                u.source_index, u.sample_index
            )));
        }
    }
    Ok(sample)
}

pub fn render_dataset(header: &DatasetHeader, samples: &[FusionSample]) -> String {
    let mut out = serde_json::to_string(header).expect("header serializes");
    out.push('\n');
    for s in samples {
        out.push_str(&render_record(s));
        out.push('\n');
    }
    out
}

pub fn parse_dataset(text: &str) -> Result<(DatasetHeader, Vec<FusionSample>)> {
    let mut lines = text.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Header("empty dataset file".into()))?;
    let header: DatasetHeader =
        serde_json::from_str(first).map_err(|e| Error::Header(format!("unreadable header: {e}")))?;
    if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
        return Err(Error::Header(format!(
            "expected {DATASET_FORMAT} version {DATASET_VERSION}, found {} version {}",
            header.format, header.version
        )));
    }
    let samples = lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_record(l, i + 2))
        .collect::<Result<_>>()?;
    Ok((header, samples))
}

pub fn save_dataset(path: &Path, header: &DatasetHeader, samples: &[FusionSample]) -> Result<()> {
    std::fs::write(path, render_dataset(header, samples)).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<(DatasetHeader, Vec<FusionSample>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::validate_sample;
    use crate::weighting::{build_fusion_sample, WeightingConfig};

    fn sample(tag: SplitTag) -> FusionSample {
        let prompt = Prompt::new("p7", vec![3, 1, 4]);
        let sources = (0..3)
            .map(|s| {
                let rs = (0..4)
                    .map(|j| {
                        RewardedResponse::new(
                            Response {
                                tokens: vec![(s + j) as Token + 1, 0],
                                source_id: format!("m{s}"),
                                sample_index: j,
                            },
                            0.1 * (s * 4 + j) as f64 / 3.0,
                        )
                    })
                    .collect();
                (format!("m{s}"), rs)
            })
            .collect();
        build_fusion_sample(&prompt, sources, &WeightingConfig::default(), tag).unwrap()
    }

    fn header() -> DatasetHeader {
        DatasetHeader {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            split: "sft".into(),
            digest: "abc".into(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let samples = vec![sample(SplitTag::Sft), sample(SplitTag::Po)];
        let text = render_dataset(&header(), &samples);
        let (h, back) = parse_dataset(&text).unwrap();
        assert_eq!(h, header());
        assert_eq!(back, samples);
        for (a, b) in back.iter().zip(&samples) {
            for (x, y) in a.per_source.iter().zip(&b.per_source) {
                assert_eq!(x.weight.to_bits(), y.weight.to_bits());
            }
            assert!(validate_sample(a).is_empty());
        }
        assert_eq!(render_dataset(&h, &back), text);
    }

    #[test]
    fn corrupted_hex_names_line() {
        let samples = vec![sample(SplitTag::Po), sample(SplitTag::Po)];
        let text = render_dataset(&header(), &samples);
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let word = hexfloat::encode(samples[1].per_source[0].weight);
        lines[2] = lines[2].replacen(&word, "3ff80000000000zz", 1);
        let err = parse_dataset(&lines.join("\n")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn header_mismatch() {
        let mut h = header();
        h.version = 9;
        let text = render_dataset(&h, &[]);
        assert!(matches!(parse_dataset(&text), Err(Error::Header(_))));
        assert!(matches!(parse_dataset(""), Err(Error::Header(_))));
        assert!(matches!(parse_dataset("not json\n"), Err(Error::Header(_))));
    }

    #[test]
    fn out_of_range_indices_rejected() {
        let s = sample(SplitTag::Sft);
        let line = render_record(&s).replace("\"best_index\":3", "\"best_index\":99");
        assert!(matches!(parse_record(&line, 5), Err(Error::Parse { line: 5, .. })));
        let line = render_record(&s).replace("\"source_index\":2", "\"source_index\":40");
        assert!(parse_record(&line, 1).is_err());
    }
}
