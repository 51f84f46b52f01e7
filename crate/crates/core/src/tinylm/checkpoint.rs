//! Text checkpoint: a `key value` header followed by one hex-encoded IEEE-754
//! word per parameter.
//!
//! ```text
//! fusionlab-checkpoint 1
//! vocab_size 32
//! context_width 8
//! embed_dim 16
//! hidden_dims 32
//! init_seed 0
//! init_scale 3fb47ae147ae147b
//! param_count 5728
//! digest 9f86d0...        (or "-" when absent)
//! params
//! 3f8a3b...
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::hexfloat;

use super::{ArchConfig, PolicyModel};

pub const CHECKPOINT_MAGIC: &str = "fusionlab-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A parsed checkpoint plus the config digest it was stamped with.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: PolicyModel,
    pub digest: Option<String>,
}

pub fn render_checkpoint(model: &PolicyModel, digest: Option<&str>) -> String {
    let a = model.arch();
    let hidden = a
        .hidden_dims
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join(",");
    let mut out = String::with_capacity(32 * (model.params().len() + 12));
    out.push_str(&format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n"));
    out.push_str(&format!("vocab_size {}\n", a.vocab_size));
    out.push_str(&format!("context_width {}\n", a.context_width));
    out.push_str(&format!("embed_dim {}\n", a.embed_dim));
    out.push_str(&format!("hidden_dims {}\n", if hidden.is_empty() { "-" } else { &hidden }));
    out.push_str(&format!("init_seed {}\n", a.init_seed));
    out.push_str(&format!("init_scale {}\n", hexfloat::encode(a.init_scale)));
    out.push_str(&format!("param_count {}\n", model.params().len()));
    out.push_str(&format!("digest {}\n", digest.unwrap_or("-")));
    out.push_str("params\n");
    for p in model.params() {
        out.push_str(&hexfloat::encode(*p));
        out.push('\n');
    }
    out
}

pub fn parse_checkpoint(text: &str) -> Result<Checkpoint> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut next = |want: &str| -> Result<(usize, String)> {
        let (n, line) = lines.next().ok_or_else(|| Error::Parse {
            line: 0,
            detail: format!("unexpected end of file, expected {want}"),
        })?;
        Ok((n, line.to_string()))
    };

    let (_, header) = next("header")?;
    if header != format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}") {
        return Err(Error::Header(format!("unsupported checkpoint header {header:?}")));
    }
    let mut field = |key: &str| -> Result<(usize, String)> {
        let (n, line) = next(key)?;
        match line.split_once(' ') {
            Some((k, v)) if k == key => Ok((n, v.to_string())),
            _ => Err(Error::Parse {
                line: n,
                detail: format!("expected field {key:?}"),
            }),
        }
    };
    fn int<T: std::str::FromStr>(n: usize, key: &str, v: &str) -> Result<T> {
        v.parse().map_err(|_| Error::Parse {
            line: n,
            detail: format!("{key} is not an unsigned integer: {v:?}"),
        })
    }

    let (n, v) = field("vocab_size")?;
    let vocab_size = int(n, "vocab_size", &v)?;
    let (n, v) = field("context_width")?;
    let context_width = int(n, "context_width", &v)?;
    let (n, v) = field("embed_dim")?;
    let embed_dim = int(n, "embed_dim", &v)?;
    let (n, v) = field("hidden_dims")?;
    let hidden_dims = if v == "-" {
        Vec::new()
    } else {
        v.split(',')
            .map(|d| int(n, "hidden_dims", d))
            .collect::<Result<Vec<usize>>>()?
    };
    let (n, v) = field("init_seed")?;
    let init_seed = int(n, "init_seed", &v)?;
    let (n, v) = field("init_scale")?;
    let init_scale = hexfloat::decode(&v).ok_or_else(|| Error::Parse {
        line: n,
        detail: format!("init_scale is not a hex word: {v:?}"),
    })?;
    let (n, v) = field("param_count")?;
    let count: usize = int(n, "param_count", &v)?;
    let (_, v) = field("digest")?;
    let digest = (v != "-").then_some(v);
    let (n, marker) = next("params")?;
    if marker != "params" {
        return Err(Error::Parse {
            line: n,
            detail: "expected \"params\" marker".into(),
        });
    }

    let arch = ArchConfig {
        vocab_size,
        context_width,
        hidden_dims,
        embed_dim,
        init_seed,
        init_scale,
    };
    arch.validate().map_err(|e| Error::Parse {
        line: 0,
        detail: format!("invalid architecture: {e}"),
    })?;
    if arch.checked_param_count() != Some(count) {
        return Err(Error::Parse {
            line: 0,
            detail: format!("param_count {count} does not match the architecture"),
        });
    }
    // each word takes 17 bytes, so this bounds the allocation by the input size
    if count > text.len() / 17 + 1 {
        return Err(Error::Parse {
            line: 0,
            detail: format!("file too short for {count} parameters"),
        });
    }
    let mut params = Vec::with_capacity(count);
    for (n, line) in lines {
        let p = hexfloat::decode(line).ok_or_else(|| Error::Parse {
            line: n,
            detail: format!("malformed hex word {line:?}"),
        })?;
        params.push(p);
    }
    if params.len() != count {
        return Err(Error::Parse {
            line: 0,
            detail: format!("expected {count} parameters, found {}", params.len()),
        });
    }
    let model = PolicyModel::from_params(arch, params).map_err(|e| Error::Parse {
        line: 0,
        detail: e.to_string(),
    })?;
    Ok(Checkpoint { model, digest })
}

pub fn save_checkpoint(path: &Path, model: &PolicyModel, digest: Option<&str>) -> Result<()> {
    std::fs::write(path, render_checkpoint(model, digest)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&text)
}
