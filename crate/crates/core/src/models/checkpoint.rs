//! `.ckpt` persistence: a text header followed by a little-endian f64 payload.
//!
//! ```text
//! scorecomp-checkpoint
//! format_version=1
//! parameterisation=score
//! schedule=cosine(T=100,s=0.008)
//! seed=17
//! arch.hidden=128
//! ...
//! array=input.weight shape=2x128 offset=0
//! ...
//! payload_bytes=1234
//! end_header
//! <payload>
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{ArchConfig, DiffusionModel, ParamSet, Parameterisation};
use crate::adgraph::RealArray;
use crate::diffusion::NoiseSchedule;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "scorecomp-checkpoint";
const END: &str = "end_header";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed header line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unsupported format_version {0} (expected {CHECKPOINT_VERSION})")]
    Version(u32),
    #[error("missing parameter array `{0}`")]
    MissingArray(String),
    #[error("unexpected parameter array `{0}`")]
    UnexpectedArray(String),
    #[error("parameter array `{name}` has shape {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        found: [usize; 2],
        expected: [usize; 2],
    },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("invalid checkpoint: {0}")]
    Invalid(String),
}

type Result<T> = std::result::Result<T, CheckpointError>;

/// Writes `model` to `path` atomically (temporary file plus rename).
pub fn save_checkpoint(model: &DiffusionModel, path: &Path) -> Result<()> {
    let bytes = encode(model);
    let io_err = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    let tmp = path.with_extension("ckpt.tmp");
    let mut f = fs::File::create(&tmp).map_err(io_err)?;
    f.write_all(&bytes).map_err(io_err)?;
    f.sync_all().map_err(io_err)?;
    drop(f);
    fs::rename(&tmp, path).map_err(io_err)
}

pub fn load_checkpoint(path: &Path) -> Result<DiffusionModel> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}

pub(crate) fn encode(model: &DiffusionModel) -> Vec<u8> {
    let arch = &model.arch;
    let schedule_id = format!("cosine(T={},s=0.008)", arch.timesteps);
    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    header.push_str(&format!("format_version={CHECKPOINT_VERSION}\n"));
    header.push_str(&format!("parameterisation={}\n", model.parameterisation));
    header.push_str(&format!("schedule={schedule_id}\n"));
    header.push_str(&format!("seed={}\n", model.seed));
    header.push_str(&format!("arch.input_dim={}\n", arch.input_dim));
    header.push_str(&format!("arch.hidden={}\n", arch.hidden));
    header.push_str(&format!("arch.inner={}\n", arch.inner));
    header.push_str(&format!("arch.blocks={}\n", arch.blocks));
    header.push_str(&format!("arch.time_dim={}\n", arch.time_dim));
    header.push_str(&format!("arch.timesteps={}\n", arch.timesteps));
    header.push_str(&format!("arch.time_bias={}\n", arch.time_bias));
    header.push_str(&format!("arch.norm_eps={:e}\n", arch.norm_eps));
    let mut payload = Vec::new();
    for (name, arr) in model.params.iter() {
        header.push_str(&format!(
            "array={} shape={}x{} offset={}\n",
            name,
            arr.rows(),
            arr.cols(),
            payload.len()
        ));
        for v in arr.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    header.push_str(&format!("payload_bytes={}\n", payload.len()));
    header.push_str(END);
    header.push('\n');
    let mut out = header.into_bytes();
    out.extend_from_slice(&payload);
    out
}

struct ArrayEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
    line: usize,
}

pub(crate) fn decode(bytes: &[u8]) -> Result<DiffusionModel> {
    let marker = format!("\n{END}\n");
    let header_end = bytes
        .windows(marker.len())
        .position(|w| w == marker.as_bytes())
        .ok_or(CheckpointError::Parse {
            line: 0,
            msg: format!("no `{END}` line found"),
        })?;
    let header = std::str::from_utf8(&bytes[..header_end]).map_err(|e| CheckpointError::Parse {
        line: 0,
        msg: format!("header is not UTF-8: {e}"),
    })?;
    let payload = &bytes[header_end + marker.len()..];

    let mut lines = header.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, MAGIC)) => {}
        _ => {
            return Err(CheckpointError::Parse {
                line: 1,
                msg: format!("expected `{MAGIC}`"),
            })
        }
    }

    let mut version = None;
    let mut parameterisation = None;
    let mut seed = None;
    let mut schedule = None;
    let mut payload_bytes = None;
    let mut arch = ArchConfig::default();
    let mut arrays: Vec<ArrayEntry> = Vec::new();

    for (line, text) in lines {
        let perr = |msg: String| CheckpointError::Parse { line, msg };
        if let Some(rest) = text.strip_prefix("array=") {
            arrays.push(parse_array(rest).map_err(perr)?);
            arrays.last_mut().unwrap().line = line;
            continue;
        }
        let (key, value) = text
            .split_once('=')
            .ok_or_else(|| perr(format!("expected key=value, got `{text}`")))?;
        let num = |v: &str| -> std::result::Result<usize, CheckpointError> {
            v.parse()
                .map_err(|_| perr(format!("`{key}` is not an integer: `{v}`")))
        };
        match key {
            "format_version" => {
                version = Some(
                    value
                        .parse::<u32>()
                        .map_err(|_| perr(format!("bad format_version `{value}`")))?,
                )
            }
            "parameterisation" => {
                parameterisation = Some(
                    value
                        .parse::<Parameterisation>()
                        .map_err(|e| perr(e.to_string()))?,
                )
            }
            "schedule" => schedule = Some(value.to_string()),
            "seed" => {
                seed = Some(
                    value
                        .parse::<u64>()
                        .map_err(|_| perr(format!("bad seed `{value}`")))?,
                )
            }
            "payload_bytes" => payload_bytes = Some(num(value)?),
            "arch.input_dim" => arch.input_dim = num(value)?,
            "arch.hidden" => arch.hidden = num(value)?,
            "arch.inner" => arch.inner = num(value)?,
            "arch.blocks" => arch.blocks = num(value)?,
            "arch.time_dim" => arch.time_dim = num(value)?,
            "arch.timesteps" => arch.timesteps = num(value)?,
            "arch.time_bias" => {
                arch.time_bias = value
                    .parse()
                    .map_err(|_| perr(format!("bad bool `{value}`")))?
            }
            "arch.norm_eps" => {
                arch.norm_eps = value
                    .parse()
                    .map_err(|_| perr(format!("bad float `{value}`")))?
            }
            other => return Err(perr(format!("unknown key `{other}`"))),
        }
    }

    let version =
        version.ok_or_else(|| CheckpointError::Invalid("missing format_version".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let parameterisation = parameterisation
        .ok_or_else(|| CheckpointError::Invalid("missing parameterisation".into()))?;
    let seed = seed.ok_or_else(|| CheckpointError::Invalid("missing seed".into()))?;
    let schedule = schedule.ok_or_else(|| CheckpointError::Invalid("missing schedule".into()))?;
    arch.validate()
        .map_err(|e| CheckpointError::Invalid(e.to_string()))?;
    let expected_schedule = NoiseSchedule::cosine(arch.timesteps)
        .map_err(|e| CheckpointError::Invalid(e.to_string()))?
        .identifier();
    if schedule != expected_schedule {
        return Err(CheckpointError::Invalid(format!(
            "schedule `{schedule}` does not match `{expected_schedule}`"
        )));
    }
    let payload_bytes =
        payload_bytes.ok_or_else(|| CheckpointError::Invalid("missing payload_bytes".into()))?;
    if payload.len() < payload_bytes {
        return Err(CheckpointError::Truncated {
            expected: payload_bytes,
            found: payload.len(),
        });
    }
    if payload.len() > payload_bytes {
        return Err(CheckpointError::Invalid(format!(
            "{} trailing bytes after payload",
            payload.len() - payload_bytes
        )));
    }

    let layout = arch.layout();
    let mut named = Vec::with_capacity(layout.len());
    for (name, expected) in &layout {
        let pos = arrays
            .iter()
            .position(|a| &a.name == name)
            .ok_or_else(|| CheckpointError::MissingArray(name.clone()))?;
        let entry = arrays.swap_remove(pos);
        if entry.shape != *expected {
            return Err(CheckpointError::Shape {
                name: entry.name,
                found: entry.shape,
                expected: *expected,
            });
        }
        let len = expected[0] * expected[1] * 8;
        let end = entry
            .offset
            .checked_add(len)
            .filter(|&e| e <= payload.len())
            .ok_or(CheckpointError::Parse {
                line: entry.line,
                msg: format!("array `{}` runs past the payload", entry.name),
            })?;
        let data = payload[entry.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let arr = RealArray::matrix(expected[0], expected[1], data)
            .map_err(|e| CheckpointError::Invalid(e.to_string()))?;
        named.push((name.clone(), arr));
    }
    if let Some(extra) = arrays.first() {
        return Err(CheckpointError::UnexpectedArray(extra.name.clone()));
    }
    let params =
        ParamSet::from_named(&arch, named).map_err(|e| CheckpointError::Invalid(e.to_string()))?;
    Ok(DiffusionModel {
        arch,
        params,
        parameterisation,
        seed,
    })
}

fn parse_array(rest: &str) -> std::result::Result<ArrayEntry, String> {
    let mut parts = rest.split(' ');
    let name = parts
        .next()
        .filter(|n| !n.is_empty())
        .ok_or("missing array name")?;
    let mut shape = None;
    let mut offset = None;
    for part in parts {
        if let Some(s) = part.strip_prefix("shape=") {
            let (r, c) = s.split_once('x').ok_or(format!("bad shape `{s}`"))?;
            let r = r.parse().map_err(|_| format!("bad shape `{s}`"))?;
            let c = c.parse().map_err(|_| format!("bad shape `{s}`"))?;
            shape = Some([r, c]);
        } else if let Some(o) = part.strip_prefix("offset=") {
            offset = Some(o.parse().map_err(|_| format!("bad offset `{o}`"))?);
        } else {
            return Err(format!("unexpected field `{part}`"));
        }
    }
    Ok(ArrayEntry {
        name: name.to_string(),
        shape: shape.ok_or("missing shape")?,
        offset: offset.ok_or("missing offset")?,
        line: 0,
    })
}
