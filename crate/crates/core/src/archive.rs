//! Self-describing binary archive for fitted models, ComBat models and
//! hyperprior packs.
//!
//! Layout: 8-byte magic, u32 LE format version, u64 LE header length, a JSON
//! header, then the posterior draws as raw little-endian f64 values in unit
//! order. Floats in the header go through `serde_json` with exact round-trip
//! parsing, so a reload is bit-identical.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::combat::CombatModel;
use crate::data::{BatchIndex, Standardizer};
use crate::inference::{ChainStats, Layout, PosteriorDraws, SamplerConfig};
use crate::models::{FittedNormativeModel, ModelSpec};
use crate::transfer::HyperpriorPack;

pub const MAGIC: &[u8; 8] = b"HBRNORM\x01";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not a model archive: {0}")]
    Format(String),
    #[error("archive holds a {found} but a {expected} was requested")]
    Kind {
        expected: &'static str,
        found: String,
    },
    #[error("archive header is invalid: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Serialize, Deserialize)]
struct UnitDraws {
    layout: Layout,
    n_chains: usize,
    n_draws: usize,
    chain_stats: Vec<ChainStats>,
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    spec: ModelSpec,
    batches: BatchIndex,
    batch_names: Vec<String>,
    covariate_names: Vec<String>,
    unit_names: Vec<String>,
    standardizer: Standardizer,
    sampler: SamplerConfig,
    draws: Vec<UnitDraws>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Header {
    Model(Box<ModelHeader>),
    Combat(Box<CombatModel>),
    Pack(Box<HyperpriorPack>),
}

impl Header {
    fn kind(&self) -> &'static str {
        match self {
            Header::Model(_) => "model",
            Header::Combat(_) => "combat",
            Header::Pack(_) => "pack",
        }
    }
}

fn encode(header: &Header, blob: &[f64]) -> Result<Vec<u8>, ArchiveError> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(20 + json.len() + 8 * blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in blob {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn decode(bytes: &[u8]) -> Result<(Header, Vec<f64>), ArchiveError> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(ArchiveError::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != ARCHIVE_VERSION {
        return Err(ArchiveError::Format(format!(
            "unsupported version {version}"
        )));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if body.len() < len || !(body.len() - len).is_multiple_of(8) {
        return Err(ArchiveError::Format("truncated archive".into()));
    }
    let header: Header = serde_json::from_slice(&body[..len])?;
    let blob = body[len..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, blob))
}

pub fn model_to_bytes(model: &FittedNormativeModel) -> Result<Vec<u8>, ArchiveError> {
    let draws = model
        .draws
        .iter()
        .map(|d| UnitDraws {
            layout: d.layout.clone(),
            n_chains: d.n_chains,
            n_draws: d.n_draws,
            chain_stats: d.chain_stats.clone(),
        })
        .collect();
    let header = Header::Model(Box::new(ModelHeader {
        spec: model.spec.clone(),
        batches: model.batches.clone(),
        batch_names: model.batch_names.clone(),
        covariate_names: model.covariate_names.clone(),
        unit_names: model.unit_names.clone(),
        standardizer: model.standardizer.clone(),
        sampler: model.sampler.clone(),
        draws,
    }));
    let blob: Vec<f64> = model
        .draws
        .iter()
        .flat_map(|d| d.values.iter().copied())
        .collect();
    encode(&header, &blob)
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<FittedNormativeModel, ArchiveError> {
    let (header, blob) = decode(bytes)?;
    let h = match header {
        Header::Model(h) => *h,
        other => {
            return Err(ArchiveError::Kind {
                expected: "model",
                found: other.kind().into(),
            })
        }
    };
    if h.draws.len() != h.unit_names.len() {
        return Err(ArchiveError::Format(
            "one posterior per unit is required".into(),
        ));
    }
    let mut offset = 0;
    let mut draws = Vec::with_capacity(h.draws.len());
    for u in h.draws {
        let len = u.n_chains * u.n_draws * u.layout.dim();
        let values = blob
            .get(offset..offset + len)
            .ok_or_else(|| {
                ArchiveError::Format("draw blob is shorter than the header declares".into())
            })?
            .to_vec();
        offset += len;
        draws.push(PosteriorDraws::new(
            u.layout,
            u.n_chains,
            u.n_draws,
            values,
            u.chain_stats,
        ));
    }
    if offset != blob.len() {
        return Err(ArchiveError::Format(
            "draw blob is longer than the header declares".into(),
        ));
    }
    Ok(FittedNormativeModel {
        spec: h.spec,
        batches: h.batches,
        batch_names: h.batch_names,
        covariate_names: h.covariate_names,
        unit_names: h.unit_names,
        standardizer: h.standardizer,
        sampler: h.sampler,
        draws,
    })
}

/// Write `bytes` to a sibling temp file, then rename it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ArchiveError> {
    let io = |source| ArchiveError::Io {
        path: path.display().to_string(),
        source,
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(io)
}

fn read(path: &Path) -> Result<Vec<u8>, ArchiveError> {
    fs::read(path).map_err(|source| ArchiveError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn save_model(model: &FittedNormativeModel, path: &Path) -> Result<(), ArchiveError> {
    write_atomic(path, &model_to_bytes(model)?)
}

pub fn load_model(path: &Path) -> Result<FittedNormativeModel, ArchiveError> {
    model_from_bytes(&read(path)?)
}

pub fn save_combat(model: &CombatModel, path: &Path) -> Result<(), ArchiveError> {
    write_atomic(
        path,
        &encode(&Header::Combat(Box::new(model.clone())), &[])?,
    )
}

pub fn load_combat(path: &Path) -> Result<CombatModel, ArchiveError> {
    match decode(&read(path)?)?.0 {
        Header::Combat(m) => Ok(*m),
        other => Err(ArchiveError::Kind {
            expected: "combat",
            found: other.kind().into(),
        }),
    }
}

/// Packs are written as plain pretty-printed JSON so they can be shipped and
/// inspected on their own.
pub fn save_pack(pack: &HyperpriorPack, path: &Path) -> Result<(), ArchiveError> {
    write_atomic(path, &serde_json::to_vec_pretty(pack)?)
}

/// Accepts a standalone JSON pack or a pack archive.
pub fn load_pack(path: &Path) -> Result<HyperpriorPack, ArchiveError> {
    let bytes = read(path)?;
    if bytes.starts_with(MAGIC) {
        return match decode(&bytes)?.0 {
            Header::Pack(p) => Ok(*p),
            other => Err(ArchiveError::Kind {
                expected: "pack",
                found: other.kind().into(),
            }),
        };
    }
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn pack_to_archive_bytes(pack: &HyperpriorPack) -> Result<Vec<u8>, ArchiveError> {
    encode(&Header::Pack(Box::new(pack.clone())), &[])
}
