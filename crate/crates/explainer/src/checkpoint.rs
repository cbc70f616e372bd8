//! Checkpoint directories: `params.bin` (named little-endian f64 arrays) and
//! `manifest.json` (architecture, hashes, provenance and metrics).

use std::path::Path;

use explainer_core::explainer::{ExplainerArch, ExplainerParams, NormStats};
use explainer_core::losses::{FilterAssignment, LossWeights, TemplateBank, TemplateConstants};
use explainer_core::optim::Parameters;
use explainer_core::performer::{PerformerArch, PerformerParams};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AppError, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const PARAMS_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
const MAGIC: &[u8; 8] = b"EXPLPRM1";

/// Ordered named arrays with a fixed binary layout: magic, array count,
/// then per array the name length, name bytes, element count and values.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamArchive {
    pub arrays: Vec<(String, Vec<f64>)>,
}

impl ParamArchive {
    pub fn from_params<P: Parameters>(params: &P) -> Self {
        Self { arrays: params.tensors().into_iter().map(|(n, t)| (n.to_string(), t.to_vec())).collect() }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, values) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> std::result::Result<&[u8], String> {
            let s = bytes.get(pos..pos + n).ok_or("truncated parameter file")?;
            pos += n;
            Ok(s)
        };
        if take(8)? != MAGIC {
            return Err("bad magic".into());
        }
        let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut arrays = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(len)?.to_vec()).map_err(|e| e.to_string())?;
            let n = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
            let raw = take(n.checked_mul(8).ok_or("array too large")?)?;
            let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            arrays.push((name, values));
        }
        if pos != bytes.len() {
            return Err("trailing bytes after parameter arrays".into());
        }
        Ok(Self { arrays })
    }

    /// Copies the archive into `params`, which must have identical names
    /// and lengths in the same order.
    pub fn fill<P: Parameters>(&self, params: &mut P) -> std::result::Result<(), String> {
        let mut targets = params.tensors_mut();
        if targets.len() != self.arrays.len() {
            return Err(format!("expected {} arrays, found {}", targets.len(), self.arrays.len()));
        }
        for ((name, dst), (src_name, src)) in targets.iter_mut().zip(&self.arrays) {
            if name != src_name || dst.len() != src.len() {
                return Err(format!("array '{src_name}' ({}) does not match '{name}' ({})", src.len(), dst.len()));
            }
            dst.copy_from_slice(src);
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn arch_hash<A: Serialize>(arch: &A) -> String {
    sha256_hex(serde_json::to_string(arch).expect("arch serialises").as_bytes())
}

/// Hash identifying a performer's exact parameters.
pub fn performer_hash(params: &PerformerParams) -> String {
    sha256_hex(&ParamArchive::from_params(params).encode())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Performer,
    Explainer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest<A> {
    pub version: u32,
    pub kind: CheckpointKind,
    pub arch: A,
    pub arch_hash: String,
    pub params_sha256: String,
    pub seed: u64,
    /// Normalised experiment configuration that produced the checkpoint.
    pub config: String,
    pub metrics: serde_json::Value,
    pub extra: serde_json::Value,
}

/// Explainer-only state stored next to the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainerExtra {
    pub performer_hash: String,
    pub templates: TemplateConstants,
    pub weights: LossWeights,
    pub assignment: FilterAssignment,
    pub norm_momentum: f64,
    pub norm_updates: u64,
    pub reconstruction_target: String,
}

fn write_dir<A: Serialize>(
    dir: &Path,
    kind: CheckpointKind,
    arch: &A,
    archive: &ParamArchive,
    seed: u64,
    config: &str,
    metrics: serde_json::Value,
    extra: serde_json::Value,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(AppError::io(dir))?;
    let bytes = archive.encode();
    let manifest = CheckpointManifest {
        version: FORMAT_VERSION,
        kind,
        arch,
        arch_hash: arch_hash(arch),
        params_sha256: sha256_hex(&bytes),
        seed,
        config: config.to_string(),
        metrics,
        extra,
    };
    let p = dir.join(PARAMS_FILE);
    std::fs::write(&p, &bytes).map_err(AppError::io(&p))?;
    let m = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| AppError::Failed(e.to_string()))?;
    std::fs::write(&m, text).map_err(AppError::io(&m))?;
    Ok(())
}

fn read_dir<A: Serialize + DeserializeOwned>(dir: &Path, kind: CheckpointKind) -> Result<(CheckpointManifest<A>, ParamArchive)> {
    let m = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&m).map_err(AppError::io(&m))?;
    let manifest: CheckpointManifest<A> =
        serde_json::from_str(&text).map_err(|e| AppError::Incompatible(format!("{}: {e}", m.display())))?;
    if manifest.version != FORMAT_VERSION {
        return Err(AppError::Incompatible(format!(
            "format version {} is not supported (expected {FORMAT_VERSION})",
            manifest.version
        )));
    }
    if manifest.kind != kind {
        return Err(AppError::Incompatible(format!("expected a {kind:?} checkpoint, found {:?}", manifest.kind)));
    }
    if arch_hash(&manifest.arch) != manifest.arch_hash {
        return Err(AppError::Incompatible("architecture hash does not match the recorded architecture".into()));
    }
    let p = dir.join(PARAMS_FILE);
    let bytes = std::fs::read(&p).map_err(AppError::io(&p))?;
    if sha256_hex(&bytes) != manifest.params_sha256 {
        return Err(AppError::Incompatible(format!("{} does not match its recorded hash", p.display())));
    }
    let archive = ParamArchive::decode(&bytes).map_err(|e| AppError::Incompatible(format!("{}: {e}", p.display())))?;
    Ok((manifest, archive))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerformerCheckpoint {
    pub params: PerformerParams,
    pub manifest: CheckpointManifest<PerformerArch>,
}

pub fn save_performer(
    dir: &Path,
    params: &PerformerParams,
    seed: u64,
    config: &str,
    metrics: serde_json::Value,
) -> Result<()> {
    let archive = ParamArchive::from_params(params);
    write_dir(dir, CheckpointKind::Performer, &params.arch, &archive, seed, config, metrics, serde_json::Value::Null)
}

/// Loads a performer checkpoint; with `expected` set, its architecture must
/// match.
pub fn load_performer(dir: &Path, expected: Option<&PerformerArch>) -> Result<PerformerCheckpoint> {
    let (manifest, archive) = read_dir::<PerformerArch>(dir, CheckpointKind::Performer)?;
    if let Some(arch) = expected {
        if arch != &manifest.arch {
            return Err(AppError::Incompatible(format!(
                "performer architecture {:?} does not match the configured {:?}",
                manifest.arch, arch
            )));
        }
    }
    let mut params = PerformerParams::zeros(&manifest.arch)?;
    archive.fill(&mut params).map_err(AppError::Incompatible)?;
    Ok(PerformerCheckpoint { params, manifest })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplainerCheckpoint {
    pub params: ExplainerParams,
    pub stats: NormStats,
    pub bank: TemplateBank,
    pub extra: ExplainerExtra,
    pub manifest: CheckpointManifest<ExplainerArch>,
}

const STATS_INTERP: &str = "norm.interp_rms";
const STATS_ORDIN: &str = "norm.ordin_rms";

#[allow(clippy::too_many_arguments)]
pub fn save_explainer(
    dir: &Path,
    params: &ExplainerParams,
    stats: &NormStats,
    extra: &ExplainerExtra,
    seed: u64,
    config: &str,
    metrics: serde_json::Value,
) -> Result<()> {
    let mut archive = ParamArchive::from_params(params);
    archive.arrays.push((STATS_INTERP.to_string(), stats.interp.clone()));
    archive.arrays.push((STATS_ORDIN.to_string(), stats.ordin.clone()));
    let extra = serde_json::to_value(extra).map_err(|e| AppError::Failed(e.to_string()))?;
    write_dir(dir, CheckpointKind::Explainer, &params.arch, &archive, seed, config, metrics, extra)
}

/// Loads an explainer checkpoint. With `performer` given, the checkpoint
/// must have been trained against exactly those parameters.
pub fn load_explainer(dir: &Path, performer: Option<&PerformerParams>) -> Result<ExplainerCheckpoint> {
    let (manifest, mut archive) = read_dir::<ExplainerArch>(dir, CheckpointKind::Explainer)?;
    let extra: ExplainerExtra = serde_json::from_value(manifest.extra.clone())
        .map_err(|e| AppError::Incompatible(format!("explainer metadata: {e}")))?;
    if let Some(p) = performer {
        if performer_hash(p) != extra.performer_hash {
            return Err(AppError::Incompatible(
                "explainer was trained against a different performer (hash mismatch)".into(),
            ));
        }
        if explainer_core::explainer::ExplainerArch::for_performer(&p.arch, manifest.arch.filters) != manifest.arch {
            return Err(AppError::Incompatible("explainer architecture does not fit the performer".into()));
        }
    }
    let ordin = archive.arrays.pop();
    let interp = archive.arrays.pop();
    let (interp, ordin) = match (interp, ordin) {
        (Some((a, i)), Some((b, o))) if a == STATS_INTERP && b == STATS_ORDIN => (i, o),
        _ => return Err(AppError::Incompatible("normalisation statistics are missing".into())),
    };
    let mut params = ExplainerParams::init(&manifest.arch, 0)?;
    archive.fill(&mut params).map_err(AppError::Incompatible)?;
    if interp.len() != manifest.arch.filters || ordin.len() != manifest.arch.filters {
        return Err(AppError::Incompatible("normalisation statistics have the wrong length".into()));
    }
    let stats = NormStats { interp, ordin, momentum: extra.norm_momentum, updates: extra.norm_updates };
    let bank = TemplateBank::from_constants(manifest.arch.size, &extra.templates)?;
    Ok(ExplainerCheckpoint { params, stats, bank, extra, manifest })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn archive_round_trip_is_bit_exact() {
        let a = ParamArchive {
            arrays: vec![
                ("w".into(), vec![1.5, -0.0, f64::MIN_POSITIVE, 1e300]),
                ("b".into(), vec![]),
            ],
        };
        assert_eq!(ParamArchive::decode(&a.encode()).unwrap(), a);
    }

    #[test]
    fn truncated_archive_is_rejected() {
        let a = ParamArchive { arrays: vec![("w".into(), vec![1.0, 2.0])] };
        let bytes = a.encode();
        assert!(ParamArchive::decode(&bytes[..bytes.len() - 1]).is_err());
    }
}
