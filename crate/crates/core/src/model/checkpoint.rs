//! On-disk checkpoints: a directory holding `manifest.json` and
//! `params.f32le` (flat little-endian `f32` in layout order).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{MicroTransformer, PolicyModel, TabularModel, TransformerConfig, Vocabulary};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const PARAMS: &str = "params.f32le";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Architecture {
    Tabular { vocab_size: usize, order: usize },
    MicroTransformer(TransformerConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub architecture: Architecture,
    pub vocabulary: Option<Vocabulary>,
    pub parameter_count: usize,
    pub creation_seed: u64,
    pub params_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: PolicyModel,
    pub vocabulary: Option<Vocabulary>,
    pub seed: u64,
}

fn architecture_of(model: &PolicyModel) -> Architecture {
    match model {
        PolicyModel::Tabular(m) => Architecture::Tabular {
            vocab_size: m.vocab_size,
            order: m.order,
        },
        PolicyModel::Transformer(m) => Architecture::MicroTransformer(m.config),
    }
}

fn encode_params(params: &[f64]) -> Vec<u8> {
    params
        .iter()
        .flat_map(|&p| (p as f32).to_le_bytes())
        .collect()
}

/// Writes `model` to `dir`. Parameters are narrowed to `f32`; call
/// [`PolicyModel::round_to_f32`] first when the in-memory model must match
/// what a later load returns.
pub fn save_checkpoint(
    dir: &Path,
    model: &PolicyModel,
    vocabulary: Option<Vocabulary>,
    seed: u64,
) -> Result<CheckpointManifest> {
    if let Some(i) = model.params().iter().position(|p| !p.is_finite()) {
        return Err(Error::Checkpoint(format!(
            "refusing to save non-finite parameter {i}"
        )));
    }
    fs::create_dir_all(dir)?;
    let bytes = encode_params(model.params());
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        architecture: architecture_of(model),
        vocabulary,
        parameter_count: model.num_params(),
        creation_seed: seed,
        params_sha256: hex::encode(Sha256::digest(&bytes)),
    };
    fs::write(dir.join(PARAMS), &bytes)?;
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest: CheckpointManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format version {} (this build reads version {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let bytes = fs::read(dir.join(PARAMS))?;
    if bytes.len() % 4 != 0 || bytes.len() / 4 != manifest.parameter_count {
        return Err(Error::Checkpoint(format!(
            "parameter file holds {} bytes; expected {} parameters ({} bytes), found {}",
            bytes.len(),
            manifest.parameter_count,
            manifest.parameter_count * 4,
            bytes.len() / 4
        )));
    }
    let digest = hex::encode(Sha256::digest(&bytes));
    if digest != manifest.params_sha256 {
        return Err(Error::Checkpoint(format!(
            "parameter hash mismatch: manifest {}, file {digest}",
            manifest.params_sha256
        )));
    }
    let params: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if let Some(i) = params.iter().position(|p| !p.is_finite()) {
        return Err(Error::Checkpoint(format!(
            "non-finite parameter at index {i}"
        )));
    }
    let model = match manifest.architecture {
        Architecture::Tabular { vocab_size, order } => {
            PolicyModel::Tabular(TabularModel::from_params(vocab_size, order, params)?)
        }
        Architecture::MicroTransformer(cfg) => {
            PolicyModel::Transformer(MicroTransformer::from_params(cfg, params)?)
        }
    };
    if model.num_params() != manifest.parameter_count {
        return Err(Error::Checkpoint(format!(
            "architecture implies {} parameters but manifest declares {}",
            model.num_params(),
            manifest.parameter_count
        )));
    }
    if let Some(v) = manifest.vocabulary {
        if v.size != model.vocab_size() {
            return Err(Error::Checkpoint(format!(
                "vocabulary size {} disagrees with model vocabulary {}",
                v.size,
                model.vocab_size()
            )));
        }
    }
    Ok(Checkpoint {
        model,
        vocabulary: manifest.vocabulary,
        seed: manifest.creation_seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probe_model() -> PolicyModel {
        let cfg = TransformerConfig {
            vocab_size: 9,
            context: 16,
            width: 16,
            heads: 2,
            layers: 2,
        };
        PolicyModel::Transformer(MicroTransformer::init(cfg, 77).unwrap())
    }

    #[test]
    fn round_trip_preserves_logits_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let model = probe_model();
        let vocab = Vocabulary::new(9, 1, 2, 0).unwrap();
        save_checkpoint(dir.path(), &model, Some(vocab), 77).unwrap();
        let loaded = load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded.vocabulary, Some(vocab));
        assert_eq!(loaded.seed, 77);
        let probe = [1u32, 4, 8, 3, 3, 0, 5];
        let a = model.forward_logits(&probe).unwrap();
        let b = loaded.model.forward_logits(&probe).unwrap();
        assert!(a
            .data
            .iter()
            .zip(&b.data)
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn truncated_parameter_file_names_counts() {
        let dir = tempfile::tempdir().unwrap();
        let model = probe_model();
        save_checkpoint(dir.path(), &model, None, 0).unwrap();
        let path = dir.path().join(PARAMS);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 40]).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err().to_string();
        assert!(
            err.contains(&format!("expected {} parameters", model.num_params())),
            "{err}"
        );
        assert!(
            err.contains(&format!("found {}", model.num_params() - 10)),
            "{err}"
        );
    }

    #[test]
    fn corrupted_parameters_fail_hash_check() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &probe_model(), None, 0).unwrap();
        let path = dir.path().join(PARAMS);
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] ^= 0x01;
        fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(dir.path())
            .unwrap_err()
            .to_string()
            .contains("hash mismatch"));
    }

    #[test]
    fn unknown_format_version_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &probe_model(), None, 0).unwrap();
        let path = dir.path().join(MANIFEST);
        let mut manifest: serde_json::Value =
            serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
        manifest["format_version"] = serde_json::json!(FORMAT_VERSION + 1);
        fs::write(&path, manifest.to_string()).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err().to_string();
        assert!(
            err.contains("unsupported checkpoint format version"),
            "{err}"
        );
    }

    #[test]
    fn tabular_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = TabularModel::zeros(4, 2).unwrap();
        t.params
            .iter_mut()
            .enumerate()
            .for_each(|(i, p)| *p = (i as f64 * 0.37).sin());
        let mut model = PolicyModel::Tabular(t);
        model.round_to_f32();
        save_checkpoint(dir.path(), &model, None, 3).unwrap();
        assert_eq!(load_checkpoint(dir.path()).unwrap().model, model);
    }
}
