//! JSON checkpoints for the base tokenizer and the adaptive model.
//!
//! Every file records the digest of the architecture config it was written
//! with; loading against a different config fails with
//! [`KarlError::DigestMismatch`] instead of silently mis-shaping weights.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::base::BaseTokenizer;
use crate::config::{digest_of, BaseConfig, ModelConfig};
use crate::error::{KarlError, Result};
use crate::model::KarlModel;
use crate::params::ParamStore;

pub const FORMAT: &str = "karl-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Base,
    Model,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct StoredArray {
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Envelope {
    format: String,
    version: u32,
    kind: Kind,
    config_digest: String,
    base: BaseConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    model: Option<ModelConfig>,
    arrays: BTreeMap<String, StoredArray>,
}

fn pack(store: &ParamStore) -> BTreeMap<String, StoredArray> {
    store
        .to_named()
        .into_iter()
        .map(|(k, v)| {
            let shape = [v.nrows(), v.ncols()];
            (
                k,
                StoredArray {
                    shape,
                    data: v.iter().copied().collect(),
                },
            )
        })
        .collect()
}

fn unpack(arrays: BTreeMap<String, StoredArray>) -> Result<BTreeMap<String, Array2<f64>>> {
    arrays
        .into_iter()
        .map(|(k, a)| {
            let arr = Array2::from_shape_vec((a.shape[0], a.shape[1]), a.data)
                .map_err(|e| KarlError::Checkpoint(format!("array {k}: {e}")))?;
            Ok((k, arr))
        })
        .collect()
}

fn write(path: &Path, env: &Envelope) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| KarlError::io(dir, e))?;
    }
    let json = serde_json::to_string(env)?;
    fs::write(path, json).map_err(|e| KarlError::io(path, e))
}

fn read(path: &Path, kind: Kind) -> Result<Envelope> {
    let text = fs::read_to_string(path).map_err(|e| KarlError::io(path, e))?;
    let env: Envelope =
        serde_json::from_str(&text).map_err(|e| KarlError::Checkpoint(format!("{}: {e}", path.display())))?;
    if env.format != FORMAT {
        return Err(KarlError::Checkpoint(format!("{}: not a checkpoint", path.display())));
    }
    if env.version != VERSION {
        return Err(KarlError::Checkpoint(format!(
            "{}: unsupported version {} (expected {VERSION})",
            path.display(),
            env.version
        )));
    }
    if env.kind != kind {
        return Err(KarlError::Checkpoint(format!(
            "{}: expected a {kind:?} checkpoint, found {:?}",
            path.display(),
            env.kind
        )));
    }
    Ok(env)
}

fn check_digest(expected: Option<&str>, found: &str) -> Result<()> {
    match expected {
        Some(e) if e != found => Err(KarlError::DigestMismatch {
            expected: e.to_string(),
            found: found.to_string(),
        }),
        _ => Ok(()),
    }
}

/// Digest stored with base checkpoints.
pub fn base_digest(base: &BaseConfig) -> String {
    base.digest()
}

/// Digest stored with model checkpoints; covers both architectures.
pub fn model_digest(model: &ModelConfig, base: &BaseConfig) -> String {
    digest_of(&(base, model))
}

pub fn save_base(path: impl AsRef<Path>, base: &BaseTokenizer) -> Result<()> {
    write(
        path.as_ref(),
        &Envelope {
            format: FORMAT.into(),
            version: VERSION,
            kind: Kind::Base,
            config_digest: base_digest(&base.config),
            base: base.config.clone(),
            model: None,
            arrays: pack(&base.store),
        },
    )
}

/// Loads a base tokenizer. With `expected_digest`, refuses checkpoints
/// written for another configuration.
pub fn load_base(path: impl AsRef<Path>, expected_digest: Option<&str>) -> Result<BaseTokenizer> {
    let env = read(path.as_ref(), Kind::Base)?;
    check_digest(expected_digest, &env.config_digest)?;
    if base_digest(&env.base) != env.config_digest {
        return Err(KarlError::Checkpoint("stored config does not match its digest".into()));
    }
    let mut base = BaseTokenizer::new(env.base, 0)?;
    base.store.load_named(&unpack(env.arrays)?)?;
    Ok(base)
}

pub fn save_model(path: impl AsRef<Path>, model: &KarlModel) -> Result<()> {
    write(
        path.as_ref(),
        &Envelope {
            format: FORMAT.into(),
            version: VERSION,
            kind: Kind::Model,
            config_digest: model_digest(&model.config, &model.base),
            base: model.base.clone(),
            model: Some(model.config.clone()),
            arrays: pack(&model.store),
        },
    )
}

pub fn load_model(path: impl AsRef<Path>, expected_digest: Option<&str>) -> Result<KarlModel> {
    let env = read(path.as_ref(), Kind::Model)?;
    check_digest(expected_digest, &env.config_digest)?;
    let cfg = env
        .model
        .ok_or_else(|| KarlError::Checkpoint("model checkpoint without model config".into()))?;
    if model_digest(&cfg, &env.base) != env.config_digest {
        return Err(KarlError::Checkpoint("stored config does not match its digest".into()));
    }
    let mut model = KarlModel::new(cfg, env.base, 0)?;
    model.store.load_named(&unpack(env.arrays)?)?;
    Ok(model)
}

/// Fails unless `model` was built on top of `base`'s architecture.
pub fn check_pair(model: &KarlModel, base: &BaseTokenizer) -> Result<()> {
    check_digest(Some(&base_digest(&base.config)), &base_digest(&model.base))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn base_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.json");
        let base = BaseTokenizer::new(BaseConfig::default(), 3).unwrap();
        save_base(&p, &base).unwrap();
        let back = load_base(&p, Some(&base.config.digest())).unwrap();
        assert_eq!(back.store, base.store);
    }

    #[test]
    fn digest_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.json");
        save_base(&p, &BaseTokenizer::new(BaseConfig::default(), 3).unwrap()).unwrap();
        let other = BaseConfig {
            base_dim: 8,
            ..BaseConfig::default()
        };
        assert!(matches!(
            load_base(&p, Some(&other.digest())),
            Err(KarlError::DigestMismatch { .. })
        ));
        assert!(matches!(load_model(&p, None), Err(KarlError::Checkpoint(_))));
    }

    #[test]
    fn corrupt_file_is_a_checkpoint_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.json");
        fs::write(&p, "{\"format\": 3}").unwrap();
        assert!(matches!(load_base(&p, None), Err(KarlError::Checkpoint(_))));
        assert!(matches!(
            load_base(dir.path().join("missing"), None),
            Err(KarlError::Io { .. })
        ));
    }
}
