//! Config resolution and the run directory every command writes into.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use karl_core::pipeline::{BASE_CHECKPOINT, MODEL_CHECKPOINT};
use karl_core::{ExperimentConfig, KarlError};
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";
/// Set to `0` to draw a fresh training seed instead of the configured one.
pub const DETERMINISTIC_ENV: &str = "KARL_DETERMINISTIC";

#[derive(Debug)]
pub struct MissingConfig(pub PathBuf);

impl std::fmt::Display for MissingConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config file {} does not exist", self.0.display())
    }
}

impl std::error::Error for MissingConfig {}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    if !path.is_file() {
        return Err(MissingConfig(path.to_path_buf()).into());
    }
    Ok(ExperimentConfig::load(path)?)
}

/// `--config` if given, else `fallback/config.toml` if present, else defaults.
pub fn resolve_config(explicit: Option<&Path>, fallback: Option<&Path>) -> Result<ExperimentConfig> {
    if let Some(p) = explicit {
        return load_config(p);
    }
    if let Some(p) = fallback.map(|d| d.join(CONFIG_FILE)).filter(|p| p.is_file()) {
        log::info!("using {}", p.display());
        return load_config(&p);
    }
    Ok(ExperimentConfig::default())
}

/// Replaces the training seed with a random one when deterministic mode is
/// switched off. The returned config is the one to record.
pub fn apply_determinism(mut cfg: ExperimentConfig) -> ExperimentConfig {
    if std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "0") {
        cfg.train.seed = rand::random::<u64>() >> 1;
        log::info!("{DETERMINISTIC_ENV}=0: training seed {}", cfg.train.seed);
    }
    cfg
}

/// Model and base checkpoint paths for `--checkpoint`.
pub fn checkpoint_paths(path: &Path) -> (PathBuf, PathBuf) {
    if path.is_dir() {
        (path.join(MODEL_CHECKPOINT), path.join(BASE_CHECKPOINT))
    } else {
        let dir = path.parent().unwrap_or(Path::new("."));
        (path.to_path_buf(), dir.join(BASE_CHECKPOINT))
    }
}

pub fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(KarlError::Checkpoint(format!("{} not found", path.display())).into());
    }
    Ok(())
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub command: String,
    pub config_digest: String,
    pub finished_unix: u64,
    pub files: Vec<PathBuf>,
}

/// Output directory plus the files written to it by the current command.
pub struct RunDir {
    pub path: PathBuf,
    pub digest: String,
    written: Vec<PathBuf>,
}

impl RunDir {
    pub fn create(path: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Self {
            path: path.to_path_buf(),
            digest: cfg.digest(),
            written: Vec::new(),
        })
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Records a file written by core code.
    pub fn note(&mut self, name: impl AsRef<Path>) {
        self.written.push(name.as_ref().to_path_buf());
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        let p = self.join(name);
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
        self.note(name);
        Ok(())
    }

    /// Writes `value` under `{"config_digest": .., "data": value}`.
    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let doc = serde_json::json!({ "config_digest": self.digest, "data": value });
        self.write_text(name, &serde_json::to_string_pretty(&doc)?)
    }

    /// CSV with a leading `# config_digest=..` comment line.
    pub fn write_csv(&mut self, name: &str, header: &str, rows: &[String]) -> Result<()> {
        let mut text = format!("# config_digest={}\n{header}\n", self.digest);
        for r in rows {
            text.push_str(r);
            text.push('\n');
        }
        self.write_text(name, &text)
    }

    pub fn write_config(&mut self, cfg: &ExperimentConfig) -> Result<()> {
        self.write_text(CONFIG_FILE, &cfg.to_toml_string()?)
    }

    /// Appends this command's files to the manifest.
    pub fn finish(self, command: &str) -> Result<()> {
        let path = self.join(MANIFEST);
        let mut manifest: Manifest = match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
            Err(_) => Manifest::default(),
        };
        let finished_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        manifest.entries.push(ManifestEntry {
            command: command.to_string(),
            config_digest: self.digest,
            finished_unix,
            files: self.written,
        });
        fs::write(&path, serde_json::to_string_pretty(&manifest)?)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}
