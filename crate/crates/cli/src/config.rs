//! Experiment configuration: one TOML file per run, `--set key.path=value`
//! overrides, and a resolved copy written beside every run's outputs.
//!
//! Schema (every key optional; unknown keys are rejected):
//!
//! ```toml
//! output = "runs/demo"        # joined onto $VOLTA_OUTPUT_ROOT when relative
//! encoder = "random"          # or a checkpoint path, for probe/segment
//!
//! [data]
//! source = "phantom"          # or "directory"
//! count = 64                  # phantoms to generate (source = "phantom")
//! format = "raw"              # gen-data output: "raw" or "nifti"
//! directory = "data"          # holds manifest.csv (source = "directory")
//! extent = [16, 16, 16]       # preprocessing target for directory data
//! [data.phantom]              # PhantomSpec; phantom i uses seed + i, class i % 2
//!
//! [model]                     # ModelConfig, desk preset by default
//! [augment]                   # AugmentConfig
//! [train]                     # TrainConfig
//! [probe]                     # ProbeConfig
//! [segment]                   # SegConfig
//! ```

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use volta_core::augment::AugmentConfig;
use volta_core::downstream::{ProbeConfig, SegConfig};
use volta_core::train::TrainConfig;
use volta_core::vit3d::ModelConfig;
use volta_core::volio::PhantomSpec;

pub const OUTPUT_ROOT_ENV: &str = "VOLTA_OUTPUT_ROOT";
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

/// Configuration problems map to the usage exit code.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(UsageError(msg.into()).into())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Phantom,
    Directory,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileFormat {
    Raw,
    Nifti,
}

impl FileFormat {
    pub fn extension(self) -> &'static str {
        match self {
            Self::Raw => "vol",
            Self::Nifti => "nii",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub count: usize,
    pub format: FileFormat,
    pub directory: PathBuf,
    pub extent: [usize; 3],
    pub phantom: PhantomSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Phantom,
            count: 64,
            format: FileFormat::Raw,
            directory: PathBuf::from("data"),
            extent: [16; 3],
            phantom: PhantomSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output: PathBuf,
    pub encoder: String,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub augment: AugmentConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub segment: SegConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output: PathBuf::from("runs/default"),
            encoder: "random".into(),
            data: DataConfig::default(),
            model: ModelConfig::desk(),
            augment: AugmentConfig::default(),
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
            segment: SegConfig::default(),
        }
    }
}

/// Parse the right-hand side of an override as a TOML value, falling back
/// to a bare string (`data.format=nifti`).
fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key just written"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let Some((path, raw)) = assignment.split_once('=') else {
        return usage(format!("override {assignment:?} is not key.path=value"));
    };
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return usage(format!("override key {path:?} has an empty segment"));
    }
    let mut table = root;
    for k in &keys[..keys.len() - 1] {
        let entry = table.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = match entry {
            toml::Value::Table(t) => t,
            _ => return usage(format!("override {path:?}: {k} is not a table")),
        };
    }
    table.insert(keys[keys.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Read `file` (defaults when absent), apply overrides in order and validate.
pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut table = match file {
        None => toml::Table::new(),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| UsageError(format!("{}: {e}", p.display())))?;
            text.parse::<toml::Table>().map_err(|e| UsageError(format!("{}: {e}", p.display())))?
        }
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let cfg: ExperimentConfig =
        toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| UsageError(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |section: &str, r: Result<(), String>| match r {
            Ok(()) => Ok(()),
            Err(e) => usage(format!("[{section}] {e}")),
        };
        check("model", self.model.validate().map_err(|e| e.to_string()))?;
        check("augment", self.augment.validate().map_err(|e| e.to_string()))?;
        check("train", self.train.validate().map_err(|e| e.to_string()))?;
        check("probe", self.probe.validate().map_err(|e| e.to_string()))?;
        check("segment", self.segment.validate().map_err(|e| e.to_string()))?;
        check("data.phantom", self.data.phantom.validate().map_err(|e| e.to_string()))?;
        if self.augment.patch != self.model.patch {
            return usage(format!(
                "augment.patch {} differs from model.patch {}",
                self.augment.patch, self.model.patch
            ));
        }
        if self.encoder.is_empty() {
            return usage("encoder must be \"random\" or a checkpoint path");
        }
        Ok(())
    }

    /// Output directory, under `$VOLTA_OUTPUT_ROOT` when that is set and the
    /// configured path is relative.
    pub fn output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output.is_relative() => PathBuf::from(root).join(&self.output),
            _ => self.output.clone(),
        }
    }

    /// Create the output directory and write the resolved configuration.
    pub fn prepare_output(&self) -> Result<PathBuf> {
        let dir = self.output_dir();
        std::fs::create_dir_all(&dir).with_context(|| format!("cannot create output directory {}", dir.display()))?;
        let text = toml::to_string_pretty(self).context("serialising resolved config")?;
        let path = dir.join(RESOLVED_CONFIG);
        std::fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))?;
        Ok(dir)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_keys() {
        let cfg = load(
            None,
            &[
                "train.epochs=3".into(),
                "train.warmup_epochs=1".into(),
                "data.format=nifti".into(),
                "model.pos_grid=[2, 2, 2]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.data.format, FileFormat::Nifti);
        assert_eq!(cfg.model.pos_grid, [2, 2, 2]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = load(None, &["train.epoch=3".into()]).unwrap_err();
        assert!(err.downcast_ref::<UsageError>().is_some());
        assert!(err.to_string().contains("epoch"), "{err}");
    }

    #[test]
    fn invalid_values_name_the_field() {
        let err = load(None, &["train.accumulation=0".into()]).unwrap_err();
        assert!(err.to_string().contains("accumulation"), "{err}");
    }

    #[test]
    fn resolved_copy_round_trips() {
        let cfg = load(None, &["probe.lr=0.001".into()]).unwrap();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
