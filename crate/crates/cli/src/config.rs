use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sae_core::data::SuperpositionSpec;
use sae_core::training::TrainConfig;
use sae_core::ModelConfig;

use crate::error::CliError;

/// Environment variable naming the directory that holds run outputs when
/// neither `--out` nor `output_dir` is given.
pub const OUTPUT_ROOT_ENV: &str = "SAE_OUTPUT_ROOT";

/// One run, as read from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Excluded from `config.used` so a run's artifacts do not depend on
    /// where they were written.
    #[serde(default, skip_serializing)]
    pub output_dir: Option<PathBuf>,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

/// Exactly one of `synthetic` and `path`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SuperpositionSpec>,
    /// Activation file to train on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

fn default_eval_samples() -> usize {
    4096
}
fn default_eval_batch() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out samples drawn from the synthetic source.
    #[serde(default = "default_eval_samples")]
    pub samples: usize,
    #[serde(default = "default_eval_batch")]
    pub batch_size: usize,
    /// Activation file to evaluate on instead of synthetic samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Activation file with one ground-truth direction per row.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: default_eval_samples(),
            batch_size: default_eval_batch(),
            path: None,
            ground_truth: None,
        }
    }
}

impl RunConfig {
    /// Reads `path`, applies `key=value` overrides and validates the result.
    /// Relative paths inside the file are taken relative to its directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut table: toml::Table = text
            .parse()
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        for p in [
            &mut self.output_dir,
            &mut self.data.path,
            &mut self.eval.path,
            &mut self.eval.ground_truth,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: sae_core::Error| CliError::Config(e.to_string());
        self.model.validate().map_err(cfg)?;
        self.train.validate().map_err(cfg)?;
        match (&self.data.synthetic, &self.data.path) {
            (Some(spec), None) => {
                spec.validate().map_err(cfg)?;
                if spec.d != self.model.d {
                    return Err(CliError::Config(format!(
                        "data.synthetic.d = {} does not match model.d = {}",
                        spec.d, self.model.d
                    )));
                }
            }
            (None, Some(_)) => {}
            _ => {
                return Err(CliError::Config(
                    "data needs exactly one of `synthetic` and `path`".into(),
                ))
            }
        }
        if self.eval.batch_size == 0 {
            return Err(CliError::Config("eval.batch_size must be positive".into()));
        }
        Ok(())
    }

    /// The document written to `config.used`.
    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    /// `--out`, else `output_dir`, else `$SAE_OUTPUT_ROOT/<stem>`, else
    /// `runs/<stem>`.
    pub fn output_dir(&self, flag: Option<&Path>, config_path: &Path) -> PathBuf {
        if let Some(p) = flag {
            return p.to_path_buf();
        }
        if let Some(p) = &self.output_dir {
            return p.clone();
        }
        let stem = config_path
            .file_stem()
            .map(|s| s.to_os_string())
            .unwrap_or_else(|| "run".into());
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if !root.is_empty() => PathBuf::from(root).join(stem),
            _ => PathBuf::from("runs").join(stem),
        }
    }
}

/// Sets a dotted key such as `train.batch_size=8`. The value is read as a
/// TOML literal, falling back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed table holds v"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!(
            "override key `{key}` is malformed"
        )));
    }
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut node = table;
    for p in parents {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry.as_table_mut().ok_or_else(|| {
            CliError::Config(format!("override key `{key}`: `{p}` is not a table"))
        })?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}
