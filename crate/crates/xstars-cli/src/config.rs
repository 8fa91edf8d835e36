use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use xstars::data::SensorProfile;
use xstars::evaluation::{KnnVote, DEFAULT_KS};
use xstars::training::{config_hash, TrainConfig};

use crate::UsageError;

/// Sensor profile given either as a built-in name or spelled out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProfileSpec {
    Preset(String),
    Custom(SensorProfile),
}

impl ProfileSpec {
    pub fn resolve(&self) -> Result<SensorProfile> {
        match self {
            ProfileSpec::Preset(name) => Ok(SensorProfile::preset(name)?),
            ProfileSpec::Custom(p) => Ok(p.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub manifest: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub profiles: Vec<ProfileSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub dataset: Option<PathBuf>,
    pub ks: Vec<usize>,
    pub vote: KnnVote,
    pub fractions: Vec<f64>,
    pub linear_epochs: usize,
    pub linear_lr: f64,
    pub linear_batch_size: usize,
    pub standardize: bool,
    /// Parameter group probed: `teacher` or `student`.
    pub group: String,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            dataset: None,
            ks: DEFAULT_KS.to_vec(),
            vote: KnnVote::Uniform,
            fractions: vec![1.0],
            linear_epochs: 100,
            linear_lr: 0.01,
            linear_batch_size: 32,
            standardize: true,
            group: "teacher".into(),
            seed: 0,
        }
    }
}

/// Everything one run needs, in one TOML document.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfigFile {
    pub data: DataSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

impl RunConfigFile {
    pub fn hash(&self) -> String {
        config_hash(self)
    }

    /// The document with a `# config_hash` header.
    pub fn to_toml(&self) -> Result<String> {
        Ok(format!("# config_hash = \"{}\"\n{}", self.hash(), toml::to_string(self)?))
    }
}

/// A parsed config plus the keys that were set explicitly.
pub struct LoadedConfig {
    pub config: RunConfigFile,
    table: toml::Table,
}

impl LoadedConfig {
    /// Whether `dotted` (e.g. `train.epochs`) was given in the file or by a flag.
    pub fn is_set(&self, dotted: &str) -> bool {
        let mut cur = &self.table;
        let parts: Vec<&str> = dotted.split('.').collect();
        for (i, p) in parts.iter().enumerate() {
            match cur.get(*p) {
                Some(toml::Value::Table(t)) if i + 1 < parts.len() => cur = t,
                Some(_) if i + 1 == parts.len() => return true,
                _ => return false,
            }
        }
        false
    }
}

/// Parses a flag value as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

pub fn set_dotted(table: &mut toml::Table, dotted: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = dotted.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(UsageError(format!("malformed key `{dotted}`")).into());
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| UsageError(format!("`{p}` in `{dotted}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Parses `key=value` overrides.
pub fn parse_override(spec: &str) -> Result<(String, toml::Value)> {
    let (k, v) = spec
        .split_once('=')
        .ok_or_else(|| UsageError(format!("override `{spec}` is not of the form key=value")))?;
    Ok((k.trim().to_string(), parse_value(v.trim())))
}

/// Loads `path` (if any), applies `overrides` in order and resolves relative
/// data paths against the config file's directory.
pub fn load(path: Option<&Path>, overrides: &[(String, toml::Value)]) -> Result<LoadedConfig> {
    let (mut table, base) = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            let table: toml::Table = text
                .parse()
                .map_err(|e| UsageError(format!("config {} is not valid TOML: {e}", p.display())))?;
            (table, p.parent().map(Path::to_path_buf))
        }
        None => (toml::Table::new(), None),
    };
    for (k, v) in overrides {
        set_dotted(&mut table, k, v.clone())?;
    }
    let mut config: RunConfigFile = toml::Value::Table(table.clone())
        .try_into()
        .map_err(|e| UsageError(format!("invalid run configuration: {e}")))?;
    if let Some(base) = base {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(x) = p {
                if x.is_relative() {
                    *x = base.join(&*x);
                }
            }
        };
        // Paths given as flags are relative to the working directory.
        if !overrides.iter().any(|(k, _)| k == "data.manifest") {
            fix(&mut config.data.manifest);
        }
        if !overrides.iter().any(|(k, _)| k == "data.output") {
            fix(&mut config.data.output);
        }
        if !overrides.iter().any(|(k, _)| k == "eval.dataset") {
            fix(&mut config.eval.dataset);
        }
    }
    Ok(LoadedConfig { config, table })
}

/// `--out`, then the config's `data.output`, then `$XSTARS_OUTPUT_ROOT/<name>`,
/// then `runs/<name>`.
pub fn output_dir(explicit: Option<&Path>, config: Option<&Path>, name: &str) -> PathBuf {
    if let Some(p) = explicit.or(config) {
        return p.to_path_buf();
    }
    let root = std::env::var_os(crate::OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    root.join(name)
}
