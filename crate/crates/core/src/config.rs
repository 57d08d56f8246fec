//! Run configuration: one JSON document per run, with dotted overrides.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::bridge::BridgeProvider;
use crate::embedding::{EmbeddingProvider, FeatureExtractor, ToyEncoder, ToyFeatures};
use crate::error::{usage, validation, Error, Result};
use crate::field::FieldArch;
use crate::losses::{default_negatives, parse_negatives, StyleTask};
use crate::renderer::RenderConfig;
use crate::trainer::{Stage1Config, Stage2Config};

pub const DETERMINISTIC_ENV: &str = "RADIART_DETERMINISTIC";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Directory holding `cameras.json` and the frames.
    pub path: Option<PathBuf>,
    /// Frame indices kept out of training and used for evaluation.
    pub holdout: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub target: String,
    pub source: String,
    /// One prompt per line; the built-in bank when absent.
    pub negatives_file: Option<PathBuf>,
    pub tau: f64,
    pub lambda_global: f64,
    pub lambda_local: f64,
    pub lambda_perceptual: f64,
    pub lambda_reg: f64,
    pub patch_fraction: f64,
    pub patches_per_view: usize,
    pub negatives_per_step: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        let t = StyleTask::default();
        Self {
            target: t.target,
            source: t.source,
            negatives_file: None,
            tau: t.tau,
            lambda_global: t.lambda_global,
            lambda_local: t.lambda_local,
            lambda_perceptual: t.lambda_perceptual,
            lambda_reg: t.lambda_reg,
            patch_fraction: t.patch_fraction,
            patches_per_view: t.patches_per_view,
            negatives_per_step: t.negatives_per_step,
        }
    }
}

impl TaskConfig {
    /// Loads the negative bank; a bank entry equal to the target is dropped
    /// with a warning.
    pub fn to_task(&self) -> Result<StyleTask> {
        let negatives = match &self.negatives_file {
            Some(p) => parse_negatives(&std::fs::read_to_string(p)?),
            None => default_negatives(),
        };
        let task = StyleTask {
            target: self.target.clone(),
            source: self.source.clone(),
            negatives,
            tau: self.tau,
            lambda_global: self.lambda_global,
            lambda_local: self.lambda_local,
            lambda_perceptual: self.lambda_perceptual,
            lambda_reg: self.lambda_reg,
            patch_fraction: self.patch_fraction,
            patches_per_view: self.patches_per_view,
            negatives_per_step: self.negatives_per_step,
        };
        let before = task.negatives.len();
        let task = task.without_target_in_negatives();
        if task.negatives.len() != before {
            log::warn!("removed the target prompt from the negative bank");
        }
        task.validate()?;
        Ok(task)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    /// `toy:<seed>` or `bridge:<endpoint>`.
    pub name: String,
    pub timeout_secs: f64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            name: "toy:0".into(),
            timeout_secs: 30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProviderSpec {
    Toy(u64),
    Bridge(String),
}

impl ProviderSpec {
    pub fn parse(name: &str) -> Result<Self> {
        if let Some(seed) = name.strip_prefix("toy:") {
            let seed = seed
                .parse()
                .map_err(|_| validation(format!("toy provider seed `{seed}` is not an integer")))?;
            Ok(ProviderSpec::Toy(seed))
        } else if let Some(ep) = name.strip_prefix("bridge:") {
            crate::bridge::Endpoint::parse(ep).map_err(|e| validation(e.to_string()))?;
            Ok(ProviderSpec::Bridge(ep.to_string()))
        } else {
            Err(validation(format!("unknown provider `{name}`; use toy:<seed> or bridge:<endpoint>")))
        }
    }
}

/// The embedding provider and feature extractor of a run.
pub enum Providers {
    Toy(ToyEncoder, ToyFeatures),
    Bridge(BridgeProvider),
}

impl Providers {
    pub fn connect(config: &ProviderConfig) -> Result<Self> {
        match ProviderSpec::parse(&config.name)? {
            ProviderSpec::Toy(seed) => Ok(Providers::Toy(ToyEncoder::new(seed), ToyFeatures::new(seed))),
            ProviderSpec::Bridge(ep) => {
                let timeout = Duration::from_secs_f64(config.timeout_secs);
                Ok(Providers::Bridge(BridgeProvider::connect(&ep, timeout)?))
            }
        }
    }

    pub fn provider(&self) -> &dyn EmbeddingProvider {
        match self {
            Providers::Toy(e, _) => e,
            Providers::Bridge(b) => b,
        }
    }

    pub fn extractor(&self) -> &dyn FeatureExtractor {
        match self {
            Providers::Toy(_, f) => f,
            Providers::Bridge(b) => b,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub init: u64,
    pub stage1: u64,
    pub stage2: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub arch: FieldArch,
    pub render: RenderConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub task: TaskConfig,
    pub provider: ProviderConfig,
    pub output_dir: PathBuf,
    pub seeds: Seeds,
    pub deterministic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            arch: FieldArch::desk(),
            render: RenderConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            task: TaskConfig::default(),
            provider: ProviderConfig::default(),
            output_dir: PathBuf::from("out"),
            seeds: Seeds::default(),
            deterministic: false,
        }
    }
}

/// What a command needs from the configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Reconstruct,
    Stylize,
}

impl RunConfig {
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| validation(format!("cannot read config {}: {e}", path.display())))?;
        let value: Value =
            serde_json::from_str(&text).map_err(|e| validation(format!("config {}: {e}", path.display())))?;
        Self::from_value(value, overrides)
    }

    /// Builds a config from JSON, applying `section.key=value` overrides.
    /// Override values are parsed as JSON, falling back to a plain string.
    pub fn from_value(mut value: Value, overrides: &[String]) -> Result<Self> {
        if value.is_null() {
            value = Value::Object(Default::default());
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        serde_json::from_value(value).map_err(|e| validation(format!("config: {e}")))
    }

    pub fn deterministic(&self, flag: bool) -> bool {
        flag || self.deterministic || std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1")
    }

    /// Checks every setting a command depends on before any work starts.
    pub fn validate(&self, purpose: Purpose) -> Result<()> {
        self.arch.validate()?;
        self.render.validate()?;
        match purpose {
            Purpose::Reconstruct => self.stage1.validate()?,
            Purpose::Stylize => {
                self.stage2.validate()?;
                if let Some(p) = &self.task.negatives_file {
                    if !p.is_file() {
                        return Err(validation(format!("negatives file {} does not exist", p.display())));
                    }
                }
                self.task.to_task()?;
                ProviderSpec::parse(&self.provider.name)?;
                if !(self.provider.timeout_secs > 0.0 && self.provider.timeout_secs.is_finite()) {
                    return Err(validation("provider.timeout_secs must be positive"));
                }
            }
        }
        let path = self
            .dataset
            .path
            .as_ref()
            .ok_or_else(|| validation("dataset.path is not set"))?;
        if !path.join(crate::geometry::MANIFEST_FILE).is_file() {
            return Err(validation(format!("no dataset at {}", path.display())));
        }
        Ok(())
    }
}

fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| usage(format!("override `{spec}` is not key=value")))?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(usage(format!("bad override key `{path}`")));
    }
    let mut node = root;
    for (i, k) in keys.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| validation(format!("`{}` is not a section", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            obj.insert((*k).to_string(), parsed);
            return Ok(());
        }
        node = obj
            .entry((*k).to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Err(Error::Usage("empty override".into()))
}
