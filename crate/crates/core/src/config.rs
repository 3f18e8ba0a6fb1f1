//! Run configuration.
//!
//! Configs are TOML. A file may name a `preset`; the preset supplies every
//! field and the file's keys override it, table by table. `seed` always has
//! to come from the file itself.
//!
//! ```toml
//! preset = "surrogate-demo"
//! seed = 7
//! generations = 10
//!
//! [budget]
//! epochs = 2
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assembly::{IoSpec, MergePolicy};
use crate::coevolution::CoevolutionConfig;
use crate::distrib::SchedulerConfig;
use crate::evaluator::{EvaluationBudget, EvaluatorSpec};
use crate::genome::MutationRates;
use crate::hyperparams::HyperparameterSpace;
use crate::presets;
use crate::speciation::SpeciationConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error("unknown preset `{0}` (known: {known})", known = presets::NAMES.join(", "))]
    UnknownPreset(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ConfigError {
    fn invalid(path: &str, message: impl ToString) -> Self {
        ConfigError::Invalid {
            path: path.to_string(),
            message: message.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Blueprint and module populations evolved together.
    Codeepneat,
    /// One population of whole-network chromosomes.
    Deepneat,
}

/// Where fitness evaluation runs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Backend {
    /// Sequentially in the orchestrating thread.
    InProcess,
    /// Worker threads speaking the wire protocol over in-memory pipes.
    Local { workers: usize },
    /// Remote workers connecting over TCP.
    Listen { address: String },
}

impl Default for Backend {
    fn default() -> Self {
        Backend::Local { workers: 2 }
    }
}

/// Training regime used at full scale with an external trainer. Recorded
/// with the preset and exported with results; the built-in evaluators do not
/// read it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FullScaleSetting {
    pub dataset: Option<String>,
    pub epochs: Option<u32>,
    pub train_samples: Option<u64>,
    pub validation_samples: Option<u64>,
    pub batch_size: Option<u32>,
    pub generations: Option<u64>,
    pub networks_per_generation: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvolutionConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub mode: Mode,
    pub seed: u64,
    pub generations: u64,
    pub space: HyperparameterSpace,
    /// Blueprint population size; the whole population in DeepNEAT mode.
    pub blueprints: usize,
    pub modules: usize,
    /// Networks assembled per generation (CoDeepNEAT only).
    pub assembly_count: usize,
    pub blueprint_speciation: SpeciationConfig,
    pub module_speciation: SpeciationConfig,
    pub blueprint_rates: MutationRates,
    pub module_rates: MutationRates,
    pub merge_policy: MergePolicy,
    pub io: IoSpec,
    pub evaluator: EvaluatorSpec,
    pub budget: EvaluationBudget,
    #[serde(default)]
    pub backend: Backend,
    #[serde(default)]
    pub scheduler: SchedulerConfig,
    /// Write a numbered checkpoint every this many generations.
    #[serde(default = "one")]
    pub checkpoint_every: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub full_scale: Option<FullScaleSetting>,
}

fn one() -> u64 {
    1
}

impl EvolutionConfig {
    pub fn coevolution(&self) -> CoevolutionConfig {
        CoevolutionConfig {
            blueprints: self.blueprint_speciation.clone(),
            modules: self.module_speciation.clone(),
            blueprint_rates: self.blueprint_rates.clone(),
            module_rates: self.module_rates.clone(),
        }
    }

    /// Parses TOML text, applying the named preset underneath if any.
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::invalid("<file>", e))?;
        let mut tree = match user.get("preset") {
            Some(toml::Value::String(name)) => {
                let base = presets::preset(name).ok_or_else(|| ConfigError::UnknownPreset(name.clone()))?;
                let mut t = toml::Table::try_from(&base).map_err(|e| ConfigError::invalid("preset", e))?;
                t.remove("seed");
                t
            }
            Some(_) => return Err(ConfigError::invalid("preset", "expected a preset name")),
            None => toml::Table::new(),
        };
        merge(&mut tree, user);
        let config: Self = serde_path_to_error::deserialize(toml::Value::Table(tree)).map_err(|e| {
            let path = e.path().to_string();
            ConfigError::invalid(if path == "." { "<root>" } else { &path }, e.into_inner())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configs always serialize")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.space.validate().map_err(|e| ConfigError::invalid("space", e))?;
        for (path, v) in [
            ("generations", self.generations as usize),
            ("blueprints", self.blueprints),
            ("checkpoint_every", self.checkpoint_every as usize),
        ] {
            if v == 0 {
                return Err(ConfigError::invalid(path, "must be at least 1"));
            }
        }
        if self.mode == Mode::Codeepneat {
            for (path, v) in [("modules", self.modules), ("assembly_count", self.assembly_count)] {
                if v == 0 {
                    return Err(ConfigError::invalid(path, "must be at least 1"));
                }
            }
        }
        for (path, rates) in [("blueprint_rates", &self.blueprint_rates), ("module_rates", &self.module_rates)] {
            for (name, v) in rates.fields() {
                if !(0.0..=1.0).contains(&v) {
                    return Err(ConfigError::invalid(&format!("{path}.{name}"), format!("{v} is not in [0, 1]")));
                }
            }
        }
        for (path, s) in [
            ("blueprint_speciation", &self.blueprint_speciation),
            ("module_speciation", &self.module_speciation),
        ] {
            validate_speciation(path, s)?;
        }
        self.budget.validate().map_err(|e| ConfigError::invalid("budget", e))?;
        if self.io.output_units == 0 || self.io.input.elements() == 0 {
            return Err(ConfigError::invalid("io", "input and output must be non-empty"));
        }
        match &self.backend {
            Backend::Local { workers: 0 } => Err(ConfigError::invalid("backend.workers", "must be at least 1")),
            _ => Ok(()),
        }
    }
}

fn validate_speciation(path: &str, s: &SpeciationConfig) -> Result<(), ConfigError> {
    if !(s.threshold > 0.0 && s.threshold.is_finite()) {
        return Err(ConfigError::invalid(&format!("{path}.threshold"), "must be positive"));
    }
    for (name, v) in [("cull_fraction", s.cull_fraction), ("crossover_rate", s.crossover_rate)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(ConfigError::invalid(&format!("{path}.{name}"), format!("{v} is not in [0, 1]")));
        }
    }
    let c = &s.coefficients;
    if [c.excess, c.disjoint, c.params].iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
        return Err(ConfigError::invalid(&format!("{path}.coefficients"), "must be non-negative"));
    }
    Ok(())
}

/// Recursively overlays `over` onto `base`; tables merge, everything else is
/// replaced.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if !is_tagged(&o) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Tagged enums (`kind` or `type`) are replaced whole when the tag changes, so
/// fields of the old variant do not leak into the new one.
fn is_tagged(t: &toml::Table) -> bool {
    t.contains_key("kind") || t.contains_key("type")
}
