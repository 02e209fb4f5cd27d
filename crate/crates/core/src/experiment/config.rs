//! TOML experiment configuration.
//!
//! ```toml
//! output = "runs/conv"
//! seeds = [1, 2, 3, 4, 5]
//! algorithms = ["clean", "asn", "ssn", "ssn_alt"]   # sweep only
//!
//! [task]            # SyntheticTask
//! kind = "conv_classification"
//!
//! [model]           # ModelSpec
//! fusion = "mean"
//!
//! [train]           # TrainConfig; `seed` is replaced by each run seed
//! algorithm = "ssn"
//! [[train.corruption]]
//! kind = "gaussian"
//!
//! [eval]
//! trials = 5        # corruption defaults to train.corruption when empty
//! ```
//!
//! Seeds must fit in a signed 64-bit integer (a TOML limitation).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corruption::CorruptionSpec;
use crate::error::{config_err, Error, Result};
use crate::model::ModelSpec;
use crate::tasks::SyntheticTask;
use crate::training::{Algorithm, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Per-source corruption; empty reuses `train.corruption`.
    pub corruption: Vec<CorruptionSpec>,
    pub trials: usize,
    pub confidence: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            corruption: Vec::new(),
            trials: 5,
            confidence: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output: PathBuf,
    pub seeds: Vec<u64>,
    /// Algorithms covered by a sweep.
    pub algorithms: Vec<Algorithm>,
    pub task: SyntheticTask,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output: PathBuf::from("runs"),
            seeds: vec![1],
            algorithms: Algorithm::ALL.to_vec(),
            task: SyntheticTask::default(),
            model: ModelSpec {
                extractor_widths: Some(vec![vec![4]]),
                ..ModelSpec::default()
            },
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string() + &span_hint(text, e.span())))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialise config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return config_err("seeds must list at least one seed");
        }
        if self.seeds.iter().any(|&s| s > i64::MAX as u64) {
            return config_err("seeds must be <= 9223372036854775807");
        }
        if self.algorithms.is_empty() {
            return config_err("algorithms must list at least one algorithm");
        }
        self.task.validate()?;
        let shapes = self.task.source_shapes();
        self.model.validate(&shapes)?;
        self.train.validate()?;
        let ns = shapes.len();
        for (name, list) in [("train.corruption", &self.train.corruption), ("eval.corruption", &self.eval.corruption)] {
            if list.len() > 1 && list.len() != ns {
                return config_err(format!("{name} has {} entries for {ns} sources", list.len()));
            }
        }
        for c in &self.eval.corruption {
            c.validate()?;
        }
        if self.eval.trials == 0 {
            return config_err("eval.trials must be >= 1");
        }
        if !(self.eval.confidence > 0.0 && self.eval.confidence < 1.0) {
            return config_err(format!("eval.confidence must lie in (0, 1), got {}", self.eval.confidence));
        }
        Ok(())
    }

    /// Corruption used at evaluation time, before `tau` resolution.
    pub fn eval_corruption(&self) -> &[CorruptionSpec] {
        if self.eval.corruption.is_empty() {
            &self.train.corruption
        } else {
            &self.eval.corruption
        }
    }
}

fn span_hint(text: &str, span: Option<std::ops::Range<usize>>) -> String {
    match span {
        Some(r) => {
            let line = text[..r.start.min(text.len())].matches('\n').count() + 1;
            format!(" (line {line})")
        }
        None => String::new(),
    }
}

/// Command-line overrides applied on top of a loaded config.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seeds: Vec<u64>,
    pub output: Option<PathBuf>,
    pub trials: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if !self.seeds.is_empty() {
            cfg.seeds = self.seeds.clone();
        }
        if let Some(out) = &self.output {
            cfg.output = out.clone();
        }
        if let Some(t) = self.trials {
            cfg.eval.trials = t;
        }
    }
}
