//! Clean, all-source (ASN) and single-source (SSN, SSN-alt) training loops.
//!
//! All robust loops alternate: odd iterations see a corrupted batch, even
//! iterations the clean one.
//!
//! - ASN corrupts every source.
//! - SSN corrupts each source in turn with pre-drawn noise, evaluates the
//!   loss of every branch (`n_s` forwards), then runs forward and backward
//!   again on the branch with the largest loss, reusing its noise.
//! - SSN-alt corrupts source `(⌊i/2⌋ mod n_s) + 1` at iteration `i`.
//!
//! Fine-tuning first trains on clean data for `n_clean` iterations, then runs
//! the robust loop for `n_tune` iterations updating only fusion and head
//! parameters.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::{Rng as _, RngCore};
use serde::{Deserialize, Serialize};

use crate::corruption::{corrupt, CorruptionSpec};
use crate::diff::{Adam, AdamConfig, Tag, Tensor};
use crate::error::{config_err, Error, Result};
use crate::model::FusionModel;
use crate::rng;
use crate::tasks::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[default]
    Clean,
    Asn,
    Ssn,
    SsnAlt,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [Algorithm::Clean, Algorithm::Asn, Algorithm::Ssn, Algorithm::SsnAlt];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Clean => "clean",
            Self::Asn => "asn",
            Self::Ssn => "ssn",
            Self::SsnAlt => "ssn_alt",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(Self::Clean),
            "asn" => Ok(Self::Asn),
            "ssn" => Ok(Self::Ssn),
            "ssn_alt" | "ssnalt" => Ok(Self::SsnAlt),
            other => config_err(format!("unknown algorithm '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    FromScratch,
    FineTune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Corruption per source; a single entry applies to every source.
    pub corruption: Vec<CorruptionSpec>,
    pub mode: TrainMode,
    pub n_clean: usize,
    pub n_tune: usize,
    /// Seed of the batch and noise streams.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            algorithm: Algorithm::Clean,
            iterations: 4000,
            batch_size: 64,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            corruption: vec![CorruptionSpec::default()],
            mode: TrainMode::FromScratch,
            n_clean: 0,
            n_tune: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return config_err("train.batch_size must be >= 1");
        }
        if self.mode == TrainMode::FineTune && self.n_clean + self.n_tune != self.iterations {
            return config_err(format!(
                "train.n_clean + train.n_tune ({} + {}) must equal train.iterations ({})",
                self.n_clean, self.n_tune, self.iterations
            ));
        }
        if self.corruption.is_empty() {
            return config_err("train.corruption needs at least one entry");
        }
        for c in &self.corruption {
            c.validate()?;
        }
        self.adam()?;
        Ok(())
    }

    pub fn adam(&self) -> Result<Adam> {
        Adam::new(AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        })
    }

    /// Corruption of every source with `tau` resolved from `taus` where unset.
    pub fn resolved_corruption(&self, taus: &[f64]) -> Result<Vec<CorruptionSpec>> {
        if self.corruption.len() != 1 && self.corruption.len() != taus.len() {
            return config_err(format!(
                "train.corruption has {} entries for {} sources",
                self.corruption.len(),
                taus.len()
            ));
        }
        Ok(taus
            .iter()
            .enumerate()
            .map(|(i, &t)| self.corruption[i.min(self.corruption.len() - 1)].resolved(t))
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Tune,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Tune => "tune",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Corrupted {
    None,
    All,
    /// 1-based source index.
    Source(usize),
}

impl fmt::Display for Corrupted {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::None => f.write_str("none"),
            Self::All => f.write_str("all"),
            Self::Source(j) => write!(f, "{j}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// 1-based within its phase.
    pub iteration: usize,
    pub phase: Phase,
    pub corrupted: Corrupted,
    /// Total loss (task loss plus penalties) of the batch used for the update.
    pub loss: f64,
    /// Per-branch losses of the SSN scan, empty otherwise.
    pub scan_losses: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub trace: Vec<TraceRecord>,
    /// Corruption calls per source.
    pub corruption_calls: Vec<usize>,
    pub forwards: usize,
    pub backwards: usize,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> Option<f64> {
        self.trace.last().map(|r| r.loss)
    }
}

/// Trains `model` on `data` per `cfg`.
///
/// Batches are drawn uniformly with replacement from the batch stream of
/// `cfg.seed`; noise seeds come from its noise stream.
pub fn train(model: &mut FusionModel, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ns = data.num_sources();
    if ns != model.num_sources() {
        return config_err(format!("data has {ns} sources, model expects {}", model.num_sources()));
    }
    let specs = cfg.resolved_corruption(&data.source_std())?;
    let mut state = LoopState {
        opt: cfg.adam()?,
        batch_rng: rng::seeded(cfg.seed, rng::stream::BATCH),
        noise_rng: rng::seeded(cfg.seed, rng::stream::NOISE),
        specs,
        outcome: TrainOutcome {
            corruption_calls: vec![0; ns],
            ..TrainOutcome::default()
        },
    };
    match cfg.mode {
        TrainMode::FromScratch => {
            state.run_phase(model, data, cfg, cfg.algorithm, cfg.iterations, Phase::Train, &Tag::ALL)?;
        }
        TrainMode::FineTune => {
            let tags = model.graph.params().tags();
            if !tags.contains(&Tag::Extractor) || !(tags.contains(&Tag::Fusion) || tags.contains(&Tag::Head)) {
                return config_err(format!(
                    "fine-tuning needs extractor and fusion/head parameters, model has tags {tags:?}"
                ));
            }
            state.run_phase(model, data, cfg, Algorithm::Clean, cfg.n_clean, Phase::Train, &Tag::ALL)?;
            state.run_phase(model, data, cfg, cfg.algorithm, cfg.n_tune, Phase::Tune, &[Tag::Fusion, Tag::Head])?;
        }
    }
    Ok(state.outcome)
}

struct LoopState {
    opt: Adam,
    batch_rng: rng::Rng,
    noise_rng: rng::Rng,
    specs: Vec<CorruptionSpec>,
    outcome: TrainOutcome,
}

impl LoopState {
    fn corrupt_source(&mut self, x: &Tensor, j: usize) -> Result<Tensor> {
        let seed = self.noise_rng.next_u64();
        self.outcome.corruption_calls[j] += 1;
        corrupt(x, &self.specs[j].with_seed(seed))
    }

    #[allow(clippy::too_many_arguments)]
    fn run_phase(
        &mut self,
        model: &mut FusionModel,
        data: &Dataset,
        cfg: &TrainConfig,
        algorithm: Algorithm,
        iterations: usize,
        phase: Phase,
        tags: &[Tag],
    ) -> Result<()> {
        let ns = data.num_sources();
        let n = data.len();
        for i in 1..=iterations {
            let rows: Vec<usize> = (0..cfg.batch_size).map(|_| self.batch_rng.random_range(0..n)).collect();
            let batch = data.subset(&rows)?;
            let mut sources = batch.sources;
            let mut scan_losses = Vec::new();
            let corrupted = if i % 2 == 0 || algorithm == Algorithm::Clean {
                Corrupted::None
            } else {
                match algorithm {
                    Algorithm::Clean => unreachable!(),
                    Algorithm::Asn => {
                        for j in 0..ns {
                            sources[j] = self.corrupt_source(&sources[j], j)?;
                        }
                        Corrupted::All
                    }
                    Algorithm::SsnAlt => {
                        let j = (i / 2) % ns;
                        sources[j] = self.corrupt_source(&sources[j], j)?;
                        Corrupted::Source(j + 1)
                    }
                    Algorithm::Ssn => {
                        // noise for every branch is drawn before any forward pass
                        let branches: Vec<Tensor> = (0..ns)
                            .map(|j| self.corrupt_source(&sources[j], j))
                            .collect::<Result<_>>()?;
                        let mut best = 0;
                        for (j, b) in branches.iter().enumerate() {
                            let mut trial = sources.clone();
                            trial[j] = b.clone();
                            let (_, total) = model.loss(&trial, &batch.target)?;
                            self.outcome.forwards += 1;
                            scan_losses.push(total);
                            if total > scan_losses[best] {
                                best = j;
                            }
                        }
                        sources[best] = branches.into_iter().nth(best).unwrap();
                        Corrupted::Source(best + 1)
                    }
                }
            };
            let (_, total, grads) = model.loss_and_grads(&sources, &batch.target)?;
            self.outcome.forwards += 1;
            self.outcome.backwards += 1;
            if !total.is_finite() {
                return Err(Error::Diverged {
                    iteration: i,
                    loss: total,
                });
            }
            self.opt.step(model.graph.params_mut(), &grads, tags)?;
            self.outcome.trace.push(TraceRecord {
                iteration: i,
                phase,
                corrupted,
                loss: total,
                scan_losses,
            });
        }
        Ok(())
    }
}

/// `iteration,phase,corrupted_source,loss` with one row per iteration.
pub fn trace_to_csv(trace: &[TraceRecord]) -> String {
    let mut out = String::from("iteration,phase,corrupted_source,loss\n");
    for r in trace {
        writeln!(out, "{},{},{},{:?}", r.iteration, r.phase, r.corrupted, r.loss).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;
    use crate::tasks::{make_task, SyntheticTask, TaskKind};

    fn linear_setup() -> (FusionModel, Dataset) {
        let task = SyntheticTask {
            kind: TaskKind::LinearRegression,
            n_train: 256,
            n_val: 16,
            ..SyntheticTask::default()
        };
        let (train, _) = make_task(&task).unwrap();
        let model = FusionModel::build(&ModelSpec::linear(), &task.source_shapes(), task.target(), 1).unwrap();
        (model, train)
    }

    fn cfg(algorithm: Algorithm, iterations: usize) -> TrainConfig {
        TrainConfig {
            algorithm,
            iterations,
            batch_size: 8,
            lr: 1e-2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_iterations_leave_model_unchanged() {
        let (mut model, data) = linear_setup();
        let before = model.graph.params().clone();
        let out = train(&mut model, &data, &cfg(Algorithm::Ssn, 0)).unwrap();
        assert!(out.trace.is_empty());
        assert_eq!(model.graph.params(), &before);
    }

    #[test]
    fn alternating_rotation_and_parity() {
        let (mut model, data) = linear_setup();
        let out = train(&mut model, &data, &cfg(Algorithm::SsnAlt, 8)).unwrap();
        let seq: Vec<Corrupted> = out.trace.iter().map(|r| r.corrupted).collect();
        use Corrupted::*;
        assert_eq!(seq, vec![Source(1), None, Source(2), None, Source(1), None, Source(2), None]);
        assert_eq!(out.corruption_calls, vec![2, 2]);
    }

    #[test]
    fn ssn_counts_passes_and_reuses_noise() {
        let (mut model, data) = linear_setup();
        let out = train(&mut model, &data, &cfg(Algorithm::Ssn, 6)).unwrap();
        // 3 odd iterations with n_s + 1 forwards, 3 even with one
        assert_eq!(out.forwards, 3 * 3 + 3);
        assert_eq!(out.backwards, 6);
        for r in out.trace.iter().filter(|r| r.iteration % 2 == 1) {
            let Corrupted::Source(j) = r.corrupted else { panic!("odd iteration not corrupted") };
            let max = r.scan_losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(r.scan_losses[j - 1], max);
            assert!((r.loss - r.scan_losses[j - 1]).abs() <= 1e-12);
        }
    }

    #[test]
    fn invalid_configs() {
        let (mut model, data) = linear_setup();
        let mut c = cfg(Algorithm::Asn, 10);
        c.mode = TrainMode::FineTune;
        c.n_clean = 3;
        c.n_tune = 3;
        assert!(train(&mut model, &data, &c).is_err());
        let mut c = cfg(Algorithm::Asn, 10);
        c.lr = 0.0;
        assert!(train(&mut model, &data, &c).is_err());
        assert!("maxssn".parse::<Algorithm>().is_err());
    }

    #[test]
    fn fine_tune_requires_tag_partition() {
        let (mut model, data) = linear_setup();
        let mut c = cfg(Algorithm::Ssn, 4);
        c.mode = TrainMode::FineTune;
        c.n_clean = 2;
        c.n_tune = 2;
        assert!(matches!(train(&mut model, &data, &c), Err(Error::Config(_))));
    }

    #[test]
    fn trace_csv_layout() {
        let trace = vec![TraceRecord {
            iteration: 1,
            phase: Phase::Tune,
            corrupted: Corrupted::Source(2),
            loss: 0.5,
            scan_losses: vec![],
        }];
        assert_eq!(trace_to_csv(&trace), "iteration,phase,corrupted_source,loss\n1,tune,2,0.5\n");
    }
}
