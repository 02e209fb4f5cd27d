//! Training and evaluation runs.
//!
//! Layout under `output`:
//!
//! ```text
//! <algorithm>/seed-<s>/summary.csv   one row per metric
//! <algorithm>/seed-<s>/report.json   full RobustnessReport
//! <algorithm>/seed-<s>/trace.csv     iteration,phase,corrupted_source,loss
//! <algorithm>/seed-<s>/checkpoint    trained parameters
//! <algorithm>/seed-<s>/FAILED        only when training diverged
//! table.csv, table.txt               aggregate over seeds
//! ```
//!
//! The dataset is generated once from `task.seed`; each run seed drives the
//! model initialisation, the batch and noise streams and the evaluation
//! noise.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corruption::CorruptionSpec;
use crate::diff::checkpoint;
use crate::error::{config_err, Error, Result};
use crate::metrics::{evaluate_robustness, Estimate, MetricKind, RobustnessReport};
use crate::model::FusionModel;
use crate::tasks::{make_task, Dataset};
use crate::training::{train, trace_to_csv, Algorithm, TrainConfig};

use super::config::ExperimentConfig;

pub const SUMMARY_HEADER: &str = "algorithm,fusion,seed,metric_kind,source,mean,ci_low,ci_high";
pub const TABLE_HEADER: &str = "algorithm,fusion,group,seeds,failed,median,mean,ci_low,ci_high";

/// Column groups of the aggregate table.
pub const GROUPS: [&str; 4] = ["clean", "asn", "ssn_min", "ssn_max_diff"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SeedOutcome {
    Completed(RobustnessReport),
    Diverged { iteration: usize, loss: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub dir: PathBuf,
    pub outcome: SeedOutcome,
}

impl SeedResult {
    pub fn report(&self) -> Option<&RobustnessReport> {
        match &self.outcome {
            SeedOutcome::Completed(r) => Some(r),
            SeedOutcome::Diverged { .. } => None,
        }
    }
}

/// One cell group of the aggregate table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub algorithm: Algorithm,
    pub group: String,
    pub seeds: usize,
    pub failed: usize,
    pub median: f64,
    pub mean: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub results: Vec<SeedResult>,
    pub table: Vec<TableRow>,
}

impl RunSummary {
    pub fn diverged(&self) -> bool {
        self.results.iter().any(|r| r.report().is_none())
    }

    pub fn row(&self, algorithm: Algorithm, group: &str) -> Option<&TableRow> {
        self.table.iter().find(|r| r.algorithm == algorithm && r.group == group)
    }

    pub fn reports(&self, algorithm: Algorithm) -> Vec<&RobustnessReport> {
        self.results
            .iter()
            .filter(|r| r.algorithm == algorithm)
            .filter_map(SeedResult::report)
            .collect()
    }
}

/// Runs `cfg.train.algorithm` for every seed.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<RunSummary> {
    run_algorithms(cfg, &[cfg.train.algorithm])
}

/// Runs every algorithm of `cfg.algorithms` for every seed.
pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<RunSummary> {
    run_algorithms(cfg, &cfg.algorithms)
}

pub fn run_algorithms(cfg: &ExperimentConfig, algorithms: &[Algorithm]) -> Result<RunSummary> {
    cfg.validate()?;
    if algorithms.is_empty() {
        return config_err("no algorithms to run");
    }
    let (train_set, val_set) = make_task(&cfg.task)?;
    let jobs: Vec<(Algorithm, u64)> = algorithms
        .iter()
        .flat_map(|&a| cfg.seeds.iter().map(move |&s| (a, s)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(a, s)| run_seed(cfg, a, s, &train_set, &val_set))
        .collect::<Result<Vec<_>>>()?;
    let table = aggregate(&results, algorithms, cfg.eval.confidence);
    let fusion = cfg.model.fusion.to_string();
    fs::create_dir_all(&cfg.output)?;
    fs::write(cfg.output.join("table.csv"), table_csv(&table, &fusion, cfg)?)?;
    fs::write(cfg.output.join("table.txt"), table_text(&table, &fusion))?;
    Ok(RunSummary { results, table })
}

/// Broadcasts a one-entry list and fills unset `tau` from `taus`.
pub fn resolve_specs(list: &[CorruptionSpec], taus: &[f64]) -> Result<Vec<CorruptionSpec>> {
    if list.is_empty() || (list.len() != 1 && list.len() != taus.len()) {
        return config_err(format!("{} corruption entries for {} sources", list.len(), taus.len()));
    }
    Ok(taus
        .iter()
        .enumerate()
        .map(|(i, &t)| list[i.min(list.len() - 1)].resolved(t))
        .collect())
}

/// The config as run: algorithm fixed and every corruption resolved per
/// source.
pub fn resolved_config(cfg: &ExperimentConfig, algorithm: Algorithm, taus: &[f64]) -> Result<ExperimentConfig> {
    let mut out = cfg.clone();
    out.train.algorithm = algorithm;
    out.train.corruption = resolve_specs(&cfg.train.corruption, taus)?;
    out.eval.corruption = resolve_specs(cfg.eval_corruption(), taus)?;
    Ok(out)
}

pub fn seed_dir(output: &Path, algorithm: Algorithm, seed: u64) -> PathBuf {
    output.join(algorithm.as_str()).join(format!("seed-{seed}"))
}

fn run_seed(
    cfg: &ExperimentConfig,
    algorithm: Algorithm,
    seed: u64,
    train_set: &Dataset,
    val_set: &Dataset,
) -> Result<SeedResult> {
    let dir = seed_dir(&cfg.output, algorithm, seed);
    fs::create_dir_all(&dir)?;
    let _ = fs::remove_file(dir.join("FAILED"));
    let taus = train_set.source_std();
    let resolved = resolved_config(cfg, algorithm, &taus)?;
    let mut model = FusionModel::build(&cfg.model, &cfg.task.source_shapes(), cfg.task.target(), seed)?;
    let tcfg = TrainConfig {
        algorithm,
        seed,
        ..resolved.train.clone()
    };
    let outcome = match train(&mut model, train_set, &tcfg) {
        Ok(o) => o,
        Err(Error::Diverged { iteration, loss }) => {
            checkpoint::save(model.graph.params(), &dir.join("checkpoint"))?;
            fs::write(
                dir.join("FAILED"),
                format!("training diverged at iteration {iteration}: loss = {loss}\n"),
            )?;
            return Ok(SeedResult {
                algorithm,
                seed,
                dir,
                outcome: SeedOutcome::Diverged { iteration, loss },
            });
        }
        Err(e) => return Err(e),
    };
    let report = evaluate_robustness(
        &mut model,
        val_set,
        &resolved.eval.corruption,
        cfg.eval.trials,
        cfg.eval.confidence,
        seed,
    )?;
    let header = provenance(&resolved, algorithm, seed, report.metric)?;
    let fusion = cfg.model.fusion.to_string();
    fs::write(dir.join("summary.csv"), header + &summary_rows(&report, algorithm, &fusion, seed))?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Io(e.to_string()))?;
    fs::write(dir.join("report.json"), json + "\n")?;
    fs::write(dir.join("trace.csv"), trace_to_csv(&outcome.trace))?;
    checkpoint::save(model.graph.params(), &dir.join("checkpoint"))?;
    Ok(SeedResult {
        algorithm,
        seed,
        dir,
        outcome: SeedOutcome::Completed(report),
    })
}

fn provenance(resolved: &ExperimentConfig, algorithm: Algorithm, seed: u64, metric: MetricKind) -> Result<String> {
    let mut out = String::new();
    writeln!(out, "# ssrobust run: algorithm = {algorithm}, seed = {seed}, metric = {metric}").unwrap();
    writeln!(out, "# seeds = {:?}", resolved.seeds).unwrap();
    writeln!(out, "# resolved config:").unwrap();
    for line in resolved.to_toml()?.lines() {
        writeln!(out, "#   {line}").unwrap();
    }
    Ok(out)
}

fn fmt_ci(ci: Option<(f64, f64)>) -> (String, String) {
    match ci {
        Some((lo, hi)) => (format!("{lo:?}"), format!("{hi:?}")),
        None => ("NA".into(), "NA".into()),
    }
}

/// `SUMMARY_HEADER` rows: `clean`, one `ssn` row per source, `asn`,
/// `ssn_min` and `ssn_max_diff`.
pub fn summary_rows(report: &RobustnessReport, algorithm: Algorithm, fusion: &str, seed: u64) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    let mut row = |kind: &str, source: &str, mean: f64, ci: Option<(f64, f64)>| {
        let (lo, hi) = fmt_ci(ci);
        writeln!(out, "{algorithm},{fusion},{seed},{kind},{source},{mean:?},{lo},{hi}").unwrap();
    };
    row("clean", "-", report.clean.mean, report.clean.ci);
    for (i, e) in report.per_source.iter().enumerate() {
        row("ssn", &(i + 1).to_string(), e.mean, e.ci);
    }
    row("asn", "all", report.asn.mean, report.asn.ci);
    row("ssn_min", "-", report.min_metric, None);
    row("ssn_max_diff", "-", report.max_diff_metric, None);
    out
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn group_value(report: &RobustnessReport, group: &str) -> f64 {
    match group {
        "clean" => report.clean.mean,
        "asn" => report.asn.mean,
        "ssn_min" => report.min_metric,
        "ssn_max_diff" => report.max_diff_metric,
        other => panic!("unknown group {other}"),
    }
}

fn aggregate(results: &[SeedResult], algorithms: &[Algorithm], confidence: f64) -> Vec<TableRow> {
    let mut table = Vec::new();
    for &a in algorithms {
        let runs: Vec<&SeedResult> = results.iter().filter(|r| r.algorithm == a).collect();
        let reports: Vec<&RobustnessReport> = runs.iter().filter_map(|r| r.report()).collect();
        let failed = runs.len() - reports.len();
        if reports.is_empty() {
            continue;
        }
        for group in GROUPS {
            let values: Vec<f64> = reports.iter().map(|r| group_value(r, group)).collect();
            table.push(TableRow {
                algorithm: a,
                group: group.into(),
                seeds: values.len(),
                failed,
                median: median(&values),
                mean: Estimate::from_values(values, confidence),
            });
        }
    }
    table
}

fn table_csv(table: &[TableRow], fusion: &str, cfg: &ExperimentConfig) -> Result<String> {
    let mut out = String::new();
    writeln!(out, "# ssrobust table over seeds {:?}", cfg.seeds).unwrap();
    writeln!(out, "# config:").unwrap();
    for line in cfg.to_toml()?.lines() {
        writeln!(out, "#   {line}").unwrap();
    }
    writeln!(out, "{TABLE_HEADER}").unwrap();
    for r in table {
        let (lo, hi) = fmt_ci(r.mean.ci);
        writeln!(
            out,
            "{},{fusion},{},{},{},{:?},{:?},{lo},{hi}",
            r.algorithm, r.group, r.seeds, r.failed, r.median, r.mean.mean
        )
        .unwrap();
    }
    Ok(out)
}

/// Rows are algorithms; each column group shows `median [mean ± half-width]`.
pub fn table_text(table: &[TableRow], fusion: &str) -> String {
    let mut out = format!("fusion = {fusion}\n{:<10}", "algorithm");
    for g in GROUPS {
        write!(out, " {g:>26}").unwrap();
    }
    out.push('\n');
    let mut algorithms: Vec<Algorithm> = table.iter().map(|r| r.algorithm).collect();
    algorithms.dedup();
    for a in algorithms {
        write!(out, "{:<10}", a.as_str()).unwrap();
        for g in GROUPS {
            let cell = table
                .iter()
                .find(|r| r.algorithm == a && r.group == g)
                .map(|r| match r.mean.half_width() {
                    Some(h) => format!("{:.4} [{:.4}±{:.4}]", r.median, r.mean.mean, h),
                    None => format!("{:.4} [{:.4}]", r.median, r.mean.mean),
                })
                .unwrap_or_default();
            write!(out, " {cell:>26}").unwrap();
        }
        out.push('\n');
    }
    out
}
