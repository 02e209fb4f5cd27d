//! Robustness evaluation under single-source and all-source corruption.

use std::fmt;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::corruption::{corrupt, CorruptionSpec};
use crate::error::{config_err, Result};
use crate::model::FusionModel;
use crate::rng;
use crate::tasks::{Dataset, Target};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Accuracy,
    NegMse,
}

impl MetricKind {
    pub fn for_target(target: Target) -> Self {
        match target {
            Target::Classes(_) => Self::Accuracy,
            Target::Regression => Self::NegMse,
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Accuracy => "accuracy",
            Self::NegMse => "neg_mse",
        })
    }
}

/// Mean of repeated measurements with a Student-t confidence interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    /// `None` when a single trial leaves no degrees of freedom.
    pub ci: Option<(f64, f64)>,
    pub values: Vec<f64>,
}

impl Estimate {
    pub fn from_values(values: Vec<f64>, confidence: f64) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let ci = (n >= 2).then(|| {
            let half = t_quantile(confidence, n - 1) * sample_sd(&values) / (n as f64).sqrt();
            (mean - half, mean + half)
        });
        Self { mean, ci, values }
    }

    pub fn half_width(&self) -> Option<f64> {
        self.ci.map(|(lo, hi)| (hi - lo) / 2.0)
    }
}

/// Two-sided Student-t critical value, e.g. `t_quantile(0.95, 4) ≈ 2.776`.
pub fn t_quantile(confidence: f64, df: usize) -> f64 {
    let dist = StudentsT::new(0.0, 1.0, df as f64).expect("df >= 1");
    dist.inverse_cdf(0.5 + confidence / 2.0)
}

/// Sample standard deviation (divisor `n − 1`).
pub fn sample_sd(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub metric: MetricKind,
    pub clean: Estimate,
    /// Entry `i`: only source `i + 1` corrupted.
    pub per_source: Vec<Estimate>,
    pub asn: Estimate,
    pub min_metric: f64,
    pub max_diff_metric: f64,
    pub trials: usize,
    pub confidence: f64,
}

impl RobustnessReport {
    /// Worst per-source mean and largest pairwise gap between per-source means.
    pub fn summarise(per_source: &[Estimate]) -> (f64, f64) {
        let means: Vec<f64> = per_source.iter().map(|e| e.mean).collect();
        let min = means.iter().copied().fold(f64::INFINITY, f64::min);
        let mut max_diff: f64 = 0.0;
        for (i, a) in means.iter().enumerate() {
            for b in &means[i + 1..] {
                max_diff = max_diff.max((a - b).abs());
            }
        }
        (min, max_diff)
    }
}

/// Evaluates `model` on `data` clean, with each source corrupted alone, and
/// with all sources corrupted, `trials` times each with fresh noise seeds
/// drawn from `seed`. `specs` must have `tau` resolved, one per source.
pub fn evaluate_robustness(
    model: &mut FusionModel,
    data: &Dataset,
    specs: &[CorruptionSpec],
    trials: usize,
    confidence: f64,
    seed: u64,
) -> Result<RobustnessReport> {
    if trials == 0 {
        return config_err("eval.trials must be >= 1");
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return config_err(format!("eval.confidence must lie in (0, 1), got {confidence}"));
    }
    let ns = data.num_sources();
    if specs.len() != ns {
        return config_err(format!("{} corruption specs for {ns} sources", specs.len()));
    }
    let mut rng = rng::seeded(seed, rng::stream::EVAL);

    let clean = model.metric(&data.sources, &data.target)?;
    let mut per_source = Vec::with_capacity(ns);
    for (j, spec) in specs.iter().enumerate() {
        let mut values = Vec::with_capacity(trials);
        for _ in 0..trials {
            let mut sources = data.sources.clone();
            sources[j] = corrupt(&sources[j], &spec.with_seed(rng.next_u64()))?;
            values.push(model.metric(&sources, &data.target)?);
        }
        per_source.push(Estimate::from_values(values, confidence));
    }
    let mut asn = Vec::with_capacity(trials);
    for _ in 0..trials {
        let sources = data
            .sources
            .iter()
            .zip(specs)
            .map(|(s, spec)| corrupt(s, &spec.with_seed(rng.next_u64())))
            .collect::<Result<Vec<_>>>()?;
        asn.push(model.metric(&sources, &data.target)?);
    }
    let (min_metric, max_diff_metric) = RobustnessReport::summarise(&per_source);
    Ok(RobustnessReport {
        metric: MetricKind::for_target(model.target),
        clean: Estimate::from_values(vec![clean; trials], confidence),
        per_source,
        asn: Estimate::from_values(asn, confidence),
        min_metric,
        max_diff_metric,
        trials,
        confidence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn t_quantile_matches_table() {
        assert!((t_quantile(0.95, 4) - 2.776).abs() < 1e-3);
        assert!((t_quantile(0.95, 1) - 12.706).abs() < 1e-3);
        assert!((t_quantile(0.99, 10) - 3.169).abs() < 1e-3);
    }

    #[test]
    fn interval_width() {
        let values = vec![0.5, 0.7, 0.6, 0.8, 0.4];
        let e = Estimate::from_values(values.clone(), 0.95);
        let sd = sample_sd(&values);
        assert!((e.half_width().unwrap() - 2.776 * sd / 5f64.sqrt()).abs() < 1e-3 * sd);
        assert!(Estimate::from_values(vec![1.0], 0.95).ci.is_none());
    }

    #[test]
    fn summary_fields() {
        let per = vec![
            Estimate::from_values(vec![0.9], 0.95),
            Estimate::from_values(vec![0.6], 0.95),
            Estimate::from_values(vec![0.7], 0.95),
        ];
        let (min, diff) = RobustnessReport::summarise(&per);
        assert_eq!(min, 0.6);
        assert!((diff - 0.3).abs() < 1e-12);
    }
}
