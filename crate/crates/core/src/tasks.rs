//! Synthetic multi-source tasks.
//!
//! Every task renders its sources from latent components: information private
//! to one source plus a shared component visible to all of them. Sources are
//! channel-last maps `[n, a, b, d_i]`; vector-valued sources use `a = b = 1`.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{config_err, Error, Result};
use crate::linear::{generate_linear_data, LatentDistribution, LatentSpec, LinearDataset};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    LinearRegression,
    NonlinearRegression,
    #[default]
    ConvClassification,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::LinearRegression => "linear_regression",
            Self::NonlinearRegression => "nonlinear_regression",
            Self::ConvClassification => "conv_classification",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear_regression" | "linear" => Ok(Self::LinearRegression),
            "nonlinear_regression" | "nonlinear" => Ok(Self::NonlinearRegression),
            "conv_classification" | "conv" => Ok(Self::ConvClassification),
            other => config_err(format!("unknown task kind '{other}'")),
        }
    }
}

/// Description of a synthetic task. Fields irrelevant to `kind` are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub n_train: usize,
    pub n_val: usize,
    pub seed: u64,

    /// Regression weights of the private and shared latents.
    pub beta1: Vec<f64>,
    pub beta2: Vec<f64>,
    pub beta3: Vec<f64>,
    pub latent_dist: LatentDistribution,
    /// Output width of each nonlinear source; empty means `d_i + d3`.
    pub source_widths: Vec<usize>,

    pub height: usize,
    pub width: usize,
    /// Channels per source of the conv task.
    pub depths: Vec<usize>,
    pub classes: usize,
    /// Channels of each view that carry the class pattern; empty means
    /// half of the channels (rounded down, at least one).
    pub shared_channels: Vec<usize>,
    /// Pattern gain per view.
    pub gains: Vec<f64>,
    /// Noise standard deviation on the pattern channels per view.
    pub pattern_noise: Vec<f64>,
    /// Scale of the class-specific part of each template.
    pub class_separation: f64,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        Self {
            kind: TaskKind::ConvClassification,
            n_train: 4000,
            n_val: 1000,
            seed: 0,
            beta1: vec![1.0],
            beta2: vec![2.0],
            beta3: vec![3.0],
            latent_dist: LatentDistribution::StandardNormal,
            source_widths: Vec::new(),
            height: 8,
            width: 8,
            depths: vec![4, 6],
            classes: 4,
            shared_channels: Vec::new(),
            gains: vec![1.0, 0.6],
            pattern_noise: vec![0.1, 0.3],
            class_separation: 0.1,
        }
    }
}

impl SyntheticTask {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_val == 0 {
            return config_err("task.n_train and task.n_val must be >= 1");
        }
        match self.kind {
            TaskKind::LinearRegression | TaskKind::NonlinearRegression => {
                self.latent_spec()?;
                if !self.source_widths.is_empty() && self.source_widths.len() != 2 {
                    return config_err("task.source_widths must list two widths");
                }
                if self.source_widths.contains(&0) {
                    return config_err("task.source_widths must be >= 1");
                }
            }
            TaskKind::ConvClassification => {
                let ns = self.depths.len();
                if ns == 0 || self.depths.contains(&0) {
                    return config_err("task.depths must list at least one positive depth");
                }
                if self.height == 0 || self.width == 0 {
                    return config_err("task.height and task.width must be >= 1");
                }
                if self.classes < 2 {
                    return config_err("task.classes must be >= 2");
                }
                if self.gains.len() != ns || self.pattern_noise.len() != ns {
                    return config_err(format!("task.gains and task.pattern_noise need {ns} entries"));
                }
                if !self.shared_channels.is_empty() {
                    if self.shared_channels.len() != ns {
                        return config_err(format!("task.shared_channels needs {ns} entries"));
                    }
                    if self.shared_channels.iter().zip(&self.depths).any(|(s, d)| s > d) {
                        return config_err("task.shared_channels cannot exceed the source depth");
                    }
                }
            }
        }
        Ok(())
    }

    pub fn latent_spec(&self) -> Result<LatentSpec> {
        LatentSpec::new(self.beta1.clone(), self.beta2.clone(), self.beta3.clone(), 1.0)
    }

    pub fn num_sources(&self) -> usize {
        match self.kind {
            TaskKind::ConvClassification => self.depths.len(),
            _ => 2,
        }
    }

    /// Per-sample shape of every source.
    pub fn source_shapes(&self) -> Vec<Vec<usize>> {
        match self.kind {
            TaskKind::ConvClassification => self
                .depths
                .iter()
                .map(|&d| vec![self.height, self.width, d])
                .collect(),
            TaskKind::LinearRegression => {
                let d3 = self.beta3.len();
                vec![vec![1, 1, self.beta1.len() + d3], vec![1, 1, self.beta2.len() + d3]]
            }
            TaskKind::NonlinearRegression => (0..2).map(|i| vec![1, 1, self.nonlinear_width(i)]).collect(),
        }
    }

    fn nonlinear_width(&self, i: usize) -> usize {
        let private = if i == 0 { self.beta1.len() } else { self.beta2.len() };
        self.source_widths.get(i).copied().unwrap_or(private + self.beta3.len())
    }

    fn shared_for(&self, i: usize) -> usize {
        self.shared_channels
            .get(i)
            .copied()
            .unwrap_or((self.depths[i] / 2).max(1))
    }

    pub fn target(&self) -> Target {
        match self.kind {
            TaskKind::ConvClassification => Target::Classes(self.classes),
            _ => Target::Regression,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Target {
    /// One real output per sample.
    Regression,
    /// Class indices below the given count.
    Classes(usize),
}

/// Batched sources and targets (`[n, 1]`: real values or class indices).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sources: Vec<Tensor>,
    pub target: Tensor,
    pub kind: Target,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.target.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_sources(&self) -> usize {
        self.sources.len()
    }

    /// Population standard deviation of every source.
    pub fn source_std(&self) -> Vec<f64> {
        self.sources.iter().map(Tensor::std).collect()
    }

    pub fn subset(&self, rows: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            sources: self
                .sources
                .iter()
                .map(|s| s.gather_rows(rows))
                .collect::<Result<_>>()?,
            target: self.target.gather_rows(rows)?,
            kind: self.kind,
        })
    }

    fn from_linear(data: &LinearDataset) -> Result<Dataset> {
        let n = data.n;
        Ok(Dataset {
            sources: vec![
                Tensor::new(&[n, 1, 1, data.d1 + data.d3], data.x1.clone())?,
                Tensor::new(&[n, 1, 1, data.d2 + data.d3], data.x2.clone())?,
            ],
            target: Tensor::new(&[n, 1], data.y.clone())?,
            kind: Target::Regression,
        })
    }
}

/// Builds the training and validation sets of `task`; deterministic in
/// `task.seed`.
pub fn make_task(task: &SyntheticTask) -> Result<(Dataset, Dataset)> {
    task.validate()?;
    match task.kind {
        TaskKind::LinearRegression => {
            let spec = task.latent_spec()?;
            let train = generate_linear_data(&spec, task.n_train, task.latent_dist, task.seed)?;
            let val = generate_linear_data(&spec, task.n_val, task.latent_dist, rng::mix(task.seed, 1))?;
            Ok((Dataset::from_linear(&train)?, Dataset::from_linear(&val)?))
        }
        TaskKind::NonlinearRegression => nonlinear_task(task),
        TaskKind::ConvClassification => Ok(conv_task(task)),
    }
}

fn nonlinear_task(task: &SyntheticTask) -> Result<(Dataset, Dataset)> {
    let spec = task.latent_spec()?;
    let (d1, d2, d3) = spec.dims();
    let mut prng = rng::seeded(task.seed, rng::stream::TASK_PARAMS);
    // R_i: [width_i, d_i + d3] with entries N(0, 1 / (d_i + d3))
    let mixing: Vec<(usize, Vec<f64>)> = [d1, d2]
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            let cols = d + d3;
            let rows = task.nonlinear_width(i);
            let dist = Normal::new(0.0, 1.0 / (cols as f64).sqrt()).expect("positive scale");
            (cols, (0..rows * cols).map(|_| dist.sample(&mut prng)).collect())
        })
        .collect();

    let render = |n: usize, seed: u64| -> Result<Dataset> {
        let data = generate_linear_data(&spec, n, task.latent_dist, seed)?;
        let mut sources = Vec::new();
        for (i, (cols, r)) in mixing.iter().enumerate() {
            let rows = r.len() / cols;
            let mut out = Vec::with_capacity(n * rows);
            for s in 0..n {
                let z = if i == 0 { data.x1_row(s) } else { data.x2_row(s) };
                for row in r.chunks_exact(*cols) {
                    out.push(row.iter().zip(z).map(|(a, b)| a * b).sum::<f64>().tanh());
                }
            }
            sources.push(Tensor::new(&[n, 1, 1, rows], out)?);
        }
        Ok(Dataset {
            sources,
            target: Tensor::new(&[n, 1], data.y)?,
            kind: Target::Regression,
        })
    };
    Ok((render(task.n_train, task.seed)?, render(task.n_val, rng::mix(task.seed, 1))?))
}

fn conv_task(task: &SyntheticTask) -> (Dataset, Dataset) {
    let (h, w, k) = (task.height, task.width, task.classes);
    let hw = h * w;
    let mut prng = rng::seeded(task.seed, rng::stream::TASK_PARAMS);
    let base: Vec<f64> = (0..hw).map(|_| StandardNormal.sample(&mut prng)).collect();
    let templates: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            base.iter()
                .map(|b| {
                    let e: f64 = StandardNormal.sample(&mut prng);
                    b + task.class_separation * e
                })
                .collect()
        })
        .collect();

    let mut drng = rng::seeded(task.seed, rng::stream::DATA);
    let mut render = |n: usize| -> Dataset {
        let mut sources: Vec<Vec<f64>> = task.depths.iter().map(|d| Vec::with_capacity(n * hw * d)).collect();
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let c = drng.random_range(0..k);
            let amp = drng.random_range(0.5..1.5);
            labels.push(c as f64);
            for (i, (&d, src)) in task.depths.iter().zip(sources.iter_mut()).enumerate() {
                let shared = task.shared_for(i);
                for p in 0..hw {
                    let s = amp * templates[c][p];
                    for ch in 0..d {
                        let e: f64 = StandardNormal.sample(&mut drng);
                        src.push(if ch < shared {
                            task.gains[i] * s + task.pattern_noise[i] * e
                        } else {
                            e
                        });
                    }
                }
            }
        }
        Dataset {
            sources: sources
                .into_iter()
                .zip(&task.depths)
                .map(|(data, &d)| Tensor::new(&[n, h, w, d], data).expect("consistent shape"))
                .collect(),
            target: Tensor::new(&[n, 1], labels).expect("consistent shape"),
            kind: Target::Classes(k),
        }
    };
    let train = render(task.n_train);
    let val = render(task.n_val);
    (train, val)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_task_delegates() {
        let task = SyntheticTask {
            kind: TaskKind::LinearRegression,
            n_train: 16,
            n_val: 4,
            seed: 3,
            ..SyntheticTask::default()
        };
        let (train, _) = make_task(&task).unwrap();
        let direct = generate_linear_data(&task.latent_spec().unwrap(), 16, LatentDistribution::StandardNormal, 3).unwrap();
        assert_eq!(train.sources[0].data(), &direct.x1[..]);
        assert_eq!(train.sources[1].data(), &direct.x2[..]);
        assert_eq!(train.target.data(), &direct.y[..]);
    }

    #[test]
    fn conv_shapes() {
        let task = SyntheticTask {
            n_train: 10,
            n_val: 5,
            ..SyntheticTask::default()
        };
        let (train, val) = make_task(&task).unwrap();
        assert_eq!(train.sources[0].shape(), &[10, 8, 8, 4]);
        assert_eq!(train.sources[1].shape(), &[10, 8, 8, 6]);
        assert_eq!(val.len(), 5);
        assert!(train.target.data().iter().all(|&c| c >= 0.0 && c < 4.0 && c.fract() == 0.0));
        assert_eq!(task.source_shapes(), vec![vec![8, 8, 4], vec![8, 8, 6]]);
    }

    #[test]
    fn nonlinear_sources_are_bounded_and_deterministic() {
        let task = SyntheticTask {
            kind: TaskKind::NonlinearRegression,
            n_train: 50,
            n_val: 10,
            source_widths: vec![5, 7],
            ..SyntheticTask::default()
        };
        let (a, _) = make_task(&task).unwrap();
        let (b, _) = make_task(&task).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.sources[1].shape(), &[50, 1, 1, 7]);
        assert!(a.sources.iter().all(|s| s.data().iter().all(|v| v.abs() < 1.0)));
    }

    #[test]
    fn invalid_tasks() {
        let mut t = SyntheticTask::default();
        t.n_train = 0;
        assert!(make_task(&t).is_err());
        let mut t = SyntheticTask::default();
        t.gains = vec![1.0];
        assert!(t.validate().is_err());
        assert!("images".parse::<TaskKind>().is_err());
    }
}
