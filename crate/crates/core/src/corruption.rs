//! Corruption generators for a single source.
//!
//! Tensors are batched (`[n, ...]`); the downsampling axis counts per-sample
//! axes, so `axis = 0` is the first axis after the batch axis.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{config_err, shape_err, Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CorruptionKind {
    #[default]
    Gaussian,
    Downsample,
    None,
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Gaussian => "gaussian",
            Self::Downsample => "downsample",
            Self::None => "none",
        })
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "downsample" => Ok(Self::Downsample),
            "none" => Ok(Self::None),
            other => config_err(format!("unknown corruption kind '{other}'")),
        }
    }
}

/// Whether Gaussian noise is drawn independently for every sample of a batch
/// or once per batch and shared by all its samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseScope {
    #[default]
    PerSample,
    PerBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    /// Reference scale of the source; `None` until resolved from data.
    pub tau: Option<f64>,
    /// Gaussian standard deviation is `factor · tau`.
    pub factor: f64,
    pub keep_ratio: f64,
    pub axis: usize,
    pub scope: NoiseScope,
    pub seed: u64,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        Self {
            kind: CorruptionKind::Gaussian,
            tau: None,
            factor: 0.75,
            keep_ratio: 0.25,
            axis: 0,
            scope: NoiseScope::PerSample,
            seed: 0,
        }
    }
}

impl CorruptionSpec {
    pub fn none() -> Self {
        Self {
            kind: CorruptionKind::None,
            ..Self::default()
        }
    }

    pub fn gaussian(tau: f64, factor: f64) -> Self {
        Self {
            tau: Some(tau),
            factor,
            ..Self::default()
        }
    }

    pub fn downsample(keep_ratio: f64, axis: usize) -> Self {
        Self {
            kind: CorruptionKind::Downsample,
            keep_ratio,
            axis,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.factor.is_finite() && self.factor >= 0.0) {
            return config_err(format!("factor must be >= 0, got {}", self.factor));
        }
        if !(self.keep_ratio > 0.0 && self.keep_ratio <= 1.0) {
            return config_err(format!("keep_ratio must lie in (0, 1], got {}", self.keep_ratio));
        }
        if let Some(t) = self.tau {
            if !(t.is_finite() && t >= 0.0) {
                return config_err(format!("tau must be >= 0, got {t}"));
            }
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    /// Fills in `tau` when it is unset.
    pub fn resolved(&self, default_tau: f64) -> Self {
        Self {
            tau: Some(self.tau.unwrap_or(default_tau)),
            ..self.clone()
        }
    }

    /// Spacing between retained indices when downsampling.
    pub fn stride(&self) -> usize {
        ((1.0 / self.keep_ratio).round() as usize).max(1)
    }

    pub fn is_identity(&self) -> bool {
        match self.kind {
            CorruptionKind::None => true,
            CorruptionKind::Gaussian => self.factor == 0.0 || self.tau == Some(0.0),
            CorruptionKind::Downsample => self.stride() == 1,
        }
    }
}

/// Applies `spec` to a batched tensor. The result depends only on `x` and
/// `spec` (including its seed).
pub fn corrupt(x: &Tensor, spec: &CorruptionSpec) -> Result<Tensor> {
    spec.validate()?;
    match spec.kind {
        CorruptionKind::None => Ok(x.clone()),
        CorruptionKind::Gaussian => {
            let tau = spec
                .tau
                .ok_or_else(|| Error::Config("gaussian corruption needs a resolved tau".into()))?;
            let sd = spec.factor * tau;
            if sd == 0.0 {
                return Ok(x.clone());
            }
            let mut rng = rng::seeded(spec.seed, rng::stream::NOISE);
            let mut out = x.clone();
            match spec.scope {
                NoiseScope::PerSample => {
                    for v in out.data_mut() {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        *v += sd * e;
                    }
                }
                NoiseScope::PerBatch => {
                    let n = x.shape().first().copied().unwrap_or(1).max(1);
                    let width = x.numel() / n;
                    let field: Vec<f64> = (0..width)
                        .map(|_| {
                            let e: f64 = StandardNormal.sample(&mut rng);
                            sd * e
                        })
                        .collect();
                    for row in out.data_mut().chunks_exact_mut(width.max(1)) {
                        row.iter_mut().zip(&field).for_each(|(v, e)| *v += e);
                    }
                }
            }
            Ok(out)
        }
        CorruptionKind::Downsample => {
            let axis = spec.axis + 1;
            if axis >= x.rank() {
                return shape_err(format!(
                    "downsample axis {} out of range for per-sample shape {:?}",
                    spec.axis,
                    &x.shape()[1.min(x.rank())..]
                ));
            }
            let stride = spec.stride();
            let len = x.shape()[axis];
            let inner: usize = x.shape()[axis + 1..].iter().product();
            let mut out = x.clone();
            for (i, chunk) in out.data_mut().chunks_exact_mut(inner).enumerate() {
                if !(i % len).is_multiple_of(stride) {
                    chunk.iter_mut().for_each(|v| *v = 0.0);
                }
            }
            Ok(out)
        }
    }
}
