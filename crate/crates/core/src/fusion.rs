//! Fusion of per-source feature maps: element-wise mean, channel
//! concatenation, and the latent ensemble layer (LEL).
//!
//! Feature maps are channel-last. The LEL stacks all `d_sum = Σ d_i` source
//! channels and produces `d_hat = max_i d_i` outputs, output `j` being
//! `φ(w_j · z)` at every spatial position, i.e. a 1×1 convolution followed by
//! an activation. Sparsity of the rows `w_j` is encouraged by an `ℓ1` penalty.

use std::collections::BTreeMap;

use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::diff::{Graph, NodeId, Tag, Tensor};
use crate::error::{config_err, shape_err, Result};
use crate::rng::Rng;

/// Per-source channel-last feature maps sharing their leading dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    sources: Vec<Tensor>,
}

impl FeatureStack {
    pub fn new(sources: Vec<Tensor>) -> Result<Self> {
        let Some(first) = sources.first() else {
            return shape_err("a feature stack needs at least one source");
        };
        if first.rank() == 0 {
            return shape_err("feature maps need a channel axis");
        }
        let lead = &first.shape()[..first.rank() - 1];
        for (i, s) in sources.iter().enumerate() {
            if s.rank() != first.rank() || &s.shape()[..s.rank() - 1] != lead {
                return shape_err(format!(
                    "source {i} has shape {:?}, spatial dims must match {:?}",
                    s.shape(),
                    lead
                ));
            }
            if s.shape()[s.rank() - 1] == 0 {
                return shape_err(format!("source {i} has no channels"));
            }
        }
        Ok(Self { sources })
    }

    pub fn sources(&self) -> &[Tensor] {
        &self.sources
    }

    pub fn depths(&self) -> Vec<usize> {
        self.sources.iter().map(|s| *s.shape().last().unwrap()).collect()
    }

    pub fn d_sum(&self) -> usize {
        self.depths().iter().sum()
    }

    pub fn d_hat(&self) -> usize {
        self.depths().into_iter().max().unwrap()
    }

    /// Runs `build` on a graph with one input per source, treating each map
    /// as a batch of one.
    fn apply(&self, build: impl FnOnce(&mut Graph, &[NodeId]) -> Result<NodeId>) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut nodes = Vec::new();
        let mut inputs = BTreeMap::new();
        for (i, s) in self.sources.iter().enumerate() {
            let name = format!("s{i}");
            nodes.push(g.input(&name, s.shape())?);
            let batched: Vec<usize> = std::iter::once(1).chain(s.shape().iter().copied()).collect();
            inputs.insert(name, s.clone().reshape(&batched)?);
        }
        let out = build(&mut g, &nodes)?;
        g.output("out", out)?;
        let shape = g.shape(out).to_vec();
        g.forward(&inputs)?.remove("out").unwrap().reshape(&shape)
    }
}

/// Activation applied after the LEL mixing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LelParams {
    /// `[d_hat, d_sum]`; row `j` is `w_j`.
    pub weights: Tensor,
    pub l1_coeff: f64,
    /// Target `‖w_j‖₀ ≤ t`; reported, never enforced.
    pub sparsity_target: Option<usize>,
}

impl LelParams {
    pub fn new(weights: Tensor, l1_coeff: f64) -> Result<Self> {
        if weights.rank() != 2 {
            return shape_err(format!("LEL weights must be a matrix, got shape {:?}", weights.shape()));
        }
        if !(l1_coeff.is_finite() && l1_coeff >= 0.0) {
            return config_err(format!("l1 coefficient must be >= 0, got {l1_coeff}"));
        }
        if weights.data().iter().any(|w| !w.is_finite()) {
            return config_err("LEL weights must be finite");
        }
        Ok(Self {
            weights,
            l1_coeff,
            sparsity_target: None,
        })
    }

    /// The weights that make the LEL (with identity activation) compute the
    /// element-wise mean: output `j` takes `1/n_s` of channel `j` of every
    /// source that has one.
    pub fn mean_pattern(depths: &[usize]) -> Tensor {
        let d_hat = depths.iter().copied().max().unwrap_or(0);
        let d_sum: usize = depths.iter().sum();
        let n_s = depths.len() as f64;
        let mut w = Tensor::zeros(&[d_hat, d_sum]);
        let mut off = 0;
        for &d in depths {
            for j in 0..d {
                w.data_mut()[j * d_sum + off + j] = 1.0 / n_s;
            }
            off += d;
        }
        w
    }

    /// Mean pattern plus uniform noise in `±noise`.
    pub fn mean_init(depths: &[usize], noise: f64, l1_coeff: f64, rng: &mut Rng) -> Result<Self> {
        let mut w = Self::mean_pattern(depths);
        if noise > 0.0 {
            let dist = Uniform::new_inclusive(-noise, noise).expect("finite noise");
            w.data_mut().iter_mut().for_each(|x| *x += dist.sample(rng));
        }
        Self::new(w, l1_coeff)
    }

    pub fn penalty(&self) -> f64 {
        self.l1_coeff * self.weights.data().iter().map(|w| w.abs()).sum::<f64>()
    }
}

/// Channel-wise mean; all sources must have the same depth.
pub fn fuse_mean(stack: &FeatureStack) -> Result<Tensor> {
    stack.apply(mean_node)
}

/// Channel concatenation in source order.
pub fn fuse_concat(stack: &FeatureStack) -> Result<Tensor> {
    stack.apply(|g, nodes| g.concat(nodes))
}

/// `[ẑ]_j = φ(w_j · z)` over the stacked channels.
pub fn fuse_lel(stack: &FeatureStack, params: &LelParams, activation: Activation) -> Result<Tensor> {
    let ws = params.weights.shape();
    if ws[1] != stack.d_sum() {
        return shape_err(format!(
            "LEL weights have {} columns, stack has {} channels",
            ws[1],
            stack.d_sum()
        ));
    }
    let weights = params.weights.clone();
    stack.apply(|g, nodes| {
        let w = g.add_param("lel.w", Tag::Fusion, weights)?;
        let (out, _) = lel_node(g, nodes, w, 0.0, activation)?;
        Ok(out)
    })
}

/// Graph node for [`fuse_mean`].
pub fn mean_node(g: &mut Graph, sources: &[NodeId]) -> Result<NodeId> {
    let depths: Vec<usize> = sources.iter().map(|&s| *g.shape(s).last().unwrap_or(&0)).collect();
    if depths.windows(2).any(|w| w[0] != w[1]) {
        return shape_err(format!("mean fusion needs equal source depths, got {depths:?}"));
    }
    g.mean_of(sources)
}

/// Graph nodes for the LEL: returns the fused node and the `ℓ1` penalty
/// node (to be added to the training loss).
pub fn lel_node(
    g: &mut Graph,
    sources: &[NodeId],
    weights: crate::diff::ParamId,
    l1_coeff: f64,
    activation: Activation,
) -> Result<(NodeId, NodeId)> {
    let stacked = g.concat(sources)?;
    let mixed = g.affine(stacked, weights, None)?;
    let out = match activation {
        Activation::Relu => g.relu(mixed)?,
        Activation::Identity => mixed,
    };
    let penalty = g.l1_penalty(weights, l1_coeff)?;
    Ok((out, penalty))
}

/// Number of entries with `|w| > threshold` in every row of the LEL weights.
pub fn lel_sparsity_report(params: &LelParams, threshold: f64) -> Result<Vec<usize>> {
    if !(threshold > 0.0) {
        return config_err(format!("threshold must be > 0, got {threshold}"));
    }
    let cols = params.weights.shape()[1];
    Ok(params
        .weights
        .data()
        .chunks_exact(cols.max(1))
        .map(|row| row.iter().filter(|w| w.abs() > threshold).count())
        .collect())
}

/// Default reporting threshold for [`lel_sparsity_report`].
pub const SPARSITY_THRESHOLD: f64 = 1e-3;
