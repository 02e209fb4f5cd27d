//! Fusion networks assembled on the tensor core.
//!
//! Layout: per-source extractor (1×1 conv + ReLU stacks) → fusion (mean,
//! concat or LEL) → head (1×1 conv + ReLU stacks) → flatten or spatial mean
//! pool → dense output. Parameters are tagged `extractor`, `fusion` and `head`
//! so that fine-tuning can freeze the extractors.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diff::{xavier_uniform, Gradients, Graph, NodeId, ParamId, Tag, Tensor};
use crate::error::{config_err, shape_err, Error, Result};
use crate::fusion::{lel_node, mean_node, Activation, LelParams};
use crate::linear::FusionSolution;
use crate::rng;
use crate::tasks::Target;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    #[default]
    Mean,
    Concat,
    Lel,
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mean => "mean",
            Self::Concat => "concat",
            Self::Lel => "lel",
        })
    }
}

impl FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "concat" => Ok(Self::Concat),
            "lel" => Ok(Self::Lel),
            other => config_err(format!("unknown fusion kind '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    #[default]
    Flatten,
    MeanPool,
}

/// Architecture descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub fusion: FusionKind,
    /// Widths of the 1×1 conv layers of each source's extractor. A missing
    /// entry repeats the last one; `[[]]` means no extractor. `None` in
    /// place of the whole list keeps every source at its own depth with one
    /// layer.
    pub extractor_widths: Option<Vec<Vec<usize>>>,
    pub head_widths: Vec<usize>,
    pub readout: Readout,
    pub output_bias: bool,
    pub lel_l1: f64,
    pub lel_init_noise: f64,
    pub lel_activation: Activation,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            fusion: FusionKind::Mean,
            extractor_widths: None,
            head_widths: vec![8],
            readout: Readout::Flatten,
            output_bias: true,
            lel_l1: 0.01,
            lel_init_noise: 0.01,
            lel_activation: Activation::Relu,
        }
    }
}

impl ModelSpec {
    /// Concatenation straight into a bias-free linear output, so the output
    /// weights are exactly `[w1; g1; w2; g2]`.
    pub fn linear() -> Self {
        Self {
            fusion: FusionKind::Concat,
            extractor_widths: Some(vec![Vec::new()]),
            head_widths: Vec::new(),
            readout: Readout::Flatten,
            output_bias: false,
            ..Self::default()
        }
    }

    fn extractor_for(&self, i: usize, depth: usize) -> Vec<usize> {
        match &self.extractor_widths {
            None => vec![depth],
            Some(list) => list.get(i).or(list.last()).cloned().unwrap_or_default(),
        }
    }

    /// Depth of each source's features entering the fusion layer.
    pub fn fused_depths(&self, source_shapes: &[Vec<usize>]) -> Vec<usize> {
        source_shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let d = *s.last().unwrap_or(&0);
                self.extractor_for(i, d).last().copied().unwrap_or(d)
            })
            .collect()
    }

    pub fn validate(&self, source_shapes: &[Vec<usize>]) -> Result<()> {
        if source_shapes.is_empty() {
            return config_err("model needs at least one source");
        }
        let depths = self.fused_depths(source_shapes);
        if self.fusion == FusionKind::Mean && depths.windows(2).any(|w| w[0] != w[1]) {
            return config_err(format!(
                "model.fusion = mean requires equal per-source feature depths, got {depths:?}"
            ));
        }
        if !(self.lel_l1.is_finite() && self.lel_l1 >= 0.0) {
            return config_err("model.lel_l1 must be >= 0");
        }
        if self
            .extractor_widths
            .iter()
            .flatten()
            .flatten()
            .chain(&self.head_widths)
            .any(|&w| w == 0)
        {
            return config_err("layer widths must be >= 1");
        }
        Ok(())
    }
}

/// A built network with its loss nodes.
#[derive(Debug, Clone)]
pub struct FusionModel {
    pub graph: Graph,
    pub spec: ModelSpec,
    pub target: Target,
    source_names: Vec<String>,
    source_shapes: Vec<Vec<usize>>,
    output: NodeId,
    task_loss: NodeId,
    total_loss: NodeId,
    lel_weights: Option<ParamId>,
}

pub const TARGET_INPUT: &str = "y";

impl FusionModel {
    pub fn build(spec: &ModelSpec, source_shapes: &[Vec<usize>], target: Target, seed: u64) -> Result<Self> {
        spec.validate(source_shapes)?;
        let mut rng = rng::seeded(seed, rng::stream::INIT);
        let mut g = Graph::new();
        let dense = |g: &mut Graph, x: NodeId, out: usize, name: &str, tag: Tag, bias: bool, rng: &mut rng::Rng| -> Result<NodeId> {
            let fan_in = *g.shape(x).last().unwrap();
            let w = g.add_param(&format!("{name}.w"), tag, xavier_uniform(rng, out, fan_in))?;
            let b = if bias {
                Some(g.add_param(&format!("{name}.b"), tag, Tensor::zeros(&[out]))?)
            } else {
                None
            };
            g.affine(x, w, b)
        };

        let mut source_names = Vec::new();
        let mut features = Vec::new();
        for (i, shape) in source_shapes.iter().enumerate() {
            let name = format!("x{}", i + 1);
            let mut h = g.input(&name, shape)?;
            source_names.push(name);
            let depth = *shape.last().ok_or_else(|| Error::Shape(format!("source {} has no channel axis", i + 1)))?;
            for (k, &wid) in spec.extractor_for(i, depth).iter().enumerate() {
                let z = dense(&mut g, h, wid, &format!("ext{}.conv{k}", i + 1), Tag::Extractor, true, &mut rng)?;
                h = g.relu(z)?;
            }
            features.push(h);
        }

        let mut penalties = Vec::new();
        let mut lel_weights = None;
        let mut h = match spec.fusion {
            FusionKind::Mean => mean_node(&mut g, &features)?,
            FusionKind::Concat => g.concat(&features)?,
            FusionKind::Lel => {
                let depths: Vec<usize> = features.iter().map(|&f| *g.shape(f).last().unwrap()).collect();
                let init = LelParams::mean_init(&depths, spec.lel_init_noise, spec.lel_l1, &mut rng)?;
                let w = g.add_param("fusion.lel.w", Tag::Fusion, init.weights)?;
                let (out, pen) = lel_node(&mut g, &features, w, spec.lel_l1, spec.lel_activation)?;
                penalties.push(pen);
                lel_weights = Some(w);
                out
            }
        };

        for (k, &wid) in spec.head_widths.iter().enumerate() {
            let z = dense(&mut g, h, wid, &format!("head.conv{k}"), Tag::Head, true, &mut rng)?;
            h = g.relu(z)?;
        }
        h = match spec.readout {
            Readout::Flatten => g.flatten(h)?,
            Readout::MeanPool => {
                if g.shape(h).len() >= 2 {
                    g.spatial_mean_pool(h)?
                } else {
                    h
                }
            }
        };
        let out_dim = match target {
            Target::Regression => 1,
            Target::Classes(k) => k,
        };
        let output = dense(&mut g, h, out_dim, "head.out", Tag::Head, spec.output_bias, &mut rng)?;
        let y = g.input(TARGET_INPUT, &[1])?;
        let task_loss = match target {
            Target::Regression => g.mse(output, y)?,
            Target::Classes(_) => g.softmax_ce(output, y)?,
        };
        let mut terms = vec![task_loss];
        terms.extend(penalties);
        let total_loss = g.sum(&terms)?;
        g.output("pred", output)?;
        Ok(Self {
            graph: g,
            spec: spec.clone(),
            target,
            source_names,
            source_shapes: source_shapes.to_vec(),
            output,
            task_loss,
            total_loss,
            lel_weights,
        })
    }

    pub fn num_sources(&self) -> usize {
        self.source_names.len()
    }

    pub fn source_shapes(&self) -> &[Vec<usize>] {
        &self.source_shapes
    }

    pub fn total_loss_node(&self) -> NodeId {
        self.total_loss
    }

    fn inputs(&self, sources: &[Tensor], target: &Tensor) -> Result<BTreeMap<String, Tensor>> {
        if sources.len() != self.source_names.len() {
            return shape_err(format!("model has {} sources, got {}", self.source_names.len(), sources.len()));
        }
        let mut map: BTreeMap<String, Tensor> = self
            .source_names
            .iter()
            .cloned()
            .zip(sources.iter().cloned())
            .collect();
        map.insert(TARGET_INPUT.to_string(), target.clone());
        Ok(map)
    }

    /// Forward pass; returns `(task loss, total loss)`.
    pub fn loss(&mut self, sources: &[Tensor], target: &Tensor) -> Result<(f64, f64)> {
        let inputs = self.inputs(sources, target)?;
        self.graph.forward_values(&inputs)?;
        Ok((self.graph.scalar(self.task_loss)?, self.graph.scalar(self.total_loss)?))
    }

    /// Forward and backward of the total loss.
    pub fn loss_and_grads(&mut self, sources: &[Tensor], target: &Tensor) -> Result<(f64, f64, Gradients)> {
        let (task, total) = self.loss(sources, target)?;
        let grads = self.graph.backward(self.total_loss)?;
        Ok((task, total, grads))
    }

    /// Raw outputs `[n, out]`.
    pub fn predict(&mut self, sources: &[Tensor]) -> Result<Tensor> {
        let n = sources.first().map(|s| s.shape()[0]).unwrap_or(0);
        let dummy = Tensor::zeros(&[n, 1]);
        let inputs = self.inputs(sources, &dummy)?;
        self.graph.forward_values(&inputs)?;
        self.graph.value(self.output)
    }

    /// Task metric, higher is better: accuracy for classification, negative
    /// mean squared error for regression. Evaluated in chunks.
    pub fn metric(&mut self, sources: &[Tensor], target: &Tensor) -> Result<f64> {
        const CHUNK: usize = 500;
        let n = target.shape()[0];
        let mut acc = 0.0;
        let mut start = 0;
        while start < n {
            let rows: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
            let part: Vec<Tensor> = sources.iter().map(|s| s.gather_rows(&rows)).collect::<Result<_>>()?;
            let pred = self.predict(&part)?;
            let t = target.gather_rows(&rows)?;
            match self.target {
                Target::Regression => {
                    acc -= pred.data().iter().zip(t.data()).map(|(p, y)| (p - y).powi(2)).sum::<f64>();
                }
                Target::Classes(k) => {
                    for (row, &y) in pred.data().chunks_exact(k).zip(t.data()) {
                        if argmax(row) == y as usize {
                            acc += 1.0;
                        }
                    }
                }
            }
            start += CHUNK;
        }
        Ok(acc / n as f64)
    }

    pub fn lel_params(&self) -> Option<LelParams> {
        let w = self.lel_weights?;
        LelParams::new(self.graph.params().by_id(w).value.clone(), self.spec.lel_l1).ok()
    }

    /// Reads `[w1; g1]` and `[w2; g2]` off a model built with
    /// [`ModelSpec::linear`] on a two-source linear task with dims
    /// `(d1, d2, d3)`.
    pub fn linear_solution(&self, d1: usize, d2: usize, d3: usize) -> Result<FusionSolution> {
        let p = self
            .graph
            .params()
            .get("head.out.w")
            .ok_or_else(|| Error::State("model has no output layer".into()))?;
        let w = p.value.data();
        if self.spec != ModelSpec::linear() || w.len() != d1 + d2 + 2 * d3 {
            return Err(Error::Precondition("not a linear fusion model of these dimensions".into()));
        }
        Ok(FusionSolution {
            w1: w[..d1].to_vec(),
            g1: w[d1..d1 + d3].to_vec(),
            w2: w[d1 + d3..d1 + d3 + d2].to_vec(),
            g2: w[d1 + d3 + d2..].to_vec(),
        })
    }
}

/// Index of the largest entry; the first one on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
