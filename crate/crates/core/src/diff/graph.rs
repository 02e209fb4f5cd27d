use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::adversarial::sign;
use crate::error::{config_err, shape_err, Error, Result};

pub type NodeId = usize;
pub type ParamId = usize;

/// Partition of model parameters used to freeze parts of a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tag {
    Extractor,
    Fusion,
    Head,
}

impl Tag {
    pub const ALL: [Tag; 3] = [Tag::Extractor, Tag::Fusion, Tag::Head];

    pub fn as_str(self) -> &'static str {
        match self {
            Tag::Extractor => "extractor",
            Tag::Fusion => "fusion",
            Tag::Head => "head",
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Tag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "extractor" => Ok(Tag::Extractor),
            "fusion" => Ok(Tag::Fusion),
            "head" => Ok(Tag::Head),
            other => config_err(format!("unknown parameter tag '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tag: Tag,
    pub value: Tensor,
}

/// Named parameters; every parameter carries exactly one tag.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn insert(&mut self, name: &str, tag: Tag, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return config_err(format!("duplicate parameter name '{name}'"));
        }
        let id = self.params.len();
        self.params.push(Param {
            name: name.to_string(),
            tag,
            value,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.id(name).map(move |i| &mut self.params[i])
    }

    pub fn by_id(&self, id: ParamId) -> &Param {
        &self.params[id]
    }

    pub fn by_id_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id]
    }

    /// Parameters in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn tags(&self) -> Vec<Tag> {
        let mut tags: Vec<Tag> = self.params.iter().map(|p| p.tag).collect();
        tags.sort();
        tags.dedup();
        tags
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

/// Gradient registry keyed by parameter name.
pub type Gradients = BTreeMap<String, Vec<f64>>;

#[derive(Debug, Clone, PartialEq)]
enum Op {
    Input { name: String },
    /// `y = x Wᵀ + b` over the last axis, `W` shaped `[out, in]`.
    Affine { x: NodeId, w: ParamId, b: Option<ParamId> },
    Relu(NodeId),
    Identity(NodeId),
    Scale(NodeId, f64),
    Add(NodeId, NodeId),
    /// Concatenation along the last axis.
    Concat(Vec<NodeId>),
    /// Element-wise mean of equally shaped nodes.
    Mean(Vec<NodeId>),
    Flatten(NodeId),
    /// Mean over every axis between the batch axis and the last one.
    SpatialMeanPool(NodeId),
    Mse { pred: NodeId, target: NodeId },
    Logistic { pred: NodeId, label: NodeId },
    SoftmaxCe { logits: NodeId, label: NodeId },
    L1 { param: ParamId, coeff: f64 },
    HalfSqNorm { param: ParamId },
    Sum(Vec<NodeId>),
}

#[derive(Debug, Clone, PartialEq)]
struct Node {
    op: Op,
    /// Shape without the batch axis.
    shape: Vec<usize>,
    batched: bool,
}

/// A static computation graph with a parameter registry.
///
/// Nodes can only refer to nodes created before them, so creation order is a
/// valid topological order. Batched nodes carry a leading batch axis that is
/// fixed by the inputs of each [`Graph::forward`] call.
#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    params: ParamStore,
    outputs: Vec<(String, NodeId)>,
    inputs: BTreeMap<String, NodeId>,
    values: Vec<Option<Vec<f64>>>,
    batch: Option<usize>,
    track_input_grads: bool,
    input_grads: BTreeMap<String, Vec<f64>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: ParamStore::default(),
            outputs: Vec::new(),
            inputs: BTreeMap::new(),
            values: Vec::new(),
            batch: None,
            track_input_grads: false,
            input_grads: BTreeMap::new(),
        }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Feature shape of a node (without the batch axis).
    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn input_names(&self) -> impl Iterator<Item = &str> {
        self.inputs.keys().map(String::as_str)
    }

    /// Also compute gradients with respect to the inputs in `backward`.
    pub fn set_track_input_grads(&mut self, on: bool) {
        self.track_input_grads = on;
    }

    pub fn input_grad(&self, name: &str) -> Option<&[f64]> {
        self.input_grads.get(name).map(Vec::as_slice)
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, batched: bool) -> NodeId {
        self.nodes.push(Node { op, shape, batched });
        self.values.push(None);
        self.nodes.len() - 1
    }

    fn check_node(&self, id: NodeId) -> Result<&Node> {
        self.nodes
            .get(id)
            .ok_or_else(|| Error::Shape(format!("node {id} does not exist")))
    }

    pub fn add_param(&mut self, name: &str, tag: Tag, value: Tensor) -> Result<ParamId> {
        self.params.insert(name, tag, value)
    }

    /// Declares a batched input with per-sample shape `shape`.
    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        if self.inputs.contains_key(name) {
            return config_err(format!("duplicate input name '{name}'"));
        }
        let id = self.push(Op::Input { name: name.to_string() }, shape.to_vec(), true);
        self.inputs.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn affine(&mut self, x: NodeId, w: ParamId, b: Option<ParamId>) -> Result<NodeId> {
        let node = self.check_node(x)?;
        let Some(&fan_in) = node.shape.last() else {
            return shape_err(format!("affine input node {x} has no feature axis"));
        };
        let batched = node.batched;
        let mut shape = node.shape.clone();
        let ws = self.params.by_id(w).value.shape().to_vec();
        if ws.len() != 2 || ws[1] != fan_in {
            return shape_err(format!(
                "weight '{}' has shape {ws:?}, expected [out, {fan_in}]",
                self.params.by_id(w).name
            ));
        }
        if let Some(b) = b {
            let bs = self.params.by_id(b).value.shape();
            if bs != [ws[0]] {
                return shape_err(format!("bias '{}' has shape {bs:?}, expected [{}]", self.params.by_id(b).name, ws[0]));
            }
        }
        *shape.last_mut().unwrap() = ws[0];
        Ok(self.push(Op::Affine { x, w, b }, shape, batched))
    }

    fn unary(&mut self, x: NodeId, op: Op) -> Result<NodeId> {
        let node = self.check_node(x)?;
        let (shape, batched) = (node.shape.clone(), node.batched);
        Ok(self.push(op, shape, batched))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Op::Relu(x))
    }

    pub fn identity(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Op::Identity(x))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        self.unary(x, Op::Scale(x, factor))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let na = self.check_node(a)?;
        let nb = self.check_node(b)?;
        if na.shape != nb.shape || na.batched != nb.batched {
            return shape_err(format!("add: nodes {a} {:?} and {b} {:?} differ", na.shape, nb.shape));
        }
        self.unary(a, Op::Add(a, b))
    }

    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = xs.first() else {
            return shape_err("concat needs at least one node");
        };
        let lead = self.check_node(first)?;
        let prefix = lead.shape[..lead.shape.len().saturating_sub(1)].to_vec();
        let batched = lead.batched;
        let mut depth = 0;
        for &x in xs {
            let n = self.check_node(x)?;
            if n.shape.is_empty() || n.shape[..n.shape.len() - 1] != prefix[..] || n.batched != batched {
                return shape_err(format!(
                    "concat: node {x} has shape {:?}, incompatible with {:?}",
                    n.shape, lead.shape
                ));
            }
            depth += n.shape[n.shape.len() - 1];
        }
        let mut shape = prefix;
        shape.push(depth);
        Ok(self.push(Op::Concat(xs.to_vec()), shape, batched))
    }

    pub fn mean_of(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = xs.first() else {
            return shape_err("mean needs at least one node");
        };
        let lead = self.check_node(first)?.clone();
        for &x in xs {
            let n = self.check_node(x)?;
            if n.shape != lead.shape || n.batched != lead.batched {
                return shape_err(format!(
                    "mean: node {x} has shape {:?}, expected {:?}",
                    n.shape, lead.shape
                ));
            }
        }
        Ok(self.push(Op::Mean(xs.to_vec()), lead.shape, lead.batched))
    }

    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.check_node(x)?;
        let (shape, batched) = (vec![n.shape.iter().product()], n.batched);
        Ok(self.push(Op::Flatten(x), shape, batched))
    }

    pub fn spatial_mean_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.check_node(x)?;
        if n.shape.len() < 2 {
            return shape_err(format!("mean pool needs spatial axes, node {x} has shape {:?}", n.shape));
        }
        let (shape, batched) = (vec![*n.shape.last().unwrap()], n.batched);
        Ok(self.push(Op::SpatialMeanPool(x), shape, batched))
    }

    fn same_shape_pair(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        let na = self.check_node(a)?;
        let nb = self.check_node(b)?;
        if na.shape != nb.shape || !na.batched || !nb.batched {
            return shape_err(format!(
                "{what}: nodes {a} {:?} and {b} {:?} must be batched with equal shapes",
                na.shape, nb.shape
            ));
        }
        Ok(())
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        self.same_shape_pair(pred, target, "mse")?;
        Ok(self.push(Op::Mse { pred, target }, Vec::new(), false))
    }

    /// Mean of `log(1 + exp(−y p))` with labels `y ∈ {−1, +1}`.
    pub fn logistic(&mut self, pred: NodeId, label: NodeId) -> Result<NodeId> {
        self.same_shape_pair(pred, label, "logistic")?;
        Ok(self.push(Op::Logistic { pred, label }, Vec::new(), false))
    }

    /// Mean softmax cross-entropy; `label` holds class indices as `[1]` rows.
    pub fn softmax_ce(&mut self, logits: NodeId, label: NodeId) -> Result<NodeId> {
        let nl = self.check_node(logits)?;
        let nb = self.check_node(label)?;
        if nl.shape.len() != 1 || nb.shape != [1] || !nl.batched || !nb.batched {
            return shape_err(format!(
                "softmax_ce: logits {:?} must be [classes] and labels {:?} must be [1]",
                nl.shape, nb.shape
            ));
        }
        Ok(self.push(Op::SoftmaxCe { logits, label }, Vec::new(), false))
    }

    /// `coeff · ‖param‖₁` with subgradient `coeff · sgn(param)`, `sgn(0) = 0`.
    pub fn l1_penalty(&mut self, param: ParamId, coeff: f64) -> Result<NodeId> {
        if !(coeff.is_finite() && coeff >= 0.0) {
            return config_err(format!("l1 coefficient must be >= 0, got {coeff}"));
        }
        Ok(self.push(Op::L1 { param, coeff }, Vec::new(), false))
    }

    /// `½‖param‖²`.
    pub fn half_sq_norm(&mut self, param: ParamId) -> Result<NodeId> {
        Ok(self.push(Op::HalfSqNorm { param }, Vec::new(), false))
    }

    /// Sum of scalar nodes.
    pub fn sum(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        for &x in xs {
            let n = self.check_node(x)?;
            if n.batched || !n.shape.is_empty() {
                return shape_err(format!("sum: node {x} is not a scalar"));
            }
        }
        Ok(self.push(Op::Sum(xs.to_vec()), Vec::new(), false))
    }

    /// Registers `node` under `name` in the map returned by `forward`.
    pub fn output(&mut self, name: &str, node: NodeId) -> Result<()> {
        self.check_node(node)?;
        if self.outputs.iter().any(|(n, _)| n == name) {
            return config_err(format!("duplicate output name '{name}'"));
        }
        self.outputs.push((name.to_string(), node));
        Ok(())
    }

    pub fn output_node(&self, name: &str) -> Option<NodeId> {
        self.outputs.iter().find(|(n, _)| n == name).map(|&(_, id)| id)
    }

    fn full_shape(&self, id: NodeId, batch: usize) -> Vec<usize> {
        let node = &self.nodes[id];
        if node.batched {
            std::iter::once(batch).chain(node.shape.iter().copied()).collect()
        } else {
            node.shape.clone()
        }
    }

    /// Value computed for `id` by the last forward pass.
    pub fn value(&self, id: NodeId) -> Result<Tensor> {
        let (Some(batch), Some(Some(v))) = (self.batch, self.values.get(id)) else {
            return Err(Error::State(format!("node {id} has no value; run forward first")));
        };
        Tensor::new(&self.full_shape(id, batch), v.clone())
    }

    /// Scalar value of a loss node from the last forward pass.
    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        match self.values.get(id) {
            Some(Some(v)) if v.len() == 1 && !self.nodes[id].batched => Ok(v[0]),
            Some(Some(_)) => Err(Error::Shape(format!("node {id} is not a scalar"))),
            _ => Err(Error::State(format!("node {id} has no value; run forward first"))),
        }
    }

    /// Evaluates every node and returns the registered outputs.
    pub fn forward(&mut self, inputs: &BTreeMap<String, Tensor>) -> Result<BTreeMap<String, Tensor>> {
        self.forward_values(inputs)?;
        let batch = self.batch.unwrap_or(0);
        self.outputs
            .iter()
            .map(|(name, id)| {
                let v = self.values[*id].clone().unwrap_or_default();
                Ok((name.clone(), Tensor::new(&self.full_shape(*id, batch), v)?))
            })
            .collect()
    }

    /// Like [`Graph::forward`] but only caches values.
    pub fn forward_values(&mut self, inputs: &BTreeMap<String, Tensor>) -> Result<()> {
        self.batch = None;
        self.values.iter_mut().for_each(|v| *v = None);
        let mut batch = None;
        for (name, &id) in &self.inputs {
            let t = inputs
                .get(name)
                .ok_or_else(|| Error::Shape(format!("missing input '{name}' (node {id})")))?;
            let n = t.shape().first().copied().unwrap_or(0);
            if t.rank() != self.nodes[id].shape.len() + 1 || t.shape()[1..] != self.nodes[id].shape[..] {
                return shape_err(format!(
                    "input '{name}' (node {id}) has shape {:?}, expected [batch, {:?}]",
                    t.shape(),
                    self.nodes[id].shape
                ));
            }
            match batch {
                None => batch = Some(n),
                Some(b) if b != n => {
                    return shape_err(format!("input '{name}' (node {id}) has batch {n}, other inputs have {b}"));
                }
                _ => {}
            }
        }
        let batch = batch.unwrap_or(1);
        if batch == 0 {
            return shape_err("empty batch");
        }
        for id in 0..self.nodes.len() {
            let out = self.eval_node(id, batch, inputs)?;
            self.values[id] = Some(out);
        }
        self.batch = Some(batch);
        Ok(())
    }

    fn val(&self, id: NodeId) -> &[f64] {
        self.values[id].as_deref().expect("topological order guarantees a value")
    }

    fn eval_node(&self, id: NodeId, batch: usize, inputs: &BTreeMap<String, Tensor>) -> Result<Vec<f64>> {
        let out = match &self.nodes[id].op {
            Op::Input { name } => inputs[name].data().to_vec(),
            Op::Affine { x, w, b } => {
                let w = &self.params.by_id(*w).value;
                let (fan_out, fan_in) = (w.shape()[0], w.shape()[1]);
                let xv = self.val(*x);
                let rows = xv.len() / fan_in;
                let wd = w.data();
                let mut out = vec![0.0; rows * fan_out];
                let bias = b.map(|b| self.params.by_id(b).value.data());
                for (xr, or) in xv.chunks_exact(fan_in).zip(out.chunks_exact_mut(fan_out)) {
                    for (o, (wr, slot)) in wd.chunks_exact(fan_in).zip(or.iter_mut()).enumerate() {
                        let mut s = bias.map_or(0.0, |b| b[o]);
                        for (a, c) in xr.iter().zip(wr) {
                            s += a * c;
                        }
                        *slot = s;
                    }
                }
                out
            }
            Op::Relu(x) => self.val(*x).iter().map(|&v| v.max(0.0)).collect(),
            Op::Identity(x) | Op::Flatten(x) => self.val(*x).to_vec(),
            Op::Scale(x, f) => self.val(*x).iter().map(|v| v * f).collect(),
            Op::Add(a, b) => self.val(*a).iter().zip(self.val(*b)).map(|(x, y)| x + y).collect(),
            Op::Concat(xs) => {
                let depths: Vec<usize> = xs.iter().map(|&x| *self.nodes[x].shape.last().unwrap()).collect();
                let total: usize = depths.iter().sum();
                let rows = self.val(xs[0]).len() / depths[0];
                let mut out = Vec::with_capacity(rows * total);
                for r in 0..rows {
                    for (&x, &d) in xs.iter().zip(&depths) {
                        out.extend_from_slice(&self.val(x)[r * d..(r + 1) * d]);
                    }
                }
                out
            }
            Op::Mean(xs) => {
                let mut out = self.val(xs[0]).to_vec();
                for &x in &xs[1..] {
                    for (o, v) in out.iter_mut().zip(self.val(x)) {
                        *o += v;
                    }
                }
                let k = xs.len() as f64;
                out.iter_mut().for_each(|o| *o /= k);
                out
            }
            Op::SpatialMeanPool(x) => {
                let shape = &self.nodes[*x].shape;
                let c = *shape.last().unwrap();
                let spatial: usize = shape[..shape.len() - 1].iter().product();
                let xv = self.val(*x);
                let mut out = vec![0.0; batch * c];
                for (s, o) in xv.chunks_exact(spatial * c).zip(out.chunks_exact_mut(c)) {
                    for row in s.chunks_exact(c) {
                        for (a, v) in o.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    o.iter_mut().for_each(|a| *a /= spatial as f64);
                }
                out
            }
            Op::Mse { pred, target } => {
                let p = self.val(*pred);
                let t = self.val(*target);
                vec![p.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / p.len() as f64]
            }
            Op::Logistic { pred, label } => {
                let p = self.val(*pred);
                let y = self.val(*label);
                for &l in y {
                    if l != 1.0 && l != -1.0 {
                        return Err(Error::Precondition(format!("logistic label {l} not in {{-1, +1}} (node {id})")));
                    }
                }
                vec![
                    p.iter()
                        .zip(y)
                        .map(|(a, l)| crate::adversarial::logistic_loss(l * a))
                        .sum::<f64>()
                        / p.len() as f64,
                ]
            }
            Op::SoftmaxCe { logits, label } => {
                let k = self.nodes[*logits].shape[0];
                let z = self.val(*logits);
                let labels = self.val(*label);
                let mut total = 0.0;
                for (row, &l) in z.chunks_exact(k).zip(labels) {
                    let c = class_index(l, k, id)?;
                    total += log_sum_exp(row) - row[c];
                }
                vec![total / batch as f64]
            }
            Op::L1 { param, coeff } => {
                vec![coeff * self.params.by_id(*param).value.data().iter().map(|w| w.abs()).sum::<f64>()]
            }
            Op::HalfSqNorm { param } => {
                vec![0.5 * self.params.by_id(*param).value.data().iter().map(|w| w * w).sum::<f64>()]
            }
            Op::Sum(xs) => vec![xs.iter().map(|&x| self.val(x)[0]).sum()],
        };
        Ok(out)
    }

    fn needs_grad(&self) -> Vec<bool> {
        let mut needs = vec![false; self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            needs[id] = match &node.op {
                Op::Input { .. } => self.track_input_grads,
                Op::Affine { .. } | Op::L1 { .. } | Op::HalfSqNorm { .. } => true,
                Op::Relu(x) | Op::Identity(x) | Op::Flatten(x) | Op::Scale(x, _) | Op::SpatialMeanPool(x) => {
                    needs[*x]
                }
                Op::Add(a, b) => needs[*a] || needs[*b],
                Op::Concat(xs) | Op::Mean(xs) | Op::Sum(xs) => xs.iter().any(|&x| needs[x]),
                Op::Mse { pred, target } => needs[*pred] || needs[*target],
                Op::Logistic { pred, .. } => needs[*pred],
                Op::SoftmaxCe { logits, .. } => needs[*logits],
            };
        }
        needs
    }

    /// Reverse-mode pass from the scalar node `loss`.
    ///
    /// Stores each parameter's gradient in its tensor (zero when the loss
    /// does not depend on it) and returns a copy keyed by name.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        let Some(batch) = self.batch else {
            return Err(Error::State("backward called before forward".into()));
        };
        let node = self.check_node(loss)?;
        if node.batched || !node.shape.is_empty() {
            return shape_err(format!("loss node {loss} is not a scalar"));
        }
        let needs = self.needs_grad();
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut pgrads: Vec<Vec<f64>> = self.params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        adj[loss] = Some(vec![1.0]);
        self.input_grads.clear();

        for id in (0..=loss).rev() {
            let Some(g) = adj[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Input { name } => {
                    self.input_grads.insert(name.clone(), g);
                }
                Op::Affine { x, w, b } => {
                    let wt = &self.params.by_id(*w).value;
                    let (fan_out, fan_in) = (wt.shape()[0], wt.shape()[1]);
                    let xv = self.val(*x);
                    let gw = &mut pgrads[*w];
                    for (xr, gr) in xv.chunks_exact(fan_in).zip(g.chunks_exact(fan_out)) {
                        for (gwr, &go) in gw.chunks_exact_mut(fan_in).zip(gr) {
                            if go != 0.0 {
                                for (a, &xi) in gwr.iter_mut().zip(xr) {
                                    *a += go * xi;
                                }
                            }
                        }
                    }
                    if let Some(b) = b {
                        let gb = &mut pgrads[*b];
                        for gr in g.chunks_exact(fan_out) {
                            for (a, v) in gb.iter_mut().zip(gr) {
                                *a += v;
                            }
                        }
                    }
                    if needs[*x] {
                        let wd = wt.data();
                        let mut dx = vec![0.0; xv.len()];
                        for (dr, gr) in dx.chunks_exact_mut(fan_in).zip(g.chunks_exact(fan_out)) {
                            for (wr, &go) in wd.chunks_exact(fan_in).zip(gr) {
                                if go != 0.0 {
                                    for (a, &wi) in dr.iter_mut().zip(wr) {
                                        *a += go * wi;
                                    }
                                }
                            }
                        }
                        accumulate(&mut adj, *x, dx);
                    }
                }
                Op::Relu(x) => {
                    if needs[*x] {
                        let out = self.val(id);
                        let dx = g.iter().zip(out).map(|(gi, &o)| if o > 0.0 { *gi } else { 0.0 }).collect();
                        accumulate(&mut adj, *x, dx);
                    }
                }
                Op::Identity(x) | Op::Flatten(x) => {
                    if needs[*x] {
                        accumulate(&mut adj, *x, g);
                    }
                }
                Op::Scale(x, f) => {
                    if needs[*x] {
                        accumulate(&mut adj, *x, g.iter().map(|v| v * f).collect());
                    }
                }
                Op::Add(a, b) => {
                    if needs[*b] {
                        accumulate(&mut adj, *b, g.clone());
                    }
                    if needs[*a] {
                        accumulate(&mut adj, *a, g);
                    }
                }
                Op::Concat(xs) => {
                    let depths: Vec<usize> = xs.iter().map(|&x| *self.nodes[x].shape.last().unwrap()).collect();
                    let total: usize = depths.iter().sum();
                    let rows = g.len() / total;
                    let mut off = 0;
                    for (&x, &d) in xs.iter().zip(&depths) {
                        if needs[x] {
                            let mut dx = Vec::with_capacity(rows * d);
                            for r in 0..rows {
                                dx.extend_from_slice(&g[r * total + off..r * total + off + d]);
                            }
                            accumulate(&mut adj, x, dx);
                        }
                        off += d;
                    }
                }
                Op::Mean(xs) => {
                    let k = xs.len() as f64;
                    for &x in xs {
                        if needs[x] {
                            accumulate(&mut adj, x, g.iter().map(|v| v / k).collect());
                        }
                    }
                }
                Op::SpatialMeanPool(x) => {
                    if needs[*x] {
                        let shape = &self.nodes[*x].shape;
                        let c = *shape.last().unwrap();
                        let spatial: usize = shape[..shape.len() - 1].iter().product();
                        let mut dx = vec![0.0; batch * spatial * c];
                        for (d, gr) in dx.chunks_exact_mut(spatial * c).zip(g.chunks_exact(c)) {
                            for row in d.chunks_exact_mut(c) {
                                for (a, v) in row.iter_mut().zip(gr) {
                                    *a = v / spatial as f64;
                                }
                            }
                        }
                        accumulate(&mut adj, *x, dx);
                    }
                }
                Op::Mse { pred, target } => {
                    let p = self.val(*pred);
                    let t = self.val(*target);
                    let scale = 2.0 * g[0] / p.len() as f64;
                    let dp: Vec<f64> = p.iter().zip(t).map(|(a, b)| scale * (a - b)).collect();
                    if needs[*target] {
                        accumulate(&mut adj, *target, dp.iter().map(|v| -v).collect());
                    }
                    if needs[*pred] {
                        accumulate(&mut adj, *pred, dp);
                    }
                }
                Op::Logistic { pred, label } => {
                    if needs[*pred] {
                        let p = self.val(*pred);
                        let y = self.val(*label);
                        let n = p.len() as f64;
                        // d/dp log(1 + e^{−yp}) = −y σ(−yp)
                        let dp = p
                            .iter()
                            .zip(y)
                            .map(|(a, l)| -g[0] * l * sigmoid(-l * a) / n)
                            .collect();
                        accumulate(&mut adj, *pred, dp);
                    }
                }
                Op::SoftmaxCe { logits, label } => {
                    if needs[*logits] {
                        let k = self.nodes[*logits].shape[0];
                        let z = self.val(*logits);
                        let labels = self.val(*label);
                        let mut dz = vec![0.0; z.len()];
                        for ((row, d), &l) in z.chunks_exact(k).zip(dz.chunks_exact_mut(k)).zip(labels) {
                            let lse = log_sum_exp(row);
                            for (di, zi) in d.iter_mut().zip(row) {
                                *di = (zi - lse).exp();
                            }
                            d[l as usize] -= 1.0;
                            d.iter_mut().for_each(|v| *v *= g[0] / batch as f64);
                        }
                        accumulate(&mut adj, *logits, dz);
                    }
                }
                Op::L1 { param, coeff } => {
                    let w = self.params.by_id(*param).value.data();
                    for (a, &wi) in pgrads[*param].iter_mut().zip(w) {
                        *a += g[0] * coeff * sign(wi);
                    }
                }
                Op::HalfSqNorm { param } => {
                    let w = self.params.by_id(*param).value.data();
                    for (a, &wi) in pgrads[*param].iter_mut().zip(w) {
                        *a += g[0] * wi;
                    }
                }
                Op::Sum(xs) => {
                    for &x in xs {
                        if needs[x] {
                            accumulate(&mut adj, x, vec![g[0]]);
                        }
                    }
                }
            }
        }

        let mut out = Gradients::new();
        for (p, grad) in self.params.iter_mut().zip(pgrads) {
            p.value.set_grad(grad.clone())?;
            out.insert(p.name.clone(), grad);
        }
        Ok(out)
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], id: NodeId, g: Vec<f64>) {
    match &mut adj[id] {
        Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn class_index(l: f64, k: usize, node: NodeId) -> Result<usize> {
    if l.fract() != 0.0 || l < 0.0 || l as usize >= k {
        return Err(Error::Precondition(format!(
            "class label {l} is not an index below {k} (node {node})"
        )));
    }
    Ok(l as usize)
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs(pairs: &[(&str, Tensor)]) -> BTreeMap<String, Tensor> {
        pairs.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
    }

    #[test]
    fn identity_graph_returns_input() {
        let mut g = Graph::new();
        let x = g.input("x", &[3]).unwrap();
        let y = g.identity(x).unwrap();
        g.output("y", y).unwrap();
        let t = Tensor::new(&[2, 3], vec![1.0, -2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let out = g.forward(&inputs(&[("x", t.clone())])).unwrap();
        assert_eq!(out["y"], t);
    }

    #[test]
    fn dense_identity_weights() {
        let mut g = Graph::new();
        let x = g.input("x", &[3]).unwrap();
        let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let w = g.add_param("w", Tag::Head, eye).unwrap();
        let b = g.add_param("b", Tag::Head, Tensor::zeros(&[3])).unwrap();
        let y = g.affine(x, w, Some(b)).unwrap();
        g.output("y", y).unwrap();
        let t = Tensor::new(&[1, 3], vec![0.5, -1.5, 2.0]).unwrap();
        assert_eq!(g.forward(&inputs(&[("x", t.clone())])).unwrap()["y"], t);
    }

    #[test]
    fn relu_values() {
        let mut g = Graph::new();
        let x = g.input("x", &[3]).unwrap();
        let y = g.relu(x).unwrap();
        g.output("y", y).unwrap();
        let t = Tensor::new(&[1, 3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(g.forward(&inputs(&[("x", t)])).unwrap()["y"].data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn quadratic_and_l1_gradients() {
        let mut g = Graph::new();
        let w = g.add_param("w", Tag::Head, Tensor::new(&[2], vec![3.0, -4.0]).unwrap()).unwrap();
        let loss = g.half_sq_norm(w).unwrap();
        g.forward_values(&BTreeMap::new()).unwrap();
        assert_eq!(g.scalar(loss).unwrap(), 12.5);
        assert_eq!(g.backward(loss).unwrap()["w"], vec![3.0, -4.0]);

        let mut g = Graph::new();
        let w = g
            .add_param("w", Tag::Fusion, Tensor::new(&[3], vec![2.0, 0.0, -5.0]).unwrap())
            .unwrap();
        let loss = g.l1_penalty(w, 0.01).unwrap();
        g.forward_values(&BTreeMap::new()).unwrap();
        assert_eq!(g.backward(loss).unwrap()["w"], vec![0.01, 0.0, -0.01]);
        assert_eq!(g.params().get("w").unwrap().value.grad(), Some(&[0.01, 0.0, -0.01][..]));
    }

    #[test]
    fn backward_before_forward_is_a_state_error() {
        let mut g = Graph::new();
        let w = g.add_param("w", Tag::Head, Tensor::zeros(&[1])).unwrap();
        let loss = g.half_sq_norm(w).unwrap();
        assert!(matches!(g.backward(loss), Err(Error::State(_))));
    }

    #[test]
    fn shape_errors_name_the_node() {
        let mut g = Graph::new();
        let x = g.input("x", &[3]).unwrap();
        let w = g.add_param("w", Tag::Head, Tensor::zeros(&[2, 4])).unwrap();
        assert!(matches!(g.affine(x, w, None), Err(Error::Shape(_))));
        let err = g.forward(&inputs(&[("x", Tensor::zeros(&[2, 4]))])).unwrap_err();
        assert!(err.to_string().contains("node 0"), "{err}");
        assert!(g.forward(&BTreeMap::new()).is_err());
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut g = Graph::new();
        g.add_param("w", Tag::Head, Tensor::zeros(&[1])).unwrap();
        assert!(g.add_param("w", Tag::Fusion, Tensor::zeros(&[1])).is_err());
        g.input("x", &[1]).unwrap();
        assert!(g.input("x", &[1]).is_err());
        assert!("body".parse::<Tag>().is_err());
        assert_eq!("fusion".parse::<Tag>().unwrap(), Tag::Fusion);
    }

    #[test]
    fn softmax_rejects_bad_labels() {
        let mut g = Graph::new();
        let z = g.input("z", &[3]).unwrap();
        let y = g.input("y", &[1]).unwrap();
        let l = g.softmax_ce(z, y).unwrap();
        let ok = inputs(&[("z", Tensor::zeros(&[1, 3])), ("y", Tensor::new(&[1, 1], vec![2.0]).unwrap())]);
        g.forward_values(&ok).unwrap();
        assert!((g.scalar(l).unwrap() - 3f64.ln()).abs() < 1e-12);
        let bad = inputs(&[("z", Tensor::zeros(&[1, 3])), ("y", Tensor::new(&[1, 1], vec![3.0]).unwrap())]);
        assert!(g.forward_values(&bad).is_err());
    }

    #[test]
    fn spatial_pool_and_flatten_shapes() {
        let mut g = Graph::new();
        let x = g.input("x", &[2, 2, 3]).unwrap();
        let p = g.spatial_mean_pool(x).unwrap();
        let f = g.flatten(x).unwrap();
        assert_eq!(g.shape(p), &[3]);
        assert_eq!(g.shape(f), &[12]);
        g.output("p", p).unwrap();
        let t = Tensor::from_fn(&[1, 2, 2, 3], |i| (i % 3) as f64 + (i / 3) as f64);
        let out = g.forward(&inputs(&[("x", t)])).unwrap();
        assert_eq!(out["p"].data(), &[1.5, 2.5, 3.5]);
    }
}
