//! Central finite-difference check of [`Graph::backward`].

use std::collections::BTreeMap;

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `param:<name>[i]` or `input:<name>[i]` of the worst coordinate.
    pub worst: String,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares analytic gradients of `loss` with central differences of step
/// `h`, over every parameter coordinate and every coordinate of the inputs.
pub fn check_gradients(
    graph: &mut Graph,
    inputs: &BTreeMap<String, Tensor>,
    loss: NodeId,
    h: f64,
) -> Result<GradCheckReport> {
    graph.set_track_input_grads(true);
    graph.forward_values(inputs)?;
    let grads = graph.backward(loss)?;
    let input_grads: BTreeMap<String, Vec<f64>> = inputs
        .keys()
        .filter_map(|k| graph.input_grad(k).map(|g| (k.clone(), g.to_vec())))
        .collect();
    graph.set_track_input_grads(false);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let mut record = |label: String, analytic: f64, numeric: f64| {
        let err = relative_error(analytic, numeric);
        report.checked += 1;
        if err > report.max_rel_err || report.worst.is_empty() {
            report.max_rel_err = report.max_rel_err.max(err);
            report.worst = label;
        }
    };

    let names: Vec<String> = graph.params().iter().map(|p| p.name.clone()).collect();
    for name in names {
        let n = graph.params().get(&name).unwrap().value.numel();
        for i in 0..n {
            let orig = graph.params().get(&name).unwrap().value.data()[i];
            let eval = |graph: &mut Graph, v: f64| -> Result<f64> {
                graph.params_mut().get_mut(&name).unwrap().value.data_mut()[i] = v;
                graph.forward_values(inputs)?;
                graph.scalar(loss)
            };
            let plus = eval(graph, orig + h)?;
            let minus = eval(graph, orig - h)?;
            eval(graph, orig)?;
            record(format!("param:{name}[{i}]"), grads[&name][i], (plus - minus) / (2.0 * h));
        }
    }

    for (name, analytic) in &input_grads {
        let mut perturbed = inputs.clone();
        for (i, &a) in analytic.iter().enumerate() {
            let orig = inputs[name].data()[i];
            perturbed.get_mut(name).unwrap().data_mut()[i] = orig + h;
            graph.forward_values(&perturbed)?;
            let plus = graph.scalar(loss)?;
            perturbed.get_mut(name).unwrap().data_mut()[i] = orig - h;
            graph.forward_values(&perturbed)?;
            let minus = graph.scalar(loss)?;
            perturbed.get_mut(name).unwrap().data_mut()[i] = orig;
            record(format!("input:{name}[{i}]"), a, (plus - minus) / (2.0 * h));
        }
    }
    graph.forward_values(inputs)?;
    Ok(report)
}
