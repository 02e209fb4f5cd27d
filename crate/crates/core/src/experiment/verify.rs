//! Randomised agreement suites: closed forms against numeric oracles and
//! analytic gradients against finite differences.
//!
//! Mutation mode perturbs the closed-form values by a relative `1e-3` before
//! they are compared, which every suite must detect.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::adversarial::{
    adv_gap_condition, oracle_minimax_l1, random_adv_spec, solve_maxssn_adv, AdvSpec, L1OracleSettings,
};
use crate::diff::gradcheck::check_gradients;
use crate::diff::{xavier_uniform, Graph, NodeId, Tag, Tensor};
use crate::error::{config_err, Error, Result};
use crate::fusion::{lel_node, mean_node, Activation};
use crate::linear::{
    expected_ssn_loss, maxssn_gap_bound, oracle_minimax, random_latent_spec, solve_maxssn, GapBranch, OracleSettings,
    SolutionCase,
};
use crate::rng;

const MUTATION: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Linear,
    Adversarial,
    Gradients,
    All,
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Linear => "linear",
            Self::Adversarial => "adversarial",
            Self::Gradients => "gradients",
            Self::All => "all",
        })
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "adversarial" => Ok(Self::Adversarial),
            "gradients" => Ok(Self::Gradients),
            "all" => Ok(Self::All),
            other => config_err(format!("unknown suite '{other}' (linear, adversarial, gradients, all)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOptions {
    /// Random specs per analytical property.
    pub specs: usize,
    /// Random instantiations per layer.
    pub grad_instances: usize,
    pub seed: u64,
    pub mutate: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            specs: 100,
            grad_instances: 20,
            seed: 42,
            mutate: false,
        }
    }
}

/// One property with its worst observed deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub suite: String,
    pub property: String,
    pub cases: usize,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub note: String,
}

impl Check {
    fn within(suite: &str, property: &str, cases: usize, max_deviation: f64, tolerance: f64) -> Self {
        Self {
            suite: suite.into(),
            property: property.into(),
            cases,
            max_deviation,
            tolerance,
            passed: max_deviation <= tolerance,
            note: String::new(),
        }
    }

    fn note(mut self, note: impl Into<String>) -> Self {
        self.note = note.into();
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            write!(
                out,
                "{} {:<12} {:<44} cases={:<4} max_dev={:.3e} tol={:.1e}",
                if c.passed { "PASS" } else { "FAIL" },
                c.suite,
                c.property,
                c.cases,
                c.max_deviation,
                c.tolerance
            )
            .unwrap();
            if !c.note.is_empty() {
                write!(out, "  ({})", c.note).unwrap();
            }
            out.push('\n');
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        writeln!(out, "{} checks, {failed} failed", self.checks.len()).unwrap();
        out
    }
}

pub fn run_verify(suite: Suite, opts: &VerifyOptions) -> Result<VerifyReport> {
    let mut checks = Vec::new();
    if matches!(suite, Suite::Linear | Suite::All) {
        checks.extend(linear_suite(opts)?);
    }
    if matches!(suite, Suite::Adversarial | Suite::All) {
        checks.extend(adversarial_suite(opts)?);
    }
    if matches!(suite, Suite::Gradients | Suite::All) {
        checks.extend(gradient_suite(opts)?);
    }
    Ok(VerifyReport { checks })
}

fn mutated(v: f64, opts: &VerifyOptions) -> f64 {
    if opts.mutate {
        v * (1.0 + MUTATION)
    } else {
        v
    }
}

/// Specs with `d_i ≤ 3`, entries in `[−2, 2]` and `σ ∈ {0.5, 1, 2}`.
pub fn linear_suite(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut r = rng::seeded(opts.seed, rng::stream::DATA);
    let (mut agree, mut balance, mut gap_slack) = (0.0f64, 0.0f64, 0.0f64);
    let (mut balanced_cases, mut branches) = (0, [0usize; 2]);
    for _ in 0..opts.specs {
        let spec = random_latent_spec(&mut r, 3, 2.0, &[0.5, 1.0, 2.0]);
        let sol = solve_maxssn(&spec)?;
        let closed = mutated(sol.loss, opts);
        let oracle = oracle_minimax(&spec, &OracleSettings::default())?;
        agree = agree.max((closed - oracle.loss).abs() / closed.abs().max(oracle.loss.abs()).max(1e-12));

        if sol.case == SolutionCase::Balanced {
            balanced_cases += 1;
            let mut fs = sol.fusion_solution(&spec);
            if opts.mutate {
                fs.g1.iter_mut().for_each(|g| *g *= 1.0 + MUTATION);
                fs.g2 = spec.beta3.iter().zip(&fs.g1).map(|(b, g)| b - g).collect();
            }
            let l1 = expected_ssn_loss(&spec, &fs, 1)?;
            let l2 = expected_ssn_loss(&spec, &fs, 2)?;
            balance = balance.max((l1 - l2).abs());
        }

        let gap = maxssn_gap_bound(&spec)?;
        gap_slack = gap_slack.max(gap.lower_bound - gap.actual_gap);
        branches[match gap.branch {
            GapBranch::Dominant => 0,
            GapBranch::Balanced => 1,
        }] += 1;
    }
    let both = branches[0] > 0 && branches[1] > 0;
    Ok(vec![
        Check::within("linear", "minimax closed form = oracle (relative)", opts.specs, agree, 1e-6),
        Check::within("linear", "balanced case equalises sources", balanced_cases, balance, 1e-9),
        Check::within("linear", "gap >= lower bound", opts.specs, gap_slack.max(0.0), 1e-9),
        Check {
            passed: both,
            ..Check::within("linear", "both gap-bound branches exercised", opts.specs, 0.0, 0.0)
        }
        .note(format!("dominant {}, balanced {}", branches[0], branches[1])),
    ])
}

/// `ℓ1` agreement on random specs and the gap condition on 20 specs whose
/// ratio `|‖β2‖₁ − ‖β1‖₁| / ‖β3‖₁` runs from 0.1 to 2.0.
pub fn adversarial_suite(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut r = rng::seeded(opts.seed, rng::stream::DATA + 100);
    let mut agree = 0.0f64;
    for _ in 0..opts.specs {
        let spec = random_adv_spec(&mut r, 3, 2.0, 1.0);
        let closed = mutated(solve_maxssn_adv(&spec)?.gamma, opts);
        let oracle = oracle_minimax_l1(&spec, &L1OracleSettings::default())?;
        agree = agree.max((closed - oracle.gamma).abs());
    }

    let (mut equality, mut min_strict, mut below, mut above) = (0.0f64, f64::INFINITY, 0, 0);
    for k in 1..=20 {
        let ratio = k as f64 * 0.1;
        let spec = AdvSpec::new(vec![1.0], vec![1.0 + 2.0 * ratio], vec![2.0], 1.0)?;
        let gap = adv_gap_condition(&spec)?;
        let star = mutated(gap.maxssn_adv_star, opts);
        if ratio <= 1.0 + 1e-12 {
            below += 1;
            equality = equality.max((gap.maxssn_adv_prime - star).abs());
        } else {
            above += 1;
            min_strict = min_strict.min(gap.maxssn_adv_prime - star);
        }
    }
    Ok(vec![
        Check::within("adversarial", "l1 minimax closed form = oracle", opts.specs, agree, 1e-6),
        Check::within("adversarial", "no gap when ratio <= 1", below, equality, 1e-9),
        Check {
            passed: min_strict > 0.0,
            ..Check::within("adversarial", "strict gap when ratio > 1", above, 0.0, 0.0)
        }
        .note(format!("smallest gap {min_strict:.3e}")),
    ])
}

pub const LAYERS: [&str; 12] = [
    "dense",
    "conv1x1",
    "relu",
    "mse",
    "logistic",
    "softmax_ce",
    "l1",
    "half_sq_norm",
    "readout",
    "mean_fusion",
    "concat_fusion",
    "lel_fusion",
];

/// Finite-difference step of the gradient suite.
pub const GRAD_STEP: f64 = 1e-6;

pub fn gradient_suite(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut r = rng::seeded(opts.seed, rng::stream::INIT);
    let mut checks = Vec::new();
    for layer in LAYERS {
        let (mut worst, mut at, mut coords) = (0.0f64, String::new(), 0);
        for _ in 0..opts.grad_instances {
            let (mut g, inputs, loss) = layer_case(layer, &mut r)?;
            let rep = check_gradients(&mut g, &inputs, loss, GRAD_STEP)?;
            coords += rep.checked;
            if rep.max_rel_err >= worst {
                worst = rep.max_rel_err;
                at = rep.worst;
            }
        }
        checks.push(
            Check::within("gradients", layer, opts.grad_instances, worst, 1e-4)
                .note(format!("{coords} coordinates, worst {at}")),
        );
    }
    Ok(checks)
}

fn normal(r: &mut rng::Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(r))
}

/// Entries with magnitude in `[0.1, 1.1]`, away from ReLU and `ℓ1` kinks.
fn off_zero(r: &mut rng::Rng, shape: &[usize]) -> Tensor {
    let mag = Uniform::new(0.1, 1.1).expect("valid range");
    Tensor::from_fn(shape, |_| {
        let m = mag.sample(r);
        if r.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn batched(n: usize, per_sample: &[usize]) -> Vec<usize> {
    std::iter::once(n).chain(per_sample.iter().copied()).collect()
}

/// Affine layer with Xavier weights and a random bias.
fn dense(g: &mut Graph, r: &mut rng::Rng, x: NodeId, out: usize, name: &str) -> Result<NodeId> {
    let fan_in = *g.shape(x).last().expect("feature axis");
    let w = g.add_param(&format!("{name}.w"), Tag::Head, xavier_uniform(r, out, fan_in))?;
    let b = g.add_param(&format!("{name}.b"), Tag::Head, normal(r, &[out]))?;
    g.affine(x, w, Some(b))
}

fn mse_to_random(
    g: &mut Graph,
    r: &mut rng::Rng,
    pred: NodeId,
    n: usize,
    inputs: &mut BTreeMap<String, Tensor>,
) -> Result<NodeId> {
    let shape = g.shape(pred).to_vec();
    let t = g.input("target", &shape)?;
    inputs.insert("target".into(), normal(r, &batched(n, &shape)));
    g.mse(pred, t)
}

/// A small random graph exercising `layer`, its inputs and its scalar loss.
pub fn layer_case(layer: &str, r: &mut rng::Rng) -> Result<(Graph, BTreeMap<String, Tensor>, NodeId)> {
    let mut g = Graph::new();
    let mut inputs = BTreeMap::new();
    let n = r.random_range(1..=3);
    let d_in = r.random_range(1..=4);
    let d_out = r.random_range(1..=4);
    let loss = match layer {
        "dense" => {
            let x = g.input("x", &[d_in])?;
            inputs.insert("x".into(), normal(r, &[n, d_in]));
            let y = dense(&mut g, r, x, d_out, "fc")?;
            mse_to_random(&mut g, r, y, n, &mut inputs)?
        }
        "conv1x1" => {
            let (h, w) = (r.random_range(1..=3), r.random_range(1..=3));
            let x = g.input("x", &[h, w, d_in])?;
            inputs.insert("x".into(), normal(r, &[n, h, w, d_in]));
            let y = dense(&mut g, r, x, d_out, "conv")?;
            mse_to_random(&mut g, r, y, n, &mut inputs)?
        }
        "relu" => {
            let x = g.input("x", &[d_in])?;
            inputs.insert("x".into(), off_zero(r, &[n, d_in]));
            let a = g.relu(x)?;
            let y = dense(&mut g, r, a, d_out, "fc")?;
            mse_to_random(&mut g, r, y, n, &mut inputs)?
        }
        "mse" => {
            let x = g.input("x", &[d_in])?;
            inputs.insert("x".into(), normal(r, &[n, d_in]));
            let y = dense(&mut g, r, x, d_out, "fc")?;
            mse_to_random(&mut g, r, y, n, &mut inputs)?
        }
        "logistic" => {
            let x = g.input("x", &[d_in])?;
            inputs.insert("x".into(), normal(r, &[n, d_in]));
            let y = dense(&mut g, r, x, 1, "fc")?;
            let label = g.input("label", &[1])?;
            let labels = Tensor::from_fn(&[n, 1], |_| if r.random_bool(0.5) { 1.0 } else { -1.0 });
            inputs.insert("label".into(), labels);
            g.logistic(y, label)?
        }
        "softmax_ce" => {
            let classes = d_out + 1;
            let x = g.input("x", &[d_in])?;
            inputs.insert("x".into(), normal(r, &[n, d_in]));
            let y = dense(&mut g, r, x, classes, "fc")?;
            let label = g.input("label", &[1])?;
            let labels = Tensor::from_fn(&[n, 1], |_| r.random_range(0..classes) as f64);
            inputs.insert("label".into(), labels);
            g.softmax_ce(y, label)?
        }
        "l1" => {
            let x = g.input("x", &[d_in])?;
            inputs.insert("x".into(), normal(r, &[n, d_in]));
            let w = g.add_param("fc.w", Tag::Fusion, off_zero(r, &[d_out, d_in]))?;
            let y = g.affine(x, w, None)?;
            let fit = mse_to_random(&mut g, r, y, n, &mut inputs)?;
            let pen = g.l1_penalty(w, 0.05)?;
            g.sum(&[fit, pen])?
        }
        "half_sq_norm" => {
            let x = g.input("x", &[d_in])?;
            inputs.insert("x".into(), normal(r, &[n, d_in]));
            let w = g.add_param("fc.w", Tag::Head, normal(r, &[d_out, d_in]))?;
            let y = g.affine(x, w, None)?;
            let fit = mse_to_random(&mut g, r, y, n, &mut inputs)?;
            let reg = g.half_sq_norm(w)?;
            let reg = g.scale(reg, 0.1)?;
            g.sum(&[fit, reg])?
        }
        "readout" => {
            let (h, w) = (r.random_range(1..=3), r.random_range(1..=3));
            let x = g.input("x", &[h, w, d_in])?;
            inputs.insert("x".into(), normal(r, &[n, h, w, d_in]));
            let pooled = g.spatial_mean_pool(x)?;
            let flat = g.flatten(x)?;
            let a = dense(&mut g, r, pooled, d_out, "pool")?;
            let b = dense(&mut g, r, flat, d_out, "flat")?;
            let s = g.add(a, b)?;
            let s = g.scale(s, 0.5)?;
            mse_to_random(&mut g, r, s, n, &mut inputs)?
        }
        "mean_fusion" | "concat_fusion" | "lel_fusion" => {
            let ns = r.random_range(2..=3);
            let (h, w) = (r.random_range(1..=2), r.random_range(1..=2));
            let depths: Vec<usize> = (0..ns)
                .map(|_| if layer == "mean_fusion" { d_in } else { r.random_range(1..=4) })
                .collect();
            let mut nodes = Vec::new();
            for (i, &d) in depths.iter().enumerate() {
                let name = format!("x{i}");
                nodes.push(g.input(&name, &[h, w, d])?);
                let x = if layer == "lel_fusion" { off_zero(r, &[n, h, w, d]) } else { normal(r, &[n, h, w, d]) };
                inputs.insert(name, x);
            }
            match layer {
                "mean_fusion" => {
                    let f = mean_node(&mut g, &nodes)?;
                    let y = dense(&mut g, r, f, d_out, "head")?;
                    mse_to_random(&mut g, r, y, n, &mut inputs)?
                }
                "concat_fusion" => {
                    let f = g.concat(&nodes)?;
                    let y = dense(&mut g, r, f, d_out, "head")?;
                    mse_to_random(&mut g, r, y, n, &mut inputs)?
                }
                _ => {
                    let d_sum: usize = depths.iter().sum();
                    let weights = lel_weights_off_kinks(r, &inputs, &depths, d_out, n * h * w)?;
                    debug_assert_eq!(weights.shape(), [d_out, d_sum]);
                    let wid = g.add_param("fusion.lel.w", Tag::Fusion, weights)?;
                    let (f, pen) = lel_node(&mut g, &nodes, wid, 0.05, Activation::Relu)?;
                    let y = dense(&mut g, r, f, 2, "head")?;
                    let fit = mse_to_random(&mut g, r, y, n, &mut inputs)?;
                    g.sum(&[fit, pen])?
                }
            }
        }
        other => return config_err(format!("unknown layer '{other}'")),
    };
    Ok((g, inputs, loss))
}

/// LEL weights whose entries and pre-activations on `inputs` all have
/// magnitude at least 0.05, so central differences never straddle a kink.
fn lel_weights_off_kinks(
    r: &mut rng::Rng,
    inputs: &BTreeMap<String, Tensor>,
    depths: &[usize],
    out: usize,
    positions: usize,
) -> Result<Tensor> {
    let d_sum: usize = depths.iter().sum();
    // Rows of the concatenated input, one per spatial position.
    let mut rows = vec![Vec::with_capacity(d_sum); positions];
    for (i, &d) in depths.iter().enumerate() {
        let x = &inputs[&format!("x{i}")];
        for (p, chunk) in x.data().chunks_exact(d).enumerate() {
            rows[p].extend_from_slice(chunk);
        }
    }
    for _ in 0..1000 {
        let w = off_zero(r, &[out, d_sum]);
        let clear = w.data().chunks_exact(d_sum).all(|wr| {
            rows.iter()
                .all(|x| x.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>().abs() >= 0.05)
        });
        if clear {
            return Ok(w);
        }
    }
    Err(Error::Precondition("could not draw LEL weights away from the ReLU kink".into()))
}
