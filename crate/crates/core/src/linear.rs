//! Linear two-source fusion model and its minimax analysis.
//!
//! Data model: `y = β1ᵀz1 + β2ᵀz2 + β3ᵀz3` with sources `x1 = [z1; z3]` and
//! `x2 = [z2; z3]`. The direct fusion predictor is
//! `f(x1, x2) = [w1; g1]ᵀx1 + [w2; g2]ᵀx2` and is error free on clean data iff
//! `w1 = β1`, `w2 = β2` and `g1 + g2 = β3`.
//!
//! Under i.i.d. noise of variance `σ²` added to one source at a time, an
//! error-free model pays `σ²(‖β_i‖² + ‖g_i‖²)` when source `i` is perturbed.
//! [`solve_maxssn`] returns the split of `β3` between `g1` and `g2` that
//! minimises the worse of the two, and [`oracle_minimax`] recovers the same
//! optimum numerically without any case analysis.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::rng;

/// Per-coordinate tolerance for the error-free family.
pub const FEASIBILITY_TOL: f64 = 1e-12;

/// Generative parameters of the linear fusion data model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentSpec {
    pub beta1: Vec<f64>,
    pub beta2: Vec<f64>,
    pub beta3: Vec<f64>,
    /// Per-coordinate noise standard deviation.
    pub sigma: f64,
}

impl LatentSpec {
    pub fn new(beta1: Vec<f64>, beta2: Vec<f64>, beta3: Vec<f64>, sigma: f64) -> Result<Self> {
        let spec = Self {
            beta1,
            beta2,
            beta3,
            sigma,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", &self.beta1), ("beta2", &self.beta2), ("beta3", &self.beta3)] {
            if b.is_empty() {
                return config_err(format!("{name} must have at least one entry"));
            }
            if b.iter().any(|v| !v.is_finite()) {
                return config_err(format!("{name} has non-finite entries"));
            }
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return config_err(format!("sigma must be finite and >= 0, got {}", self.sigma));
        }
        Ok(())
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.beta1.len(), self.beta2.len(), self.beta3.len())
    }

    /// Returns a copy with a different noise scale.
    pub fn with_sigma(&self, sigma: f64) -> Self {
        Self {
            sigma,
            ..self.clone()
        }
    }

    fn sq_norms(&self) -> (f64, f64, f64) {
        (sq_norm(&self.beta1), sq_norm(&self.beta2), sq_norm(&self.beta3))
    }
}

/// Linear fusion parameters `h1 = [w1; g1]`, `h2 = [w2; g2]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionSolution {
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
    pub g1: Vec<f64>,
    pub g2: Vec<f64>,
}

impl FusionSolution {
    /// The error-free solution that routes `g1` of the shared weight through
    /// source 1 and the remainder through source 2.
    pub fn error_free(spec: &LatentSpec, g1: &[f64]) -> Result<Self> {
        if g1.len() != spec.beta3.len() {
            return shape_err(format!("g1 has length {}, expected {}", g1.len(), spec.beta3.len()));
        }
        let g2 = spec.beta3.iter().zip(g1).map(|(b, g)| b - g).collect();
        Ok(Self {
            w1: spec.beta1.clone(),
            w2: spec.beta2.clone(),
            g1: g1.to_vec(),
            g2,
        })
    }

    pub fn zeros(d1: usize, d2: usize, d3: usize) -> Self {
        Self {
            w1: vec![0.0; d1],
            w2: vec![0.0; d2],
            g1: vec![0.0; d3],
            g2: vec![0.0; d3],
        }
    }

    pub fn h1(&self) -> Vec<f64> {
        self.w1.iter().chain(&self.g1).copied().collect()
    }

    pub fn h2(&self) -> Vec<f64> {
        self.w2.iter().chain(&self.g2).copied().collect()
    }

    /// True iff `w1 = β1`, `w2 = β2` and `g1 + g2 = β3` coordinate-wise
    /// within [`FEASIBILITY_TOL`].
    pub fn is_error_free(&self, spec: &LatentSpec) -> bool {
        let close = |a: &[f64], b: &[f64]| {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= FEASIBILITY_TOL)
        };
        let shared: Vec<f64> = self.g1.iter().zip(&self.g2).map(|(a, b)| a + b).collect();
        close(&self.w1, &spec.beta1) && close(&self.w2, &spec.beta2) && close(&shared, &spec.beta3)
    }
}

/// Law of the latent components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LatentDistribution {
    #[default]
    StandardNormal,
    /// Uniform on `[-1, 1]`.
    Uniform,
}

impl std::str::FromStr for LatentDistribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard_normal" | "normal" | "gaussian" => Ok(Self::StandardNormal),
            "uniform" => Ok(Self::Uniform),
            other => config_err(format!("unknown latent distribution '{other}'")),
        }
    }
}

impl LatentDistribution {
    pub(crate) fn sample(self, rng: &mut rng::Rng) -> f64 {
        match self {
            Self::StandardNormal => StandardNormal.sample(rng),
            Self::Uniform => rng.random_range(-1.0..=1.0),
        }
    }
}

/// Samples of the linear data model. Matrices are row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDataset {
    pub n: usize,
    pub d1: usize,
    pub d2: usize,
    pub d3: usize,
    /// `n × (d1 + d3)`, rows `[z1; z3]`.
    pub x1: Vec<f64>,
    /// `n × (d2 + d3)`, rows `[z2; z3]`.
    pub x2: Vec<f64>,
    pub y: Vec<f64>,
    pub seed: u64,
}

impl LinearDataset {
    pub fn x1_row(&self, i: usize) -> &[f64] {
        let w = self.d1 + self.d3;
        &self.x1[i * w..(i + 1) * w]
    }

    pub fn x2_row(&self, i: usize) -> &[f64] {
        let w = self.d2 + self.d3;
        &self.x2[i * w..(i + 1) * w]
    }
}

/// Draws `n` latent triples and renders both sources and the target.
pub fn generate_linear_data(
    spec: &LatentSpec,
    n: usize,
    latent_dist: LatentDistribution,
    seed: u64,
) -> Result<LinearDataset> {
    spec.validate()?;
    if n == 0 {
        return config_err("n must be >= 1");
    }
    let (d1, d2, d3) = spec.dims();
    let mut rng = rng::seeded(seed, rng::stream::DATA);
    let mut x1 = Vec::with_capacity(n * (d1 + d3));
    let mut x2 = Vec::with_capacity(n * (d2 + d3));
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let z1: Vec<f64> = (0..d1).map(|_| latent_dist.sample(&mut rng)).collect();
        let z2: Vec<f64> = (0..d2).map(|_| latent_dist.sample(&mut rng)).collect();
        let z3: Vec<f64> = (0..d3).map(|_| latent_dist.sample(&mut rng)).collect();
        y.push(dot(&spec.beta1, &z1) + dot(&spec.beta2, &z2) + dot(&spec.beta3, &z3));
        x1.extend_from_slice(&z1);
        x1.extend_from_slice(&z3);
        x2.extend_from_slice(&z2);
        x2.extend_from_slice(&z3);
    }
    Ok(LinearDataset {
        n,
        d1,
        d2,
        d3,
        x1,
        x2,
        y,
        seed,
    })
}

/// `[w1; g1]ᵀx1 + [w2; g2]ᵀx2`.
pub fn predict_fdir(sol: &FusionSolution, x1: &[f64], x2: &[f64]) -> Result<f64> {
    let h1 = sol.h1();
    let h2 = sol.h2();
    if x1.len() != h1.len() {
        return shape_err(format!("x1 has length {}, expected {}", x1.len(), h1.len()));
    }
    if x2.len() != h2.len() {
        return shape_err(format!("x2 has length {}, expected {}", x2.len(), h2.len()));
    }
    Ok(dot(&h1, x1) + dot(&h2, x2))
}

/// Exact expected squared loss of an error-free model when only `source`
/// (1 or 2) receives noise: `σ²(‖β_source‖² + ‖g_source‖²)`.
pub fn expected_ssn_loss(spec: &LatentSpec, sol: &FusionSolution, source: usize) -> Result<f64> {
    if !sol.is_error_free(spec) {
        return Err(Error::Precondition(
            "expected_ssn_loss requires an error-free solution".into(),
        ));
    }
    let s2 = spec.sigma * spec.sigma;
    match source {
        1 => Ok(s2 * (sq_norm(&spec.beta1) + sq_norm(&sol.g1))),
        2 => Ok(s2 * (sq_norm(&spec.beta2) + sq_norm(&sol.g2))),
        other => Err(Error::Precondition(format!("source must be 1 or 2, got {other}"))),
    }
}

/// Which branch of the three-case minimax solution applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolutionCase {
    /// `‖β1‖² + ‖β3‖² ≤ ‖β2‖²`: all shared weight on source 1.
    SourceTwoDominates,
    /// `‖β2‖² + ‖β3‖² ≤ ‖β1‖²`: all shared weight on source 2.
    SourceOneDominates,
    /// Neither dominates: the two single-source losses are balanced.
    Balanced,
}

impl SolutionCase {
    /// 1, 2 or 3, matching the usual numbering of the cases.
    pub fn index(self) -> u8 {
        match self {
            Self::SourceTwoDominates => 1,
            Self::SourceOneDominates => 2,
            Self::Balanced => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaxSsnSolution {
    pub loss: f64,
    pub g1: Vec<f64>,
    pub g2: Vec<f64>,
    pub case: SolutionCase,
}

impl MaxSsnSolution {
    pub fn fusion_solution(&self, spec: &LatentSpec) -> FusionSolution {
        FusionSolution {
            w1: spec.beta1.clone(),
            w2: spec.beta2.clone(),
            g1: self.g1.clone(),
            g2: self.g2.clone(),
        }
    }
}

/// Closed-form minimiser of `max_i E[(y - f(.. x_i + δ_i ..))²]` over the
/// error-free family.
///
/// Ties on a case boundary resolve to the dominance case.
pub fn solve_maxssn(spec: &LatentSpec) -> Result<MaxSsnSolution> {
    spec.validate()?;
    let (c1, c2, v2) = spec.sq_norms();
    let s2 = spec.sigma * spec.sigma;
    let v = &spec.beta3;
    let zeros = vec![0.0; v.len()];

    let (loss, g1, case) = if c1 + v2 <= c2 {
        (s2 * c2, v.clone(), SolutionCase::SourceTwoDominates)
    } else if c2 + v2 <= c1 {
        (s2 * c1, zeros, SolutionCase::SourceOneDominates)
    } else {
        // v2 > |c2 - c1| >= 0 here, so the division is safe.
        let ratio = (c2 - c1) / v2;
        let scale = 0.5 * (1.0 + ratio);
        let loss = s2 * ((c1 + c2) / 2.0 + v2 / 4.0 + (c2 - c1).powi(2) / (4.0 * v2));
        (loss, v.iter().map(|x| scale * x).collect(), SolutionCase::Balanced)
    };
    let g2 = v.iter().zip(&g1).map(|(b, g)| b - g).collect();
    Ok(MaxSsnSolution { loss, g1, g2, case })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsnSolution {
    /// Expected loss with both sources perturbed at once.
    pub asn_loss: f64,
    pub g1: Vec<f64>,
    pub g2: Vec<f64>,
    /// The worst single-source loss of this solution.
    pub induced_maxssn_loss: f64,
}

/// Least-squares optimum under noise on all sources: `g1 = g2 = β3 / 2`.
pub fn solve_asn_least_squares(spec: &LatentSpec) -> Result<AsnSolution> {
    spec.validate()?;
    let (c1, c2, v2) = spec.sq_norms();
    let s2 = spec.sigma * spec.sigma;
    let half: Vec<f64> = spec.beta3.iter().map(|b| b / 2.0).collect();
    Ok(AsnSolution {
        asn_loss: s2 * (c1 + c2 + 0.5 * v2),
        g1: half.clone(),
        g2: half,
        induced_maxssn_loss: s2 * (c1 + 0.25 * v2).max(c2 + 0.25 * v2),
    })
}

/// Which side of `|‖β2‖² − ‖β1‖²| / ‖β3‖² ≥ 1` the bound uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GapBranch {
    Dominant,
    Balanced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapBound {
    pub actual_gap: f64,
    pub lower_bound: f64,
    pub branch: GapBranch,
}

/// Gap between the all-source least-squares model's worst single-source loss
/// and the minimax optimum, with its analytical lower bound.
pub fn maxssn_gap_bound(spec: &LatentSpec) -> Result<GapBound> {
    let star = solve_maxssn(spec)?;
    let asn = solve_asn_least_squares(spec)?;
    let (c1, c2, v2) = spec.sq_norms();
    let s2 = spec.sigma * spec.sigma;
    let diff = (c2 - c1).abs();
    // ‖β3‖ = 0 counts as dominant; the bound is then ¼‖β3‖² = 0.
    let dominant = v2 == 0.0 || diff / v2 >= 1.0;
    let (lower_bound, branch) = if dominant {
        (s2 * 0.25 * v2, GapBranch::Dominant)
    } else {
        (s2 * 0.25 * diff, GapBranch::Balanced)
    };
    Ok(GapBound {
        actual_gap: asn.induced_maxssn_loss - star.loss,
        lower_bound,
        branch,
    })
}

/// Settings for [`oracle_minimax`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSettings {
    /// Coarse grid step per coordinate; `None` uses `‖β3‖ / 100`.
    pub resolution: Option<f64>,
    /// Budget of Newton iterations for the refinement stage.
    pub refine_iters: usize,
    /// Upper bound on coarse grid evaluations; the step is widened to fit.
    pub max_grid_points: usize,
    /// Stop once the barrier duality gap is below `tol · (1 + value)`.
    pub tol: f64,
}

impl Default for OracleSettings {
    fn default() -> Self {
        Self {
            resolution: None,
            refine_iters: 200,
            max_grid_points: 30_000_000,
            tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub loss: f64,
    pub g1: Vec<f64>,
    pub g2: Vec<f64>,
    /// Best value seen on the coarse grid (before refinement).
    pub grid_loss: f64,
    pub newton_iters: usize,
}

/// Numeric minimiser of `σ² max{‖β1‖² + ‖g‖², ‖β2‖² + ‖g − β3‖²}` over all
/// `g ∈ R^{d3}`.
///
/// Stage one scans a grid over `[−‖β3‖, 2‖β3‖]` per coordinate; stage two
/// solves the epigraph form `min γ s.t. F_k(g) ≤ γ` with a log-barrier Newton
/// method started from the best grid point. Neither stage uses the case
/// structure of the closed form.
pub fn oracle_minimax(spec: &LatentSpec, settings: &OracleSettings) -> Result<OracleResult> {
    spec.validate()?;
    let (c1, c2, _) = spec.sq_norms();
    let v = &spec.beta3;
    let pieces = [
        QuadraticPiece {
            offset: c1,
            center: vec![0.0; v.len()],
        },
        QuadraticPiece {
            offset: c2,
            center: v.clone(),
        },
    ];
    let objective = |g: &[f64]| pieces.iter().map(|p| p.value(g)).fold(f64::NEG_INFINITY, f64::max);

    let start = grid_search(v, c1, c2, settings);
    let grid_loss = objective(&start);
    let (g, newton_iters) = barrier_refine(&pieces, start, settings)?;
    let s2 = spec.sigma * spec.sigma;
    let g2 = v.iter().zip(&g).map(|(b, x)| b - x).collect();
    Ok(OracleResult {
        loss: s2 * objective(&g),
        g1: g,
        g2,
        grid_loss: s2 * grid_loss,
        newton_iters,
    })
}

/// `offset + ‖g − center‖²`.
struct QuadraticPiece {
    offset: f64,
    center: Vec<f64>,
}

impl QuadraticPiece {
    fn value(&self, g: &[f64]) -> f64 {
        self.offset + g.iter().zip(&self.center).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
    }

    fn grad(&self, g: &[f64]) -> Vec<f64> {
        g.iter().zip(&self.center).map(|(a, b)| 2.0 * (a - b)).collect()
    }

    fn hess_diag(&self) -> f64 {
        2.0
    }
}

fn grid_search(v: &[f64], c1: f64, c2: f64, settings: &OracleSettings) -> Vec<f64> {
    let d = v.len();
    let norm = sq_norm(v).sqrt();
    if norm == 0.0 {
        return vec![0.0; d];
    }
    let mut step = settings.resolution.unwrap_or(norm / 100.0);
    let span = 3.0 * norm;
    let points_for = |step: f64| (span / step).floor() as usize + 1;
    while (points_for(step) as f64).powi(d as i32) > settings.max_grid_points as f64 {
        step *= 1.25;
    }
    let k = points_for(step);
    let axis: Vec<f64> = (0..k).map(|i| -norm + i as f64 * step).collect();
    // per-coordinate contributions to ‖g‖² and ‖g − v‖²
    let own: Vec<f64> = axis.iter().map(|a| a * a).collect();
    let other: Vec<Vec<f64>> = v
        .iter()
        .map(|vi| axis.iter().map(|a| (a - vi).powi(2)).collect())
        .collect();

    let mut best = f64::INFINITY;
    let mut best_idx = vec![0usize; d];
    let mut idx = vec![0usize; d];
    loop {
        let mut s1 = c1;
        let mut s2 = c2;
        for (j, &i) in idx.iter().enumerate().take(d - 1) {
            s1 += own[i];
            s2 += other[j][i];
        }
        // innermost coordinate scanned without re-summing the prefix
        let last = &other[d - 1];
        for i in 0..k {
            let val = (s1 + own[i]).max(s2 + last[i]);
            if val < best {
                best = val;
                idx[d - 1] = i;
                best_idx.clone_from(&idx);
            }
        }
        // odometer increment over the leading d - 1 coordinates
        let mut j = d - 1;
        loop {
            if j == 0 {
                return best_idx.iter().map(|&i| axis[i]).collect();
            }
            j -= 1;
            idx[j] += 1;
            if idx[j] < k {
                break;
            }
            idx[j] = 0;
        }
    }
}

/// Log-barrier Newton on `(g, γ)` for `min γ s.t. piece_k(g) ≤ γ`.
fn barrier_refine(
    pieces: &[QuadraticPiece],
    start: Vec<f64>,
    settings: &OracleSettings,
) -> Result<(Vec<f64>, usize)> {
    let d = start.len();
    let n = d + 1;
    let m = pieces.len() as f64;
    let max_piece = |g: &[f64]| pieces.iter().map(|p| p.value(g)).fold(f64::NEG_INFINITY, f64::max);

    let mut g = start;
    let mut gamma = max_piece(&g) + 0.1 * (1.0 + max_piece(&g).abs());
    let mut t = 1.0;
    let mut iters = 0usize;

    let barrier = |g: &[f64], gamma: f64, t: f64| -> f64 {
        let mut val = t * gamma;
        for p in pieces {
            let s = gamma - p.value(g);
            if s <= 0.0 {
                return f64::INFINITY;
            }
            val -= s.ln();
        }
        val
    };

    loop {
        // centering
        loop {
            if iters >= settings.refine_iters {
                return Err(Error::NonConvergence {
                    iterations: iters,
                    last_value: max_piece(&g),
                    last_iterate: g,
                });
            }
            iters += 1;
            let mut grad = vec![0.0; n];
            let mut hess = vec![0.0; n * n];
            grad[d] = t;
            for p in pieces {
                let s = gamma - p.value(&g);
                let pg = p.grad(&g);
                // ∇s = (−∇p, 1)
                let mut ds = vec![0.0; n];
                for i in 0..d {
                    ds[i] = -pg[i];
                }
                ds[d] = 1.0;
                for i in 0..n {
                    grad[i] -= ds[i] / s;
                    for j in 0..n {
                        hess[i * n + j] += ds[i] * ds[j] / (s * s);
                    }
                }
                for i in 0..d {
                    hess[i * n + i] += p.hess_diag() / s;
                }
            }
            let step = solve_dense(&mut hess, &grad.iter().map(|x| -x).collect::<Vec<_>>(), n)
                .ok_or_else(|| Error::NonConvergence {
                    iterations: iters,
                    last_value: max_piece(&g),
                    last_iterate: g.clone(),
                })?;
            let decrement: f64 = -grad.iter().zip(&step).map(|(a, b)| a * b).sum::<f64>();
            if decrement / 2.0 <= 1e-10 {
                break;
            }
            // backtracking line search
            let f0 = barrier(&g, gamma, t);
            let mut alpha = 1.0;
            loop {
                let g_new: Vec<f64> = g.iter().zip(&step).map(|(a, b)| a + alpha * b).collect();
                let gamma_new = gamma + alpha * step[d];
                let f_new = barrier(&g_new, gamma_new, t);
                if f_new <= f0 - 0.25 * alpha * decrement {
                    if g_new == g && gamma_new == gamma {
                        // step below f64 resolution; the centre is reached
                        alpha = 0.0;
                        break;
                    }
                    g = g_new;
                    gamma = gamma_new;
                    break;
                }
                alpha *= 0.5;
                if alpha < 1e-20 {
                    break;
                }
            }
            if alpha < 1e-20 {
                break;
            }
        }
        if m / t <= settings.tol * (1.0 + gamma.abs()) {
            return Ok((g, iters));
        }
        t *= 20.0;
    }
}

/// Gaussian elimination with partial pivoting; `a` is overwritten.
fn solve_dense(a: &mut [f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut b = b.to_vec();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))?;
        if a[pivot * n + col].abs() < 1e-300 {
            return None;
        }
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            b.swap(col, pivot);
        }
        for row in col + 1..n {
            let f = a[row * n + col] / a[col * n + col];
            if f != 0.0 {
                for k in col..n {
                    a[row * n + k] -= f * a[col * n + k];
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut s = b[row];
        for k in row + 1..n {
            s -= a[row * n + k] * x[k];
        }
        x[row] = s / a[row * n + row];
    }
    Some(x)
}

/// RMS prediction error of the scalar model `g1 = Δ`, `g2 = c3 − Δ` when
/// source 1 or source 2 is perturbed: `σ√(c1² + Δ²)` and `σ√(c2² + (c3 − Δ)²)`.
pub fn unbalanced_error_profile(c1: f64, c2: f64, c3: f64, delta: f64, sigma: f64) -> (f64, f64) {
    (
        sigma * (c1 * c1 + delta * delta).sqrt(),
        sigma * (c2 * c2 + (c3 - delta).powi(2)).sqrt(),
    )
}

/// Random spec with dimensions in `1..=max_dim`, entries uniform in
/// `[-range, range]` and `σ` drawn from `sigmas`.
pub fn random_latent_spec(rng: &mut rng::Rng, max_dim: usize, range: f64, sigmas: &[f64]) -> LatentSpec {
    let entry = Uniform::new_inclusive(-range, range).expect("valid range");
    let draw = |rng: &mut rng::Rng| {
        let d = rng.random_range(1..=max_dim);
        (0..d).map(|_| entry.sample(rng)).collect::<Vec<f64>>()
    };
    let beta1 = draw(rng);
    let beta2 = draw(rng);
    let beta3 = draw(rng);
    let sigma = sigmas[rng.random_range(0..sigmas.len())];
    LatentSpec {
        beta1,
        beta2,
        beta3,
        sigma,
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn sq_norm(a: &[f64]) -> f64 {
    dot(a, a)
}
