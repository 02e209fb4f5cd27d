//! Single-source robustness of the linear fusion model against `ℓ∞`-bounded
//! attacks on one source at a time.
//!
//! For the logistic loss `ℓ(y f)` the worst perturbation of source `i` is the
//! fast gradient sign step, and the minimax problem over the error-free family
//! reduces to `ε min max{‖w1‖₁ + ‖g1‖₁, ‖w2‖₁ + ‖g2‖₁}`.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::linear::{FusionSolution, SolutionCase};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvSpec {
    pub beta1: Vec<f64>,
    pub beta2: Vec<f64>,
    pub beta3: Vec<f64>,
    /// `ℓ∞` attack budget.
    pub epsilon: f64,
}

impl AdvSpec {
    pub fn new(beta1: Vec<f64>, beta2: Vec<f64>, beta3: Vec<f64>, epsilon: f64) -> Result<Self> {
        let spec = Self {
            beta1,
            beta2,
            beta3,
            epsilon,
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
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return config_err(format!("epsilon must be finite and >= 0, got {}", self.epsilon));
        }
        Ok(())
    }

    fn l1_norms(&self) -> (f64, f64, f64) {
        (l1(&self.beta1), l1(&self.beta2), l1(&self.beta3))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvSolution {
    /// Optimal minimax value without the `ε` factor.
    pub gamma: f64,
    pub g1: Vec<f64>,
    pub g2: Vec<f64>,
    /// Mixing coefficients with `g1 = α ⊙ β3`.
    pub alpha: Vec<f64>,
    pub case: SolutionCase,
}

/// `sgn` with `sgn(0) = 0`.
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Label predicted by `sgn(f)`, with `f = 0` mapped to `+1`.
pub fn classify(f: f64) -> f64 {
    if f >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// `log(1 + exp(−x))`, evaluated without overflow.
pub fn logistic_loss(x: f64) -> f64 {
    if x > 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

/// Fast gradient sign perturbations `η_i = −εy sgn(h_i)` for both sources.
pub fn fgs_attack(sol: &FusionSolution, y: f64, epsilon: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if y != 1.0 && y != -1.0 {
        return Err(Error::Precondition(format!("label must be -1 or +1, got {y}")));
    }
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return config_err(format!("epsilon must be finite and >= 0, got {epsilon}"));
    }
    let step = |h: Vec<f64>| h.into_iter().map(|w| -epsilon * y * sign(w)).collect();
    Ok((step(sol.h1()), step(sol.h2())))
}

/// `ε max{‖w1‖₁ + ‖g1‖₁, ‖w2‖₁ + ‖g2‖₁}`.
pub fn adv_reduced_objective(sol: &FusionSolution, epsilon: f64) -> f64 {
    epsilon * (l1(&sol.w1) + l1(&sol.g1)).max(l1(&sol.w2) + l1(&sol.g2))
}

/// Closed-form minimiser of the reduced `ℓ1` problem.
///
/// The balanced case has a continuum of optima; the uniform split
/// `α_i = (γ − ‖β1‖₁) / ‖β3‖₁` is returned.
pub fn solve_maxssn_adv(spec: &AdvSpec) -> Result<AdvSolution> {
    spec.validate()?;
    let (c1, c2, v1) = spec.l1_norms();
    let d3 = spec.beta3.len();
    let (gamma, a, case) = if c1 + v1 <= c2 {
        (c2, 1.0, SolutionCase::SourceTwoDominates)
    } else if c2 + v1 <= c1 {
        (c1, 0.0, SolutionCase::SourceOneDominates)
    } else {
        let gamma = 0.5 * (c1 + c2 + v1);
        (gamma, (gamma - c1) / v1, SolutionCase::Balanced)
    };
    // with β3 = 0 and ‖β1‖₁ = ‖β2‖₁ the first branch fires and α is irrelevant
    let alpha = vec![a; d3];
    let g1: Vec<f64> = spec.beta3.iter().map(|b| a * b).collect();
    let g2 = spec.beta3.iter().zip(&g1).map(|(b, g)| b - g).collect();
    Ok(AdvSolution {
        gamma,
        g1,
        g2,
        alpha,
        case,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvGap {
    /// `|‖β2‖₁ − ‖β1‖₁| / ‖β3‖₁ > 1`.
    pub strict_gap: bool,
    /// `ε γ*` of the single-source minimax solution.
    pub maxssn_adv_star: f64,
    /// Worst single-source adversarial loss of the all-source adversarial
    /// optimum that is reported for comparison.
    pub maxssn_adv_prime: f64,
    /// Split `α` used for the all-source solution.
    pub prime_alpha: f64,
}

/// Compares single-source minimax training with all-source adversarial
/// training.
///
/// Every split `g1 = α ⊙ β3` with `α ∈ [0, 1]` minimises the all-source
/// objective. When the ratio is at most one, one of these splits balances the
/// two sources and the values coincide; it is the one reported. Otherwise no
/// split in `[0, 1]` can match the single-source optimum and the symmetric
/// split `α = ½` is reported.
pub fn adv_gap_condition(spec: &AdvSpec) -> Result<AdvGap> {
    let star = solve_maxssn_adv(spec)?;
    let (c1, c2, v1) = spec.l1_norms();
    let strict_gap = v1 > 0.0 && (c2 - c1).abs() / v1 > 1.0;
    let prime_alpha = if strict_gap { 0.5 } else { star.alpha.first().copied().unwrap_or(0.5) };
    let g1: Vec<f64> = spec.beta3.iter().map(|b| prime_alpha * b).collect();
    let sol = FusionSolution {
        w1: spec.beta1.clone(),
        w2: spec.beta2.clone(),
        g2: spec.beta3.iter().zip(&g1).map(|(b, g)| b - g).collect(),
        g1,
    };
    Ok(AdvGap {
        strict_gap,
        maxssn_adv_star: spec.epsilon * star.gamma,
        maxssn_adv_prime: adv_reduced_objective(&sol, spec.epsilon),
        prime_alpha,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct L1OracleSettings {
    /// Grid step per coordinate; `None` uses `‖β3‖₁ / 50`.
    pub resolution: Option<f64>,
    pub max_grid_points: usize,
    /// Budget of coordinate-descent sweeps.
    pub max_sweeps: usize,
}

impl Default for L1OracleSettings {
    fn default() -> Self {
        Self {
            resolution: None,
            max_grid_points: 10_000_000,
            max_sweeps: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct L1OracleResult {
    pub gamma: f64,
    pub g1: Vec<f64>,
    pub sweeps: usize,
}

/// Numeric minimiser of `max{‖β1‖₁ + ‖g‖₁, ‖β2‖₁ + ‖g − β3‖₁}`: grid over
/// `[−‖β3‖₁, ‖β3‖₁]` per coordinate, then cyclic exact coordinate
/// minimisation over the breakpoints of each one-dimensional slice.
pub fn oracle_minimax_l1(spec: &AdvSpec, settings: &L1OracleSettings) -> Result<L1OracleResult> {
    spec.validate()?;
    let (c1, c2, v1) = spec.l1_norms();
    let v = &spec.beta3;
    let d = v.len();
    let objective = |g: &[f64]| {
        let a: f64 = g.iter().map(|x| x.abs()).sum();
        let b: f64 = g.iter().zip(v).map(|(x, vi)| (x - vi).abs()).sum();
        (c1 + a).max(c2 + b)
    };

    let mut g = vec![0.0; d];
    if v1 > 0.0 {
        let mut step = settings.resolution.unwrap_or(v1 / 50.0);
        let points_for = |step: f64| (2.0 * v1 / step).floor() as usize + 1;
        while (points_for(step) as f64).powi(d as i32) > settings.max_grid_points as f64 {
            step *= 1.25;
        }
        let k = points_for(step);
        let axis: Vec<f64> = (0..k).map(|i| -v1 + i as f64 * step).collect();
        let mut best = f64::INFINITY;
        let mut idx = vec![0usize; d];
        let mut cand = vec![0.0; d];
        'grid: loop {
            for (c, &i) in cand.iter_mut().zip(&idx) {
                *c = axis[i];
            }
            let val = objective(&cand);
            if val < best {
                best = val;
                g.clone_from(&cand);
            }
            let mut j = d;
            loop {
                if j == 0 {
                    break 'grid;
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

    let mut current = objective(&g);
    for sweep in 1..=settings.max_sweeps {
        let before = current;
        for i in 0..d {
            // slice: max{A + |x|, B + |x − v_i|}
            let a = c1 + g.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, x)| x.abs()).sum::<f64>();
            let b = c2
                + g.iter()
                    .zip(v)
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, (x, vj))| (x - vj).abs())
                    .sum::<f64>();
            let vi = v[i];
            let slice = |x: f64| (a + x.abs()).max(b + (x - vi).abs());
            let candidates = [
                0.0,
                vi,
                (b - a + vi) / 2.0,
                (a - b + vi) / 2.0,
                g[i],
            ];
            let mut best_x = g[i];
            let mut best_val = slice(g[i]);
            for &x in &candidates {
                let val = slice(x);
                if val < best_val {
                    best_val = val;
                    best_x = x;
                }
            }
            g[i] = best_x;
        }
        current = objective(&g);
        if before - current <= 1e-15 * (1.0 + current.abs()) {
            return Ok(L1OracleResult {
                gamma: current,
                g1: g,
                sweeps: sweep,
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: settings.max_sweeps,
        last_value: current,
        last_iterate: g,
    })
}

/// Random spec with dimensions in `1..=max_dim` and entries uniform in
/// `[-range, range]`.
pub fn random_adv_spec(rng: &mut crate::rng::Rng, max_dim: usize, range: f64, epsilon: f64) -> AdvSpec {
    let l = crate::linear::random_latent_spec(rng, max_dim, range, &[1.0]);
    AdvSpec {
        beta1: l.beta1,
        beta2: l.beta2,
        beta3: l.beta3,
        epsilon,
    }
}

pub(crate) fn l1(a: &[f64]) -> f64 {
    a.iter().map(|x| x.abs()).sum()
}
