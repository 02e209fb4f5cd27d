use proptest::prelude::*;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use ssrobust::adversarial::{
    adv_gap_condition, adv_reduced_objective, fgs_attack, logistic_loss, oracle_minimax_l1, random_adv_spec,
    solve_maxssn_adv, AdvSpec, L1OracleSettings,
};
use ssrobust::linear::{
    expected_ssn_loss, generate_linear_data, maxssn_gap_bound, oracle_minimax, predict_fdir, random_latent_spec,
    solve_asn_least_squares, solve_maxssn, unbalanced_error_profile, FusionSolution, GapBranch, LatentDistribution,
    LatentSpec, OracleSettings, SolutionCase,
};
use ssrobust::rng;

fn random_specs(n: usize, seed: u64) -> Vec<LatentSpec> {
    let mut r = rng::seeded(seed, 0);
    (0..n).map(|_| random_latent_spec(&mut r, 3, 2.0, &[0.5, 1.0, 2.0])).collect()
}

#[test]
fn closed_form_matches_oracle_on_random_specs() {
    for spec in random_specs(100, 42) {
        let sol = solve_maxssn(&spec).unwrap();
        let oracle = oracle_minimax(&spec, &OracleSettings::default()).unwrap();
        assert!(
            (sol.loss - oracle.loss).abs() <= 1e-6 * (1.0 + sol.loss),
            "{spec:?}: closed {} oracle {}",
            sol.loss,
            oracle.loss
        );
    }
}

#[test]
fn balanced_case_equalises_sources() {
    for spec in random_specs(200, 7) {
        let sol = solve_maxssn(&spec).unwrap();
        let fs = sol.fusion_solution(&spec);
        assert!(fs.is_error_free(&spec));
        if sol.case == SolutionCase::Balanced {
            let l1 = expected_ssn_loss(&spec, &fs, 1).unwrap();
            let l2 = expected_ssn_loss(&spec, &fs, 2).unwrap();
            assert!((l1 - l2).abs() <= 1e-9, "{spec:?}");
            assert!((sol.loss - l1).abs() <= 1e-9);
        }
    }
}

#[test]
fn gap_bound_holds_and_both_branches_are_hit() {
    let mut branches = (false, false);
    for spec in random_specs(100, 42) {
        let gap = maxssn_gap_bound(&spec).unwrap();
        assert!(gap.actual_gap >= gap.lower_bound - 1e-9, "{spec:?}: {gap:?}");
        match gap.branch {
            GapBranch::Dominant => branches.0 = true,
            GapBranch::Balanced => branches.1 = true,
        }
    }
    assert!(branches.0 && branches.1);
}

#[test]
fn expected_loss_matches_monte_carlo() {
    let spec = LatentSpec::new(vec![1.0, -0.5], vec![2.0], vec![3.0, 1.0], 0.7).unwrap();
    let sol = FusionSolution::error_free(&spec, &[2.0, -0.5]).unwrap();
    let data = generate_linear_data(&spec, 1, LatentDistribution::StandardNormal, 9).unwrap();
    let exact = expected_ssn_loss(&spec, &sol, 1).unwrap();
    let mut r = rng::seeded(99, 0);
    let draws = 1_000_000;
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    let x1 = data.x1_row(0);
    let x2 = data.x2_row(0);
    let mut noisy = x1.to_vec();
    for _ in 0..draws {
        for (n, x) in noisy.iter_mut().zip(x1) {
            let e: f64 = StandardNormal.sample(&mut r);
            *n = x + spec.sigma * e;
        }
        let err = (data.y[0] - predict_fdir(&sol, &noisy, x2).unwrap()).powi(2);
        sum += err;
        sum_sq += err * err;
    }
    let mean = sum / draws as f64;
    let se = ((sum_sq / draws as f64 - mean * mean) / draws as f64).sqrt();
    assert!((mean - exact).abs() <= 3.0 * se, "mc {mean} exact {exact} se {se}");
}

#[test]
fn unbalanced_profile_matches_monte_carlo() {
    let (a, b) = unbalanced_error_profile(1.0, 1.0, 10.0, 0.1, 1.0);
    let mut r = rng::seeded(5, 0);
    let n = 1_000_000;
    let (mut s1, mut s2) = (0.0, 0.0);
    for _ in 0..n {
        let e: [f64; 3] = [StandardNormal.sample(&mut r), StandardNormal.sample(&mut r), StandardNormal.sample(&mut r)];
        s1 += (e[0] + 0.1 * e[2]).powi(2);
        s2 += (e[1] + 9.9 * e[2]).powi(2);
    }
    assert!(((s1 / n as f64).sqrt() - a).abs() / a < 0.01);
    assert!(((s2 / n as f64).sqrt() - b).abs() / b < 0.01);
}

#[test]
fn l1_closed_form_matches_oracle_on_random_specs() {
    let mut r = rng::seeded(43, 0);
    for _ in 0..100 {
        let spec = random_adv_spec(&mut r, 3, 2.0, 1.0);
        let sol = solve_maxssn_adv(&spec).unwrap();
        let oracle = oracle_minimax_l1(&spec, &L1OracleSettings::default()).unwrap();
        assert!((sol.gamma - oracle.gamma).abs() <= 1e-6, "{spec:?}: {} vs {}", sol.gamma, oracle.gamma);
    }
}

#[test]
fn balanced_l1_optimum_is_degenerate() {
    let mut r = rng::seeded(44, 0);
    let mut checked = 0;
    while checked < 30 {
        let spec = random_adv_spec(&mut r, 3, 2.0, 1.0);
        let sol = solve_maxssn_adv(&spec).unwrap();
        if sol.case != SolutionCase::Balanced {
            continue;
        }
        checked += 1;
        assert!(sol.alpha.iter().all(|a| (0.0..=1.0).contains(a)));
        let v: Vec<f64> = spec.beta3.iter().map(|b| b.abs()).collect();
        let target = sol.gamma - spec.beta1.iter().map(|b| b.abs()).sum::<f64>();
        for _ in 0..20 {
            // random α in [0,1]^d with Σ α_i |v_i| = target
            let raw: Vec<f64> = (0..v.len()).map(|_| r.random_range(0.0..1.0)).collect();
            let alpha = project_to_level(&raw, &v, target);
            let g1: Vec<f64> = alpha.iter().zip(&spec.beta3).map(|(a, b)| a * b).collect();
            let g2 = spec.beta3.iter().zip(&g1).map(|(b, g)| b - g).collect();
            let fs = FusionSolution {
                w1: spec.beta1.clone(),
                w2: spec.beta2.clone(),
                g1,
                g2,
            };
            assert!((adv_reduced_objective(&fs, 1.0) - sol.gamma).abs() < 1e-9);
        }
    }
}

// bisection on a shift so that Σ clamp(raw_i + s, 0, 1)·v_i = target
fn project_to_level(raw: &[f64], v: &[f64], target: f64) -> Vec<f64> {
    let level = |s: f64| -> f64 { raw.iter().zip(v).map(|(a, w)| (a + s).clamp(0.0, 1.0) * w).sum() };
    let (mut lo, mut hi) = (-2.0, 2.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if level(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    raw.iter().map(|a| (a + 0.5 * (lo + hi)).clamp(0.0, 1.0)).collect()
}

#[test]
fn gap_condition_straddles_threshold() {
    // β1 = (1), β3 = (2); ‖β2‖₁ sweeps the ratio from 0.1 to 2.0
    for k in 1..=20 {
        let ratio = k as f64 * 0.1;
        let spec = AdvSpec::new(vec![1.0], vec![1.0 + 2.0 * ratio], vec![2.0], 1.0).unwrap();
        let gap = adv_gap_condition(&spec).unwrap();
        if ratio <= 1.0 + 1e-12 {
            assert!((gap.maxssn_adv_prime - gap.maxssn_adv_star).abs() <= 1e-9, "ratio {ratio}");
        } else {
            assert!(gap.strict_gap);
            assert!(gap.maxssn_adv_prime > gap.maxssn_adv_star, "ratio {ratio}");
        }
    }
}

fn logistic_of(sol: &FusionSolution, x1: &[f64], x2: &[f64], y: f64) -> f64 {
    logistic_loss(y * predict_fdir(sol, x1, x2).unwrap())
}

fn random_solution(r: &mut rng::Rng, d: (usize, usize, usize)) -> FusionSolution {
    let mut draw = |n: usize| (0..n).map(|_| r.random_range(-2.0..2.0)).collect::<Vec<f64>>();
    FusionSolution {
        w1: draw(d.0),
        w2: draw(d.1),
        g1: draw(d.2),
        g2: draw(d.2),
    }
}

#[test]
fn fgs_never_decreases_loss_and_dominates_random_perturbations() {
    let mut r = rng::seeded(8, 0);
    let eps = 0.3;
    for _ in 0..1000 {
        let sol = random_solution(&mut r, (2, 1, 2));
        let x1: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
        let x2: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
        let y = if r.random_bool(0.5) { 1.0 } else { -1.0 };
        let (e1, e2) = fgs_attack(&sol, y, eps).unwrap();
        let a1: Vec<f64> = x1.iter().zip(&e1).map(|(a, b)| a + b).collect();
        let a2: Vec<f64> = x2.iter().zip(&e2).map(|(a, b)| a + b).collect();
        let base = logistic_of(&sol, &x1, &x2, y);
        let attacked = logistic_of(&sol, &a1, &a2, y);
        assert!(attacked >= base);
        for _ in 0..50 {
            let p1: Vec<f64> = x1.iter().map(|a| a + r.random_range(-eps..=eps)).collect();
            let p2: Vec<f64> = x2.iter().map(|a| a + r.random_range(-eps..=eps)).collect();
            assert!(logistic_of(&sol, &p1, &p2, y) <= attacked + 1e-12);
        }
    }
}

fn small_vec() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, 1..=3)
}

proptest! {
    #[test]
    fn closed_forms_are_feasible(b1 in small_vec(), b2 in small_vec(), b3 in small_vec(), sigma in 0.0f64..3.0) {
        let spec = LatentSpec::new(b1, b2, b3, sigma).unwrap();
        let star = solve_maxssn(&spec).unwrap();
        let asn = solve_asn_least_squares(&spec).unwrap();
        for (g1, g2) in [(&star.g1, &star.g2), (&asn.g1, &asn.g2)] {
            for ((a, b), v) in g1.iter().zip(g2).zip(&spec.beta3) {
                prop_assert!((a + b - v).abs() <= 1e-12);
            }
        }
        let gap = maxssn_gap_bound(&spec).unwrap();
        prop_assert!(gap.actual_gap >= gap.lower_bound - 1e-9);
    }

    #[test]
    fn losses_scale_quadratically_with_sigma(b1 in small_vec(), b2 in small_vec(), b3 in small_vec(), t in 0.1f64..4.0) {
        let spec = LatentSpec::new(b1, b2, b3, 1.0).unwrap();
        let base = solve_maxssn(&spec).unwrap();
        let scaled = solve_maxssn(&spec.with_sigma(t)).unwrap();
        prop_assert!((scaled.loss - t * t * base.loss).abs() <= 1e-12 * (1.0 + scaled.loss));
        prop_assert_eq!(&scaled.g1, &base.g1);
        let asn = solve_asn_least_squares(&spec).unwrap();
        let asn_t = solve_asn_least_squares(&spec.with_sigma(t)).unwrap();
        prop_assert!((asn_t.induced_maxssn_loss - t * t * asn.induced_maxssn_loss).abs() <= 1e-12 * (1.0 + asn_t.induced_maxssn_loss));
    }

    #[test]
    fn dominance_case_is_no_worse_than_balanced_formula(b1 in small_vec(), b2 in small_vec(), b3 in small_vec()) {
        let spec = LatentSpec::new(b1, b2, b3, 1.0).unwrap();
        let sol = solve_maxssn(&spec).unwrap();
        if sol.case == SolutionCase::SourceTwoDominates {
            let fs = sol.fusion_solution(&spec);
            let c1: f64 = spec.beta1.iter().map(|x| x * x).sum();
            let c2: f64 = spec.beta2.iter().map(|x| x * x).sum();
            let v2: f64 = spec.beta3.iter().map(|x| x * x).sum();
            let l2 = expected_ssn_loss(&spec, &fs, 2).unwrap();
            prop_assert!((l2 - c2).abs() <= 1e-12);
            if v2 > 0.0 {
                let balanced = (c1 + c2) / 2.0 + v2 / 4.0 + (c2 - c1).powi(2) / (4.0 * v2);
                prop_assert!(l2 <= balanced + 1e-12);
            }
        }
    }

    #[test]
    fn adv_solution_is_balanced_and_feasible(b1 in small_vec(), b2 in small_vec(), b3 in small_vec(), eps in 0.0f64..2.0) {
        let spec = AdvSpec::new(b1, b2, b3, eps).unwrap();
        let sol = solve_maxssn_adv(&spec).unwrap();
        for ((a, b), v) in sol.g1.iter().zip(&sol.g2).zip(&spec.beta3) {
            prop_assert!((a + b - v).abs() <= 1e-12);
        }
        if sol.case == SolutionCase::Balanced {
            let l1 = |x: &[f64]| x.iter().map(|v| v.abs()).sum::<f64>();
            prop_assert!((l1(&sol.g1) + l1(&sol.g2) - l1(&spec.beta3)).abs() <= 1e-9);
            prop_assert!((l1(&sol.g1) + l1(&spec.beta1) - l1(&sol.g2) - l1(&spec.beta2)).abs() <= 1e-9);
            prop_assert!(sol.alpha.iter().all(|a| (0.0..=1.0).contains(a)));
        }
        let gap = adv_gap_condition(&spec).unwrap();
        prop_assert!(gap.maxssn_adv_prime >= gap.maxssn_adv_star - 1e-9);
    }

    #[test]
    fn generated_data_satisfies_invariants(b1 in small_vec(), b2 in small_vec(), b3 in small_vec(), seed in any::<u64>()) {
        let spec = LatentSpec::new(b1, b2, b3, 1.0).unwrap();
        let data = generate_linear_data(&spec, 20, LatentDistribution::Uniform, seed).unwrap();
        let sol = FusionSolution::error_free(&spec, &spec.beta3).unwrap();
        for i in 0..data.n {
            prop_assert_eq!(&data.x1_row(i)[data.d1..], &data.x2_row(i)[data.d2..]);
            prop_assert!((predict_fdir(&sol, data.x1_row(i), data.x2_row(i)).unwrap() - data.y[i]).abs() < 1e-10);
        }
    }
}
