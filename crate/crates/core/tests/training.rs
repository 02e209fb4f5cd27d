use ssrobust::corruption::{CorruptionKind, CorruptionSpec};
use ssrobust::diff::{Tag, Tensor};
use ssrobust::model::{FusionKind, FusionModel, ModelSpec};
use ssrobust::tasks::{make_task, Dataset, SyntheticTask, TaskKind};
use ssrobust::training::{train, Algorithm, Corrupted, TrainConfig, TrainMode};
use ssrobust::Error;

fn linear_task() -> SyntheticTask {
    SyntheticTask {
        kind: TaskKind::LinearRegression,
        n_train: 1000,
        n_val: 200,
        seed: 3,
        ..SyntheticTask::default()
    }
}

fn linear_model(task: &SyntheticTask, seed: u64) -> FusionModel {
    FusionModel::build(&ModelSpec::linear(), &task.source_shapes(), task.target(), seed).unwrap()
}

fn small_conv(depths: Vec<usize>) -> SyntheticTask {
    SyntheticTask {
        n_train: 200,
        n_val: 50,
        height: 4,
        width: 4,
        gains: vec![1.0; depths.len()],
        pattern_noise: vec![0.2; depths.len()],
        depths,
        ..SyntheticTask::default()
    }
}

fn conv_model(task: &SyntheticTask, fusion: FusionKind, seed: u64) -> FusionModel {
    let spec = ModelSpec {
        fusion,
        extractor_widths: Some(vec![vec![3]]),
        head_widths: vec![4],
        ..ModelSpec::default()
    };
    FusionModel::build(&spec, &task.source_shapes(), task.target(), seed).unwrap()
}

fn cfg(algorithm: Algorithm, iterations: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        algorithm,
        iterations,
        batch_size: 32,
        lr,
        seed: 11,
        ..TrainConfig::default()
    }
}

fn param_bits(m: &FusionModel) -> Vec<(String, Vec<u64>)> {
    m.graph
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.value.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn clean_linear_training_fits_realisable_target() {
    let task = linear_task();
    let (tr, val) = make_task(&task).unwrap();
    let mut m = linear_model(&task, 1);
    let out = train(&mut m, &tr, &cfg(Algorithm::Clean, 2000, 1e-2)).unwrap();
    let mse = -m.metric(&val.sources, &val.target).unwrap();
    assert!(mse < 1e-4, "val mse {mse}");

    // 100-iteration window means never increase beyond round-off
    let windows: Vec<f64> = out
        .trace
        .chunks(100)
        .map(|w| w.iter().map(|r| r.loss).sum::<f64>() / w.len() as f64)
        .collect();
    for pair in windows.windows(2) {
        assert!(pair[1] <= pair[0] * (1.0 + 1e-9) + 1e-12, "{windows:?}");
    }
}

#[test]
fn every_algorithm_is_bit_deterministic() {
    let task = small_conv(vec![3, 4]);
    let (tr, _) = make_task(&task).unwrap();
    for a in Algorithm::ALL {
        let run = || {
            let mut m = conv_model(&task, FusionKind::Lel, 5);
            let out = train(&mut m, &tr, &cfg(a, 30, 1e-3)).unwrap();
            (param_bits(&m), out)
        };
        let (p1, o1) = run();
        let (p2, o2) = run();
        assert_eq!(p1, p2, "{a}");
        assert_eq!(o1, o2, "{a}");
    }
}

#[test]
fn no_op_corruption_matches_clean_training() {
    let task = linear_task();
    let (tr, _) = make_task(&task).unwrap();
    let mut reference = linear_model(&task, 2);
    train(&mut reference, &tr, &cfg(Algorithm::Clean, 200, 1e-2)).unwrap();
    for a in [Algorithm::Asn, Algorithm::SsnAlt, Algorithm::Ssn] {
        let mut m = linear_model(&task, 2);
        let c = TrainConfig {
            corruption: vec![CorruptionSpec::none()],
            ..cfg(a, 200, 1e-2)
        };
        train(&mut m, &tr, &c).unwrap();
        assert_eq!(param_bits(&m), param_bits(&reference), "{a}");
    }
}

#[test]
fn ssn_with_one_source_equals_asn() {
    let task = small_conv(vec![3]);
    let (tr, _) = make_task(&task).unwrap();
    let run = |a| {
        let mut m = conv_model(&task, FusionKind::Concat, 4);
        train(&mut m, &tr, &cfg(a, 40, 1e-3)).unwrap();
        param_bits(&m)
    };
    assert_eq!(run(Algorithm::Ssn), run(Algorithm::Asn));
}

#[test]
fn corruption_happens_only_on_odd_iterations() {
    let task = small_conv(vec![3, 3, 3]);
    let (tr, _) = make_task(&task).unwrap();
    let m_iters = 61;
    for a in Algorithm::ALL {
        let mut m = conv_model(&task, FusionKind::Mean, 1);
        let out = train(&mut m, &tr, &cfg(a, m_iters, 1e-3)).unwrap();
        for r in &out.trace {
            if r.iteration % 2 == 0 || a == Algorithm::Clean {
                assert_eq!(r.corrupted, Corrupted::None);
            } else {
                assert_ne!(r.corrupted, Corrupted::None);
            }
        }
        let odd = m_iters.div_ceil(2);
        match a {
            Algorithm::Clean => assert_eq!(out.corruption_calls, vec![0, 0, 0]),
            Algorithm::Asn | Algorithm::Ssn => assert_eq!(out.corruption_calls, vec![odd; 3]),
            Algorithm::SsnAlt => {
                let expected = m_iters / (2 * 3);
                for &c in &out.corruption_calls {
                    assert!(c.abs_diff(expected) <= 1, "{:?}", out.corruption_calls);
                }
                assert_eq!(out.corruption_calls.iter().sum::<usize>(), odd);
            }
        }
        let (fwd, bwd) = match a {
            Algorithm::Ssn => (m_iters + 3 * odd, m_iters),
            _ => (m_iters, m_iters),
        };
        assert_eq!((out.forwards, out.backwards), (fwd, bwd), "{a}");
    }
}

#[test]
fn ssn_updates_on_the_worst_branch_with_the_same_noise() {
    let task = small_conv(vec![3, 4]);
    let (tr, _) = make_task(&task).unwrap();
    let mut m = conv_model(&task, FusionKind::Lel, 8);
    let out = train(&mut m, &tr, &cfg(Algorithm::Ssn, 50, 1e-3)).unwrap();
    for r in out.trace.iter().filter(|r| r.iteration % 2 == 1) {
        let Corrupted::Source(j) = r.corrupted else { panic!("odd SSN iteration without a source") };
        let max = r.scan_losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let first_max = r.scan_losses.iter().position(|&l| l == max).unwrap() + 1;
        assert_eq!(j, first_max);
        assert!((r.loss - r.scan_losses[j - 1]).abs() <= 1e-12, "{r:?}");
    }
}

#[test]
fn fine_tuning_freezes_extractors() {
    let task = small_conv(vec![3, 4]);
    let (tr, _) = make_task(&task).unwrap();
    let extractor = |m: &FusionModel| -> Vec<(String, Vec<u64>)> {
        param_bits(m)
            .into_iter()
            .filter(|(n, _)| m.graph.params().get(n).unwrap().tag == Tag::Extractor)
            .collect()
    };

    // reference: the clean phase alone
    let mut phase1 = conv_model(&task, FusionKind::Lel, 6);
    train(&mut phase1, &tr, &cfg(Algorithm::Clean, 20, 1e-3)).unwrap();

    let mut m = conv_model(&task, FusionKind::Lel, 6);
    let c = TrainConfig {
        mode: TrainMode::FineTune,
        n_clean: 20,
        n_tune: 30,
        ..cfg(Algorithm::Ssn, 50, 1e-3)
    };
    let out = train(&mut m, &tr, &c).unwrap();
    assert!(!extractor(&m).is_empty());
    assert_eq!(extractor(&m), extractor(&phase1));
    assert_ne!(param_bits(&m), param_bits(&phase1));
    assert_eq!(out.trace.len(), 50);

    // n_tune = 0 is plain clean training
    let mut m0 = conv_model(&task, FusionKind::Lel, 6);
    let c0 = TrainConfig {
        mode: TrainMode::FineTune,
        n_clean: 20,
        n_tune: 0,
        ..cfg(Algorithm::Ssn, 20, 1e-3)
    };
    train(&mut m0, &tr, &c0).unwrap();
    assert_eq!(param_bits(&m0), param_bits(&phase1));
}

#[test]
fn nan_loss_reports_the_iteration() {
    let task = linear_task();
    let (tr, _) = make_task(&task).unwrap();
    let n = tr.len();
    let bad = Dataset {
        target: Tensor::filled(&[n, 1], f64::NAN),
        ..tr
    };
    let mut m = linear_model(&task, 1);
    let err = train(&mut m, &bad, &cfg(Algorithm::Clean, 10, 1e-2)).unwrap_err();
    assert!(matches!(err, Error::Diverged { iteration: 1, .. }), "{err}");
}

#[test]
fn downsample_training_runs_on_every_algorithm() {
    let task = small_conv(vec![3, 4]);
    let (tr, _) = make_task(&task).unwrap();
    for a in Algorithm::ALL {
        let mut m = conv_model(&task, FusionKind::Lel, 2);
        let c = TrainConfig {
            corruption: vec![CorruptionSpec::downsample(0.25, 0)],
            ..cfg(a, 10, 1e-3)
        };
        assert_eq!(c.corruption[0].kind, CorruptionKind::Downsample);
        let out = train(&mut m, &tr, &c).unwrap();
        assert!(out.final_loss().unwrap().is_finite());
    }
}
