//! Property suites shared by the `invariants` and `acceptance` targets.
//!
//! Each suite drives its own deterministic proptest runner and returns the
//! minimal failing case as an error string.

#![allow(dead_code)]

use std::collections::BTreeMap;

use nfard::align::fit_projection;
use nfard::detector::{decision_value, detect, DecisionConfig, DetectionReport, MetricResult, Mode};
use nfard::linalg::{pseudoinverse, solve_least_squares, Matrix};
use nfard::metrics::{approx_neuron_matrix, dist_ac, dist_eu, PROB_FLOOR};
use nfard::model::{fit, loss_and_gradients, softmax_rows, Dataset, MlpModel, Targets, TrainConfig};
use nfard::zoo::{finetune, prune_weights, Scope};
use proptest::collection::vec;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Suite = (&'static str, fn() -> Result<(), String>);

pub const SUITES: &[Suite] = &[
    ("least-squares optimality", lstsq_optimality),
    ("least-squares / pseudoinverse consistency", lstsq_pinv_consistency),
    ("least-squares residual orthogonality", lstsq_orthogonality),
    ("projection optimality", projection_optimality),
    ("projection column decomposition", projection_columns),
    ("single-column orthographic projection", projection_orthographic),
    ("softmax shift invariance", softmax_shift),
    ("probability validity", probability_validity),
    ("gradient correctness", gradient_check),
    ("freeze contract", freeze_contract),
    ("weight-mask contract", mask_contract),
    ("finetune-last keeps hidden layers", finetune_last_contract),
    ("distance symmetry", distance_symmetry),
    ("distance scale behavior", distance_scale),
    ("log-approximation shift", log_shift),
    ("black-box metrics finite", blackbox_finite),
    ("black-box / log-softmax consistency", blackbox_logsoftmax),
    ("decision translation invariance", decision_translation),
    ("verdict monotone in alpha", verdict_monotone),
    ("self-distance zero", self_distance),
    ("detection determinism", detection_determinism),
];

fn run<S: Strategy>(
    name: &str,
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    let rng = TestRng::deterministic_rng(config.rng_algorithm);
    let mut runner = TestRunner::new_with_rng(config, rng);
    runner.run(&strategy, test).map_err(|e| format!("{name}: {e}"))
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    vec(-3.0f64..3.0, rows * cols).prop_map(move |d| Matrix::new(rows, cols, d).unwrap())
}

/// Random `rows x cols` matrix of rank at most `rank` (full rank when
/// `rank >= min(rows, cols)`).
fn ranked(rows: usize, cols: usize, rank: usize) -> impl Strategy<Value = Matrix> {
    (matrix(rows, rank), matrix(rank, cols)).prop_map(|(a, b)| a.matmul(&b).unwrap())
}

fn any_matrix() -> impl Strategy<Value = Matrix> {
    (1usize..12, 1usize..8, 1usize..8).prop_flat_map(|(r, c, k)| ranked(r, c, k))
}

/// `(A, B)` with matching row counts; `A` possibly rank-deficient.
fn system() -> impl Strategy<Value = (Matrix, Matrix)> {
    (2usize..20, 1usize..7, 1usize..7, 1usize..4)
        .prop_flat_map(|(n, a, k, b)| (ranked(n, a, k), matrix(n, b)))
}

fn residual(a: &Matrix, w: &Matrix, b: &Matrix) -> f64 {
    a.matmul(w).unwrap().sub(b).unwrap().frobenius_norm()
}

fn lstsq_optimality() -> Result<(), String> {
    run("lstsq optimality", 64, (system(), any::<u64>()), |((a, b), seed)| {
        let w = solve_least_squares(&a, &b).unwrap();
        let best = residual(&a, &w, &b);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..1000 {
            let scale = 10f64.powi(i % 6 - 4);
            let dw = Matrix::from_fn(w.rows(), w.cols(), |_, _| rng.gen_range(-scale..scale));
            let other = residual(&a, &w.add(&dw).unwrap(), &b);
            prop_assert!(best <= other + 1e-9, "{best} > {other}");
        }
        Ok(())
    })
}

fn lstsq_pinv_consistency() -> Result<(), String> {
    run("lstsq pinv", 128, system(), |(a, b)| {
        let w = solve_least_squares(&a, &b).unwrap();
        let via = pseudoinverse(&a, None).unwrap().matmul(&b).unwrap();
        prop_assert!(w.max_abs_diff(&via) <= 1e-8);
        Ok(())
    })
}

fn lstsq_orthogonality() -> Result<(), String> {
    run("lstsq orthogonality", 128, system(), |(a, b)| {
        let w = solve_least_squares(&a, &b).unwrap();
        let r = b.sub(&a.matmul(&w).unwrap()).unwrap();
        let at_r = a.transpose().matmul(&r).unwrap().frobenius_norm();
        prop_assert!(at_r <= 1e-8 * (a.frobenius_norm() * b.frobenius_norm()).max(1.0), "{at_r}");
        Ok(())
    })
}

/// `(H1, H2)` with `H1` at least as wide as `H2`.
fn projection_pair() -> impl Strategy<Value = (Matrix, Matrix)> {
    (4usize..30, 1usize..5, 0usize..4)
        .prop_flat_map(|(n, b, extra)| (matrix(n, b + extra), matrix(n, b)))
}

fn projection_optimality() -> Result<(), String> {
    run("projection optimality", 64, (projection_pair(), any::<u64>()), |((h1, h2), seed)| {
        let proj = fit_projection(&h1, &h2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..200 {
            let w = Matrix::from_fn(proj.p.rows(), proj.p.cols(), |_, _| rng.gen_range(-3.0..3.0));
            let other = h1.matmul_transposed(&w).unwrap().sub(&h2).unwrap().frobenius_norm();
            prop_assert!(proj.residual <= other + 1e-9);
        }
        Ok(())
    })
}

fn projection_columns() -> Result<(), String> {
    run("projection columns", 64, projection_pair(), |(h1, h2)| {
        let proj = fit_projection(&h1, &h2).unwrap();
        for i in 0..h2.cols() {
            let col = Matrix::from_columns(&[h2.col(i)]).unwrap();
            let w = solve_least_squares(&h1, &col).unwrap();
            for j in 0..h1.cols() {
                prop_assert!((proj.p[(i, j)] - w[(j, 0)]).abs() <= 1e-9);
            }
        }
        Ok(())
    })
}

fn projection_orthographic() -> Result<(), String> {
    let pair = (3usize..30, 1usize..5).prop_flat_map(|(n, a)| (matrix(n, a), matrix(n, 1)));
    run("orthographic", 128, pair, |(h1, h2)| {
        let proj = fit_projection(&h1, &h2).unwrap();
        let fitted = proj.apply(&h1).unwrap();
        let r = h2.sub(&fitted).unwrap();
        let at_r = h1.transpose().matmul(&r).unwrap().frobenius_norm();
        prop_assert!(at_r <= 1e-8 * (h1.frobenius_norm() * h2.frobenius_norm()).max(1.0));
        prop_assert!((r.frobenius_norm() - proj.residual).abs() <= 1e-9);
        Ok(())
    })
}

fn logits() -> impl Strategy<Value = Matrix> {
    (1usize..10, 2usize..8).prop_flat_map(|(n, m)| {
        vec(-10.0f64..10.0, n * m).prop_map(move |d| Matrix::new(n, m, d).unwrap())
    })
}

fn softmax_shift() -> Result<(), String> {
    run("softmax shift", 256, (logits(), -50.0f64..50.0), |(z, c)| {
        let p = softmax_rows(&z, 1.0);
        let q = softmax_rows(&z.map(|v| v + c), 1.0);
        prop_assert!(p.max_abs_diff(&q) <= 1e-12);
        Ok(())
    })
}

fn probability_validity() -> Result<(), String> {
    let input = (1usize..6, any::<u64>()).prop_flat_map(|(n, seed)| (matrix(n, 4), Just(seed)));
    run("probability validity", 128, input, |(x, seed)| {
        let model = MlpModel::init(&[4, 6, 5, 3], seed).unwrap();
        let probs = model.forward(&x).unwrap().probs;
        for r in 0..probs.rows() {
            let row = probs.row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
        }
        Ok(())
    })
}

fn toy_batch(seed: u64, n: usize, d: usize, classes: usize) -> (Matrix, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Matrix::from_fn(n, d, |_, _| rng.gen_range(-2.0..2.0));
    let labels = (0..n).map(|_| rng.gen_range(0..classes)).collect();
    (x, labels)
}

fn gradient_check() -> Result<(), String> {
    run("gradient check", 16, any::<u64>(), |seed| {
        let mut model = MlpModel::init(&[4, 5, 4, 3], seed).unwrap();
        // Nonzero biases so hidden units sit away from the ReLU kink.
        for b in model.biases_mut() {
            b.iter_mut().for_each(|v| *v = 0.1);
        }
        let (x, labels) = toy_batch(seed ^ 1, 6, 4, 3);
        let (_, grads) = loss_and_gradients(&model, &x, Targets::Labels(&labels)).unwrap();
        let loss = |m: &MlpModel| loss_and_gradients(m, &x, Targets::Labels(&labels)).unwrap().0;
        let h = 1e-6;
        let close = |a: f64, n: f64| (a - n).abs() <= 1e-4 * a.abs().max(n.abs()).max(1e-3);
        for k in 0..model.num_layers() {
            for i in 0..model.weights()[k].data().len() {
                let mut up = model.clone();
                up.weights_mut()[k].data_mut()[i] += h;
                let mut down = model.clone();
                down.weights_mut()[k].data_mut()[i] -= h;
                let numeric = (loss(&up) - loss(&down)) / (2.0 * h);
                let analytic = grads.weights[k].data()[i];
                prop_assert!(close(analytic, numeric), "w{k}[{i}]: {analytic} vs {numeric}");
            }
            for i in 0..model.biases()[k].len() {
                let mut up = model.clone();
                up.biases_mut()[k][i] += h;
                let mut down = model.clone();
                down.biases_mut()[k][i] -= h;
                let numeric = (loss(&up) - loss(&down)) / (2.0 * h);
                let analytic = grads.biases[k][i];
                prop_assert!(close(analytic, numeric), "b{k}[{i}]: {analytic} vs {numeric}");
            }
        }
        Ok(())
    })
}

fn train_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 3,
        learning_rate: 0.05,
        batch_size: 4,
        seed,
        freeze_mask: None,
        l2: 1e-3,
    }
}

fn freeze_contract() -> Result<(), String> {
    run("freeze", 32, (any::<u64>(), vec(any::<bool>(), 3)), |(seed, mask)| {
        let model = MlpModel::init(&[4, 6, 5, 3], seed).unwrap();
        let (x, labels) = toy_batch(seed, 20, 4, 3);
        let cfg = TrainConfig {
            freeze_mask: Some(mask.clone()),
            ..train_cfg(seed)
        };
        let trained = fit(model.clone(), &x, Targets::Labels(&labels), &cfg, None).unwrap();
        for (k, frozen) in mask.iter().enumerate() {
            if *frozen {
                prop_assert_eq!(&trained.weights()[k], &model.weights()[k]);
                prop_assert_eq!(&trained.biases()[k], &model.biases()[k]);
            }
        }
        Ok(())
    })
}

fn mask_contract() -> Result<(), String> {
    run("mask", 32, (any::<u64>(), 0.0f64..0.95), |(seed, ratio)| {
        let model = MlpModel::init(&[4, 6, 5, 3], seed).unwrap();
        let (pruned, mask) = prune_weights(&model, ratio).unwrap();
        let total: usize = mask.iter().map(Vec::len).sum();
        let dropped = mask.iter().flatten().filter(|k| !**k).count();
        prop_assert_eq!(dropped, (ratio * total as f64).ceil() as usize);
        let (x, labels) = toy_batch(seed, 20, 4, 3);
        let trained = fit(pruned, &x, Targets::Labels(&labels), &train_cfg(seed), Some(&mask)).unwrap();
        for (w, m) in trained.weights().iter().zip(&mask) {
            for (v, keep) in w.data().iter().zip(m) {
                prop_assert!(*keep || *v == 0.0);
            }
        }
        Ok(())
    })
}

fn finetune_last_contract() -> Result<(), String> {
    run("finetune last", 16, any::<u64>(), |seed| {
        let model = MlpModel::init(&[4, 6, 5, 3], seed).unwrap();
        let (x, labels) = toy_batch(seed, 20, 4, 3);
        let data = Dataset::new(x, labels, 3).unwrap();
        let tuned = finetune(&model, &data, Scope::Last, &train_cfg(seed)).unwrap();
        let l = model.num_layers();
        prop_assert_eq!(&tuned.weights()[..l - 1], &model.weights()[..l - 1]);
        prop_assert_eq!(&tuned.biases()[..l - 1], &model.biases()[..l - 1]);
        Ok(())
    })
}

fn same_shape_pair() -> impl Strategy<Value = (Matrix, Matrix)> {
    (1usize..12, 1usize..6).prop_flat_map(|(r, c)| (matrix(r, c), matrix(r, c)))
}

fn distance_symmetry() -> Result<(), String> {
    run("symmetry", 256, same_shape_pair(), |(a, b)| {
        prop_assert_eq!(dist_eu(&a, &b).unwrap(), dist_eu(&b, &a).unwrap());
        prop_assert_eq!(dist_ac(&a, &b).unwrap(), dist_ac(&b, &a).unwrap());
        prop_assert_eq!(dist_eu(&a, &a).unwrap(), 0.0);
        prop_assert_eq!(dist_ac(&a, &a).unwrap(), 0.0);
        Ok(())
    })
}

fn distance_scale() -> Result<(), String> {
    let input = (1usize..12, 1usize..6).prop_flat_map(|(r, c)| (matrix(r, c), 0.01f64..10.0));
    run("scale", 256, input, |(a, c)| {
        let ca = a.scale(c);
        prop_assert!(dist_ac(&a, &ca).unwrap() <= 1e-12);
        let zero = Matrix::zeros(a.rows(), a.cols());
        let avg_norm = dist_eu(&a, &zero).unwrap();
        let expect = (1.0 - c).abs() * avg_norm;
        prop_assert!((dist_eu(&a, &ca).unwrap() - expect).abs() <= 1e-9 * expect.max(1.0));
        Ok(())
    })
}

fn row_shifted(z: &Matrix, shifts: &[f64]) -> Matrix {
    Matrix::from_fn(z.rows(), z.cols(), |r, c| z[(r, c)] + shifts[r])
}

fn log_shift() -> Result<(), String> {
    let input = logits().prop_flat_map(|z| {
        let n = z.rows();
        (Just(z), vec(-30.0f64..30.0, n))
    });
    run("log shift", 256, input, |(z, shifts)| {
        let a = approx_neuron_matrix(&softmax_rows(&z, 1.0), PROB_FLOOR).unwrap();
        let b = approx_neuron_matrix(&softmax_rows(&row_shifted(&z, &shifts), 1.0), PROB_FLOOR).unwrap();
        prop_assert!(a.values.max_abs_diff(&b.values) <= 1e-9);
        Ok(())
    })
}

fn blackbox_finite() -> Result<(), String> {
    // Wide logit ranges drive probabilities to exact zeros.
    let wide = (1usize..8, 2usize..6).prop_flat_map(|(n, m)| {
        (
            vec(-800.0f64..800.0, n * m).prop_map(move |d| Matrix::new(n, m, d).unwrap()),
            vec(-800.0f64..800.0, n * m).prop_map(move |d| Matrix::new(n, m, d).unwrap()),
        )
    });
    run("black-box finite", 256, wide, |(z1, z2)| {
        let a = approx_neuron_matrix(&softmax_rows(&z1, 1.0), PROB_FLOOR).unwrap();
        let b = approx_neuron_matrix(&softmax_rows(&z2, 1.0), PROB_FLOOR).unwrap();
        prop_assert!(a.values.is_finite() && b.values.is_finite());
        prop_assert!(dist_eu(&a, &b).unwrap().is_finite());
        prop_assert!(dist_ac(&a, &b).unwrap().is_finite());
        Ok(())
    })
}

fn log_softmax(z: &Matrix) -> Matrix {
    let mut out = z.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

fn blackbox_logsoftmax() -> Result<(), String> {
    let pair = (1usize..10, 2usize..8).prop_flat_map(|(n, m)| {
        let gen = move || vec(-10.0f64..10.0, n * m).prop_map(move |d| Matrix::new(n, m, d).unwrap());
        (gen(), gen())
    });
    run("black-box consistency", 256, pair, |(z1, z2)| {
        let a = approx_neuron_matrix(&softmax_rows(&z1, 1.0), PROB_FLOOR).unwrap();
        let b = approx_neuron_matrix(&softmax_rows(&z2, 1.0), PROB_FLOOR).unwrap();
        let (la, lb) = (log_softmax(&z1), log_softmax(&z2));
        prop_assert!(a.values.max_abs_diff(&la) <= 1e-9);
        prop_assert!((dist_eu(&a, &b).unwrap() - dist_eu(&la, &lb).unwrap()).abs() <= 1e-9);
        prop_assert!((dist_ac(&a, &b).unwrap() - dist_ac(&la, &lb).unwrap()).abs() <= 1e-9);
        Ok(())
    })
}

fn decision_inputs() -> impl Strategy<Value = (f64, Vec<f64>)> {
    (0.0f64..100.0, vec(0.0f64..100.0, 2..12))
}

fn decision_translation() -> Result<(), String> {
    run("translation", 512, (decision_inputs(), -1e3f64..1e3, -5.0f64..10.0), |((x, ys), c, alpha)| {
        let d = decision_value(x, &ys, alpha).unwrap();
        let shifted: Vec<f64> = ys.iter().map(|y| y + c).collect();
        let e = decision_value(x + c, &shifted, alpha).unwrap();
        prop_assert!((d - e).abs() <= 1e-9 * (1.0 + c.abs() + x.abs()) * (1.0 + alpha.abs()));
        Ok(())
    })
}

fn report(metrics: Vec<MetricResult>, weights: BTreeMap<String, f64>, alpha: f64) -> DetectionReport {
    DetectionReport {
        suspect_id: "s".into(),
        victim_id: "v".into(),
        reference_ids: vec![],
        metrics,
        weighted_sum: 0.0,
        verdict: false,
        mode: Mode::Blackbox,
        alpha,
        weights,
        layer_used: None,
        hetero: false,
        suite_size: 1,
        warnings: vec![],
    }
}

fn verdict_monotone() -> Result<(), String> {
    let input = (decision_inputs(), decision_inputs(), 0.0f64..200.0, -5.0f64..10.0, 0.0f64..10.0);
    run("monotone", 512, input, |((x1, y1), (x2, y2), w_ac, a1, step)| {
        let a2 = a1 + step;
        prop_assert!(decision_value(x1, &y1, a2).unwrap() <= decision_value(x1, &y1, a1).unwrap());
        let metric = |name: &str, x: f64, ys: Vec<f64>| MetricResult {
            metric: name.into(),
            suspect_distance: x,
            reference_distances: ys,
            decision_value: 0.0,
        };
        let weights = BTreeMap::from([("eu".to_string(), 1.0), ("ac".to_string(), w_ac)]);
        let rep = report(vec![metric("eu", x1, y1), metric("ac", x2, y2)], weights, a1);
        prop_assert!(rep.weighted_sum_at(a2) <= rep.weighted_sum_at(a1));
        prop_assert!(!rep.verdict_at(a2) || rep.verdict_at(a1));
        Ok(())
    })
}

/// Victim, three references and a probe dataset, all from one seed.
fn detection_fixture(seed: u64) -> (MlpModel, Vec<MlpModel>, Dataset) {
    let dims = [5, 8, 6, 4];
    let victim = MlpModel::init(&dims, seed).unwrap().with_meta("id", "victim");
    let refs = (1..=3)
        .map(|i| MlpModel::init(&dims, seed.wrapping_add(i)).unwrap().with_meta("id", format!("ref-{i}")))
        .collect();
    let (x, labels) = toy_batch(seed, 40, 5, 4);
    (victim, refs, Dataset::new(x, labels, 4).unwrap())
}

fn self_distance() -> Result<(), String> {
    run("self distance", 16, (any::<u64>(), any::<bool>()), |(seed, white)| {
        let (victim, refs, data) = detection_fixture(seed);
        let mode = if white { Mode::Whitebox } else { Mode::Blackbox };
        let cfg = DecisionConfig {
            suite_size: 30,
            ..DecisionConfig::default_for(mode)
        };
        let rep = detect(&victim, &victim, &refs, &data, &cfg).unwrap();
        for m in &rep.metrics {
            prop_assert_eq!(m.suspect_distance, 0.0, "{}", m.metric);
        }
        Ok(())
    })
}

fn detection_determinism() -> Result<(), String> {
    run("detection determinism", 16, (any::<u64>(), any::<bool>()), |(seed, white)| {
        let (victim, refs, data) = detection_fixture(seed);
        let suspect = MlpModel::init(&[5, 8, 6, 4], seed ^ 99).unwrap();
        let mode = if white { Mode::Whitebox } else { Mode::Blackbox };
        let cfg = DecisionConfig {
            suite_size: 30,
            ..DecisionConfig::default_for(mode)
        };
        let a = detect(&victim, &suspect, &refs, &data, &cfg).unwrap();
        let b = detect(&victim, &suspect, &refs, &data, &cfg).unwrap();
        prop_assert_eq!(a, b);
        Ok(())
    })
}
