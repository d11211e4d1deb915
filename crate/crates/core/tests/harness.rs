#![allow(clippy::needless_range_loop)]

mod common;

use rand::Rng as _;
use sleep_replay::data::{DatasetId, DatasetSlice, IMAGE_PIXELS};
use sleep_replay::harness::{
    aggregate, run, run_continual, run_imbalanced, run_limited, ExperimentData, ExperimentReport, ExperimentSpec,
    Family, Phase,
};
use sleep_replay::matrix::Matrix;
use sleep_replay::metrics::evaluate;
use sleep_replay::nn::Mlp;
use sleep_replay::seed;

/// Class `c` brightens its own band of rows; everything else is faint noise.
fn blobs(per_class: usize, seed: u64) -> DatasetSlice<f64> {
    let mut rng = seed::rng(seed);
    let n = per_class * 10;
    let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
    let mut data = Vec::with_capacity(n * IMAGE_PIXELS);
    for &l in &labels {
        for p in 0..IMAGE_PIXELS {
            let band = p / 28 / 3 == l as usize;
            let base = if band { 0.6 } else { 0.0 };
            data.push(base + 0.4 * rng.random::<f64>() * if band { 1.0 } else { 0.2 });
        }
    }
    DatasetSlice::from_parts(Matrix::new(n, IMAGE_PIXELS, data).unwrap(), labels, DatasetId::Mnist).unwrap()
}

fn quick_spec(family: Family) -> ExperimentSpec {
    let mut spec = ExperimentSpec::defaults(family, DatasetId::Mnist);
    spec.train_cfg = spec.train_cfg.clone().with_epochs(1);
    spec.sleep_cfg.time_steps = 40;
    spec
}

#[test]
fn evaluate_matches_direct_counting() {
    let w = common::random_weights(&[IMAGE_PIXELS, 12, 10], 4, 0.1);
    let mlp = Mlp::from_weights(
        w.iter()
            .map(|l| Matrix::new(l.len(), l[0].len(), l.iter().flatten().copied().collect()))
            .collect::<Result<Vec<_>, _>>()
            .unwrap(),
    )
    .unwrap();
    let test = blobs(7, 9);
    let m = evaluate(&mlp, &test).unwrap();
    let probs: Vec<Vec<f64>> = (0..test.len())
        .map(|r| common::forward(&w, test.images().row(r)).pop().unwrap())
        .collect();
    let (correct, counts) = common::count_predictions(&probs, test.labels());
    assert_eq!(m.counts, counts);
    assert_eq!(m.accuracy, correct as f64 / test.len() as f64);
    for c in 0..10 {
        assert_eq!(m.support[c], 7);
        assert_eq!(m.per_class_accuracy[c], counts[c][c] as f64 / 7.0);
    }
}

#[test]
fn limited_aggregate_matches_recomputation_over_ten_trials() {
    let (train, test) = (blobs(20, 1), blobs(5, 2));
    let data = ExperimentData { train: &train, test: &test };
    let mut spec = quick_spec(Family::Limited);
    spec.fractions = vec![0.5];
    spec.trials = 10;
    let report = run_limited(&spec, &data, 1).unwrap();
    assert_eq!(report.trials.len(), 10);
    let summary = aggregate(&report).unwrap();
    for phase in [Phase::Baseline, Phase::PostSleep, Phase::PostFinetune] {
        let xs: Vec<f64> = report.trials.iter().map(|t| t.phase(phase).unwrap().accuracy).collect();
        let (mean, std) = common::mean_std(&xs);
        let row = summary.row(&report.trials[0].condition, phase, "accuracy").unwrap();
        assert_eq!(row.n, 10);
        assert!((row.mean - mean).abs() < 1e-12);
        assert!((row.std - std).abs() < 1e-12);
    }
    let seeds: Vec<u64> = report.trials.iter().map(|t| t.seed).collect();
    assert_eq!(seeds, (0..10).collect::<Vec<u64>>());
    assert!(report.trials.iter().all(|t| t.train_size == 100));
}

#[test]
fn parallel_cells_equal_serial_cells() {
    let (train, test) = (blobs(20, 3), blobs(4, 4));
    let data = ExperimentData { train: &train, test: &test };
    let mut spec = quick_spec(Family::Limited);
    spec.fractions = vec![0.3, 1.0];
    spec.trials = 2;
    let a = run(&spec, &data, 1).unwrap();
    let b = run(&spec, &data, 2).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    let back = ExperimentReport::from_json(&a.to_json().unwrap()).unwrap();
    assert_eq!(back.trials.len(), 4);
}

#[test]
fn every_family_records_its_phases() {
    let (train, test) = (blobs(20, 5), blobs(4, 6));
    let data = ExperimentData { train: &train, test: &test };

    let mut lim = quick_spec(Family::Limited);
    lim.fractions = vec![0.5];
    let mut imb = quick_spec(Family::Imbalanced);
    imb.imbalance_base = 0.5;
    imb.target_classes = vec![3];
    imb.class_fractions = vec![0.5];
    let mut con = quick_spec(Family::Continual);
    con.fractions = vec![0.5];
    con.fractions_t2 = vec![1.0];

    for spec in [lim, imb, con] {
        let report = run(&spec, &data, 1).unwrap();
        let want = spec.family.phases(spec.finetune);
        for t in &report.trials {
            let got: Vec<Phase> = t.phases.iter().map(|p| p.phase).collect();
            assert_eq!(got, want, "{}", spec.family);
            assert_eq!(t.sleep.mean_rate.len(), 4);
        }
        aggregate(&report).unwrap();
    }
}

#[test]
fn imbalanced_full_class_fraction_equals_limited_cell() {
    let (train, test) = (blobs(20, 7), blobs(4, 8));
    let data = ExperimentData { train: &train, test: &test };
    let mut imb = quick_spec(Family::Imbalanced);
    imb.imbalance_base = 0.5;
    imb.target_classes = vec![2, 6];
    imb.class_fractions = vec![0.5, 1.0];
    let report = run_imbalanced(&imb, &data, 1).unwrap();
    let mut lim = quick_spec(Family::Limited);
    lim.fractions = vec![0.5];
    let base = run_limited(&lim, &data, 1).unwrap();
    let want = &base.trials[0];
    for t in report.trials.iter().filter(|t| t.condition.class_fraction == Some(1.0)) {
        for phase in [Phase::Baseline, Phase::PostSleep] {
            assert_eq!(t.phase(phase), want.phase(phase));
        }
    }
    let half = report.trials.iter().find(|t| t.condition.class_fraction == Some(0.5)).unwrap();
    assert_eq!(half.train_size, 95);

    let grid = aggregate(&report).unwrap().delta_grid.unwrap();
    assert_eq!(grid.delta.len(), 2);
    for (i, row) in grid.delta.iter().enumerate() {
        for (j, d) in row.iter().enumerate() {
            assert!((d - (grid.after[i][j] - grid.before[i][j])).abs() < 1e-15);
        }
    }
}

#[test]
fn continual_tasks_cover_disjoint_classes() {
    let (train, test) = (blobs(20, 9), blobs(4, 10));
    let data = ExperimentData { train: &train, test: &test };
    let mut spec = quick_spec(Family::Continual);
    spec.fractions = vec![0.5];
    spec.fractions_t2 = vec![0.5];
    spec.finetune = false;
    let report = run_continual(&spec, &data, 1).unwrap();
    let t = &report.trials[0];
    assert_eq!(t.train_size, 100);
    assert_eq!(t.phases.len(), 3);
    let after_t1 = t.phase(Phase::PostT1).unwrap();
    // a net that has only seen classes 0-4 cannot predict 5-9 correctly
    assert!(after_t1.per_class_accuracy[5..].iter().all(|&a| a == 0.0) || after_t1.accuracy <= 0.5);
    let summary = aggregate(&report).unwrap();
    assert_eq!(summary.heatmaps.len(), 9);
}

#[test]
fn mismatched_family_is_rejected() {
    let (train, test) = (blobs(10, 1), blobs(2, 2));
    let data = ExperimentData { train: &train, test: &test };
    assert!(run_continual(&quick_spec(Family::Limited), &data, 1).is_err());
    let mut bad = quick_spec(Family::Limited);
    bad.trials = 0;
    assert!(run(&bad, &data, 1).is_err());
}
