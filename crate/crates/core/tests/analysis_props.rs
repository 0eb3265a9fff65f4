use std::collections::BTreeMap;

use certprobe_core::analysis::{
    abstain_alignment, cosine_matrix, cross_eval, layer_curve, pearson, CurveMetric,
};
use certprobe_core::eval::evaluate;
use certprobe_core::probe::{fit_layer_sweep, fit_probe, Probe, TrainConfig};
use certprobe_core::shard::{ShardSet, Split, UNIFIED_DATASET_ID};
use certprobe_core::synth::{generate_many, orthonormal_directions, PlantSpec};
use proptest::prelude::*;

fn specs(profile: &[f64]) -> Vec<PlantSpec> {
    let dirs = orthonormal_directions(12, 3, 8);
    ["c", "a", "b"]
        .iter()
        .zip(dirs)
        .enumerate()
        .map(|(k, (name, direction))| PlantSpec {
            model_id: "toy".into(),
            dataset_id: name.to_string(),
            hidden_dim: 12,
            n_train: 600,
            n_test: 600,
            direction,
            bias_true: -0.1,
            signal_to_noise: 1.5,
            layer_profile: profile.iter().copied().enumerate().collect(),
            seed: 90 + k as u64,
        })
        .collect()
}

fn layer_probes(set: &ShardSet, layer: usize, with_unified: bool) -> BTreeMap<String, Probe> {
    let config = TrainConfig::default();
    let mut probes: BTreeMap<String, Probe> = set
        .dataset_ids()
        .into_iter()
        .map(|d| {
            let p = fit_probe(set.get(&d, Split::Train, layer).unwrap(), &config).unwrap();
            (d, p)
        })
        .collect();
    if with_unified {
        let pool = set.unified(Split::Train, layer).unwrap();
        probes.insert(UNIFIED_DATASET_ID.into(), fit_probe(&pool, &config).unwrap());
    }
    probes
}

#[test]
fn cross_eval_cells_equal_direct_evaluation() {
    let set = generate_many(&specs(&[1.0])).unwrap();
    let probes = layer_probes(&set, 0, true);
    let tests: BTreeMap<String, _> = set
        .dataset_ids()
        .into_iter()
        .map(|d| {
            let s = set.get(&d, Split::Test, 0).unwrap();
            (d, s)
        })
        .collect();
    let m = cross_eval(&probes, &tests).unwrap();
    assert_eq!(m.row_ids, vec!["a", "b", "c", UNIFIED_DATASET_ID]);
    assert_eq!(m.column_ids, vec!["a", "b", "c"]);
    for (r, row) in m.row_ids.iter().enumerate() {
        for (c, col) in m.column_ids.iter().enumerate() {
            let direct = evaluate(&probes[row], tests[col]).unwrap().accuracy;
            assert_eq!(m.values[r][c].to_bits(), direct.to_bits());
        }
    }
    let csv = m.to_csv().unwrap();
    assert!(csv.starts_with("probe_dataset,a,b,c\n"));
    assert!(csv.lines().last().unwrap().starts_with("__unified__,"));
}

#[test]
fn cross_eval_errors() {
    let set = generate_many(&specs(&[1.0, 0.5])).unwrap();
    let probes = layer_probes(&set, 0, false);
    let mut tests: BTreeMap<String, _> = BTreeMap::new();
    tests.insert("a".to_string(), set.get("a", Split::Test, 0).unwrap());
    tests.insert("b".to_string(), set.get("b", Split::Test, 0).unwrap());
    assert_eq!(cross_eval(&probes, &tests).unwrap_err().kind(), "MissingShard");
    tests.insert("c".to_string(), set.get("c", Split::Test, 1).unwrap());
    assert_eq!(cross_eval(&probes, &tests).unwrap_err().kind(), "LayerMismatch");

    let mut mixed = probes.clone();
    mixed.get_mut("a").unwrap().layer_index = 1;
    assert_eq!(cosine_matrix(&mixed).unwrap_err().kind(), "LayerMismatch");
    let mut zero = probes;
    zero.get_mut("b").unwrap().weights.iter_mut().for_each(|w| *w = 0.0);
    assert_eq!(cosine_matrix(&zero).unwrap_err().kind(), "ZeroVector");
}

#[test]
fn cosine_matrix_invariants() {
    let set = generate_many(&specs(&[1.0])).unwrap();
    let probes = layer_probes(&set, 0, true);
    let m = cosine_matrix(&probes).unwrap();
    let k = m.dataset_ids.len();
    for r in 0..k {
        assert!((m.values[r][r] - 1.0).abs() <= 1e-12);
        for c in 0..k {
            assert!((m.values[r][c] - m.values[c][r]).abs() <= 1e-12);
            assert!(m.values[r][c].abs() <= 1.0 + 1e-12);
        }
    }
    let mut scaled = probes.clone();
    let b = scaled.get_mut("b").unwrap();
    *b = b.rescaled(37.0);
    let m2 = cosine_matrix(&scaled).unwrap();
    for r in 0..k {
        for c in 0..k {
            assert!((m.values[r][c] - m2.values[r][c]).abs() <= 1e-12);
        }
    }
}

#[test]
fn layer_curve_peaks_where_the_signal_does() {
    let set = generate_many(&specs(&[0.1, 0.4, 1.0, 0.4, 0.1])).unwrap();
    let mut reports = Vec::new();
    for d in set.dataset_ids() {
        for p in fit_layer_sweep(&set, &d, &TrainConfig::default()).unwrap() {
            reports.push(evaluate(&p, set.get(&d, Split::Test, p.layer_index).unwrap()).unwrap());
        }
    }
    let curve = layer_curve(&reports, CurveMetric::Accuracy).unwrap();
    assert_eq!(curve.argmax(), Some(2));
    assert_eq!(curve.dataset_ids, vec!["a", "b", "c"]);
    for point in &curve.points {
        let present: Vec<f64> = point.values.iter().flatten().copied().collect();
        let mean = present.iter().sum::<f64>() / present.len() as f64;
        assert_eq!(point.mean, Some(mean));
        assert_eq!(point.null_count, 0);
    }
    let csv = curve.to_csv().unwrap();
    assert!(csv.starts_with("layer,mean,null_count,a,b,c\n"));
}

#[test]
fn pearson_hand_example() {
    assert!((pearson(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);
    assert_eq!(pearson(&[1.0, 2.0], &[1.0]).unwrap_err().kind(), "LengthMismatch");
    assert_eq!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap_err().kind(), "ConstantInput");
}

#[test]
fn abstain_alignment_uses_common_keys() {
    let a: BTreeMap<String, f64> = [("x", 0.6), ("y", 0.8), ("z", 0.7)].map(|(k, v)| (k.to_string(), v)).into();
    assert!((abstain_alignment(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    let other: BTreeMap<String, f64> = [("p", 0.1), ("q", 0.2)].map(|(k, v)| (k.to_string(), v)).into();
    assert_eq!(abstain_alignment(&a, &other).unwrap_err().kind(), "InsufficientOverlap");
}

proptest! {
    #[test]
    fn pearson_affine_invariance(
        xs in proptest::collection::vec(-100.0f64..100.0, 3..30),
        noise in proptest::collection::vec(-10.0f64..10.0, 30),
        slope in 0.01f64..50.0,
        shift in -100.0f64..100.0,
    ) {
        let ys: Vec<f64> = xs.iter().zip(&noise).map(|(x, e)| 0.5 * x + e).collect();
        let base = match pearson(&xs, &ys) {
            Ok(r) => r,
            Err(_) => return Ok(()),
        };
        let moved: Vec<f64> = xs.iter().map(|x| slope * x + shift).collect();
        let flipped: Vec<f64> = xs.iter().map(|x| -slope * x + shift).collect();
        prop_assert!((pearson(&moved, &ys).unwrap() - base).abs() <= 1e-12);
        prop_assert!((pearson(&flipped, &ys).unwrap() + base).abs() <= 1e-12);
    }
}
