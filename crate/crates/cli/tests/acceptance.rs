//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use certprobe_core::analysis::{cosine_matrix, cosine_similarity, cross_eval};
use certprobe_core::eval::{best_layer, classify, evaluate, LayerCriterion, Prediction};
use certprobe_core::probe::{
    fit_layer_sweep, fit_probe, loss_and_gradient, ClassWeighting, Probe, Scaler, TrainConfig, TrainDiagnostics,
};
use certprobe_core::shard::{
    decode_shard, encode_shard, read_shard, write_shard, ActivationRecord, ActivationShard, Label, ShardHeader, Split,
};
use certprobe_core::synth::{
    bayes_accuracy, generate, generate_many, orthonormal_directions, random_unit_vector, PlantSpec,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if $cond {
        } else {
            return Err(format!($($fmt)+));
        }
    };
}

fn within(elapsed: Duration, budget: Duration) -> Result<(), String> {
    if elapsed <= budget {
        Ok(())
    } else {
        Err(format!("took {elapsed:.1?}, budget {budget:?}"))
    }
}

// ---------------------------------------------------------------- solver

fn random_shard(n: usize, dim: usize, seed: u64) -> ActivationShard {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    loop {
        let records: Vec<ActivationRecord> = (0..n)
            .map(|i| {
                let h: Vec<f32> = (0..dim).map(|_| 2.0 * rng.sample::<f32, _>(StandardNormal)).collect();
                let z: f64 = h.iter().zip(&truth).map(|(x, w)| f64::from(*x) * w).sum::<f64>() + 0.3;
                let incorrect = rng.random::<f64>() < 1.0 / (1.0 + (-z).exp());
                let label = if incorrect { Label::Incorrect } else { Label::Correct };
                ActivationRecord::new(format!("r{i}"), h, label)
            })
            .collect();
        let shard = ActivationShard::from_records("m", "d", Split::Train, 0, dim, records).unwrap();
        let (c, i) = shard.label_counts();
        if c > 0 && i > 0 {
            return shard;
        }
    }
}

/// Regularized mean log-loss computed directly from probabilities.
fn reference_loss(shard: &ActivationShard, w: &[f64], b: f64, l2: f64) -> f64 {
    let data: f64 = shard
        .records()
        .iter()
        .map(|r| {
            let z: f64 = r.hidden_state.iter().zip(w).map(|(x, w)| f64::from(*x) * w).sum::<f64>() + b;
            let t = if r.label.is_correct() { 0.0 } else { 1.0 };
            let p = (1.0 / (1.0 + (-z).exp())).clamp(1e-300, 1.0 - 1e-16);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    data / shard.len() as f64 + 0.5 * l2 * w.iter().map(|x| x * x).sum::<f64>()
}

fn loss_at(margins: &[(f64, f64)], b: f64, penalty: f64) -> f64 {
    let mut s = 0.0;
    for &(a, t) in margins {
        let z = a + b;
        let sp = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
        s += sp - t * z;
    }
    s / margins.len() as f64 + penalty
}

/// Grid minimum over (w1, w2, b); the bias axis is searched by bisection on
/// the forward difference, exact for a convex function sampled on a grid.
fn grid_minimum(shard: &ActivationShard, l2: f64, axis: &[f64]) -> f64 {
    let xs: Vec<(f64, f64, f64)> = shard
        .records()
        .iter()
        .map(|r| {
            let t = if r.label.is_correct() { 0.0 } else { 1.0 };
            (f64::from(r.hidden_state[0]), f64::from(r.hidden_state[1]), t)
        })
        .collect();
    let mut best = f64::INFINITY;
    let mut margins = vec![(0.0, 0.0); xs.len()];
    for &w1 in axis {
        for &w2 in axis {
            for (m, &(x1, x2, t)) in margins.iter_mut().zip(&xs) {
                *m = (w1 * x1 + w2 * x2, t);
            }
            let penalty = 0.5 * l2 * (w1 * w1 + w2 * w2);
            let (mut lo, mut hi) = (0usize, axis.len() - 1);
            while lo < hi {
                let mid = (lo + hi) / 2;
                if loss_at(&margins, axis[mid + 1], penalty) < loss_at(&margins, axis[mid], penalty) {
                    lo = mid + 1;
                } else {
                    hi = mid;
                }
            }
            best = best.min(loss_at(&margins, axis[lo], penalty));
        }
    }
    best
}

fn raw_config(l2: f64) -> TrainConfig {
    TrainConfig {
        l2_strength: l2,
        standardize: false,
        ..TrainConfig::default()
    }
}

fn solver_matches_grid() -> Outcome {
    let start = Instant::now();
    let axis: Vec<f64> = (-100..=100).map(|i| i as f64 * 0.05).collect();
    let l2 = 0.1;
    let mut worst = f64::NEG_INFINITY;
    for seed in 0..25 {
        let shard = random_shard(32, 2, seed);
        let probe = fit_probe(&shard, &raw_config(l2)).map_err(|e| e.to_string())?;
        let fitted = reference_loss(&shard, &probe.weights, probe.bias, l2);
        let oracle = grid_minimum(&shard, l2, &axis);
        ensure!(fitted <= oracle + 1e-3, "shard {seed}: fitted {fitted} > grid {oracle} + 1e-3");
        worst = worst.max(fitted - oracle);
    }
    within(start.elapsed(), Duration::from_secs(60))?;
    Ok(format!("25 shards, max(fitted - grid) = {worst:.2e}"))
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let shard = random_shard(5, 3, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let configs = [
        TrainConfig::default(),
        raw_config(0.3),
        TrainConfig {
            class_weighting: ClassWeighting::Balanced,
            ..TrainConfig::default()
        },
    ];
    let h = 1e-5;
    let mut worst = 0.0f64;
    for draw in 0..100 {
        let config = &configs[draw % configs.len()];
        let params: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
        let (_, grad) = loss_and_gradient(&params, &shard, config).map_err(|e| e.to_string())?;
        for j in 0..params.len() {
            let mut plus = params.clone();
            let mut minus = params.clone();
            plus[j] += h;
            minus[j] -= h;
            let fd = (loss_and_gradient(&plus, &shard, config).unwrap().0
                - loss_and_gradient(&minus, &shard, config).unwrap().0)
                / (2.0 * h);
            let scale = grad[j].abs().max(fd.abs());
            let err = (grad[j] - fd).abs();
            ensure!(err <= 1e-4 * scale + 1e-9, "draw {draw} coord {j}: analytic {} fd {fd}", grad[j]);
            if scale > 0.0 {
                worst = worst.max(err / scale);
            }
        }
    }
    within(start.elapsed(), Duration::from_secs(10))?;
    Ok(format!("100 draws, max relative error {worst:.2e}"))
}

// ---------------------------------------------------------------- synthetic

fn plant(dataset: &str, dim: usize, n_train: usize, n_test: usize, snr: f64, profile: &[f64], seed: u64) -> PlantSpec {
    PlantSpec {
        model_id: "synth-model".into(),
        dataset_id: dataset.into(),
        hidden_dim: dim,
        n_train,
        n_test,
        direction: random_unit_vector(dim, seed ^ 0xD1),
        bias_true: 0.25,
        signal_to_noise: snr,
        layer_profile: profile.iter().copied().enumerate().collect(),
        seed,
    }
}

fn planted_recovery() -> Outcome {
    let start = Instant::now();
    let spec = plant("planted", 64, 5000, 2000, 4.0, &[1.0], 7);
    let set = generate(&spec).map_err(|e| e.to_string())?;
    let probe = fit_probe(set.get("planted", Split::Train, 0).unwrap(), &TrainConfig::default()).unwrap();
    let acc = evaluate(&probe, set.get("planted", Split::Test, 0).unwrap()).unwrap().accuracy;
    let bayes = bayes_accuracy(&spec, 0).unwrap();
    let cos = cosine_similarity(&probe.activation_space_direction(), &spec.direction).unwrap();
    ensure!((acc - bayes).abs() <= 0.02, "accuracy {acc:.4} vs optimal {bayes:.4}");
    ensure!(cos >= 0.95, "cosine {cos:.4}");
    within(start.elapsed(), Duration::from_secs(30))?;
    Ok(format!("accuracy {acc:.4}, optimal {bayes:.4}, cosine {cos:.4}"))
}

fn fit_all(set: &certprobe_core::shard::ShardSet, names: &[&str]) -> BTreeMap<String, Probe> {
    names
        .iter()
        .map(|d| (d.to_string(), fit_probe(set.get(d, Split::Train, 0).unwrap(), &TrainConfig::default()).unwrap()))
        .collect()
}

fn transfer_structure() -> Outcome {
    let names = ["alpha", "beta"];
    let specs: Vec<PlantSpec> = names
        .iter()
        .zip(orthonormal_directions(64, 2, 404))
        .enumerate()
        .map(|(k, (name, dir))| PlantSpec {
            direction: dir,
            ..plant(name, 64, 4000, 2000, 2.0, &[1.0], 500 + k as u64)
        })
        .collect();
    let set = generate_many(&specs).map_err(|e| e.to_string())?;
    let probes = fit_all(&set, &names);
    let tests = names.iter().map(|d| (d.to_string(), set.get(d, Split::Test, 0).unwrap())).collect();
    let m = cross_eval(&probes, &tests).map_err(|e| e.to_string())?;
    for i in 0..2 {
        for j in 0..2 {
            let v = m.values[i][j];
            if i == j {
                ensure!(v >= 0.95, "orthogonal diagonal {i}: {v:.4}");
            } else {
                ensure!((v - 0.5).abs() <= 0.07, "orthogonal off-diagonal {i},{j}: {v:.4}");
            }
        }
    }
    let cos = cosine_matrix(&probes).unwrap().values[0][1];
    ensure!(cos.abs() <= 0.1, "orthogonal probe cosine {cos:.4}");

    let u = random_unit_vector(32, 77);
    let names = ["gsm", "math", "svamp"];
    let specs: Vec<PlantSpec> = names
        .iter()
        .enumerate()
        .map(|(k, name)| PlantSpec {
            direction: u.clone(),
            ..plant(name, 32, 2000, 1000, 4.0, &[1.0], 600 + k as u64)
        })
        .collect();
    let set = generate_many(&specs).map_err(|e| e.to_string())?;
    let probes = fit_all(&set, &names);
    let tests = names.iter().map(|d| (d.to_string(), set.get(d, Split::Test, 0).unwrap())).collect();
    let shared = cross_eval(&probes, &tests).map_err(|e| e.to_string())?;
    let min = shared.values.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    ensure!(min >= 0.9, "shared-direction cell {min:.4} < 0.9");
    Ok(format!(
        "orthogonal diag {:.3}/{:.3}, off {:.3}/{:.3}, cosine {cos:.3}; shared min {min:.3}",
        m.values[0][0], m.values[1][1], m.values[0][1], m.values[1][0]
    ))
}

fn best_layer_peak() -> Outcome {
    let mut found = Vec::new();
    for seed in 0..10 {
        let spec = plant("peak", 16, 1500, 1500, 1.0, &[0.2, 0.5, 1.0, 0.5, 0.2], 1000 + seed);
        let set = generate(&spec).map_err(|e| e.to_string())?;
        let probes = fit_layer_sweep(&set, "peak", &TrainConfig::default()).map_err(|e| e.to_string())?;
        let reports: Vec<_> = probes
            .iter()
            .map(|p| evaluate(p, set.get("peak", Split::Test, p.layer_index).unwrap()).unwrap())
            .collect();
        found.push(best_layer(&reports, LayerCriterion::Accuracy).unwrap().0);
    }
    let hits = found.iter().filter(|&&l| l == 2).count();
    ensure!(hits == 10, "best layers {found:?}");
    Ok(format!("{hits}/10 seeds pick layer 2"))
}

fn null_signal() -> Outcome {
    let spec = plant("null", 32, 2000, 2000, 4.0, &[0.0], 11);
    let set = generate(&spec).map_err(|e| e.to_string())?;
    let probe = fit_probe(set.get("null", Split::Train, 0).unwrap(), &TrainConfig::default()).unwrap();
    let acc = evaluate(&probe, set.get("null", Split::Test, 0).unwrap()).unwrap().accuracy;
    ensure!((acc - 0.5).abs() <= 0.05, "accuracy {acc:.4}");
    Ok(format!("accuracy {acc:.4} on 2000 held-out records"))
}

// ---------------------------------------------------------------- decisions

fn fixed_probe(weights: Vec<f64>, bias: f64, scaler: Option<Scaler>) -> Probe {
    Probe {
        model_id: "m".into(),
        dataset_id: "d".into(),
        layer_index: 0,
        bias,
        weights,
        scaler,
        config: TrainConfig::default(),
        diagnostics: TrainDiagnostics {
            final_logloss: 0.0,
            iterations: 0,
            converged: true,
            gradient_inf_norm: 0.0,
        },
    }
}

fn decision_semantics() -> Outcome {
    let p = fixed_probe(vec![1.0, -0.5], -2.0, None);
    let c = classify(&p, &[3.0, 2.0]).unwrap();
    ensure!(c.score == 0.0 && c.prediction == Prediction::Correct, "score 0 gave {:?}", c.prediction);

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let dim = 10;
    let weights: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    let scaler = Scaler {
        means: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        stds: (0..dim).map(|_| rng.random_range(0.1..3.0)).collect(),
    };
    let base = fixed_probe(weights, 0.3, Some(scaler));
    let states: Vec<Vec<f32>> =
        (0..1000).map(|_| (0..dim).map(|_| rng.random_range(-5.0f32..5.0)).collect()).collect();
    for c in [1e-6, 0.37, 2.0, 913.5, 1e8] {
        let scaled = base.rescaled(c);
        for h in &states {
            ensure!(
                classify(&base, h).unwrap().prediction == classify(&scaled, h).unwrap().prediction,
                "rescaling by {c} flipped a decision"
            );
        }
    }

    let p = fixed_probe(vec![1.0], 0.0, None);
    let records = vec![
        ActivationRecord::new("a", vec![2.0], Label::Incorrect),
        ActivationRecord::new("b", vec![-2.0], Label::Incorrect),
        ActivationRecord::new("c", vec![2.0], Label::Correct),
        ActivationRecord::new("d", vec![-2.0], Label::Correct),
    ];
    let shard = ActivationShard::from_records("m", "d", Split::Test, 0, 1, records).unwrap();
    let r = evaluate(&p, &shard).unwrap();
    ensure!(
        (r.accuracy, r.precision_incorrect, r.recall_incorrect) == (0.5, Some(0.5), Some(0.5)),
        "four-record example gave {} {:?} {:?}",
        r.accuracy,
        r.precision_incorrect,
        r.recall_incorrect
    );
    Ok("zero score is Correct; 1000 states x 5 rescalings agree; 4-record example 0.5/0.5/0.5".into())
}

// ---------------------------------------------------------------- format

fn format_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let records: Vec<ActivationRecord> = (0..1000)
        .map(|i| {
            let h = (0..24)
                .map(|_| loop {
                    let v = f32::from_bits(rng.random::<u32>());
                    if v.is_finite() {
                        break v;
                    }
                })
                .collect();
            let label = if rng.random::<bool>() { Label::Correct } else { Label::Incorrect };
            ActivationRecord::new(format!("ex-{i}"), h, label)
        })
        .collect();
    let header = ShardHeader::new("model", "trivia", Split::Test, 3, 24, 1000);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("x.shard");
    write_shard(&header, &records, &path).map_err(|e| e.to_string())?;
    let shard = read_shard(&path).map_err(|e| e.to_string())?;
    let bits = |rs: &[ActivationRecord]| -> Vec<u32> {
        rs.iter().flat_map(|r| r.hidden_state.iter().map(|v| v.to_bits())).collect()
    };
    ensure!(bits(shard.records()) == bits(&records), "payload bits differ");
    ensure!(
        shard.records().iter().zip(&records).all(|(a, b)| a.example_id == b.example_id && a.label == b.label),
        "ids or labels differ"
    );

    let small = ShardHeader::new("model", "trivia", Split::Test, 3, 24, 10);
    let bytes = encode_shard(&small, &records[..10]).unwrap();
    let mut bad = bytes.clone();
    bad[0] ^= 0x20;
    let kind = decode_shard(&bad).unwrap_err().kind();
    ensure!(kind == "BadMagic", "corrupted magic gave {kind}");
    let kind = decode_shard(&bytes[..bytes.len() - 3]).unwrap_err().kind();
    ensure!(kind == "TruncatedPayload", "truncated payload gave {kind}");
    Ok("1000 x 24 round trip bitwise; BadMagic and TruncatedPayload reported".into())
}

// ---------------------------------------------------------------- determinism

fn certprobe(args: &[&str], jobs: &str) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_certprobe"))
        .args(args)
        .args(["--jobs", jobs])
        .env_remove("CERTPROBE_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn pipeline(root: &Path, jobs: &str) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let s = |p: PathBuf| p.to_str().unwrap().to_owned();
    let (shards, probes, eval, cross) =
        (s(root.join("shards")), s(root.join("probes")), s(root.join("eval")), s(root.join("cross")));
    let manifest = s(root.join("shards/manifest.json"));
    certprobe(
        &["synth", "--out", &shards, "--datasets", "alpha,beta,gamma", "--dim", "24", "--n-train", "600",
          "--n-test", "400", "--profile", "0.3,1.0,0.6", "--seed", "9"],
        jobs,
    )?;
    certprobe(&["train", "--manifest", &manifest, "--out", &probes, "--unified"], jobs)?;
    certprobe(&["eval", "--probes", &probes, "--manifest", &manifest, "--out", &eval], jobs)?;
    certprobe(&["crosseval", "--probes", &probes, "--manifest", &manifest, "--out", &cross], jobs)?;
    Ok(tree(root))
}

fn end_to_end_determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = pipeline(a.path(), "1")?;
    let second = pipeline(b.path(), "4")?;
    ensure!(
        first.keys().eq(second.keys()),
        "file sets differ: {:?} vs {:?}",
        first.keys().collect::<Vec<_>>(),
        second.keys().collect::<Vec<_>>()
    );
    for (name, bytes) in &first {
        ensure!(&second[name] == bytes, "{} differs between runs", name.display());
    }
    Ok(format!("{} output files byte-identical across two runs (1 vs 4 threads)", first.len()))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("solver reaches the brute-force grid optimum", solver_matches_grid),
        ("analytic gradient matches finite differences", gradient_check),
        ("planted direction recovered at the optimal accuracy", planted_recovery),
        ("transfer follows planted direction geometry", transfer_structure),
        ("best layer follows the signal profile peak", best_layer_peak),
        ("null signal gives chance accuracy", null_signal),
        ("decision boundary and rescaling invariance", decision_semantics),
        ("shard format round trip and corruption errors", format_round_trip),
        ("pipeline outputs are byte-for-byte reproducible", end_to_end_determinism),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|payload| {
            let msg = payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        match result {
            Ok(detail) => println!("PASS [{}] {name}: {detail} ({elapsed:.2?})", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{}] {name}: {detail} ({elapsed:.2?})", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
