use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use certprobe_core::analysis::{
    abstain_alignment, common_datasets, cosine_matrix, cross_eval, dataset_order, layer_curve,
};
use certprobe_core::eval::{
    best_layer_table, best_layers_to_csv, evaluate, reports_to_csv, EvalReport, LayerCriterion,
};
use certprobe_core::probe::{fit_layer_sweep, fit_probe, Probe, TrainConfig};
use certprobe_core::shard::{
    encode_shard, merge_shards, read_shard, sanitize_id, shard_file_name, ActivationShard, ShardSet, Split,
    UNIFIED_DATASET_ID,
};
use certprobe_core::synth::{derive_seed, generate_many, orthonormal_directions, PlantSidecar, PlantSpec};
use certprobe_core::Error;

use crate::abstain::{read_accuracy_map, read_table, AbstainSummary};
use crate::error::{CliError, CliResult};
use crate::output::{Format, Outputs};
use crate::{
    CorrelateArgs, CosineArgs, CrossevalArgs, DirectionMode, EvalArgs, Filters, LayersArgs, SynthArgs, TrainArgs,
    ValidateArgs,
};

const PROBE_SUFFIX: &str = ".probe.json";

pub fn probe_file_name(dataset_id: &str, layer_index: usize) -> String {
    format!("{}.L{layer_index:03}{PROBE_SUFFIX}", sanitize_id(dataset_id))
}

fn display(path: &Path) -> String {
    path.display().to_string()
}

// ---------------------------------------------------------------- synth

fn plant_specs(args: &SynthArgs, seed: u64) -> CliResult<Vec<PlantSpec>> {
    if let Some(path) = &args.spec {
        let text = std::fs::read_to_string(path).map_err(|e| Error::IoFailure {
            path: path.clone(),
            source: e,
        })?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidSpec(format!("{}: {e}", path.display())))?;
        let specs = match value {
            Value::Array(_) => serde_json::from_value::<Vec<PlantSpec>>(value),
            _ => serde_json::from_value::<PlantSpec>(value).map(|s| vec![s]),
        }
        .map_err(|e| Error::InvalidSpec(format!("{}: {e}", path.display())))?;
        return Ok(specs);
    }

    let names: BTreeSet<&str> = args.datasets.iter().map(String::as_str).collect();
    if args.datasets.is_empty() || names.len() != args.datasets.len() || names.contains("") {
        return Err(CliError::Usage("--datasets must list distinct, non-empty names".into()));
    }
    if names.contains(UNIFIED_DATASET_ID) {
        return Err(CliError::Usage(format!("{UNIFIED_DATASET_ID} is reserved")));
    }
    if args.dim == 0 {
        return Err(CliError::Usage("--dim must be positive".into()));
    }
    let count = match args.directions {
        DirectionMode::Orthogonal => args.datasets.len(),
        DirectionMode::Shared => 1,
    };
    if count > args.dim {
        return Err(CliError::Usage(format!(
            "{count} orthogonal directions do not fit in {} dimensions",
            args.dim
        )));
    }
    let directions = orthonormal_directions(args.dim, count, derive_seed(seed, 0x6469_7273, 0));
    let specs = args
        .datasets
        .iter()
        .enumerate()
        .map(|(k, name)| PlantSpec {
            model_id: args.model.clone(),
            dataset_id: name.clone(),
            hidden_dim: args.dim,
            n_train: args.n_train,
            n_test: args.n_test,
            direction: directions[k % count].clone(),
            bias_true: args.bias,
            signal_to_noise: args.snr,
            layer_profile: args.profile.iter().copied().enumerate().collect(),
            seed: derive_seed(seed, 0x6473_6574, k as u64),
        })
        .collect();
    Ok(specs)
}

pub fn synth(args: &SynthArgs, seed: u64) -> CliResult<Value> {
    let specs = plant_specs(args, seed)?;
    let set = generate_many(&specs)?;
    let sidecars = specs.iter().map(PlantSidecar::from_spec).collect::<Result<Vec<_>, _>>()?;

    let encoded = set
        .iter()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(key, shard)| Ok((shard_file_name(key), encode_shard(shard.header(), shard.records())?)))
        .collect::<Result<Vec<_>, Error>>()?;
    let mut out = Outputs::create(&args.out)?;
    for (name, bytes) in &encoded {
        out.write(name, bytes)?;
    }
    let manifest = set.manifest_with(|key| PathBuf::from(shard_file_name(key)));
    let manifest_path = out.write_json("manifest.json", &manifest)?;
    out.write_json("plant.json", &sidecars)?;
    out.commit();

    let bayes: BTreeMap<&str, &BTreeMap<usize, f64>> = sidecars
        .iter()
        .map(|s| (s.dataset_id.as_str(), &s.bayes_accuracy))
        .collect();
    Ok(json!({
        "manifest": display(&manifest_path),
        "model_id": set.model_id(),
        "layer_count": set.layer_count(),
        "hidden_dim": set.hidden_dim(),
        "shards": set.len(),
        "bayes_accuracy": bayes,
    }))
}

// ---------------------------------------------------------------- validate

pub fn validate(args: &ValidateArgs) -> CliResult<Value> {
    let mut result = serde_json::Map::new();
    if let Some(path) = &args.manifest {
        let set = ShardSet::open(path)?;
        let datasets: Vec<Value> = set
            .dataset_ids()
            .iter()
            .map(|d| {
                let splits: BTreeMap<String, Vec<usize>> = [Split::Train, Split::Test]
                    .into_iter()
                    .map(|s| (s.to_string(), set.layers(d, s)))
                    .filter(|(_, layers)| !layers.is_empty())
                    .collect();
                json!({ "dataset_id": d, "layers": splits })
            })
            .collect();
        result.insert(
            "manifest".into(),
            json!({
                "path": display(path),
                "model_id": set.model_id(),
                "layer_count": set.layer_count(),
                "hidden_dim": set.hidden_dim(),
                "shards": set.len(),
                "datasets": datasets,
            }),
        );
    }
    let shards = args
        .shard
        .iter()
        .map(|path| {
            let shard = read_shard(path)?;
            let h = shard.header();
            let (correct, incorrect) = shard.label_counts();
            Ok(json!({
                "path": display(path),
                "model_id": h.model_id,
                "dataset_id": h.dataset_id,
                "split": h.split,
                "layer_index": h.layer_index,
                "hidden_dim": h.hidden_dim,
                "num_records": h.num_records,
                "n_correct_label": correct,
                "n_incorrect_label": incorrect,
            }))
        })
        .collect::<Result<Vec<_>, Error>>()?;
    if !shards.is_empty() {
        result.insert("shards".into(), Value::Array(shards));
    }
    result.insert("valid".into(), Value::Bool(true));
    Ok(Value::Object(result))
}

// ---------------------------------------------------------------- train

fn select_datasets(available: Vec<String>, filter: &[String]) -> CliResult<Vec<String>> {
    if filter.is_empty() {
        return Ok(available);
    }
    let mut chosen = Vec::new();
    for d in filter {
        if !available.contains(d) {
            return Err(CliError::Usage(format!("dataset {d:?} is not in the manifest")));
        }
        if !chosen.contains(d) {
            chosen.push(d.clone());
        }
    }
    chosen.sort_by(|a, b| dataset_order(a, b));
    Ok(chosen)
}

fn select_layers(layer_count: usize, filter: &[usize]) -> CliResult<Vec<usize>> {
    if let Some(&bad) = filter.iter().find(|&&l| l >= layer_count) {
        return Err(CliError::Usage(format!("layer {bad} is out of range (layer_count {layer_count})")));
    }
    let set: BTreeSet<usize> = if filter.is_empty() {
        (0..layer_count).collect()
    } else {
        filter.iter().copied().collect()
    };
    Ok(set.into_iter().collect())
}

fn train_shard<'a>(set: &'a ShardSet, dataset: &str, layer: usize) -> CliResult<&'a ActivationShard> {
    set.get(dataset, Split::Train, layer).ok_or_else(|| {
        CliError::Core(Error::MissingLayerShard {
            dataset: dataset.to_owned(),
            layer,
        })
    })
}

#[derive(Serialize)]
struct TrainedProbe {
    dataset_id: String,
    layer_index: usize,
    file: String,
    converged: bool,
    iterations: usize,
    final_logloss: f64,
    gradient_inf_norm: f64,
}

pub fn train(args: &TrainArgs, seed: u64) -> CliResult<Value> {
    let config = TrainConfig {
        l2_strength: args.l2,
        max_iterations: args.max_iterations,
        gradient_tolerance: args.tolerance,
        standardize: !args.no_standardize,
        seed,
        class_weighting: args.class_weighting(),
    };
    config.validate()?;
    let set = ShardSet::open(&args.manifest)?;
    let datasets = select_datasets(set.dataset_ids(), &args.filters.datasets)?;
    let layers = select_layers(set.layer_count(), &args.filters.layers)?;

    // Fail on the first missing shard, in a fixed order, before fitting anything.
    for d in &datasets {
        for &l in &layers {
            train_shard(&set, d, l)?;
        }
    }
    let full_sweep = args.filters.layers.is_empty();
    let per_dataset: Vec<Vec<Probe>> = datasets
        .par_iter()
        .map(|d| -> CliResult<Vec<Probe>> {
            if full_sweep {
                Ok(fit_layer_sweep(&set, d, &config)?)
            } else {
                layers
                    .par_iter()
                    .map(|&l| Ok(fit_probe(train_shard(&set, d, l)?, &config)?))
                    .collect()
            }
        })
        .collect::<CliResult<_>>()?;
    let mut probes: Vec<Probe> = per_dataset.into_iter().flatten().collect();

    if args.unified {
        let unified = layers
            .par_iter()
            .map(|&l| -> CliResult<Probe> {
                let shards = datasets
                    .iter()
                    .map(|d| train_shard(&set, d, l))
                    .collect::<CliResult<Vec<_>>>()?;
                let pool = merge_shards(shards)?;
                Ok(fit_probe(&pool, &config)?)
            })
            .collect::<CliResult<Vec<_>>>()?;
        probes.extend(unified);
    }

    let mut names = BTreeSet::new();
    for p in &probes {
        if !names.insert(probe_file_name(&p.dataset_id, p.layer_index)) {
            return Err(CliError::Core(Error::DuplicateEntry(format!(
                "dataset ids collide after file-name sanitizing: {:?}",
                p.dataset_id
            ))));
        }
    }

    let mut out = Outputs::create(&args.out)?;
    let mut trained = Vec::with_capacity(probes.len());
    for p in &probes {
        let file = probe_file_name(&p.dataset_id, p.layer_index);
        out.write(&file, p.to_json()?)?;
        trained.push(TrainedProbe {
            dataset_id: p.dataset_id.clone(),
            layer_index: p.layer_index,
            file,
            converged: p.diagnostics.converged,
            iterations: p.diagnostics.iterations,
            final_logloss: p.diagnostics.final_logloss,
            gradient_inf_norm: p.diagnostics.gradient_inf_norm,
        });
    }
    let summary = json!({
        "model_id": set.model_id(),
        "config": config,
        "probes": trained,
        "all_converged": probes.iter().all(|p| p.diagnostics.converged),
    });
    out.write_json("train_summary.json", &summary)?;
    out.commit();
    Ok(summary)
}

// ---------------------------------------------------------------- probe loading

/// Loads every `*.probe.json` in `dir`, ordered by dataset then layer.
fn load_probes(dir: &Path, filters: &Filters) -> CliResult<Vec<Probe>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::IoFailure {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut paths = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::IoFailure {
            path: dir.to_path_buf(),
            source: e,
        })?;
        let name = entry.file_name();
        if name.to_string_lossy().ends_with(PROBE_SUFFIX) {
            paths.push(entry.path());
        }
    }
    paths.sort();
    let mut probes = paths.iter().map(|p| Probe::load(p)).collect::<Result<Vec<_>, _>>()?;
    if probes.is_empty() {
        return Err(CliError::Core(Error::EmptyInput(format!(
            "no *{PROBE_SUFFIX} files in {}",
            dir.display()
        ))));
    }
    if !filters.datasets.is_empty() {
        probes.retain(|p| filters.datasets.contains(&p.dataset_id));
    }
    if !filters.layers.is_empty() {
        probes.retain(|p| filters.layers.contains(&p.layer_index));
    }
    if probes.is_empty() {
        return Err(CliError::Core(Error::EmptyInput(
            "no probes match the dataset/layer filters".into(),
        )));
    }
    probes.sort_by(|a, b| dataset_order(&a.dataset_id, &b.dataset_id).then(a.layer_index.cmp(&b.layer_index)));
    for w in probes.windows(2) {
        if w[0].dataset_id == w[1].dataset_id && w[0].layer_index == w[1].layer_index {
            return Err(CliError::Core(Error::DuplicateEntry(format!(
                "two probes for dataset {:?} at layer {}",
                w[0].dataset_id, w[0].layer_index
            ))));
        }
    }
    let model = &probes[0].model_id;
    if let Some(p) = probes.iter().find(|p| &p.model_id != model) {
        return Err(CliError::Core(Error::IncompatibleShards(format!(
            "probes for models {model:?} and {:?}",
            p.model_id
        ))));
    }
    Ok(probes)
}

fn check_model(probes: &[Probe], set: &ShardSet) -> CliResult<()> {
    match probes.iter().find(|p| p.model_id != set.model_id()) {
        Some(p) => Err(CliError::Core(Error::IncompatibleShards(format!(
            "probe for model {:?} applied to shards of model {:?}",
            p.model_id,
            set.model_id()
        )))),
        None => Ok(()),
    }
}

fn target_shard<'a>(set: &'a ShardSet, dataset: &str, split: Split, layer: usize) -> CliResult<Cow<'a, ActivationShard>> {
    if dataset == UNIFIED_DATASET_ID {
        return Ok(Cow::Owned(set.unified(split, layer)?));
    }
    if layer >= set.layer_count() {
        return Err(CliError::Core(Error::LayerMismatch {
            expected: set.layer_count().saturating_sub(1),
            found: layer,
        }));
    }
    set.get(dataset, split, layer).map(Cow::Borrowed).ok_or_else(|| {
        CliError::Core(Error::MissingShard {
            dataset: dataset.to_owned(),
            split: split.to_string(),
        })
    })
}

fn by_layer(probes: Vec<Probe>) -> BTreeMap<usize, BTreeMap<String, Probe>> {
    let mut grouped: BTreeMap<usize, BTreeMap<String, Probe>> = BTreeMap::new();
    for p in probes {
        grouped.entry(p.layer_index).or_default().insert(p.dataset_id.clone(), p);
    }
    grouped
}

// ---------------------------------------------------------------- eval

pub fn eval(args: &EvalArgs) -> CliResult<Value> {
    let probes = load_probes(&args.probes, &args.filters)?;
    let set = ShardSet::open(&args.manifest)?;
    check_model(&probes, &set)?;
    let split = args.split();
    let reports = probes
        .par_iter()
        .map(|p| {
            let shard = target_shard(&set, &p.dataset_id, split, p.layer_index)?;
            Ok(evaluate(p, &shard)?)
        })
        .collect::<CliResult<Vec<EvalReport>>>()?;
    let best = best_layer_table(&reports, LayerCriterion::Accuracy)?;

    let mut out = Outputs::create(&args.out)?;
    for format in dedup(&args.format) {
        match format {
            Format::Csv => {
                out.write("eval_reports.csv", reports_to_csv(&reports)?)?;
                out.write("best_layers.csv", best_layers_to_csv(&best)?)?;
            }
            Format::Json => {
                out.write_json("eval_reports.json", &reports)?;
                out.write_json("best_layers.json", &best)?;
            }
        }
    }
    out.commit();
    Ok(json!({ "split": split, "reports": reports.len(), "best_layers": best }))
}

fn dedup(formats: &[Format]) -> Vec<Format> {
    let mut seen = Vec::new();
    for f in formats {
        if !seen.contains(f) {
            seen.push(*f);
        }
    }
    seen
}

// ---------------------------------------------------------------- crosseval

pub fn crosseval(args: &CrossevalArgs) -> CliResult<Value> {
    let probes = load_probes(&args.probes, &args.filters)?;
    let set = ShardSet::open(&args.manifest)?;
    check_model(&probes, &set)?;
    let split = args.split();
    let mut matrices = Vec::new();
    for (layer, group) in by_layer(probes) {
        let mut targets: BTreeMap<String, &ActivationShard> = BTreeMap::new();
        for d in group.keys().filter(|d| d.as_str() != UNIFIED_DATASET_ID) {
            if let Some(s) = set.get(d, split, layer) {
                targets.insert(d.clone(), s);
            }
        }
        matrices.push(cross_eval(&group, &targets)?);
    }

    let mut out = Outputs::create(&args.out)?;
    let mut files = Vec::new();
    for m in &matrices {
        let stem = format!("crosseval.L{:03}", m.layer_index);
        for format in dedup(&args.format) {
            let name = match format {
                Format::Csv => {
                    let name = format!("{stem}.csv");
                    out.write(&name, m.to_csv()?)?;
                    name
                }
                Format::Json => {
                    let name = format!("{stem}.json");
                    out.write_json(&name, m)?;
                    name
                }
            };
            files.push(name);
        }
    }
    out.commit();
    Ok(json!({
        "split": split,
        "layers": matrices.iter().map(|m| m.layer_index).collect::<Vec<_>>(),
        "files": files,
    }))
}

// ---------------------------------------------------------------- cosine

pub fn cosine(args: &CosineArgs) -> CliResult<Value> {
    let probes = load_probes(&args.probes, &args.filters)?;
    let matrices = by_layer(probes)
        .values()
        .map(cosine_matrix)
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = Outputs::create(&args.out)?;
    let mut files = Vec::new();
    for m in &matrices {
        let stem = format!("cosine.L{:03}", m.layer_index);
        for format in dedup(&args.format) {
            let name = match format {
                Format::Csv => {
                    let name = format!("{stem}.csv");
                    out.write(&name, m.to_csv()?)?;
                    name
                }
                Format::Json => {
                    let name = format!("{stem}.json");
                    out.write_json(&name, m)?;
                    name
                }
            };
            files.push(name);
        }
    }
    out.commit();
    Ok(json!({
        "layers": matrices.iter().map(|m| m.layer_index).collect::<Vec<_>>(),
        "files": files,
    }))
}

// ---------------------------------------------------------------- layers

pub fn layers(args: &LayersArgs) -> CliResult<Value> {
    let text = std::fs::read_to_string(&args.reports).map_err(|e| Error::IoFailure {
        path: args.reports.clone(),
        source: e,
    })?;
    let mut reports: Vec<EvalReport> = serde_json::from_str(&text)
        .map_err(|e| CliError::data("MalformedReports", format!("{}: {e}", args.reports.display())))?;
    if !args.include_unified {
        reports.retain(|r| r.probe_key.dataset_id != UNIFIED_DATASET_ID);
    }
    let metric = args.metric();
    let curve = layer_curve(&reports, metric)?;
    let metric_name = serde_json::to_value(metric)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .ok_or_else(|| CliError::Internal("metric name".into()))?;

    let mut out = Outputs::create(&args.out)?;
    let mut files = Vec::new();
    for format in dedup(&args.format) {
        let name = match format {
            Format::Csv => {
                let name = format!("layer_curve.{metric_name}.csv");
                out.write(&name, curve.to_csv()?)?;
                name
            }
            Format::Json => {
                let name = format!("layer_curve.{metric_name}.json");
                out.write_json(&name, &curve)?;
                name
            }
        };
        files.push(name);
    }
    out.commit();
    Ok(json!({
        "metric": metric_name,
        "datasets": curve.dataset_ids,
        "argmax_layer": curve.argmax(),
        "files": files,
    }))
}

// ---------------------------------------------------------------- correlate

pub fn correlate(args: &CorrelateArgs) -> CliResult<Value> {
    let probe_accuracy = read_accuracy_map(&args.probe_accuracy, &[UNIFIED_DATASET_ID])?;
    let mut tables: BTreeMap<String, AbstainSummary> = BTreeMap::new();
    let abstain_accuracy: BTreeMap<String, f64> = match &args.abstain {
        Some(path) => read_accuracy_map(path, &[UNIFIED_DATASET_ID])?,
        None => {
            for (dataset, path) in &args.abstain_table {
                let summary = read_table(path)?;
                if tables.insert(dataset.clone(), summary).is_some() {
                    return Err(CliError::Usage(format!("--abstain-table given twice for {dataset:?}")));
                }
            }
            tables
                .iter()
                .filter_map(|(d, s)| s.accuracy.map(|a| (d.clone(), a)))
                .collect()
        }
    };
    let r = abstain_alignment(&probe_accuracy, &abstain_accuracy)?;
    let common = common_datasets(&probe_accuracy, &abstain_accuracy);
    let mut result = json!({
        "pearson": r,
        "datasets": common,
        "probe_accuracy": probe_accuracy,
        "abstain_accuracy": abstain_accuracy,
    });
    if !tables.is_empty() {
        result["abstain_tables"] = serde_json::to_value(&tables)
            .map_err(|e| CliError::Internal(format!("serializing abstain tables: {e}")))?;
    }
    if let Some(path) = &args.out {
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let name = path
            .file_name()
            .ok_or_else(|| CliError::Usage(format!("--out {} has no file name", path.display())))?
            .to_string_lossy()
            .into_owned();
        let mut out = Outputs::create(dir)?;
        out.write_json(&name, &result)?;
        out.commit();
    }
    Ok(result)
}
