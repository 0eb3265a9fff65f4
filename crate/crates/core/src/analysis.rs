//! Second-order analyses over fitted probes: cross-dataset transfer, the
//! geometry of uncertainty directions, per-layer curves, and agreement with
//! the model's own zero-shot self-assessment.
//!
//! Dataset ids are always ordered lexicographically with
//! [`UNIFIED_DATASET_ID`] last.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{csv_err, evaluate, finish_csv, fmt4, EvalReport};
use crate::probe::Probe;
use crate::shard::{ActivationShard, UNIFIED_DATASET_ID};

/// Lexicographic order with the unified pool sorted after every dataset.
pub fn dataset_order(a: &str, b: &str) -> Ordering {
    (a == UNIFIED_DATASET_ID, a).cmp(&(b == UNIFIED_DATASET_ID, b))
}

fn ordered_keys<V>(map: &BTreeMap<String, V>) -> Vec<&str> {
    let mut keys: Vec<&str> = map.keys().map(String::as_str).collect();
    keys.sort_by(|a, b| dataset_order(a, b));
    keys
}

/// Accuracy of each source dataset's probe on each target's test shard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossEvalMatrix {
    pub layer_index: usize,
    /// Probe sources; equals `column_ids`, plus a trailing unified row when
    /// a unified probe was supplied.
    pub row_ids: Vec<String>,
    /// Evaluation targets.
    pub column_ids: Vec<String>,
    /// `values[r][c]`: accuracy of probe `row_ids[r]` on `column_ids[c]`.
    pub values: Vec<Vec<f64>>,
}

pub fn cross_eval(
    probes: &BTreeMap<String, Probe>,
    test_shards: &BTreeMap<String, &ActivationShard>,
) -> Result<CrossEvalMatrix> {
    let layer = common_layer(probes)?;
    let rows = ordered_keys(probes);
    let columns: Vec<&str> = rows.iter().copied().filter(|d| *d != UNIFIED_DATASET_ID).collect();
    if columns.is_empty() {
        return Err(Error::EmptyInput("cross_eval needs at least one non-unified probe".into()));
    }
    let model = &probes[rows[0]].model_id;
    for (id, p) in probes {
        if &p.model_id != model {
            return Err(Error::IncompatibleShards(format!(
                "probe {id:?} is for model {:?}, expected {model:?}",
                p.model_id
            )));
        }
    }
    let mut targets = Vec::with_capacity(columns.len());
    for c in &columns {
        let shard = *test_shards.get(*c).ok_or_else(|| Error::MissingShard {
            dataset: (*c).to_owned(),
            split: "test".into(),
        })?;
        if shard.header().layer_index != layer {
            return Err(Error::LayerMismatch {
                expected: layer,
                found: shard.header().layer_index,
            });
        }
        targets.push(shard);
    }

    let cells: Vec<(usize, usize)> = (0..rows.len())
        .flat_map(|r| (0..columns.len()).map(move |c| (r, c)))
        .collect();
    let accuracies = cells
        .par_iter()
        .map(|&(r, c)| evaluate(&probes[rows[r]], targets[c]).map(|rep| rep.accuracy))
        .collect::<Result<Vec<f64>>>()?;
    let values = accuracies.chunks(columns.len()).map(<[f64]>::to_vec).collect();

    Ok(CrossEvalMatrix {
        layer_index: layer,
        row_ids: rows.iter().map(|s| (*s).to_owned()).collect(),
        column_ids: columns.iter().map(|s| (*s).to_owned()).collect(),
        values,
    })
}

impl CrossEvalMatrix {
    pub fn to_csv(&self) -> Result<String> {
        matrix_csv("probe_dataset", &self.row_ids, &self.column_ids, &self.values)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineMatrix {
    pub layer_index: usize,
    pub dataset_ids: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl CosineMatrix {
    pub fn to_csv(&self) -> Result<String> {
        matrix_csv("dataset", &self.dataset_ids, &self.dataset_ids, &self.values)
    }
}

/// `a . b / (||a|| ||b||)`, clamped to `[-1, 1]`. `None` if either vector is zero.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Some((d / (na * nb)).clamp(-1.0, 1.0))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Pairwise cosine similarity of the probes' weight vectors as learned
/// (no scaler adjustment).
pub fn cosine_matrix(probes: &BTreeMap<String, Probe>) -> Result<CosineMatrix> {
    let layer = common_layer(probes)?;
    let ids = ordered_keys(probes);
    for id in &ids {
        if norm(&probes[*id].weights) == 0.0 {
            return Err(Error::ZeroVector((*id).to_owned()));
        }
    }
    let k = ids.len();
    let mut values = vec![vec![0.0; k]; k];
    for r in 0..k {
        for c in r..k {
            let v = cosine_similarity(&probes[ids[r]].weights, &probes[ids[c]].weights)
                .expect("nonzero vectors checked above");
            values[r][c] = v;
            values[c][r] = v;
        }
    }
    Ok(CosineMatrix {
        layer_index: layer,
        dataset_ids: ids.iter().map(|s| (*s).to_owned()).collect(),
        values,
    })
}

fn common_layer(probes: &BTreeMap<String, Probe>) -> Result<usize> {
    let first = probes
        .values()
        .next()
        .ok_or_else(|| Error::EmptyInput("no probes supplied".into()))?;
    for p in probes.values() {
        if p.layer_index != first.layer_index {
            return Err(Error::LayerMismatch {
                expected: first.layer_index,
                found: p.layer_index,
            });
        }
    }
    Ok(first.layer_index)
}

fn matrix_csv(corner: &str, rows: &[String], columns: &[String], values: &[Vec<f64>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<&str> = std::iter::once(corner).chain(columns.iter().map(String::as_str)).collect();
    w.write_record(&header).map_err(csv_err)?;
    for (id, row) in rows.iter().zip(values) {
        let record: Vec<String> = std::iter::once(id.clone())
            .chain(row.iter().map(|v| fmt4(Some(*v))))
            .collect();
        w.write_record(&record).map_err(csv_err)?;
    }
    finish_csv(w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveMetric {
    Accuracy,
    PrecisionIncorrect,
}

impl CurveMetric {
    fn of(self, report: &EvalReport) -> Option<f64> {
        match self {
            CurveMetric::Accuracy => Some(report.accuracy),
            CurveMetric::PrecisionIncorrect => report.precision_incorrect,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPoint {
    pub layer_index: usize,
    /// Mean over the non-null entries of `values`; `None` if all are null.
    pub mean: Option<f64>,
    pub null_count: usize,
    /// One entry per `LayerCurve::dataset_ids`.
    pub values: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCurve {
    pub model_id: String,
    pub metric: CurveMetric,
    pub dataset_ids: Vec<String>,
    pub points: Vec<LayerPoint>,
}

/// Per-layer average of a metric over datasets, keyed by each report's probe
/// dataset. Every dataset must have exactly one report at every layer, and
/// the layers must form a contiguous range.
pub fn layer_curve(reports: &[EvalReport], metric: CurveMetric) -> Result<LayerCurve> {
    let first = reports
        .first()
        .ok_or_else(|| Error::EmptyInput("layer_curve needs at least one report".into()))?;
    let model_id = first.probe_key.model_id.clone();

    let mut grid: BTreeMap<(usize, &str), Option<f64>> = BTreeMap::new();
    let mut layers = BTreeSet::new();
    let mut datasets = BTreeSet::new();
    for r in reports {
        if r.probe_key.model_id != model_id {
            return Err(Error::MixedReports(format!(
                "models {:?} and {:?}",
                model_id, r.probe_key.model_id
            )));
        }
        let key = (r.layer_index(), r.probe_key.dataset_id.as_str());
        if grid.insert(key, metric.of(r)).is_some() {
            return Err(Error::DuplicateEntry(format!(
                "two reports for dataset {:?} at layer {}",
                key.1, key.0
            )));
        }
        layers.insert(key.0);
        datasets.insert(key.1);
    }

    let lo = *layers.first().expect("non-empty");
    let hi = *layers.last().expect("non-empty");
    if hi - lo + 1 != layers.len() {
        return Err(Error::NonContiguousLayers(format!(
            "{} layers between {lo} and {hi}",
            layers.len()
        )));
    }
    let mut dataset_ids: Vec<&str> = datasets.into_iter().collect();
    dataset_ids.sort_by(|a, b| dataset_order(a, b));

    let mut points = Vec::with_capacity(layers.len());
    for layer in layers {
        let values = dataset_ids
            .iter()
            .map(|d| {
                grid.get(&(layer, *d)).copied().ok_or_else(|| {
                    Error::MixedReports(format!("dataset {d:?} has no report at layer {layer}"))
                })
            })
            .collect::<Result<Vec<Option<f64>>>>()?;
        let (mean, null_count) = mean_excluding_nulls(&values);
        points.push(LayerPoint {
            layer_index: layer,
            mean,
            null_count,
            values,
        });
    }
    Ok(LayerCurve {
        model_id,
        metric,
        dataset_ids: dataset_ids.into_iter().map(str::to_owned).collect(),
        points,
    })
}

/// Arithmetic mean of the `Some` entries in order, and the number of `None`s.
pub fn mean_excluding_nulls(values: &[Option<f64>]) -> (Option<f64>, usize) {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    let nulls = values.len() - present.len();
    if present.is_empty() {
        return (None, nulls);
    }
    (Some(present.iter().sum::<f64>() / present.len() as f64), nulls)
}

impl LayerCurve {
    /// Layer with the highest mean; ties go to the smallest layer.
    pub fn argmax(&self) -> Option<usize> {
        self.points
            .iter()
            .filter_map(|p| p.mean.map(|m| (p.layer_index, m)))
            .fold(None, |best: Option<(usize, f64)>, (l, m)| match best {
                Some((_, bm)) if bm >= m => best,
                _ => Some((l, m)),
            })
            .map(|(l, _)| l)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let header: Vec<&str> = ["layer", "mean", "null_count"]
            .into_iter()
            .chain(self.dataset_ids.iter().map(String::as_str))
            .collect();
        w.write_record(&header).map_err(csv_err)?;
        for p in &self.points {
            let record: Vec<String> = [p.layer_index.to_string(), fmt4(p.mean), p.null_count.to_string()]
                .into_iter()
                .chain(p.values.iter().map(|v| fmt4(*v)))
                .collect();
            w.write_record(&record).map_err(csv_err)?;
        }
        finish_csv(w)
    }
}

/// Pearson product-moment correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch {
            left: xs.len(),
            right: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(Error::EmptyInput("pearson needs at least two points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let dx = x - mx;
        let dy = y - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ConstantInput);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Datasets present in both maps, in lexicographic order.
pub fn common_datasets<'a>(a: &'a BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> Vec<&'a str> {
    a.keys().filter(|k| b.contains_key(*k)).map(String::as_str).collect()
}

/// Pearson correlation between probe accuracy and zero-shot self-assessment
/// accuracy over the datasets both maps cover.
pub fn abstain_alignment(
    probe_accuracy: &BTreeMap<String, f64>,
    abstain_accuracy: &BTreeMap<String, f64>,
) -> Result<f64> {
    let keys = common_datasets(probe_accuracy, abstain_accuracy);
    if keys.len() < 2 {
        return Err(Error::InsufficientOverlap(keys.len()));
    }
    let xs: Vec<f64> = keys.iter().map(|k| probe_accuracy[*k]).collect();
    let ys: Vec<f64> = keys.iter().map(|k| abstain_accuracy[*k]).collect();
    pearson(&xs, &ys)
}
