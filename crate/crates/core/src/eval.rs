//! Applying probes to shards and scoring them.
//!
//! A probe's decision rule: `score = w . h' + b`; `score > 0` predicts an
//! incorrect generation, `score <= 0` (including exactly 0) a correct one.
//! Precision and recall are reported for the incorrect class.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::analysis::dataset_order;
use crate::error::{Error, Result};
use crate::probe::Probe;
use crate::shard::{ActivationShard, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prediction {
    Correct,
    Incorrect,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Classification {
    pub prediction: Prediction,
    pub score: f64,
}

pub fn classify(probe: &Probe, hidden_state: &[f32]) -> Result<Classification> {
    let score = probe.score(hidden_state)?;
    Ok(Classification {
        prediction: decide(score),
        score,
    })
}

#[inline]
fn decide(score: f64) -> Prediction {
    if score > 0.0 {
        Prediction::Incorrect
    } else {
        Prediction::Correct
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ProbeKey {
    pub model_id: String,
    pub dataset_id: String,
    pub layer_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EvalKey {
    pub dataset_id: String,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Support {
    pub n_total: usize,
    pub n_correct_label: usize,
    pub n_incorrect_label: usize,
    pub n_predicted_incorrect: usize,
    /// Records predicted incorrect whose label is also incorrect.
    pub n_true_incorrect: usize,
}

impl Support {
    /// Records whose prediction agrees with their label.
    pub fn n_agree(&self) -> usize {
        let false_incorrect = self.n_predicted_incorrect - self.n_true_incorrect;
        self.n_true_incorrect + (self.n_correct_label - false_incorrect)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// `None` when nothing was predicted incorrect.
    pub precision_incorrect: Option<f64>,
    /// `None` when the shard holds no incorrect labels.
    pub recall_incorrect: Option<f64>,
    pub support: Support,
    pub probe_key: ProbeKey,
    pub eval_key: EvalKey,
}

impl EvalReport {
    fn from_support(support: Support, probe_key: ProbeKey, eval_key: EvalKey) -> Self {
        let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
        Self {
            accuracy: support.n_agree() as f64 / support.n_total as f64,
            precision_incorrect: ratio(support.n_true_incorrect, support.n_predicted_incorrect),
            recall_incorrect: ratio(support.n_true_incorrect, support.n_incorrect_label),
            support,
            probe_key,
            eval_key,
        }
    }

    pub fn layer_index(&self) -> usize {
        self.probe_key.layer_index
    }
}

pub fn evaluate(probe: &Probe, shard: &ActivationShard) -> Result<EvalReport> {
    if shard.hidden_dim() != probe.hidden_dim() {
        return Err(Error::DimensionMismatch {
            expected: probe.hidden_dim(),
            found: shard.hidden_dim(),
        });
    }
    if shard.is_empty() {
        return Err(Error::EmptyShard);
    }
    let mut support = Support {
        n_total: shard.len(),
        n_correct_label: 0,
        n_incorrect_label: 0,
        n_predicted_incorrect: 0,
        n_true_incorrect: 0,
    };
    for record in shard.records() {
        let predicted_incorrect = decide(probe.score_unchecked(&record.hidden_state)) == Prediction::Incorrect;
        let incorrect = !record.label.is_correct();
        if incorrect {
            support.n_incorrect_label += 1;
        } else {
            support.n_correct_label += 1;
        }
        if predicted_incorrect {
            support.n_predicted_incorrect += 1;
            if incorrect {
                support.n_true_incorrect += 1;
            }
        }
    }
    let header = shard.header();
    Ok(EvalReport::from_support(
        support,
        ProbeKey {
            model_id: probe.model_id.clone(),
            dataset_id: probe.dataset_id.clone(),
            layer_index: probe.layer_index,
        },
        EvalKey {
            dataset_id: header.dataset_id.clone(),
            split: header.split,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerCriterion {
    #[default]
    Accuracy,
}

/// Report with the highest criterion; ties go to the smallest layer index.
pub fn best_layer(reports: &[EvalReport], criterion: LayerCriterion) -> Result<(usize, EvalReport)> {
    let first = reports
        .first()
        .ok_or_else(|| Error::EmptyInput("best_layer needs at least one report".into()))?;
    for r in reports {
        if r.probe_key.dataset_id != first.probe_key.dataset_id
            || r.probe_key.model_id != first.probe_key.model_id
            || r.eval_key != first.eval_key
        {
            return Err(Error::MixedReports(format!(
                "probe {:?} on {:?} mixed with probe {:?} on {:?}",
                first.probe_key.dataset_id, first.eval_key, r.probe_key.dataset_id, r.eval_key
            )));
        }
    }
    let value = |r: &EvalReport| match criterion {
        LayerCriterion::Accuracy => r.accuracy,
    };
    let best = reports
        .iter()
        .fold(first, |best, r| {
            let (v, bv) = (value(r), value(best));
            if v > bv || (v == bv && r.layer_index() < best.layer_index()) {
                r
            } else {
                best
            }
        });
    Ok((best.layer_index(), best.clone()))
}

/// One row of the best-layer table: the winning layer for a probe dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestLayerRow {
    pub model_id: String,
    pub dataset_id: String,
    pub eval_dataset: String,
    pub eval_split: Split,
    pub best_layer: usize,
    pub accuracy: f64,
    pub precision_incorrect: Option<f64>,
    pub recall_incorrect: Option<f64>,
    pub layers_compared: usize,
}

/// Groups reports by (probe dataset, eval target) and picks each group's best
/// layer. Rows follow dataset order with the unified pool last.
pub fn best_layer_table(reports: &[EvalReport], criterion: LayerCriterion) -> Result<Vec<BestLayerRow>> {
    if reports.is_empty() {
        return Err(Error::EmptyInput("no evaluation reports".into()));
    }
    let mut groups: BTreeMap<(&str, &str, &EvalKey), Vec<EvalReport>> = BTreeMap::new();
    for r in reports {
        groups
            .entry((&r.probe_key.model_id, &r.probe_key.dataset_id, &r.eval_key))
            .or_default()
            .push(r.clone());
    }
    let mut rows = groups
        .into_values()
        .map(|group| {
            let (layer, best) = best_layer(&group, criterion)?;
            Ok(BestLayerRow {
                model_id: best.probe_key.model_id,
                dataset_id: best.probe_key.dataset_id,
                eval_dataset: best.eval_key.dataset_id,
                eval_split: best.eval_key.split,
                best_layer: layer,
                accuracy: best.accuracy,
                precision_incorrect: best.precision_incorrect,
                recall_incorrect: best.recall_incorrect,
                layers_compared: group.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| {
        a.model_id
            .cmp(&b.model_id)
            .then_with(|| dataset_order(&a.dataset_id, &b.dataset_id))
            .then_with(|| dataset_order(&a.eval_dataset, &b.eval_dataset))
            .then_with(|| a.eval_split.cmp(&b.eval_split))
    });
    Ok(rows)
}

pub fn best_layers_to_csv(rows: &[BestLayerRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "model",
        "dataset",
        "eval_dataset",
        "eval_split",
        "best_layer",
        "accuracy",
        "precision_incorrect",
        "recall_incorrect",
        "layers_compared",
    ])
    .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.model_id.clone(),
            r.dataset_id.clone(),
            r.eval_dataset.clone(),
            r.eval_split.to_string(),
            r.best_layer.to_string(),
            fmt4(Some(r.accuracy)),
            fmt4(r.precision_incorrect),
            fmt4(r.recall_incorrect),
            r.layers_compared.to_string(),
        ])
        .map_err(csv_err)?;
    }
    finish_csv(w)
}

/// Column order of [`reports_to_csv`].
pub const REPORT_CSV_COLUMNS: [&str; 13] = [
    "probe_model",
    "probe_dataset",
    "probe_layer",
    "eval_dataset",
    "eval_split",
    "accuracy",
    "precision_incorrect",
    "recall_incorrect",
    "n_total",
    "n_correct_label",
    "n_incorrect_label",
    "n_predicted_incorrect",
    "n_true_incorrect",
];

/// Four-decimal fixed formatting; undefined values become empty cells.
pub fn fmt4(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

pub fn reports_to_csv(reports: &[EvalReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(REPORT_CSV_COLUMNS).map_err(csv_err)?;
    for r in reports {
        let s = &r.support;
        w.write_record([
            r.probe_key.model_id.clone(),
            r.probe_key.dataset_id.clone(),
            r.probe_key.layer_index.to_string(),
            r.eval_key.dataset_id.clone(),
            r.eval_key.split.to_string(),
            fmt4(Some(r.accuracy)),
            fmt4(r.precision_incorrect),
            fmt4(r.recall_incorrect),
            s.n_total.to_string(),
            s.n_correct_label.to_string(),
            s.n_incorrect_label.to_string(),
            s.n_predicted_incorrect.to_string(),
            s.n_true_incorrect.to_string(),
        ])
        .map_err(csv_err)?;
    }
    finish_csv(w)
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::io("<csv>", std::io::Error::other(e))
}

pub(crate) fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::io("<csv>", std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv writer emits UTF-8 from UTF-8 input"))
}
