//! Probe fitting for single shards and whole layer sweeps.

use rayon::prelude::*;

use super::lbfgs::{minimize, LbfgsOptions};
use super::objective::Objective;
use super::{Probe, TrainConfig, TrainDiagnostics};
use crate::error::{Error, Result};
use crate::shard::{ActivationShard, ShardSet, Split};

/// Fits an uncertainty direction on a training shard.
///
/// The probe is trained on the incorrectness indicator `1 - label`, so a
/// positive score predicts an incorrect generation. Hitting
/// `max_iterations` is not an error: the probe is returned with
/// `diagnostics.converged == false`.
pub fn fit_probe(shard: &ActivationShard, config: &TrainConfig) -> Result<Probe> {
    config.validate()?;
    let (correct, incorrect) = shard.label_counts();
    if correct == 0 || incorrect == 0 {
        return Err(Error::DegenerateLabels);
    }
    let dim = shard.hidden_dim();
    let (objective, scaler) = Objective::from_shard(shard, config);

    let options = LbfgsOptions {
        max_iterations: config.max_iterations,
        gradient_tolerance: config.gradient_tolerance,
        ..LbfgsOptions::default()
    };
    let outcome = minimize(
        |params, grad| objective.value_and_gradient(params, grad),
        vec![0.0; dim + 1],
        &options,
    );

    let mut params = outcome.x;
    let bias = params.pop().expect("dim + 1 parameters");
    let mut weights = params;
    if let Some(s) = &scaler {
        for (j, w) in weights.iter_mut().enumerate() {
            if s.is_constant(j) {
                *w = 0.0;
            }
        }
    }

    let header = shard.header();
    Ok(Probe {
        model_id: header.model_id.clone(),
        dataset_id: header.dataset_id.clone(),
        layer_index: header.layer_index,
        bias,
        weights,
        scaler,
        config: config.clone(),
        diagnostics: TrainDiagnostics {
            final_logloss: outcome.value,
            iterations: outcome.iterations,
            converged: outcome.converged,
            gradient_inf_norm: outcome.gradient_inf_norm,
        },
    })
}

/// Fits one probe per layer `0..layer_count` for `dataset_id`.
///
/// Layers are fitted in parallel; each probe depends only on its own shard.
pub fn fit_layer_sweep(set: &ShardSet, dataset_id: &str, config: &TrainConfig) -> Result<Vec<Probe>> {
    let shards = (0..set.layer_count())
        .map(|layer| {
            set.get(dataset_id, Split::Train, layer)
                .ok_or_else(|| Error::MissingLayerShard {
                    dataset: dataset_id.to_owned(),
                    layer,
                })
        })
        .collect::<Result<Vec<_>>>()?;
    if shards.is_empty() {
        return Err(Error::EmptyInput(format!("no layers declared for {dataset_id:?}")));
    }
    shards.into_par_iter().map(|shard| fit_probe(shard, config)).collect()
}
