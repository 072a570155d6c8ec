use rand::seq::index::sample;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::federation::{ClientUpdate, GlobalState, Payload, PayloadKind, TrainingConfig};
use crate::numcore::{self, GradVector, ModelSpec, ParamVector, Tensor};
use crate::privacy::{self, InjectionSite, NoiseKind, NoisePolicy, SensitivityRecord, SensitivitySource};
use crate::rng::SimRng;

/// Noise policy together with the current round's noise scale.
#[derive(Debug, Clone, Copy)]
pub struct LocalDefense<'a> {
    pub policy: &'a NoisePolicy,
    pub sigma_t: f64,
}

/// Returns the poisoned replacement for a shard, or `None` to train on it as is.
pub type PoisonHook<'a> = &'a (dyn Fn(&Dataset) -> Result<Option<Dataset>> + Sync);

/// Runs `L` SGD iterations from the global state on seeded size-`B` batches.
///
/// The shared gradient is the sum of the applied step gradients, i.e.
/// `(w(t) - w_k) / lr` for the undefended run. Update-level defenses act on
/// that sum and the reported weights are rebuilt from the sanitized gradient.
#[allow(clippy::too_many_arguments)]
pub fn local_train(
    spec: &ModelSpec,
    global: &GlobalState,
    client: usize,
    shard: &Dataset,
    cfg: &TrainingConfig,
    rng: &mut SimRng,
    defense: Option<LocalDefense<'_>>,
    poison: Option<PoisonHook<'_>>,
) -> Result<ClientUpdate> {
    let poisoned = match poison {
        Some(hook) => hook(shard)?,
        None => None,
    };
    let data = poisoned.as_ref().unwrap_or(shard);
    if data.len() < cfg.batch_size || data.is_empty() {
        return Err(Error::Degenerate(format!(
            "client {client} holds {} samples, fewer than the batch size {}",
            data.len(),
            cfg.batch_size
        )));
    }
    let dp = defense.filter(|d| d.policy.is_dp());
    let per_example_site = dp.is_some_and(|d| d.policy.site == InjectionSite::PerExample);
    let track_norms = dp.is_some_and(|d| d.policy.kind == NoiseKind::DynamicDp && !per_example_site);

    let mut w = global.params.clone();
    let mut acc = GradVector::zeros(spec.layout().clone());
    let mut max_example_norm: f64 = 0.0;
    let mut step_sensitivity: Option<SensitivityRecord> = None;
    for _ in 0..cfg.local_iters {
        let mut idx = sample(rng, data.len(), cfg.batch_size).into_vec();
        idx.sort_unstable();
        let batch: Vec<(Tensor, usize)> = idx.iter().map(|&i| (data.images()[i].clone(), data.labels()[i])).collect();
        let g = if per_example_site {
            let d = dp.expect("dp defense");
            let per_example = numcore::per_example_grads(spec, &w, &batch)?;
            let (g, record) = privacy::dp_perturb_examples(&per_example, d.policy, d.sigma_t, rng)?;
            if step_sensitivity.is_none_or(|s| record.value > s.value) {
                step_sensitivity = Some(record);
            }
            g
        } else if track_norms {
            let per_example = numcore::per_example_grads(spec, &w, &batch)?;
            max_example_norm = per_example.iter().map(GradVector::norm).fold(max_example_norm, f64::max);
            numcore::loss_and_param_grad(spec, &w, &batch)?.1
        } else {
            numcore::loss_and_param_grad(spec, &w, &batch)?.1
        };
        w.add_scaled(g.values(), -cfg.local_lr);
        acc.add_scaled(g.values(), 1.0);
    }

    let mut sensitivity = step_sensitivity;
    let shared = match defense {
        None => None,
        Some(d) => match d.policy.kind {
            NoiseKind::None => None,
            NoiseKind::Compression { ratio } => Some(privacy::compress(&acc, ratio)?),
            NoiseKind::Gaussian { variance } => Some(privacy::add_gaussian(&acc, variance, rng)?),
            NoiseKind::FixedDp | NoiseKind::DynamicDp if !per_example_site => {
                let record = if d.policy.kind == NoiseKind::DynamicDp {
                    SensitivityRecord {
                        value: max_example_norm.min(d.policy.clip),
                        source: SensitivitySource::L2Max,
                        round: None,
                        client: None,
                    }
                } else {
                    SensitivityRecord::fixed(d.policy.clip)
                };
                sensitivity = Some(record);
                Some(privacy::dp_perturb_update(&acc, d.policy, &record, d.sigma_t, rng))
            }
            NoiseKind::FixedDp | NoiseKind::DynamicDp => None,
        },
    };
    if let Some(g) = shared {
        acc = g;
        w = global.params.clone();
        w.add_scaled(acc.values(), -cfg.local_lr);
    }
    crate::error::ensure_finite(acc.values(), "client update")?;

    let update_norm = acc.norm();
    let payload = match cfg.payload {
        PayloadKind::Gradient => Payload::Gradient(acc),
        PayloadKind::Weights => Payload::Weights(w),
        PayloadKind::Delta => {
            let delta: Vec<f64> = w.values().iter().zip(global.params.values()).map(|(a, b)| a - b).collect();
            Payload::Delta(ParamVector::from_values(w.layout().clone(), delta)?)
        }
    };
    Ok(ClientUpdate {
        client,
        samples: data.len(),
        payload,
        update_norm,
        poisoned: poisoned.is_some(),
        sensitivity: sensitivity.map(|s| s.at(global.round, client)),
    })
}
