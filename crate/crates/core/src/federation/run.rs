use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::federation::{local_train, sample_clients, ClientUpdate, GlobalState, LocalDefense, TrainingConfig};
use crate::forensics::{self, DetectionConfig, GradientTrace};
use crate::metrics::{eval_model, EvalReport};
use crate::numcore::{ModelSpec, ParamVector};
use crate::poisoning::PoisonPlan;
use crate::privacy::{noise_scale_at, NoiseKind, NoisePolicy, PrivacyLedger, DEFAULT_DELTA};
use crate::rng::{self, tag};

/// Everything layered on top of plain federated training.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub policy: NoisePolicy,
    pub poison: Option<PoisonPlan>,
    /// Online detection with removal of flagged updates (needs `victim_class`).
    pub removal: Option<DetectionConfig>,
    pub victim_class: Option<usize>,
    /// Keep every client update in the log.
    pub record_updates: bool,
}

impl Default for Scenario {
    fn default() -> Self {
        Self { policy: NoisePolicy::none(), poison: None, removal: None, victim_class: None, record_updates: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundLog {
    /// Index of the global state evaluated (0 is the initial model).
    pub round: usize,
    pub selected: Vec<usize>,
    pub poisoned_selected: usize,
    pub mean_update_norm: Option<f64>,
    pub sigma_t: Option<f64>,
    /// Mean per-client noise standard deviation `sigma_t * S`.
    pub mean_zeta: Option<f64>,
    pub epsilon: Option<f64>,
    pub flagged: Vec<usize>,
    pub eval: EvalReport,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateSummary {
    /// Training round in which the update was produced.
    pub round: usize,
    pub client: usize,
    pub poisoned: bool,
    pub norm: f64,
}

#[derive(Debug, Clone)]
pub struct RunLog {
    pub states: Vec<GlobalState>,
    pub rounds: Vec<RoundLog>,
    pub summaries: Vec<UpdateSummary>,
    /// `(training round, updates sorted by client)` when recording is on.
    pub updates: Vec<(usize, Vec<ClientUpdate>)>,
    pub ledger: Option<PrivacyLedger>,
}

impl RunLog {
    pub fn final_params(&self) -> &ParamVector {
        &self.states.last().expect("initial state").params
    }

    pub fn final_eval(&self) -> &EvalReport {
        &self.rounds.last().expect("initial evaluation").eval
    }

    pub fn accuracy_curve(&self) -> Vec<f64> {
        self.rounds.iter().map(|r| r.eval.accuracy).collect()
    }

    /// Mean update norm per training round (`None` at the initial state).
    pub fn norm_curve(&self) -> Vec<f64> {
        self.rounds.iter().filter_map(|r| r.mean_update_norm).collect()
    }

    pub fn zeta_curve(&self) -> Vec<f64> {
        self.rounds.iter().filter_map(|r| r.mean_zeta).collect()
    }
}

/// Runs `cfg.rounds` rounds of federated training over `shards` (one per client).
pub fn run_federation(
    cfg: &TrainingConfig,
    spec: &ModelSpec,
    shards: &[Dataset],
    test: &Dataset,
    scenario: &Scenario,
) -> Result<RunLog> {
    cfg.validate()?;
    scenario.policy.validate()?;
    if shards.len() != cfg.clients {
        return Err(Error::config(format!("{} shards for {} clients", shards.len(), cfg.clients)));
    }
    if scenario.removal.is_some() && scenario.victim_class.is_none() {
        return Err(Error::config("outlier removal needs the victim class"));
    }
    let victim = scenario.victim_class;
    let params = spec.init_params(&mut rng::stream(cfg.seed, &[tag::INIT, 0]));
    let mut log = RunLog {
        rounds: vec![RoundLog {
            round: 0,
            selected: Vec::new(),
            poisoned_selected: 0,
            mean_update_norm: None,
            sigma_t: None,
            mean_zeta: None,
            epsilon: None,
            flagged: Vec::new(),
            eval: eval_model(spec, &params, test, victim)?,
        }],
        states: vec![GlobalState { round: 0, params, lr: cfg.global_lr }],
        summaries: Vec::new(),
        updates: Vec::new(),
        ledger: if scenario.policy.is_dp() { Some(PrivacyLedger::new(DEFAULT_DELTA)?) } else { None },
    };
    let horizon = cfg.rounds.saturating_sub(1);
    let mut trace = GradientTrace::new(victim);
    let (malicious, alpha): (&[usize], f64) = match &scenario.poison {
        Some(plan) => (&plan.malicious, plan.spec.alpha),
        None => (&[], 0.0),
    };

    for t in 0..cfg.rounds {
        let global = log.states.last().expect("state").clone();
        let in_window = scenario.poison.as_ref().is_some_and(|p| p.in_window(t));
        let mut sampler = rng::stream(cfg.seed, &[tag::SAMPLING, t as u64]);
        let mut selected = sample_clients(cfg.clients, cfg.per_round, malicious, alpha, in_window, &mut sampler)?;
        selected.sort_unstable();

        let sigma_t = match scenario.policy.kind {
            NoiseKind::FixedDp | NoiseKind::DynamicDp => Some(noise_scale_at(&scenario.policy, t, horizon)),
            _ => None,
        };
        let defense = match scenario.policy.kind {
            NoiseKind::None => None,
            _ => Some(LocalDefense { policy: &scenario.policy, sigma_t: sigma_t.unwrap_or(0.0) }),
        };
        let train_one = |&client: &usize| -> Result<ClientUpdate> {
            let mut r = rng::stream(cfg.seed, &[tag::LOCAL_TRAIN, client as u64, t as u64]);
            let hook = |s: &Dataset| match &scenario.poison {
                Some(plan) => plan.shard_for(s, client, t),
                None => Ok(None),
            };
            local_train(spec, &global, client, &shards[client], cfg, &mut r, defense, Some(&hook))
        };
        let updates: Vec<ClientUpdate> = if cfg.parallel {
            selected.par_iter().map(train_one).collect::<Result<_>>()?
        } else {
            selected.iter().map(train_one).collect::<Result<_>>()?
        };

        let mean_zeta = sigma_t.map(|s| {
            let total: f64 = updates.iter().map(|u| u.sensitivity.map_or(0.0, |r| r.value)).sum();
            s * total / updates.len() as f64
        });
        let mut epsilon = None;
        if let (Some(ledger), Some(s)) = (log.ledger.as_mut(), sigma_t) {
            let mean_s = mean_zeta.unwrap_or(0.0) / s;
            ledger.step_with(t + 1, s, mean_s)?;
            epsilon = Some(ledger.epsilon());
        }

        let flagged = match (&scenario.removal, victim) {
            (Some(det), Some(class)) => {
                trace.push_updates(t, &updates, class)?;
                let report = forensics::flag_malicious(&trace, det)?;
                report.flagged.into_iter().filter(|c| selected.binary_search(c).is_ok()).collect()
            }
            _ => Vec::new(),
        };
        let next = forensics::aggregate_with_removal(&global.params, cfg.global_lr, &updates, &flagged)?;
        crate::error::ensure_finite(next.values(), "global parameters")?;

        for u in &updates {
            log.summaries.push(UpdateSummary { round: t, client: u.client, poisoned: u.poisoned, norm: u.update_norm });
        }
        log.rounds.push(RoundLog {
            round: t + 1,
            poisoned_selected: updates.iter().filter(|u| u.poisoned).count(),
            mean_update_norm: Some(updates.iter().map(|u| u.update_norm).sum::<f64>() / updates.len() as f64),
            sigma_t,
            mean_zeta,
            epsilon,
            flagged,
            eval: eval_model(spec, &next, test, victim)?,
            selected,
        });
        log.states.push(GlobalState { round: t + 1, params: next, lr: cfg.global_lr });
        if scenario.record_updates {
            log.updates.push((t, updates));
        }
    }
    Ok(log)
}
