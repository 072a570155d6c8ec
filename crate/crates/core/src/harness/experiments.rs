use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rayon::prelude::*;

use crate::data::{self, load_idx, partition, synth_blobs, Dataset, PartitionPlan};
use crate::error::{Error, Result};
use crate::federation::{self, local_train, GlobalState, LocalDefense, PayloadKind, RunLog, Scenario, TrainingConfig};
use crate::forensics::{self, DetectionReport, GradientTrace};
use crate::harness::config::{Config, DatasetConfig, ExperimentConfig};
use crate::harness::fmt_sig;
use crate::harness::results::{read_results, write_results, Metric, ResultRow, ResultSet};
use crate::leakage::{self, ReconResult, TargetGradient};
use crate::numcore::{self, ModelSpec, ParamVector, Tensor};
use crate::poisoning::poison_plan;
use crate::privacy::{self, calibrate_dynamic_sigma0, noise_scale_at, NoiseKind, NoisePolicy};
use crate::rng::{self, tag};

/// Data, model and client shards of an experiment.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub train: Dataset,
    pub test: Dataset,
    pub spec: ModelSpec,
    pub shards: Vec<Dataset>,
}

pub fn build_workspace(exp: &ExperimentConfig) -> Result<Workspace> {
    let (train, test) = match &exp.dataset {
        DatasetConfig::Synth { classes, dims, per_class, test_per_class, separation } => {
            let all = synth_blobs(*classes, dims, per_class + test_per_class, *separation, exp.seed)?;
            all.split_holdout(*test_per_class)?
        }
        DatasetConfig::Idx { train_images, train_labels, test_images, test_labels } => {
            let train = load_idx(train_images, train_labels)?;
            let test = load_idx(test_images, test_labels)?;
            let classes = train.classes().max(test.classes());
            (
                Dataset::new(train.images().to_vec(), train.labels().to_vec(), classes)?,
                Dataset::new(test.images().to_vec(), test.labels().to_vec(), classes)?,
            )
        }
    };
    let shape = train.image_shape().ok_or_else(|| Error::config("training set is empty"))?.to_vec();
    let spec = ModelSpec::new(shape, exp.hidden.clone(), train.classes(), exp.activation)?;
    let plan = PartitionPlan::uniform(exp.training.clients, exp.samples_per_client, exp.classes_per_client, exp.seed);
    let shards = partition(&train, &plan)?;
    Ok(Workspace { train, test, spec, shards })
}

/// l2-max sensitivity of the first batch of the first shard at the initial parameters.
pub fn probe_sensitivity(exp: &ExperimentConfig, ws: &Workspace, clip: f64) -> Result<f64> {
    let params = initial_params(exp, ws);
    let shard = &ws.shards[0];
    let take = exp.training.batch_size.min(shard.len());
    let batch: Vec<(Tensor, usize)> = (0..take).map(|i| (shard.images()[i].clone(), shard.labels()[i])).collect();
    let grads = numcore::per_example_grads(&ws.spec, &params, &batch)?;
    let clipped: Vec<_> = grads.iter().map(|g| privacy::clip(g, clip)).collect();
    Ok(privacy::l2max_sensitivity(&clipped, clip)?.value)
}

pub fn initial_params(exp: &ExperimentConfig, ws: &Workspace) -> ParamVector {
    ws.spec.init_params(&mut rng::stream(exp.seed, &[tag::INIT, 0]))
}

/// The noise policy with an automatically calibrated initial scale filled in.
pub fn resolve_policy(exp: &ExperimentConfig, ws: &Workspace) -> Result<NoisePolicy> {
    let mut policy = exp.policy.clone();
    if let (Some(sigma_fixed), NoiseKind::DynamicDp) = (exp.sigma_auto, policy.kind) {
        let s1 = probe_sensitivity(exp, ws, policy.clip)?;
        if !(s1 > 0.0) {
            return Err(Error::Degenerate("zero first-round sensitivity".into()));
        }
        policy.sigma_0 = calibrate_dynamic_sigma0(policy.clip, sigma_fixed, s1).max(policy.sigma_final);
    }
    policy.validate()?;
    Ok(policy)
}

pub fn scenario_for(exp: &ExperimentConfig, ws: &Workspace, record_updates: bool) -> Result<Scenario> {
    let poison = match &exp.poison {
        Some(spec) => Some(poison_plan(spec, exp.training.clients, exp.training.rounds, exp.seed, Some(&ws.train))?),
        None => None,
    };
    Ok(Scenario {
        policy: resolve_policy(exp, ws)?,
        poison,
        removal: exp.forensics.removal.then(|| exp.forensics.detection.clone()),
        victim_class: exp.forensics.class,
        record_updates,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub log: RunLog,
    pub results: ResultSet,
    pub malicious: Vec<usize>,
}

pub fn run_log_results(scenario: &str, log: &RunLog) -> Result<ResultSet> {
    let mut rows = ResultSet::new();
    for r in &log.rounds {
        rows.push(scenario, r.round, Metric::Accuracy, r.eval.accuracy)?;
        if let Some(v) = r.eval.victim_f1 {
            rows.push(scenario, r.round, Metric::VictimF1, v)?;
            rows.push(scenario, r.round, Metric::RestF1, r.eval.rest_f1)?;
        }
        if let Some(v) = r.mean_update_norm {
            rows.push(scenario, r.round, Metric::UpdateNorm, v)?;
        }
        if let Some(v) = r.sigma_t {
            rows.push(scenario, r.round, Metric::SigmaT, v)?;
        }
        if let Some(v) = r.epsilon {
            rows.push(scenario, r.round, Metric::Epsilon, v)?;
        }
    }
    Ok(rows)
}

/// Federated training under the configured defense, poisoning and removal.
pub fn run_train(exp: &ExperimentConfig) -> Result<TrainOutput> {
    let ws = build_workspace(exp)?;
    run_train_in(exp, &ws, exp.poison.is_some())
}

pub fn run_train_in(exp: &ExperimentConfig, ws: &Workspace, record_updates: bool) -> Result<TrainOutput> {
    let scenario = scenario_for(exp, ws, record_updates)?;
    let log = federation::run_federation(&exp.training, &ws.spec, &ws.shards, &ws.test, &scenario)?;
    let results = run_log_results(&exp.scenario, &log)?;
    let malicious = scenario.poison.map(|p| p.malicious).unwrap_or_default();
    Ok(TrainOutput { log, results, malicious })
}

/// A poisoned run; errors when no poisoning is configured.
pub fn run_poison(exp: &ExperimentConfig) -> Result<TrainOutput> {
    if exp.poison.is_none() {
        return Err(Error::config("poison.kind is none"));
    }
    run_train(exp)
}

#[derive(Debug, Clone)]
pub struct DetectOutput {
    pub trace: GradientTrace,
    pub report: DetectionReport,
}

/// Forensics over a recorded trace, or over a fresh poisoned run when no trace file is given.
pub fn run_detect(exp: &ExperimentConfig) -> Result<DetectOutput> {
    let (trace, malicious) = match &exp.forensics.trace {
        Some(path) => (GradientTrace::read_csv(fs::File::open(path)?)?, None),
        None => {
            let class = exp.forensics.class.ok_or_else(|| Error::config("forensics.class or poisoning is required"))?;
            let mut plain = exp.clone();
            plain.forensics.removal = false;
            let out = run_train_in(&plain, &build_workspace(&plain)?, true)?;
            (GradientTrace::from_rounds(&out.log.updates, class)?, Some(out.malicious))
        }
    };
    let mut report = forensics::flag_malicious(&trace, &exp.forensics.detection)?;
    let truth = malicious.or_else(|| {
        let known: Vec<_> = trace.records().iter().filter_map(|r| r.malicious.map(|m| (r.client, m))).collect();
        (!known.is_empty()).then(|| {
            let mut ids: Vec<usize> = known.iter().filter(|(_, m)| *m).map(|(c, _)| *c).collect();
            ids.sort_unstable();
            ids.dedup();
            ids
        })
    });
    if let Some(ids) = truth {
        report.evaluate(&ids);
    }
    Ok(DetectOutput { trace, report })
}

#[derive(Debug, Clone)]
pub struct LeakTrial {
    pub target: usize,
    pub labels: Vec<usize>,
    pub truth: Vec<Tensor>,
    pub recon: ReconResult,
}

#[derive(Debug, Clone)]
pub struct LeakOutput {
    pub trials: Vec<LeakTrial>,
    pub results: ResultSet,
}

impl LeakOutput {
    pub fn final_mses(&self) -> Vec<f64> {
        self.trials.iter().map(|t| t.recon.mse.unwrap_or(f64::NAN)).collect()
    }
}

/// Global parameters at round `exp.attack.round` of an undefended run.
pub fn attacked_state(exp: &ExperimentConfig, ws: &Workspace) -> Result<ParamVector> {
    if exp.attack.round == 0 {
        return Ok(initial_params(exp, ws));
    }
    let cfg = TrainingConfig { rounds: exp.attack.round, ..exp.training.clone() };
    let log = federation::run_federation(&cfg, &ws.spec, &ws.shards, &ws.test, &Scenario::default())?;
    Ok(log.final_params().clone())
}

/// Shared gradient of a victim holding `victims`, as the server would receive it.
pub fn victim_gradient(
    exp: &ExperimentConfig,
    ws: &Workspace,
    params: &ParamVector,
    policy: &NoisePolicy,
    victims: &Dataset,
    target: usize,
) -> Result<TargetGradient> {
    let local_iters = match exp.attack.surface {
        leakage::AttackSurface::ClientSgd => 1,
        leakage::AttackSurface::ServerAggregation => exp.attack.local_iters,
    };
    let cfg = TrainingConfig {
        local_iters,
        batch_size: victims.len(),
        payload: PayloadKind::Gradient,
        ..exp.training.clone()
    };
    let horizon = exp.training.rounds.saturating_sub(1);
    let sigma_t = noise_scale_at(policy, exp.attack.round, horizon);
    let defense = (policy.kind != NoiseKind::None).then_some(LocalDefense { policy, sigma_t });
    let global = GlobalState { round: exp.attack.round, params: params.clone(), lr: exp.training.global_lr };
    let mut r = rng::stream(exp.seed, &[tag::ATTACK, 1 << 32, target as u64]);
    let update = local_train(&ws.spec, &global, target, victims, &cfg, &mut r, defense, None)?;
    let grad = match update.payload {
        federation::Payload::Gradient(g) => g,
        _ => unreachable!("gradient payload requested"),
    };
    Ok(match exp.attack.surface {
        leakage::AttackSurface::ClientSgd => TargetGradient::client_sgd(grad),
        leakage::AttackSurface::ServerAggregation => TargetGradient::server_aggregation(grad, target, exp.attack.round),
    })
}

/// Victim examples of trial `target`: distinct training samples.
pub fn victim_examples(exp: &ExperimentConfig, ws: &Workspace, target: usize) -> Result<Dataset> {
    let b = exp.attack.config.batch;
    if ws.train.len() < b {
        return Err(Error::config("training set smaller than the attack batch"));
    }
    let mut r = rng::stream(exp.seed, &[tag::ATTACK, 2 << 32, target as u64]);
    let mut idx = sample(&mut r, ws.train.len(), b).into_vec();
    idx.sort_unstable();
    Ok(ws.train.subset(&idx))
}

/// Runs `attack.targets` independent reconstruction trials.
pub fn run_leak(exp: &ExperimentConfig) -> Result<LeakOutput> {
    let ws = build_workspace(exp)?;
    run_leak_in(exp, &ws)
}

pub fn run_leak_in(exp: &ExperimentConfig, ws: &Workspace) -> Result<LeakOutput> {
    let params = attacked_state(exp, ws)?;
    let policy = resolve_policy(exp, ws)?;
    let trials: Vec<LeakTrial> = (0..exp.attack.targets)
        .into_par_iter()
        .map(|target| {
            let victims = victim_examples(exp, ws, target)?;
            let tg = victim_gradient(exp, ws, &params, &policy, &victims, target)?;
            let exemplar =
                ws.test.labels().iter().position(|&y| y == victims.labels()[0]).map(|i| ws.test.images()[i].clone());
            let mut cfg = exp.attack.config.clone();
            cfg.seed = rng::derive_seed(exp.seed, &[tag::ATTACK, target as u64]);
            let recon = leakage::reconstruct(&ws.spec, &params, &tg, &cfg, Some(victims.images()), exemplar.as_ref())?;
            Ok(LeakTrial { target, labels: victims.labels().to_vec(), truth: victims.images().to_vec(), recon })
        })
        .collect::<Result<_>>()?;
    let mut results = ResultSet::new();
    for t in &trials {
        let id = format!("{}/target={}", exp.scenario, t.target);
        for (i, (m, s)) in t.recon.mse_trace.iter().zip(&t.recon.ssim_trace).enumerate() {
            results.push(&id, i, Metric::AttackMse, *m)?;
            results.push(&id, i, Metric::AttackSsim, *s)?;
        }
    }
    Ok(LeakOutput { trials, results })
}

/// Scenario id of one sweep point, e.g. `alpha=0.6`.
pub fn sweep_scenario_id(key: &str, value: &str) -> String {
    format!("{}={value}", key.rsplit('.').next().unwrap_or(key))
}

/// Runs the configured command once per sweep value, writing each point to its own subdirectory.
pub fn run_sweep(cfg: &Config, out_dir: &Path) -> Result<Vec<(String, ResultSet)>> {
    let exp = ExperimentConfig::from_config(cfg)?;
    let sweep = exp.sweep.clone().ok_or_else(|| Error::config("sweep.key is not set"))?;
    let points: Vec<(String, Config)> = sweep
        .values
        .iter()
        .map(|v| {
            let id = sweep_scenario_id(&sweep.key, v);
            let mut point = cfg.clone();
            point.set(&sweep.key, v)?;
            point.set("sweep.key", "")?;
            point.set("scenario", &id)?;
            Ok((id, point))
        })
        .collect::<Result<_>>()?;
    points
        .into_par_iter()
        .map(|(id, point)| {
            let exp = ExperimentConfig::from_config(&point)?;
            let dir = out_dir.join(&id);
            fs::create_dir_all(&dir)?;
            let results = match sweep.command.as_str() {
                "leak" => write_leak_outputs(&dir, &run_leak(&exp)?)?,
                _ => write_train_outputs(&dir, &run_train(&exp)?)?,
            };
            Ok((id, results))
        })
        .collect()
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path)?))
}

/// Writes `results.csv`, plus `ledger.csv` for DP runs and `trace.csv` for recorded poisoned runs.
pub fn write_train_outputs(dir: &Path, out: &TrainOutput) -> Result<ResultSet> {
    fs::create_dir_all(dir)?;
    write_results(out.results.rows(), create(&dir.join("results.csv"))?)?;
    if let Some(ledger) = &out.log.ledger {
        ledger.write_csv(create(&dir.join("ledger.csv"))?)?;
    }
    if let Some(victim) = out.log.rounds.first().and_then(|r| r.eval.victim_class) {
        if !out.log.updates.is_empty() {
            GradientTrace::from_rounds(&out.log.updates, victim)?.write_csv(create(&dir.join("trace.csv"))?)?;
        }
    }
    Ok(out.results.clone())
}

/// Writes `results.csv`, reconstructions and ground truth as IDX, and a per-pixel CSV.
pub fn write_leak_outputs(dir: &Path, out: &LeakOutput) -> Result<ResultSet> {
    fs::create_dir_all(dir)?;
    write_results(out.results.rows(), create(&dir.join("results.csv"))?)?;
    let recon: Vec<Tensor> = out.trials.iter().flat_map(|t| t.recon.x_rec.clone()).collect();
    let truth: Vec<Tensor> = out.trials.iter().flat_map(|t| t.truth.clone()).collect();
    if !recon.is_empty() {
        fs::write(dir.join("recon-images.idx"), data::write_idx_images(&recon)?)?;
        fs::write(dir.join("truth-images.idx"), data::write_idx_images(&truth)?)?;
        let labels: Vec<usize> = out.trials.iter().flat_map(|t| t.recon.y_rec.clone()).collect();
        fs::write(dir.join("recon-labels.idx"), data::write_idx_labels(&labels)?)?;
    }
    let mut w = csv::Writer::from_writer(create(&dir.join("recon-pixels.csv"))?);
    w.write_record(["target", "slot", "pixel", "recon", "truth"])?;
    for t in &out.trials {
        for (slot, x) in t.recon.x_rec.iter().enumerate() {
            let truth = t.truth.get(slot);
            for (p, v) in x.values().iter().enumerate() {
                let tv = truth.map_or(String::new(), |g| fmt_sig(g.values()[p]));
                w.write_record([t.target.to_string(), slot.to_string(), p.to_string(), fmt_sig(*v), tv])?;
            }
        }
    }
    w.flush()?;
    Ok(out.results.clone())
}

/// Writes `detection.csv` (per-client scores), `scatter.csv` and `summary.csv`.
pub fn write_detect_outputs(dir: &Path, out: &DetectOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    out.report.write_scatter(create(&dir.join("scatter.csv"))?)?;
    let mut w = csv::Writer::from_writer(create(&dir.join("detection.csv"))?);
    w.write_record(["client_id", "temporal_score", "flagged"])?;
    for (c, s) in &out.report.scores {
        w.write_record([c.to_string(), fmt_sig(*s), u8::from(out.report.flagged.contains(c)).to_string()])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_writer(create(&dir.join("summary.csv"))?);
    w.write_record(["key", "value"])?;
    let r = &out.report;
    let mut rows = vec![
        ("records", out.trace.len().to_string()),
        ("flagged", r.flagged.len().to_string()),
        ("silhouette", fmt_sig(r.silhouette)),
        ("explained_1", fmt_sig(r.explained[0])),
        ("explained_2", fmt_sig(r.explained[1])),
        ("suspect_cluster", r.suspect.map_or(String::new(), |s| s.to_string())),
    ];
    if let Some(s) = r.summary {
        rows.push(("precision", fmt_sig(s.precision)));
        rows.push(("recall", fmt_sig(s.recall)));
        rows.push(("false_positive_rate", fmt_sig(s.false_positive_rate)));
    }
    for (k, v) in rows {
        w.write_record([k.to_string(), v])?;
    }
    w.flush()?;
    Ok(())
}

/// Folds result files into `summary.csv` (final/min/max/mean per scenario and
/// metric) and one `line-<metric>.csv` plot-data file per metric.
pub fn run_report(inputs: &[PathBuf], out_dir: &Path) -> Result<()> {
    let mut rows: Vec<ResultRow> = Vec::new();
    for path in inputs {
        rows.extend(read_results(fs::File::open(path)?)?);
    }
    fs::create_dir_all(out_dir)?;
    let mut groups: BTreeMap<(String, Metric), Vec<(usize, f64)>> = BTreeMap::new();
    for r in &rows {
        groups.entry((r.scenario.clone(), r.metric)).or_default().push((r.round, r.value));
    }
    let mut w = csv::Writer::from_writer(create(&out_dir.join("summary.csv"))?);
    w.write_record(["scenario", "metric", "final", "min", "max", "mean"])?;
    for ((scenario, metric), points) in &groups {
        let last = points.iter().max_by_key(|(r, _)| *r).map_or(f64::NAN, |p| p.1);
        let min = points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let max = points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let mean = points.iter().map(|p| p.1).sum::<f64>() / points.len() as f64;
        w.write_record([
            scenario.clone(),
            metric.to_string(),
            fmt_sig(last),
            fmt_sig(min),
            fmt_sig(max),
            fmt_sig(mean),
        ])?;
    }
    w.flush()?;
    for metric in Metric::ALL {
        let lines: Vec<&ResultRow> = rows.iter().filter(|r| r.metric == metric).collect();
        if lines.is_empty() {
            continue;
        }
        let mut w = csv::Writer::from_writer(create(&out_dir.join(format!("line-{metric}.csv")))?);
        w.write_record(["scenario", "round", "value"])?;
        for r in lines {
            w.write_record([r.scenario.clone(), r.round.to_string(), fmt_sig(r.value)])?;
        }
        w.flush()?;
    }
    Ok(())
}
