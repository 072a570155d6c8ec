use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::federation::{PayloadKind, TrainingConfig};
use crate::forensics::DetectionConfig;
use crate::leakage::{AttackConfig, AttackOptimizer, AttackSurface, InitStrategy};
use crate::numcore::Activation;
use crate::poisoning::{PoisonKind, PoisonSpec, RoundWindow, Trigger};
use crate::privacy::{Decay, InjectionSite, NoisePolicy};

/// Every accepted key with its default (`None` marks a mandatory key).
pub const KNOWN_KEYS: &[(&str, Option<&str>)] = &[
    ("seed", None),
    ("scenario", Some("default")),
    ("output.dir", Some("")),
    ("dataset.kind", Some("synth")),
    ("dataset.classes", Some("10")),
    ("dataset.dims", Some("8x8")),
    ("dataset.per_class", Some("60")),
    ("dataset.test_per_class", Some("20")),
    ("dataset.separation", Some("1")),
    ("dataset.train_images", Some("")),
    ("dataset.train_labels", Some("")),
    ("dataset.test_images", Some("")),
    ("dataset.test_labels", Some("")),
    ("partition.samples_per_client", Some("20")),
    ("partition.classes_per_client", Some("2")),
    ("model.hidden", Some("32")),
    ("model.activation", Some("sigmoid")),
    ("train.clients", Some("20")),
    ("train.per_round", Some("5")),
    ("train.rounds", Some("20")),
    ("train.local_iters", Some("1")),
    ("train.batch_size", Some("10")),
    ("train.local_lr", Some("0.5")),
    ("train.global_lr", Some("1")),
    ("train.payload", Some("gradient")),
    ("train.parallel", Some("true")),
    ("privacy.kind", Some("none")),
    ("privacy.ratio", Some("0")),
    ("privacy.variance", Some("0")),
    ("privacy.clip", Some("4")),
    ("privacy.sigma", Some("6")),
    ("privacy.sigma_0", Some("auto")),
    ("privacy.sigma_final", Some("3")),
    ("privacy.decay", Some("exponential")),
    ("privacy.stages", Some("4")),
    ("privacy.period", Some("0")),
    ("privacy.site", Some("per_example")),
    ("poison.kind", Some("none")),
    ("poison.source", Some("1")),
    ("poison.target", Some("9")),
    ("poison.lambda", Some("0.1")),
    ("poison.alpha", Some("0.9")),
    ("poison.window_start", Some("0")),
    ("poison.window_end", Some("")),
    ("poison.beta", Some("0.3")),
    ("poison.fraction", Some("0.5")),
    ("poison.trigger_size", Some("2")),
    ("poison.trigger_value", Some("1")),
    ("poison.trigger_row", Some("0")),
    ("poison.trigger_col", Some("0")),
    ("attack.init", Some("random")),
    ("attack.max_iters", Some("1000")),
    ("attack.threshold", Some("1e-10")),
    ("attack.lr", Some("1")),
    ("attack.optimizer", Some("gd")),
    ("attack.batch", Some("1")),
    ("attack.surface", Some("client_sgd")),
    ("attack.targets", Some("10")),
    ("attack.round", Some("0")),
    ("attack.local_iters", Some("1")),
    ("attack.success_mse", Some("0.4")),
    ("forensics.removal", Some("false")),
    ("forensics.class", Some("")),
    ("forensics.window", Some("10")),
    ("forensics.threshold", Some("0.5")),
    ("forensics.q", Some("0.1")),
    ("forensics.norm_rule", Some("true")),
    ("forensics.min_silhouette", Some("0.5")),
    ("forensics.trace", Some("")),
    ("sweep.key", Some("")),
    ("sweep.values", Some("")),
    ("sweep.command", Some("train")),
];

fn default_of(key: &str) -> Option<Option<&'static str>> {
    KNOWN_KEYS.iter().find(|(k, _)| *k == key).map(|(_, d)| *d)
}

/// Flat `key = value` configuration with dotted keys and `#` comments.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    entries: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) =
                line.split_once('=').ok_or_else(|| Error::config(format!("line {}: expected `key = value`", n + 1)))?;
            let key = key.trim();
            if cfg.entries.contains_key(key) {
                return Err(Error::config(format!("line {}: `{key}` set twice", n + 1)));
            }
            cfg.set(key, value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if default_of(key).is_none() {
            return Err(Error::config(format!("unknown key `{key}`")));
        }
        self.entries.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override `{assignment}` is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.entries
    }

    /// Serialized form accepted by [`Config::parse`].
    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        match self.entries.get(key) {
            Some(v) => Ok(v),
            None => match default_of(key) {
                Some(Some(d)) => Ok(d),
                Some(None) => Err(Error::config(format!("missing mandatory key `{key}`"))),
                None => Err(Error::config(format!("unknown key `{key}`"))),
            },
        }
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key)?;
        v.parse().map_err(|_| Error::config(format!("invalid value `{v}` for `{key}`")))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.parsed(key)
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        let v: f64 = self.parsed(key)?;
        if !v.is_finite() {
            return Err(Error::config(format!("`{key}` must be finite")));
        }
        Ok(v)
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        self.parsed(key)
    }

    pub fn opt_usize(&self, key: &str) -> Result<Option<usize>> {
        match self.get(key)? {
            "" => Ok(None),
            _ => self.usize(key).map(Some),
        }
    }

    pub fn list(&self, key: &str) -> Result<Vec<String>> {
        Ok(self.get(key)?.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetConfig {
    Synth { classes: usize, dims: Vec<usize>, per_class: usize, test_per_class: usize, separation: f64 },
    Idx { train_images: PathBuf, train_labels: PathBuf, test_images: PathBuf, test_labels: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackSetup {
    pub config: AttackConfig,
    pub surface: AttackSurface,
    pub targets: usize,
    /// Global round whose state is attacked.
    pub round: usize,
    /// Local iterations folded into the victim's shared gradient.
    pub local_iters: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForensicsSetup {
    pub detection: DetectionConfig,
    pub removal: bool,
    pub class: Option<usize>,
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub key: String,
    pub values: Vec<String>,
    pub command: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub scenario: String,
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub samples_per_client: usize,
    pub classes_per_client: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub training: TrainingConfig,
    pub policy: NoisePolicy,
    /// Calibrate the dynamic initial scale against this fixed scale.
    pub sigma_auto: Option<f64>,
    pub poison: Option<PoisonSpec>,
    pub attack: AttackSetup,
    pub forensics: ForensicsSetup,
    pub sweep: Option<SweepSpec>,
}

impl ExperimentConfig {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let seed: u64 = cfg.parsed("seed")?;
        let dataset = match cfg.get("dataset.kind")? {
            "synth" => DatasetConfig::Synth {
                classes: cfg.usize("dataset.classes")?,
                dims: parse_dims(cfg.get("dataset.dims")?)?,
                per_class: cfg.usize("dataset.per_class")?,
                test_per_class: cfg.usize("dataset.test_per_class")?,
                separation: cfg.f64("dataset.separation")?,
            },
            "idx" => {
                let path = |k: &str| -> Result<PathBuf> {
                    match cfg.get(k)? {
                        "" => Err(Error::config(format!("`{k}` is required for IDX datasets"))),
                        p => Ok(PathBuf::from(p)),
                    }
                };
                DatasetConfig::Idx {
                    train_images: path("dataset.train_images")?,
                    train_labels: path("dataset.train_labels")?,
                    test_images: path("dataset.test_images")?,
                    test_labels: path("dataset.test_labels")?,
                }
            }
            other => return Err(Error::config(format!("unknown dataset kind `{other}`"))),
        };
        let hidden = cfg
            .list("model.hidden")?
            .iter()
            .map(|w| w.parse::<usize>().map_err(|_| Error::config(format!("invalid hidden width `{w}`"))))
            .collect::<Result<Vec<_>>>()?;

        let rounds = cfg.usize("train.rounds")?;
        let training = TrainingConfig {
            clients: cfg.usize("train.clients")?,
            per_round: cfg.usize("train.per_round")?,
            rounds,
            local_iters: cfg.usize("train.local_iters")?,
            batch_size: cfg.usize("train.batch_size")?,
            local_lr: cfg.f64("train.local_lr")?,
            global_lr: cfg.f64("train.global_lr")?,
            payload: cfg.get("train.payload")?.parse::<PayloadKind>()?,
            seed,
            parallel: cfg.bool("train.parallel")?,
        };
        training.validate()?;

        let (policy, sigma_auto) = parse_policy(cfg, seed, rounds)?;
        policy.validate()?;
        let poison = parse_poison(cfg, rounds)?;
        let optimizer = match cfg.get("attack.optimizer")? {
            "gd" => AttackOptimizer::GradientDescent,
            "adam" => AttackOptimizer::adam(),
            other => return Err(Error::config(format!("unknown attack optimizer `{other}`"))),
        };
        let attack_cfg = AttackConfig {
            init: cfg.get("attack.init")?.parse::<InitStrategy>()?,
            max_iters: cfg.usize("attack.max_iters")?,
            loss_threshold: cfg.f64("attack.threshold")?,
            lr: cfg.f64("attack.lr")?,
            optimizer,
            seed,
            batch: cfg.usize("attack.batch")?,
            success_mse: cfg.f64("attack.success_mse")?,
        };
        attack_cfg.validate()?;
        let surface = match cfg.get("attack.surface")? {
            "client_sgd" => AttackSurface::ClientSgd,
            "server_aggregation" => AttackSurface::ServerAggregation,
            other => return Err(Error::config(format!("unknown attack surface `{other}`"))),
        };
        let attack = AttackSetup {
            config: attack_cfg,
            surface,
            targets: cfg.usize("attack.targets")?,
            round: cfg.usize("attack.round")?,
            local_iters: cfg.usize("attack.local_iters")?.max(1),
        };

        let min_silhouette = cfg.f64("forensics.min_silhouette")?;
        let q = cfg.f64("forensics.q")?;
        if !(0.0..0.5).contains(&q) {
            return Err(Error::config(format!("density band q = {q} outside [0, 0.5)")));
        }
        let forensics = ForensicsSetup {
            detection: DetectionConfig {
                window: cfg.usize("forensics.window")?,
                threshold: cfg.f64("forensics.threshold")?,
                q,
                norm_rule: cfg.bool("forensics.norm_rule")?,
                min_silhouette: (min_silhouette > 0.0).then_some(min_silhouette),
                seed,
            },
            removal: cfg.bool("forensics.removal")?,
            class: cfg.opt_usize("forensics.class")?.or(poison.as_ref().map(|p| p.source)),
            trace: match cfg.get("forensics.trace")? {
                "" => None,
                p => Some(PathBuf::from(p)),
            },
        };
        let sweep = match cfg.get("sweep.key")? {
            "" => None,
            key => {
                if default_of(key).is_none() || key.starts_with("sweep.") {
                    return Err(Error::config(format!("cannot sweep over `{key}`")));
                }
                let values = cfg.list("sweep.values")?;
                if values.is_empty() {
                    return Err(Error::config("sweep.values is empty"));
                }
                let command = cfg.get("sweep.command")?.to_string();
                if !["train", "leak", "poison"].contains(&command.as_str()) {
                    return Err(Error::config(format!("cannot sweep command `{command}`")));
                }
                Some(SweepSpec { key: key.to_string(), values, command })
            }
        };
        Ok(Self {
            seed,
            scenario: cfg.get("scenario")?.to_string(),
            output_dir: match cfg.get("output.dir")? {
                "" => None,
                p => Some(PathBuf::from(p)),
            },
            dataset,
            samples_per_client: cfg.usize("partition.samples_per_client")?,
            classes_per_client: cfg.usize("partition.classes_per_client")?,
            hidden,
            activation: cfg.get("model.activation")?.parse()?,
            training,
            policy,
            sigma_auto,
            poison,
            attack,
            forensics,
            sweep,
        })
    }
}

fn parse_dims(s: &str) -> Result<Vec<usize>> {
    let dims: Vec<usize> = s
        .split('x')
        .map(|d| d.trim().parse::<usize>().map_err(|_| Error::config(format!("invalid dims `{s}`"))))
        .collect::<Result<_>>()?;
    if dims.is_empty() || dims.contains(&0) {
        return Err(Error::config(format!("invalid dims `{s}`")));
    }
    Ok(dims)
}

fn parse_policy(cfg: &Config, seed: u64, rounds: usize) -> Result<(NoisePolicy, Option<f64>)> {
    let site = match cfg.get("privacy.site")? {
        "per_example" => InjectionSite::PerExample,
        "per_client_update" => InjectionSite::PerClientUpdate,
        other => return Err(Error::config(format!("unknown injection site `{other}`"))),
    };
    let clip = cfg.f64("privacy.clip")?;
    let sigma = cfg.f64("privacy.sigma")?;
    let mut auto = None;
    let policy = match cfg.get("privacy.kind")? {
        "none" => NoisePolicy::none(),
        "compression" => NoisePolicy::compression(cfg.f64("privacy.ratio")?),
        "gaussian" => NoisePolicy::gaussian(cfg.f64("privacy.variance")?),
        "fixed_dp" => NoisePolicy { site, ..NoisePolicy::fixed_dp(clip, sigma) },
        "dynamic_dp" => {
            let decay = match cfg.get("privacy.decay")? {
                "constant" => Decay::Constant,
                "linear" => Decay::Linear,
                "exponential" => Decay::Exponential,
                "staircase" => Decay::Staircase { stages: cfg.usize("privacy.stages")? },
                "cyclic" => {
                    let period = match cfg.usize("privacy.period")? {
                        0 => (rounds / 5).max(1),
                        p => p,
                    };
                    Decay::Cyclic { period }
                }
                other => return Err(Error::config(format!("unknown decay `{other}`"))),
            };
            let sigma_0 = match cfg.get("privacy.sigma_0")? {
                "auto" => {
                    auto = Some(sigma);
                    sigma
                }
                _ => cfg.f64("privacy.sigma_0")?,
            };
            NoisePolicy { site, ..NoisePolicy::dynamic_dp(clip, sigma_0, cfg.f64("privacy.sigma_final")?, decay) }
        }
        other => return Err(Error::config(format!("unknown privacy kind `{other}`"))),
    };
    Ok((NoisePolicy { seed, ..policy }, auto))
}

fn parse_poison(cfg: &Config, rounds: usize) -> Result<Option<PoisonSpec>> {
    let kind = match cfg.get("poison.kind")? {
        "none" => return Ok(None),
        k => k.parse::<PoisonKind>()?,
    };
    let window =
        RoundWindow::new(cfg.usize("poison.window_start")?, cfg.opt_usize("poison.window_end")?.unwrap_or(rounds));
    let trigger = (kind == PoisonKind::Backdoor).then(|| -> Result<Trigger> {
        Ok(Trigger::square(
            cfg.usize("poison.trigger_size")?,
            cfg.f64("poison.trigger_value")?,
            (cfg.usize("poison.trigger_row")?, cfg.usize("poison.trigger_col")?),
        ))
    });
    let spec = PoisonSpec {
        kind,
        source: cfg.usize("poison.source")?,
        target: cfg.usize("poison.target")?,
        trigger: trigger.transpose()?,
        beta: cfg.f64("poison.beta")?,
        fraction: cfg.f64("poison.fraction")?,
        lambda: cfg.f64("poison.lambda")?,
        alpha: cfg.f64("poison.alpha")?,
        window,
    };
    spec.validate(rounds)?;
    Ok(Some(spec))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_override() {
        let mut cfg = Config::parse("seed = 3\n# comment\ntrain.rounds = 7 # trailing\n").unwrap();
        assert_eq!(cfg.usize("train.rounds").unwrap(), 7);
        cfg.apply_override("train.rounds=9").unwrap();
        let exp = ExperimentConfig::from_config(&cfg).unwrap();
        assert_eq!(exp.training.rounds, 9);
        assert_eq!(exp.seed, 3);
    }

    #[test]
    fn unknown_key_is_config_error() {
        assert!(matches!(Config::parse("seed = 1\nbogus.key = 2"), Err(Error::Config(_))));
    }

    #[test]
    fn seed_is_mandatory() {
        let cfg = Config::parse("train.rounds = 2").unwrap();
        assert!(matches!(ExperimentConfig::from_config(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_value_rejected() {
        let cfg = Config::parse("seed = 1\ntrain.rounds = many").unwrap();
        assert!(matches!(ExperimentConfig::from_config(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn text_round_trip() {
        let cfg = Config::parse("seed = 1\nprivacy.kind = dynamic_dp\nsweep.values = 0.6, 0.7").unwrap();
        assert_eq!(Config::parse(&cfg.to_text()).unwrap(), cfg);
    }
}
