//! Targeted data poisoning: label flipping, trigger backdoors and
//! clean-label feature blending, plus the compromised-client schedule.

use rand::seq::index::sample;
use rand::Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numcore::{plane_of, Tensor};
use crate::rng::{self, tag};

/// Default share of a malicious shard rewritten by backdoor and clean-label attacks.
pub const DEFAULT_POISON_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoisonKind {
    DirtyLabel,
    Backdoor,
    CleanLabel,
}

impl std::str::FromStr for PoisonKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dirty_label" => Ok(PoisonKind::DirtyLabel),
            "backdoor" => Ok(PoisonKind::Backdoor),
            "clean_label" => Ok(PoisonKind::CleanLabel),
            other => Err(Error::config(format!("unknown poison kind `{other}`"))),
        }
    }
}

/// Patch written over the trailing image plane at `(row, col)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trigger {
    pub patch: Tensor,
    pub offset: (usize, usize),
}

impl Trigger {
    /// Square patch of constant `value`.
    pub fn square(side: usize, value: f64, offset: (usize, usize)) -> Self {
        Self { patch: Tensor::filled(&[side, side], value), offset }
    }
}

/// Half-open round window `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoundWindow {
    pub start: usize,
    pub end: usize,
}

impl RoundWindow {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    /// The first `len` rounds.
    pub fn first(len: usize) -> Self {
        Self::new(0, len)
    }

    /// The last `len` of `total` rounds.
    pub fn last(len: usize, total: usize) -> Self {
        Self::new(total.saturating_sub(len), total)
    }

    pub fn contains(&self, round: usize) -> bool {
        (self.start..self.end).contains(&round)
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoisonSpec {
    pub kind: PoisonKind,
    pub source: usize,
    pub target: usize,
    pub trigger: Option<Trigger>,
    /// Clean-label blend coefficient.
    pub beta: f64,
    /// Share of the shard rewritten by backdoor and clean-label attacks.
    pub fraction: f64,
    /// Compromised fraction of the client population.
    pub lambda: f64,
    /// Per-slot probability that a sampled update is malicious inside the window.
    pub alpha: f64,
    pub window: RoundWindow,
}

impl PoisonSpec {
    pub fn dirty_label(source: usize, target: usize, lambda: f64, alpha: f64, window: RoundWindow) -> Self {
        Self {
            kind: PoisonKind::DirtyLabel,
            source,
            target,
            trigger: None,
            beta: 0.0,
            fraction: DEFAULT_POISON_FRACTION,
            lambda,
            alpha,
            window,
        }
    }

    pub fn validate(&self, rounds: usize) -> Result<()> {
        if self.source == self.target {
            return Err(Error::config("source and target classes must differ"));
        }
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(Error::config(format!("compromised fraction {} outside (0, 1)", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("availability {} outside [0, 1]", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.fraction) {
            return Err(Error::config(format!("poison fraction {} outside [0, 1]", self.fraction)));
        }
        if self.window.start > self.window.end || self.window.end > rounds {
            return Err(Error::config(format!(
                "attack window {}..{} outside 0..{rounds}",
                self.window.start, self.window.end
            )));
        }
        match self.kind {
            PoisonKind::CleanLabel if !(0.0..=0.5).contains(&self.beta) => {
                Err(Error::config(format!("blend coefficient {} outside [0, 0.5]", self.beta)))
            }
            PoisonKind::Backdoor if self.trigger.is_none() => Err(Error::config("backdoor needs a trigger")),
            _ => Ok(()),
        }
    }
}

/// Relabels every class-`from` sample as `to`.
pub fn flip_labels(shard: &Dataset, from: usize, to: usize) -> Result<Dataset> {
    let labels = shard.labels().iter().map(|&y| if y == from { to } else { y }).collect();
    Dataset::new(shard.images().to_vec(), labels, shard.classes())
}

fn stamp(x: &Tensor, trigger: &Trigger) -> Result<Tensor> {
    let (h, w) = x.plane();
    let (ph, pw) = trigger.patch.plane();
    let (r0, c0) = trigger.offset;
    if r0 + ph > h || c0 + pw > w {
        return Err(Error::invalid(format!("{ph}x{pw} trigger at ({r0}, {c0}) exceeds the {h}x{w} image")));
    }
    let channels = x.len() / (h * w);
    let patch_channels = trigger.patch.len() / (ph * pw);
    let mut out = x.clone();
    let values = out.values_mut();
    for ch in 0..channels {
        let pch = ch % patch_channels;
        for r in 0..ph {
            for c in 0..pw {
                let v = trigger.patch.values()[pch * ph * pw + r * pw + c];
                values[ch * h * w + (r0 + r) * w + c0 + c] = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// Writes the trigger into every sample and relabels it `target`.
pub fn apply_backdoor(shard: &Dataset, trigger: &Trigger, target: usize) -> Result<Dataset> {
    let images = shard.images().iter().map(|x| stamp(x, trigger)).collect::<Result<_>>()?;
    Dataset::new(images, vec![target; shard.len()], shard.classes())
}

/// `x' = clamp(x + beta * exemplar)` with labels kept.
pub fn blend_clean_label(shard: &Dataset, exemplar: &Tensor, beta: f64) -> Result<Dataset> {
    let images = shard
        .images()
        .iter()
        .map(|x| {
            if x.shape() != exemplar.shape() {
                return Err(Error::invalid("exemplar shape does not match the shard"));
            }
            let values = x.values().iter().zip(exemplar.values()).map(|(a, e)| (a + beta * e).clamp(0.0, 1.0));
            Tensor::new(x.shape().to_vec(), values.collect())
        })
        .collect::<Result<_>>()?;
    Dataset::new(images, shard.labels().to_vec(), shard.classes())
}

/// Malicious population and transform schedule derived from a [`PoisonSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct PoisonPlan {
    pub spec: PoisonSpec,
    /// Sorted malicious client ids.
    pub malicious: Vec<usize>,
    /// Target-class exemplar used by clean-label blending.
    pub exemplar: Option<Tensor>,
    pub seed: u64,
}

impl PoisonPlan {
    pub fn is_malicious(&self, client: usize) -> bool {
        self.malicious.binary_search(&client).is_ok()
    }

    pub fn in_window(&self, round: usize) -> bool {
        self.spec.window.contains(round)
    }

    /// The shard client `client` trains on in `round`.
    pub fn shard_for(&self, shard: &Dataset, client: usize, round: usize) -> Result<Option<Dataset>> {
        if !(self.is_malicious(client) && self.in_window(round)) {
            return Ok(None);
        }
        let spec = &self.spec;
        let poisoned = match spec.kind {
            PoisonKind::DirtyLabel => flip_labels(shard, spec.source, spec.target)?,
            PoisonKind::Backdoor => {
                let trigger = spec.trigger.as_ref().ok_or_else(|| Error::config("backdoor needs a trigger"))?;
                let all: Vec<usize> = (0..shard.len()).collect();
                let chosen = self.choose(&all, client, round);
                rewrite(shard, &chosen, |part| apply_backdoor(part, trigger, spec.target))?
            }
            PoisonKind::CleanLabel => {
                let exemplar = self.exemplar.as_ref().ok_or_else(|| Error::config("clean-label needs an exemplar"))?;
                let sources: Vec<usize> = (0..shard.len()).filter(|&i| shard.labels()[i] == spec.source).collect();
                let chosen = self.choose(&sources, client, round);
                rewrite(shard, &chosen, |part| blend_clean_label(part, exemplar, spec.beta))?
            }
        };
        Ok(Some(poisoned))
    }

    fn choose(&self, candidates: &[usize], client: usize, round: usize) -> Vec<usize> {
        let count = ((self.spec.fraction * candidates.len() as f64).floor() as usize).min(candidates.len());
        let mut rng = rng::stream(self.seed, &[tag::POISON, client as u64, round as u64]);
        let mut picked: Vec<usize> =
            sample(&mut rng, candidates.len(), count).into_iter().map(|i| candidates[i]).collect();
        picked.sort_unstable();
        picked
    }
}

fn rewrite(shard: &Dataset, chosen: &[usize], f: impl Fn(&Dataset) -> Result<Dataset>) -> Result<Dataset> {
    let part = f(&shard.subset(chosen))?;
    let mut images = shard.images().to_vec();
    let mut labels = shard.labels().to_vec();
    for (k, &i) in chosen.iter().enumerate() {
        images[i] = part.images()[k].clone();
        labels[i] = part.labels()[k];
    }
    Dataset::new(images, labels, shard.classes())
}

/// Picks `floor(lambda * clients)` malicious ids and, for clean-label attacks,
/// a target-class exemplar from `pool`.
pub fn poison_plan(
    spec: &PoisonSpec,
    clients: usize,
    rounds: usize,
    seed: u64,
    pool: Option<&Dataset>,
) -> Result<PoisonPlan> {
    spec.validate(rounds)?;
    let count = (spec.lambda * clients as f64).floor() as usize;
    if count == 0 {
        return Err(Error::config(format!("lambda {} of {clients} clients selects nobody", spec.lambda)));
    }
    let mut rng = rng::stream(seed, &[tag::PLAN]);
    let mut malicious = sample(&mut rng, clients, count).into_vec();
    malicious.sort_unstable();
    let exemplar = match spec.kind {
        PoisonKind::CleanLabel => {
            let pool = pool.ok_or_else(|| Error::config("clean-label plan needs a dataset to draw the exemplar"))?;
            let targets: Vec<usize> = (0..pool.len()).filter(|&i| pool.labels()[i] == spec.target).collect();
            if targets.is_empty() {
                return Err(Error::config("no target-class sample to use as exemplar"));
            }
            Some(pool.images()[targets[rng.random_range(0..targets.len())]].clone())
        }
        _ => None,
    };
    if let (Some(trigger), Some(ds)) = (&spec.trigger, pool) {
        if let Some(shape) = ds.image_shape() {
            let (h, w) = plane_of(shape);
            let (ph, pw) = trigger.patch.plane();
            if trigger.offset.0 + ph > h || trigger.offset.1 + pw > w {
                return Err(Error::config("trigger exceeds the image bounds"));
            }
        }
    }
    Ok(PoisonPlan { spec: spec.clone(), malicious, exemplar, seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shard() -> Dataset {
        let images = (0..6).map(|i| Tensor::filled(&[4, 4], 0.1 * i as f64)).collect();
        Dataset::new(images, vec![0, 1, 1, 2, 1, 0], 10).unwrap()
    }

    #[test]
    fn flip_moves_whole_class() {
        let s = shard();
        let f = flip_labels(&s, 1, 9).unwrap();
        assert_eq!(f.labels(), &[0, 9, 9, 2, 9, 0]);
        assert_eq!(f.images(), s.images());
        assert_eq!(flip_labels(&s, 5, 9).unwrap(), s);
    }

    #[test]
    fn backdoor_patch() {
        let zero = Dataset::new(vec![Tensor::zeros(&[4, 4])], vec![3], 10).unwrap();
        let out = apply_backdoor(&zero, &Trigger::square(2, 1.0, (0, 0)), 7).unwrap();
        assert_eq!(out.images()[0].values().iter().filter(|&&v| v == 1.0).count(), 4);
        assert_eq!(out.labels(), &[7]);
        assert!(apply_backdoor(&zero, &Trigger::square(2, 1.0, (3, 3)), 7).is_err());
        let same = apply_backdoor(&zero, &Trigger::square(2, 0.0, (1, 1)), 7).unwrap();
        assert_eq!(same.images(), zero.images());
    }

    #[test]
    fn blend_arithmetic() {
        let zero = Dataset::new(vec![Tensor::zeros(&[2, 2])], vec![4], 10).unwrap();
        let ex = Tensor::new(vec![2, 2], vec![0.2, 0.4, 0.6, 1.0]).unwrap();
        let out = blend_clean_label(&zero, &ex, 0.3).unwrap();
        for (o, e) in out.images()[0].values().iter().zip(ex.values()) {
            assert_eq!(*o, 0.3 * e);
        }
        assert_eq!(out.labels(), &[4]);
        assert_eq!(blend_clean_label(&zero, &ex, 0.0).unwrap(), zero);
    }

    #[test]
    fn plan_counts_and_windows() {
        let spec = PoisonSpec::dirty_label(1, 9, 0.1, 0.8, RoundWindow::first(120));
        let plan = poison_plan(&spec, 100, 200, 3, None).unwrap();
        assert_eq!(plan.malicious.len(), 10);
        assert!(plan.in_window(0) && !plan.in_window(120));
        let late = PoisonSpec { window: RoundWindow::last(60, 200), ..spec.clone() };
        let late_plan = poison_plan(&late, 100, 200, 3, None).unwrap();
        assert!(late_plan.in_window(199) && !late_plan.in_window(139));

        let id = plan.malicious[0];
        let s = shard();
        assert!(plan.shard_for(&s, id, 150).unwrap().is_none());
        assert!(plan.shard_for(&s, id, 5).unwrap().is_some());
    }

    #[test]
    fn empty_population_rejected() {
        let spec = PoisonSpec::dirty_label(1, 9, 0.1, 0.8, RoundWindow::first(10));
        assert!(matches!(poison_plan(&spec, 5, 20, 0, None), Err(Error::Config(_))));
    }

    #[test]
    fn validation() {
        let mut spec = PoisonSpec::dirty_label(1, 1, 0.1, 0.8, RoundWindow::first(10));
        assert!(spec.validate(20).is_err());
        spec.target = 2;
        assert!(spec.validate(5).is_err());
        spec.kind = PoisonKind::CleanLabel;
        spec.beta = 0.7;
        assert!(spec.validate(20).is_err());
    }
}
