//! Gradient sanitization: top-magnitude compression, plain Gaussian noise,
//! fixed and dynamic differentially-private noise, and a Rényi accountant.

mod accountant;
mod policy;

pub use accountant::{LedgerEntry, PrivacyLedger, DEFAULT_DELTA};
pub use policy::{calibrate_dynamic_sigma0, noise_scale_at, Decay, InjectionSite, NoiseKind, NoisePolicy};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numcore::GradVector;

/// Zeroes the `floor(ratio * dim)` smallest-magnitude coordinates (lower index first on ties).
pub fn compress(g: &GradVector, ratio: f64) -> Result<GradVector> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::invalid(format!("compression ratio {ratio} outside [0, 1]")));
    }
    let dim = g.len();
    let drop = ((ratio * dim as f64).floor() as usize).min(dim);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| g.values()[a].abs().total_cmp(&g.values()[b].abs()).then(a.cmp(&b)));
    let mut out = g.clone();
    for &i in &order[..drop] {
        out.values_mut()[i] = 0.0;
    }
    Ok(out)
}

/// Adds i.i.d. `N(0, variance)` noise to every coordinate.
pub fn add_gaussian<R: Rng + ?Sized>(g: &GradVector, variance: f64, rng: &mut R) -> Result<GradVector> {
    if !(variance >= 0.0) || !variance.is_finite() {
        return Err(Error::invalid(format!("noise variance {variance} must be finite and non-negative")));
    }
    let mut out = g.clone();
    add_noise_std(out.values_mut(), variance.sqrt(), rng);
    Ok(out)
}

pub(crate) fn add_noise_std<R: Rng + ?Sized>(values: &mut [f64], std: f64, rng: &mut R) {
    if std == 0.0 {
        return;
    }
    let normal = Normal::new(0.0, std).expect("finite std");
    for v in values {
        *v += normal.sample(rng);
    }
}

/// Rescales `g` onto the ball of radius `bound` when its norm exceeds it.
pub fn clip(g: &GradVector, bound: f64) -> GradVector {
    let norm = g.norm();
    let mut out = g.clone();
    if norm > bound {
        out.scale(bound / norm);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SensitivitySource {
    /// `S = C`.
    FixedClip,
    /// `S = min(max per-example norm, C)`.
    L2Max,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensitivityRecord {
    pub value: f64,
    pub source: SensitivitySource,
    pub round: Option<usize>,
    pub client: Option<usize>,
}

impl SensitivityRecord {
    pub fn fixed(clip_bound: f64) -> Self {
        Self { value: clip_bound, source: SensitivitySource::FixedClip, round: None, client: None }
    }

    pub fn at(mut self, round: usize, client: usize) -> Self {
        self.round = Some(round);
        self.client = Some(client);
        self
    }
}

/// l2-max sensitivity of a batch of (already clipped) per-example gradients.
pub fn l2max_sensitivity(per_example: &[GradVector], clip_bound: f64) -> Result<SensitivityRecord> {
    if per_example.is_empty() {
        return Err(Error::Degenerate("l2-max sensitivity of an empty batch".into()));
    }
    let max = per_example.iter().map(GradVector::norm).fold(0.0, f64::max);
    Ok(SensitivityRecord { value: max.min(clip_bound), source: SensitivitySource::L2Max, round: None, client: None })
}

/// Sensitivity the policy prescribes for a batch of clipped per-example gradients.
pub fn sensitivity_for(policy: &NoisePolicy, clipped: &[GradVector]) -> Result<SensitivityRecord> {
    match policy.kind {
        NoiseKind::DynamicDp => l2max_sensitivity(clipped, policy.clip),
        _ => Ok(SensitivityRecord::fixed(policy.clip)),
    }
}

/// Per-example site: clip each gradient to `C`, add `N(0, (sigma_t S)^2)` to each,
/// and return the mean together with the sensitivity used.
pub fn dp_perturb_examples<R: Rng + ?Sized>(
    per_example: &[GradVector],
    policy: &NoisePolicy,
    sigma_t: f64,
    rng: &mut R,
) -> Result<(GradVector, SensitivityRecord)> {
    let first = per_example.first().ok_or_else(|| Error::Degenerate("no per-example gradients".into()))?;
    let clipped: Vec<GradVector> = per_example.iter().map(|g| clip(g, policy.clip)).collect();
    let record = sensitivity_for(policy, &clipped)?;
    let std = sigma_t * record.value;
    let scale = 1.0 / per_example.len() as f64;
    let mut mean = GradVector::zeros(first.layout().clone());
    for mut g in clipped {
        add_noise_std(g.values_mut(), std, rng);
        mean.add_scaled(g.values(), scale);
    }
    Ok((mean, record))
}

/// Per-update site: clip the update to `C` and add `N(0, (sigma_t S)^2)` once.
pub fn dp_perturb_update<R: Rng + ?Sized>(
    update: &GradVector,
    policy: &NoisePolicy,
    sensitivity: &SensitivityRecord,
    sigma_t: f64,
    rng: &mut R,
) -> GradVector {
    let mut out = clip(update, policy.clip);
    add_noise_std(out.values_mut(), sigma_t * sensitivity.value, rng);
    out
}
