use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseKind {
    None,
    /// Zero the given fraction of smallest-magnitude coordinates of the shared update.
    Compression {
        ratio: f64,
    },
    /// Add `N(0, variance)` to every coordinate of the shared update.
    Gaussian {
        variance: f64,
    },
    /// Clip to `C`, noise with `sigma_t * C`.
    FixedDp,
    /// Clip to `C`, noise with `sigma_t * S` where `S` is the l2-max sensitivity.
    DynamicDp,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decay {
    Constant,
    Linear,
    Staircase { stages: usize },
    Exponential,
    Cyclic { period: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InjectionSite {
    PerExample,
    PerClientUpdate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisePolicy {
    pub kind: NoiseKind,
    /// Clipping bound `C`.
    pub clip: f64,
    /// Initial noise scale; for fixed DP the only scale.
    pub sigma_0: f64,
    /// Final noise scale of a decaying schedule.
    pub sigma_final: f64,
    pub decay: Decay,
    pub site: InjectionSite,
    pub seed: u64,
}

impl NoisePolicy {
    pub fn none() -> Self {
        Self {
            kind: NoiseKind::None,
            clip: f64::INFINITY,
            sigma_0: 0.0,
            sigma_final: 0.0,
            decay: Decay::Constant,
            site: InjectionSite::PerClientUpdate,
            seed: 0,
        }
    }

    pub fn compression(ratio: f64) -> Self {
        Self { kind: NoiseKind::Compression { ratio }, ..Self::none() }
    }

    pub fn gaussian(variance: f64) -> Self {
        Self { kind: NoiseKind::Gaussian { variance }, ..Self::none() }
    }

    pub fn fixed_dp(clip: f64, sigma: f64) -> Self {
        Self {
            kind: NoiseKind::FixedDp,
            clip,
            sigma_0: sigma,
            sigma_final: sigma,
            decay: Decay::Constant,
            site: InjectionSite::PerExample,
            seed: 0,
        }
    }

    pub fn dynamic_dp(clip: f64, sigma_0: f64, sigma_final: f64, decay: Decay) -> Self {
        Self { kind: NoiseKind::DynamicDp, clip, sigma_0, sigma_final, decay, site: InjectionSite::PerExample, seed: 0 }
    }

    pub fn is_dp(&self) -> bool {
        matches!(self.kind, NoiseKind::FixedDp | NoiseKind::DynamicDp)
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            NoiseKind::None => {}
            NoiseKind::Compression { ratio } => {
                if !(0.0..=1.0).contains(&ratio) {
                    return Err(Error::config(format!("compression ratio {ratio} outside [0, 1]")));
                }
            }
            NoiseKind::Gaussian { variance } => {
                if !(variance >= 0.0 && variance.is_finite()) {
                    return Err(Error::config(format!("invalid noise variance {variance}")));
                }
            }
            NoiseKind::FixedDp | NoiseKind::DynamicDp => {
                if !(self.clip > 0.0) {
                    return Err(Error::config("clipping bound must be positive"));
                }
                if !(self.sigma_0 > 0.0) {
                    return Err(Error::config("initial noise scale must be positive"));
                }
                if self.decay != Decay::Constant && !(self.sigma_0 >= self.sigma_final && self.sigma_final > 0.0) {
                    return Err(Error::config("decaying schedules need sigma_0 >= sigma_T > 0"));
                }
                match self.decay {
                    Decay::Staircase { stages: 0 } => return Err(Error::config("staircase needs stages >= 1")),
                    Decay::Cyclic { period: 0 } => return Err(Error::config("cyclic needs period >= 1")),
                    _ => {}
                }
            }
        }
        Ok(())
    }
}

fn exponential(sigma_0: f64, sigma_final: f64, frac: f64) -> f64 {
    sigma_0 * (sigma_final / sigma_0).powf(frac)
}

/// Noise scale at round `t` of a horizon of `horizon` rounds (`0 <= t <= horizon`).
pub fn noise_scale_at(policy: &NoisePolicy, t: usize, horizon: usize) -> f64 {
    let (s0, st) = (policy.sigma_0, policy.sigma_final);
    if horizon == 0 || t == 0 {
        return s0;
    }
    let t = t.min(horizon);
    let frac = t as f64 / horizon as f64;
    match policy.decay {
        Decay::Constant => s0,
        Decay::Linear => s0 - (s0 - st) * frac,
        Decay::Exponential if t == horizon => st,
        Decay::Exponential => exponential(s0, st, frac),
        Decay::Staircase { stages } => {
            let stages = stages.max(1);
            let stage = ((t * stages) / horizon).min(stages - 1);
            exponential(s0, st, stage as f64 / stages as f64)
        }
        Decay::Cyclic { period } => {
            let period = period.max(1);
            let start = (t / period) * period;
            let envelope = exponential(s0, st, start as f64 / horizon as f64);
            let within = (t - start) as f64 / period as f64;
            envelope - (envelope - st) * within
        }
    }
}

/// `ceil(C * sigma_fixed / S_1)`, the initial dynamic scale matched to a fixed-DP setting.
pub fn calibrate_dynamic_sigma0(clip: f64, sigma_fixed: f64, first_sensitivity: f64) -> f64 {
    (clip * sigma_fixed / first_sensitivity).ceil()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn policy(decay: Decay) -> NoisePolicy {
        NoisePolicy::dynamic_dp(4.0, 10.0, 3.0, decay)
    }

    #[test]
    fn boundaries() {
        for decay in [Decay::Linear, Decay::Exponential, Decay::Staircase { stages: 4 }, Decay::Cyclic { period: 20 }] {
            assert_eq!(noise_scale_at(&policy(decay), 0, 100), 10.0);
        }
        assert_eq!(noise_scale_at(&policy(Decay::Linear), 100, 100), 3.0);
        assert_eq!(noise_scale_at(&policy(Decay::Exponential), 100, 100), 3.0);
        assert!((noise_scale_at(&policy(Decay::Cyclic { period: 20 }), 100, 100) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn exponential_midpoint() {
        let mid = noise_scale_at(&policy(Decay::Exponential), 50, 100);
        assert!((mid - 30f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn staircase_holds_stage_start() {
        let p = policy(Decay::Staircase { stages: 4 });
        let stage1 = noise_scale_at(&p, 25, 100);
        assert_eq!(noise_scale_at(&p, 49, 100), stage1);
        assert!((stage1 - exponential(10.0, 3.0, 0.25)).abs() < 1e-12);
    }

    #[test]
    fn calibration_rounds_up() {
        assert_eq!(calibrate_dynamic_sigma0(4.0, 6.0, 5.0), 5.0);
        assert_eq!(calibrate_dynamic_sigma0(4.0, 6.0, 4.0), 6.0);
    }

    #[test]
    fn validation() {
        assert!(NoisePolicy::dynamic_dp(4.0, 2.0, 3.0, Decay::Exponential).validate().is_err());
        assert!(NoisePolicy::fixed_dp(0.0, 6.0).validate().is_err());
        assert!(NoisePolicy::compression(1.2).validate().is_err());
        assert!(NoisePolicy::fixed_dp(4.0, 6.0).validate().is_ok());
    }
}
