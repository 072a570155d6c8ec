//! The federated round loop: availability-biased client sampling, local SGD
//! with defense and poisoning hooks, and the three server aggregation rules.

mod client;
mod run;

pub use client::{local_train, LocalDefense, PoisonHook};
pub use run::{run_federation, RoundLog, RunLog, Scenario, UpdateSummary};

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{GradVector, ParamVector};
use crate::privacy::SensitivityRecord;

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalState {
    pub round: usize,
    pub params: ParamVector,
    /// Global (server) learning rate.
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PayloadKind {
    Gradient,
    Weights,
    Delta,
}

impl std::str::FromStr for PayloadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradient" | "fedsgd" => Ok(PayloadKind::Gradient),
            "weights" | "fedavg" => Ok(PayloadKind::Weights),
            "delta" => Ok(PayloadKind::Delta),
            other => Err(Error::config(format!("unknown payload kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub clients: usize,
    pub per_round: usize,
    pub rounds: usize,
    pub local_iters: usize,
    pub batch_size: usize,
    pub local_lr: f64,
    pub global_lr: f64,
    pub payload: PayloadKind,
    pub seed: u64,
    /// Train the round's clients on the rayon pool.
    pub parallel: bool,
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 || self.per_round == 0 || self.per_round > self.clients {
            return Err(Error::config(format!(
                "need 1 <= per-round participants ({}) <= clients ({})",
                self.per_round, self.clients
            )));
        }
        if self.local_iters == 0 || self.batch_size == 0 {
            return Err(Error::config("local iterations and batch size must be at least 1"));
        }
        if !(self.global_lr > 0.0) {
            return Err(Error::config("global learning rate must be positive"));
        }
        if !(self.local_lr >= 0.0) {
            return Err(Error::config("local learning rate must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Gradient(GradVector),
    Weights(ParamVector),
    Delta(ParamVector),
}

impl Payload {
    pub fn kind(&self) -> PayloadKind {
        match self {
            Payload::Gradient(_) => PayloadKind::Gradient,
            Payload::Weights(_) => PayloadKind::Weights,
            Payload::Delta(_) => PayloadKind::Delta,
        }
    }

    pub fn values(&self) -> &[f64] {
        match self {
            Payload::Gradient(g) => g.values(),
            Payload::Weights(w) | Payload::Delta(w) => w.values(),
        }
    }

    pub fn layout(&self) -> &std::sync::Arc<crate::numcore::Layout> {
        match self {
            Payload::Gradient(g) => g.layout(),
            Payload::Weights(w) | Payload::Delta(w) => w.layout(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client: usize,
    pub samples: usize,
    pub payload: Payload,
    /// l2 norm of the shared (post-defense) accumulated gradient.
    pub update_norm: f64,
    /// Whether the client trained on a poisoned shard.
    pub poisoned: bool,
    pub sensitivity: Option<SensitivityRecord>,
}

/// Uniform sampling without replacement, or, inside an attack window, a
/// per-slot draw that is malicious with probability `alpha`.
pub fn sample_clients<R: Rng + ?Sized>(
    clients: usize,
    per_round: usize,
    malicious: &[usize],
    alpha: f64,
    in_window: bool,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if per_round > clients {
        return Err(Error::config(format!("cannot sample {per_round} of {clients} clients")));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!("availability {alpha} outside [0, 1]")));
    }
    if !in_window || alpha == 0.0 {
        return Ok(sample(rng, clients, per_round).into_vec());
    }
    if malicious.is_empty() {
        return Err(Error::config("positive availability needs at least one malicious client"));
    }
    let mut bad: Vec<usize> = malicious.to_vec();
    bad.sort_unstable();
    bad.dedup();
    let mut good: Vec<usize> = (0..clients).filter(|c| bad.binary_search(c).is_err()).collect();
    let mut chosen = Vec::with_capacity(per_round);
    for _ in 0..per_round {
        let want_bad = rng.random_bool(alpha);
        let pool = match (want_bad, bad.is_empty(), good.is_empty()) {
            (true, false, _) | (false, _, true) => &mut bad,
            _ => &mut good,
        };
        let i = rng.random_range(0..pool.len());
        chosen.push(pool.swap_remove(i));
    }
    Ok(chosen)
}

fn sorted_weights(updates: &[ClientUpdate], kind: PayloadKind) -> Result<(Vec<&ClientUpdate>, f64)> {
    if updates.is_empty() {
        return Err(Error::Aggregation("no updates to aggregate".into()));
    }
    if let Some(u) = updates.iter().find(|u| u.payload.kind() != kind) {
        return Err(Error::Aggregation(format!(
            "client {} sent a {:?} payload to a {:?} aggregation",
            u.client,
            u.payload.kind(),
            kind
        )));
    }
    if updates.iter().any(|u| u.samples == 0) {
        return Err(Error::Aggregation("update with zero samples".into()));
    }
    let layout = updates[0].payload.layout();
    if updates.iter().any(|u| u.payload.layout() != layout) {
        return Err(Error::Aggregation("updates disagree on the parameter layout".into()));
    }
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client);
    let total = sorted.iter().map(|u| u.samples).sum::<usize>() as f64;
    Ok((sorted, total))
}

fn weighted_sum(sorted: &[&ClientUpdate], total: f64, dim: usize) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    for u in sorted {
        let w = u.samples as f64 / total;
        for (a, v) in acc.iter_mut().zip(u.payload.values()) {
            *a += w * v;
        }
    }
    acc
}

fn check_base(base: &ParamVector, updates: &[&ClientUpdate]) -> Result<()> {
    if updates.iter().any(|u| u.payload.layout().as_ref() != base.layout().as_ref()) {
        return Err(Error::Aggregation("update layout differs from the global state".into()));
    }
    Ok(())
}

/// `w(t+1) = w(t) - lr * sum_k (n_k / n) g_k`.
pub fn aggregate_fedsgd(w: &ParamVector, lr: f64, updates: &[ClientUpdate]) -> Result<ParamVector> {
    let (sorted, total) = sorted_weights(updates, PayloadKind::Gradient)?;
    check_base(w, &sorted)?;
    let mean = weighted_sum(&sorted, total, w.len());
    let mut out = w.clone();
    out.add_scaled(&mean, -lr);
    Ok(out)
}

/// `w(t+1) = sum_k (n_k / n) w_k(t+1)`.
pub fn aggregate_fedavg(updates: &[ClientUpdate]) -> Result<ParamVector> {
    let (sorted, total) = sorted_weights(updates, PayloadKind::Weights)?;
    let layout = sorted[0].payload.layout().clone();
    let mean = weighted_sum(&sorted, total, layout.total());
    ParamVector::from_values(layout, mean)
}

/// `w(t+1) = w(t) + sum_k (n_k / n) delta_k`.
pub fn aggregate_delta(w: &ParamVector, updates: &[ClientUpdate]) -> Result<ParamVector> {
    let (sorted, total) = sorted_weights(updates, PayloadKind::Delta)?;
    check_base(w, &sorted)?;
    let mean = weighted_sum(&sorted, total, w.len());
    let mut out = w.clone();
    out.add_scaled(&mean, 1.0);
    Ok(out)
}

/// Dispatches on the payload kind of the first update.
pub fn aggregate(w: &ParamVector, lr: f64, updates: &[ClientUpdate]) -> Result<ParamVector> {
    let kind = updates.first().ok_or_else(|| Error::Aggregation("no updates to aggregate".into()))?.payload.kind();
    match kind {
        PayloadKind::Gradient => aggregate_fedsgd(w, lr, updates),
        PayloadKind::Weights => aggregate_fedavg(updates),
        PayloadKind::Delta => aggregate_delta(w, updates),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Layout;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn layout2() -> Arc<Layout> {
        Arc::new(Layout::for_widths(&[1, 1]))
    }

    fn params(v: [f64; 2]) -> ParamVector {
        ParamVector::from_values(layout2(), v.to_vec()).unwrap()
    }

    fn update(client: usize, samples: usize, payload: Payload) -> ClientUpdate {
        ClientUpdate { client, samples, update_norm: 0.0, payload, poisoned: false, sensitivity: None }
    }

    fn grad(client: usize, n: usize, v: [f64; 2]) -> ClientUpdate {
        update(client, n, Payload::Gradient(params(v).into_grad()))
    }

    #[test]
    fn fedsgd_hand_arithmetic() {
        let w = params([1.0, 0.0]);
        let out = aggregate_fedsgd(&w, 1.0, &[grad(0, 1, [1.0, 0.0]), grad(1, 3, [0.0, 2.0])]).unwrap();
        assert_eq!(out.values(), &[0.75, -1.5]);
    }

    #[test]
    fn fedsgd_identical_gradients() {
        let w = params([0.3, -0.2]);
        let out = aggregate_fedsgd(&w, 0.5, &[grad(0, 7, [1.0, 2.0]), grad(1, 2, [1.0, 2.0])]).unwrap();
        assert_eq!(out.values(), &[0.3 - 0.5, -0.2 - 1.0]);
    }

    #[test]
    fn fedavg_hand_arithmetic() {
        let out = aggregate_fedavg(&[
            update(0, 1, Payload::Weights(params([2.0, 0.0]))),
            update(1, 3, Payload::Weights(params([0.0, 4.0]))),
        ])
        .unwrap();
        assert_eq!(out.values(), &[0.5, 3.0]);
    }

    #[test]
    fn delta_hand_arithmetic() {
        let out = aggregate_delta(
            &params([1.0, 1.0]),
            &[update(0, 1, Payload::Delta(params([1.0, 0.0]))), update(1, 1, Payload::Delta(params([-1.0, 2.0])))],
        )
        .unwrap();
        assert_eq!(out.values(), &[1.0, 2.0]);
    }

    #[test]
    fn mixed_payloads_rejected() {
        let w = params([0.0, 0.0]);
        let mixed = [grad(0, 1, [1.0, 0.0]), update(1, 1, Payload::Delta(params([0.0, 0.0])))];
        assert!(matches!(aggregate_fedsgd(&w, 1.0, &mixed), Err(Error::Aggregation(_))));
        assert!(matches!(aggregate_fedsgd(&w, 1.0, &[]), Err(Error::Aggregation(_))));
    }

    #[test]
    fn order_invariant() {
        let w = params([0.1, 0.2]);
        let a = [grad(3, 2, [0.1, 0.7]), grad(1, 5, [0.3, -0.2]), grad(2, 1, [1e-9, 3.0])];
        let b = [a[2].clone(), a[0].clone(), a[1].clone()];
        assert_eq!(aggregate_fedsgd(&w, 1.0, &a).unwrap(), aggregate_fedsgd(&w, 1.0, &b).unwrap());
    }

    #[test]
    fn sampling_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let malicious: Vec<usize> = (0..10).collect();
        let all_bad = sample_clients(100, 10, &malicious, 1.0, true, &mut rng).unwrap();
        assert!(all_bad.iter().all(|c| *c < 10));
        let mut uniq = all_bad.clone();
        uniq.sort_unstable();
        uniq.dedup();
        assert_eq!(uniq.len(), 10);
        assert!(matches!(sample_clients(100, 10, &[], 0.5, true, &mut rng), Err(Error::Config(_))));
        assert!(sample_clients(100, 10, &[], 0.5, false, &mut rng).is_ok());
    }
}
