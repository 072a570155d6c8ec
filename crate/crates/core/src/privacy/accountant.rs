use std::io::Write;

use crate::error::{Error, Result};

pub const DEFAULT_DELTA: f64 = 1e-5;

/// Rényi orders `{1.5, 2, 3, ..., 64}`.
pub fn default_orders() -> Vec<f64> {
    std::iter::once(1.5).chain((2..=64).map(f64::from)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LedgerEntry {
    pub round: usize,
    pub sigma: f64,
    pub sensitivity: f64,
    /// Noise standard deviation `sigma * S`.
    pub zeta: f64,
    pub epsilon: f64,
}

/// Accumulates Gaussian-mechanism Rényi divergences over rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivacyLedger {
    delta: f64,
    orders: Vec<f64>,
    accumulated: Vec<f64>,
    history: Vec<LedgerEntry>,
}

impl PrivacyLedger {
    pub fn new(delta: f64) -> Result<Self> {
        Self::with_orders(delta, default_orders())
    }

    pub fn with_orders(delta: f64, orders: Vec<f64>) -> Result<Self> {
        if orders.is_empty() {
            return Err(Error::config("Rényi order grid is empty"));
        }
        if let Some(bad) = orders.iter().find(|&&a| !(a > 1.0)) {
            return Err(Error::config(format!("Rényi order {bad} must exceed 1")));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::config(format!("delta {delta} outside (0, 1)")));
        }
        let accumulated = vec![0.0; orders.len()];
        Ok(Self { delta, orders, accumulated, history: Vec::new() })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn orders(&self) -> &[f64] {
        &self.orders
    }

    pub fn accumulated(&self) -> &[f64] {
        &self.accumulated
    }

    pub fn history(&self) -> &[LedgerEntry] {
        &self.history
    }

    pub fn steps(&self) -> usize {
        self.history.len()
    }

    /// Composes one Gaussian mechanism with noise multiplier `sigma`.
    pub fn step(&mut self, sigma: f64) -> Result<()> {
        let round = self.history.len();
        self.step_with(round, sigma, 1.0)
    }

    /// As [`step`](Self::step), also recording the round's sensitivity for export.
    pub fn step_with(&mut self, round: usize, sigma: f64, sensitivity: f64) -> Result<()> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::invalid(format!("noise scale {sigma} must be positive")));
        }
        for (acc, &alpha) in self.accumulated.iter_mut().zip(&self.orders) {
            *acc += alpha / (2.0 * sigma * sigma);
        }
        let epsilon = self.epsilon();
        self.history.push(LedgerEntry { round, sigma, sensitivity, zeta: sigma * sensitivity, epsilon });
        Ok(())
    }

    /// `min_alpha [ D_alpha + ln(1/delta) / (alpha - 1) ]`.
    pub fn epsilon(&self) -> f64 {
        let log_inv_delta = (1.0 / self.delta).ln();
        self.accumulated
            .iter()
            .zip(&self.orders)
            .map(|(acc, &alpha)| acc + log_inv_delta / (alpha - 1.0))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["round", "sigma_t", "S", "zeta", "epsilon"])?;
        for e in &self.history {
            w.write_record([
                e.round.to_string(),
                crate::harness::fmt_sig(e.sigma),
                crate::harness::fmt_sig(e.sensitivity),
                crate::harness::fmt_sig(e.zeta),
                crate::harness::fmt_sig(e.epsilon),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
