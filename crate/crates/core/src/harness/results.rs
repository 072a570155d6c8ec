use std::collections::BTreeSet;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::harness::fmt_sig;

/// The closed metric vocabulary of result files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    Accuracy,
    VictimF1,
    RestF1,
    UpdateNorm,
    SigmaT,
    Epsilon,
    AttackMse,
    AttackSsim,
}

impl Metric {
    pub const ALL: [Metric; 8] = [
        Metric::Accuracy,
        Metric::VictimF1,
        Metric::RestF1,
        Metric::UpdateNorm,
        Metric::SigmaT,
        Metric::Epsilon,
        Metric::AttackMse,
        Metric::AttackSsim,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::VictimF1 => "victim_f1",
            Metric::RestF1 => "rest_f1",
            Metric::UpdateNorm => "update_norm",
            Metric::SigmaT => "sigma_t",
            Metric::Epsilon => "epsilon",
            Metric::AttackMse => "attack_mse",
            Metric::AttackSsim => "attack_ssim",
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| Error::Format(format!("unknown metric `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub scenario: String,
    pub round: usize,
    pub metric: Metric,
    pub value: f64,
}

/// Append-only rows with unique `(scenario, round, metric)` keys.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultSet {
    rows: Vec<ResultRow>,
    keys: BTreeSet<(String, usize, Metric)>,
}

impl ResultSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, scenario: &str, round: usize, metric: Metric, value: f64) -> Result<()> {
        if !self.keys.insert((scenario.to_string(), round, metric)) {
            return Err(Error::invalid(format!("duplicate result {scenario}/{round}/{metric}")));
        }
        self.rows.push(ResultRow { scenario: scenario.to_string(), round, metric, value });
        Ok(())
    }

    pub fn extend(&mut self, other: ResultSet) -> Result<()> {
        for r in other.rows {
            self.push(&r.scenario, r.round, r.metric, r.value)?;
        }
        Ok(())
    }

    pub fn rows(&self) -> &[ResultRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn values(&self, scenario: &str, metric: Metric) -> Vec<(usize, f64)> {
        self.rows.iter().filter(|r| r.scenario == scenario && r.metric == metric).map(|r| (r.round, r.value)).collect()
    }
}

/// Writes `scenario,round,metric,value` rows.
pub fn write_results<W: Write>(rows: &[ResultRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["scenario", "round", "metric", "value"])?;
    for r in rows {
        w.write_record([r.scenario.clone(), r.round.to_string(), r.metric.to_string(), fmt_sig(r.value)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results<R: Read>(input: R) -> Result<Vec<ResultRow>> {
    let mut reader = csv::Reader::from_reader(input);
    if reader.headers()?.iter().ne(["scenario", "round", "metric", "value"]) {
        return Err(Error::Format("result header must be scenario,round,metric,value".into()));
    }
    reader
        .records()
        .map(|row| {
            let row = row?;
            if row.len() != 4 {
                return Err(Error::Format("result rows have four fields".into()));
            }
            Ok(ResultRow {
                scenario: row[0].to_string(),
                round: row[1].parse().map_err(|_| Error::Format(format!("bad round `{}`", &row[1])))?,
                metric: row[2].parse()?,
                value: row[3].parse().map_err(|_| Error::Format(format!("bad value `{}`", &row[3])))?,
            })
        })
        .collect()
}
