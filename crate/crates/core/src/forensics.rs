//! Server-side detection of poisoned updates from per-class gradient
//! slices: PCA to two dimensions, 2-means clustering, an uncertainty band
//! around the cluster boundary, and per-client temporal flagging.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;

use crate::error::{Error, Result};
use crate::federation::{self, ClientUpdate};
use crate::harness::fmt_sig;
use crate::numcore::{Layout, ParamVector};
use crate::rng::{self, tag};

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub round: usize,
    pub client: usize,
    /// Ground truth when known (the update came from a poisoned shard).
    pub malicious: Option<bool>,
    /// l2 norm of the full update.
    pub norm: f64,
    pub slice: Vec<f64>,
}

/// Per-class update slices collected over rounds.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientTrace {
    pub class: Option<usize>,
    records: Vec<TraceRecord>,
}

impl GradientTrace {
    pub fn new(class: Option<usize>) -> Self {
        Self { class, records: Vec::new() }
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn push(&mut self, record: TraceRecord) -> Result<()> {
        if let Some(first) = self.records.first() {
            if first.slice.len() != record.slice.len() {
                return Err(Error::invalid("slice dimension differs from earlier records"));
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn push_updates(&mut self, round: usize, updates: &[ClientUpdate], class: usize) -> Result<()> {
        for u in updates {
            self.push(TraceRecord {
                round,
                client: u.client,
                malicious: Some(u.poisoned),
                norm: u.update_norm,
                slice: extract_class_slice(u, class)?,
            })?;
        }
        Ok(())
    }

    /// Trace of class `class` over recorded rounds.
    pub fn from_rounds(rounds: &[(usize, Vec<ClientUpdate>)], class: usize) -> Result<Self> {
        let mut trace = Self::new(Some(class));
        for (round, updates) in rounds {
            trace.push_updates(*round, updates, class)?;
        }
        Ok(trace)
    }

    /// Columns `round,client_id,is_malicious,norm,s0,s1,...`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let dim = self.records.first().map_or(0, |r| r.slice.len());
        let mut header = vec!["round".to_string(), "client_id".into(), "is_malicious".into(), "norm".into()];
        header.extend((0..dim).map(|i| format!("s{i}")));
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![
                r.round.to_string(),
                r.client.to_string(),
                r.malicious.map_or(String::new(), |m| u8::from(m).to_string()),
                fmt_sig(r.norm),
            ];
            row.extend(r.slice.iter().map(|&v| fmt_sig(v)));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(input);
        let headers = reader.headers()?.clone();
        let fixed = ["round", "client_id", "is_malicious", "norm"];
        if headers.len() < fixed.len() || fixed.iter().zip(headers.iter()).any(|(a, b)| *a != b) {
            return Err(Error::Format("trace header must start with round,client_id,is_malicious,norm".into()));
        }
        let mut trace = Self::new(None);
        for row in reader.records() {
            let row = row?;
            let field = |i: usize| row.get(i).unwrap_or("");
            let int =
                |i: usize| field(i).parse::<usize>().map_err(|_| Error::Format(format!("bad integer `{}`", field(i))));
            let float =
                |i: usize| field(i).parse::<f64>().map_err(|_| Error::Format(format!("bad number `{}`", field(i))));
            let malicious = match field(2) {
                "" => None,
                "0" => Some(false),
                "1" => Some(true),
                other => return Err(Error::Format(format!("bad malicious flag `{other}`"))),
            };
            trace.push(TraceRecord {
                round: int(0)?,
                client: int(1)?,
                malicious,
                norm: float(3)?,
                slice: (4..row.len()).map(float).collect::<Result<_>>()?,
            })?;
        }
        Ok(trace)
    }
}

/// Final-layer weight row and bias entry of class `class`.
pub fn extract_class_slice(update: &ClientUpdate, class: usize) -> Result<Vec<f64>> {
    slice_of(update.payload.layout(), update.payload.values(), class)
}

pub(crate) fn slice_of(layout: &Layout, values: &[f64], class: usize) -> Result<Vec<f64>> {
    let w = layout.last_weight();
    let b = layout.last_bias();
    if class >= w.rows {
        return Err(Error::invalid(format!("class {class} outside the {}-class head", w.rows)));
    }
    let start = w.offset + class * w.cols;
    let mut out = values[start..start + w.cols].to_vec();
    out.push(values[b.offset + class]);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pca2 {
    pub points: Vec<[f64; 2]>,
    pub explained: [f64; 2],
    /// All input points coincide.
    pub degenerate: bool,
}

/// Projection of the mean-centered points onto the two leading principal directions.
pub fn pca2(points: &[Vec<f64>]) -> Result<Pca2> {
    if points.len() < 2 {
        return Err(Error::Degenerate("PCA needs at least two points".into()));
    }
    let dim = points[0].len();
    if dim == 0 || points.iter().any(|p| p.len() != dim) {
        return Err(Error::invalid("PCA points must share a positive dimension"));
    }
    let n = points.len() as f64;
    let mut mean = vec![0.0; dim];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v / n;
        }
    }
    let centered: Vec<Vec<f64>> = points.iter().map(|p| p.iter().zip(&mean).map(|(v, m)| v - m).collect()).collect();
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    for c in &centered {
        for i in 0..dim {
            for j in i..dim {
                cov[(i, j)] += c[i] * c[j];
            }
        }
    }
    for i in 0..dim {
        for j in i..dim {
            let v = cov[(i, j)] / (n - 1.0);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let total: f64 = (0..dim).map(|i| cov[(i, i)]).sum();
    let scale = centered.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(total > 0.0) || scale == 0.0 {
        return Ok(Pca2 { points: vec![[0.0; 2]; points.len()], explained: [0.0; 2], degenerate: true });
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut dirs = [vec![0.0; dim], vec![0.0; dim]];
    let mut explained = [0.0; 2];
    for k in 0..2.min(dim) {
        let col = eig.eigenvectors.column(order[k]);
        let mut v: Vec<f64> = col.iter().copied().collect();
        let lead = (0..dim).fold(0, |best, i| if v[i].abs() > v[best].abs() { i } else { best });
        if v[lead] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        dirs[k] = v;
        explained[k] = eig.eigenvalues[order[k]].max(0.0) / total;
    }
    let projected =
        centered.iter().map(|c| [crate::numcore::dot(c, &dirs[0]), crate::numcore::dot(c, &dirs[1])]).collect();
    Ok(Pca2 { points: projected, explained, degenerate: false })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoMeans {
    pub assignments: Vec<usize>,
    pub centroids: [[f64; 2]; 2],
    pub iterations: usize,
    /// Within-cluster sum of squares after each assignment step.
    pub objective: Vec<f64>,
    /// Fewer than two distinct points.
    pub degenerate: bool,
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Lloyd 2-means with a seeded farthest-point start.
pub fn two_means(points: &[[f64; 2]], seed: u64) -> TwoMeans {
    let n = points.len();
    if n == 0 {
        return TwoMeans {
            assignments: Vec::new(),
            centroids: [[0.0; 2]; 2],
            iterations: 0,
            objective: Vec::new(),
            degenerate: true,
        };
    }
    let first = rng::stream(seed, &[tag::FORENSICS]).random_range(0..n);
    let second =
        (0..n).fold(
            first,
            |best, i| {
                if dist2(points[i], points[first]) > dist2(points[best], points[first]) {
                    i
                } else {
                    best
                }
            },
        );
    if dist2(points[first], points[second]) == 0.0 {
        return TwoMeans {
            assignments: vec![0; n],
            centroids: [points[first], points[first]],
            iterations: 0,
            objective: vec![0.0],
            degenerate: true,
        };
    }
    let mut centroids = [points[first], points[second]];
    let mut assignments = vec![0; n];
    let mut objective = Vec::new();
    let mut iterations = 0;
    while iterations < 100 {
        iterations += 1;
        let mut wcss = 0.0;
        for (a, &p) in assignments.iter_mut().zip(points) {
            let (d0, d1) = (dist2(p, centroids[0]), dist2(p, centroids[1]));
            *a = usize::from(d1 < d0);
            wcss += d0.min(d1);
        }
        objective.push(wcss);
        let mut sums = [[0.0; 2]; 2];
        let mut counts = [0usize; 2];
        for (&a, p) in assignments.iter().zip(points) {
            sums[a][0] += p[0];
            sums[a][1] += p[1];
            counts[a] += 1;
        }
        let mut drift: f64 = 0.0;
        for k in 0..2 {
            if counts[k] > 0 {
                let next = [sums[k][0] / counts[k] as f64, sums[k][1] / counts[k] as f64];
                drift = drift.max(dist2(next, centroids[k]).sqrt());
                centroids[k] = next;
            }
        }
        if drift < 1e-9 {
            break;
        }
    }
    TwoMeans { assignments, centroids, iterations, objective, degenerate: false }
}

/// Relabels as uncertain (`None`) every point whose distance ratio to the
/// two centroids lies in `[1 - q, 1 + q]`.
pub fn density_filter(
    points: &[[f64; 2]],
    assignments: &[usize],
    centroids: &[[f64; 2]; 2],
    q: f64,
) -> Vec<Option<usize>> {
    points
        .iter()
        .zip(assignments)
        .map(|(&p, &a)| {
            let d0 = dist2(p, centroids[0]).sqrt();
            let d1 = dist2(p, centroids[1]).sqrt();
            let uncertain = if d0 == d1 {
                true
            } else if q <= 0.0 {
                false
            } else {
                let ratio = d0 / d1;
                ratio >= 1.0 - q && ratio <= 1.0 + q
            };
            if uncertain {
                None
            } else {
                Some(a)
            }
        })
        .collect()
}

/// Mean of `(b - a) / max(a, b)` with `a`, `b` the distances to the own and other centroid.
pub fn centroid_silhouette(points: &[[f64; 2]], assignments: &[usize], centroids: &[[f64; 2]; 2]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let total: f64 = points
        .iter()
        .zip(assignments)
        .map(|(&p, &k)| {
            let a = dist2(p, centroids[k]).sqrt();
            let b = dist2(p, centroids[1 - k]).sqrt();
            let m = a.max(b);
            if m == 0.0 {
                0.0
            } else {
                (b - a) / m
            }
        })
        .sum();
    total / points.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionConfig {
    /// Temporal window in rounds.
    pub window: usize,
    /// Temporal score at or above which a client is flagged.
    pub threshold: f64,
    /// Half-width of the uncertainty band on the distance ratio.
    pub q: f64,
    /// Require the suspect cluster to have the larger mean update norm.
    pub norm_rule: bool,
    /// Minimum cluster separation before anything is flagged.
    pub min_silhouette: Option<f64>,
    pub seed: u64,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self { window: 10, threshold: 0.5, q: 0.1, norm_rule: true, min_silhouette: Some(0.5), seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionSummary {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub precision: f64,
    pub recall: f64,
    /// Flagged benign clients over benign clients that received a temporal score.
    pub false_positive_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionReport {
    pub points: Vec<[f64; 2]>,
    pub assignments: Vec<Option<usize>>,
    pub explained: [f64; 2],
    pub silhouette: f64,
    pub suspect: Option<usize>,
    /// Sorted.
    pub flagged: Vec<usize>,
    /// Temporal score per client seen in the window.
    pub scores: BTreeMap<usize, f64>,
    /// Record-level ground truth copied from the trace.
    pub truth: Vec<Option<bool>>,
    pub degenerate: bool,
    pub summary: Option<DetectionSummary>,
}

impl DetectionReport {
    fn empty(trace: &GradientTrace, points: Vec<[f64; 2]>) -> Self {
        Self {
            assignments: vec![None; points.len()],
            points,
            explained: [0.0; 2],
            silhouette: 0.0,
            suspect: None,
            flagged: Vec::new(),
            scores: BTreeMap::new(),
            truth: trace.records.iter().map(|r| r.malicious).collect(),
            degenerate: true,
            summary: None,
        }
    }

    /// Scores the flagged set against the known malicious ids.
    pub fn evaluate(&mut self, malicious: &[usize]) -> DetectionSummary {
        let is_bad = |c: &usize| malicious.contains(c);
        let tp = self.flagged.iter().filter(|c| is_bad(c)).count();
        let fp = self.flagged.len() - tp;
        let mut bad: Vec<usize> = malicious.to_vec();
        bad.sort_unstable();
        bad.dedup();
        let fn_ = bad.len() - tp;
        let benign_scored = self.scores.keys().filter(|c| !is_bad(c)).count();
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let summary = DetectionSummary {
            true_positives: tp,
            false_positives: fp,
            false_negatives: fn_,
            precision: if self.flagged.is_empty() { 1.0 } else { ratio(tp, self.flagged.len()) },
            recall: if bad.is_empty() { 1.0 } else { ratio(tp, bad.len()) },
            false_positive_rate: ratio(fp, benign_scored),
        };
        self.summary = Some(summary);
        summary
    }

    /// Plot data with header `x,y,cluster,truth`.
    pub fn write_scatter<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x", "y", "cluster", "truth"])?;
        for ((p, a), t) in self.points.iter().zip(&self.assignments).zip(&self.truth) {
            w.write_record([
                fmt_sig(p[0]),
                fmt_sig(p[1]),
                a.map_or("uncertain".to_string(), |k| k.to_string()),
                t.map_or(String::new(), |m| u8::from(m).to_string()),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Clusters the pooled trace, picks the suspect cluster and flags clients
/// whose recent updates mostly fall in it.
pub fn flag_malicious(trace: &GradientTrace, cfg: &DetectionConfig) -> Result<DetectionReport> {
    if trace.len() < 2 {
        return Ok(DetectionReport::empty(trace, vec![[0.0; 2]; trace.len()]));
    }
    let slices: Vec<Vec<f64>> = trace.records.iter().map(|r| r.slice.clone()).collect();
    let pca = pca2(&slices)?;
    if pca.degenerate {
        return Ok(DetectionReport::empty(trace, pca.points));
    }
    let km = two_means(&pca.points, cfg.seed);
    if km.degenerate {
        return Ok(DetectionReport { explained: pca.explained, ..DetectionReport::empty(trace, pca.points) });
    }
    let assignments = density_filter(&pca.points, &km.assignments, &km.centroids, cfg.q);
    let silhouette = centroid_silhouette(&pca.points, &km.assignments, &km.centroids);

    let mut sizes = [0usize; 2];
    let mut norm_sums = [0.0; 2];
    for (a, r) in assignments.iter().zip(&trace.records) {
        if let Some(k) = *a {
            sizes[k] += 1;
            norm_sums[k] += r.norm;
        }
    }
    let mean_norm = |k: usize| if sizes[k] == 0 { 0.0 } else { norm_sums[k] / sizes[k] as f64 };
    let separated = cfg.min_silhouette.is_none_or(|m| silhouette >= m);
    let suspect = if !separated || sizes[0] == 0 || sizes[1] == 0 {
        None
    } else if sizes[0] != sizes[1] {
        let minority = usize::from(sizes[1] < sizes[0]);
        (!cfg.norm_rule || mean_norm(minority) > mean_norm(1 - minority)).then_some(minority)
    } else if cfg.norm_rule && mean_norm(0) != mean_norm(1) {
        Some(usize::from(mean_norm(1) > mean_norm(0)))
    } else {
        None
    };

    let last = trace.records.iter().map(|r| r.round).max().unwrap_or(0);
    let mut tallies: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (a, r) in assignments.iter().zip(&trace.records) {
        if r.round + cfg.window <= last {
            continue;
        }
        if let Some(k) = *a {
            let entry = tallies.entry(r.client).or_default();
            entry.1 += 1;
            if Some(k) == suspect {
                entry.0 += 1;
            }
        }
    }
    let scores: BTreeMap<usize, f64> =
        tallies.into_iter().map(|(c, (hit, seen))| (c, hit as f64 / seen as f64)).collect();
    let flagged = match suspect {
        Some(_) => scores.iter().filter(|(_, &s)| s >= cfg.threshold).map(|(&c, _)| c).collect(),
        None => Vec::new(),
    };
    Ok(DetectionReport {
        points: pca.points,
        assignments,
        explained: pca.explained,
        silhouette,
        suspect,
        flagged,
        scores,
        truth: trace.records.iter().map(|r| r.malicious).collect(),
        degenerate: false,
        summary: None,
    })
}

/// Aggregates the updates of unflagged clients; keeps `w` when every update is flagged.
pub fn aggregate_with_removal(
    w: &ParamVector,
    lr: f64,
    updates: &[ClientUpdate],
    flagged: &[usize],
) -> Result<ParamVector> {
    let kept: Vec<ClientUpdate> = updates.iter().filter(|u| !flagged.contains(&u.client)).cloned().collect();
    if kept.is_empty() {
        return Ok(w.clone());
    }
    federation::aggregate(w, lr, &kept)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassScan {
    pub class: usize,
    pub silhouette: f64,
    pub suspect: bool,
}

/// Cluster separation of every class slice; classes at or above `min_silhouette` are suspect.
pub fn scan_classes(
    rounds: &[(usize, Vec<ClientUpdate>)],
    classes: usize,
    seed: u64,
    min_silhouette: f64,
) -> Result<Vec<ClassScan>> {
    (0..classes)
        .map(|class| {
            let trace = GradientTrace::from_rounds(rounds, class)?;
            let slices: Vec<Vec<f64>> = trace.records.iter().map(|r| r.slice.clone()).collect();
            let silhouette = if slices.len() < 2 {
                0.0
            } else {
                let pca = pca2(&slices)?;
                let km = two_means(&pca.points, seed);
                if pca.degenerate || km.degenerate {
                    0.0
                } else {
                    centroid_silhouette(&pca.points, &km.assignments, &km.centroids)
                }
            };
            Ok(ClassScan { class, silhouette, suspect: silhouette >= min_silhouette })
        })
        .collect()
}
