//! Scalar evaluation: reconstruction error, structural similarity and per-class F1.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numcore::{self, ModelSpec, ParamVector, Tensor};

/// SSIM window side used throughout the crate.
pub const SSIM_WINDOW: usize = 8;

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!("shape {:?} vs {:?}", a.shape(), b.shape())));
    }
    let sum: f64 = a.values().iter().zip(b.values()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.len() as f64)
}

/// Mean SSIM over all `window x window` uniform windows (stride 1) of the
/// trailing image plane, averaged over leading channels.
pub fn ssim(a: &Tensor, b: &Tensor, window: usize, dynamic_range: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!("shape {:?} vs {:?}", a.shape(), b.shape())));
    }
    let (h, w) = a.plane();
    if window == 0 || window > h || window > w {
        return Err(Error::invalid(format!("window {window} does not fit a {h}x{w} image")));
    }
    let c1 = (0.01 * dynamic_range).powi(2);
    let c2 = (0.03 * dynamic_range).powi(2);
    let plane = h * w;
    let channels = a.len() / plane;
    let n = (window * window) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..channels {
        let pa = &a.values()[ch * plane..(ch + 1) * plane];
        let pb = &b.values()[ch * plane..(ch + 1) * plane];
        for top in 0..=h - window {
            for left in 0..=w - window {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for r in top..top + window {
                    for c in left..left + window {
                        let (x, y) = (pa[r * w + c], pb[r * w + c]);
                        sa += x;
                        sb += y;
                        saa += x * x;
                        sbb += y * y;
                        sab += x * y;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = (saa / n - ma * ma).max(0.0);
                let vb = (sbb / n - mb * mb).max(0.0);
                let cov = sab / n - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// SSIM with the default window shrunk to fit small images.
pub fn ssim_default(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (h, w) = a.plane();
    ssim(a, b, SSIM_WINDOW.min(h).min(w), 1.0)
}

/// `counts[truth][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { counts: vec![vec![0; classes]; classes] }
    }

    pub fn from_counts(counts: Vec<Vec<usize>>) -> Result<Self> {
        let k = counts.len();
        if counts.iter().any(|row| row.len() != k) {
            return Err(Error::invalid("confusion matrix must be square"));
        }
        Ok(Self { counts })
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<usize>] {
        &self.counts
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        (0..self.classes()).map(|c| self.counts[c][c]).sum::<usize>() as f64 / total as f64
    }
}

/// One-vs-rest F1 of `class`; zero when the class is neither present nor predicted.
pub fn micro_f1(confusion: &ConfusionMatrix, class: usize) -> f64 {
    let tp = confusion.counts[class][class] as f64;
    let fn_: f64 = confusion.counts[class].iter().sum::<usize>() as f64 - tp;
    let fp: f64 = (0..confusion.classes()).map(|r| confusion.counts[r][class]).sum::<usize>() as f64 - tp;
    let denom = 2.0 * tp + fp + fn_;
    if denom == 0.0 {
        0.0
    } else {
        2.0 * tp / denom
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub per_class_f1: Vec<f64>,
    pub victim_class: Option<usize>,
    pub victim_f1: Option<f64>,
    /// Unweighted mean F1 over the non-victim classes (all classes when no victim).
    pub rest_f1: f64,
    pub confusion: ConfusionMatrix,
}

impl EvalReport {
    pub fn from_confusion(confusion: ConfusionMatrix, victim: Option<usize>) -> Self {
        let per_class_f1: Vec<f64> = (0..confusion.classes()).map(|c| micro_f1(&confusion, c)).collect();
        let rest: Vec<f64> =
            per_class_f1.iter().enumerate().filter(|(c, _)| Some(*c) != victim).map(|(_, &f)| f).collect();
        let rest_f1 = if rest.is_empty() { 0.0 } else { rest.iter().sum::<f64>() / rest.len() as f64 };
        Self {
            accuracy: confusion.accuracy(),
            victim_f1: victim.map(|v| per_class_f1[v]),
            per_class_f1,
            victim_class: victim,
            rest_f1,
            confusion,
        }
    }
}

pub fn eval_model(spec: &ModelSpec, params: &ParamVector, test: &Dataset, victim: Option<usize>) -> Result<EvalReport> {
    let mut confusion = ConfusionMatrix::new(spec.classes());
    for (x, &y) in test.images().iter().zip(test.labels()) {
        confusion.record(y, numcore::predict(spec, params, x)?);
    }
    Ok(EvalReport::from_confusion(confusion, victim))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_basics() {
        let a = Tensor::from_vec(vec![0.0, 1.0]);
        let b = Tensor::from_vec(vec![1.0, 1.0]);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(mse(&a, &b).unwrap(), 0.5);
        assert!(mse(&a, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn ssim_identity_and_extremes() {
        let a = Tensor::new(vec![8, 8], (0..64).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
        assert_eq!(ssim(&a, &a, 8, 1.0).unwrap(), 1.0);
        let zeros = Tensor::zeros(&[8, 8]);
        let ones = Tensor::filled(&[8, 8], 1.0);
        let c1 = 1e-4;
        let expected = c1 / (1.0 + c1);
        assert!((ssim(&zeros, &ones, 8, 1.0).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn ssim_window_too_large() {
        let a = Tensor::zeros(&[4, 4]);
        assert!(ssim(&a, &a, 5, 1.0).is_err());
    }

    #[test]
    fn perfect_classifier_f1() {
        let cm = ConfusionMatrix::from_counts(vec![vec![3, 0], vec![0, 5]]).unwrap();
        let report = EvalReport::from_confusion(cm, Some(0));
        assert_eq!(report.per_class_f1, vec![1.0, 1.0]);
        assert_eq!(report.accuracy, 1.0);
    }

    #[test]
    fn victim_mapped_to_target() {
        // Class 1 entirely predicted as class 2, everything else perfect.
        let cm = ConfusionMatrix::from_counts(vec![vec![10, 0, 0], vec![0, 0, 10], vec![0, 0, 10]]).unwrap();
        let report = EvalReport::from_confusion(cm, Some(1));
        assert_eq!(report.victim_f1, Some(0.0));
        assert_eq!(report.per_class_f1[0], 1.0);
        // target: tp 10, fp 10, fn 0 -> 20 / 30
        assert!((report.per_class_f1[2] - 2.0 / 3.0).abs() < 1e-15);
        assert!((report.rest_f1 - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    }
}
