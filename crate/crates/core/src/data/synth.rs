use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numcore::{plane_of, Tensor};
use crate::rng::{self, tag};

/// Per-pixel standard deviation of samples around their class center.
pub const BLOB_SPREAD: f64 = 0.1;

/// Gaussian class blobs in pixel space.
///
/// Each class center is `0.5 + separation * s / 2` with `s` a random
/// `{-1, +1}` sign pattern drawn on 2x2 pixel cells (single pixels for
/// planes smaller than 4x4), so `separation = 1` gives binary centers and
/// `separation = 0` puts every center at mid-gray. Samples add
/// `BLOB_SPREAD`-scaled Gaussian noise; everything is clamped to `[0, 1]`.
/// Samples are ordered class by class.
pub fn synth_blobs(classes: usize, dims: &[usize], per_class: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if classes == 0 || per_class == 0 || dims.is_empty() || dims.contains(&0) {
        return Err(Error::invalid("synth_blobs needs positive class, sample and pixel counts"));
    }
    let pixels: usize = dims.iter().product();
    let (h, w) = plane_of(dims);
    let block = if h >= 4 && w >= 4 { 2 } else { 1 };
    let (gh, gw) = (h.div_ceil(block), w.div_ceil(block));
    let channels = pixels / (h * w);
    let mut center_rng = rng::stream(seed, &[tag::INIT, 0]);
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let cells: Vec<f64> = (0..channels * gh * gw)
                .map(|_| {
                    let sign = if center_rng.random::<bool>() { 1.0 } else { -1.0 };
                    (0.5 + 0.5 * separation * sign).clamp(0.0, 1.0)
                })
                .collect();
            (0..pixels)
                .map(|p| {
                    let (ch, r, c) = (p / (h * w), (p / w) % h, p % w);
                    cells[(ch * gh + r / block) * gw + c / block]
                })
                .collect()
        })
        .collect();

    let mut sample_rng = rng::stream(seed, &[tag::INIT, 1]);
    let mut images = Vec::with_capacity(classes * per_class);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (class, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            let values = center
                .iter()
                .map(|&c| {
                    let noise: f64 = StandardNormal.sample(&mut sample_rng);
                    (c + BLOB_SPREAD * noise).clamp(0.0, 1.0)
                })
                .collect();
            images.push(Tensor::new(dims.to_vec(), values)?);
            labels.push(class);
        }
    }
    Dataset::new(images, labels, classes.max(2))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_separation_collapses_centers() {
        let ds = synth_blobs(3, &[4, 4], 200, 0.0, 1).unwrap();
        // Class means all sit near 0.5.
        for class in 0..3 {
            let idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels()[i] == class).collect();
            let mean: f64 = idx.iter().map(|&i| ds.images()[i].values()[0]).sum::<f64>() / idx.len() as f64;
            assert!((mean - 0.5).abs() < 0.03, "class {class} mean {mean}");
        }
    }

    #[test]
    fn same_seed_same_data() {
        let a = synth_blobs(4, &[3, 3], 5, 0.8, 42).unwrap();
        let b = synth_blobs(4, &[3, 3], 5, 0.8, 42).unwrap();
        assert_eq!(a, b);
        let c = synth_blobs(4, &[3, 3], 5, 0.8, 43).unwrap();
        assert_ne!(a, c);
    }
}
