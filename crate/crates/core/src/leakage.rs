//! Gradient-matching reconstruction of private training inputs from a
//! shared gradient, at either the client-SGD or the server-aggregation
//! attack surface.

use rand::Rng;

use crate::error::{Error, Result};
use crate::metrics;
use crate::numcore::{self, plane_of, GradVector, ModelSpec, ParamVector, Tensor};
use crate::rng::{self, tag};

/// Largest batch the reconstruction handles jointly.
pub const MAX_ATTACK_BATCH: usize = 4;

/// MSE below which a reconstruction counts as leaked.
pub const DEFAULT_SUCCESS_MSE: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackSurface {
    /// Single-step per-example gradient taken during local training.
    ClientSgd,
    /// Per-client accumulated gradient as received by the server.
    ServerAggregation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetGradient {
    pub surface: AttackSurface,
    pub grad: GradVector,
    pub client: Option<usize>,
    pub round: Option<usize>,
}

impl TargetGradient {
    pub fn client_sgd(grad: GradVector) -> Self {
        Self { surface: AttackSurface::ClientSgd, grad, client: None, round: None }
    }

    pub fn server_aggregation(grad: GradVector, client: usize, round: usize) -> Self {
        Self { surface: AttackSurface::ServerAggregation, grad, client: Some(client), round: Some(round) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitStrategy {
    /// i.i.d. uniform pixels.
    Random,
    /// 2x2 grid of constant blocks ("1/4 division").
    Quarter,
    /// 4x4 grid of constant blocks ("1/16 division").
    Sixteenth,
    /// 2x2 block checkerboard of 0 and 1.
    Binary,
    /// 2x2 grid of red/green/blue/white blocks.
    Rgb,
    /// Copy of a same-class exemplar image.
    Exemplar,
}

impl std::str::FromStr for InitStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "random" => InitStrategy::Random,
            "quarter" | "pattern4" => InitStrategy::Quarter,
            "sixteenth" | "pattern16" => InitStrategy::Sixteenth,
            "binary" => InitStrategy::Binary,
            "rgb" => InitStrategy::Rgb,
            "exemplar" => InitStrategy::Exemplar,
            other => return Err(Error::config(format!("unknown init strategy `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttackOptimizer {
    /// Plain descent with a constant step.
    GradientDescent,
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl AttackOptimizer {
    pub fn adam() -> Self {
        AttackOptimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub init: InitStrategy,
    pub max_iters: usize,
    pub loss_threshold: f64,
    pub lr: f64,
    pub optimizer: AttackOptimizer,
    pub seed: u64,
    /// Inputs reconstructed jointly (at most [`MAX_ATTACK_BATCH`]).
    pub batch: usize,
    pub success_mse: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            init: InitStrategy::Random,
            max_iters: 1000,
            loss_threshold: 1e-10,
            lr: 1.0,
            optimizer: AttackOptimizer::GradientDescent,
            seed: 0,
            batch: 1,
            success_mse: DEFAULT_SUCCESS_MSE,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::config("attack needs at least one iteration"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("attack learning rate must be positive"));
        }
        if !(self.loss_threshold >= 0.0) {
            return Err(Error::config("loss threshold must be non-negative"));
        }
        if self.batch == 0 || self.batch > MAX_ATTACK_BATCH {
            return Err(Error::config(format!("attack batch must lie in 1..={MAX_ATTACK_BATCH}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconResult {
    /// One reconstruction per batch slot.
    pub x_rec: Vec<Tensor>,
    pub y_rec: Vec<usize>,
    /// Descent steps taken.
    pub iterations: usize,
    pub final_distance: f64,
    pub distance_trace: Vec<f64>,
    /// Per-iteration MSE / SSIM against the ground truth, when supplied.
    pub mse_trace: Vec<f64>,
    pub ssim_trace: Vec<f64>,
    pub mse: Option<f64>,
    pub ssim: Option<f64>,
    pub success: bool,
    /// First iteration whose MSE fell below the success threshold.
    pub first_success: Option<usize>,
    /// Set when a non-finite value stopped the attack; the traces hold what was computed.
    pub aborted: Option<String>,
}

impl ReconResult {
    pub fn image(&self) -> &Tensor {
        &self.x_rec[0]
    }

    pub fn label(&self) -> usize {
        self.y_rec[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeakageEval {
    pub mse: f64,
    pub ssim: f64,
    pub success: bool,
}

pub fn evaluate_leakage(x_rec: &Tensor, x: &Tensor) -> Result<LeakageEval> {
    evaluate_leakage_with(x_rec, x, DEFAULT_SUCCESS_MSE)
}

pub fn evaluate_leakage_with(x_rec: &Tensor, x: &Tensor, success_mse: f64) -> Result<LeakageEval> {
    let mse = metrics::mse(x_rec, x)?;
    let ssim = metrics::ssim_default(x_rec, x)?;
    Ok(LeakageEval { mse, ssim, success: mse < success_mse })
}

fn last_bias_grad<'a>(target: &'a TargetGradient, spec: &ModelSpec) -> Result<&'a [f64]> {
    if !target.grad.same_layout(spec.layout()) {
        return Err(Error::invalid("target gradient layout does not match the model"));
    }
    Ok(target.grad.segment(spec.layout().last_bias()))
}

/// Label of a single-example gradient: the unique negative entry of the
/// final-layer bias gradient, else the entry of largest magnitude.
pub fn infer_label(target: &TargetGradient, spec: &ModelSpec) -> Result<usize> {
    let bias = last_bias_grad(target, spec)?;
    let negatives: Vec<usize> = (0..bias.len()).filter(|&c| bias[c] < 0.0).collect();
    if negatives.len() == 1 {
        return Ok(negatives[0]);
    }
    let mut best = 0;
    for c in 1..bias.len() {
        if bias[c].abs() > bias[best].abs() {
            best = c;
        }
    }
    Ok(best)
}

/// Labels for a batch of `count` examples: the `count` most negative bias entries.
pub fn infer_labels(target: &TargetGradient, spec: &ModelSpec, count: usize) -> Result<Vec<usize>> {
    if count == 1 {
        return Ok(vec![infer_label(target, spec)?]);
    }
    let bias = last_bias_grad(target, spec)?;
    if count > bias.len() {
        return Err(Error::invalid("more batch slots than classes"));
    }
    let mut order: Vec<usize> = (0..bias.len()).collect();
    order.sort_by(|&a, &b| bias[a].total_cmp(&bias[b]).then(a.cmp(&b)));
    Ok(order[..count].to_vec())
}

/// Dummy attack seed with the target input's shape.
pub fn init_seed<R: Rng + ?Sized>(
    strategy: InitStrategy,
    shape: &[usize],
    exemplar: Option<&Tensor>,
    rng: &mut R,
) -> Result<Tensor> {
    let len: usize = shape.iter().product();
    let (h, w) = plane_of(shape);
    let channels = len / (h * w).max(1);
    let blocks = |grid: usize, value: &mut dyn FnMut(usize, usize, usize) -> f64| -> Vec<f64> {
        let mut out = vec![0.0; len];
        for ch in 0..channels {
            for r in 0..h {
                for c in 0..w {
                    let (br, bc) = ((r * grid / h).min(grid - 1), (c * grid / w).min(grid - 1));
                    out[ch * h * w + r * w + c] = value(ch, br, bc);
                }
            }
        }
        out
    };
    let values = match strategy {
        InitStrategy::Random => (0..len).map(|_| rng.random::<f64>()).collect(),
        InitStrategy::Quarter | InitStrategy::Sixteenth => {
            let grid = if strategy == InitStrategy::Quarter { 2 } else { 4 };
            let table: Vec<f64> = (0..channels * grid * grid).map(|_| rng.random::<f64>()).collect();
            blocks(grid, &mut |ch, br, bc| table[(ch * grid + br) * grid + bc])
        }
        InitStrategy::Binary => {
            let phase = usize::from(rng.random::<bool>());
            blocks(2, &mut |_, br, bc| ((br + bc + phase) % 2) as f64)
        }
        InitStrategy::Rgb => {
            const COLORS: [[f64; 3]; 4] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 1.0]];
            let shift = rng.random_range(0..4);
            blocks(2, &mut |ch, br, bc| {
                let color = COLORS[(br * 2 + bc + shift) % 4];
                if channels == 3 {
                    color[ch]
                } else {
                    color.iter().sum::<f64>() / 3.0
                }
            })
        }
        InitStrategy::Exemplar => {
            let ex = exemplar.ok_or_else(|| Error::config("exemplar initialization needs an exemplar image"))?;
            if ex.shape() != shape {
                return Err(Error::invalid("exemplar shape does not match the input shape"));
            }
            ex.values().iter().map(|v| v.clamp(0.0, 1.0)).collect()
        }
    };
    Tensor::new(shape.to_vec(), values)
}

struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

/// Iterative gradient matching (optionally jointly over a small batch).
pub fn reconstruct(
    spec: &ModelSpec,
    params: &ParamVector,
    target: &TargetGradient,
    cfg: &AttackConfig,
    ground_truth: Option<&[Tensor]>,
    exemplar: Option<&Tensor>,
) -> Result<ReconResult> {
    cfg.validate()?;
    let labels = infer_labels(target, spec, cfg.batch)?;
    if let Some(gt) = ground_truth {
        if gt.len() != cfg.batch {
            return Err(Error::invalid("ground truth count does not match the attack batch"));
        }
    }
    let mut inputs: Vec<(Tensor, usize)> = labels
        .iter()
        .enumerate()
        .map(|(slot, &y)| {
            let mut r = rng::stream(cfg.seed, &[tag::ATTACK, slot as u64]);
            Ok((init_seed(cfg.init, spec.input_shape(), exemplar, &mut r)?, y))
        })
        .collect::<Result<_>>()?;

    let mut adam = AdamState {
        m: inputs.iter().map(|(x, _)| vec![0.0; x.len()]).collect(),
        v: inputs.iter().map(|(x, _)| vec![0.0; x.len()]).collect(),
        t: 0,
    };
    let mut distance_trace = Vec::new();
    let mut mse_trace = Vec::new();
    let mut ssim_trace = Vec::new();
    let mut aborted = None;
    let mut steps = 0;
    loop {
        if let Some(gt) = ground_truth {
            let eval = match_ground_truth(&inputs, gt)?;
            mse_trace.push(eval.0);
            ssim_trace.push(eval.1);
        }
        let (distance, dxs) = match numcore::grad_match_batch(spec, params, &inputs, &target.grad) {
            Ok(v) => v,
            Err(Error::Numeric(msg)) => {
                aborted = Some(msg);
                break;
            }
            Err(e) => return Err(e),
        };
        distance_trace.push(distance);
        if distance < cfg.loss_threshold || steps == cfg.max_iters {
            break;
        }
        adam.t += 1;
        for (slot, ((x, _), dx)) in inputs.iter_mut().zip(&dxs).enumerate() {
            let xs = x.values_mut();
            match cfg.optimizer {
                AttackOptimizer::GradientDescent => {
                    for (xi, gi) in xs.iter_mut().zip(dx.values()) {
                        *xi = (*xi - cfg.lr * gi).clamp(0.0, 1.0);
                    }
                }
                AttackOptimizer::Adam { beta1, beta2, eps } => {
                    let (m, v) = (&mut adam.m[slot], &mut adam.v[slot]);
                    let c1 = 1.0 - beta1.powi(adam.t);
                    let c2 = 1.0 - beta2.powi(adam.t);
                    for i in 0..xs.len() {
                        let g = dx.values()[i];
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                        let step = cfg.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                        xs[i] = (xs[i] - step).clamp(0.0, 1.0);
                    }
                }
            }
        }
        steps += 1;
    }

    let final_distance = distance_trace.last().copied().unwrap_or(f64::NAN);
    let (mse, ssim) = match (mse_trace.last(), ssim_trace.last()) {
        (Some(&m), Some(&s)) => (Some(m), Some(s)),
        _ => (None, None),
    };
    let success = aborted.is_none() && mse.is_some_and(|m| m < cfg.success_mse);
    let first_success = mse_trace.iter().position(|&m| m < cfg.success_mse);
    let (x_rec, y_rec) = inputs.into_iter().unzip();
    Ok(ReconResult {
        x_rec,
        y_rec,
        iterations: steps,
        final_distance,
        distance_trace,
        mse_trace,
        ssim_trace,
        mse,
        ssim,
        success,
        first_success,
        aborted,
    })
}

/// Mean MSE / SSIM under the slot-to-truth assignment with the lowest total MSE.
fn match_ground_truth(inputs: &[(Tensor, usize)], truth: &[Tensor]) -> Result<(f64, f64)> {
    let n = inputs.len();
    let mut cost = vec![vec![0.0; n]; n];
    for (i, (x, _)) in inputs.iter().enumerate() {
        for (j, t) in truth.iter().enumerate() {
            cost[i][j] = metrics::mse(x, t)?;
        }
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in permutations(n) {
        let total: f64 = perm.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
        if best.as_ref().is_none_or(|(b, _)| total < *b) {
            best = Some((total, perm));
        }
    }
    let (total, perm) = best.expect("at least one permutation");
    let mut ssim = 0.0;
    for (i, &j) in perm.iter().enumerate() {
        ssim += metrics::ssim_default(&inputs[i].0, &truth[j])?;
    }
    Ok((total / n as f64, ssim / n as f64))
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for perm in permutations(n - 1) {
        for pos in 0..=perm.len() {
            let mut p = perm.clone();
            p.insert(pos, n - 1);
            out.push(p);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Layout;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn bias_target(spec: &ModelSpec, bias: &[f64]) -> TargetGradient {
        let mut g = GradVector::zeros(spec.layout().clone());
        let seg = spec.layout().last_bias();
        g.values_mut()[seg.range()].copy_from_slice(bias);
        TargetGradient::client_sgd(g)
    }

    #[test]
    fn label_rules() {
        let spec = ModelSpec::linear(vec![2], 3).unwrap();
        assert_eq!(infer_label(&bias_target(&spec, &[-0.5, 0.2, 0.3]), &spec).unwrap(), 0);
        assert_eq!(infer_label(&bias_target(&spec, &[0.1, 0.9, 0.2]), &spec).unwrap(), 1);
        assert_eq!(infer_label(&bias_target(&spec, &[-0.3, -0.3, 0.1]), &spec).unwrap(), 0);
    }

    #[test]
    fn batch_labels_take_most_negative() {
        let spec = ModelSpec::linear(vec![2], 4).unwrap();
        let t = bias_target(&spec, &[0.2, -0.4, 0.1, -0.6]);
        assert_eq!(infer_labels(&t, &spec, 2).unwrap(), vec![3, 1]);
    }

    #[test]
    fn layout_mismatch_rejected() {
        let spec = ModelSpec::linear(vec![2], 3).unwrap();
        let other = GradVector::zeros(Arc::new(Layout::for_widths(&[3, 3])));
        assert!(infer_label(&TargetGradient::client_sgd(other), &spec).is_err());
    }

    #[test]
    fn patterns() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bin = init_seed(InitStrategy::Binary, &[4, 4], None, &mut rng).unwrap();
        let mut distinct: Vec<f64> = bin.values().to_vec();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        assert_eq!(distinct, vec![0.0, 1.0]);

        let q = init_seed(InitStrategy::Quarter, &[8, 8], None, &mut rng).unwrap();
        for (br, bc) in [(0, 0), (0, 4), (4, 0), (4, 4)] {
            let v = q.values()[br * 8 + bc];
            for r in br..br + 4 {
                for c in bc..bc + 4 {
                    assert_eq!(q.values()[r * 8 + c], v);
                }
            }
        }

        let s = init_seed(InitStrategy::Sixteenth, &[8, 8], None, &mut rng).unwrap();
        assert_eq!(s.values()[0], s.values()[9]);
        assert!(init_seed(InitStrategy::Exemplar, &[8, 8], None, &mut rng).is_err());
    }

    #[test]
    fn random_init_deterministic() {
        let a = init_seed(InitStrategy::Random, &[5, 5], None, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = init_seed(InitStrategy::Random, &[5, 5], None, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        assert!(a.values().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn evaluation_extremes() {
        let x = Tensor::zeros(&[4, 4]);
        let same = evaluate_leakage(&x, &x).unwrap();
        assert_eq!((same.mse, same.ssim, same.success), (0.0, 1.0, true));
        let far = evaluate_leakage(&Tensor::filled(&[4, 4], 1.0), &x).unwrap();
        assert_eq!(far.mse, 1.0);
        assert!(!far.success);
    }

    #[test]
    fn permutations_cover_all() {
        assert_eq!(permutations(3).len(), 6);
        assert_eq!(permutations(1), vec![vec![0]]);
    }
}
