use std::sync::Arc;

use rand::Rng;

use crate::error::{ensure_finite, Error, Result};
use crate::numcore::params::{GradVector, Layout, ParamVector};
use crate::numcore::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Activation::Tanh => z.tanh(),
        }
    }

    /// First derivative expressed through the activation output `h`.
    fn d1(self, h: f64) -> f64 {
        match self {
            Activation::Sigmoid => h * (1.0 - h),
            Activation::Tanh => 1.0 - h * h,
        }
    }

    /// Second derivative expressed through the activation output `h`.
    fn d2(self, h: f64) -> f64 {
        match self {
            Activation::Sigmoid => h * (1.0 - h) * (1.0 - 2.0 * h),
            Activation::Tanh => -2.0 * h * (1.0 - h * h),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::config(format!("unknown activation `{other}`"))),
        }
    }
}

/// Feed-forward classifier: affine layers with a smooth activation between
/// them and a softmax cross-entropy head on the last layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    input_shape: Vec<usize>,
    hidden: Vec<usize>,
    classes: usize,
    activation: Activation,
    layout: Arc<Layout>,
}

impl ModelSpec {
    pub fn new(input_shape: Vec<usize>, hidden: Vec<usize>, classes: usize, activation: Activation) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::invalid("input shape must have positive extents"));
        }
        if classes < 2 {
            return Err(Error::invalid("a classifier needs at least two classes"));
        }
        if hidden.contains(&0) {
            return Err(Error::invalid("hidden widths must be positive"));
        }
        let mut widths = vec![input_shape.iter().product()];
        widths.extend(&hidden);
        widths.push(classes);
        let layout = Arc::new(Layout::for_widths(&widths));
        Ok(Self { input_shape, hidden, classes, activation, layout })
    }

    /// Single affine layer straight into the softmax head.
    pub fn linear(input_shape: Vec<usize>, classes: usize) -> Result<Self> {
        Self::new(input_shape, Vec::new(), classes, Activation::Sigmoid)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    /// Width of the input to the final layer.
    pub fn penultimate_width(&self) -> usize {
        self.hidden.last().copied().unwrap_or_else(|| self.input_dim())
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut params = ParamVector::zeros(self.layout.clone());
        for layer in 0..self.layout.layers() {
            let seg = self.layout.weight(layer);
            let bound = (6.0 / (seg.rows + seg.cols) as f64).sqrt();
            for v in &mut params.values_mut()[seg.range()] {
                *v = rng.random_range(-bound..bound);
            }
        }
        params
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.same_layout(&self.layout) {
            Ok(())
        } else {
            Err(Error::invalid("parameter layout does not match the model"))
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() == self.input_shape.as_slice() {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "input shape {:?} does not match model input {:?}",
                x.shape(),
                self.input_shape
            )))
        }
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label < self.classes {
            Ok(())
        } else {
            Err(Error::invalid(format!("label {label} out of range for {} classes", self.classes)))
        }
    }
}

/// Cached activations of one forward pass.
pub(crate) struct ForwardTrace {
    /// `acts[0]` is the input; `acts[l]` is the activation output of hidden layer `l`.
    pub acts: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

fn affine(params: &ParamVector, layout: &Layout, layer: usize, input: &[f64]) -> Vec<f64> {
    let w = layout.weight(layer);
    let b = params.segment(layout.bias(layer));
    let wv = params.segment(w);
    (0..w.rows)
        .map(|r| {
            let row = &wv[r * w.cols..(r + 1) * w.cols];
            row.iter().zip(input).map(|(a, x)| a * x).sum::<f64>() + b[r]
        })
        .collect()
}

/// `W^T v` for the weight segment of `layer`.
fn affine_transpose(params: &ParamVector, layout: &Layout, layer: usize, v: &[f64]) -> Vec<f64> {
    let w = layout.weight(layer);
    let wv = params.segment(w);
    let mut out = vec![0.0; w.cols];
    for (r, &vr) in v.iter().enumerate() {
        if vr == 0.0 {
            continue;
        }
        let row = &wv[r * w.cols..(r + 1) * w.cols];
        for (o, a) in out.iter_mut().zip(row) {
            *o += a * vr;
        }
    }
    out
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

pub(crate) fn forward_trace(spec: &ModelSpec, params: &ParamVector, x: &[f64]) -> ForwardTrace {
    let layout = &spec.layout;
    let layers = layout.layers();
    let mut acts = Vec::with_capacity(layers);
    acts.push(x.to_vec());
    for layer in 0..layers - 1 {
        let z = affine(params, layout, layer, &acts[layer]);
        acts.push(z.into_iter().map(|v| spec.activation.apply(v)).collect());
    }
    let logits = affine(params, layout, layers - 1, &acts[layers - 1]);
    let probs = softmax(&logits);
    ForwardTrace { acts, logits, probs }
}

/// Class probabilities for one input.
pub fn forward(spec: &ModelSpec, params: &ParamVector, x: &Tensor) -> Result<Vec<f64>> {
    spec.check_params(params)?;
    spec.check_input(x)?;
    let trace = forward_trace(spec, params, x.values());
    ensure_finite(&trace.probs, "class probabilities")?;
    Ok(trace.probs)
}

/// Index of the most probable class (lowest index on ties).
pub fn predict(spec: &ModelSpec, params: &ParamVector, x: &Tensor) -> Result<usize> {
    let probs = forward(spec, params, x)?;
    Ok(argmax(&probs))
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-layer error signals (`dL/dz_l`) of one example, last layer first.
fn backward_deltas(spec: &ModelSpec, params: &ParamVector, trace: &ForwardTrace, label: usize) -> Vec<Vec<f64>> {
    let layout = &spec.layout;
    let layers = layout.layers();
    let mut delta: Vec<f64> = trace.probs.clone();
    delta[label] -= 1.0;
    let mut deltas = vec![Vec::new(); layers];
    for layer in (0..layers).rev() {
        if layer > 0 {
            let back = affine_transpose(params, layout, layer, &delta);
            let next: Vec<f64> = back.iter().zip(&trace.acts[layer]).map(|(g, &h)| g * spec.activation.d1(h)).collect();
            deltas[layer] = std::mem::replace(&mut delta, next);
        } else {
            deltas[0] = std::mem::take(&mut delta);
        }
    }
    deltas
}

/// Adds `scale * dL/dtheta` for one example into `out`.
fn accumulate_param_grad(spec: &ModelSpec, trace: &ForwardTrace, deltas: &[Vec<f64>], scale: f64, out: &mut [f64]) {
    let layout = &spec.layout;
    for (layer, delta) in deltas.iter().enumerate() {
        let w = layout.weight(layer);
        let input = &trace.acts[layer];
        for (r, &d) in delta.iter().enumerate() {
            let sd = scale * d;
            let row = &mut out[w.offset + r * w.cols..w.offset + (r + 1) * w.cols];
            for (o, x) in row.iter_mut().zip(input) {
                *o += sd * x;
            }
        }
        let b = layout.bias(layer);
        for (o, d) in out[b.range()].iter_mut().zip(delta) {
            *o += scale * d;
        }
    }
}

fn example_loss(trace: &ForwardTrace, label: usize) -> f64 {
    log_sum_exp(&trace.logits) - trace.logits[label]
}

fn check_batch(spec: &ModelSpec, params: &ParamVector, batch: &[(Tensor, usize)]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Degenerate("empty batch".into()));
    }
    spec.check_params(params)?;
    for (x, y) in batch {
        spec.check_input(x)?;
        spec.check_label(*y)?;
    }
    Ok(())
}

/// Mean cross-entropy over the batch and its gradient with respect to the parameters.
pub fn loss_and_param_grad(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &[(Tensor, usize)],
) -> Result<(f64, GradVector)> {
    check_batch(spec, params, batch)?;
    let scale = 1.0 / batch.len() as f64;
    let mut grad = GradVector::zeros(spec.layout.clone());
    let mut loss = 0.0;
    for (x, y) in batch {
        let trace = forward_trace(spec, params, x.values());
        let deltas = backward_deltas(spec, params, &trace, *y);
        accumulate_param_grad(spec, &trace, &deltas, scale, grad.values_mut());
        loss += scale * example_loss(&trace, *y);
    }
    ensure_finite(&[loss], "loss")?;
    ensure_finite(grad.values(), "parameter gradient")?;
    Ok((loss, grad))
}

/// One parameter gradient per example of the batch.
pub fn per_example_grads(spec: &ModelSpec, params: &ParamVector, batch: &[(Tensor, usize)]) -> Result<Vec<GradVector>> {
    check_batch(spec, params, batch)?;
    batch
        .iter()
        .map(|(x, y)| {
            let trace = forward_trace(spec, params, x.values());
            let deltas = backward_deltas(spec, params, &trace, *y);
            let mut grad = GradVector::zeros(spec.layout.clone());
            accumulate_param_grad(spec, &trace, &deltas, 1.0, grad.values_mut());
            ensure_finite(grad.values(), "per-example gradient")?;
            Ok(grad)
        })
        .collect()
}

/// Gradient-matching distance `D = ||grad_theta f(x_rec, y_rec) - target||^2`
/// and its derivative with respect to `x_rec`.
pub fn grad_match_input_grad(
    spec: &ModelSpec,
    params: &ParamVector,
    x_rec: &Tensor,
    y_rec: usize,
    target: &GradVector,
) -> Result<(f64, Tensor)> {
    let (d, mut dx) = grad_match_batch(spec, params, &[(x_rec.clone(), y_rec)], target)?;
    Ok((d, dx.pop().expect("one input")))
}

/// Batch form of [`grad_match_input_grad`]: the candidate gradient is the
/// mean of the per-example gradients, and one input derivative is returned
/// per batch slot.
pub fn grad_match_batch(
    spec: &ModelSpec,
    params: &ParamVector,
    inputs: &[(Tensor, usize)],
    target: &GradVector,
) -> Result<(f64, Vec<Tensor>)> {
    check_batch(spec, params, inputs)?;
    if !target.same_layout(&spec.layout) {
        return Err(Error::invalid("target gradient layout does not match the model"));
    }
    let scale = 1.0 / inputs.len() as f64;
    let mut traces = Vec::with_capacity(inputs.len());
    let mut grad = vec![0.0; spec.layout.total()];
    for (x, y) in inputs {
        let trace = forward_trace(spec, params, x.values());
        let deltas = backward_deltas(spec, params, &trace, *y);
        accumulate_param_grad(spec, &trace, &deltas, scale, &mut grad);
        traces.push(trace);
    }
    let residual: Vec<f64> = grad.iter().zip(target.values()).map(|(g, t)| g - t).collect();
    let distance: f64 = residual.iter().map(|r| r * r).sum();
    ensure_finite(&[distance], "gradient-matching distance")?;

    // dD/dx = grad_x <R, g(x)> with R = 2 (g - target) held fixed, i.e. the
    // input gradient of the parameter-directional derivative of the loss.
    let direction = ParamVector::from_values(spec.layout.clone(), residual.iter().map(|r| 2.0 * scale * r).collect())?;
    let mut dxs = Vec::with_capacity(inputs.len());
    for ((x, y), trace) in inputs.iter().zip(&traces) {
        let dx = directional_input_grad(spec, params, &direction, trace, *y);
        ensure_finite(&dx, "input gradient")?;
        dxs.push(Tensor::new(x.shape().to_vec(), dx)?);
    }
    Ok((distance, dxs))
}

/// Input gradient of `phi(x) = d/de L(x, theta + e * dir)` at `e = 0`.
///
/// Forward pass with tangents (`z_dot`, `h_dot`) followed by a reverse sweep
/// over both the primal and tangent streams.
fn directional_input_grad(
    spec: &ModelSpec,
    params: &ParamVector,
    dir: &ParamVector,
    trace: &ForwardTrace,
    label: usize,
) -> Vec<f64> {
    let layout = &spec.layout;
    let act = spec.activation;
    let layers = layout.layers();

    // Tangent forward: z_dot_l = dW_l h_{l-1} + W_l h_dot_{l-1} + db_l.
    let mut z_dots: Vec<Vec<f64>> = Vec::with_capacity(layers);
    let mut h_dot = vec![0.0; trace.acts[0].len()];
    for layer in 0..layers {
        let from_dir = affine(dir, layout, layer, &trace.acts[layer]);
        let from_params = if layer == 0 {
            vec![0.0; from_dir.len()]
        } else {
            let w = layout.weight(layer);
            let wv = params.segment(w);
            (0..w.rows).map(|r| wv[r * w.cols..(r + 1) * w.cols].iter().zip(&h_dot).map(|(a, b)| a * b).sum()).collect()
        };
        let z_dot: Vec<f64> = from_dir.iter().zip(&from_params).map(|(a, b)| a + b).collect();
        if layer + 1 < layers {
            h_dot = z_dot.iter().zip(&trace.acts[layer + 1]).map(|(zd, &h)| act.d1(h) * zd).collect();
        }
        z_dots.push(z_dot);
    }

    // phi = (p - e_y) . z_dot_L
    let last = layers - 1;
    let mut zdot_bar: Vec<f64> = trace.probs.clone();
    zdot_bar[label] -= 1.0;
    let p_dot_zdot: f64 = trace.probs.iter().zip(&z_dots[last]).map(|(p, z)| p * z).sum();
    let mut z_bar: Vec<f64> = trace.probs.iter().zip(&z_dots[last]).map(|(p, zd)| p * (zd - p_dot_zdot)).collect();

    for layer in (0..layers).rev() {
        let from_dir = affine_transpose(dir, layout, layer, &zdot_bar);
        let from_primal = affine_transpose(params, layout, layer, &z_bar);
        let h_bar: Vec<f64> = from_dir.iter().zip(&from_primal).map(|(a, b)| a + b).collect();
        if layer == 0 {
            return h_bar;
        }
        let hdot_bar = affine_transpose(params, layout, layer, &zdot_bar);
        let h = &trace.acts[layer];
        let zd = &z_dots[layer - 1];
        z_bar = (0..h.len()).map(|i| h_bar[i] * act.d1(h[i]) + hdot_bar[i] * act.d2(h[i]) * zd[i]).collect();
        zdot_bar = (0..h.len()).map(|i| hdot_bar[i] * act.d1(h[i])).collect();
    }
    unreachable!("layer 0 returns")
}
