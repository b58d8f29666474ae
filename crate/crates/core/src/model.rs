//! Fully connected ReLU classifier with softmax cross-entropy loss and
//! manual backpropagation, including per-sample gradient rows.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{usage, Result};
use crate::linalg::{gemm, Matrix};

/// RNG stream reserved for weight initialisation.
const INIT_STREAM: u64 = 0x1417;

/// Layer widths `[input, hidden..., classes]`, ReLU on hidden layers and
/// softmax on the output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    /// Seeds weight initialisation.
    pub seed: u64,
}

/// Contiguous parameter range `[start, start + len)` owned by one layer.
/// Within the range the `fan_out × fan_in` weight matrix (row-major) comes
/// first, followed by `fan_out` biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpan {
    pub start: usize,
    pub len: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl LayerSpan {
    #[inline]
    pub fn weights(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.fan_in * self.fan_out
    }

    #[inline]
    pub fn biases(&self) -> std::ops::Range<usize> {
        self.start + self.fan_in * self.fan_out..self.start + self.len
    }
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, seed: u64) -> Result<Self> {
        let spec = Self { layer_widths, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return usage(format!("an MLP needs at least input and output widths, got {:?}", self.layer_widths));
        }
        if self.layer_widths.contains(&0) {
            return usage(format!("layer widths must be >= 1, got {:?}", self.layer_widths));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn class_count(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    pub fn layer_count(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn layout(&self) -> Vec<LayerSpan> {
        let mut start = 0;
        self.layer_widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let len = fan_in * fan_out + fan_out;
                let span = LayerSpan { start, len, fan_in, fan_out };
                start += len;
                span
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|s| s.len).sum()
    }
}

/// Flat parameter vector with its per-layer partition.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub theta: Vec<f64>,
    pub layers: Vec<LayerSpan>,
}

impl ParamVector {
    pub fn zeros(spec: &MlpSpec) -> Self {
        let layers = spec.layout();
        Self { theta: vec![0.0; layers.iter().map(|s| s.len).sum()], layers }
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    fn check(&self, spec: &MlpSpec) -> Result<()> {
        if self.layers != spec.layout() || self.theta.len() != spec.param_count() {
            return usage(format!(
                "parameter vector of length {} does not match layer widths {:?}",
                self.theta.len(),
                spec.layer_widths
            ));
        }
        Ok(())
    }
}

/// He-style initialisation: weights `~ N(0, 2 / fan_in)`, zero biases.
pub fn init_params(spec: &MlpSpec) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(INIT_STREAM);
    let mut params = ParamVector::zeros(spec);
    for span in params.layers.clone() {
        let std = (2.0 / span.fan_in as f64).sqrt();
        for w in &mut params.theta[span.weights()] {
            let z: f64 = StandardNormal.sample(&mut rng);
            *w = std * z;
        }
    }
    params
}

/// Mini-batch of feature rows and class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn new(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return usage(format!("batch has {} input rows but {} labels", inputs.rows(), labels.len()));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Per-sample loss gradients, one row per sample (`|B| × P`).
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianBatch {
    pub matrix: Matrix,
    /// Column partition by layer; `None` for Jacobians built without it.
    pub layers: Option<Vec<LayerSpan>>,
}

impl JacobianBatch {
    pub fn new(matrix: Matrix, layers: Option<Vec<LayerSpan>>) -> Result<Self> {
        if let Some(spans) = &layers {
            let mut next = 0;
            for s in spans {
                if s.start != next {
                    return usage("layer partition is not contiguous");
                }
                next += s.len;
            }
            if next != matrix.cols() {
                return usage(format!("layer partition covers {next} columns, jacobian has {}", matrix.cols()));
            }
        }
        Ok(Self { matrix, layers })
    }

    pub fn batch_size(&self) -> usize {
        self.matrix.rows()
    }

    pub fn param_count(&self) -> usize {
        self.matrix.cols()
    }
}

/// Forward activations and output-layer quantities for one batch.
struct ForwardPass {
    /// `layer_inputs[l]` is the input to layer `l` (`|B| × fan_in`).
    layer_inputs: Vec<Matrix>,
    /// Softmax probabilities.
    probs: Matrix,
    /// Per-sample cross-entropy.
    losses: Vec<f64>,
}

fn check_inputs(spec: &MlpSpec, params: &ParamVector, batch: &LabeledBatch) -> Result<()> {
    spec.validate()?;
    params.check(spec)?;
    if batch.inputs.cols() != spec.input_width() {
        return usage(format!(
            "input width {} does not match model input width {}",
            batch.inputs.cols(),
            spec.input_width()
        ));
    }
    if batch.inputs.rows() != batch.labels.len() {
        return usage("batch rows and labels differ in length");
    }
    let classes = spec.class_count();
    if let Some(&bad) = batch.labels.iter().find(|&&y| y >= classes) {
        return usage(format!("label {bad} out of range for {classes} classes"));
    }
    Ok(())
}

/// Pre-softmax logits; hidden layer inputs are collected when `keep` is set.
fn logits(params: &ParamVector, inputs: &Matrix, keep: bool) -> (Matrix, Vec<Matrix>) {
    let rows = inputs.rows();
    let mut kept = Vec::new();
    let mut current = inputs.clone();
    let last = params.layers.len() - 1;
    for (l, span) in params.layers.iter().enumerate() {
        let w = &params.theta[span.weights()];
        let b = &params.theta[span.biases()];
        let mut z = Matrix::zeros(rows, span.fan_out);
        // z = x · Wᵀ, with W stored fan_out × fan_in.
        gemm(
            rows,
            span.fan_in,
            span.fan_out,
            1.0,
            current.as_slice(),
            (span.fan_in, 1),
            w,
            (1, span.fan_in),
            0.0,
            z.as_mut_slice(),
        );
        for r in 0..rows {
            for (v, bias) in z.row_mut(r).iter_mut().zip(b) {
                *v += bias;
                if l != last && *v <= 0.0 {
                    *v = 0.0;
                }
            }
        }
        if keep {
            kept.push(std::mem::replace(&mut current, z));
        } else {
            current = z;
        }
    }
    (current, kept)
}

fn forward_pass(params: &ParamVector, batch: &LabeledBatch) -> ForwardPass {
    let (mut probs, layer_inputs) = logits(params, &batch.inputs, true);
    let mut losses = Vec::with_capacity(batch.len());
    for (r, &y) in batch.labels.iter().enumerate() {
        let row = probs.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter() {
            sum += (v - max).exp();
        }
        let lse = max + sum.ln();
        losses.push(lse - row[y]);
        for v in row.iter_mut() {
            *v = (*v - lse).exp();
        }
    }
    ForwardPass { layer_inputs, probs, losses }
}

fn mean_of(values: &[f64]) -> f64 {
    let mut s = 0.0;
    for v in values {
        s += v;
    }
    s / values.len() as f64
}

/// Softmax probabilities (`|B| × C`) and the mean cross-entropy of the batch.
pub fn forward(spec: &MlpSpec, params: &ParamVector, batch: &LabeledBatch) -> Result<(Matrix, f64)> {
    check_inputs(spec, params, batch)?;
    if batch.is_empty() {
        return usage("forward on an empty batch");
    }
    let pass = forward_pass(params, batch);
    let loss = mean_of(&pass.losses);
    Ok((pass.probs, loss))
}

/// Forward and backward state for one batch: per-sample output deltas for
/// every layer, from which both the batch gradient and the per-sample
/// Jacobian are assembled.
pub struct Backprop {
    layers: Vec<LayerSpan>,
    layer_inputs: Vec<Matrix>,
    /// `deltas[l]` is `∂ℓ_i/∂z_l` for each sample `i` (`|B| × fan_out`),
    /// for the unaveraged per-sample loss.
    deltas: Vec<Matrix>,
    pub probs: Matrix,
    pub losses: Vec<f64>,
}

impl Backprop {
    pub fn run(spec: &MlpSpec, params: &ParamVector, batch: &LabeledBatch) -> Result<Self> {
        check_inputs(spec, params, batch)?;
        if batch.is_empty() {
            return usage("backprop on an empty batch");
        }
        let pass = forward_pass(params, batch);
        let rows = batch.len();
        let mut delta = pass.probs.clone();
        for (r, &y) in batch.labels.iter().enumerate() {
            delta.row_mut(r)[y] -= 1.0;
        }
        let mut deltas = vec![Matrix::zeros(0, 0); params.layers.len()];
        for l in (0..params.layers.len()).rev() {
            let span = params.layers[l];
            if l > 0 {
                let w = &params.theta[span.weights()];
                let mut prev = Matrix::zeros(rows, span.fan_in);
                gemm(
                    rows,
                    span.fan_out,
                    span.fan_in,
                    1.0,
                    delta.as_slice(),
                    (span.fan_out, 1),
                    w,
                    (span.fan_in, 1),
                    0.0,
                    prev.as_mut_slice(),
                );
                // ReLU derivative, taken as 0 at the kink.
                let act = &pass.layer_inputs[l];
                for (d, a) in prev.as_mut_slice().iter_mut().zip(act.as_slice()) {
                    if *a <= 0.0 {
                        *d = 0.0;
                    }
                }
                deltas[l] = std::mem::replace(&mut delta, prev);
            } else {
                deltas[l] = std::mem::replace(&mut delta, Matrix::zeros(0, 0));
            }
        }
        Ok(Self {
            layers: params.layers.clone(),
            layer_inputs: pass.layer_inputs,
            deltas,
            probs: pass.probs,
            losses: pass.losses,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.losses.len()
    }

    pub fn mean_loss(&self) -> f64 {
        mean_of(&self.losses)
    }

    /// Gradient of the mean loss.
    pub fn mean_gradient(&self) -> Vec<f64> {
        let rows = self.batch_size();
        let scale = 1.0 / rows as f64;
        let total: usize = self.layers.iter().map(|s| s.len).sum();
        let mut grad = vec![0.0; total];
        for (l, span) in self.layers.iter().enumerate() {
            let delta = &self.deltas[l];
            let input = &self.layer_inputs[l];
            // ∂W = (1/|B|) δᵀ · x
            gemm(
                span.fan_out,
                rows,
                span.fan_in,
                scale,
                delta.as_slice(),
                (1, span.fan_out),
                input.as_slice(),
                (span.fan_in, 1),
                0.0,
                &mut grad[span.weights()],
            );
            let gb = &mut grad[span.biases()];
            for r in 0..rows {
                for (g, d) in gb.iter_mut().zip(delta.row(r)) {
                    *g += d;
                }
            }
            for g in gb.iter_mut() {
                *g *= scale;
            }
        }
        grad
    }

    /// True when every stored activation and delta is finite, which is
    /// exactly when the Jacobian is.
    pub fn is_finite(&self) -> bool {
        self.deltas.iter().chain(&self.layer_inputs).all(Matrix::is_finite)
    }

    /// Gram matrix of the Jacobian rows, accumulated layer by layer without
    /// materialising the Jacobian.
    ///
    /// Sample `i`'s gradient for layer `l` is `vec(δ_i x_iᵀ) ⊕ δ_i`, so the
    /// layer's Gram block is `(Δ Δᵀ) ∘ (X Xᵀ + 1)`. Only the upper triangle is
    /// accumulated; it is mirrored at the end.
    pub fn layer_blocked_gram(&self) -> Matrix {
        let n = self.batch_size();
        let mut g = Matrix::zeros(n, n);
        let mut dd = vec![0.0; n * n];
        let mut xx = vec![0.0; n * n];
        for (l, span) in self.layers.iter().enumerate() {
            let delta = self.deltas[l].as_slice();
            let input = self.layer_inputs[l].as_slice();
            let (o, k) = (span.fan_out, span.fan_in);
            gemm(n, o, n, 1.0, delta, (o, 1), delta, (1, o), 0.0, &mut dd);
            gemm(n, k, n, 1.0, input, (k, 1), input, (1, k), 0.0, &mut xx);
            let out = g.as_mut_slice();
            for a in 0..n {
                for b in a..n {
                    out[a * n + b] += dd[a * n + b] * (xx[a * n + b] + 1.0);
                }
            }
        }
        let out = g.as_mut_slice();
        for a in 0..n {
            for b in a + 1..n {
                out[b * n + a] = out[a * n + b];
            }
        }
        g
    }

    /// Per-sample gradient rows of the unaveraged loss.
    pub fn jacobian(&self) -> JacobianBatch {
        let rows = self.batch_size();
        let total: usize = self.layers.iter().map(|s| s.len).sum();
        let mut j = Matrix::zeros(rows, total);
        for r in 0..rows {
            let out = j.row_mut(r);
            for (l, span) in self.layers.iter().enumerate() {
                let delta = self.deltas[l].row(r);
                let input = self.layer_inputs[l].row(r);
                let w = &mut out[span.weights()];
                for (o, &d) in delta.iter().enumerate() {
                    let dst = &mut w[o * span.fan_in..(o + 1) * span.fan_in];
                    if d == 0.0 {
                        continue;
                    }
                    for (x, &a) in dst.iter_mut().zip(input) {
                        *x = d * a;
                    }
                }
                out[span.biases()].copy_from_slice(delta);
            }
        }
        JacobianBatch { matrix: j, layers: Some(self.layers.clone()) }
    }
}

/// Per-sample gradients `∇θ ℓ(y_i, f(x_i, θ))`, one row per sample.
pub fn per_sample_gradients(spec: &MlpSpec, params: &ParamVector, batch: &LabeledBatch) -> Result<JacobianBatch> {
    Ok(Backprop::run(spec, params, batch)?.jacobian())
}

/// Mean loss and its gradient, without materialising the Jacobian.
pub fn loss_and_gradient(spec: &MlpSpec, params: &ParamVector, batch: &LabeledBatch) -> Result<(f64, Vec<f64>)> {
    let bp = Backprop::run(spec, params, batch)?;
    Ok((bp.mean_loss(), bp.mean_gradient()))
}

/// Arithmetic mean of the Jacobian rows, accumulated row by row.
pub fn batch_gradient(j: &JacobianBatch) -> Result<Vec<f64>> {
    let m = &j.matrix;
    if m.is_empty() {
        return usage("batch gradient of an empty jacobian");
    }
    let mut g = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (acc, v) in g.iter_mut().zip(m.row(r)) {
            *acc += v;
        }
    }
    let n = m.rows() as f64;
    for v in &mut g {
        *v /= n;
    }
    Ok(g)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted classes for every row of `inputs`, evaluated in chunks.
pub fn predict(spec: &MlpSpec, params: &ParamVector, inputs: &Matrix) -> Result<Vec<usize>> {
    Ok(scan(spec, params, inputs, None)?.0)
}

/// Predicted classes and mean cross-entropy over a labelled split.
pub fn predict_with_loss(
    spec: &MlpSpec,
    params: &ParamVector,
    inputs: &Matrix,
    labels: &[usize],
) -> Result<(Vec<usize>, f64)> {
    if inputs.rows() != labels.len() || labels.is_empty() {
        return usage("evaluation needs a non-empty split with matching labels");
    }
    let (pred, loss) = scan(spec, params, inputs, Some(labels))?;
    Ok((pred, loss.expect("labels given")))
}

fn scan(
    spec: &MlpSpec,
    params: &ParamVector,
    inputs: &Matrix,
    labels: Option<&[usize]>,
) -> Result<(Vec<usize>, Option<f64>)> {
    spec.validate()?;
    params.check(spec)?;
    if inputs.cols() != spec.input_width() {
        return usage(format!("input width {} does not match model input width {}", inputs.cols(), spec.input_width()));
    }
    if let Some(&bad) = labels.and_then(|l| l.iter().find(|&&y| y >= spec.class_count())) {
        return usage(format!("label {bad} out of range for {} classes", spec.class_count()));
    }
    const CHUNK: usize = 1000;
    let cols = inputs.cols();
    let mut pred = Vec::with_capacity(inputs.rows());
    let mut total = 0.0;
    let mut start = 0;
    while start < inputs.rows() {
        let end = (start + CHUNK).min(inputs.rows());
        let chunk = Matrix::new(end - start, cols, inputs.as_slice()[start * cols..end * cols].to_vec())?;
        let (z, _) = logits(params, &chunk, false);
        for r in 0..z.rows() {
            let row = z.row(r);
            pred.push(argmax(row));
            if let Some(labels) = labels {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in row {
                    sum += (v - max).exp();
                }
                total += max + sum.ln() - row[labels[start + r]];
            }
        }
        start = end;
    }
    Ok((pred, labels.map(|l| total / l.len() as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_batch(rng: &mut ChaCha8Rng, rows: usize, width: usize, classes: usize) -> LabeledBatch {
        let data = (0..rows * width).map(|_| rng.random_range(0.0..1.0)).collect();
        let labels = (0..rows).map(|_| rng.random_range(0..classes)).collect();
        LabeledBatch::new(Matrix::new(rows, width, data).unwrap(), labels).unwrap()
    }

    #[test]
    fn param_count_and_layout() {
        let spec = MlpSpec::new(vec![4, 3, 2], 0).unwrap();
        assert_eq!(spec.param_count(), (4 * 3 + 3) + (3 * 2 + 2));
        assert_eq!(spec.param_count(), 23);
        let layout = spec.layout();
        assert_eq!(layout[0].start, 0);
        assert_eq!(layout[1].start, 15);
        assert_eq!(layout[1].biases(), 21..23);
        assert!(MlpSpec::new(vec![4], 0).is_err());
        assert!(MlpSpec::new(vec![4, 0, 2], 0).is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let spec = MlpSpec::new(vec![6, 5, 3], 42).unwrap();
        let a = init_params(&spec);
        let b = init_params(&spec);
        assert_eq!(
            a.theta.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.theta.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        let other = init_params(&MlpSpec::new(vec![6, 5, 3], 43).unwrap());
        assert_ne!(a.theta, other.theta);
        for span in &a.layers {
            assert!(a.theta[span.biases()].iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn init_stddev_matches_he_scale() {
        let spec = MlpSpec::new(vec![500, 500, 2], 9).unwrap();
        let p = init_params(&spec);
        let w = &p.theta[p.layers[0].weights()];
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let want = (2.0f64 / 500.0).sqrt();
        assert!((var.sqrt() - want).abs() < 0.1 * want);
    }

    #[test]
    fn zero_weights_give_uniform_probabilities() {
        let spec = MlpSpec::new(vec![3, 4, 5], 0).unwrap();
        let params = ParamVector::zeros(&spec);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = random_batch(&mut rng, 7, 3, 5);
        let (probs, loss) = forward(&spec, &params, &batch).unwrap();
        for v in probs.as_slice() {
            assert!((v - 0.2).abs() < 1e-15);
        }
        assert!((loss - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn large_logits_do_not_overflow() {
        // Single linear layer 1 -> 2 with logits (1000, 0).
        let spec = MlpSpec::new(vec![1, 2], 0).unwrap();
        let mut params = ParamVector::zeros(&spec);
        params.theta[0] = 1000.0;
        let batch = LabeledBatch::new(Matrix::from_rows(&[[1.0]]).unwrap(), vec![0]).unwrap();
        let (probs, loss) = forward(&spec, &params, &batch).unwrap();
        assert!((probs.get(0, 0) - 1.0).abs() < 1e-15);
        assert!(probs.get(0, 1) < 1e-300);
        assert!(loss.is_finite() && loss >= 0.0 && loss < 1e-300);
    }

    #[test]
    fn width_mismatch_is_usage_error() {
        let spec = MlpSpec::new(vec![3, 2], 0).unwrap();
        let params = ParamVector::zeros(&spec);
        let batch = LabeledBatch::new(Matrix::zeros(1, 4), vec![0]).unwrap();
        assert!(forward(&spec, &params, &batch).is_err());
        assert!(LabeledBatch::new(Matrix::zeros(2, 3), vec![0]).is_err());
    }

    #[test]
    fn probability_rows_sum_to_one() {
        let spec = MlpSpec::new(vec![6, 8, 4], 3).unwrap();
        let params = init_params(&spec);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = random_batch(&mut rng, 16, 6, 4);
        let (probs, _) = forward(&spec, &params, &batch).unwrap();
        for r in 0..probs.rows() {
            let s: f64 = probs.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_of_jacobian_rows_is_batch_gradient() {
        let spec = MlpSpec::new(vec![6, 5, 4, 3], 4).unwrap();
        let params = init_params(&spec);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = random_batch(&mut rng, 9, 6, 3);
        let bp = Backprop::run(&spec, &params, &batch).unwrap();
        let from_rows = batch_gradient(&bp.jacobian()).unwrap();
        let direct = bp.mean_gradient();
        for (a, b) in from_rows.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicate_samples_give_identical_rows() {
        let spec = MlpSpec::new(vec![4, 6, 3], 5).unwrap();
        let params = init_params(&spec);
        let x = Matrix::from_rows(&[[0.1, 0.5, 0.9, 0.2], [0.7, 0.1, 0.3, 0.3], [0.1, 0.5, 0.9, 0.2]]).unwrap();
        let batch = LabeledBatch::new(x, vec![2, 0, 2]).unwrap();
        let j = per_sample_gradients(&spec, &params, &batch).unwrap();
        assert_eq!(j.matrix.row(0), j.matrix.row(2));
        assert_ne!(j.matrix.row(0), j.matrix.row(1));
        assert_eq!(j.layers.as_ref().unwrap(), &spec.layout());
    }

    #[test]
    fn batch_gradient_small_cases() {
        let one = JacobianBatch::new(Matrix::from_rows(&[[1.0, -2.0, 3.0]]).unwrap(), None).unwrap();
        assert_eq!(batch_gradient(&one).unwrap(), vec![1.0, -2.0, 3.0]);
        let opp = JacobianBatch::new(Matrix::from_rows(&[[1.0, -2.0], [-1.0, 2.0]]).unwrap(), None).unwrap();
        assert_eq!(batch_gradient(&opp).unwrap(), vec![0.0, 0.0]);
        let empty = JacobianBatch::new(Matrix::zeros(0, 3), None).unwrap();
        assert!(batch_gradient(&empty).is_err());
    }

    #[test]
    fn batch_gradient_matches_column_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data: Vec<f64> = (0..7 * 11).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = Matrix::new(7, 11, data).unwrap();
        let g = batch_gradient(&JacobianBatch::new(m.clone(), None).unwrap()).unwrap();
        for c in 0..11 {
            let mut s = 0.0;
            for r in 0..7 {
                s += m.get(r, c);
            }
            assert!((g[c] - s / 7.0).abs() < 1e-12);
        }
    }

    #[test]
    fn jacobian_partition_must_be_contiguous() {
        let bad = vec![LayerSpan { start: 1, len: 2, fan_in: 1, fan_out: 1 }];
        assert!(JacobianBatch::new(Matrix::zeros(1, 3), Some(bad)).is_err());
    }

    #[test]
    fn argmax_ties_pick_lowest_index() {
        assert_eq!(argmax(&[0.25, 0.25, 0.25, 0.25]), 0);
        assert_eq!(argmax(&[0.1, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[0.1, 0.2, 0.7]), 2);
    }

    #[test]
    fn factored_gram_matches_dense_jacobian() {
        let spec = MlpSpec::new(vec![7, 6, 5, 4], 3).unwrap();
        let params = init_params(&spec);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for rows in [1, 2, 9] {
            let batch = random_batch(&mut rng, rows, 7, 4);
            let bp = Backprop::run(&spec, &params, &batch).unwrap();
            assert!(bp.is_finite());
            let dense = crate::linalg::gram_from_jacobian(&bp.jacobian().matrix).unwrap();
            let fact = bp.layer_blocked_gram();
            let scale = crate::linalg::frobenius_norm_sq(&dense).sqrt();
            for (x, y) in fact.as_slice().iter().zip(dense.as_slice()) {
                assert!((x - y).abs() <= 1e-12 * scale.max(1.0), "{x} vs {y}");
            }
            for a in 0..rows {
                for b in 0..rows {
                    assert_eq!(fact.get(a, b).to_bits(), fact.get(b, a).to_bits());
                }
            }
        }
    }
}
