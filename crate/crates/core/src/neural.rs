//! Fully connected perceptron with sigmoid hidden layers and a softmax
//! output, trained by plain SGD on the mean cross-entropy.
//!
//! Parameters live in one flat vector: for each layer the weights in
//! row-major `(out, in)` order, followed by that layer's biases. This is
//! the unit exchanged between users and the aggregator.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::error::{invalid, Error, Result};
use crate::rng;

pub const DEFAULT_DIMS: [usize; 3] = [24, 20, 8];

/// Lower clamp on predicted probabilities inside the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

pub fn param_count(dims: &[usize]) -> Result<usize> {
    if dims.len() < 2 {
        return Err(invalid(format!("a network needs at least two layer sizes, got {}", dims.len())));
    }
    if dims.contains(&0) {
        return Err(invalid("layer sizes must be positive"));
    }
    Ok(dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    dims: Vec<usize>,
    values: Vec<f64>,
}

impl MlpParams {
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Ok(Self { dims: dims.to_vec(), values: vec![0.0; param_count(dims)?] })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self> {
        let mut p = Self::zeros(dims)?;
        let mut rng = rng::derive_stream(seed, "mlp-init", 0);
        let mut offset = 0;
        for w in dims.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            let limit = (6.0 / (n_in + n_out) as f64).sqrt();
            for v in &mut p.values[offset..offset + n_in * n_out] {
                *v = rng.gen_range(-limit..=limit);
            }
            offset += n_in * n_out + n_out;
        }
        Ok(p)
    }

    pub fn from_values(dims: &[usize], values: Vec<f64>) -> Result<Self> {
        let expected = param_count(dims)?;
        if values.len() != expected {
            return Err(Error::DimensionMismatch { expected, got: values.len() });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite parameter".into()));
        }
        Ok(Self { dims: dims.to_vec(), values })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.dims.last().expect("at least two layers")
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &MlpParams) -> bool {
        self.dims == other.dims
    }

    fn check_sample(&self, x: &[f64], label: Option<usize>) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), got: x.len() });
        }
        if let Some(l) = label {
            if l >= self.num_classes() {
                return Err(Error::OutOfRange { index: l, len: self.num_classes() });
            }
        }
        Ok(())
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// Per-layer activation buffers reused across samples.
struct Scratch {
    acts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
    /// Start of each layer's block in the flat parameter vector.
    offsets: Vec<usize>,
}

impl Scratch {
    fn new(dims: &[usize]) -> Self {
        let offsets = dims
            .windows(2)
            .scan(0, |o, w| {
                let start = *o;
                *o += w[0] * w[1] + w[1];
                Some(start)
            })
            .collect();
        Self {
            acts: dims.iter().map(|&n| vec![0.0; n]).collect(),
            deltas: dims.iter().map(|&n| vec![0.0; n]).collect(),
            offsets,
        }
    }
}

/// Fills `scratch.acts`; the last layer holds pre-softmax logits when
/// `softmax` is false, probabilities otherwise.
fn forward_into(params: &MlpParams, x: &[f64], scratch: &mut Scratch, softmax: bool) {
    let dims = &params.dims;
    let layers = dims.len() - 1;
    scratch.acts[0].copy_from_slice(x);
    let mut offset = 0;
    for l in 0..layers {
        let (n_in, n_out) = (dims[l], dims[l + 1]);
        let weights = &params.values[offset..offset + n_in * n_out];
        let biases = &params.values[offset + n_in * n_out..offset + n_in * n_out + n_out];
        let (before, after) = scratch.acts.split_at_mut(l + 1);
        let input = &before[l];
        let output = &mut after[0];
        for (j, out) in output.iter_mut().enumerate() {
            let row = &weights[j * n_in..(j + 1) * n_in];
            let z = biases[j] + row.iter().zip(input).map(|(w, a)| w * a).sum::<f64>();
            *out = if l + 1 < layers { sigmoid(z) } else { z };
        }
        offset += n_in * n_out + n_out;
    }
    if softmax {
        softmax_in_place(&mut scratch.acts[layers]);
    }
}

/// Adds `scale * ∂(-ln p_label)/∂θ` to `grad`. Requires a preceding
/// `forward_into(.., softmax = true)` on the same sample.
fn backward_into(params: &MlpParams, label: usize, scratch: &mut Scratch, grad: &mut [f64], scale: f64) {
    let dims = &params.dims;
    let layers = dims.len() - 1;
    {
        let probs = &scratch.acts[layers];
        let delta = &mut scratch.deltas[layers];
        for (k, d) in delta.iter_mut().enumerate() {
            *d = probs[k] - if k == label { 1.0 } else { 0.0 };
        }
    }
    for l in (0..layers).rev() {
        let (n_in, n_out) = (dims[l], dims[l + 1]);
        let off = scratch.offsets[l];
        let (d_lo, d_hi) = scratch.deltas.split_at_mut(l + 1);
        let delta = &d_hi[0];
        let input = &scratch.acts[l];
        for j in 0..n_out {
            let dj = delta[j] * scale;
            let row = &mut grad[off + j * n_in..off + (j + 1) * n_in];
            for (g, a) in row.iter_mut().zip(input) {
                *g += dj * a;
            }
            grad[off + n_in * n_out + j] += dj;
        }
        if l > 0 {
            let weights = &params.values[off..off + n_in * n_out];
            let prev = &mut d_lo[l];
            for (i, p) in prev.iter_mut().enumerate() {
                let back: f64 = (0..n_out).map(|j| weights[j * n_in + i] * delta[j]).sum();
                let a = input[i];
                *p = back * a * (1.0 - a);
            }
        }
    }
}

pub fn forward(params: &MlpParams, x: &[f64]) -> Result<Vec<f64>> {
    params.check_sample(x, None)?;
    let mut scratch = Scratch::new(&params.dims);
    forward_into(params, x, &mut scratch, true);
    Ok(scratch.acts.pop().expect("output layer"))
}

/// Index of the most probable class (lowest index on ties).
pub fn predict(params: &MlpParams, x: &[f64]) -> Result<usize> {
    params.check_sample(x, None)?;
    let mut scratch = Scratch::new(&params.dims);
    forward_into(params, x, &mut scratch, false);
    Ok(crate::channel::argmax(scratch.acts.last().expect("output layer")))
}

fn check_batch(params: &MlpParams, batch: &[Sample]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    batch.iter().try_for_each(|s| params.check_sample(&s.x, Some(s.label)))
}

/// Mean cross-entropy (natural log) over `batch`.
pub fn loss(params: &MlpParams, batch: &[Sample]) -> Result<f64> {
    check_batch(params, batch)?;
    let mut scratch = Scratch::new(&params.dims);
    let layers = params.dims.len() - 1;
    let total: f64 = batch
        .iter()
        .map(|s| {
            forward_into(params, &s.x, &mut scratch, true);
            -scratch.acts[layers][s.label].max(PROB_FLOOR).ln()
        })
        .sum();
    Ok(total / batch.len() as f64)
}

/// Exact gradient of [`loss`], laid out like the parameter vector.
pub fn gradient(params: &MlpParams, batch: &[Sample]) -> Result<Vec<f64>> {
    check_batch(params, batch)?;
    let mut scratch = Scratch::new(&params.dims);
    let mut grad = vec![0.0; params.len()];
    let scale = 1.0 / batch.len() as f64;
    for s in batch {
        forward_into(params, &s.x, &mut scratch, true);
        backward_into(params, s.label, &mut scratch, &mut grad, scale);
    }
    Ok(grad)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 0.05, epochs: 1, batch_size: 1, shuffle_seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size must be positive"));
        }
        Ok(())
    }
}

/// Mini-batch SGD. Each epoch reshuffles with a stream derived from
/// `(shuffle_seed, epoch)`. `on_epoch` sees the parameters after every epoch.
pub fn sgd_train_with<F>(params: &MlpParams, data: &[Sample], cfg: &TrainConfig, mut on_epoch: F) -> Result<MlpParams>
where
    F: FnMut(usize, &MlpParams) -> Result<()>,
{
    cfg.validate()?;
    check_batch(params, data).map_err(|e| match e {
        Error::Empty(_) => Error::Empty("training set"),
        other => other,
    })?;
    let mut model = params.clone();
    let mut scratch = Scratch::new(&model.dims);
    let mut grad = vec![0.0; model.len()];
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::derive_stream(cfg.shuffle_seed, "sgd-epoch", epoch as u64));
        for chunk in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                forward_into(&model, &data[i].x, &mut scratch, true);
                backward_into(&model, data[i].label, &mut scratch, &mut grad, scale);
            }
            for (v, g) in model.values.iter_mut().zip(&grad) {
                *v -= cfg.learning_rate * g;
            }
        }
        if !model.is_finite() {
            return Err(Error::Numerical(format!("parameters diverged in epoch {epoch}")));
        }
        on_epoch(epoch, &model)?;
    }
    Ok(model)
}

pub fn sgd_train(params: &MlpParams, data: &[Sample], cfg: &TrainConfig) -> Result<MlpParams> {
    sgd_train_with(params, data, cfg, |_, _| Ok(()))
}

/// Fraction of samples whose argmax prediction equals the label.
pub fn accuracy(params: &MlpParams, data: &[Sample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    data.iter().try_for_each(|s| params.check_sample(&s.x, Some(s.label)))?;
    let correct: usize = data
        .par_chunks(2048)
        .map(|chunk| {
            let mut scratch = Scratch::new(&params.dims);
            chunk
                .iter()
                .filter(|s| {
                    forward_into(params, &s.x, &mut scratch, false);
                    crate::channel::argmax(scratch.acts.last().expect("output layer")) == s.label
                })
                .count()
        })
        .sum();
    Ok(correct as f64 / data.len() as f64)
}

const MAGIC: &[u8; 4] = b"MLPW";
const FORMAT_VERSION: u16 = 1;

/// Binary checkpoint, all integers and floats little-endian:
///
/// ```text
/// magic    4 bytes  "MLPW"
/// version  u16      1
/// layers   u16      number of layer sizes L
/// dims     L × u32
/// count    u64      number of parameters N
/// values   N × f64
/// ```
pub fn serialize(params: &MlpParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(header_len(params.dims.len()) + 8 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.dims.len() as u16).to_le_bytes());
    for &d in &params.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in &params.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn header_len(layers: usize) -> usize {
    4 + 2 + 2 + 4 * layers + 8
}

pub fn deserialize(bytes: &[u8]) -> Result<MlpParams> {
    fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8]> {
        let end = at.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| {
            Error::Codec(format!("truncated: need {} bytes at offset {}, have {}", n, at, bytes.len()))
        })?;
        let s = &bytes[*at..end];
        *at = end;
        Ok(s)
    }
    let mut at = 0;
    if take(bytes, &mut at, 4)? != MAGIC {
        return Err(Error::Codec("bad magic".into()));
    }
    let version = u16::from_le_bytes(take(bytes, &mut at, 2)?.try_into().expect("2 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Codec(format!("unsupported version {version}")));
    }
    let layers = u16::from_le_bytes(take(bytes, &mut at, 2)?.try_into().expect("2 bytes")) as usize;
    let dims = (0..layers)
        .map(|_| Ok(u32::from_le_bytes(take(bytes, &mut at, 4)?.try_into().expect("4 bytes")) as usize))
        .collect::<Result<Vec<_>>>()?;
    let count = u64::from_le_bytes(take(bytes, &mut at, 8)?.try_into().expect("8 bytes")) as usize;
    let expected = param_count(&dims).map_err(|e| Error::Codec(e.to_string()))?;
    if count != expected {
        return Err(Error::Codec(format!("header declares {count} values, dims imply {expected}")));
    }
    let payload = &bytes[at..];
    if payload.len() != 8 * count {
        return Err(Error::Codec(format!("length mismatch: expected {} payload bytes, got {}", 8 * count, payload.len())));
    }
    let values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok(MlpParams { dims, values })
}

/// Per-coordinate input standardization frozen into a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    /// Population statistics; a coordinate with no spread keeps unit scale.
    pub fn fit(samples: &[Sample]) -> Result<Self> {
        let first = samples.first().ok_or(Error::Empty("standardizer fit set"))?;
        let dim = first.x.len();
        let n = samples.len() as f64;
        let mut mean = vec![0.0; dim];
        for s in samples {
            if s.x.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: s.x.len() });
            }
            for (m, v) in mean.iter_mut().zip(&s.x) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; dim];
        for s in samples {
            for ((acc, v), m) in var.iter_mut().zip(&s.x).zip(&mean) {
                *acc += (v - m) * (v - m) / n;
            }
        }
        let std = var.into_iter().map(|v| if v.sqrt() > 1e-9 { v.sqrt() } else { 1.0 }).collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn apply_all(&self, samples: &[Sample]) -> Vec<Sample> {
        samples.iter().map(|s| Sample { x: self.apply(&s.x), ..s.clone() }).collect()
    }
}

/// A trained network together with the input scaling it was trained under.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub params: MlpParams,
    pub scaler: Standardizer,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassifierJson {
    dims: Vec<usize>,
    values: Vec<f64>,
    input_mean: Vec<f64>,
    input_std: Vec<f64>,
}

impl Classifier {
    pub fn new(params: MlpParams, scaler: Standardizer) -> Result<Self> {
        if scaler.dim() != params.input_dim() || scaler.std.len() != scaler.dim() {
            return Err(Error::DimensionMismatch { expected: params.input_dim(), got: scaler.dim() });
        }
        Ok(Self { params, scaler })
    }

    /// Predicted SBS for a raw (unscaled) observation vector.
    pub fn predict(&self, raw_x: &[f64]) -> Result<usize> {
        predict(&self.params, &self.scaler.apply(raw_x))
    }

    pub fn accuracy(&self, raw: &[Sample]) -> Result<f64> {
        accuracy(&self.params, &self.scaler.apply_all(raw))
    }

    pub fn to_json(&self) -> String {
        let j = ClassifierJson {
            dims: self.params.dims.clone(),
            values: self.params.values.clone(),
            input_mean: self.scaler.mean.clone(),
            input_std: self.scaler.std.clone(),
        };
        serde_json::to_string_pretty(&j).expect("classifier is always serializable")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let j: ClassifierJson = serde_json::from_str(text).map_err(|e| Error::Codec(e.to_string()))?;
        let params = MlpParams::from_values(&j.dims, j.values)?;
        Self::new(params, Standardizer { mean: j.input_mean, std: j.input_std })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn sample(x: Vec<f64>, label: usize) -> Sample {
        Sample { x, label, group_id: 1 }
    }

    fn random_batch(dim: usize, classes: usize, n: usize, seed: u64) -> Vec<Sample> {
        let mut r = rng::stream(seed);
        (0..n).map(|_| sample((0..dim).map(|_| r.gen_range(-2.0..2.0)).collect(), r.gen_range(0..classes))).collect()
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(param_count(&DEFAULT_DIMS).unwrap(), 668);
        assert_eq!(param_count(&[1, 1]).unwrap(), 2);
        assert_eq!(param_count(&[24, 20, 8]).unwrap(), 24 * 20 + 20 + 20 * 8 + 8);
        assert!(param_count(&[24]).is_err());
        assert!(param_count(&[24, 0, 8]).is_err());
    }

    #[test]
    fn zero_params_give_uniform_output() {
        let p = MlpParams::zeros(&DEFAULT_DIMS).unwrap();
        let out = forward(&p, &[3.0; 24]).unwrap();
        for v in out {
            assert_abs_diff_eq!(v, 0.125, epsilon = 1e-15);
        }
        assert!(matches!(forward(&p, &[0.0; 23]), Err(Error::DimensionMismatch { expected: 24, got: 23 })));
    }

    #[test]
    fn output_bias_shift_invariance() {
        let p = MlpParams::init(&DEFAULT_DIMS, 4).unwrap();
        let x: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
        let base = forward(&p, &x).unwrap();
        let mut q = p.clone();
        let n = q.len();
        for v in &mut q.values_mut()[n - 8..] {
            *v += 3.7;
        }
        for (a, b) in base.iter().zip(forward(&q, &x).unwrap()) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn loss_examples() {
        let uniform = MlpParams::zeros(&DEFAULT_DIMS).unwrap();
        let b = random_batch(24, 8, 5, 1);
        assert_abs_diff_eq!(loss(&uniform, &b).unwrap(), 8f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(8f64.ln(), 2.07944, epsilon = 1e-5);

        // Huge bias on class 2 drives its probability to 1.
        let mut confident = MlpParams::zeros(&[2, 3]).unwrap();
        confident.values_mut()[6 + 2] = 800.0;
        assert_abs_diff_eq!(loss(&confident, &[sample(vec![0.1, 0.2], 2)]).unwrap(), 0.0, epsilon = 1e-12);
        // Confidently wrong stays finite thanks to the clamp.
        assert_abs_diff_eq!(loss(&confident, &[sample(vec![0.1, 0.2], 0)]).unwrap(), -PROB_FLOOR.ln(), epsilon = 1e-9);

        let p = MlpParams::init(&DEFAULT_DIMS, 2).unwrap();
        let b = random_batch(24, 8, 2, 3);
        let mean = (loss(&p, &b[..1]).unwrap() + loss(&p, &b[1..]).unwrap()) / 2.0;
        assert_abs_diff_eq!(loss(&p, &b).unwrap(), mean, epsilon = 1e-12);
        assert!(matches!(loss(&p, &[]), Err(Error::Empty(_))));
    }

    /// Central finite differences, independent of the backward pass.
    fn numeric_gradient(p: &MlpParams, batch: &[Sample], h: f64) -> Vec<f64> {
        (0..p.len())
            .map(|i| {
                let mut plus = p.clone();
                plus.values_mut()[i] += h;
                let mut minus = p.clone();
                minus.values_mut()[i] -= h;
                (loss(&plus, batch).unwrap() - loss(&minus, batch).unwrap()) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..3 {
            let p = MlpParams::init(&[6, 5, 4, 3], seed).unwrap();
            let batch = random_batch(6, 3, 4, 100 + seed);
            let g = gradient(&p, &batch).unwrap();
            let n = numeric_gradient(&p, &batch, 1e-5);
            for (a, b) in g.iter().zip(&n) {
                let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
                assert!(rel < 1e-4 || (a - b).abs() < 1e-9, "analytic {a} numeric {b}");
            }
        }
    }

    #[test]
    fn gradient_vanishes_at_one_parameter_minimum() {
        // [1,1]: a single logit, softmax over one class is always 1.
        let p = MlpParams::from_values(&[1, 1], vec![0.3, -0.2]).unwrap();
        let g = gradient(&p, &[sample(vec![1.5], 0)]).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-8));
        // Two classes, symmetric data: zero parameters are a strict minimum.
        let p = MlpParams::zeros(&[1, 2]).unwrap();
        let batch = [sample(vec![1.0], 0), sample(vec![1.0], 1), sample(vec![-1.0], 0), sample(vec![-1.0], 1)];
        assert!(gradient(&p, &batch).unwrap().iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn batch_gradient_is_mean_of_singles() {
        let p = MlpParams::init(&DEFAULT_DIMS, 8).unwrap();
        let b = random_batch(24, 8, 2, 9);
        let g = gradient(&p, &b).unwrap();
        let g0 = gradient(&p, &b[..1]).unwrap();
        let g1 = gradient(&p, &b[1..]).unwrap();
        for i in 0..g.len() {
            assert_abs_diff_eq!(g[i], (g0[i] + g1[i]) / 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_epochs_is_identity() {
        let p = MlpParams::init(&DEFAULT_DIMS, 1).unwrap();
        let data = random_batch(24, 8, 10, 1);
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        assert_eq!(sgd_train(&p, &data, &cfg).unwrap(), p);
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn single_step_matches_gradient() {
        let p = MlpParams::init(&DEFAULT_DIMS, 1).unwrap();
        let data = random_batch(24, 8, 1, 2);
        let lr = 0.07;
        let trained = sgd_train(&p, &data, &TrainConfig { learning_rate: lr, epochs: 1, batch_size: 1, shuffle_seed: 5 }).unwrap();
        let g = gradient(&p, &data).unwrap();
        for i in 0..p.len() {
            assert_abs_diff_eq!(trained.values()[i], p.values()[i] - lr * g[i], epsilon = 1e-15);
        }
    }

    #[test]
    fn training_is_deterministic_and_validated() {
        let p = MlpParams::init(&DEFAULT_DIMS, 1).unwrap();
        let data = random_batch(24, 8, 30, 2);
        let cfg = TrainConfig { learning_rate: 0.05, epochs: 3, batch_size: 4, shuffle_seed: 9 };
        assert_eq!(sgd_train(&p, &data, &cfg).unwrap(), sgd_train(&p, &data, &cfg).unwrap());
        assert!(matches!(sgd_train(&p, &[], &cfg), Err(Error::Empty(_))));
        assert!(sgd_train(&p, &data, &TrainConfig { learning_rate: 0.0, ..cfg.clone() }).is_err());
        assert!(sgd_train(&p, &data, &TrainConfig { batch_size: 0, ..cfg }).is_err());
    }

    #[test]
    fn epoch_losses_mostly_decrease() {
        // Small learnable set: label = argmax of the first four inputs.
        let mut non_increasing = 0;
        let mut total = 0;
        for seed in 0..10 {
            let mut r = rng::stream(1000 + seed);
            let data: Vec<Sample> = (0..40)
                .map(|_| {
                    let x: Vec<f64> = (0..8).map(|_| r.gen_range(-1.0..1.0)).collect();
                    let label = crate::channel::argmax(&x[..4]);
                    sample(x, label)
                })
                .collect();
            let p = MlpParams::init(&[8, 6, 4], seed).unwrap();
            let cfg = TrainConfig { learning_rate: 0.01, epochs: 40, batch_size: 1, shuffle_seed: seed };
            let mut prev = loss(&p, &data).unwrap();
            sgd_train_with(&p, &data, &cfg, |_, m| {
                let l = loss(m, &data)?;
                total += 1;
                if l <= prev {
                    non_increasing += 1;
                }
                prev = l;
                Ok(())
            })
            .unwrap();
        }
        assert!(non_increasing as f64 >= 0.95 * total as f64, "{non_increasing}/{total}");
    }

    #[test]
    fn serialized_layout() {
        let p = MlpParams::init(&DEFAULT_DIMS, 3).unwrap();
        let bytes = serialize(&p);
        assert_eq!(bytes.len(), header_len(3) + 8 * 668);
        assert_eq!(&bytes[..4], b"MLPW");
        assert_eq!(deserialize(&bytes).unwrap(), p);
        assert!(matches!(deserialize(&bytes[..bytes.len() - 3]), Err(Error::Codec(_))));
        assert!(matches!(deserialize(&bytes[..10]), Err(Error::Codec(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(deserialize(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(deserialize(&extra).is_err());
    }

    #[test]
    fn standardizer_fit() {
        let data = vec![sample(vec![1.0, 5.0], 0), sample(vec![3.0, 5.0], 0)];
        let s = Standardizer::fit(&data).unwrap();
        assert_eq!(s.mean, vec![2.0, 5.0]);
        assert_eq!(s.std, vec![1.0, 1.0]);
        assert_eq!(s.apply(&[3.0, 6.0]), vec![1.0, 1.0]);
    }

    #[test]
    fn classifier_json_roundtrip() {
        let c = Classifier::new(MlpParams::init(&DEFAULT_DIMS, 1).unwrap(), Standardizer::identity(24)).unwrap();
        let back = Classifier::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert!(Classifier::new(MlpParams::init(&DEFAULT_DIMS, 1).unwrap(), Standardizer::identity(23)).is_err());
        assert!(Classifier::from_json("{\"dims\":[24,20,8]}").is_err());
    }

    proptest! {
        #[test]
        fn codec_roundtrip_bitwise(seed in any::<u64>(), hidden in 1usize..12) {
            let p = MlpParams::init(&[5, hidden, 3], seed).unwrap();
            let q = deserialize(&serialize(&p)).unwrap();
            prop_assert!(p.values().iter().zip(q.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
            prop_assert_eq!(p.dims(), q.dims());
        }

        #[test]
        fn softmax_is_a_distribution(seed in any::<u64>(), xs in prop::collection::vec(-50.0..50.0f64, 24)) {
            let p = MlpParams::init(&DEFAULT_DIMS, seed).unwrap();
            let out = forward(&p, &xs).unwrap();
            prop_assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(out.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}
