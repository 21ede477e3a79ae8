//! Dense-vector math and the small classifiers trained by clients.
//!
//! Two model families share one flat parameter layout:
//!
//! * softmax regression (`hidden_dim == 0`): `W[C×D] | b[C]`
//! * one-hidden-layer MLP with tanh: `W1[H×D] | b1[H] | W2[C×H] | b2[C]`
//!
//! All matrices are row-major. The same MLP code backs the Q-network of
//! the selection agent, where the "classes" are the per-client outputs.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are clamped to this floor before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    /// Uniform in `[-scale, scale]` per coordinate.
    pub fn uniform<R: Rng + ?Sized>(len: usize, scale: f64, rng: &mut R) -> Self {
        ParamVector((0..len).map(|_| rng.random_range(-scale..=scale)).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Default per-coordinate scale for freshly initialized weights.
pub const INIT_SCALE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    /// Zero selects softmax regression.
    pub hidden_dim: usize,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn new(input_dim: usize, hidden_dim: usize, num_classes: usize) -> Result<Self> {
        let spec = ModelSpec {
            input_dim,
            hidden_dim,
            num_classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim < 1 {
            return Err(Error::invalid("model input_dim must be >= 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("model num_classes must be >= 2"));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let (d, h, c) = (self.input_dim, self.hidden_dim, self.num_classes);
        if h == 0 {
            c * d + c
        } else {
            h * d + h + c * h + c
        }
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        ParamVector::uniform(self.param_count(), INIT_SCALE, rng)
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                context: "parameter vector",
                expected: self.param_count(),
                actual: params.len(),
            });
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                context: "feature vector",
                expected: self.input_dim,
                actual: x.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    /// Row-major `[n × input_dim]`.
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub input_dim: usize,
    pub num_classes: usize,
    /// Size of one sample on the wire or in memory, in bits.
    pub bits_per_sample: u64,
}

impl LabeledDataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<usize>,
        input_dim: usize,
        num_classes: usize,
        bits_per_sample: u64,
    ) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::invalid("dataset input_dim must be >= 1"));
        }
        if features.len() != labels.len() * input_dim {
            return Err(Error::DimensionMismatch {
                context: "dataset features",
                expected: labels.len() * input_dim,
                actual: features.len(),
            });
        }
        if bits_per_sample == 0 {
            return Err(Error::invalid("bits_per_sample must be > 0"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(LabeledDataset {
            features,
            labels,
            input_dim,
            num_classes,
            bits_per_sample,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let mut features = Vec::with_capacity(indices.len() * self.input_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        LabeledDataset {
            features,
            labels,
            input_dim: self.input_dim,
            num_classes: self.num_classes,
            bits_per_sample: self.bits_per_sample,
        }
    }

    /// Total size of the dataset in bits.
    pub fn size_bits(&self) -> u64 {
        self.len() as u64 * self.bits_per_sample
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub velocity: ParamVector,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl OptimizerState {
    pub fn new(len: usize, learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(format!("momentum {momentum} not in [0,1)")));
        }
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate {learning_rate} must be positive"
            )));
        }
        Ok(OptimizerState {
            velocity: ParamVector::zeros(len),
            learning_rate,
            momentum,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

/// Hidden activations (empty for softmax regression) and output logits.
struct Activations {
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut Vec<f64>) {
    let cols = x.len();
    out.clear();
    out.extend(
        w.chunks_exact(cols)
            .zip(b)
            .map(|(row, bias)| bias + row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>()),
    );
}

fn activations(params: &[f64], spec: &ModelSpec, x: &[f64]) -> Activations {
    let (d, h, c) = (spec.input_dim, spec.hidden_dim, spec.num_classes);
    let mut logits = Vec::with_capacity(c);
    if h == 0 {
        let (w, b) = params.split_at(c * d);
        affine(w, b, x, &mut logits);
        Activations {
            hidden: Vec::new(),
            logits,
        }
    } else {
        let (w1, rest) = params.split_at(h * d);
        let (b1, rest) = rest.split_at(h);
        let (w2, b2) = rest.split_at(c * h);
        let mut hidden = Vec::with_capacity(h);
        affine(w1, b1, x, &mut hidden);
        hidden.iter_mut().for_each(|v| *v = v.tanh());
        affine(w2, b2, &hidden, &mut logits);
        Activations { hidden, logits }
    }
}

/// Accumulate `scale · ∂(d_out · output)/∂params` into `grad`.
fn backward(
    params: &[f64],
    spec: &ModelSpec,
    x: &[f64],
    acts: &Activations,
    d_out: &[f64],
    scale: f64,
    grad: &mut [f64],
) {
    let (d, h, c) = (spec.input_dim, spec.hidden_dim, spec.num_classes);
    if h == 0 {
        let (gw, gb) = grad.split_at_mut(c * d);
        for (k, &g) in d_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let g = g * scale;
            gb[k] += g;
            for (gw_kj, &xj) in gw[k * d..(k + 1) * d].iter_mut().zip(x) {
                *gw_kj += g * xj;
            }
        }
    } else {
        let w2 = &params[h * d + h..h * d + h + c * h];
        let (gw1, rest) = grad.split_at_mut(h * d);
        let (gb1, rest) = rest.split_at_mut(h);
        let (gw2, gb2) = rest.split_at_mut(c * h);
        let mut d_hidden = vec![0.0; h];
        for (k, &g) in d_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let g = g * scale;
            gb2[k] += g;
            let w2_row = &w2[k * h..(k + 1) * h];
            for j in 0..h {
                gw2[k * h + j] += g * acts.hidden[j];
                d_hidden[j] += g * w2_row[j];
            }
        }
        for j in 0..h {
            let dz = d_hidden[j] * (1.0 - acts.hidden[j] * acts.hidden[j]);
            if dz == 0.0 {
                continue;
            }
            gb1[j] += dz;
            for (g, &xi) in gw1[j * d..(j + 1) * d].iter_mut().zip(x) {
                *g += dz * xi;
            }
        }
    }
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

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Raw network outputs (logits for classifiers, Q-values for the agent).
pub fn outputs(params: &ParamVector, spec: &ModelSpec, x: &[f64]) -> Result<Vec<f64>> {
    spec.check_params(params)?;
    spec.check_input(x)?;
    Ok(activations(&params.0, spec, x).logits)
}

/// Gradient of `Σ_k d_out[k] · output_k(x)` with respect to the parameters.
pub fn output_vjp(
    params: &ParamVector,
    spec: &ModelSpec,
    x: &[f64],
    d_out: &[f64],
    grad: &mut ParamVector,
) -> Result<()> {
    spec.check_params(params)?;
    spec.check_input(x)?;
    if d_out.len() != spec.num_classes {
        return Err(Error::DimensionMismatch {
            context: "output cotangent",
            expected: spec.num_classes,
            actual: d_out.len(),
        });
    }
    spec.check_params(grad)?;
    let acts = activations(&params.0, spec, x);
    backward(&params.0, spec, x, &acts, d_out, 1.0, &mut grad.0);
    Ok(())
}

/// Class probabilities for one sample.
pub fn forward(params: &ParamVector, spec: &ModelSpec, x: &[f64]) -> Result<Vec<f64>> {
    let mut z = outputs(params, spec, x)?;
    softmax_in_place(&mut z);
    Ok(z)
}

fn check_batch(spec: &ModelSpec, batch: &LabeledDataset) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    spec.check_input(batch.row(0))?;
    if batch.num_classes > spec.num_classes {
        return Err(Error::DimensionMismatch {
            context: "dataset classes",
            expected: spec.num_classes,
            actual: batch.num_classes,
        });
    }
    Ok(())
}

fn loss_on(params: &[f64], spec: &ModelSpec, data: &LabeledDataset, idx: &[usize]) -> f64 {
    let total: f64 = idx
        .iter()
        .map(|&i| {
            let mut z = activations(params, spec, data.row(i)).logits;
            softmax_in_place(&mut z);
            -z[data.labels[i]].max(PROB_FLOOR).ln()
        })
        .sum();
    total / idx.len() as f64
}

fn grad_on(params: &[f64], spec: &ModelSpec, data: &LabeledDataset, idx: &[usize]) -> Vec<f64> {
    let mut grad = vec![0.0; params.len()];
    let scale = 1.0 / idx.len() as f64;
    for &i in idx {
        let x = data.row(i);
        let acts = activations(params, spec, x);
        let mut d_out = acts.logits.clone();
        softmax_in_place(&mut d_out);
        d_out[data.labels[i]] -= 1.0;
        backward(params, spec, x, &acts, &d_out, scale, &mut grad);
    }
    grad
}

/// Mean cross-entropy over the batch.
pub fn loss(params: &ParamVector, spec: &ModelSpec, batch: &LabeledDataset) -> Result<f64> {
    spec.check_params(params)?;
    check_batch(spec, batch)?;
    let idx: Vec<usize> = (0..batch.len()).collect();
    Ok(loss_on(&params.0, spec, batch, &idx))
}

/// Analytic gradient of [`loss`].
pub fn grad(params: &ParamVector, spec: &ModelSpec, batch: &LabeledDataset) -> Result<ParamVector> {
    spec.check_params(params)?;
    check_batch(spec, batch)?;
    let idx: Vec<usize> = (0..batch.len()).collect();
    Ok(ParamVector(grad_on(&params.0, spec, batch, &idx)))
}

/// Momentum SGD: `v' = μ·v + g`, `w' = w − η·v'`.
pub fn sgd_step(
    params: &ParamVector,
    grad: &ParamVector,
    opt: &OptimizerState,
) -> Result<(ParamVector, OptimizerState)> {
    if grad.len() != params.len() || opt.velocity.len() != params.len() {
        return Err(Error::DimensionMismatch {
            context: "sgd step",
            expected: params.len(),
            actual: if grad.len() != params.len() {
                grad.len()
            } else {
                opt.velocity.len()
            },
        });
    }
    let velocity: Vec<f64> = opt
        .velocity
        .0
        .iter()
        .zip(&grad.0)
        .map(|(v, g)| opt.momentum * v + g)
        .collect();
    let next: Vec<f64> = params
        .0
        .iter()
        .zip(&velocity)
        .map(|(w, v)| w - opt.learning_rate * v)
        .collect();
    Ok((
        ParamVector(next),
        OptimizerState {
            velocity: ParamVector(velocity),
            learning_rate: opt.learning_rate,
            momentum: opt.momentum,
        },
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalTrainOutput {
    pub params: ParamVector,
    pub optimizer: OptimizerState,
    /// Set when the dataset was empty and no step was taken.
    pub skipped_empty: bool,
}

/// `epochs` passes of mini-batch momentum SGD over `data`.
///
/// Indices are reshuffled once per epoch from `rng`; each mini-batch is
/// summed in ascending index order so the result does not depend on the
/// order within a batch.
pub fn local_train<R: Rng + ?Sized>(
    params: &ParamVector,
    spec: &ModelSpec,
    data: &LabeledDataset,
    epochs: usize,
    batch_size: usize,
    opt: OptimizerState,
    rng: &mut R,
) -> Result<LocalTrainOutput> {
    if epochs == 0 || batch_size == 0 {
        return Err(Error::invalid("local epochs and batch size must be >= 1"));
    }
    spec.check_params(params)?;
    if data.is_empty() {
        log::warn!("local_train called on an empty dataset; parameters left unchanged");
        return Ok(LocalTrainOutput {
            params: params.clone(),
            optimizer: opt,
            skipped_empty: true,
        });
    }
    check_batch(spec, data)?;

    let mut w = params.clone();
    let mut opt = opt;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut batch = Vec::with_capacity(batch_size);
    for _ in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(batch_size) {
            batch.clear();
            batch.extend_from_slice(chunk);
            batch.sort_unstable();
            let g = ParamVector(grad_on(&w.0, spec, data, &batch));
            let (nw, nopt) = sgd_step(&w, &g, &opt)?;
            w = nw;
            opt = nopt;
        }
    }
    if !w.is_finite() {
        return Err(Error::NonFinite("local training diverged".into()));
    }
    Ok(LocalTrainOutput {
        params: w,
        optimizer: opt,
        skipped_empty: false,
    })
}

pub fn predict(params: &ParamVector, spec: &ModelSpec, x: &[f64]) -> Result<usize> {
    Ok(argmax(&outputs(params, spec, x)?))
}

/// Accuracy and macro-F1 from predicted and true labels.
///
/// Macro-F1 averages over classes that occur in either the labels or the
/// predictions.
pub fn classification_metrics(predicted: &[usize], actual: &[usize], num_classes: usize) -> Metrics {
    let n = actual.len();
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fn_ = vec![0usize; num_classes];
    let mut correct = 0;
    for (&p, &y) in predicted.iter().zip(actual) {
        if p == y {
            correct += 1;
            tp[y] += 1;
        } else {
            fp[p] += 1;
            fn_[y] += 1;
        }
    }
    let mut f1_sum = 0.0;
    let mut present = 0;
    for c in 0..num_classes {
        let denom = 2 * tp[c] + fp[c] + fn_[c];
        if denom == 0 {
            continue;
        }
        present += 1;
        f1_sum += 2.0 * tp[c] as f64 / denom as f64;
    }
    Metrics {
        accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
        macro_f1: if present == 0 {
            0.0
        } else {
            f1_sum / present as f64
        },
    }
}

pub fn evaluate(params: &ParamVector, spec: &ModelSpec, data: &LabeledDataset) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation data"));
    }
    spec.check_params(params)?;
    check_batch(spec, data)?;
    let predicted: Vec<usize> = (0..data.len())
        .map(|i| argmax(&activations(&params.0, spec, data.row(i)).logits))
        .collect();
    Ok(classification_metrics(
        &predicted,
        &data.labels,
        spec.num_classes,
    ))
}
