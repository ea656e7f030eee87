//! Dense multilayer perceptron with hand-written backpropagation.
//!
//! Parameters are stored as one flat `f64` vector so the federated layer can
//! treat every model as a point in parameter space. Layer `l` occupies
//! `(in_l + 1) * out_l` consecutive entries: the `out_l x in_l` weight matrix
//! in row-major order followed by the `out_l` biases.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::rng::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    #[default]
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

/// Shared architecture: input dim, hidden dims, class count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelArch {
    pub layer_sizes: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl ModelArch {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        let arch = ModelArch {
            layer_sizes,
            activation,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::invalid("architecture needs at least 2 layer sizes"));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::invalid("layer sizes must be positive"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn classes(&self) -> usize {
        *self.layer_sizes.last().expect("validated arch")
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| (w[0] + 1) * w[1])
            .sum()
    }

    fn layers(&self) -> impl Iterator<Item = Layer> + '_ {
        let mut offset = 0;
        self.layer_sizes.windows(2).map(move |w| {
            let layer = Layer {
                inputs: w[0],
                outputs: w[1],
                offset,
            };
            offset += (w[0] + 1) * w[1];
            layer
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    inputs: usize,
    outputs: usize,
    offset: usize,
}

impl Layer {
    fn weight(&self, o: usize, i: usize) -> usize {
        self.offset + o * self.inputs + i
    }

    fn bias(&self, o: usize) -> usize {
        self.offset + self.outputs * self.inputs + o
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check_len(r.len(), cols)?;
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// New matrix holding the given rows, in order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &r in idx {
            data.extend_from_slice(self.row(r));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }
}

/// Flat parameter vector tagged with the architecture it was shaped for.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub values: Vec<f64>,
    pub arch: ModelArch,
}

impl ModelParams {
    pub fn new(arch: ModelArch, values: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if values.len() != arch.param_count() {
            return Err(Error::DimensionMismatch {
                expected: arch.param_count(),
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model parameters"));
        }
        Ok(ModelParams { values, arch })
    }

    pub fn zeros(arch: ModelArch) -> Self {
        let n = arch.param_count();
        ModelParams {
            values: vec![0.0; n],
            arch,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Same architecture, new values. Length must match.
    pub(crate) fn with_values(&self, values: Vec<f64>) -> ModelParams {
        debug_assert_eq!(values.len(), self.values.len());
        ModelParams {
            values,
            arch: self.arch.clone(),
        }
    }
}

/// Labeled samples.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        check_len(inputs.rows(), labels.len())?;
        Ok(Batch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Batch {
        Batch {
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_model(arch: &ModelArch, seed: u64) -> ModelParams {
    let mut rng = rng::rng_for(seed, &[tag::INIT]);
    let mut values = vec![0.0; arch.param_count()];
    for layer in arch.layers() {
        let s = (6.0 / (layer.inputs + layer.outputs) as f64).sqrt();
        for o in 0..layer.outputs {
            for i in 0..layer.inputs {
                values[layer.weight(o, i)] = rng.random_range(-s..s);
            }
        }
    }
    ModelParams {
        values,
        arch: arch.clone(),
    }
}

struct Trace {
    /// Pre-activations per layer, one `rows x outputs` buffer each.
    pre: Vec<Vec<f64>>,
    /// Post-activations per layer; the last entry holds softmax probabilities.
    post: Vec<Vec<f64>>,
}

fn check_inputs(model: &ModelParams, inputs: &Matrix) -> Result<()> {
    if model.values.len() != model.arch.param_count() {
        return Err(Error::DimensionMismatch {
            expected: model.arch.param_count(),
            actual: model.values.len(),
        });
    }
    if inputs.cols() != model.arch.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.arch.input_dim(),
            actual: inputs.cols(),
        });
    }
    Ok(())
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn run_forward(model: &ModelParams, inputs: &Matrix) -> Trace {
    let w = &model.values;
    let n = inputs.rows();
    let layers: Vec<Layer> = model.arch.layers().collect();
    let last = layers.len() - 1;
    let mut pre = Vec::with_capacity(layers.len());
    let mut post: Vec<Vec<f64>> = Vec::with_capacity(layers.len());

    for (l, layer) in layers.iter().enumerate() {
        let prev: &[f64] = if l == 0 {
            inputs.as_slice()
        } else {
            &post[l - 1]
        };
        let mut z = vec![0.0; n * layer.outputs];
        for r in 0..n {
            let x = &prev[r * layer.inputs..(r + 1) * layer.inputs];
            for o in 0..layer.outputs {
                let row = &w[layer.weight(o, 0)..layer.weight(o, 0) + layer.inputs];
                let dot: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
                z[r * layer.outputs + o] = dot + w[layer.bias(o)];
            }
        }
        let a = if l == last {
            let mut p = z.clone();
            for r in 0..n {
                softmax_in_place(&mut p[r * layer.outputs..(r + 1) * layer.outputs]);
            }
            p
        } else {
            z.iter().map(|&v| model.arch.activation.apply(v)).collect()
        };
        pre.push(z);
        post.push(a);
    }
    Trace { pre, post }
}

/// Class probabilities, one row per input.
pub fn forward(model: &ModelParams, inputs: &Matrix) -> Result<Matrix> {
    check_inputs(model, inputs)?;
    let mut trace = run_forward(model, inputs);
    let probs = trace.post.pop().expect("at least one layer");
    Matrix::new(inputs.rows(), model.arch.classes(), probs)
}

/// Argmax class per input row; ties go to the lower class.
pub fn predict(model: &ModelParams, inputs: &Matrix) -> Result<Vec<usize>> {
    let probs = forward(model, inputs)?;
    Ok((0..probs.rows())
        .map(|r| {
            let row = probs.row(r);
            let mut best = 0;
            for (c, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect())
}

/// Mean cross-entropy over the batch and its exact gradient.
pub fn supervised_loss_grad(model: &ModelParams, batch: &Batch) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    check_inputs(model, &batch.inputs)?;
    let classes = model.arch.classes();
    if let Some(&bad) = batch.labels.iter().find(|&&y| y >= classes) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }

    let n = batch.len();
    let inv_n = 1.0 / n as f64;
    let trace = run_forward(model, &batch.inputs);
    let layers: Vec<Layer> = model.arch.layers().collect();
    let last = layers.len() - 1;

    // Loss via log-sum-exp on the logits.
    let logits = &trace.pre[last];
    let mut loss = 0.0;
    for (r, &y) in batch.labels.iter().enumerate() {
        let row = &logits[r * classes..(r + 1) * classes];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
    }
    loss *= inv_n;
    if !loss.is_finite() {
        return Err(Error::NonFinite("supervised loss"));
    }

    let w = &model.values;
    let mut grad = vec![0.0; w.len()];

    // dL/dz at the output: (p - onehot) / n
    let mut delta: Vec<f64> = trace.post[last].clone();
    for (r, &y) in batch.labels.iter().enumerate() {
        delta[r * classes + y] -= 1.0;
    }
    delta.iter_mut().for_each(|d| *d *= inv_n);

    for l in (0..layers.len()).rev() {
        let layer = layers[l];
        let prev: &[f64] = if l == 0 {
            batch.inputs.as_slice()
        } else {
            &trace.post[l - 1]
        };
        for r in 0..n {
            let x = &prev[r * layer.inputs..(r + 1) * layer.inputs];
            for o in 0..layer.outputs {
                let d = delta[r * layer.outputs + o];
                if d == 0.0 {
                    continue;
                }
                let base = layer.weight(o, 0);
                for (g, xi) in grad[base..base + layer.inputs].iter_mut().zip(x) {
                    *g += d * xi;
                }
                grad[layer.bias(o)] += d;
            }
        }
        if l == 0 {
            break;
        }
        let act = model.arch.activation;
        let z_prev = &trace.pre[l - 1];
        let a_prev = &trace.post[l - 1];
        let mut next = vec![0.0; n * layer.inputs];
        for r in 0..n {
            for o in 0..layer.outputs {
                let d = delta[r * layer.outputs + o];
                if d == 0.0 {
                    continue;
                }
                let base = layer.weight(o, 0);
                for i in 0..layer.inputs {
                    next[r * layer.inputs + i] += w[base + i] * d;
                }
            }
            for i in 0..layer.inputs {
                let k = r * layer.inputs + i;
                next[k] *= act.derivative(z_prev[k], a_prev[k]);
            }
        }
        delta = next;
    }

    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("supervised gradient"));
    }
    Ok((loss, grad))
}

/// Mean cross-entropy only.
pub fn supervised_loss(model: &ModelParams, batch: &Batch) -> Result<f64> {
    supervised_loss_grad(model, batch).map(|(loss, _)| loss)
}

/// Squared Euclidean distance between two flat parameter vectors.
pub fn l2_sq_distance(a: &ModelParams, b: &ModelParams) -> Result<f64> {
    check_len(a.values.len(), b.values.len())?;
    Ok(sq_dist(&a.values, &b.values))
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Gradient of `(lambda / m) * ||model - center||^2` with respect to `model`.
pub fn proximal_grad(model: &ModelParams, center: &ModelParams, lambda: f64, m: usize) -> Result<Vec<f64>> {
    check_len(model.values.len(), center.values.len())?;
    if lambda < 0.0 {
        return Err(Error::invalid("lambda must be non-negative"));
    }
    if m == 0 {
        return Err(Error::invalid("device count must be at least 1"));
    }
    let coef = 2.0 * lambda / m as f64;
    Ok(model
        .values
        .iter()
        .zip(&center.values)
        .map(|(w, c)| coef * (w - c))
        .collect())
}

pub fn sgd_step(model: &ModelParams, grad: &[f64], lr: f64) -> Result<ModelParams> {
    check_len(model.values.len(), grad.len())?;
    if lr.is_nan() || lr <= 0.0 {
        return Err(Error::invalid("learning rate must be positive"));
    }
    let values = model
        .values
        .iter()
        .zip(grad)
        .map(|(w, g)| w - lr * g)
        .collect();
    Ok(model.with_values(values))
}
