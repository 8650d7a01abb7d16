//! Fully connected ReLU networks with a single linear output.
//!
//! Parameters live in one flat `f64` vector. Layers are stored in order; within
//! a layer the weight matrix comes first, row-major with shape
//! `(fan_in, fan_out)` so that entry `(i, j)` is the edge from unit `i` of the
//! previous layer to unit `j`, followed by the `fan_out` biases.
//!
//! Batched evaluation runs in fixed-size row chunks and reduces losses and
//! gradients sequentially in row order, so results are bit-reproducible.

use std::fmt;
use std::str::FromStr;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// Rows evaluated per chunk in batched passes.
pub const EVAL_CHUNK: usize = 2048;

/// Layer widths `[k, h1, ..., hL, 1]` of a ReLU network with linear output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct MlpArchitecture {
    widths: Vec<usize>,
}

/// Position of one layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerLayout {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: usize,
    pub biases: usize,
}

impl LayerLayout {
    pub fn weight_range(&self) -> std::ops::Range<usize> {
        self.weights..self.weights + self.fan_in * self.fan_out
    }

    pub fn bias_range(&self) -> std::ops::Range<usize> {
        self.biases..self.biases + self.fan_out
    }
}

impl MlpArchitecture {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 3 {
            return Err(Error::Architecture(format!(
                "need input, at least one hidden layer and output, got {} widths",
                widths.len()
            )));
        }
        if widths.contains(&0) {
            return Err(Error::Architecture("layer widths must be positive".into()));
        }
        if *widths.last().unwrap() != 1 {
            return Err(Error::Architecture("output width must be 1".into()));
        }
        Ok(Self { widths })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    /// Number of weight layers (one hidden layer gives depth 2).
    pub fn depth(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|p| (p[0] + 1) * p[1]).sum()
    }

    pub fn layers(&self) -> Vec<LayerLayout> {
        let mut offset = 0;
        self.widths
            .windows(2)
            .map(|p| {
                let layout = LayerLayout {
                    fan_in: p[0],
                    fan_out: p[1],
                    weights: offset,
                    biases: offset + p[0] * p[1],
                };
                offset += (p[0] + 1) * p[1];
                layout
            })
            .collect()
    }
}

impl TryFrom<Vec<usize>> for MlpArchitecture {
    type Error = Error;

    fn try_from(widths: Vec<usize>) -> Result<Self> {
        Self::new(widths)
    }
}

impl From<MlpArchitecture> for Vec<usize> {
    fn from(arch: MlpArchitecture) -> Self {
        arch.widths
    }
}

impl FromStr for MlpArchitecture {
    type Err = Error;

    /// Parses a comma-separated width list such as `784,600,1`.
    fn from_str(spec: &str) -> Result<Self> {
        let widths = spec
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Architecture(format!("bad width `{t}` in `{spec}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(widths)
    }
}

impl fmt::Display for MlpArchitecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

/// Flat parameter vector tied to an architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    arch: MlpArchitecture,
    values: Vec<f64>,
}

impl WeightVector {
    pub fn new(arch: MlpArchitecture, values: Vec<f64>) -> Result<Self> {
        if values.len() != arch.param_count() {
            return Err(Error::Dimension {
                what: "weight vector",
                expected: arch.param_count(),
                actual: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("weight vector entry {i}")));
        }
        Ok(Self { arch, values })
    }

    pub fn zeros(arch: MlpArchitecture) -> Self {
        let values = vec![0.0; arch.param_count()];
        Self { arch, values }
    }

    pub fn arch(&self) -> &MlpArchitecture {
        &self.arch
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Weight matrix of layer `layer`, shape `(fan_in, fan_out)`.
    pub fn layer_weights(&self, layer: usize) -> ArrayView2<'_, f64> {
        layer_weights(&self.arch.layers()[layer], &self.values)
    }

    pub fn layer_biases(&self, layer: usize) -> ArrayView1<'_, f64> {
        let l = self.arch.layers()[layer];
        ArrayView1::from(&self.values[l.bias_range()])
    }
}

pub(crate) fn layer_weights<'a>(layout: &LayerLayout, params: &'a [f64]) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((layout.fan_in, layout.fan_out), &params[layout.weight_range()])
        .expect("layout matches parameter vector")
}

fn check_params(arch: &MlpArchitecture, params: &[f64]) -> Result<()> {
    if params.len() != arch.param_count() {
        return Err(Error::Dimension {
            what: "parameters",
            expected: arch.param_count(),
            actual: params.len(),
        });
    }
    Ok(())
}

fn check_inputs(arch: &MlpArchitecture, x: &ArrayView2<'_, f64>) -> Result<()> {
    if x.ncols() != arch.input_dim() {
        return Err(Error::Dimension {
            what: "input features",
            expected: arch.input_dim(),
            actual: x.ncols(),
        });
    }
    Ok(())
}

/// Hidden activations (post-ReLU) for one chunk plus the scalar outputs.
struct ChunkPass {
    hidden: Vec<Array2<f64>>,
    output: Array1<f64>,
}

fn forward_chunk(
    arch: &MlpArchitecture,
    layers: &[LayerLayout],
    params: &[f64],
    x: ArrayView2<'_, f64>,
    keep_hidden: bool,
) -> Result<ChunkPass> {
    let mut hidden: Vec<Array2<f64>> = Vec::with_capacity(layers.len() - 1);
    let mut current: Option<Array2<f64>> = None;
    for (idx, layout) in layers.iter().enumerate() {
        let w = layer_weights(layout, params);
        let b = ArrayView1::from(&params[layout.bias_range()]);
        let mut z = match &current {
            Some(a) => a.dot(&w),
            None => x.dot(&w),
        };
        z += &b;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "pre-activations of layer {} (architecture {arch})",
                idx + 1
            )));
        }
        if idx + 1 < layers.len() {
            z.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
            if let Some(prev) = current.take() {
                if keep_hidden {
                    hidden.push(prev);
                }
            }
            current = Some(z);
        } else {
            if let Some(prev) = current.take() {
                if keep_hidden {
                    hidden.push(prev);
                }
            }
            let output = z.index_axis_move(Axis(1), 0);
            return Ok(ChunkPass { hidden, output });
        }
    }
    unreachable!("architecture has at least two weight layers")
}

/// Network outputs for every row of `x`, given raw parameters.
pub fn forward_rows(
    arch: &MlpArchitecture,
    params: &[f64],
    x: ArrayView2<'_, f64>,
) -> Result<Array1<f64>> {
    check_params(arch, params)?;
    check_inputs(arch, &x)?;
    let layers = arch.layers();
    let mut out = Array1::zeros(x.nrows());
    let mut start = 0;
    while start < x.nrows() {
        let end = (start + EVAL_CHUNK).min(x.nrows());
        let pass = forward_chunk(arch, &layers, params, x.slice(s![start..end, ..]), false)?;
        out.slice_mut(s![start..end]).assign(&pass.output);
        start = end;
    }
    Ok(out)
}

/// Pre-sign output of the network at a single input.
pub fn forward(w: &WeightVector, x: &[f64]) -> Result<f64> {
    let row = ArrayView2::from_shape((1, x.len()), x).expect("row view");
    Ok(forward_rows(&w.arch, &w.values, row)?[0])
}

pub fn forward_batch(w: &WeightVector, x: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    forward_rows(&w.arch, &w.values, x)
}

/// Logistic loss scaled to bits: `log2(1 + exp(-margin))`.
pub fn logistic_loss(margin: f64) -> f64 {
    softplus(-margin) / std::f64::consts::LN_2
}

fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Class prediction; an output of exactly zero is class +1.
pub fn predict_sign(output: f64) -> f64 {
    if output >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

pub fn surrogate_from_outputs(outputs: &[f64], labels: &[f64]) -> f64 {
    let total: f64 = outputs
        .iter()
        .zip(labels)
        .map(|(&o, &y)| logistic_loss(o * y))
        .sum();
    total / outputs.len() as f64
}

pub fn zero_one_from_outputs(outputs: &[f64], labels: &[f64]) -> f64 {
    let wrong = outputs
        .iter()
        .zip(labels)
        .filter(|(&o, &y)| predict_sign(o) != y)
        .count();
    wrong as f64 / outputs.len() as f64
}

pub fn surrogate_error(w: &WeightVector, data: &LabeledDataset) -> Result<f64> {
    let out = forward_batch(w, data.features())?;
    Ok(surrogate_from_outputs(out.as_slice().unwrap(), data.labels()))
}

pub fn zero_one_error(w: &WeightVector, data: &LabeledDataset) -> Result<f64> {
    zero_one_error_params(&w.arch, &w.values, data)
}

pub fn zero_one_error_params(
    arch: &MlpArchitecture,
    params: &[f64],
    data: &LabeledDataset,
) -> Result<f64> {
    let out = forward_rows(arch, params, data.features())?;
    Ok(zero_one_from_outputs(out.as_slice().unwrap(), data.labels()))
}

/// Mean surrogate loss over the rows of `x` and its gradient with respect to
/// the parameters, written into `grad` (overwritten).
pub fn surrogate_loss_grad(
    arch: &MlpArchitecture,
    params: &[f64],
    x: ArrayView2<'_, f64>,
    labels: &[f64],
    grad: &mut [f64],
) -> Result<f64> {
    check_params(arch, params)?;
    check_inputs(arch, &x)?;
    if x.nrows() == 0 {
        return Err(Error::EmptyDataset);
    }
    if labels.len() != x.nrows() {
        return Err(Error::Dimension {
            what: "labels",
            expected: x.nrows(),
            actual: labels.len(),
        });
    }
    if grad.len() != params.len() {
        return Err(Error::Dimension {
            what: "gradient buffer",
            expected: params.len(),
            actual: grad.len(),
        });
    }
    grad.fill(0.0);
    let layers = arch.layers();
    let scale = 1.0 / (x.nrows() as f64 * std::f64::consts::LN_2);
    let mut loss_total = 0.0;
    let mut start = 0;
    while start < x.nrows() {
        let end = (start + EVAL_CHUNK).min(x.nrows());
        let xc = x.slice(s![start..end, ..]);
        let pass = forward_chunk(arch, &layers, params, xc, true)?;
        let ys = &labels[start..end];
        let mut delta = Array2::zeros((end - start, 1));
        for (i, (&o, &y)) in pass.output.iter().zip(ys).enumerate() {
            loss_total += logistic_loss(o * y);
            delta[[i, 0]] = -y * sigmoid(-o * y) * scale;
        }
        backward_chunk(&layers, params, xc, &pass.hidden, delta, grad);
        start = end;
    }
    let loss = loss_total / x.nrows() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("surrogate loss".into()));
    }
    Ok(loss)
}

/// Accumulates parameter gradients given output sensitivities `delta`.
fn backward_chunk(
    layers: &[LayerLayout],
    params: &[f64],
    x: ArrayView2<'_, f64>,
    hidden: &[Array2<f64>],
    mut delta: Array2<f64>,
    grad: &mut [f64],
) {
    for idx in (0..layers.len()).rev() {
        let layout = &layers[idx];
        {
            let (w_part, rest) = grad[layout.weights..].split_at_mut(layout.fan_in * layout.fan_out);
            let mut dw = ArrayViewMut2::from_shape((layout.fan_in, layout.fan_out), w_part)
                .expect("gradient layout");
            if idx == 0 {
                general_mat_mul(1.0, &x.t(), &delta, 1.0, &mut dw);
            } else {
                general_mat_mul(1.0, &hidden[idx - 1].t(), &delta, 1.0, &mut dw);
            }
            let db = &mut rest[..layout.fan_out];
            for row in delta.rows() {
                for (g, d) in db.iter_mut().zip(row) {
                    *g += d;
                }
            }
        }
        if idx > 0 {
            let w = layer_weights(layout, params);
            let mut next = delta.dot(&w.t());
            next.zip_mut_with(&hidden[idx - 1], |d, &h| {
                if h <= 0.0 {
                    *d = 0.0;
                }
            });
            delta = next;
        }
    }
}

/// Analytic gradient of the mean surrogate loss over `(x, labels)`.
pub fn grad_surrogate(
    w: &WeightVector,
    x: ArrayView2<'_, f64>,
    labels: &[f64],
) -> Result<(f64, WeightVector)> {
    let mut grad = vec![0.0; w.len()];
    let loss = surrogate_loss_grad(&w.arch, &w.values, x, labels, &mut grad)?;
    Ok((
        loss,
        WeightVector {
            arch: w.arch.clone(),
            values: grad,
        },
    ))
}

/// Truncated-normal weights on `[-2σ, 2σ]`; first-layer biases 0.1, others 0.
pub fn init_weights(arch: &MlpArchitecture, sigma: f64, seed: u64) -> Result<WeightVector> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid("sigma", format!("must be positive, got {sigma}")));
    }
    let normal = Normal::new(0.0, sigma).expect("valid normal");
    let mut rng = stream_rng(seed, Stream::Init, 0);
    let mut values = vec![0.0; arch.param_count()];
    for (idx, layout) in arch.layers().iter().enumerate() {
        for v in &mut values[layout.weight_range()] {
            *v = sample_truncated(&normal, sigma, &mut rng);
        }
        let bias = if idx == 0 { 0.1 } else { 0.0 };
        values[layout.bias_range()].fill(bias);
    }
    WeightVector::new(arch.clone(), values)
}

fn sample_truncated<R: Rng>(normal: &Normal<f64>, sigma: f64, rng: &mut R) -> f64 {
    loop {
        let v = normal.sample(rng);
        if v.abs() <= 2.0 * sigma {
            return v;
        }
    }
}
