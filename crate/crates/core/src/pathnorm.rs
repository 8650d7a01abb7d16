//! ℓ1 path norm and the path-norm margin bound.
//!
//! The path norm `φ₁(w)` sums, over every input-to-output path, the absolute
//! product of the edge weights along it. Biases are not edges and are left
//! out. The margin bound combines the ramp loss at scale `L` with a
//! Rademacher complexity term that is linear in `φ₁`; it is minimized over a
//! fixed grid of `L` without paying for the search, so it is optimistic.

use ndarray::{Array1, Zip};
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{self, layer_weights, MlpArchitecture, WeightVector};
use crate::sgd::{Penalty, SgdConfig, SgdState, SgdTrainer};

/// `φ₁(w)`, computed by pushing a vector of ones through `|W|`.
pub fn path_norm(arch: &MlpArchitecture, params: &[f64]) -> f64 {
    let mut v = Array1::<f64>::ones(arch.input_dim());
    for layout in arch.layers() {
        let w = layer_weights(&layout, params);
        let mut next = Array1::zeros(layout.fan_out);
        for (row, vi) in w.rows().into_iter().zip(&v) {
            Zip::from(&mut next).and(&row).for_each(|n, &wij| *n += vi * wij.abs());
        }
        v = next;
    }
    v.sum()
}

/// Adds `scale · ∂φ₁/∂w` into `grad`, using `sign(0) = 0`. Returns `φ₁`.
pub fn add_path_norm_grad(arch: &MlpArchitecture, params: &[f64], scale: f64, grad: &mut [f64]) -> f64 {
    let layers = arch.layers();
    // forward[l]: paths from the inputs into the units feeding layer l.
    let mut forward = vec![Array1::<f64>::ones(arch.input_dim())];
    for layout in &layers {
        let w = layer_weights(layout, params).mapv(f64::abs);
        let next = w.t().dot(forward.last().unwrap());
        forward.push(next);
    }
    let phi = forward.last().unwrap().sum();
    let mut backward = Array1::<f64>::ones(1);
    for (idx, layout) in layers.iter().enumerate().rev() {
        let w = layer_weights(layout, params);
        let g = &mut grad[layout.weight_range()];
        for i in 0..layout.fan_in {
            let a = forward[idx][i];
            for j in 0..layout.fan_out {
                let wij = w[[i, j]];
                if wij != 0.0 {
                    g[i * layout.fan_out + j] += scale * wij.signum() * a * backward[j];
                }
            }
        }
        backward = w.mapv(f64::abs).dot(&backward);
    }
    phi
}

/// `Π_k max_j ‖w^(k)_{·j}‖₁`, the product of the largest incoming-weight ℓ1 norms.
pub fn gamma_1_inf(arch: &MlpArchitecture, params: &[f64]) -> f64 {
    arch.layers()
        .iter()
        .map(|layout| {
            let w = layer_weights(layout, params);
            w.columns()
                .into_iter()
                .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
                .fold(0.0, f64::max)
        })
        .product()
}

/// `2^d · φ · sqrt(ln(2D) / m) · max_i ‖x_i‖_∞`.
pub fn rademacher_upper(phi: f64, depth: usize, input_dim: usize, m: usize, x_inf_max: f64) -> f64 {
    2f64.powi(depth as i32) * phi * ((2.0 * input_dim as f64).ln() / m as f64).sqrt() * x_inf_max
}

/// Mean of `clip(1 − L·y·h, 0, 1)` over precomputed outputs.
pub fn ramp_from_outputs(outputs: &[f64], labels: &[f64], l: f64) -> f64 {
    let total: f64 = outputs
        .iter()
        .zip(labels)
        .map(|(h, y)| (1.0 - l * y * h).clamp(0.0, 1.0))
        .sum();
    total / outputs.len() as f64
}

pub fn ramp_error(w: &WeightVector, data: &LabeledDataset, l: f64) -> Result<f64> {
    if !(l >= 0.0) {
        return Err(Error::invalid("L", format!("must be nonnegative, got {l}")));
    }
    let out = nn::forward_batch(w, data.features())?;
    Ok(ramp_from_outputs(out.as_slice().unwrap(), data.labels(), l))
}

/// `{0} ∪ {10^e · u : e = −6..6, u ∈ {1, 2, 5}}`, ascending.
pub fn default_l_grid() -> Vec<f64> {
    let mut grid = vec![0.0];
    for e in -6..=6 {
        for u in [1.0, 2.0, 5.0] {
            grid.push(u * 10f64.powi(e));
        }
    }
    grid
}

pub struct MarginBoundQuery<'a> {
    pub net: &'a WeightVector,
    pub data: &'a LabeledDataset,
    pub delta: f64,
    pub grid: Vec<f64>,
}

impl<'a> MarginBoundQuery<'a> {
    pub fn new(net: &'a WeightVector, data: &'a LabeledDataset, delta: f64) -> Self {
        Self {
            net,
            data,
            delta,
            grid: default_l_grid(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginRow {
    pub l: f64,
    pub ramp: f64,
    pub complexity: f64,
    pub confidence: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginBound {
    pub bound: f64,
    pub best_l: f64,
    pub vacuous: bool,
    /// Always true: the minimum over `L` is taken without a union bound.
    pub optimistic: bool,
    pub path_norm: f64,
    pub rademacher: f64,
    pub table: Vec<MarginRow>,
}

pub fn margin_bound(query: &MarginBoundQuery<'_>) -> Result<MarginBound> {
    let out = nn::forward_batch(query.net, query.data.features())?;
    margin_bound_from_outputs(query, out.as_slice().unwrap())
}

/// As [`margin_bound`], reusing network outputs already computed on `query.data`.
pub fn margin_bound_from_outputs(query: &MarginBoundQuery<'_>, outputs: &[f64]) -> Result<MarginBound> {
    if !(query.delta > 0.0 && query.delta < 1.0) {
        return Err(Error::invalid("delta", format!("must lie in (0, 1), got {}", query.delta)));
    }
    if query.grid.is_empty() || query.grid.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
        return Err(Error::invalid("grid", "must be nonempty, finite and nonnegative"));
    }
    if outputs.len() != query.data.len() {
        return Err(Error::Dimension {
            what: "network outputs",
            expected: query.data.len(),
            actual: outputs.len(),
        });
    }
    let arch = query.net.arch();
    let m = query.data.len();
    let phi = path_norm(arch, query.net.values());
    let rad = rademacher_upper(phi, arch.depth(), arch.input_dim(), m, query.data.max_abs_feature());
    let confidence = ((2.0 / query.delta).ln() / (2.0 * m as f64)).sqrt();
    let table: Vec<MarginRow> = query
        .grid
        .iter()
        .map(|&l| {
            let ramp = ramp_from_outputs(outputs, query.data.labels(), l);
            let complexity = 2.0 * l * rad;
            MarginRow {
                l,
                ramp,
                complexity,
                confidence,
                total: ramp + complexity + confidence,
            }
        })
        .collect();
    let best = table
        .iter()
        .min_by(|a, b| a.total.total_cmp(&b.total))
        .expect("nonempty grid");
    Ok(MarginBound {
        bound: best.total,
        best_l: best.l,
        vacuous: best.total >= 1.0,
        optimistic: true,
        path_norm: phi,
        rademacher: rad,
        table,
    })
}

/// `ρ · φ₁(w)` as a training penalty.
#[derive(Debug, Clone, Copy)]
pub struct PathNormPenalty {
    pub rho: f64,
}

impl Penalty for PathNormPenalty {
    fn add_value_and_grad(&self, arch: &MlpArchitecture, params: &[f64], grad: &mut [f64]) -> f64 {
        if self.rho == 0.0 {
            return 0.0;
        }
        self.rho * add_path_norm_grad(arch, params, self.rho, grad)
    }
}

/// Quantiles of the normalized margins `y·h(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginQuantiles {
    pub q10: f64,
    pub q50: f64,
    pub q90: f64,
}

fn margin_quantiles(outputs: &[f64], labels: &[f64]) -> MarginQuantiles {
    let mut margins: Vec<f64> = outputs.iter().zip(labels).map(|(h, y)| h * y).collect();
    margins.sort_by(f64::total_cmp);
    let at = |q: f64| margins[((margins.len() - 1) as f64 * q).round() as usize];
    MarginQuantiles {
        q10: at(0.1),
        q50: at(0.5),
        q90: at(0.9),
    }
}

/// One evaluation point of a path-norm training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathNormRecord {
    /// SGD steps taken so far.
    pub iteration: usize,
    pub epoch: f64,
    pub train_error: f64,
    pub test_error: Option<f64>,
    pub path_norm: f64,
    pub gamma_1_inf: f64,
    pub bound: f64,
    pub best_l: f64,
    pub vacuous: bool,
    pub margin_q10: f64,
    pub margin_q50: f64,
    pub margin_q90: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathNormRunConfig {
    pub sgd: SgdConfig,
    pub rho: f64,
    pub delta: f64,
    /// Evaluate every this many SGD steps (and at step 0).
    pub eval_every_steps: usize,
}

impl Default for PathNormRunConfig {
    fn default() -> Self {
        Self {
            sgd: SgdConfig {
                learning_rate: 0.005,
                epochs: 5,
                eval_every: 0,
                ..SgdConfig::default()
            },
            rho: 0.0,
            delta: 0.025,
            eval_every_steps: 50,
        }
    }
}

fn evaluate(
    w: &WeightVector,
    iteration: usize,
    steps_per_epoch: usize,
    train: &LabeledDataset,
    test: Option<&LabeledDataset>,
    delta: f64,
) -> Result<PathNormRecord> {
    let out = nn::forward_batch(w, train.features())?;
    let out = out.as_slice().unwrap();
    let query = MarginBoundQuery::new(w, train, delta);
    let mb = margin_bound_from_outputs(&query, out)?;
    let margins = margin_quantiles(out, train.labels());
    Ok(PathNormRecord {
        iteration,
        epoch: iteration as f64 / steps_per_epoch as f64,
        train_error: nn::zero_one_from_outputs(out, train.labels()),
        test_error: test.map(|t| nn::zero_one_error(w, t)).transpose()?,
        path_norm: mb.path_norm,
        gamma_1_inf: gamma_1_inf(w.arch(), w.values()),
        bound: mb.bound,
        best_l: mb.best_l,
        vacuous: mb.vacuous,
        margin_q10: margins.q10,
        margin_q50: margins.q50,
        margin_q90: margins.q90,
    })
}

/// SGD on `surrogate + ρ·φ₁` from `w0`, evaluating the margin bound along the way.
pub fn train_pathnorm_regularized(
    w0: &WeightVector,
    train: &LabeledDataset,
    test: Option<&LabeledDataset>,
    cfg: &PathNormRunConfig,
) -> Result<(WeightVector, Vec<PathNormRecord>)> {
    if !(cfg.rho >= 0.0 && cfg.rho.is_finite()) {
        return Err(Error::invalid("rho", format!("must be nonnegative, got {}", cfg.rho)));
    }
    if cfg.eval_every_steps == 0 {
        return Err(Error::invalid("eval_every_steps", "must be at least 1"));
    }
    let penalty = PathNormPenalty { rho: cfg.rho };
    let mut trainer = SgdTrainer::new(SgdState::new(w0.clone()), cfg.sgd.clone(), train)?.with_penalty(&penalty);
    let steps_per_epoch = trainer.steps_per_epoch();
    let mut history = vec![evaluate(w0, 0, steps_per_epoch, train, test, cfg.delta)?];
    for _ in 0..cfg.sgd.epochs {
        let mut on_step = |info: &crate::sgd::StepInfo, w: &WeightVector| -> Result<()> {
            let iteration = info.epoch * info.steps_per_epoch + info.step_in_epoch + 1;
            if iteration.is_multiple_of(cfg.eval_every_steps) {
                let record = evaluate(w, iteration, steps_per_epoch, train, test, cfg.delta)?;
                log::info!(
                    "step {} train err {:.4} path norm {:.4e} bound {:.4}",
                    record.iteration,
                    record.train_error,
                    record.path_norm,
                    record.bound
                );
                history.push(record);
            }
            Ok(())
        };
        trainer.run_epoch(&mut on_step)?;
    }
    let w = trainer.into_state().weights;
    let last = steps_per_epoch * cfg.sgd.epochs;
    if history.last().map(|r| r.iteration) != Some(last) {
        history.push(evaluate(&w, last, steps_per_epoch, train, test, cfg.delta)?);
    }
    Ok((w, history))
}
