//! Stochastic-gradient optimization of the PAC-Bayes objective.
//!
//! The posterior is `Q = N(w, diag(s))` with `s = exp(2ς)` and the prior is
//! `P = N(w0, λI)` with `λ = exp(2ϱ)`. Each iteration draws fresh noise `ξ`,
//! evaluates the surrogate loss at `w + ξ ⊙ exp(ς)` and adds a penalty built
//! from the complexity term
//!
//! ```text
//! B_RE = [KL(Q || P) + 2 ln(b ln(c/λ)) + ln(π² m / (6δ))] / (m − 1)
//! ```
//!
//! Parameters `[w; ς; ϱ]` are updated jointly by RMSprop.

use std::path::Path;

use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::kl;
use crate::nn::{self, MlpArchitecture, WeightVector};
use crate::rng::{stream_rng, Stream};

/// Floor applied to `|w|` before taking logs when initializing `ς`.
pub const LOG_STD_FLOOR: f64 = 1e-6;

/// Multiplier on `1/b` in the upper clamp for `ϱ`, keeping `b ln(c/λ) > 1`.
const RHO_CLAMP_MARGIN: f64 = 1.0001;

/// Diagonal Gaussian over network weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    mean: WeightVector,
    log_std: Vec<f64>,
}

/// How `ς` is initialized from the pretrained weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaInit {
    /// `s = |w|`.
    #[default]
    AbsWeights,
    /// `s = |w| / 10`, used for random-label networks.
    AbsWeightsOverTen,
}

impl GaussianPosterior {
    pub fn new(mean: WeightVector, log_std: Vec<f64>) -> Result<Self> {
        if log_std.len() != mean.len() {
            return Err(Error::Dimension {
                what: "log standard deviations",
                expected: mean.len(),
                actual: log_std.len(),
            });
        }
        if log_std.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("posterior log standard deviations".into()));
        }
        Ok(Self { mean, log_std })
    }

    /// Posterior centred at `w` with `ς = ½ ln(max(|w| · scale, 1e−6))`.
    pub fn from_weights(w: &WeightVector, init: SigmaInit) -> Self {
        let scale = match init {
            SigmaInit::AbsWeights => 1.0,
            SigmaInit::AbsWeightsOverTen => 0.1,
        };
        let log_std = w
            .values()
            .iter()
            .map(|v| 0.5 * (v.abs() * scale).max(LOG_STD_FLOOR).ln())
            .collect();
        Self {
            mean: w.clone(),
            log_std,
        }
    }

    pub fn arch(&self) -> &MlpArchitecture {
        self.mean.arch()
    }

    pub fn mean(&self) -> &WeightVector {
        &self.mean
    }

    pub fn log_std(&self) -> &[f64] {
        &self.log_std
    }

    pub fn len(&self) -> usize {
        self.log_std.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_std.is_empty()
    }

    pub fn variances(&self) -> Vec<f64> {
        self.log_std.iter().map(|v| (2.0 * v).exp()).collect()
    }

    /// Writes `w + ξ ⊙ exp(ς)` into `out`.
    pub fn perturb_into(&self, xi: &[f64], out: &mut [f64]) {
        for (((o, &w), &ls), &x) in out.iter_mut().zip(self.mean.values()).zip(&self.log_std).zip(xi) {
            *o = w + x * ls.exp();
        }
    }

    /// Draw number `counter` of `stream` under `seed`.
    pub fn sample(&self, seed: u64, stream: Stream, counter: u64) -> WeightVector {
        let xi = standard_normal(self.len(), seed, stream, counter);
        let mut values = vec![0.0; self.len()];
        self.perturb_into(&xi, &mut values);
        WeightVector::new(self.arch().clone(), values).expect("finite perturbation")
    }
}

/// `n` i.i.d. standard normals from one counter-based stream.
pub fn standard_normal(n: usize, seed: u64, stream: Stream, counter: u64) -> Vec<f64> {
    let mut rng = stream_rng(seed, stream, counter);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Prior mean and the constants of the union bound over `λ = c·exp(−j/b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSpec {
    pub mean: WeightVector,
    pub b: u32,
    pub c: f64,
    pub delta: f64,
    pub m: usize,
}

#[derive(Serialize, Deserialize)]
struct PriorHeader {
    b: u32,
    c: f64,
    delta: f64,
    m: usize,
}

impl PriorSpec {
    /// Prior with `b = 100`, `c = 0.1`, `δ = 0.025`.
    pub fn new(mean: WeightVector, m: usize) -> Self {
        Self {
            mean,
            b: 100,
            c: 0.1,
            delta: 0.025,
            m,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.b < 1 {
            return Err(Error::invalid("b", "must be at least 1"));
        }
        if !(self.c > 0.0 && self.c < 1.0) {
            return Err(Error::invalid("c", format!("must lie in (0, 1), got {}", self.c)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::invalid("delta", format!("must lie in (0, 1), got {}", self.delta)));
        }
        if self.m < 2 {
            return Err(Error::invalid("m", "need at least two training examples"));
        }
        Ok(())
    }

    /// Largest admissible prior variance, `c·exp(−1/b)`.
    pub fn lambda_max(&self) -> f64 {
        self.c * (-1.0 / self.b as f64).exp()
    }

    /// Upper clamp applied to `ϱ` during optimization.
    pub fn rho_max(&self) -> f64 {
        0.5 * (self.c.ln() - RHO_CLAMP_MARGIN / self.b as f64)
    }

    /// Lattice point `c·exp(−j/b)`.
    pub fn lattice_lambda(&self, j: u64) -> f64 {
        self.c * (-(j as f64) / self.b as f64).exp()
    }

    /// `ln(π² m / (6δ))`.
    pub fn confidence_term(&self) -> f64 {
        (std::f64::consts::PI.powi(2) * self.m as f64 / (6.0 * self.delta)).ln()
    }

    /// `2 ln(b ln(c/λ))`; requires `b ln(c/λ) ≥ 1`.
    pub fn union_term(&self, lambda: f64) -> Result<f64> {
        let j = self.b as f64 * (self.c / lambda).ln();
        // Lattice point j = 1 lands here up to rounding.
        if !(lambda > 0.0) || !(j >= 1.0 - 1e-9) {
            return Err(Error::invalid(
                "lambda",
                format!("{lambda} is outside (0, c·exp(−1/b)] = (0, {}]", self.lambda_max()),
            ));
        }
        Ok(2.0 * j.max(1.0).ln())
    }

    /// `[2 ln(b ln(c/λ)) + ln(π²m/(6δ))] / (m − 1)`, the value of `B_RE` at zero KL.
    pub fn confidence_floor(&self, lambda: f64) -> Result<f64> {
        Ok((self.union_term(lambda)? + self.confidence_term()) / (self.m as f64 - 1.0))
    }

    fn check_posterior(&self, post: &GaussianPosterior) -> Result<()> {
        if post.arch() != self.mean.arch() {
            return Err(Error::Architecture(format!(
                "posterior is {} but prior mean is {}",
                post.arch(),
                self.mean.arch()
            )));
        }
        Ok(())
    }

    fn to_container(&self, c: Container) -> Result<Container> {
        let header = serde_json::to_value(PriorHeader {
            b: self.b,
            c: self.c,
            delta: self.delta,
            m: self.m,
        })?;
        let mut c = c.with_array("prior_mean", self.mean.values().to_vec());
        if let serde_json::Value::Object(map) = &mut c.header {
            map.insert("prior".into(), header);
        }
        Ok(c)
    }

    fn from_container(c: &mut Container, arch: &MlpArchitecture) -> Result<Self> {
        let header: PriorHeader = serde_json::from_value(
            c.header
                .get("prior")
                .cloned()
                .ok_or_else(|| Error::Container("missing prior header".into()))?,
        )?;
        let prior = Self {
            mean: WeightVector::new(arch.clone(), c.take_array("prior_mean")?)?,
            b: header.b,
            c: header.c,
            delta: header.delta,
            m: header.m,
        };
        prior.validate()?;
        Ok(prior)
    }
}

/// `KL(Q || N(w0, λI))` for `λ = exp(2ϱ)`.
pub fn kl_to_prior(post: &GaussianPosterior, rho: f64, prior: &PriorSpec) -> Result<f64> {
    prior.check_posterior(post)?;
    Ok(kl::kl_diag_gaussian_log_std(
        post.mean().values(),
        post.log_std(),
        prior.mean.values(),
        rho,
    ))
}

/// `B_RE(w, s, λ; δ)` for `λ = exp(2ϱ)`.
pub fn b_re(post: &GaussianPosterior, rho: f64, prior: &PriorSpec) -> Result<f64> {
    prior.validate()?;
    let kl = kl_to_prior(post, rho, prior)?;
    b_re_from_kl(kl, (2.0 * rho).exp(), prior)
}

/// `B_RE` from a precomputed KL value.
pub fn b_re_from_kl(kl: f64, lambda: f64, prior: &PriorSpec) -> Result<f64> {
    Ok((kl + prior.union_term(lambda)? + prior.confidence_term()) / (prior.m as f64 - 1.0))
}

/// Penalty added to the surrogate loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveVariant {
    /// `sqrt(B_RE / 2)`.
    #[default]
    SquareRoot,
    /// `B_RE`.
    Linear,
}

impl ObjectiveVariant {
    fn penalty(self, b: f64) -> (f64, f64) {
        match self {
            ObjectiveVariant::SquareRoot => {
                let r = (0.5 * b).sqrt();
                (r, 1.0 / (4.0 * r))
            }
            ObjectiveVariant::Linear => (b, 1.0),
        }
    }
}

/// Components of one objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue {
    pub objective: f64,
    pub surrogate: f64,
    pub kl: f64,
    pub b_re: f64,
    pub penalty: f64,
}

/// Gradient of the objective with respect to `(w, ς, ϱ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveGrad {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
    pub rho: f64,
}

/// Objective and gradient for fixed noise draws `xis` (surrogate averaged
/// over the draws) on the rows `(x, labels)`.
pub fn objective_and_grad(
    post: &GaussianPosterior,
    rho: f64,
    prior: &PriorSpec,
    variant: ObjectiveVariant,
    x: ndarray::ArrayView2<'_, f64>,
    labels: &[f64],
    xis: &[Vec<f64>],
) -> Result<(ObjectiveValue, ObjectiveGrad)> {
    prior.check_posterior(post)?;
    if xis.is_empty() {
        return Err(Error::invalid("xis", "need at least one noise draw"));
    }
    let d = post.len();
    if let Some(bad) = xis.iter().find(|xi| xi.len() != d) {
        return Err(Error::Dimension {
            what: "noise draw",
            expected: d,
            actual: bad.len(),
        });
    }
    let arch = post.arch();
    let lambda = (2.0 * rho).exp();
    let inv_lam = 1.0 / lambda;
    let stds: Vec<f64> = post.log_std().iter().map(|v| v.exp()).collect();

    let mut grad_w = vec![0.0; d];
    let mut grad_ls = vec![0.0; d];
    let mut perturbed = vec![0.0; d];
    let mut g = vec![0.0; d];
    let mut surrogate = 0.0;
    let scale = 1.0 / xis.len() as f64;
    for xi in xis {
        post.perturb_into(xi, &mut perturbed);
        surrogate += scale * nn::surrogate_loss_grad(arch, &perturbed, x, labels, &mut g)?;
        for i in 0..d {
            grad_w[i] += scale * g[i];
            grad_ls[i] += scale * g[i] * xi[i] * stds[i];
        }
    }

    let kl = kl_to_prior(post, rho, prior)?;
    let b = b_re_from_kl(kl, lambda, prior)?;
    let (penalty, dpen_db) = variant.penalty(b);
    let coef = dpen_db / (prior.m as f64 - 1.0);
    let mut sum_s = 0.0;
    let mut dist2 = 0.0;
    for i in 0..d {
        let dw = post.mean().values()[i] - prior.mean.values()[i];
        let s = stds[i] * stds[i];
        sum_s += s;
        dist2 += dw * dw;
        grad_w[i] += coef * dw * inv_lam;
        grad_ls[i] += coef * (s * inv_lam - 1.0);
    }
    let log_c_over_lam = prior.c.ln() - 2.0 * rho;
    let dkl_drho = d as f64 - (sum_s + dist2) * inv_lam;
    let grad_rho = coef * (dkl_drho - 4.0 / log_c_over_lam);
    let value = ObjectiveValue {
        objective: surrogate + penalty,
        surrogate,
        kl,
        b_re: b,
        penalty,
    };
    Ok((
        value,
        ObjectiveGrad {
            mean: grad_w,
            log_std: grad_ls,
            rho: grad_rho,
        },
    ))
}

/// One phase of a piecewise-constant learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrPhase {
    pub iterations: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundOptConfig {
    /// Phases run in order; the last rate continues past the schedule's end.
    pub schedule: Vec<LrPhase>,
    pub iterations: usize,
    pub rms_decay: f64,
    pub rms_epsilon: f64,
    pub noise_seed: u64,
    pub variant: ObjectiveVariant,
    pub sigma_init: SigmaInit,
    pub rho_init: f64,
    /// Rows per iteration; `None` uses the full training set.
    pub minibatch: Option<usize>,
    pub samples_per_iteration: usize,
    pub trace_every: usize,
}

impl Default for BoundOptConfig {
    fn default() -> Self {
        Self {
            schedule: vec![
                LrPhase { iterations: 150_000, rate: 1e-3 },
                LrPhase { iterations: 50_000, rate: 1e-4 },
            ],
            iterations: 200_000,
            rms_decay: 0.9,
            rms_epsilon: 1e-8,
            noise_seed: 0,
            variant: ObjectiveVariant::SquareRoot,
            sigma_init: SigmaInit::AbsWeights,
            rho_init: -3.0,
            minibatch: None,
            samples_per_iteration: 1,
            trace_every: 1,
        }
    }
}

impl BoundOptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schedule.is_empty() {
            return Err(Error::invalid("schedule", "needs at least one phase"));
        }
        if let Some(p) = self.schedule.iter().find(|p| !(p.rate > 0.0 && p.rate.is_finite())) {
            return Err(Error::invalid("schedule", format!("rate {} is not positive", p.rate)));
        }
        if !(0.0..1.0).contains(&self.rms_decay) {
            return Err(Error::invalid("rms_decay", "must lie in [0, 1)"));
        }
        if !(self.rms_epsilon > 0.0) {
            return Err(Error::invalid("rms_epsilon", "must be positive"));
        }
        if self.minibatch == Some(0) {
            return Err(Error::invalid("minibatch", "must be at least 1"));
        }
        if self.samples_per_iteration == 0 {
            return Err(Error::invalid("samples_per_iteration", "must be at least 1"));
        }
        if self.trace_every == 0 {
            return Err(Error::invalid("trace_every", "must be at least 1"));
        }
        if !self.rho_init.is_finite() {
            return Err(Error::invalid("rho_init", "must be finite"));
        }
        Ok(())
    }

    pub fn learning_rate(&self, iteration: usize) -> f64 {
        let mut end = 0;
        for phase in &self.schedule {
            end += phase.iterations;
            if iteration < end {
                return phase.rate;
            }
        }
        self.schedule.last().map(|p| p.rate).unwrap_or(0.0)
    }
}

/// Optimizer state: posterior, `ϱ`, RMSprop accumulator and counters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub posterior: GaussianPosterior,
    pub rho: f64,
    /// Running mean of squared gradients for `[w; ς; ϱ]`.
    pub rms: Vec<f64>,
    pub iteration: usize,
    /// Number of updates after which `ϱ` had to be clamped.
    pub clamp_events: usize,
}

impl OptimizerState {
    pub fn initial(w_sgd: &WeightVector, cfg: &BoundOptConfig) -> Self {
        let posterior = GaussianPosterior::from_weights(w_sgd, cfg.sigma_init);
        let rms = vec![0.0; 2 * posterior.len() + 1];
        Self {
            posterior,
            rho: cfg.rho_init,
            rms,
            iteration: 0,
            clamp_events: 0,
        }
    }

    pub fn lambda(&self) -> f64 {
        (2.0 * self.rho).exp()
    }
}

/// Values recorded at the start of an iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub learning_rate: f64,
    pub objective: f64,
    pub surrogate: f64,
    pub kl: f64,
    pub b_re: f64,
    pub lambda: f64,
}

const TRACE_COLUMNS: [&str; 7] = [
    "iteration",
    "learning_rate",
    "objective",
    "surrogate",
    "kl",
    "b_re",
    "lambda",
];

impl TraceRecord {
    fn columns(&self) -> [f64; 7] {
        [
            self.iteration as f64,
            self.learning_rate,
            self.objective,
            self.surrogate,
            self.kl,
            self.b_re,
            self.lambda,
        ]
    }
}

pub struct BoundOptimizer<'a> {
    state: OptimizerState,
    cfg: BoundOptConfig,
    prior: &'a PriorSpec,
    data: &'a LabeledDataset,
    trace: Vec<TraceRecord>,
}

impl<'a> BoundOptimizer<'a> {
    pub fn new(
        state: OptimizerState,
        cfg: BoundOptConfig,
        prior: &'a PriorSpec,
        data: &'a LabeledDataset,
    ) -> Result<Self> {
        cfg.validate()?;
        prior.validate()?;
        prior.check_posterior(&state.posterior)?;
        if state.posterior.arch().input_dim() != data.dim() {
            return Err(Error::Dimension {
                what: "dataset features",
                expected: state.posterior.arch().input_dim(),
                actual: data.dim(),
            });
        }
        if state.rms.len() != 2 * state.posterior.len() + 1 {
            return Err(Error::Dimension {
                what: "RMSprop accumulator",
                expected: 2 * state.posterior.len() + 1,
                actual: state.rms.len(),
            });
        }
        Ok(Self {
            state,
            cfg,
            prior,
            data,
            trace: Vec::new(),
        })
    }

    /// Continues a previously recorded trace.
    pub fn with_trace(mut self, trace: Vec<TraceRecord>) -> Self {
        self.trace = trace;
        self
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    pub fn into_parts(self) -> (OptimizerState, Vec<TraceRecord>) {
        (self.state, self.trace)
    }

    fn diverged(&self) -> Error {
        Error::ObjectiveDiverged {
            iteration: self.state.iteration,
            last_finite: Box::new(self.state.clone()),
        }
    }

    /// Noise draws for iteration `t`.
    pub fn noise(&self, t: usize) -> Vec<Vec<f64>> {
        let k = self.cfg.samples_per_iteration as u64;
        (0..k)
            .map(|i| standard_normal(self.state.posterior.len(), self.cfg.noise_seed, Stream::Noise, t as u64 * k + i))
            .collect()
    }

    /// One RMSprop update. Returns the values measured before the update.
    pub fn step(&mut self) -> Result<TraceRecord> {
        let t = self.state.iteration;
        let lambda = self.state.lambda();
        let xis = self.noise(t);
        let gathered;
        let (x, labels) = match self.cfg.minibatch {
            Some(bs) if bs < self.data.len() => {
                let mut rng = stream_rng(self.cfg.noise_seed, Stream::Batch, t as u64);
                let mut rows = index::sample(&mut rng, self.data.len(), bs).into_vec();
                rows.sort_unstable();
                gathered = self.data.gather(&rows);
                (gathered.0.view(), &gathered.1[..])
            }
            _ => (self.data.features(), self.data.labels()),
        };
        let result = objective_and_grad(
            &self.state.posterior,
            self.state.rho,
            self.prior,
            self.cfg.variant,
            x,
            labels,
            &xis,
        );
        let (value, grad) = match result {
            Ok(r) => r,
            Err(Error::NonFinite(_)) => return Err(self.diverged()),
            Err(e) => return Err(e),
        };
        if !value.objective.is_finite() {
            return Err(self.diverged());
        }

        let lr = self.cfg.learning_rate(t);
        let (decay, eps) = (self.cfg.rms_decay, self.cfg.rms_epsilon);
        let d = self.state.posterior.len();
        let grads = grad.mean.iter().chain(&grad.log_std).chain(std::iter::once(&grad.rho));
        let mut steps = Vec::with_capacity(2 * d + 1);
        let mut new_rms = Vec::with_capacity(2 * d + 1);
        for (&g, &acc) in grads.zip(&self.state.rms) {
            let acc = decay * acc + (1.0 - decay) * g * g;
            steps.push(lr * g / (acc.sqrt() + eps));
            new_rms.push(acc);
        }
        if steps.iter().any(|v| !v.is_finite()) {
            return Err(self.diverged());
        }
        let post = &mut self.state.posterior;
        for (w, s) in post.mean.values_mut().iter_mut().zip(&steps[..d]) {
            *w -= s;
        }
        for (ls, s) in post.log_std.iter_mut().zip(&steps[d..2 * d]) {
            *ls -= s;
        }
        if post.mean.values().iter().chain(&post.log_std).any(|v| !v.is_finite()) {
            return Err(self.diverged());
        }
        self.state.rho -= steps[2 * d];
        let rho_max = self.prior.rho_max();
        if self.state.rho > rho_max {
            self.state.rho = rho_max;
            self.state.clamp_events += 1;
        }
        self.state.rms = new_rms;
        self.state.iteration += 1;

        let record = TraceRecord {
            iteration: t,
            learning_rate: lr,
            objective: value.objective,
            surrogate: value.surrogate,
            kl: value.kl,
            b_re: value.b_re,
            lambda,
        };
        if t.is_multiple_of(self.cfg.trace_every) || t + 1 == self.cfg.iterations {
            self.trace.push(record);
        }
        Ok(record)
    }

    /// Runs until `cfg.iterations` updates have been applied in total.
    pub fn run(
        &mut self,
        on_step: &mut dyn FnMut(&TraceRecord, &OptimizerState) -> Result<()>,
    ) -> Result<()> {
        while self.state.iteration < self.cfg.iterations {
            let record = self.step()?;
            on_step(&record, &self.state)?;
        }
        Ok(())
    }
}

/// Result of [`optimize_bound`].
#[derive(Debug, Clone)]
pub struct BoundOptOutcome {
    pub state: OptimizerState,
    pub trace: Vec<TraceRecord>,
}

/// Initializes the posterior at `w_sgd` and runs `cfg.iterations` updates.
pub fn optimize_bound(
    w_sgd: &WeightVector,
    prior: &PriorSpec,
    data: &LabeledDataset,
    cfg: &BoundOptConfig,
) -> Result<BoundOptOutcome> {
    let state = OptimizerState::initial(w_sgd, cfg);
    let mut opt = BoundOptimizer::new(state, cfg.clone(), prior, data)?;
    opt.run(&mut |r, _| {
        if r.iteration % 1000 == 0 {
            log::info!(
                "iter {} objective {:.5} surrogate {:.5} kl {:.1} b_re {:.5} lambda {:.3e}",
                r.iteration,
                r.objective,
                r.surrogate,
                r.kl,
                r.b_re,
                r.lambda
            );
        }
        Ok(())
    })?;
    let (state, trace) = opt.into_parts();
    Ok(BoundOptOutcome { state, trace })
}

#[derive(Serialize, Deserialize)]
struct PosteriorHeader {
    arch: MlpArchitecture,
    config: BoundOptConfig,
    rho: f64,
    iteration: usize,
    clamp_events: usize,
    trace_len: usize,
}

/// Posterior checkpoint: state, prior, config and the trace so far.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorCheckpoint {
    pub state: OptimizerState,
    pub prior: PriorSpec,
    pub config: BoundOptConfig,
    pub trace: Vec<TraceRecord>,
}

impl PosteriorCheckpoint {
    pub const KIND: &'static str = "posterior-checkpoint";

    pub fn to_container(&self) -> Result<Container> {
        let header = PosteriorHeader {
            arch: self.state.posterior.arch().clone(),
            config: self.config.clone(),
            rho: self.state.rho,
            iteration: self.state.iteration,
            clamp_events: self.state.clamp_events,
            trace_len: self.trace.len(),
        };
        let mut c = Container::new(Self::KIND, header)?
            .with_array("mean", self.state.posterior.mean.values().to_vec())
            .with_array("log_std", self.state.posterior.log_std.clone())
            .with_array("rms", self.state.rms.clone());
        for (k, name) in TRACE_COLUMNS.iter().enumerate() {
            let column = self.trace.iter().map(|r| r.columns()[k]).collect();
            c = c.with_array(format!("trace.{name}"), column);
        }
        self.prior.to_container(c)
    }

    pub fn from_container(mut c: Container) -> Result<Self> {
        c.expect_kind(Self::KIND)?;
        let h: PosteriorHeader = serde_json::from_value(c.header.clone())?;
        let prior = PriorSpec::from_container(&mut c, &h.arch)?;
        let mean = WeightVector::new(h.arch, c.take_array("mean")?)?;
        let posterior = GaussianPosterior::new(mean, c.take_array("log_std")?)?;
        let rms = c.take_array("rms")?;
        if rms.len() != 2 * posterior.len() + 1 {
            return Err(Error::Container("RMSprop accumulator has the wrong length".into()));
        }
        let mut columns = Vec::with_capacity(TRACE_COLUMNS.len());
        for name in TRACE_COLUMNS {
            let col = c.take_array(&format!("trace.{name}"))?;
            if col.len() != h.trace_len {
                return Err(Error::Container(format!("trace column `{name}` has the wrong length")));
            }
            columns.push(col);
        }
        let trace = (0..h.trace_len)
            .map(|i| TraceRecord {
                iteration: columns[0][i] as usize,
                learning_rate: columns[1][i],
                objective: columns[2][i],
                surrogate: columns[3][i],
                kl: columns[4][i],
                b_re: columns[5][i],
                lambda: columns[6][i],
            })
            .collect();
        Ok(Self {
            state: OptimizerState {
                posterior,
                rho: h.rho,
                rms,
                iteration: h.iteration,
                clamp_events: h.clamp_events,
            },
            prior,
            config: h.config,
            trace,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }
}
