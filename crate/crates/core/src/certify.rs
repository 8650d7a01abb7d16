//! Certification of an optimized posterior.
//!
//! The prior variance is rounded to the lattice `λ_j = c·exp(−j/b)`, the
//! posterior's training error is estimated from `n` sampled networks, and the
//! two KL inversions turn both into a bound holding with probability
//! `1 − δ − δ'`.

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::kl::{kl_inverse, sample_convergence_bound};
use crate::nn::{self, WeightVector};
use crate::pacbayes::{b_re_from_kl, kl_to_prior, GaussianPosterior, PriorSpec};
use crate::rng::Stream;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// A lattice point for the prior variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaCandidate {
    pub j: u64,
    pub lambda: f64,
}

/// Lattice points either side of `λ = exp(2ϱ)`: `j* = b ln(c/λ)` rounded down
/// (at least 1) and up. Both are equal when `λ` is on the lattice.
pub fn round_lambda(rho: f64, b: u32, c: f64) -> [LambdaCandidate; 2] {
    let mut j_star = b as f64 * (c.ln() - 2.0 * rho);
    // A λ built from a lattice point comes back within rounding of an integer.
    if (j_star - j_star.round()).abs() <= 1e-9 * j_star.abs().max(1.0) {
        j_star = j_star.round();
    }
    let down = (j_star.floor().max(1.0)) as u64;
    let up = (j_star.ceil().max(1.0)) as u64;
    [down, up].map(|j| LambdaCandidate {
        j,
        lambda: c * (-(j as f64) / b as f64).exp(),
    })
}

/// Monte-Carlo estimate of the posterior's 0-1 error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub n: u64,
    pub seed: u64,
    pub mean: f64,
    /// Error of each sampled network, in draw order.
    pub per_draw: Vec<f64>,
}

/// Averages the 0-1 error of `n` networks drawn from `post`. Draw `i` uses
/// counter `i` of the Monte-Carlo stream, so any subset can be recomputed.
pub fn mc_snn_error(post: &GaussianPosterior, data: &LabeledDataset, n: u64, seed: u64) -> Result<McEstimate> {
    mc_snn_error_with(post, data, n, seed, &mut |_, _| {})
}

/// As [`mc_snn_error`], calling `on_draw(i, error_i)` after every draw.
pub fn mc_snn_error_with(
    post: &GaussianPosterior,
    data: &LabeledDataset,
    n: u64,
    seed: u64,
    on_draw: &mut dyn FnMut(u64, f64),
) -> Result<McEstimate> {
    if n == 0 {
        return Err(Error::invalid("n", "need at least one draw"));
    }
    let mut per_draw = Vec::with_capacity(n as usize);
    for i in 0..n {
        let w = post.sample(seed, Stream::MonteCarlo, i);
        let err = nn::zero_one_error_params(w.arch(), w.values(), data)?;
        on_draw(i, err);
        per_draw.push(err);
        if (i + 1) % (n / 10).max(1) == 0 {
            log::info!("{} of {n} sampled networks, running mean error {:.5}", i + 1, per_draw.iter().sum::<f64>() / (i + 1) as f64);
        }
    }
    let mean = per_draw.iter().sum::<f64>() / n as f64;
    Ok(McEstimate { n, seed, mean, per_draw })
}

/// `kl_inverse(kl_inverse(ê_mc, ln(2/δ')/n), B_RE)`.
pub fn final_bound(e_mc: f64, n: u64, delta_prime: f64, b_re: f64) -> Result<f64> {
    if !(b_re >= 0.0) {
        return Err(Error::invalid("b_re", format!("must be nonnegative, got {b_re}")));
    }
    let inner = sample_convergence_bound(e_mc, n, delta_prime)?;
    Ok(kl_inverse(inner, b_re))
}

/// Fraction of `n` posterior draws closer to the posterior mean than `w_sgd`,
/// in the Mahalanobis distance of `diag(s)`.
pub fn snn_pvalue(w_sgd: &WeightVector, post: &GaussianPosterior, n: u64, seed: u64) -> Result<f64> {
    if w_sgd.arch() != post.arch() {
        return Err(Error::Architecture(format!(
            "network is {} but posterior is {}",
            w_sgd.arch(),
            post.arch()
        )));
    }
    if n == 0 {
        return Err(Error::invalid("n", "need at least one draw"));
    }
    let s = post.variances();
    let mu = post.mean().values();
    let distance = |w: &[f64]| -> f64 {
        w.iter()
            .zip(mu)
            .zip(&s)
            .map(|((a, m), v)| (a - m) * (a - m) / v)
            .sum()
    };
    let reference = distance(w_sgd.values());
    let mut closer = 0u64;
    for i in 0..n {
        let draw = post.sample(seed, Stream::PValue, i);
        if distance(draw.values()) < reference {
            closer += 1;
        }
    }
    Ok(closer as f64 / n as f64)
}

/// Bound evaluated at one lattice point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateBound {
    pub j: u64,
    pub lambda: f64,
    pub kl: f64,
    pub b_re: f64,
    pub bound: f64,
}

/// What the headline number in a report is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportedQuantity {
    Bound,
    /// `sqrt(B_RE / 2)`, reported when the bound itself is 1.
    SqrtHalfBRe,
}

/// Inputs to [`certify`].
pub struct CertifyInputs<'a> {
    pub name: String,
    pub w_sgd: &'a WeightVector,
    pub posterior: &'a GaussianPosterior,
    pub rho: f64,
    pub prior: &'a PriorSpec,
    pub train: &'a LabeledDataset,
    pub test: Option<&'a LabeledDataset>,
    pub n_train: u64,
    pub n_test: u64,
    pub delta_prime: f64,
    pub mc_seed: u64,
    /// Draws for the p-value diagnostic; 0 skips it.
    pub pvalue_samples: u64,
    pub pvalue_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub schema_version: u32,
    pub name: String,
    pub train_error: f64,
    pub test_error: Option<f64>,
    pub snn_train_mc: f64,
    pub snn_train_upper: f64,
    pub snn_test_mc: Option<f64>,
    pub snn_test_upper: Option<f64>,
    pub kl: f64,
    pub b_re: f64,
    pub sqrt_half_b_re: f64,
    pub bound: f64,
    pub reported: f64,
    pub reported_quantity: ReportedQuantity,
    pub vacuous: bool,
    pub j: u64,
    pub lambda: f64,
    pub candidates: Vec<CandidateBound>,
    pub m: usize,
    pub n_train: u64,
    pub n_test: u64,
    pub delta: f64,
    pub delta_prime: f64,
    pub confidence: f64,
    pub mc_seed: u64,
    pub pvalue: Option<f64>,
    pub pvalue_samples: u64,
    pub config_digest: Option<String>,
    pub config: Option<serde_json::Value>,
    pub deviations: Vec<String>,
}

/// One table row per experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub name: String,
    pub train_error: f64,
    pub test_error: Option<f64>,
    pub snn_train_error: f64,
    pub snn_test_error: Option<f64>,
    pub pac_bayes_bound: f64,
    pub reported_quantity: ReportedQuantity,
    pub kl: f64,
    pub sqrt_half_b_re: f64,
    pub j: u64,
    pub lambda: f64,
    pub n: u64,
    pub confidence: f64,
    pub schema_version: u32,
}

impl BoundReport {
    pub fn row(&self) -> BoundRow {
        BoundRow {
            name: self.name.clone(),
            train_error: self.train_error,
            test_error: self.test_error,
            snn_train_error: self.snn_train_upper,
            snn_test_error: self.snn_test_upper,
            pac_bayes_bound: self.reported,
            reported_quantity: self.reported_quantity,
            kl: self.kl,
            sqrt_half_b_re: self.sqrt_half_b_re,
            j: self.j,
            lambda: self.lambda,
            n: self.n_train,
            confidence: self.confidence,
            schema_version: self.schema_version,
        }
    }
}

/// Evaluates both lattice roundings of the posterior's `λ` against the same
/// Monte-Carlo estimate and keeps the smaller bound.
pub fn certify_from_estimate(
    posterior: &GaussianPosterior,
    rho: f64,
    prior: &PriorSpec,
    e_mc: f64,
    n: u64,
    delta_prime: f64,
) -> Result<Vec<CandidateBound>> {
    prior.validate()?;
    round_lambda(rho, prior.b, prior.c)
        .iter()
        .map(|cand| {
            let kl = kl_to_prior(posterior, 0.5 * cand.lambda.ln(), prior)?;
            let b_re = b_re_from_kl(kl, cand.lambda, prior)?;
            Ok(CandidateBound {
                j: cand.j,
                lambda: cand.lambda,
                kl,
                b_re,
                bound: final_bound(e_mc, n, delta_prime, b_re)?,
            })
        })
        .collect()
}

pub fn certify(inputs: &CertifyInputs<'_>) -> Result<BoundReport> {
    let prior = inputs.prior;
    if inputs.train.len() != prior.m {
        return Err(Error::Dimension {
            what: "training set size",
            expected: prior.m,
            actual: inputs.train.len(),
        });
    }
    let train_error = nn::zero_one_error(inputs.w_sgd, inputs.train)?;
    let test_error = inputs.test.map(|t| nn::zero_one_error(inputs.w_sgd, t)).transpose()?;

    let train_mc = mc_snn_error(inputs.posterior, inputs.train, inputs.n_train, inputs.mc_seed)?;
    let snn_train_upper = sample_convergence_bound(train_mc.mean, inputs.n_train, inputs.delta_prime)?;
    let (snn_test_mc, snn_test_upper) = match inputs.test {
        Some(test) => {
            let est = mc_snn_error(inputs.posterior, test, inputs.n_test, inputs.mc_seed ^ 0x7465_7374)?;
            let upper = sample_convergence_bound(est.mean, inputs.n_test, inputs.delta_prime)?;
            (Some(est.mean), Some(upper))
        }
        None => (None, None),
    };

    let candidates = certify_from_estimate(
        inputs.posterior,
        inputs.rho,
        prior,
        train_mc.mean,
        inputs.n_train,
        inputs.delta_prime,
    )?;
    let best = *candidates
        .iter()
        .min_by(|a, b| a.bound.total_cmp(&b.bound))
        .expect("two candidates");
    let sqrt_half_b_re = (0.5 * best.b_re).sqrt();
    let vacuous = best.bound >= 1.0;
    let (reported, reported_quantity) = if vacuous {
        (sqrt_half_b_re, ReportedQuantity::SqrtHalfBRe)
    } else {
        (best.bound, ReportedQuantity::Bound)
    };
    let pvalue = match inputs.pvalue_samples {
        0 => None,
        n => Some(snn_pvalue(inputs.w_sgd, inputs.posterior, n, inputs.pvalue_seed)?),
    };

    Ok(BoundReport {
        schema_version: REPORT_SCHEMA_VERSION,
        name: inputs.name.clone(),
        train_error,
        test_error,
        snn_train_mc: train_mc.mean,
        snn_train_upper,
        snn_test_mc,
        snn_test_upper,
        kl: best.kl,
        b_re: best.b_re,
        sqrt_half_b_re,
        bound: best.bound,
        reported,
        reported_quantity,
        vacuous,
        j: best.j,
        lambda: best.lambda,
        candidates,
        m: prior.m,
        n_train: inputs.n_train,
        n_test: inputs.n_test,
        delta: prior.delta,
        delta_prime: inputs.delta_prime,
        confidence: 1.0 - prior.delta - inputs.delta_prime,
        mc_seed: inputs.mc_seed,
        pvalue,
        pvalue_samples: inputs.pvalue_samples,
        config_digest: None,
        config: None,
        deviations: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn rounding_cases() {
        // λ = e^-6: j* = 100 (ln 0.1 + 6) = 369.74...
        let [down, up] = round_lambda(-3.0, 100, 0.1);
        assert_eq!((down.j, up.j), (369, 370));
        assert_abs_diff_eq!(down.lambda, 0.1 * (-3.69f64).exp(), epsilon = 1e-16);

        let on_lattice = 0.5 * (0.1f64.ln() - 2.5);
        let [down, up] = round_lambda(on_lattice, 100, 0.1);
        assert_eq!(down.j, 250);
        assert_eq!(up.j, 250);
        assert_abs_diff_eq!(down.lambda, (2.0 * on_lattice).exp(), epsilon = 1e-15);

        let [down, up] = round_lambda(0.5 * 0.1f64.ln(), 100, 0.1);
        assert_eq!((down.j, up.j), (1, 1));
    }

    #[test]
    fn final_bound_limits() {
        let inner = sample_convergence_bound(0.05, 1000, 0.01).unwrap();
        assert_eq!(final_bound(0.05, 1000, 0.01, 0.0).unwrap(), inner);
        // At q = 0 the inverse is 1 - exp(-c).
        let b = final_bound(0.0, u64::MAX, 0.01, 0.2).unwrap();
        assert_abs_diff_eq!(b, 1.0 - (-0.2f64).exp(), epsilon = 1e-9);
        assert!(final_bound(0.1, 100, 0.01, -1.0).is_err());
        assert_eq!(final_bound(0.3, 100, 0.01, 50.0).unwrap(), 1.0);
    }
}
