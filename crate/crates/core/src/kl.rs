//! KL-divergence arithmetic. All divergences are in nats.

use crate::error::{Error, Result};

/// Upper clamp for Newton iterates, keeping them off the pole at `p = 1`.
const P_MAX: f64 = 1.0 - 1e-12;

/// `KL(Bernoulli(q) || Bernoulli(p))`, with `0 log 0 = 0`.
///
/// Returns `+inf` when `p` is 0 or 1 and `q` puts mass where `p` has none.
pub fn kl_bernoulli(q: f64, p: f64) -> f64 {
    let mut kl = 0.0;
    if q > 0.0 {
        if p <= 0.0 {
            return f64::INFINITY;
        }
        kl += q * (q / p).ln();
    }
    if q < 1.0 {
        if p >= 1.0 {
            return f64::INFINITY;
        }
        kl += (1.0 - q) * ((1.0 - q) / (1.0 - p)).ln();
    }
    kl.max(0.0)
}

/// Borrowed diagonal Gaussian posterior `N(mean, diag(var))` and isotropic
/// prior `N(prior_mean, prior_var * I)`.
#[derive(Debug, Clone, Copy)]
pub struct DiagGaussianPair<'a> {
    pub mean: &'a [f64],
    pub var: &'a [f64],
    pub prior_mean: &'a [f64],
    pub prior_var: f64,
}

/// Closed-form `KL(N(w, diag s) || N(w0, λ I))`.
///
/// Summed per coordinate as `½(s/λ − 1 − ln(s/λ) + (w − w0)²/λ)`, which is the
/// usual trace/log-determinant form regrouped so every term is nonnegative.
pub fn kl_diag_gaussian(pair: &DiagGaussianPair<'_>) -> Result<f64> {
    let d = pair.mean.len();
    for (what, len) in [("variances", pair.var.len()), ("prior mean", pair.prior_mean.len())] {
        if len != d {
            return Err(Error::Dimension {
                what,
                expected: d,
                actual: len,
            });
        }
    }
    if !(pair.prior_var > 0.0 && pair.prior_var.is_finite()) {
        return Err(Error::invalid("prior_var", format!("must be positive, got {}", pair.prior_var)));
    }
    if let Some(s) = pair.var.iter().find(|&&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::invalid("var", format!("must be positive, got {s}")));
    }
    let lam = pair.prior_var;
    let mut total = 0.0;
    for ((&w, &s), &w0) in pair.mean.iter().zip(pair.var).zip(pair.prior_mean) {
        let ratio = s / lam;
        let dw = w - w0;
        total += ratio - 1.0 - ratio.ln() + dw * dw / lam;
    }
    Ok(0.5 * total)
}

/// Same divergence parametrized by log standard deviations:
/// `s = exp(2 log_std)`, `λ = exp(2 prior_log_std)`.
pub fn kl_diag_gaussian_log_std(
    mean: &[f64],
    log_std: &[f64],
    prior_mean: &[f64],
    prior_log_std: f64,
) -> f64 {
    let inv_lam = (-2.0 * prior_log_std).exp();
    let mut total = 0.0;
    for ((&w, &ls), &w0) in mean.iter().zip(log_std).zip(prior_mean) {
        let log_ratio = 2.0 * (ls - prior_log_std);
        let dw = w - w0;
        total += log_ratio.exp() - 1.0 - log_ratio + dw * dw * inv_lam;
    }
    0.5 * total
}

/// `min(1, q + sqrt(c / 2))`, the Pinsker upper bound on `kl_inverse(q, c)`.
pub fn pinsker_inverse_upper(q: f64, c: f64) -> f64 {
    (q + (c / 2.0).sqrt()).min(1.0)
}

fn newton_step(q: f64, c: f64, p: f64) -> (f64, f64) {
    let h = kl_bernoulli(q, p) - c;
    let dh = (1.0 - q) / (1.0 - p) - q / p;
    (h, dh)
}

/// `sup { p in [q, 1] : KL(q || p) <= c }`.
///
/// Newton's method on `h(p) = KL(q||p) − c` started from the Pinsker bound and
/// run to convergence. Iterates are kept inside a shrinking bracket around the
/// root; a step that would leave it is replaced by bisection.
pub fn kl_inverse(q: f64, c: f64) -> f64 {
    let q = q.clamp(0.0, 1.0);
    if c <= 0.0 || q >= 1.0 {
        return q;
    }
    if !c.is_finite() {
        return 1.0;
    }
    if kl_bernoulli(q, P_MAX) <= c {
        return 1.0;
    }
    // h(lo) <= 0 < h(hi) throughout.
    let (mut lo, mut hi) = (q, P_MAX);
    let mut p = q + (c / 2.0).sqrt();
    if p >= hi {
        p = 0.5 * (lo + hi);
    }
    for _ in 0..200 {
        let (h, dh) = newton_step(q, c, p);
        if h > 0.0 {
            hi = p;
        } else {
            lo = p;
            if h == 0.0 {
                return p;
            }
        }
        let mut next = p - h / dh;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - p).abs() <= 4.0 * f64::EPSILON * p || hi - lo <= 4.0 * f64::EPSILON * hi {
            return next.max(q);
        }
        p = next;
    }
    p.max(q)
}

/// The fixed-step variant: Pinsker start, `1` if that start is at least 1,
/// otherwise exactly `steps` Newton updates clamped to `(q, 1 − 1e−12)`.
///
/// Newton iterates approach the root of the convex increasing `h` from above,
/// so the result is never smaller than [`kl_inverse`].
pub fn kl_inverse_fixed_steps(q: f64, c: f64, steps: usize) -> f64 {
    let q = q.clamp(0.0, 1.0);
    if c <= 0.0 || q >= 1.0 {
        return q;
    }
    let mut p = q + (c / 2.0).sqrt();
    if p >= 1.0 {
        return 1.0;
    }
    for _ in 0..steps {
        let (h, dh) = newton_step(q, c, p);
        if h == 0.0 || dh == 0.0 {
            break;
        }
        p = (p - h / dh).clamp(q, P_MAX);
    }
    p
}

/// Upper confidence bound on a Bernoulli mean from `n` draws with empirical
/// mean `mean`, holding with probability `1 − δ'`.
pub fn sample_convergence_bound(mean: f64, n: u64, delta_prime: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("n", "need at least one sample"));
    }
    if !(delta_prime > 0.0 && delta_prime < 1.0) {
        return Err(Error::invalid("delta_prime", format!("must lie in (0, 1), got {delta_prime}")));
    }
    if !(0.0..=1.0).contains(&mean) {
        return Err(Error::invalid("mean", format!("must lie in [0, 1], got {mean}")));
    }
    Ok(kl_inverse(mean, (2.0 / delta_prime).ln() / n as f64))
}

/// The three divergences in the symmetrization identity
/// `KL(Q^S || P) = KL(Q || P) − KL(Q || Q^S)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymmetrizationKl {
    pub kl_sym_p: f64,
    pub kl_q_p: f64,
    pub kl_q_sym: f64,
}

fn kl_discrete(q: &[f64], p: &[f64]) -> f64 {
    q.iter()
        .zip(p)
        .filter(|(&qi, _)| qi > 0.0)
        .map(|(&qi, &pi)| qi * (qi / pi).ln())
        .sum()
}

/// Symmetrizes `q` over a permutation group and returns the three KLs.
///
/// Each permutation maps support point `i` to `perm[i]`, and pushes `q`
/// forward as `(q ∘ σ⁻¹)[perm[i]] = q[i]`. `p` must be invariant under every
/// permutation and the set must be closed under composition.
pub fn symmetrization_kl_identity(
    q: &[f64],
    p: &[f64],
    permutations: &[Vec<usize>],
) -> Result<SymmetrizationKl> {
    let n = q.len();
    if p.len() != n {
        return Err(Error::Dimension {
            what: "prior probabilities",
            expected: n,
            actual: p.len(),
        });
    }
    if permutations.is_empty() {
        return Err(Error::invalid("permutations", "need at least one"));
    }
    if q.iter().chain(p).any(|&v| !(v > 0.0)) {
        return Err(Error::invalid("probabilities", "must be strictly positive"));
    }
    for perm in permutations {
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&j| j >= n || std::mem::replace(&mut seen[j], true)) {
            return Err(Error::invalid("permutations", format!("{perm:?} is not a permutation of 0..{n}")));
        }
    }
    for perm in permutations {
        for other in permutations {
            let composed: Vec<usize> = (0..n).map(|i| perm[other[i]]).collect();
            if !permutations.contains(&composed) {
                return Err(Error::invalid("permutations", "set is not closed under composition"));
            }
        }
    }
    for (index, perm) in permutations.iter().enumerate() {
        let scale = p.iter().fold(0.0_f64, |m, v| m.max(*v));
        if (0..n).any(|i| (p[perm[i]] - p[i]).abs() > 1e-14 * scale) {
            return Err(Error::NotInvariant { index });
        }
    }
    let mut sym = vec![0.0; n];
    for perm in permutations {
        for (i, &qi) in q.iter().enumerate() {
            sym[perm[i]] += qi;
        }
    }
    let k = permutations.len() as f64;
    sym.iter_mut().for_each(|v| *v /= k);
    Ok(SymmetrizationKl {
        kl_sym_p: kl_discrete(&sym, p),
        kl_q_p: kl_discrete(q, p),
        kl_q_sym: kl_discrete(q, &sym),
    })
}
