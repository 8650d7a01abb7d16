//! Test-side oracles shared by the integration tests and the acceptance run.
//! Nothing here calls into the library's own loss or KL code.

#![allow(dead_code)]

use ndarray::Array2;
use pacbayes_core::data::{LabelKind, LabeledDataset, Provenance};
use pacbayes_core::nn::{self, MlpArchitecture, WeightVector};
use pacbayes_core::pacbayes::{self, GaussianPosterior, ObjectiveVariant, PriorSpec};
use pacbayes_core::pathnorm;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-5;
/// Instances whose pre-activations come this close to a ReLU kink are redrawn.
pub const KINK_MARGIN: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Plain nested-loop forward pass. Returns the output and the smallest
/// |pre-activation| seen in hidden layers.
pub fn naive_forward(widths: &[usize], params: &[f64], x: &[f64]) -> (f64, f64) {
    let mut act = x.to_vec();
    let mut offset = 0;
    let mut closest = f64::INFINITY;
    for l in 0..widths.len() - 1 {
        let (fi, fo) = (widths[l], widths[l + 1]);
        let w = &params[offset..offset + fi * fo];
        let b = &params[offset + fi * fo..offset + fi * fo + fo];
        offset += (fi + 1) * fo;
        let mut next = vec![0.0; fo];
        for j in 0..fo {
            let mut z = b[j];
            for i in 0..fi {
                z += act[i] * w[i * fo + j];
            }
            if l + 2 < widths.len() {
                closest = closest.min(z.abs());
                next[j] = z.max(0.0);
            } else {
                next[j] = z;
            }
        }
        act = next;
    }
    (act[0], closest)
}

/// Mean of `ln(1 + exp(−y f)) / ln 2` using the naive forward pass.
pub fn naive_surrogate(widths: &[usize], params: &[f64], data: &LabeledDataset) -> (f64, f64) {
    let mut total = 0.0;
    let mut closest = f64::INFINITY;
    for (row, &y) in data.features().rows().into_iter().zip(data.labels()) {
        let (f, c) = naive_forward(widths, params, row.as_slice().unwrap());
        closest = closest.min(c);
        total += (-y * f).exp().ln_1p() / std::f64::consts::LN_2;
    }
    (total / data.len() as f64, closest)
}

pub fn random_arch(rng: &mut ChaCha8Rng, max_params: usize) -> MlpArchitecture {
    loop {
        let hidden = rng.gen_range(1..=2);
        let mut widths = vec![rng.gen_range(1..=4)];
        for _ in 0..hidden {
            widths.push(rng.gen_range(1..=5));
        }
        widths.push(1);
        let arch = MlpArchitecture::new(widths).unwrap();
        if arch.param_count() <= max_params {
            return arch;
        }
    }
}

pub fn random_weights(rng: &mut ChaCha8Rng, arch: &MlpArchitecture, scale: f64) -> WeightVector {
    let normal = Normal::new(0.0, scale).unwrap();
    let values = (0..arch.param_count()).map(|_| normal.sample(rng)).collect();
    WeightVector::new(arch.clone(), values).unwrap()
}

pub fn random_data(rng: &mut ChaCha8Rng, m: usize, dim: usize) -> LabeledDataset {
    let features = Array2::from_shape_fn((m, dim), |_| rng.gen::<f64>());
    let labels = (0..m).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
    LabeledDataset::new(
        features,
        labels,
        Provenance {
            labels: LabelKind::Synthetic,
            label_seed: None,
        },
    )
    .unwrap()
}

pub fn standard_normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn central(f: &mut dyn FnMut(f64) -> f64, x: f64) -> f64 {
    (f(x + FD_STEP) - f(x - FD_STEP)) / (2.0 * FD_STEP)
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub instances: usize,
    pub max_rel_err: f64,
}

impl GradCheck {
    fn new() -> Self {
        Self {
            instances: 0,
            max_rel_err: 0.0,
        }
    }

    fn add(&mut self, e: f64) {
        self.max_rel_err = self.max_rel_err.max(e);
    }
}

/// Backprop gradient of the surrogate loss against central differences of
/// the naive loss.
pub fn surrogate_gradient_check(instances: usize, seed: u64) -> GradCheck {
    let mut rng = rng(seed);
    let mut out = GradCheck::new();
    while out.instances < instances {
        let arch = random_arch(&mut rng, 100);
        let w = random_weights(&mut rng, &arch, 0.8);
        let m = rng.gen_range(3..=12);
        let data = random_data(&mut rng, m, arch.input_dim());
        let widths = arch.widths().to_vec();
        if naive_surrogate(&widths, w.values(), &data).1 < KINK_MARGIN {
            continue;
        }
        let (_, g) = nn::grad_surrogate(&w, data.features(), data.labels()).unwrap();
        for i in 0..w.len() {
            let mut p = w.values().to_vec();
            let numeric = central(
                &mut |v| {
                    p[i] = v;
                    naive_surrogate(&widths, &p, &data).0
                },
                w.values()[i],
            );
            out.add(rel_err(g.values()[i], numeric));
        }
        out.instances += 1;
    }
    out
}

/// Independent evaluation of the objective for fixed noise.
#[allow(clippy::too_many_arguments)]
pub fn oracle_objective(
    widths: &[usize],
    mean: &[f64],
    log_std: &[f64],
    rho: f64,
    prior_mean: &[f64],
    prior: &PriorSpec,
    variant: ObjectiveVariant,
    data: &LabeledDataset,
    xi: &[f64],
) -> (f64, f64) {
    let perturbed: Vec<f64> = (0..mean.len()).map(|i| mean[i] + xi[i] * log_std[i].exp()).collect();
    let (surrogate, closest) = naive_surrogate(widths, &perturbed, data);
    let lam = (2.0 * rho).exp();
    let d = mean.len() as f64;
    let trace: f64 = log_std.iter().map(|s| (2.0 * s).exp()).sum::<f64>() / lam;
    let dist: f64 = mean.iter().zip(prior_mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / lam;
    let logdet = d * lam.ln() - log_std.iter().map(|s| 2.0 * s).sum::<f64>();
    let kl = 0.5 * (trace - d + dist + logdet);
    let union = 2.0 * (prior.b as f64 * (prior.c / lam).ln()).ln();
    let conf = (std::f64::consts::PI.powi(2) * prior.m as f64 / (6.0 * prior.delta)).ln();
    let b = (kl + union + conf) / (prior.m as f64 - 1.0);
    let penalty = match variant {
        ObjectiveVariant::SquareRoot => (b / 2.0).sqrt(),
        ObjectiveVariant::Linear => b,
    };
    (surrogate + penalty, closest)
}

#[derive(Debug, Clone, Copy)]
pub struct ObjectiveCheck {
    pub mean: GradCheck,
    pub log_std: GradCheck,
    pub rho: GradCheck,
}

/// Objective partials in `w`, `ς` and `ϱ` against central differences of
/// [`oracle_objective`], with the noise held fixed.
pub fn objective_gradient_check(variant: ObjectiveVariant, instances: usize, seed: u64) -> ObjectiveCheck {
    let mut rng = rng(seed);
    let mut out = ObjectiveCheck {
        mean: GradCheck::new(),
        log_std: GradCheck::new(),
        rho: GradCheck::new(),
    };
    let mut accepted = 0;
    while accepted < instances {
        let arch = random_arch(&mut rng, 100);
        let widths = arch.widths().to_vec();
        let w = random_weights(&mut rng, &arch, 0.8);
        let w0 = random_weights(&mut rng, &arch, 0.8);
        let d = w.len();
        let log_std: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..-0.5)).collect();
        let rho = rng.gen_range(-4.0..-1.5);
        let m = rng.gen_range(3..=12);
        let data = random_data(&mut rng, m, arch.input_dim());
        let xi = standard_normals(&mut rng, d);
        let prior = PriorSpec::new(w0.clone(), m);
        let f = |mean: &[f64], ls: &[f64], r: f64| {
            oracle_objective(&widths, mean, ls, r, w0.values(), &prior, variant, &data, &xi)
        };
        if f(w.values(), &log_std, rho).1 < KINK_MARGIN {
            continue;
        }
        let post = GaussianPosterior::new(w.clone(), log_std.clone()).unwrap();
        let (_, g) = pacbayes::objective_and_grad(
            &post,
            rho,
            &prior,
            variant,
            data.features(),
            data.labels(),
            std::slice::from_ref(&xi),
        )
        .unwrap();
        for i in 0..d {
            let mut p = w.values().to_vec();
            let n = central(&mut |v| {
                p[i] = v;
                f(&p, &log_std, rho).0
            }, w.values()[i]);
            out.mean.add(rel_err(g.mean[i], n));
            let mut s = log_std.clone();
            let n = central(&mut |v| {
                s[i] = v;
                f(w.values(), &s, rho).0
            }, log_std[i]);
            out.log_std.add(rel_err(g.log_std[i], n));
        }
        let n = central(&mut |r| f(w.values(), &log_std, r).0, rho);
        out.rho.add(rel_err(g.rho, n));
        accepted += 1;
    }
    out.mean.instances = accepted;
    out.log_std.instances = accepted;
    out.rho.instances = accepted;
    out
}

/// Path-norm subgradient against central differences, weights kept away from 0.
pub fn pathnorm_gradient_check(instances: usize, seed: u64) -> GradCheck {
    let mut rng = rng(seed);
    let mut out = GradCheck::new();
    while out.instances < instances {
        let arch = random_arch(&mut rng, 100);
        let w = random_weights(&mut rng, &arch, 0.8);
        if w.values().iter().any(|v| v.abs() < 1e-2) {
            continue;
        }
        let mut g = vec![0.0; w.len()];
        pathnorm::add_path_norm_grad(&arch, w.values(), 1.0, &mut g);
        for layout in arch.layers() {
            for i in layout.weight_range() {
                let mut p = w.values().to_vec();
                let n = central(&mut |v| {
                    p[i] = v;
                    brute_force_path_norm(arch.widths(), &p)
                }, w.values()[i]);
                out.add(rel_err(g[i], n));
            }
            for i in layout.bias_range() {
                out.add(rel_err(g[i], 0.0));
            }
        }
        out.instances += 1;
    }
    out
}

/// Sum over explicitly enumerated input-to-output paths.
pub fn brute_force_path_norm(widths: &[usize], params: &[f64]) -> f64 {
    let layers = widths.len() - 1;
    let mut offsets = Vec::with_capacity(layers);
    let mut offset = 0;
    for l in 0..layers {
        offsets.push(offset);
        offset += (widths[l] + 1) * widths[l + 1];
    }
    fn walk(widths: &[usize], params: &[f64], offsets: &[usize], layer: usize, unit: usize, acc: f64) -> f64 {
        if layer == offsets.len() {
            return acc;
        }
        let fo = widths[layer + 1];
        (0..fo)
            .map(|j| {
                let w = params[offsets[layer] + unit * fo + j].abs();
                walk(widths, params, offsets, layer + 1, j, acc * w)
            })
            .sum()
    }
    (0..widths[0]).map(|i| walk(widths, params, &offsets, 0, i, 1.0)).sum()
}

/// Largest `p` with `KL(q || p) <= c`, by bisection on the raw formula.
pub fn bisection_kl_inverse(q: f64, c: f64) -> f64 {
    let kl = |p: f64| {
        let mut v = 0.0;
        if q > 0.0 {
            v += q * (q / p).ln();
        }
        if q < 1.0 {
            v += (1.0 - q) * ((1.0 - q) / (1.0 - p)).ln();
        }
        v
    };
    let (mut lo, mut hi) = (q, 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if kl(mid) > c {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    lo
}

/// `P(χ²_4 < r)`.
pub fn chi_square_4_cdf(r: f64) -> f64 {
    1.0 - (-r / 2.0).exp() * (1.0 + r / 2.0)
}

/// Posterior over the smallest network (`d = 4`) and a point at squared
/// Mahalanobis distance `r` from its mean.
pub fn pvalue_fixture(r: f64, seed: u64) -> (WeightVector, GaussianPosterior) {
    let mut g = rng(seed);
    let arch = MlpArchitecture::new(vec![1, 1, 1]).unwrap();
    let mean = random_weights(&mut g, &arch, 1.0);
    let log_std: Vec<f64> = (0..4).map(|_| g.gen_range(-3.0..0.0)).collect();
    let dir = standard_normals(&mut g, 4);
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    let point: Vec<f64> = (0..4)
        .map(|i| mean.values()[i] + log_std[i].exp() * dir[i] / norm * r.sqrt())
        .collect();
    let post = GaussianPosterior::new(mean, log_std).unwrap();
    (WeightVector::new(arch, point).unwrap(), post)
}

/// Fraction of `trials` Bernoulli(`p`) experiments of size `n` where the
/// sample-convergence bound falls below `p`.
pub fn coverage_failure_rate(p: f64, n: u64, delta_prime: f64, trials: usize, seed: u64) -> f64 {
    let mut g = rng(seed);
    let binomial = rand_distr::Binomial::new(n, p).unwrap();
    let failures = (0..trials)
        .filter(|_| {
            let hits = binomial.sample(&mut g);
            let mean = hits as f64 / n as f64;
            pacbayes_core::kl::sample_convergence_bound(mean, n, delta_prime).unwrap() < p
        })
        .count();
    failures as f64 / trials as f64
}

/// Largest `|kl_inverse − bisection|` over a `side × side` grid of `(q, c)`,
/// `q` evenly spaced over `[0.001, 0.999]` and `c` log-spaced over `[1e−6, 5]`.
pub fn kl_inverse_grid_error(side: usize) -> (usize, f64) {
    let mut worst = 0.0f64;
    for a in 0..side {
        let q = 0.001 + 0.998 * a as f64 / (side - 1) as f64;
        for b in 0..side {
            let c = 1e-6 * (5e6f64).powf(b as f64 / (side - 1) as f64);
            let fast = pacbayes_core::kl::kl_inverse(q, c);
            worst = worst.max((fast - bisection_kl_inverse(q, c)).abs());
        }
    }
    (side * side, worst)
}

fn kl_discrete(q: &[f64], p: &[f64]) -> f64 {
    q.iter().zip(p).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a / b).ln()).sum()
}

fn all_permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in all_permutations(k - 1) {
        for pos in 0..=p.len() {
            let mut v = p.clone();
            v.insert(pos, k - 1);
            out.push(v);
        }
    }
    out
}

/// A random finite permutation group of order at most 24 on `n` points:
/// either the full symmetric group on the first `k ≤ 4` points or a cyclic
/// rotation of `r` equal blocks.
pub fn random_group(rng: &mut ChaCha8Rng) -> (usize, Vec<Vec<usize>>) {
    if rng.gen::<bool>() {
        let k = rng.gen_range(2..=4);
        let n = k + rng.gen_range(0..4);
        let group = all_permutations(k)
            .into_iter()
            .map(|p| (0..n).map(|i| if i < k { p[i] } else { i }).collect())
            .collect();
        (n, group)
    } else {
        let r = rng.gen_range(2..=24);
        let block = rng.gen_range(1..=3);
        let n = r * block;
        let group = (0..r)
            .map(|s| (0..n).map(|i| ((i / block + s) % r) * block + i % block).collect())
            .collect();
        (n, group)
    }
}

/// Largest residual of `KL(Q^S||P) = KL(Q||P) − KL(Q||Q^S)` over random
/// invariant priors, each side computed here from the symmetrized `Q`.
pub fn symmetrization_residual(instances: usize, seed: u64) -> f64 {
    let mut g = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (n, group) = random_group(&mut g);
        let raw: Vec<f64> = (0..n).map(|_| g.gen_range(0.05..1.0)).collect();
        let mut p = vec![0.0; n];
        for perm in &group {
            for i in 0..n {
                p[perm[i]] += raw[i];
            }
        }
        let total: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= total);
        let mut q: Vec<f64> = (0..n).map(|_| g.gen_range(0.01..1.0)).collect();
        let total: f64 = q.iter().sum();
        q.iter_mut().for_each(|v| *v /= total);

        let lib = pacbayes_core::kl::symmetrization_kl_identity(&q, &p, &group).unwrap();
        let mut sym = vec![0.0; n];
        for perm in &group {
            for i in 0..n {
                sym[perm[i]] += q[i] / group.len() as f64;
            }
        }
        let (sp, qp, qs) = (kl_discrete(&sym, &p), kl_discrete(&q, &p), kl_discrete(&q, &sym));
        worst = worst
            .max((sp - (qp - qs)).abs())
            .max((lib.kl_sym_p - sp).abs())
            .max((lib.kl_q_p - qp).abs())
            .max((lib.kl_q_sym - qs).abs());
    }
    worst
}
