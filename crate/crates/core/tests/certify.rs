mod common;

use common::*;
use pacbayes_core::certify::{final_bound, mc_snn_error, snn_pvalue};
use pacbayes_core::nn::{self, MlpArchitecture};
use pacbayes_core::pacbayes::GaussianPosterior;
use pacbayes_core::rng::Stream;

#[test]
fn final_bound_is_monotone_and_bracketed() {
    let errors = [0.0, 0.01, 0.05, 0.1, 0.3, 0.5, 0.9];
    let b_res = [0.0, 1e-3, 0.01, 0.1, 0.5, 2.0];
    let ns = [10u64, 100, 1000, 150_000];
    for &n in &ns {
        for &b in &b_res {
            let mut prev = 0.0;
            for &e in &errors {
                let v = final_bound(e, n, 0.01, b).unwrap();
                assert!(v >= e && v <= 1.0, "e {e} n {n} b {b}: {v}");
                assert!(v >= prev - 1e-12);
                prev = v;
            }
        }
        for &e in &errors {
            let mut prev = 0.0;
            for &b in &b_res {
                let v = final_bound(e, n, 0.01, b).unwrap();
                assert!(v >= prev - 1e-12);
                prev = v;
            }
        }
    }
    for &e in &errors {
        for &b in &b_res {
            let mut prev = 1.0;
            for &n in &ns {
                let v = final_bound(e, n, 0.01, b).unwrap();
                assert!(v <= prev + 1e-12);
                prev = v;
            }
        }
    }
}

#[test]
fn sample_convergence_bound_covers_at_the_nominal_rate() {
    for (p, n) in [(0.02, 200), (0.1, 100), (0.4, 50)] {
        let trials = 5000;
        let rate = coverage_failure_rate(p, n, 0.05, trials, 31);
        let slack = 3.0 * (0.05 * 0.95 / trials as f64).sqrt();
        assert!(rate <= 0.05 + slack, "p {p} n {n}: failure rate {rate}");
    }
}

#[test]
fn pvalue_follows_the_chi_square_distribution() {
    let n = 20_000;
    for (k, r) in [0.5, 2.0, 4.0, 9.0].into_iter().enumerate() {
        let (point, post) = pvalue_fixture(r, 40 + k as u64);
        let p = snn_pvalue(&point, &post, n, 3).unwrap();
        let expected = chi_square_4_cdf(r);
        let se = (expected * (1.0 - expected) / n as f64).sqrt();
        assert!((p - expected).abs() < 4.0 * se, "r {r}: {p} vs {expected}");
    }
}

#[test]
fn pvalue_is_zero_at_the_posterior_mean() {
    let (_, post) = pvalue_fixture(1.0, 50);
    assert_eq!(snn_pvalue(post.mean(), &post, 1000, 0).unwrap(), 0.0);
}

#[test]
fn collapsed_posterior_reproduces_the_deterministic_error() {
    let mut g = rng(60);
    let arch = MlpArchitecture::new(vec![3, 6, 1]).unwrap();
    let w = random_weights(&mut g, &arch, 1.0);
    let data = random_data(&mut g, 200, 3);
    let post = GaussianPosterior::new(w.clone(), vec![-60.0; w.len()]).unwrap();
    let est = mc_snn_error(&post, &data, 20, 1).unwrap();
    let exact = nn::zero_one_error(&w, &data).unwrap();
    assert!(est.per_draw.iter().all(|&e| e == exact));
    assert!((est.mean - exact).abs() < 1e-12);
}

#[test]
fn monte_carlo_draws_are_reproducible_individually() {
    let mut g = rng(61);
    let arch = MlpArchitecture::new(vec![3, 6, 1]).unwrap();
    let w = random_weights(&mut g, &arch, 1.0);
    let data = random_data(&mut g, 100, 3);
    let post = GaussianPosterior::new(w, vec![-0.5; arch.param_count()]).unwrap();
    let a = mc_snn_error(&post, &data, 30, 9).unwrap();
    let b = mc_snn_error(&post, &data, 30, 9).unwrap();
    assert_eq!(a, b);
    for i in [0u64, 7, 29] {
        let net = post.sample(9, Stream::MonteCarlo, i);
        assert_eq!(a.per_draw[i as usize], nn::zero_one_error(&net, &data).unwrap());
    }
    assert_ne!(a.per_draw, mc_snn_error(&post, &data, 30, 10).unwrap().per_draw);
}
