//! Distributional checks on the synthetic samplers and a brute-force check
//! of the barycenter variance.

use statrs::distribution::{Beta, ContinuousCDF, Normal};

use cot_core::diffengine::Matrix;
use cot_core::oracles::{analytic_barycenter, exact_assignment_ot, literal_barycenter, OtCost};
use cot_core::rng::RngStream;
use cot_core::synthdata::{gen_conditional_gaussian, sample_beta, ConditionalGaussianSpec};

/// Kolmogorov–Smirnov statistic of `xs` against `cdf`.
fn ks(mut xs: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Asymptotic 1% critical value of the one-sample KS statistic.
fn ks_critical(n: usize) -> f64 {
    1.628 / (n as f64).sqrt()
}

#[test]
fn beta_sampler_passes_ks() {
    for (a, b) in [(2.0, 4.0), (4.0, 2.0), (0.5, 0.7), (1.0, 1.0)] {
        let law = Beta::new(a, b).unwrap();
        for seed in 0..3 {
            let xs = sample_beta(&mut RngStream::new(seed), a, b, 2000).unwrap();
            let d = ks(xs, |x| law.cdf(x));
            assert!(d < ks_critical(2000), "Beta({a}, {b}) seed {seed}: D = {d}");
        }
    }
}

#[test]
fn normal_sampler_passes_ks() {
    let law = Normal::new(0.0, 1.0).unwrap();
    let mut r = RngStream::new(9);
    let xs: Vec<f64> = (0..5000).map(|_| r.normal()).collect();
    assert!(ks(xs, |x| law.cdf(x)) < ks_critical(5000));
}

#[test]
fn conditional_residuals_are_standard_normal() {
    let spec = ConditionalGaussianSpec::converge_target();
    let d = gen_conditional_gaussian(&mut RngStream::new(4), &spec, 3000).unwrap();
    let z: Vec<f64> = d
        .x()
        .column(0)
        .iter()
        .zip(d.y().column(0))
        .map(|(&x, &y)| (y - spec.mean(x)) / spec.variance(x).sqrt())
        .collect();
    let law = Normal::new(0.0, 1.0).unwrap();
    assert!(ks(z, |x| law.cdf(x)) < ks_critical(3000));
}

/// Equal-weight quantile discretization of N(μ, σ²), listed in a scrambled
/// order so that the matching has to be found by the solver.
fn discretize(mean: f64, var: f64, n: usize, seed: u64) -> Matrix {
    let law = Normal::new(mean, var.sqrt()).unwrap();
    let order = RngStream::new(seed).permutation(n);
    Matrix::from_shape_fn((n, 1), |(i, _)| {
        law.inverse_cdf((order[i] as f64 + 0.5) / n as f64)
    })
}

fn half_w2_sum(b: &Matrix, s: &Matrix, t: &Matrix) -> f64 {
    0.5 * exact_assignment_ot(b, s, OtCost::SqEuclidean).unwrap().cost
        + 0.5 * exact_assignment_ot(b, t, OtCost::SqEuclidean).unwrap().cost
}

#[test]
fn brute_force_barycenter_has_variance_two_and_a_quarter() {
    let n = 300;
    for x in [0.2, 0.5, 0.8] {
        let s = discretize(2.0 * (x - 0.5), 1.0, n, 1);
        let t = discretize(-4.0 * (x - 0.5), 4.0, n, 2);
        // the midpoints of an optimal matching form the equal-weight barycenter
        let plan = exact_assignment_ot(&s, &t, OtCost::SqEuclidean).unwrap();
        let mid: Vec<f64> = (0..n)
            .map(|i| 0.5 * (s[[i, 0]] + t[[plan.permutation[i], 0]]))
            .collect();
        let mean = mid.iter().sum::<f64>() / n as f64;
        let var = mid.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let derived = analytic_barycenter(x, 0.5).unwrap();
        let literal = literal_barycenter(x);
        assert!((mean - derived.mean()).abs() < 1e-9);
        // quantile discretization loses a little variance in the tails
        assert!(
            (var - derived.var()).abs() < 0.05,
            "x = {x}: variance {var}"
        );
        assert!((var - literal.var()).abs() > 0.2);

        // and it beats the variance-2.5 candidate on the barycenter objective
        let mid_m = Matrix::from_shape_vec((n, 1), mid).unwrap();
        let lit_m = discretize(literal.mean(), literal.var(), n, 3);
        let der_m = discretize(derived.mean(), derived.var(), n, 4);
        let (f_mid, f_lit, f_der) = (
            half_w2_sum(&mid_m, &s, &t),
            half_w2_sum(&lit_m, &s, &t),
            half_w2_sum(&der_m, &s, &t),
        );
        assert!(
            f_mid <= f_der + 1e-9 && f_der < f_lit,
            "x = {x}: {f_mid} {f_der} {f_lit}"
        );
    }
}
