//! Kolmogorov–Smirnov checks of the samplers against closed-form CDFs,
//! 10^5 draws each at level 0.001.

use pslfm::dists::{
    draw_gamma, draw_inverse_gaussian, draw_truncated_normal, normal_cdf, normal_quantile, RngHandle, TruncationSide,
};
use statrs::distribution::{ContinuousCDF, Gamma, Normal};

const N: usize = 100_000;

fn ks_stat(mut draws: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    draws.sort_by(f64::total_cmp);
    let n = draws.len() as f64;
    draws
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

fn ks_critical() -> f64 {
    // asymptotic 0.001 quantile of the Kolmogorov distribution
    1.9495 / (N as f64).sqrt()
}

fn phi(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

#[test]
fn truncated_normal_matches_cdf() {
    for (k, mean) in [-7.0, -1.5, 0.0, 0.8, 6.5].into_iter().enumerate() {
        let mut rng = RngHandle::new(100 + k as u64, 0);
        let draws: Vec<f64> = (0..N)
            .map(|_| draw_truncated_normal(mean, TruncationSide::Positive, &mut rng))
            .collect();
        assert!(draws.iter().all(|&x| x > 0.0));
        let mass = 1.0 - phi(-mean);
        let d = ks_stat(draws, |x| (phi(x - mean) - phi(-mean)) / mass);
        assert!(d < ks_critical(), "mean {mean}: D = {d}");

        let draws: Vec<f64> = (0..N)
            .map(|_| draw_truncated_normal(mean, TruncationSide::Negative, &mut rng))
            .collect();
        assert!(draws.iter().all(|&x| x <= 0.0));
        let mass = phi(-mean);
        let d = ks_stat(draws, |x| phi(x - mean) / mass);
        assert!(d < ks_critical(), "mean {mean} negative side: D = {d}");
    }
}

#[test]
fn inverse_gaussian_matches_cdf() {
    for (k, (mu, lambda)) in [(1.0, 1.0), (0.2, 3.0), (8.0, 0.5)].into_iter().enumerate() {
        let mut rng = RngHandle::new(200 + k as u64, 0);
        let draws: Vec<f64> = (0..N)
            .map(|_| draw_inverse_gaussian(mu, lambda, &mut rng).unwrap())
            .collect();
        let cdf = |x: f64| {
            let s = (lambda / x).sqrt();
            let a = phi(s * (x / mu - 1.0));
            // exp(2λ/μ) Φ(-s(x/μ+1)) evaluated in log space
            let tail = Normal::standard().sf(s * (x / mu + 1.0));
            a + (2.0 * lambda / mu + tail.ln()).exp()
        };
        let d = ks_stat(draws, cdf);
        assert!(d < ks_critical(), "IG({mu}, {lambda}): D = {d}");
    }
}

#[test]
fn gamma_matches_cdf() {
    for (k, (shape, rate)) in [(0.5, 1.0), (6.001, 1.001), (120.0, 30.0)].into_iter().enumerate() {
        let mut rng = RngHandle::new(300 + k as u64, 0);
        let draws: Vec<f64> = (0..N).map(|_| draw_gamma(shape, rate, &mut rng).unwrap()).collect();
        let g = Gamma::new(shape, rate).unwrap();
        let d = ks_stat(draws, |x| g.cdf(x));
        assert!(d < ks_critical(), "Gamma({shape}, {rate}): D = {d}");
    }
}

#[test]
fn standard_normal_matches_cdf() {
    let mut rng = RngHandle::new(400, 0);
    let draws: Vec<f64> = (0..N).map(|_| rng.standard_normal()).collect();
    assert!(ks_stat(draws, phi) < ks_critical());
}

#[test]
fn quantile_inverts_cdf() {
    for p in [1e-12, 1e-6, 0.01, 0.3, 0.5, 0.77, 0.999, 1.0 - 1e-9] {
        let x = normal_quantile(p);
        assert!((normal_cdf(x) - p).abs() <= 1e-14 * p.max(1e-3), "p = {p}");
    }
}

#[test]
fn invalid_parameters_are_domain_errors() {
    let mut rng = RngHandle::new(1, 0);
    assert!(draw_gamma(0.0, 1.0, &mut rng).is_err());
    assert!(draw_gamma(1.0, f64::INFINITY, &mut rng).is_err());
    assert!(draw_inverse_gaussian(-1.0, 1.0, &mut rng).is_err());
    assert!(draw_inverse_gaussian(1.0, 0.0, &mut rng).is_err());
}
