//! The numerically integrated importance indicator against the closed form
//! `μ·(2Φ(2a/σ) − 1)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use rcn_core::interpret::{gaussian_indicator, importance, RegionWeightMatrix};

const TOL: f64 = 1e-6;

fn closed_form(mu: f64, sigma: f64, a: f64) -> f64 {
    let phi = Normal::new(0.0, 1.0).unwrap();
    mu * (2.0 * phi.cdf(2.0 * a / sigma) - 1.0)
}

#[test]
fn quadrature_matches_closed_form_on_random_triples() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut worst = 0.0f64;
    for i in 0..2000 {
        let mu = rng.gen_range(0.0..2.0);
        // Log-uniform spreads cover both narrow peaks and wide tails.
        let sigma = 10f64.powf(rng.gen_range(-4.0..0.5));
        let a = 10f64.powf(rng.gen_range(-4.0..0.5));
        let got = gaussian_indicator(mu, sigma, a);
        let want = closed_form(mu, sigma, a);
        let err = (got - want).abs();
        worst = worst.max(err);
        assert!(
            err <= TOL,
            "triple {i} (mu {mu}, sigma {sigma}, a {a}): {got} vs {want}"
        );
    }
    eprintln!("worst absolute error over 2000 triples: {worst:.3e}");
}

#[test]
fn zero_spread_returns_the_mean() {
    for mu in [0.0, 0.04, 0.5, 1.7] {
        assert_eq!(gaussian_indicator(mu, 0.0, 0.1), mu);
        assert_eq!(gaussian_indicator(mu, 0.0, 0.0), mu);
        // Approaching the limit continuously.
        for sigma in [1e-3, 1e-6, 1e-9] {
            assert!(
                (gaussian_indicator(mu, sigma, 0.1) - mu).abs() <= TOL,
                "mu {mu} sigma {sigma}"
            );
        }
    }
}

#[test]
fn report_uses_mean_deviation_as_shared_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..9).map(|_| rng.gen_range(0.0..0.3)).collect())
            .collect();
        let matrix = RegionWeightMatrix::from_rows(rows, (3, 3)).unwrap();
        let report = importance(&matrix).unwrap();
        let a = report.regions.iter().map(|r| r.sigma).sum::<f64>() / report.regions.len() as f64;
        assert!((report.a - a).abs() < 1e-12);
        for r in &report.regions {
            assert!((r.importance - closed_form(r.mu, r.sigma, a)).abs() <= TOL);
        }
        let imps: Vec<f64> = report
            .ascending
            .iter()
            .map(|&g| {
                report
                    .regions
                    .iter()
                    .find(|r| r.region == g)
                    .unwrap()
                    .importance
            })
            .collect();
        assert!(imps.windows(2).all(|p| p[0] <= p[1]));
    }
}
