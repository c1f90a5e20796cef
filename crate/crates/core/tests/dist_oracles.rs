//! Quadrature-backed checks of the analytic divergences.

mod common;

use common::{kl_gamma_gamma_quadrature, kl_weibull_gamma_quadrature};
use rayon::prelude::*;
use datm_core::dist::{gamma_gamma_kl, weibull_gamma_kl, GammaParams, WeibullParams};

fn w(k: f64, lam: f64) -> WeibullParams<f64> {
    WeibullParams::new(k, lam).unwrap()
}
fn g(a: f64, b: f64) -> GammaParams<f64> {
    GammaParams::new(a, b).unwrap()
}

#[test]
fn weibull_gamma_kl_matches_quadrature_spot_checks() {
    for &(k, lam, a, b) in &[
        (2.0, 1.0, 1.0, 1.0),
        (0.5, 0.3, 2.0, 0.7),
        (3.0, 4.0, 0.4, 2.0),
        (1.0, 1.0, 1.0, 1.0),
    ] {
        let analytic = weibull_gamma_kl(w(k, lam), g(a, b));
        let quad = kl_weibull_gamma_quadrature(k, lam, a, b);
        assert!(
            (analytic - quad).abs() < 1e-6,
            "({k},{lam},{a},{b}): {analytic} vs {quad}"
        );
    }
}

#[test]
fn weibull_gamma_kl_matches_quadrature_on_log_grid() {
    // 5×5×5×5 log grid over [0.1, 10]^4, 1e-6 absolute
    let grid: Vec<f64> = (0..5)
        .map(|i| 10f64.powf(-1.0 + 2.0 * i as f64 / 4.0))
        .collect();
    let mut points = Vec::new();
    for &k in &grid {
        for &lam in &grid {
            for &a in &grid {
                for &b in &grid {
                    points.push((k, lam, a, b));
                }
            }
        }
    }
    assert_eq!(points.len(), 625);
    let max_err = points
        .par_iter()
        .map(|&(k, lam, a, b)| {
            let analytic = weibull_gamma_kl(w(k, lam), g(a, b));
            let quad = kl_weibull_gamma_quadrature(k, lam, a, b);
            let err = (analytic - quad).abs();
            assert!(err < 1e-6, "({k},{lam},{a},{b}): err {err}");
            assert!(analytic >= -1e-12);
            err
        })
        .reduce(|| 0.0, f64::max);
    println!("grid max |analytic − quadrature| = {max_err:.3e}");
}

#[test]
fn gamma_gamma_kl_matches_quadrature() {
    for &(aq, bq, ap, bp) in &[
        (1.0, 1.0, 2.0, 1.0),
        (2.5, 0.6, 0.9, 1.8),
        (5.0, 3.0, 5.0, 3.0),
        (0.7, 1.2, 3.3, 0.4),
    ] {
        let analytic = gamma_gamma_kl(g(aq, bq), g(ap, bp));
        let quad = kl_gamma_gamma_quadrature(aq, bq, ap, bp);
        assert!(
            (analytic - quad).abs() < 1e-6,
            "({aq},{bq},{ap},{bp}): {analytic} vs {quad}"
        );
    }
}
