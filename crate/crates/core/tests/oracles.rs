//! Closed forms checked against numerical integration and Monte Carlo.

use hurdle_imdl::hurdle_dist::{
    debias_grid, debias_lognormal_numeric, debiased_lognormal, hurdle_expectation, hurdle_pdf, log_product_integral,
    sample_hurdle_n, HurdleParams, LognormalParams, MarginalPrior,
};
use hurdle_imdl::losses::corr_term;
use hurdle_imdl::quadrature::{integrate, trapezoid, Tolerance};
use hurdle_imdl::synthgen::{self, biased_posterior, generate, ideal_posterior, ForwardModel, RateGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn normal_ln_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    -0.5 * z * z - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// `∫ pdf_a(r)·pdf_b(r) dr` on the log axis, where it becomes
/// `∫ φa(x)·φb(x)·e^{-x} dx`.
fn product_integral_by_quadrature(a: (f64, f64), b: (f64, f64)) -> f64 {
    let lo = a.0.min(b.0) - 12.0 * a.1.max(b.1) - 8.0;
    let hi = a.0.max(b.0) + 12.0 * a.1.max(b.1) + 8.0;
    let f = |x: f64| (normal_ln_pdf(x, a.0, a.1) + normal_ln_pdf(x, b.0, b.1) - x).exp();
    integrate(f, lo, hi, Tolerance { abs: 0.0, rel: 1e-12, max_segments: 20_000 }).unwrap().value
}

#[test]
fn product_integral_matches_quadrature() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..300 {
        let a = (rng.gen_range(-2.0..3.0), rng.gen_range(0.1..2.0));
        let b = (rng.gen_range(-2.0..3.0), rng.gen_range(0.1..2.0));
        let closed = log_product_integral(&LognormalParams::new(a.0, a.1).unwrap(), &LognormalParams::new(b.0, b.1).unwrap());
        let numeric = product_integral_by_quadrature(a, b);
        let rel = (closed.exp() - numeric).abs() / numeric;
        assert!(rel < 1e-6, "a={a:?} b={b:?} closed={} numeric={numeric}", closed.exp());
    }
}

#[test]
fn correction_term_is_product_integral_plus_constant() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let c = 0.5 * (2.0 * std::f64::consts::PI).ln();
    for _ in 0..1000 {
        let (mu, sigma) = (rng.gen_range(-2.0..3.0), rng.gen_range(0.1..2.0));
        let prior = MarginalPrior::new(rng.gen_range(-2.0..3.0), rng.gen_range(0.1..2.0), 0.2).unwrap();
        let lpi = log_product_integral(&LognormalParams::new(mu, sigma).unwrap(), &prior.wet());
        assert!((corr_term(mu, sigma, &prior) - (lpi + c)).abs() < 1e-9);
    }
}

#[test]
fn hurdle_density_normalises() {
    for &(p, mu, sigma) in &[(0.0, 0.46, 1.28), (0.217, 0.0, 0.5), (0.9, 2.5, 1e-3), (0.5, -2.0, 2.0)] {
        let hp = HurdleParams::from_parts(p, mu, sigma).unwrap();
        let half = 14.0 * sigma;
        let wet = integrate(
            |x: f64| hurdle_pdf(x.exp(), &hp).unwrap() * x.exp(),
            mu - half,
            mu + half,
            Tolerance::default(),
        )
        .unwrap()
        .value;
        assert!((p + wet - 1.0).abs() < 1e-8, "p={p} mu={mu} sigma={sigma}: {}", p + wet);
    }
}

#[test]
fn expectation_matches_monte_carlo() {
    let n = 1_000_000;
    for (seed, &(p, mu, sigma)) in [(0.3, 0.5, 0.5), (0.217, 0.46, 1.0), (0.05, -1.0, 0.2)].iter().enumerate() {
        let hp = HurdleParams::from_parts(p, mu, sigma).unwrap();
        let draws = sample_hurdle_n(&hp, seed as u64 + 100, n);
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((mean - hurdle_expectation(&hp)).abs() < 3.0 * se);

        let dry = draws.iter().filter(|&&d| d == 0.0).count() as f64 / n as f64;
        assert!((dry - p).abs() < 3.0 * (p * (1.0 - p) / n as f64).sqrt());

        let mut wet: Vec<f64> = draws.into_iter().filter(|&d| d > 0.0).collect();
        wet.sort_by(f64::total_cmp);
        let median = wet[wet.len() / 2];
        // Median of the order statistic: ±3 standard errors on the log axis.
        let se_log = 1.2533 * sigma / (wet.len() as f64).sqrt();
        assert!((median.ln() - mu).abs() < 3.0 * se_log);
    }
}

#[test]
fn closed_form_debiasing_matches_numeric() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..50 {
        let ideal = LognormalParams::new(rng.gen_range(-1.0..3.0), rng.gen_range(0.2..1.5)).unwrap();
        let prior = MarginalPrior::new(rng.gen_range(-1.0..2.0), rng.gen_range(0.5..2.0), 0.2).unwrap();
        let closed = debiased_lognormal(&ideal, &prior);
        let numeric = debias_lognormal_numeric(&ideal, &prior).unwrap();
        for k in -3..=3 {
            let r = (closed.mu() + 0.7 * k as f64 * closed.sigma()).exp();
            let a = closed.ln_pdf(r).unwrap();
            assert!((a - numeric.ln_pdf(r)).abs() < 1e-8, "r={r}");
        }
    }
}

#[test]
fn posterior_rows_integrate_to_one() {
    let prior = synthgen::default_prior();
    let fm = ForwardModel::default();
    let grid = RateGrid::for_prior(&prior);
    for s in [-60.0, -25.0, -8.0, -1.0, 4.0] {
        for row in [ideal_posterior(&fm, &[s], &grid).unwrap(), biased_posterior(&fm, &prior, &[s], &grid).unwrap()] {
            assert!((trapezoid(grid.rates(), &row.density) - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn biased_posterior_is_debiased_ideal_posterior() {
    let prior = synthgen::default_prior();
    let grid = RateGrid::for_prior(&prior);
    for fm in [ForwardModel::single_channel(), ForwardModel::six_channel()] {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..10 {
            let r = (prior.lmu() + prior.lsigma() * rng.gen_range(-2.5..2.5)).exp();
            let signal: Vec<f64> = fm.mean_signal(r).map(|m| m + fm.noise_sigma * rng.gen_range(-1.0..1.0)).collect();
            let ideal = ideal_posterior(&fm, &signal, &grid).unwrap();
            let biased = biased_posterior(&fm, &prior, &signal, &grid).unwrap();
            let via_debias = debias_grid(grid.rates(), &ideal.density, &prior).unwrap();
            let worst = biased.density.iter().zip(&via_debias).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(worst < 1e-7, "signal {signal:?}: {worst}");
        }
    }
}

#[test]
fn near_noiseless_posterior_inverts_the_forward_map() {
    let prior = synthgen::default_prior();
    let grid = RateGrid::for_prior(&prior);
    let mut fm = ForwardModel::default();
    fm.noise_sigma = 1e-4;
    let step = (grid.rates()[1] / grid.rates()[0]).ln();
    for r in [0.3, 1.0, 4.0, 25.0] {
        let s: Vec<f64> = fm.mean_signal(r).collect();
        let row = ideal_posterior(&fm, &s, &grid).unwrap();
        assert!((row.mean / r).ln().abs() < step, "r={r} mean={}", row.mean);
    }
}

#[test]
fn posterior_mean_is_monotone_in_the_signal() {
    // Gain is negative: a lower signal means more rain.
    let prior = synthgen::default_prior();
    let fm = ForwardModel::default();
    let grid = RateGrid::for_prior(&prior);
    let signals: Vec<f64> = (0..80).map(|i| 10.0 - i as f64).collect();
    let ideal: Vec<f64> = signals.iter().map(|&s| ideal_posterior(&fm, &[s], &grid).unwrap().mean).collect();
    let biased: Vec<f64> = signals.iter().map(|&s| biased_posterior(&fm, &prior, &[s], &grid).unwrap().mean).collect();
    assert!(ideal.windows(2).all(|w| w[1] >= w[0]));
    assert!(biased.windows(2).all(|w| w[1] >= w[0]));
}

#[test]
fn prior_pulls_upper_tail_posteriors_down() {
    let prior = synthgen::default_prior();
    let fm = ForwardModel::default();
    let grid = RateGrid::for_prior(&prior);
    let r95 = (prior.lmu() + 1.645 * prior.lsigma()).exp();
    let s95: f64 = fm.mean_signal(r95).next().unwrap();
    for k in 0..20 {
        let s = s95 - 2.0 * k as f64;
        let ideal = ideal_posterior(&fm, &[s], &grid).unwrap().mean;
        let biased = biased_posterior(&fm, &prior, &[s], &grid).unwrap().mean;
        assert!(biased <= ideal, "signal {s}: biased {biased} > ideal {ideal}");
    }
}

#[test]
fn generator_marginals_match_the_prior() {
    let prior = synthgen::default_prior();
    let d = generate(&prior, &ForwardModel::default(), 1_000_000, 5).unwrap();
    let n = d.len() as f64;
    let logs: Vec<f64> = d.labels.iter().filter(|&&y| y > 0.0).map(|y| y.ln()).collect();
    let nw = logs.len() as f64;
    let mean = logs.iter().sum::<f64>() / nw;
    assert!((mean - 0.46).abs() < 3.0 * 1.28 / nw.sqrt(), "log-mean {mean}");
    let dry = 1.0 - nw / n;
    let p0 = prior.p0();
    assert!((dry - p0).abs() < 3.0 * (p0 * (1.0 - p0) / n).sqrt(), "dry fraction {dry}");
    let est = MarginalPrior::estimate(&d.labels).unwrap();
    assert!((est.lsigma() - 1.28).abs() < 3.0 * 1.28 / (2.0 * nw).sqrt());
}
