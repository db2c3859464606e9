//! Analytic gradients against central finite differences.

use hurdle_imdl::hurdle_dist::MarginalPrior;
use hurdle_imdl::losses::{nll_grad, nll_terms, weighted_mse, HurdlePart, WeightScheme};
use hurdle_imdl::network::{HeadGrads, Heads, Mlp, NetConfig, Objective};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[test]
fn nll_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..1000 {
        let label = if rng.gen_bool(0.25) { 0.0 } else { rng.gen_range(-3.0f64..4.0).exp() };
        let p = rng.gen_range(0.02..0.98);
        let mu = rng.gen_range(-2.0..3.0);
        let sigma = rng.gen_range(0.1..2.0);
        let prior = MarginalPrior::new(rng.gen_range(-2.0..3.0), rng.gen_range(0.1..2.0), 0.2).unwrap();
        let g = nll_grad(label, p, mu, sigma, &prior).unwrap();
        let f = |p: f64, mu: f64| nll_terms(label, p, mu, sigma, &prior).unwrap().total;
        let h = 1e-6;
        let fd_p = (f(p + h, mu) - f(p - h, mu)) / (2.0 * h);
        let fd_mu = (f(p, mu + h) - f(p, mu - h)) / (2.0 * h);
        assert!(rel_err(g.d_p, fd_p, 1e-3) < 1e-4, "d_p {} vs {fd_p}", g.d_p);
        assert!(rel_err(g.d_mu, fd_mu, 1e-3) < 1e-4, "d_mu {} vs {fd_mu}", g.d_mu);
    }
}

#[test]
fn weighted_mse_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let labels: Vec<f64> = (0..500).map(|_| if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(-2.0f64..4.0).exp() }).collect();
    let schemes = [
        WeightScheme::Omse,
        WeightScheme::lwmse_default(),
        WeightScheme::Nwmse { table: None }.fitted(&labels).unwrap(),
    ];
    for scheme in &schemes {
        for &y in &labels[..100] {
            let pred = rng.gen_range(-5.0..40.0);
            let (_, g) = weighted_mse(pred, y, scheme).unwrap();
            let h = 1e-5;
            let fd = (weighted_mse(pred + h, y, scheme).unwrap().0 - weighted_mse(pred - h, y, scheme).unwrap().0) / (2.0 * h);
            assert!(rel_err(g, fd, 1e-3) < 1e-4);
        }
    }
}

fn batch(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let x = (0..n * dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let y = (0..n).map(|_| if rng.gen_bool(0.3) { 0.0 } else { rng.gen_range(-1.0f64..3.0).exp() }).collect();
    (x, y)
}

fn mean_loss(net: &Mlp<f64>, x: &[f64], y: &[f64], obj: &Objective<f64>, sigma: f64) -> f64 {
    let heads = net.forward(x).unwrap();
    let (losses, _) = obj.evaluate(y, &heads, sigma).unwrap();
    losses.iter().sum::<f64>() / y.len() as f64
}

fn check_network(heads: Heads, objective: Objective<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 3;
    let sigma = 0.5;
    // 3·8 + 8 + 8·8 + 8 + 8·w + w, about a hundred parameters.
    let mut net = Mlp::<f64>::new(NetConfig { input_dim: dim, hidden: vec![8, 8], seed, heads }).unwrap();
    let (x, y) = batch(&mut rng, 16, dim);

    let (out, cache) = net.forward_cached(&x).unwrap();
    let (_, g) = objective.evaluate(&y, &out, sigma).unwrap();
    let inv = 1.0 / y.len() as f64;
    let g = HeadGrads { d_p: g.d_p.iter().map(|v| v * inv).collect(), d_mu: g.d_mu.iter().map(|v| v * inv).collect() };
    let analytic = net.backward(&cache, &g).unwrap().flat();

    let base = net.params_flat();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        net.set_params_flat(&plus).unwrap();
        let lp = mean_loss(&net, &x, &y, &objective, sigma);
        let mut minus = base.clone();
        minus[i] -= h;
        net.set_params_flat(&minus).unwrap();
        let lm = mean_loss(&net, &x, &y, &objective, sigma);
        let fd = (lp - lm) / (2.0 * h);
        worst = worst.max(rel_err(analytic[i], fd, 1e-4));
    }
    assert!(worst < 1e-3, "{heads:?}: worst relative error {worst}");
}

#[test]
fn network_gradients_match_central_differences() {
    let prior = MarginalPrior::new(0.46, 1.28, 0.217).unwrap();
    for (k, imdl) in [true, false].into_iter().enumerate() {
        check_network(Heads::Joint, Objective::Hurdle { prior, imdl, part: HurdlePart::Full }, 30 + k as u64);
    }
    check_network(Heads::POnly, Objective::Hurdle { prior, imdl: true, part: HurdlePart::Occurrence }, 33);
    check_network(Heads::MuOnly, Objective::Hurdle { prior, imdl: true, part: HurdlePart::Intensity }, 34);
    check_network(Heads::MuOnly, Objective::Weighted { scheme: WeightScheme::lwmse_default() }, 35);
}
