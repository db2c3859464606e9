use hurdle_imdl::hurdle_dist::MarginalPrior;
use hurdle_imdl::losses::batch_nll;
use hurdle_imdl::network::{Heads, Mlp, NetConfig};
use hurdle_imdl::synthgen::{generate_split, Dataset, ForwardModel, Split};
use hurdle_imdl::verify::{confusion, full_report, graded_errors, ConfusionCounts, GradeThresholds, DEFAULT_THRESHOLDS};
use proptest::prelude::*;

fn rates(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![Just(0.0), 0.0f64..60.0], n)
}

fn paired() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..200).prop_flat_map(|n| (rates(n), rates(n)))
}

proptest! {
    #[test]
    fn ets_stays_in_range(tp in 0u64..10_000, fp in 0u64..10_000, fn_ in 0u64..10_000, tn in 0u64..10_000) {
        let c = ConfusionCounts { tp, fp, fn_, tn };
        if let Some(e) = c.ets() {
            prop_assert!((-1.0 / 3.0 - 1e-12..=1.0 + 1e-12).contains(&e), "{c:?} -> {e}");
        }
        if let Some(p) = c.pod() { prop_assert!((0.0..=1.0).contains(&p)); }
        if let Some(f) = c.far() { prop_assert!((0.0..=1.0).contains(&f)); }
    }

    #[test]
    fn inflation_never_lowers_pod_or_far((ret, obs) in paired(), factor in 1.0f64..5.0) {
        let inflated: Vec<f64> = ret.iter().map(|r| r * factor).collect();
        for &th in &DEFAULT_THRESHOLDS {
            let a = confusion(&ret, &obs, th).unwrap();
            let b = confusion(&inflated, &obs, th).unwrap();
            if let (Some(x), Some(y)) = (a.pod(), b.pod()) { prop_assert!(y >= x); }
            if let (Some(x), Some(y)) = (a.far(), b.far()) { prop_assert!(y >= x); }
        }
    }

    #[test]
    fn report_is_permutation_invariant((ret, obs) in paired(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut idx: Vec<usize> = (0..ret.len()).collect();
        idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let r2: Vec<f64> = idx.iter().map(|&i| ret[i]).collect();
        let o2: Vec<f64> = idx.iter().map(|&i| obs[i]).collect();
        let th = GradeThresholds::default();
        let a = full_report(&ret, &obs, &th).unwrap();
        let b = full_report(&r2, &o2, &th).unwrap();
        prop_assert_eq!(a.to_csv(), b.to_csv());
    }

    #[test]
    fn rmse_decomposes_into_bias_and_spread((ret, obs) in paired()) {
        if let Some(e) = graded_errors(&ret, &obs, 0.0).unwrap() {
            let d: Vec<f64> = ret.iter().zip(&obs).map(|(r, o)| r - o).collect();
            let n = d.len() as f64;
            let var = d.iter().map(|x| (x - e.me).powi(2)).sum::<f64>() / n;
            prop_assert!((e.rmse * e.rmse - (e.me * e.me + var)).abs() < 1e-8 * (1.0 + e.rmse * e.rmse));
        }
    }

    #[test]
    fn counts_sum_to_sample_size((ret, obs) in paired(), th in 0.0f64..40.0) {
        let c = confusion(&ret, &obs, th).unwrap();
        prop_assert_eq!(c.n(), ret.len() as u64);
        let brute = ret.iter().zip(&obs).filter(|(r, o)| **r >= th && **o >= th).count() as u64;
        prop_assert_eq!(c.tp, brute);
    }

    #[test]
    fn batch_loss_is_order_independent(labels in rates(40), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let params: Vec<(f64, f64)> = labels.iter().map(|_| (rng.gen_range(0.05..0.95), rng.gen_range(-1.0..3.0))).collect();
        let prior = MarginalPrior::new(0.46, 1.28, 0.2).unwrap();
        let a = batch_nll(&labels, &params, 0.5, &prior).unwrap();
        let mut idx: Vec<usize> = (0..labels.len()).collect();
        idx.shuffle(&mut rng);
        let l2: Vec<f64> = idx.iter().map(|&i| labels[i]).collect();
        let p2: Vec<(f64, f64)> = idx.iter().map(|&i| params[i]).collect();
        let b = batch_nll(&l2, &p2, 0.5, &prior).unwrap();
        prop_assert_eq!(a.mean_total, b.mean_total);
    }

    #[test]
    fn batched_forward_equals_stacked_rows(rows in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 1..20), seed in 0u64..100) {
        let net = Mlp::<f64>::new(NetConfig { input_dim: 4, hidden: vec![5, 3], seed, heads: Heads::Joint }).unwrap();
        let flat: Vec<f64> = rows.concat();
        let all = net.forward(&flat).unwrap();
        for (i, row) in rows.iter().enumerate() {
            let one = net.forward(row).unwrap();
            prop_assert_eq!(one.p[0], all.p[i]);
            prop_assert_eq!(one.mu[0], all.mu[i]);
        }
    }

    #[test]
    fn dataset_bytes_round_trip(n in 1usize..50, seed in any::<u64>(), six in any::<bool>()) {
        let fm = if six { ForwardModel::six_channel() } else { ForwardModel::single_channel() };
        let prior = MarginalPrior::new(0.46, 1.28, 0.217).unwrap();
        let d = generate_split(&prior, &fm, n, seed, Split::Test).unwrap();
        prop_assert_eq!(Dataset::from_bytes(&d.to_bytes()).unwrap(), d);
    }
}
