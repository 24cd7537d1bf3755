use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tta_core::adapter::{
    adamw_step, apply_residuals, compute_gradients, filter_views, fused_logits, total_objective, AdamWConfig,
    AdapterParams, OptimizerState, PrototypeBank, Residuals, ViewBatch, ViewFilter,
};
use tta_core::cache::ClassCache;
use tta_core::features::FeatureMatrix;
use tta_core::numerics::{argmax_stable, entropy, l2_normalize, modulation, softmax, Logits, ProbVector};
use tta_core::thresholds::{entropy_cap, ThresholdParams, ThresholdState};
use tta_core::zeroshot::{calibrate_zero_shot_stats, zeroshot_predict, TextPrototypeBank};
use tta_core::Strategy as Confidence;

fn logits(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0..50.0f64, 2..max_len)
}

fn unit(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0..1.0f64, dim)
        .prop_filter("norm too small", |v| v.iter().map(|x| x * x).sum::<f64>() > 0.01)
        .prop_map(|v| l2_normalize(&v).unwrap())
}

fn units(count: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(unit(dim), count)
}

fn strategy() -> impl Strategy<Value = Confidence> {
    prop_oneof![Just(Confidence::Entropy), Just(Confidence::Probability)]
}

fn probs_of(l: &[f64], tau: f64) -> ProbVector {
    softmax(&Logits::new(l.to_vec()).unwrap(), tau).unwrap()
}

proptest! {
    #[test]
    fn softmax_normalizes_and_ignores_shifts(l in logits(40), shift in -100.0..100.0f64, tau in 0.005..5.0f64) {
        let p = probs_of(&l, tau);
        prop_assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        let shifted: Vec<f64> = l.iter().map(|x| x + shift).collect();
        let q = probs_of(&shifted, tau);
        for (a, b) in p.as_slice().iter().zip(q.as_slice()) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn sharper_temperature_never_raises_entropy(l in logits(30)) {
        prop_assume!(l.iter().any(|&x| x != l[0]));
        let h: Vec<f64> = [1.0, 0.1, 0.01].iter().map(|&t| probs_of(&l, t).entropy()).collect();
        prop_assert!(h[1] <= h[0] + 1e-12);
        prop_assert!(h[2] <= h[1] + 1e-12);
    }

    #[test]
    fn softmax_keeps_the_argmax(l in logits(30), tau in 0.001..10.0f64) {
        prop_assert_eq!(argmax_stable(probs_of(&l, tau).as_slice()).unwrap(), argmax_stable(&l).unwrap());
    }

    #[test]
    fn entropy_stays_within_bounds(raw in prop::collection::vec(0.0..1.0f64, 2..64)) {
        let total: f64 = raw.iter().sum();
        prop_assume!(total > 0.0);
        let p: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let h = entropy(&p).unwrap();
        prop_assert!(h >= 0.0 && h <= (p.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn modulation_is_bounded_and_monotone(a in -1.0..1.0f64, b in -1.0..1.0f64, alpha in 0.1..20.0f64, beta in 0.1..20.0f64) {
        prop_assert!(modulation(a, alpha, beta) <= alpha);
        if a < b {
            prop_assert!(modulation(a, alpha, beta) < modulation(b, alpha, beta));
        }
    }

    #[test]
    fn normalization_is_idempotent(v in prop::collection::vec(-10.0..10.0f64, 1..64)) {
        prop_assume!(v.iter().any(|&x| x != 0.0));
        let once = l2_normalize(&v).unwrap();
        let twice = l2_normalize(&once).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn feature_files_re_encode_identically(rows in 0usize..20, dim in 1usize..16, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..rows * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bytes = FeatureMatrix::new(dim, data).unwrap().encode();
        let decoded = FeatureMatrix::decode(&bytes).unwrap();
        prop_assert_eq!(decoded.encode(), bytes);
    }

    #[test]
    fn zeroshot_argmax_ignores_temperature(protos in units(5, 6), z in unit(6), t1 in 0.001..2.0f64, t2 in 0.001..2.0f64) {
        let groups: Vec<Vec<Vec<f64>>> = protos.iter().map(|p| vec![p.clone()]).collect();
        let a = TextPrototypeBank::build(&groups, t1).unwrap();
        let b = TextPrototypeBank::build(&groups, t2).unwrap();
        prop_assert_eq!(zeroshot_predict(&z, &a).unwrap().argmax(), zeroshot_predict(&z, &b).unwrap().argmax());
    }

    #[test]
    fn calibration_is_the_mean_of_per_sample_calls(protos in units(4, 5), stream in units(10, 5)) {
        let groups: Vec<Vec<Vec<f64>>> = protos.iter().map(|p| vec![p.clone()]).collect();
        let bank = TextPrototypeBank::build(&groups, 0.01).unwrap();
        let stats = calibrate_zero_shot_stats(&stream, &bank).unwrap();
        let singles: Vec<_> = stream.iter().map(|z| calibrate_zero_shot_stats([z], &bank).unwrap()).collect();
        let mean_p = singles.iter().map(|s| s.mean_max_prob).sum::<f64>() / 10.0;
        let mean_h = singles.iter().map(|s| s.mean_entropy).sum::<f64>() / 10.0;
        prop_assert!((stats.mean_max_prob - mean_p).abs() <= 1e-12);
        prop_assert!((stats.mean_entropy - mean_h).abs() <= 1e-12);
        prop_assert!(stats.mean_entropy >= 0.0 && stats.mean_entropy <= 4f64.ln() + 1e-12);
        prop_assert!(stats.mean_max_prob >= 0.25 - 1e-12 && stats.mean_max_prob <= 1.0);
    }

    #[test]
    fn cache_occupancy_and_prototype_order(
        offers in prop::collection::vec((0usize..3, logits(4), unit(4)), 1..120),
        capacity in 0usize..6,
        strat in strategy(),
    ) {
        let mut cache = ClassCache::new(3, capacity);
        for (i, (label, l, feature)) in offers.iter().enumerate() {
            let mut l = l.clone();
            l.resize(3, 0.0);
            let p = probs_of(&l, 1.0);
            let threshold = match strat { Confidence::Entropy => 0.9, Confidence::Probability => 0.5 };
            cache.try_admit(feature, *label, &p, threshold, strat, i as u64).unwrap();
            for c in 0..3 {
                prop_assert!(cache.entries(c).len() <= capacity);
            }
        }
        for c in 0..3 {
            let entries = cache.entries(c);
            let Some(proto) = cache.visual_prototype(c) else {
                prop_assert!(entries.is_empty());
                continue;
            };
            let mut reversed: Vec<f64> = vec![0.0; 4];
            for e in entries.iter().rev() {
                for (r, x) in reversed.iter_mut().zip(&e.feature) {
                    *r += x;
                }
            }
            let reversed = l2_normalize(&reversed).unwrap();
            for (a, b) in proto.iter().zip(&reversed) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn threshold_invariants_under_random_events(
        events in prop::collection::vec((0u8..3, 0usize..4, 0.0..1.0f64, 0.0..3.0f64, prop::collection::vec(0u64..15, 4)), 1..300),
        strat in strategy(),
        literal in any::<bool>(),
    ) {
        let params = ThresholdParams { literal_adapt: literal, ..ThresholdParams::default() };
        let t0 = match strat { Confidence::Probability => 0.7, Confidence::Entropy => 0.4 };
        let mut a = ThresholdState::with_initial(4, strat, t0, params).unwrap();
        let mut b = a.clone();
        for (kind, c, p, h, counts) in &events {
            for s in [&mut a, &mut b] {
                match kind {
                    0 => { s.record_prediction(*c, *p, *h).unwrap(); }
                    1 => {
                        s.refresh_thresholds();
                        let top = s.sigma_raw().iter().copied().max().unwrap();
                        if top > 0 {
                            for k in 0..4 {
                                if s.sigma_raw()[k] == top {
                                    prop_assert_eq!(s.sigma()[k], 1.0);
                                }
                            }
                        }
                    }
                    _ => {
                        let before = s.thresholds().to_vec();
                        s.apply_rarity_adaptation(counts).unwrap();
                        for k in 0..4 {
                            let relaxed = match (strat, literal) {
                                (Confidence::Entropy, false) => s.thresholds()[k] >= before[k],
                                _ => s.thresholds()[k] <= before[k],
                            };
                            prop_assert!(relaxed);
                        }
                    }
                }
                let hi = match strat { Confidence::Probability => 1.0, Confidence::Entropy => entropy_cap(4) };
                prop_assert!(s.thresholds().iter().all(|&t| t > 0.0 && t <= hi));
            }
        }
        prop_assert_eq!(a, b);
    }

    #[test]
    fn residual_updates_keep_unit_norm(text in units(3, 5), visual in units(3, 5), noise in prop::collection::vec(-0.5..0.5f64, 30)) {
        let mut bank = PrototypeBank::new(text, visual.into_iter().map(Some).collect(), 0.01).unwrap();
        let mut residuals = Residuals::from_flat(3, 5, noise).unwrap();
        apply_residuals(&mut bank, &mut residuals).unwrap();
        for c in 0..3 {
            for row in [bank.text(c), bank.visual(c).unwrap()] {
                prop_assert!((row.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn full_retention_commutes_with_view_order(protos in units(3, 4), views in units(6, 4), strat in strategy(), seed in any::<u64>()) {
        let bank = PrototypeBank::new(protos, vec![None; 3], 0.01).unwrap();
        let params = AdapterParams::default();
        let batch = ViewBatch::score(views.clone(), &bank, &params).unwrap();
        let (_, p) = filter_views(&batch, strat, ViewFilter::TopFraction(1.0)).unwrap();
        prop_assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        let mut shuffled = views;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.random_range(0..=i));
        }
        let batch = ViewBatch::score(shuffled, &bank, &params).unwrap();
        let (_, q) = filter_views(&batch, strat, ViewFilter::TopFraction(1.0)).unwrap();
        for (a, b) in p.as_slice().iter().zip(q.as_slice()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn fused_logits_without_cache_follow_zero_shot(protos in units(4, 6), z in unit(6)) {
        let groups: Vec<Vec<Vec<f64>>> = protos.iter().map(|p| vec![p.clone()]).collect();
        let zs = TextPrototypeBank::build(&groups, 0.01).unwrap();
        let bank = PrototypeBank::from_text(&zs);
        let fused = fused_logits(&z, &bank, 6.0, 5.0).unwrap();
        prop_assert_eq!(fused.argmax(), zeroshot_predict(&z, &zs).unwrap().argmax());
    }
}

// Descent sanity is statistical, so it is counted over many instances
// rather than asserted per case.
#[test]
fn one_step_descends_on_most_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut unit = |d: usize| {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        l2_normalize(&v).unwrap()
    };
    let params = AdapterParams::default();
    let cfg = AdamWConfig::default();
    let trials = 300;
    let mut descended = 0;
    for t in 0..trials {
        let (classes, dim, views) = (2 + t % 4, 4 + t % 5, 1 + t % 8);
        let text: Vec<Vec<f64>> = (0..classes).map(|_| unit(dim)).collect();
        let visual: Vec<Option<Vec<f64>>> = (0..classes).map(|c| (c % 2 == 0).then(|| unit(dim))).collect();
        let bank = PrototypeBank::new(text, visual, 0.01).unwrap();
        let batch = ViewBatch::score((0..views).map(|_| unit(dim)).collect(), &bank, &params).unwrap();
        let (selected, _) = filter_views(&batch, Confidence::Entropy, ViewFilter::TopFraction(0.5)).unwrap();
        let mut residuals = Residuals::zeros(classes, dim);
        let before = total_objective(&batch, &selected, &bank, &residuals, &params).unwrap();
        let eval = compute_gradients(&batch, &selected, &bank, &residuals, &params).unwrap();
        let mut state = OptimizerState::new(residuals.as_slice().len());
        adamw_step(residuals.as_mut_slice(), eval.gradient.as_slice(), &mut state, &cfg).unwrap();
        let after = total_objective(&batch, &selected, &bank, &residuals, &params).unwrap();
        if after <= before + 1e-6 {
            descended += 1;
        }
    }
    assert!(descended * 10 >= trials * 9, "{descended}/{trials}");
}
