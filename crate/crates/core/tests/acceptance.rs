//! Acceptance suite. Each test prints one PASS/FAIL line to stderr, outside
//! the test harness's capture, then asserts.

mod common;

use std::io::Write;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tta_core::adapter::gradcheck::{finite_difference_check, InstanceSpec};
use tta_core::adapter::{filter_views, prototypes_unit_norm, proto_predict, ViewBatch};
use tta_core::cache::{AdmitOutcome, ClassCache};
use tta_core::engine::{calibrate, EngineConfig, Engine, Mode};
use tta_core::features::{Dataset, SyntheticSpec};
use tta_core::numerics::{entropy, softmax, Logits, ProbVector};
use tta_core::thresholds::{entropy_cap, ThresholdParams, ThresholdState, MIN_THRESHOLD};
use tta_core::zeroshot::{zeroshot_predict, TextPrototypeBank, ZeroShotStats};
use tta_core::Strategy;

use common::*;

fn verdict(criterion: u32, ok: bool, detail: &str) {
    let line = format!(
        "acceptance criterion {criterion}: {} ({detail})\n",
        if ok { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn within(elapsed: Duration, limit_secs: u64) -> bool {
    elapsed < Duration::from_secs(limit_secs)
}

#[test]
fn criterion_1_gradient_correctness() {
    let started = Instant::now();
    let mut shapes = Vec::new();
    for classes in [2, 3, 5] {
        for dim in [4, 8] {
            for views in [1, 4, 8] {
                shapes.push((classes, dim, views));
            }
        }
    }
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for i in 0..100u64 {
        let (classes, dim, views) = shapes[i as usize % shapes.len()];
        let spec = InstanceSpec {
            classes,
            dim,
            views,
            step: 1e-4,
            tolerance: 1e-4,
            ..InstanceSpec::default()
        };
        let r = finite_difference_check(&spec, 1000 + i).unwrap();
        worst = worst.max(r.max_rel_error);
        if r.max_rel_error > 1e-4 {
            failures.push((classes, dim, views, r.seed, r.max_rel_error));
        }
    }
    let elapsed = started.elapsed();
    let ok = failures.is_empty() && within(elapsed, 30);
    verdict(
        1,
        ok,
        &format!(
            "100 instances, max relative error {worst:.3e} <= 1e-4, {:.2}s < 30s",
            elapsed.as_secs_f64()
        ),
    );
    assert!(failures.is_empty(), "{failures:?}");
    assert!(within(elapsed, 30), "took {elapsed:?}");
}

fn random_probs(rng: &mut ChaCha8Rng, classes: usize) -> ProbVector {
    let spread = rng.random_range(0.1..20.0);
    let logits: Vec<f64> = (0..classes).map(|_| rng.random_range(-1.0..1.0) * spread).collect();
    softmax(&Logits::new(logits).unwrap(), 1.0).unwrap()
}

#[test]
fn criterion_2_cache_oracle_equivalence() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let classes = 4;
    let mut mismatches = 0usize;
    let mut events_total = 0usize;
    for run in 0..200 {
        let capacity = [1, 3, 16][run % 3];
        let strategy = if run % 2 == 0 { Strategy::Entropy } else { Strategy::Probability };
        let events = rng.random_range(1..=500);
        events_total += events;
        let mut cache = ClassCache::new(classes, capacity);
        // every gate-passing offer: (entropy, seq, sample, feature)
        let mut passed: Vec<Vec<(f64, u64, u64, Vec<f64>)>> = vec![Vec::new(); classes];
        let mut pool: Vec<ProbVector> = Vec::new();
        let mut next_seq = 0u64;
        for sample in 0..events as u64 {
            let probs = if !pool.is_empty() && rng.random_bool(0.25) {
                pool[rng.random_range(0..pool.len())].clone()
            } else {
                let p = random_probs(&mut rng, classes);
                pool.push(p.clone());
                p
            };
            let label = rng.random_range(0..classes);
            let threshold = match strategy {
                Strategy::Entropy => rng.random_range(0.0..(classes as f64).ln()),
                Strategy::Probability => rng.random_range(1.0 / classes as f64..1.0),
            };
            let feature = vec![sample as f64, rng.random_range(-1.0..1.0)];
            let gate = match strategy {
                Strategy::Entropy => probs.entropy() <= threshold,
                Strategy::Probability => probs.max_prob() >= threshold,
            };
            let outcome = cache
                .try_admit(&feature, label, &probs, threshold, strategy, sample)
                .unwrap();
            if outcome.passed_gate() != gate {
                mismatches += 1;
            }
            if gate {
                passed[label].push((probs.entropy(), next_seq, sample, feature));
                next_seq += 1;
            }
            if let AdmitOutcome::AdmittedWithEviction { evicted_entropy, .. } = outcome {
                if cache.entries(label).iter().any(|e| e.entropy_key > evicted_entropy) {
                    mismatches += 1;
                }
            }
            for c in 0..classes {
                let mut expected = passed[c].clone();
                expected.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                expected.truncate(capacity);
                let got: Vec<(f64, u64, u64, Vec<f64>)> = cache
                    .entries(c)
                    .iter()
                    .map(|e| (e.entropy_key, e.seq, e.sample, e.feature.clone()))
                    .collect();
                if got != expected || got.len() > capacity {
                    mismatches += 1;
                }
            }
        }
    }
    let elapsed = started.elapsed();
    let ok = mismatches == 0 && within(elapsed, 10);
    verdict(
        2,
        ok,
        &format!(
            "200 sequences, {events_total} events, {mismatches} mismatches, {:.2}s < 10s",
            elapsed.as_secs_f64()
        ),
    );
    assert_eq!(mismatches, 0);
    assert!(within(elapsed, 10), "took {elapsed:?}");
}

fn params(literal_adapt: bool, m_floor: f64) -> ThresholdParams {
    ThresholdParams {
        literal_adapt,
        m_floor,
        ..ThresholdParams::default()
    }
}

#[test]
fn criterion_3_threshold_dynamics() {
    let started = Instant::now();
    let mut problems = Vec::new();

    // (a) A class never counted has σ = 0, so its metric sits at the floor
    // and the target is a constant v.
    let cases = [
        (Strategy::Probability, 0.8, false, 0.1),
        (Strategy::Probability, 0.35, false, 0.5),
        (Strategy::Entropy, 0.1, false, 0.1),
        (Strategy::Entropy, 1.2, true, 0.25),
    ];
    let delta = ThresholdParams::default().delta;
    for (strategy, t0, literal, floor) in cases {
        let mut s = ThresholdState::with_initial(10, strategy, t0, params(literal, floor)).unwrap();
        let v = match (strategy, literal) {
            (Strategy::Entropy, false) => t0 / floor,
            _ => t0 * floor,
        };
        for k in 1..=200 {
            s.record_prediction(0, 1.0, 0.0).unwrap();
            s.refresh_thresholds();
            let expected = delta.powi(k) * (t0 - v).abs();
            let got = (s.thresholds()[1] - v).abs();
            if (got - expected).abs() > 1e-12 {
                problems.push(format!("EMA {strategy} t0={t0} k={k}: {got} vs {expected}"));
                break;
            }
        }
    }

    // (b) Refresh-free relaxation of never-seen classes.
    let gamma = ThresholdParams::default().gamma;
    for strategy in [Strategy::Probability, Strategy::Entropy] {
        let t0 = 0.6;
        let mut s = ThresholdState::with_initial(5, strategy, t0, ThresholdParams::default()).unwrap();
        let cap = entropy_cap(5);
        let mut oracle = t0;
        for k in 1..=300 {
            s.apply_rarity_adaptation(&[0; 5]).unwrap();
            oracle = match strategy {
                Strategy::Probability => oracle * (1.0 - gamma),
                Strategy::Entropy => (oracle / (1.0 - gamma)).min(cap),
            };
            let closed = match strategy {
                Strategy::Probability => t0 * (1.0 - gamma).powi(k),
                Strategy::Entropy => (t0 / (1.0 - gamma).powi(k)).min(cap),
            };
            let got = s.thresholds()[0];
            if got != oracle || (got - closed).abs() > 1e-12 * closed.max(1.0) {
                problems.push(format!("rarity {strategy} k={k}: {got} vs {oracle}"));
                break;
            }
        }
    }

    // (c) 10^5 random events.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut out_of_range = 0usize;
    for (strategy, literal) in [
        (Strategy::Probability, false),
        (Strategy::Entropy, false),
        (Strategy::Entropy, true),
        (Strategy::Probability, true),
    ] {
        let classes = 6;
        let cap = entropy_cap(classes);
        let t0 = match strategy {
            Strategy::Probability => rng.random_range(0.0..1.0),
            Strategy::Entropy => rng.random_range(0.0..cap),
        };
        let mut s = ThresholdState::with_initial(classes, strategy, t0, params(literal, 0.1)).unwrap();
        for _ in 0..25_000 {
            match rng.random_range(0..3) {
                0 => {
                    let c = rng.random_range(0..classes);
                    s.record_prediction(c, rng.random_range(0.0..1.0), rng.random_range(0.0..cap))
                        .unwrap();
                }
                1 => s.refresh_thresholds(),
                _ => {
                    let counts: Vec<u64> = (0..classes).map(|_| rng.random_range(0..20)).collect();
                    s.apply_rarity_adaptation(&counts).unwrap();
                }
            }
            let hi = match strategy {
                Strategy::Probability => 1.0,
                Strategy::Entropy => cap,
            };
            if s.thresholds().iter().any(|&t| !(t >= MIN_THRESHOLD && t <= hi)) {
                out_of_range += 1;
            }
        }
    }
    if out_of_range > 0 {
        problems.push(format!("{out_of_range} fuzz states out of range"));
    }

    let elapsed = started.elapsed();
    let ok = problems.is_empty() && within(elapsed, 10);
    verdict(
        3,
        ok,
        &format!(
            "EMA to 1e-12, exact never-seen decay, 100000 fuzz events in range, {:.2}s < 10s",
            elapsed.as_secs_f64()
        ),
    );
    assert!(problems.is_empty(), "{problems:#?}");
    assert!(within(elapsed, 10), "took {elapsed:?}");
}

fn zeroshot_reference(ds: &Dataset, temperature: f64) -> Vec<ProbVector> {
    let bank = TextPrototypeBank::build(&ds.prompts, temperature).unwrap();
    ds.views()
        .unwrap()
        .map(|v| zeroshot_predict(v.unwrap()[0].as_slice(), &bank).unwrap())
        .collect()
}

#[test]
fn criterion_4_mode_reduction() {
    let (_disk, ds) = dataset(&fixture_spec(7));
    assert_eq!(ds.sample_count(), 400);
    let reference = zeroshot_reference(&ds, 0.01);

    let compare = |cfg: &EngineConfig| -> usize {
        let (bytes, _) = run_bytes(&ds, cfg);
        let recs = predictions(&bytes);
        assert_eq!(recs.len(), reference.len());
        recs.iter()
            .zip(&reference)
            .filter(|(r, p)| {
                r["prediction"].as_u64().unwrap() as usize != p.argmax()
                    || r["max_prob"].as_f64().unwrap() != p.max_prob()
            })
            .count()
    };

    let zeroshot_only = compare(&EngineConfig {
        mode: Mode::ZeroshotOnly,
        ..EngineConfig::default()
    });
    let degenerate_cfg = EngineConfig {
        alpha: 0.0,
        cache_size: 0,
        views: Some(1),
        refresh_interval: 0,
        ..EngineConfig::default()
    };
    let (bytes, _) = run_bytes(&ds, &degenerate_cfg);
    let degenerate = predictions(&bytes)
        .iter()
        .zip(&reference)
        .filter(|(r, p)| r["prediction"].as_u64().unwrap() as usize != p.argmax())
        .count();

    let ok = zeroshot_only == 0 && degenerate == 0;
    verdict(
        4,
        ok,
        &format!(
            "seed 7, 400 samples: zeroshot-only differs on {zeroshot_only}, \
             degenerate ace (alpha 0, cache 0, 1 view, no refresh) differs on {degenerate} predictions"
        ),
    );
    assert_eq!(zeroshot_only, 0, "zeroshot-only mode diverged from the zero-shot module");
    assert_eq!(
        degenerate, 0,
        "degenerate ace configuration diverged from the zero-shot module"
    );
}

#[test]
fn criterion_5_synthetic_efficacy() {
    let started = Instant::now();
    let seeds = [7u64, 11, 13, 17, 19];
    let mut ace_wins = 0;
    let mut zs_wins = 0;
    let mut rows = Vec::new();
    for seed in seeds {
        let (_disk, ds) = dataset(&fixture_spec(seed));
        let acc = |cfg: EngineConfig| run_bytes(&ds, &cfg).1.summary.accuracy.unwrap();
        let ace = acc(EngineConfig::default());
        let baseline = acc(EngineConfig {
            mode: Mode::FixedThresholdBaseline,
            ..EngineConfig::default()
        });
        let zs_off = acc(EngineConfig {
            zs_init: false,
            ..EngineConfig::default()
        });
        ace_wins += (ace >= baseline) as u32;
        zs_wins += (ace >= zs_off) as u32;
        rows.push(format!("{seed}: ace {ace:.4} baseline {baseline:.4} zs-off {zs_off:.4}"));
    }
    let elapsed = started.elapsed();
    let ok = ace_wins >= 4 && zs_wins >= 4 && within(elapsed, 120);
    verdict(
        5,
        ok,
        &format!(
            "ace >= baseline on {ace_wins}/5, zs-init on >= off on {zs_wins}/5, {:.2}s < 120s; {}",
            elapsed.as_secs_f64(),
            rows.join("; ")
        ),
    );
    assert!(ace_wins >= 4, "{rows:#?}");
    assert!(zs_wins >= 4, "{rows:#?}");
    assert!(within(elapsed, 120), "took {elapsed:?}");
}

fn drive(ds: &Dataset, cfg: &EngineConfig, stats: Option<&ZeroShotStats>, n: usize) -> Vec<String> {
    let bank = TextPrototypeBank::build(&ds.prompts, cfg.temperature).unwrap();
    let mut engine = Engine::new(bank, cfg.clone(), stats).unwrap();
    ds.views()
        .unwrap()
        .take(n)
        .enumerate()
        .map(|(i, v)| {
            let views = v.unwrap().into_iter().map(|e| e.into_inner()).collect();
            let out = engine.process_sample(views, ds.label(i)).unwrap();
            serde_json::to_string(&out).unwrap()
        })
        .collect()
}

fn strip_metrics(mut v: serde_json::Value) -> serde_json::Value {
    if let Some(obj) = v.as_object_mut() {
        for key in ["label", "correct", "cache_accuracy"] {
            obj.remove(key);
        }
    }
    v
}

#[test]
fn criterion_6_invariant_suite() {
    let mut problems = Vec::new();
    let (_disk, ds) = dataset(&fixture_spec(7));
    let cfg = EngineConfig::default();

    // normalization and unit norms along a live stream
    let bank = TextPrototypeBank::build(&ds.prompts, cfg.temperature).unwrap();
    let stats = calibrate(&ds, &bank, 1.0).unwrap().stats;
    let mut engine = Engine::new(bank, cfg.clone(), Some(&stats)).unwrap();
    let params = cfg.adapter_params();
    let mut worst_sum = 0.0f64;
    for (i, v) in ds.views().unwrap().enumerate() {
        let views: Vec<Vec<f64>> = v.unwrap().into_iter().map(|e| e.into_inner()).collect();
        engine.process_sample(views.clone(), ds.label(i)).unwrap();
        let p = proto_predict(&views[0], engine.bank(), cfg.alpha, cfg.beta).unwrap();
        let batch = ViewBatch::score(views, engine.bank(), &params).unwrap();
        let (_, pace) = filter_views(&batch, cfg.strategy, cfg.view_filter()).unwrap();
        for q in [&p, &pace] {
            worst_sum = worst_sum.max((q.as_slice().iter().sum::<f64>() - 1.0).abs());
        }
        for b in &batch.probs {
            worst_sum = worst_sum.max((b.as_slice().iter().sum::<f64>() - 1.0).abs());
        }
        if !prototypes_unit_norm(engine.bank(), 1e-6) {
            problems.push(format!("prototype norm off at sample {i}"));
            break;
        }
    }
    if worst_sum > 1e-6 {
        problems.push(format!("probability sum off by {worst_sum:e}"));
    }

    // determinism
    let (a, _) = run_bytes(&ds, &cfg);
    let (b, _) = run_bytes(&ds, &cfg);
    if a != b {
        problems.push("repeated runs differ".into());
    }

    // no label leakage
    let mut unlabeled = ds.clone();
    unlabeled.labels = None;
    let (c, _) = run_bytes(&unlabeled, &cfg);
    let with: Vec<_> = predictions(&a).into_iter().map(strip_metrics).collect();
    let without: Vec<_> = predictions(&c).into_iter().map(strip_metrics).collect();
    let leaked = with.iter().zip(&without).filter(|(x, y)| x != y).count();
    if leaked > 0 || with.len() != without.len() {
        problems.push(format!("{leaked} records change with labels removed"));
    }

    // prefix replay on a 100-sample stream
    let spec = SyntheticSpec {
        classes: 5,
        per_class: 20,
        ..fixture_spec(7)
    };
    let full_stream = generate(&spec);
    let full_disk = write(&full_stream);
    let full = full_disk.open();
    assert_eq!(full.sample_count(), 100);
    let bank = TextPrototypeBank::build(&full.prompts, cfg.temperature).unwrap();
    let stats = calibrate(&full, &bank, 1.0).unwrap().stats;
    let reference = drive(&full, &cfg, Some(&stats), 100);
    for n in [1usize, 13, 50, 99] {
        let disk = write(&prefix(&full_stream, n));
        let part = disk.open();
        let replay = drive(&part, &cfg, Some(&stats), n);
        if replay[..] != reference[..n] {
            problems.push(format!("prefix {n} replay differs"));
        }
    }

    let ok = problems.is_empty();
    verdict(
        6,
        ok,
        &format!(
            "sums within {worst_sum:.1e} <= 1e-6, unit norms 1e-6, byte-identical reruns, \
             label-free diff clean, prefix replay on 100 samples; issues: {problems:?}"
        ),
    );
    assert!(problems.is_empty(), "{problems:#?}");
}

#[test]
fn criterion_7_entropy_bounds_and_numerics() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut entropy_violations = 0usize;
    let mut nonfinite = 0usize;
    for i in 0..100_000 {
        let classes = rng.random_range(2..=64);
        let p: Vec<f64> = match i % 4 {
            0 => {
                let mut p = vec![0.0; classes];
                p[rng.random_range(0..classes)] = 1.0;
                p
            }
            1 => vec![1.0 / classes as f64; classes],
            _ => {
                let raw: Vec<f64> = (0..classes).map(|_| rng.random::<f64>().powi(i % 7 + 1)).collect();
                let total: f64 = raw.iter().sum();
                if total == 0.0 {
                    vec![1.0 / classes as f64; classes]
                } else {
                    raw.iter().map(|x| x / total).collect()
                }
            }
        };
        let h = entropy(&p).unwrap();
        if !(h >= 0.0 && h <= (classes as f64).ln() + 1e-12) {
            entropy_violations += 1;
        }

        let mut sims: Vec<f64> = (0..classes).map(|_| rng.random_range(-1.0..=1.0)).collect();
        if i % 3 == 0 {
            sims[0] = 1.0;
            sims[classes - 1] = -1.0;
        }
        let q = softmax(&Logits::new(sims).unwrap(), 0.01).unwrap();
        if q.as_slice().iter().any(|x| !x.is_finite()) || !q.entropy().is_finite() {
            nonfinite += 1;
        }
    }
    let ok = entropy_violations == 0 && nonfinite == 0;
    verdict(
        7,
        ok,
        &format!(
            "100000 distributions: {entropy_violations} entropies outside [0, ln C], \
             {nonfinite} non-finite softmax outputs at tau 0.01"
        ),
    );
    assert_eq!(entropy_violations, 0);
    assert_eq!(nonfinite, 0);
}
