//! Property tests over whole simulated cohorts. Each case builds a small
//! cohort from a random seed and configuration, so case counts are kept low.

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use adherence::claims::{load_claims, ClaimsPaths, Molecule};
use adherence::eval::{evaluate_tables, EvalConfig};
use adherence::features::{build_phase_features, transaction_sequences, EventKind, FeatureConfig, Padding, EVENT_KINDS, EVENT_WIDTH};
use adherence::learners::{fit, Family, ModelSpec};
use adherence::phases::oracle::oracle_check;
use adherence::phases::{label_cohort, EndType, PhaseConfig, Therapy};
use adherence::provenance::Provenance;
use adherence::sim::{emit_claims, recovery_stats, simulate_cohort, BehaviorTag, SimConfig};

fn cohort(n: usize, seed: u64, jitter: i64) -> SimConfig {
    SimConfig { purchase_jitter_days: jitter, ..SimConfig::realistic(n, seed) }
}

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig { cases: n, ..ProptestConfig::default() }
}

proptest! {
    #![proptest_config(cases(24))]

    #[test]
    fn simulation_is_a_pure_function_of_config(seed in 0u64..10_000, n in 20usize..120) {
        let cfg = cohort(n, seed, 3);
        let (a, ta) = simulate_cohort(&cfg).unwrap();
        let (b, tb) = simulate_cohort(&cfg).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(ta, tb);
        let (c, _) = simulate_cohort(&cohort(n, seed + 1, 3)).unwrap();
        prop_assert_ne!(a, c);
    }

    #[test]
    fn emitted_claims_reload_equal_and_in_window(seed in 0u64..10_000, n in 20usize..120) {
        let cfg = cohort(n, seed, 3);
        let (store, truth) = simulate_cohort(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        emit_claims(&store, &truth, dir.path(), &Provenance::unconfigured(seed)).unwrap();
        let (reloaded, _) = load_claims(&ClaimsPaths::in_dir(dir.path()), cfg.window).unwrap();
        prop_assert_eq!(&reloaded, &store);
        for r in reloaded.records() {
            let dates = r.dispensings.iter().map(|d| d.date).chain(r.hospitalizations.iter().map(|h| h.start_date));
            for d in dates {
                prop_assert!(cfg.window.contains(d));
            }
        }
    }

    #[test]
    fn loading_ignores_row_order(seed in 0u64..10_000, shuffle_seed in 0u64..1_000) {
        let cfg = cohort(40, seed, 3);
        let (store, truth) = simulate_cohort(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        emit_claims(&store, &truth, dir.path(), &Provenance::unconfigured(seed)).unwrap();
        for file in ["dispensing.csv", "hospitalizations.csv"] {
            let path = dir.path().join(file);
            let text = std::fs::read_to_string(&path).unwrap();
            let (head, mut rows): (Vec<&str>, Vec<&str>) = {
                let lines: Vec<&str> = text.lines().collect();
                let split = lines.iter().position(|l| !l.starts_with('#')).unwrap() + 1;
                (lines[..split].to_vec(), lines[split..].to_vec())
            };
            rows.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
            std::fs::write(&path, [head, rows].concat().join("\n") + "\n").unwrap();
        }
        let (shuffled, _) = load_claims(&ClaimsPaths::in_dir(dir.path()), cfg.window).unwrap();
        prop_assert_eq!(shuffled, store);
    }

    #[test]
    fn phase_engine_matches_brute_force(seed in 0u64..10_000, n in 50usize..250, jitter in 0i64..6) {
        let (store, _) = simulate_cohort(&cohort(n, seed, jitter)).unwrap();
        let report = oracle_check(&store, &PhaseConfig::default());
        prop_assert!(report.passed(), "{:?}", report.mismatches.first());
    }

    #[test]
    fn noise_free_dropouts_are_recovered_exactly(seed in 0u64..10_000) {
        let (store, truth) = simulate_cohort(&cohort(400, seed, 0)).unwrap();
        let stats = recovery_stats(&truth, &label_cohort(&store, &PhaseConfig::default()).phases);
        prop_assert_eq!((stats.precision, stats.recall), (1.0, 1.0), "{:?}", stats);
    }

    #[test]
    fn study_dispensings_partition_into_phases(seed in 0u64..10_000, jitter in 0i64..6) {
        let (store, _) = simulate_cohort(&cohort(150, seed, jitter)).unwrap();
        let phases = label_cohort(&store, &PhaseConfig::default()).phases;
        let mut spans: BTreeMap<(&str, Therapy), Vec<(_, _, usize)>> = BTreeMap::new();
        for p in &phases {
            spans.entry((p.phase.patient_id.as_str(), p.phase.therapy)).or_default().push((p.phase.start_date, p.phase.last_event_date, p.phase.n_intakes));
        }
        for r in store.records() {
            let mut dates: BTreeMap<Therapy, BTreeSet<_>> = BTreeMap::new();
            for d in &r.dispensings {
                if let Molecule::Study(m) = &d.molecule {
                    dates.entry(Therapy::Molecule(*m)).or_default().insert(d.date);
                }
            }
            for (therapy, days) in dates {
                let owners = spans.get(&(r.id(), therapy)).cloned().unwrap_or_default();
                for day in &days {
                    let n = owners.iter().filter(|(s, e, _)| s <= day && day <= e).count();
                    prop_assert_eq!(n, 1, "{} {} {}", r.id(), therapy, day);
                }
                // same-day purchases merge, so intakes count distinct dates
                prop_assert_eq!(owners.iter().map(|o| o.2).sum::<usize>(), days.len());
                for w in owners.windows(2) {
                    prop_assert!(w[0].1 < w[1].0);
                }
            }
        }
    }

    #[test]
    fn sequence_encoding_invariants(seed in 0u64..10_000) {
        let (store, _) = simulate_cohort(&cohort(120, seed, 3)).unwrap();
        let labeled = label_cohort(&store, &PhaseConfig::default()).phases;
        let cfg = FeatureConfig::default();
        let table = transaction_sequences(&store, &labeled, build_phase_features(&store, &labeled, &cfg), &cfg);
        prop_assert_eq!(table.padding, Padding::ZeroFill);
        for s in &table.samples {
            let real = (s.event_index + 1).min(table.length);
            let w = table.window(s);
            for (i, row) in w.iter().enumerate() {
                let is_padding = i < table.length - real;
                prop_assert_eq!(row.iter().all(|v| *v == 0.0), is_padding);
                if !is_padding {
                    prop_assert_eq!(row[1..1 + EVENT_KINDS].iter().filter(|v| **v == 1.0).count(), 1);
                }
            }
        }
        // hospital-based therapies have no dispensing samples
        let stopped = labeled
            .iter()
            .filter(|p| p.phase.end_type == EndType::IllegitimateStop && matches!(p.phase.therapy, Therapy::Molecule(_)))
            .count();
        prop_assert_eq!(table.samples.iter().filter(|s| s.label == 1).count(), stopped);
    }
}

#[test]
fn event_kinds_have_distinct_slots() {
    let slots: BTreeSet<usize> = (0..EVENT_KINDS).map(|s| EventKind::from_slot(s).unwrap().slot()).collect();
    assert_eq!(slots.len(), EVENT_KINDS);
    assert!(EventKind::from_slot(EVENT_KINDS).is_none());
    assert_eq!(EVENT_WIDTH, EVENT_KINDS + 2);
}

#[test]
fn eligible_phases_shrink_with_horizon() {
    let (store, _) = simulate_cohort(&SimConfig::realistic(3_000, 9)).unwrap();
    let phases = label_cohort(&store, &PhaseConfig::default()).phases;
    let table = build_phase_features(&store, &phases, &FeatureConfig::default());
    let counts: Vec<usize> = [90, 180, 360].iter().map(|&h| table.dataset(h).len()).collect();
    assert!(counts[0] > counts[1] && counts[1] > counts[2], "{counts:?}");
}

#[test]
fn planted_behavior_rates_match_weights() {
    let cfg = SimConfig::null_signal(10_000, 77);
    let (_, truth) = simulate_cohort(&cfg).unwrap();
    let n = truth.patients.len() as f64;
    for tag in BehaviorTag::ALL {
        let p = cfg.behavior_mix.weight(tag) / BehaviorTag::ALL.iter().map(|&t| cfg.behavior_mix.weight(t)).sum::<f64>();
        let seen = truth.patients.iter().filter(|t| t.behavior.kind.tag() == tag).count() as f64 / n;
        let se = (p * (1.0 - p) / n).sqrt();
        assert!((seen - p).abs() <= 3.0 * se, "{tag:?}: {seen:.4} vs {p:.4} (se {se:.4})");
    }
}

#[test]
fn dropout_rate_rises_with_copathology_count() {
    let (_, truth) = simulate_cohort(&SimConfig::realistic(20_000, 78)).unwrap();
    let mut by_count: BTreeMap<u8, (usize, usize)> = BTreeMap::new();
    for t in &truth.patients {
        let e = by_count.entry(t.covariates.copathology_count).or_default();
        e.0 += usize::from(t.behavior.kind.tag() == BehaviorTag::IllegitimateDropout);
        e.1 += 1;
    }
    let rates: Vec<(u8, f64, usize)> = by_count.iter().filter(|(_, (_, n))| *n >= 500).map(|(&c, &(d, n))| (c, d as f64 / n as f64, n)).collect();
    assert!(rates.len() >= 2, "{rates:?}");
    for w in rates.windows(2) {
        assert!(w[0].1 <= w[1].1, "{rates:?}");
    }
}

#[test]
fn scores_are_probabilities_and_fits_are_reproducible() {
    let (store, _) = simulate_cohort(&SimConfig::realistic(300, 12)).unwrap();
    let phases = label_cohort(&store, &PhaseConfig::default()).phases;
    let table = build_phase_features(&store, &phases, &FeatureConfig::default());
    let data = table.dataset(180);
    for family in [Family::Logistic, Family::DecisionTree, Family::GradientBoosting, Family::Mlp] {
        let spec = ModelSpec::default_for(family, 4);
        let a = fit(&spec, &data).unwrap();
        let b = fit(&spec, &data).unwrap();
        assert_eq!(a.to_json(), b.to_json(), "{family}");
        assert!(a.predict_dataset(&data).unwrap().iter().all(|p| (0.0..=1.0).contains(p)), "{family}");
    }
}

#[test]
fn test_folds_are_scored_unbalanced_and_complete() {
    let (store, _) = simulate_cohort(&SimConfig::realistic(400, 13)).unwrap();
    let phases = label_cohort(&store, &PhaseConfig::default()).phases;
    let table = build_phase_features(&store, &phases, &FeatureConfig::default());
    let cfg = EvalConfig { families: vec![Family::Logistic, Family::DecisionTree], folds: 4, ..EvalConfig::default() };
    let report = evaluate_tables(&table, None, &cfg, 3).unwrap();
    for cell in &report.cells {
        let data = table.dataset(cell.horizon);
        let positives = data.y.iter().filter(|&&y| y == 1).count();
        let minority = positives.min(data.len() - positives);
        assert_eq!(cell.folds.iter().map(|f| f.n_test).sum::<usize>(), data.len());
        let train_total: usize = cell.folds.iter().map(|f| f.n_train_balanced).sum();
        // balanced training sets hold equal classes; each minority row trains in k - 1 folds
        assert!(cell.folds.iter().all(|f| f.n_train_balanced % 2 == 0));
        assert_eq!(train_total, 2 * minority * (cfg.folds - 1));
    }
}
