use std::collections::HashMap;

use fedcontract::asyncsim::{access_control, Upload, Verdict};
use fedcontract::experiment::{prepare, ExperimentConfig, SimulationOutput};
use proptest::prelude::*;

fn small_config(seed: u64, attackers: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk();
    for s in [
        "partition.num_clients=8",
        "dataset.train_samples=2000",
        "dataset.test_samples=300",
        "rounds=8",
    ] {
        cfg.set(s).unwrap();
    }
    cfg.seed = seed;
    cfg.attack.attackers = attackers;
    cfg
}

fn check_ledger(out: &SimulationOutput, rewards: &[f64]) {
    let mut paid: HashMap<usize, f64> = HashMap::new();
    for (t, ledger) in out.ledgers.iter().enumerate() {
        assert_eq!(ledger.round, t, "rounds are gapless");
        let mut alpha = 0.0;
        for rec in &ledger.uploads {
            assert!(rec.issued_round <= ledger.round);
            assert_eq!(rec.staleness, ledger.round - rec.issued_round);
            let stats = ledger.levels.iter().find(|s| s.level == rec.level).unwrap();
            if rec.admitted() {
                assert!(rec.q >= stats.threshold && rec.q > 0.0);
                assert!(rec.alpha >= 0.0);
                alpha += rec.alpha;
                *paid.entry(rec.client_id).or_default() += rewards[rec.level - 1];
            } else {
                assert_eq!(rec.alpha, 0.0);
            }
        }
        if ledger.admitted_count > 0 {
            assert!((alpha - 1.0).abs() <= 1e-9, "round {t}: weights sum to {alpha}");
        }
        assert_eq!(ledger.no_op, ledger.admitted_count == 0);
    }
    for c in &out.settlement.clients {
        let expected = paid.get(&c.client_id).copied().unwrap_or(0.0);
        assert!((c.rewards - expected).abs() <= 1e-6 * expected.max(1.0));
    }
}

#[test]
fn ledgers_satisfy_clock_weight_filter_and_payment_invariants() {
    for (seed, attackers) in [(0, 0), (1, 2), (2, 3)] {
        let prepared = prepare(&small_config(seed, attackers)).unwrap();
        let out = prepared.simulate().unwrap();
        assert_eq!(out.ledgers.len(), 8);
        check_ledger(&out, &prepared.menu.rewards());
    }
}

#[test]
fn ledgers_do_not_depend_on_worker_count() {
    let prepared = prepare(&small_config(5, 2)).unwrap();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| prepared.simulate().unwrap())
    };
    let one = run(1);
    let four = run(4);
    assert_eq!(serde_json::to_string(&one.ledgers).unwrap(), serde_json::to_string(&four.ledgers).unwrap());
    assert_eq!(one.final_model.params(), four.final_model.params());
}

fn uploads() -> impl Strategy<Value = Vec<Upload>> {
    prop::collection::vec((1usize..4, -1.0f64..3.0), 1..30).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(client_id, (level, q))| Upload { client_id, level, q })
            .collect()
    })
}

proptest! {
    #[test]
    fn admitted_uploads_clear_their_level_threshold(ups in uploads(), a in 0.0f64..1.0, phi in 1.0f64..4.0) {
        let out = access_control(&ups, a, phi).unwrap();
        let mut total = 0.0;
        for (i, u) in ups.iter().enumerate() {
            let stats = out.levels.iter().find(|s| s.level == u.level).unwrap();
            let expected_threshold = if stats.skewed { stats.mean - stats.std } else { stats.mean - phi * stats.std };
            prop_assert_eq!(stats.threshold, expected_threshold);
            match out.verdicts[i] {
                Verdict::Admitted => {
                    prop_assert!(u.q >= stats.threshold && u.q > 0.0);
                    total += out.weights[i];
                }
                Verdict::Filtered => prop_assert!(u.q < stats.threshold),
                Verdict::NonPositive => prop_assert!(u.q <= 0.0),
            }
            if out.verdicts[i] != Verdict::Admitted {
                prop_assert_eq!(out.weights[i], 0.0);
            }
        }
        if out.admitted_count() > 0 {
            prop_assert!((total - 1.0).abs() <= 1e-9);
        }
    }
}
