use std::collections::HashSet;

use fedcontract::data::{emd, flip_labels, largest_remainder, partition, Dataset, PartitionSpec, SyntheticSpec};
use proptest::prelude::*;

fn pool(count: usize, classes: usize, seed: u64) -> Dataset {
    SyntheticSpec { classes, dim: 2, spread: 0.1, seed }.generate(count, 0).unwrap()
}

fn probability_vector(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, len).prop_filter_map("non-zero mass", |v| {
        let s: f64 = v.iter().sum();
        (s > 1e-3).then(|| v.iter().map(|x| x / s).collect())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn partition_conserves_and_orders_samples(
        count in 200usize..1500,
        clients in 2usize..30,
        classes in 2usize..8,
        cap in 1usize..5,
        alpha in 0.05f64..2.0,
        zipf in 0.5f64..1.5,
        seed in any::<u64>(),
    ) {
        let ds = pool(count, classes, seed);
        let spec = PartitionSpec {
            num_clients: clients,
            zipf_exponent: zipf,
            dirichlet_alpha: alpha,
            max_classes_per_client: cap.min(classes),
            seed,
        };
        let shards = match partition(&ds, &spec) {
            Ok(s) => s,
            // very small pools may leave a client empty, which is reported
            Err(_) => return Ok(()),
        };
        prop_assert_eq!(shards.len(), clients);
        let total: usize = shards.iter().map(|s| s.size()).sum();
        prop_assert!(total <= count);
        let mut seen = HashSet::new();
        for s in &shards {
            for &i in &s.indices {
                prop_assert!(seen.insert(i), "index {} assigned twice", i);
            }
            let distinct: HashSet<_> = s.labels.iter().collect();
            prop_assert!(distinct.len() <= spec.max_classes_per_client);
            prop_assert!(s.size() > 0);
        }
        for w in shards.windows(2) {
            prop_assert!(w[0].size() >= w[1].size());
        }
        prop_assert_eq!(partition(&ds, &spec).unwrap(), shards);
    }

    #[test]
    fn emd_is_bounded_and_symmetric(p in probability_vector(6), q in probability_vector(6)) {
        let d = emd(&p, &q).unwrap();
        prop_assert!((0.0..=2.0 + 1e-12).contains(&d));
        prop_assert_eq!(d, emd(&q, &p).unwrap());
        prop_assert!(emd(&p, &p).unwrap() == 0.0);
        if d == 0.0 {
            prop_assert_eq!(&p, &q);
        }
    }

    #[test]
    fn largest_remainder_sums_to_total(weights in prop::collection::vec(0.001f64..10.0, 1..20), total in 0usize..5000) {
        let parts = largest_remainder(&weights, total);
        prop_assert_eq!(parts.iter().sum::<usize>(), total);
        let sum: f64 = weights.iter().sum();
        for (p, w) in parts.iter().zip(&weights) {
            let quota = w / sum * total as f64;
            prop_assert!((*p as f64 - quota).abs() < 1.0 + 1e-9);
        }
    }

    #[test]
    fn flipping_changes_exactly_the_requested_count(fraction in 0.0f64..=1.0, seed in any::<u64>()) {
        let ds = pool(600, 5, 3);
        let spec = PartitionSpec { num_clients: 4, seed: 9, ..PartitionSpec::default() };
        let shard = &partition(&ds, &spec).unwrap()[0];
        let flipped = flip_labels(shard, fraction, 5, seed).unwrap();
        let changed = shard.labels.iter().zip(&flipped.labels).filter(|(a, b)| a != b).count();
        prop_assert_eq!(changed, (fraction * shard.size() as f64).floor() as usize);
        prop_assert_eq!(&flipped.indices, &shard.indices);
    }
}

#[test]
fn emd_extremes() {
    assert_eq!(emd(&[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0]).unwrap(), 2.0);
    assert!(emd(&[0.5, 0.6], &[0.5, 0.5]).is_err());
    assert!(emd(&[1.0], &[0.5, 0.5]).is_err());
}
