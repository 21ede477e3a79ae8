use std::collections::BTreeSet;

use fedsel::data::{
    distinct_labels, label_skew_partition, partition, partition_shards, synth_blobs,
    train_validation_split, PartitionPlan, PartitionScheme,
};
use fedsel::numerics::LabeledDataset;
use fedsel::seeds::SimRng;
use proptest::prelude::*;
use rand::SeedableRng;

fn blobs(classes: usize, per_class: usize, seed: u64) -> LabeledDataset {
    synth_blobs(classes, 2, per_class, 0.5, &mut SimRng::seed_from_u64(seed)).unwrap()
}

fn assert_disjoint_within(plan: &PartitionPlan, n: usize) -> BTreeSet<usize> {
    let mut seen = BTreeSet::new();
    for idx in &plan.assignments {
        for &i in idx {
            assert!(i < n, "index {i} outside source of {n}");
            assert!(seen.insert(i), "index {i} assigned twice");
        }
    }
    seen
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn dirichlet_plans_are_disjoint_and_deterministic(
        clients in 2usize..12, alpha in 0.1f64..5.0, seed in any::<u64>()
    ) {
        let ds = blobs(5, 60, seed);
        let scheme = PartitionScheme::HeteroDirichlet { alpha, min_size: 2 };
        let plan = partition(&ds, clients, &scheme, seed).unwrap();
        let used = assert_disjoint_within(&plan, ds.len());
        prop_assert_eq!(used.len(), ds.len());
        prop_assert_eq!(plan.total_samples(), ds.len());
        prop_assert_eq!(plan, partition(&ds, clients, &scheme, seed).unwrap());
    }

    #[test]
    fn shards_cover_the_retained_prefix(
        clients in 2usize..10, per_client in 1usize..4, per_class in 10usize..40, seed in any::<u64>()
    ) {
        let ds = blobs(4, per_class, seed);
        let plan = partition_shards(&ds, clients, per_client, seed).unwrap();
        let used = assert_disjoint_within(&plan, ds.len());
        let shard = ds.len() / (clients * per_client);
        prop_assert_eq!(used.len(), shard * clients * per_client);
        // The retained samples are the first `used.len()` of the label-sorted order.
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.sort_by_key(|&i| (ds.labels[i], i));
        let prefix: BTreeSet<usize> = order[..used.len()].iter().copied().collect();
        prop_assert_eq!(used, prefix);
        let sizes = plan.client_sizes();
        prop_assert!(sizes.iter().all(|&s| s == sizes[0]));
    }

    #[test]
    fn shards_at_label_boundaries_give_at_most_two_labels(clients in 2usize..8, seed in any::<u64>()) {
        // One class per client and ten samples per class: shards of five never
        // straddle a label boundary.
        let ds = blobs(clients, 10, seed);
        let plan = partition_shards(&ds, clients, 2, seed).unwrap();
        for idx in &plan.assignments {
            prop_assert_eq!(idx.len(), 10);
            prop_assert!(distinct_labels(&ds, idx).len() <= 2);
        }
    }

    #[test]
    fn noniid_label_cardinality(
        clients in 2usize..15, labels in 1usize..4, jitter in 0.0f64..0.9, seed in any::<u64>()
    ) {
        let ds = blobs(6, 80, seed);
        let scheme = PartitionScheme::NoniidLabel { labels_per_client: labels, size_jitter: jitter };
        let plan = partition(&ds, clients, &scheme, seed).unwrap();
        assert_disjoint_within(&plan, ds.len());
        for idx in &plan.assignments {
            prop_assert_eq!(distinct_labels(&ds, idx).len(), labels);
        }
        prop_assert_eq!(plan, partition(&ds, clients, &scheme, seed).unwrap());
    }

    #[test]
    fn label_skew_cardinality(clients in 1usize..8, k in 1usize..5) {
        let ds = blobs(5, 40, 3);
        let plan = label_skew_partition(&ds, clients, k).unwrap();
        assert_disjoint_within(&plan, ds.len());
        for idx in &plan.assignments {
            prop_assert_eq!(distinct_labels(&ds, idx).len(), k);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_is_stratified_and_complete(
        classes in 2usize..8, per_class in 1usize..60, frac in 0.0f64..0.9, seed in any::<u64>()
    ) {
        let ds = blobs(classes, per_class, seed);
        let (train, val) = train_validation_split(&ds, frac, &mut SimRng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(train.len() + val.len(), ds.len());
        let want_val = (per_class as f64 * frac).round() as usize;
        for c in 0..classes {
            prop_assert_eq!(val.labels.iter().filter(|&&y| y == c).count(), want_val);
            prop_assert_eq!(train.labels.iter().filter(|&&y| y == c).count(), per_class - want_val);
        }
    }
}
