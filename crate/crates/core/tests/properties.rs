mod common;

use common::*;
use lunet::numerics::Tensor;
use lunet::pruning::{compute_criterion, remove_channel, update_dropout, widest_schedule};
use lunet::training::aggregate;
use lunet::unet::{build, extract_spec, ChannelId};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn aggregate_ignores_order(mut v in prop::collection::vec(0.0f64..1.0, 1..12), seed in any::<u64>()) {
        let a = aggregate(&v);
        v.shuffle(&mut rng(seed));
        prop_assert_eq!(aggregate(&v), a);
    }

    #[test]
    fn count_matches_recount(seed in any::<u64>(), dim in 2usize..=3) {
        let spec = random_spec(&mut rng(seed), dim, 4, seed % 2 == 0);
        prop_assert_eq!(spec.count().n_params, brute_count(&spec));
    }

    #[test]
    fn widest_schedule_is_pure_and_removes_one_channel_per_step(seed in any::<u64>()) {
        let spec = random_spec(&mut rng(seed), 2, 5, seed % 2 == 0);
        let total = spec.count().n_channels - spec.num_convs();
        let a = widest_schedule(&spec, total).unwrap();
        prop_assert_eq!(&a, &widest_schedule(&spec, total).unwrap());
        for (k, w) in a.iter().enumerate() {
            prop_assert_eq!(w.iter().flatten().sum::<usize>(), spec.count().n_channels - k);
        }
        prop_assert!(widest_schedule(&spec, total + 1).is_err());
    }

    // any sequence of removals leaves a model whose tensors and spec agree
    #[test]
    fn removals_keep_model_consistent(seed in any::<u64>(), steps in 1usize..8) {
        let mut r = rng(seed);
        let spec = random_spec(&mut r, 2, 3, true);
        let mut model = build(&spec, seed).unwrap();
        let input = random_tensor(&[1, spec.in_channels, 8, 8], &mut r);
        for _ in 0..steps {
            let s = model.spec().clone();
            let convs: Vec<_> = s.conv_refs().filter(|&c| s.width(c) >= 2).collect();
            let Some(&c) = convs.choose(&mut r) else { break };
            let id = ChannelId { block: c.block, conv: c.conv, channel: r.gen_range(0..s.width(c)) };
            let before = model.num_parameters();
            let removal = remove_channel(&mut model, id).unwrap();
            prop_assert_eq!(before - removal.params_removed, model.num_parameters());
        }
        prop_assert_eq!(&extract_spec(&model), model.spec());
        prop_assert_eq!(model.num_parameters(), model.spec().count().n_params);
        let out = model.predict(&input).unwrap();
        prop_assert_eq!(out.shape()[1], spec.head_channels());
        prop_assert!(out.is_finite());
    }

    #[test]
    fn criterion_covers_every_channel(seed in any::<u64>()) {
        let mut r = rng(seed);
        let spec = random_spec(&mut r, 2, 3, true);
        let model = build(&spec, seed).unwrap();
        let batches: Vec<Tensor> = (0..2).map(|_| random_tensor(&[2, spec.in_channels, 8, 8], &mut r)).collect();
        let report = compute_criterion(&model, &batches, 0).unwrap();
        prop_assert_eq!(report.len(), spec.count().n_channels);
        prop_assert!(report.values.iter().all(|&(_, v)| v >= 0.0 && v.is_finite()));
        let plan = update_dropout(&report, &spec, 0.05);
        let raised = plan.iter().filter(|&(_, p)| p > 0.05).count();
        prop_assert_eq!(raised, spec.count().n_channels.div_ceil(4));
    }
}
