mod common;

use proptest::prelude::*;
use protofed::data::generate_client;
use protofed::losses::{
    class_weights, contrastive_loss, contrastive_pair_losses, l2_proto_penalty, supervised_loss, total_loss,
    ClassCounts, LossConfig,
};
use protofed::metrics::{balanced_accuracy, f_beta, precision_recall, ConfusionCounts};
use protofed::model::LcnnModel;
use protofed::ndkernel::Tensor;
use protofed::prototypes::{aggregate_global, compute_local_prototypes, AggregationMode, PrototypeSet, RunningMean};
use protofed::transport::{decode_prototypes, encode_prototypes};

const DIM: usize = 3;

fn vector() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, DIM)
}

fn nonzero_vector() -> impl Strategy<Value = Vec<f64>> {
    vector().prop_filter("nonzero norm", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-6)
}

fn local_set() -> impl Strategy<Value = PrototypeSet> {
    (prop::option::of((vector(), 1u64..500)), prop::option::of((vector(), 1u64..500))).prop_map(|(c0, c1)| {
        let mut s = PrototypeSet::new();
        if let Some((v, n)) = c0 {
            s.insert(0, v, n).unwrap();
        }
        if let Some((v, n)) = c1 {
            s.insert(1, v, n).unwrap();
        }
        s
    })
}

fn both_classes() -> impl Strategy<Value = PrototypeSet> {
    (nonzero_vector(), nonzero_vector(), 1u64..500, 1u64..500).prop_map(|(a, b, na, nb)| {
        let mut s = PrototypeSet::new();
        s.insert(0, a, na).unwrap();
        s.insert(1, b, nb).unwrap();
        s
    })
}

fn labelled_batch() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (1usize..24).prop_flat_map(|n| (prop::collection::vec(-10.0f64..10.0, n * DIM), prop::collection::vec(0u8..2, n)))
}

proptest! {
    #[test]
    fn aggregate_within_componentwise_hull(locals in prop::collection::vec(local_set(), 1..6)) {
        let tagged: Vec<(u32, PrototypeSet)> = locals.into_iter().enumerate().map(|(i, s)| (i as u32, s)).collect();
        let global = aggregate_global(&tagged, AggregationMode::Normalized).unwrap();
        for (class, proto) in global.iter() {
            for k in 0..DIM {
                let members = tagged.iter().filter_map(|(_, s)| s.vector(class)).map(|v| v[k]);
                let (lo, hi) = members.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), x| (l.min(x), h.max(x)));
                prop_assert!(proto.vector[k] >= lo && proto.vector[k] <= hi);
            }
        }
    }

    #[test]
    fn aggregate_ignores_client_order(locals in prop::collection::vec(local_set(), 1..6), rotate in 0usize..6) {
        let tagged: Vec<(u32, PrototypeSet)> = locals.into_iter().enumerate().map(|(i, s)| (i as u32, s)).collect();
        let mut shuffled = tagged.clone();
        let r = rotate % shuffled.len();
        shuffled.rotate_left(r);
        shuffled.reverse();
        for mode in [AggregationMode::Normalized, AggregationMode::Literal] {
            prop_assert_eq!(aggregate_global(&tagged, mode).unwrap(), aggregate_global(&shuffled, mode).unwrap());
        }
    }

    #[test]
    fn identical_prototypes_aggregate_exactly(v in vector(), counts in prop::collection::vec(1u64..10_000, 1..8)) {
        let tagged: Vec<(u32, PrototypeSet)> = counts
            .iter()
            .enumerate()
            .map(|(i, &n)| {
                let mut s = PrototypeSet::new();
                s.insert(1, v.clone(), n).unwrap();
                (i as u32, s)
            })
            .collect();
        let global = aggregate_global(&tagged, AggregationMode::Normalized).unwrap();
        prop_assert_eq!(global.vector(1).unwrap(), &v[..]);
        prop_assert_eq!(global.count(1), counts.iter().sum::<u64>());
    }

    #[test]
    fn missing_class_clients_are_excluded(a in vector(), b in vector(), na in 1u64..100, nb in 1u64..100) {
        let mut with = PrototypeSet::new();
        with.insert(0, a.clone(), na).unwrap();
        with.insert(1, b, nb).unwrap();
        let mut without = PrototypeSet::new();
        without.insert(1, vec![0.0; DIM], 7).unwrap();
        let global = aggregate_global(&[(0, with), (1, without)], AggregationMode::Normalized).unwrap();
        prop_assert_eq!(global.vector(0).unwrap(), &a[..]);
        prop_assert_eq!(global.count(0), na);
    }

    #[test]
    fn streaming_matches_batch((values, labels) in labelled_batch(), cut in 0usize..24) {
        let n = labels.len();
        let cut = cut.min(n);
        let whole = compute_local_prototypes(&Tensor::new(&[n, DIM], values.clone()).unwrap(), &labels).unwrap();
        let mut rm = RunningMean::new();
        rm.update(&Tensor::new(&[cut, DIM], values[..cut * DIM].to_vec()).unwrap(), &labels[..cut]).unwrap();
        rm.update(&Tensor::new(&[n - cut, DIM], values[cut * DIM..].to_vec()).unwrap(), &labels[cut..]).unwrap();
        let streamed = rm.finalize();
        for (class, proto) in whole.iter() {
            prop_assert_eq!(streamed.count(class), proto.count);
            for (x, y) in streamed.vector(class).unwrap().iter().zip(&proto.vector) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
        prop_assert_eq!(streamed.len(), whole.len());
    }

    #[test]
    fn prototype_payload_round_trips(set in local_set()) {
        prop_assert_eq!(decode_prototypes(&encode_prototypes(&set)).unwrap(), set);
    }

    #[test]
    fn losses_are_nonnegative(
        local in both_classes(),
        global in both_classes(),
        logits in prop::collection::vec(-10.0f64..10.0, 8),
        labels in prop::collection::vec(0u8..2, 4),
        n0 in 1u64..1000,
        n1 in 1u64..1000,
    ) {
        let counts = ClassCounts::new(n0, n1);
        let cfg = LossConfig::default();
        let ls = supervised_loss(&Tensor::new(&[4, 2], logits).unwrap(), &labels, &counts).unwrap();
        let lc = contrastive_loss(&local, &global, &counts, &cfg).unwrap();
        let l2 = l2_proto_penalty(&local, &global).unwrap();
        prop_assert!(ls >= 0.0 && lc >= 0.0 && l2 >= 0.0);
    }

    #[test]
    fn total_loss_is_convex_combination(ls in 0.0f64..50.0, lc in 0.0f64..50.0, lambda in 0.0f64..=1.0) {
        let t = total_loss(ls, lc, lambda);
        prop_assert!(t >= ls.min(lc) - 1e-12 && t <= ls.max(lc) + 1e-12);
    }

    #[test]
    fn contrastive_is_scale_invariant(local in both_classes(), global in both_classes(), alpha in 0.01f64..100.0) {
        let (lp, ln) = contrastive_pair_losses(&local, &global, 0.5, 1e-8).unwrap();
        let mut scaled = PrototypeSet::new();
        for (class, proto) in local.iter() {
            scaled.insert(class, proto.vector.iter().map(|x| alpha * x).collect(), proto.count).unwrap();
        }
        let (sp, sn) = contrastive_pair_losses(&scaled, &global, 0.5, 1e-8).unwrap();
        prop_assert!((lp - sp).abs() <= 1e-9 && (ln - sn).abs() <= 1e-9);
    }

    #[test]
    fn class_weights_decrease_with_count(n in 0u64..10_000, extra in 1u64..1000, gamma in 0.5f64..4.0) {
        let (lo, _) = class_weights(&ClassCounts::new(n, 1), gamma, 1e-8);
        let (hi, _) = class_weights(&ClassCounts::new(n + extra, 1), gamma, 1e-8);
        prop_assert!(hi < lo);
    }

    #[test]
    fn metrics_stay_in_unit_interval(tp in 0u64..200, tn in 0u64..200, fp in 0u64..200, fn_ in 0u64..200) {
        let c = ConfusionCounts::new(tp, tn, fp, fn_);
        let (p, r) = precision_recall(&c);
        let f = f_beta(p, r, 2.0);
        prop_assert!((0.0..=1.0).contains(&f));
        if let Ok(ba) = balanced_accuracy(&c) {
            prop_assert!((0.0..=1.0).contains(&ba));
        }
    }

    #[test]
    fn f2_favours_recall(x in 0.01f64..0.99) {
        prop_assert!(f_beta(x, 1.0, 2.0) > f_beta(1.0, x, 2.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn model_outputs_finite_on_bounded_inputs(values in prop::collection::vec(-10.0f64..10.0, 2 * 8 * 4), seed in 0u64..1000) {
        let model = LcnnModel::init(common::tiny_model(), seed).unwrap();
        let pass = model.forward_eval(&Tensor::new(&[2, 8, 4], values).unwrap()).unwrap();
        prop_assert!(pass.embeddings.data().iter().chain(pass.logits.data()).all(|v| v.is_finite()));
    }

    #[test]
    fn synthetic_counts_match_ratios(seed in 0u64..1000, client in 0usize..3) {
        let spec = common::tiny_spec(3, seed);
        let data = generate_client(&spec, client).unwrap();
        let (n0, n1) = spec.train_counts().unwrap();
        let counts = data.train.counts();
        prop_assert_eq!((counts.n0 as usize, counts.n1 as usize), (n0, n1));
        let (t0, t1) = spec.test_counts().unwrap();
        let counts = data.test.counts();
        prop_assert_eq!((counts.n0 as usize, counts.n1 as usize), (t0, t1));
        prop_assert_eq!(generate_client(&spec, client).unwrap(), data);
    }
}
