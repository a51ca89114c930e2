use std::collections::{BTreeMap, BTreeSet};

use fusionseg::cloud::{self, DecimationPolicy, LabeledCloud, SemanticClass};
use fusionseg::datagen::{self, AugmentationSpec};
use fusionseg::eval::{self, ConfusionMatrix, Stage};
use fusionseg::graph;
use fusionseg::nn::{init_params, FusionConfig};
use fusionseg::stream::{FrameMessage, Pairer, SensorId};
use fusionseg::train::{self, AdamState, TrainConfig};
use ndarray::Array2;
use proptest::prelude::*;

const C: usize = SemanticClass::COUNT;

fn label_pairs(max: usize) -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
    (1..max).prop_flat_map(|n| (prop::collection::vec(0..C as u8, n), prop::collection::vec(0..C as u8, n)))
}

fn cloud_strategy(max: usize) -> impl Strategy<Value = LabeledCloud> {
    prop::collection::vec(((-5.0f64..5.0, -5.0f64..5.0, -1.0f64..3.0), 0..C as u8), 1..max).prop_map(|v| {
        let points = v.iter().map(|&((x, y, z), _)| [x, y, z]).collect();
        let ids: Vec<u8> = v.iter().map(|&(_, l)| l).collect();
        LabeledCloud::with_label_ids(points, &ids).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn swapping_prediction_and_truth_transposes_the_confusion((pred, truth) in label_pairs(300)) {
        let m = eval::confusion(&pred, &truth, C).unwrap();
        let t = eval::confusion(&truth, &pred, C).unwrap();
        prop_assert_eq!(m.transpose(), t);
        prop_assert_eq!(m.total(), pred.len() as u64);
    }

    #[test]
    fn overall_accuracy_counts_matches((pred, truth) in label_pairs(300)) {
        let m = eval::confusion(&pred, &truth, C).unwrap();
        let (oa, _) = eval::accuracies(&m).unwrap();
        let hits = pred.iter().zip(&truth).filter(|(a, b)| a == b).count();
        prop_assert_eq!(oa, hits as f64 / pred.len() as f64);
    }

    #[test]
    fn iou_never_exceeds_recall_or_precision((pred, truth) in label_pairs(300)) {
        let m = eval::confusion(&pred, &truth, C).unwrap();
        for (c, iou) in eval::iou_per_class(&m).into_iter().enumerate() {
            let Some(iou) = iou else {
                prop_assert_eq!(m.row_sum(c) + m.col_sum(c), 0);
                continue;
            };
            prop_assert!((0.0..=1.0).contains(&iou));
            let tp = m.get(c, c) as f64;
            if m.row_sum(c) > 0 {
                prop_assert!(iou <= tp / m.row_sum(c) as f64 + 1e-12);
            }
            if m.col_sum(c) > 0 {
                prop_assert!(iou <= tp / m.col_sum(c) as f64 + 1e-12);
            }
        }
    }

    #[test]
    fn metrics_ignore_duplicating_the_data((pred, truth) in label_pairs(200), copies in 2usize..5) {
        let m = eval::confusion(&pred, &truth, C).unwrap();
        let mut dup = ConfusionMatrix::zeros(C);
        for _ in 0..copies {
            dup.merge(&m).unwrap();
        }
        let named = eval::named_classes();
        prop_assert_eq!(eval::iou_per_class(&m), eval::iou_per_class(&dup));
        match (eval::miou(&m, &named), eval::miou(&dup, &named)) {
            (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
            (a, b) => prop_assert_eq!(a.is_err(), b.is_err()),
        }
        prop_assert_eq!(eval::accuracies(&m).unwrap(), eval::accuracies(&dup).unwrap());
    }

    #[test]
    fn augmentation_keeps_count_and_labels(c in cloud_strategy(200), seed: u64) {
        let out = datagen::augment(&c, &AugmentationSpec::default(), seed);
        prop_assert_eq!(out.len(), c.len());
        prop_assert_eq!(out.labels(), c.labels());
        prop_assert!(out.points().iter().flatten().all(|v| v.is_finite()));
        prop_assert_eq!(datagen::augment(&c, &AugmentationSpec::default(), seed), out);
    }

    #[test]
    fn grid_knn_matches_brute_force(
        coords in prop::collection::vec((0i32..6, 0i32..6, 0i32..4), 12..200),
        k in 1usize..11,
    ) {
        prop_assume!(k < coords.len());
        let flat: Vec<f64> = coords.iter().flat_map(|&(x, y, z)| [x as f64 * 0.1, y as f64 * 0.1, z as f64 * 0.1]).collect();
        let a = Array2::from_shape_vec((coords.len(), 3), flat).unwrap();
        let grid = graph::knn_grid(a.view(), k).unwrap();
        let brute = graph::knn_brute_force(a.view(), k).unwrap();
        prop_assert_eq!(grid.table(), brute.table());
    }

    #[test]
    fn zero_gradients_leave_parameters_and_moments_unchanged(init_seed: u64, steps in 0usize..4, lr in 1e-4f64..1e-1) {
        let config = FusionConfig { edgeconv_widths: vec![4], residual_widths: vec![4], head_widths: vec![4], ..FusionConfig::desk() };
        let mut params = init_params::<f64>(&config, init_seed).unwrap();
        let mut state = AdamState::new(&params, &TrainConfig::default());
        // Put the optimizer in an arbitrary state first.
        for _ in 0..steps {
            for (_, p) in params.iter_mut() {
                p.grad.mapv_inplace(|_| 0.5);
            }
            train::adam_step(&mut params, &mut state, lr).unwrap();
        }
        params.zero_grads();
        let before: Vec<_> = params.iter().map(|(_, p)| p.value.clone()).collect();
        let moments: BTreeMap<String, _> = params
            .names()
            .map(|n| (n.to_string(), (state.first_moment(n).unwrap().clone(), state.second_moment(n).unwrap().clone())))
            .collect();
        train::adam_step(&mut params, &mut state, lr).unwrap();
        let after: Vec<_> = params.iter().map(|(_, p)| p.value.clone()).collect();
        prop_assert_eq!(after, before);
        for (n, (m, v)) in &moments {
            prop_assert_eq!(state.first_moment(n).unwrap(), m);
            prop_assert_eq!(state.second_moment(n).unwrap(), v);
        }
    }

    #[test]
    fn cosine_schedule_decreases_to_its_floor(total in 1usize..500, lr0 in 1e-4f64..1.0, floor_frac in 0.0f64..1.0) {
        let lr_min = lr0 * floor_frac;
        let mut prev = f64::INFINITY;
        for t in 0..=total {
            let lr = train::cosine_lr(t, total, lr0, lr_min);
            prop_assert!(lr <= prev * (1.0 + 1e-12));
            prop_assert!(lr >= lr_min * (1.0 - 1e-12) && lr <= lr0 * (1.0 + 1e-12));
            prev = lr;
        }
        prop_assert_eq!(train::cosine_lr(0, total, lr0, lr_min), lr0);
        prop_assert_eq!(train::cosine_lr(total, total, lr0, lr_min), lr_min);
    }

    #[test]
    fn pairer_releases_each_frame_once_in_order(
        arrivals in prop::collection::vec((0u64..20, any::<bool>()), 1..60),
        single in any::<bool>(),
    ) {
        // Per-sensor indices never go back, as the pairer requires.
        let mut per_sensor: BTreeMap<bool, BTreeSet<u64>> = BTreeMap::new();
        for &(i, s) in &arrivals {
            per_sensor.entry(s).or_default().insert(i);
        }
        let mut messages: Vec<(u64, bool)> = per_sensor.iter().flat_map(|(&s, ix)| ix.iter().map(move |&i| (i, s))).collect();
        messages.sort();
        if single {
            messages.retain(|m| !m.1);
        }
        let mut pairer = Pairer::new(single, 0.25);
        let mut released = Vec::new();
        for (n, &(index, s)) in messages.iter().enumerate() {
            let msg = FrameMessage {
                index,
                timestamp: n as f64 * 0.01,
                sensor: if s { SensorId::B } else { SensorId::A },
                cloud: LabeledCloud::unlabeled(vec![[index as f64, 0.0, 0.0]]).unwrap(),
            };
            released.extend(pairer.push(msg).unwrap());
        }
        released.extend(pairer.finish());
        let indices: Vec<u64> = released.iter().map(|f| f.index).collect();
        prop_assert!(indices.windows(2).all(|w| w[0] < w[1]));
        let expected: BTreeSet<u64> = messages.iter().map(|m| m.0).collect();
        prop_assert_eq!(indices.iter().copied().collect::<BTreeSet<_>>(), expected);
        let parts: usize = released.iter().map(|f| f.parts.len()).sum();
        prop_assert_eq!(parts, messages.len());
    }

    #[test]
    fn decimation_and_resampling_are_seeded(c in cloud_strategy(400), seed: u64, budget in 1usize..600) {
        let policy = DecimationPolicy::default();
        let a = cloud::class_aware_decimate(&c, &policy, seed).unwrap();
        prop_assert_eq!(&a, &cloud::class_aware_decimate(&c, &policy, seed).unwrap());
        let counts = c.class_counts();
        let kept = a.class_counts();
        for class in SemanticClass::ALL {
            let i = class.id() as usize;
            prop_assert_eq!(kept[i], counts[i].div_ceil(policy.rate_for(class)));
        }
        let r = cloud::resample_to_budget(&a, budget, seed).unwrap();
        prop_assert_eq!(r.len(), budget);
        prop_assert_eq!(&r, &cloud::resample_to_budget(&a, budget, seed).unwrap());
    }

    #[test]
    fn voxel_downsampling_keeps_one_point_per_occupied_voxel(c in cloud_strategy(400), voxel in 0.05f64..2.0) {
        let out = cloud::voxel_downsample(&c, voxel).unwrap();
        let occupied: BTreeSet<_> = c.points().iter().map(|p| cloud::voxel_key(p, voxel)).collect();
        prop_assert_eq!(out.len(), occupied.len());
        // Every centroid lies in the box spanned by the input.
        for d in 0..3 {
            let lo = c.points().iter().map(|p| p[d]).fold(f64::INFINITY, f64::min);
            let hi = c.points().iter().map(|p| p[d]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out.points().iter().all(|p| p[d] >= lo - 1e-9 && p[d] <= hi + 1e-9));
        }
        prop_assert!(out.has_labels());
    }

    #[test]
    fn stage_latencies_add_up_to_the_frame_total(frames in 1usize..20, stages in 1usize..4) {
        let mut list: Vec<Stage<'_, usize>> = (0..stages)
            .map(|s| Stage::new(format!("s{s}"), move |f: &usize| {
                std::hint::black_box((0..(f + s) * 50).sum::<usize>());
            }))
            .collect();
        let inputs: Vec<usize> = (0..frames).collect();
        let report = eval::measure_latency(&mut list, &inputs).unwrap();
        prop_assert_eq!(report.end_to_end_ms.len(), frames);
        for f in 0..frames {
            let sum: f64 = report.samples_ms.iter().map(|(_, s)| s[f]).sum();
            prop_assert!((sum - report.end_to_end_ms[f]).abs() <= 1e-9 * report.end_to_end_ms[f].max(1.0));
        }
    }
}
