use std::f64::consts::PI;

use autolabel_core::codec::{box_loss, decode_local, encode_box, weighted_box_fusion, BoxTargets, LossWeights, WbfParams};
use autolabel_core::evaluation::{average_precision, mot_counts, GtObject, IouMode};
use autolabel_core::geometry::{
    bev_iou, box_from_frame, box_to_frame, cyclic_mean, from_box_frame, iou_3d, normalize_angle, to_box_frame, Box3D, ObjectClass,
    PointCloud, SensorPose,
};
use autolabel_core::motion_state::{classify_motion, LinearMotionClassifier, MotionState};
use autolabel_core::tracking::{assignment_cost, hungarian, Track};
use proptest::prelude::*;

fn class() -> impl Strategy<Value = ObjectClass> {
    prop_oneof![Just(ObjectClass::Vehicle), Just(ObjectClass::Pedestrian)]
}

fn any_box() -> impl Strategy<Value = Box3D> {
    (
        (-30.0..30.0f64, -30.0..30.0f64, -2.0..2.0f64),
        (0.3..12.0f64, 0.3..4.0f64, 0.3..4.0f64),
        -PI..PI,
        0.0..=1.0f64,
        class(),
    )
        .prop_map(|((x, y, z), (l, w, h), heading, score, class)| Box3D::new([x, y, z], [l, w, h], heading, score, class))
}

/// A second box near the first so that overlaps are common.
fn box_pair() -> impl Strategy<Value = (Box3D, Box3D)> {
    (any_box(), (-2.0..2.0f64, -2.0..2.0f64, -0.5..0.5f64), (0.5..1.5f64, 0.5..1.5f64), -PI..PI).prop_map(|(a, d, (sl, sw), h)| {
        let b = Box3D::new(
            [a.cx + d.0, a.cy + d.1, a.cz + d.2],
            [a.length * sl, a.width * sw, a.height],
            h,
            0.5,
            a.class,
        );
        (a, b)
    })
}

fn pose() -> impl Strategy<Value = SensorPose> {
    (-PI..PI, -100.0..100.0f64, -100.0..100.0f64).prop_map(|(yaw, x, y)| SensorPose::from_yaw(yaw, [x, y, 0.0]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn iou_is_symmetric_bounded_and_reflexive((a, b) in box_pair()) {
        for f in [bev_iou, iou_3d] {
            let (ab, ba) = (f(&a, &b), f(&b, &a));
            prop_assert!((ab - ba).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((f(&a, &a) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn bev_iou_is_invariant_to_rigid_motion((a, b) in box_pair(), p in pose()) {
        let moved = bev_iou(&p.apply_box(&a), &p.apply_box(&b));
        prop_assert!((moved - bev_iou(&a, &b)).abs() < 1e-9);
    }

    #[test]
    fn cyclic_mean_ignores_full_turns(angles in prop::collection::vec(-PI..PI, 1..8), turns in prop::collection::vec(-3i32..=3, 8)) {
        let weights = vec![1.0; angles.len()];
        let base = cyclic_mean(&angles, &weights).unwrap();
        let shifted: Vec<f64> = angles.iter().zip(&turns).map(|(a, k)| a + 2.0 * PI * *k as f64).collect();
        let moved = cyclic_mean(&shifted, &weights).unwrap();
        prop_assert_eq!(base.ambiguous, moved.ambiguous);
        prop_assert!(normalize_angle(base.angle - moved.angle).abs() < 1e-9);
    }

    #[test]
    fn box_frame_round_trip((a, r) in box_pair(), pts in prop::collection::vec((-20.0..20.0f64, -20.0..20.0f64, -3.0..3.0f64), 0..20)) {
        let back = box_from_frame(&box_to_frame(&a, &r), &r);
        prop_assert!((back.center() - a.center()).norm() < 1e-9);
        prop_assert!(normalize_angle(back.heading - a.heading).abs() < 1e-9);
        let cloud = PointCloud::from_xyz(pts.iter().map(|p| [p.0, p.1, p.2]));
        let round = from_box_frame(&to_box_frame(&cloud, &r).unwrap(), &r).unwrap();
        for (x, y) in cloud.data().iter().zip(round.data()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn codec_round_trip(b in any_box()) {
        let local = Box3D { score: 1.0, ..b };
        let d = decode_local(&encode_box(&local, b.class), b.class, 1.0);
        prop_assert!((d.center() - local.center()).norm() < 1e-9);
        for (x, y) in d.size().iter().zip(local.size()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
        prop_assert!(normalize_angle(d.heading - local.heading).abs() < 1e-9);
    }

    #[test]
    fn box_loss_is_non_negative(b in any_box(), raw in prop::collection::vec(-3.0..3.0f64, BoxTargets::flat_len(3))) {
        let k = autolabel_core::codec::SizeClusters::for_class(b.class).len();
        let pred = BoxTargets::from_flat(&raw[..BoxTargets::flat_len(k)], k).unwrap();
        let (loss, _) = box_loss(&pred, &b, &LossWeights::default()).unwrap();
        prop_assert!(loss.total >= 0.0 && loss.total.is_finite());
    }

    #[test]
    fn wbf_shrinks_and_respects_floor(boxes in prop::collection::vec(any_box(), 0..12)) {
        let p = WbfParams::for_class(ObjectClass::Vehicle);
        let fused = weighted_box_fusion(&boxes, &p);
        prop_assert!(fused.len() <= boxes.len());
        prop_assert!(fused.iter().all(|f| f.score >= p.score_floor));
    }

    #[test]
    fn wbf_of_copies_is_the_box(b in any_box(), n in 1usize..10) {
        let b = b.with_score(0.8);
        let fused = weighted_box_fusion(&vec![b; n], &WbfParams::for_class(b.class));
        prop_assert_eq!(fused.len(), 1);
        prop_assert!((fused[0].center() - b.center()).norm() < 1e-9);
        prop_assert!(normalize_angle(fused[0].heading - b.heading).abs() < 1e-9);
        prop_assert!((fused[0].length - b.length).abs() < 1e-9);
    }

    #[test]
    fn motion_class_is_invariant_to_world_motion(
        start in (-50.0..50.0f64, -50.0..50.0f64),
        v in (-5.0..5.0f64, -5.0..5.0f64),
        n in 3usize..40,
        p in pose(),
    ) {
        let boxes: Vec<(usize, f64, Box3D)> = (0..n)
            .map(|k| {
                let t = k as f64 * 0.1;
                (k, t, Box3D::new([start.0 + v.0 * t, start.1 + v.1 * t, 0.8], [4.8, 1.8, 1.5], 0.0, 0.9, ObjectClass::Vehicle))
            })
            .collect();
        let moved: Vec<_> = boxes.iter().map(|&(k, t, b)| (k, t, p.apply_box(&b))).collect();
        let clf = LinearMotionClassifier::fit_default();
        let a = classify_motion(&Track::from_boxes(1, ObjectClass::Vehicle, &boxes).unwrap(), &clf, 7);
        let b = classify_motion(&Track::from_boxes(1, ObjectClass::Vehicle, &moved).unwrap(), &clf, 7);
        prop_assert_eq!(a, b);
        if n < 7 {
            prop_assert_eq!(a, MotionState::Indeterminate);
        }
    }

    #[test]
    fn hungarian_beats_every_permutation(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let cost: Vec<Vec<f64>> = (0..rows).map(|_| (0..cols).map(|_| rng.random::<f64>()).collect()).collect();
        let pairs = hungarian(&cost);
        prop_assert_eq!(pairs.len(), rows.min(cols));
        let best = brute_force(&cost);
        prop_assert!((assignment_cost(&cost, &pairs) - best).abs() < 1e-9);
    }

    #[test]
    fn ap_is_invariant_to_monotone_scores(
        gts in prop::collection::vec(any_box(), 1..5),
        preds in prop::collection::vec(any_box(), 0..7),
    ) {
        let g = vec![gt_objects(&gts)];
        let p: Vec<Box3D> = preds
            .iter()
            .zip(gts.iter().cycle())
            .enumerate()
            .map(|(i, (p, g))| if i % 2 == 0 { Box3D { cx: g.cx + 0.1, class: ObjectClass::Vehicle, ..*g }.with_score(p.score) } else { Box3D { class: ObjectClass::Vehicle, ..*p } })
            .collect();
        let squashed: Vec<Box3D> = p.iter().map(|b| b.with_score(b.score.powi(3) * 0.5)).collect();
        let a = average_precision(&[p], &g, ObjectClass::Vehicle, 0.5, IouMode::Bev).unwrap();
        let b = average_precision(&[squashed], &g, ObjectClass::Vehicle, 0.5, IouMode::Bev).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn ap_of_ground_truth_is_one(gts in prop::collection::vec(any_box(), 1..6), tau in 0.1..0.99f64) {
        let gts: Vec<Box3D> = gts.iter().enumerate().map(|(i, b)| Box3D { cx: 40.0 * i as f64, class: ObjectClass::Vehicle, ..*b }).collect();
        let ap = average_precision(&[gts.clone()], &[gt_objects(&gts)], ObjectClass::Vehicle, tau, IouMode::ThreeD).unwrap();
        prop_assert_eq!(ap, Some(1.0));
    }

    #[test]
    fn false_positives_only_lower_mota(n_fp in 1usize..5, noise in 0.0..0.5f64) {
        let gt: Vec<Vec<(u64, Box3D)>> = (0..10)
            .map(|f| (0..3).map(|i| (i as u64, Box3D::new([15.0 * i as f64, f as f64, 0.8], [4.8, 1.8, 1.5], 0.0, 1.0, ObjectClass::Vehicle))).collect())
            .collect();
        let pred: Vec<Vec<(u64, Box3D)>> = gt.iter().map(|f| f.iter().map(|(i, b)| (*i + 100, Box3D { cx: b.cx + noise, ..*b })).collect()).collect();
        let base = mot_counts(&pred, &gt, 0.5).mota().unwrap();
        let mut more = pred.clone();
        for f in more.iter_mut() {
            for k in 0..n_fp {
                f.push((500 + k as u64, Box3D::new([-200.0 - 10.0 * k as f64, 0.0, 0.8], [4.8, 1.8, 1.5], 0.0, 1.0, ObjectClass::Vehicle)));
            }
        }
        let worse = mot_counts(&more, &gt, 0.5).mota().unwrap();
        prop_assert!(base <= 100.0);
        prop_assert!(worse < base);
    }
}

fn gt_objects(boxes: &[Box3D]) -> Vec<GtObject> {
    boxes
        .iter()
        .enumerate()
        .map(|(i, b)| GtObject {
            object_id: i as u64,
            box3d: Box3D { class: ObjectClass::Vehicle, ..*b },
            distance: b.cx.hypot(b.cy),
            points: 10,
        })
        .collect()
}

fn brute_force(cost: &[Vec<f64>]) -> f64 {
    fn go(cost: &[Vec<f64>], r: usize, used: &mut Vec<bool>, left: usize) -> f64 {
        if left == 0 || r == cost.len() {
            return if left == 0 { 0.0 } else { f64::INFINITY };
        }
        let mut best = if cost.len() - r > left { go(cost, r + 1, used, left) } else { f64::INFINITY };
        for c in 0..used.len() {
            if !used[c] {
                used[c] = true;
                best = best.min(cost[r][c] + go(cost, r + 1, used, left - 1));
                used[c] = false;
            }
        }
        best
    }
    let cols = cost[0].len();
    go(cost, 0, &mut vec![false; cols], cost.len().min(cols))
}
