use std::collections::HashSet;

use autolabel_core::ablation::{evaluate_raw, ground_truth_motion, split_pairs};
use autolabel_core::evaluation::{box_accuracy, ground_truth_objects, label_boxes, mota_motp, assign_pairs, IouMode};
use autolabel_core::extraction::{crop_points, extract_all};
use autolabel_core::geometry::{bev_iou, normalize_angle, transform_points, Box3D, SensorPose};
use autolabel_core::io::{to_world, SequenceDataset};
use autolabel_core::motion_state::{gt_motion_label, MotionState};
use autolabel_core::par::Executor;
use autolabel_core::pipeline::{classifier_for, extract_sequence, run_pipeline, track_sequence, PipelineConfig};
use autolabel_core::refiners::{refine_static, Backend, RefinerConfig};
use autolabel_core::synth::{generate_scene, perturb_detections, plan_objects, NoiseConfig, SceneConfig};
use proptest::prelude::*;

fn scene(seed: u64) -> SequenceDataset {
    generate_scene(&SceneConfig {
        seed,
        ..SceneConfig::default()
    })
    .unwrap()
}

fn noisy(seed: u64) -> SequenceDataset {
    let noise = NoiseConfig {
        center_sigma: 0.3,
        size_sigma: 0.1,
        heading_sigma: 0.05,
        false_positive_rate: 0.5,
        false_negative_probability: 0.05,
        ..NoiseConfig::default()
    };
    perturb_detections(&scene(seed), &noise, seed).unwrap()
}

fn gt_tracks(ds: &SequenceDataset) -> Vec<Vec<(u64, Box3D)>> {
    ds.frames
        .iter()
        .map(|f| f.ground_truth.iter().flatten().map(|g| (g.object_id, g.box3d)).collect())
        .collect()
}

#[test]
fn zero_noise_scene_is_labelled_exactly() {
    let ds = scene(11);
    let out = run_pipeline(&ds, &PipelineConfig::default(), None, &Executor::parallel(2)).unwrap();
    out.labels.validate().unwrap();
    let tracked = label_boxes(&out.labels);
    let preds: Vec<Vec<Box3D>> = tracked.iter().map(|f| f.iter().map(|(_, b)| *b).collect()).collect();
    let pairs = assign_pairs(&preds, &ground_truth_objects(&ds), 0.0);
    let gt_count: usize = ds.frames.iter().map(|f| f.ground_truth.as_ref().map_or(0, Vec::len)).sum();
    assert_eq!(pairs.len(), gt_count);
    assert_eq!(box_accuracy(&pairs, 0.7, IouMode::ThreeD), Some(1.0));
    let (mota, motp) = mota_motp(&tracked, &gt_tracks(&ds), 0.5).unwrap();
    assert_eq!(mota, 100.0);
    assert!(motp <= 1.0, "MOTP {motp}");
}

#[test]
fn stage_timings_account_for_the_total() {
    let ds = noisy(3);
    let out = run_pipeline(&ds, &PipelineConfig::default(), None, &Executor::sequential()).unwrap();
    let t = &out.timings;
    let names: Vec<&str> = t.stages.iter().map(|s| s.stage.as_str()).collect();
    assert_eq!(names, ["classifier", "tracking", "motion", "extraction", "refinement", "assembly"]);
    assert!(t.total_seconds > 0.0);
    assert!((t.stage_sum() - t.total_seconds).abs() <= 0.05 * t.total_seconds);
}

#[test]
fn pipeline_is_deterministic_across_worker_counts() {
    let ds = noisy(4);
    let cfg = PipelineConfig::default();
    let a = run_pipeline(&ds, &cfg, None, &Executor::sequential()).unwrap();
    let b = run_pipeline(&ds, &cfg, None, &Executor::parallel(3)).unwrap();
    assert_eq!(a.labels, b.labels);
    assert_eq!(a.refinements, b.refinements);
}

#[test]
fn empty_detections_give_empty_labels() {
    let mut ds = scene(5);
    for f in &mut ds.frames {
        f.detections.clear();
    }
    let out = run_pipeline(&ds, &PipelineConfig::default(), None, &Executor::sequential()).unwrap();
    assert!(out.labels.is_empty());
    assert_eq!(out.labels.frames.len(), ds.frames.len());
}

#[test]
fn neural_backend_without_model_is_rejected() {
    let mut cfg = PipelineConfig::default();
    cfg.refiner.backend = autolabel_core::refiners::BackendKind::Neural;
    assert!(run_pipeline(&scene(1), &cfg, None, &Executor::sequential()).is_err());
}

#[test]
fn tracks_are_well_formed_on_noisy_input() {
    let ds = noisy(6);
    let tracks = track_sequence(&ds, &PipelineConfig::default()).unwrap();
    let mut used: Vec<HashSet<[u64; 3]>> = vec![HashSet::new(); ds.frames.len()];
    for t in &tracks {
        assert!(!t.entries.is_empty());
        assert!(t.entries.windows(2).all(|w| w[0].frame < w[1].frame));
        for e in &t.entries {
            let key = [e.detection.cx.to_bits(), e.detection.cy.to_bits(), e.detection.heading.to_bits()];
            assert!(used[e.frame].insert(key), "detection reused in frame {}", e.frame);
        }
    }
}

#[test]
fn to_world_preserves_pairwise_iou() {
    let ds = noisy(7);
    for f in ds.frames.iter().step_by(10) {
        let (_, world) = to_world(f);
        for i in 0..world.len() {
            for j in 0..world.len() {
                let a = bev_iou(&f.detections[i], &f.detections[j]);
                assert!((a - bev_iou(&world[i], &world[j])).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn extraction_is_deterministic_and_bounded() {
    let ds = scene(8);
    let cfg = PipelineConfig::default();
    let clf = classifier_for(&cfg, None);
    let a = extract_sequence(&ds, &cfg, &clf, &Executor::sequential()).unwrap();
    let b = extract_sequence(&ds, &cfg, &clf, &Executor::parallel(2)).unwrap();
    assert_eq!(a, b);
    let plans = plan_objects(&SceneConfig { seed: 8, ..SceneConfig::default() }).unwrap();
    for d in &a {
        for f in &d.frames {
            let cropped = crop_points(&f.points, &f.box3d, cfg.alpha);
            assert_eq!(cropped.len(), f.points.len());
        }
        if d.motion_state != MotionState::Static {
            continue;
        }
        // Static clouds stay inside the true box grown by α and the jitter.
        let gt = plans.iter().map(|p| p.box_at(0.0)).max_by(|x, y| bev_iou(x, &d.frames[0].box3d).total_cmp(&bev_iou(y, &d.frames[0].box3d))).unwrap();
        for f in &d.frames {
            for i in 0..f.points.len() {
                assert!(gt.contains(&f.points.xyz(i), cfg.alpha + 0.05 + 1e-9));
            }
        }
    }
}

#[test]
fn static_refinement_repeats_bit_for_bit() {
    let ds = noisy(9);
    let cfg = PipelineConfig::default();
    let data = extract_sequence(&ds, &cfg, &classifier_for(&cfg, None), &Executor::sequential()).unwrap();
    let rc = RefinerConfig { tta: true, ..RefinerConfig::default() };
    for d in data.iter().filter(|d| d.motion_state == MotionState::Static) {
        let a = refine_static(d, &rc, &Backend::Geometric).unwrap();
        let b = refine_static(d, &rc, &Backend::Geometric).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn refinement_beats_raw_detections_on_noisy_scenes() {
    let sets: Vec<SequenceDataset> = (20..23).map(noisy).collect();
    let raw = evaluate_raw(&sets, 0.0).unwrap();
    let mut refined = autolabel_core::ablation::SplitPairs::default();
    for ds in &sets {
        let out = run_pipeline(ds, &PipelineConfig::default(), None, &Executor::sequential()).unwrap();
        let preds: Vec<Vec<Box3D>> = label_boxes(&out.labels).iter().map(|f| f.iter().map(|(_, b)| *b).collect()).collect();
        refined.extend(split_pairs(&preds, ds).unwrap());
    }
    assert!(refined.static_accuracy(0.7).unwrap() > raw.static_accuracy.unwrap());
    assert!(refined.dynamic_accuracy(0.7).unwrap() > raw.dynamic_accuracy.unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn generator_motion_labels_match_plans(seed in any::<u64>()) {
        let cfg = SceneConfig { seed, n_frames: 30, ..SceneConfig::default() };
        let ds = generate_scene(&cfg).unwrap();
        let states = ground_truth_motion(&ds).unwrap();
        for p in plan_objects(&cfg).unwrap() {
            let path: Vec<(usize, Box3D)> = (0..cfg.n_frames).map(|k| (k, p.box_at(k as f64 / cfg.frequency))).collect();
            let expect = if p.dynamic && p.speed > 1.0 { MotionState::Dynamic } else { MotionState::Static };
            if !p.dynamic || p.speed > 1.0 {
                prop_assert_eq!(gt_motion_label(&path, cfg.frequency).unwrap(), expect);
            }
            if let Some(s) = states.get(&p.object_id) {
                if !p.dynamic {
                    prop_assert_eq!(*s, MotionState::Static);
                }
            }
        }
    }

    #[test]
    fn geometric_static_refinement_is_yaw_equivariant(seed in 0u64..1000, yaw in -3.0..3.0f64) {
        let ds = noisy(seed);
        let cfg = PipelineConfig::default();
        let tracks = track_sequence(&ds, &cfg).unwrap();
        let states = vec![MotionState::Static; tracks.len()];
        let data = extract_all(&ds, &tracks, &states, cfg.alpha, &Executor::sequential()).unwrap();
        let rot = SensorPose::from_yaw(yaw, [0.0, 0.0, 0.0]);
        for d in data.iter().take(3) {
            let mut turned = d.clone();
            for f in &mut turned.frames {
                f.points = transform_points(&f.points, &rot).unwrap();
                f.box3d = rot.apply_box(&f.box3d);
            }
            let rc = RefinerConfig::default();
            let a = rot.apply_box(&refine_static(d, &rc, &Backend::Geometric).unwrap().box3d);
            let b = refine_static(&turned, &rc, &Backend::Geometric).unwrap().box3d;
            prop_assert!((a.center() - b.center()).norm() < 1e-6);
            prop_assert!(normalize_angle(a.heading - b.heading).abs() < 1e-6);
            prop_assert!((a.length - b.length).abs() < 1e-6 && (a.width - b.width).abs() < 1e-6);
        }
    }
}
