use autolabel_core::error::Error;
use autolabel_core::extraction::{load_track_data, save_track_data};
use autolabel_core::geometry::{Box3D, ObjectClass};
use autolabel_core::io::{load_labels, load_sequence, save_labels, save_sequence, AutoLabelSet, Label, PointStorage, SequenceDataset};
use autolabel_core::motion_state::MotionState;
use autolabel_core::par::Executor;
use autolabel_core::pipeline::{classifier_for, extract_sequence, run_pipeline, PipelineConfig};
use autolabel_core::synth::{generate_scene, perturb_detections, NoiseConfig, SceneConfig};
use proptest::prelude::*;

fn scene() -> SequenceDataset {
    let ds = generate_scene(&SceneConfig {
        seed: 3,
        n_frames: 20,
        clutter_points: 50,
        ..SceneConfig::default()
    })
    .unwrap();
    perturb_detections(&ds, &NoiseConfig::default(), 3).unwrap()
}

#[test]
fn sequence_round_trips_bit_exact_in_both_storages() {
    let dir = tempfile::tempdir().unwrap();
    let ds = scene();
    for (name, storage) in [("inline.jsonl", PointStorage::Inline), ("blob.jsonl", PointStorage::Blob)] {
        let path = dir.path().join(name);
        save_sequence(&ds, &path, storage).unwrap();
        assert_eq!(load_sequence(&path).unwrap(), ds, "{name}");
    }
    assert!(dir.path().join("blob.jsonl.bin").exists());
    assert!(!dir.path().join("inline.jsonl.bin").exists());
}

#[test]
fn missing_blob_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("seq.jsonl");
    save_sequence(&scene(), &path, PointStorage::Blob).unwrap();
    std::fs::remove_file(dir.path().join("seq.jsonl.bin")).unwrap();
    assert!(matches!(load_sequence(&path), Err(Error::Io { .. })));
}

#[test]
fn wrong_version_is_a_header_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("seq.jsonl");
    save_sequence(&scene(), &path, PointStorage::Inline).unwrap();
    let text = std::fs::read_to_string(&path).unwrap().replacen("\"version\":1", "\"version\":99", 1);
    std::fs::write(&path, text).unwrap();
    assert!(matches!(load_sequence(&path), Err(Error::Parse { line: 1, .. })));
}

#[test]
fn bad_frame_line_reports_its_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("seq.jsonl");
    save_sequence(&scene(), &path, PointStorage::Inline).unwrap();
    let mut lines: Vec<String> = std::fs::read_to_string(&path).unwrap().lines().map(String::from).collect();
    let half = lines[5].len() / 2;
    lines[5].truncate(half);
    std::fs::write(&path, lines.join("\n")).unwrap();
    match load_sequence(&path) {
        Err(Error::Parse { line: 6, column, .. }) => assert!(column > 0),
        other => panic!("expected a parse error on line 6, got {other:?}"),
    }
}

#[test]
fn pipeline_labels_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("labels.jsonl");
    let ds = scene();
    let out = run_pipeline(&ds, &PipelineConfig::default(), None, &Executor::sequential()).unwrap();
    assert!(!out.labels.is_empty());
    save_labels(&out.labels, &path).unwrap();
    assert_eq!(load_labels(&path).unwrap(), out.labels);
}

#[test]
fn track_data_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tracks.jsonl");
    let ds = scene();
    let cfg = PipelineConfig::default();
    let data = extract_sequence(&ds, &cfg, &classifier_for(&cfg, None), &Executor::sequential()).unwrap();
    assert!(!data.is_empty());
    save_track_data(&data, &path).unwrap();
    assert_eq!(load_track_data(&path).unwrap(), data);
}

fn label() -> impl Strategy<Value = Label> {
    (
        0u64..1000,
        prop_oneof![Just(MotionState::Static), Just(MotionState::Dynamic), Just(MotionState::Indeterminate)],
        prop::array::uniform3(-1e3..1e3f64),
        prop::array::uniform3(0.1..20.0f64),
        -3.14..3.14f64,
        0.0..=1.0f64,
        prop_oneof![Just(ObjectClass::Vehicle), Just(ObjectClass::Pedestrian)],
    )
        .prop_map(|(object_id, motion_state, c, s, h, score, class)| Label {
            object_id,
            motion_state,
            box3d: Box3D::new(c, s, h, score, class),
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn arbitrary_labels_round_trip(frames in prop::collection::vec(prop::collection::vec(label(), 0..6), 0..5)) {
        let mut set = AutoLabelSet::new("prop", frames.len());
        for (i, f) in frames.iter().enumerate() {
            for l in f {
                // Duplicate ids within a frame are rejected; keep the first.
                let _ = set.insert(i, *l);
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.jsonl");
        save_labels(&set, &path).unwrap();
        let mut back = load_labels(&path).unwrap();
        back.sort();
        set.sort();
        prop_assert_eq!(back, set);
    }
}
