//! Variant sweeps over a set of sequences: keyframe strategy, static
//! context, causal windows, oracle tracking and ground-truth motion states.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{
    assign_pairs, box_accuracy, ground_truth_objects, label_boxes, mot_counts, GtObject, IouMode, MotCounts, DEFAULT_MOT_THRESHOLD,
};
use crate::geometry::Box3D;
use crate::io::SequenceDataset;
use crate::motion_state::{gt_motion_label, MotionState};
use crate::neural::RefinerModel;
use crate::par::Executor;
use crate::pipeline::{run_pipeline, MotionSource, PipelineConfig};
use crate::refiners::{KeyframeStrategy, StaticContext};

pub const ACCURACY_THRESHOLD: f64 = 0.7;

/// Ground-truth motion state of every object of a sequence.
pub fn ground_truth_motion(ds: &SequenceDataset) -> Result<HashMap<u64, MotionState>> {
    let mut paths: BTreeMap<u64, Vec<(usize, Box3D)>> = BTreeMap::new();
    for f in &ds.frames {
        for g in f.ground_truth.iter().flatten() {
            paths.entry(g.object_id).or_default().push((f.index, g.box3d));
        }
    }
    paths
        .into_iter()
        .map(|(id, p)| {
            let s = if p.len() < 2 { MotionState::Static } else { gt_motion_label(&p, ds.frequency)? };
            Ok((id, s))
        })
        .collect()
}

/// World-frame detections above `score_floor`, per frame.
pub fn raw_detections(ds: &SequenceDataset, score_floor: f64) -> Vec<Vec<Box3D>> {
    ds.frames
        .iter()
        .map(|f| {
            f.detections
                .iter()
                .filter(|d| d.score >= score_floor)
                .map(|d| f.pose.apply_box(d))
                .collect()
        })
        .collect()
}

/// Pairs of predictions and ground truth split by ground-truth motion.
#[derive(Debug, Clone, Default)]
pub struct SplitPairs {
    pub static_pairs: Vec<(Box3D, GtObject)>,
    pub dynamic_pairs: Vec<(Box3D, GtObject)>,
}

impl SplitPairs {
    pub fn extend(&mut self, o: SplitPairs) {
        self.static_pairs.extend(o.static_pairs);
        self.dynamic_pairs.extend(o.dynamic_pairs);
    }

    pub fn static_accuracy(&self, tau: f64) -> Option<f64> {
        box_accuracy(&self.static_pairs, tau, IouMode::ThreeD)
    }

    pub fn dynamic_accuracy(&self, tau: f64) -> Option<f64> {
        box_accuracy(&self.dynamic_pairs, tau, IouMode::ThreeD)
    }
}

pub fn split_pairs(preds: &[Vec<Box3D>], ds: &SequenceDataset) -> Result<SplitPairs> {
    let motion = ground_truth_motion(ds)?;
    let gts = ground_truth_objects(ds);
    let mut out = SplitPairs::default();
    for (p, g) in assign_pairs(preds, &gts, 0.0) {
        match motion.get(&g.object_id) {
            Some(MotionState::Dynamic) => out.dynamic_pairs.push((p, g)),
            _ => out.static_pairs.push((p, g)),
        }
    }
    Ok(out)
}

fn gt_tracks(ds: &SequenceDataset) -> Vec<Vec<(u64, Box3D)>> {
    ds.frames
        .iter()
        .map(|f| f.ground_truth.iter().flatten().map(|g| (g.object_id, g.box3d)).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub name: String,
    pub static_accuracy: Option<f64>,
    pub dynamic_accuracy: Option<f64>,
    pub static_pairs: usize,
    pub dynamic_pairs: usize,
    pub mota: Option<f64>,
    pub motp: Option<f64>,
}

/// Runs the pipeline on every sequence and scores the labels: accuracy by
/// ground-truth motion and CLEAR-MOT over the label track ids.
pub fn evaluate_variant(name: &str, datasets: &[SequenceDataset], cfg: &PipelineConfig, model: Option<&RefinerModel>, exec: &Executor) -> Result<VariantResult> {
    let mut pairs = SplitPairs::default();
    let mut mot = MotCounts::default();
    for ds in datasets {
        let out = run_pipeline(ds, cfg, model, exec)?;
        let tracked = label_boxes(&out.labels);
        let preds: Vec<Vec<Box3D>> = tracked.iter().map(|f| f.iter().map(|(_, b)| *b).collect()).collect();
        pairs.extend(split_pairs(&preds, ds)?);
        mot.add(&mot_counts(&tracked, &gt_tracks(ds), DEFAULT_MOT_THRESHOLD));
    }
    Ok(VariantResult {
        name: name.to_string(),
        static_accuracy: pairs.static_accuracy(ACCURACY_THRESHOLD),
        dynamic_accuracy: pairs.dynamic_accuracy(ACCURACY_THRESHOLD),
        static_pairs: pairs.static_pairs.len(),
        dynamic_pairs: pairs.dynamic_pairs.len(),
        mota: mot.mota().ok(),
        motp: (mot.ground_truth > 0).then(|| mot.motp()),
    })
}

/// Accuracy of unrefined detections on the same sequences.
pub fn evaluate_raw(datasets: &[SequenceDataset], score_floor: f64) -> Result<VariantResult> {
    let mut pairs = SplitPairs::default();
    for ds in datasets {
        pairs.extend(split_pairs(&raw_detections(ds, score_floor), ds)?);
    }
    Ok(VariantResult {
        name: "detections".into(),
        static_accuracy: pairs.static_accuracy(ACCURACY_THRESHOLD),
        dynamic_accuracy: pairs.dynamic_accuracy(ACCURACY_THRESHOLD),
        static_pairs: pairs.static_pairs.len(),
        dynamic_pairs: pairs.dynamic_pairs.len(),
        mota: None,
        motp: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    Keyframe,
    Context,
    Causal,
    Tracker,
    MotionState,
}

impl std::str::FromStr for Sweep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "keyframe" => Ok(Sweep::Keyframe),
            "context" => Ok(Sweep::Context),
            "causal" => Ok(Sweep::Causal),
            "tracker" => Ok(Sweep::Tracker),
            "motion" | "motion_state" => Ok(Sweep::MotionState),
            _ => Err(Error::invalid(format!("unknown sweep '{s}'"))),
        }
    }
}

/// Named configurations of one sweep, derived from `base`.
pub fn sweep_variants(sweep: Sweep, base: &PipelineConfig) -> Vec<(String, PipelineConfig)> {
    let with = |f: &dyn Fn(&mut PipelineConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match sweep {
        Sweep::Keyframe => vec![
            ("highest".into(), with(&|c| c.refiner.keyframe = KeyframeStrategy::HighestScore)),
            ("average".into(), with(&|c| c.refiner.keyframe = KeyframeStrategy::Average)),
            (
                "random".into(),
                with(&|c| c.refiner.keyframe = KeyframeStrategy::Random { seed: c.refiner.seed }),
            ),
        ],
        Sweep::Context => vec![
            ("all".into(), with(&|c| c.refiner.context = StaticContext::All)),
            ("window2".into(), with(&|c| c.refiner.context = StaticContext::Window(2))),
            ("single".into(), with(&|c| c.refiner.context = StaticContext::Window(0))),
            ("causal".into(), with(&|c| c.refiner.causal = true)),
        ],
        Sweep::Causal => vec![
            ("non_causal".into(), with(&|c| c.refiner.causal = false)),
            ("causal".into(), with(&|c| c.refiner.causal = true)),
        ],
        Sweep::Tracker => vec![
            ("kalman".into(), with(&|c| c.oracle_tracker = false)),
            ("oracle".into(), with(&|c| c.oracle_tracker = true)),
        ],
        Sweep::MotionState => vec![
            ("classifier".into(), with(&|c| c.motion.source = MotionSource::Classifier)),
            ("ground_truth".into(), with(&|c| c.motion.source = MotionSource::GroundTruth)),
        ],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub sweep: Sweep,
    pub rows: Vec<VariantResult>,
}

pub fn run_ablation(
    sweep: Sweep,
    datasets: &[SequenceDataset],
    base: &PipelineConfig,
    model: Option<&RefinerModel>,
    exec: &Executor,
) -> Result<AblationTable> {
    let rows = sweep_variants(sweep, base)
        .iter()
        .map(|(name, cfg)| evaluate_variant(name, datasets, cfg, model, exec))
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable { sweep, rows })
}

fn cell(v: Option<f64>, scale: f64) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", scale * x))
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&VariantResult> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<14} {:>10} {:>10} {:>8} {:>8}\n", "variant", "static@0.7", "dynamic@0.7", "MOTA", "MOTP");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<14} {:>10} {:>10} {:>8} {:>8}",
                r.name,
                cell(r.static_accuracy, 100.0),
                cell(r.dynamic_accuracy, 100.0),
                cell(r.mota, 1.0),
                cell(r.motp, 1.0)
            );
        }
        s
    }
}
