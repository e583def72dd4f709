//! End-to-end auto labeling of one sequence with per-stage timings.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extraction::{attach_ground_truth, extract_all, ObjectTrackData, DEFAULT_ALPHA};
use crate::geometry::Box3D;
use crate::io::{AutoLabelSet, SequenceDataset};
use crate::motion_state::{classify_motion, gt_motion_label, LinearMotionClassifier, MotionState, DEFAULT_MIN_MEASUREMENTS};
use crate::neural::RefinerModel;
use crate::par::Executor;
use crate::refiners::{assemble_labels, refine_object, Backend, BackendKind, ObjectRefinement, RefinerConfig};
use crate::tracking::{run_oracle_tracker, run_tracker, Track, TrackerParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionSource {
    Classifier,
    /// Ground-truth motion of the best-overlapping object.
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionConfig {
    pub min_measurements: usize,
    pub source: MotionSource,
    /// Overrides the classifier of the model file (or the built-in fit).
    pub classifier: Option<LinearMotionClassifier>,
}

impl Default for MotionConfig {
    fn default() -> Self {
        MotionConfig {
            min_measurements: DEFAULT_MIN_MEASUREMENTS,
            source: MotionSource::Classifier,
            classifier: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub tracker: TrackerParams,
    /// Assign detections to ground-truth ids instead of tracking.
    pub oracle_tracker: bool,
    pub motion: MotionConfig,
    /// Crop margin around tracked boxes, meters.
    pub alpha: f64,
    pub refiner: RefinerConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            tracker: TrackerParams::default(),
            oracle_tracker: false,
            motion: MotionConfig::default(),
            alpha: DEFAULT_ALPHA,
            refiner: RefinerConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.tracker.validate()?;
        self.refiner.validate()?;
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::invalid(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TimingReport {
    pub stages: Vec<StageTiming>,
    pub total_seconds: f64,
}

impl TimingReport {
    pub fn stage_sum(&self) -> f64 {
        self.stages.iter().map(|s| s.seconds).sum()
    }

    pub fn to_text(&self) -> String {
        let mut s: String = self.stages.iter().map(|t| format!("{:<12} {:>9.3}s\n", t.stage, t.seconds)).collect();
        s.push_str(&format!("{:<12} {:>9.3}s\n", "total", self.total_seconds));
        s
    }
}

/// Runs closures as named stages; the total spans the first stage's start
/// to the last stage's end, so the stages account for all of it.
struct Stopwatch {
    start: Instant,
    last: Instant,
    stages: Vec<StageTiming>,
}

impl Stopwatch {
    fn new() -> Self {
        let now = Instant::now();
        Stopwatch {
            start: now,
            last: now,
            stages: Vec::new(),
        }
    }

    fn stage<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let out = f().map_err(|e| Error::Stage {
            stage: name.to_string(),
            source: Box::new(e),
        });
        let now = Instant::now();
        self.stages.push(StageTiming {
            stage: name.to_string(),
            seconds: secs(now - self.last),
        });
        self.last = now;
        out
    }

    fn finish(self) -> TimingReport {
        TimingReport {
            total_seconds: secs(self.last - self.start),
            stages: self.stages,
        }
    }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub labels: AutoLabelSet,
    pub tracks: Vec<ObjectTrackData>,
    pub refinements: Vec<ObjectRefinement>,
    pub timings: TimingReport,
}

/// Ground-truth boxes of every object over the sequence, by id.
fn ground_truth_paths(ds: &SequenceDataset) -> BTreeMap<u64, Vec<(usize, Box3D)>> {
    let mut out: BTreeMap<u64, Vec<(usize, Box3D)>> = BTreeMap::new();
    for f in &ds.frames {
        for g in f.ground_truth.iter().flatten() {
            out.entry(g.object_id).or_default().push((f.index, g.box3d));
        }
    }
    out
}

/// Tracks confirmed at some point; single-hit tentative tracks are dropped.
pub fn track_sequence(ds: &SequenceDataset, cfg: &PipelineConfig) -> Result<Vec<Track>> {
    let tracks = if cfg.oracle_tracker {
        if !ds.has_ground_truth() {
            return Err(Error::invalid("the oracle tracker needs ground truth"));
        }
        run_oracle_tracker(ds, &cfg.tracker)?
    } else {
        run_tracker(ds, &cfg.tracker)?
    };
    Ok(tracks.into_iter().filter(|t| t.ever_confirmed).collect())
}

fn motion_states(ds: &SequenceDataset, tracks: &[Track], cfg: &PipelineConfig, clf: &LinearMotionClassifier) -> Result<Vec<MotionState>> {
    match cfg.motion.source {
        MotionSource::Classifier => Ok(tracks.iter().map(|t| classify_motion(t, clf, cfg.motion.min_measurements)).collect()),
        MotionSource::GroundTruth => {
            if !ds.has_ground_truth() {
                return Err(Error::invalid("ground-truth motion states need ground truth"));
            }
            let paths = ground_truth_paths(ds);
            let exec = Executor::sequential();
            let states = extract_all(ds, tracks, &vec![MotionState::Indeterminate; tracks.len()], 0.0, &exec)?
                .into_iter()
                .zip(tracks)
                .map(|(mut d, t)| {
                    if t.len() < cfg.motion.min_measurements {
                        return Ok(MotionState::Indeterminate);
                    }
                    match attach_ground_truth(&mut d, ds).and_then(|id| paths.get(&id)) {
                        Some(p) if p.len() >= 2 => gt_motion_label(p, ds.frequency),
                        _ => Ok(MotionState::Indeterminate),
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(states)
        }
    }
}

/// Tracking, motion states and extraction.
pub fn extract_sequence(ds: &SequenceDataset, cfg: &PipelineConfig, clf: &LinearMotionClassifier, exec: &Executor) -> Result<Vec<ObjectTrackData>> {
    let tracks = track_sequence(ds, cfg)?;
    let states = motion_states(ds, &tracks, cfg, clf)?;
    extract_all(ds, &tracks, &states, cfg.alpha, exec)
}

/// Extracted tracks with per-frame ground truth, frames lacking it dropped.
pub fn training_tracks(ds: &SequenceDataset, cfg: &PipelineConfig, clf: &LinearMotionClassifier, exec: &Executor) -> Result<Vec<ObjectTrackData>> {
    let mut out = Vec::new();
    for mut d in extract_sequence(ds, cfg, clf, exec)? {
        if d.motion_state == MotionState::Indeterminate || attach_ground_truth(&mut d, ds).is_none() {
            continue;
        }
        d.frames.retain(|f| f.ground_truth.is_some());
        if !d.is_empty() {
            out.push(d);
        }
    }
    Ok(out)
}

pub fn classifier_for(cfg: &PipelineConfig, model: Option<&RefinerModel>) -> LinearMotionClassifier {
    cfg.motion
        .classifier
        .or(model.map(|m| m.classifier))
        .unwrap_or_else(LinearMotionClassifier::fit_default)
}

/// Detections in, labels out. The neural backend needs `model`.
pub fn run_pipeline(ds: &SequenceDataset, cfg: &PipelineConfig, model: Option<&RefinerModel>, exec: &Executor) -> Result<PipelineOutput> {
    cfg.validate()?;
    let backend = match (cfg.refiner.backend, model) {
        (BackendKind::Geometric, _) => Backend::Geometric,
        (BackendKind::Neural, Some(m)) => Backend::Neural(m),
        (BackendKind::Neural, None) => return Err(Error::invalid("the neural backend needs a model file")),
    };
    let mut watch = Stopwatch::new();
    let clf = watch.stage("classifier", || Ok(classifier_for(cfg, model)))?;
    let tracks = watch.stage("tracking", || track_sequence(ds, cfg))?;
    let states = watch.stage("motion", || motion_states(ds, &tracks, cfg, &clf))?;
    let data = watch.stage("extraction", || extract_all(ds, &tracks, &states, cfg.alpha, exec))?;
    let refinements = watch.stage("refinement", || {
        exec.try_map(&data, |d| {
            refine_object(d, &cfg.refiner, &backend).map_err(|e| Error::Object {
                object_id: d.object_id,
                source: Box::new(e),
            })
        })
    })?;
    let labels = watch.stage("assembly", || assemble_labels(&ds.sequence_id, ds.frames.len(), &refinements))?;
    Ok(PipelineOutput {
        labels,
        tracks: data,
        refinements,
        timings: watch.finish(),
    })
}
