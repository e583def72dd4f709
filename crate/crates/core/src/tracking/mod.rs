//! Tracking-by-detection in the world frame.
//!
//! Detections below the score floor are discarded, the rest are transformed
//! to the world frame and associated to predicted tracks by a min-cost
//! assignment on `1 − BEV IoU`. Matched tracks get a Kalman update with the
//! heading flip rule, unmatched detections start new tracks and unmatched
//! tracks age until they die.

mod assignment;
mod kalman;

pub use assignment::{assignment_cost, hungarian};
pub use kalman::{
    kalman_predict, kalman_update, repair_covariance, MeasurementNoise, ProcessNoise, StateCovariance, StateVector,
    TrackState, MEAS_DIM, STATE_DIM,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{bev_iou, Box3D, ObjectClass};
use crate::io::SequenceDataset;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerParams {
    pub score_floor: f64,
    pub iou_floor: f64,
    /// Consecutive misses after which a track dies.
    pub max_misses: usize,
    /// Hits after which a tentative track is confirmed.
    pub confirm_hits: usize,
    pub process_noise: ProcessNoise,
    pub measurement_noise: MeasurementNoise,
    pub initial_velocity_variance: f64,
}

impl Default for TrackerParams {
    fn default() -> Self {
        TrackerParams {
            score_floor: 0.1,
            iou_floor: 0.1,
            max_misses: 3,
            confirm_hits: 2,
            process_noise: ProcessNoise::default(),
            measurement_noise: MeasurementNoise::default(),
            initial_velocity_variance: 10.0,
        }
    }
}

impl TrackerParams {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.score_floor) || !unit(self.iou_floor) {
            return Err(Error::invalid("tracker score_floor and iou_floor must lie in [0, 1]"));
        }
        if self.max_misses == 0 || self.confirm_hits == 0 {
            return Err(Error::invalid("tracker max_misses and confirm_hits must be at least 1"));
        }
        let q = &self.process_noise;
        let r = &self.measurement_noise;
        let all = [q.position, q.size, q.heading, q.velocity, r.position, r.size, r.heading, self.initial_velocity_variance];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("tracker noise variances must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrackStatus {
    Tentative,
    Confirmed,
    Dead,
}

/// One associated detection and the posterior state after its update.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackEntry {
    pub frame: usize,
    pub timestamp: f64,
    /// World-frame detection box.
    pub detection: Box3D,
    pub state: TrackState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub object_id: u64,
    pub class: ObjectClass,
    pub entries: Vec<TrackEntry>,
    pub hits: usize,
    pub misses: usize,
    pub status: TrackStatus,
    pub ever_confirmed: bool,
    /// Latest predicted (or updated) state and its time.
    current: TrackState,
    current_time: f64,
}

impl Track {
    fn born(object_id: u64, frame: usize, timestamp: f64, det: Box3D, params: &TrackerParams) -> Self {
        let state = TrackState::from_detection(&det, &params.measurement_noise, params.initial_velocity_variance);
        let confirmed = params.confirm_hits <= 1;
        Track {
            object_id,
            class: det.class,
            entries: vec![TrackEntry {
                frame,
                timestamp,
                detection: det,
                state,
            }],
            hits: 1,
            misses: 0,
            status: if confirmed { TrackStatus::Confirmed } else { TrackStatus::Tentative },
            ever_confirmed: confirmed,
            current: state,
            current_time: timestamp,
        }
    }

    /// Builds a track from `(frame, timestamp, world box)` entries without
    /// filtering; each posterior state is the detection itself.
    pub fn from_boxes(object_id: u64, class: ObjectClass, entries: &[(usize, f64, Box3D)]) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::invalid("a track needs at least one entry"));
        }
        if entries.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::invalid("track frames must be strictly increasing"));
        }
        let noise = MeasurementNoise::default();
        let make = |&(frame, timestamp, detection): &(usize, f64, Box3D)| TrackEntry {
            frame,
            timestamp,
            detection,
            state: TrackState::from_detection(&detection, &noise, 0.0),
        };
        let entries: Vec<TrackEntry> = entries.iter().map(make).collect();
        let last = &entries[entries.len() - 1];
        let (current, current_time) = (last.state, last.timestamp);
        Ok(Track {
            object_id,
            class,
            hits: entries.len(),
            entries,
            misses: 0,
            status: TrackStatus::Confirmed,
            ever_confirmed: true,
            current,
            current_time,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn frames(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.frame).collect()
    }

    /// World-frame detection boxes, one per entry.
    pub fn detections(&self) -> Vec<Box3D> {
        self.entries.iter().map(|e| e.detection).collect()
    }

    /// Posterior boxes `(frame, box)`, scored with the associated detection.
    pub fn state_boxes(&self) -> Vec<(usize, Box3D)> {
        self.entries
            .iter()
            .map(|e| (e.frame, e.state.to_box(e.detection.score, self.class)))
            .collect()
    }

    pub fn is_alive(&self) -> bool {
        self.status != TrackStatus::Dead
    }
}

/// Runs the tracker over a whole sequence and returns every track ever
/// born, ordered by id. Callers wanting only established objects filter on
/// [`Track::ever_confirmed`].
pub fn run_tracker(ds: &SequenceDataset, params: &TrackerParams) -> Result<Vec<Track>> {
    params.validate()?;
    let mut tracks: Vec<Track> = Vec::new();
    let mut next_id: u64 = 0;
    for frame in &ds.frames {
        let t = frame.timestamp;
        let detections: Vec<Box3D> = frame
            .detections
            .iter()
            .filter(|d| d.score >= params.score_floor)
            .map(|d| frame.pose.apply_box(d))
            .collect();

        let live: Vec<usize> = (0..tracks.len()).filter(|&i| tracks[i].is_alive()).collect();
        for &i in &live {
            let tr = &mut tracks[i];
            tr.current = kalman_predict(&tr.current, t - tr.current_time, &params.process_noise);
            tr.current_time = t;
        }

        let cost: Vec<Vec<f64>> = live
            .iter()
            .map(|&i| {
                let predicted = tracks[i].current.to_box(1.0, tracks[i].class);
                detections
                    .iter()
                    .map(|d| {
                        let iou = if d.class == predicted.class { bev_iou(&predicted, d) } else { 0.0 };
                        if iou >= params.iou_floor && iou > 0.0 {
                            1.0 - iou
                        } else {
                            1.0
                        }
                    })
                    .collect()
            })
            .collect();

        let mut det_matched = vec![false; detections.len()];
        let mut track_matched = vec![false; live.len()];
        for (row, col) in hungarian(&cost) {
            if cost[row][col] >= 1.0 {
                continue;
            }
            det_matched[col] = true;
            track_matched[row] = true;
            let tr = &mut tracks[live[row]];
            let det = detections[col];
            tr.current = kalman_update(&tr.current, &det, &params.measurement_noise);
            tr.entries.push(TrackEntry {
                frame: frame.index,
                timestamp: t,
                detection: det,
                state: tr.current,
            });
            tr.hits += 1;
            tr.misses = 0;
            if tr.hits >= params.confirm_hits {
                tr.status = TrackStatus::Confirmed;
                tr.ever_confirmed = true;
            }
        }
        for (row, &i) in live.iter().enumerate() {
            if !track_matched[row] {
                let tr = &mut tracks[i];
                tr.misses += 1;
                if tr.misses >= params.max_misses {
                    tr.status = TrackStatus::Dead;
                }
            }
        }
        for (col, det) in detections.iter().enumerate() {
            if !det_matched[col] {
                tracks.push(Track::born(next_id, frame.index, t, *det, params));
                next_id += 1;
            }
        }
    }
    Ok(tracks)
}

/// Replaces the tracker with ground-truth identities: in every frame the
/// detections are matched to same-class ground-truth boxes by an optimal
/// assignment on BEV IoU, and each matched detection takes that object's id.
/// Matches below the tracker's IoU floor are dropped, as are detections
/// overlapping no ground truth.
pub fn run_oracle_tracker(ds: &SequenceDataset, params: &TrackerParams) -> Result<Vec<Track>> {
    if !ds.has_ground_truth() {
        return Err(Error::invalid("the oracle tracker needs ground truth in every frame"));
    }
    let mut per_object: std::collections::BTreeMap<u64, (ObjectClass, Vec<(usize, f64, Box3D)>)> =
        std::collections::BTreeMap::new();
    for frame in &ds.frames {
        let gts = frame.ground_truth.as_deref().unwrap_or_default();
        let dets: Vec<Box3D> = frame
            .detections
            .iter()
            .filter(|d| d.score >= params.score_floor)
            .map(|d| frame.pose.apply_box(d))
            .collect();
        if dets.is_empty() || gts.is_empty() {
            continue;
        }
        let iou: Vec<Vec<f64>> = gts
            .iter()
            .map(|g| {
                dets.iter()
                    .map(|d| if g.box3d.class == d.class { bev_iou(&g.box3d, d) } else { 0.0 })
                    .collect()
            })
            .collect();
        let cost: Vec<Vec<f64>> = iou.iter().map(|r| r.iter().map(|v| 1.0 - v).collect()).collect();
        for (gi, di) in hungarian(&cost) {
            if iou[gi][di] >= params.iou_floor && iou[gi][di] > 0.0 {
                let det = dets[di];
                per_object
                    .entry(gts[gi].object_id)
                    .or_insert_with(|| (det.class, Vec::new()))
                    .1
                    .push((frame.index, frame.timestamp, det));
            }
        }
    }
    per_object
        .into_iter()
        .map(|(id, (class, entries))| Track::from_boxes(id, class, &entries))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{ChannelLayout, PointCloud, SensorPose};
    use crate::io::{Frame, GroundTruth};

    fn vehicle(x: f64, y: f64, score: f64) -> Box3D {
        Box3D::new([x, y, 0.75], [4.8, 1.8, 1.5], 0.0, score, ObjectClass::Vehicle)
    }

    fn dataset(n: usize, dets: impl Fn(usize) -> Vec<Box3D>) -> SequenceDataset {
        SequenceDataset {
            sequence_id: "t".into(),
            frequency: 10.0,
            layout: ChannelLayout::XYZ,
            frames: (0..n)
                .map(|i| Frame {
                    index: i,
                    timestamp: i as f64 * 0.1,
                    pose: SensorPose::from_yaw(0.0, [0.5 * i as f64, 0.0, 0.0]),
                    points: PointCloud::empty(ChannelLayout::XYZ),
                    detections: dets(i),
                    ground_truth: None,
                })
                .collect(),
        }
    }

    #[test]
    fn one_static_object_gives_one_track() {
        // The ego moves, so sensor-frame detections shift back to stay fixed in the world.
        let ds = dataset(200, |i| vec![vehicle(20.0 - 0.5 * i as f64, 3.0, 0.9)]);
        let tracks = run_tracker(&ds, &TrackerParams::default()).unwrap();
        assert_eq!(tracks.len(), 1);
        assert_eq!(tracks[0].len(), 200);
        assert!(tracks[0].ever_confirmed);
        assert!(tracks[0].entries.windows(2).all(|w| w[0].frame < w[1].frame));
    }

    #[test]
    fn two_far_objects_keep_their_ids() {
        let ds = dataset(50, |i| {
            let x = 0.2 * i as f64 - 0.5 * i as f64;
            vec![vehicle(10.0 + x, 0.0, 0.9), vehicle(110.0 + x, 0.0, 0.8)]
        });
        let tracks = run_tracker(&ds, &TrackerParams::default()).unwrap();
        assert_eq!(tracks.len(), 2);
        for t in &tracks {
            assert_eq!(t.len(), 50);
            let first = t.entries[0].detection.cx;
            assert!(t.entries.iter().all(|e| (e.detection.cx - first).abs() < 20.0));
        }
    }

    #[test]
    fn low_scores_produce_no_tracks() {
        let ds = dataset(20, |_| vec![vehicle(5.0, 0.0, 0.05), vehicle(30.0, 0.0, 0.05)]);
        assert!(run_tracker(&ds, &TrackerParams::default()).unwrap().is_empty());
    }

    #[test]
    fn tracks_die_after_misses_and_are_not_reused() {
        let ds = dataset(12, |i| if i < 3 || i >= 8 { vec![vehicle(10.0 - 0.5 * i as f64, 0.0, 0.9)] } else { vec![] });
        let tracks = run_tracker(&ds, &TrackerParams::default()).unwrap();
        assert_eq!(tracks.len(), 2);
        assert_eq!(tracks[0].status, TrackStatus::Dead);
        assert_eq!(tracks[0].frames(), vec![0, 1, 2]);
        assert_eq!(tracks[1].frames(), vec![8, 9, 10, 11]);
    }

    #[test]
    fn single_hit_tracks_stay_tentative() {
        let ds = dataset(5, |i| if i == 2 { vec![vehicle(40.0, 0.0, 0.9)] } else { vec![] });
        let tracks = run_tracker(&ds, &TrackerParams::default()).unwrap();
        assert_eq!(tracks.len(), 1);
        assert!(!tracks[0].ever_confirmed);
    }

    #[test]
    fn oracle_uses_ground_truth_ids() {
        // Sensor x offsets cancel the ego motion, so the first box sits on the
        // ground truth in every frame and must win despite its lower score.
        let mut ds = dataset(4, |i| {
            let x = -0.5 * i as f64;
            vec![vehicle(10.0 + x, 0.0, 0.7), vehicle(10.6 + x, 0.0, 0.9), vehicle(60.0, 0.0, 0.9)]
        });
        for f in &mut ds.frames {
            f.ground_truth = Some(vec![GroundTruth {
                object_id: 42,
                box3d: vehicle(10.0, 0.0, 1.0),
            }]);
        }
        let tracks = run_oracle_tracker(&ds, &TrackerParams::default()).unwrap();
        assert_eq!(tracks.len(), 1);
        assert_eq!(tracks[0].object_id, 42);
        assert_eq!(tracks[0].len(), 4);
        assert!(tracks[0].detections().iter().all(|d| d.score == 0.7));
    }
}
