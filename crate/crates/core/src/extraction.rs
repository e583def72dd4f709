//! Object-centric track data: per-frame point crops and boxes in the world
//! frame, extracted along a track.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{bev_iou, transform_points, Box3D, ChannelLayout, ObjectClass, PointCloud, SensorPose};
use crate::io::{load_json_lines, save_json_lines, BoxRecord, SequenceDataset, FORMAT_VERSION};
use crate::motion_state::MotionState;
use crate::par::Executor;
use crate::tracking::Track;

pub const DEFAULT_ALPHA: f64 = 1.0;
pub const TRACK_DATA_FORMAT: &str = "autolabel-track-data";

#[derive(Debug, Clone, PartialEq)]
pub struct TrackFrame {
    pub frame: usize,
    pub timestamp: f64,
    /// World-frame points inside the enlarged box.
    pub points: PointCloud,
    /// World-frame tracked (detector) box; its score is the detector score.
    pub box3d: Box3D,
    /// Matching ground-truth box, when known.
    pub ground_truth: Option<Box3D>,
}

impl TrackFrame {
    pub fn score(&self) -> f64 {
        self.box3d.score
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectTrackData {
    pub object_id: u64,
    pub class: ObjectClass,
    pub motion_state: MotionState,
    pub frames: Vec<TrackFrame>,
}

impl ObjectTrackData {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn boxes(&self) -> Vec<Box3D> {
        self.frames.iter().map(|f| f.box3d).collect()
    }

    pub fn frame_indices(&self) -> Vec<usize> {
        self.frames.iter().map(|f| f.frame).collect()
    }

    pub fn position_of(&self, frame: usize) -> Option<usize> {
        self.frames.binary_search_by_key(&frame, |f| f.frame).ok()
    }

    pub fn has_ground_truth(&self) -> bool {
        !self.frames.is_empty() && self.frames.iter().all(|f| f.ground_truth.is_some())
    }

    pub fn total_points(&self) -> usize {
        self.frames.iter().map(|f| f.points.len()).sum()
    }
}

/// World-frame point clouds of every frame, transformed once.
pub fn world_points(ds: &SequenceDataset, exec: &Executor) -> Result<Vec<PointCloud>> {
    exec.try_map(&ds.frames, |f| transform_points(&f.points, &f.pose))
}

/// Points of `cloud` inside `b` enlarged by `alpha` on every face (closed).
pub fn crop_points(cloud: &PointCloud, b: &Box3D, alpha: f64) -> PointCloud {
    let reach = 0.5 * (b.length.hypot(b.width)).hypot(b.height) + alpha * 3f64.sqrt();
    let mask: Vec<bool> = (0..cloud.len())
        .map(|i| {
            let p = cloud.xyz(i);
            (p.x - b.cx).abs() <= reach && (p.y - b.cy).abs() <= reach && b.contains(&p, alpha)
        })
        .collect();
    cloud.select(&mask)
}

pub fn extract_track_data(ds: &SequenceDataset, track: &Track, alpha: f64) -> Result<ObjectTrackData> {
    let world = world_points(ds, &Executor::sequential())?;
    extract_from_world(ds, &world, track, alpha, MotionState::Indeterminate)
}

/// Extraction against precomputed world clouds from [`world_points`].
pub fn extract_from_world(
    ds: &SequenceDataset,
    world: &[PointCloud],
    track: &Track,
    alpha: f64,
    motion_state: MotionState,
) -> Result<ObjectTrackData> {
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::invalid(format!("crop margin alpha must be non-negative, got {alpha}")));
    }
    let frames = track
        .entries
        .iter()
        .map(|e| {
            let cloud = world
                .get(e.frame)
                .ok_or_else(|| Error::invariant(Some(e.frame), "track frame is outside the sequence"))?;
            Ok(TrackFrame {
                frame: e.frame,
                timestamp: ds.frames[e.frame].timestamp,
                points: crop_points(cloud, &e.detection, alpha),
                box3d: e.detection,
                ground_truth: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ObjectTrackData {
        object_id: track.object_id,
        class: track.class,
        motion_state,
        frames,
    })
}

/// Extracts every track, in parallel, sharing one world transform per frame.
pub fn extract_all(
    ds: &SequenceDataset,
    tracks: &[Track],
    states: &[MotionState],
    alpha: f64,
    exec: &Executor,
) -> Result<Vec<ObjectTrackData>> {
    if states.len() != tracks.len() {
        return Err(Error::invalid("one motion state per track is required"));
    }
    let world = world_points(ds, exec)?;
    let pairs: Vec<(&Track, MotionState)> = tracks.iter().zip(states.iter().copied()).collect();
    exec.try_map(&pairs, |(t, s)| extract_from_world(ds, &world, t, alpha, *s))
}

/// Attaches the ground-truth object that best overlaps the track. The
/// object is chosen by the number of frames in which it is the best BEV IoU
/// match (ties to the lower id); its boxes fill `ground_truth` wherever it
/// is present. Returns the chosen id.
pub fn attach_ground_truth(data: &mut ObjectTrackData, ds: &SequenceDataset) -> Option<u64> {
    let mut votes: BTreeMap<u64, usize> = BTreeMap::new();
    for f in &data.frames {
        let gts = ds.frames.get(f.frame)?.ground_truth.as_deref().unwrap_or_default();
        let best = gts
            .iter()
            .filter(|g| g.box3d.class == data.class)
            .map(|g| (g.object_id, bev_iou(&g.box3d, &f.box3d)))
            .filter(|(_, iou)| *iou > 0.0)
            .fold(None::<(u64, f64)>, |acc, x| match acc {
                Some(a) if a.1 >= x.1 => Some(a),
                _ => Some(x),
            });
        if let Some((id, _)) = best {
            *votes.entry(id).or_default() += 1;
        }
    }
    let (&id, _) = votes.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))?;
    for f in &mut data.frames {
        f.ground_truth = ds.frames[f.frame]
            .ground_truth
            .as_deref()
            .unwrap_or_default()
            .iter()
            .find(|g| g.object_id == id)
            .map(|g| g.box3d);
    }
    Some(id)
}

/// Merged world-frame points with the source frame of every point.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedPoints {
    pub cloud: PointCloud,
    pub frames: Vec<usize>,
}

/// Concatenates the crops of the listed frames (dataset frame indices);
/// frames not in the track are ignored.
pub fn merge_track_points(data: &ObjectTrackData, subset: &[usize]) -> MergedPoints {
    let layout = data.frames.first().map(|f| f.points.layout()).unwrap_or(ChannelLayout::XYZ);
    let mut cloud = PointCloud::empty(layout);
    let mut frames = Vec::new();
    for &k in subset {
        if let Some(pos) = data.position_of(k) {
            let f = &data.frames[pos];
            if cloud.extend(&f.points).is_ok() {
                frames.extend(std::iter::repeat_n(f.frame, f.points.len()));
            }
        }
    }
    MergedPoints { cloud, frames }
}

pub fn merge_all_points(data: &ObjectTrackData) -> MergedPoints {
    merge_track_points(data, &data.frame_indices())
}

/// Maps each frame's points (and tracked box) by the rigid motion taking
/// that frame's ground-truth box onto the reference frame's ground-truth
/// box, so a moving object looks static. `reference` is a dataset frame
/// index present in the track.
pub fn dynamic_to_static_augment(data: &ObjectTrackData, reference: usize) -> Result<ObjectTrackData> {
    let gt_of = |f: &TrackFrame| {
        f.ground_truth
            .ok_or_else(|| Error::invalid(format!("frame {} of track {} has no ground truth", f.frame, data.object_id)))
    };
    let pos = data
        .position_of(reference)
        .ok_or_else(|| Error::invalid(format!("reference frame {reference} is not in track {}", data.object_id)))?;
    let reference_gt = gt_of(&data.frames[pos])?;
    let to_reference = reference_gt.frame();
    let frames = data
        .frames
        .iter()
        .map(|f| {
            let g = gt_of(f)?;
            let motion: SensorPose = to_reference.compose(&g.frame().inverse());
            Ok(TrackFrame {
                points: transform_points(&f.points, &motion)?,
                box3d: motion.apply_box(&f.box3d),
                ground_truth: Some(reference_gt.with_score(g.score)),
                ..f.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ObjectTrackData {
        motion_state: MotionState::Static,
        frames,
        ..data.clone()
    })
}

#[derive(Serialize, Deserialize)]
struct TrackDataHeader {
    format: String,
    version: u32,
    channels: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct TrackFrameRecord {
    frame: usize,
    timestamp: f64,
    #[serde(rename = "box")]
    box3d: BoxRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ground_truth: Option<BoxRecord>,
    points: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TrackRecord {
    object_id: u64,
    class: ObjectClass,
    motion_state: MotionState,
    frames: Vec<TrackFrameRecord>,
}

/// Writes track data as JSON lines: a header, then one line per object.
pub fn save_track_data(tracks: &[ObjectTrackData], path: &Path) -> Result<()> {
    let layout = tracks
        .iter()
        .flat_map(|t| t.frames.first())
        .map(|f| f.points.layout())
        .next()
        .unwrap_or(ChannelLayout::XYZ);
    let header = TrackDataHeader {
        format: TRACK_DATA_FORMAT.into(),
        version: FORMAT_VERSION,
        channels: layout.names().into_iter().map(String::from).collect(),
    };
    let mut records = Vec::with_capacity(tracks.len());
    for t in tracks {
        let mut frames = Vec::with_capacity(t.frames.len());
        for f in &t.frames {
            if f.points.layout() != layout {
                return Err(Error::invalid("all track frames must share one channel layout"));
            }
            frames.push(TrackFrameRecord {
                frame: f.frame,
                timestamp: f.timestamp,
                box3d: BoxRecord::from(&f.box3d),
                ground_truth: f.ground_truth.as_ref().map(BoxRecord::from),
                points: f.points.data().to_vec(),
            });
        }
        records.push(TrackRecord {
            object_id: t.object_id,
            class: t.class,
            motion_state: t.motion_state,
            frames,
        });
    }
    save_json_lines(&records, &header, path)
}

pub fn load_track_data(path: &Path) -> Result<Vec<ObjectTrackData>> {
    let (header, records): (TrackDataHeader, Vec<TrackRecord>) = load_json_lines(path)?;
    if header.format != TRACK_DATA_FORMAT || header.version != FORMAT_VERSION {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            column: 1,
            message: format!("unexpected track-data header `{}` v{}", header.format, header.version),
        });
    }
    let layout = ChannelLayout::from_names(&header.channels)?;
    records
        .into_iter()
        .map(|r| {
            let frames = r
                .frames
                .into_iter()
                .map(|f| {
                    let b: Box3D = f.box3d.into();
                    b.validate()?;
                    Ok(TrackFrame {
                        frame: f.frame,
                        timestamp: f.timestamp,
                        points: PointCloud::new(layout, f.points)?,
                        box3d: b,
                        ground_truth: f.ground_truth.map(Box3D::from),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if frames.windows(2).any(|w: &[TrackFrame]| w[1].frame <= w[0].frame) {
                return Err(Error::invariant(None, format!("track {} frames are not increasing", r.object_id)));
            }
            Ok(ObjectTrackData {
                object_id: r.object_id,
                class: r.class,
                motion_state: r.motion_state,
                frames,
            })
        })
        .collect()
}
