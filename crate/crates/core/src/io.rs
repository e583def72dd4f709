//! Sequence and label files, and ego-motion compensation.
//!
//! Both files are line-delimited JSON. The first line is a header carrying
//! the format name and version; every following line is one frame record.
//! Reals are written in shortest round-trip decimal form, so text files are
//! lossless. Point arrays may instead live in a little-endian `f64` sidecar
//! blob referenced by byte offset and point count.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{transform_points, Box3D, ChannelLayout, ObjectClass, PointCloud, SensorPose};
use crate::motion_state::MotionState;

pub const SEQUENCE_FORMAT: &str = "autolabel-sequence";
pub const LABELS_FORMAT: &str = "autolabel-labels";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub object_id: u64,
    pub box3d: Box3D,
}

/// One lidar sweep. Points and detections are in the sensor frame and
/// `pose` maps sensor to world. Ground truth is stored in the world frame so
/// that a static object's box is exactly the same value in every frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub timestamp: f64,
    pub pose: SensorPose,
    pub points: PointCloud,
    pub detections: Vec<Box3D>,
    pub ground_truth: Option<Vec<GroundTruth>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDataset {
    pub sequence_id: String,
    pub frequency: f64,
    pub layout: ChannelLayout,
    pub frames: Vec<Frame>,
}

impl SequenceDataset {
    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::invariant(None, "a sequence needs at least one frame"));
        }
        if !(self.frequency.is_finite() && self.frequency > 0.0) {
            return Err(Error::invariant(None, format!("frequency {} must be positive", self.frequency)));
        }
        let mut last_time = f64::NEG_INFINITY;
        for (i, frame) in self.frames.iter().enumerate() {
            let at = |e: Error| Error::invariant(Some(i), e.to_string());
            if frame.index != i {
                return Err(Error::invariant(Some(i), format!("frame index {} is not contiguous", frame.index)));
            }
            if !frame.timestamp.is_finite() || frame.timestamp <= last_time {
                return Err(Error::invariant(Some(i), "timestamps must be strictly increasing"));
            }
            last_time = frame.timestamp;
            frame.pose.validate().map_err(at)?;
            if frame.points.layout() != self.layout {
                return Err(Error::invariant(Some(i), "point layout differs from the header"));
            }
            if !frame.points.is_finite() {
                return Err(Error::invariant(Some(i), "non-finite point coordinates"));
            }
            for b in &frame.detections {
                b.validate().map_err(at)?;
            }
            if let Some(gt) = &frame.ground_truth {
                let mut ids = HashSet::new();
                for g in gt {
                    g.box3d.validate().map_err(at)?;
                    if !ids.insert(g.object_id) {
                        return Err(Error::invariant(Some(i), format!("duplicate ground-truth id {}", g.object_id)));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn has_ground_truth(&self) -> bool {
        self.frames.iter().all(|f| f.ground_truth.is_some())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Sensor-frame points and detections mapped into the world frame.
pub fn to_world(frame: &Frame) -> (PointCloud, Vec<Box3D>) {
    let points = transform_points(&frame.points, &frame.pose).unwrap_or_else(|_| frame.points.clone());
    let boxes = frame.detections.iter().map(|b| frame.pose.apply_box(b)).collect();
    (points, boxes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PointStorage {
    #[default]
    Inline,
    /// Points go to `<path>.bin`.
    Blob,
}

#[derive(Serialize, Deserialize)]
struct SequenceHeader {
    format: String,
    version: u32,
    sequence_id: String,
    frequency: f64,
    channels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    points_blob: Option<String>,
}

#[derive(Serialize, Deserialize, Clone, Copy)]
pub(crate) struct BoxRecord(f64, f64, f64, f64, f64, f64, f64, f64, ObjectClass);

impl From<&Box3D> for BoxRecord {
    fn from(b: &Box3D) -> Self {
        BoxRecord(b.cx, b.cy, b.cz, b.length, b.width, b.height, b.heading, b.score, b.class)
    }
}

impl From<BoxRecord> for Box3D {
    fn from(r: BoxRecord) -> Self {
        Box3D {
            cx: r.0,
            cy: r.1,
            cz: r.2,
            length: r.3,
            width: r.4,
            height: r.5,
            heading: r.6,
            score: r.7,
            class: r.8,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct GtRecord {
    #[serde(rename = "box")]
    box3d: BoxRecord,
    object_id: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum PointsRecord {
    Inline(Vec<f64>),
    Blob { offset: u64, count: u64 },
}

#[derive(Serialize, Deserialize)]
struct FrameRecord {
    index: usize,
    timestamp: f64,
    pose: [f64; 12],
    detections: Vec<BoxRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ground_truth: Option<Vec<GtRecord>>,
    points: PointsRecord,
}

fn blob_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".bin");
    PathBuf::from(s)
}

/// Writes to a sibling temporary file and renames it into place.
pub(crate) fn write_atomically(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut w = BufWriter::new(file);
    body(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(&tmp, e))?;
    drop(w);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_json_line<T: Serialize>(w: &mut impl Write, value: &T) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, value).map_err(std::io::Error::other)?;
    w.write_all(b"\n")
}

pub fn save_sequence(ds: &SequenceDataset, path: &Path, storage: PointStorage) -> Result<()> {
    ds.validate()?;
    let blob = (storage == PointStorage::Blob).then(|| blob_path(path));
    let header = SequenceHeader {
        format: SEQUENCE_FORMAT.into(),
        version: FORMAT_VERSION,
        sequence_id: ds.sequence_id.clone(),
        frequency: ds.frequency,
        channels: ds.layout.names().into_iter().map(String::from).collect(),
        points_blob: blob
            .as_ref()
            .and_then(|p| p.file_name())
            .map(|n| n.to_string_lossy().into_owned()),
    };
    let mut blob_bytes: Vec<u8> = Vec::new();
    write_atomically(path, |w| {
        write_json_line(w, &header)?;
        for frame in &ds.frames {
            let points = match storage {
                PointStorage::Inline => PointsRecord::Inline(frame.points.data().to_vec()),
                PointStorage::Blob => {
                    let offset = blob_bytes.len() as u64;
                    for v in frame.points.data() {
                        blob_bytes.extend_from_slice(&v.to_le_bytes());
                    }
                    PointsRecord::Blob {
                        offset,
                        count: frame.points.len() as u64,
                    }
                }
            };
            let record = FrameRecord {
                index: frame.index,
                timestamp: frame.timestamp,
                pose: frame.pose.to_row_major(),
                detections: frame.detections.iter().map(BoxRecord::from).collect(),
                ground_truth: frame.ground_truth.as_ref().map(|gt| {
                    gt.iter()
                        .map(|g| GtRecord {
                            box3d: BoxRecord::from(&g.box3d),
                            object_id: g.object_id,
                        })
                        .collect()
                }),
                points,
            };
            write_json_line(w, &record)?;
        }
        Ok(())
    })?;
    if let Some(bp) = blob {
        write_atomically(&bp, |w| w.write_all(&blob_bytes))?;
    }
    Ok(())
}

fn parse_line<T: DeserializeOwned>(path: &Path, line_no: usize, line: &str) -> Result<T> {
    serde_json::from_str(line).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: line_no,
        column: e.column(),
        message: e.to_string(),
    })
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .lines()
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(path, e))
}

pub(crate) fn header_error(path: &Path, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        column: 1,
        message: message.into(),
    }
}

pub fn load_sequence(path: &Path) -> Result<SequenceDataset> {
    let lines = read_lines(path)?;
    let first = lines.first().ok_or_else(|| header_error(path, "empty file"))?;
    let header: SequenceHeader = parse_line(path, 1, first)?;
    if header.format != SEQUENCE_FORMAT {
        return Err(header_error(path, format!("unexpected format `{}`", header.format)));
    }
    if header.version != FORMAT_VERSION {
        return Err(header_error(path, format!("unsupported version {}", header.version)));
    }
    let layout = ChannelLayout::from_names(&header.channels).map_err(|e| header_error(path, e.to_string()))?;
    let blob = match &header.points_blob {
        Some(name) => {
            let bp = path.parent().unwrap_or_else(|| Path::new(".")).join(name);
            let mut bytes = Vec::new();
            File::open(&bp)
                .and_then(|mut f| f.read_to_end(&mut bytes))
                .map_err(|e| Error::io(&bp, e))?;
            Some(bytes)
        }
        None => None,
    };

    let mut frames = Vec::with_capacity(lines.len().saturating_sub(1));
    for (i, line) in lines.iter().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let record: FrameRecord = parse_line(path, i + 1, line)?;
        let fi = frames.len();
        let pose = SensorPose::from_row_major(&record.pose).map_err(|e| Error::invariant(Some(fi), e.to_string()))?;
        let data = match record.points {
            PointsRecord::Inline(v) => v,
            PointsRecord::Blob { offset, count } => {
                let bytes = blob
                    .as_ref()
                    .ok_or_else(|| Error::invariant(Some(fi), "blob reference without a points_blob header"))?;
                let start = offset as usize;
                let len = count as usize * layout.width() * 8;
                let slice = bytes
                    .get(start..start + len)
                    .ok_or_else(|| Error::invariant(Some(fi), "blob reference out of range"))?;
                slice
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap_or_default()))
                    .collect()
            }
        };
        let points = PointCloud::new(layout, data).map_err(|e| Error::invariant(Some(fi), e.to_string()))?;
        frames.push(Frame {
            index: record.index,
            timestamp: record.timestamp,
            pose,
            points,
            detections: record.detections.into_iter().map(Box3D::from).collect(),
            ground_truth: record.ground_truth.map(|gt| {
                gt.into_iter()
                    .map(|g| GroundTruth {
                        object_id: g.object_id,
                        box3d: g.box3d.into(),
                    })
                    .collect()
            }),
        });
    }
    let ds = SequenceDataset {
        sequence_id: header.sequence_id,
        frequency: header.frequency,
        layout,
        frames,
    };
    ds.validate()?;
    Ok(ds)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Label {
    pub object_id: u64,
    pub motion_state: MotionState,
    /// World frame.
    pub box3d: Box3D,
}

/// Final auto labels: one list per frame, at most one entry per object id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AutoLabelSet {
    pub sequence_id: String,
    pub frames: Vec<Vec<Label>>,
}

impl AutoLabelSet {
    pub fn new(sequence_id: impl Into<String>, n_frames: usize) -> Self {
        AutoLabelSet {
            sequence_id: sequence_id.into(),
            frames: vec![Vec::new(); n_frames],
        }
    }

    pub fn insert(&mut self, frame: usize, label: Label) -> Result<()> {
        let list = self
            .frames
            .get_mut(frame)
            .ok_or_else(|| Error::invariant(Some(frame), "label frame out of range"))?;
        if list.iter().any(|l| l.object_id == label.object_id) {
            return Err(Error::invariant(
                Some(frame),
                format!("duplicate label for object {}", label.object_id),
            ));
        }
        list.push(label);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sorts each frame's labels by object id.
    pub fn sort(&mut self) {
        for f in &mut self.frames {
            f.sort_by_key(|l| l.object_id);
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, f) in self.frames.iter().enumerate() {
            let mut ids = HashSet::new();
            for l in f {
                if !ids.insert(l.object_id) {
                    return Err(Error::invariant(Some(i), format!("duplicate label for object {}", l.object_id)));
                }
                l.box3d.validate().map_err(|e| Error::invariant(Some(i), e.to_string()))?;
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct LabelsHeader {
    format: String,
    version: u32,
    sequence_id: String,
    n_frames: usize,
}

#[derive(Serialize, Deserialize)]
struct LabelRecord {
    object_id: u64,
    motion_state: MotionState,
    #[serde(rename = "box")]
    box3d: BoxRecord,
}

#[derive(Serialize, Deserialize)]
struct LabelFrameRecord {
    frame: usize,
    labels: Vec<LabelRecord>,
}

pub fn save_labels(labels: &AutoLabelSet, path: &Path) -> Result<()> {
    labels.validate()?;
    let header = LabelsHeader {
        format: LABELS_FORMAT.into(),
        version: FORMAT_VERSION,
        sequence_id: labels.sequence_id.clone(),
        n_frames: labels.frames.len(),
    };
    write_atomically(path, |w| {
        write_json_line(w, &header)?;
        for (i, frame) in labels.frames.iter().enumerate() {
            let record = LabelFrameRecord {
                frame: i,
                labels: frame
                    .iter()
                    .map(|l| LabelRecord {
                        object_id: l.object_id,
                        motion_state: l.motion_state,
                        box3d: BoxRecord::from(&l.box3d),
                    })
                    .collect(),
            };
            write_json_line(w, &record)?;
        }
        Ok(())
    })
}

pub fn load_labels(path: &Path) -> Result<AutoLabelSet> {
    let lines = read_lines(path)?;
    let first = lines.first().ok_or_else(|| header_error(path, "empty file"))?;
    let header: LabelsHeader = parse_line(path, 1, first)?;
    if header.format != LABELS_FORMAT || header.version != FORMAT_VERSION {
        return Err(header_error(path, format!("unexpected labels header `{}` v{}", header.format, header.version)));
    }
    let mut set = AutoLabelSet::new(header.sequence_id, header.n_frames);
    for (i, line) in lines.iter().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let record: LabelFrameRecord = parse_line(path, i + 1, line)?;
        for l in record.labels {
            set.insert(
                record.frame,
                Label {
                    object_id: l.object_id,
                    motion_state: l.motion_state,
                    box3d: l.box3d.into(),
                },
            )?;
        }
    }
    set.validate()?;
    Ok(set)
}

/// Generic JSON-lines writer used by the track-data dump.
pub(crate) fn save_json_lines<T: Serialize>(items: &[T], header: &impl Serialize, path: &Path) -> Result<()> {
    write_atomically(path, |w| {
        write_json_line(w, header)?;
        for item in items {
            write_json_line(w, item)?;
        }
        Ok(())
    })
}

pub(crate) fn load_json_lines<H: DeserializeOwned, T: DeserializeOwned>(path: &Path) -> Result<(H, Vec<T>)> {
    let lines = read_lines(path)?;
    let first = lines.first().ok_or_else(|| header_error(path, "empty file"))?;
    let header = parse_line(path, 1, first)?;
    let mut items = Vec::new();
    for (i, line) in lines.iter().enumerate().skip(1) {
        if !line.trim().is_empty() {
            items.push(parse_line(path, i + 1, line)?);
        }
    }
    Ok((header, items))
}
