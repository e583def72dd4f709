//! Rigid transforms, yaw-only boxes, rotated-box overlap and cyclic angle
//! arithmetic.
//!
//! Headings are radians, counterclockwise from +X in the XY plane, stored in
//! `[-π, π)`. Every function here is pure.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Extents below this are treated as zero-area.
pub const MIN_EXTENT: f64 = 1e-6;

const ORTHONORMAL_TOL: f64 = 1e-6;

/// Wraps an angle into `[-π, π)`.
pub fn normalize_angle(angle: f64) -> f64 {
    let mut r = (angle + PI).rem_euclid(TAU) - PI;
    if r >= PI {
        r -= TAU;
    }
    if r < -PI {
        r = -PI;
    }
    r
}

/// Signed circular difference `a - b` in `[-π, π)`.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    normalize_angle(a - b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectClass {
    Vehicle,
    Pedestrian,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 2] = [ObjectClass::Vehicle, ObjectClass::Pedestrian];

    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::Vehicle => "vehicle",
            ObjectClass::Pedestrian => "pedestrian",
        }
    }
}

impl std::str::FromStr for ObjectClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vehicle" => Ok(ObjectClass::Vehicle),
            "pedestrian" => Ok(ObjectClass::Pedestrian),
            other => Err(Error::invalid(format!("unknown object class `{other}`"))),
        }
    }
}

/// A 7-DoF amodal box with a detector score and class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub heading: f64,
    pub score: f64,
    pub class: ObjectClass,
}

impl Box3D {
    /// Builds a box with its heading wrapped into `[-π, π)`.
    pub fn new(center: [f64; 3], size: [f64; 3], heading: f64, score: f64, class: ObjectClass) -> Self {
        Box3D {
            cx: center[0],
            cy: center[1],
            cz: center[2],
            length: size[0],
            width: size[1],
            height: size[2],
            heading: normalize_angle(heading),
            score,
            class,
        }
    }

    /// Checks the box invariants: finite parameters, positive extents,
    /// normalized heading and a score in `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        let values = [
            self.cx,
            self.cy,
            self.cz,
            self.length,
            self.width,
            self.height,
            self.heading,
            self.score,
        ];
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("box parameters".into()));
        }
        if self.length <= 0.0 || self.width <= 0.0 || self.height <= 0.0 {
            return Err(Error::invalid(format!(
                "box extents must be positive, got ({}, {}, {})",
                self.length, self.width, self.height
            )));
        }
        if !(-PI..PI).contains(&self.heading) {
            return Err(Error::invalid(format!("heading {} outside [-pi, pi)", self.heading)));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::invalid(format!("score {} outside [0, 1]", self.score)));
        }
        Ok(())
    }

    pub fn center(&self) -> Vector3<f64> {
        Vector3::new(self.cx, self.cy, self.cz)
    }

    pub fn size(&self) -> [f64; 3] {
        [self.length, self.width, self.height]
    }

    pub fn with_center(mut self, c: Vector3<f64>) -> Self {
        self.cx = c.x;
        self.cy = c.y;
        self.cz = c.z;
        self
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }

    pub fn volume(&self) -> f64 {
        self.length * self.width * self.height
    }

    pub fn bev_area(&self) -> f64 {
        self.length * self.width
    }

    pub fn is_degenerate(&self) -> bool {
        self.length < MIN_EXTENT || self.width < MIN_EXTENT || self.height < MIN_EXTENT
    }

    /// Footprint corners in counterclockwise order.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.heading.sin_cos();
        let hl = self.length / 2.0;
        let hw = self.width / 2.0;
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[x, y]| [self.cx + c * x - s * y, self.cy + s * x + c * y])
    }

    /// The eight box corners in world coordinates.
    pub fn corners(&self) -> [[f64; 3]; 8] {
        let bev = self.bev_corners();
        let z0 = self.cz - self.height / 2.0;
        let z1 = self.cz + self.height / 2.0;
        let mut out = [[0.0; 3]; 8];
        for (i, [x, y]) in bev.into_iter().enumerate() {
            out[i] = [x, y, z0];
            out[i + 4] = [x, y, z1];
        }
        out
    }

    /// Rigid transform placing box-frame coordinates into the box's parent
    /// frame: `+X` along the heading, origin at the center.
    pub fn frame(&self) -> SensorPose {
        SensorPose::from_yaw(self.heading, [self.cx, self.cy, self.cz])
    }

    /// Whether `p` (parent frame) lies inside the box enlarged by `margin`
    /// on every face. The bound is closed.
    pub fn contains(&self, p: &Vector3<f64>, margin: f64) -> bool {
        let (s, c) = self.heading.sin_cos();
        let dx = p.x - self.cx;
        let dy = p.y - self.cy;
        let lx = c * dx + s * dy;
        let ly = -s * dx + c * dy;
        let lz = p.z - self.cz;
        lx.abs() <= self.length / 2.0 + margin
            && ly.abs() <= self.width / 2.0 + margin
            && lz.abs() <= self.height / 2.0 + margin
    }
}

/// A rigid transform `p' = R p + t`. Used for sensor poses, box frames and
/// any other proper rigid motion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl SensorPose {
    /// Validating constructor: the rotation must be orthonormal with
    /// determinant +1 to within 1e-6.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let pose = SensorPose {
            rotation,
            translation,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn identity() -> Self {
        SensorPose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_yaw(yaw: f64, translation: [f64; 3]) -> Self {
        SensorPose {
            rotation: rotation_z(yaw),
            translation: Vector3::from(translation),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rotation.iter().chain(self.translation.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("pose".into()));
        }
        let gram = self.rotation.transpose() * self.rotation;
        let off = (gram - Matrix3::identity()).abs().max();
        if off > ORTHONORMAL_TOL {
            return Err(Error::invalid(format!("rotation is not orthonormal (max |RᵀR - I| = {off:.3e})")));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::invalid(format!("rotation determinant {det} is not +1")));
        }
        Ok(())
    }

    /// Yaw of the transformed +X axis projected onto the XY plane.
    pub fn yaw(&self) -> f64 {
        self.rotation[(1, 0)].atan2(self.rotation[(0, 0)])
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        SensorPose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &SensorPose) -> Self {
        SensorPose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Transforms a yaw-only box: the center rigidly, the heading by the
    /// pose's yaw. Pitch and roll do not tilt the box.
    pub fn apply_box(&self, b: &Box3D) -> Box3D {
        let c = self.apply(&b.center());
        Box3D {
            heading: normalize_angle(b.heading + self.yaw()),
            ..*b
        }
        .with_center(c)
    }

    /// Row-major rotation followed by the translation.
    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)],
            r[(1, 0)], r[(1, 1)], r[(1, 2)],
            r[(2, 0)], r[(2, 1)], r[(2, 2)],
            t.x, t.y, t.z,
        ]
    }

    pub fn from_row_major(v: &[f64; 12]) -> Result<Self> {
        let rotation = Matrix3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]);
        SensorPose::new(rotation, Vector3::new(v[9], v[10], v[11]))
    }
}

pub fn rotation_z(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Optional non-spatial point channels following `[x, y, z]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ChannelLayout {
    pub intensity: bool,
    pub time: bool,
}

impl ChannelLayout {
    pub const XYZ: ChannelLayout = ChannelLayout {
        intensity: false,
        time: false,
    };

    pub fn width(&self) -> usize {
        3 + usize::from(self.intensity) + usize::from(self.time)
    }

    pub fn time_index(&self) -> Option<usize> {
        self.time.then(|| 3 + usize::from(self.intensity))
    }

    pub fn names(&self) -> Vec<&'static str> {
        let mut names = vec!["x", "y", "z"];
        if self.intensity {
            names.push("intensity");
        }
        if self.time {
            names.push("time");
        }
        names
    }

    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let names: Vec<&str> = names.iter().map(|s| s.as_ref()).collect();
        let layout = match names.as_slice() {
            ["x", "y", "z"] => ChannelLayout::XYZ,
            ["x", "y", "z", "intensity"] => ChannelLayout {
                intensity: true,
                time: false,
            },
            ["x", "y", "z", "time"] => ChannelLayout {
                intensity: false,
                time: true,
            },
            ["x", "y", "z", "intensity", "time"] => ChannelLayout {
                intensity: true,
                time: true,
            },
            _ => return Err(Error::invalid(format!("unsupported channel layout {names:?}"))),
        };
        Ok(layout)
    }
}

/// An `N × C` point array, row-major.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    layout: ChannelLayout,
    data: Vec<f64>,
}

impl PointCloud {
    pub fn new(layout: ChannelLayout, data: Vec<f64>) -> Result<Self> {
        if data.len() % layout.width() != 0 {
            return Err(Error::invalid(format!(
                "point buffer of length {} is not a multiple of {} channels",
                data.len(),
                layout.width()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("point cloud".into()));
        }
        Ok(PointCloud { layout, data })
    }

    pub fn empty(layout: ChannelLayout) -> Self {
        PointCloud {
            layout,
            data: Vec::new(),
        }
    }

    pub fn from_xyz<I: IntoIterator<Item = [f64; 3]>>(points: I) -> Self {
        PointCloud {
            layout: ChannelLayout::XYZ,
            data: points.into_iter().flatten().collect(),
        }
    }

    pub fn layout(&self) -> ChannelLayout {
        self.layout
    }

    pub fn channels(&self) -> usize {
        self.layout.width()
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.layout.width()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn point(&self, i: usize) -> &[f64] {
        let c = self.channels();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn xyz(&self, i: usize) -> Vector3<f64> {
        let p = self.point(i);
        Vector3::new(p[0], p[1], p[2])
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.channels())
    }

    pub fn push(&mut self, row: &[f64]) {
        debug_assert_eq!(row.len(), self.channels());
        self.data.extend_from_slice(row);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Keeps the rows whose mask entry is true.
    pub fn select(&self, mask: &[bool]) -> PointCloud {
        let c = self.channels();
        let data = self
            .rows()
            .zip(mask)
            .filter(|(_, keep)| **keep)
            .flat_map(|(row, _)| row.iter().copied())
            .collect::<Vec<_>>();
        debug_assert_eq!(data.len() % c, 0);
        PointCloud {
            layout: self.layout,
            data,
        }
    }

    pub fn gather(&self, indices: &[usize]) -> PointCloud {
        let mut data = Vec::with_capacity(indices.len() * self.channels());
        for &i in indices {
            data.extend_from_slice(self.point(i));
        }
        PointCloud {
            layout: self.layout,
            data,
        }
    }

    /// Appends a time channel, or overwrites an existing one, with `value`.
    pub fn with_time(&self, value: f64) -> PointCloud {
        if let Some(t) = self.layout.time_index() {
            let mut out = self.clone();
            let c = out.channels();
            for row in out.data.chunks_exact_mut(c) {
                row[t] = value;
            }
            return out;
        }
        let layout = ChannelLayout {
            time: true,
            ..self.layout
        };
        let mut data = Vec::with_capacity(self.len() * layout.width());
        for row in self.rows() {
            data.extend_from_slice(row);
            data.push(value);
        }
        PointCloud { layout, data }
    }

    /// Keeps only the xyz channels.
    pub fn xyz_only(&self) -> PointCloud {
        if self.layout == ChannelLayout::XYZ {
            return self.clone();
        }
        PointCloud::from_xyz(self.rows().map(|r| [r[0], r[1], r[2]]))
    }

    pub fn extend(&mut self, other: &PointCloud) -> Result<()> {
        if other.layout != self.layout {
            return Err(Error::invalid("cannot concatenate clouds with different channel layouts"));
        }
        self.data.extend_from_slice(&other.data);
        Ok(())
    }

    fn map_xyz(&self, f: impl Fn(Vector3<f64>) -> Vector3<f64>) -> PointCloud {
        let mut out = self.clone();
        let c = out.channels();
        for row in out.data.chunks_exact_mut(c) {
            let p = f(Vector3::new(row[0], row[1], row[2]));
            row[0] = p.x;
            row[1] = p.y;
            row[2] = p.z;
        }
        out
    }
}

/// Maps xyz by `R p + t`; other channels are copied.
pub fn transform_points(pc: &PointCloud, pose: &SensorPose) -> Result<PointCloud> {
    if !pc.is_finite() {
        return Err(Error::NonFinite("point cloud passed to transform_points".into()));
    }
    pose.validate()?;
    Ok(pc.map_xyz(|p| pose.apply(&p)))
}

/// Expresses points in the coordinate frame of `reference`.
pub fn to_box_frame(pc: &PointCloud, reference: &Box3D) -> Result<PointCloud> {
    transform_points(pc, &reference.frame().inverse())
}

/// Inverse of [`to_box_frame`].
pub fn from_box_frame(pc: &PointCloud, reference: &Box3D) -> Result<PointCloud> {
    transform_points(pc, &reference.frame())
}

/// `b` expressed in the frame of `reference`.
pub fn box_to_frame(b: &Box3D, reference: &Box3D) -> Box3D {
    reference.frame().inverse().apply_box(b)
}

/// Inverse of [`box_to_frame`].
pub fn box_from_frame(b: &Box3D, reference: &Box3D) -> Box3D {
    reference.frame().apply_box(b)
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn line_intersection(p: [f64; 2], q: [f64; 2], a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let d1 = [q[0] - p[0], q[1] - p[1]];
    let d2 = [b[0] - a[0], b[1] - a[1]];
    let denom = d1[0] * d2[1] - d1[1] * d2[0];
    if denom.abs() < 1e-300 {
        return q;
    }
    let t = ((a[0] - p[0]) * d2[1] - (a[1] - p[1]) * d2[0]) / denom;
    [p[0] + t * d1[0], p[1] + t * d1[1]]
}

/// Sutherland–Hodgman clipping of a polygon against a convex
/// counterclockwise polygon.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let cur_in = cross(a, b, cur) >= 0.0;
            let prev_in = cross(a, b, prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    output.push(line_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(line_intersection(prev, cur, a, b));
            }
        }
    }
    output
}

/// Shoelace area of a simple polygon (absolute value).
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut twice = 0.0;
    for i in 0..poly.len() {
        let p = poly[i];
        let q = poly[(i + 1) % poly.len()];
        twice += p[0] * q[1] - q[0] * p[1];
    }
    twice.abs() / 2.0
}

fn same_geometry(a: &Box3D, b: &Box3D) -> bool {
    a.cx == b.cx
        && a.cy == b.cy
        && a.cz == b.cz
        && a.length == b.length
        && a.width == b.width
        && a.height == b.height
        && a.heading == b.heading
}

/// Area of the intersection of the two footprints.
pub fn bev_intersection_area(a: &Box3D, b: &Box3D) -> f64 {
    let ra = 0.5 * a.length.hypot(a.width);
    let rb = 0.5 * b.length.hypot(b.width);
    if (a.cx - b.cx).hypot(a.cy - b.cy) > ra + rb {
        return 0.0;
    }
    let area = polygon_area(&clip_convex(&a.bev_corners(), &b.bev_corners()));
    area.min(a.bev_area()).min(b.bev_area())
}

fn degenerate_warning(a: &Box3D, b: &Box3D) -> bool {
    if a.is_degenerate() || b.is_degenerate() {
        log::warn!("IoU requested for a degenerate box; returning 0");
        return true;
    }
    false
}

/// Intersection over union of the two heading-rotated footprints.
pub fn bev_iou(a: &Box3D, b: &Box3D) -> f64 {
    if degenerate_warning(a, b) {
        return 0.0;
    }
    if same_geometry(a, b) {
        return 1.0;
    }
    let inter = bev_intersection_area(a, b);
    let union = a.bev_area() + b.bev_area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Length of the overlap of the two vertical extents.
pub fn vertical_overlap(a: &Box3D, b: &Box3D) -> f64 {
    let lo = (a.cz - a.height / 2.0).max(b.cz - b.height / 2.0);
    let hi = (a.cz + a.height / 2.0).min(b.cz + b.height / 2.0);
    (hi - lo).max(0.0)
}

/// Volumetric IoU of two yaw-only boxes.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    if degenerate_warning(a, b) {
        return 0.0;
    }
    if same_geometry(a, b) {
        return 1.0;
    }
    let dz = vertical_overlap(a, b);
    if dz <= 0.0 {
        return 0.0;
    }
    let inter = bev_intersection_area(a, b) * dz;
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CyclicMean {
    pub angle: f64,
    /// Set when the mean resultant vanishes and the first angle was returned.
    pub ambiguous: bool,
}

/// Weighted circular mean via the mean resultant vector.
pub fn cyclic_mean(angles: &[f64], weights: &[f64]) -> Result<CyclicMean> {
    if angles.is_empty() {
        return Err(Error::invalid("cyclic_mean of an empty list"));
    }
    if angles.len() != weights.len() {
        return Err(Error::invalid(format!(
            "cyclic_mean got {} angles but {} weights",
            angles.len(),
            weights.len()
        )));
    }
    if angles.iter().chain(weights).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cyclic_mean input".into()));
    }
    if weights.iter().any(|w| *w < 0.0) {
        return Err(Error::invalid("cyclic_mean weights must be non-negative"));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid("cyclic_mean weights are all zero"));
    }
    let (mut s, mut c) = (0.0, 0.0);
    for (a, w) in angles.iter().zip(weights) {
        let (sa, ca) = a.sin_cos();
        s += w * sa;
        c += w * ca;
    }
    if s.hypot(c) <= 1e-12 * total {
        return Ok(CyclicMean {
            angle: normalize_angle(angles[0]),
            ambiguous: true,
        });
    }
    Ok(CyclicMean {
        angle: normalize_angle(s.atan2(c)),
        ambiguous: false,
    })
}

/// Flips a detection heading by π when it makes an obtuse angle with the
/// track heading.
pub fn align_heading(det: f64, track: f64) -> f64 {
    if angle_diff(det, track).abs() > FRAC_PI_2 {
        normalize_angle(det + PI)
    } else {
        normalize_angle(det)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(cx: f64, cy: f64, heading: f64) -> Box3D {
        Box3D::new([cx, cy, 0.0], [1.0, 1.0, 1.0], heading, 1.0, ObjectClass::Vehicle)
    }

    #[test]
    fn normalize_wraps_into_half_open_interval() {
        assert_eq!(normalize_angle(PI), -PI);
        assert_eq!(normalize_angle(-PI), -PI);
        assert!((normalize_angle(3.0 * PI + 0.1) - (-PI + 0.1)).abs() < 1e-12);
        assert!((normalize_angle(-0.1) + 0.1).abs() < 1e-15);
    }

    #[test]
    fn identity_pose_leaves_points() {
        let pc = PointCloud::from_xyz([[1.0, -2.0, 3.0], [0.5, 0.5, 0.5]]);
        let out = transform_points(&pc, &SensorPose::identity()).unwrap();
        assert_eq!(out, pc);
    }

    #[test]
    fn translation_and_rotation() {
        let pc = PointCloud::from_xyz([[0.0, 0.0, 0.0]]);
        let t = SensorPose::from_yaw(0.0, [1.0, 0.0, 0.0]);
        assert_eq!(transform_points(&pc, &t).unwrap().xyz(0), Vector3::new(1.0, 0.0, 0.0));

        let pc = PointCloud::from_xyz([[1.0, 0.0, 0.0]]);
        let r = SensorPose::from_yaw(FRAC_PI_2, [0.0; 3]);
        let p = transform_points(&pc, &r).unwrap().xyz(0);
        assert!((p - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn non_spatial_channels_survive_transforms() {
        let layout = ChannelLayout {
            intensity: true,
            time: false,
        };
        let pc = PointCloud::new(layout, vec![1.0, 2.0, 3.0, 0.7]).unwrap();
        let out = transform_points(&pc, &SensorPose::from_yaw(1.0, [3.0, 4.0, 5.0])).unwrap();
        assert_eq!(out.point(0)[3], 0.7);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let pc = PointCloud {
            layout: ChannelLayout::XYZ,
            data: vec![f64::NAN, 0.0, 0.0],
        };
        assert!(matches!(
            transform_points(&pc, &SensorPose::identity()),
            Err(Error::NonFinite(_))
        ));
        assert!(PointCloud::new(ChannelLayout::XYZ, vec![f64::INFINITY, 0.0, 0.0]).is_err());
    }

    #[test]
    fn box_frame_definition() {
        let b = Box3D::new([3.0, -1.0, 0.5], [4.0, 2.0, 1.5], 0.7, 0.9, ObjectClass::Vehicle);
        let ahead = b.center() + Vector3::new(0.7f64.cos(), 0.7f64.sin(), 0.0) * 2.0;
        let pc = PointCloud::from_xyz([[3.0, -1.0, 0.5], [ahead.x, ahead.y, ahead.z]]);
        let local = to_box_frame(&pc, &b).unwrap();
        assert!(local.xyz(0).norm() < 1e-12);
        assert!((local.xyz(1) - Vector3::new(2.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn non_orthonormal_pose_is_rejected() {
        let mut r = Matrix3::identity();
        r[(0, 1)] = 0.01;
        assert!(SensorPose::new(r, Vector3::zeros()).is_err());
        let reflect = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        assert!(SensorPose::new(reflect, Vector3::zeros()).is_err());
    }

    #[test]
    fn iou_basic_cases() {
        let a = unit(0.0, 0.0, 0.0);
        assert_eq!(bev_iou(&a, &a), 1.0);
        assert_eq!(iou_3d(&a, &a), 1.0);
        assert_eq!(bev_iou(&a, &unit(100.0, 0.0, 0.0)), 0.0);

        let rotated = unit(0.0, 0.0, PI / 4.0);
        let expected = 2.0_f64.sqrt() - 1.0;
        let inter = 2.0 * expected;
        assert!((bev_intersection_area(&a, &rotated) - inter).abs() < 1e-12);
        assert!((bev_iou(&a, &rotated) - inter / (2.0 - inter)).abs() < 1e-12);
    }

    #[test]
    fn axis_aligned_overlap() {
        let a = Box3D::new([0.0, 0.0, 0.0], [2.0, 2.0, 1.0], 0.0, 1.0, ObjectClass::Vehicle);
        let b = Box3D::new([1.0, 0.0, 0.0], [2.0, 2.0, 1.0], 0.0, 1.0, ObjectClass::Vehicle);
        assert!((bev_iou(&a, &b) - 2.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn iou_3d_vertical_cases() {
        let a = unit(0.0, 0.0, 0.0);
        let mut apart = a;
        apart.cz = 2.0;
        assert_eq!(iou_3d(&a, &apart), 0.0);
        let mut half = a;
        half.cz = 0.5;
        assert!((iou_3d(&a, &half) - 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_box_has_zero_iou() {
        let a = unit(0.0, 0.0, 0.0);
        let mut flat = a;
        flat.width = 1e-7;
        assert_eq!(bev_iou(&a, &flat), 0.0);
        assert_eq!(iou_3d(&flat, &flat), 0.0);
    }

    #[test]
    fn cyclic_mean_wraps_and_handles_trivial_cases() {
        let m = cyclic_mean(&[6.0, 0.5], &[1.0, 1.0]).unwrap();
        assert!((m.angle - 0.1084).abs() < 1e-3, "{}", m.angle);
        assert!(!m.ambiguous);
        assert!((cyclic_mean(&[1.3], &[2.0]).unwrap().angle - 1.3).abs() < 1e-15);
        assert!((cyclic_mean(&[0.1, 0.3], &[1.0, 1.0]).unwrap().angle - 0.2).abs() < 1e-9);
    }

    #[test]
    fn cyclic_mean_tie_and_errors() {
        let m = cyclic_mean(&[0.25, 0.25 + PI], &[1.0, 1.0]).unwrap();
        assert!(m.ambiguous);
        assert_eq!(m.angle, 0.25);
        assert!(cyclic_mean(&[], &[]).is_err());
        assert!(cyclic_mean(&[0.0], &[0.0]).is_err());
        assert!(cyclic_mean(&[0.0, 1.0], &[1.0, -1.0]).is_err());
        assert!(cyclic_mean(&[0.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn align_heading_rule() {
        assert!((align_heading(0.1, 0.0) - 0.1).abs() < 1e-15);
        assert!((align_heading(normalize_angle(PI + 0.1), 0.0) - 0.1).abs() < 1e-12);
        let eps = 0.01;
        assert!((align_heading(FRAC_PI_2 + eps, 0.0) - (-FRAC_PI_2 + eps)).abs() < 1e-12);
        assert!((align_heading(FRAC_PI_2 - eps, 0.0) - (FRAC_PI_2 - eps)).abs() < 1e-15);
    }

    #[test]
    fn pose_yaw_extraction_and_row_major_roundtrip() {
        let p = SensorPose::from_yaw(-2.5, [1.0, 2.0, 3.0]);
        assert!((p.yaw() + 2.5).abs() < 1e-12);
        let back = SensorPose::from_row_major(&p.to_row_major()).unwrap();
        assert_eq!(back, p);
        let id = p.compose(&p.inverse());
        assert!((id.rotation - Matrix3::identity()).abs().max() < 1e-12);
        assert!(id.translation.norm() < 1e-12);
    }

    #[test]
    fn contains_is_closed() {
        let b = Box3D::new([0.0; 3], [2.0, 2.0, 2.0], 0.0, 1.0, ObjectClass::Vehicle);
        assert!(b.contains(&Vector3::new(1.0, 1.0, 1.0), 0.0));
        assert!(!b.contains(&Vector3::new(1.0 + 1e-9, 1.0, 1.0), 0.0));
    }
}
