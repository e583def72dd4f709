//! Object-centric refinement of extracted tracks into final labels.
//!
//! Two backends share the same window construction: a geometric estimator
//! (bounding-rectangle fit for static objects, local linear smoothing of
//! the box sequence for dynamic ones) and the trained networks.

use nalgebra::Vector3;
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{tta_angles, wbf_clusters, SizeClusters, WbfParams};
use crate::error::{Error, Result};
use crate::extraction::ObjectTrackData;
use crate::geometry::{align_heading, angle_diff, box_from_frame, cyclic_mean, normalize_angle, Box3D, ObjectClass, PointCloud};
use crate::io::{AutoLabelSet, Label};
use crate::motion_state::MotionState;
use crate::neural::train::{cloud_in_frame, dynamic_input, subsample, SampleConfig};
use crate::neural::{RefinerModel, Weights};
use crate::synth::keyed_rng;

const TAG_KEYFRAME: u64 = 0x201;
const TAG_INPUT: u64 = 0x202;

/// Margin of the geometric foreground test around the reference box.
pub const GEOMETRIC_SEGMENT_MARGIN: f64 = 0.2;
/// Margin of the first geometric pass, wide enough that a keyframe a few
/// degrees off does not clip the ends of long objects.
pub const COARSE_SEGMENT_MARGIN: f64 = 0.6;
/// Rectangle area repeats every quarter turn, so this window covers every
/// orientation and resolves to the one nearest the initial heading.
const HEADING_WINDOW: f64 = 45.0 * std::f64::consts::PI / 180.0;
const HEADING_STEP: f64 = 0.5 * std::f64::consts::PI / 180.0;
const MIN_FIT_POINTS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyframeStrategy {
    Random { seed: u64 },
    Average,
    HighestScore,
}

impl Default for KeyframeStrategy {
    fn default() -> Self {
        KeyframeStrategy::HighestScore
    }
}

/// Frames merged for a static object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StaticContext {
    All,
    /// Frames within this many frames of the keyframe.
    Window(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Geometric,
    Neural,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinerConfig {
    pub backend: BackendKind,
    pub passes: usize,
    pub tta: bool,
    pub keyframe: KeyframeStrategy,
    pub context: StaticContext,
    /// Point window radius `r`.
    pub point_radius: usize,
    /// Box window radius `s`.
    pub box_radius: usize,
    pub causal: bool,
    pub static_points: usize,
    pub frame_points: usize,
    pub vehicle_fusion: WbfParams,
    pub pedestrian_fusion: WbfParams,
    pub seed: u64,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        let fusion = |class| WbfParams {
            score_floor: 0.0,
            ..WbfParams::for_class(class)
        };
        RefinerConfig {
            backend: BackendKind::Geometric,
            passes: 2,
            tta: false,
            keyframe: KeyframeStrategy::HighestScore,
            context: StaticContext::All,
            point_radius: 2,
            box_radius: 50,
            causal: false,
            static_points: 4096,
            frame_points: 1024,
            vehicle_fusion: fusion(ObjectClass::Vehicle),
            pedestrian_fusion: fusion(ObjectClass::Pedestrian),
            seed: 0,
        }
    }
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.passes == 0 || self.static_points == 0 || self.frame_points == 0 {
            return Err(Error::invalid("refiner passes and point budgets must be at least 1"));
        }
        Ok(())
    }

    pub fn fusion(&self, class: ObjectClass) -> &WbfParams {
        match class {
            ObjectClass::Vehicle => &self.vehicle_fusion,
            ObjectClass::Pedestrian => &self.pedestrian_fusion,
        }
    }

    fn sample_config(&self) -> SampleConfig {
        SampleConfig {
            static_points: self.static_points,
            frame_points: self.frame_points,
            point_radius: self.point_radius,
            box_radius: self.box_radius,
            causal: self.causal,
            ..SampleConfig::default()
        }
    }
}

/// The estimator behind a refinement.
#[derive(Debug, Clone, Copy)]
pub enum Backend<'a> {
    Geometric,
    Neural(&'a RefinerModel),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineFlag {
    /// Fewer than three foreground points; the reference box was kept.
    LowEvidence,
    /// No points at all; the keyframe box was passed through.
    EmptyCloud,
    /// The network found no foreground.
    EmptyForeground,
    /// No network for this class; the geometric backend was used.
    NoModel,
}

/// The keyframe box and, when it is one, the track position it came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keyframe {
    pub box3d: Box3D,
    pub position: Option<usize>,
}

pub fn select_keyframe(data: &ObjectTrackData, strategy: KeyframeStrategy) -> Result<Keyframe> {
    if data.is_empty() {
        return Err(Error::invalid(format!("track {} has no frames", data.object_id)));
    }
    let at = |p: usize| Keyframe {
        box3d: data.frames[p].box3d,
        position: Some(p),
    };
    Ok(match strategy {
        KeyframeStrategy::Random { seed } => {
            let mut rng = keyed_rng(seed, TAG_KEYFRAME, data.object_id, 0);
            at(rng.random_range(0..data.len()))
        }
        KeyframeStrategy::HighestScore => {
            let mut best = 0;
            for (i, f) in data.frames.iter().enumerate() {
                if f.score() > data.frames[best].score() {
                    best = i;
                }
            }
            at(best)
        }
        KeyframeStrategy::Average => {
            let n = data.len() as f64;
            let boxes = data.boxes();
            let mean = |f: &dyn Fn(&Box3D) -> f64| boxes.iter().map(f).sum::<f64>() / n;
            let headings: Vec<f64> = boxes.iter().map(|b| b.heading).collect();
            let heading = cyclic_mean(&headings, &vec![1.0; boxes.len()])?.angle;
            Keyframe {
                box3d: Box3D {
                    cx: mean(&|b| b.cx),
                    cy: mean(&|b| b.cy),
                    cz: mean(&|b| b.cz),
                    length: mean(&|b| b.length),
                    width: mean(&|b| b.width),
                    height: mean(&|b| b.height),
                    heading,
                    score: mean(&|b| b.score),
                    class: data.class,
                },
                position: None,
            }
        }
    })
}

/// Convex hull vertices of `xy` (monotone chain). Projections reach their
/// extremes on the hull, so bounding rectangles only need these.
fn convex_hull(mut xy: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    xy.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    xy.dedup();
    if xy.len() < 3 {
        return xy;
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * xy.len());
    for pass in 0..2 {
        let start = hull.len();
        let it: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 { Box::new(xy.iter()) } else { Box::new(xy.iter().rev()) };
        for &p in it {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Area of the bounding rectangle of `xy` along `heading`, and its bounds.
fn rectangle(xy: &[[f64; 2]], heading: f64) -> (f64, [f64; 4]) {
    let (s, c) = heading.sin_cos();
    let mut b = [f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY];
    for p in xy {
        let u = c * p[0] + s * p[1];
        let v = -s * p[0] + c * p[1];
        b[0] = b[0].min(u);
        b[1] = b[1].max(u);
        b[2] = b[2].min(v);
        b[3] = b[3].max(v);
    }
    ((b[1] - b[0]) * (b[3] - b[2]), b)
}

/// Fitted box and whether there was too little evidence to fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fit {
    pub box3d: Box3D,
    pub low_evidence: bool,
}

/// Points within this distance of an edge count as lying on it.
const CLOSENESS_FLOOR: f64 = 0.01;
const FIT_SAMPLE_POINTS: usize = 512;
/// Weight of the rectangle area, per square meter, small enough to only
/// break closeness ties (points at the corners alone tie everywhere).
const AREA_TIE_WEIGHT: f64 = 1e-3;

/// Points this close to an edge are used to place it.
const EDGE_BAND: f64 = 0.2;
/// Points this close to the top are roof returns, spread over the whole
/// footprint, and are not used to place edges.
const ROOF_BAND: f64 = 0.2;
const MIN_EDGE_POINTS: usize = 3;

/// Moves each rectangle edge to the mean offset of the points nearest to
/// it, so zero-mean surface noise does not inflate the box. Edges without
/// enough points keep their bound.
fn fit_edges(xy: &[[f64; 2]], heading: f64, bounds: [f64; 4]) -> [f64; 4] {
    let (s, c) = heading.sin_cos();
    let mut sum = [0.0; 4];
    let mut count = [0usize; 4];
    for p in xy {
        let u = c * p[0] + s * p[1];
        let v = -s * p[0] + c * p[1];
        let d = [u - bounds[0], bounds[1] - u, v - bounds[2], bounds[3] - v];
        let k = (0..4).min_by(|&a, &b| d[a].total_cmp(&d[b])).unwrap_or(0);
        if d[k] < EDGE_BAND {
            sum[k] += if k < 2 { u } else { v };
            count[k] += 1;
        }
    }
    let mut out = bounds;
    for k in 0..4 {
        if count[k] >= MIN_EDGE_POINTS {
            out[k] = sum[k] / count[k] as f64;
        }
    }
    if out[1] - out[0] <= 0.0 {
        out[0] = bounds[0];
        out[1] = bounds[1];
    }
    if out[3] - out[2] <= 0.0 {
        out[2] = bounds[2];
        out[3] = bounds[3];
    }
    out
}

/// Negative L-shape closeness: each point scores the inverse distance to
/// the nearer edge of the bounding rectangle along `heading`.
fn closeness_cost(hull: &[[f64; 2]], sample: &[[f64; 2]], heading: f64) -> f64 {
    let (area, b) = rectangle(hull, heading);
    let (s, c) = heading.sin_cos();
    let mut total = 0.0;
    for p in sample {
        let u = c * p[0] + s * p[1];
        let v = -s * p[0] + c * p[1];
        let du = (u - b[0]).min(b[1] - u);
        let dv = (v - b[2]).min(b[3] - v);
        total += 1.0 / du.min(dv).max(CLOSENESS_FLOOR);
    }
    AREA_TIE_WEIGHT * area - total
}

/// Bounding rectangle within ±45° of `init.heading` whose edges the points
/// hug most closely, edges placed at the mean of their nearby wall points,
/// extents clamped to ±50% of the nearest size cluster, center at the
/// midpoint.
/// Keeps `init` (flagged) with fewer than three points.
pub fn geometric_box_fit(points: &PointCloud, init: &Box3D, class: ObjectClass) -> Fit {
    if points.len() < MIN_FIT_POINTS {
        return Fit {
            box3d: *init,
            low_evidence: true,
        };
    }
    // Work relative to the initial center so large coordinates cost nothing.
    let all: Vec<[f64; 2]> = (0..points.len())
        .map(|i| {
            let p = points.xyz(i);
            [p.x - init.cx, p.y - init.cy]
        })
        .collect();
    let stride = all.len().div_ceil(FIT_SAMPLE_POINTS);
    let sample: Vec<[f64; 2]> = all.iter().step_by(stride).copied().collect();
    let hull = convex_hull(all.clone());
    let cost = |h: f64| closeness_cost(&hull, &sample, h);
    let steps = (HEADING_WINDOW / HEADING_STEP).round() as i64;
    let mut best = (f64::INFINITY, init.heading);
    for k in -steps..=steps {
        let h = init.heading + k as f64 * HEADING_STEP;
        let c = cost(h);
        if c < best.0 {
            best = (c, h);
        }
    }
    // Golden-section refinement inside the winning grid cell.
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let (mut lo, mut hi) = (best.1 - HEADING_STEP, best.1 + HEADING_STEP);
    let mut a = hi - phi * (hi - lo);
    let mut b = lo + phi * (hi - lo);
    let (mut fa, mut fb) = (cost(a), cost(b));
    for _ in 0..40 {
        if fa < fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - phi * (hi - lo);
            fa = cost(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + phi * (hi - lo);
            fb = cost(b);
        }
    }
    let mid = 0.5 * (lo + hi);
    let heading = if cost(mid) <= best.0 { mid } else { best.1 };
    let (zmin, zmax) = (0..points.len()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), i| {
        let z = points.xyz(i).z;
        (lo.min(z), hi.max(z))
    });
    let walls: Vec<[f64; 2]> = all.iter().enumerate().filter(|(i, _)| points.xyz(*i).z < zmax - ROOF_BAND).map(|(_, p)| *p).collect();
    let r = fit_edges(if walls.len() >= MIN_FIT_POINTS { &walls } else { &all }, heading, rectangle(&hull, heading).1);
    let measured = [r[1] - r[0], r[3] - r[2], zmax - zmin];
    let cluster = SizeClusters::for_class(class)[SizeClusters::nearest(class, measured)];
    let size: Vec<f64> = (0..3).map(|k| measured[k].clamp(0.5 * cluster[k], 1.5 * cluster[k])).collect();
    let (u, v) = (0.5 * (r[0] + r[1]), 0.5 * (r[2] + r[3]));
    let (s, c) = heading.sin_cos();
    Fit {
        box3d: Box3D {
            cx: init.cx + c * u - s * v,
            cy: init.cy + s * u + c * v,
            cz: 0.5 * (zmin + zmax),
            length: size[0],
            width: size[1],
            height: size[2],
            heading: normalize_angle(heading),
            score: init.score,
            class,
        },
        low_evidence: false,
    }
}

/// Foreground of `points` (world frame) around `reference`.
pub fn segment_foreground(points: &PointCloud, reference: &Box3D, backend: &Backend<'_>) -> Vec<bool> {
    let net = match backend {
        Backend::Neural(m) => m.static_net(reference.class),
        Backend::Geometric => None,
    };
    match net {
        Some((net, w)) => net.segment(w, &cloud_in_frame(points, reference)),
        None => box_mask(points, reference, GEOMETRIC_SEGMENT_MARGIN),
    }
}

fn box_mask(points: &PointCloud, reference: &Box3D, margin: f64) -> Vec<bool> {
    (0..points.len()).map(|i| reference.contains(&points.xyz(i), margin)).collect()
}

/// A refined static box (world frame) and what happened on the way.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticRefinement {
    pub box3d: Box3D,
    pub flags: Vec<RefineFlag>,
}

fn context_positions(data: &ObjectTrackData, key: &Keyframe, context: StaticContext, last: Option<usize>) -> Vec<usize> {
    let limit = last.unwrap_or(data.len() - 1);
    match context {
        StaticContext::All => (0..=limit).collect(),
        StaticContext::Window(k) => {
            let center = key.position.unwrap_or_else(|| {
                (0..=limit)
                    .min_by_key(|&p| (data.frames[p].box3d.center() - key.box3d.center()).norm().to_bits())
                    .unwrap_or(0)
            });
            let f0 = data.frames[center].frame;
            (0..=limit).filter(|&p| data.frames[p].frame.abs_diff(f0) <= k).collect()
        }
    }
}

fn merged_cloud(data: &ObjectTrackData, positions: &[usize]) -> PointCloud {
    let mut cloud = PointCloud::empty(data.frames[0].points.layout());
    for &p in positions {
        // Layouts within one track always agree.
        let _ = cloud.extend(&data.frames[p].points);
    }
    cloud
}

/// Yaw rotation about the vertical axis through `pivot`.
fn rotate_about(p: Vector3<f64>, pivot: &Box3D, angle: f64) -> Vector3<f64> {
    let (s, c) = angle.sin_cos();
    let (dx, dy) = (p.x - pivot.cx, p.y - pivot.cy);
    Vector3::new(pivot.cx + c * dx - s * dy, pivot.cy + s * dx + c * dy, p.z)
}

fn rotate_box(b: &Box3D, pivot: &Box3D, angle: f64) -> Box3D {
    let c = rotate_about(b.center(), pivot, angle);
    Box3D {
        heading: normalize_angle(b.heading + angle),
        ..b.with_center(c)
    }
}

/// One refinement without augmentation; the cloud is in world frame.
fn refine_cloud(
    cloud: &PointCloud,
    key: &Box3D,
    class: ObjectClass,
    cfg: &RefinerConfig,
    backend: &Backend<'_>,
    object_id: u64,
    flags: &mut Vec<RefineFlag>,
) -> Result<Box3D> {
    if let Backend::Neural(model) = backend {
        match model.static_net(class) {
            Some((net, w)) => return neural_static(net, w, cloud, key, cfg, object_id, flags),
            None => flags.push(RefineFlag::NoModel),
        }
    }
    let mut current = *key;
    for pass in 0..cfg.passes {
        let margin = if pass == 0 { COARSE_SEGMENT_MARGIN } else { GEOMETRIC_SEGMENT_MARGIN };
        let mask = box_mask(cloud, &current, margin);
        let fit = geometric_box_fit(&cloud.select(&mask), &current, class);
        if fit.low_evidence {
            flags.push(RefineFlag::LowEvidence);
            break;
        }
        current = fit.box3d;
    }
    Ok(current)
}

fn neural_static(
    net: &crate::neural::StaticNet,
    w: &Weights,
    cloud: &PointCloud,
    key: &Box3D,
    cfg: &RefinerConfig,
    object_id: u64,
    flags: &mut Vec<RefineFlag>,
) -> Result<Box3D> {
    let mut rng = keyed_rng(cfg.seed, TAG_INPUT, object_id, u64::MAX);
    let local: Array2<f64> = subsample(cloud_in_frame(cloud, key), cfg.static_points, &mut rng);
    let pred = net.predict(w, &local, cfg.passes)?;
    if pred.empty_foreground {
        flags.push(RefineFlag::EmptyForeground);
    }
    Ok(box_from_frame(&pred.box3d, key).with_score(key.score))
}

fn refine_with_tta(
    cloud: &PointCloud,
    key: &Box3D,
    class: ObjectClass,
    cfg: &RefinerConfig,
    backend: &Backend<'_>,
    object_id: u64,
    flags: &mut Vec<RefineFlag>,
) -> Result<Box3D> {
    if !cfg.tta {
        return refine_cloud(cloud, key, class, cfg, backend, object_id, flags);
    }
    let mut outputs = Vec::new();
    for angle in tta_angles() {
        let mut rotated = PointCloud::empty(cloud.layout());
        for (i, row) in cloud.rows().enumerate() {
            let q = rotate_about(cloud.xyz(i), key, angle);
            let mut r = row.to_vec();
            r[..3].copy_from_slice(&[q.x, q.y, q.z]);
            rotated.push(&r);
        }
        let k = rotate_box(key, key, angle);
        let out = refine_cloud(&rotated, &k, class, cfg, backend, object_id, flags)?;
        outputs.push(rotate_box(&out, key, -angle).with_score(key.score));
    }
    flags.sort();
    flags.dedup();
    let clusters = wbf_clusters(&outputs, cfg.fusion(class));
    let best = clusters
        .iter()
        .enumerate()
        .max_by(|(i, a), (j, b)| a.members.len().cmp(&b.members.len()).then(j.cmp(i)))
        .map(|(_, c)| c.fused.with_score(key.score));
    Ok(best.unwrap_or(outputs[0]))
}

/// One world-frame box for a static object.
pub fn refine_static(data: &ObjectTrackData, cfg: &RefinerConfig, backend: &Backend<'_>) -> Result<StaticRefinement> {
    refine_static_upto(data, cfg, backend, None)
}

fn refine_static_upto(data: &ObjectTrackData, cfg: &RefinerConfig, backend: &Backend<'_>, last: Option<usize>) -> Result<StaticRefinement> {
    cfg.validate()?;
    let view;
    let data = match last {
        Some(l) => {
            view = ObjectTrackData {
                frames: data.frames[..=l].to_vec(),
                ..data.clone()
            };
            &view
        }
        None => data,
    };
    let key = select_keyframe(data, cfg.keyframe)?;
    let positions = context_positions(data, &key, cfg.context, None);
    let cloud = merged_cloud(data, &positions);
    let mut flags = Vec::new();
    if cloud.is_empty() {
        return Ok(StaticRefinement {
            box3d: key.box3d,
            flags: vec![RefineFlag::EmptyCloud],
        });
    }
    let b = refine_with_tta(&cloud, &key.box3d, data.class, cfg, backend, data.object_id, &mut flags)?;
    flags.sort();
    flags.dedup();
    Ok(StaticRefinement {
        box3d: b.with_score(key.box3d.score),
        flags,
    })
}

/// Per-frame boxes of a static object from history only: frame `t` is
/// refined from the track up to and including `t`.
pub fn refine_static_causal(data: &ObjectTrackData, cfg: &RefinerConfig, backend: &Backend<'_>) -> Result<Vec<(usize, StaticRefinement)>> {
    (0..data.len())
        .map(|p| Ok((data.frames[p].frame, refine_static_upto(data, cfg, backend, Some(p))?)))
        .collect()
}

fn tricube(u: f64) -> f64 {
    let a = 1.0 - u.abs().powi(3);
    if a <= 0.0 {
        0.0
    } else {
        a * a * a
    }
}

/// Weighted least-squares line through `(t, y)` evaluated at `t = 0`.
fn local_linear(ts: &[f64], ys: &[f64], ws: &[f64]) -> f64 {
    let sw: f64 = ws.iter().sum();
    let mt = ts.iter().zip(ws).map(|(t, w)| t * w).sum::<f64>() / sw;
    let my = ys.iter().zip(ws).map(|(y, w)| y * w).sum::<f64>() / sw;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for i in 0..ts.len() {
        let dt = ts[i] - mt;
        sxy += ws[i] * dt * (ys[i] - my);
        sxx += ws[i] * dt * dt;
    }
    if sxx <= 1e-12 * sw {
        return my;
    }
    my - (sxy / sxx) * mt
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Track-wide median of the detector extents.
pub fn median_size(data: &ObjectTrackData) -> [f64; 3] {
    let b = data.boxes();
    [
        median(b.iter().map(|x| x.length).collect()),
        median(b.iter().map(|x| x.width).collect()),
        median(b.iter().map(|x| x.height).collect()),
    ]
}

/// A refined box at one frame of a dynamic object.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicRefinement {
    pub frame: usize,
    pub box3d: Box3D,
    pub flags: Vec<RefineFlag>,
}

/// Geometric estimate at track position `pos`: tricube local linear
/// regression of center and (flip-aligned) heading over the box window,
/// extents from `size`.
fn smooth_at(data: &ObjectTrackData, pos: usize, cfg: &RefinerConfig, size: [f64; 3]) -> Box3D {
    let t0 = data.frames[pos].frame as i64;
    let center = data.frames[pos].box3d;
    let s = cfg.box_radius as i64;
    let hi = if cfg.causal { 0 } else { s };
    let window: Vec<usize> = (0..data.len())
        .filter(|&p| {
            let d = data.frames[p].frame as i64 - t0;
            d >= -s && d <= hi
        })
        .collect();
    let ts: Vec<f64> = window.iter().map(|&p| data.frames[p].timestamp - data.frames[pos].timestamp).collect();
    let span = ts.iter().fold(0.0f64, |m, t| m.max(t.abs()));
    // Slightly wider than the window so its ends keep a small weight.
    let bandwidth = 1.1 * span + 1e-9;
    let ws: Vec<f64> = ts.iter().map(|t| tricube(t / bandwidth)).collect();
    let coord = |f: &dyn Fn(&Box3D) -> f64| {
        let ys: Vec<f64> = window.iter().map(|&p| f(&data.frames[p].box3d) - f(&center)).collect();
        f(&center) + local_linear(&ts, &ys, &ws)
    };
    let heading_offsets: Vec<f64> = window
        .iter()
        .map(|&p| {
            let h = data.frames[p].box3d.heading;
            angle_diff(align_heading(h, center.heading), center.heading)
        })
        .collect();
    Box3D {
        cx: coord(&|b| b.cx),
        cy: coord(&|b| b.cy),
        cz: coord(&|b| b.cz),
        length: size[0],
        width: size[1],
        height: size[2],
        heading: normalize_angle(center.heading + local_linear(&ts, &heading_offsets, &ws)),
        score: center.score,
        class: data.class,
    }
}

/// Refined box at track position `pos` (world frame, frame-T detector score).
pub fn refine_dynamic(data: &ObjectTrackData, pos: usize, cfg: &RefinerConfig, backend: &Backend<'_>) -> Result<DynamicRefinement> {
    refine_dynamic_with(data, pos, cfg, backend, &median_size(data))
}

fn refine_dynamic_with(data: &ObjectTrackData, pos: usize, cfg: &RefinerConfig, backend: &Backend<'_>, size: &[f64; 3]) -> Result<DynamicRefinement> {
    if pos >= data.len() {
        return Err(Error::invalid(format!("position {pos} outside track {}", data.object_id)));
    }
    let frame = data.frames[pos].frame;
    let reference = data.frames[pos].box3d;
    let mut flags = Vec::new();
    if let Backend::Neural(model) = backend {
        match model.dynamic_net(data.class) {
            Some((net, w)) => {
                let mut rng = keyed_rng(cfg.seed, TAG_INPUT, data.object_id, frame as u64);
                let (points, _, tokens) = dynamic_input(data, pos, &cfg.sample_config(), false, &mut rng)?;
                let pred = net.predict(w, &points, &tokens)?;
                if pred.empty_foreground {
                    flags.push(RefineFlag::EmptyForeground);
                }
                return Ok(DynamicRefinement {
                    frame,
                    box3d: box_from_frame(&pred.box3d, &reference).with_score(reference.score),
                    flags,
                });
            }
            None => flags.push(RefineFlag::NoModel),
        }
    }
    Ok(DynamicRefinement {
        frame,
        box3d: smooth_at(data, pos, cfg, *size),
        flags,
    })
}

/// Everything refined for one object.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectRefinement {
    pub object_id: u64,
    pub motion_state: MotionState,
    pub boxes: Vec<(usize, Box3D)>,
    pub flags: Vec<RefineFlag>,
}

/// Static objects get one box broadcast over their frames (per-frame
/// history boxes when causal), dynamic objects one box per frame,
/// indeterminate ones keep their detector boxes.
pub fn refine_object(data: &ObjectTrackData, cfg: &RefinerConfig, backend: &Backend<'_>) -> Result<ObjectRefinement> {
    let mut flags = Vec::new();
    let boxes = match data.motion_state {
        _ if data.is_empty() => Vec::new(),
        MotionState::Indeterminate => data.frames.iter().map(|f| (f.frame, f.box3d)).collect(),
        MotionState::Static if cfg.causal => refine_static_causal(data, cfg, backend)?
            .into_iter()
            .map(|(f, r)| {
                flags.extend(r.flags);
                (f, r.box3d)
            })
            .collect(),
        MotionState::Static => {
            let r = refine_static(data, cfg, backend)?;
            flags = r.flags;
            data.frames.iter().map(|f| (f.frame, r.box3d)).collect()
        }
        MotionState::Dynamic => {
            let size = median_size(data);
            let mut out = Vec::with_capacity(data.len());
            for p in 0..data.len() {
                let r = refine_dynamic_with(data, p, cfg, backend, &size)?;
                flags.extend(r.flags);
                out.push((r.frame, r.box3d));
            }
            out
        }
    };
    flags.sort();
    flags.dedup();
    Ok(ObjectRefinement {
        object_id: data.object_id,
        motion_state: data.motion_state,
        boxes,
        flags,
    })
}

/// Final label set; fails on a duplicate `(frame, object_id)`.
pub fn assemble_labels(sequence_id: &str, n_frames: usize, refinements: &[ObjectRefinement]) -> Result<AutoLabelSet> {
    let mut set = AutoLabelSet::new(sequence_id, n_frames);
    for r in refinements {
        for &(frame, box3d) in &r.boxes {
            set.insert(
                frame,
                Label {
                    object_id: r.object_id,
                    motion_state: r.motion_state,
                    box3d,
                },
            )?;
        }
    }
    set.sort();
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extraction::TrackFrame;

    fn vbox(c: [f64; 3], heading: f64, score: f64) -> Box3D {
        Box3D::new(c, [4.6, 1.9, 1.6], heading, score, ObjectClass::Vehicle)
    }

    fn track(boxes: &[Box3D], state: MotionState) -> ObjectTrackData {
        ObjectTrackData {
            object_id: 7,
            class: ObjectClass::Vehicle,
            motion_state: state,
            frames: boxes
                .iter()
                .enumerate()
                .map(|(i, b)| TrackFrame {
                    frame: i,
                    timestamp: i as f64 * 0.1,
                    points: PointCloud::from_xyz(b.corners()),
                    box3d: *b,
                    ground_truth: None,
                })
                .collect(),
        }
    }

    #[test]
    fn hull_keeps_rectangle_bounds() {
        let mut rng = keyed_rng(5, 0, 0, 0);
        let pts: Vec<[f64; 2]> = (0..300).map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-1.0..1.0)]).collect();
        let hull = convex_hull(pts.clone());
        assert!(hull.len() < 40);
        for k in 0..32 {
            let h = k as f64 * 0.1;
            let (a, b) = (rectangle(&pts, h), rectangle(&hull, h));
            assert!((a.0 - b.0).abs() < 1e-12);
        }
        let square = convex_hull(vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.5, 0.5], [0.5, 0.0]]);
        assert_eq!(square.len(), 4);
        assert_eq!(convex_hull(vec![[1.0, 1.0], [1.0, 1.0]]), vec![[1.0, 1.0]]);
    }

    #[test]
    fn keyframe_strategies() {
        let one = track(&[vbox([1.0, 2.0, 0.8], 0.3, 0.4)], MotionState::Static);
        for s in [KeyframeStrategy::Random { seed: 3 }, KeyframeStrategy::Average, KeyframeStrategy::HighestScore] {
            let k = select_keyframe(&one, s).unwrap().box3d;
            assert!((k.cx - 1.0).abs() < 1e-12 && (k.heading - 0.3).abs() < 1e-12);
        }
        let two = track(&[vbox([0.0; 3], 0.0, 0.9), vbox([2.0, 0.0, 0.0], 0.0, 0.3)], MotionState::Static);
        assert_eq!(select_keyframe(&two, KeyframeStrategy::HighestScore).unwrap().position, Some(0));
        let avg = select_keyframe(&two, KeyframeStrategy::Average).unwrap().box3d;
        assert_eq!([avg.cx, avg.cy, avg.cz], [1.0, 0.0, 0.0]);
        let tie = track(&[vbox([0.0; 3], 0.0, 0.5), vbox([2.0, 0.0, 0.0], 0.0, 0.5)], MotionState::Static);
        assert_eq!(select_keyframe(&tie, KeyframeStrategy::HighestScore).unwrap().position, Some(0));
    }

    #[test]
    fn fit_recovers_box_from_corners() {
        let gt = vbox([10.0, -3.0, 0.8], 0.4, 0.9);
        let init = vbox([10.3, -2.8, 0.8], 0.4 + 0.2, 0.7);
        let fit = geometric_box_fit(&PointCloud::from_xyz(gt.corners()), &init, ObjectClass::Vehicle);
        assert!(!fit.low_evidence);
        assert!(crate::geometry::iou_3d(&fit.box3d, &gt) >= 0.99);
        assert_eq!(fit.box3d.score, 0.7);
    }

    #[test]
    fn roof_points_do_not_pull_an_unseen_edge_inward() {
        // A 4.8 x 1.8 x 1.5 box at the origin seen from -y: the near long
        // wall, both short walls and a uniform roof. The far wall has no points.
        let mut pts = Vec::new();
        for i in 0..=48 {
            let u = -2.4 + 0.1 * i as f64;
            for k in 0..=15 {
                pts.push([u, -0.9, 0.1 * k as f64]);
            }
            for j in 0..=18 {
                pts.push([u, -0.9 + 0.1 * j as f64, 1.5]);
            }
        }
        for j in 0..=18 {
            for k in 0..=15 {
                pts.push([-2.4, -0.9 + 0.1 * j as f64, 0.1 * k as f64]);
                pts.push([2.4, -0.9 + 0.1 * j as f64, 0.1 * k as f64]);
            }
        }
        let gt = Box3D::new([0.0, 0.0, 0.75], [4.8, 1.8, 1.5], 0.0, 0.9, ObjectClass::Vehicle);
        let fit = geometric_box_fit(&PointCloud::from_xyz(pts), &vbox([0.2, 0.1, 0.75], 0.05, 0.9), ObjectClass::Vehicle).box3d;
        assert!((fit.width - 1.8).abs() < 1e-6, "width {}", fit.width);
        assert!((fit.length - 4.8).abs() < 1e-6, "length {}", fit.length);
        assert!(crate::geometry::bev_iou(&fit, &gt) > 0.999);
    }

    #[test]
    fn fit_with_few_points_keeps_init() {
        let init = vbox([1.0, 1.0, 0.8], 0.0, 0.5);
        let fit = geometric_box_fit(&PointCloud::from_xyz([[1.0, 1.0, 0.0], [2.0, 1.0, 0.0]]), &init, ObjectClass::Vehicle);
        assert!(fit.low_evidence);
        assert_eq!(fit.box3d, init);
        assert!(geometric_box_fit(&PointCloud::empty(crate::geometry::ChannelLayout::XYZ), &init, ObjectClass::Vehicle).low_evidence);
    }

    #[test]
    fn fit_is_yaw_equivariant() {
        let gt = vbox([5.0, 2.0, 0.8], 0.1, 0.9);
        let init = vbox([5.2, 2.1, 0.8], 0.05, 0.9);
        let pts: Vec<[f64; 3]> = gt.corners().iter().chain(&[[5.0, 2.0, 1.0], [4.0, 2.5, 0.3]]).copied().collect();
        let base = geometric_box_fit(&PointCloud::from_xyz(pts.clone()), &init, ObjectClass::Vehicle).box3d;
        let phi = 0.7;
        let origin = Box3D::new([0.0; 3], [1.0; 3], 0.0, 1.0, ObjectClass::Vehicle);
        let rp: Vec<[f64; 3]> = pts
            .iter()
            .map(|p| {
                let q = rotate_about(Vector3::new(p[0], p[1], p[2]), &origin, phi);
                [q.x, q.y, q.z]
            })
            .collect();
        let rotated = geometric_box_fit(&PointCloud::from_xyz(rp), &rotate_box(&init, &origin, phi), ObjectClass::Vehicle).box3d;
        let expect = rotate_box(&base, &origin, phi);
        for (a, b) in [
            (rotated.cx, expect.cx),
            (rotated.cy, expect.cy),
            (rotated.cz, expect.cz),
            (rotated.length, expect.length),
            (rotated.width, expect.width),
            (angle_diff(rotated.heading, expect.heading), 0.0),
        ] {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn geometric_segmentation() {
        let r = vbox([0.0; 3], 0.0, 1.0);
        let near = PointCloud::from_xyz([[0.0; 3], [0.0; 3]]);
        assert!(segment_foreground(&near, &r, &Backend::Geometric).iter().all(|&m| m));
        let far = PointCloud::from_xyz([[12.0, 0.0, 0.0], [0.0, -11.0, 0.0]]);
        assert!(segment_foreground(&far, &r, &Backend::Geometric).iter().all(|&m| !m));
    }

    #[test]
    fn static_object_broadcasts_one_box() {
        let boxes: Vec<Box3D> = (0..10).map(|_| vbox([3.0, 1.0, 0.8], 0.2, 0.8)).collect();
        let d = track(&boxes, MotionState::Static);
        let r = refine_object(&d, &RefinerConfig::default(), &Backend::Geometric).unwrap();
        assert_eq!(r.boxes.len(), 10);
        assert!(r.boxes.windows(2).all(|w| w[0].1 == w[1].1));
        let set = assemble_labels("s", 10, &[r]).unwrap();
        assert_eq!(set.len(), 10);
        assert!(assemble_labels("s", 10, &[]).unwrap().is_empty());
    }

    #[test]
    fn smoothing_is_exact_on_constant_velocity() {
        let boxes: Vec<Box3D> = (0..30).map(|i| vbox([1.0 + 0.8 * i as f64, 2.0 - 0.1 * i as f64, 0.8], -0.124, 0.9)).collect();
        let d = track(&boxes, MotionState::Dynamic);
        for causal in [false, true] {
            let cfg = RefinerConfig {
                causal,
                box_radius: 5,
                ..RefinerConfig::default()
            };
            let r = refine_object(&d, &cfg, &Backend::Geometric).unwrap();
            for ((_, got), want) in r.boxes.iter().zip(&boxes) {
                assert!((got.cx - want.cx).abs() < 1e-6 && (got.cy - want.cy).abs() < 1e-6);
                assert!((got.heading - want.heading).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn duplicate_labels_are_rejected() {
        let r = ObjectRefinement {
            object_id: 1,
            motion_state: MotionState::Static,
            boxes: vec![(0, vbox([0.0; 3], 0.0, 1.0)), (0, vbox([0.0; 3], 0.0, 1.0))],
            flags: vec![],
        };
        assert!(assemble_labels("s", 1, &[r]).is_err());
    }

    #[test]
    fn tta_keeps_geometric_result() {
        let gt = vbox([8.0, 3.0, 0.8], 0.3, 0.9);
        let d = track(&[gt, gt], MotionState::Static);
        let plain = refine_static(&d, &RefinerConfig::default(), &Backend::Geometric).unwrap().box3d;
        let tta = refine_static(
            &d,
            &RefinerConfig {
                tta: true,
                ..RefinerConfig::default()
            },
            &Backend::Geometric,
        )
        .unwrap()
        .box3d;
        assert!(crate::geometry::iou_3d(&plain, &tta) > 0.999);
    }
}
