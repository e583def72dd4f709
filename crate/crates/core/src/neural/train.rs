//! Sample construction, augmentation, Adam and the epoch loop.

use ndarray::{Array2, Axis};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::nets::{DynamicNet, DynamicSample, HeadWeights, StaticNet, StaticSample, Weights, BOX_TOKEN_CHANNELS, DYNAMIC_POINT_CHANNELS};
use crate::codec::LossWeights;
use crate::error::{Error, Result};
use crate::extraction::{dynamic_to_static_augment, ObjectTrackData};
use crate::geometry::{box_to_frame, normalize_angle, Box3D, PointCloud};
use crate::motion_state::MotionState;
use crate::par::Executor;
use crate::synth::keyed_rng;

const TAG_SHUFFLE: u64 = 0x101;
const TAG_STATIC_SAMPLE: u64 = 0x102;
const TAG_DYNAMIC_SAMPLE: u64 = 0x103;

/// Temporal encoding step per frame of offset.
pub const TIME_STEP: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            step_size: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update with step size `lr`.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig, lr: f64) {
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        params[i] -= lr * mh / (vh.sqrt() + cfg.epsilon);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_x: bool,
    pub flip_y: bool,
    pub flip_probability: f64,
    pub max_rotation_degrees: f64,
    /// Per-axis standard deviation of a global translation, meters.
    pub shift_sigma: f64,
    /// Uniform global scale range.
    pub scale_range: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_x: true,
            flip_y: true,
            flip_probability: 0.5,
            max_rotation_degrees: 10.0,
            shift_sigma: 0.0,
            scale_range: [1.0, 1.0],
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            flip_x: false,
            flip_y: false,
            flip_probability: 0.0,
            max_rotation_degrees: 0.0,
            shift_sigma: 0.0,
            scale_range: [1.0, 1.0],
        }
    }

    /// Static augmentation plus a light shift and scale.
    pub fn dynamic() -> Self {
        AugmentConfig {
            shift_sigma: 0.1,
            scale_range: [0.95, 1.05],
            ..AugmentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.flip_probability)
            && self.max_rotation_degrees >= 0.0
            && self.shift_sigma >= 0.0
            && self.scale_range[0] > 0.0
            && self.scale_range[0] <= self.scale_range[1];
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid augmentation config {self:?}")))
        }
    }
}

/// A global similarity transform: flips, yaw, uniform scale, shift.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augmentation {
    pub flip_x: bool,
    pub flip_y: bool,
    pub yaw: f64,
    pub scale: f64,
    pub shift: [f64; 3],
}

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation {
        flip_x: false,
        flip_y: false,
        yaw: 0.0,
        scale: 1.0,
        shift: [0.0; 3],
    };

    pub fn draw(cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        let mut coin = |enabled: bool| {
            let u: f64 = rng.random();
            enabled && u < cfg.flip_probability
        };
        let flip_x = coin(cfg.flip_x);
        let flip_y = coin(cfg.flip_y);
        let u: f64 = rng.random();
        let yaw = (2.0 * u - 1.0) * cfg.max_rotation_degrees.to_radians();
        let u: f64 = rng.random();
        let scale = cfg.scale_range[0] + u * (cfg.scale_range[1] - cfg.scale_range[0]);
        let mut shift = [0.0; 3];
        for s in &mut shift {
            let z: f64 = rng.sample(StandardNormal);
            *s = cfg.shift_sigma * z;
        }
        Augmentation {
            flip_x,
            flip_y,
            yaw,
            scale,
            shift,
        }
    }

    pub fn point(&self, p: [f64; 3]) -> [f64; 3] {
        let [mut x, mut y, z] = p;
        if self.flip_x {
            x = -x;
        }
        if self.flip_y {
            y = -y;
        }
        let (s, c) = self.yaw.sin_cos();
        let (rx, ry) = (c * x - s * y, s * x + c * y);
        [
            self.scale * rx + self.shift[0],
            self.scale * ry + self.shift[1],
            self.scale * z + self.shift[2],
        ]
    }

    pub fn heading(&self, h: f64) -> f64 {
        let mut h = h;
        if self.flip_x {
            h = std::f64::consts::PI - h;
        }
        if self.flip_y {
            h = -h;
        }
        normalize_angle(h + self.yaw)
    }

    pub fn apply_box(&self, b: &Box3D) -> Box3D {
        let [cx, cy, cz] = self.point([b.cx, b.cy, b.cz]);
        Box3D {
            cx,
            cy,
            cz,
            length: b.length * self.scale,
            width: b.width * self.scale,
            height: b.height * self.scale,
            heading: self.heading(b.heading),
            ..*b
        }
    }

    /// Transforms the xyz columns of every row; other columns unchanged.
    pub fn apply_points(&self, points: &mut Array2<f64>) {
        for mut r in points.rows_mut() {
            let q = self.point([r[0], r[1], r[2]]);
            r[0] = q[0];
            r[1] = q[1];
            r[2] = q[2];
        }
    }

    /// Transforms box tokens; all-zero placeholder rows stay zero.
    pub fn apply_tokens(&self, tokens: &mut Array2<f64>) {
        for mut r in tokens.rows_mut() {
            if r.iter().all(|v| *v == 0.0) {
                continue;
            }
            let q = self.point([r[0], r[1], r[2]]);
            r[0] = q[0];
            r[1] = q[1];
            r[2] = q[2];
            for k in 3..6 {
                r[k] *= self.scale;
            }
            r[6] = self.heading(r[6]);
        }
    }
}

/// Applies one transform drawn from `cfg` jointly to the points and box.
pub fn augment(points: &Array2<f64>, b: &Box3D, cfg: &AugmentConfig, seed: u64) -> (Array2<f64>, Box3D) {
    let mut rng = keyed_rng(seed, 0, 0, 0);
    let t = Augmentation::draw(cfg, &mut rng);
    let mut p = points.clone();
    t.apply_points(&mut p);
    (p, t.apply_box(b))
}

/// Concatenates frames with a time channel `TIME_STEP · offset`; a missing
/// frame contributes one all-zero placeholder row.
pub fn temporal_encode(frames: &[(i64, Option<&Array2<f64>>)]) -> Array2<f64> {
    let rows: usize = frames.iter().map(|(_, f)| f.map_or(1, |a| a.nrows())).sum();
    let mut out = Array2::zeros((rows, DYNAMIC_POINT_CHANNELS));
    let mut at = 0;
    for (offset, f) in frames {
        match f {
            Some(a) => {
                for r in a.rows() {
                    out[(at, 0)] = r[0];
                    out[(at, 1)] = r[1];
                    out[(at, 2)] = r[2];
                    out[(at, 3)] = TIME_STEP * *offset as f64;
                    at += 1;
                }
            }
            None => at += 1,
        }
    }
    out
}

/// Xyz rows of `cloud` in the box frame of `reference`.
pub fn cloud_in_frame(cloud: &PointCloud, reference: &Box3D) -> Array2<f64> {
    let (s, c) = reference.heading.sin_cos();
    let mut out = Array2::zeros((cloud.len(), 3));
    for i in 0..cloud.len() {
        let p = cloud.xyz(i);
        let (dx, dy) = (p.x - reference.cx, p.y - reference.cy);
        out[(i, 0)] = c * dx + s * dy;
        out[(i, 1)] = -s * dx + c * dy;
        out[(i, 2)] = p.z - reference.cz;
    }
    out
}

/// At most `max` rows, drawn without replacement, in ascending row order.
pub fn subsample(points: Array2<f64>, max: usize, rng: &mut impl Rng) -> Array2<f64> {
    if points.nrows() <= max {
        return points;
    }
    let mut idx = sample_indices(rng, points.nrows(), max).into_vec();
    idx.sort_unstable();
    points.select(Axis(0), &idx)
}

fn inside(points: &Array2<f64>, b: &Box3D, margin: f64) -> Vec<bool> {
    points
        .rows()
        .into_iter()
        .map(|r| b.contains(&nalgebra::Vector3::new(r[0], r[1], r[2]), margin))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub static_points: usize,
    pub frame_points: usize,
    /// Point window radius `r`, in frames.
    pub point_radius: usize,
    /// Box-sequence window radius `s`, in frames.
    pub box_radius: usize,
    /// Restrict both windows to the past and the current frame.
    pub causal: bool,
    /// Segmentation targets: inside the ground-truth box enlarged by this.
    pub seg_label_margin: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            static_points: 4096,
            frame_points: 1024,
            point_radius: 2,
            box_radius: 50,
            causal: false,
            seg_label_margin: 0.1,
        }
    }
}

/// Network input of a static object: points of the listed track positions
/// in the reference box frame, subsampled.
pub fn static_input(data: &ObjectTrackData, positions: &[usize], reference: &Box3D, max_points: usize, rng: &mut impl Rng) -> Array2<f64> {
    let parts: Vec<Array2<f64>> = positions.iter().map(|&p| cloud_in_frame(&data.frames[p].points, reference)).collect();
    let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
    let merged = if views.is_empty() {
        Array2::zeros((0, 3))
    } else {
        ndarray::concatenate(Axis(0), &views).expect("xyz columns")
    };
    subsample(merged, max_points, rng)
}

/// Offsets of the point and box windows around the center frame.
pub fn window_offsets(radius: usize, causal: bool) -> std::ops::RangeInclusive<i64> {
    let r = radius as i64;
    -r..=if causal { 0 } else { r }
}

/// Network input of a dynamic object at track position `center`: encoded
/// points, their segmentation targets (when `with_labels`), box tokens.
pub fn dynamic_input(
    data: &ObjectTrackData,
    center: usize,
    cfg: &SampleConfig,
    with_labels: bool,
    rng: &mut impl Rng,
) -> Result<(Array2<f64>, Vec<bool>, Array2<f64>)> {
    let t = data.frames[center].frame as i64;
    let reference = data.frames[center].box3d;
    let lookup = |o: i64| -> Option<usize> {
        let f = t + o;
        (f >= 0).then(|| data.position_of(f as usize)).flatten()
    };
    let mut crops = Vec::new();
    let mut labels = Vec::new();
    for o in window_offsets(cfg.point_radius, cfg.causal) {
        match lookup(o) {
            Some(p) => {
                let pts = subsample(cloud_in_frame(&data.frames[p].points, &reference), cfg.frame_points, rng);
                if with_labels {
                    let gt = data.frames[p].ground_truth.ok_or_else(|| {
                        Error::invalid(format!("frame {} of track {} has no ground truth", data.frames[p].frame, data.object_id))
                    })?;
                    labels.extend(inside(&pts, &box_to_frame(&gt, &reference), cfg.seg_label_margin));
                }
                crops.push((o, Some(pts)));
            }
            None => {
                if with_labels {
                    labels.push(false);
                }
                crops.push((o, None));
            }
        }
    }
    let refs: Vec<(i64, Option<&Array2<f64>>)> = crops.iter().map(|(o, a)| (*o, a.as_ref())).collect();
    let points = temporal_encode(&refs);
    let offsets: Vec<i64> = window_offsets(cfg.box_radius, cfg.causal).collect();
    let mut tokens = Array2::zeros((offsets.len(), BOX_TOKEN_CHANNELS));
    for (row, &o) in offsets.iter().enumerate() {
        if let Some(p) = lookup(o) {
            let b = box_to_frame(&data.frames[p].box3d, &reference);
            let v = [b.cx, b.cy, b.cz, b.length, b.width, b.height, b.heading, TIME_STEP * o as f64];
            for (k, x) in v.into_iter().enumerate() {
                tokens[(row, k)] = x;
            }
        }
    }
    Ok((points, labels, tokens))
}

fn keyframe_gt(data: &ObjectTrackData, pos: usize) -> Result<Box3D> {
    data.frames[pos]
        .ground_truth
        .ok_or_else(|| Error::Training(format!("track {} lacks ground truth at frame {}", data.object_id, data.frames[pos].frame)))
}

/// Random keyframe, `Uniform[1, n]` random frames, augmentation.
pub fn random_static_sample(data: &ObjectTrackData, cfg: &SampleConfig, aug: &AugmentConfig, rng: &mut impl Rng) -> Result<StaticSample> {
    let n = data.len();
    if n == 0 {
        return Err(Error::Training(format!("track {} is empty", data.object_id)));
    }
    let key = rng.random_range(0..n);
    let k = rng.random_range(1..=n);
    let mut pos = sample_indices(rng, n, k).into_vec();
    pos.sort_unstable();
    let reference = data.frames[key].box3d;
    let gt = box_to_frame(&keyframe_gt(data, key)?, &reference);
    let mut points = static_input(data, &pos, &reference, cfg.static_points, rng);
    let labels = inside(&points, &gt, cfg.seg_label_margin);
    let t = Augmentation::draw(aug, rng);
    t.apply_points(&mut points);
    Ok(StaticSample {
        points,
        labels,
        gt: t.apply_box(&gt),
    })
}

pub fn dynamic_sample(data: &ObjectTrackData, center: usize, cfg: &SampleConfig, aug: &AugmentConfig, rng: &mut impl Rng) -> Result<DynamicSample> {
    let reference = data.frames[center].box3d;
    let gt = box_to_frame(&keyframe_gt(data, center)?, &reference);
    let (mut points, labels, mut boxes) = dynamic_input(data, center, cfg, true, rng)?;
    let t = Augmentation::draw(aug, rng);
    t.apply_points(&mut points);
    t.apply_tokens(&mut boxes);
    Ok(DynamicSample {
        points,
        labels,
        boxes,
        gt: t.apply_box(&gt),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs at which the step size is multiplied by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    /// Cap on samples per epoch (dynamic windows are numerous).
    pub max_samples_per_epoch: Option<usize>,
    pub box_weight: f64,
    pub loss_weights: LossWeights,
    pub head_weights: HeadWeights,
    pub sample: SampleConfig,
    pub augment: AugmentConfig,
    /// Add ground-truth-aligned dynamic tracks to static training.
    pub dynamic_to_static: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::static_default()
    }
}

impl TrainConfig {
    pub fn static_default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            batch_size: 32,
            epochs: 180,
            decay_epochs: vec![60, 100, 140],
            decay_factor: 0.1,
            max_samples_per_epoch: None,
            box_weight: 10.0,
            loss_weights: LossWeights::default(),
            head_weights: HeadWeights::default(),
            sample: SampleConfig::default(),
            augment: AugmentConfig::default(),
            dynamic_to_static: true,
            seed: 0,
        }
    }

    pub fn dynamic_default() -> Self {
        TrainConfig {
            epochs: 480,
            decay_epochs: vec![180, 300, 420],
            augment: AugmentConfig::dynamic(),
            dynamic_to_static: false,
            ..TrainConfig::static_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.adam.step_size > 0.0) || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("training needs a positive step size, epochs and batch size"));
        }
        self.augment.validate()
    }

    pub fn step_size(&self, epoch: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.adam.step_size * self.decay_factor.powi(decays as i32)
    }
}

/// Resumable optimizer state; `epoch` counts completed epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub epoch: usize,
    pub weights: Weights,
    pub adam: AdamState,
    /// Mean training loss of every completed epoch.
    pub losses: Vec<f64>,
}

impl TrainState {
    pub fn fresh(weights: Weights) -> Self {
        let n = weights.params.len();
        TrainState {
            epoch: 0,
            weights,
            adam: AdamState::new(n),
            losses: Vec::new(),
        }
    }
}

/// Splits a permutation into batches; a trailing singleton joins the
/// previous batch so batch statistics are never taken over one sample.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() >= 2 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let start = (out.len() - 1) * size;
        let last = out.len() - 1;
        out[last] = &order[start..];
    }
    out
}

type Loss<'a, S> = dyn Fn(&Weights, &[S]) -> Result<(f64, Vec<f64>, Vec<f64>)> + 'a;

fn optimize<S: Send>(
    state: &mut TrainState,
    cfg: &TrainConfig,
    n_items: usize,
    until: usize,
    exec: &Executor,
    build: &(dyn Fn(usize, usize, usize) -> Result<S> + Sync),
    loss: &Loss<'_, S>,
    on_epoch: &mut dyn FnMut(&TrainState) -> Result<()>,
) -> Result<()> {
    if n_items == 0 {
        return Err(Error::Training("no training samples".into()));
    }
    while state.epoch < until.min(cfg.epochs) {
        let epoch = state.epoch;
        let mut rng = keyed_rng(cfg.seed, TAG_SHUFFLE, epoch as u64, 0);
        let mut order = sample_indices(&mut rng, n_items, n_items).into_vec();
        if let Some(cap) = cfg.max_samples_per_epoch {
            order.truncate(cap.max(1));
        }
        let lr = cfg.step_size(epoch);
        let mut total = 0.0;
        let groups = batches(&order, cfg.batch_size);
        for (b, items) in groups.iter().enumerate() {
            let slots: Vec<(usize, usize)> = items.iter().enumerate().map(|(j, &i)| (b * cfg.batch_size + j, i)).collect();
            let samples = exec.try_map(&slots, |&(slot, item)| build(epoch, slot, item))?;
            let (l, grad, stats) = loss(&state.weights, &samples)?;
            if !l.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Training(format!("non-finite loss at epoch {epoch}, batch {b}")));
            }
            adam_step(&mut state.weights.params, &grad, &mut state.adam, &cfg.adam, lr);
            state.weights.stats = stats;
            total += l;
        }
        state.losses.push(total / groups.len() as f64);
        state.epoch += 1;
        log::debug!("epoch {epoch}: loss {:.5}", state.losses[epoch]);
        on_epoch(state)?;
    }
    Ok(())
}

/// Trains a static network on the static tracks of `data` (plus
/// ground-truth-aligned dynamic tracks when enabled), continuing `state`
/// up to epoch `until`.
pub fn train_static(
    net: &StaticNet,
    data: &[ObjectTrackData],
    cfg: &TrainConfig,
    state: &mut TrainState,
    until: usize,
    exec: &Executor,
    on_epoch: &mut dyn FnMut(&TrainState) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    let items: Vec<&ObjectTrackData> = data
        .iter()
        .filter(|d| d.class == net.class && !d.is_empty() && d.has_ground_truth())
        .filter(|d| d.motion_state == MotionState::Static || (cfg.dynamic_to_static && d.motion_state == MotionState::Dynamic))
        .collect();
    let build = |epoch: usize, slot: usize, item: usize| -> Result<StaticSample> {
        let mut rng = keyed_rng(cfg.seed, TAG_STATIC_SAMPLE, epoch as u64, slot as u64);
        let d = items[item];
        if d.motion_state == MotionState::Dynamic {
            let reference = d.frames[rng.random_range(0..d.len())].frame;
            let aligned = dynamic_to_static_augment(d, reference)?;
            random_static_sample(&aligned, &cfg.sample, &cfg.augment, &mut rng)
        } else {
            random_static_sample(d, &cfg.sample, &cfg.augment, &mut rng)
        }
    };
    let loss = |w: &Weights, s: &[StaticSample]| {
        let out = net.loss(w, s, cfg.box_weight, &cfg.loss_weights, None)?;
        Ok((out.loss.total, out.grad, out.stats))
    };
    optimize(state, cfg, items.len(), until, exec, &build, &loss, on_epoch)
}

/// Trains a dynamic network on every (dynamic track, frame) window.
pub fn train_dynamic(
    net: &DynamicNet,
    data: &[ObjectTrackData],
    cfg: &TrainConfig,
    state: &mut TrainState,
    until: usize,
    exec: &Executor,
    on_epoch: &mut dyn FnMut(&TrainState) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    let tracks: Vec<&ObjectTrackData> = data
        .iter()
        .filter(|d| d.class == net.class && d.motion_state == MotionState::Dynamic && d.has_ground_truth())
        .collect();
    let items: Vec<(usize, usize)> = tracks
        .iter()
        .enumerate()
        .flat_map(|(t, d)| (0..d.len()).map(move |p| (t, p)))
        .collect();
    let build = |epoch: usize, slot: usize, item: usize| -> Result<DynamicSample> {
        let mut rng = keyed_rng(cfg.seed, TAG_DYNAMIC_SAMPLE, epoch as u64, slot as u64);
        let (t, p) = items[item];
        dynamic_sample(tracks[t], p, &cfg.sample, &cfg.augment, &mut rng)
    };
    let loss = |w: &Weights, s: &[DynamicSample]| {
        let out = net.loss(w, s, &cfg.head_weights, &cfg.loss_weights)?;
        Ok((out.loss.total, out.grad, out.stats))
    };
    optimize(state, cfg, items.len(), until, exec, &build, &loss, on_epoch)
}
