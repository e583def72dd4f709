//! Box targets as bin classification plus residual regression, the box
//! loss and its gradient, and weighted box fusion.
//!
//! Heading uses 12 bins of 30° centered at `k·π/6`. Size uses per-class
//! templates; the residual is the absolute difference to the template.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    align_heading, angle_diff, bev_iou, box_from_frame, box_to_frame, cyclic_mean, normalize_angle, Box3D,
    ObjectClass,
};

pub const HEADING_BINS: usize = 12;
pub const HEADING_BIN_WIDTH: f64 = std::f64::consts::PI / 6.0;

const VEHICLE_CLUSTERS: [[f64; 3]; 3] = [[4.8, 1.8, 1.5], [10.0, 2.6, 3.2], [2.0, 1.0, 1.6]];
const PEDESTRIAN_CLUSTERS: [[f64; 3]; 1] = [[0.9, 0.9, 1.7]];

pub struct SizeClusters;

impl SizeClusters {
    pub fn for_class(class: ObjectClass) -> &'static [[f64; 3]] {
        match class {
            ObjectClass::Vehicle => &VEHICLE_CLUSTERS,
            ObjectClass::Pedestrian => &PEDESTRIAN_CLUSTERS,
        }
    }

    /// Nearest template by Euclidean distance on `(l, w, h)`, ties to the lower index.
    pub fn nearest(class: ObjectClass, size: [f64; 3]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (k, t) in Self::for_class(class).iter().enumerate() {
            let d = (0..3).map(|i| (size[i] - t[i]).powi(2)).sum::<f64>();
            if d < best.1 {
                best = (k, d);
            }
        }
        best.0
    }
}

/// Center of heading bin `k`, in `[-π, π)`.
pub fn heading_bin_center(k: usize) -> f64 {
    normalize_angle(k as f64 * HEADING_BIN_WIDTH)
}

pub fn heading_bin(heading: f64) -> usize {
    let k = (normalize_angle(heading) / HEADING_BIN_WIDTH).round() as i64;
    k.rem_euclid(HEADING_BINS as i64) as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxTargets {
    pub center_residual: [f64; 3],
    pub size_logits: Vec<f64>,
    pub size_residuals: Vec<[f64; 3]>,
    pub heading_logits: [f64; HEADING_BINS],
    pub heading_residuals: [f64; HEADING_BINS],
}

impl BoxTargets {
    pub fn zeros(k: usize) -> Self {
        BoxTargets {
            center_residual: [0.0; 3],
            size_logits: vec![0.0; k],
            size_residuals: vec![[0.0; 3]; k],
            heading_logits: [0.0; HEADING_BINS],
            heading_residuals: [0.0; HEADING_BINS],
        }
    }

    pub fn clusters(&self) -> usize {
        self.size_logits.len()
    }

    /// Length of the flat layout for `k` size clusters.
    pub fn flat_len(k: usize) -> usize {
        3 + 4 * k + 2 * HEADING_BINS
    }

    /// `[center(3), size_logits(k), size_residuals(3k), heading_logits(12), heading_residuals(12)]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(Self::flat_len(self.clusters()));
        v.extend_from_slice(&self.center_residual);
        v.extend_from_slice(&self.size_logits);
        for r in &self.size_residuals {
            v.extend_from_slice(r);
        }
        v.extend_from_slice(&self.heading_logits);
        v.extend_from_slice(&self.heading_residuals);
        v
    }

    pub fn from_flat(v: &[f64], k: usize) -> Result<Self> {
        if v.len() != Self::flat_len(k) {
            return Err(Error::invalid(format!(
                "box target vector has length {}, expected {}",
                v.len(),
                Self::flat_len(k)
            )));
        }
        let mut t = BoxTargets::zeros(k);
        t.center_residual.copy_from_slice(&v[..3]);
        t.size_logits.copy_from_slice(&v[3..3 + k]);
        for j in 0..k {
            t.size_residuals[j].copy_from_slice(&v[3 + k + 3 * j..6 + k + 3 * j]);
        }
        let h = 3 + 4 * k;
        t.heading_logits.copy_from_slice(&v[h..h + HEADING_BINS]);
        t.heading_residuals.copy_from_slice(&v[h + HEADING_BINS..]);
        Ok(t)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Encodes a box given in the reference (box or keyframe) coordinate.
pub fn encode_box(b: &Box3D, class: ObjectClass) -> BoxTargets {
    let templates = SizeClusters::for_class(class);
    let mut t = BoxTargets::zeros(templates.len());
    t.center_residual = [b.cx, b.cy, b.cz];
    let s = SizeClusters::nearest(class, b.size());
    t.size_logits[s] = 1.0;
    for i in 0..3 {
        t.size_residuals[s][i] = b.size()[i] - templates[s][i];
    }
    let h = heading_bin(b.heading);
    t.heading_logits[h] = 1.0;
    t.heading_residuals[h] = angle_diff(b.heading, heading_bin_center(h));
    t
}

/// Decodes targets in the frame of `reference` and maps the box back to
/// the frame `reference` lives in. The score is the reference score.
pub fn decode_box(t: &BoxTargets, class: ObjectClass, reference: &Box3D) -> Box3D {
    let local = decode_local(t, class, reference.score);
    box_from_frame(&local, reference)
}

/// Decodes targets into the reference coordinate itself.
pub fn decode_local(t: &BoxTargets, class: ObjectClass, score: f64) -> Box3D {
    let templates = SizeClusters::for_class(class);
    let s = argmax(&t.size_logits).min(templates.len() - 1);
    let size = [0, 1, 2].map(|i| (templates[s][i] + t.size_residuals[s][i]).max(1e-3));
    let h = argmax(&t.heading_logits);
    let heading = heading_bin_center(h) + t.heading_residuals[h];
    Box3D::new(t.center_residual, size, heading, score.clamp(0.0, 1.0), class)
}

/// Encodes a world box relative to a reference box.
pub fn encode_relative(b: &Box3D, reference: &Box3D) -> BoxTargets {
    encode_box(&box_to_frame(b, reference), b.class)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w1: 0.1,
            w2: 2.0,
            w3: 0.1,
            w4: 2.0,
        }
    }
}

impl LossWeights {
    pub fn scaled(&self, s: f64) -> Self {
        LossWeights {
            w1: self.w1 * s,
            w2: self.w2 * s,
            w3: self.w3 * s,
            w4: self.w4 * s,
        }
    }
}

pub const SMOOTH_L1_DELTA: f64 = 1.0;

/// Huber-style smooth L1 and its derivative.
pub fn smooth_l1(x: f64) -> (f64, f64) {
    if x.abs() < SMOOTH_L1_DELTA {
        (0.5 * x * x / SMOOTH_L1_DELTA, x / SMOOTH_L1_DELTA)
    } else {
        (x.abs() - 0.5 * SMOOTH_L1_DELTA, x.signum())
    }
}

/// Softmax cross-entropy against `target` and its gradient in the logits.
pub fn cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = z.ln() + m - logits[target];
    let grad = exps
        .iter()
        .enumerate()
        .map(|(i, e)| e / z - if i == target { 1.0 } else { 0.0 })
        .collect();
    (loss, grad)
}

/// Unweighted loss terms plus their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxLoss {
    pub center: f64,
    pub size_cls: f64,
    pub size_reg: f64,
    pub heading_cls: f64,
    pub heading_reg: f64,
    pub total: f64,
}

/// `L = L_center + w1·L_size_cls + w2·L_size_reg + w3·L_heading_cls + w4·L_heading_reg`
/// against `gt` given in the prediction's reference frame. Residual terms
/// are taken at the ground-truth bins only. Returns the gradient with
/// respect to every prediction entry.
pub fn box_loss(pred: &BoxTargets, gt: &Box3D, w: &LossWeights) -> Result<(BoxLoss, BoxTargets)> {
    let k = SizeClusters::for_class(gt.class).len();
    if pred.clusters() != k {
        return Err(Error::invalid(format!(
            "prediction has {} size clusters, class {} uses {k}",
            pred.clusters(),
            gt.class.name()
        )));
    }
    let target = encode_box(gt, gt.class);
    let s = argmax(&target.size_logits);
    let h = argmax(&target.heading_logits);
    let mut grad = BoxTargets::zeros(k);

    let mut center = 0.0;
    for i in 0..3 {
        let (l, d) = smooth_l1(pred.center_residual[i] - target.center_residual[i]);
        center += l;
        grad.center_residual[i] = d;
    }
    let (size_cls, g) = cross_entropy(&pred.size_logits, s);
    for (gi, x) in grad.size_logits.iter_mut().zip(g) {
        *gi = w.w1 * x;
    }
    let mut size_reg = 0.0;
    for i in 0..3 {
        let (l, d) = smooth_l1(pred.size_residuals[s][i] - target.size_residuals[s][i]);
        size_reg += l;
        grad.size_residuals[s][i] = w.w2 * d;
    }
    let (heading_cls, g) = cross_entropy(&pred.heading_logits, h);
    for (gi, x) in grad.heading_logits.iter_mut().zip(g) {
        *gi = w.w3 * x;
    }
    let (heading_reg, d) = smooth_l1(pred.heading_residuals[h] - target.heading_residuals[h]);
    grad.heading_residuals[h] = w.w4 * d;

    let total = center + w.w1 * size_cls + w.w2 * size_reg + w.w3 * heading_cls + w.w4 * heading_reg;
    Ok((
        BoxLoss {
            center,
            size_cls,
            size_reg,
            heading_cls,
            heading_reg,
            total,
        },
        grad,
    ))
}

/// Test-time rotation angles about Z.
pub fn tta_angles() -> [f64; 10] {
    use std::f64::consts::PI;
    [
        0.0,
        PI / 8.0,
        -PI / 8.0,
        PI / 4.0,
        -PI / 4.0,
        3.0 * PI / 4.0,
        -3.0 * PI / 4.0,
        7.0 * PI / 8.0,
        -7.0 * PI / 8.0,
        PI,
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WbfParams {
    pub iou_floor: f64,
    pub score_floor: f64,
    /// Keep sub-floor boxes that no cluster absorbs.
    pub passthrough: bool,
}

impl Default for WbfParams {
    fn default() -> Self {
        WbfParams::for_class(ObjectClass::Vehicle)
    }
}

impl WbfParams {
    pub fn for_class(class: ObjectClass) -> Self {
        let iou_floor = match class {
            ObjectClass::Vehicle => 0.275,
            ObjectClass::Pedestrian => 0.2,
        };
        WbfParams {
            iou_floor,
            score_floor: 0.5,
            passthrough: false,
        }
    }
}

/// A fused box and the indices (into the input) of its members.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedCluster {
    pub fused: Box3D,
    pub members: Vec<usize>,
}

fn fuse(boxes: &[Box3D], members: &[usize]) -> Box3D {
    let leader = boxes[members[0]];
    let total: f64 = members.iter().map(|&i| boxes[i].score).sum();
    // Offsets from the leader keep the mean of identical boxes exact.
    let mean_of = |f: &dyn Fn(&Box3D) -> f64| {
        let base = f(&leader);
        if total > 0.0 {
            base + members.iter().map(|&i| boxes[i].score * (f(&boxes[i]) - base)).sum::<f64>() / total
        } else {
            base + members.iter().map(|&i| f(&boxes[i]) - base).sum::<f64>() / members.len() as f64
        }
    };
    let offsets: Vec<f64> = members
        .iter()
        .map(|&i| angle_diff(align_heading(boxes[i].heading, leader.heading), leader.heading))
        .collect();
    let weights: Vec<f64> = if total > 0.0 {
        members.iter().map(|&i| boxes[i].score).collect()
    } else {
        vec![1.0; members.len()]
    };
    let offset = cyclic_mean(&offsets, &weights).map(|m| m.angle).unwrap_or(0.0);
    let s0 = leader.score;
    let score = s0 + members.iter().map(|&i| boxes[i].score - s0).sum::<f64>() / members.len() as f64;
    Box3D {
        cx: mean_of(&|b| b.cx),
        cy: mean_of(&|b| b.cy),
        cz: mean_of(&|b| b.cz),
        length: mean_of(&|b| b.length),
        width: mean_of(&|b| b.width),
        height: mean_of(&|b| b.height),
        heading: normalize_angle(leader.heading + offset),
        score: score.clamp(0.0, 1.0),
        class: leader.class,
    }
}

/// Greedy clustering in descending score order (ties to input order). A
/// box joins the cluster whose running fused box it overlaps most, if that
/// BEV IoU reaches the floor; otherwise it starts a new cluster.
pub fn wbf_clusters(boxes: &[Box3D], params: &WbfParams) -> Vec<FusedCluster> {
    let mut order: Vec<usize> = (0..boxes.len()).filter(|&i| boxes[i].score >= params.score_floor).collect();
    order.sort_by(|&a, &b| boxes[b].score.total_cmp(&boxes[a].score).then(a.cmp(&b)));
    let mut clusters: Vec<FusedCluster> = Vec::new();
    for i in order {
        let b = &boxes[i];
        let mut best: Option<(usize, f64)> = None;
        for (c, cl) in clusters.iter().enumerate() {
            if cl.fused.class != b.class {
                continue;
            }
            let iou = bev_iou(&cl.fused, b);
            if iou >= params.iou_floor && best.is_none_or(|(_, v)| iou > v) {
                best = Some((c, iou));
            }
        }
        match best {
            Some((c, _)) => {
                clusters[c].members.push(i);
                clusters[c].fused = fuse(boxes, &clusters[c].members);
            }
            None => clusters.push(FusedCluster {
                fused: *b,
                members: vec![i],
            }),
        }
    }
    clusters
}

pub fn weighted_box_fusion(boxes: &[Box3D], params: &WbfParams) -> Vec<Box3D> {
    let clusters = wbf_clusters(boxes, params);
    let mut out: Vec<Box3D> = clusters.iter().map(|c| c.fused).collect();
    if params.passthrough {
        for b in boxes.iter().filter(|b| b.score < params.score_floor) {
            let absorbed = clusters
                .iter()
                .any(|c| c.fused.class == b.class && bev_iou(&c.fused, b) >= params.iou_floor);
            if !absorbed {
                out.push(*b);
            }
        }
    }
    out
}
