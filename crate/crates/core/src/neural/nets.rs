//! Point-set networks: per-point MLP, max-pool, MLP heads.
//!
//! The static model segments the merged object points, then regresses a
//! box from the foreground twice, the second time in the frame of the
//! first estimate. The dynamic model encodes segmented multi-frame points
//! and the surrounding box sequence separately and regresses the center
//! frame box from their joint embedding, with one auxiliary head per branch.

use ndarray::{s, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{broadcast_segments, max_pool, max_pool_backward, sum_segments, Arena, Mlp, MlpCache, Mode};
use crate::codec::{box_loss, cross_entropy, decode_local, encode_box, BoxTargets, LossWeights, SizeClusters};
use crate::error::{Error, Result};
use crate::geometry::{box_from_frame, box_to_frame, Box3D, ObjectClass};

/// Concatenated variable-size sets with `offsets[i]..offsets[i + 1]` for set `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointBatch {
    pub points: Array2<f64>,
    pub offsets: Vec<usize>,
}

impl PointBatch {
    pub fn single(points: Array2<f64>) -> Self {
        let n = points.nrows();
        PointBatch {
            points,
            offsets: vec![0, n],
        }
    }

    pub fn stack(sets: &[&Array2<f64>], channels: usize) -> Self {
        let total: usize = sets.iter().map(|s| s.nrows()).sum();
        let mut points = Array2::zeros((total, channels));
        let mut offsets = vec![0];
        let mut at = 0;
        for s in sets {
            points.slice_mut(s![at..at + s.nrows(), ..]).assign(s);
            at += s.nrows();
            offsets.push(at);
        }
        PointBatch { points, offsets }
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegNet {
    pub point: Mlp,
    pub skip: usize,
    pub head: Mlp,
}

pub struct SegCache {
    point: MlpCache,
    arg: Vec<usize>,
    head: MlpCache,
    offsets: Vec<usize>,
    rows: usize,
}

impl SegNet {
    fn new(arena: &mut Arena, input: usize, point: &[usize], skip: usize, head: &[usize], bn: bool) -> Result<Self> {
        if point.is_empty() || skip >= point.len() {
            return Err(Error::invalid("segmentation skip layer must index the per-point MLP"));
        }
        let point = Mlp::new(arena, input, point, bn, false);
        let mut widths = head.to_vec();
        widths.push(2);
        let head_in = point.layers[skip].dense.output + point.output_dim();
        let head = Mlp::new(arena, head_in, &widths, bn, true);
        Ok(SegNet { point, skip, head })
    }

    fn init(&self, p: &mut [f64], st: &mut [f64], rng: &mut ChaCha8Rng) {
        self.point.init(p, st, rng);
        self.head.init(p, st, rng);
    }

    /// Per-point `[background, foreground]` logits.
    pub fn forward(&self, p: &[f64], st: &[f64], batch: &PointBatch, mode: Mode) -> (Array2<f64>, SegCache) {
        let point = self.point.forward(p, st, batch.points.clone(), mode);
        let (pooled, arg) = max_pool(point.last(), &batch.offsets);
        let skip = point.output(self.skip);
        let wide = broadcast_segments(&pooled, &batch.offsets);
        let joined = ndarray::concatenate(Axis(1), &[skip.view(), wide.view()]).expect("rows agree");
        let head = self.head.forward(p, st, joined, mode);
        let logits = head.last().clone();
        (
            logits,
            SegCache {
                point,
                arg,
                head,
                offsets: batch.offsets.clone(),
                rows: batch.points.nrows(),
            },
        )
    }

    pub fn backward(&self, p: &[f64], cache: &SegCache, dlogits: Array2<f64>, grad: &mut [f64]) {
        let djoined = self.head.backward(p, &cache.head, dlogits, &[], grad);
        let d_skip = self.point.layers[self.skip].dense.output;
        let dskip = djoined.slice(s![.., ..d_skip]).to_owned();
        let dwide = djoined.slice(s![.., d_skip..]).to_owned();
        let dpooled = sum_segments(&dwide, &cache.offsets);
        let dlast = max_pool_backward(&dpooled, &cache.arg, cache.rows);
        self.point.backward(p, &cache.point, dlast, &[(self.skip, &dskip)], grad);
    }

    fn update_stats(&self, cache: &SegCache, st: &mut [f64]) {
        self.point.update_stats(&cache.point, st);
        self.head.update_stats(&cache.head, st);
    }
}

/// Per-point MLP, max-pool, pooled MLP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub point: Mlp,
    pub pooled: Mlp,
}

pub struct EncoderCache {
    point: MlpCache,
    arg: Vec<usize>,
    pooled: MlpCache,
    rows: usize,
}

impl Encoder {
    fn new(arena: &mut Arena, input: usize, point: &[usize], pooled: &[usize], bn: bool, linear_last: bool) -> Self {
        let point = Mlp::new(arena, input, point, bn, false);
        let pooled = Mlp::new(arena, point.output_dim(), pooled, bn, linear_last);
        Encoder { point, pooled }
    }

    fn init(&self, p: &mut [f64], st: &mut [f64], rng: &mut ChaCha8Rng) {
        self.point.init(p, st, rng);
        self.pooled.init(p, st, rng);
    }

    pub fn output_dim(&self) -> usize {
        self.pooled.output_dim()
    }

    /// Max-pooled per-point features of every set, before the pooled MLP.
    pub fn pooled_features(&self, p: &[f64], st: &[f64], batch: &PointBatch) -> Array2<f64> {
        let point = self.point.forward(p, st, batch.points.clone(), Mode::Eval);
        max_pool(point.last(), &batch.offsets).0
    }

    pub fn forward(&self, p: &[f64], st: &[f64], batch: &PointBatch, mode: Mode) -> (Array2<f64>, EncoderCache) {
        let point = self.point.forward(p, st, batch.points.clone(), mode);
        let (pooled_in, arg) = max_pool(point.last(), &batch.offsets);
        let pooled = self.pooled.forward(p, st, pooled_in, mode);
        let out = pooled.last().clone();
        (
            out,
            EncoderCache {
                point,
                arg,
                pooled,
                rows: batch.points.nrows(),
            },
        )
    }

    pub fn backward(&self, p: &[f64], cache: &EncoderCache, dout: Array2<f64>, grad: &mut [f64]) {
        let dpool = self.pooled.backward(p, &cache.pooled, dout, &[], grad);
        let dlast = max_pool_backward(&dpool, &cache.arg, cache.rows);
        self.point.backward(p, &cache.point, dlast, &[], grad);
    }

    fn update_stats(&self, cache: &EncoderCache, st: &mut [f64]) {
        self.point.update_stats(&cache.point, st);
        self.pooled.update_stats(&cache.pooled, st);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticArch {
    pub seg_point: Vec<usize>,
    /// Index of the per-point layer whose output joins the pooled feature.
    pub seg_skip: usize,
    /// Hidden widths of the per-point segmentation head (a 2-way output follows).
    pub seg_head: Vec<usize>,
    pub box_point: Vec<usize>,
    /// Hidden widths after pooling (a linear box-parameter layer follows).
    pub box_pooled: Vec<usize>,
    pub shared_box_weights: bool,
    pub batch_norm: bool,
}

impl Default for StaticArch {
    fn default() -> Self {
        StaticArch {
            seg_point: vec![64, 64, 64, 128, 1024],
            seg_skip: 1,
            seg_head: vec![512, 256, 128, 128],
            box_point: vec![128, 128, 256, 512],
            box_pooled: vec![512, 256],
            shared_box_weights: true,
            batch_norm: true,
        }
    }
}

impl StaticArch {
    /// Narrow widths for desk-scale training and tests.
    pub fn small() -> Self {
        StaticArch {
            seg_point: vec![16, 16, 32],
            seg_skip: 1,
            seg_head: vec![32, 16],
            box_point: vec![32, 32, 64],
            box_pooled: vec![64, 32],
            shared_box_weights: true,
            batch_norm: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicArch {
    pub seg_point: Vec<usize>,
    pub seg_skip: usize,
    pub seg_head: Vec<usize>,
    pub point_point: Vec<usize>,
    pub point_pooled: Vec<usize>,
    pub box_point: Vec<usize>,
    pub box_pooled: Vec<usize>,
    /// Hidden widths of the joint and both auxiliary heads.
    pub head: Vec<usize>,
    pub batch_norm: bool,
}

impl Default for DynamicArch {
    fn default() -> Self {
        DynamicArch {
            seg_point: vec![64, 64, 64, 128, 1024],
            seg_skip: 1,
            seg_head: vec![512, 256, 128, 128],
            point_point: vec![64, 128, 256, 512],
            point_pooled: vec![512, 256],
            box_point: vec![64, 64, 128, 512],
            box_pooled: vec![128, 128],
            head: vec![128, 128],
            batch_norm: true,
        }
    }
}

impl DynamicArch {
    pub fn small() -> Self {
        DynamicArch {
            seg_point: vec![16, 16, 32],
            seg_skip: 1,
            seg_head: vec![32, 16],
            point_point: vec![32, 32, 64],
            point_pooled: vec![64, 32],
            box_point: vec![32, 32, 64],
            box_pooled: vec![32, 32],
            head: vec![64, 32],
            batch_norm: true,
        }
    }
}

/// Flat parameters and running statistics of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub params: Vec<f64>,
    pub stats: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticNet {
    pub class: ObjectClass,
    pub arch: StaticArch,
    pub seg: SegNet,
    pub box1: Encoder,
    pub box2: Option<Encoder>,
    pub n_params: usize,
    pub n_stats: usize,
}

/// One static training example in its reference (keyframe box) frame.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticSample {
    pub points: Array2<f64>,
    pub labels: Vec<bool>,
    pub gt: Box3D,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StaticLoss {
    pub seg: f64,
    pub box1: f64,
    pub box2: f64,
    pub total: f64,
}

pub struct LossOutput<L> {
    pub loss: L,
    pub grad: Vec<f64>,
    /// Running statistics after folding in this batch.
    pub stats: Vec<f64>,
}

/// Mean two-way cross-entropy over all points and its logit gradient.
pub fn segmentation_loss(logits: &Array2<f64>, labels: &[bool], scale: f64) -> (f64, Array2<f64>) {
    let n = labels.len().max(1) as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = 0.0;
    for (i, &fg) in labels.iter().enumerate() {
        let row = [logits[(i, 0)], logits[(i, 1)]];
        let (l, g) = cross_entropy(&row, usize::from(fg));
        total += l;
        grad[(i, 0)] = scale * g[0] / n;
        grad[(i, 1)] = scale * g[1] / n;
    }
    (total / n, grad)
}

/// Foreground rows of `points` per `labels`; a single zero row when none.
fn foreground(points: &Array2<f64>, labels: &[bool]) -> Array2<f64> {
    let rows: Vec<usize> = (0..points.nrows()).filter(|&i| labels[i]).collect();
    if rows.is_empty() {
        return Array2::zeros((1, points.ncols()));
    }
    points.select(Axis(0), &rows)
}

fn to_frame(points: &Array2<f64>, frame: &Box3D) -> Array2<f64> {
    let (s, c) = frame.heading.sin_cos();
    let mut out = points.clone();
    for mut r in out.rows_mut() {
        let dx = r[0] - frame.cx;
        let dy = r[1] - frame.cy;
        r[0] = c * dx + s * dy;
        r[1] = -s * dx + c * dy;
        r[2] -= frame.cz;
    }
    out
}

/// Box losses of a batch of flat predictions and their gradient, each
/// sample's loss scaled by `scale / B`.
fn batch_box_loss(pred: &Array2<f64>, gts: &[Box3D], w: &LossWeights, scale: f64) -> Result<(f64, Array2<f64>)> {
    let b = gts.len().max(1) as f64;
    let mut grad = Array2::zeros(pred.raw_dim());
    let mut total = 0.0;
    for (i, gt) in gts.iter().enumerate() {
        let k = SizeClusters::for_class(gt.class).len();
        let t = BoxTargets::from_flat(pred.row(i).as_slice().expect("contiguous rows"), k)?;
        let (l, g) = box_loss(&t, gt, w)?;
        total += l.total;
        for (dst, v) in grad.row_mut(i).iter_mut().zip(g.to_flat()) {
            *dst = scale * v / b;
        }
    }
    Ok((total / b, grad))
}

fn decode_row(row: ndarray::ArrayView1<f64>, class: ObjectClass) -> Result<Box3D> {
    let k = SizeClusters::for_class(class).len();
    let owned = row.to_vec();
    Ok(decode_local(&BoxTargets::from_flat(&owned, k)?, class, 1.0))
}

/// Outcome of inference in the reference frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetPrediction {
    pub box3d: Box3D,
    pub foreground: usize,
    /// Segmentation found no foreground; all points were used.
    pub empty_foreground: bool,
}

impl StaticNet {
    pub fn new(class: ObjectClass, arch: &StaticArch) -> Result<Self> {
        let mut arena = Arena::default();
        let seg = SegNet::new(&mut arena, 3, &arch.seg_point, arch.seg_skip, &arch.seg_head, arch.batch_norm)?;
        let out = BoxTargets::flat_len(SizeClusters::for_class(class).len());
        let mut pooled = arch.box_pooled.clone();
        pooled.push(out);
        let box1 = Encoder::new(&mut arena, 3, &arch.box_point, &pooled, arch.batch_norm, true);
        let box2 = (!arch.shared_box_weights)
            .then(|| Encoder::new(&mut arena, 3, &arch.box_point, &pooled, arch.batch_norm, true));
        Ok(StaticNet {
            class,
            arch: arch.clone(),
            seg,
            box1,
            box2,
            n_params: arena.params,
            n_stats: arena.stats,
        })
    }

    pub fn init(&self, seed: u64) -> Weights {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; self.n_params];
        let mut stats = vec![0.0; self.n_stats];
        self.seg.init(&mut params, &mut stats, &mut rng);
        self.box1.init(&mut params, &mut stats, &mut rng);
        if let Some(b) = &self.box2 {
            b.init(&mut params, &mut stats, &mut rng);
        }
        Weights { params, stats }
    }

    fn second(&self) -> &Encoder {
        self.box2.as_ref().unwrap_or(&self.box1)
    }

    /// Stage-one boxes (reference frame) for a batch, decoded in training
    /// mode. These define the coordinate of stage two.
    pub fn stage_one_frames(&self, w: &Weights, samples: &[StaticSample]) -> Result<Vec<Box3D>> {
        let fg: Vec<Array2<f64>> = samples.iter().map(|s| foreground(&s.points, &s.labels)).collect();
        let batch = PointBatch::stack(&fg.iter().collect::<Vec<_>>(), 3);
        let (out, _) = self.box1.forward(&w.params, &w.stats, &batch, Mode::Train);
        (0..samples.len()).map(|i| decode_row(out.row(i), self.class)).collect()
    }

    /// `L = L_seg + w·(L_box1 + L_box2)`. Both box stages see ground-truth
    /// foreground. Stage two runs in the frame of `frames` when given, else
    /// of the decoded stage-one boxes; no gradient flows through that frame.
    pub fn loss(
        &self,
        w: &Weights,
        samples: &[StaticSample],
        box_weight: f64,
        loss_weights: &LossWeights,
        frames: Option<&[Box3D]>,
    ) -> Result<LossOutput<StaticLoss>> {
        if samples.is_empty() {
            return Err(Error::Training("empty batch".into()));
        }
        let p = &w.params;
        let mut grad = vec![0.0; p.len()];
        let mut stats = w.stats.clone();

        let sets: Vec<&Array2<f64>> = samples.iter().map(|s| &s.points).collect();
        let batch = PointBatch::stack(&sets, 3);
        let labels: Vec<bool> = samples.iter().flat_map(|s| s.labels.iter().copied()).collect();
        let (logits, seg_cache) = self.seg.forward(p, &w.stats, &batch, Mode::Train);
        let (seg, dlogits) = segmentation_loss(&logits, &labels, 1.0);
        self.seg.backward(p, &seg_cache, dlogits, &mut grad);
        self.seg.update_stats(&seg_cache, &mut stats);

        let fg: Vec<Array2<f64>> = samples.iter().map(|s| foreground(&s.points, &s.labels)).collect();
        let batch1 = PointBatch::stack(&fg.iter().collect::<Vec<_>>(), 3);
        let (out1, cache1) = self.box1.forward(p, &w.stats, &batch1, Mode::Train);
        let gts: Vec<Box3D> = samples.iter().map(|s| s.gt).collect();
        let (box1, d1) = batch_box_loss(&out1, &gts, loss_weights, box_weight)?;
        self.box1.backward(p, &cache1, d1, &mut grad);
        self.box1.update_stats(&cache1, &mut stats);

        let decoded;
        let frames = match frames {
            Some(f) => f,
            None => {
                decoded = (0..samples.len())
                    .map(|i| decode_row(out1.row(i), self.class))
                    .collect::<Result<Vec<_>>>()?;
                &decoded
            }
        };
        let moved: Vec<Array2<f64>> = fg.iter().zip(frames).map(|(f, b)| to_frame(f, b)).collect();
        let batch2 = PointBatch::stack(&moved.iter().collect::<Vec<_>>(), 3);
        let gts2: Vec<Box3D> = gts.iter().zip(frames).map(|(g, b)| box_to_frame(g, b)).collect();
        let enc2 = self.second();
        let (out2, cache2) = enc2.forward(p, &w.stats, &batch2, Mode::Train);
        let (box2, d2) = batch_box_loss(&out2, &gts2, loss_weights, box_weight)?;
        enc2.backward(p, &cache2, d2, &mut grad);
        enc2.update_stats(&cache2, &mut stats);

        Ok(LossOutput {
            loss: StaticLoss {
                seg,
                box1,
                box2,
                total: seg + box_weight * (box1 + box2),
            },
            grad,
            stats,
        })
    }

    /// Foreground mask by the segmentation head (inference statistics).
    pub fn segment(&self, w: &Weights, points: &Array2<f64>) -> Vec<bool> {
        if points.nrows() == 0 {
            return Vec::new();
        }
        let (logits, _) = self.seg.forward(&w.params, &w.stats, &PointBatch::single(points.clone()), Mode::Eval);
        logits.rows().into_iter().map(|r| r[1] > r[0]).collect()
    }

    /// Box in the reference frame after `passes` regressions (at least one).
    pub fn predict(&self, w: &Weights, points: &Array2<f64>, passes: usize) -> Result<NetPrediction> {
        let mask = self.segment(w, points);
        let count = mask.iter().filter(|&&m| m).count();
        let fg = if count == 0 {
            if points.nrows() == 0 {
                Array2::zeros((1, 3))
            } else {
                points.clone()
            }
        } else {
            foreground(points, &mask)
        };
        let mut current: Option<Box3D> = None;
        for pass in 0..passes.max(1) {
            let enc = if pass == 0 { &self.box1 } else { self.second() };
            let local_points = current.map_or_else(|| fg.clone(), |b| to_frame(&fg, &b));
            let (out, _) = enc.forward(&w.params, &w.stats, &PointBatch::single(local_points), Mode::Eval);
            let local = decode_row(out.row(0), self.class)?;
            current = Some(match current {
                None => local,
                Some(frame) => box_from_frame(&local, &frame),
            });
        }
        Ok(NetPrediction {
            box3d: current.expect("at least one pass"),
            foreground: count,
            empty_foreground: count == 0,
        })
    }
}

pub const BOX_TOKEN_CHANNELS: usize = 8;
pub const DYNAMIC_POINT_CHANNELS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicNet {
    pub class: ObjectClass,
    pub arch: DynamicArch,
    pub seg: SegNet,
    pub point_encoder: Encoder,
    pub box_encoder: Encoder,
    pub joint_head: Mlp,
    pub trajectory_head: Mlp,
    pub object_head: Mlp,
    pub n_params: usize,
    pub n_stats: usize,
}

/// One dynamic training example in the center-frame box coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicSample {
    /// `x, y, z, time` rows over the point window.
    pub points: Array2<f64>,
    pub labels: Vec<bool>,
    /// `cx, cy, cz, l, w, h, heading, time` rows over the box window.
    pub boxes: Array2<f64>,
    pub gt: Box3D,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DynamicLoss {
    pub seg: f64,
    pub trajectory: f64,
    pub object: f64,
    pub joint: f64,
    pub total: f64,
}

/// Weights of the trajectory, object-point and joint box losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadWeights {
    pub v1: f64,
    pub v2: f64,
    pub v3: f64,
}

impl Default for HeadWeights {
    fn default() -> Self {
        HeadWeights { v1: 0.3, v2: 0.3, v3: 0.4 }
    }
}

impl DynamicNet {
    pub fn new(class: ObjectClass, arch: &DynamicArch) -> Result<Self> {
        let mut arena = Arena::default();
        let bn = arch.batch_norm;
        let seg = SegNet::new(&mut arena, DYNAMIC_POINT_CHANNELS, &arch.seg_point, arch.seg_skip, &arch.seg_head, bn)?;
        let point_encoder = Encoder::new(&mut arena, DYNAMIC_POINT_CHANNELS, &arch.point_point, &arch.point_pooled, bn, false);
        let box_encoder = Encoder::new(&mut arena, BOX_TOKEN_CHANNELS, &arch.box_point, &arch.box_pooled, bn, false);
        let out = BoxTargets::flat_len(SizeClusters::for_class(class).len());
        let mut widths = arch.head.clone();
        widths.push(out);
        let pe = point_encoder.output_dim();
        let be = box_encoder.output_dim();
        let joint_head = Mlp::new(&mut arena, pe + be, &widths, bn, true);
        let trajectory_head = Mlp::new(&mut arena, be, &widths, bn, true);
        let object_head = Mlp::new(&mut arena, pe, &widths, bn, true);
        Ok(DynamicNet {
            class,
            arch: arch.clone(),
            seg,
            point_encoder,
            box_encoder,
            joint_head,
            trajectory_head,
            object_head,
            n_params: arena.params,
            n_stats: arena.stats,
        })
    }

    pub fn init(&self, seed: u64) -> Weights {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; self.n_params];
        let mut stats = vec![0.0; self.n_stats];
        self.seg.init(&mut params, &mut stats, &mut rng);
        self.point_encoder.init(&mut params, &mut stats, &mut rng);
        self.box_encoder.init(&mut params, &mut stats, &mut rng);
        for h in [&self.joint_head, &self.trajectory_head, &self.object_head] {
            h.init(&mut params, &mut stats, &mut rng);
        }
        Weights { params, stats }
    }

    /// `L = L_seg + v1·L_traj + v2·L_obj + v3·L_joint`; the point encoder
    /// sees ground-truth foreground.
    pub fn loss(&self, w: &Weights, samples: &[DynamicSample], heads: &HeadWeights, loss_weights: &LossWeights) -> Result<LossOutput<DynamicLoss>> {
        if samples.is_empty() {
            return Err(Error::Training("empty batch".into()));
        }
        let p = &w.params;
        let mut grad = vec![0.0; p.len()];
        let mut stats = w.stats.clone();

        let sets: Vec<&Array2<f64>> = samples.iter().map(|s| &s.points).collect();
        let batch = PointBatch::stack(&sets, DYNAMIC_POINT_CHANNELS);
        let labels: Vec<bool> = samples.iter().flat_map(|s| s.labels.iter().copied()).collect();
        let (logits, seg_cache) = self.seg.forward(p, &w.stats, &batch, Mode::Train);
        let (seg, dlogits) = segmentation_loss(&logits, &labels, 1.0);
        self.seg.backward(p, &seg_cache, dlogits, &mut grad);
        self.seg.update_stats(&seg_cache, &mut stats);

        let fg: Vec<Array2<f64>> = samples.iter().map(|s| foreground(&s.points, &s.labels)).collect();
        let pbatch = PointBatch::stack(&fg.iter().collect::<Vec<_>>(), DYNAMIC_POINT_CHANNELS);
        let (pemb, pcache) = self.point_encoder.forward(p, &w.stats, &pbatch, Mode::Train);
        let bsets: Vec<&Array2<f64>> = samples.iter().map(|s| &s.boxes).collect();
        let bbatch = PointBatch::stack(&bsets, BOX_TOKEN_CHANNELS);
        let (bemb, bcache) = self.box_encoder.forward(p, &w.stats, &bbatch, Mode::Train);
        let gts: Vec<Box3D> = samples.iter().map(|s| s.gt).collect();

        let joint_in = ndarray::concatenate(Axis(1), &[pemb.view(), bemb.view()]).expect("rows agree");
        let jc = self.joint_head.forward(p, &w.stats, joint_in, Mode::Train);
        let (joint, dj) = batch_box_loss(jc.last(), &gts, loss_weights, heads.v3)?;
        let tc = self.trajectory_head.forward(p, &w.stats, bemb.clone(), Mode::Train);
        let (trajectory, dt) = batch_box_loss(tc.last(), &gts, loss_weights, heads.v1)?;
        let oc = self.object_head.forward(p, &w.stats, pemb.clone(), Mode::Train);
        let (object, dobj) = batch_box_loss(oc.last(), &gts, loss_weights, heads.v2)?;

        let djoint_in = self.joint_head.backward(p, &jc, dj, &[], &mut grad);
        let dbemb_t = self.trajectory_head.backward(p, &tc, dt, &[], &mut grad);
        let dpemb_o = self.object_head.backward(p, &oc, dobj, &[], &mut grad);
        let pe = pemb.ncols();
        let dpemb = djoint_in.slice(s![.., ..pe]).to_owned() + dpemb_o;
        let dbemb = djoint_in.slice(s![.., pe..]).to_owned() + dbemb_t;
        self.point_encoder.backward(p, &pcache, dpemb, &mut grad);
        self.box_encoder.backward(p, &bcache, dbemb, &mut grad);

        self.point_encoder.update_stats(&pcache, &mut stats);
        self.box_encoder.update_stats(&bcache, &mut stats);
        self.joint_head.update_stats(&jc, &mut stats);
        self.trajectory_head.update_stats(&tc, &mut stats);
        self.object_head.update_stats(&oc, &mut stats);

        Ok(LossOutput {
            loss: DynamicLoss {
                seg,
                trajectory,
                object,
                joint,
                total: seg + heads.v1 * trajectory + heads.v2 * object + heads.v3 * joint,
            },
            grad,
            stats,
        })
    }

    pub fn segment(&self, w: &Weights, points: &Array2<f64>) -> Vec<bool> {
        if points.nrows() == 0 {
            return Vec::new();
        }
        let (logits, _) = self.seg.forward(&w.params, &w.stats, &PointBatch::single(points.clone()), Mode::Eval);
        logits.rows().into_iter().map(|r| r[1] > r[0]).collect()
    }

    /// Center-frame box (in its detector box coordinate) from the joint head.
    pub fn predict(&self, w: &Weights, points: &Array2<f64>, boxes: &Array2<f64>) -> Result<NetPrediction> {
        let mask = self.segment(w, points);
        let count = mask.iter().filter(|&&m| m).count();
        let fg = if count == 0 {
            Array2::zeros((1, DYNAMIC_POINT_CHANNELS))
        } else {
            foreground(points, &mask)
        };
        let (pemb, _) = self.point_encoder.forward(&w.params, &w.stats, &PointBatch::single(fg), Mode::Eval);
        let (bemb, _) = self.box_encoder.forward(&w.params, &w.stats, &PointBatch::single(boxes.clone()), Mode::Eval);
        let joint_in = ndarray::concatenate(Axis(1), &[pemb.view(), bemb.view()]).expect("rows agree");
        let out = self.joint_head.forward(&w.params, &w.stats, joint_in, Mode::Eval);
        Ok(NetPrediction {
            box3d: decode_row(out.last().row(0), self.class)?,
            foreground: count,
            empty_foreground: count == 0,
        })
    }
}

/// Encodes a box given in its reference frame, exposed for callers
/// building supervised targets directly.
pub fn targets_for(gt: &Box3D) -> BoxTargets {
    encode_box(gt, gt.class)
}
