//! Detection and tracking metrics over per-frame world-frame boxes.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{bev_iou, iou_3d, Box3D, ObjectClass};
use crate::io::{to_world, AutoLabelSet, SequenceDataset};
use crate::tracking::hungarian;

/// Labels are kept for the mean-IoU report only above this BEV IoU.
pub const MEAN_IOU_GATE: f64 = 0.03;
pub const DEFAULT_MOT_THRESHOLD: f64 = 0.5;
/// Upper edges of the distance buckets, meters.
pub const DISTANCE_EDGES: [f64; 2] = [30.0, 50.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouMode {
    Bev,
    ThreeD,
}

impl IouMode {
    pub fn iou(self, a: &Box3D, b: &Box3D) -> f64 {
        if a.class != b.class {
            return 0.0;
        }
        match self {
            IouMode::Bev => bev_iou(a, b),
            IouMode::ThreeD => iou_3d(a, b),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            IouMode::Bev => "bev",
            IouMode::ThreeD => "3d",
        }
    }
}

/// A ground-truth box with what evaluation needs to know about it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtObject {
    pub object_id: u64,
    /// World frame.
    pub box3d: Box3D,
    /// Horizontal distance from the sensor, meters.
    pub distance: f64,
    /// Points of the frame's cloud inside the box.
    pub points: usize,
}

/// Ground truth of every frame with distances and interior point counts.
pub fn ground_truth_objects(ds: &SequenceDataset) -> Vec<Vec<GtObject>> {
    ds.frames
        .iter()
        .map(|f| {
            let (cloud, _) = to_world(f);
            let sensor = f.pose.translation;
            f.ground_truth
                .iter()
                .flatten()
                .map(|g| {
                    let b = g.box3d;
                    let points = (0..cloud.len()).filter(|&i| b.contains(&cloud.xyz(i), 0.0)).count();
                    GtObject {
                        object_id: g.object_id,
                        box3d: b,
                        distance: (b.cx - sensor.x).hypot(b.cy - sensor.y),
                        points,
                    }
                })
                .collect()
        })
        .collect()
}

/// Per-frame `(id, box)` lists of a label set.
pub fn label_boxes(labels: &AutoLabelSet) -> Vec<Vec<(u64, Box3D)>> {
    labels
        .frames
        .iter()
        .map(|f| f.iter().map(|l| (l.object_id, l.box3d)).collect())
        .collect()
}

/// All-point interpolated average precision of one class. GT boxes with
/// no interior points are not eligible. `None` without eligible GT.
pub fn average_precision(preds: &[Vec<Box3D>], gts: &[Vec<GtObject>], class: ObjectClass, tau: f64, mode: IouMode) -> Result<Option<f64>> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::invalid(format!("IoU threshold {tau} outside (0, 1)")));
    }
    let eligible: Vec<Vec<Box3D>> = gts
        .iter()
        .map(|f| f.iter().filter(|g| g.points > 0 && g.box3d.class == class).map(|g| g.box3d).collect())
        .collect();
    let total: usize = eligible.iter().map(Vec::len).sum();
    if total == 0 {
        return Ok(None);
    }
    let mut order: Vec<(usize, usize)> = preds
        .iter()
        .enumerate()
        .flat_map(|(f, ps)| ps.iter().enumerate().filter(|(_, p)| p.class == class).map(move |(i, _)| (f, i)))
        .collect();
    order.sort_by(|a, b| preds[b.0][b.1].score.total_cmp(&preds[a.0][a.1].score).then(a.cmp(b)));
    let mut used: Vec<Vec<bool>> = eligible.iter().map(|f| vec![false; f.len()]).collect();
    let mut hits = Vec::with_capacity(order.len());
    for (f, i) in order {
        let p = &preds[f][i];
        let mut best: Option<(usize, f64)> = None;
        if let Some(gf) = eligible.get(f) {
            for (j, g) in gf.iter().enumerate() {
                if used[f][j] {
                    continue;
                }
                let iou = mode.iou(p, g);
                if iou >= tau && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
        }
        if let Some((j, _)) = best {
            used[f][j] = true;
        }
        hits.push(best.is_some());
    }
    Ok(Some(ap_from_hits(&hits, total)))
}

/// Area under the precision envelope for ranked hit flags.
pub fn ap_from_hits(hits: &[bool], total_gt: usize) -> f64 {
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(hits.len());
    for (k, &h) in hits.iter().enumerate() {
        tp += usize::from(h);
        curve.push((tp as f64 / total_gt as f64, tp as f64 / (k + 1) as f64));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..curve.len() {
        let envelope = curve[i..].iter().map(|c| c.1).fold(0.0, f64::max);
        ap += (curve[i].0 - prev_recall) * envelope;
        prev_recall = curve[i].0;
    }
    ap
}

/// Greedy per-frame pairing of predictions with ground truth by
/// descending BEV IoU above `gate` (ties to the lowest indices).
pub fn assign_pairs(preds: &[Vec<Box3D>], gts: &[Vec<GtObject>], gate: f64) -> Vec<(Box3D, GtObject)> {
    let mut out = Vec::new();
    for (f, ps) in preds.iter().enumerate() {
        let Some(gf) = gts.get(f) else { continue };
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (i, p) in ps.iter().enumerate() {
            for (j, g) in gf.iter().enumerate() {
                let iou = IouMode::Bev.iou(p, &g.box3d);
                if iou > gate {
                    cands.push((iou, i, j));
                }
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let (mut pu, mut gu) = (vec![false; ps.len()], vec![false; gf.len()]);
        for (_, i, j) in cands {
            if !pu[i] && !gu[j] {
                pu[i] = true;
                gu[j] = true;
                out.push((ps[i], gf[j]));
            }
        }
    }
    out
}

/// Fraction of pairs with IoU at least `tau`; `None` for no pairs.
pub fn box_accuracy(pairs: &[(Box3D, GtObject)], tau: f64, mode: IouMode) -> Option<f64> {
    if pairs.is_empty() {
        return None;
    }
    let good = pairs.iter().filter(|(p, g)| mode.iou(p, &g.box3d) >= tau).count();
    Some(good as f64 / pairs.len() as f64)
}

/// CLEAR-MOT counts; combine sequences with [`MotCounts::add`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MotCounts {
    pub ground_truth: usize,
    pub matches: usize,
    pub false_positives: usize,
    pub misses: usize,
    pub id_switches: usize,
    /// Sum of `1 - IoU` over matches.
    pub distance_sum: f64,
}

impl MotCounts {
    pub fn add(&mut self, o: &MotCounts) {
        self.ground_truth += o.ground_truth;
        self.matches += o.matches;
        self.false_positives += o.false_positives;
        self.misses += o.misses;
        self.id_switches += o.id_switches;
        self.distance_sum += o.distance_sum;
    }

    pub fn mota(&self) -> Result<f64> {
        if self.ground_truth == 0 {
            return Err(Error::invalid("MOTA is undefined without ground truth"));
        }
        let errors = self.misses + self.false_positives + self.id_switches;
        Ok(100.0 * (1.0 - errors as f64 / self.ground_truth as f64))
    }

    /// Lower is better; zero without matches.
    pub fn motp(&self) -> f64 {
        if self.matches == 0 {
            0.0
        } else {
            100.0 * self.distance_sum / self.matches as f64
        }
    }
}

/// Frame-by-frame matching at BEV IoU `tau`: correspondences of the
/// previous frame are kept while they still overlap enough, the rest are
/// assigned optimally.
pub fn mot_counts(preds: &[Vec<(u64, Box3D)>], gts: &[Vec<(u64, Box3D)>], tau: f64) -> MotCounts {
    let mut c = MotCounts::default();
    let mut last: HashMap<u64, u64> = HashMap::new();
    let mut previous: HashMap<u64, u64> = HashMap::new();
    let n = preds.len().max(gts.len());
    let empty = Vec::new();
    for f in 0..n {
        let ps = preds.get(f).unwrap_or(&empty);
        let gs = gts.get(f).unwrap_or(&empty);
        c.ground_truth += gs.len();
        let iou = |i: usize, j: usize| IouMode::Bev.iou(&ps[i].1, &gs[j].1);
        let mut pu = vec![false; ps.len()];
        let mut gu = vec![false; gs.len()];
        let mut matched: Vec<(usize, usize)> = Vec::new();
        for (j, g) in gs.iter().enumerate() {
            if let Some(pid) = previous.get(&g.0) {
                if let Some(i) = ps.iter().position(|p| p.0 == *pid) {
                    if !pu[i] && iou(i, j) >= tau {
                        pu[i] = true;
                        gu[j] = true;
                        matched.push((i, j));
                    }
                }
            }
        }
        let rows: Vec<usize> = (0..ps.len()).filter(|&i| !pu[i]).collect();
        let cols: Vec<usize> = (0..gs.len()).filter(|&j| !gu[j]).collect();
        if !rows.is_empty() && !cols.is_empty() {
            let cost: Vec<Vec<f64>> = rows
                .iter()
                .map(|&i| cols.iter().map(|&j| if iou(i, j) >= tau { 1.0 - iou(i, j) } else { 1.0 + 1e6 }).collect())
                .collect();
            for (r, k) in hungarian(&cost) {
                let (i, j) = (rows[r], cols[k]);
                if iou(i, j) >= tau {
                    matched.push((i, j));
                }
            }
        }
        previous.clear();
        for &(i, j) in &matched {
            let (pid, gid) = (ps[i].0, gs[j].0);
            if last.get(&gid).is_some_and(|&p| p != pid) {
                c.id_switches += 1;
            }
            last.insert(gid, pid);
            previous.insert(gid, pid);
            c.distance_sum += 1.0 - iou(i, j);
        }
        c.matches += matched.len();
        c.false_positives += ps.len() - matched.len();
        c.misses += gs.len() - matched.len();
    }
    c
}

/// `(MOTA, MOTP)` of one sequence.
pub fn mota_motp(preds: &[Vec<(u64, Box3D)>], gts: &[Vec<(u64, Box3D)>], tau: f64) -> Result<(f64, f64)> {
    let c = mot_counts(preds, gts, tau);
    Ok((c.mota()?, c.motp()))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct IouBucket {
    pub count: usize,
    pub iou_3d_sum: f64,
    pub iou_bev_sum: f64,
}

impl IouBucket {
    pub fn mean_3d(&self) -> Option<f64> {
        (self.count > 0).then(|| self.iou_3d_sum / self.count as f64)
    }

    pub fn mean_bev(&self) -> Option<f64> {
        (self.count > 0).then(|| self.iou_bev_sum / self.count as f64)
    }

    fn push(&mut self, i3: f64, ib: f64) {
        self.count += 1;
        self.iou_3d_sum += i3;
        self.iou_bev_sum += ib;
    }

    fn add(&mut self, o: &IouBucket) {
        self.count += o.count;
        self.iou_3d_sum += o.iou_3d_sum;
        self.iou_bev_sum += o.iou_bev_sum;
    }
}

/// Mean IoU of gated labels overall and by distance: all, [0, 30),
/// [30, 50), [50, inf) meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MeanIouReport {
    pub buckets: [IouBucket; 4],
}

impl MeanIouReport {
    pub const BUCKET_NAMES: [&'static str; 4] = ["all", "0-30m", "30-50m", "50m+"];

    pub fn add(&mut self, o: &MeanIouReport) {
        for (a, b) in self.buckets.iter_mut().zip(&o.buckets) {
            a.add(b);
        }
    }
}

/// Each label is paired with the GT of highest BEV IoU in its frame and
/// kept when that IoU exceeds the gate.
pub fn mean_iou_report(labels: &[Vec<Box3D>], gts: &[Vec<GtObject>]) -> MeanIouReport {
    let mut r = MeanIouReport::default();
    for (f, ls) in labels.iter().enumerate() {
        let Some(gf) = gts.get(f) else { continue };
        for l in ls {
            let best = gf
                .iter()
                .map(|g| (IouMode::Bev.iou(l, &g.box3d), g))
                .fold(None::<(f64, &GtObject)>, |acc, (v, g)| match acc {
                    Some((b, _)) if b >= v => acc,
                    _ => Some((v, g)),
                });
            let Some((bev, g)) = best else { continue };
            if bev <= MEAN_IOU_GATE {
                continue;
            }
            let i3 = IouMode::ThreeD.iou(l, &g.box3d);
            let bucket = 1 + DISTANCE_EDGES.iter().filter(|&&e| g.distance >= e).count();
            r.buckets[0].push(i3, bev);
            r.buckets[bucket].push(i3, bev);
        }
    }
    r
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApEntry {
    pub class: ObjectClass,
    pub mode: IouMode,
    pub threshold: f64,
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyEntry {
    pub threshold: f64,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap: Vec<ApEntry>,
    /// 3D box accuracy over labels paired with ground truth.
    pub accuracy: Vec<AccuracyEntry>,
    pub mot: MotCounts,
    pub mota: Option<f64>,
    pub motp: Option<f64>,
    pub mean_iou: MeanIouReport,
    pub labels: usize,
    pub pairs: usize,
}

pub const AP_THRESHOLDS: [f64; 2] = [0.7, 0.8];

/// Full report of label sets against their sequences' ground truth.
pub fn evaluate(pairs: &[(&AutoLabelSet, &SequenceDataset)]) -> Result<EvalReport> {
    let mut preds: Vec<Vec<Box3D>> = Vec::new();
    let mut gts: Vec<Vec<GtObject>> = Vec::new();
    let mut mot = MotCounts::default();
    let mut labels = 0;
    for (set, ds) in pairs {
        if set.frames.len() != ds.frames.len() {
            return Err(Error::invalid(format!(
                "labels of {} cover {} frames, sequence has {}",
                set.sequence_id,
                set.frames.len(),
                ds.frames.len()
            )));
        }
        let g = ground_truth_objects(ds);
        let lb = label_boxes(set);
        let gt_ids: Vec<Vec<(u64, Box3D)>> = g.iter().map(|f| f.iter().map(|o| (o.object_id, o.box3d)).collect()).collect();
        mot.add(&mot_counts(&lb, &gt_ids, DEFAULT_MOT_THRESHOLD));
        labels += set.len();
        preds.extend(lb.into_iter().map(|f| f.into_iter().map(|(_, b)| b).collect()));
        gts.extend(g);
    }
    let mut ap = Vec::new();
    for class in ObjectClass::ALL {
        for mode in [IouMode::ThreeD, IouMode::Bev] {
            for t in AP_THRESHOLDS {
                ap.push(ApEntry {
                    class,
                    mode,
                    threshold: t,
                    ap: average_precision(&preds, &gts, class, t, mode)?,
                });
            }
        }
    }
    let assigned = assign_pairs(&preds, &gts, 0.0);
    let accuracy = AP_THRESHOLDS
        .iter()
        .map(|&t| AccuracyEntry {
            threshold: t,
            accuracy: box_accuracy(&assigned, t, IouMode::ThreeD),
        })
        .collect();
    Ok(EvalReport {
        ap,
        accuracy,
        mot,
        mota: mot.mota().ok(),
        motp: (mot.ground_truth > 0).then(|| mot.motp()),
        mean_iou: mean_iou_report(&preds, &gts),
        labels,
        pairs: assigned.len(),
    })
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", 100.0 * x))
}

impl EvalReport {
    /// Human-readable table; ratios as percentages.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "labels {}  paired {}", self.labels, self.pairs);
        for e in &self.ap {
            let _ = writeln!(s, "AP {:<10} {:<3} @{:.1}  {}", e.class.name(), e.mode.name(), e.threshold, pct(e.ap));
        }
        for a in &self.accuracy {
            let _ = writeln!(s, "accuracy 3d @{:.1}  {}", a.threshold, pct(a.accuracy));
        }
        let num = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"));
        let _ = writeln!(
            s,
            "MOTA {}  MOTP {}  (fp {} miss {} idsw {} gt {})",
            num(self.mota),
            num(self.motp),
            self.mot.false_positives,
            self.mot.misses,
            self.mot.id_switches,
            self.mot.ground_truth
        );
        for (name, b) in MeanIouReport::BUCKET_NAMES.iter().zip(&self.mean_iou.buckets) {
            let _ = writeln!(s, "mean IoU {:<7} 3d {}  bev {}  n {}", name, pct(b.mean_3d()), pct(b.mean_bev()), b.count);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vbox(x: f64, score: f64) -> Box3D {
        Box3D::new([x, 0.0, 0.8], [4.0, 2.0, 1.6], 0.0, score, ObjectClass::Vehicle)
    }

    fn gt(id: u64, x: f64, distance: f64) -> GtObject {
        GtObject {
            object_id: id,
            box3d: vbox(x, 1.0),
            distance,
            points: 10,
        }
    }

    #[test]
    fn ap_examples() {
        let g = vec![vec![gt(1, 0.0, 10.0)]];
        let p = vec![vec![vbox(0.0, 0.3)]];
        assert_eq!(average_precision(&p, &g, ObjectClass::Vehicle, 0.7, IouMode::ThreeD).unwrap(), Some(1.0));
        let g2 = vec![vec![gt(1, 0.0, 10.0), gt(2, 20.0, 10.0)]];
        let p2 = vec![vec![vbox(0.0, 0.9), vbox(50.0, 0.8)]];
        let ap = average_precision(&p2, &g2, ObjectClass::Vehicle, 0.7, IouMode::Bev).unwrap().unwrap();
        assert!((ap - 0.5).abs() < 1e-12);
        assert_eq!(average_precision(&p, &[vec![]], ObjectClass::Vehicle, 0.7, IouMode::Bev).unwrap(), None);
        assert!(average_precision(&p, &g, ObjectClass::Vehicle, 1.0, IouMode::Bev).is_err());
    }

    #[test]
    fn pointless_ground_truth_is_not_eligible() {
        let mut g = gt(1, 0.0, 5.0);
        g.points = 0;
        assert_eq!(average_precision(&[vec![vbox(0.0, 1.0)]], &[vec![g]], ObjectClass::Vehicle, 0.5, IouMode::Bev).unwrap(), None);
    }

    #[test]
    fn accuracy_counts() {
        let pairs: Vec<(Box3D, GtObject)> = [0.0, 0.0, 0.0, 3.0].iter().map(|&dx| (vbox(dx, 1.0), gt(1, 0.0, 1.0))).collect();
        assert_eq!(box_accuracy(&pairs, 0.7, IouMode::ThreeD), Some(0.75));
        assert_eq!(box_accuracy(&pairs[..3], 0.7, IouMode::ThreeD), Some(1.0));
        assert_eq!(box_accuracy(&[], 0.7, IouMode::ThreeD), None);
    }

    #[test]
    fn mot_examples() {
        let frames: Vec<Vec<(u64, Box3D)>> = (0..100).map(|_| vec![(1, vbox(0.0, 1.0))]).collect();
        assert_eq!(mota_motp(&frames, &frames, 0.5).unwrap(), (100.0, 0.0));
        let mut sw = frames.clone();
        for f in sw.iter_mut().skip(50) {
            f[0].0 = 2;
        }
        let (mota, _) = mota_motp(&sw, &frames, 0.5).unwrap();
        assert!((mota - 99.0).abs() < 1e-12);
        // A 4 m box shifted by 4/3 m has BEV IoU exactly 0.5.
        let half: Vec<Vec<(u64, Box3D)>> = (0..4).map(|_| vec![(1, vbox(4.0 / 3.0, 1.0))]).collect();
        let (_, motp) = mota_motp(&half, &frames[..4], 0.5).unwrap();
        assert!((motp - 50.0).abs() < 1e-9);
        assert!(mota_motp(&frames, &[], 0.5).is_err());
    }

    #[test]
    fn mean_iou_gating_and_buckets() {
        let g = vec![vec![gt(1, 0.0, 10.0), gt(2, 100.0, 40.0)]];
        let same = mean_iou_report(&[vec![vbox(0.0, 1.0), vbox(100.0, 1.0)]], &g);
        assert_eq!(same.buckets[0].count, 2);
        assert_eq!(same.buckets[0].mean_3d(), Some(1.0));
        assert_eq!(same.buckets[1].count, 1);
        assert_eq!(same.buckets[2].count, 1);
        assert_eq!(same.buckets[3].count, 0);
        // BEV IoU of 0.01 falls under the gate.
        let x = 4.0 - 0.08 / 1.01;
        let far = mean_iou_report(&[vec![vbox(x, 1.0)]], &g);
        assert!(IouMode::Bev.iou(&vbox(x, 1.0), &g[0][0].box3d) < 0.03);
        assert_eq!(far.buckets[0].count, 0);
    }
}
