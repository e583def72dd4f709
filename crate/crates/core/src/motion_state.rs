//! Track-level static/dynamic classification.
//!
//! Two features are extracted from the world-frame centers of a track's
//! associated detections: the trace of their (population) covariance and
//! the distance from the first center to the last. A logistic-regression
//! classifier on those features decides the motion state of vehicles;
//! pedestrians are always dynamic and short tracks are left undecided.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Box3D, ObjectClass};
use crate::tracking::Track;

pub const DEFAULT_MIN_MEASUREMENTS: usize = 7;
pub const GT_STATIC_MAX_DISTANCE: f64 = 1.0;
pub const GT_STATIC_MAX_SPEED: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionState {
    Static,
    Dynamic,
    Indeterminate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionFeatures {
    /// Trace of the 3×3 center covariance, m².
    pub center_variance: f64,
    /// Distance from the first to the last center, m.
    pub begin_end_distance: f64,
}

impl MotionFeatures {
    pub fn as_array(&self) -> [f64; 2] {
        [self.center_variance, self.begin_end_distance]
    }
}

pub fn features_from_centers(centers: &[Vector3<f64>]) -> MotionFeatures {
    if centers.is_empty() {
        return MotionFeatures {
            center_variance: 0.0,
            begin_end_distance: 0.0,
        };
    }
    let n = centers.len() as f64;
    let mean = centers.iter().fold(Vector3::zeros(), |acc, c| acc + c) / n;
    let cov = centers.iter().fold(Matrix3::zeros(), |acc, c| {
        let d = c - mean;
        acc + d * d.transpose()
    }) / n;
    MotionFeatures {
        center_variance: cov.trace().max(0.0),
        begin_end_distance: (centers[centers.len() - 1] - centers[0]).norm(),
    }
}

pub fn features_from_boxes(boxes: &[Box3D]) -> MotionFeatures {
    let centers: Vec<_> = boxes.iter().map(Box3D::center).collect();
    features_from_centers(&centers)
}

/// Features over the track's associated detection boxes (world frame).
pub fn track_features(track: &Track) -> MotionFeatures {
    features_from_boxes(&track.detections())
}

/// `w·f + b > 0` means dynamic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearMotionClassifier {
    pub weights: [f64; 2],
    pub bias: f64,
}

impl LinearMotionClassifier {
    pub fn decision(&self, f: &MotionFeatures) -> f64 {
        let x = f.as_array();
        self.weights[0] * x[0] + self.weights[1] * x[1] + self.bias
    }

    pub fn predict(&self, f: &MotionFeatures) -> MotionState {
        if self.decision(f) > 0.0 {
            MotionState::Dynamic
        } else {
            MotionState::Static
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite()) && self.bias.is_finite()
    }

    /// A classifier fitted on a fixed synthetic vehicle-track population.
    pub fn fit_default() -> Self {
        let spec = MotionTrackSpec::default();
        let (features, labels) = synthetic_motion_tracks(&spec, 2000, 0x5eed_0001);
        fit_linear_classifier(&features, &labels)
            .map(|r| r.classifier)
            .unwrap_or(LinearMotionClassifier {
                weights: [0.0, 1.0],
                bias: -GT_STATIC_MAX_DISTANCE,
            })
    }
}

pub fn classify_boxes(
    boxes: &[Box3D],
    class: ObjectClass,
    clf: &LinearMotionClassifier,
    min_measurements: usize,
) -> MotionState {
    if boxes.len() < min_measurements.max(2) {
        return MotionState::Indeterminate;
    }
    if class == ObjectClass::Pedestrian {
        return MotionState::Dynamic;
    }
    clf.predict(&features_from_boxes(boxes))
}

pub fn classify_motion(track: &Track, clf: &LinearMotionClassifier, min_measurements: usize) -> MotionState {
    classify_boxes(&track.detections(), track.class, clf, min_measurements)
}

/// Ground-truth motion state from time-indexed boxes: static only if the
/// begin-to-end distance is under 1 m and the speed between consecutive
/// boxes stays under 1 m/s.
///
/// Each entry is `(frame index, box)`; speed uses the frame gap.
pub fn gt_motion_label(gt_boxes: &[(usize, Box3D)], frequency: f64) -> Result<MotionState> {
    if gt_boxes.len() < 2 {
        return Err(Error::invalid("ground-truth motion label needs at least two boxes"));
    }
    if !(frequency > 0.0) {
        return Err(Error::invalid("frequency must be positive"));
    }
    let first = gt_boxes[0].1.center();
    let last = gt_boxes[gt_boxes.len() - 1].1.center();
    let begin_end = (last - first).norm();
    let mut max_speed: f64 = 0.0;
    for pair in gt_boxes.windows(2) {
        let (fa, a) = pair[0];
        let (fb, b) = pair[1];
        let dt = fb.saturating_sub(fa).max(1) as f64 / frequency;
        max_speed = max_speed.max((b.center() - a.center()).norm() / dt);
    }
    if begin_end < GT_STATIC_MAX_DISTANCE && max_speed < GT_STATIC_MAX_SPEED {
        Ok(MotionState::Static)
    } else {
        Ok(MotionState::Dynamic)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitReport {
    pub classifier: LinearMotionClassifier,
    pub train_accuracy: f64,
}

const FIT_STEPS: usize = 200;
/// Ridge penalty on the standardized weights; keeps separable sets finite.
const FIT_RIDGE: f64 = 1e-8;

/// Logistic regression by Newton iterations on standardized features; the
/// standardization is folded back into the returned weights.
pub fn fit_linear_classifier(features: &[MotionFeatures], labels: &[MotionState]) -> Result<FitReport> {
    if features.len() != labels.len() {
        return Err(Error::invalid("features and labels differ in length"));
    }
    let y: Vec<f64> = labels
        .iter()
        .map(|l| match l {
            MotionState::Dynamic => Ok(1.0),
            MotionState::Static => Ok(0.0),
            MotionState::Indeterminate => Err(Error::invalid("indeterminate labels cannot be fitted")),
        })
        .collect::<Result<_>>()?;
    let positives = y.iter().filter(|v| **v > 0.5).count();
    if positives == 0 || positives == y.len() {
        return Err(Error::invalid("classifier fitting needs both static and dynamic examples"));
    }
    let n = features.len() as f64;
    let xs: Vec<[f64; 2]> = features.iter().map(MotionFeatures::as_array).collect();
    let mut mean = [0.0; 2];
    let mut std = [0.0; 2];
    for d in 0..2 {
        mean[d] = xs.iter().map(|x| x[d]).sum::<f64>() / n;
        let var = xs.iter().map(|x| (x[d] - mean[d]).powi(2)).sum::<f64>() / n;
        std[d] = if var > 0.0 { var.sqrt() } else { 1.0 };
    }
    let z: Vec<[f64; 2]> = xs
        .iter()
        .map(|x| [(x[0] - mean[0]) / std[0], (x[1] - mean[1]) / std[1]])
        .collect();

    let mut theta = Vector3::zeros();
    for _ in 0..FIT_STEPS {
        let mut grad = Vector3::zeros();
        let mut hess = Matrix3::zeros();
        for (zi, yi) in z.iter().zip(&y) {
            let x = Vector3::new(zi[0], zi[1], 1.0);
            let p = 1.0 / (1.0 + (-theta.dot(&x)).exp());
            grad += x * (p - yi);
            hess += x * x.transpose() * (p * (1.0 - p));
        }
        grad /= n;
        hess /= n;
        for d in 0..2 {
            grad[d] += FIT_RIDGE * theta[d];
            hess[(d, d)] += FIT_RIDGE;
        }
        let Some(step) = hess.lu().solve(&grad) else { break };
        theta -= step;
        if step.norm() < 1e-10 {
            break;
        }
    }
    let (w, b) = ([theta[0], theta[1]], theta[2]);
    let weights = [w[0] / std[0], w[1] / std[1]];
    let bias = b - weights[0] * mean[0] - weights[1] * mean[1];
    let classifier = LinearMotionClassifier { weights, bias };
    if !classifier.is_finite() {
        return Err(Error::Training("logistic regression diverged".into()));
    }
    let correct = features
        .iter()
        .zip(labels)
        .filter(|(f, l)| classifier.predict(f) == **l)
        .count();
    Ok(FitReport {
        classifier,
        train_accuracy: correct as f64 / n,
    })
}

/// Population used to fit and check motion classifiers: straight-line
/// vehicle tracks observed with isotropic Gaussian center noise.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionTrackSpec {
    pub frequency: f64,
    pub min_length: usize,
    pub max_length: usize,
    pub static_fraction: f64,
    pub speed_range: [f64; 2],
    pub center_sigma: f64,
}

impl Default for MotionTrackSpec {
    fn default() -> Self {
        MotionTrackSpec {
            frequency: 10.0,
            min_length: DEFAULT_MIN_MEASUREMENTS,
            max_length: 200,
            static_fraction: 0.5,
            speed_range: [1.5, 15.0],
            center_sigma: 0.3,
        }
    }
}

/// Draws `n` tracks, returning their features and ground-truth labels.
pub fn synthetic_motion_tracks(spec: &MotionTrackSpec, n: usize, seed: u64) -> (Vec<MotionFeatures>, Vec<MotionState>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.center_sigma.max(0.0)).unwrap_or_else(|_| Normal::new(0.0, 0.0).unwrap());
    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let len = rng.random_range(spec.min_length.max(2)..=spec.max_length.max(spec.min_length.max(2)));
        let is_static = rng.random_bool(spec.static_fraction.clamp(0.0, 1.0));
        let speed = if is_static {
            0.0
        } else {
            rng.random_range(spec.speed_range[0]..=spec.speed_range[1])
        };
        let dir = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let origin = Vector3::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), 0.8);
        let velocity = Vector3::new(dir.cos(), dir.sin(), 0.0) * speed;
        let mut gt = Vec::with_capacity(len);
        let mut observed = Vec::with_capacity(len);
        for k in 0..len {
            let t = k as f64 / spec.frequency;
            let c = origin + velocity * t;
            gt.push((k, Box3D::new([c.x, c.y, c.z], [4.8, 1.8, 1.5], dir, 1.0, ObjectClass::Vehicle)));
            observed.push(c + Vector3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng)));
        }
        let label = gt_motion_label(&gt, spec.frequency).unwrap_or(MotionState::Dynamic);
        features.push(features_from_centers(&observed));
        labels.push(label);
    }
    (features, labels)
}
