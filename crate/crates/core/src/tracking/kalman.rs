//! Constant-velocity Kalman filter over `[cx, cy, cz, l, w, h, θ, vx, vy, vz]`.

use nalgebra::{SMatrix, SVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::geometry::{align_heading, angle_diff, normalize_angle, Box3D, ObjectClass};

pub const STATE_DIM: usize = 10;
pub const MEAS_DIM: usize = 7;
const HEADING: usize = 6;

pub type StateVector = SVector<f64, STATE_DIM>;
pub type StateCovariance = SMatrix<f64, STATE_DIM, STATE_DIM>;

/// Diagonal process noise, per second of prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProcessNoise {
    pub position: f64,
    pub size: f64,
    pub heading: f64,
    pub velocity: f64,
}

impl Default for ProcessNoise {
    fn default() -> Self {
        ProcessNoise {
            position: 0.1,
            size: 0.01,
            heading: 0.01,
            velocity: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeasurementNoise {
    pub position: f64,
    pub size: f64,
    pub heading: f64,
}

impl Default for MeasurementNoise {
    fn default() -> Self {
        MeasurementNoise {
            position: 0.1,
            size: 0.01,
            heading: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackState {
    pub mean: StateVector,
    pub covariance: StateCovariance,
}

impl TrackState {
    pub fn from_detection(det: &Box3D, r: &MeasurementNoise, initial_velocity_variance: f64) -> Self {
        let mut mean = StateVector::zeros();
        mean[0] = det.cx;
        mean[1] = det.cy;
        mean[2] = det.cz;
        mean[3] = det.length;
        mean[4] = det.width;
        mean[5] = det.height;
        mean[HEADING] = normalize_angle(det.heading);
        let mut diag = [0.0; STATE_DIM];
        diag[..3].fill(r.position);
        diag[3..6].fill(r.size);
        diag[HEADING] = r.heading;
        diag[7..].fill(initial_velocity_variance);
        TrackState {
            mean,
            covariance: StateCovariance::from_diagonal(&SVector::from(diag)),
        }
    }

    pub fn to_box(&self, score: f64, class: ObjectClass) -> Box3D {
        let m = &self.mean;
        Box3D::new(
            [m[0], m[1], m[2]],
            [m[3].max(1e-3), m[4].max(1e-3), m[5].max(1e-3)],
            m[HEADING],
            score,
            class,
        )
    }

    pub fn velocity(&self) -> [f64; 3] {
        [self.mean[7], self.mean[8], self.mean[9]]
    }
}

fn transition(dt: f64) -> StateCovariance {
    let mut f = StateCovariance::identity();
    for axis in 0..3 {
        f[(axis, 7 + axis)] = dt;
    }
    f
}

fn process_covariance(q: &ProcessNoise, dt: f64) -> StateCovariance {
    let s = dt.abs();
    let mut diag = [0.0; STATE_DIM];
    diag[..3].fill(q.position * s);
    diag[3..6].fill(q.size * s);
    diag[HEADING] = q.heading * s;
    diag[7..].fill(q.velocity * s);
    StateCovariance::from_diagonal(&SVector::from(diag))
}

/// Advances position by velocity·dt and propagates `F P Fᵀ + Q`.
pub fn kalman_predict(state: &TrackState, dt: f64, q: &ProcessNoise) -> TrackState {
    let f = transition(dt);
    let mut mean = f * state.mean;
    mean[HEADING] = normalize_angle(mean[HEADING]);
    let covariance = f * state.covariance * f.transpose() + process_covariance(q, dt);
    TrackState {
        mean,
        covariance: repair_covariance(covariance),
    }
}

/// Measurement update on the seven box parameters. The detection heading is
/// first flipped to within 90° of the state heading and the heading
/// innovation is taken in cyclic space.
pub fn kalman_update(state: &TrackState, det: &Box3D, r: &MeasurementNoise) -> TrackState {
    let mut h = SMatrix::<f64, MEAS_DIM, STATE_DIM>::zeros();
    for i in 0..MEAS_DIM {
        h[(i, i)] = 1.0;
    }
    let mut rd = [0.0; MEAS_DIM];
    rd[..3].fill(r.position);
    rd[3..6].fill(r.size);
    rd[HEADING] = r.heading;
    let rm = SMatrix::<f64, MEAS_DIM, MEAS_DIM>::from_diagonal(&SVector::from(rd));

    let aligned = align_heading(det.heading, state.mean[HEADING]);
    let z = [det.cx, det.cy, det.cz, det.length, det.width, det.height];
    let mut innovation = SVector::<f64, MEAS_DIM>::zeros();
    for i in 0..6 {
        innovation[i] = z[i] - state.mean[i];
    }
    innovation[HEADING] = angle_diff(aligned, state.mean[HEADING]);

    let p = &state.covariance;
    let s = h * p * h.transpose() + rm;
    let Some(s_inv) = s.try_inverse() else {
        log::warn!("singular innovation covariance; skipping update");
        return *state;
    };
    let k = p * h.transpose() * s_inv;
    let mut mean = state.mean + k * innovation;
    mean[HEADING] = normalize_angle(mean[HEADING]);
    // Joseph form keeps the update symmetric PSD up to rounding.
    let ikh = StateCovariance::identity() - k * h;
    let covariance = ikh * p * ikh.transpose() + k * rm * k.transpose();
    TrackState {
        mean,
        covariance: repair_covariance(covariance),
    }
}

/// Re-symmetrizes and clamps negative eigenvalues at zero.
pub fn repair_covariance(c: StateCovariance) -> StateCovariance {
    let sym = (c + c.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        return sym;
    }
    let clamped = eig.eigenvalues.map(|l| l.max(0.0));
    let rebuilt = eig.eigenvectors * StateCovariance::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    (rebuilt + rebuilt.transpose()) * 0.5
}
