//! Offboard 3D auto labeling over lidar point-cloud sequences.
//!
//! The pipeline tracks per-frame detections in the world frame, classifies
//! each track as static or dynamic, extracts object-centric point and box
//! sequences and refines them into one box per object (static) or one box
//! per frame (dynamic). A synthetic scene generator and the evaluation
//! metrics make every stage testable without external data.

pub mod ablation;
pub mod codec;
pub mod error;
pub mod evaluation;
pub mod extraction;
pub mod geometry;
pub mod io;
pub mod motion_state;
pub mod neural;
pub mod par;
pub mod pipeline;
pub mod refiners;
pub mod synth;
pub mod tracking;

pub use error::{Error, Result};
pub use geometry::{Box3D, ObjectClass, PointCloud, SensorPose};
