//! Model and checkpoint files.
//!
//! Both are one JSON header line followed by a blob of little-endian
//! 64-bit reals whose length the header records.

use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::nets::{DynamicArch, DynamicNet, StaticArch, StaticNet, Weights};
use super::train::{train_dynamic, train_static, AdamState, TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::extraction::ObjectTrackData;
use crate::geometry::ObjectClass;
use crate::io::{header_error, write_atomically};
use crate::motion_state::{LinearMotionClassifier, MotionState};
use crate::par::Executor;

pub const MODEL_FORMAT: &str = "autolabel-model";
pub const CHECKPOINT_FORMAT: &str = "autolabel-checkpoint";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NetSpec {
    Static { class: ObjectClass, arch: StaticArch },
    Dynamic { class: ObjectClass, arch: DynamicArch },
}

impl NetSpec {
    fn sizes(&self) -> Result<(usize, usize)> {
        Ok(match self {
            NetSpec::Static { class, arch } => {
                let n = StaticNet::new(*class, arch)?;
                (n.n_params, n.n_stats)
            }
            NetSpec::Dynamic { class, arch } => {
                let n = DynamicNet::new(*class, arch)?;
                (n.n_params, n.n_stats)
            }
        })
    }
}

/// Trained refiner networks per class plus the motion-state classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinerModel {
    pub classifier: LinearMotionClassifier,
    pub statics: Vec<(StaticNet, Weights)>,
    pub dynamics: Vec<(DynamicNet, Weights)>,
}

impl RefinerModel {
    pub fn new(classifier: LinearMotionClassifier) -> Self {
        RefinerModel {
            classifier,
            statics: Vec::new(),
            dynamics: Vec::new(),
        }
    }

    pub fn static_net(&self, class: ObjectClass) -> Option<(&StaticNet, &Weights)> {
        self.statics.iter().find(|(n, _)| n.class == class).map(|(n, w)| (n, w))
    }

    pub fn dynamic_net(&self, class: ObjectClass) -> Option<(&DynamicNet, &Weights)> {
        self.dynamics.iter().find(|(n, _)| n.class == class).map(|(n, w)| (n, w))
    }
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    format: String,
    version: u32,
    classifier: LinearMotionClassifier,
    nets: Vec<NetEntry>,
    blob_len: usize,
}

#[derive(Serialize, Deserialize)]
struct NetEntry {
    #[serde(flatten)]
    spec: NetSpec,
    n_params: usize,
    n_stats: usize,
}

fn write_blob_file<H: Serialize>(path: &Path, header: &H, blob: &[&[f64]]) -> Result<()> {
    write_atomically(path, |w| {
        serde_json::to_writer(&mut *w, header).map_err(std::io::Error::other)?;
        w.write_all(b"\n")?;
        for part in blob {
            for v in *part {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    })
}

fn read_blob_file<H: DeserializeOwned>(path: &Path) -> Result<(H, Vec<f64>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| header_error(path, "missing header line"))?;
    let header: H = serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        column: e.column(),
        message: e.to_string(),
    })?;
    let body = &bytes[nl + 1..];
    if body.len() % 8 != 0 {
        return Err(header_error(path, format!("blob length {} is not a multiple of 8", body.len())));
    }
    let values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok((header, values))
}

fn check_format(path: &Path, format: &str, version: u32, want: &str) -> Result<()> {
    if format != want || version != MODEL_VERSION {
        return Err(header_error(path, format!("expected {want} v{MODEL_VERSION}, found {format} v{version}")));
    }
    Ok(())
}

pub fn save_model(model: &RefinerModel, path: &Path) -> Result<()> {
    let mut nets = Vec::new();
    let mut blob: Vec<&[f64]> = Vec::new();
    for (n, w) in &model.statics {
        nets.push(NetEntry {
            spec: NetSpec::Static {
                class: n.class,
                arch: n.arch.clone(),
            },
            n_params: n.n_params,
            n_stats: n.n_stats,
        });
        blob.push(&w.params);
        blob.push(&w.stats);
    }
    for (n, w) in &model.dynamics {
        nets.push(NetEntry {
            spec: NetSpec::Dynamic {
                class: n.class,
                arch: n.arch.clone(),
            },
            n_params: n.n_params,
            n_stats: n.n_stats,
        });
        blob.push(&w.params);
        blob.push(&w.stats);
    }
    let header = ModelHeader {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        classifier: model.classifier,
        nets,
        blob_len: blob.iter().map(|b| b.len()).sum(),
    };
    write_blob_file(path, &header, &blob)
}

pub fn load_model(path: &Path) -> Result<RefinerModel> {
    let (header, blob): (ModelHeader, Vec<f64>) = read_blob_file(path)?;
    check_format(path, &header.format, header.version, MODEL_FORMAT)?;
    if blob.len() != header.blob_len {
        return Err(header_error(path, format!("blob holds {} values, header says {}", blob.len(), header.blob_len)));
    }
    let mut model = RefinerModel::new(header.classifier);
    let mut at = 0;
    for e in header.nets {
        if e.spec.sizes()? != (e.n_params, e.n_stats) || at + e.n_params + e.n_stats > blob.len() {
            return Err(header_error(path, "parameter counts do not match the architecture"));
        }
        let weights = Weights {
            params: blob[at..at + e.n_params].to_vec(),
            stats: blob[at + e.n_params..at + e.n_params + e.n_stats].to_vec(),
        };
        at += e.n_params + e.n_stats;
        match e.spec {
            NetSpec::Static { class, arch } => model.statics.push((StaticNet::new(class, &arch)?, weights)),
            NetSpec::Dynamic { class, arch } => model.dynamics.push((DynamicNet::new(class, &arch)?, weights)),
        }
    }
    Ok(model)
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    #[serde(flatten)]
    spec: NetSpec,
    epoch: usize,
    adam_t: u64,
    losses: Vec<f64>,
    n_params: usize,
    n_stats: usize,
}

pub fn save_checkpoint(spec: &NetSpec, state: &TrainState, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: MODEL_VERSION,
        spec: spec.clone(),
        epoch: state.epoch,
        adam_t: state.adam.t,
        losses: state.losses.clone(),
        n_params: state.weights.params.len(),
        n_stats: state.weights.stats.len(),
    };
    let w = &state.weights;
    write_blob_file(path, &header, &[&w.params, &w.stats, &state.adam.m, &state.adam.v])
}

pub fn load_checkpoint(path: &Path) -> Result<(NetSpec, TrainState)> {
    let (h, blob): (CheckpointHeader, Vec<f64>) = read_blob_file(path)?;
    check_format(path, &h.format, h.version, CHECKPOINT_FORMAT)?;
    let (np, ns) = (h.n_params, h.n_stats);
    if h.spec.sizes()? != (np, ns) || blob.len() != 3 * np + ns {
        return Err(header_error(path, "checkpoint sizes do not match the architecture"));
    }
    let state = TrainState {
        epoch: h.epoch,
        weights: Weights {
            params: blob[..np].to_vec(),
            stats: blob[np..np + ns].to_vec(),
        },
        adam: AdamState {
            m: blob[np + ns..2 * np + ns].to_vec(),
            v: blob[2 * np + ns..].to_vec(),
            t: h.adam_t,
        },
        losses: h.losses,
    };
    Ok((h.spec, state))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinerTrainConfig {
    pub static_arch: StaticArch,
    pub dynamic_arch: DynamicArch,
    pub static_training: TrainConfig,
    pub dynamic_training: TrainConfig,
}

impl Default for RefinerTrainConfig {
    fn default() -> Self {
        RefinerTrainConfig {
            static_arch: StaticArch::default(),
            dynamic_arch: DynamicArch::default(),
            static_training: TrainConfig::static_default(),
            dynamic_training: TrainConfig::dynamic_default(),
        }
    }
}

fn checkpoint_name(spec: &NetSpec) -> String {
    match spec {
        NetSpec::Static { class, .. } => format!("static-{}.ckpt", class.name()),
        NetSpec::Dynamic { class, .. } => format!("dynamic-{}.ckpt", class.name()),
    }
}

fn resume(spec: &NetSpec, dir: Option<&Path>, fresh: impl FnOnce() -> Weights) -> Result<TrainState> {
    if let Some(path) = dir.map(|d| d.join(checkpoint_name(spec))) {
        if path.exists() {
            let (found, state) = load_checkpoint(&path)?;
            if &found != spec {
                return Err(Error::invalid(format!("checkpoint {} was written for another architecture", path.display())));
            }
            log::info!("resuming {} at epoch {}", path.display(), state.epoch);
            return Ok(state);
        }
    }
    Ok(TrainState::fresh(fresh()))
}

/// Trains one static and one dynamic network for every class with
/// ground-truth tracks. With `checkpoints`, state is saved after every
/// epoch and training resumes from any checkpoint already there.
pub fn train_refiner(
    data: &[ObjectTrackData],
    cfg: &RefinerTrainConfig,
    classifier: LinearMotionClassifier,
    exec: &Executor,
    checkpoints: Option<&Path>,
) -> Result<RefinerModel> {
    let usable: Vec<&ObjectTrackData> = data.iter().filter(|d| !d.is_empty() && d.has_ground_truth()).collect();
    if usable.is_empty() {
        return Err(Error::Training("no tracks with ground truth to train on".into()));
    }
    if let Some(d) = checkpoints {
        std::fs::create_dir_all(d).map_err(|e| Error::Io {
            path: d.to_path_buf(),
            source: e,
        })?;
    }
    let mut model = RefinerModel::new(classifier);
    for class in ObjectClass::ALL {
        let has = |s: MotionState| usable.iter().any(|d| d.class == class && d.motion_state == s);
        let st = &cfg.static_training;
        if has(MotionState::Static) || (st.dynamic_to_static && has(MotionState::Dynamic)) {
            let spec = NetSpec::Static {
                class,
                arch: cfg.static_arch.clone(),
            };
            let net = StaticNet::new(class, &cfg.static_arch)?;
            let mut state = resume(&spec, checkpoints, || net.init(st.seed))?;
            let mut save = |s: &TrainState| match checkpoints {
                Some(d) => save_checkpoint(&spec, s, &d.join(checkpoint_name(&spec))),
                None => Ok(()),
            };
            train_static(&net, data, st, &mut state, st.epochs, exec, &mut save)?;
            model.statics.push((net, state.weights));
        }
        if has(MotionState::Dynamic) {
            let dt = &cfg.dynamic_training;
            let spec = NetSpec::Dynamic {
                class,
                arch: cfg.dynamic_arch.clone(),
            };
            let net = DynamicNet::new(class, &cfg.dynamic_arch)?;
            let mut state = resume(&spec, checkpoints, || net.init(dt.seed))?;
            let mut save = |s: &TrainState| match checkpoints {
                Some(d) => save_checkpoint(&spec, s, &d.join(checkpoint_name(&spec))),
                None => Ok(()),
            };
            train_dynamic(&net, data, dt, &mut state, dt.epochs, exec, &mut save)?;
            model.dynamics.push((net, state.weights));
        }
    }
    Ok(model)
}
