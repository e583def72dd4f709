//! Subcommand bodies. Each takes a resolved [`Config`] and returns what it
//! produced so that tests can drive the same code as the binary.

use std::path::{Path, PathBuf};

use anyhow::Context;
use autolabel_core::ablation::{evaluate_variant, sweep_variants, AblationTable, Sweep, VariantResult};
use autolabel_core::evaluation::{evaluate, EvalReport};
use autolabel_core::extraction::{attach_ground_truth, load_track_data, save_track_data, ObjectTrackData};
use autolabel_core::io::{load_labels, load_sequence, save_labels, save_sequence, PointStorage, SequenceDataset};
use autolabel_core::motion_state::MotionState;
use autolabel_core::neural::{load_model, save_model, train_refiner, RefinerModel};
use autolabel_core::par::Executor;
use autolabel_core::pipeline::{classifier_for, run_pipeline, training_tracks, PipelineConfig, TimingReport};
use autolabel_core::synth::{generate_scene_with, perturb_detections, Benchmark, SceneConfig};
use serde::Serialize;

use crate::config::Config;
use crate::UsageError;

pub fn executor(cfg: &Config) -> Executor {
    match cfg.workers {
        1 => Executor::sequential(),
        n => Executor::parallel(n),
    }
}

fn existing(path: &Path, what: &str) -> Result<(), UsageError> {
    if path.exists() {
        Ok(())
    } else {
        Err(UsageError(format!("{what} {} does not exist", path.display())))
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load_model_for(cfg: &Config) -> anyhow::Result<Option<RefinerModel>> {
    match cfg.model_path()? {
        Some(p) => Ok(Some(load_model(p)?)),
        None => Ok(None),
    }
}

/// Tracks with per-frame ground truth; frames without it are dropped.
fn with_ground_truth(tracks: &[ObjectTrackData], ds: &SequenceDataset) -> Vec<ObjectTrackData> {
    tracks
        .iter()
        .filter_map(|t| {
            let mut t = t.clone();
            attach_ground_truth(&mut t, ds)?;
            t.frames.retain(|f| f.ground_truth.is_some());
            (!t.is_empty()).then_some(t)
        })
        .collect()
}

/// Labels one sequence and writes the label file.
pub fn cmd_run(cfg: &Config, sequence: &Path, out: &Path, tracks_out: Option<&Path>) -> anyhow::Result<TimingReport> {
    existing(sequence, "sequence file")?;
    let model = load_model_for(cfg)?;
    let ds = load_sequence(sequence)?;
    let exec = executor(cfg);
    let result = run_pipeline(&ds, &cfg.pipeline, model.as_ref(), &exec)?;
    save_labels(&result.labels, out)?;
    log::info!("{}: {} labels over {} frames", ds.sequence_id, result.labels.len(), ds.frames.len());
    if let Some(p) = tracks_out {
        let tracks = if ds.has_ground_truth() { with_ground_truth(&result.tracks, &ds) } else { result.tracks.clone() };
        save_track_data(&tracks, p)?;
    }
    Ok(result.timings)
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainSource {
    Tracks(Vec<PathBuf>),
    Sequences(Vec<PathBuf>),
    /// `benchmark.scenes` scenes from the synth section, seeds counting up.
    Synth,
}

/// Scenes of the synth section with consecutive seeds.
pub fn synth_scenes(cfg: &Config, exec: &Executor) -> anyhow::Result<Vec<SequenceDataset>> {
    (0..cfg.benchmark.scenes)
        .map(|i| {
            let scene = SceneConfig {
                seed: cfg.synth.scene.seed.wrapping_add(i as u64),
                sequence_id: format!("{}-{i}", cfg.synth.scene.sequence_id),
                ..cfg.synth.scene.clone()
            };
            let clean = generate_scene_with(&scene, exec)?;
            Ok(perturb_detections(&clean, &cfg.synth.noise, scene.seed)?)
        })
        .collect()
}

pub fn training_data(cfg: &Config, source: &TrainSource, exec: &Executor) -> anyhow::Result<Vec<ObjectTrackData>> {
    let clf = classifier_for(&cfg.pipeline, None);
    let from_sequences = |sets: Vec<SequenceDataset>| -> anyhow::Result<Vec<ObjectTrackData>> {
        let mut out = Vec::new();
        for ds in &sets {
            out.extend(training_tracks(ds, &cfg.pipeline, &clf, exec)?);
        }
        Ok(out)
    };
    match source {
        TrainSource::Tracks(paths) => {
            let mut out = Vec::new();
            for p in paths {
                existing(p, "track-data file")?;
                out.extend(load_track_data(p)?);
            }
            Ok(out)
        }
        TrainSource::Sequences(paths) => {
            let mut sets = Vec::new();
            for p in paths {
                existing(p, "sequence file")?;
                sets.push(load_sequence(p)?);
            }
            from_sequences(sets)
        }
        TrainSource::Synth => from_sequences(synth_scenes(cfg, exec)?),
    }
}

/// Trains and writes a model file.
pub fn cmd_train(cfg: &Config, source: &TrainSource, out: &Path, checkpoints: Option<&Path>) -> anyhow::Result<RefinerModel> {
    let exec = executor(cfg);
    let data = training_data(cfg, source, &exec)?;
    let usable = data.iter().filter(|d| d.has_ground_truth() && d.motion_state != MotionState::Indeterminate).count();
    if usable == 0 {
        return Err(UsageError("no tracks with ground truth and a motion state to train on".into()).into());
    }
    log::info!("training on {usable} tracks");
    let clf = classifier_for(&cfg.pipeline, None);
    let model = train_refiner(&data, &cfg.train, clf, &exec, checkpoints)?;
    save_model(&model, out)?;
    Ok(model)
}

/// One report per label file, in argument order.
pub fn cmd_eval(sequence: &Path, labels: &[PathBuf]) -> anyhow::Result<Vec<(String, EvalReport)>> {
    existing(sequence, "sequence file")?;
    let ds = load_sequence(sequence)?;
    if !ds.has_ground_truth() {
        return Err(UsageError(format!("{} has no ground truth to evaluate against", sequence.display())).into());
    }
    labels
        .iter()
        .map(|p| {
            existing(p, "label file")?;
            let set = load_labels(p)?;
            Ok((p.display().to_string(), evaluate(&[(&set, &ds)])?))
        })
        .collect()
}

/// Writes one noisy synthetic sequence, or with `benchmark` the benchmark
/// sequences of every configured seed into the directory `out`.
pub fn cmd_synth(cfg: &Config, out: &Path, blob: bool, benchmark: bool) -> anyhow::Result<Vec<PathBuf>> {
    let storage = if blob { PointStorage::Blob } else { PointStorage::Inline };
    let exec = executor(cfg);
    if !benchmark {
        let clean = generate_scene_with(&cfg.synth.scene, &exec)?;
        let ds = perturb_detections(&clean, &cfg.synth.noise, cfg.synth.scene.seed)?;
        save_sequence(&ds, out, storage)?;
        return Ok(vec![out.to_path_buf()]);
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut written = Vec::new();
    for &seed in &cfg.benchmark.seeds {
        for ds in benchmark_for(cfg, seed).generate(&exec)? {
            let p = out.join(format!("{}.jsonl", ds.sequence_id));
            save_sequence(&ds, &p, storage)?;
            written.push(p);
        }
    }
    Ok(written)
}

pub fn benchmark_for(cfg: &Config, seed: u64) -> Benchmark {
    let b = &cfg.benchmark;
    Benchmark::scaled(seed, b.scenes, b.n_static, b.n_dynamic)
}

/// One sweep over several groups of sequences plus the mean over groups.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub sweep: Sweep,
    pub groups: Vec<(String, AblationTable)>,
    pub mean: AblationTable,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.collect::<Option<Vec<f64>>>()?;
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Row-wise mean of tables with the same variants; a metric missing in
/// any group is missing in the mean.
pub fn mean_table(sweep: Sweep, tables: &[&AblationTable]) -> AblationTable {
    let rows = tables.first().map_or_else(Vec::new, |t| {
        t.rows
            .iter()
            .enumerate()
            .map(|(i, r)| VariantResult {
                name: r.name.clone(),
                static_accuracy: mean_of(tables.iter().map(|t| t.rows[i].static_accuracy)),
                dynamic_accuracy: mean_of(tables.iter().map(|t| t.rows[i].dynamic_accuracy)),
                static_pairs: tables.iter().map(|t| t.rows[i].static_pairs).sum(),
                dynamic_pairs: tables.iter().map(|t| t.rows[i].dynamic_pairs).sum(),
                mota: mean_of(tables.iter().map(|t| t.rows[i].mota)),
                motp: mean_of(tables.iter().map(|t| t.rows[i].motp)),
            })
            .collect()
    });
    AblationTable { sweep, rows }
}

impl AblationReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (name, t) in &self.groups {
            s.push_str(&format!("== {:?} sweep, {name}\n{}", self.sweep, t.to_text()));
        }
        if self.groups.len() > 1 {
            s.push_str(&format!("== {:?} sweep, mean of {} groups\n{}", self.sweep, self.groups.len(), self.mean.to_text()));
        }
        s
    }
}

/// Runs each sweep on every group. Variants with identical configs (the
/// base shows up in several sweeps) are evaluated once per group.
fn ablate_groups(
    cfg: &Config,
    sweeps: &[Sweep],
    groups: &[(String, Vec<SequenceDataset>)],
    model: Option<&RefinerModel>,
    exec: &Executor,
) -> anyhow::Result<Vec<AblationReport>> {
    let mut tables: Vec<Vec<(String, AblationTable)>> = vec![Vec::new(); sweeps.len()];
    for (name, sets) in groups {
        if let Some(ds) = sets.iter().find(|d| !d.has_ground_truth()) {
            return Err(UsageError(format!("sequence {} has no ground truth", ds.sequence_id)).into());
        }
        let mut cache: Vec<(PipelineConfig, VariantResult)> = Vec::new();
        for (k, &sweep) in sweeps.iter().enumerate() {
            let mut rows = Vec::new();
            for (variant, vc) in sweep_variants(sweep, &cfg.pipeline) {
                let result = match cache.iter().find(|(c, _)| *c == vc) {
                    Some((_, r)) => r.clone(),
                    None => {
                        log::info!("{name}: {variant}");
                        let r = evaluate_variant(&variant, sets, &vc, model, exec)?;
                        cache.push((vc, r.clone()));
                        r
                    }
                };
                rows.push(VariantResult { name: variant, ..result });
            }
            tables[k].push((name.clone(), AblationTable { sweep, rows }));
        }
    }
    Ok(sweeps
        .iter()
        .zip(tables)
        .map(|(&sweep, groups)| {
            let mean = mean_table(sweep, &groups.iter().map(|(_, t)| t).collect::<Vec<_>>());
            AblationReport { sweep, groups, mean }
        })
        .collect())
}

/// Sweeps over the given sequences, or over the synthetic benchmark of
/// every configured seed.
pub fn cmd_ablate(cfg: &Config, sweeps: &[Sweep], sequences: &[PathBuf]) -> anyhow::Result<Vec<AblationReport>> {
    let exec = executor(cfg);
    let model = load_model_for(cfg)?;
    let groups = if sequences.is_empty() {
        cfg.benchmark
            .seeds
            .iter()
            .map(|&seed| Ok((format!("seed {seed}"), benchmark_for(cfg, seed).generate(&exec)?)))
            .collect::<anyhow::Result<Vec<_>>>()?
    } else {
        let mut sets = Vec::new();
        for p in sequences {
            existing(p, "sequence file")?;
            sets.push(load_sequence(p)?);
        }
        vec![("sequences".to_string(), sets)]
    };
    ablate_groups(cfg, sweeps, &groups, model.as_ref(), &exec)
}
