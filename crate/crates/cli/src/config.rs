//! Config file plus command-line overrides.
//!
//! The file is TOML. Every section is optional and falls back to the
//! library defaults; flags are applied last and win over the file.

use std::path::{Path, PathBuf};

use autolabel_core::neural::RefinerTrainConfig;
use autolabel_core::pipeline::PipelineConfig;
use autolabel_core::refiners::{BackendKind, KeyframeStrategy};
use autolabel_core::synth::{NoiseConfig, SceneConfig};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use crate::UsageError;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub scene: SceneConfig,
    pub noise: NoiseConfig,
}

/// Benchmark size for `ablate` and `synth --benchmark`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSection {
    pub seeds: Vec<u64>,
    pub scenes: usize,
    pub n_static: usize,
    pub n_dynamic: usize,
}

impl Default for BenchmarkSection {
    fn default() -> Self {
        BenchmarkSection {
            seeds: vec![0, 1, 2],
            scenes: 10,
            n_static: 10,
            n_dynamic: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Applied to every seeded component when set.
    pub seed: Option<u64>,
    /// Worker threads; 0 means one per logical core.
    pub workers: usize,
    /// Model file for the neural backend.
    pub model: Option<PathBuf>,
    pub pipeline: PipelineConfig,
    pub train: RefinerTrainConfig,
    pub synth: SynthSection,
    pub benchmark: BenchmarkSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    Geometric,
    Neural,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KeyframeArg {
    Random,
    Average,
    Highest,
}

/// Flag values that override the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub model: Option<PathBuf>,
    pub backend: Option<BackendArg>,
    pub causal: bool,
    pub keyframe: Option<KeyframeArg>,
    pub alpha: Option<f64>,
    pub tta: bool,
}

impl Config {
    pub fn load(path: &Path) -> Result<Config, UsageError> {
        let text = std::fs::read_to_string(path).map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        Config::parse(&text).map_err(|e| UsageError(format!("config {}: {}", path.display(), e.0)))
    }

    pub fn parse(text: &str) -> Result<Config, UsageError> {
        toml::from_str(text).map_err(|e| UsageError(e.to_string()))
    }

    /// The file (or defaults) with `o` applied, validated.
    pub fn resolve(path: Option<&Path>, o: &Overrides) -> Result<Config, UsageError> {
        let mut cfg = match path {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        cfg.apply(o);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if o.seed.is_some() {
            self.seed = o.seed;
        }
        if let Some(w) = o.workers {
            self.workers = w;
        }
        if o.model.is_some() {
            self.model = o.model.clone();
        }
        let r = &mut self.pipeline.refiner;
        match o.backend {
            Some(BackendArg::Geometric) => r.backend = BackendKind::Geometric,
            Some(BackendArg::Neural) => r.backend = BackendKind::Neural,
            None => {}
        }
        if o.causal {
            r.causal = true;
        }
        if o.tta {
            r.tta = true;
        }
        if let Some(a) = o.alpha {
            self.pipeline.alpha = a;
        }
        if let Some(seed) = self.seed {
            self.pipeline.refiner.seed = seed;
            self.train.static_training.seed = seed;
            self.train.dynamic_training.seed = seed;
            self.synth.scene.seed = seed;
        }
        let r = &mut self.pipeline.refiner;
        match o.keyframe {
            Some(KeyframeArg::Random) => r.keyframe = KeyframeStrategy::Random { seed: r.seed },
            Some(KeyframeArg::Average) => r.keyframe = KeyframeStrategy::Average,
            Some(KeyframeArg::Highest) => r.keyframe = KeyframeStrategy::HighestScore,
            None => {}
        }
        if let (Some(seed), KeyframeStrategy::Random { .. }) = (self.seed, r.keyframe) {
            r.keyframe = KeyframeStrategy::Random { seed };
        }
    }

    pub fn validate(&self) -> Result<(), UsageError> {
        let bad = |e: autolabel_core::error::Error| UsageError(e.to_string());
        self.pipeline.validate().map_err(bad)?;
        self.train.static_training.validate().map_err(bad)?;
        self.train.dynamic_training.validate().map_err(bad)?;
        self.synth.scene.validate().map_err(bad)?;
        self.synth.noise.validate().map_err(bad)?;
        let b = &self.benchmark;
        if b.seeds.is_empty() || b.scenes == 0 {
            return Err(UsageError("benchmark needs at least one seed and one scene".into()));
        }
        Ok(())
    }

    /// The model path, which must exist when the neural backend is chosen.
    pub fn model_path(&self) -> Result<Option<&Path>, UsageError> {
        match (&self.pipeline.refiner.backend, &self.model) {
            (BackendKind::Neural, None) => Err(UsageError("the neural backend needs a model file (--model or `model` in the config)".into())),
            (BackendKind::Neural, Some(p)) if !p.exists() => Err(UsageError(format!("model file {} does not exist", p.display()))),
            (BackendKind::Neural, Some(p)) => Ok(Some(p)),
            (BackendKind::Geometric, _) => Ok(None),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_defaults() {
        assert_eq!(Config::parse("").unwrap(), Config::default());
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let text = toml::to_string(&Config::default()).unwrap();
        assert_eq!(Config::parse(&text).unwrap(), Config::default());
    }

    #[test]
    fn flags_win_over_the_file() {
        let mut cfg = Config::parse("seed = 3\nworkers = 2\n[pipeline]\nalpha = 0.5\n[pipeline.refiner]\ntta = false\n").unwrap();
        cfg.apply(&Overrides {
            seed: Some(9),
            alpha: Some(1.5),
            tta: true,
            keyframe: Some(KeyframeArg::Random),
            ..Overrides::default()
        });
        assert_eq!(cfg.seed, Some(9));
        assert_eq!(cfg.workers, 2);
        assert_eq!(cfg.pipeline.alpha, 1.5);
        assert!(cfg.pipeline.refiner.tta);
        assert_eq!(cfg.pipeline.refiner.keyframe, KeyframeStrategy::Random { seed: 9 });
        assert_eq!(cfg.train.static_training.seed, 9);
        assert_eq!(cfg.synth.scene.seed, 9);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(Config::parse("sede = 3").is_err());
        assert!(Config::parse("[pipeline]\nalpah = 1.0").is_err());
        assert!(Config::parse("[pipeline.refiner]\ntta = 1").is_err());
    }

    #[test]
    fn negative_alpha_fails_validation() {
        let mut cfg = Config::default();
        cfg.apply(&Overrides {
            alpha: Some(-1.0),
            ..Overrides::default()
        });
        assert!(cfg.validate().is_err());
    }
}
