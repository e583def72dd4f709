//! The `autolabel` command line.
//!
//! Subcommands `run`, `train`, `eval`, `synth` and `ablate` wrap the
//! library; see `autolabel --help`. Set `AUTOLABEL_LOG` (for example to
//! `info` or `debug`) for progress logs on stderr.

use std::ffi::OsString;
use std::path::PathBuf;

use autolabel_core::ablation::Sweep;
use autolabel_core::error::Error as CoreError;
use clap::{ArgGroup, Args, Parser, Subcommand};

pub mod commands;
pub mod config;

use config::{BackendArg, Config, KeyframeArg, Overrides};

pub const EXIT_SUCCESS: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_INVARIANT: i32 = 3;
pub const EXIT_INTERNAL: i32 = 4;

/// Bad flags, config or missing inputs; exits with [`EXIT_USAGE`].
#[derive(Debug, Clone, PartialEq)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(name = "autolabel", version, about = "Offboard 3D auto labeling of point-cloud sequences")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (0 = one per logical core, 1 = sequential).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Model file for the neural backend.
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    #[arg(long, value_enum, global = true)]
    pub backend: Option<BackendArg>,
    /// Restrict refinement windows to past and current frames.
    #[arg(long, global = true)]
    pub causal: bool,
    #[arg(long, value_enum, global = true)]
    pub keyframe: Option<KeyframeArg>,
    /// Crop margin around tracked boxes, meters.
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// Test-time augmentation for static objects.
    #[arg(long, global = true)]
    pub tta: bool,
}

impl GlobalArgs {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            workers: self.workers,
            model: self.model.clone(),
            backend: self.backend,
            causal: self.causal,
            keyframe: self.keyframe,
            alpha: self.alpha,
            tta: self.tta,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Label one sequence file.
    Run {
        sequence: PathBuf,
        /// Output label file.
        #[arg(short, long)]
        out: PathBuf,
        /// Also write the extracted object tracks (with ground truth when present).
        #[arg(long)]
        tracks: Option<PathBuf>,
        /// Write the stage timings as JSON.
        #[arg(long)]
        timings: Option<PathBuf>,
    },
    /// Train refiner networks and write a model file.
    #[command(group(ArgGroup::new("data").required(true).args(["tracks", "sequences", "synth"])))]
    Train {
        /// Track-data files with ground truth.
        #[arg(long, num_args = 1..)]
        tracks: Vec<PathBuf>,
        /// Sequence files with ground truth.
        #[arg(long, num_args = 1..)]
        sequences: Vec<PathBuf>,
        /// Generate training scenes from the config's synth section.
        #[arg(long)]
        synth: bool,
        #[arg(short, long)]
        out: PathBuf,
        /// Checkpoint directory; training resumes from checkpoints found there.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
    },
    /// Score label files against a sequence's ground truth.
    Eval {
        sequence: PathBuf,
        #[arg(required = true)]
        labels: Vec<PathBuf>,
        /// Machine-readable reports.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Write a synthetic sequence, or the benchmark sequences into a directory.
    Synth {
        #[arg(short, long)]
        out: PathBuf,
        /// Store points in a binary side file.
        #[arg(long)]
        blob: bool,
        #[arg(long)]
        benchmark: bool,
    },
    /// Compare pipeline variants: keyframe, context, causal, tracker, motion.
    Ablate {
        #[arg(required = true, value_parser = parse_sweep)]
        sweeps: Vec<Sweep>,
        /// Sequences with ground truth; defaults to the synthetic benchmark.
        #[arg(long, num_args = 1..)]
        sequences: Vec<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

fn parse_sweep(s: &str) -> Result<Sweep, String> {
    s.parse().map_err(|e: CoreError| e.to_string())
}

/// Exit code of a failed command.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e.root() {
                CoreError::Parse { .. } | CoreError::Io { .. } | CoreError::NonFinite(_) | CoreError::InvalidInput(_) => EXIT_DATA,
                CoreError::Invariant { .. } => EXIT_INVARIANT,
                CoreError::Infeasible(_) => EXIT_USAGE,
                _ => EXIT_INTERNAL,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() || cause.downcast_ref::<serde_json::Error>().is_some() {
            return EXIT_DATA;
        }
    }
    EXIT_INTERNAL
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("AUTOLABEL_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

pub fn dispatch(cli: &Cli) -> anyhow::Result<()> {
    let cfg = Config::resolve(cli.global.config.as_deref(), &cli.global.overrides())?;
    match &cli.command {
        Command::Run {
            sequence,
            out,
            tracks,
            timings,
        } => {
            let report = commands::cmd_run(&cfg, sequence, out, tracks.as_deref())?;
            print!("{}", report.to_text());
            if let Some(p) = timings {
                commands::write_json(p, &report)?;
            }
        }
        Command::Train {
            tracks,
            sequences,
            synth,
            out,
            checkpoints,
        } => {
            let source = if !tracks.is_empty() {
                commands::TrainSource::Tracks(tracks.clone())
            } else if !sequences.is_empty() {
                commands::TrainSource::Sequences(sequences.clone())
            } else {
                debug_assert!(*synth);
                commands::TrainSource::Synth
            };
            let model = commands::cmd_train(&cfg, &source, out, checkpoints.as_deref())?;
            println!(
                "wrote {} ({} static, {} dynamic networks)",
                out.display(),
                model.statics.len(),
                model.dynamics.len()
            );
        }
        Command::Eval { sequence, labels, json } => {
            let reports = commands::cmd_eval(sequence, labels)?;
            for (name, r) in &reports {
                println!("== {name}");
                print!("{}", r.to_text());
            }
            if let Some(p) = json {
                commands::write_json(p, &reports)?;
            }
        }
        Command::Synth { out, blob, benchmark } => {
            let written = commands::cmd_synth(&cfg, out, *blob, *benchmark)?;
            for p in written {
                println!("wrote {}", p.display());
            }
        }
        Command::Ablate { sweeps, sequences, json } => {
            let reports = commands::cmd_ablate(&cfg, sweeps, sequences)?;
            for r in &reports {
                print!("{}", r.to_text());
            }
            if let Some(p) = json {
                commands::write_json(p, &reports)?;
            }
        }
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_SUCCESS };
        }
    };
    init_logging();
    match std::panic::catch_unwind(|| dispatch(&cli)) {
        Ok(Ok(())) => EXIT_SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
        Err(_) => EXIT_INTERNAL,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn core(e: CoreError) -> anyhow::Error {
        anyhow::Error::new(e).context("while testing")
    }

    #[test]
    fn errors_map_to_exit_codes() {
        assert_eq!(exit_code(&anyhow::Error::new(UsageError("x".into()))), EXIT_USAGE);
        assert_eq!(exit_code(&core(CoreError::invalid("bad"))), EXIT_DATA);
        assert_eq!(exit_code(&core(CoreError::invariant(Some(3), "bad"))), EXIT_INVARIANT);
        let staged = CoreError::Stage {
            stage: "tracking".into(),
            source: Box::new(CoreError::invariant(None, "x")),
        };
        assert_eq!(exit_code(&core(staged)), EXIT_INVARIANT);
        assert_eq!(exit_code(&core(CoreError::Training("nan".into()))), EXIT_INTERNAL);
        assert_eq!(exit_code(&anyhow::anyhow!("other")), EXIT_INTERNAL);
    }

    #[test]
    fn flags_parse_after_the_subcommand() {
        let cli = Cli::try_parse_from(["autolabel", "run", "s.jsonl", "-o", "l.jsonl", "--tta", "--keyframe", "average", "--seed", "4"]).unwrap();
        assert!(cli.global.tta);
        assert_eq!(cli.global.keyframe, Some(KeyframeArg::Average));
        assert_eq!(cli.global.seed, Some(4));
    }

    #[test]
    fn train_needs_a_data_source() {
        assert!(Cli::try_parse_from(["autolabel", "train", "-o", "m.bin"]).is_err());
        assert!(Cli::try_parse_from(["autolabel", "train", "--synth", "-o", "m.bin"]).is_ok());
        assert!(Cli::try_parse_from(["autolabel", "train", "--synth", "--tracks", "t", "-o", "m.bin"]).is_err());
    }

    #[test]
    fn usage_errors_exit_with_one() {
        assert_eq!(main_with(["autolabel", "frobnicate"]), EXIT_USAGE);
        assert_eq!(main_with(["autolabel", "run"]), EXIT_USAGE);
        assert_eq!(main_with(["autolabel", "--version"]), EXIT_SUCCESS);
    }
}
