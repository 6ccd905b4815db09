//! Command-line experiments: corpus synthesis, pretraining, adaptation,
//! evaluation, window sweeps and gradient self-checks.
//!
//! Every run writes its resolved configuration to `config.json` in the run
//! directory. The same JSON can be passed back with `--config`; flags given on
//! the command line override values from the file.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use auprompt::model::ClassifierKind;
use auprompt::verify::GradcheckConfig;
use auprompt::{Error, ResetPolicy, Result, Scoring, SynthSpec, TrainConfig, TtaConfig};

mod commands;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "AUPROMPT_OUT";
pub const DEFAULT_OUT_ROOT: &str = "runs";

pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const REPORT_FILE: &str = "report.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const VIDEOS_FILE: &str = "videos.csv";

#[derive(Debug, Parser)]
#[command(
    name = "auprompt",
    version,
    about = "AU-prompt emotion recognition with test-time prompt tuning"
)]
pub struct Cli {
    /// Cap on worker threads.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus with ground truth.
    Synth(SynthArgs),
    /// Supervised training on source subjects.
    Pretrain(PretrainArgs),
    /// Test-time personalization of a checkpoint on target videos.
    Adapt(AdaptArgs),
    /// Score a checkpoint without adaptation.
    Eval(EvalArgs),
    /// Adaptation metrics for several window lengths.
    Sweep(SweepArgs),
    /// Finite-difference check of every gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Resolved config of an earlier run; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory. Defaults to `$AUPROMPT_OUT/<command>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub dim: Option<usize>,
    /// Number of AU prompts.
    #[arg(long)]
    pub prompts: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub source_subjects: Option<usize>,
    #[arg(long)]
    pub target_subjects: Option<usize>,
    #[arg(long)]
    pub videos_per_subject: Option<usize>,
    #[arg(long)]
    pub t_min: Option<usize>,
    #[arg(long)]
    pub t_max: Option<usize>,
    #[arg(long)]
    pub active_aus: Option<usize>,
    #[arg(long)]
    pub source_perturbation: Option<f64>,
    #[arg(long)]
    pub target_shift: Option<f64>,
    #[arg(long)]
    pub perturbation_density: Option<f64>,
    #[arg(long)]
    pub target_expressivity: Option<f64>,
    #[arg(long)]
    pub identity_offset: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub envelope_width: Option<f64>,
    #[arg(long)]
    pub envelope_floor: Option<f64>,
    #[arg(long)]
    pub prompt_noise: Option<f64>,
}

/// Which manifest records a command reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Subjects {
    Source,
    Target,
    All,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// JSON Lines manifest of embedding files.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub subjects: Option<Subjects>,
}

#[derive(Debug, Clone, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    /// Prompt-set sidecar JSON. Defaults to `prompts.json` next to the manifest.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub no_shuffle: bool,
    /// mlp | linear-head
    #[arg(long)]
    pub classifier: Option<ClassifierKind>,
    /// Also write the freshly initialized checkpoint to this path.
    #[arg(long)]
    pub dump_init: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TtaArgs {
    /// Window length L.
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// per-video | per-subject
    #[arg(long)]
    pub reset: Option<ResetPolicy>,
    /// whole | window
    #[arg(long)]
    pub scoring: Option<Scoring>,
}

#[derive(Debug, Clone, Args)]
pub struct AdaptArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub tta: TtaArgs,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Score the minimum-entropy window of this length instead of the whole video.
    #[arg(long)]
    pub window: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Comma-separated window lengths.
    #[arg(long, value_delimiter = ',')]
    pub windows: Option<Vec<usize>>,
    #[command(flatten)]
    pub tta: TtaArgs,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: Common,
    /// Finite-difference step [default: 1e-5].
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long)]
    pub instances: Option<usize>,
    /// Corrupt the backward pass of one op (debugging aid).
    #[arg(long, value_name = "OP")]
    pub inject_fault: Option<String>,
}

/// Resolved configuration of one run, as written to `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case", deny_unknown_fields)]
pub enum RunConfig {
    Synth {
        out: Option<PathBuf>,
        spec: SynthSpec,
    },
    Pretrain {
        out: Option<PathBuf>,
        manifest: Option<PathBuf>,
        subjects: Subjects,
        prompts: Option<PathBuf>,
        train: TrainConfig,
    },
    Adapt {
        out: Option<PathBuf>,
        manifest: Option<PathBuf>,
        subjects: Subjects,
        checkpoint: Option<PathBuf>,
        tta: TtaConfig,
    },
    Eval {
        out: Option<PathBuf>,
        manifest: Option<PathBuf>,
        subjects: Subjects,
        checkpoint: Option<PathBuf>,
        window: Option<usize>,
    },
    Sweep {
        out: Option<PathBuf>,
        manifest: Option<PathBuf>,
        subjects: Subjects,
        checkpoint: Option<PathBuf>,
        windows: Vec<usize>,
        tta: TtaConfig,
    },
    Gradcheck {
        out: Option<PathBuf>,
        gradcheck: GradcheckConfig,
        inject_fault: Option<String>,
    },
}

impl RunConfig {
    pub fn name(&self) -> &'static str {
        match self {
            RunConfig::Synth { .. } => "synth",
            RunConfig::Pretrain { .. } => "pretrain",
            RunConfig::Adapt { .. } => "adapt",
            RunConfig::Eval { .. } => "eval",
            RunConfig::Sweep { .. } => "sweep",
            RunConfig::Gradcheck { .. } => "gradcheck",
        }
    }

    fn default_for(command: &Command) -> Self {
        match command {
            Command::Synth(_) => RunConfig::Synth {
                out: None,
                spec: SynthSpec::default(),
            },
            Command::Pretrain(_) => RunConfig::Pretrain {
                out: None,
                manifest: None,
                subjects: Subjects::Source,
                prompts: None,
                train: TrainConfig::default(),
            },
            Command::Adapt(_) => RunConfig::Adapt {
                out: None,
                manifest: None,
                subjects: Subjects::Target,
                checkpoint: None,
                tta: TtaConfig::default(),
            },
            Command::Eval(_) => RunConfig::Eval {
                out: None,
                manifest: None,
                subjects: Subjects::Target,
                checkpoint: None,
                window: None,
            },
            Command::Sweep(_) => RunConfig::Sweep {
                out: None,
                manifest: None,
                subjects: Subjects::Target,
                checkpoint: None,
                windows: vec![8, 16, 32, 64, 72],
                tta: TtaConfig::default(),
            },
            Command::Gradcheck(_) => RunConfig::Gradcheck {
                out: None,
                gradcheck: GradcheckConfig::default(),
                inject_fault: None,
            },
        }
    }

    pub fn out(&self) -> Option<&Path> {
        match self {
            RunConfig::Synth { out, .. }
            | RunConfig::Pretrain { out, .. }
            | RunConfig::Adapt { out, .. }
            | RunConfig::Eval { out, .. }
            | RunConfig::Sweep { out, .. }
            | RunConfig::Gradcheck { out, .. } => out.as_deref(),
        }
    }

    fn out_mut(&mut self) -> &mut Option<PathBuf> {
        match self {
            RunConfig::Synth { out, .. }
            | RunConfig::Pretrain { out, .. }
            | RunConfig::Adapt { out, .. }
            | RunConfig::Eval { out, .. }
            | RunConfig::Sweep { out, .. }
            | RunConfig::Gradcheck { out, .. } => out,
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, value: Option<T>) {
    if value.is_some() {
        *slot = value;
    }
}

fn apply_data(manifest: &mut Option<PathBuf>, subjects: &mut Subjects, args: &DataArgs) {
    set_opt(manifest, args.manifest.clone());
    set(subjects, args.subjects);
}

fn apply_tta(tta: &mut TtaConfig, args: &TtaArgs, seed: Option<u64>) {
    set(&mut tta.window, args.window);
    set(&mut tta.iterations, args.iters);
    set(&mut tta.lr, args.lr);
    set(&mut tta.weight_decay, args.weight_decay);
    set(&mut tta.reset, args.reset);
    set(&mut tta.scoring, args.scoring);
    set(&mut tta.seed, seed);
}

fn common(command: &Command) -> &Common {
    match command {
        Command::Synth(a) => &a.common,
        Command::Pretrain(a) => &a.common,
        Command::Adapt(a) => &a.common,
        Command::Eval(a) => &a.common,
        Command::Sweep(a) => &a.common,
        Command::Gradcheck(a) => &a.common,
    }
}

/// Merge the optional config file with the flags of `command`.
pub fn resolve(command: &Command) -> Result<RunConfig> {
    let c = common(command);
    let mut cfg = match &c.config {
        Some(path) => auprompt::io::read_json::<RunConfig>(path)?,
        None => RunConfig::default_for(command),
    };
    let expected = RunConfig::default_for(command).name();
    if cfg.name() != expected {
        return Err(Error::Config(format!(
            "config file is for `{}`, not `{expected}`",
            cfg.name()
        )));
    }
    set_opt(cfg.out_mut(), c.out.clone());
    match (command, &mut cfg) {
        (Command::Synth(a), RunConfig::Synth { spec, .. }) => {
            set(&mut spec.seed, c.seed);
            set(&mut spec.dim, a.dim);
            set(&mut spec.n_prompts, a.prompts);
            set(&mut spec.n_classes, a.classes);
            set(&mut spec.source_subjects, a.source_subjects);
            set(&mut spec.target_subjects, a.target_subjects);
            set(&mut spec.videos_per_subject, a.videos_per_subject);
            set(&mut spec.t_min, a.t_min);
            set(&mut spec.t_max, a.t_max);
            set(&mut spec.active_aus, a.active_aus);
            set(&mut spec.source_perturbation, a.source_perturbation);
            set(&mut spec.target_shift, a.target_shift);
            set(&mut spec.perturbation_density, a.perturbation_density);
            set(&mut spec.target_expressivity, a.target_expressivity);
            set(&mut spec.identity_offset, a.identity_offset);
            set(&mut spec.noise, a.noise);
            set(&mut spec.envelope_width, a.envelope_width);
            set(&mut spec.envelope_floor, a.envelope_floor);
            set(&mut spec.prompt_noise, a.prompt_noise);
        }
        (
            Command::Pretrain(a),
            RunConfig::Pretrain {
                manifest,
                subjects,
                prompts,
                train,
                ..
            },
        ) => {
            apply_data(manifest, subjects, &a.data);
            set_opt(prompts, a.prompts.clone());
            set(&mut train.seed, c.seed);
            set(&mut train.epochs, a.epochs);
            set(&mut train.batch_size, a.batch_size);
            set(&mut train.lr, a.lr);
            set(&mut train.weight_decay, a.weight_decay);
            set(&mut train.classifier, a.classifier);
            if a.no_shuffle {
                train.shuffle = false;
            }
        }
        (
            Command::Adapt(a),
            RunConfig::Adapt {
                manifest,
                subjects,
                checkpoint,
                tta,
                ..
            },
        ) => {
            apply_data(manifest, subjects, &a.data);
            set_opt(checkpoint, a.checkpoint.clone());
            apply_tta(tta, &a.tta, c.seed);
        }
        (
            Command::Eval(a),
            RunConfig::Eval {
                manifest,
                subjects,
                checkpoint,
                window,
                ..
            },
        ) => {
            apply_data(manifest, subjects, &a.data);
            set_opt(checkpoint, a.checkpoint.clone());
            set_opt(window, a.window);
        }
        (
            Command::Sweep(a),
            RunConfig::Sweep {
                manifest,
                subjects,
                checkpoint,
                windows,
                tta,
                ..
            },
        ) => {
            apply_data(manifest, subjects, &a.data);
            set_opt(checkpoint, a.checkpoint.clone());
            set(windows, a.windows.clone());
            apply_tta(tta, &a.tta, c.seed);
        }
        (
            Command::Gradcheck(a),
            RunConfig::Gradcheck {
                gradcheck,
                inject_fault,
                ..
            },
        ) => {
            set(&mut gradcheck.seed, c.seed);
            set(&mut gradcheck.step, a.eps);
            set(&mut gradcheck.tolerance, a.tolerance);
            set(&mut gradcheck.instances, a.instances);
            set_opt(inject_fault, a.inject_fault.clone());
        }
        _ => unreachable!("config kind checked above"),
    }
    if cfg.out().is_none() {
        let root = std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT));
        *cfg.out_mut() = Some(root.join(cfg.name()));
    }
    Ok(cfg)
}

/// What a finished run reports back to the caller.
#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Done,
    /// The run completed but its checks failed.
    Failed(String),
}

/// Resolve and execute one parsed command line.
pub fn run(cli: &Cli) -> Result<Outcome> {
    let cfg = resolve(&cli.command)?;
    let dump_init = match &cli.command {
        Command::Pretrain(a) => a.dump_init.clone(),
        _ => None,
    };
    match cli.jobs {
        Some(0) => Err(Error::Config("--jobs must be at least 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("cannot start {n} workers: {e}")))?;
            pool.install(|| commands::execute(&cfg, dump_init.as_deref()))
        }
        None => commands::execute(&cfg, dump_init.as_deref()),
    }
}

/// Parse `args`, run, print diagnostics and return the process exit code:
/// 0 on success, 1 on runtime failure, 2 on invalid input.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(Outcome::Done) => 0,
        Ok(Outcome::Failed(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                2
            } else {
                1
            }
        }
    }
}
