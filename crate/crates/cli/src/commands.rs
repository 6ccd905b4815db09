use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use auprompt::data::{split_subjects, synth_generate, MANIFEST_FILE, PROMPTS_STEM};
use auprompt::diffcore::{OpKind, ALL_KINDS};
use auprompt::io::{write_atomic, write_json};
use auprompt::metrics::{push_csv_row, subject_report, MetricsBundle, ScoredVideo};
use auprompt::model::{read_checkpoint, write_checkpoint};
use auprompt::pretrain::{evaluate, train};
use auprompt::tta::{adapt_corpus, records_csv, AdaptationRecord};
use auprompt::verify::run_gradcheck;
use auprompt::{
    Checkpoint, EmbeddingSequence, Error, Manifest, ModelConfig, ModelParams, PromptSet, Result, Role, TtaConfig,
};

use crate::{Outcome, RunConfig, Subjects, CHECKPOINT_FILE, CONFIG_FILE, METRICS_FILE, REPORT_FILE, VIDEOS_FILE};

pub const SWEEP_CSV_HEADER: &str = "window,n,war,uar,macro_f1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    /// Metrics of the predictions made before any prompt update.
    pub pre_adapt: MetricsBundle,
    pub metrics: MetricsBundle,
    pub records: Vec<AdaptationRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub window: usize,
    pub metrics: MetricsBundle,
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| Error::Config(format!("missing {flag} (flag or config file)")))
}

fn start_run(cfg: &RunConfig) -> Result<PathBuf> {
    let out = cfg
        .out()
        .expect("resolved config has an output directory")
        .to_path_buf();
    std::fs::create_dir_all(&out).map_err(|source| Error::Io {
        path: out.clone(),
        source,
    })?;
    write_json(&out.join(CONFIG_FILE), cfg)?;
    Ok(out)
}

/// Load the selected subjects of a manifest and the class count of the whole manifest.
fn load_videos(path: &Path, subjects: Subjects, dim: Option<usize>) -> Result<(Vec<EmbeddingSequence>, usize)> {
    let manifest = Manifest::load(path)?;
    let full = manifest.validate(dim)?;
    let selected = match subjects {
        Subjects::All => manifest,
        Subjects::Source => split_subjects(&manifest, Role::Source)?,
        Subjects::Target => split_subjects(&manifest, Role::Target)?,
    };
    selected.validate(Some(full.dim))?;
    Ok((selected.load_videos()?, full.n_classes))
}

fn print_metrics(bundle: &MetricsBundle) {
    print!("{}", bundle.to_csv());
}

pub fn execute(cfg: &RunConfig, dump_init: Option<&Path>) -> Result<Outcome> {
    match cfg {
        RunConfig::Synth { spec, .. } => {
            spec.validate()?;
            let corpus = synth_generate(spec)?;
            let out = start_run(cfg)?;
            let manifest_path = corpus.write_to(&out)?;
            let summary = Manifest::load(&manifest_path)?.validate(Some(spec.dim))?;
            println!(
                "wrote {} videos (d = {}, {} classes) to {}",
                summary.videos,
                summary.dim,
                summary.n_classes,
                out.join(MANIFEST_FILE).display()
            );
            Ok(Outcome::Done)
        }
        RunConfig::Pretrain {
            manifest,
            subjects,
            prompts,
            train: tcfg,
            ..
        } => {
            let manifest = required(manifest, "--manifest")?;
            tcfg.validate()?;
            let prompts_path = prompts.clone().unwrap_or_else(|| {
                manifest
                    .parent()
                    .unwrap_or(Path::new(""))
                    .join(format!("{PROMPTS_STEM}.json"))
            });
            let (videos, n_classes) = load_videos(manifest, *subjects, None)?;
            let prompt_set = PromptSet::load(&prompts_path)?;
            if videos[0].dim() != prompt_set.dim() {
                return Err(Error::Shape(format!(
                    "videos have dimension {}, prompts have {}",
                    videos[0].dim(),
                    prompt_set.dim()
                )));
            }
            let config =
                ModelConfig::new(prompt_set.dim(), prompt_set.len(), n_classes).with_classifier(tcfg.classifier);
            let mut params = ModelParams::init(config, tcfg.seed)?;
            let out = start_run(cfg)?;
            if let Some(path) = dump_init {
                write_checkpoint(&Checkpoint::new(params.clone(), prompt_set.clone())?, path)?;
            }
            let mut report = train(&mut params, &videos, &prompt_set, tcfg)?;
            for e in &report.epochs {
                println!(
                    "epoch {:>3}  loss {:.4}  war {:.1}  ({:.2}s)",
                    e.epoch, e.loss, e.war, e.seconds
                );
            }
            let ck_path = out.join(CHECKPOINT_FILE);
            write_checkpoint(&Checkpoint::new(params.clone(), prompt_set.clone())?, &ck_path)?;
            report.checkpoint = Some(ck_path);
            let eval = evaluate(&videos, prompt_set.embeddings(), &params, None)?;
            write_json(&out.join(REPORT_FILE), &report)?;
            write_atomic(&out.join(METRICS_FILE), eval.metrics.to_csv().as_bytes())?;
            print_metrics(&eval.metrics);
            Ok(Outcome::Done)
        }
        RunConfig::Eval {
            manifest,
            subjects,
            checkpoint,
            window,
            ..
        } => {
            let manifest = required(manifest, "--manifest")?;
            let ck = read_checkpoint(required(checkpoint, "--checkpoint")?)?;
            if *window == Some(0) {
                return Err(Error::Config("window length must be at least 1".into()));
            }
            let (videos, _) = load_videos(manifest, *subjects, Some(ck.params.dim()))?;
            let out = start_run(cfg)?;
            let eval = evaluate(&videos, ck.prompts.embeddings(), &ck.params, *window)?;
            write_json(&out.join(REPORT_FILE), &eval)?;
            write_atomic(&out.join(METRICS_FILE), eval.metrics.to_csv().as_bytes())?;
            print_metrics(&eval.metrics);
            Ok(Outcome::Done)
        }
        RunConfig::Adapt {
            manifest,
            subjects,
            checkpoint,
            tta,
            ..
        } => {
            let manifest = required(manifest, "--manifest")?;
            let ck = read_checkpoint(required(checkpoint, "--checkpoint")?)?;
            tta.validate()?;
            let (videos, _) = load_videos(manifest, *subjects, Some(ck.params.dim()))?;
            let out = start_run(cfg)?;
            let report = adapt(&videos, &ck, tta)?;
            write_json(&out.join(REPORT_FILE), &report)?;
            write_atomic(&out.join(METRICS_FILE), report.metrics.to_csv().as_bytes())?;
            write_atomic(&out.join(VIDEOS_FILE), records_csv(&report.records).as_bytes())?;
            print_metrics(&report.metrics);
            let (before, after) = (report.pre_adapt.all.rounded().war, report.metrics.all.rounded().war);
            println!("WAR {before:.1} -> {after:.1} ({:+.1})", after - before);
            Ok(Outcome::Done)
        }
        RunConfig::Sweep {
            manifest,
            subjects,
            checkpoint,
            windows,
            tta,
            ..
        } => {
            let manifest = required(manifest, "--manifest")?;
            if windows.is_empty() {
                return Err(Error::Config("--windows needs at least one length".into()));
            }
            let ck = read_checkpoint(required(checkpoint, "--checkpoint")?)?;
            let (videos, _) = load_videos(manifest, *subjects, Some(ck.params.dim()))?;
            for &w in windows {
                TtaConfig { window: w, ..*tta }.validate()?;
            }
            let out = start_run(cfg)?;
            let mut rows = Vec::with_capacity(windows.len());
            let mut csv = String::from(SWEEP_CSV_HEADER);
            csv.push('\n');
            for &w in windows {
                let started = Instant::now();
                let report = adapt(&videos, &ck, &TtaConfig { window: w, ..*tta })?;
                push_csv_row(&mut csv, &w.to_string(), &report.metrics.avg);
                eprintln!("window {w}: {:.2}s", started.elapsed().as_secs_f64());
                rows.push(SweepRow {
                    window: w,
                    metrics: report.metrics,
                });
            }
            write_json(&out.join(REPORT_FILE), &rows)?;
            write_atomic(&out.join(METRICS_FILE), csv.as_bytes())?;
            print!("{csv}");
            Ok(Outcome::Done)
        }
        RunConfig::Gradcheck {
            gradcheck,
            inject_fault,
            ..
        } => {
            let fault = inject_fault.as_deref().map(parse_op).transpose()?;
            let out = start_run(cfg)?;
            let report = run_gradcheck(gradcheck, fault)?;
            for c in &report.checks {
                println!(
                    "{}  {:<34} {:>4} instances  max rel err {:.3e}",
                    if c.passed { "ok  " } else { "FAIL" },
                    c.name,
                    c.instances,
                    c.max_rel_error
                );
            }
            write_json(&out.join(REPORT_FILE), &report)?;
            if report.passed() {
                println!("all {} checks passed", report.checks.len());
                return Ok(Outcome::Done);
            }
            let mut msg = format!("gradient check failed: {}", report.failures().join(", "));
            if let Some(op) = fault {
                let _ = write!(msg, " (fault injected into op {})", op.name());
            }
            Ok(Outcome::Failed(msg))
        }
    }
}

fn parse_op(name: &str) -> Result<OpKind> {
    OpKind::from_name(name).ok_or_else(|| {
        let known: Vec<&str> = ALL_KINDS.iter().map(|k| k.name()).collect();
        Error::Config(format!("unknown op {name:?} (known: {})", known.join(", ")))
    })
}

fn adapt(videos: &[EmbeddingSequence], ck: &Checkpoint, tta: &TtaConfig) -> Result<AdaptReport> {
    let records = adapt_corpus(videos, &ck.adapted, &ck.params, tta)?;
    let scored = |pre: bool| -> Vec<ScoredVideo> {
        records
            .iter()
            .map(|r| ScoredVideo {
                subject: r.subject.clone(),
                label: r.label,
                prediction: if pre { r.pre_adapt_prediction } else { r.prediction },
            })
            .collect()
    };
    Ok(AdaptReport {
        pre_adapt: subject_report(&scored(true), ck.params.n_classes())?,
        metrics: subject_report(&scored(false), ck.params.n_classes())?,
        records,
    })
}
