//! Supervised source-domain training and evaluation.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingSequence, PromptSet};
use crate::diffcore::{adamw_step, AdamWConfig, OptimizerState, Tape, Tensor};
use crate::error::{config_err, shape_err, Error, Result};
use crate::metrics::{subject_report, MetricsBundle, ScoredVideo};
use crate::model::{adapt_prompt_embeddings, forward_full, register, ClassifierKind, ModelConfig, ModelParams};
use crate::rng::{self, Stream};
use crate::tta::window_entropy_profile;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub shuffle: bool,
    pub classifier: ClassifierKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 1e-4,
            seed: 0,
            shuffle: true,
            classifier: ClassifierKind::Mlp,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(config_err!("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(config_err!("batch size must be at least 1"));
        }
        self.optimizer().validate()
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig::with_lr(self.lr, self.weight_decay)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean cross-entropy over the epoch's videos, as seen during the updates.
    pub loss: f64,
    /// Training-set WAR after the epoch, in percent.
    pub war: f64,
    /// Wall time; not serialized, so reports stay byte-identical across reruns.
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub final_war: f64,
    pub checkpoint: Option<PathBuf>,
}

fn check_corpus(videos: &[EmbeddingSequence], prompts: &PromptSet, n_classes: usize) -> Result<()> {
    if videos.is_empty() {
        return Err(Error::Protocol("no training videos".into()));
    }
    for v in videos {
        if v.dim() != prompts.dim() {
            return Err(shape_err!(
                "video of subject {} has dimension {}, prompts have {}",
                v.subject,
                v.dim(),
                prompts.dim()
            ));
        }
        if v.label >= n_classes {
            return Err(Error::Label(format!(
                "label {} of subject {} is out of range for {n_classes} classes",
                v.label, v.subject
            )));
        }
    }
    Ok(())
}

/// Class count implied by the labels (at least 2).
pub fn class_count(videos: &[EmbeddingSequence]) -> usize {
    videos.iter().map(|v| v.label + 1).max().unwrap_or(0).max(2)
}

/// Initialize a model for `prompts` and train it.
pub fn pretrain(
    videos: &[EmbeddingSequence],
    prompts: &PromptSet,
    n_classes: usize,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainReport)> {
    cfg.validate()?;
    let config = ModelConfig::new(prompts.dim(), prompts.len(), n_classes).with_classifier(cfg.classifier);
    let mut params = ModelParams::init(config, cfg.seed)?;
    let report = train(&mut params, videos, prompts, cfg)?;
    Ok((params, report))
}

/// Mean cross-entropy of a batch and its gradient for every parameter tensor.
pub fn batch_loss_and_grads(
    params: &ModelParams,
    raw_prompts: &Tensor,
    batch: &[&EmbeddingSequence],
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let vars = register(&mut tape, params, true);
    let raw = tape.constant(raw_prompts.clone());
    let z_au = vars.adapt_prompts(&mut tape, raw)?;
    let mut losses = Vec::with_capacity(batch.len());
    for v in batch {
        let frames = tape.constant(v.frames.clone());
        let z = vars.encode_video(&mut tape, frames)?;
        let s = tape.cosine_rows(z, z_au)?;
        let p = vars.classify(&mut tape, s)?;
        losses.push(tape.cross_entropy(p, v.label)?);
    }
    let loss = tape.mean(&losses)?;
    let grads = tape.backward(loss)?;
    Ok((
        tape.value(loss).item(),
        vars.all().into_iter().map(|v| grads.get(v)).collect(),
    ))
}

/// Train `params` in place with seeded shuffling; the raw prompts stay frozen.
pub fn train(
    params: &mut ModelParams,
    videos: &[EmbeddingSequence],
    prompts: &PromptSet,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_corpus(videos, prompts, params.n_classes())?;
    if prompts.len() != params.n_prompts() || prompts.dim() != params.dim() {
        return Err(shape_err!(
            "prompt matrix {:?} does not fit a model with N={} d={}",
            prompts.embeddings().shape(),
            params.n_prompts(),
            params.dim()
        ));
    }
    let mut rng = rng::stream(cfg.seed, Stream::Shuffle);
    let mut state = OptimizerState::new(cfg.optimizer(), params.tensors());
    let mut order: Vec<usize> = (0..videos.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&EmbeddingSequence> = chunk.iter().map(|&i| &videos[i]).collect();
            let (loss, grads) = batch_loss_and_grads(params, prompts.embeddings(), &batch)?;
            total += loss * batch.len() as f64;
            adamw_step(&mut params.tensors_mut(), &grads, &mut state)?;
        }
        let war = evaluate(videos, prompts.embeddings(), params, None)?.metrics.all.war;
        epochs.push(EpochStats {
            epoch: epoch + 1,
            loss: total / videos.len() as f64,
            war,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(TrainReport {
        final_war: epochs.last().map_or(0.0, |e| e.war),
        epochs,
        checkpoint: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoPrediction {
    pub subject: String,
    pub label: usize,
    pub prediction: usize,
    pub probs: Vec<f64>,
    /// 1-based selected window when scoring by window.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub i_star: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub predictions: Vec<VideoPrediction>,
    pub metrics: MetricsBundle,
}

/// Score every video without touching `params`. With `window = Some(L)` each
/// video is scored on its minimum-entropy window of length `L`.
pub fn evaluate(
    videos: &[EmbeddingSequence],
    raw_prompts: &Tensor,
    params: &ModelParams,
    window: Option<usize>,
) -> Result<Evaluation> {
    if videos.is_empty() {
        return Err(Error::Protocol("no videos to evaluate".into()));
    }
    let adapted = adapt_prompt_embeddings(raw_prompts, params.adapter())?;
    let predictions = videos
        .par_iter()
        .map(|v| predict_one(v, raw_prompts, &adapted, params, window))
        .collect::<Result<Vec<_>>>()?;
    let scored: Vec<ScoredVideo> = predictions
        .iter()
        .map(|p| ScoredVideo {
            subject: p.subject.clone(),
            label: p.label,
            prediction: p.prediction,
        })
        .collect();
    let metrics = subject_report(&scored, params.n_classes())?;
    Ok(Evaluation { predictions, metrics })
}

fn predict_one(
    v: &EmbeddingSequence,
    raw_prompts: &Tensor,
    adapted: &Tensor,
    params: &ModelParams,
    window: Option<usize>,
) -> Result<VideoPrediction> {
    if v.label >= params.n_classes() {
        return Err(Error::Label(format!(
            "label {} of subject {} is out of range for {} classes",
            v.label,
            v.subject,
            params.n_classes()
        )));
    }
    let (probs, i_star) = match window {
        None => (forward_full(&v.frames, raw_prompts, params)?.1, None),
        Some(len) => {
            let sel = window_entropy_profile(&v.frames, adapted, params, len)?;
            let w = sel.selected();
            let (_, p) = forward_full(&v.frames.slice_rows(w.start, w.end), raw_prompts, params)?;
            (p, Some(sel.i_star + 1))
        }
    };
    Ok(VideoPrediction {
        subject: v.subject.clone(),
        label: v.label,
        prediction: probs.argmax(),
        probs: probs.into_data(),
        i_star,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PromptKind;

    fn tiny() -> (Vec<EmbeddingSequence>, PromptSet) {
        let prompts = PromptSet::new(
            vec!["a".into(), "b".into(), "c".into()],
            Tensor::matrix(3, 4, (0..12).map(|i| ((i * 7 % 5) as f64 - 2.0) / 2.0 + 0.1).collect()).unwrap(),
            PromptKind::Au,
        )
        .unwrap();
        let videos = (0..4)
            .map(|k| {
                let data = (0..20).map(|i| (((i + 3 * k) * 11 % 9) as f64 - 4.0) / 4.0).collect();
                EmbeddingSequence::new(format!("s{}", k / 2), k % 2, Tensor::matrix(5, 4, data).unwrap()).unwrap()
            })
            .collect();
        (videos, prompts)
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let (videos, prompts) = tiny();
        let cfg = TrainConfig {
            epochs: 1,
            lr: 0.0,
            ..TrainConfig::default()
        };
        let init = ModelParams::init(ModelConfig::new(4, 3, 2), cfg.seed).unwrap();
        let (trained, _) = pretrain(&videos, &prompts, 2, &cfg).unwrap();
        assert!(trained.bit_eq(&init));
    }

    #[test]
    fn overfits_one_video() {
        let (videos, prompts) = tiny();
        let one = &videos[..1];
        let cfg = TrainConfig {
            epochs: 200,
            ..TrainConfig::default()
        };
        let mut params = ModelParams::init(ModelConfig::new(4, 3, 2), 0).unwrap();
        let (first, _) = batch_loss_and_grads(&params, prompts.embeddings(), &[&one[0]]).unwrap();
        train(&mut params, one, &prompts, &cfg).unwrap();
        let (last, _) = batch_loss_and_grads(&params, prompts.embeddings(), &[&one[0]]).unwrap();
        assert!(last < 0.01 * first, "{first} -> {last}");
    }

    #[test]
    fn evaluation_is_repeatable_and_matches_report() {
        let (videos, prompts) = tiny();
        let cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        let (params, report) = pretrain(&videos, &prompts, 2, &cfg).unwrap();
        let a = evaluate(&videos, prompts.embeddings(), &params, None).unwrap();
        let b = evaluate(&videos, prompts.embeddings(), &params, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.metrics.all.war, report.final_war);
    }

    #[test]
    fn zero_classifier_predicts_class_zero() {
        let (videos, prompts) = tiny();
        let params = ModelParams::init(ModelConfig::new(4, 3, 2), 0)
            .unwrap()
            .with_zero_classifier();
        let e = evaluate(&videos, prompts.embeddings(), &params, None).unwrap();
        assert!(e.predictions.iter().all(|p| p.prediction == 0));
        assert_eq!(e.metrics.all.war, 50.0);
    }

    #[test]
    fn empty_corpus_and_bad_labels() {
        let (videos, prompts) = tiny();
        let cfg = TrainConfig::default();
        assert!(matches!(pretrain(&[], &prompts, 2, &cfg), Err(Error::Protocol(_))));
        let mut bad = videos.clone();
        bad[0].label = 5;
        assert!(matches!(pretrain(&bad, &prompts, 2, &cfg), Err(Error::Label(_))));
    }
}
