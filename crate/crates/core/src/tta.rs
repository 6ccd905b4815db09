//! Test-time personalization: entropy-guided window selection and AU prompt
//! tuning by entropy minimization, with a reset policy between videos or subjects.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::EmbeddingSequence;
use crate::diffcore::{adamw_step, argmax, ops, AdamWConfig, OptimizerState, Tape, Tensor};
use crate::error::{config_err, shape_err, Error, Result};
use crate::model::{classify, encode_video, Classifier, LinearHead, ModelParams};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResetPolicy {
    #[default]
    PerVideo,
    PerSubject,
}

impl std::str::FromStr for ResetPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "per-video" => Ok(Self::PerVideo),
            "per-subject" => Ok(Self::PerSubject),
            other => Err(format!(
                "unknown reset policy {other:?} (expected per-video | per-subject)"
            )),
        }
    }
}

/// Which embedding the final prediction is read from once prompts are tuned.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scoring {
    /// The whole video, scored against the tuned prompts.
    #[default]
    Whole,
    /// The selected window the prompts were tuned on.
    Window,
}

impl std::str::FromStr for Scoring {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "whole" => Ok(Self::Whole),
            "window" => Ok(Self::Window),
            other => Err(format!("unknown scoring {other:?} (expected whole | window)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TtaConfig {
    pub window: usize,
    pub iterations: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub reset: ResetPolicy,
    pub scoring: Scoring,
    pub seed: u64,
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self {
            window: 16,
            iterations: 10,
            lr: 1e-2,
            weight_decay: 1e-4,
            reset: ResetPolicy::PerVideo,
            scoring: Scoring::Whole,
            seed: 0,
        }
    }
}

impl TtaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(config_err!("window length must be at least 1"));
        }
        self.optimizer().validate()
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig::with_lr(self.lr, self.weight_decay)
    }
}

/// Row ranges of the stride-1 windows of length `len`; the whole video when `T < len`.
#[allow(clippy::single_range_in_vec_init)]
pub fn enumerate_windows(frames: usize, len: usize) -> Vec<Range<usize>> {
    if frames <= len || len == 0 {
        return vec![0..frames];
    }
    (0..=frames - len).map(|s| s..s + len).collect()
}

/// Per-window entropies and the selected window (0-based `i_star`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSelection {
    pub entropies: Vec<f64>,
    pub i_star: usize,
    pub windows: Vec<Range<usize>>,
}

impl WindowSelection {
    pub fn count(&self) -> usize {
        self.entropies.len()
    }

    pub fn selected(&self) -> Range<usize> {
        self.windows[self.i_star].clone()
    }
}

/// Index of the smallest value; ties go to the lowest index.
pub fn argmin_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v < values[best] {
            best = i;
        }
    }
    best
}

fn window_probabilities(frames: &Tensor, prompts: &Tensor, params: &ModelParams) -> Result<Tensor> {
    let z = encode_video(frames, params.temporal())?;
    classify(&ops::cosine_rows(&z, prompts)?, params.classifier())
}

/// Entropy of the prediction on every window, scored against `prompts`.
pub fn window_entropy_profile(
    frames: &Tensor,
    prompts: &Tensor,
    params: &ModelParams,
    len: usize,
) -> Result<WindowSelection> {
    if len == 0 {
        return Err(config_err!("window length must be at least 1"));
    }
    let windows = enumerate_windows(frames.rows(), len);
    let entropies = windows
        .iter()
        .map(|w| {
            let p = window_probabilities(&frames.slice_rows(w.start, w.end), prompts, params)?;
            ops::entropy(&p)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(WindowSelection {
        i_star: argmin_first(&entropies),
        entropies,
        windows,
    })
}

/// Adapted prompt matrix under tuning, with the pretrained copy kept for resets.
#[derive(Debug, Clone, PartialEq)]
pub struct TunablePrompts {
    current: Tensor,
    pristine: Tensor,
}

impl TunablePrompts {
    pub fn new(adapted: Tensor) -> Self {
        Self {
            current: adapted.clone(),
            pristine: adapted,
        }
    }

    pub fn current(&self) -> &Tensor {
        &self.current
    }

    pub fn pristine(&self) -> &Tensor {
        &self.pristine
    }

    pub fn reset(&mut self) {
        self.current = self.pristine.clone();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationTrace {
    /// Entropy before each update plus the final value; `iterations + 1` long.
    pub entropies: Vec<f64>,
    pub initial_probs: Vec<f64>,
    pub final_probs: Vec<f64>,
    pub prediction: usize,
}

fn entropy_and_grad(z_v: &Tensor, prompts: &Tensor, classifier: &Classifier) -> Result<(f64, Tensor, Tensor)> {
    let mut tape = Tape::new();
    let z = tape.constant(z_v.clone());
    let rows = tape.param(prompts.clone());
    let s = tape.cosine_rows(z, rows)?;
    let p = match classifier {
        Classifier::Mlp(h) => {
            let w1 = tape.constant(h.w1.clone());
            let b1 = tape.constant(h.b1.clone());
            let w2 = tape.constant(h.w2.clone());
            let b2 = tape.constant(h.b2.clone());
            let a = tape.affine(s, w1, b1)?;
            let a = match h.activation {
                crate::model::Activation::Relu => tape.relu(a),
                crate::model::Activation::Identity => a,
            };
            let logits = tape.affine(a, w2, b2)?;
            tape.softmax(logits)?
        }
        Classifier::Linear(h) => {
            let m = tape.constant(h.weights().clone());
            let b = tape.constant(h.bias().clone());
            let logits = tape.matvec(m, s, b)?;
            tape.softmax(logits)?
        }
    };
    let h = tape.entropy(p)?;
    let grads = tape.backward(h)?;
    Ok((tape.value(h).item(), tape.value(p).clone(), grads.get(rows)))
}

/// Minimize prediction entropy on `z_v` over the prompt matrix alone.
pub fn tune_prompts(
    z_v: &Tensor,
    prompts: &mut TunablePrompts,
    classifier: &Classifier,
    cfg: &TtaConfig,
) -> Result<AdaptationTrace> {
    let opt = cfg.optimizer();
    opt.validate()?;
    let mut state = OptimizerState::new(opt, [&prompts.current]);
    let mut entropies = Vec::with_capacity(cfg.iterations + 1);
    let mut initial_probs = None;
    for _ in 0..cfg.iterations {
        let (h, p, g) = entropy_and_grad(z_v, &prompts.current, classifier)?;
        entropies.push(h);
        initial_probs.get_or_insert(p);
        adamw_step(&mut [&mut prompts.current], &[g], &mut state)?;
    }
    let final_probs = classify(&ops::cosine_rows(z_v, &prompts.current)?, classifier)?;
    entropies.push(ops::entropy(&final_probs)?);
    let initial_probs = initial_probs.unwrap_or_else(|| final_probs.clone());
    Ok(AdaptationTrace {
        entropies,
        initial_probs: initial_probs.into_data(),
        prediction: final_probs.argmax(),
        final_probs: final_probs.into_data(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoOutcome {
    pub prediction: usize,
    pub pre_adapt_prediction: usize,
    pub trace: AdaptationTrace,
    pub selection: WindowSelection,
}

fn score(video: &Tensor, z_window: &Tensor, prompts: &Tensor, params: &ModelParams, scoring: Scoring) -> Result<usize> {
    let z = match scoring {
        Scoring::Window => z_window.clone(),
        Scoring::Whole => encode_video(video, params.temporal())?,
    };
    Ok(classify(&ops::cosine_rows(&z, prompts)?, params.classifier())?.argmax())
}

/// Select the key window, tune prompts on it and predict. `prompts` is left
/// tuned; the caller applies the reset policy.
pub fn personalize_video(
    video: &EmbeddingSequence,
    prompts: &mut TunablePrompts,
    params: &ModelParams,
    cfg: &TtaConfig,
) -> Result<VideoOutcome> {
    if video.dim() != params.dim() {
        return Err(shape_err!(
            "video of dimension {} for a model of dimension {}",
            video.dim(),
            params.dim()
        ));
    }
    let selection = window_entropy_profile(&video.frames, &prompts.current, params, cfg.window)?;
    let w = selection.selected();
    let z_v = encode_video(&video.frames.slice_rows(w.start, w.end), params.temporal())?;
    let pre_adapt_prediction = score(&video.frames, &z_v, &prompts.current, params, cfg.scoring)?;
    let trace = tune_prompts(&z_v, prompts, params.classifier(), cfg)?;
    let prediction = match cfg.scoring {
        Scoring::Window => trace.prediction,
        Scoring::Whole => score(&video.frames, &z_v, &prompts.current, params, cfg.scoring)?,
    };
    Ok(VideoOutcome {
        prediction,
        pre_adapt_prediction,
        trace,
        selection,
    })
}

/// One subject's videos in order. Per-video policy resets after every video;
/// per-subject policy carries the tuned prompts through and starts fresh
/// optimizer moments for each video.
pub fn personalize_subject(
    videos: &[EmbeddingSequence],
    adapted: &Tensor,
    params: &ModelParams,
    cfg: &TtaConfig,
) -> Result<Vec<VideoOutcome>> {
    if videos.is_empty() {
        return Err(Error::Protocol("subject has no videos".into()));
    }
    let mut prompts = TunablePrompts::new(adapted.clone());
    videos
        .iter()
        .map(|v| {
            let out = personalize_video(v, &mut prompts, params, cfg)?;
            if cfg.reset == ResetPolicy::PerVideo {
                prompts.reset();
            }
            Ok(out)
        })
        .collect()
}

/// Adaptation report line for one video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationRecord {
    pub subject: String,
    pub label: usize,
    pub prediction: usize,
    /// 1-based index of the selected window.
    pub i_star: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub entropy_trace: Vec<f64>,
    pub pre_adapt_prediction: usize,
}

impl AdaptationRecord {
    pub fn new(video: &EmbeddingSequence, out: &VideoOutcome) -> Self {
        Self {
            subject: video.subject.clone(),
            label: video.label,
            prediction: out.prediction,
            i_star: out.selection.i_star + 1,
            m: out.selection.count(),
            entropy_trace: out.trace.entropies.clone(),
            pre_adapt_prediction: out.pre_adapt_prediction,
        }
    }
}

/// Run adaptation over a corpus. Work fans out over videos (per-video reset)
/// or subjects (per-subject reset); results come back in input order.
pub fn adapt_corpus(
    videos: &[EmbeddingSequence],
    adapted: &Tensor,
    params: &ModelParams,
    cfg: &TtaConfig,
) -> Result<Vec<AdaptationRecord>> {
    cfg.validate()?;
    if videos.is_empty() {
        return Err(Error::Protocol("no videos to adapt".into()));
    }
    match cfg.reset {
        ResetPolicy::PerVideo => videos
            .par_iter()
            .map(|v| {
                let mut prompts = TunablePrompts::new(adapted.clone());
                let out = personalize_video(v, &mut prompts, params, cfg)?;
                Ok(AdaptationRecord::new(v, &out))
            })
            .collect(),
        ResetPolicy::PerSubject => {
            let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
            for (i, v) in videos.iter().enumerate() {
                match groups.iter_mut().find(|(s, _)| *s == v.subject) {
                    Some((_, idx)) => idx.push(i),
                    None => groups.push((v.subject.clone(), vec![i])),
                }
            }
            let per_group = groups
                .par_iter()
                .map(|(_, idx)| {
                    let subset: Vec<EmbeddingSequence> = idx.iter().map(|&i| videos[i].clone()).collect();
                    let outs = personalize_subject(&subset, adapted, params, cfg)?;
                    Ok(subset
                        .iter()
                        .zip(&outs)
                        .map(|(v, o)| AdaptationRecord::new(v, o))
                        .collect::<Vec<_>>())
                })
                .collect::<Result<Vec<_>>>()?;
            let mut slots: Vec<Option<AdaptationRecord>> = vec![None; videos.len()];
            for ((_, idx), recs) in groups.iter().zip(per_group) {
                for (&i, r) in idx.iter().zip(recs) {
                    slots[i] = Some(r);
                }
            }
            Ok(slots.into_iter().map(Option::unwrap).collect())
        }
    }
}

pub const REPORT_CSV_HEADER: &str =
    "subject,label,prediction,pre_adapt_prediction,i_star,M,entropy_initial,entropy_final";

/// Per-video CSV of an adaptation run.
pub fn records_csv(records: &[AdaptationRecord]) -> String {
    let mut out = String::from(REPORT_CSV_HEADER);
    out.push('\n');
    for r in records {
        let first = r.entropy_trace.first().copied().unwrap_or(f64::NAN);
        let last = r.entropy_trace.last().copied().unwrap_or(f64::NAN);
        out.push_str(&format!(
            "{},{},{},{},{},{},{first:.17e},{last:.17e}\n",
            r.subject, r.label, r.prediction, r.pre_adapt_prediction, r.i_star, r.m
        ));
    }
    out
}

/// Result of probing the entropy-gradient structure on a linear head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum StructureOutcome {
    Pass {
        au: usize,
        grad_s: f64,
        before: f64,
        after: f64,
    },
    Fail {
        au: usize,
        grad_s: f64,
        before: f64,
        after: f64,
    },
    /// The premise does not hold (one-hot `p`, tied maximal weight, or non-negative gradient).
    Inconclusive { reason: String },
}

impl StructureOutcome {
    pub fn is_fail(&self) -> bool {
        matches!(self, Self::Fail { .. })
    }

    pub fn is_pass(&self) -> bool {
        matches!(self, Self::Pass { .. })
    }
}

/// Gradient of the entropy of `softmax(M s + b)` with respect to `s`.
pub fn entropy_grad_wrt_similarity(head: &LinearHead, s: &Tensor) -> Result<(f64, Tensor, Tensor)> {
    let mut tape = Tape::new();
    let sv = tape.param(s.clone());
    let m = tape.constant(head.weights().clone());
    let b = tape.constant(head.bias().clone());
    let logits = tape.matvec(m, sv, b)?;
    let p = tape.softmax(logits)?;
    let h = tape.entropy(p)?;
    let g = tape.backward(h)?;
    Ok((tape.value(h).item(), tape.value(p).clone(), g.get(sv)))
}

/// Take one plain gradient step of size `step` on the entropy with respect to
/// the prompt rows and check that the similarity of the AU with the largest
/// weight toward the predicted class rises.
pub fn gradient_structure_check(
    head: &LinearHead,
    z_v: &Tensor,
    prompts: &Tensor,
    step: f64,
) -> Result<StructureOutcome> {
    let s = ops::cosine_rows(z_v, prompts)?;
    let (_, p, grad_s) = entropy_grad_wrt_similarity(head, &s)?;
    if p.data().iter().any(|&v| v >= 1.0 - 1e-12) {
        return Ok(StructureOutcome::Inconclusive {
            reason: "prediction is one-hot".into(),
        });
    }
    let y = p.argmax();
    let weights = head.weights().row(y);
    let au = argmax(weights);
    if weights.iter().filter(|&&w| w == weights[au]).count() > 1 {
        return Ok(StructureOutcome::Inconclusive {
            reason: format!("maximal weight toward class {y} is tied"),
        });
    }
    let g = grad_s.data()[au];
    if g >= 0.0 {
        return Ok(StructureOutcome::Inconclusive {
            reason: format!("similarity gradient for AU {au} is {g:e}, not negative"),
        });
    }
    let classifier = Classifier::Linear(head.clone());
    let (_, _, grad_rows) = entropy_and_grad(z_v, prompts, &classifier)?;
    let mut stepped = prompts.clone();
    for (x, gx) in stepped.data_mut().iter_mut().zip(grad_rows.data()) {
        *x -= step * gx;
    }
    let before = s.data()[au];
    let after = ops::cosine_sim(z_v.data(), stepped.row(au))?;
    Ok(if after > before {
        StructureOutcome::Pass {
            au,
            grad_s: g,
            before,
            after,
        }
    } else {
        StructureOutcome::Fail {
            au,
            grad_s: g,
            before,
            after,
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelParams};

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn window_enumeration() {
        assert_eq!(enumerate_windows(5, 3), vec![0..3, 1..4, 2..5]);
        assert_eq!(enumerate_windows(16, 16), vec![0..16]);
        assert_eq!(enumerate_windows(4, 16), vec![0..4]);
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn engineered_profile() {
        let h: Vec<f64> = [[0.9, 0.1], [0.5, 0.5], [0.7, 0.3]]
            .iter()
            .map(|p| ops::entropy(&t(&[2], p.to_vec())).unwrap())
            .collect();
        assert_eq!(argmin_first(&h), 0);
        let want = [0.3251, 0.6931, 0.6109];
        for (a, b) in h.iter().zip(want) {
            assert!((a - b).abs() < 5e-5, "{a} vs {b}");
        }
        assert_eq!(argmin_first(&[1.0, 0.5, 0.5]), 1);
    }

    #[test]
    fn uniform_classifier_gives_flat_profile() {
        let p = ModelParams::init(ModelConfig::new(4, 3, 2), 2)
            .unwrap()
            .with_zero_classifier();
        let frames = t(&[7, 4], (0..28).map(|i| (i as f64 * 0.37).sin()).collect());
        let prompts = t(&[3, 4], (0..12).map(|i| (i as f64 * 0.71).cos()).collect());
        let sel = window_entropy_profile(&frames, &prompts, &p, 3).unwrap();
        assert_eq!(sel.count(), 5);
        assert_eq!(sel.i_star, 0);
        for h in &sel.entropies {
            assert!((h - 2f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_iterations_and_zero_lr_are_no_ops() {
        let p = ModelParams::init(ModelConfig::new(4, 3, 2), 2).unwrap();
        let z = t(&[4], vec![0.3, -0.1, 0.8, 0.2]);
        let prompts = t(&[3, 4], (0..12).map(|i| (i as f64 * 0.71).cos()).collect());
        let mut tp = TunablePrompts::new(prompts.clone());
        let cfg = TtaConfig {
            iterations: 0,
            ..TtaConfig::default()
        };
        let tr = tune_prompts(&z, &mut tp, p.classifier(), &cfg).unwrap();
        assert_eq!(tr.entropies.len(), 1);
        assert!(tp.current().bit_eq(&prompts));

        let cfg = TtaConfig {
            lr: 0.0,
            weight_decay: 0.0,
            ..TtaConfig::default()
        };
        let tr = tune_prompts(&z, &mut tp, p.classifier(), &cfg).unwrap();
        assert_eq!(tr.entropies.len(), 11);
        assert!(tr.entropies.iter().all(|h| h.to_bits() == tr.entropies[0].to_bits()));
        assert!(tp.current().bit_eq(&prompts));
    }

    #[test]
    fn engineered_structure_instance() {
        let head = LinearHead::new(t(&[2, 3], vec![1., 0., 0., 0., 1., 0.]), Tensor::zeros(&[2])).unwrap();
        let z = t(&[3], vec![1.0, 0.0, 0.0]);
        let prompts = t(&[3, 3], vec![0.8, 0.6, 0.0, -0.2, 0.96f64.sqrt(), 0.0, 0.0, 0.0, 1.0]);
        let s = ops::cosine_rows(&z, &prompts).unwrap();
        let p = classify(&s, &Classifier::Linear(head.clone())).unwrap();
        assert!((p.data()[0] - 0.73).abs() < 0.005);
        let out = gradient_structure_check(&head, &z, &prompts, 1e-2).unwrap();
        assert!(matches!(out, StructureOutcome::Pass { au: 0, .. }), "{out:?}");
    }

    #[test]
    fn symmetric_head_with_uniform_output_has_zero_gradient() {
        let head = LinearHead::new(t(&[2, 2], vec![1., 1., 1., 1.]), Tensor::zeros(&[2])).unwrap();
        let (_, p, g) = entropy_grad_wrt_similarity(&head, &t(&[2], vec![0.4, -0.2])).unwrap();
        assert!((p.data()[0] - 0.5).abs() < 1e-15);
        assert!(g.data().iter().all(|&x| x == 0.0));
    }
}
