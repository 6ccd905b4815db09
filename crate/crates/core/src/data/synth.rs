//! Synthetic corpora with a known AU model.
//!
//! Each class owns a sparse template of AU weights. A frame is
//! `base + offset_s + env(t)·(w_{s,y} · U) + noise`, where `U` holds the latent
//! AU directions, `env` is a Gaussian bump centered in the middle stretch of the
//! video, and `w_{s,y}` is the class template perturbed per subject. Target
//! subjects get a larger, sparser perturbation, weaker expressions and a larger
//! identity offset.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::format::write_embeddings;
use super::{EmbeddingSequence, Manifest, ManifestRecord, PromptKind, PromptSet, Role};
use crate::diffcore::{ops, Tensor};
use crate::error::{config_err, shape_err, Result};
use crate::io::write_json;
use crate::rng::{self, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub dim: usize,
    pub n_prompts: usize,
    pub n_classes: usize,
    pub source_subjects: usize,
    pub target_subjects: usize,
    pub videos_per_subject: usize,
    pub t_min: usize,
    pub t_max: usize,
    /// Active AUs per class when templates are generated.
    pub active_aus: usize,
    /// Explicit `C × N` class templates; generated from `active_aus` when absent.
    pub templates: Option<Vec<Vec<f64>>>,
    pub source_perturbation: f64,
    pub target_shift: f64,
    /// Fraction of template entries a subject perturbation touches.
    pub perturbation_density: f64,
    /// Multiplier on target-subject template weights.
    pub target_expressivity: f64,
    /// Norm of the per-subject identity offset (doubled for targets).
    pub identity_offset: f64,
    /// Per-coordinate standard deviation of frame noise.
    pub noise: f64,
    /// Envelope width as a divisor of `T` (σ = T / width).
    pub envelope_width: f64,
    pub envelope_floor: f64,
    /// Per-coordinate noise added to AU directions to form raw prompts.
    pub prompt_noise: f64,
    pub orthonormal: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            dim: 64,
            n_prompts: 46,
            n_classes: 2,
            source_subjects: 8,
            target_subjects: 2,
            videos_per_subject: 20,
            t_min: 24,
            t_max: 48,
            active_aus: 6,
            templates: None,
            source_perturbation: 0.3,
            target_shift: 1.0,
            perturbation_density: 0.2,
            target_expressivity: 0.25,
            identity_offset: 0.5,
            noise: 0.3,
            envelope_width: 10.0,
            envelope_floor: 0.0,
            prompt_noise: 0.1,
            orthonormal: true,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(config_err!("need at least 2 classes, got {}", self.n_classes));
        }
        if self.dim == 0 || self.n_prompts == 0 {
            return Err(config_err!("dimension and prompt count must be positive"));
        }
        if self.orthonormal && self.dim < self.n_prompts {
            return Err(config_err!(
                "cannot fit {} orthonormal directions in dimension {}",
                self.n_prompts,
                self.dim
            ));
        }
        if self.t_min == 0 || self.t_min > self.t_max {
            return Err(config_err!("invalid frame range [{}, {}]", self.t_min, self.t_max));
        }
        if self.videos_per_subject == 0 || self.source_subjects + self.target_subjects == 0 {
            return Err(config_err!("corpus would be empty"));
        }
        let scales = [
            ("source_perturbation", self.source_perturbation),
            ("target_shift", self.target_shift),
            ("perturbation_density", self.perturbation_density),
            ("target_expressivity", self.target_expressivity),
            ("identity_offset", self.identity_offset),
            ("noise", self.noise),
            ("envelope_floor", self.envelope_floor),
            ("prompt_noise", self.prompt_noise),
        ];
        for (name, v) in scales {
            if !(v.is_finite() && v >= 0.0) {
                return Err(config_err!("{name} must be a non-negative number, got {v}"));
            }
        }
        if !(self.envelope_width.is_finite() && self.envelope_width > 0.0) {
            return Err(config_err!("envelope_width must be positive"));
        }
        match &self.templates {
            Some(t) => check_templates(t, self.n_classes, self.n_prompts)?,
            None => {
                if self.active_aus == 0 || self.active_aus * self.n_classes > self.n_prompts {
                    return Err(config_err!(
                        "{} classes × {} active AUs do not fit in {} prompts",
                        self.n_classes,
                        self.active_aus,
                        self.n_prompts
                    ));
                }
            }
        }
        Ok(())
    }
}

fn check_templates(t: &[Vec<f64>], c: usize, n: usize) -> Result<()> {
    if t.len() != c || t.iter().any(|row| row.len() != n) {
        return Err(config_err!("templates must be {c}×{n}"));
    }
    if t.iter().flatten().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(config_err!("template weights must be finite and non-negative"));
    }
    if t.iter().any(|row| row.iter().all(|&v| v == 0.0)) {
        return Err(config_err!("every class template needs a non-zero weight"));
    }
    for i in 0..c {
        for j in i + 1..c {
            if t[i] == t[j] {
                return Err(config_err!("classes {i} and {j} share a template"));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectTruth {
    pub subject: String,
    pub role: Role,
    /// `C × N` template weights after this subject's perturbation.
    pub weights: Vec<Vec<f64>>,
    pub offset: Vec<f64>,
}

/// The latent model behind a synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// `AUE1` file with the `N × d` latent directions, relative to the corpus root.
    pub directions: PathBuf,
    pub base: Vec<f64>,
    pub class_templates: Vec<Vec<f64>>,
    pub subjects: Vec<SubjectTruth>,
}

impl GroundTruth {
    pub fn subject(&self, id: &str) -> Option<&SubjectTruth> {
        self.subjects.iter().find(|s| s.subject == id)
    }

    /// Project the time-averaged, identity-removed frames onto the AU
    /// directions and return the class whose subject template is closest in
    /// cosine.
    pub fn nearest_template(&self, video: &EmbeddingSequence, directions: &Tensor) -> Result<usize> {
        let truth = self
            .subject(&video.subject)
            .ok_or_else(|| shape_err!("subject {} is not in the ground truth", video.subject))?;
        let d = directions.cols();
        if video.dim() != d {
            return Err(shape_err!("video dimension {} vs directions {d}", video.dim()));
        }
        let mean = ops::mean_pool(&video.frames)?;
        let residual: Vec<f64> = (0..d)
            .map(|j| mean.data()[j] - self.base[j] - truth.offset[j])
            .collect();
        let coeffs: Vec<f64> = (0..directions.rows())
            .map(|i| directions.row(i).iter().zip(&residual).map(|(u, r)| u * r).sum())
            .collect();
        let scores: Vec<f64> = truth
            .weights
            .iter()
            .map(|w| ops::cosine_sim(&coeffs, w).unwrap_or(-1.0))
            .collect();
        Ok(crate::diffcore::argmax(&scores))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthVideo {
    pub record: ManifestRecord,
    pub sequence: EmbeddingSequence,
}

/// A generated corpus held in memory. [`write_to`](Self::write_to) lays it out on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub spec: SynthSpec,
    pub videos: Vec<SynthVideo>,
    pub prompts: PromptSet,
    pub class_prompts: PromptSet,
    pub directions: Tensor,
    pub ground_truth: GroundTruth,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const PROMPTS_STEM: &str = "prompts";
pub const CLASS_PROMPTS_STEM: &str = "class_prompts";
pub const DIRECTIONS_FILE: &str = "au_directions.aue";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";
pub const SPEC_FILE: &str = "synth_spec.json";

impl SynthCorpus {
    pub fn manifest(&self, base_dir: &Path) -> Manifest {
        Manifest {
            name: "synth".into(),
            base_dir: base_dir.to_path_buf(),
            records: self.videos.iter().map(|v| v.record.clone()).collect(),
        }
    }

    pub fn sequences(&self, role: Role) -> Vec<EmbeddingSequence> {
        self.videos
            .iter()
            .filter(|v| v.record.role == role)
            .map(|v| v.sequence.clone())
            .collect()
    }

    /// Write every artifact under `dir` and return the manifest path.
    pub fn write_to(&self, dir: &Path) -> Result<PathBuf> {
        for v in &self.videos {
            write_embeddings(&v.sequence.frames, &dir.join(&v.record.path))?;
        }
        self.prompts.save(dir, PROMPTS_STEM)?;
        self.class_prompts.save(dir, CLASS_PROMPTS_STEM)?;
        write_embeddings(&self.directions, &dir.join(DIRECTIONS_FILE))?;
        write_json(&dir.join(GROUND_TRUTH_FILE), &self.ground_truth)?;
        write_json(&dir.join(SPEC_FILE), &self.spec)?;
        let path = dir.join(MANIFEST_FILE);
        self.manifest(dir).save(&path)?;
        Ok(path)
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Round through `f32` so the in-memory corpus equals what lands on disk.
fn f32_round(v: f64) -> f64 {
    f64::from(v as f32)
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn project_out(v: &mut [f64], u: &[f64]) {
    let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
    v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
}

/// `n` unit directions in `R^d`, mutually orthogonal when `orthonormal`.
fn directions(rng: &mut ChaCha8Rng, n: usize, d: usize, orthonormal: bool) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    while out.len() < n {
        let mut v: Vec<f64> = (0..d).map(|_| gauss(rng)).collect();
        if orthonormal {
            // Two passes of modified Gram-Schmidt keep the basis orthogonal to rounding.
            for _ in 0..2 {
                for u in &out {
                    project_out(&mut v, u);
                }
            }
            if v.iter().map(|x| x * x).sum::<f64>().sqrt() < 1e-6 {
                continue;
            }
        }
        normalize(&mut v);
        out.push(v);
    }
    out
}

fn class_templates(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    if let Some(t) = &spec.templates {
        return t.clone();
    }
    let mut order: Vec<usize> = (0..spec.n_prompts).collect();
    order.shuffle(rng);
    (0..spec.n_classes)
        .map(|c| {
            let mut w = vec![0.0; spec.n_prompts];
            for &i in &order[c * spec.active_aus..(c + 1) * spec.active_aus] {
                w[i] = 1.0;
            }
            w
        })
        .collect()
}

fn mix(weights: &[f64], dirs: &[Vec<f64>], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for (w, u) in weights.iter().zip(dirs) {
        if *w != 0.0 {
            out.iter_mut().zip(u).for_each(|(o, x)| *o += w * x);
        }
    }
    out
}

/// Generate a corpus from `spec`. Output depends on nothing but the spec.
pub fn synth_generate(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, Stream::Synth);
    let (d, n, c) = (spec.dim, spec.n_prompts, spec.n_classes);

    let dirs = directions(&mut rng, n, d, spec.orthonormal);
    let mut base: Vec<f64> = (0..d).map(|_| gauss(&mut rng)).collect();
    if spec.orthonormal && d > n {
        for u in &dirs {
            project_out(&mut base, u);
        }
    }
    normalize(&mut base);
    let templates = class_templates(spec, &mut rng);

    let raw_rows: Vec<Vec<f64>> = dirs
        .iter()
        .map(|u| {
            u.iter()
                .map(|x| f32_round(x + spec.prompt_noise * gauss(&mut rng)))
                .collect()
        })
        .collect();
    let prompts = PromptSet::new(
        (1..=n).map(|i| format!("AU{i:02}")).collect(),
        Tensor::from_rows(&raw_rows)?,
        PromptKind::Au,
    )?;

    let class_dirs: Vec<Vec<f64>> = templates
        .iter()
        .map(|w| {
            let mut v = mix(w, &dirs, d);
            normalize(&mut v);
            v
        })
        .collect();
    let mut cp_names = Vec::with_capacity(n);
    let mut cp_rows = Vec::with_capacity(n);
    for j in 0..n {
        let (class, k) = (j % c, j / c);
        let au = rng.random_range(0..n);
        let row = class_dirs[class]
            .iter()
            .zip(&dirs[au])
            .map(|(a, b)| f32_round(a + 0.5 * b + spec.prompt_noise * gauss(&mut rng)))
            .collect();
        cp_names.push(format!("cp_{class}_{k}"));
        cp_rows.push(row);
    }
    let class_prompts = PromptSet::new(cp_names, Tensor::from_rows(&cp_rows)?, PromptKind::ClassPromptEnsemble)?;

    let roles = std::iter::repeat_n(Role::Source, spec.source_subjects)
        .chain(std::iter::repeat_n(Role::Target, spec.target_subjects));
    let (mut src_idx, mut tgt_idx) = (0, 0);
    let mut subjects = Vec::new();
    let mut videos = Vec::new();
    for role in roles {
        let (subject, scale, expressivity, offset_norm) = match role {
            Role::Source => {
                src_idx += 1;
                (
                    format!("src{:02}", src_idx - 1),
                    spec.source_perturbation,
                    1.0,
                    spec.identity_offset,
                )
            }
            Role::Target => {
                tgt_idx += 1;
                (
                    format!("tgt{:02}", tgt_idx - 1),
                    spec.target_shift,
                    spec.target_expressivity,
                    2.0 * spec.identity_offset,
                )
            }
        };
        let weights: Vec<Vec<f64>> = templates
            .iter()
            .map(|w| {
                w.iter()
                    .map(|&x| {
                        let bump: f64 = scale * rng.random::<f64>();
                        let hit = rng.random::<f64>() < spec.perturbation_density;
                        expressivity * (x + if hit { bump } else { 0.0 })
                    })
                    .collect()
            })
            .collect();
        let mut offset: Vec<f64> = (0..d).map(|_| gauss(&mut rng)).collect();
        normalize(&mut offset);
        offset.iter_mut().for_each(|x| *x *= offset_norm);

        let signals: Vec<Vec<f64>> = weights.iter().map(|w| mix(w, &dirs, d)).collect();
        for v in 0..spec.videos_per_subject {
            let label = v % c;
            let t_len = rng.random_range(spec.t_min..=spec.t_max);
            let center = (0.3 + 0.4 * rng.random::<f64>()) * t_len as f64;
            let sigma = t_len as f64 / spec.envelope_width;
            let mut data = Vec::with_capacity(t_len * d);
            for t in 0..t_len {
                let z = (t as f64 - center) / sigma;
                let env = spec.envelope_floor + (-0.5 * z * z).exp();
                for j in 0..d {
                    let x = base[j] + offset[j] + env * signals[label][j] + spec.noise * gauss(&mut rng);
                    data.push(f32_round(x));
                }
            }
            let frames = Tensor::matrix(t_len, d, data)?;
            let record = ManifestRecord {
                subject: subject.clone(),
                label,
                path: PathBuf::from(format!("videos/{subject}_{v:03}.aue")),
                frames: t_len,
                role,
            };
            videos.push(SynthVideo {
                sequence: EmbeddingSequence::new(subject.clone(), label, frames)?,
                record,
            });
        }
        subjects.push(SubjectTruth {
            subject,
            role,
            weights,
            offset,
        });
    }

    let directions = Tensor::from_rows(&dirs)?;
    Ok(SynthCorpus {
        spec: spec.clone(),
        videos,
        prompts,
        class_prompts,
        directions,
        ground_truth: GroundTruth {
            directions: PathBuf::from(DIRECTIONS_FILE),
            base,
            class_templates: templates,
            subjects,
        },
    })
}
