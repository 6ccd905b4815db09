//! Finite-difference verification of every primitive and of the two
//! pipeline losses (supervised cross-entropy and test-time entropy).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::gradcheck::DEFAULT_STEP;
use crate::diffcore::{finite_difference, max_relative_error, ops, OpKind, Tape, Tensor, Var};
use crate::error::Result;
use crate::model::{
    adapt_prompt_embeddings, encode_video, Activation, Classifier, ClassifierKind, ClassifierVars, ModelConfig,
    ModelParams, ParamVars,
};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    pub instances: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            step: DEFAULT_STEP,
            tolerance: 1e-4,
            instances: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub config: GradcheckConfig,
    pub fault: Option<String>,
    pub checks: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect()
    }
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;
type Numeric = Box<dyn Fn(&[Tensor]) -> Result<f64>>;

/// One random instance: parameters, the tape construction of the loss, and
/// optionally a plain evaluation used for the finite differences.
struct Instance {
    params: Vec<Tensor>,
    build: Build,
    numeric: Option<Numeric>,
}

impl Instance {
    fn new(params: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> Self {
        Self {
            params,
            build: Box::new(build),
            numeric: None,
        }
    }

    fn with_numeric(mut self, f: impl Fn(&[Tensor]) -> Result<f64> + 'static) -> Self {
        self.numeric = Some(Box::new(f));
        self
    }

    fn error(&self, fault: Option<OpKind>, step: f64) -> Result<f64> {
        let mut tape = fault.map_or_else(Tape::new, Tape::with_fault);
        let vars: Vec<Var> = self.params.iter().map(|p| tape.param(p.clone())).collect();
        let loss = (self.build)(&mut tape, &vars)?;
        let grads = tape.backward(loss)?;
        let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();
        let numeric = match &self.numeric {
            Some(f) => finite_difference(f, &self.params, step)?,
            None => finite_difference(
                |ps| {
                    let mut t = Tape::new();
                    let vs: Vec<Var> = ps.iter().map(|p| t.param(p.clone())).collect();
                    let l = (self.build)(&mut t, &vs)?;
                    Ok(t.value(l).item())
                },
                &self.params,
                step,
            )?,
        };
        Ok(max_relative_error(&analytic, &numeric))
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("finite sample")
}

/// Entries bounded away from zero, for rectifier inputs.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(0.1..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn probability(rng: &mut ChaCha8Rng, c: usize) -> Tensor {
    let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    Tensor::vector(raw.into_iter().map(|v| v / total).collect()).unwrap()
}

/// Project a vector- or matrix-valued node onto a fixed random direction.
fn project(tape: &mut Tape, out: Var, dir: &Tensor) -> Result<Var> {
    let d = tape.constant(dir.clone());
    tape.dot(out, d)
}

fn size(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

type Generator = fn(&mut ChaCha8Rng) -> Instance;

fn primitive_generators() -> Vec<(&'static str, Generator)> {
    vec![
        ("affine", |rng| {
            let (m, k, n) = (size(rng, 1, 4), size(rng, 1, 5), size(rng, 1, 5));
            let dir = uniform(rng, &[m, n], 1.0);
            Instance::new(
                vec![
                    uniform(rng, &[m, k], 1.0),
                    uniform(rng, &[k, n], 1.0),
                    uniform(rng, &[n], 1.0),
                ],
                move |t, v| {
                    let y = t.affine(v[0], v[1], v[2])?;
                    project(t, y, &dir)
                },
            )
        }),
        ("matvec", |rng| {
            let (n, k) = (size(rng, 1, 5), size(rng, 1, 5));
            let dir = uniform(rng, &[n], 1.0);
            Instance::new(
                vec![
                    uniform(rng, &[n, k], 1.0),
                    uniform(rng, &[k], 1.0),
                    uniform(rng, &[n], 1.0),
                ],
                move |t, v| {
                    let y = t.matvec(v[0], v[1], v[2])?;
                    project(t, y, &dir)
                },
            )
        }),
        ("relu", |rng| {
            let n = size(rng, 1, 8);
            let dir = uniform(rng, &[n], 1.0);
            Instance::new(vec![away_from_zero(rng, &[n])], move |t, v| {
                let y = t.relu(v[0]);
                project(t, y, &dir)
            })
        }),
        ("conv1d_temporal", |rng| {
            let (frames, c_in, c_out) = (size(rng, 1, 6), size(rng, 1, 3), size(rng, 1, 4));
            let k = [1, 3, 5][size(rng, 0, 2)];
            let dir = uniform(rng, &[frames, c_out], 1.0);
            Instance::new(
                vec![
                    uniform(rng, &[frames, c_in], 1.0),
                    uniform(rng, &[k, c_in, c_out], 1.0),
                    uniform(rng, &[c_out], 1.0),
                ],
                move |t, v| {
                    let y = t.conv1d(v[0], v[1], v[2])?;
                    project(t, y, &dir)
                },
            )
        }),
        ("glu", |rng| {
            let (rows, m) = (size(rng, 1, 3), size(rng, 1, 4));
            let shape = if rows == 1 { vec![2 * m] } else { vec![rows, 2 * m] };
            let out_shape = if rows == 1 { vec![m] } else { vec![rows, m] };
            let dir = uniform(rng, &out_shape, 1.0);
            Instance::new(vec![uniform(rng, &shape, 2.0)], move |t, v| {
                let y = t.glu(v[0])?;
                project(t, y, &dir)
            })
        }),
        ("mean_pool", |rng| {
            let (frames, c) = (size(rng, 1, 7), size(rng, 1, 4));
            let dir = uniform(rng, &[c], 1.0);
            Instance::new(vec![uniform(rng, &[frames, c], 1.0)], move |t, v| {
                let y = t.mean_pool(v[0])?;
                project(t, y, &dir)
            })
        }),
        ("cosine_sim", |rng| {
            let d = size(rng, 2, 6);
            Instance::new(vec![uniform(rng, &[d], 1.0), uniform(rng, &[d], 1.0)], |t, v| {
                t.cosine(v[0], v[1])
            })
        }),
        ("cosine_rows", |rng| {
            let (n, d) = (size(rng, 1, 5), size(rng, 2, 6));
            let dir = uniform(rng, &[n], 1.0);
            Instance::new(
                vec![uniform(rng, &[d], 1.0), uniform(rng, &[n, d], 1.0)],
                move |t, v| {
                    let y = t.cosine_rows(v[0], v[1])?;
                    project(t, y, &dir)
                },
            )
        }),
        ("softmax", |rng| {
            let c = size(rng, 2, 6);
            let dir = uniform(rng, &[c], 1.0);
            Instance::new(vec![uniform(rng, &[c], 3.0)], move |t, v| {
                let y = t.softmax(v[0])?;
                project(t, y, &dir)
            })
        }),
        ("cross_entropy", |rng| {
            let c = size(rng, 2, 6);
            let label = rng.random_range(0..c);
            Instance::new(vec![probability(rng, c)], move |t, v| t.cross_entropy(v[0], label))
        }),
        ("entropy", |rng| {
            let c = size(rng, 2, 6);
            // Perturbed inputs leave the simplex, so differences use the formula directly.
            Instance::new(vec![probability(rng, c)], |t, v| t.entropy(v[0]))
                .with_numeric(|ps| Ok(ops::entropy_unchecked(ps[0].data())))
        }),
        ("dot", |rng| {
            let n = size(rng, 1, 6);
            Instance::new(vec![uniform(rng, &[n], 1.0), uniform(rng, &[n], 1.0)], |t, v| {
                t.dot(v[0], v[1])
            })
        }),
        ("add", |rng| {
            let n = size(rng, 1, 6);
            let dir = uniform(rng, &[n], 1.0);
            Instance::new(vec![uniform(rng, &[n], 1.0), uniform(rng, &[n], 1.0)], move |t, v| {
                let y = t.add(v[0], v[1])?;
                project(t, y, &dir)
            })
        }),
        ("mean", |rng| {
            let n = size(rng, 1, 5);
            let ps = (0..n).map(|_| uniform(rng, &[1], 1.0)).collect();
            Instance::new(ps, |t, v| t.mean(v))
        }),
    ]
}

/// A small random model together with an input batch, rejected and redrawn
/// while any rectifier input sits within `margin` of its kink.
struct PipelineCase {
    params: ModelParams,
    raw: Tensor,
    videos: Vec<(Tensor, usize)>,
}

fn min_rectifier_margin(case: &PipelineCase) -> Result<f64> {
    let p = &case.params;
    let mut margin = f64::INFINITY;
    let a = p.adapter();
    let pre = ops::affine(&case.raw, &a.w1, &a.b1)?;
    margin = pre.data().iter().fold(margin, |m, v| m.min(v.abs()));
    let z_au = adapt_prompt_embeddings(&case.raw, a)?;
    if let Classifier::Mlp(h) = p.classifier() {
        for (frames, _) in &case.videos {
            let s = ops::cosine_rows(&encode_video(frames, p.temporal())?, &z_au)?;
            let pre = ops::affine(&s, &h.w1, &h.b1)?;
            margin = pre.data().iter().fold(margin, |m, v| m.min(v.abs()));
        }
    }
    Ok(margin)
}

fn pipeline_case(rng: &mut ChaCha8Rng, kind: ClassifierKind, batch: usize) -> Result<PipelineCase> {
    loop {
        let (d, n, c) = (size(rng, 2, 4), size(rng, 2, 4), size(rng, 2, 3));
        let mut config = ModelConfig::new(d, n, c).with_classifier(kind);
        config.classifier_hidden = size(rng, 2, 5);
        let params = ModelParams::init(config, rng.random())?;
        let raw = uniform(rng, &[n, d], 1.0);
        let videos = (0..batch)
            .map(|_| {
                let frames = size(rng, 1, 6);
                (uniform(rng, &[frames, d], 1.0), rng.random_range(0..c))
            })
            .collect();
        let case = PipelineCase { params, raw, videos };
        if min_rectifier_margin(&case)? > 1e-3 {
            return Ok(case);
        }
    }
}

fn supervised_instance(rng: &mut ChaCha8Rng, kind: ClassifierKind) -> Result<Instance> {
    let case = pipeline_case(rng, kind, 2)?;
    let config = *case.params.config();
    let params: Vec<Tensor> = case.params.tensors().into_iter().cloned().collect();
    let (raw, videos) = (case.raw.clone(), case.videos.clone());
    let build = move |t: &mut Tape, v: &[Var]| -> Result<Var> {
        let vars = bind(&config, v);
        let r = t.constant(raw.clone());
        let z_au = vars.adapt_prompts(t, r)?;
        let mut losses = Vec::new();
        for (frames, label) in &videos {
            let f = t.constant(frames.clone());
            let z = vars.encode_video(t, f)?;
            let s = t.cosine_rows(z, z_au)?;
            let p = vars.classify(t, s)?;
            losses.push(t.cross_entropy(p, *label)?);
        }
        t.mean(&losses)
    };
    Ok(Instance::new(params, build))
}

/// Tape handles for parameters registered in [`ModelParams::tensors`] order.
fn bind(config: &ModelConfig, v: &[Var]) -> ParamVars {
    ParamVars {
        adapter: [v[0], v[1], v[2], v[3]],
        adapter_activation: config.adapter_activation,
        temporal: [v[4], v[5]],
        classifier: match config.classifier {
            ClassifierKind::Mlp => ClassifierVars::Mlp([v[6], v[7], v[8], v[9]], config.classifier_activation),
            ClassifierKind::LinearHead => ClassifierVars::Linear([v[6], v[7]]),
        },
    }
}

fn entropy_full_instance(rng: &mut ChaCha8Rng, kind: ClassifierKind) -> Result<Instance> {
    let case = pipeline_case(rng, kind, 1)?;
    let config = *case.params.config();
    let params: Vec<Tensor> = case.params.tensors().into_iter().cloned().collect();
    let (raw, frames) = (case.raw.clone(), case.videos[0].0.clone());
    let build = move |t: &mut Tape, v: &[Var]| -> Result<Var> {
        let vars = bind(&config, v);
        let r = t.constant(raw.clone());
        let z_au = vars.adapt_prompts(t, r)?;
        let f = t.constant(frames.clone());
        let z = vars.encode_video(t, f)?;
        let s = t.cosine_rows(z, z_au)?;
        let p = vars.classify(t, s)?;
        t.entropy(p)
    };
    Ok(Instance::new(params, build))
}

/// The test-time objective: entropy as a function of the adapted prompt rows.
fn entropy_prompts_instance(rng: &mut ChaCha8Rng, kind: ClassifierKind) -> Result<Instance> {
    let case = pipeline_case(rng, kind, 1)?;
    let z_au = adapt_prompt_embeddings(&case.raw, case.params.adapter())?;
    let z_v = encode_video(&case.videos[0].0, case.params.temporal())?;
    let classifier = case.params.classifier().clone();
    let build = move |t: &mut Tape, v: &[Var]| -> Result<Var> {
        let z = t.constant(z_v.clone());
        let s = t.cosine_rows(z, v[0])?;
        let logits = match &classifier {
            Classifier::Linear(h) => {
                let m = t.constant(h.weights().clone());
                let b = t.constant(h.bias().clone());
                t.matvec(m, s, b)?
            }
            Classifier::Mlp(h) => {
                let (w1, b1) = (t.constant(h.w1.clone()), t.constant(h.b1.clone()));
                let (w2, b2) = (t.constant(h.w2.clone()), t.constant(h.b2.clone()));
                let a = t.affine(s, w1, b1)?;
                let a = match h.activation {
                    Activation::Relu => t.relu(a),
                    Activation::Identity => a,
                };
                t.affine(a, w2, b2)?
            }
        };
        let p = t.softmax(logits)?;
        t.entropy(p)
    };
    Ok(Instance::new(vec![z_au], build))
}

fn run_check(
    name: &str,
    cfg: &GradcheckConfig,
    fault: Option<OpKind>,
    rng: &mut ChaCha8Rng,
    mut gen: impl FnMut(&mut ChaCha8Rng) -> Result<Instance>,
) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for _ in 0..cfg.instances {
        let inst = gen(rng)?;
        worst = worst.max(inst.error(fault, cfg.step)?);
    }
    Ok(CheckResult {
        name: name.to_string(),
        instances: cfg.instances,
        max_rel_error: worst,
        passed: worst <= cfg.tolerance,
    })
}

/// Run every check. `fault` corrupts one primitive's backward rule on the
/// analytic side only.
pub fn run_gradcheck(cfg: &GradcheckConfig, fault: Option<OpKind>) -> Result<GradcheckReport> {
    let mut checks = Vec::new();
    for (i, (name, gen)) in primitive_generators().into_iter().enumerate() {
        let mut rng = rng::stream(cfg.seed.wrapping_add(i as u64 * 7919), Stream::GradCheck);
        checks.push(run_check(name, cfg, fault, &mut rng, |r| Ok(gen(r)))?);
    }
    type PipelineGen = fn(&mut ChaCha8Rng, ClassifierKind) -> Result<Instance>;
    let pipeline: [(&str, PipelineGen, ClassifierKind); 5] = [
        ("supervised_loss/mlp", supervised_instance, ClassifierKind::Mlp),
        (
            "supervised_loss/linear-head",
            supervised_instance,
            ClassifierKind::LinearHead,
        ),
        (
            "entropy_loss/all-parameters",
            entropy_full_instance,
            ClassifierKind::Mlp,
        ),
        (
            "entropy_loss/prompts/mlp",
            entropy_prompts_instance,
            ClassifierKind::Mlp,
        ),
        (
            "entropy_loss/prompts/linear-head",
            entropy_prompts_instance,
            ClassifierKind::LinearHead,
        ),
    ];
    for (i, (name, gen, kind)) in pipeline.into_iter().enumerate() {
        let mut rng = rng::stream(cfg.seed.wrapping_add(1_000_003 + i as u64), Stream::GradCheck);
        checks.push(run_check(name, cfg, fault, &mut rng, |r| gen(r, kind))?);
    }
    Ok(GradcheckReport {
        config: *cfg,
        fault: fault.map(|k| k.name().to_string()),
        checks,
    })
}
