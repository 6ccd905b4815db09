//! Trainable parameters and the forward pipeline: temporal encoder, AU
//! adapter, AU-video similarity and the emotion classifier.

mod checkpoint;
mod forward;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{config_err, shape_err, Result};
use crate::rng::{self, Stream};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, Checkpoint};
pub use forward::{
    adapt_prompt_embeddings, au_similarity, classifier_logits, classify, encode_video, forward_full, register,
    ClassifierVars, ParamVars,
};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassifierKind {
    #[default]
    Mlp,
    LinearHead,
}

impl std::str::FromStr for ClassifierKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mlp" => Ok(Self::Mlp),
            "linear-head" => Ok(Self::LinearHead),
            other => Err(format!(
                "unknown classifier kind {other:?} (expected mlp | linear-head)"
            )),
        }
    }
}

/// Shape and architecture choices shared by every parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Embedding dimension `d` shared by frames and prompts.
    pub dim: usize,
    /// Prompt count `N`; the classifier's input width.
    pub n_prompts: usize,
    pub n_classes: usize,
    /// Temporal kernel width `k`. `k = 1` is a per-frame linear layer.
    pub kernel_width: usize,
    pub adapter_hidden: usize,
    pub adapter_activation: Activation,
    pub classifier: ClassifierKind,
    pub classifier_hidden: usize,
    pub classifier_activation: Activation,
}

impl ModelConfig {
    pub fn new(dim: usize, n_prompts: usize, n_classes: usize) -> Self {
        Self {
            dim,
            n_prompts,
            n_classes,
            kernel_width: 3,
            adapter_hidden: dim,
            adapter_activation: Activation::Relu,
            classifier: ClassifierKind::Mlp,
            classifier_hidden: 64,
            classifier_activation: Activation::Relu,
        }
    }

    pub fn with_classifier(mut self, kind: ClassifierKind) -> Self {
        self.classifier = kind;
        self
    }

    /// Canonical form: a linear head has no hidden layer or activation.
    pub fn normalized(mut self) -> Self {
        if self.classifier == ClassifierKind::LinearHead {
            self.classifier_hidden = 0;
            self.classifier_activation = Activation::Identity;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.n_prompts == 0 || self.adapter_hidden == 0 {
            return Err(config_err!("dimensions must be positive: {self:?}"));
        }
        if self.n_classes < 2 {
            return Err(config_err!("need at least 2 classes, got {}", self.n_classes));
        }
        if self.kernel_width.is_multiple_of(2) {
            return Err(config_err!("kernel width must be odd, got {}", self.kernel_width));
        }
        if self.classifier == ClassifierKind::Mlp && self.classifier_hidden == 0 {
            return Err(config_err!("classifier hidden width must be positive"));
        }
        Ok(())
    }
}

/// Two-layer map `d → d_h → d` applied to each prompt embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub(crate) w1: Tensor,
    pub(crate) b1: Tensor,
    pub(crate) w2: Tensor,
    pub(crate) b2: Tensor,
    pub(crate) activation: Activation,
}

impl AdapterParams {
    pub fn new(w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor, activation: Activation) -> Result<Self> {
        if w1.rank() != 2 {
            return Err(shape_err!("adapter w1 must be a matrix, got {:?}", w1.shape()));
        }
        let (d, h) = (w1.rows(), w1.cols());
        b1.expect_shape(&[h], "adapter b1")?;
        w2.expect_shape(&[h, d], "adapter w2")?;
        b2.expect_shape(&[d], "adapter b2")?;
        Ok(Self {
            w1,
            b1,
            w2,
            b2,
            activation,
        })
    }

    /// Adapter that returns its input unchanged.
    pub fn identity(dim: usize) -> Self {
        let eye = identity_matrix(dim);
        Self {
            w1: eye.clone(),
            b1: Tensor::zeros(&[dim]),
            w2: eye,
            b2: Tensor::zeros(&[dim]),
            activation: Activation::Identity,
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }
}

/// Temporal convolution producing `2d` channels, which the GLU halves back to `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalParams {
    pub(crate) kernel: Tensor,
    pub(crate) bias: Tensor,
}

impl TemporalParams {
    pub fn new(kernel: Tensor, bias: Tensor) -> Result<Self> {
        if kernel.rank() != 3 {
            return Err(shape_err!("temporal kernel must be k×d×2d, got {:?}", kernel.shape()));
        }
        let (k, d, out) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
        if k % 2 == 0 {
            return Err(config_err!("temporal kernel width must be odd, got {k}"));
        }
        if out != 2 * d {
            return Err(shape_err!("temporal kernel must emit 2·{d} channels, got {out}"));
        }
        bias.expect_shape(&[out], "temporal bias")?;
        Ok(Self { kernel, bias })
    }

    pub fn dim(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn kernel_width(&self) -> usize {
        self.kernel.shape()[0]
    }
}

/// `N → h → C` perceptron over the similarity vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpHead {
    pub(crate) w1: Tensor,
    pub(crate) b1: Tensor,
    pub(crate) w2: Tensor,
    pub(crate) b2: Tensor,
    pub(crate) activation: Activation,
}

impl MlpHead {
    pub fn new(w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor, activation: Activation) -> Result<Self> {
        if w1.rank() != 2 || w2.rank() != 2 {
            return Err(shape_err!("classifier weights must be matrices"));
        }
        let (h, c) = (w1.cols(), w2.cols());
        b1.expect_shape(&[h], "classifier b1")?;
        w2.expect_shape(&[h, c], "classifier w2")?;
        b2.expect_shape(&[c], "classifier b2")?;
        Ok(Self {
            w1,
            b1,
            w2,
            b2,
            activation,
        })
    }
}

/// Linear classifier `logits = M s + b`; row `c` of `M` holds per-AU weights toward class `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub(crate) weights: Tensor,
    pub(crate) bias: Tensor,
}

impl LinearHead {
    pub fn new(weights: Tensor, bias: Tensor) -> Result<Self> {
        if weights.rank() != 2 {
            return Err(shape_err!("linear head must be C×N, got {:?}", weights.shape()));
        }
        bias.expect_shape(&[weights.rows()], "linear head bias")?;
        Ok(Self { weights, bias })
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Classifier {
    Mlp(MlpHead),
    Linear(LinearHead),
}

impl Classifier {
    pub fn input_width(&self) -> usize {
        match self {
            Classifier::Mlp(h) => h.w1.rows(),
            Classifier::Linear(h) => h.weights.cols(),
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            Classifier::Mlp(h) => h.w2.cols(),
            Classifier::Linear(h) => h.weights.rows(),
        }
    }

    pub fn kind(&self) -> ClassifierKind {
        match self {
            Classifier::Mlp(_) => ClassifierKind::Mlp,
            Classifier::Linear(_) => ClassifierKind::LinearHead,
        }
    }

    fn tensors(&self) -> Vec<&Tensor> {
        match self {
            Classifier::Mlp(h) => vec![&h.w1, &h.b1, &h.w2, &h.b2],
            Classifier::Linear(h) => vec![&h.weights, &h.bias],
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Classifier::Mlp(h) => vec![&mut h.w1, &mut h.b1, &mut h.w2, &mut h.b2],
            Classifier::Linear(h) => vec![&mut h.weights, &mut h.bias],
        }
    }

    fn names(&self) -> &'static [&'static str] {
        match self {
            Classifier::Mlp(_) => &["classifier.w1", "classifier.b1", "classifier.w2", "classifier.b2"],
            Classifier::Linear(_) => &["classifier.weights", "classifier.bias"],
        }
    }
}

/// Every trainable parameter of the model. Dimensions are checked once, here.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    adapter: AdapterParams,
    temporal: TemporalParams,
    classifier: Classifier,
}

const ADAPTER_NAMES: [&str; 4] = ["adapter.w1", "adapter.b1", "adapter.w2", "adapter.b2"];
const TEMPORAL_NAMES: [&str; 2] = ["temporal.kernel", "temporal.bias"];

impl ModelParams {
    pub fn new(adapter: AdapterParams, temporal: TemporalParams, classifier: Classifier) -> Result<Self> {
        let d = adapter.dim();
        if temporal.dim() != d {
            return Err(shape_err!(
                "temporal encoder works in dimension {}, adapter in {d}",
                temporal.dim()
            ));
        }
        let (classifier_hidden, classifier_activation) = match &classifier {
            Classifier::Mlp(h) => (h.w1.cols(), h.activation),
            Classifier::Linear(_) => (0, Activation::Identity),
        };
        let config = ModelConfig {
            dim: d,
            n_prompts: classifier.input_width(),
            n_classes: classifier.n_classes(),
            kernel_width: temporal.kernel_width(),
            adapter_hidden: adapter.w1.cols(),
            adapter_activation: adapter.activation,
            classifier: classifier.kind(),
            classifier_hidden,
            classifier_activation,
        };
        if config.n_classes < 2 {
            return Err(shape_err!("classifier must emit at least 2 classes"));
        }
        Ok(Self {
            config,
            adapter,
            temporal,
            classifier,
        })
    }

    /// Uniform fan-in initialization, `U(−1/√fan_in, 1/√fan_in)`, from the
    /// `Init` stream of `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let config = config.normalized();
        let mut rng = rng::stream(seed, Stream::Init);
        let mut uniform = |shape: &[usize], fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            Tensor::from_parts(shape.to_vec(), data)
        };
        let (d, h, n, c, k) = (
            config.dim,
            config.adapter_hidden,
            config.n_prompts,
            config.n_classes,
            config.kernel_width,
        );
        let adapter = AdapterParams {
            w1: uniform(&[d, h], d),
            b1: uniform(&[h], d),
            w2: uniform(&[h, d], h),
            b2: uniform(&[d], h),
            activation: config.adapter_activation,
        };
        let temporal = TemporalParams {
            kernel: uniform(&[k, d, 2 * d], k * d),
            bias: uniform(&[2 * d], k * d),
        };
        let classifier = match config.classifier {
            ClassifierKind::Mlp => {
                let hc = config.classifier_hidden;
                Classifier::Mlp(MlpHead {
                    w1: uniform(&[n, hc], n),
                    b1: uniform(&[hc], n),
                    w2: uniform(&[hc, c], hc),
                    b2: uniform(&[c], hc),
                    activation: config.classifier_activation,
                })
            }
            ClassifierKind::LinearHead => Classifier::Linear(LinearHead {
                weights: uniform(&[c, n], n),
                bias: uniform(&[c], n),
            }),
        };
        let params = Self::new(adapter, temporal, classifier)?;
        debug_assert_eq!(params.config, config);
        Ok(params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn n_prompts(&self) -> usize {
        self.config.n_prompts
    }

    pub fn n_classes(&self) -> usize {
        self.config.n_classes
    }

    pub fn adapter(&self) -> &AdapterParams {
        &self.adapter
    }

    pub fn temporal(&self) -> &TemporalParams {
        &self.temporal
    }

    pub fn classifier(&self) -> &Classifier {
        &self.classifier
    }

    /// Parameter tensors in a fixed order: adapter, temporal, classifier.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![
            &self.adapter.w1,
            &self.adapter.b1,
            &self.adapter.w2,
            &self.adapter.b2,
            &self.temporal.kernel,
            &self.temporal.bias,
        ];
        out.extend(self.classifier.tensors());
        out
    }

    /// Mutable view in the order of [`tensors`](Self::tensors). Shapes cannot change through it.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.adapter.w1,
            &mut self.adapter.b1,
            &mut self.adapter.w2,
            &mut self.adapter.b2,
            &mut self.temporal.kernel,
            &mut self.temporal.bias,
        ];
        out.extend(self.classifier.tensors_mut());
        out
    }

    pub fn tensor_names(&self) -> Vec<&'static str> {
        let mut out = ADAPTER_NAMES.to_vec();
        out.extend(TEMPORAL_NAMES);
        out.extend(self.classifier.names());
        out
    }

    pub fn bit_eq(&self, other: &ModelParams) -> bool {
        self.config == other.config && self.tensors().iter().zip(other.tensors()).all(|(a, b)| a.bit_eq(b))
    }

    /// Rebuild from tensors in [`tensors`](Self::tensors) order.
    pub(crate) fn from_tensors(config: &ModelConfig, mut ts: Vec<Tensor>) -> Result<Self> {
        let expected = 6 + match config.classifier {
            ClassifierKind::Mlp => 4,
            ClassifierKind::LinearHead => 2,
        };
        if ts.len() != expected {
            return Err(shape_err!("expected {expected} parameter tensors, got {}", ts.len()));
        }
        let mut take = || ts.remove(0);
        let adapter = AdapterParams::new(take(), take(), take(), take(), config.adapter_activation)?;
        let temporal = TemporalParams::new(take(), take())?;
        let classifier = match config.classifier {
            ClassifierKind::Mlp => Classifier::Mlp(MlpHead::new(
                take(),
                take(),
                take(),
                take(),
                config.classifier_activation,
            )?),
            ClassifierKind::LinearHead => Classifier::Linear(LinearHead::new(take(), take())?),
        };
        let params = Self::new(adapter, temporal, classifier)?;
        if params.config != config.normalized() {
            return Err(shape_err!(
                "tensor shapes imply {:?}, header declares {config:?}",
                params.config
            ));
        }
        Ok(params)
    }

    /// Same architecture with the classifier's weights and biases zeroed.
    pub fn with_zero_classifier(&self) -> Self {
        let mut out = self.clone();
        for t in out.classifier.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        out
    }
}

pub(crate) fn identity_matrix(n: usize) -> Tensor {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        data[i * n + i] = 1.0;
    }
    Tensor::from_parts(vec![n, n], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_bounded() {
        let cfg = ModelConfig::new(8, 5, 2);
        let a = ModelParams::init(cfg, 11).unwrap();
        let b = ModelParams::init(cfg, 11).unwrap();
        let c = ModelParams::init(cfg, 12).unwrap();
        assert!(a.bit_eq(&b));
        assert!(!a.bit_eq(&c));
        let bound = 1.0 / (3.0 * 8.0f64).sqrt();
        assert!(a.temporal().kernel.data().iter().all(|v| v.abs() <= bound));
        assert_eq!(a.tensor_names().len(), a.tensors().len());
    }

    #[test]
    fn mismatched_groups_fail_at_construction() {
        let adapter = AdapterParams::identity(4);
        let temporal = TemporalParams::new(Tensor::zeros(&[3, 5, 10]), Tensor::zeros(&[10])).unwrap();
        let head = LinearHead::new(Tensor::zeros(&[2, 3]), Tensor::zeros(&[2])).unwrap();
        let err = ModelParams::new(adapter, temporal, Classifier::Linear(head)).unwrap_err();
        assert!(matches!(err, crate::Error::Shape(_)));
    }

    #[test]
    fn temporal_must_double_channels() {
        let err = TemporalParams::new(Tensor::zeros(&[3, 4, 4]), Tensor::zeros(&[4])).unwrap_err();
        assert!(matches!(err, crate::Error::Shape(_)));
        let err = TemporalParams::new(Tensor::zeros(&[2, 4, 8]), Tensor::zeros(&[8])).unwrap_err();
        assert!(matches!(err, crate::Error::Config(_)));
    }

    #[test]
    fn config_rejects_single_class() {
        assert!(ModelParams::init(ModelConfig::new(4, 3, 1), 0).is_err());
    }

    #[test]
    fn tensors_round_trip_through_from_tensors() {
        for kind in [ClassifierKind::Mlp, ClassifierKind::LinearHead] {
            let p = ModelParams::init(ModelConfig::new(6, 4, 3).with_classifier(kind), 5).unwrap();
            let ts = p.tensors().into_iter().cloned().collect();
            let q = ModelParams::from_tensors(p.config(), ts).unwrap();
            assert!(p.bit_eq(&q));
        }
    }
}
