use super::{Activation, AdapterParams, Classifier, ModelParams, TemporalParams};
use crate::diffcore::{ops, Tape, Tensor, Var};
use crate::error::{shape_err, Result};

/// `z_v = mean_pool(glu(conv1d(frames)))`.
pub fn encode_video(frames: &Tensor, temporal: &TemporalParams) -> Result<Tensor> {
    check_frames(frames, temporal.dim())?;
    let conv = ops::conv1d_temporal(frames, &temporal.kernel, &temporal.bias)?;
    ops::mean_pool(&ops::glu(&conv)?)
}

fn check_frames(frames: &Tensor, dim: usize) -> Result<()> {
    if frames.rank() != 2 || frames.cols() != dim {
        return Err(shape_err!(
            "frames of shape {:?} do not match embedding dimension {dim}",
            frames.shape()
        ));
    }
    Ok(())
}

fn activate(x: Tensor, act: Activation) -> Tensor {
    match act {
        Activation::Relu => ops::relu(&x),
        Activation::Identity => x,
    }
}

/// Row-wise two-layer adapter over the raw prompt matrix.
pub fn adapt_prompt_embeddings(raw: &Tensor, adapter: &AdapterParams) -> Result<Tensor> {
    if raw.rank() != 2 || raw.cols() != adapter.dim() {
        return Err(shape_err!(
            "prompt matrix {:?} does not match adapter dimension {}",
            raw.shape(),
            adapter.dim()
        ));
    }
    let hidden = activate(ops::affine(raw, &adapter.w1, &adapter.b1)?, adapter.activation);
    ops::affine(&hidden, &adapter.w2, &adapter.b2)
}

/// Cosine similarity of the video embedding against each adapted prompt.
pub fn au_similarity(z_v: &Tensor, prompts: &Tensor) -> Result<Tensor> {
    ops::cosine_rows(z_v, prompts)
}

pub fn classifier_logits(s: &Tensor, classifier: &Classifier) -> Result<Tensor> {
    if s.rank() != 1 || s.len() != classifier.input_width() {
        return Err(shape_err!(
            "similarity vector {:?} does not match classifier width {}",
            s.shape(),
            classifier.input_width()
        ));
    }
    match classifier {
        Classifier::Mlp(h) => {
            let hidden = activate(ops::affine(s, &h.w1, &h.b1)?, h.activation);
            ops::affine(&hidden, &h.w2, &h.b2)
        }
        Classifier::Linear(h) => ops::matvec(&h.weights, s, &h.bias),
    }
}

/// Class probabilities for a similarity vector.
pub fn classify(s: &Tensor, classifier: &Classifier) -> Result<Tensor> {
    ops::softmax(&classifier_logits(s, classifier)?)
}

/// Whole pipeline on one video: returns `(similarities, probabilities)`.
pub fn forward_full(frames: &Tensor, raw_prompts: &Tensor, params: &ModelParams) -> Result<(Tensor, Tensor)> {
    let z_v = encode_video(frames, params.temporal())?;
    let z_au = adapt_prompt_embeddings(raw_prompts, params.adapter())?;
    let s = au_similarity(&z_v, &z_au)?;
    let p = classify(&s, params.classifier())?;
    Ok((s, p))
}

#[derive(Debug, Clone, Copy)]
pub enum ClassifierVars {
    Mlp([Var; 4], Activation),
    Linear([Var; 2]),
}

/// Tape handles for every parameter tensor, in [`ModelParams::tensors`] order.
#[derive(Debug, Clone, Copy)]
pub struct ParamVars {
    pub adapter: [Var; 4],
    pub adapter_activation: Activation,
    pub temporal: [Var; 2],
    pub classifier: ClassifierVars,
}

/// Record the parameters on `tape`, as trainable leaves or as constants.
pub fn register(tape: &mut Tape, params: &ModelParams, trainable: bool) -> ParamVars {
    let mut leaf = |t: &Tensor| {
        if trainable {
            tape.param(t.clone())
        } else {
            tape.constant(t.clone())
        }
    };
    let a = params.adapter();
    let adapter = [leaf(&a.w1), leaf(&a.b1), leaf(&a.w2), leaf(&a.b2)];
    let t = params.temporal();
    let temporal = [leaf(&t.kernel), leaf(&t.bias)];
    let classifier = match params.classifier() {
        Classifier::Mlp(h) => ClassifierVars::Mlp([leaf(&h.w1), leaf(&h.b1), leaf(&h.w2), leaf(&h.b2)], h.activation),
        Classifier::Linear(h) => ClassifierVars::Linear([leaf(&h.weights), leaf(&h.bias)]),
    };
    ParamVars {
        adapter,
        adapter_activation: a.activation,
        temporal,
        classifier,
    }
}

fn activate_var(tape: &mut Tape, x: Var, act: Activation) -> Var {
    match act {
        Activation::Relu => tape.relu(x),
        Activation::Identity => x,
    }
}

impl ParamVars {
    pub fn all(&self) -> Vec<Var> {
        let mut out = self.adapter.to_vec();
        out.extend(self.temporal);
        match self.classifier {
            ClassifierVars::Mlp(v, _) => out.extend(v),
            ClassifierVars::Linear(v) => out.extend(v),
        }
        out
    }

    pub fn encode_video(&self, tape: &mut Tape, frames: Var) -> Result<Var> {
        let dim = tape.value(self.temporal[0]).shape()[1];
        check_frames(tape.value(frames), dim)?;
        let conv = tape.conv1d(frames, self.temporal[0], self.temporal[1])?;
        let gated = tape.glu(conv)?;
        tape.mean_pool(gated)
    }

    pub fn adapt_prompts(&self, tape: &mut Tape, raw: Var) -> Result<Var> {
        let [w1, b1, w2, b2] = self.adapter;
        let h = tape.affine(raw, w1, b1)?;
        let h = activate_var(tape, h, self.adapter_activation);
        tape.affine(h, w2, b2)
    }

    pub fn logits(&self, tape: &mut Tape, s: Var) -> Result<Var> {
        match self.classifier {
            ClassifierVars::Mlp([w1, b1, w2, b2], act) => {
                let h = tape.affine(s, w1, b1)?;
                let h = activate_var(tape, h, act);
                tape.affine(h, w2, b2)
            }
            ClassifierVars::Linear([m, b]) => tape.matvec(m, s, b),
        }
    }

    pub fn classify(&self, tape: &mut Tape, s: Var) -> Result<Var> {
        let logits = self.logits(tape, s)?;
        tape.softmax(logits)
    }
}

#[cfg(test)]
mod tests {
    use super::super::{LinearHead, MlpHead, ModelConfig, TemporalParams};
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn zero_kernel_encodes_to_glu_of_bias() {
        let d = 3;
        let bias = t(&[6], vec![0.5, -1.0, 2.0, 0.0, 1.0, -3.0]);
        let temporal = TemporalParams::new(Tensor::zeros(&[3, d, 2 * d]), bias.clone()).unwrap();
        let frames = t(&[4, 3], (0..12).map(|i| i as f64 * 0.1 - 0.4).collect());
        let z = encode_video(&frames, &temporal).unwrap();
        let expect = ops::glu(&bias).unwrap();
        for (a, b) in z.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn single_frame_video_is_finite() {
        let p = ModelParams::init(ModelConfig::new(4, 3, 2), 1).unwrap();
        let frames = t(&[1, 4], vec![0.3, -0.2, 0.9, 0.1]);
        let z = encode_video(&frames, p.temporal()).unwrap();
        assert_eq!(z.shape(), &[4]);
        assert!(z.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn frames_with_wrong_width_are_rejected() {
        let p = ModelParams::init(ModelConfig::new(4, 3, 2), 1).unwrap();
        let err = encode_video(&Tensor::zeros(&[5, 3]), p.temporal()).unwrap_err();
        assert!(matches!(err, crate::Error::Shape(_)));
    }

    #[test]
    fn identity_adapter_and_constant_adapter() {
        let raw = t(&[2, 3], vec![1.0, -2.0, 0.5, 0.0, 3.0, -1.0]);
        let out = adapt_prompt_embeddings(&raw, &AdapterParams::identity(3)).unwrap();
        assert_eq!(out, raw);

        let b2 = t(&[3], vec![0.1, 0.2, 0.3]);
        let zero = AdapterParams::new(
            Tensor::zeros(&[3, 3]),
            Tensor::zeros(&[3]),
            Tensor::zeros(&[3, 3]),
            b2.clone(),
            Activation::Relu,
        )
        .unwrap();
        let out = adapt_prompt_embeddings(&raw, &zero).unwrap();
        assert_eq!(out.row(0), b2.data());
        assert_eq!(out.row(1), b2.data());
    }

    #[test]
    fn similarity_parallel_and_orthonormal() {
        let rows = t(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        let s = au_similarity(&t(&[3], vec![0., 0., 2.]), &rows).unwrap();
        assert_eq!(s.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn zero_classifier_is_uniform_and_linear_head_picks_dominant() {
        let mlp = Classifier::Mlp(
            MlpHead::new(
                Tensor::zeros(&[2, 4]),
                Tensor::zeros(&[4]),
                Tensor::zeros(&[4, 3]),
                Tensor::zeros(&[3]),
                Activation::Relu,
            )
            .unwrap(),
        );
        let p = classify(&t(&[2], vec![0.3, -0.7]), &mlp).unwrap();
        for v in p.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let head = Classifier::Linear(LinearHead::new(t(&[2, 2], vec![1., 0., 0., 1.]), Tensor::zeros(&[2])).unwrap());
        let p = classify(&t(&[2], vec![5., 0.]), &head).unwrap();
        assert_eq!(p.argmax(), 0);
        assert!(classify(&t(&[3], vec![1., 2., 3.]), &head).is_err());
    }

    #[test]
    fn tape_and_plain_forward_agree_bitwise() {
        for kind in [
            super::super::ClassifierKind::Mlp,
            super::super::ClassifierKind::LinearHead,
        ] {
            let p = ModelParams::init(ModelConfig::new(5, 4, 2).with_classifier(kind), 3).unwrap();
            let frames = t(&[7, 5], (0..35).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect());
            let raw = t(&[4, 5], (0..20).map(|i| ((i * 13 % 7) as f64 - 3.0) / 4.0).collect());
            let (s, prob) = forward_full(&frames, &raw, &p).unwrap();

            let mut tape = Tape::new();
            let vars = register(&mut tape, &p, true);
            let f = tape.constant(frames);
            let r = tape.constant(raw);
            let z = vars.encode_video(&mut tape, f).unwrap();
            let zau = vars.adapt_prompts(&mut tape, r).unwrap();
            let sv = tape.cosine_rows(z, zau).unwrap();
            let pv = vars.classify(&mut tape, sv).unwrap();
            assert!(tape.value(sv).bit_eq(&s));
            assert!(tape.value(pv).bit_eq(&prob));
        }
    }
}
