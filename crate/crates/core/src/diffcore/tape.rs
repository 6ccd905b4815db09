//! Reverse-mode differentiation over a linear tape.
//!
//! Every primitive application appends a node holding its output value and
//! the ids of its inputs. Node values double as the saved activations the
//! backward pass needs. Nodes are appended in evaluation order, so the tape
//! is always topologically sorted and `backward` walks it once in reverse.

use super::ops;
use super::tensor::Tensor;
use crate::error::{shape_err, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive kinds recorded on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Affine,
    MatVec,
    Relu,
    Conv1d,
    Glu,
    MeanPool,
    Cosine,
    CosineRows,
    Softmax,
    CrossEntropy,
    Entropy,
    Dot,
    Add,
    Mean,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Affine => "affine",
            OpKind::MatVec => "matvec",
            OpKind::Relu => "relu",
            OpKind::Conv1d => "conv1d_temporal",
            OpKind::Glu => "glu",
            OpKind::MeanPool => "mean_pool",
            OpKind::Cosine => "cosine_sim",
            OpKind::CosineRows => "cosine_rows",
            OpKind::Softmax => "softmax",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::Entropy => "entropy",
            OpKind::Dot => "dot",
            OpKind::Add => "add",
            OpKind::Mean => "mean",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        ALL_KINDS.iter().copied().find(|k| k.name() == name)
    }
}

pub const ALL_KINDS: [OpKind; 15] = [
    OpKind::Leaf,
    OpKind::Affine,
    OpKind::MatVec,
    OpKind::Relu,
    OpKind::Conv1d,
    OpKind::Glu,
    OpKind::MeanPool,
    OpKind::Cosine,
    OpKind::CosineRows,
    OpKind::Softmax,
    OpKind::CrossEntropy,
    OpKind::Entropy,
    OpKind::Dot,
    OpKind::Add,
    OpKind::Mean,
];

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    MatVec { m: Var, x: Var, b: Var },
    Relu(Var),
    Conv1d { frames: Var, kernel: Var, bias: Var },
    Glu(Var),
    MeanPool(Var),
    Cosine { a: Var, b: Var },
    CosineRows { z: Var, rows: Var },
    Softmax(Var),
    CrossEntropy { p: Var, label: usize },
    Entropy(Var),
    Dot { a: Var, b: Var },
    Add { a: Var, b: Var },
    Mean(Vec<Var>),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Affine { .. } => OpKind::Affine,
            Op::MatVec { .. } => OpKind::MatVec,
            Op::Relu(_) => OpKind::Relu,
            Op::Conv1d { .. } => OpKind::Conv1d,
            Op::Glu(_) => OpKind::Glu,
            Op::MeanPool(_) => OpKind::MeanPool,
            Op::Cosine { .. } => OpKind::Cosine,
            Op::CosineRows { .. } => OpKind::CosineRows,
            Op::Softmax(_) => OpKind::Softmax,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Entropy(_) => OpKind::Entropy,
            Op::Dot { .. } => OpKind::Dot,
            Op::Add { .. } => OpKind::Add,
            Op::Mean(_) => OpKind::Mean,
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` does not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Corrupt the backward rule of one primitive kind. Used to prove that
    /// the gradient checks catch a broken derivative.
    pub fn with_fault(kind: OpKind) -> Self {
        Self {
            nodes: Vec::new(),
            fault: Some(kind),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, requires_grad)
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = ops::affine(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(out, Op::Affine { x, w, b }, &[x, w, b]))
    }

    pub fn matvec(&mut self, m: Var, x: Var, b: Var) -> Result<Var> {
        let out = ops::matvec(self.value(m), self.value(x), self.value(b))?;
        Ok(self.push(out, Op::MatVec { m, x, b }, &[m, x, b]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn conv1d(&mut self, frames: Var, kernel: Var, bias: Var) -> Result<Var> {
        let out = ops::conv1d_temporal(self.value(frames), self.value(kernel), self.value(bias))?;
        Ok(self.push(out, Op::Conv1d { frames, kernel, bias }, &[frames, kernel, bias]))
    }

    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let out = ops::glu(self.value(x))?;
        Ok(self.push(out, Op::Glu(x), &[x]))
    }

    pub fn mean_pool(&mut self, x: Var) -> Result<Var> {
        let out = ops::mean_pool(self.value(x))?;
        Ok(self.push(out, Op::MeanPool(x), &[x]))
    }

    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let c = ops::cosine_sim(self.value(a).data(), self.value(b).data())?;
        Ok(self.push(Tensor::from_parts(vec![1], vec![c]), Op::Cosine { a, b }, &[a, b]))
    }

    pub fn cosine_rows(&mut self, z: Var, rows: Var) -> Result<Var> {
        let out = ops::cosine_rows(self.value(z), self.value(rows))?;
        Ok(self.push(out, Op::CosineRows { z, rows }, &[z, rows]))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = ops::softmax(self.value(x))?;
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    pub fn cross_entropy(&mut self, p: Var, label: usize) -> Result<Var> {
        let l = ops::cross_entropy(self.value(p), label)?;
        Ok(self.push(
            Tensor::from_parts(vec![1], vec![l]),
            Op::CrossEntropy { p, label },
            &[p],
        ))
    }

    pub fn entropy(&mut self, p: Var) -> Result<Var> {
        let h = ops::entropy(self.value(p))?;
        Ok(self.push(Tensor::from_parts(vec![1], vec![h]), Op::Entropy(p), &[p]))
    }

    /// Inner product of two equally shaped tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err!("dot of {:?} and {:?}", ta.shape(), tb.shape()));
        }
        let v = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        Ok(self.push(Tensor::from_parts(vec![1], vec![v]), Op::Dot { a, b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err!("add of {:?} and {:?}", ta.shape(), tb.shape()));
        }
        let mut out = ta.clone();
        out.add_assign(tb);
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    /// Mean of scalar nodes.
    pub fn mean(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(shape_err!("mean of zero terms"));
        }
        if let Some(x) = xs.iter().find(|x| !self.value(**x).is_scalar()) {
            return Err(shape_err!("mean expects scalars, got {:?}", self.value(*x).shape()));
        }
        let v = xs.iter().map(|x| self.value(*x).item()).sum::<f64>() / xs.len() as f64;
        Ok(self.push(Tensor::from_parts(vec![1], vec![v]), Op::Mean(xs.to_vec()), xs))
    }

    /// Accumulate gradients of the scalar `loss` into every node that can reach it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(shape_err!("backward from non-scalar node of shape {:?}", lv.shape()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::from_parts(lv.shape().to_vec(), vec![1.0]));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let contributions = self.vjp(node, &g);
            grads[idx] = Some(g);
            for (input, mut contrib) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                if self.fault == Some(node.op.kind()) {
                    corrupt(&mut contrib);
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot => *slot = Some(contrib),
                }
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn vjp(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Affine { x, w, b } => {
                let (gx, gw, gb) = ops::affine_vjp(self.value(*x), self.value(*w), g, self.wants(*x));
                let mut out = vec![(*w, gw), (*b, gb)];
                out.extend(gx.map(|gx| (*x, gx)));
                out
            }
            Op::MatVec { m, x, b } => {
                let (gm, gx, gb) = ops::matvec_vjp(self.value(*m), self.value(*x), g);
                vec![(*m, gm), (*x, gx), (*b, gb)]
            }
            Op::Relu(x) => vec![(*x, ops::relu_vjp(self.value(*x), g))],
            Op::Conv1d { frames, kernel, bias } => {
                let (gf, gk, gb) =
                    ops::conv1d_temporal_vjp(self.value(*frames), self.value(*kernel), g, self.wants(*frames));
                let mut out = vec![(*kernel, gk), (*bias, gb)];
                out.extend(gf.map(|gf| (*frames, gf)));
                out
            }
            Op::Glu(x) => vec![(*x, ops::glu_vjp(self.value(*x), g))],
            Op::MeanPool(x) => vec![(*x, ops::mean_pool_vjp(self.value(*x), g))],
            Op::Cosine { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (ga, gb) = ops::cosine_sim_vjp(ta.data(), tb.data(), g.item());
                vec![
                    (*a, Tensor::from_parts(ta.shape().to_vec(), ga)),
                    (*b, Tensor::from_parts(tb.shape().to_vec(), gb)),
                ]
            }
            Op::CosineRows { z, rows } => {
                let (gz, gm) = ops::cosine_rows_vjp(self.value(*z), self.value(*rows), g);
                vec![(*z, gz), (*rows, gm)]
            }
            Op::Softmax(x) => vec![(*x, ops::softmax_vjp(&node.value, g))],
            Op::CrossEntropy { p, label } => {
                vec![(*p, ops::cross_entropy_vjp(self.value(*p), *label, g.item()))]
            }
            Op::Entropy(p) => vec![(*p, ops::entropy_vjp(self.value(*p), g.item()))],
            Op::Dot { a, b } => {
                let s = g.item();
                vec![(*a, self.value(*b).map(|v| v * s)), (*b, self.value(*a).map(|v| v * s))]
            }
            Op::Add { a, b } => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Mean(xs) => {
                let share = g.item() / xs.len() as f64;
                xs.iter()
                    .map(|x| (*x, Tensor::from_parts(vec![1], vec![share])))
                    .collect()
            }
        }
    }
}

fn corrupt(t: &mut Tensor) {
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        *v = *v * 1.5 + if i == 0 { 0.1 } else { 0.0 };
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_loss_gradient_is_input() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![0.3, -1.2, 2.0]).unwrap());
        let x = tape.constant(Tensor::vector(vec![4.0, 5.0, -6.0]).unwrap());
        let loss = tape.dot(w, x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).data(), &[4.0, 5.0, -6.0]);
    }

    #[test]
    fn unreachable_param_gets_zero_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let unused = tape.param(Tensor::matrix(2, 2, vec![1.0; 4]).unwrap());
        let loss = tape.dot(w, w).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(!grads.reached(unused));
        assert_eq!(grads.get(unused), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn backward_from_vector_is_shape_error() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let r = tape.relu(w);
        assert!(matches!(tape.backward(r), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn gradient_of_sum_is_sum_of_gradients() {
        let build = |tape: &mut Tape, which: u8| {
            let w = tape.param(Tensor::vector(vec![0.4, -0.7, 1.1]).unwrap());
            let x = tape.constant(Tensor::vector(vec![1.0, 2.0, 0.5]).unwrap());
            let a = tape.dot(w, x).unwrap();
            let b = tape.cosine(w, x).unwrap();
            let loss = match which {
                0 => a,
                1 => b,
                _ => tape.add(a, b).unwrap(),
            };
            (w, loss)
        };
        let grad = |which| {
            let mut tape = Tape::new();
            let (w, loss) = build(&mut tape, which);
            tape.backward(loss).unwrap().get(w)
        };
        let (ga, gb, gs) = (grad(0), grad(1), grad(2));
        for i in 0..3 {
            assert!((ga.data()[i] + gb.data()[i] - gs.data()[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn op_names_round_trip() {
        for k in ALL_KINDS {
            assert_eq!(OpKind::from_name(k.name()), Some(k));
        }
    }
}
