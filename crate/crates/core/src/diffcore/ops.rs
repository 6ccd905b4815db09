//! Forward kernels and their vector-Jacobian products.
//!
//! The tape and the tape-free inference paths both call these functions, so
//! a value computed with or without gradient tracking is bitwise the same.

use super::tensor::Tensor;
use crate::error::{config_err, domain_err, shape_err, Error, Result};

/// Floor applied to probabilities before taking logarithms.
pub const LOG_CLAMP: f64 = 1e-12;

/// Tolerance on `sum(p) == 1` accepted by [`entropy`].
pub const PROB_SUM_TOL: f64 = 1e-9;

fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm_slice(a: &[f64]) -> f64 {
    dot_slices(a, a).sqrt()
}

// ---------------------------------------------------------------- cosine

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(shape_err!("cosine of lengths {} and {}", a.len(), b.len()));
    }
    let (na, nb) = (norm_slice(a), norm_slice(b));
    if na == 0.0 || nb == 0.0 {
        return Err(domain_err!("cosine similarity of a zero-norm vector"));
    }
    Ok((dot_slices(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Gradient of `cos(a, b)` with respect to `a`, scaled by `g`.
fn cosine_grad_into(a: &[f64], b: &[f64], g: f64, out: &mut [f64]) {
    let (na, nb) = (norm_slice(a), norm_slice(b));
    let cos = dot_slices(a, b) / (na * nb);
    let inv = 1.0 / (na * nb);
    let self_term = cos / (na * na);
    for ((o, &ai), &bi) in out.iter_mut().zip(a).zip(b) {
        *o += g * (bi * inv - self_term * ai);
    }
}

pub fn cosine_sim_vjp(a: &[f64], b: &[f64], g: f64) -> (Vec<f64>, Vec<f64>) {
    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; b.len()];
    cosine_grad_into(a, b, g, &mut ga);
    cosine_grad_into(b, a, g, &mut gb);
    (ga, gb)
}

/// Cosine similarity of `z` (length d) against every row of `rows` (N×d).
pub fn cosine_rows(z: &Tensor, rows: &Tensor) -> Result<Tensor> {
    if z.rank() != 1 || rows.rank() != 2 || rows.cols() != z.len() {
        return Err(shape_err!(
            "cosine_rows: vector {:?} against matrix {:?}",
            z.shape(),
            rows.shape()
        ));
    }
    if z.norm() == 0.0 {
        return Err(domain_err!("cosine_rows: query vector has zero norm"));
    }
    let mut out = Vec::with_capacity(rows.rows());
    for i in 0..rows.rows() {
        let r = rows.row(i);
        if norm_slice(r) == 0.0 {
            return Err(domain_err!("cosine_rows: row {i} has zero norm"));
        }
        out.push(cosine_sim(z.data(), r)?);
    }
    Ok(Tensor::from_parts(vec![out.len()], out))
}

pub fn cosine_rows_vjp(z: &Tensor, rows: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let d = z.len();
    let mut gz = vec![0.0; d];
    let mut gm = vec![0.0; rows.len()];
    for (i, &gi) in g.data().iter().enumerate() {
        if gi == 0.0 {
            continue;
        }
        let r = rows.row(i);
        cosine_grad_into(z.data(), r, gi, &mut gz);
        cosine_grad_into(r, z.data(), gi, &mut gm[i * d..(i + 1) * d]);
    }
    (
        Tensor::from_parts(z.shape().to_vec(), gz),
        Tensor::from_parts(rows.shape().to_vec(), gm),
    )
}

// ---------------------------------------------------------------- GLU

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gated linear unit over the trailing axis: split into halves `(a, b)` and
/// return `a * sigmoid(b)`.
pub fn glu(x: &Tensor) -> Result<Tensor> {
    let width = x.cols();
    if !width.is_multiple_of(2) {
        return Err(shape_err!("glu needs an even trailing extent, got {width}"));
    }
    let half = width / 2;
    let mut out = Vec::with_capacity(x.len() / 2);
    for chunk in x.data().chunks_exact(width) {
        let (a, b) = chunk.split_at(half);
        out.extend(a.iter().zip(b).map(|(&a, &b)| a * sigmoid(b)));
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = half;
    Ok(Tensor::from_parts(shape, out))
}

pub fn glu_vjp(x: &Tensor, g: &Tensor) -> Tensor {
    let width = x.cols();
    let half = width / 2;
    let mut gx = vec![0.0; x.len()];
    for ((chunk, gchunk), gout) in x
        .data()
        .chunks_exact(width)
        .zip(gx.chunks_exact_mut(width))
        .zip(g.data().chunks_exact(half))
    {
        for j in 0..half {
            let (a, b) = (chunk[j], chunk[half + j]);
            let s = sigmoid(b);
            gchunk[j] = gout[j] * s;
            gchunk[half + j] = gout[j] * a * s * (1.0 - s);
        }
    }
    Tensor::from_parts(x.shape().to_vec(), gx)
}

// ---------------------------------------------------------------- conv

/// Same-padded, stride-1 temporal convolution.
///
/// `frames` is T×c_in, `kernel` is k×c_in×c_out (tap-major), `bias` is c_out.
/// Output row `t` sums taps `t - (k-1)/2 ..= t + (k-1)/2`, treating frames
/// outside the sequence as zero.
pub fn conv1d_temporal(frames: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (width, c_in, c_out) = conv_dims(frames, kernel, bias)?;
    let t_len = frames.rows();
    let pad = width / 2;
    let k = kernel.data();
    let v = frames.data();
    let mut out = Vec::with_capacity(t_len * c_out);
    for _ in 0..t_len {
        out.extend_from_slice(bias.data());
    }
    for t in 0..t_len {
        let orow = &mut out[t * c_out..(t + 1) * c_out];
        for j in 0..width {
            let Some(src) = (t + j).checked_sub(pad).filter(|&s| s < t_len) else {
                continue;
            };
            let vrow = &v[src * c_in..(src + 1) * c_in];
            let tap = &k[j * c_in * c_out..(j + 1) * c_in * c_out];
            for (ci, &x) in vrow.iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                let krow = &tap[ci * c_out..(ci + 1) * c_out];
                for (o, &w) in orow.iter_mut().zip(krow) {
                    *o += x * w;
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![t_len, c_out], out))
}

fn conv_dims(frames: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize)> {
    if kernel.rank() != 3 {
        return Err(shape_err!("conv kernel must be k×c_in×c_out, got {:?}", kernel.shape()));
    }
    let (width, c_in, c_out) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
    if width % 2 == 0 {
        return Err(config_err!("conv kernel width must be odd, got {width}"));
    }
    if frames.rank() != 2 || frames.cols() != c_in {
        return Err(shape_err!(
            "conv input {:?} does not have {c_in} channels",
            frames.shape()
        ));
    }
    bias.expect_shape(&[c_out], "conv bias")?;
    Ok((width, c_in, c_out))
}

/// Gradients for frames, kernel and bias; the frames gradient is skipped when
/// `want_frames` is false.
pub fn conv1d_temporal_vjp(
    frames: &Tensor,
    kernel: &Tensor,
    g: &Tensor,
    want_frames: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (width, c_in, c_out) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
    let t_len = frames.rows();
    let pad = width / 2;
    let (v, k, gd) = (frames.data(), kernel.data(), g.data());
    let mut gk = vec![0.0; kernel.len()];
    let mut gv = want_frames.then(|| vec![0.0; frames.len()]);
    let mut gb = vec![0.0; c_out];
    for t in 0..t_len {
        let grow = &gd[t * c_out..(t + 1) * c_out];
        for (b, &gi) in gb.iter_mut().zip(grow) {
            *b += gi;
        }
        for j in 0..width {
            let Some(src) = (t + j).checked_sub(pad).filter(|&s| s < t_len) else {
                continue;
            };
            let vrow = &v[src * c_in..(src + 1) * c_in];
            let base = j * c_in * c_out;
            for ci in 0..c_in {
                let x = vrow[ci];
                let krow = &k[base + ci * c_out..base + (ci + 1) * c_out];
                let gkrow = &mut gk[base + ci * c_out..base + (ci + 1) * c_out];
                let mut acc = 0.0;
                for ((gkw, &w), &gi) in gkrow.iter_mut().zip(krow).zip(grow) {
                    *gkw += x * gi;
                    acc += w * gi;
                }
                if let Some(gv) = gv.as_mut() {
                    gv[src * c_in + ci] += acc;
                }
            }
        }
    }
    (
        gv.map(|d| Tensor::from_parts(frames.shape().to_vec(), d)),
        Tensor::from_parts(kernel.shape().to_vec(), gk),
        Tensor::from_parts(vec![c_out], gb),
    )
}

// ---------------------------------------------------------------- pooling

/// Arithmetic mean over the time (row) axis.
pub fn mean_pool(frames: &Tensor) -> Result<Tensor> {
    if frames.rank() != 2 {
        return Err(shape_err!("mean_pool expects a T×c matrix, got {:?}", frames.shape()));
    }
    let (t_len, c) = (frames.rows(), frames.cols());
    let mut out = vec![0.0; c];
    for row in frames.data().chunks_exact(c) {
        for (o, &x) in out.iter_mut().zip(row) {
            *o += x;
        }
    }
    let inv = 1.0 / t_len as f64;
    for o in &mut out {
        *o *= inv;
    }
    Ok(Tensor::from_parts(vec![c], out))
}

pub fn mean_pool_vjp(frames: &Tensor, g: &Tensor) -> Tensor {
    let t_len = frames.rows();
    let inv = 1.0 / t_len as f64;
    let row: Vec<f64> = g.data().iter().map(|v| v * inv).collect();
    Tensor::from_parts(frames.shape().to_vec(), row.repeat(t_len))
}

// ---------------------------------------------------------------- dense

/// `x · w + b` for `x` of shape `[k]` or `[m, k]`, `w` of shape `[k, n]`.
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if w.rank() != 2 || x.cols() != w.rows() || x.rank() > 2 {
        return Err(shape_err!(
            "affine: input {:?} against weight {:?}",
            x.shape(),
            w.shape()
        ));
    }
    let (k, n) = (w.rows(), w.cols());
    b.expect_shape(&[n], "affine bias")?;
    let m = x.len() / k;
    let mut out = Vec::with_capacity(m * n);
    for xrow in x.data().chunks_exact(k) {
        let start = out.len();
        out.extend_from_slice(b.data());
        let orow = &mut out[start..];
        for (i, &xi) in xrow.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (o, &wv) in orow.iter_mut().zip(w.row(i)) {
                *o += xi * wv;
            }
        }
    }
    let shape = if x.rank() == 1 { vec![n] } else { vec![m, n] };
    Ok(Tensor::from_parts(shape, out))
}

pub fn affine_vjp(x: &Tensor, w: &Tensor, g: &Tensor, want_x: bool) -> (Option<Tensor>, Tensor, Tensor) {
    let (k, n) = (w.rows(), w.cols());
    let mut gw = vec![0.0; k * n];
    let mut gb = vec![0.0; n];
    let mut gx = want_x.then(|| vec![0.0; x.len()]);
    for (r, (xrow, grow)) in x.data().chunks_exact(k).zip(g.data().chunks_exact(n)).enumerate() {
        for (b, &gi) in gb.iter_mut().zip(grow) {
            *b += gi;
        }
        for (i, &xi) in xrow.iter().enumerate() {
            let wrow = w.row(i);
            let gwrow = &mut gw[i * n..(i + 1) * n];
            let mut acc = 0.0;
            for ((gwv, &wv), &gi) in gwrow.iter_mut().zip(wrow).zip(grow) {
                *gwv += xi * gi;
                acc += wv * gi;
            }
            if let Some(gx) = gx.as_mut() {
                gx[r * k + i] = acc;
            }
        }
    }
    (
        gx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
        Tensor::from_parts(w.shape().to_vec(), gw),
        Tensor::from_parts(vec![n], gb),
    )
}

/// `m · x + b` for `m` of shape `[n, k]` and `x` of shape `[k]`.
pub fn matvec(m: &Tensor, x: &Tensor, b: &Tensor) -> Result<Tensor> {
    if m.rank() != 2 || x.rank() != 1 || m.cols() != x.len() {
        return Err(shape_err!(
            "matvec: matrix {:?} against vector {:?}",
            m.shape(),
            x.shape()
        ));
    }
    b.expect_shape(&[m.rows()], "matvec bias")?;
    let out = (0..m.rows())
        .map(|i| b.data()[i] + dot_slices(m.row(i), x.data()))
        .collect();
    Ok(Tensor::from_parts(vec![m.rows()], out))
}

pub fn matvec_vjp(m: &Tensor, x: &Tensor, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let k = x.len();
    let mut gm = vec![0.0; m.len()];
    let mut gx = vec![0.0; k];
    for (i, &gi) in g.data().iter().enumerate() {
        let mrow = m.row(i);
        for j in 0..k {
            gm[i * k + j] = gi * x.data()[j];
            gx[j] += gi * mrow[j];
        }
    }
    (
        Tensor::from_parts(m.shape().to_vec(), gm),
        Tensor::from_parts(x.shape().to_vec(), gx),
        g.clone(),
    )
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn relu_vjp(x: &Tensor, g: &Tensor) -> Tensor {
    let d = x
        .data()
        .iter()
        .zip(g.data())
        .map(|(&v, &gi)| if v > 0.0 { gi } else { 0.0 })
        .collect();
    Tensor::from_parts(x.shape().to_vec(), d)
}

// ---------------------------------------------------------------- probabilities

/// Max-subtracted softmax over a vector of at least two logits.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.rank() != 1 || logits.len() < 2 {
        return Err(shape_err!(
            "softmax needs a vector of length >= 2, got {:?}",
            logits.shape()
        ));
    }
    Ok(Tensor::from_parts(vec![logits.len()], softmax_slice(logits.data())?))
}

pub fn softmax_slice(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(domain_err!("softmax of non-finite logits"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

pub fn softmax_vjp(p: &Tensor, g: &Tensor) -> Tensor {
    let inner = dot_slices(p.data(), g.data());
    let d = p
        .data()
        .iter()
        .zip(g.data())
        .map(|(&pi, &gi)| pi * (gi - inner))
        .collect();
    Tensor::from_parts(p.shape().to_vec(), d)
}

/// `-ln p[label]`, with `p[label]` clamped at [`LOG_CLAMP`].
pub fn cross_entropy(p: &Tensor, label: usize) -> Result<f64> {
    if label >= p.len() {
        return Err(Error::Label(format!(
            "label {label} out of range for {} classes",
            p.len()
        )));
    }
    Ok(-p.data()[label].max(LOG_CLAMP).ln())
}

/// Cross-entropy against an explicit one-hot target vector.
pub fn cross_entropy_one_hot(p: &Tensor, target: &[f64]) -> Result<f64> {
    if target.len() != p.len() {
        return Err(Error::Label(format!(
            "target of length {} for {} classes",
            target.len(),
            p.len()
        )));
    }
    let ones: Vec<usize> = (0..target.len()).filter(|&i| target[i] == 1.0).collect();
    let zeros = target.iter().filter(|&&v| v == 0.0).count();
    match ones.as_slice() {
        [label] if zeros == target.len() - 1 => cross_entropy(p, *label),
        _ => Err(Error::Label(format!("target {target:?} is not one-hot"))),
    }
}

pub fn cross_entropy_vjp(p: &Tensor, label: usize, g: f64) -> Tensor {
    let mut d = vec![0.0; p.len()];
    let py = p.data()[label];
    if py > LOG_CLAMP {
        d[label] = -g / py;
    }
    Tensor::from_parts(p.shape().to_vec(), d)
}

/// Shannon entropy in nats, with `0 · ln 0 = 0`.
pub fn entropy(p: &Tensor) -> Result<f64> {
    if let Some(v) = p.data().iter().find(|&&v| v < 0.0) {
        return Err(domain_err!("entropy of a vector with negative entry {v}"));
    }
    let total: f64 = p.data().iter().sum();
    if (total - 1.0).abs() > PROB_SUM_TOL {
        return Err(domain_err!("entropy of a vector summing to {total}"));
    }
    Ok(entropy_unchecked(p.data()))
}

pub(crate) fn entropy_unchecked(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.max(LOG_CLAMP).ln())
        .sum::<f64>()
}

pub fn entropy_vjp(p: &Tensor, g: f64) -> Tensor {
    p.map(|v| -g * (v.max(LOG_CLAMP).ln() + 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(d: &[f64]) -> Tensor {
        Tensor::vector(d.to_vec()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_sim(&[1., 0.], &[1., 0.]).unwrap(), 1.0);
        assert_eq!(cosine_sim(&[1., 0.], &[0., 1.]).unwrap(), 0.0);
        // (1·2 + 2·1) / (√5 · √5)
        assert!((cosine_sim(&[1., 2.], &[2., 1.]).unwrap() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn cosine_zero_norm_is_domain_error() {
        assert!(matches!(cosine_sim(&[0., 0.], &[1., 0.]), Err(Error::Domain(_))));
        let rows = Tensor::matrix(2, 2, vec![1., 0., 0., 0.]).unwrap();
        let err = cosine_rows(&v(&[1., 1.]), &rows).unwrap_err();
        assert!(err.to_string().contains("row 1"), "{err}");
    }

    #[test]
    fn glu_examples() {
        assert_eq!(glu(&v(&[2., 0.])).unwrap().data(), &[1.0]);
        assert_eq!(glu(&v(&[0.; 6])).unwrap().data(), &[0.; 3]);
        assert!(matches!(glu(&v(&[1., 2., 3.])), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_rejects_even_kernel() {
        let frames = Tensor::zeros(&[4, 1]);
        let kernel = Tensor::zeros(&[2, 1, 1]);
        let bias = Tensor::zeros(&[1]);
        assert!(matches!(
            conv1d_temporal(&frames, &kernel, &bias),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn conv_identity_tap_and_zero_input() {
        let frames = Tensor::matrix(4, 1, vec![1., -2., 3., 0.5]).unwrap();
        let kernel = Tensor::new(vec![3, 1, 1], vec![0., 1., 0.]).unwrap();
        let out = conv1d_temporal(&frames, &kernel, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(out, frames);

        let kernel = Tensor::new(vec![3, 2, 2], (0..12).map(f64::from).collect()).unwrap();
        let bias = v(&[0.25, -1.5]);
        let out = conv1d_temporal(&Tensor::zeros(&[5, 2]), &kernel, &bias).unwrap();
        for t in 0..5 {
            assert_eq!(out.row(t), bias.data());
        }
    }

    #[test]
    fn mean_pool_examples() {
        let m = Tensor::matrix(2, 1, vec![1., 3.]).unwrap();
        assert_eq!(mean_pool(&m).unwrap().data(), &[2.0]);
        let c = Tensor::matrix(3, 2, vec![0.5, -1.0, 0.5, -1.0, 0.5, -1.0]).unwrap();
        assert_eq!(mean_pool(&c).unwrap().data(), &[0.5, -1.0]);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&v(&[0., 0.])).unwrap().data(), &[0.5, 0.5]);
        assert!(softmax(&v(&[1.0])).is_err());
        assert!(softmax_slice(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(&v(&[1., 0.]), 0).unwrap(), 0.0);
        assert!((cross_entropy(&v(&[0.5, 0.5]), 1).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((cross_entropy(&v(&[0.9, 0.1]), 1).unwrap() - 10f64.ln()).abs() < 1e-12);
        assert!(matches!(cross_entropy(&v(&[0.9, 0.1]), 2), Err(Error::Label(_))));
        assert!(matches!(
            cross_entropy_one_hot(&v(&[0.9, 0.1]), &[1., 1.]),
            Err(Error::Label(_))
        ));
        assert_eq!(cross_entropy_one_hot(&v(&[1., 0.]), &[1., 0.]).unwrap(), 0.0);
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&v(&[0., 1.])).unwrap(), 0.0);
        assert!((entropy(&v(&[0.5, 0.5])).unwrap() - 2f64.ln()).abs() < 1e-15);
        let h = entropy(&v(&[0.9, 0.1])).unwrap();
        assert!((h - 0.325082973391448).abs() < 1e-12, "{h}");
        assert!(matches!(entropy(&v(&[0.6, 0.6])), Err(Error::Domain(_))));
        assert!(matches!(entropy(&v(&[1.2, -0.2])), Err(Error::Domain(_))));
    }
}
