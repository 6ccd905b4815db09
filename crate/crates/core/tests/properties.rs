use std::path::Path;

use proptest::prelude::*;

use auprompt::data::format::{decode_embeddings, encode_embeddings};
use auprompt::diffcore::{ops, Tensor};
use auprompt::metrics::{macro_f1, uar, war, ConfusionMatrix};
use auprompt::tta::enumerate_windows;

fn vec_of(len: std::ops::Range<usize>, scale: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-scale..scale, len)
}

fn same_len_pair(len: std::ops::Range<usize>) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    len.prop_flat_map(|n| (vec_of(n..n + 1, 10.0), vec_of(n..n + 1, 10.0)))
}

fn nonzero(v: &[f64]) -> bool {
    v.iter().map(|x| x * x).sum::<f64>() > 1e-6
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(x in vec_of(2..12, 30.0)) {
        let p = ops::softmax(&Tensor::vector(x).unwrap()).unwrap();
        let total: f64 = p.data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(p.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn softmax_ignores_shifts(x in vec_of(2..12, 30.0), c in -50.0..50.0f64) {
        let p = ops::softmax(&Tensor::vector(x.clone()).unwrap()).unwrap();
        let q = ops::softmax(&Tensor::vector(x.iter().map(|v| v + c).collect()).unwrap()).unwrap();
        for (a, b) in p.data().iter().zip(q.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn entropy_is_bounded(x in vec_of(2..12, 30.0)) {
        let n = x.len();
        let p = ops::softmax(&Tensor::vector(x).unwrap()).unwrap();
        let h = ops::entropy(&p).unwrap();
        prop_assert!(h >= 0.0);
        prop_assert!(h <= (n as f64).ln() + 1e-12);
    }

    #[test]
    fn cosine_ignores_power_of_two_scale((a, b) in same_len_pair(1..16), k in -20i32..20) {
        prop_assume!(nonzero(&a) && nonzero(&b));
        let alpha = 2f64.powi(k);
        let scaled: Vec<f64> = a.iter().map(|v| alpha * v).collect();
        let c0 = ops::cosine_sim(&a, &b).unwrap();
        prop_assert_eq!(c0.to_bits(), ops::cosine_sim(&scaled, &b).unwrap().to_bits());
        prop_assert!((-1.0..=1.0).contains(&c0));
    }

    #[test]
    fn cosine_ignores_positive_scale((a, b) in same_len_pair(1..16), alpha in 1e-3..1e3f64) {
        prop_assume!(nonzero(&a) && nonzero(&b));
        let scaled: Vec<f64> = a.iter().map(|v| alpha * v).collect();
        let c0 = ops::cosine_sim(&a, &b).unwrap();
        let c1 = ops::cosine_sim(&scaled, &b).unwrap();
        prop_assert!((c0 - c1).abs() <= 1e-15 * c0.abs().max(1.0));
    }

    #[test]
    fn temporal_convolution_is_linear(
        t in 1usize..10, k in prop::sample::select(vec![1usize, 3, 5]), seed in any::<u64>(),
        a in -3.0..3.0f64, b in -3.0..3.0f64,
    ) {
        let (c_in, c_out) = (3, 4);
        let mut state = seed | 1;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state % 2001) as f64 / 1000.0 - 1.0
        };
        let x = Tensor::new(vec![t, c_in], (0..t * c_in).map(|_| next()).collect()).unwrap();
        let y = Tensor::new(vec![t, c_in], (0..t * c_in).map(|_| next()).collect()).unwrap();
        let kernel = Tensor::new(vec![k, c_in, c_out], (0..k * c_in * c_out).map(|_| next()).collect()).unwrap();
        let bias = Tensor::zeros(&[c_out]);
        let mix = Tensor::new(
            vec![t, c_in],
            x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect(),
        )
        .unwrap();
        let lhs = ops::conv1d_temporal(&mix, &kernel, &bias).unwrap();
        let fx = ops::conv1d_temporal(&x, &kernel, &bias).unwrap();
        let fy = ops::conv1d_temporal(&y, &kernel, &bias).unwrap();
        for ((l, p), q) in lhs.data().iter().zip(fx.data()).zip(fy.data()) {
            prop_assert!((l - (a * p + b * q)).abs() < 1e-12);
        }
    }

    #[test]
    fn embedding_files_round_trip(rows in 1usize..20, cols in 1usize..20, seed in any::<u32>()) {
        let data: Vec<f64> = (0..rows * cols)
            .map(|i| ((seed as f64 + i as f64 * 0.618).sin() * 7.0) as f32 as f64)
            .collect();
        let m = Tensor::new(vec![rows, cols], data).unwrap();
        let bytes = encode_embeddings(&m).unwrap();
        let back = decode_embeddings(&bytes, Path::new("mem")).unwrap();
        prop_assert!(back.bit_eq(&m));
    }

    #[test]
    fn metrics_ignore_video_order(
        pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60),
        rotate in 0usize..60,
    ) {
        let (truth, pred): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let mut shuffled = pairs.clone();
        let r = rotate % shuffled.len();
        shuffled.rotate_left(r);
        shuffled.reverse();
        let (t2, p2): (Vec<usize>, Vec<usize>) = shuffled.into_iter().unzip();
        let a = ConfusionMatrix::from_predictions(&truth, &pred, 4).unwrap();
        let b = ConfusionMatrix::from_predictions(&t2, &p2, 4).unwrap();
        prop_assert_eq!(war(&a).unwrap().to_bits(), war(&b).unwrap().to_bits());
        prop_assert_eq!(uar(&a).unwrap().to_bits(), uar(&b).unwrap().to_bits());
        prop_assert_eq!(macro_f1(&a).unwrap().to_bits(), macro_f1(&b).unwrap().to_bits());
    }

    #[test]
    fn balanced_binary_war_equals_uar(preds in prop::collection::vec((0usize..2, 0usize..2), 1..40)) {
        let n = preds.len();
        let truth: Vec<usize> = (0..2 * n).map(|i| usize::from(i >= n)).collect();
        let pred: Vec<usize> = preds.iter().map(|p| p.0).chain(preds.iter().map(|p| p.1)).collect();
        let cm = ConfusionMatrix::from_predictions(&truth, &pred, 2).unwrap();
        prop_assert!((war(&cm).unwrap() - uar(&cm).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn window_count_matches_formula(t in 1usize..80, len in 1usize..80) {
        let windows = enumerate_windows(t, len);
        prop_assert_eq!(windows.len(), if t >= len { t - len + 1 } else { 1 });
        for (i, w) in windows.iter().enumerate() {
            prop_assert_eq!(w.start, i);
            prop_assert_eq!(w.end - w.start, len.min(t));
        }
    }
}
