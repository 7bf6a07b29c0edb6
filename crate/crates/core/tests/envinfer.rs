use std::f64::consts::PI;

use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{num_complex::Complex, FftPlanner};

use catsg::envinfer::{
    marginals, orthogonality_loss, score, sinkhorn, swapped_loss_from_logits, EnvBank, EnvInfer, EnvInferConfig,
    FeatureExtractor, SinkhornConfig, Tcn, TcnConfig,
};
use catsg::nn::ParamStore;
use catsg::seed;

fn randn(shape: &[usize], seed_value: u64) -> Tensor {
    let mut rng = seed::rng(seed_value);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn extractor(width: usize, top_k: usize) -> (ParamStore, FeatureExtractor) {
    let mut store = ParamStore::new(DType::F64);
    let mut rng = seed::rng(1);
    let fx = FeatureExtractor::new(&mut store.builder(&mut rng).pp("features"), width, top_k).unwrap();
    (store, fx)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.to_vec2::<f64>().unwrap()
}

/// Periodogram `|rfft|^2 / T` of one real sequence.
fn periodogram(x: &[f64]) -> Vec<f64> {
    let t = x.len();
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(t).process(&mut buf);
    buf[..t / 2 + 1].iter().map(|c| c.norm_sqr() / t as f64).collect()
}

#[test]
fn pure_tone_centroid_is_its_frequency() {
    let (_store, fx) = extractor(1, 2);
    let t = 64;
    for f in [1usize, 5, 17, 31] {
        let x: Vec<f64> = (0..t).map(|i| (2.0 * PI * (f * i) as f64 / t as f64).cos()).collect();
        let h = Tensor::from_vec(x, (1, t, 1), &Device::Cpu).unwrap();
        let feats = fx.forward(&h).unwrap();
        let centroid = rows(&feats.centroid)[0][0];
        assert!((centroid - f as f64).abs() < 1e-9, "f={f}: centroid {centroid}");
        let peaks = rows(&feats.peaks)[0].clone();
        assert!((peaks[0] - t as f64 / 4.0).abs() < 1e-9);
        assert!(peaks[1].abs() < 1e-9);
    }
}

#[test]
fn pooled_features_match_direct_computation() {
    let (n, t, width, top_k) = (3, 10, 4, 3);
    let (_store, fx) = extractor(width, top_k);
    let h = randn(&[n, t, width], 7);
    let feats = fx.forward(&h).unwrap();
    let hv = h.to_vec3::<f64>().unwrap();
    let weights = rows(&feats.attention_weights);
    let (mean, std, max, attn, centroid, peaks) = (
        rows(&feats.mean),
        rows(&feats.std),
        rows(&feats.max),
        rows(&feats.attention),
        rows(&feats.centroid),
        rows(&feats.peaks),
    );
    for i in 0..n {
        assert!((weights[i].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(weights[i].iter().all(|&w| w > 0.0));
        let mut avg_psd = vec![0.0; t / 2 + 1];
        for c in 0..width {
            let col: Vec<f64> = (0..t).map(|s| hv[i][s][c]).collect();
            let m = col.iter().sum::<f64>() / t as f64;
            let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / t as f64;
            assert!((mean[i][c] - m).abs() < 1e-12);
            // Gradient-safe form that is exactly zero for a constant channel.
            let safe_std = (var + 1e-10).sqrt() - 1e-5;
            assert!((std[i][c] - safe_std).abs() < 1e-12);
            assert_eq!(max[i][c], col.iter().copied().fold(f64::NEG_INFINITY, f64::max));
            let a: f64 = (0..t).map(|s| weights[i][s] * col[s]).sum();
            assert!((attn[i][c] - a).abs() < 1e-12);
            let p = periodogram(&col);
            let total: f64 = p.iter().sum();
            let cent = p.iter().enumerate().map(|(f, v)| f as f64 * v).sum::<f64>() / (total + 1e-12);
            assert!((centroid[i][c] - cent).abs() < 1e-9);
            for (acc, v) in avg_psd.iter_mut().zip(&p) {
                *acc += v / width as f64;
            }
        }
        avg_psd.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for j in 0..top_k {
            assert!((peaks[i][j] - avg_psd[j]).abs() < 1e-9);
        }
    }
}

#[test]
fn tcn_is_causal() {
    let mut store = ParamStore::new(DType::F64);
    let mut rng = seed::rng(2);
    let tcn = Tcn::new(&mut store.builder(&mut rng).pp("tcn"), 2, 6, &TcnConfig::default()).unwrap();
    let x = randn(&[1, 16, 2], 3);
    let base = tcn.forward(&x).unwrap().to_vec3::<f64>().unwrap();
    let t0 = 9;
    let mut bumped = x.to_vec3::<f64>().unwrap();
    bumped[0][t0][0] += 1.0;
    let flat: Vec<f64> = bumped.into_iter().flatten().flatten().collect();
    let x2 = Tensor::from_vec(flat, (1, 16, 2), &Device::Cpu).unwrap();
    let out = tcn.forward(&x2).unwrap().to_vec3::<f64>().unwrap();
    for t in 0..16 {
        let changed = base[0][t] != out[0][t];
        assert_eq!(changed, t >= t0, "time {t}");
    }
}

#[test]
fn zeroed_projection_gives_zero_latent() {
    let mut store = ParamStore::new(DType::F64);
    let mut rng = seed::rng(4);
    let cfg = EnvInferConfig {
        width: 8,
        top_k: 2,
        ..EnvInferConfig::default()
    };
    let ei = EnvInfer::new(&mut store.builder(&mut rng).pp("envinfer"), 1, 2, &cfg).unwrap();
    for name in ["envinfer.proj2.weight", "envinfer.proj2.bias"] {
        let n = store.get(name).unwrap().elem_count();
        store.assign(name, &vec![0.0; n]).unwrap();
    }
    let x = Tensor::zeros((2, 12, 1), DType::F64, &Device::Cpu).unwrap();
    let c = Tensor::zeros((2, 12, 2), DType::F64, &Device::Cpu).unwrap();
    let h = ei.latent(&x, &c).unwrap();
    assert!(rows(&h).iter().flatten().all(|&v| v == 0.0));
}

/// Textbook Sinkhorn-Knopp in the log domain.
fn sinkhorn_oracle(s: &[f64], n: usize, k: usize, scale: f64, iters: usize) -> Vec<f64> {
    let mut logq: Vec<f64> = s.iter().map(|v| v * scale).collect();
    let lse = |v: &mut dyn Iterator<Item = f64>| {
        let v: Vec<f64> = v.collect();
        let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    };
    for _ in 0..iters {
        for j in 0..k {
            let l = lse(&mut (0..n).map(|i| logq[i * k + j]));
            let target = (n as f64 / k as f64).ln();
            (0..n).for_each(|i| logq[i * k + j] += target - l);
        }
        for i in 0..n {
            let l = lse(&mut (0..k).map(|j| logq[i * k + j]));
            (0..k).for_each(|j| logq[i * k + j] -= l);
        }
    }
    logq.iter().map(|v| v.exp()).collect()
}

#[test]
fn sinkhorn_converges_to_balanced_marginals() {
    for n in [8, 64] {
        for k in [2, 8] {
            let s = randn(&[n * k], (n * k) as u64).to_vec1::<f64>().unwrap();
            let cfg = SinkhornConfig { reg: 0.05, iters: 100 };
            let q = sinkhorn(&s, n, k, 0.1, &cfg).unwrap();
            let (row, col) = marginals(&q, n, k);
            assert!(row.iter().all(|r| (r - 1.0).abs() < 1e-12), "n={n} k={k}");
            let target = n as f64 / k as f64;
            let worst = col.iter().map(|c| (c - target).abs()).fold(0.0, f64::max);
            assert!(worst < 1e-6, "n={n} k={k}: column error {worst}");
        }
    }
}

#[test]
fn sinkhorn_matches_log_domain_oracle() {
    let (n, k) = (16, 4);
    let s = randn(&[n * k], 9).to_vec1::<f64>().unwrap();
    for iters in [1, 3, 10] {
        let cfg = SinkhornConfig { reg: 0.05, iters };
        let q = sinkhorn(&s, n, k, 0.1, &cfg).unwrap();
        let oracle = sinkhorn_oracle(&s, n, k, 0.1 / 0.05, iters);
        for (a, b) in q.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn orthogonality_matches_gram_oracle() {
    let e = randn(&[3, 5], 11);
    let loss = orthogonality_loss(&EnvBank::from_tensor(e.clone())).unwrap().to_scalar::<f64>().unwrap();
    let rows_e = rows(&e);
    let unit: Vec<Vec<f64>> = rows_e
        .iter()
        .map(|r| {
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / norm).collect()
        })
        .collect();
    let mut oracle = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum();
            oracle += (dot - if i == j { 1.0 } else { 0.0 }).powi(2);
        }
    }
    assert!((loss - oracle).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn posterior_is_a_softmax_of_cosine_similarity(
        seed_value in 0u64..10_000,
        k in 1usize..6,
        tau in 0.05..2.0f64,
    ) {
        let h = randn(&[4, 3], seed_value);
        let e = randn(&[k, 3], seed_value + 1);
        let (s, w) = score(&h, &EnvBank::from_tensor(e.clone()), tau).unwrap();
        let (hv, ev, sv, wv) = (rows(&h), rows(&e), rows(&s), rows(&w));
        let norm = |r: &Vec<f64>| r.iter().map(|v| v * v).sum::<f64>().sqrt();
        for i in 0..4 {
            let logits: Vec<f64> = ev
                .iter()
                .map(|er| hv[i].iter().zip(er).map(|(a, b)| a * b).sum::<f64>() / (norm(&hv[i]) * norm(er) * tau))
                .collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            prop_assert!((wv[i].iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for j in 0..k {
                prop_assert!((sv[i][j] - logits[j]).abs() < 1e-9);
                prop_assert!(wv[i][j] >= 0.0);
                prop_assert!((wv[i][j] - (logits[j] - m).exp() / z).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn swapped_loss_is_nonnegative(seed_value in 0u64..10_000, k in 2usize..6) {
        let s1 = randn(&[8, k], seed_value);
        let s2 = randn(&[8, k], seed_value + 1);
        let l = swapped_loss_from_logits(&s1, &s2, 0.1, &SinkhornConfig::default())
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        prop_assert!(l.is_finite() && l >= 0.0);
    }
}
