//! Reductions of the backdoor-adjusted guidance rule on an untrained model:
//! they hold for any weights.

#![allow(dead_code)]

use candle_core::{DType, Tensor};

use catsg::bundle::SeriesBundle;
use catsg::data::{self, Normalizer};
use catsg::diffusion::model::{gaussian_like, mix};
use catsg::diffusion::train::data_shape;
use catsg::diffusion::{build_model, Ablation, Checkpoint, ModelConfig, TrainConfig, UNetConfig};
use catsg::oscillator::{build_cf_pairs, build_dataset, DatasetConfig, InitRanges, Scenario};
use catsg::pipeline::{generate, Mode};
use catsg::sampling::{backdoor_noise, cfg_noise, combine_guidance, GuidanceConfig};
use catsg::seed;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

pub fn bundle() -> SeriesBundle {
    let mut cfg = DatasetConfig::new(Scenario::VM, 16, 4, 6, 21);
    cfg.seq.horizon_steps = 16;
    let ds = build_dataset(&cfg).unwrap();
    build_cf_pairs(&ds, &InitRanges::COUNTERFACTUAL, 22).unwrap().bundle
}

pub fn model_config(k: usize, diffusion_steps: usize) -> ModelConfig {
    ModelConfig {
        k,
        h: 4,
        top_k: 2,
        diffusion_steps,
        unet: UNetConfig {
            base: 4,
            mults: vec![1, 2],
            blocks_per_level: 1,
            groups: 2,
        },
        ..ModelConfig::default()
    }
}

/// Untrained f64 checkpoint.
pub fn checkpoint(data: &SeriesBundle, k: usize, diffusion_steps: usize, ablation: Ablation) -> Checkpoint {
    let train = TrainConfig {
        ablation,
        ..TrainConfig::default()
    };
    let model = build_model(&model_config(k, diffusion_steps), &data_shape(data), &train, DType::F64, 5).unwrap();
    Checkpoint::new(model, &Normalizer::from_meta(&data.meta), &train, &data.meta.dataset_id, 0)
}

pub fn values(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
}

pub fn noisy_state(ckpt: &Checkpoint, data: &SeriesBundle) -> (Tensor, Tensor, Vec<f64>) {
    let test = data.split("test").unwrap();
    let c = data::series_tensor(&ckpt.normalizer.c_to_model(&test.c), DType::F64).unwrap();
    let ctx = ckpt.model.encode_context(&c).unwrap();
    let like = data::series_tensor(&test.x, DType::F64).unwrap();
    let x_t = gaussian_like(&like, &mut seed::rng(3)).unwrap();
    (x_t, ctx, vec![37.0; test.len()])
}

/// `omega = 0` gives the posterior-weighted mixture of the branch
/// predictions, bit for bit.
pub fn zero_guidance_is_the_mixture() -> Result<(), String> {
    let data = bundle();
    let ckpt = checkpoint(&data, 3, 50, Ablation::Full);
    let model = &ckpt.model;
    let (x_t, ctx, ts) = noisy_state(&ckpt, &data);
    let w = model.posterior(&x_t, &ctx).unwrap().w;
    let conds = model.env_conds(&ctx).unwrap();
    let guided = values(&backdoor_noise(model, &x_t, &ts, &ctx, &w, 0.0).unwrap());
    let batched = model.denoise_branches(&x_t, &ts, &conds).unwrap();
    ensure!(guided == values(&mix(&batched, &w).unwrap()), "omega=0 differs from the mixture");
    // Separate calls differ from the batched pass only by matmul rounding.
    let separate: Vec<Tensor> = conds.iter().map(|c| model.denoise(&x_t, &ts, c).unwrap()).collect();
    let worst = max_abs_diff(&guided, &values(&mix(&separate, &w).unwrap()));
    ensure!(worst < 1e-12, "omega=0 differs from separate branch calls by {worst:e}");
    Ok(())
}

/// With one environment the rule is classifier-free guidance, bit for bit.
pub fn single_environment_is_cfg() -> Result<(), String> {
    let data = bundle();
    let ckpt = checkpoint(&data, 1, 50, Ablation::Full);
    let model = &ckpt.model;
    let (x_t, ctx, ts) = noisy_state(&ckpt, &data);
    let w = Tensor::ones((ts.len(), 1), DType::F64, x_t.device()).unwrap();
    let cond = model.env_conds(&ctx).unwrap().remove(0);
    for omega in [0.0, 0.5, 2.0] {
        let a = values(&backdoor_noise(model, &x_t, &ts, &ctx, &w, omega).unwrap());
        let b = values(&cfg_noise(model, &x_t, &ts, &cond, omega).unwrap());
        ensure!(a == b, "K=1 differs from classifier-free guidance at omega={omega}");
    }
    Ok(())
}

/// One-hot weights select a single branch: bit for bit against that branch
/// of the same batched pass, and up to matmul rounding against a separate
/// two-branch guidance call.
pub fn one_hot_selects_a_branch() -> Result<(), String> {
    let data = bundle();
    let ckpt = checkpoint(&data, 3, 50, Ablation::Full);
    let model = &ckpt.model;
    let (x_t, ctx, ts) = noisy_state(&ckpt, &data);
    let n = ts.len();
    let conds = model.env_conds(&ctx).unwrap();
    let mut all = conds.clone();
    all.push(model.null_cond(&ctx).unwrap());
    let preds = model.denoise_branches(&x_t, &ts, &all).unwrap();
    for j in 0..3 {
        let mut w = vec![0.0; n * 3];
        (0..n).for_each(|i| w[i * 3 + j] = 1.0);
        let w = Tensor::from_vec(w, (n, 3), x_t.device()).unwrap();
        let a = values(&backdoor_noise(model, &x_t, &ts, &ctx, &w, 1.5).unwrap());
        let own = values(&combine_guidance(&preds[j], Some(&preds[3]), 1.5).unwrap());
        ensure!(a == own, "one-hot branch {j} is not the selected branch of the batch");
        let b = values(&cfg_noise(model, &x_t, &ts, &conds[j], 1.5).unwrap());
        let worst = max_abs_diff(&a, &b);
        ensure!(worst < 1e-12, "one-hot branch {j} differs by {worst:e}");
    }
    Ok(())
}

/// Observational generation is interventional generation with `omega = 0`.
pub fn observational_is_unguided_interventional() -> Result<(), String> {
    let data = bundle();
    let ckpt = checkpoint(&data, 3, 50, Ablation::Full);
    let guided = GuidanceConfig {
        steps: 5,
        ..GuidanceConfig::default()
    };
    let unguided = GuidanceConfig { omega: 0.0, ..guided.clone() };
    let obs = generate(&ckpt, &data, "test", Mode::Obs, &guided, None).unwrap();
    let int0 = generate(&ckpt, &data, "test", Mode::Int, &unguided, None).unwrap();
    let int1 = generate(&ckpt, &data, "test", Mode::Int, &guided, None).unwrap();
    let x = |b: &SeriesBundle| b.split("test").unwrap().x.clone();
    ensure!(x(&obs) == x(&int0), "obs differs from int with omega=0");
    ensure!(x(&obs) != x(&int1), "guidance has no effect");
    Ok(())
}
