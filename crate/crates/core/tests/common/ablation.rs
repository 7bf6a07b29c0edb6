//! Per-variant checks that each ablation changes exactly its own loss terms
//! and weight paths, asserted on the computation graph of one training step.

#![allow(dead_code)]

use candle_core::{DType, Tensor};
use rand_distr::{Distribution, StandardNormal};

use catsg::bundle::{ChannelKind, Series};
use catsg::data::{AugmentStats, Batch};
use catsg::diffusion::model::{CatsgModel, DataShape, ModelConfig};
use catsg::diffusion::train::{LossTerms, Objective, Phase};
use catsg::diffusion::{build_model, Ablation, TrainConfig, UNetConfig};
use catsg::seed;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        k: 3,
        h: 4,
        top_k: 2,
        diffusion_steps: 50,
        unet: UNetConfig {
            base: 4,
            mults: vec![1, 2],
            blocks_per_level: 1,
            groups: 2,
        },
        ..ModelConfig::default()
    }
}

fn shape() -> DataShape {
    DataShape {
        t: 8,
        d_x: 1,
        context_kinds: vec![ChannelKind::Continuous, ChannelKind::Continuous],
    }
}

fn batch(n: usize) -> Batch {
    let mut rng = seed::rng(3);
    let mut draw = |len: usize| -> Vec<f32> {
        (0..len)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (0.5 * z) as f32
            })
            .collect()
    };
    Batch {
        x: Series::new(n, 8, 1, draw(n * 8)).unwrap(),
        c: Series::new(n, 8, 2, draw(n * 16)).unwrap(),
    }
}

fn setup(ablation: Ablation) -> (CatsgModel, TrainConfig) {
    let cfg = TrainConfig {
        ablation,
        ..TrainConfig::default()
    };
    let model = build_model(&tiny_model_config(), &shape(), &cfg, DType::F64, 11).unwrap();
    (model, cfg)
}

fn terms(model: &CatsgModel, cfg: &TrainConfig, phase: Phase) -> LossTerms {
    let b = batch(6);
    let stats = AugmentStats::from_batch(&b, vec![true, true]);
    let objective = Objective { cfg, stats: &stats };
    let mut rng = seed::rng(5);
    objective.terms(model, &b, phase, &mut rng).unwrap()
}

fn grad_norm(model: &CatsgModel, loss: &Tensor, prefix: &str) -> f64 {
    let grads = loss.backward().unwrap();
    model
        .store
        .vars()
        .iter()
        .filter(|(name, _)| name.starts_with(prefix))
        .filter_map(|(_, v)| grads.get(v.as_tensor()))
        .map(|g| g.sqr().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap())
        .sum::<f64>()
        .sqrt()
}

fn same(a: &Tensor, b: &Tensor) -> bool {
    a.to_vec2::<f64>().unwrap() == b.to_vec2::<f64>().unwrap()
}

pub fn full() -> Result<(), String> {
    let (model, cfg) = setup(Ablation::Full);
    let t = terms(&model, &cfg, Phase::Joint);
    ensure!(t.eps.is_some() && t.sw.is_some() && t.orth.is_some(), "full: missing loss term");
    ensure!(
        same(t.w_used.as_ref().unwrap(), t.w_posterior.as_ref().unwrap()),
        "full: mixture weights are not the posterior"
    );
    let total = t.total.unwrap();
    ensure!(grad_norm(&model, &total, "bank.") > 0.0, "full: no bank gradient");
    ensure!(grad_norm(&model, &total, "envinfer.") > 0.0, "full: no inference gradient");
    // The mixture weights are detached: the diffusion loss alone does not
    // reach the inference network.
    ensure!(
        grad_norm(&model, t.eps.as_ref().unwrap(), "envinfer.") == 0.0,
        "full: diffusion loss reaches the inference network"
    );
    Ok(())
}

pub fn warmup() -> Result<(), String> {
    let (model, cfg) = setup(Ablation::Full);
    let t = terms(&model, &cfg, Phase::Warmup);
    ensure!(t.eps.is_none() && t.sw.is_some() && t.orth.is_some(), "warmup: wrong loss terms");
    ensure!(
        grad_norm(&model, t.total.as_ref().unwrap(), "denoiser.") == 0.0,
        "warmup: denoiser receives gradient"
    );
    Ok(())
}

pub fn rand_env() -> Result<(), String> {
    let (model, cfg) = setup(Ablation::RandEnv);
    let t = terms(&model, &cfg, Phase::Joint);
    ensure!(t.eps.is_some() && t.sw.is_some() && t.orth.is_some(), "rand_env: missing loss term");
    let w = t.w_used.as_ref().unwrap();
    ensure!(!same(w, t.w_posterior.as_ref().unwrap()), "rand_env: weights equal the posterior");
    for row in w.to_vec2::<f64>().unwrap() {
        ensure!(
            (row.iter().sum::<f64>() - 1.0).abs() < 1e-12 && row.iter().all(|&v| v >= 0.0),
            "rand_env: weights leave the simplex"
        );
    }
    Ok(())
}

pub fn no_sw() -> Result<(), String> {
    let (model, cfg) = setup(Ablation::NoSw);
    ensure!(cfg.effective_alpha_sw() == 0.0, "no_sw: swapped-loss weight is not zero");
    let t = terms(&model, &cfg, Phase::Joint);
    ensure!(t.sw.is_none(), "no_sw: swapped loss present");
    ensure!(t.eps.is_some() && t.orth.is_some(), "no_sw: missing loss term");
    ensure!(
        same(t.w_used.as_ref().unwrap(), t.w_posterior.as_ref().unwrap()),
        "no_sw: mixture weights are not the posterior"
    );
    Ok(())
}

pub fn frozen_env() -> Result<(), String> {
    let (model, cfg) = setup(Ablation::FrozenEnv);
    ensure!(cfg.effective_beta_orth() == 0.0, "frozen_env: orthogonality weight is not zero");
    ensure!(model.store.is_frozen("bank.embeddings"), "frozen_env: bank not frozen");
    ensure!(
        model.store.trainable().len() + 1 == model.store.vars().len(),
        "frozen_env: more than the bank is frozen"
    );
    let t = terms(&model, &cfg, Phase::Joint);
    ensure!(t.orth.is_none(), "frozen_env: orthogonality loss present");
    ensure!(t.eps.is_some() && t.sw.is_some(), "frozen_env: missing loss term");
    let total = t.total.unwrap();
    ensure!(grad_norm(&model, &total, "bank.") == 0.0, "frozen_env: bank receives gradient");
    ensure!(grad_norm(&model, &total, "envinfer.") > 0.0, "frozen_env: no inference gradient");
    Ok(())
}

pub fn no_env() -> Result<(), String> {
    let (model, cfg) = setup(Ablation::NoEnv);
    ensure!(!model.uses_env(), "no_env: model uses environments");
    ensure!(model.bank.is_none() && model.envinfer.is_none(), "no_env: bank or inference network built");
    ensure!(
        model.store.vars().keys().all(|k| !k.starts_with("bank.") && !k.starts_with("envinfer.")),
        "no_env: environment parameters stored"
    );
    let t = terms(&model, &cfg, Phase::Joint);
    ensure!(
        t.sw.is_none() && t.orth.is_none() && t.w_posterior.is_none(),
        "no_env: environment loss terms present"
    );
    let w = t.w_used.unwrap();
    ensure!(
        w.dims() == [6, 1] && w.to_vec2::<f64>().unwrap().iter().all(|r| r[0] == 1.0),
        "no_env: weights are not a single unit column"
    );
    Ok(())
}

pub const ALL: [(&str, fn() -> Result<(), String>); 6] = [
    ("full", full),
    ("warmup", warmup),
    ("rand_env", rand_env),
    ("no_sw", no_sw),
    ("frozen_env", frozen_env),
    ("no_env", no_env),
];
