//! Joint training of the environment inference network, the bank and the
//! noise predictor: a warm-up phase on the clustering losses, then the
//! mixture noise-prediction loss on top.

use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Tensor};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::bundle::SeriesBundle;
use crate::data::{self, augment, AugmentConfig, AugmentStats, Batch, Normalizer};
use crate::diffusion::checkpoint::Checkpoint;
use crate::diffusion::model::{random_simplex, CatsgModel, DataShape, ModelConfig};
use crate::envinfer::{orthogonality_loss, swapped_loss_from_logits, SinkhornConfig};
use crate::error::{Error, Result};
use crate::seed;

/// Model variants compared in the ablation study.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// Posterior weights replaced by uniform-random simplex draws.
    RandEnv,
    /// Swapped-prediction loss switched off.
    NoSw,
    /// Bank excluded from optimisation; no orthogonality loss.
    FrozenEnv,
    /// No bank, no environment inference, plain conditional diffusion.
    NoEnv,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Full,
        Ablation::RandEnv,
        Ablation::NoSw,
        Ablation::FrozenEnv,
        Ablation::NoEnv,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::RandEnv => "rand_env",
            Ablation::NoSw => "no_sw",
            Ablation::FrozenEnv => "frozen_env",
            Ablation::NoEnv => "no_env",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation '{s}' (expected full, rand_env, no_sw, frozen_env or no_env)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Joint-phase optimisation steps (after warm-up).
    pub steps: usize,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub p_drop: f64,
    pub alpha_sw: f64,
    pub beta_orth: f64,
    /// Keep the swapped-prediction loss after warm-up.
    pub sw_after_warmup: bool,
    pub sinkhorn: SinkhornConfig,
    pub augment: AugmentConfig,
    pub ablation: Ablation,
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            warmup_steps: 200,
            batch_size: 512,
            lr: 1e-3,
            p_drop: 0.2,
            alpha_sw: 0.5,
            beta_orth: 0.5,
            sw_after_warmup: true,
            sinkhorn: SinkhornConfig::default(),
            augment: AugmentConfig::default(),
            ablation: Ablation::Full,
            checkpoint_every: 0,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_drop) {
            return Err(Error::Config(format!("train.p_drop must lie in [0, 1], got {}", self.p_drop)));
        }
        if self.alpha_sw < 0.0 || self.beta_orth < 0.0 {
            return Err(Error::Config("loss coefficients must be non-negative".into()));
        }
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("train.batch_size and train.lr must be positive".into()));
        }
        Ok(())
    }

    /// Coefficient of the swapped-prediction loss after ablation.
    pub fn effective_alpha_sw(&self) -> f64 {
        match self.ablation {
            Ablation::NoSw | Ablation::NoEnv => 0.0,
            _ => self.alpha_sw,
        }
    }

    /// Coefficient of the orthogonality loss after ablation.
    pub fn effective_beta_orth(&self) -> f64 {
        match self.ablation {
            Ablation::FrozenEnv | Ablation::NoEnv => 0.0,
            _ => self.beta_orth,
        }
    }

    /// The model configuration actually built for this ablation.
    pub fn model_config(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            use_env: base.use_env && self.ablation != Ablation::NoEnv,
            ..base.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Joint,
}

/// Terms of one training objective evaluation. Absent terms are not part of
/// the graph.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub eps: Option<Tensor>,
    pub sw: Option<Tensor>,
    pub orth: Option<Tensor>,
    pub total: Option<Tensor>,
    /// Weights that entered the mixture loss.
    pub w_used: Option<Tensor>,
    /// Posterior of the clean batch, when the model has a bank.
    pub w_posterior: Option<Tensor>,
}

fn scalar(t: &Option<Tensor>) -> Result<Option<f64>> {
    t.as_ref()
        .map(|v| Ok(v.to_dtype(DType::F64)?.to_scalar::<f64>()?))
        .transpose()
}

/// Everything the objective needs besides the model.
pub struct Objective<'a> {
    pub cfg: &'a TrainConfig,
    pub stats: &'a AugmentStats,
}

impl Objective<'_> {
    pub fn terms(&self, model: &CatsgModel, batch: &Batch, phase: Phase, rng: &mut seed::Rng) -> Result<LossTerms> {
        let dtype = model.dtype();
        let x = data::series_tensor(&batch.x, dtype)?;
        let c = data::series_tensor(&batch.c, dtype)?;
        let ctx = model.encode_context(&c)?;
        let alpha_sw = self.cfg.effective_alpha_sw();
        let beta_orth = self.cfg.effective_beta_orth();
        let tau = model.config.tau;

        let w_posterior = if model.uses_env() {
            Some(model.posterior(&x, &ctx)?.w.detach())
        } else {
            None
        };

        let sw = if model.uses_env() && alpha_sw > 0.0 && (phase == Phase::Warmup || self.cfg.sw_after_warmup) {
            let v1 = augment(batch, self.stats, &self.cfg.augment, rng);
            let v2 = augment(batch, self.stats, &self.cfg.augment, rng);
            let s1 = self.view_logits(model, &v1)?;
            let s2 = self.view_logits(model, &v2)?;
            Some((swapped_loss_from_logits(&s1, &s2, tau, &self.cfg.sinkhorn)? * alpha_sw)?)
        } else {
            None
        };

        let orth = match (&model.bank, beta_orth > 0.0) {
            (Some(bank), true) => Some((orthogonality_loss(bank)? * beta_orth)?),
            _ => None,
        };

        let (eps, w_used) = if phase == Phase::Joint {
            let n = batch.len();
            let w = match (&w_posterior, self.cfg.ablation) {
                (_, Ablation::RandEnv) => random_simplex(n, model.num_branches(), dtype, rng)?,
                (Some(w), _) => w.clone(),
                (None, _) => Tensor::ones((n, 1), dtype, x.device())?,
            };
            let l = model.eps_loss(&x, &ctx, &w, self.cfg.p_drop, rng)?;
            (Some(l), Some(w))
        } else {
            (None, None)
        };

        let total = [&eps, &sw, &orth]
            .into_iter()
            .flatten()
            .try_fold(None::<Tensor>, |acc, t| -> Result<_> {
                Ok(Some(match acc {
                    None => t.clone(),
                    Some(a) => (a + t)?,
                }))
            })?;
        Ok(LossTerms {
            eps,
            sw,
            orth,
            total,
            w_used,
            w_posterior,
        })
    }

    fn view_logits(&self, model: &CatsgModel, view: &Batch) -> Result<Tensor> {
        let dtype = model.dtype();
        let x = data::series_tensor(&view.x, dtype)?;
        let c = data::series_tensor(&view.c, dtype)?;
        let ctx = model.encode_context(&c)?;
        Ok(model.posterior(&x, &ctx)?.s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub phase: Phase,
    pub eps: Option<f64>,
    pub sw: Option<f64>,
    pub orth: Option<f64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<StepLog>,
    pub seconds: f64,
}

/// Model-space train split of a bundle.
pub fn train_batch(bundle: &SeriesBundle) -> Result<(Batch, Normalizer)> {
    let norm = Normalizer::from_meta(&bundle.meta);
    let split = bundle.split("train")?;
    if split.is_empty() {
        return Err(Error::Data("train split is empty".into()));
    }
    Ok((
        Batch {
            x: norm.x_to_model(&split.x),
            c: norm.c_to_model(&split.c),
        },
        norm,
    ))
}

pub fn data_shape(bundle: &SeriesBundle) -> DataShape {
    DataShape {
        t: bundle.meta.t,
        d_x: bundle.meta.d,
        context_kinds: bundle.meta.context_kinds_full(),
    }
}

/// Model for a training run with the ablation's structural changes applied
/// (no bank for `no_env`, frozen bank for `frozen_env`).
pub fn build_model(model_cfg: &ModelConfig, shape: &DataShape, cfg: &TrainConfig, dtype: DType, init_seed: u64) -> Result<CatsgModel> {
    let mut model = CatsgModel::new(&cfg.model_config(model_cfg), shape, dtype, init_seed)?;
    if cfg.ablation == Ablation::FrozenEnv {
        model.freeze_bank();
    }
    Ok(model)
}

/// Trains a model on the bundle's train split. With `out` set, checkpoints
/// are written every `checkpoint_every` steps and at the end.
pub fn train(
    bundle: &SeriesBundle,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    master_seed: u64,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let (data, norm) = train_batch(bundle)?;
    let shape = data_shape(bundle);
    let model = build_model(model_cfg, &shape, cfg, DType::F32, seed::derive(master_seed, "init"))?;
    let stats = AugmentStats::from_batch(&data, norm.continuous_mask());
    let objective = Objective { cfg, stats: &stats };
    let mut opt = AdamW::new(
        model.store.trainable(),
        ParamsAdamW {
            lr: cfg.lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        },
    )?;
    let mut rng = seed::rng_for(master_seed, "train");
    let n = data.len();
    let bs = cfg.batch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let warmup = if model.uses_env() { cfg.warmup_steps } else { 0 };
    let total_steps = warmup + cfg.steps;
    let mut history = Vec::with_capacity(total_steps);

    for step in 0..total_steps {
        if cursor + bs > n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + bs];
        cursor += bs;
        let batch = data.select(idx);
        let phase = if step < warmup { Phase::Warmup } else { Phase::Joint };
        let terms = objective.terms(&model, &batch, phase, &mut rng)?;
        let log = StepLog {
            step,
            phase,
            eps: scalar(&terms.eps)?,
            sw: scalar(&terms.sw)?,
            orth: scalar(&terms.orth)?,
        };
        let Some(total) = terms.total else {
            history.push(log);
            continue;
        };
        let value = total.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            if let Some(dir) = out.and_then(|p| p.parent()) {
                let snapshot = serde_json::json!({ "step": step, "losses": &log, "recent": history.iter().rev().take(20).collect::<Vec<_>>() });
                let _ = std::fs::write(dir.join("diverged.json"), serde_json::to_string_pretty(&snapshot)?);
            }
            return Err(Error::Numerical(format!("non-finite training loss at step {step}: {log:?}")));
        }
        opt.backward_step(&total)?;
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == total_steps) {
            log::info!(
                "step {step} {:?} eps={:?} sw={:?} orth={:?}",
                phase,
                log.eps,
                log.sw,
                log.orth
            );
        }
        history.push(log);
        if let Some(path) = out {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < total_steps {
                Checkpoint::new(model.clone(), &norm, cfg, &bundle.meta.dataset_id, step + 1).save(path)?;
            }
        }
    }
    let ckpt = Checkpoint::new(model, &norm, cfg, &bundle.meta.dataset_id, total_steps);
    if let Some(path) = out {
        ckpt.save(path)?;
    }
    Ok(TrainOutcome {
        checkpoint: ckpt,
        history,
        seconds: started.elapsed().as_secs_f64(),
    })
}
