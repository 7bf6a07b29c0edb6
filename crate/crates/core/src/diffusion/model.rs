//! The conditional generator: context encoding, environment inference and
//! bank, the U-Net noise predictor, and the mixture noise-prediction loss.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::bundle::ChannelKind;
use crate::diffusion::schedule::{self, make_schedule, DiffusionSchedule, ScheduleKind};
use crate::diffusion::unet::{UNet, UNetConfig};
use crate::envinfer::{EnvBank, EnvInfer, EnvInferConfig, EnvInferOutput, TcnConfig};
use crate::error::{invalid, Error, Result};
use crate::nn::{Fill, Init, ParamStore};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of environments in the bank.
    pub k: usize,
    /// Environment embedding and latent width.
    pub h: usize,
    pub tau: f64,
    pub top_k: usize,
    pub tcn: TcnConfig,
    pub diffusion_steps: usize,
    pub schedule: ScheduleKind,
    pub unet: UNetConfig,
    pub cat_embed_dim: usize,
    /// `false` drops the bank, environment inference and env channels.
    pub use_env: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            k: 4,
            h: 64,
            tau: 0.1,
            top_k: 4,
            tcn: TcnConfig::default(),
            diffusion_steps: 1000,
            schedule: ScheduleKind::Cosine,
            unet: UNetConfig::default(),
            cat_embed_dim: 4,
            use_env: true,
        }
    }
}

impl ModelConfig {
    pub fn envinfer(&self) -> EnvInferConfig {
        EnvInferConfig {
            width: self.h,
            top_k: self.top_k,
            tau: self.tau,
            tcn: self.tcn.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.use_env && (self.k == 0 || self.h == 0) {
            return Err(Error::Config("model.k and model.h must be positive".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config("model.tau must be positive".into()));
        }
        if self.diffusion_steps == 0 {
            return Err(Error::Config("model.diffusion_steps must be positive".into()));
        }
        Ok(())
    }
}

/// Layout of the data a model was built for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataShape {
    pub t: usize,
    pub d_x: usize,
    pub context_kinds: Vec<ChannelKind>,
}

impl DataShape {
    pub fn d_c(&self) -> usize {
        self.context_kinds.len()
    }
}

/// Turns raw model-space context (categoricals as indices) into dense
/// channels: continuous and phase channels pass through, categorical
/// channels are replaced by learned embeddings.
#[derive(Debug, Clone)]
pub struct ContextEncoder {
    kinds: Vec<ChannelKind>,
    tables: Vec<Option<Tensor>>,
    embed_dim: usize,
}

impl ContextEncoder {
    pub fn new(init: &mut Init, kinds: &[ChannelKind], embed_dim: usize) -> Result<Self> {
        let mut tables = Vec::new();
        for (i, k) in kinds.iter().enumerate() {
            tables.push(match k {
                ChannelKind::Categorical { vocab } => Some(init.param(
                    &format!("embed{i}"),
                    &[vocab.len() + 1, embed_dim],
                    Fill::Normal(1.0),
                )?),
                _ => None,
            });
        }
        Ok(Self {
            kinds: kinds.to_vec(),
            tables,
            embed_dim,
        })
    }

    pub fn output_width(kinds: &[ChannelKind], embed_dim: usize) -> usize {
        kinds
            .iter()
            .map(|k| match k {
                ChannelKind::Categorical { .. } => embed_dim,
                _ => 1,
            })
            .sum()
    }

    pub fn width(&self) -> usize {
        Self::output_width(&self.kinds, self.embed_dim)
    }

    pub fn forward(&self, c: &Tensor) -> Result<Tensor> {
        let (n, t, d) = c.dims3()?;
        if d != self.kinds.len() {
            return invalid(format!("expected {} context channels, got {d}", self.kinds.len()));
        }
        if d == 0 {
            return Ok(Tensor::zeros((n, t, 0), c.dtype(), c.device())?);
        }
        let mut parts = Vec::with_capacity(d);
        for (i, kind) in self.kinds.iter().enumerate() {
            let col = c.narrow(2, i, 1)?;
            match (kind, &self.tables[i]) {
                (ChannelKind::Categorical { vocab }, Some(table)) => {
                    let unk = vocab.len() as u32;
                    let idx: Vec<u32> = col
                        .to_dtype(DType::F64)?
                        .flatten_all()?
                        .to_vec1::<f64>()?
                        .into_iter()
                        .map(|v| {
                            let r = v.round();
                            if r >= 0.0 && r < unk as f64 {
                                r as u32
                            } else {
                                unk
                            }
                        })
                        .collect();
                    let idx = Tensor::from_vec(idx, n * t, c.device())?;
                    parts.push(table.index_select(&idx, 0)?.reshape((n, t, self.embed_dim))?);
                }
                _ => parts.push(col),
            }
        }
        Ok(Tensor::cat(&parts, 2)?)
    }
}

/// Dense conditioning for one branch of the noise predictor.
#[derive(Debug, Clone)]
pub struct Cond {
    /// `[N, T, dense]` encoded context (zeros for the null token).
    pub ctx: Tensor,
    /// `[N, H]` environment vector, absent without an environment bank.
    pub env: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct CatsgModel {
    pub config: ModelConfig,
    pub shape: DataShape,
    pub store: ParamStore,
    pub context: ContextEncoder,
    pub envinfer: Option<EnvInfer>,
    pub bank: Option<EnvBank>,
    pub null_env: Option<Tensor>,
    pub unet: UNet,
    pub schedule: DiffusionSchedule,
}

impl CatsgModel {
    pub fn new(config: &ModelConfig, shape: &DataShape, dtype: DType, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype);
        let mut rng = seed::rng(init_seed);
        let dense = ContextEncoder::output_width(&shape.context_kinds, config.cat_embed_dim);
        let (context, envinfer, bank, null_env, unet) = {
            let mut init = store.builder(&mut rng);
            let context = ContextEncoder::new(&mut init.pp("context"), &shape.context_kinds, config.cat_embed_dim)?;
            let (envinfer, bank, null_env) = if config.use_env {
                let ei = EnvInfer::new(&mut init.pp("envinfer"), shape.d_x, dense, &config.envinfer())?;
                let bank = EnvBank::new(&mut init.pp("bank"), config.k, config.h)?;
                let null = init.param("null_env", &[config.h], Fill::Normal(1.0 / (config.h as f64).sqrt()))?;
                (Some(ei), Some(bank), Some(null))
            } else {
                (None, None, None)
            };
            let env_ch = if config.use_env { config.h } else { 0 };
            let unet = UNet::new(&mut init.pp("denoiser"), shape.d_x + dense + env_ch, shape.d_x, &config.unet)?;
            (context, envinfer, bank, null_env, unet)
        };
        let schedule = make_schedule(config.diffusion_steps, config.schedule)?;
        Ok(Self {
            config: config.clone(),
            shape: shape.clone(),
            store,
            context,
            envinfer,
            bank,
            null_env,
            unet,
            schedule,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn uses_env(&self) -> bool {
        self.bank.is_some()
    }

    /// Environment branches evaluated per noise prediction (1 without a bank).
    pub fn num_branches(&self) -> usize {
        self.bank.as_ref().map(|b| b.k()).unwrap_or(1)
    }

    /// Stops gradients into the bank and excludes it from optimisation.
    pub fn freeze_bank(&mut self) {
        if let Some(b) = self.bank.as_mut() {
            b.frozen = true;
            self.store.freeze("bank.embeddings");
        }
    }

    pub fn encode_context(&self, c: &Tensor) -> Result<Tensor> {
        self.context.forward(c)
    }

    /// Posterior over environments for model-space `x` and dense context.
    pub fn posterior(&self, x: &Tensor, ctx: &Tensor) -> Result<EnvInferOutput> {
        match (&self.envinfer, &self.bank) {
            (Some(ei), Some(bank)) => ei.forward(x, ctx, bank),
            _ => invalid("model has no environment bank"),
        }
    }

    pub fn null_cond(&self, like_ctx: &Tensor) -> Result<Cond> {
        let n = like_ctx.dim(0)?;
        Ok(Cond {
            ctx: like_ctx.zeros_like()?,
            env: match &self.null_env {
                Some(v) => Some(v.unsqueeze(0)?.broadcast_as((n, v.dim(0)?))?.contiguous()?),
                None => None,
            },
        })
    }

    /// Conditional branches `(c, e_k)` for every environment.
    pub fn env_conds(&self, ctx: &Tensor) -> Result<Vec<Cond>> {
        let n = ctx.dim(0)?;
        match &self.bank {
            Some(bank) => {
                let rows = bank.normalized()?;
                (0..bank.k())
                    .map(|k| {
                        let e = rows.narrow(0, k, 1)?.broadcast_as((n, bank.width()))?.contiguous()?;
                        Ok(Cond {
                            ctx: ctx.clone(),
                            env: Some(e),
                        })
                    })
                    .collect()
            }
            None => Ok(vec![Cond {
                ctx: ctx.clone(),
                env: None,
            }]),
        }
    }

    /// Replaces the condition of the samples where `drop` is set by the null
    /// token.
    pub fn drop_condition(&self, cond: &Cond, drop: &[bool]) -> Result<Cond> {
        let null = self.null_cond(&cond.ctx)?;
        let keep: Vec<f64> = drop.iter().map(|&d| if d { 0.0 } else { 1.0 }).collect();
        let keep_ctx = schedule::per_sample(&keep, &cond.ctx)?;
        let ctx = cond.ctx.broadcast_mul(&keep_ctx)?;
        let env = match (&cond.env, &null.env) {
            (Some(e), Some(z)) => {
                let m = schedule::per_sample(&keep, e)?;
                let inv: Vec<f64> = keep.iter().map(|k| 1.0 - k).collect();
                let im = schedule::per_sample(&inv, e)?;
                Some((e.broadcast_mul(&m)? + z.broadcast_mul(&im)?)?)
            }
            _ => None,
        };
        Ok(Cond { ctx, env })
    }

    /// Noise prediction for one conditioning branch.
    pub fn denoise(&self, x_t: &Tensor, ts: &[f64], cond: &Cond) -> Result<Tensor> {
        let (n, t, d) = x_t.dims3()?;
        if d != self.shape.d_x {
            return invalid(format!("expected {} target channels, got {d}", self.shape.d_x));
        }
        let (cn, ct, _) = cond.ctx.dims3()?;
        if cn != n || ct != t {
            return invalid("conditioning is not aligned with the noisy input");
        }
        let mut parts = vec![x_t.clone(), cond.ctx.clone()];
        if let Some(e) = &cond.env {
            parts.push(e.unsqueeze(1)?.broadcast_as((n, t, e.dim(1)?))?.contiguous()?);
        }
        self.unet.forward(&Tensor::cat(&parts, 2)?, ts)
    }

    /// Evaluates several branches on the same `x_t` in a single batched pass.
    pub fn denoise_branches(&self, x_t: &Tensor, ts: &[f64], conds: &[Cond]) -> Result<Vec<Tensor>> {
        if conds.len() == 1 {
            return Ok(vec![self.denoise(x_t, ts, &conds[0])?]);
        }
        let n = x_t.dim(0)?;
        let b = conds.len();
        let xs = Tensor::cat(&vec![x_t.clone(); b], 0)?;
        let tss: Vec<f64> = (0..b).flat_map(|_| ts.iter().copied()).collect();
        let ctx = Tensor::cat(&conds.iter().map(|c| c.ctx.clone()).collect::<Vec<_>>(), 0)?;
        let env = if conds[0].env.is_some() {
            let parts = conds
                .iter()
                .map(|c| c.env.clone().ok_or_else(|| Error::InvalidInput("mixed env branches".into())))
                .collect::<Result<Vec<_>>>()?;
            Some(Tensor::cat(&parts, 0)?)
        } else {
            None
        };
        let out = self.denoise(&xs, &tss, &Cond { ctx, env })?;
        (0..b).map(|i| Ok(out.narrow(0, i * n, n)?)).collect()
    }

    /// Mixture noise-prediction loss for given draws: per environment `k`,
    /// samples with `drops[k][i]` use the null token.
    pub fn eps_loss_with(
        &self,
        x0: &Tensor,
        ctx: &Tensor,
        w: &Tensor,
        ts: &[usize],
        eps: &Tensor,
        drops: &[Vec<bool>],
    ) -> Result<Tensor> {
        let xt = schedule::forward_corrupt(x0, ts, eps, &self.schedule)?;
        let tf: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
        let base = self.env_conds(ctx)?;
        if drops.len() != base.len() {
            return invalid(format!("{} drop masks for {} branches", drops.len(), base.len()));
        }
        let conds = base
            .iter()
            .zip(drops)
            .map(|(c, d)| self.drop_condition(c, d))
            .collect::<Result<Vec<_>>>()?;
        let preds = self.denoise_branches(&xt, &tf, &conds)?;
        mixture_loss(eps, &preds, w)
    }

    /// Draws steps, noise and per-branch drop masks, then evaluates
    /// [`Self::eps_loss_with`].
    pub fn eps_loss(&self, x0: &Tensor, ctx: &Tensor, w: &Tensor, p_drop: f64, rng: &mut seed::Rng) -> Result<Tensor> {
        let draws = LossDraws::sample(x0, self.num_branches(), self.schedule.steps(), p_drop, rng)?;
        self.eps_loss_with(x0, ctx, w, &draws.ts, &draws.eps, &draws.drops)
    }
}

/// Random inputs of one loss evaluation.
#[derive(Debug, Clone)]
pub struct LossDraws {
    pub ts: Vec<usize>,
    pub eps: Tensor,
    pub drops: Vec<Vec<bool>>,
}

impl LossDraws {
    pub fn sample(x0: &Tensor, branches: usize, steps: usize, p_drop: f64, rng: &mut seed::Rng) -> Result<Self> {
        use rand::Rng as _;
        let n = x0.dim(0)?;
        let ts = (0..n).map(|_| rng.random_range(1..=steps)).collect();
        let eps = gaussian_like(x0, rng)?;
        let drops = (0..branches)
            .map(|_| (0..n).map(|_| rng.random::<f64>() < p_drop).collect())
            .collect();
        Ok(Self { ts, eps, drops })
    }
}

/// Standard normal tensor with the shape and dtype of `like`, from `rng`.
pub fn gaussian_like(like: &Tensor, rng: &mut seed::Rng) -> Result<Tensor> {
    use rand::Rng as _;
    let n = like.elem_count();
    let v: Vec<f64> = (0..n).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
    Ok(Tensor::from_vec(v, like.shape(), &Device::Cpu)?.to_dtype(like.dtype())?)
}

/// `sum_k w[:, k] * preds[k]` in branch order.
pub fn mix(preds: &[Tensor], w: &Tensor) -> Result<Tensor> {
    let (n, k) = w.dims2()?;
    if preds.len() != k {
        return invalid(format!("{} predictions for {k} weights", preds.len()));
    }
    let mut acc: Option<Tensor> = None;
    for (j, p) in preds.iter().enumerate() {
        if p.dim(0)? != n {
            return invalid("prediction batch differs from weight batch");
        }
        let mut shape = vec![1usize; p.rank()];
        shape[0] = n;
        let wk = w.narrow(1, j, 1)?.reshape(shape)?;
        let term = p.broadcast_mul(&wk)?;
        acc = Some(match acc {
            None => term,
            Some(a) => (a + term)?,
        });
    }
    acc.ok_or_else(|| Error::InvalidInput("no branches to mix".into()))
}

/// Mean squared error between `eps` and the weighted mixture of branch
/// predictions; weights are treated as constants.
pub fn mixture_loss(eps: &Tensor, preds: &[Tensor], w: &Tensor) -> Result<Tensor> {
    let m = mix(preds, &w.detach())?;
    Ok((eps - m)?.sqr()?.mean_all()?)
}

/// Plain conditional noise-prediction loss.
pub fn conditional_loss(eps: &Tensor, pred: &Tensor) -> Result<Tensor> {
    Ok((eps - pred)?.sqr()?.mean_all()?)
}

/// Uniformly random points on the simplex (flat Dirichlet), `[n, k]`.
pub fn random_simplex(n: usize, k: usize, dtype: DType, rng: &mut seed::Rng) -> Result<Tensor> {
    use rand::Rng as _;
    let mut v = Vec::with_capacity(n * k);
    for _ in 0..n {
        let row: Vec<f64> = (0..k).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
        let s: f64 = row.iter().sum();
        v.extend(row.into_iter().map(|r| r / s));
    }
    Ok(Tensor::from_vec(v, (n, k), &Device::Cpu)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config(k: usize) -> ModelConfig {
        ModelConfig {
            k,
            h: 4,
            top_k: 2,
            diffusion_steps: 50,
            unet: UNetConfig {
                base: 4,
                mults: vec![1, 2],
                blocks_per_level: 1,
                groups: 2,
            },
            cat_embed_dim: 2,
            ..ModelConfig::default()
        }
    }

    fn shape() -> DataShape {
        DataShape {
            t: 8,
            d_x: 1,
            context_kinds: vec![
                ChannelKind::Continuous,
                ChannelKind::Categorical {
                    vocab: vec!["a".into(), "b".into()],
                },
            ],
        }
    }

    fn inputs(n: usize, dtype: DType) -> (Tensor, Tensor) {
        let mut rng = seed::rng(2);
        let x = gaussian_like(&Tensor::zeros((n, 8, 1), dtype, &Device::Cpu).unwrap(), &mut rng).unwrap();
        let mut c = Vec::new();
        for i in 0..n * 8 {
            c.push((i as f64 * 0.3).sin());
            c.push((i % 3) as f64);
        }
        let c = Tensor::from_vec(c, (n, 8, 2), &Device::Cpu).unwrap().to_dtype(dtype).unwrap();
        (x, c)
    }

    #[test]
    fn toy_mixture_cancels() {
        let eps = Tensor::new(&[[1.7f64]], &Device::Cpu).unwrap();
        let preds = [
            Tensor::new(&[[1.0f64]], &Device::Cpu).unwrap(),
            Tensor::new(&[[2.0f64]], &Device::Cpu).unwrap(),
        ];
        let w = Tensor::new(&[[0.3f64, 0.7]], &Device::Cpu).unwrap();
        let l = mixture_loss(&eps, &preds, &w).unwrap().to_scalar::<f64>().unwrap();
        assert!(l.abs() < 1e-28);
        let exact = mixture_loss(&eps, &[eps.clone(), eps.clone()], &w).unwrap();
        assert!(exact.to_scalar::<f64>().unwrap().abs() < 1e-28);
    }

    #[test]
    fn single_environment_loss_is_plain_conditional_loss() {
        let model = CatsgModel::new(&tiny_config(1), &shape(), DType::F32, 3).unwrap();
        let (x, c) = inputs(4, DType::F32);
        let ctx = model.encode_context(&c).unwrap();
        let w = model.posterior(&x, &ctx).unwrap().w;
        assert!(w.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|&v| v == 1.0));
        let mut rng = seed::rng(8);
        let draws = LossDraws::sample(&x, 1, 50, 0.0, &mut rng).unwrap();
        let mixture = model
            .eps_loss_with(&x, &ctx, &w, &draws.ts, &draws.eps, &draws.drops)
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        let xt = schedule::forward_corrupt(&x, &draws.ts, &draws.eps, &model.schedule).unwrap();
        let tf: Vec<f64> = draws.ts.iter().map(|&t| t as f64).collect();
        let cond = &model.env_conds(&ctx).unwrap()[0];
        let pred = model.denoise(&xt, &tf, cond).unwrap();
        let plain = conditional_loss(&draws.eps, &pred).unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(mixture.to_bits(), plain.to_bits());
    }

    #[test]
    fn dropping_everything_uses_the_null_token() {
        let model = CatsgModel::new(&tiny_config(2), &shape(), DType::F64, 3).unwrap();
        let (_, c) = inputs(3, DType::F64);
        let ctx = model.encode_context(&c).unwrap();
        let cond = &model.env_conds(&ctx).unwrap()[1];
        let dropped = model.drop_condition(cond, &[true, false, true]).unwrap();
        let null = model.null_cond(&ctx).unwrap();
        let d = dropped.env.unwrap().to_vec2::<f64>().unwrap();
        let z = null.env.unwrap().to_vec2::<f64>().unwrap();
        let e = cond.env.clone().unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(d[0], z[0]);
        assert_eq!(d[1], e[1]);
        let dc = dropped.ctx.to_vec3::<f64>().unwrap();
        assert!(dc[0].iter().flatten().all(|&v| v == 0.0));
        assert_eq!(dc[1], ctx.to_vec3::<f64>().unwrap()[1]);
    }

    #[test]
    fn batched_branches_match_separate_calls() {
        let model = CatsgModel::new(&tiny_config(3), &shape(), DType::F32, 1).unwrap();
        let (x, c) = inputs(2, DType::F32);
        let ctx = model.encode_context(&c).unwrap();
        let conds = model.env_conds(&ctx).unwrap();
        let ts = [10.0, 20.0];
        let batched = model.denoise_branches(&x, &ts, &conds).unwrap();
        for (k, cond) in conds.iter().enumerate() {
            let single = model.denoise(&x, &ts, cond).unwrap();
            let a = single.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let b = batched[k].flatten_all().unwrap().to_vec1::<f32>().unwrap();
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn unseen_categories_map_to_unk_row() {
        let model = CatsgModel::new(&tiny_config(1), &shape(), DType::F64, 1).unwrap();
        let c = Tensor::new(&[[[0.0f64, 2.0], [0.0, 7.0], [0.0, -1.0], [0.0, 1.0]]], &Device::Cpu).unwrap();
        let ctx = model.encode_context(&c).unwrap().to_vec3::<f64>().unwrap();
        assert_eq!(ctx[0][0], ctx[0][1]);
        assert_eq!(ctx[0][0], ctx[0][2]);
        assert_ne!(ctx[0][0], ctx[0][3]);
        assert_eq!(ctx[0][0].len(), 3);
    }

    #[test]
    fn random_simplex_rows_sum_to_one() {
        let w = random_simplex(50, 4, DType::F64, &mut seed::rng(0)).unwrap();
        for row in w.to_vec2::<f64>().unwrap() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }
}
