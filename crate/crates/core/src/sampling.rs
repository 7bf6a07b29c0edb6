//! Reverse-time sampling: backdoor-adjusted guided noise prediction, DDPM
//! ancestral and second-order DPM-Solver updates, and the interventional and
//! counterfactual generation procedures built on one shared reverse loop.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::bundle::{BundleMeta, ChannelKind, Series};
use crate::data;
use crate::diffusion::model::{gaussian_like, mix, random_simplex, CatsgModel, Cond};
use crate::diffusion::schedule::DiffusionSchedule;
use crate::diffusion::{Ablation, Checkpoint};
use crate::error::{invalid, Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sampler {
    #[serde(rename = "ddpm")]
    Ddpm,
    #[default]
    #[serde(rename = "dpms2")]
    DpmSolver2s,
}

impl Sampler {
    pub fn name(&self) -> &'static str {
        match self {
            Sampler::Ddpm => "ddpm",
            Sampler::DpmSolver2s => "dpms2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(Sampler::Ddpm),
            "dpms2" | "dpm_solver_2s" => Ok(Sampler::DpmSolver2s),
            _ => Err(Error::Config(format!("unknown sampler '{s}' (expected ddpm or dpms2)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub omega: f64,
    pub steps: usize,
    pub sampler: Sampler,
    pub seed: u64,
    /// Clamp the implied clean sample to `[-clip, clip]` in model space at
    /// every noise prediction; `None` disables it.
    pub clip: Option<f64>,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            omega: 1.0,
            steps: 20,
            sampler: Sampler::DpmSolver2s,
            seed: 0,
            clip: Some(2.0),
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self, schedule: &DiffusionSchedule) -> Result<()> {
        if !(self.omega >= 0.0) {
            return Err(Error::Config(format!("guidance scale must be >= 0, got {}", self.omega)));
        }
        if self.clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("sample.clip must be positive".into()));
        }
        if self.steps == 0 || self.steps > schedule.steps() {
            return Err(Error::Config(format!(
                "sampler steps must lie in 1..={}, got {}",
                schedule.steps(),
                self.steps
            )));
        }
        Ok(())
    }
}

fn assert_simplex(w: &Tensor) -> Result<()> {
    let rows = w.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    for (i, r) in rows.iter().enumerate() {
        let s: f64 = r.iter().sum();
        assert!(
            r.iter().all(|&v| v >= 0.0) && (s - 1.0).abs() < 1e-4,
            "posterior row {i} is not on the simplex (sum {s})"
        );
    }
    Ok(())
}

/// `(1 + omega) * mixed - omega * base`; `mixed` unchanged when `omega == 0`.
pub fn combine_guidance(mixed: &Tensor, base: Option<&Tensor>, omega: f64) -> Result<Tensor> {
    if omega == 0.0 {
        return Ok(mixed.clone());
    }
    let base = base.ok_or_else(|| Error::InvalidInput("guidance needs an unconditional prediction".into()))?;
    Ok(((mixed * (1.0 + omega))? - (base * omega)?)?)
}

/// Backdoor-adjusted noise prediction: every environment branch `(c, e_k)`
/// weighted by `w`, contrasted with the null-token prediction. Without an
/// environment bank this is standard classifier-free guidance.
pub fn backdoor_noise(model: &CatsgModel, x_t: &Tensor, ts: &[f64], ctx: &Tensor, w: &Tensor, omega: f64) -> Result<Tensor> {
    assert_simplex(w)?;
    let mut conds = model.env_conds(ctx)?;
    let k = conds.len();
    if omega != 0.0 {
        conds.push(model.null_cond(ctx)?);
    }
    let preds = model.denoise_branches(x_t, ts, &conds)?;
    let mixed = mix(&preds[..k], w)?;
    combine_guidance(&mixed, preds.get(k), omega)
}

/// Standard classifier-free guidance for a single condition.
pub fn cfg_noise(model: &CatsgModel, x_t: &Tensor, ts: &[f64], cond: &Cond, omega: f64) -> Result<Tensor> {
    if omega == 0.0 {
        return model.denoise(x_t, ts, cond);
    }
    let null = model.null_cond(&cond.ctx)?;
    let preds = model.denoise_branches(x_t, ts, &[cond.clone(), null])?;
    combine_guidance(&preds[0], Some(&preds[1]), omega)
}

/// Ancestral update from step `t` to an earlier step `t_prev` using the
/// effective variance between them (`t_prev = t - 1` is the plain DDPM
/// step). `noise` is ignored when `t_prev == 0`.
pub fn ddpm_step_between(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    t_prev: usize,
    schedule: &DiffusionSchedule,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    if t == 0 || t_prev >= t || t > schedule.steps() {
        return invalid(format!("invalid DDPM transition {t} -> {t_prev}"));
    }
    let ab_t = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t_prev);
    let alpha = ab_t / ab_prev;
    let beta = 1.0 - alpha;
    let coef = beta / (1.0 - ab_t).sqrt();
    let mean = ((x_t - (eps_hat * coef)?)? * (1.0 / alpha.sqrt()))?;
    match (t_prev, noise) {
        (0, _) => Ok(mean),
        (_, Some(z)) => Ok((mean + (z * beta.sqrt())?)?),
        (_, None) => invalid("DDPM step before the last needs noise"),
    }
}

/// One ancestral step `t -> t - 1` with `sigma_t^2 = beta_t` and no noise at `t = 1`.
pub fn ddpm_step(x_t: &Tensor, eps_hat: &Tensor, t: usize, schedule: &DiffusionSchedule, rng: &mut seed::Rng) -> Result<Tensor> {
    let noise = if t > 1 { Some(gaussian_like(x_t, rng)?) } else { None };
    ddpm_step_between(x_t, eps_hat, t, t - 1, schedule, noise.as_ref())
}

/// Second-order single-step DPM-Solver update between continuous times
/// `t_i > t_next`, with the midpoint halfway in half log-SNR.
pub fn dpm_solver_2s_step<F>(x: &Tensor, t_i: f64, t_next: f64, schedule: &DiffusionSchedule, eps_fn: &mut F) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    let l_i = schedule.lambda_at(t_i);
    let l_next = schedule.lambda_at(t_next);
    if !(l_next > l_i) {
        return invalid(format!("half log-SNR must increase from t={t_i} to t={t_next}"));
    }
    let h = l_next - l_i;
    let s = schedule.time_for_lambda(l_i + 0.5 * h, t_next, t_i);
    let a_i = schedule.sqrt_alpha_bar_at(t_i);
    let a_s = schedule.sqrt_alpha_bar_at(s);
    let a_next = schedule.sqrt_alpha_bar_at(t_next);
    let sig_s = schedule.sigma_at(s);
    let sig_next = schedule.sigma_at(t_next);
    let e1 = eps_fn(x, t_i)?;
    let u = ((x * (a_s / a_i))? - (e1 * (sig_s * (0.5 * h).exp_m1()))?)?;
    let e2 = eps_fn(&u, s)?;
    Ok(((x * (a_next / a_i))? - (e2 * (sig_next * h.exp_m1()))?)?)
}

/// Integer steps visited by a strided DDPM sampler, from `n` down to 1.
pub fn ddpm_timesteps(n: usize, steps: usize) -> Vec<usize> {
    if steps >= n {
        return (1..=n).rev().collect();
    }
    if steps == 1 {
        return vec![n];
    }
    let mut ts: Vec<usize> = (0..steps)
        .map(|i| (n as f64 - i as f64 * (n - 1) as f64 / (steps - 1) as f64).round() as usize)
        .collect();
    ts.dedup();
    ts
}

/// Continuous times uniformly spaced in half log-SNR from `n` to 1
/// (`steps + 1` boundaries).
pub fn dpm_timesteps(schedule: &DiffusionSchedule, steps: usize) -> Vec<f64> {
    let n = schedule.steps() as f64;
    let l0 = schedule.lambda_at(n);
    let l1 = schedule.lambda_at(1.0);
    (0..=steps)
        .map(|i| {
            if i == 0 {
                n
            } else if i == steps {
                1.0
            } else {
                let l = l0 + (l1 - l0) * i as f64 / steps as f64;
                schedule.time_for_lambda(l, 1.0, n)
            }
        })
        .collect()
}

/// Noise prediction consistent with the implied clean sample clamped to
/// `[-clip, clip]`. Near the end of the schedule `sqrt(alpha_bar)` is tiny
/// and small noise errors otherwise become huge clean-sample errors.
pub fn clip_noise(x_t: &Tensor, eps: &Tensor, t: f64, schedule: &DiffusionSchedule, clip: f64) -> Result<Tensor> {
    let a = schedule.sqrt_alpha_bar_at(t);
    let s = schedule.sigma_at(t);
    if s == 0.0 {
        return Ok(eps.clone());
    }
    let x0 = ((x_t - (eps * s)?)? / a)?.clamp(-clip, clip)?;
    Ok(((x_t - (x0 * a)?)? / s)?)
}

/// Runs the reverse process from `x_init` with an arbitrary noise predictor.
pub fn reverse_loop<F>(
    schedule: &DiffusionSchedule,
    x_init: &Tensor,
    cfg: &GuidanceConfig,
    rng: &mut seed::Rng,
    mut raw_eps: F,
) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    cfg.validate(schedule)?;
    let mut eps_fn = |x: &Tensor, t: f64| -> Result<Tensor> {
        let e = raw_eps(x, t)?;
        match cfg.clip {
            Some(c) => clip_noise(x, &e, t, schedule, c),
            None => Ok(e),
        }
    };
    let mut x = x_init.clone();
    match cfg.sampler {
        Sampler::Ddpm => {
            let ts = ddpm_timesteps(schedule.steps(), cfg.steps);
            for (i, &t) in ts.iter().enumerate() {
                let t_prev = ts.get(i + 1).copied().unwrap_or(0);
                let eps = eps_fn(&x, t as f64)?.detach();
                let noise = if t_prev > 0 { Some(gaussian_like(&x, rng)?) } else { None };
                x = ddpm_step_between(&x, &eps, t, t_prev, schedule, noise.as_ref())?.detach();
            }
        }
        Sampler::DpmSolver2s => {
            let ts = dpm_timesteps(schedule, cfg.steps);
            for pair in ts.windows(2) {
                x = dpm_solver_2s_step(&x, pair[0], pair[1], schedule, &mut |v: &Tensor, t: f64| {
                    Ok(eps_fn(v, t)?.detach())
                })?
                .detach();
            }
        }
    }
    Ok(x)
}

/// Where the environment weights of each noise prediction come from.
#[derive(Debug, Clone)]
pub enum PosteriorSource {
    /// Re-inferred from the current `(x_t, c)` at every noise prediction.
    Stepwise,
    /// A fixed `[N, K]` weight matrix.
    Fixed(Tensor),
    /// Fresh uniform-random simplex draws at every noise prediction.
    Random,
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    /// Generated series in physical units.
    pub x: Series,
    /// Number of environment-posterior evaluations made.
    pub posterior_calls: usize,
}

/// Guided generation for model-space context `c_model`, shared by every
/// generation mode.
pub fn sample_guided(
    ckpt: &Checkpoint,
    c_model: &Series,
    source: PosteriorSource,
    cfg: &GuidanceConfig,
) -> Result<SampleOutput> {
    let model = &ckpt.model;
    if c_model.t != model.shape.t || c_model.ch != model.shape.d_c() {
        return invalid(format!(
            "context is [{}, {}] per sample but the checkpoint expects [{}, {}]",
            c_model.t,
            c_model.ch,
            model.shape.t,
            model.shape.d_c()
        ));
    }
    let dtype = model.dtype();
    let n = c_model.n;
    let c = data::series_tensor(c_model, dtype)?;
    let ctx = model.encode_context(&c)?.detach();
    let mut rng = seed::rng_for(cfg.seed, "sample");
    let mut w_rng = seed::rng_for(cfg.seed, "sample/env");
    let template = Tensor::zeros((n, model.shape.t, model.shape.d_x), dtype, c.device())?;
    let x_init = gaussian_like(&template, &mut rng)?;
    let k = model.num_branches();
    let mut calls = 0usize;
    let x = reverse_loop(&model.schedule, &x_init, cfg, &mut rng, |x_t, t| {
        let w = if !model.uses_env() {
            Tensor::ones((n, 1), dtype, x_t.device())?
        } else {
            match &source {
                PosteriorSource::Stepwise => {
                    calls += 1;
                    model.posterior(x_t, &ctx)?.w.detach()
                }
                PosteriorSource::Fixed(w) => w.clone(),
                PosteriorSource::Random => random_simplex(n, k, dtype, &mut w_rng)?,
            }
        };
        backdoor_noise(model, x_t, &vec![t; n], &ctx, &w, cfg.omega)
    })?;
    let x = data::tensor_series(&x)?;
    Ok(SampleOutput {
        x: ckpt.normalizer.x_from_model(&x),
        posterior_calls: calls,
    })
}

fn check_context(ckpt: &Checkpoint, c: &Series) -> Result<()> {
    let shape = &ckpt.model.shape;
    if c.t != shape.t || c.ch != shape.d_c() {
        return invalid(format!(
            "context is [{}, {}] per sample but the checkpoint expects [{}, {}]",
            c.t,
            c.ch,
            shape.t,
            shape.d_c()
        ));
    }
    Ok(())
}

/// Interventional generation for physical context `c`: posterior weights
/// re-inferred from the current noisy state at every noise prediction.
pub fn sample_interventional(ckpt: &Checkpoint, c: &Series, cfg: &GuidanceConfig) -> Result<SampleOutput> {
    check_context(ckpt, c)?;
    let source = if ckpt.ablation() == Ablation::RandEnv {
        PosteriorSource::Random
    } else {
        PosteriorSource::Stepwise
    };
    sample_guided(ckpt, &ckpt.normalizer.c_to_model(c), source, cfg)
}

/// Posterior of a factual pair (physical units), `[N, K]`. Models trained
/// with random weights draw them from `seed` instead.
pub fn abduct(ckpt: &Checkpoint, x0: &Series, c: &Series, seed_value: u64) -> Result<Tensor> {
    let model = &ckpt.model;
    let dtype = model.dtype();
    if !model.uses_env() {
        return Ok(Tensor::ones((x0.n, 1), dtype, &candle_core::Device::Cpu)?);
    }
    if ckpt.ablation() == Ablation::RandEnv {
        let mut rng = seed::rng_for(seed_value, "abduct/random");
        return random_simplex(x0.n, model.num_branches(), dtype, &mut rng);
    }
    let x = data::series_tensor(&ckpt.normalizer.x_to_model(x0), dtype)?;
    let cm = data::series_tensor(&ckpt.normalizer.c_to_model(c), dtype)?;
    let ctx = model.encode_context(&cm)?;
    Ok(model.posterior(&x, &ctx)?.w.detach())
}

/// Counterfactual generation: abduct the posterior once from the factual
/// pair `(x0, c)`, then generate from fresh noise under `c_prime` with the
/// posterior frozen.
pub fn sample_counterfactual(
    ckpt: &Checkpoint,
    x0: &Series,
    c: &Series,
    c_prime: &Series,
    cfg: &GuidanceConfig,
) -> Result<SampleOutput> {
    check_context(ckpt, c)?;
    check_context(ckpt, c_prime)?;
    if x0.n == 0 || x0.n != c.n || c.n != c_prime.n {
        return invalid("counterfactual generation needs matching factual pairs and actions");
    }
    if x0.t != ckpt.model.shape.t || x0.ch != ckpt.model.shape.d_x {
        return invalid("factual target does not match the checkpoint layout");
    }
    let w = abduct(ckpt, x0, c, cfg.seed)?;
    let calls = usize::from(ckpt.model.uses_env() && ckpt.ablation() != Ablation::RandEnv);
    let mut out = sample_guided(ckpt, &ckpt.normalizer.c_to_model(c_prime), PosteriorSource::Fixed(w), cfg)?;
    out.posterior_calls += calls;
    Ok(out)
}

/// A context edit applied to every sample and time step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextEdit {
    /// Channel name or index.
    pub channel: serde_json::Value,
    pub op: EditOp,
    /// Number, or category name for categorical channels.
    pub value: serde_json::Value,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditOp {
    Add,
    Set,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextAction {
    pub edits: Vec<ContextEdit>,
}

impl ContextAction {
    pub fn parse(json: &str) -> Result<Self> {
        serde_json::from_str(json).map_err(|e| Error::Config(format!("invalid action: {e}")))
    }

    /// Applies the edits to physical-unit context `c`.
    pub fn apply(&self, c: &Series, meta: &BundleMeta) -> Result<Series> {
        let mut out = c.clone();
        for edit in &self.edits {
            let ch = resolve_channel(&edit.channel, meta)?;
            let kind = meta.context_kind(ch);
            let value = match (&kind, &edit.value) {
                (ChannelKind::Categorical { vocab }, serde_json::Value::String(s)) => {
                    if edit.op == EditOp::Add {
                        return Err(Error::Config("cannot add to a categorical channel".into()));
                    }
                    vocab.iter().position(|v| v == s).unwrap_or(vocab.len()) as f64
                }
                (_, v) => v
                    .as_f64()
                    .ok_or_else(|| Error::Config(format!("edit value {v} is not a number")))?,
            };
            for i in 0..out.n {
                for t in 0..out.t {
                    let cur = out.get(i, t, ch) as f64;
                    let next = match edit.op {
                        EditOp::Add => cur + value,
                        EditOp::Set => value,
                    };
                    out.set(i, t, ch, next as f32);
                }
            }
        }
        Ok(out)
    }
}

fn resolve_channel(v: &serde_json::Value, meta: &BundleMeta) -> Result<usize> {
    let names = meta.context_names();
    let idx = match v {
        serde_json::Value::Number(n) => n.as_u64().map(|i| i as usize),
        serde_json::Value::String(s) => names.iter().position(|n| n == s),
        _ => None,
    };
    match idx {
        Some(i) if i < meta.d_c => Ok(i),
        _ => Err(Error::Config(format!(
            "unknown context channel {v} (available: {})",
            names.join(", ")
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::schedule::{forward_corrupt, make_schedule, ScheduleKind};
    use candle_core::Device;

    fn sched() -> DiffusionSchedule {
        make_schedule(1000, ScheduleKind::Cosine).unwrap()
    }

    #[test]
    fn guidance_toy_value() {
        // K=2, w=(0.5,0.5), eps_env=(+1,-1), eps_base=0.3, omega=1 -> -0.3
        let w = Tensor::new(&[[0.5f64, 0.5]], &Device::Cpu).unwrap();
        let preds = [
            Tensor::new(&[[1.0f64]], &Device::Cpu).unwrap(),
            Tensor::new(&[[-1.0f64]], &Device::Cpu).unwrap(),
        ];
        let mixed = mix(&preds, &w).unwrap();
        let base = Tensor::new(&[[0.3f64]], &Device::Cpu).unwrap();
        let out = combine_guidance(&mixed, Some(&base), 1.0).unwrap().to_vec2::<f64>().unwrap();
        assert!((out[0][0] + 0.3).abs() < 1e-15);
    }

    #[test]
    fn single_step_denoise_recovers_data() {
        let s = sched();
        let x0 = Tensor::new(&[[[0.3f64], [-1.2]], [[2.0], [0.0]]], &Device::Cpu).unwrap();
        let eps = Tensor::new(&[[[0.5f64], [1.5]], [[-0.7], [0.1]]], &Device::Cpu).unwrap();
        let x1 = forward_corrupt(&x0, &[1, 1], &eps, &s).unwrap();
        let back = ddpm_step(&x1, &eps, 1, &s, &mut seed::rng(0)).unwrap();
        let a = back.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b = x0.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-6);
        }
    }

    #[test]
    fn vanishing_beta_step_is_identity_scaling() {
        let s = sched();
        let x = Tensor::new(&[[[1.0f64]]], &Device::Cpu).unwrap();
        let eps = Tensor::new(&[[[0.4f64]]], &Device::Cpu).unwrap();
        let y = ddpm_step_between(&x, &eps, 1, 0, &s, None).unwrap().to_vec3::<f64>().unwrap();
        // beta_1 is tiny for the cosine schedule.
        assert!((y[0][0][0] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn ddpm_steps_are_seeded() {
        let s = sched();
        let x = Tensor::new(&[[[1.0f64], [0.5]]], &Device::Cpu).unwrap();
        let eps = x.zeros_like().unwrap();
        let a = ddpm_step(&x, &eps, 500, &s, &mut seed::rng(3)).unwrap().to_vec3::<f64>().unwrap();
        let b = ddpm_step(&x, &eps, 500, &s, &mut seed::rng(3)).unwrap().to_vec3::<f64>().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_drift_solver_step_scales_state() {
        let s = sched();
        let x = Tensor::new(&[[[1.5f64], [-2.0]]], &Device::Cpu).unwrap();
        let mut zero = |v: &Tensor, _t: f64| Ok(v.zeros_like()?);
        let y = dpm_solver_2s_step(&x, 800.0, 400.0, &s, &mut zero).unwrap();
        let ratio = s.sqrt_alpha_bar_at(400.0) / s.sqrt_alpha_bar_at(800.0);
        let yv = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!((yv[0] - 1.5 * ratio).abs() < 1e-12);
        assert!((yv[1] + 2.0 * ratio).abs() < 1e-12);
        assert!(dpm_solver_2s_step(&x, 400.0, 800.0, &s, &mut zero).is_err());
    }

    #[test]
    fn solver_with_true_noise_recovers_deterministic_path() {
        // For data concentrated at a point x0, the exact noise predictor is
        // (x - sqrt(ab) x0) / sigma and the probability-flow ODE keeps
        // x = sqrt(ab) x0 + sigma eps_0 along the whole path.
        let s = sched();
        let x0 = 0.8f64;
        let e0 = -0.6f64;
        let t0 = 900.0;
        let start = s.sqrt_alpha_bar_at(t0) * x0 + s.sigma_at(t0) * e0;
        let x = Tensor::new(&[[[start]]], &Device::Cpu).unwrap();
        let mut eps = |v: &Tensor, t: f64| {
            let a = s.sqrt_alpha_bar_at(t);
            let sg = s.sigma_at(t);
            Ok(((v - a * x0)? / sg)?)
        };
        let y = dpm_solver_2s_step(&x, t0, 300.0, &s, &mut eps).unwrap();
        let expect = s.sqrt_alpha_bar_at(300.0) * x0 + s.sigma_at(300.0) * e0;
        assert!((y.flatten_all().unwrap().to_vec1::<f64>().unwrap()[0] - expect).abs() < 1e-9);
    }

    #[test]
    fn timestep_grids() {
        assert_eq!(ddpm_timesteps(1000, 1000).len(), 1000);
        let t = ddpm_timesteps(1000, 5);
        assert_eq!(t, vec![1000, 750, 501, 251, 1]);
        let s = sched();
        let d = dpm_timesteps(&s, 20);
        assert_eq!(d.len(), 21);
        assert_eq!(d[0], 1000.0);
        assert_eq!(d[20], 1.0);
        for p in d.windows(2) {
            assert!(p[0] > p[1]);
        }
    }

    #[test]
    fn action_edits_apply() {
        let meta: BundleMeta = serde_json::from_value(serde_json::json!({
            "schema_version": 1, "dataset_id": "x", "scenario": "s", "splits": {},
            "T": 2, "D": 1, "D_c": 2, "dt": 1.0, "channel_names": ["y", "temp", "weather"],
            "normalization": {"min": [0,0,0], "max": [1,1,1]}, "seed": 0,
            "context_kinds": [{"kind": "continuous"}, {"kind": "categorical", "vocab": ["Clear", "Rain"]}]
        }))
        .unwrap();
        let c = Series::new(1, 2, 2, vec![1.0, 0.0, 2.0, 0.0]).unwrap();
        let action = ContextAction::parse(
            r#"{"edits":[{"channel":"temp","op":"add","value":0.5},{"channel":1,"op":"set","value":"Rain"}]}"#,
        )
        .unwrap();
        let out = action.apply(&c, &meta).unwrap();
        assert_eq!(out.data, vec![1.5, 1.0, 2.5, 1.0]);
        assert!(ContextAction::parse(r#"{"edits":[{"channel":"nope","op":"add","value":1}]}"#)
            .unwrap()
            .apply(&c, &meta)
            .is_err());
    }
}
