//! Variance-preserving noise schedule and the forward corruption process.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine,
}

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

/// Tables indexed by diffusion step `t = 0..=n`; entry 0 is the clean state
/// (`alpha_bar = 1`, `beta = 0`).
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    pub kind: ScheduleKind,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

pub fn make_schedule(n: usize, kind: ScheduleKind) -> Result<DiffusionSchedule> {
    if n == 0 {
        return invalid("schedule needs at least one step");
    }
    let f = |t: f64| {
        let a = (t / n as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
        a.cos().powi(2)
    };
    let mut beta = vec![0.0; n + 1];
    let mut alpha = vec![1.0; n + 1];
    let mut alpha_bar = vec![1.0; n + 1];
    let mut sigma = vec![0.0; n + 1];
    for t in 1..=n {
        let b = (1.0 - f(t as f64) / f((t - 1) as f64)).clamp(0.0, MAX_BETA);
        beta[t] = b;
        alpha[t] = 1.0 - b;
        alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
        sigma[t] = (1.0 - alpha_bar[t]).sqrt();
    }
    Ok(DiffusionSchedule {
        kind,
        beta,
        alpha,
        alpha_bar,
        sigma,
    })
}

impl DiffusionSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len() - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    fn check(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return invalid(format!("diffusion step {t} outside 0..={}", self.steps()));
        }
        Ok(())
    }

    /// `log sqrt(alpha_bar)` at a continuous time in `[0, n]`, linearly
    /// interpolated between integer steps.
    pub fn log_alpha(&self, t: f64) -> f64 {
        let n = self.steps() as f64;
        let t = t.clamp(0.0, n);
        let lo = t.floor() as usize;
        let hi = (lo + 1).min(self.steps());
        let frac = t - lo as f64;
        let a = 0.5 * self.alpha_bar[lo].ln();
        let b = 0.5 * self.alpha_bar[hi].ln();
        a + frac * (b - a)
    }

    pub fn sqrt_alpha_bar_at(&self, t: f64) -> f64 {
        self.log_alpha(t).exp()
    }

    pub fn sigma_at(&self, t: f64) -> f64 {
        (1.0 - (2.0 * self.log_alpha(t)).exp()).max(0.0).sqrt()
    }

    /// Half log-SNR `log(sqrt(alpha_bar) / sigma)`; strictly decreasing in `t`.
    pub fn lambda_at(&self, t: f64) -> f64 {
        self.log_alpha(t) - self.sigma_at(t).ln()
    }

    /// Continuous time with the given half log-SNR, found by bisection on
    /// `[lo, hi]`.
    pub fn time_for_lambda(&self, lambda: f64, lo: f64, hi: f64) -> f64 {
        let (mut a, mut b) = (lo, hi);
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if self.lambda_at(m) > lambda {
                a = m;
            } else {
                b = m;
            }
            if b - a < 1e-12 {
                break;
            }
        }
        0.5 * (a + b)
    }

    /// Per-sample `(sqrt(alpha_bar_t), sigma_t)` for integer steps.
    pub fn coefficients(&self, ts: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
        for &t in ts {
            self.check(t)?;
        }
        Ok((
            ts.iter().map(|&t| self.alpha_bar[t].sqrt()).collect(),
            ts.iter().map(|&t| self.sigma[t]).collect(),
        ))
    }
}

/// `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps` with one step per
/// sample along the leading axis.
pub fn forward_corrupt(x0: &Tensor, ts: &[usize], eps: &Tensor, schedule: &DiffusionSchedule) -> Result<Tensor> {
    let (a, s) = schedule.coefficients(ts)?;
    corrupt_with(x0, eps, &a, &s)
}

/// Forward corruption with explicit per-sample coefficients.
pub fn corrupt_with(x0: &Tensor, eps: &Tensor, sqrt_ab: &[f64], sigma: &[f64]) -> Result<Tensor> {
    if x0.dims() != eps.dims() {
        return invalid("noise and data shapes differ");
    }
    let n = x0.dim(0)?;
    if sqrt_ab.len() != n || sigma.len() != n {
        return invalid(format!("{n} samples but {} diffusion steps", sqrt_ab.len()));
    }
    let a = per_sample(sqrt_ab, x0)?;
    let s = per_sample(sigma, x0)?;
    Ok((x0.broadcast_mul(&a)? + eps.broadcast_mul(&s)?)?)
}

/// A `[n, 1, .., 1]` tensor matching the rank and dtype of `like`.
pub fn per_sample(values: &[f64], like: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1usize; like.rank()];
    shape[0] = values.len();
    Ok(Tensor::from_slice(values, shape, like.device())?.to_dtype(like.dtype())?)
}
