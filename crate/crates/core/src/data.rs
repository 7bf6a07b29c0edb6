//! Model-space views of series bundles and the two-view augmentation used by
//! the swapped-prediction objective.

use candle_core::{DType, Device, Tensor};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bundle::{BundleMeta, ChannelKind, Series};
use crate::error::Result;
use crate::seed;

/// Maps physical values to the `[-1, 1]` model range using the bundle's
/// train-split min/max. Categorical and phase channels pass through.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub x_min: Vec<f64>,
    pub x_max: Vec<f64>,
    pub c_min: Vec<f64>,
    pub c_max: Vec<f64>,
    pub context_kinds: Vec<ChannelKind>,
}

fn scale(v: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    if span > 0.0 {
        2.0 * (v - lo) / span - 1.0
    } else {
        v - lo
    }
}

fn unscale(u: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    if span > 0.0 {
        (u + 1.0) * 0.5 * span + lo
    } else {
        u + lo
    }
}

impl Normalizer {
    pub fn from_meta(meta: &BundleMeta) -> Self {
        let n = &meta.normalization;
        Self {
            x_min: n.min[..meta.d].to_vec(),
            x_max: n.max[..meta.d].to_vec(),
            c_min: n.min[meta.d..].to_vec(),
            c_max: n.max[meta.d..].to_vec(),
            context_kinds: meta.context_kinds_full(),
        }
    }

    pub fn x_to_model(&self, s: &Series) -> Series {
        let mut out = s.clone();
        for (k, v) in out.data.iter_mut().enumerate() {
            let c = k % s.ch;
            *v = scale(*v as f64, self.x_min[c], self.x_max[c]) as f32;
        }
        out
    }

    pub fn x_from_model(&self, s: &Series) -> Series {
        let mut out = s.clone();
        for (k, v) in out.data.iter_mut().enumerate() {
            let c = k % s.ch;
            *v = unscale(*v as f64, self.x_min[c], self.x_max[c]) as f32;
        }
        out
    }

    pub fn c_to_model(&self, s: &Series) -> Series {
        let mut out = s.clone();
        for (k, v) in out.data.iter_mut().enumerate() {
            let c = k % s.ch;
            if self.context_kinds[c].is_continuous() {
                *v = scale(*v as f64, self.c_min[c], self.c_max[c]) as f32;
            }
        }
        out
    }

    pub fn continuous_mask(&self) -> Vec<bool> {
        self.context_kinds.iter().map(|k| k.is_continuous()).collect()
    }
}

/// Paired model-space target and context.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Series,
    pub c: Series,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.x.n
    }

    pub fn is_empty(&self) -> bool {
        self.x.n == 0
    }

    pub fn select(&self, idx: &[usize]) -> Batch {
        Batch {
            x: self.x.select(idx),
            c: self.c.select(idx),
        }
    }
}

pub fn series_tensor(s: &Series, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_slice(&s.data, (s.n, s.t, s.ch), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn tensor_series(t: &Tensor) -> Result<Series> {
    let (n, len, ch) = t.dims3()?;
    let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Series::new(n, len, ch, data)
}

/// Per-channel standard deviation of a series (pooled over samples and time).
pub fn channel_std(s: &Series) -> Vec<f64> {
    (0..s.ch)
        .map(|c| {
            let v = s.channel_values(c);
            let n = v.len().max(1) as f64;
            let mean = v.iter().sum::<f64>() / n;
            (v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Jitter standard deviation as a fraction of each channel's train std.
    pub jitter: f64,
    pub scale_lo: f64,
    pub scale_hi: f64,
    /// Maximum circular shift as a fraction of the sequence length.
    pub max_shift_frac: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            jitter: 0.05,
            scale_lo: 0.9,
            scale_hi: 1.1,
            max_shift_frac: 0.125,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            jitter: 0.0,
            scale_lo: 1.0,
            scale_hi: 1.0,
            max_shift_frac: 0.0,
        }
    }
}

/// Train-split statistics the augmentation needs.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentStats {
    pub x_std: Vec<f64>,
    pub c_std: Vec<f64>,
    pub c_continuous: Vec<bool>,
}

impl AugmentStats {
    pub fn from_batch(b: &Batch, c_continuous: Vec<bool>) -> Self {
        Self {
            x_std: channel_std(&b.x),
            c_std: channel_std(&b.c),
            c_continuous,
        }
    }
}

/// Rolls every sample along time by `shift` steps (positive moves forward).
pub fn circular_shift(s: &Series, shift: isize) -> Series {
    let mut out = s.clone();
    let t = s.t as isize;
    for i in 0..s.n {
        for tt in 0..s.t {
            let src = (tt as isize - shift).rem_euclid(t) as usize;
            for c in 0..s.ch {
                out.set(i, tt, c, s.get(i, src, c));
            }
        }
    }
    out
}

/// Synchronised jitter, magnitude scaling and circular shift of `(x, c)`.
/// Scaling and jitter touch only continuous context channels.
pub fn augment(batch: &Batch, stats: &AugmentStats, cfg: &AugmentConfig, rng: &mut seed::Rng) -> Batch {
    let mut x = batch.x.clone();
    let mut c = batch.c.clone();
    let max_shift = (cfg.max_shift_frac * batch.x.t as f64).floor() as isize;
    for i in 0..batch.len() {
        let factor = if cfg.scale_hi > cfg.scale_lo {
            rng.random_range(cfg.scale_lo..cfg.scale_hi)
        } else {
            cfg.scale_lo
        };
        let shift = if max_shift > 0 {
            rng.random_range(-(max_shift as i64)..=max_shift as i64) as isize
        } else {
            0
        };
        let t = x.t as isize;
        for tt in 0..x.t {
            let src = (tt as isize - shift).rem_euclid(t) as usize;
            for ch in 0..x.ch {
                let mut v = batch.x.get(i, src, ch) as f64 * factor;
                if cfg.jitter > 0.0 {
                    let z: f64 = rng.sample(StandardNormal);
                    v += cfg.jitter * stats.x_std[ch] * z;
                }
                x.set(i, tt, ch, v as f32);
            }
            for ch in 0..c.ch {
                let raw = batch.c.get(i, src, ch) as f64;
                let v = if stats.c_continuous[ch] {
                    let mut v = raw * factor;
                    if cfg.jitter > 0.0 {
                        let z: f64 = rng.sample(StandardNormal);
                        v += cfg.jitter * stats.c_std[ch] * z;
                    }
                    v
                } else {
                    raw
                };
                c.set(i, tt, ch, v as f32);
            }
        }
    }
    Batch { x, c }
}
