//! Channels-last 1D U-Net noise predictor with a sinusoidal timestep MLP.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::{self, Conv1d, GroupNorm, Init, Linear, Padding};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    /// Width of the first resolution; later levels use `base * mults[l]`.
    pub base: usize,
    pub mults: Vec<usize>,
    pub blocks_per_level: usize,
    pub groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            base: 64,
            mults: vec![1, 2, 4],
            blocks_per_level: 2,
            groups: 8,
        }
    }
}

impl UNetConfig {
    /// Sequence lengths must be divisible by this.
    pub fn length_multiple(&self) -> usize {
        1 << self.mults.len().saturating_sub(1)
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv1d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv1d,
    skip: Option<Linear>,
}

impl ResBlock {
    fn new(init: &mut Init, in_ch: usize, out_ch: usize, temb: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&mut init.pp("norm1"), in_ch, groups)?,
            conv1: Conv1d::new(&mut init.pp("conv1"), in_ch, out_ch, 3, 1, 1, Padding::Same)?,
            time: Linear::new(&mut init.pp("time"), temb, out_ch)?,
            norm2: GroupNorm::new(&mut init.pp("norm2"), out_ch, groups)?,
            conv2: Conv1d::new(&mut init.pp("conv2"), out_ch, out_ch, 3, 1, 1, Padding::Same)?,
            skip: if in_ch != out_ch {
                Some(Linear::new(&mut init.pp("skip"), in_ch, out_ch)?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let h = h.broadcast_add(&self.time.forward(temb)?.unsqueeze(1)?)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?)
    }
}

#[derive(Debug, Clone)]
struct Level {
    blocks: Vec<ResBlock>,
    resample: Option<Conv1d>,
}

#[derive(Debug, Clone)]
pub struct UNet {
    cfg: UNetConfig,
    in_ch: usize,
    out_ch: usize,
    input: Conv1d,
    time1: Linear,
    time2: Linear,
    down: Vec<Level>,
    mid: ResBlock,
    up: Vec<Level>,
    out_norm: GroupNorm,
    output: Conv1d,
}

impl UNet {
    pub fn new(init: &mut Init, in_ch: usize, out_ch: usize, cfg: &UNetConfig) -> Result<Self> {
        if cfg.base == 0 || cfg.mults.is_empty() || cfg.blocks_per_level == 0 {
            return invalid("U-Net needs a positive width, at least one level and one block per level");
        }
        let temb = 4 * cfg.base;
        let widths: Vec<usize> = cfg.mults.iter().map(|m| m * cfg.base).collect();
        let levels = widths.len();
        let input = Conv1d::new(&mut init.pp("input"), in_ch, cfg.base, 3, 1, 1, Padding::Same)?;
        let time1 = Linear::new(&mut init.pp("time1"), cfg.base, temb)?;
        let time2 = Linear::new(&mut init.pp("time2"), temb, temb)?;

        let mut down = Vec::new();
        let mut ch = cfg.base;
        for (l, &w) in widths.iter().enumerate() {
            let mut li = init.pp(&format!("down{l}"));
            let mut blocks = Vec::new();
            for b in 0..cfg.blocks_per_level {
                blocks.push(ResBlock::new(&mut li.pp(&format!("block{b}")), ch, w, temb, cfg.groups)?);
                ch = w;
            }
            let resample = if l + 1 < levels {
                Some(Conv1d::new(&mut li.pp("downsample"), w, w, 3, 1, 2, Padding::Same)?)
            } else {
                None
            };
            down.push(Level { blocks, resample });
        }
        let mid = ResBlock::new(&mut init.pp("mid"), ch, ch, temb, cfg.groups)?;

        let mut up = Vec::new();
        for l in (0..levels).rev() {
            let w = widths[l];
            let mut li = init.pp(&format!("up{l}"));
            let mut blocks = Vec::new();
            for b in 0..cfg.blocks_per_level {
                let cin = if b == 0 { ch + w } else { w };
                blocks.push(ResBlock::new(&mut li.pp(&format!("block{b}")), cin, w, temb, cfg.groups)?);
                ch = w;
            }
            let resample = if l > 0 {
                Some(Conv1d::new(&mut li.pp("upsample"), w, widths[l - 1], 3, 1, 1, Padding::Same)?)
            } else {
                None
            };
            if l > 0 {
                ch = widths[l - 1];
            }
            up.push(Level { blocks, resample });
        }
        let out_norm = GroupNorm::new(&mut init.pp("out_norm"), ch, cfg.groups)?;
        let output = Conv1d::new(&mut init.pp("output"), ch, out_ch, 3, 1, 1, Padding::Same)?;
        Ok(Self {
            cfg: cfg.clone(),
            in_ch,
            out_ch,
            input,
            time1,
            time2,
            down,
            mid,
            up,
            out_norm,
            output,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn in_channels(&self) -> usize {
        self.in_ch
    }

    /// `x`: `[N, T, in_ch]` (noisy target already concatenated with the
    /// conditioning channels), `ts`: one diffusion time per sample.
    pub fn forward(&self, x: &Tensor, ts: &[f64]) -> Result<Tensor> {
        let (n, t, c) = x.dims3()?;
        if c != self.in_ch {
            return invalid(format!("U-Net expects {} input channels, got {c}", self.in_ch));
        }
        if ts.len() != n {
            return invalid(format!("{n} samples but {} timesteps", ts.len()));
        }
        let m = self.cfg.length_multiple();
        if t % m != 0 {
            return invalid(format!("sequence length {t} is not a multiple of {m}"));
        }
        let temb = nn::timestep_embedding(ts, self.cfg.base, x.dtype())?;
        let temb = self.time2.forward(&self.time1.forward(&temb)?.silu()?)?;

        let mut h = self.input.forward(x)?;
        let mut skips = Vec::new();
        for level in &self.down {
            for b in &level.blocks {
                h = b.forward(&h, &temb)?;
            }
            skips.push(h.clone());
            if let Some(d) = &level.resample {
                h = d.forward(&h)?;
            }
        }
        h = self.mid.forward(&h, &temb)?;
        for level in &self.up {
            let skip = skips.pop().expect("one skip per level");
            h = Tensor::cat(&[&h, &skip], 2)?;
            for b in &level.blocks {
                h = b.forward(&h, &temb)?;
            }
            if let Some(u) = &level.resample {
                h = u.forward(&nn::upsample2(&h)?)?;
            }
        }
        let out = self.output.forward(&self.out_norm.forward(&h)?.silu()?)?;
        debug_assert_eq!(out.dim(2)?, self.out_ch);
        Ok(out)
    }
}
