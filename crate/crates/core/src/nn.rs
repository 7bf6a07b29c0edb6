//! Small channels-last (`[batch, time, channel]`) layers on top of candle
//! tensors. Parameters live in a [`ParamStore`] and are initialised from a
//! seeded ChaCha stream so model construction is reproducible.

use std::collections::{BTreeMap, BTreeSet};

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::seed;

/// Named parameter registry.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    frozen: BTreeSet<String>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            frozen: BTreeSet::new(),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn freeze(&mut self, name: &str) {
        self.frozen.insert(name.to_string());
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    /// Variables handed to the optimiser, in name order.
    pub fn trainable(&self) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(k, _)| !self.frozen.contains(*k))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites a parameter in place; shapes must match.
    pub fn assign(&self, name: &str, values: &[f32]) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Schema(format!("unknown parameter '{name}'")))?;
        if var.elem_count() != values.len() {
            return Err(Error::Schema(format!(
                "parameter '{name}' has {} values, blob has {}",
                var.elem_count(),
                values.len()
            )));
        }
        let t = Tensor::from_slice(values, var.shape(), &self.device)?.to_dtype(self.dtype)?;
        var.set(&t)?;
        Ok(())
    }

    pub fn builder<'a>(&'a mut self, rng: &'a mut seed::Rng) -> Init<'a> {
        Init {
            store: self,
            rng,
            prefix: String::new(),
        }
    }
}

/// Parameter initialiser scoped to a name prefix.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut seed::Rng,
    prefix: String,
}

#[derive(Clone, Copy, Debug)]
pub enum Fill {
    Uniform(f64),
    Normal(f64),
    Const(f64),
}

impl<'a> Init<'a> {
    pub fn pp(&mut self, name: &str) -> Init<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Init {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], fill: Fill) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        if self.store.vars.contains_key(&full) {
            return Err(Error::InvalidInput(format!("duplicate parameter '{full}'")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match fill {
            Fill::Uniform(a) => (0..n).map(|_| self.rng.random_range(-a..=a)).collect(),
            Fill::Normal(s) => (0..n)
                .map(|_| s * self.rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect(),
            Fill::Const(c) => vec![c; n],
        };
        let t = Tensor::from_vec(values, shape, &self.store.device)?.to_dtype(self.store.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.store.vars.insert(full, var);
        Ok(out)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }
}

/// Applies `f` to a rank-3 tensor as if it were rank 2 over its last dim.
fn over_last<F>(x: &Tensor, f: F) -> Result<Tensor>
where
    F: FnOnce(&Tensor) -> candle_core::Result<Tensor>,
{
    match x.rank() {
        2 => Ok(f(x)?),
        3 => {
            let (n, t, c) = x.dims3()?;
            let y = f(&x.reshape((n * t, c))?)?;
            let out = y.dim(1)?;
            Ok(y.reshape((n, t, out))?)
        }
        r => Err(Error::InvalidInput(format!("expected rank 2 or 3, got {r}"))),
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(init: &mut Init, in_dim: usize, out_dim: usize) -> Result<Self> {
        let a = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: init.param("weight", &[in_dim, out_dim], Fill::Uniform(a))?,
            bias: init.param("bias", &[out_dim], Fill::Uniform(a))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        over_last(x, |x2| x2.matmul(&self.weight)?.broadcast_add(&self.bias))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Symmetric padding that preserves length.
    Same,
    /// Left padding only; output at `t` sees inputs `<= t`.
    Causal,
}

/// 1D convolution as a sum of per-tap matmuls over channels-last input.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub kernel: usize,
    pub dilation: usize,
    pub stride: usize,
    pub padding: Padding,
    in_ch: usize,
}

impl Conv1d {
    pub fn new(
        init: &mut Init,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        dilation: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        if stride != 1 && stride != 2 {
            return Err(Error::InvalidInput("conv stride must be 1 or 2".into()));
        }
        let a = 1.0 / ((in_ch * kernel) as f64).sqrt();
        Ok(Self {
            weight: init.param("weight", &[kernel * in_ch, out_ch], Fill::Uniform(a))?,
            bias: init.param("bias", &[out_ch], Fill::Uniform(a))?,
            kernel,
            dilation,
            stride,
            padding,
            in_ch,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, t, c) = x.dims3()?;
        if c != self.in_ch {
            return Err(Error::InvalidInput(format!(
                "conv expects {} channels, got {c}",
                self.in_ch
            )));
        }
        if self.stride == 2 && t % 2 != 0 {
            return Err(Error::InvalidInput(format!(
                "stride-2 conv needs an even length, got {t}"
            )));
        }
        let span = (self.kernel - 1) * self.dilation;
        let left = match self.padding {
            Padding::Same => span / 2,
            Padding::Causal => span,
        };
        let out = self.weight.dim(1)?;
        let flat = x.contiguous()?.reshape((n * t, c))?;
        // Each tap multiplies the unshifted input; the product is shifted in
        // time instead, which avoids materialising the stacked taps.
        let mut acc: Option<Tensor> = None;
        for j in 0..self.kernel {
            let offset = (j * self.dilation) as isize - left as isize;
            let shift = offset.unsigned_abs();
            if shift >= t {
                continue;
            }
            let w = self.weight.narrow(0, j * c, c)?;
            let y = flat.matmul(&w)?.reshape((n, t, out))?;
            let y = match offset.signum() {
                0 => y,
                1 => y.narrow(1, shift, t - shift)?.pad_with_zeros(1, 0, shift)?,
                _ => y.narrow(1, 0, t - shift)?.pad_with_zeros(1, shift, 0)?,
            };
            acc = Some(match acc {
                None => y,
                Some(a) => (a + y)?,
            });
        }
        let y = match acc {
            Some(y) => y,
            None => Tensor::zeros((n, t, out), x.dtype(), x.device())?,
        };
        let y = if self.stride == 2 {
            y.reshape((n, t / 2, 2, out))?.narrow(2, 0, 1)?.squeeze(2)?
        } else {
            y
        };
        Ok(y.broadcast_add(&self.bias)?)
    }
}

/// Group normalisation over `(time, channels-in-group)`.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(init: &mut Init, channels: usize, groups: usize) -> Result<Self> {
        let groups = largest_divisor_at_most(channels, groups);
        Ok(Self {
            gamma: init.param("gamma", &[channels], Fill::Const(1.0))?,
            beta: init.param("beta", &[channels], Fill::Const(0.0))?,
            groups,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, t, c) = x.dims3()?;
        let g = self.groups;
        let per = c / g;
        // Group statistics as matmuls against indicator matrices: strided
        // reductions over (time, channel-in-group) are slow on the CPU backend.
        let mut avg = vec![0.0f64; t * c * g];
        for i in 0..t * c {
            avg[i * g + (i % c) / per] = 1.0 / (t * per) as f64;
        }
        let spread: Vec<f64> = (0..g * t * c)
            .map(|k| {
                let (grp, i) = (k / (t * c), k % (t * c));
                if (i % c) / per == grp {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let avg = Tensor::from_vec(avg, (t * c, g), x.device())?.to_dtype(x.dtype())?;
        let spread = Tensor::from_vec(spread, (g, t * c), x.device())?.to_dtype(x.dtype())?;
        let flat = x.contiguous()?.reshape((n, t * c))?;
        let mean = flat.matmul(&avg)?.matmul(&spread)?;
        let centered = (flat - mean)?;
        let var = centered.sqr()?.matmul(&avg)?;
        let inv = (var + self.eps)?.sqrt()?.recip()?.matmul(&spread)?;
        Ok((centered * inv)?
            .reshape((n, t, c))?
            .broadcast_mul(&self.gamma)?
            .broadcast_add(&self.beta)?)
    }
}

fn largest_divisor_at_most(n: usize, cap: usize) -> usize {
    (1..=cap.min(n)).rev().find(|g| n % g == 0).unwrap_or(1)
}

/// Layer normalisation over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(init: &mut Init, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: init.param("gamma", &[dim], Fill::Const(1.0))?,
            beta: init.param("beta", &[dim], Fill::Const(0.0))?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        Ok(centered
            .broadcast_div(&(var + self.eps)?.sqrt()?)?
            .broadcast_mul(&self.gamma)?
            .broadcast_add(&self.beta)?)
    }
}

pub fn softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(dim)?)?)
}

pub fn log_softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(dim)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Row-wise l2 normalisation of a rank-2 tensor.
pub fn l2_normalize_rows(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// Sinusoidal embedding of (possibly fractional) diffusion times, `[n, dim]`.
pub fn timestep_embedding(ts: &[f64], dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut v = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..dim {
            let j = i % half.max(1);
            let freq = (-(10_000f64.ln()) * j as f64 / half.max(1) as f64).exp();
            let arg = t * freq;
            v.push(if i < half { arg.sin() } else { arg.cos() });
        }
    }
    Ok(Tensor::from_vec(v, (ts.len(), dim), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Nearest-neighbour upsampling by two along time.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (n, t, c) = x.dims3()?;
    Ok(x
        .unsqueeze(2)?
        .broadcast_as((n, t, 2, c))?
        .reshape((n, 2 * t, c))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> (ParamStore, seed::Rng) {
        (ParamStore::new(DType::F64), seed::rng(1))
    }

    #[test]
    fn same_conv_matches_direct_sum() {
        let (mut ps, mut rng) = store();
        let mut init = ps.builder(&mut rng);
        let conv = Conv1d::new(&mut init.pp("c"), 2, 3, 3, 2, 1, Padding::Same).unwrap();
        let x = Tensor::randn(0f64, 1.0, (2, 7, 2), &Device::Cpu).unwrap();
        let y = conv.forward(&x).unwrap();
        let xv = x.to_vec3::<f64>().unwrap();
        let w = conv.weight.to_vec2::<f64>().unwrap();
        let b = conv.bias.to_vec1::<f64>().unwrap();
        let yv = y.to_vec3::<f64>().unwrap();
        for n in 0..2 {
            for t in 0..7 {
                for o in 0..3 {
                    let mut acc = b[o];
                    for j in 0..3 {
                        let src = t as isize + (j as isize - 1) * 2;
                        if src < 0 || src >= 7 {
                            continue;
                        }
                        for c in 0..2 {
                            acc += xv[n][src as usize][c] * w[j * 2 + c][o];
                        }
                    }
                    assert!((acc - yv[n][t][o]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn causal_conv_ignores_future() {
        let (mut ps, mut rng) = store();
        let mut init = ps.builder(&mut rng);
        let conv = Conv1d::new(&mut init, 1, 1, 3, 4, 1, Padding::Causal).unwrap();
        let mut a = vec![0.0f64; 16];
        let ya = conv
            .forward(&Tensor::from_vec(a.clone(), (1, 16, 1), &Device::Cpu).unwrap())
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        a[10] = 1.0;
        let yb = conv
            .forward(&Tensor::from_vec(a, (1, 16, 1), &Device::Cpu).unwrap())
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        for t in 0..10 {
            assert_eq!(ya[t], yb[t]);
        }
        assert_ne!(ya[10], yb[10]);
    }

    #[test]
    fn stride_two_halves_length() {
        let (mut ps, mut rng) = store();
        let mut init = ps.builder(&mut rng);
        let conv = Conv1d::new(&mut init, 3, 4, 3, 1, 2, Padding::Same).unwrap();
        let x = Tensor::zeros((2, 8, 3), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(conv.forward(&x).unwrap().dims(), &[2, 4, 4]);
        let odd = Tensor::zeros((2, 7, 3), DType::F64, &Device::Cpu).unwrap();
        assert!(conv.forward(&odd).is_err());
    }

    #[test]
    fn group_norm_normalises_groups() {
        let (mut ps, mut rng) = store();
        let mut init = ps.builder(&mut rng);
        let gn = GroupNorm::new(&mut init, 4, 2).unwrap();
        let x = Tensor::randn(3f64, 2.0, (2, 5, 4), &Device::Cpu).unwrap();
        let y = gn.forward(&x).unwrap().to_vec3::<f64>().unwrap();
        for n in 0..2 {
            for g in 0..2 {
                let vals: Vec<f64> = (0..5)
                    .flat_map(|t| (0..2).map(move |c| (t, g * 2 + c)))
                    .map(|(t, c)| y[n][t][c])
                    .collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                assert!(mean.abs() < 1e-10);
            }
        }
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let (mut ps, mut rng) = store();
        let mut init = ps.builder(&mut rng);
        init.param("a", &[2], Fill::Const(0.0)).unwrap();
        assert!(init.param("a", &[2], Fill::Const(0.0)).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1000.0f64, 1001.0, 999.0], [-3.0, 0.0, 2.0]], &Device::Cpu).unwrap();
        let s = softmax(&x, 1).unwrap().sum(1).unwrap().to_vec1::<f64>().unwrap();
        for v in s {
            assert!((v - 1.0).abs() < 1e-12);
        }
        let ls = log_softmax(&x, 1).unwrap().exp().unwrap().sum(1).unwrap().to_vec1::<f64>().unwrap();
        assert!((ls[0] - 1.0).abs() < 1e-12);
    }
}
