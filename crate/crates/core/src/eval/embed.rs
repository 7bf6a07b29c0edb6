//! Contrastively trained series/context encoders and the joint Fréchet
//! distance computed on their embeddings.

use candle_core::{DType, Tensor};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::bundle::{ChannelKind, Series};
use crate::data;
use crate::envinfer::{Tcn, TcnConfig};
use crate::error::{invalid, Result};
use crate::eval::metrics::{frechet, GaussianSummary};
use crate::nn::{self, Init, Linear, ParamStore};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderConfig {
    pub dim: usize,
    pub width: usize,
    pub temperature: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            width: 32,
            temperature: 0.1,
            steps: 300,
            batch_size: 64,
            lr: 1e-3,
        }
    }
}

/// TCN followed by mean pooling over time and a linear head.
#[derive(Debug, Clone)]
pub struct SeriesEncoder {
    tcn: Tcn,
    head: Linear,
}

impl SeriesEncoder {
    pub fn new(init: &mut Init, in_ch: usize, width: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            tcn: Tcn::new(&mut init.pp("tcn"), in_ch, width, &TcnConfig::default())?,
            head: Linear::new(&mut init.pp("head"), width, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.tcn.forward(x)?.mean(1)?;
        self.head.forward(&h)
    }
}

/// Expands categorical context channels (stored as indices) into one-hot
/// channels so the context encoder sees no spurious ordering.
pub fn expand_categoricals(c: &Series, kinds: &[ChannelKind]) -> Series {
    let width: usize = kinds
        .iter()
        .map(|k| match k {
            ChannelKind::Categorical { vocab } => vocab.len() + 1,
            _ => 1,
        })
        .sum();
    if width == c.ch {
        return c.clone();
    }
    let mut out = Series::zeros(c.n, c.t, width);
    for i in 0..c.n {
        for t in 0..c.t {
            let mut o = 0;
            for (ch, k) in kinds.iter().enumerate() {
                let v = c.get(i, t, ch);
                match k {
                    ChannelKind::Categorical { vocab } => {
                        let unk = vocab.len();
                        let idx = v.round();
                        let idx = if idx >= 0.0 && (idx as usize) < unk { idx as usize } else { unk };
                        out.set(i, t, o + idx, 1.0);
                        o += unk + 1;
                    }
                    _ => {
                        out.set(i, t, o, v);
                        o += 1;
                    }
                }
            }
        }
    }
    out
}

/// `phi_time` for target series and `phi_meta` for context series, both on
/// model-space inputs.
#[derive(Debug, Clone)]
pub struct EmbedderPair {
    pub store: ParamStore,
    pub time: SeriesEncoder,
    pub meta: SeriesEncoder,
    pub kinds: Vec<ChannelKind>,
    pub cfg: EmbedderConfig,
}

impl EmbedderPair {
    pub fn new(d_x: usize, kinds: &[ChannelKind], cfg: &EmbedderConfig, dtype: DType, init_seed: u64) -> Result<Self> {
        let d_c = expand_categoricals(&Series::zeros(0, 1, kinds.len()), kinds).ch;
        let mut store = ParamStore::new(dtype);
        let mut rng = seed::rng(init_seed);
        let (time, meta) = {
            let mut init = store.builder(&mut rng);
            (
                SeriesEncoder::new(&mut init.pp("time"), d_x, cfg.width, cfg.dim)?,
                SeriesEncoder::new(&mut init.pp("meta"), d_c, cfg.width, cfg.dim)?,
            )
        };
        Ok(Self {
            store,
            time,
            meta,
            kinds: kinds.to_vec(),
            cfg: cfg.clone(),
        })
    }

    fn tensors(&self, x: &Series, c: &Series) -> Result<(Tensor, Tensor)> {
        let dtype = self.store.dtype();
        Ok((
            data::series_tensor(x, dtype)?,
            data::series_tensor(&expand_categoricals(c, &self.kinds), dtype)?,
        ))
    }

    /// Symmetric InfoNCE loss on l2-normalised embeddings of matched pairs.
    pub fn contrastive_loss(&self, x: &Tensor, c: &Tensor) -> Result<Tensor> {
        let n = x.dim(0)?;
        if n < 2 {
            return invalid("contrastive training needs a batch of at least two pairs");
        }
        let zx = nn::l2_normalize_rows(&self.time.forward(x)?)?;
        let zc = nn::l2_normalize_rows(&self.meta.forward(c)?)?;
        let logits = (zx.matmul(&zc.t()?)? / self.cfg.temperature)?;
        let eye = Tensor::eye(n, logits.dtype(), logits.device())?;
        let ce = |l: &Tensor| -> Result<Tensor> {
            Ok((nn::log_softmax(l, 1)?.mul(&eye)?.sum(1)?.mean_all()? * -1.0)?)
        };
        Ok(((ce(&logits)? + ce(&logits.t()?.contiguous()?)?)? * 0.5)?)
    }

    /// Trains both encoders on matched model-space pairs.
    pub fn train(&mut self, x: &Series, c: &Series, train_seed: u64) -> Result<Vec<f64>> {
        if x.n < 2 || x.n != c.n {
            return invalid("embedder training needs at least two matched pairs");
        }
        let mut opt = AdamW::new(
            self.store.trainable(),
            ParamsAdamW {
                lr: self.cfg.lr,
                weight_decay: 0.0,
                ..ParamsAdamW::default()
            },
        )?;
        let mut rng = seed::rng(train_seed);
        let bs = self.cfg.batch_size.min(x.n).max(2);
        let mut order: Vec<usize> = (0..x.n).collect();
        let mut cursor = x.n;
        let mut losses = Vec::with_capacity(self.cfg.steps);
        for _ in 0..self.cfg.steps {
            if cursor + bs > x.n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let idx = &order[cursor..cursor + bs];
            cursor += bs;
            let (xt, ct) = self.tensors(&x.select(idx), &c.select(idx))?;
            let loss = self.contrastive_loss(&xt, &ct)?;
            losses.push(loss.to_dtype(DType::F64)?.to_scalar::<f64>()?);
            opt.backward_step(&loss)?;
        }
        Ok(losses)
    }

    /// Raw joint embeddings `[phi_time(x), phi_meta(c)]`, one row per sample.
    pub fn embed(&self, x: &Series, c: &Series) -> Result<Vec<Vec<f64>>> {
        let mut rows = Vec::with_capacity(x.n);
        let chunk = 256;
        let mut start = 0;
        while start < x.n {
            let idx: Vec<usize> = (start..(start + chunk).min(x.n)).collect();
            let (xt, ct) = self.tensors(&x.select(&idx), &c.select(&idx))?;
            let z = Tensor::cat(&[self.time.forward(&xt)?, self.meta.forward(&ct)?], 1)?
                .detach()
                .to_dtype(DType::F64)?
                .to_vec2::<f64>()?;
            rows.extend(z);
            start += chunk;
        }
        Ok(rows)
    }

    /// Cosine similarity of matched pairs and mean similarity of mismatched
    /// pairs.
    pub fn retrieval_stats(&self, x: &Series, c: &Series) -> Result<(f64, f64)> {
        let (xt, ct) = self.tensors(x, c)?;
        let zx = nn::l2_normalize_rows(&self.time.forward(&xt)?)?;
        let zc = nn::l2_normalize_rows(&self.meta.forward(&ct)?)?;
        let sim = zx.matmul(&zc.t()?)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let n = sim.len();
        let matched = (0..n).map(|i| sim[i][i]).sum::<f64>() / n as f64;
        let total: f64 = sim.iter().flatten().sum();
        let mismatched = (total - matched * n as f64) / (n * n - n).max(1) as f64;
        Ok((matched, mismatched))
    }
}

/// Joint Fréchet distance between real and generated `(x, c)` pairs.
pub fn jftsd(real_x: &Series, real_c: &Series, gen_x: &Series, gen_c: &Series, embedders: &EmbedderPair) -> Result<f64> {
    let zr = embedders.embed(real_x, real_c)?;
    let zg = embedders.embed(gen_x, gen_c)?;
    frechet(&GaussianSummary::fit(&zr)?, &GaussianSummary::fit(&zg)?)
}
