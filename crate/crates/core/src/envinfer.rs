//! Environment inference: a dilated causal TCN encoder, temporal/attention/
//! spectral feature pooling, projection to a latent `h`, and temperature-scaled
//! matching against the environment bank. Also hosts the balanced
//! Sinkhorn-Knopp targets, the swapped-prediction loss and the bank
//! orthogonality penalty.

use std::f64::consts::PI;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{self, Conv1d, Fill, Init, LayerNorm, Linear, Padding};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TcnConfig {
    pub kernel: usize,
    pub dilations: Vec<usize>,
}

impl Default for TcnConfig {
    fn default() -> Self {
        Self {
            kernel: 3,
            dilations: vec![1, 2, 4],
        }
    }
}

#[derive(Debug, Clone)]
struct TcnBlock {
    conv1: Conv1d,
    conv2: Conv1d,
    residual: Option<Linear>,
}

impl TcnBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(x)?.silu()?;
        let h = self.conv2.forward(&h)?.silu()?;
        let skip = match &self.residual {
            Some(r) => r.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?)
    }
}

/// Residual stack of dilated causal convolutions, `[N, T, C_in] -> [N, T, H]`.
#[derive(Debug, Clone)]
pub struct Tcn {
    blocks: Vec<TcnBlock>,
    in_ch: usize,
}

impl Tcn {
    pub fn new(init: &mut Init, in_ch: usize, width: usize, cfg: &TcnConfig) -> Result<Self> {
        let mut blocks = Vec::new();
        let mut ch = in_ch;
        for (i, &dil) in cfg.dilations.iter().enumerate() {
            let mut b = init.pp(&format!("block{i}"));
            blocks.push(TcnBlock {
                conv1: Conv1d::new(&mut b.pp("conv1"), ch, width, cfg.kernel, dil, 1, Padding::Causal)?,
                conv2: Conv1d::new(&mut b.pp("conv2"), width, width, cfg.kernel, dil, 1, Padding::Causal)?,
                residual: if ch != width {
                    Some(Linear::new(&mut b.pp("residual"), ch, width)?)
                } else {
                    None
                },
            });
            ch = width;
        }
        Ok(Self { blocks, in_ch })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(2)?;
        if c != self.in_ch {
            return invalid(format!("TCN expects {} channels, got {c}", self.in_ch));
        }
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        Ok(h)
    }
}

/// Pooled features of an encoded sequence.
#[derive(Debug, Clone)]
pub struct Features {
    pub mean: Tensor,
    pub std: Tensor,
    pub max: Tensor,
    pub attention: Tensor,
    pub attention_weights: Tensor,
    pub centroid: Tensor,
    pub peaks: Tensor,
}

impl Features {
    /// `[mean, std, max, attention, centroid, peaks]`, width `5H + K_p`.
    pub fn concat(&self) -> Result<Tensor> {
        Ok(Tensor::cat(
            &[
                &self.mean,
                &self.std,
                &self.max,
                &self.attention,
                &self.centroid,
                &self.peaks,
            ],
            1,
        )?)
    }
}

#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    score: Linear,
    top_k: usize,
}

const STD_EPS: f64 = 1e-10;

impl FeatureExtractor {
    pub fn new(init: &mut Init, width: usize, top_k: usize) -> Result<Self> {
        Ok(Self {
            score: Linear::new(&mut init.pp("attn_score"), width, 1)?,
            top_k,
        })
    }

    pub fn output_width(width: usize, top_k: usize) -> usize {
        5 * width + top_k
    }

    /// Real-DFT basis `[T, F]` (cos, -sin) with `F = T/2 + 1`.
    fn dft_basis(t: usize, dtype: DType) -> Result<(Tensor, Tensor)> {
        let f = t / 2 + 1;
        let mut cos = Vec::with_capacity(t * f);
        let mut sin = Vec::with_capacity(t * f);
        for tt in 0..t {
            for ff in 0..f {
                let arg = 2.0 * PI * (ff * tt % t) as f64 / t as f64;
                cos.push(arg.cos());
                sin.push(-arg.sin());
            }
        }
        Ok((
            Tensor::from_vec(cos, (t, f), &Device::Cpu)?.to_dtype(dtype)?,
            Tensor::from_vec(sin, (t, f), &Device::Cpu)?.to_dtype(dtype)?,
        ))
    }

    pub fn forward(&self, h: &Tensor) -> Result<Features> {
        let (n, t, width) = h.dims3()?;
        let dtype = h.dtype();
        if t < 2 {
            log::warn!("sequence length {t} < 2: temporal std is reported as 0");
        }
        let mean = h.mean(1)?;
        let centered = h.broadcast_sub(&mean.unsqueeze(1)?)?;
        let var = centered.sqr()?.mean(1)?;
        let std = ((var + STD_EPS)?.sqrt()? - STD_EPS.sqrt())?;
        let max = h.max(1)?;

        let scores = self.score.forward(h)?; // [N, T, 1]
        let weights = nn::softmax(&scores, 1)?;
        let attention = h.broadcast_mul(&weights)?.sum(1)?;

        // Periodogram |rFFT|^2 / T of every channel.
        let (cos, sin) = Self::dft_basis(t, dtype)?;
        let ht = h.transpose(1, 2)?.contiguous()?; // [N, H, T]
        let re = ht.broadcast_matmul(&cos)?;
        let im = ht.broadcast_matmul(&sin)?;
        let psd = ((re.sqr()? + im.sqr()?)? / t as f64)?; // [N, H, F]
        let f = t / 2 + 1;
        let freqs = Tensor::arange(0u32, f as u32, &Device::Cpu)?.to_dtype(dtype)?;
        let weighted = psd.broadcast_mul(&freqs)?.sum(2)?;
        let total = (psd.sum(2)? + 1e-12)?;
        let centroid = (weighted / total)?;

        let avg = psd.mean(1)?.contiguous()?; // [N, F]
        let order = avg.arg_sort_last_dim(false)?;
        let take = self.top_k.min(f);
        let top = avg.gather(&order.narrow(1, 0, take)?.contiguous()?, 1)?;
        let peaks = if take < self.top_k {
            top.pad_with_zeros(1, 0, self.top_k - take)?
        } else {
            top
        };
        debug_assert_eq!(mean.dims(), &[n, width]);
        Ok(Features {
            mean,
            std,
            max,
            attention,
            attention_weights: weights.squeeze(2)?,
            centroid,
            peaks,
        })
    }
}

/// Learnable `K x H` environment embeddings. Stored rows are unconstrained;
/// scoring uses l2-normalised copies.
#[derive(Debug, Clone)]
pub struct EnvBank {
    pub embeddings: Tensor,
    pub frozen: bool,
}

impl EnvBank {
    pub fn new(init: &mut Init, k: usize, width: usize) -> Result<Self> {
        if k == 0 || width == 0 {
            return invalid("environment bank needs K >= 1 and H >= 1");
        }
        Ok(Self {
            embeddings: init.param("embeddings", &[k, width], Fill::Normal(1.0))?,
            frozen: false,
        })
    }

    pub fn from_tensor(embeddings: Tensor) -> Self {
        Self {
            embeddings,
            frozen: false,
        }
    }

    pub fn k(&self) -> usize {
        self.embeddings.dim(0).unwrap_or(0)
    }

    pub fn width(&self) -> usize {
        self.embeddings.dim(1).unwrap_or(0)
    }

    /// Raw rows, detached when the bank is frozen.
    pub fn rows(&self) -> Tensor {
        if self.frozen {
            self.embeddings.detach()
        } else {
            self.embeddings.clone()
        }
    }

    pub fn normalized(&self) -> Result<Tensor> {
        nn::l2_normalize_rows(&self.rows())
    }
}

#[derive(Debug, Clone)]
pub struct EnvInferOutput {
    /// Latent representation `[N, H]` (before l2 normalisation).
    pub h: Tensor,
    /// Logits `[N, K]`.
    pub s: Tensor,
    /// Posterior weights `[N, K]`.
    pub w: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvInferConfig {
    pub width: usize,
    pub top_k: usize,
    pub tau: f64,
    pub tcn: TcnConfig,
}

impl Default for EnvInferConfig {
    fn default() -> Self {
        Self {
            width: 64,
            top_k: 4,
            tau: 0.1,
            tcn: TcnConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EnvInfer {
    pub tcn: Tcn,
    pub features: FeatureExtractor,
    pub norm: LayerNorm,
    pub proj1: Linear,
    pub proj2: Linear,
    pub tau: f64,
    d_x: usize,
}

impl EnvInfer {
    /// `d_x` target channels and `d_c` dense context channels.
    pub fn new(init: &mut Init, d_x: usize, d_c: usize, cfg: &EnvInferConfig) -> Result<Self> {
        if !(cfg.tau > 0.0) {
            return invalid(format!("temperature must be positive, got {}", cfg.tau));
        }
        let feat = FeatureExtractor::output_width(cfg.width, cfg.top_k);
        Ok(Self {
            tcn: Tcn::new(&mut init.pp("tcn"), d_x + d_c, cfg.width, &cfg.tcn)?,
            features: FeatureExtractor::new(&mut init.pp("features"), cfg.width, cfg.top_k)?,
            norm: LayerNorm::new(&mut init.pp("norm"), feat)?,
            proj1: Linear::new(&mut init.pp("proj1"), feat, cfg.width)?,
            proj2: Linear::new(&mut init.pp("proj2"), cfg.width, cfg.width)?,
            tau: cfg.tau,
            d_x,
        })
    }

    /// Channel-concatenates `[x, c]` and runs the TCN.
    pub fn encode(&self, x: &Tensor, c: &Tensor) -> Result<Tensor> {
        let (nx, tx, dx) = x.dims3()?;
        let (nc, tc, _) = c.dims3()?;
        if nx != nc || tx != tc {
            return invalid(format!(
                "x [{nx}, {tx}] and c [{nc}, {tc}] are not time-aligned"
            ));
        }
        if dx != self.d_x {
            return invalid(format!("expected {} target channels, got {dx}", self.d_x));
        }
        self.tcn.forward(&Tensor::cat(&[x, c], 2)?)
    }

    /// Latent `h = tanh(MLP(LayerNorm(features)))`.
    pub fn latent(&self, x: &Tensor, c: &Tensor) -> Result<Tensor> {
        let encoded = self.encode(x, c)?;
        let feats = self.features.forward(&encoded)?.concat()?;
        let z = self.norm.forward(&feats)?;
        let z = self.proj1.forward(&z)?.silu()?;
        Ok(self.proj2.forward(&z)?.tanh()?)
    }

    pub fn forward(&self, x: &Tensor, c: &Tensor, bank: &EnvBank) -> Result<EnvInferOutput> {
        let h = self.latent(x, c)?;
        let (s, w) = score(&h, bank, self.tau)?;
        Ok(EnvInferOutput { h, s, w })
    }
}

/// `s = normalize(h) normalize(E)^T / tau`, `w = softmax(s)`.
pub fn score(h: &Tensor, bank: &EnvBank, tau: f64) -> Result<(Tensor, Tensor)> {
    if bank.k() == 0 {
        return invalid("environment bank is empty");
    }
    if !(tau > 0.0) {
        return invalid(format!("temperature must be positive, got {tau}"));
    }
    let hn = nn::l2_normalize_rows(h)?;
    let en = bank.normalized()?;
    let s = (hn.matmul(&en.t()?)? / tau)?;
    let w = nn::softmax(&s, 1)?;
    Ok((s, w))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SinkhornConfig {
    /// Entropic regularisation applied to the pre-temperature scores.
    pub reg: f64,
    pub iters: usize,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self { reg: 0.05, iters: 3 }
    }
}

/// Balanced soft assignments from logits `s` (`[N, K]`, row-major).
///
/// `Q ∝ exp(s tau / reg)`; alternately rescales columns to sum `N/K` and rows
/// to sum 1, finishing on rows so the result is row-stochastic.
pub fn sinkhorn(s: &[f64], n: usize, k: usize, tau: f64, cfg: &SinkhornConfig) -> Result<Vec<f64>> {
    if n == 0 || k == 0 || s.len() != n * k {
        return invalid(format!("sinkhorn expects {n}x{k} logits, got {}", s.len()));
    }
    if cfg.iters == 0 || !(cfg.reg > 0.0) {
        return invalid("sinkhorn needs iters >= 1 and reg > 0");
    }
    if s.iter().any(|v| !v.is_finite()) {
        return invalid("sinkhorn received non-finite logits");
    }
    if n == 1 {
        log::warn!("sinkhorn on a batch of one sample: balancing is degenerate");
    }
    let scale = tau / cfg.reg;
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut q: Vec<f64> = s.iter().map(|v| ((v - max) * scale).exp()).collect();
    let col_target = n as f64 / k as f64;
    for _ in 0..cfg.iters {
        for j in 0..k {
            let sum: f64 = (0..n).map(|i| q[i * k + j]).sum();
            let f = if sum > 0.0 { col_target / sum } else { 0.0 };
            for i in 0..n {
                q[i * k + j] *= f;
            }
        }
        for i in 0..n {
            let row = &mut q[i * k..(i + 1) * k];
            let sum: f64 = row.iter().sum();
            if sum > 0.0 {
                row.iter_mut().for_each(|v| *v /= sum);
            } else {
                row.iter_mut().for_each(|v| *v = 1.0 / k as f64);
            }
        }
    }
    Ok(q)
}

/// Sinkhorn targets for a logits tensor; the result carries no gradient.
pub fn sinkhorn_targets(s: &Tensor, tau: f64, cfg: &SinkhornConfig) -> Result<Tensor> {
    let (n, k) = s.dims2()?;
    let flat = s.detach().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let q = sinkhorn(&flat, n, k, tau, cfg)?;
    Ok(Tensor::from_vec(q, (n, k), &Device::Cpu)?.to_dtype(s.dtype())?)
}

/// Mean cross-entropy `-sum_k target_k log softmax(logits)_k`.
pub fn cross_entropy(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    let logp = nn::log_softmax(logits, 1)?;
    Ok((target.mul(&logp)?.sum(1)?.mean_all()? * -1.0)?)
}

/// Swapped prediction: each view's logits predict the other view's balanced
/// assignment.
pub fn swapped_loss_from_logits(
    s1: &Tensor,
    s2: &Tensor,
    tau: f64,
    cfg: &SinkhornConfig,
) -> Result<Tensor> {
    if s1.dims() != s2.dims() {
        return Err(Error::InvalidInput("view logits differ in shape".into()));
    }
    let t1 = sinkhorn_targets(s1, tau, cfg)?;
    let t2 = sinkhorn_targets(s2, tau, cfg)?;
    Ok((cross_entropy(s1, &t2)? + cross_entropy(s2, &t1)?)?)
}

/// `||E_n E_n^T - I||_F^2` over l2-normalised bank rows.
pub fn orthogonality_loss(bank: &EnvBank) -> Result<Tensor> {
    let en = bank.normalized()?;
    let k = en.dim(0)?;
    let gram = en.matmul(&en.t()?)?;
    let eye = Tensor::eye(k, en.dtype(), &Device::Cpu)?;
    Ok((gram - eye)?.sqr()?.sum_all()?)
}

/// Mean of `w` rows for diagnostics.
pub fn mean_assignment(w: &Tensor) -> Result<Vec<f64>> {
    Ok(w.to_dtype(DType::F64)?.mean(0)?.to_vec1::<f64>()?)
}

/// Marginal sums of a row-major `n x k` matrix.
pub fn marginals(q: &[f64], n: usize, k: usize) -> (Vec<f64>, Vec<f64>) {
    let rows = (0..n).map(|i| q[i * k..(i + 1) * k].iter().sum()).collect();
    let cols = (0..k).map(|j| (0..n).map(|i| q[i * k + j]).sum()).collect();
    (rows, cols)
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::seed;

    fn f64_tensor(v: Vec<f64>, shape: &[usize]) -> Tensor {
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn sinkhorn_symmetric_case() {
        let q = sinkhorn(&[0.3, 0.3, 0.3, 0.3], 2, 2, 0.1, &SinkhornConfig { reg: 0.05, iters: 3 }).unwrap();
        for v in q {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn sinkhorn_balances_skewed_logits() {
        // Every row prefers column 0; balancing still splits total mass 2/2.
        let s = [9.0, -9.0, 8.0, -8.0, 7.0, -7.0, 6.0, -6.0];
        let q = sinkhorn(&s, 4, 2, 0.1, &SinkhornConfig { reg: 0.05, iters: 100 }).unwrap();
        let (rows, cols) = marginals(&q, 4, 2);
        for r in rows {
            assert!((r - 1.0).abs() < 1e-9);
        }
        for c in cols {
            assert!((c - 2.0).abs() < 1e-6, "column sum {c}");
        }
        // Ordering survives: the most confident row keeps the most column-0 mass.
        assert!(q[0] > q[6]);
    }

    #[test]
    fn sinkhorn_rejects_non_finite() {
        assert!(sinkhorn(&[f64::NAN, 0.0], 1, 2, 0.1, &SinkhornConfig::default()).is_err());
    }

    #[test]
    fn orthogonality_of_identical_rows_is_two() {
        let bank = EnvBank::from_tensor(f64_tensor(vec![1.0, 2.0, 1.0, 2.0], &[2, 2]));
        let l = orthogonality_loss(&bank).unwrap().to_scalar::<f64>().unwrap();
        assert!((l - 2.0).abs() < 1e-12);
        let ortho = EnvBank::from_tensor(f64_tensor(vec![3.0, 0.0, 0.0, 0.0, -0.5, 0.0], &[2, 3]));
        assert!(orthogonality_loss(&ortho).unwrap().to_scalar::<f64>().unwrap().abs() < 1e-15);
    }

    #[test]
    fn uniform_prediction_costs_log_k_per_view() {
        let s = f64_tensor(vec![0.0; 8 * 4], &[8, 4]);
        let l = swapped_loss_from_logits(&s, &s, 0.1, &SinkhornConfig::default())
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!((l - 2.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn matching_one_hot_assignments_cost_nothing() {
        // Very peaked logits on a balanced diagonal: targets and predictions are one-hot.
        let mut v = vec![-1e3; 4];
        v[0] = 1e3;
        v[3] = 1e3;
        let s = f64_tensor(v, &[2, 2]);
        let l = swapped_loss_from_logits(&s, &s, 0.1, &SinkhornConfig::default())
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!(l.abs() < 1e-12, "{l}");
    }

    #[test]
    fn k_one_bank_gives_unit_weights() {
        let h = f64_tensor(vec![0.3, -0.2, 0.9, 0.1, 0.4, 0.5], &[3, 2]);
        let bank = EnvBank::from_tensor(f64_tensor(vec![1.0, 1.0], &[1, 2]));
        let (_, w) = score(&h, &bank, 0.1).unwrap();
        for v in w.flatten_all().unwrap().to_vec1::<f64>().unwrap() {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn huge_temperature_flattens_posterior() {
        let h = f64_tensor(vec![0.3, -0.2, 0.9, 0.1], &[2, 2]);
        let bank = EnvBank::from_tensor(f64_tensor(vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.5], &[3, 2]));
        let (_, w) = score(&h, &bank, 1e6).unwrap();
        for v in w.flatten_all().unwrap().to_vec1::<f64>().unwrap() {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
        assert!(score(&h, &bank, 0.0).is_err());
    }

    #[test]
    fn scaling_h_leaves_posterior_unchanged() {
        let h = f64_tensor(vec![0.3, -0.2, 0.9, 0.1], &[2, 2]);
        let bank = EnvBank::from_tensor(f64_tensor(vec![1.0, 0.2, -0.3, 1.0], &[2, 2]));
        let (_, w1) = score(&h, &bank, 0.1).unwrap();
        let (_, w2) = score(&(h * 7.5).unwrap(), &bank, 0.1).unwrap();
        let a = w1.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b = w2.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn extractor() -> (ParamStore, FeatureExtractor) {
        let mut ps = ParamStore::new(DType::F64);
        let mut rng = seed::rng(0);
        let fe = {
            let mut init = ps.builder(&mut rng);
            FeatureExtractor::new(&mut init, 2, 4).unwrap()
        };
        (ps, fe)
    }

    #[test]
    fn constant_signal_features() {
        let (_ps, fe) = extractor();
        let h = f64_tensor(vec![1.5; 16 * 2], &[1, 16, 2]);
        let f = fe.forward(&h).unwrap();
        let mean = f.mean.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let std = f.std.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let max = f.max.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let cen = f.centroid.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for c in 0..2 {
            assert!((mean[c] - 1.5).abs() < 1e-12);
            assert!((max[c] - 1.5).abs() < 1e-12);
            assert!(std[c].abs() < 1e-12);
            assert!(cen[c].abs() < 1e-12);
        }
        let aw = f.attention_weights.sum(1).unwrap().to_vec1::<f64>().unwrap();
        assert!((aw[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_step_sequence_has_zero_std() {
        let (_ps, fe) = extractor();
        let h = f64_tensor(vec![0.4, -0.1], &[1, 1, 2]);
        let f = fe.forward(&h).unwrap();
        for v in f.std.flatten_all().unwrap().to_vec1::<f64>().unwrap() {
            assert_eq!(v, 0.0);
        }
    }
}
