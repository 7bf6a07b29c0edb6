//! Distribution distances between real and generated series: histogram
//! total variation (MDD), histogram KL, kernel MMD and the Fréchet distance
//! between Gaussian summaries.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::Series;
use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HistogramSpec {
    pub bins: usize,
    /// Additive smoothing applied to both histograms before the KL.
    pub epsilon: f64,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        Self {
            bins: 50,
            epsilon: 1e-8,
        }
    }
}

impl HistogramSpec {
    fn validate(&self) -> Result<()> {
        if self.bins < 2 || !(self.epsilon > 0.0) {
            return Err(Error::Config("histograms need >= 2 bins and a positive epsilon".into()));
        }
        Ok(())
    }
}

/// Normalised histogram over `[lo, hi]` with one underflow and one overflow
/// bin, so mass outside the reference range is not discarded.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins + 2];
    let width = (hi - lo) / bins as f64;
    for &v in values {
        let slot = if v < lo {
            0
        } else if v > hi {
            bins + 1
        } else if width > 0.0 {
            1 + (((v - lo) / width) as usize).min(bins - 1)
        } else {
            1
        };
        h[slot] += 1.0;
    }
    let n = values.len().max(1) as f64;
    h.iter_mut().for_each(|v| *v /= n);
    h
}

fn check_pair(real: &Series, gen: &Series) -> Result<()> {
    if real.n == 0 || gen.n == 0 {
        return invalid("metric inputs must be non-empty");
    }
    if real.ch != gen.ch {
        return invalid(format!("channel count differs: {} vs {}", real.ch, gen.ch));
    }
    Ok(())
}

fn channel_histograms(real: &Series, gen: &Series, bins: usize) -> Vec<(Vec<f64>, Vec<f64>)> {
    (0..real.ch)
        .map(|c| {
            let r = real.channel_values(c);
            let g = gen.channel_values(c);
            let lo = r.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (histogram(&r, lo, hi, bins), histogram(&g, lo, hi, bins))
        })
        .collect()
}

/// Total variation between per-channel marginal histograms, averaged over
/// channels. The histogram range is taken from `real`.
pub fn mdd(real: &Series, gen: &Series, spec: &HistogramSpec) -> Result<f64> {
    check_pair(real, gen)?;
    spec.validate()?;
    let hs = channel_histograms(real, gen, spec.bins);
    let total: f64 = hs
        .iter()
        .map(|(p, q)| 0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
        .sum();
    // Rounding in the bin fractions can push the sum a few ulps past 1.
    Ok((total / hs.len() as f64).min(1.0))
}

/// `sum p log(p / q)` for discrete distributions (natural log, `0 log 0 = 0`).
pub fn kl_discrete(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b).ln())
        .sum()
}

fn smooth(h: &[f64], eps: f64) -> Vec<f64> {
    let s: f64 = h.iter().map(|v| v + eps).sum();
    h.iter().map(|v| (v + eps) / s).collect()
}

/// Histogram KL(real || gen) with additive smoothing, averaged over channels.
pub fn kl(real: &Series, gen: &Series, spec: &HistogramSpec) -> Result<f64> {
    check_pair(real, gen)?;
    spec.validate()?;
    let hs = channel_histograms(real, gen, spec.bins);
    let total: f64 = hs
        .iter()
        .map(|(p, q)| kl_discrete(&smooth(p, spec.epsilon), &smooth(q, spec.epsilon)).max(0.0))
        .sum();
    Ok(total / hs.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    Median,
    Fixed(f64),
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn rows(s: &Series) -> Vec<Vec<f64>> {
    (0..s.n)
        .map(|i| s.sample(i).iter().map(|&v| v as f64).collect())
        .collect()
}

/// Median pairwise Euclidean distance over the pooled samples (at most
/// 1000 evenly strided points).
pub fn median_distance(pooled: &[Vec<f64>]) -> f64 {
    let stride = pooled.len().div_ceil(1000).max(1);
    let pts: Vec<&Vec<f64>> = pooled.iter().step_by(stride).collect();
    let mut d: Vec<f64> = (0..pts.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let pts = &pts;
            (i + 1..pts.len()).map(move |j| sq_dist(pts[i], pts[j]).sqrt())
        })
        .collect();
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    *m
}

fn mean_kernel(a: &[Vec<f64>], b: &[Vec<f64>], gamma: f64) -> f64 {
    // Row sums in parallel, reduced sequentially so the result does not
    // depend on the thread count.
    let row_sums: Vec<f64> = a
        .par_iter()
        .map(|x| b.iter().map(|y| (-gamma * sq_dist(x, y)).exp()).sum::<f64>())
        .collect();
    let sum: f64 = row_sums.iter().sum();
    sum / (a.len() * b.len()) as f64
}

/// Biased (V-statistic) squared MMD with the RBF kernel
/// `exp(-|a - b|^2 / (2 sigma^2))` on flattened samples.
pub fn mmd(real: &Series, gen: &Series, bandwidth: Bandwidth) -> Result<f64> {
    if real.n < 2 || gen.n < 2 {
        return invalid("MMD needs at least two samples per side");
    }
    if real.t * real.ch != gen.t * gen.ch {
        return invalid("MMD inputs differ in flattened width");
    }
    let a = rows(real);
    let b = rows(gen);
    let sigma = match bandwidth {
        Bandwidth::Fixed(s) => s,
        Bandwidth::Median => {
            let pooled: Vec<Vec<f64>> = a.iter().chain(&b).cloned().collect();
            median_distance(&pooled)
        }
    };
    if !(sigma > 0.0) {
        // Every pooled point coincides.
        return Ok(0.0);
    }
    let gamma = 1.0 / (2.0 * sigma * sigma);
    let v = mean_kernel(&a, &a, gamma) + mean_kernel(&b, &b, gamma) - 2.0 * mean_kernel(&a, &b, gamma);
    Ok(v.max(0.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSummary {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

impl GaussianSummary {
    /// Mean and unbiased covariance of row vectors.
    pub fn fit(points: &[Vec<f64>]) -> Result<Self> {
        let n = points.len();
        if n < 2 {
            return invalid("a Gaussian summary needs at least two points");
        }
        let d = points[0].len();
        let mut mu = DVector::zeros(d);
        for p in points {
            mu += DVector::from_column_slice(p);
        }
        mu /= n as f64;
        let mut sigma = DMatrix::zeros(d, d);
        for p in points {
            let c = DVector::from_column_slice(p) - &mu;
            sigma += &c * c.transpose();
        }
        sigma /= (n - 1) as f64;
        Ok(Self { mu, sigma })
    }
}

/// Symmetric PSD square root via eigendecomposition, clipping tiny negative
/// eigenvalues to zero.
pub fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    if sym.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("covariance has non-finite entries".into()));
    }
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    if eig.eigenvalues.iter().any(|&l| l < -1e-6 * scale) {
        return Err(Error::Numerical("matrix is not positive semidefinite".into()));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// `|mu_r - mu_g|^2 + Tr(S_r + S_g - 2 (S_r^{1/2} S_g S_r^{1/2})^{1/2})`.
pub fn frechet(real: &GaussianSummary, gen: &GaussianSummary) -> Result<f64> {
    if real.mu.len() != gen.mu.len() || real.sigma.shape() != gen.sigma.shape() {
        return invalid("Gaussian summaries differ in dimension");
    }
    let diff = (&real.mu - &gen.mu).norm_squared();
    let root_r = psd_sqrt(&real.sigma)?;
    let inner = &root_r * &gen.sigma * &root_r;
    let cross = psd_sqrt(&inner)?.trace();
    let v = diff + real.sigma.trace() + gen.sigma.trace() - 2.0 * cross;
    Ok(v.max(0.0))
}
