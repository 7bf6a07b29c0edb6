//! Welch t tests, Stouffer's combination of per-task evidence, and 95%
//! confidence-interval comparisons.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use statrs::function::erf::erfc;

use crate::error::{invalid, Result};

/// Summary statistics of two methods on one task.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub mean_a: f64,
    pub std_a: f64,
    pub mean_b: f64,
    pub std_b: f64,
    pub n: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t: f64,
    pub df: f64,
    /// Two-sided p-value.
    pub p: f64,
    /// Signed normal score with the same two-sided p-value.
    pub z: f64,
}

/// Welch's unequal-variance t test of `a` against `b`. `None` when both
/// variances are zero.
pub fn welch(mean_a: f64, std_a: f64, n_a: usize, mean_b: f64, std_b: f64, n_b: usize) -> Result<Option<WelchResult>> {
    if n_a < 2 || n_b < 2 {
        return invalid("Welch's test needs n >= 2 on both sides");
    }
    let va = std_a * std_a / n_a as f64;
    let vb = std_b * std_b / n_b as f64;
    let se2 = va + vb;
    if se2 == 0.0 {
        return Ok(None);
    }
    let t = (mean_a - mean_b) / se2.sqrt();
    let df = se2 * se2 / (va * va / (n_a - 1) as f64 + vb * vb / (n_b - 1) as f64);
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    let p = (2.0 * dist.cdf(-t.abs())).min(1.0);
    let z = signed_z(t, p);
    Ok(Some(WelchResult { t, df, p, z }))
}

/// `sign(t) * Phi^{-1}(1 - p/2)`, evaluated through the lower tail for accuracy.
pub fn signed_z(t: f64, p: f64) -> f64 {
    if p >= 1.0 || t == 0.0 {
        return 0.0;
    }
    let normal = Normal::standard();
    let magnitude = -normal.inverse_cdf(p / 2.0);
    magnitude.copysign(t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoufferResult {
    pub z_comb: f64,
    pub p_overall: f64,
    pub per_task: Vec<Option<WelchResult>>,
    /// Indices of tasks skipped because both variances were zero.
    pub skipped: Vec<usize>,
}

/// `Z = sum z_i / sqrt(m)`, `p = erfc(|Z| / sqrt 2)`.
pub fn stouffer_from_z(z: &[f64]) -> Result<(f64, f64)> {
    if z.is_empty() {
        return invalid("Stouffer's method needs at least one score");
    }
    let z_comb = z.iter().sum::<f64>() / (z.len() as f64).sqrt();
    let p = erfc(z_comb.abs() / std::f64::consts::SQRT_2);
    Ok((z_comb, p))
}

/// Per-task Welch tests combined with Stouffer's method.
pub fn stouffer_combine(tasks: &[TaskSummary]) -> Result<StoufferResult> {
    let mut per_task = Vec::with_capacity(tasks.len());
    let mut zs = Vec::new();
    let mut skipped = Vec::new();
    for (i, t) in tasks.iter().enumerate() {
        let r = welch(t.mean_a, t.std_a, t.n, t.mean_b, t.std_b, t.n)?;
        match r {
            Some(w) => zs.push(w.z),
            None => {
                log::warn!("task {i}: zero variance on both sides, skipped");
                skipped.push(i);
            }
        }
        per_task.push(r);
    }
    let (z_comb, p_overall) = stouffer_from_z(&zs)?;
    Ok(StoufferResult {
        z_comb,
        p_overall,
        per_task,
        skipped,
    })
}

/// Two-sided 95% t interval for a mean.
pub fn ci95(mean: f64, std: f64, n: usize) -> Result<(f64, f64)> {
    if n < 2 {
        return invalid("a confidence interval needs n >= 2");
    }
    let q = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("positive degrees of freedom")
        .inverse_cdf(0.975);
    let half = q * std / (n as f64).sqrt();
    Ok((mean - half, mean + half))
}

/// Whether two 95% intervals do not overlap.
pub fn ci_separated(a: (f64, f64), b: (f64, f64)) -> bool {
    a.1 < b.0 || b.1 < a.0
}
