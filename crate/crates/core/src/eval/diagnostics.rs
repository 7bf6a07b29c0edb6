//! Split-wise conditional relationships between the target and one context
//! channel: LOWESS curves and binned conditional means.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Local linear fit with tricube weights over the nearest `ceil(frac * n)`
/// points, evaluated at each grid point.
pub fn lowess(c: &[f64], x: &[f64], frac: f64, grid: &[f64]) -> Result<Vec<f64>> {
    let n = c.len();
    if n != x.len() {
        return invalid("LOWESS inputs differ in length");
    }
    if n < 2 {
        return invalid(format!("LOWESS needs at least two points, got {n}"));
    }
    if !(frac > 0.0 && frac <= 1.0) {
        return invalid(format!("LOWESS span must lie in (0, 1], got {frac}"));
    }
    let lo = c.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return invalid("context values are constant; no local neighbourhoods");
    }
    let k = ((frac * n as f64).ceil() as usize).clamp(2, n);
    let mut dist = vec![0.0; n];
    let mut out = Vec::with_capacity(grid.len());
    for &g in grid {
        for (d, &ci) in dist.iter_mut().zip(c) {
            *d = (ci - g).abs();
        }
        let mut sorted = dist.clone();
        let (_, kth, _) = sorted.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
        // Slightly widened so the k-th neighbour keeps a positive weight.
        let h = (*kth * (1.0 + 1e-10)).max(f64::MIN_POSITIVE);
        let (mut sw, mut swc, mut swx, mut swcc, mut swcx) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            let u = dist[i] / h;
            if u >= 1.0 {
                continue;
            }
            let w = (1.0 - u * u * u).powi(3);
            sw += w;
            swc += w * c[i];
            swx += w * x[i];
            swcc += w * c[i] * c[i];
            swcx += w * c[i] * x[i];
        }
        let mc = swc / sw;
        let mx = swx / sw;
        let var = swcc / sw - mc * mc;
        let cov = swcx / sw - mc * mx;
        let fit = if var > 1e-12 * (1.0 + mc * mc) {
            mx + cov / var * (g - mc)
        } else {
            mx
        };
        out.push(fit);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub split: String,
    pub c: f64,
    pub fitted: f64,
    /// Whether the grid point lies inside this split's observed range.
    pub in_range: bool,
}

/// Per-split LOWESS curves of `x` on `c`, evaluated on a grid spanning all
/// splits.
pub fn lowess_diagnostic(
    x: &[f64],
    c: &[f64],
    splits: &[String],
    frac: f64,
    grid_size: usize,
) -> Result<Vec<CurveRow>> {
    if x.len() != c.len() || c.len() != splits.len() {
        return invalid("diagnostic inputs differ in length");
    }
    let lo = c.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return invalid("context values are constant; no local neighbourhoods");
    }
    let grid: Vec<f64> = (0..grid_size)
        .map(|i| lo + (hi - lo) * i as f64 / (grid_size.max(2) - 1) as f64)
        .collect();
    let mut names: Vec<&String> = splits.iter().collect();
    names.sort();
    names.dedup();
    let mut rows = Vec::new();
    for name in names {
        let (cs, xs): (Vec<f64>, Vec<f64>) = c
            .iter()
            .zip(x)
            .zip(splits)
            .filter(|(_, s)| *s == name)
            .map(|((&ci, &xi), _)| (ci, xi))
            .unzip();
        if cs.len() < 2 {
            return invalid(format!("split '{name}' has {} point(s); LOWESS needs at least two", cs.len()));
        }
        let s_lo = cs.iter().copied().fold(f64::INFINITY, f64::min);
        let s_hi = cs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let fitted = lowess(&cs, &xs, frac, &grid)?;
        for (&g, f) in grid.iter().zip(fitted) {
            rows.push(CurveRow {
                split: name.clone(),
                c: g,
                fitted: f,
                in_range: g >= s_lo && g <= s_hi,
            });
        }
    }
    Ok(rows)
}

/// `bins + 1` equal-width edges spanning the given (train) values.
pub fn edges_from_train(c_train: &[f64], bins: usize) -> Result<Vec<f64>> {
    if c_train.is_empty() || bins == 0 {
        return invalid("bin edges need train values and at least one bin");
    }
    let lo = c_train.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = c_train.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    pub bin: usize,
    pub lo: f64,
    pub hi: f64,
    pub split: String,
    pub count: usize,
    pub mean: Option<f64>,
    pub std_err: Option<f64>,
}

fn bin_of(v: f64, edges: &[f64]) -> Option<usize> {
    let bins = edges.len() - 1;
    if v < edges[0] || v > edges[bins] {
        return None;
    }
    Some(edges.partition_point(|&e| e <= v).saturating_sub(1).min(bins - 1))
}

/// Mean, standard error and count of `x` per (bin of `c`, split). Values
/// outside the edges are ignored; empty cells have count 0 and no mean.
pub fn binned_means(x: &[f64], c: &[f64], splits: &[String], edges: &[f64]) -> Result<Vec<BinRow>> {
    if x.len() != c.len() || c.len() != splits.len() {
        return invalid("diagnostic inputs differ in length");
    }
    if edges.len() < 2 {
        return invalid("need at least two bin edges");
    }
    let mut names: Vec<&String> = splits.iter().collect();
    names.sort();
    names.dedup();
    let bins = edges.len() - 1;
    let mut rows = Vec::new();
    for name in names {
        let mut acc = vec![(0usize, 0.0f64, 0.0f64); bins];
        for ((&xi, &ci), s) in x.iter().zip(c).zip(splits) {
            if s != name {
                continue;
            }
            if let Some(b) = bin_of(ci, edges) {
                acc[b].0 += 1;
                acc[b].1 += xi;
                acc[b].2 += xi * xi;
            }
        }
        for (b, &(n, s, ss)) in acc.iter().enumerate() {
            let (mean, se) = if n == 0 {
                (None, None)
            } else {
                let m = s / n as f64;
                let se = if n > 1 {
                    let var = ((ss - n as f64 * m * m) / (n - 1) as f64).max(0.0);
                    Some((var / n as f64).sqrt())
                } else {
                    None
                };
                (Some(m), se)
            };
            rows.push(BinRow {
                bin: b,
                lo: edges[b],
                hi: edges[b + 1],
                split: name.clone(),
                count: n,
                mean,
                std_err: se,
            });
        }
    }
    Ok(rows)
}
