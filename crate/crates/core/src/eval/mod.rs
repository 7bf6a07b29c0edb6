//! Evaluation of generated bundles against real ones, spurious-correlation
//! diagnostics, and significance aggregation.

pub mod diagnostics;
pub mod embed;
pub mod metrics;
pub mod stats;

use std::collections::BTreeMap;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::bundle::{Series, SeriesBundle};
use crate::data::Normalizer;
use crate::error::{Error, Result};
use crate::seed;

pub use embed::{jftsd, EmbedderConfig, EmbedderPair};
pub use metrics::{frechet, kl, mdd, mmd, Bandwidth, GaussianSummary, HistogramSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Mdd,
    Kl,
    Mmd,
    Jftsd,
}

impl Metric {
    pub fn name(&self) -> &'static str {
        match self {
            Metric::Mdd => "mdd",
            Metric::Kl => "kl",
            Metric::Mmd => "mmd",
            Metric::Jftsd => "jftsd",
        }
    }

    pub fn parse_list(s: &str) -> Result<Vec<Metric>> {
        s.split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(|p| match p {
                "mdd" => Ok(Metric::Mdd),
                "kl" => Ok(Metric::Kl),
                "mmd" => Ok(Metric::Mmd),
                "jftsd" => Ok(Metric::Jftsd),
                other => Err(Error::Config(format!(
                    "unknown metric '{other}' (expected mdd, kl, mmd, jftsd)"
                ))),
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub metrics: Vec<Metric>,
    pub split: String,
    pub histogram: HistogramSpec,
    pub mmd_bandwidth: Bandwidth,
    pub embedder: EmbedderConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            metrics: vec![Metric::Mdd, Metric::Kl, Metric::Mmd, Metric::Jftsd],
            split: "test".into(),
            histogram: HistogramSpec::default(),
            mmd_bandwidth: Bandwidth::Median,
            embedder: EmbedderConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub value: f64,
    pub config: serde_json::Value,
    pub n_real: usize,
    pub n_gen: usize,
}

pub type Report = BTreeMap<String, MetricEntry>;

/// Reference `(x, c)` for a generated split: the counterfactual ground truth
/// when the generated bundle was produced in counterfactual mode.
pub fn reference_pair<'a>(real: &'a SeriesBundle, gen: &SeriesBundle, split: &str) -> Result<(&'a Series, &'a Series)> {
    let data = real.split(split)?;
    let cf = gen.meta.generated.as_ref().map(|g| g.mode == "cf").unwrap_or(false);
    if cf {
        match (&data.xcf, &data.ccf) {
            (Some(x), Some(c)) => Ok((x, c)),
            _ => Err(Error::Data(format!(
                "counterfactual samples need ground truth in split '{split}' of the real bundle"
            ))),
        }
    } else {
        Ok((&data.x, &data.c))
    }
}

/// Computes the requested metrics for one split.
pub fn evaluate(real: &SeriesBundle, gen: &SeriesBundle, cfg: &EvalConfig, master_seed: u64) -> Result<Report> {
    let (rx, rc) = reference_pair(real, gen, &cfg.split)?;
    let g = gen.split(&cfg.split)?;
    let mut report = Report::new();
    let entry = |value: f64, config: serde_json::Value| MetricEntry {
        value,
        config,
        n_real: rx.n,
        n_gen: g.x.n,
    };
    for metric in &cfg.metrics {
        let e = match metric {
            Metric::Mdd => entry(mdd(rx, &g.x, &cfg.histogram)?, serde_json::to_value(&cfg.histogram)?),
            Metric::Kl => entry(kl(rx, &g.x, &cfg.histogram)?, serde_json::to_value(&cfg.histogram)?),
            Metric::Mmd => entry(mmd(rx, &g.x, cfg.mmd_bandwidth)?, serde_json::to_value(cfg.mmd_bandwidth)?),
            Metric::Jftsd => {
                let norm = Normalizer::from_meta(&real.meta);
                let train = real.split("train")?;
                let mut emb = EmbedderPair::new(
                    real.meta.d,
                    &real.meta.context_kinds_full(),
                    &cfg.embedder,
                    DType::F32,
                    seed::derive(master_seed, "eval/embedder/init"),
                )?;
                emb.train(
                    &norm.x_to_model(&train.x),
                    &norm.c_to_model(&train.c),
                    seed::derive(master_seed, "eval/embedder/train"),
                )?;
                let v = jftsd(
                    &norm.x_to_model(rx),
                    &norm.c_to_model(rc),
                    &norm.x_to_model(&g.x),
                    &norm.c_to_model(&g.c),
                    &emb,
                )?;
                entry(v, serde_json::to_value(&cfg.embedder)?)
            }
        };
        report.insert(metric.name().to_string(), e);
    }
    Ok(report)
}
