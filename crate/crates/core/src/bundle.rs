//! Series-bundle directory format shared by the synthetic generator, the CSV
//! ingestion path and the samplers.
//!
//! Layout of a bundle directory:
//!
//! * `meta.json`: dataset description ([`BundleMeta`]).
//! * `x.<split>.bin`, `c.<split>.bin`: little-endian `f32`, row-major
//!   `[sample, time, channel]`.
//! * `params.<split>.jsonl`: optional per-sample metadata, one JSON object per line.
//! * `xcf.<split>.bin`, `ccf.<split>.bin`: optional counterfactual tensors.
//!
//! Tensors are stored in physical units. The `normalization` block carries the
//! per-channel train-split min/max (target channels first, then context
//! channels) that models apply at their input boundary.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Dense `[sample, time, channel]` tensor of `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub n: usize,
    pub t: usize,
    pub ch: usize,
    pub data: Vec<f32>,
}

impl Series {
    pub fn new(n: usize, t: usize, ch: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n * t * ch {
            return Err(Error::Data(format!(
                "series buffer has {} values, expected {}x{}x{}",
                data.len(),
                n,
                t,
                ch
            )));
        }
        Ok(Self { n, t, ch, data })
    }

    pub fn zeros(n: usize, t: usize, ch: usize) -> Self {
        Self {
            n,
            t,
            ch,
            data: vec![0.0; n * t * ch],
        }
    }

    #[inline]
    pub fn idx(&self, i: usize, t: usize, c: usize) -> usize {
        (i * self.t + t) * self.ch + c
    }

    #[inline]
    pub fn get(&self, i: usize, t: usize, c: usize) -> f32 {
        self.data[self.idx(i, t, c)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, t: usize, c: usize, v: f32) {
        let k = self.idx(i, t, c);
        self.data[k] = v;
    }

    /// Row-major slice of one sample (`t * ch` values).
    pub fn sample(&self, i: usize) -> &[f32] {
        let len = self.t * self.ch;
        &self.data[i * len..(i + 1) * len]
    }

    /// Gathers the listed samples into a new series.
    pub fn select(&self, idx: &[usize]) -> Series {
        let mut data = Vec::with_capacity(idx.len() * self.t * self.ch);
        for &i in idx {
            data.extend_from_slice(self.sample(i));
        }
        Series {
            n: idx.len(),
            t: self.t,
            ch: self.ch,
            data,
        }
    }

    /// All values of one channel, pooled over samples and time.
    pub fn channel_values(&self, c: usize) -> Vec<f64> {
        self.data
            .iter()
            .skip(c)
            .step_by(self.ch)
            .map(|&v| v as f64)
            .collect()
    }

    /// Concatenates series with matching `(t, ch)` along the sample axis.
    pub fn concat(parts: &[&Series]) -> Result<Series> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidInput("nothing to concatenate".into()))?;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if p.t != first.t || p.ch != first.ch {
                return Err(Error::InvalidInput("series shapes differ".into()));
            }
            data.extend_from_slice(&p.data);
            n += p.n;
        }
        Series::new(n, first.t, first.ch, data)
    }

    fn write_bin(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    fn read_bin(path: &Path, n: usize, t: usize, ch: usize) -> Result<Series> {
        let bytes = fs::read(path)?;
        if bytes.len() != n * t * ch * 4 {
            return Err(Error::Data(format!(
                "{}: {} bytes, expected {} for shape [{n}, {t}, {ch}]",
                path.display(),
                bytes.len(),
                n * t * ch * 4
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Series::new(n, t, ch, data)
    }
}

/// How a context channel is encoded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChannelKind {
    Continuous,
    /// Integer vocabulary index stored as `f32`. Index `vocab.len()` is UNK.
    Categorical { vocab: Vec<String> },
    /// Time-of-day phase feature in `[-1, 1]`; never rescaled.
    Phase,
}

impl ChannelKind {
    pub fn is_continuous(&self) -> bool {
        matches!(self, ChannelKind::Continuous)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Normalization {
    /// Maps a physical value into `[0, 1]` using the stored train range.
    pub fn to_unit(&self, channel: usize, v: f64) -> f64 {
        let span = self.max[channel] - self.min[channel];
        if span > 0.0 {
            (v - self.min[channel]) / span
        } else {
            v - self.min[channel]
        }
    }

    pub fn from_unit(&self, channel: usize, u: f64) -> f64 {
        let span = self.max[channel] - self.min[channel];
        if span > 0.0 {
            u * span + self.min[channel]
        } else {
            u + self.min[channel]
        }
    }

    /// Per-channel min/max over a set of series sharing one channel layout.
    pub fn fit(series: &[&Series]) -> Normalization {
        let ch = series.first().map(|s| s.ch).unwrap_or(0);
        let mut min = vec![f64::INFINITY; ch];
        let mut max = vec![f64::NEG_INFINITY; ch];
        for s in series {
            for (k, &v) in s.data.iter().enumerate() {
                let c = k % ch;
                min[c] = min[c].min(v as f64);
                max[c] = max[c].max(v as f64);
            }
        }
        for c in 0..ch {
            if !min[c].is_finite() {
                min[c] = 0.0;
                max[c] = 1.0;
            }
        }
        Normalization { min, max }
    }
}

/// Provenance of a generated bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationInfo {
    pub mode: String,
    pub omega: f64,
    pub steps: usize,
    pub sampler: String,
    pub seed: u64,
    pub source_dataset: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub schema_version: u32,
    pub dataset_id: String,
    pub scenario: String,
    pub splits: BTreeMap<String, usize>,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "D")]
    pub d: usize,
    #[serde(rename = "D_c")]
    pub d_c: usize,
    pub dt: f64,
    pub channel_names: Vec<String>,
    pub normalization: Normalization,
    pub seed: u64,
    /// Encoding of each context channel; empty means all continuous.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub context_kinds: Vec<ChannelKind>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub counterfactual: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated: Option<GenerationInfo>,
    /// Free-form preprocessing report (imputation counts, dropped rows, ...).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<serde_json::Value>,
}

impl BundleMeta {
    pub fn context_kind(&self, c: usize) -> ChannelKind {
        self.context_kinds
            .get(c)
            .cloned()
            .unwrap_or(ChannelKind::Continuous)
    }

    pub fn context_kinds_full(&self) -> Vec<ChannelKind> {
        (0..self.d_c).map(|c| self.context_kind(c)).collect()
    }

    pub fn context_names(&self) -> &[String] {
        &self.channel_names[self.d..]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitData {
    pub x: Series,
    pub c: Series,
    pub params: Vec<serde_json::Value>,
    pub xcf: Option<Series>,
    pub ccf: Option<Series>,
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.x.n
    }

    pub fn is_empty(&self) -> bool {
        self.x.n == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeriesBundle {
    pub meta: BundleMeta,
    pub splits: BTreeMap<String, SplitData>,
}

impl SeriesBundle {
    pub fn split(&self, name: &str) -> Result<&SplitData> {
        self.splits
            .get(name)
            .ok_or_else(|| Error::Data(format!("bundle has no split '{name}'")))
    }

    /// Checks that tensor shapes agree with `meta.json`.
    pub fn validate(&self) -> Result<()> {
        let m = &self.meta;
        if m.channel_names.len() != m.d + m.d_c {
            return Err(Error::Schema(format!(
                "channel_names has {} entries, expected D + D_c = {}",
                m.channel_names.len(),
                m.d + m.d_c
            )));
        }
        if m.normalization.min.len() != m.d + m.d_c || m.normalization.max.len() != m.d + m.d_c {
            return Err(Error::Schema("normalization length mismatch".into()));
        }
        if !m.context_kinds.is_empty() && m.context_kinds.len() != m.d_c {
            return Err(Error::Schema("context_kinds length mismatch".into()));
        }
        if m.splits.len() != self.splits.len() {
            return Err(Error::Schema("split list does not match tensors".into()));
        }
        for (name, count) in &m.splits {
            let s = self.split(name)?;
            let shapes = [(&s.x, m.d), (&s.c, m.d_c)];
            for (series, ch) in shapes {
                if series.n != *count || series.t != m.t || series.ch != ch {
                    return Err(Error::Schema(format!(
                        "split '{name}': tensor [{}, {}, {}] disagrees with meta [{count}, {}, {ch}]",
                        series.n, series.t, series.ch, m.t
                    )));
                }
            }
            if m.counterfactual && (s.xcf.is_none() || s.ccf.is_none()) {
                return Err(Error::Schema(format!(
                    "split '{name}' lacks counterfactual tensors"
                )));
            }
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        fs::create_dir_all(dir)?;
        let meta = serde_json::to_string_pretty(&self.meta)?;
        fs::write(dir.join("meta.json"), meta + "\n")?;
        for (name, s) in &self.splits {
            s.x.write_bin(&dir.join(format!("x.{name}.bin")))?;
            s.c.write_bin(&dir.join(format!("c.{name}.bin")))?;
            if !s.params.is_empty() {
                let mut w = BufWriter::new(fs::File::create(
                    dir.join(format!("params.{name}.jsonl")),
                )?);
                for p in &s.params {
                    serde_json::to_writer(&mut w, p)?;
                    w.write_all(b"\n")?;
                }
                w.flush()?;
            }
            if let (Some(xcf), Some(ccf)) = (&s.xcf, &s.ccf) {
                xcf.write_bin(&dir.join(format!("xcf.{name}.bin")))?;
                ccf.write_bin(&dir.join(format!("ccf.{name}.bin")))?;
            }
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<SeriesBundle> {
        let meta_path = dir.join("meta.json");
        let text = fs::read_to_string(&meta_path).map_err(|e| {
            Error::Data(format!("cannot read {}: {e}", meta_path.display()))
        })?;
        let meta: BundleMeta = serde_json::from_str(&text)
            .map_err(|e| Error::Schema(format!("{}: {e}", meta_path.display())))?;
        let mut splits = BTreeMap::new();
        for (name, &n) in &meta.splits {
            let x = Series::read_bin(&dir.join(format!("x.{name}.bin")), n, meta.t, meta.d)?;
            let c = Series::read_bin(&dir.join(format!("c.{name}.bin")), n, meta.t, meta.d_c)?;
            let params_path = dir.join(format!("params.{name}.jsonl"));
            let mut params = Vec::new();
            if params_path.exists() {
                let reader = BufReader::new(fs::File::open(&params_path)?);
                for line in reader.lines() {
                    let line = line?;
                    if !line.trim().is_empty() {
                        params.push(serde_json::from_str(&line)?);
                    }
                }
            }
            let xcf_path = dir.join(format!("xcf.{name}.bin"));
            let (xcf, ccf) = if xcf_path.exists() {
                (
                    Some(Series::read_bin(&xcf_path, n, meta.t, meta.d)?),
                    Some(Series::read_bin(
                        &dir.join(format!("ccf.{name}.bin")),
                        n,
                        meta.t,
                        meta.d_c,
                    )?),
                )
            } else {
                (None, None)
            };
            splits.insert(
                name.clone(),
                SplitData {
                    x,
                    c,
                    params,
                    xcf,
                    ccf,
                },
            );
        }
        let bundle = SeriesBundle { meta, splits };
        bundle.validate()?;
        Ok(bundle)
    }
}
