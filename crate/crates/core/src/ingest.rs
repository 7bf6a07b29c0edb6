//! CSV ingestion for the real-world datasets: typed loading with imputation,
//! environment-proxy splits (station partitions or temperature thresholds),
//! and windowing into series bundles.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::bundle::{BundleMeta, ChannelKind, Normalization, Series, SeriesBundle, SplitData, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::oscillator::Split;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Continuous,
    Categorical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextColumn {
    pub name: String,
    pub kind: ColumnKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TimestampSpec {
    /// One column parsed with a chrono format string.
    Column { name: String, format: String },
    /// Separate integer year, month, day and hour columns.
    Parts {
        year: String,
        month: String,
        day: String,
        hour: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitRule {
    /// Exact membership of a station column value.
    StationPartition {
        column: String,
        train: Vec<String>,
        val: Vec<String>,
        test: Vec<String>,
    },
    /// `value + offset < lower` is train, `[lower, upper]` is val, above is test.
    Threshold {
        column: String,
        lower: f64,
        upper: f64,
        #[serde(default)]
        offset: f64,
    },
}

impl SplitRule {
    pub fn column(&self) -> &str {
        match self {
            SplitRule::StationPartition { column, .. } | SplitRule::Threshold { column, .. } => column,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    pub timestamp: TimestampSpec,
    pub target_column: String,
    pub context_columns: Vec<ContextColumn>,
    pub split_rule: SplitRule,
    #[serde(default = "default_window")]
    pub window_len: usize,
    /// Adds sin/cos time-of-day channels.
    #[serde(default = "default_true")]
    pub phase: bool,
}

fn default_window() -> usize {
    24
}

fn default_true() -> bool {
    true
}

fn cont(name: &str) -> ContextColumn {
    ContextColumn {
        name: name.into(),
        kind: ColumnKind::Continuous,
    }
}

fn cat(name: &str) -> ContextColumn {
    ContextColumn {
        name: name.into(),
        kind: ColumnKind::Categorical,
    }
}

impl DatasetSpec {
    /// Beijing multi-site air quality, split by monitoring station.
    pub fn air_quality() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        Self {
            name: "air_quality".into(),
            timestamp: TimestampSpec::Parts {
                year: "year".into(),
                month: "month".into(),
                day: "day".into(),
                hour: "hour".into(),
            },
            target_column: "PM2.5".into(),
            context_columns: vec![
                cont("TEMP"),
                cont("PRES"),
                cont("DEWP"),
                cont("WSPM"),
                cont("RAIN"),
                cat("wd"),
            ],
            split_rule: SplitRule::StationPartition {
                column: "station".into(),
                train: s(&[
                    "Dongsi",
                    "Guanyuan",
                    "Tiantan",
                    "Wanshouxigong",
                    "Aotizhongxin",
                    "Nongzhanguan",
                    "Wanliu",
                    "Gucheng",
                ]),
                val: s(&["Changping", "Dingling"]),
                test: s(&["Shunyi", "Huairou"]),
            },
            window_len: 24,
            phase: true,
        }
    }

    /// Metro interstate traffic volume, split by air temperature (Kelvin in
    /// the source, thresholds in Celsius).
    pub fn traffic() -> Self {
        Self {
            name: "traffic".into(),
            timestamp: TimestampSpec::Column {
                name: "date_time".into(),
                format: "%Y-%m-%d %H:%M:%S".into(),
            },
            target_column: "traffic_volume".into(),
            context_columns: vec![
                cont("rain_1h"),
                cont("snow_1h"),
                cont("clouds_all"),
                cat("weather_main"),
                cat("holiday"),
            ],
            split_rule: SplitRule::Threshold {
                column: "temp".into(),
                lower: 12.0,
                upper: 22.0,
                offset: -273.15,
            },
            window_len: 24,
            phase: true,
        }
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "air_quality" => Some(Self::air_quality()),
            "traffic" => Some(Self::traffic()),
            _ => None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut de = serde_json::Deserializer::from_str(&text);
        serde_path_to_error::deserialize(&mut de)
            .map_err(|e| Error::Config(format!("{}: {} at {}", path.display(), e.inner(), e.path())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.context_columns.iter().any(|c| c.name == self.target_column) {
            return Err(Error::Config("target column is also listed as a context".into()));
        }
        if self.context_columns.iter().any(|c| c.name == self.split_rule.column())
            && matches!(self.split_rule, SplitRule::Threshold { .. })
        {
            return Err(Error::Config("threshold split variable cannot also be a context".into()));
        }
        if self.window_len < 2 {
            return Err(Error::Config("window_len must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum CtxValue {
    Num(f64),
    Cat(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawRow {
    /// Hours since the Unix epoch.
    pub hour: i64,
    /// Station (partition rules) or empty.
    pub group: String,
    pub target: f64,
    pub contexts: Vec<CtxValue>,
    /// Value of a threshold split variable.
    pub split_value: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows_read: usize,
    pub missing_target: usize,
    pub unparseable: usize,
    pub forward_filled: BTreeMap<String, usize>,
    pub mean_imputed: BTreeMap<String, usize>,
    pub unassigned: usize,
    pub duplicate_timestamps: usize,
    pub windows: BTreeMap<String, usize>,
    pub window_len: usize,
    pub imputation: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawTable {
    pub rows: Vec<RawRow>,
    pub report: IngestReport,
}

fn is_missing(s: &str) -> bool {
    let t = s.trim();
    t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan")
}

fn column_index(headers: &csv::StringRecord, name: &str, path: &Path) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::Schema(format!("{}: missing column '{name}'", path.display())))
}

fn epoch_hours(dt: NaiveDateTime) -> i64 {
    dt.and_utc().timestamp().div_euclid(3600)
}

/// Reads and types the rows of one or more CSV files.
pub fn load_csv_dataset(spec: &DatasetSpec, paths: &[&Path]) -> Result<RawTable> {
    spec.validate()?;
    let mut report = IngestReport {
        window_len: spec.window_len,
        imputation: "forward fill within group, then train-agnostic column mean".into(),
        ..IngestReport::default()
    };
    let mut rows = Vec::new();
    let mut missing: Vec<Vec<bool>> = Vec::new();
    for path in paths {
        let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
        let headers = reader.headers()?.clone();
        if headers.is_empty() {
            continue;
        }
        let target = column_index(&headers, &spec.target_column, path)?;
        let ctx: Vec<usize> = spec
            .context_columns
            .iter()
            .map(|c| column_index(&headers, &c.name, path))
            .collect::<Result<_>>()?;
        let split_col = column_index(&headers, spec.split_rule.column(), path)?;
        let ts_cols = match &spec.timestamp {
            TimestampSpec::Column { name, .. } => vec![column_index(&headers, name, path)?],
            TimestampSpec::Parts { year, month, day, hour } => vec![
                column_index(&headers, year, path)?,
                column_index(&headers, month, path)?,
                column_index(&headers, day, path)?,
                column_index(&headers, hour, path)?,
            ],
        };
        for record in reader.records() {
            report.rows_read += 1;
            let Ok(record) = record else {
                report.unparseable += 1;
                continue;
            };
            let field = |i: usize| record.get(i).unwrap_or("").trim();
            let hour = match &spec.timestamp {
                TimestampSpec::Column { format, .. } => {
                    NaiveDateTime::parse_from_str(field(ts_cols[0]), format).ok().map(epoch_hours)
                }
                TimestampSpec::Parts { .. } => {
                    let p: Option<Vec<u32>> = ts_cols.iter().map(|&i| field(i).parse::<u32>().ok()).collect();
                    p.and_then(|p| {
                        NaiveDate::from_ymd_opt(p[0] as i32, p[1], p[2])
                            .and_then(|d| d.and_hms_opt(p[3], 0, 0))
                            .map(epoch_hours)
                    })
                }
            };
            let Some(hour) = hour else {
                report.unparseable += 1;
                continue;
            };
            let target_v = field(target);
            if is_missing(target_v) {
                report.missing_target += 1;
                continue;
            }
            let Ok(target_v) = target_v.parse::<f64>() else {
                report.unparseable += 1;
                continue;
            };
            let mut contexts = Vec::with_capacity(ctx.len());
            let mut miss = Vec::with_capacity(ctx.len());
            let mut bad = false;
            for (col, &i) in spec.context_columns.iter().zip(&ctx) {
                let v = field(i);
                match col.kind {
                    ColumnKind::Continuous => {
                        if is_missing(v) {
                            contexts.push(CtxValue::Num(f64::NAN));
                            miss.push(true);
                        } else if let Ok(x) = v.parse::<f64>() {
                            contexts.push(CtxValue::Num(x));
                            miss.push(false);
                        } else {
                            bad = true;
                            break;
                        }
                    }
                    ColumnKind::Categorical => {
                        contexts.push(CtxValue::Cat(if is_missing(v) { "NA".into() } else { v.to_string() }));
                        miss.push(false);
                    }
                }
            }
            if bad {
                report.unparseable += 1;
                continue;
            }
            let (group, split_value) = match &spec.split_rule {
                SplitRule::StationPartition { .. } => (field(split_col).to_string(), None),
                SplitRule::Threshold { offset, .. } => {
                    (String::new(), field(split_col).parse::<f64>().ok().map(|v| v + offset))
                }
            };
            rows.push(RawRow {
                hour,
                group,
                target: target_v,
                contexts,
                split_value,
            });
            missing.push(miss);
        }
    }
    if rows.is_empty() {
        log::warn!("dataset '{}' has no usable rows", spec.name);
        return Ok(RawTable { rows, report });
    }
    impute(spec, &mut rows, &missing, &mut report);
    Ok(RawTable { rows, report })
}

fn impute(spec: &DatasetSpec, rows: &mut [RawRow], missing: &[Vec<bool>], report: &mut IngestReport) {
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| (&rows[a].group, rows[a].hour).cmp(&(&rows[b].group, rows[b].hour)));
    for (j, col) in spec.context_columns.iter().enumerate() {
        if col.kind != ColumnKind::Continuous {
            continue;
        }
        let mut filled = 0;
        let mut last: Option<(String, f64)> = None;
        for &i in &order {
            let CtxValue::Num(v) = rows[i].contexts[j] else { continue };
            if missing[i][j] {
                if let Some((g, prev)) = &last {
                    if *g == rows[i].group {
                        rows[i].contexts[j] = CtxValue::Num(*prev);
                        filled += 1;
                        continue;
                    }
                }
            } else {
                last = Some((rows[i].group.clone(), v));
            }
        }
        let observed: Vec<f64> = rows
            .iter()
            .filter_map(|r| match r.contexts[j] {
                CtxValue::Num(v) if v.is_finite() => Some(v),
                _ => None,
            })
            .collect();
        let mean = if observed.is_empty() {
            0.0
        } else {
            observed.iter().sum::<f64>() / observed.len() as f64
        };
        let mut imputed = 0;
        for r in rows.iter_mut() {
            if let CtxValue::Num(v) = r.contexts[j] {
                if !v.is_finite() {
                    r.contexts[j] = CtxValue::Num(mean);
                    imputed += 1;
                }
            }
        }
        report.forward_filled.insert(col.name.clone(), filled);
        report.mean_imputed.insert(col.name.clone(), imputed);
    }
}

/// Assigns each row to a split; unmatched rows are dropped and counted.
pub fn apply_split(table: &RawTable, rule: &SplitRule) -> (BTreeMap<Split, Vec<RawRow>>, usize) {
    let mut out: BTreeMap<Split, Vec<RawRow>> = Split::ALL.iter().map(|s| (*s, Vec::new())).collect();
    let mut dropped = 0;
    for row in &table.rows {
        let split = match rule {
            SplitRule::StationPartition { train, val, test, .. } => {
                if train.contains(&row.group) {
                    Some(Split::Train)
                } else if val.contains(&row.group) {
                    Some(Split::Val)
                } else if test.contains(&row.group) {
                    Some(Split::Test)
                } else {
                    None
                }
            }
            SplitRule::Threshold { lower, upper, .. } => match row.split_value {
                Some(v) if v < *lower => Some(Split::Train),
                Some(v) if v <= *upper => Some(Split::Val),
                Some(v) if v > *upper => Some(Split::Test),
                _ => None,
            },
        };
        match split {
            Some(s) => out.get_mut(&s).expect("all splits present").push(row.clone()),
            None => dropped += 1,
        }
    }
    (out, dropped)
}

/// `(sin(2 pi t / period), cos(2 pi t / period))`.
pub fn phase(t: f64, period: f64) -> (f64, f64) {
    let a = 2.0 * std::f64::consts::PI * t / period;
    (a.sin(), a.cos())
}

/// Splits rows (already in one split) into non-overlapping windows of
/// consecutive hours within each group. Returns row windows and the number
/// of duplicate timestamps dropped.
pub fn contiguous_windows(rows: &[RawRow], window_len: usize) -> (Vec<Vec<RawRow>>, usize) {
    let mut sorted: Vec<&RawRow> = rows.iter().collect();
    sorted.sort_by(|a, b| (&a.group, a.hour).cmp(&(&b.group, b.hour)));
    let mut dups = 0;
    let mut windows = Vec::new();
    let mut run: Vec<RawRow> = Vec::new();
    for r in sorted {
        if let Some(last) = run.last() {
            if last.group == r.group && last.hour == r.hour {
                dups += 1;
                continue;
            }
            if last.group != r.group || r.hour != last.hour + 1 {
                run.clear();
            }
        }
        run.push(r.clone());
        if run.len() == window_len {
            windows.push(std::mem::take(&mut run));
        }
    }
    (windows, dups)
}

/// Windows each split and encodes it into a series bundle. Categorical
/// vocabularies come from the train split; unseen values map to UNK.
pub fn window_and_encode(splits: &BTreeMap<Split, Vec<RawRow>>, spec: &DatasetSpec, mut report: IngestReport) -> Result<SeriesBundle> {
    let mut vocabs: Vec<Option<Vec<String>>> = spec
        .context_columns
        .iter()
        .map(|c| (c.kind == ColumnKind::Categorical).then(Vec::new))
        .collect();
    let train_rows = splits.get(&Split::Train).map(Vec::as_slice).unwrap_or(&[]);
    for (j, v) in vocabs.iter_mut().enumerate() {
        if let Some(v) = v {
            let set: BTreeSet<&str> = train_rows
                .iter()
                .filter_map(|r| match &r.contexts[j] {
                    CtxValue::Cat(s) => Some(s.as_str()),
                    _ => None,
                })
                .collect();
            *v = set.into_iter().map(str::to_string).collect();
        }
    }
    let mut kinds: Vec<ChannelKind> = vocabs
        .iter()
        .map(|v| match v {
            Some(vocab) => ChannelKind::Categorical { vocab: vocab.clone() },
            None => ChannelKind::Continuous,
        })
        .collect();
    let mut names = vec![spec.target_column.clone()];
    names.extend(spec.context_columns.iter().map(|c| c.name.clone()));
    if spec.phase {
        kinds.push(ChannelKind::Phase);
        kinds.push(ChannelKind::Phase);
        names.push("phase_sin".into());
        names.push("phase_cos".into());
    }
    let d_c = kinds.len();
    let t_len = spec.window_len;

    let mut out = BTreeMap::new();
    let mut dups = 0;
    for split in Split::ALL {
        let rows = splits.get(&split).map(Vec::as_slice).unwrap_or(&[]);
        let (windows, d) = contiguous_windows(rows, t_len);
        dups += d;
        if windows.is_empty() {
            return Err(Error::Data(format!(
                "split '{}' has no complete window of {t_len} consecutive hours",
                split.name()
            )));
        }
        let n = windows.len();
        let mut x = Series::zeros(n, t_len, 1);
        let mut c = Series::zeros(n, t_len, d_c);
        let mut params = Vec::with_capacity(n);
        for (i, w) in windows.iter().enumerate() {
            for (t, r) in w.iter().enumerate() {
                x.set(i, t, 0, r.target as f32);
                for (j, v) in r.contexts.iter().enumerate() {
                    let value = match (v, &vocabs[j]) {
                        (CtxValue::Num(v), _) => *v,
                        (CtxValue::Cat(s), Some(vocab)) => vocab.binary_search(s).unwrap_or(vocab.len()) as f64,
                        (CtxValue::Cat(_), None) => 0.0,
                    };
                    c.set(i, t, j, value as f32);
                }
                if spec.phase {
                    let hod = r.hour.rem_euclid(24) as f64;
                    let (s, co) = phase(hod, 24.0);
                    c.set(i, t, d_c - 2, s as f32);
                    c.set(i, t, d_c - 1, co as f32);
                }
            }
            let start = chrono::DateTime::from_timestamp(w[0].hour * 3600, 0)
                .map(|d| d.naive_utc().format("%Y-%m-%d %H:00").to_string())
                .unwrap_or_default();
            let proxy = w.iter().filter_map(|r| r.split_value).collect::<Vec<_>>();
            let mut p = serde_json::json!({ "start": start, "hour_of_day": w[0].hour.rem_euclid(24) });
            if !w[0].group.is_empty() {
                p["station"] = serde_json::json!(w[0].group);
            }
            if !proxy.is_empty() {
                p["proxy_mean"] = serde_json::json!(proxy.iter().sum::<f64>() / proxy.len() as f64);
            }
            params.push(p);
        }
        report.windows.insert(split.name().to_string(), n);
        out.insert(
            split.name().to_string(),
            SplitData {
                x,
                c,
                params,
                xcf: None,
                ccf: None,
            },
        );
    }
    report.duplicate_timestamps = dups;
    let train = &out["train"];
    let nx = Normalization::fit(&[&train.x]);
    let nc = Normalization::fit(&[&train.c]);
    let normalization = Normalization {
        min: nx.min.iter().chain(&nc.min).copied().collect(),
        max: nx.max.iter().chain(&nc.max).copied().collect(),
    };
    let dataset_id = {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(spec.name.as_bytes());
        h.update(serde_json::to_vec(spec)?);
        for s in out.values() {
            for v in s.x.data.iter().chain(&s.c.data) {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..8])
    };
    let meta = BundleMeta {
        schema_version: SCHEMA_VERSION,
        dataset_id,
        scenario: spec.name.clone(),
        splits: out.iter().map(|(k, v)| (k.clone(), v.len())).collect(),
        t: t_len,
        d: 1,
        d_c,
        dt: 1.0,
        channel_names: names,
        normalization,
        seed: 0,
        context_kinds: kinds,
        counterfactual: false,
        generated: None,
        report: Some(serde_json::to_value(&report)?),
    };
    let bundle = SeriesBundle { meta, splits: out };
    bundle.validate()?;
    Ok(bundle)
}

/// Load, split, window and encode in one go.
pub fn ingest(spec: &DatasetSpec, paths: &[&Path]) -> Result<SeriesBundle> {
    let table = load_csv_dataset(spec, paths)?;
    if table.rows.is_empty() {
        return Err(Error::Data(format!("dataset '{}' is empty", spec.name)));
    }
    let (splits, dropped) = apply_split(&table, &spec.split_rule);
    let mut report = table.report.clone();
    report.unassigned = dropped;
    window_and_encode(&splits, spec, report)
}
