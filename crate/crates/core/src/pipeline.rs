//! Experiment orchestration: data → train → sample → eval → diagnose, with a
//! resumable run manifest, plus the step and ablation sweeps.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bundle::{ChannelKind, GenerationInfo, Series, SeriesBundle, SplitData};
use crate::config::RunConfig;
use crate::diffusion::{self, checkpoint::CHECKPOINT_SCHEMA_VERSION, Ablation, Checkpoint};
use crate::error::{Error, Result};
use crate::eval::{self, diagnostics, Report};
use crate::ingest::{self, DatasetSpec};
use crate::oscillator::{self, InitRanges};
use crate::sampling::{self, GuidanceConfig};
use crate::seed;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Data,
    Train,
    Sample,
    Eval,
    Diagnose,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Data, Stage::Train, Stage::Sample, Stage::Eval, Stage::Diagnose];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Data => "data",
            Stage::Train => "train",
            Stage::Sample => "sample",
            Stage::Eval => "eval",
            Stage::Diagnose => "diagnose",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub completed: bool,
    pub seconds: f64,
    pub outputs: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub dataset_id: Option<String>,
    pub checkpoint: Option<PathBuf>,
    pub outputs: BTreeMap<String, PathBuf>,
    pub stages: Vec<StageRecord>,
    pub versions: BTreeMap<String, String>,
    pub failed_stage: Option<Stage>,
}

impl RunManifest {
    pub fn new(config_hash: String) -> Self {
        let versions = [
            ("catsg", env!("CARGO_PKG_VERSION").to_string()),
            ("bundle_schema", crate::bundle::SCHEMA_VERSION.to_string()),
            ("checkpoint_schema", CHECKPOINT_SCHEMA_VERSION.to_string()),
            ("target", format!("{}-{}", std::env::consts::ARCH, std::env::consts::OS)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        Self {
            config_hash,
            versions,
            ..Self::default()
        }
    }

    pub fn completed(&self, stage: Stage) -> bool {
        self.stages.iter().any(|r| r.stage == stage && r.completed)
    }

    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_str(&fs::read_to_string(path)?)?))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
        fs::write(&tmp, serde_json::to_string_pretty(self)? + "\n")?;
        fs::rename(tmp, dir.join(MANIFEST_FILE))?;
        Ok(())
    }

    fn record(&mut self, rec: StageRecord) {
        self.stages.retain(|r| r.stage != rec.stage);
        self.stages.push(rec);
        self.stages.sort_by_key(|r| r.stage);
    }
}

/// Standard locations inside a run directory.
#[derive(Clone, Debug)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("model.ckpt")
    }
    pub fn samples(&self, mode: &str) -> PathBuf {
        self.root.join(format!("samples_{mode}"))
    }
    pub fn report(&self, mode: &str) -> PathBuf {
        self.root.join(format!("report_{mode}.json"))
    }
    pub fn diagnostics(&self) -> PathBuf {
        self.root.join("diagnostics")
    }
}

/// Generates, ingests or loads the dataset described by the config.
pub fn build_data(cfg: &RunConfig) -> Result<SeriesBundle> {
    let ds = &cfg.dataset;
    if let Some(dir) = &ds.bundle {
        return SeriesBundle::read(dir);
    }
    if let Some(spec) = &ds.spec {
        let spec = match DatasetSpec::builtin(spec) {
            Some(s) => s,
            None => DatasetSpec::load(Path::new(spec))?,
        };
        if ds.csv.is_empty() {
            return Err(Error::Config("dataset.csv lists no input files".into()));
        }
        let paths: Vec<&Path> = ds.csv.iter().map(PathBuf::as_path).collect();
        return ingest::ingest(&spec, &paths);
    }
    let data_seed = seed::derive(cfg.seed, "data");
    let dataset = oscillator::build_dataset(&ds.synthetic(data_seed)?)?;
    if ds.counterfactual {
        let cf = oscillator::build_cf_pairs(&dataset, &InitRanges::COUNTERFACTUAL, seed::derive(cfg.seed, "data/cf"))?;
        Ok(cf.bundle)
    } else {
        Ok(dataset.bundle)
    }
}

/// Bundle holding generated targets for one split, with the context used.
pub fn generated_bundle(real: &SeriesBundle, split: &str, x: Series, c: Series, info: GenerationInfo) -> Result<SeriesBundle> {
    let mut meta = real.meta.clone();
    meta.splits = [(split.to_string(), x.n)].into_iter().collect();
    meta.counterfactual = false;
    meta.generated = Some(info);
    meta.report = None;
    let splits = [(
        split.to_string(),
        SplitData {
            x,
            c,
            params: Vec::new(),
            xcf: None,
            ccf: None,
        },
    )]
    .into_iter()
    .collect();
    let bundle = SeriesBundle { meta, splits };
    bundle.validate()?;
    Ok(bundle)
}

/// Generation mode of the sampler front end.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Observational: interventional sampling with `omega = 0`.
    Obs,
    Int,
    Cf,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Obs => "obs",
            Mode::Int => "int",
            Mode::Cf => "cf",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "obs" => Ok(Mode::Obs),
            "int" => Ok(Mode::Int),
            "cf" => Ok(Mode::Cf),
            other => Err(Error::Config(format!("unknown mode '{other}' (expected obs, int or cf)"))),
        }
    }
}

/// Generates one split of `data` in the given mode. Counterfactual mode uses
/// the stored counterfactual contexts as actions unless `actions` is given.
pub fn generate(
    ckpt: &Checkpoint,
    data: &SeriesBundle,
    split: &str,
    mode: Mode,
    cfg: &GuidanceConfig,
    actions: Option<&Series>,
) -> Result<SeriesBundle> {
    let s = data.split(split)?;
    let cfg = match mode {
        Mode::Obs => GuidanceConfig { omega: 0.0, ..cfg.clone() },
        _ => cfg.clone(),
    };
    cfg.validate(&ckpt.model.schedule)?;
    let (out, c_used) = match mode {
        Mode::Obs | Mode::Int => {
            let c = actions.unwrap_or(&s.c);
            (sampling::sample_interventional(ckpt, c, &cfg)?, c.clone())
        }
        Mode::Cf => {
            let c_prime = match (actions, &s.ccf) {
                (Some(a), _) => a,
                (None, Some(ccf)) => ccf,
                (None, None) => {
                    return Err(Error::Data(format!(
                        "split '{split}' has no counterfactual contexts; pass an action"
                    )))
                }
            };
            (sampling::sample_counterfactual(ckpt, &s.x, &s.c, c_prime, &cfg)?, c_prime.clone())
        }
    };
    let info = GenerationInfo {
        mode: mode.name().into(),
        omega: cfg.omega,
        steps: cfg.steps,
        sampler: cfg.sampler.name().into(),
        seed: cfg.seed,
        source_dataset: data.meta.dataset_id.clone(),
    };
    generated_bundle(data, split, out.x, c_used, info)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Resolves a context channel given by name or index.
pub fn context_channel(data: &SeriesBundle, channel: &str) -> Result<usize> {
    let names = data.meta.context_names();
    let idx = channel
        .parse::<usize>()
        .ok()
        .filter(|&i| i < data.meta.d_c)
        .or_else(|| names.iter().position(|n| n == channel));
    idx.ok_or_else(|| Error::Config(format!("unknown context channel '{channel}' (available: {})", names.join(", "))))
}

/// Pointwise `(c, x)` pairs per split for the first target channel, capped
/// at `max_points` per split by even striding.
fn diagnostic_points(data: &SeriesBundle, ch: usize, max_points: usize) -> (Vec<f64>, Vec<f64>, Vec<String>) {
    let (mut xs, mut cs, mut ss) = (Vec::new(), Vec::new(), Vec::new());
    for (name, s) in &data.splits {
        let total = s.x.n * s.x.t;
        let stride = total.div_ceil(max_points).max(1);
        for p in (0..total).step_by(stride) {
            let (i, t) = (p / s.x.t, p % s.x.t);
            xs.push(s.x.get(i, t, 0) as f64);
            cs.push(s.c.get(i, t, ch) as f64);
            ss.push(name.clone());
        }
    }
    (xs, cs, ss)
}

/// Writes LOWESS curves and binned conditional means of the target against
/// one context channel, split by split.
pub fn diagnose(
    data: &SeriesBundle,
    channel: &str,
    frac: f64,
    grid: usize,
    bins: usize,
    curves_path: &Path,
    bins_path: &Path,
) -> Result<()> {
    let ch = context_channel(data, channel)?;
    if matches!(data.meta.context_kind(ch), ChannelKind::Categorical { .. }) {
        return Err(Error::Config(format!("context channel '{channel}' is categorical")));
    }
    let (x, c, splits) = diagnostic_points(data, ch, 20_000);
    let curves = diagnostics::lowess_diagnostic(&x, &c, &splits, frac, grid)?;
    let train_c: Vec<f64> = c.iter().zip(&splits).filter(|(_, s)| *s == "train").map(|(v, _)| *v).collect();
    let edges = diagnostics::edges_from_train(&train_c, bins)?;
    let table = diagnostics::binned_means(&x, &c, &splits, &edges)?;
    for p in [curves_path, bins_path] {
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut w = csv::Writer::from_path(curves_path)?;
    for r in &curves {
        w.serialize(r)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(bins_path)?;
    for r in &table {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Context channel diagnosed by default: the configured one, else the
/// first continuous channel.
fn default_channel(cfg: &RunConfig, data: &SeriesBundle) -> String {
    cfg.diagnose.context.clone().unwrap_or_else(|| {
        (0..data.meta.d_c)
            .find(|&i| data.meta.context_kind(i).is_continuous())
            .map(|i| data.meta.context_names()[i].clone())
            .unwrap_or_else(|| "0".into())
    })
}

fn run_stage<F>(manifest: &mut RunManifest, layout: &RunLayout, stage: Stage, body: F) -> Result<()>
where
    F: FnOnce(&mut RunManifest) -> Result<Vec<PathBuf>>,
{
    let started = Instant::now();
    log::info!("stage {} started", stage.name());
    match body(manifest) {
        Ok(outputs) => {
            manifest.record(StageRecord {
                stage,
                completed: true,
                seconds: started.elapsed().as_secs_f64(),
                outputs,
                error: None,
            });
            manifest.failed_stage = None;
            manifest.save(&layout.root)
        }
        Err(e) => {
            manifest.record(StageRecord {
                stage,
                completed: false,
                seconds: started.elapsed().as_secs_f64(),
                outputs: Vec::new(),
                error: Some(e.to_string()),
            });
            manifest.failed_stage = Some(stage);
            manifest.save(&layout.root)?;
            Err(e)
        }
    }
}

/// Modes sampled and evaluated by the pipeline for a bundle.
fn pipeline_modes(data: &SeriesBundle) -> Vec<Mode> {
    if data.meta.counterfactual {
        vec![Mode::Int, Mode::Cf]
    } else {
        vec![Mode::Int]
    }
}

/// Runs the requested stages in order inside `out`. Completed stages of a
/// previous run with the same config are skipped.
pub fn run_pipeline(cfg: &RunConfig, out: &Path, stages: &[Stage]) -> Result<RunManifest> {
    cfg.validate()?;
    let layout = RunLayout::new(out);
    let hash = cfg.hash();
    let mut manifest = match RunManifest::load(out)? {
        Some(m) if m.config_hash == hash => m,
        Some(_) => {
            return Err(Error::Config(format!(
                "{} holds a run with a different config; use a fresh output directory",
                out.display()
            )))
        }
        None => RunManifest::new(hash),
    };
    cfg.write(&out.join(CONFIG_FILE))?;
    manifest.save(out)?;
    let todo: Vec<Stage> = stages.iter().copied().filter(|s| !manifest.completed(*s)).collect();
    let wanted = |s: Stage| todo.contains(&s);

    if wanted(Stage::Data) {
        run_stage(&mut manifest, &layout, Stage::Data, |m| {
            let bundle = build_data(cfg)?;
            bundle.write(&layout.data())?;
            m.dataset_id = Some(bundle.meta.dataset_id.clone());
            m.outputs.insert("data".into(), layout.data());
            Ok(vec![layout.data()])
        })?;
    }
    let load_data = || -> Result<SeriesBundle> {
        let dir = layout.data();
        if dir.join("meta.json").exists() {
            SeriesBundle::read(&dir)
        } else {
            build_data(cfg)
        }
    };
    if wanted(Stage::Train) {
        let data = load_data()?;
        run_stage(&mut manifest, &layout, Stage::Train, |m| {
            let outcome = diffusion::train(&data, &cfg.model, &cfg.train_config(), cfg.seed, Some(&layout.checkpoint()))?;
            log::info!("training took {:.1}s", outcome.seconds);
            m.dataset_id = Some(data.meta.dataset_id.clone());
            m.checkpoint = Some(layout.checkpoint());
            Ok(vec![layout.checkpoint()])
        })?;
    }
    if wanted(Stage::Sample) {
        let data = load_data()?;
        run_stage(&mut manifest, &layout, Stage::Sample, |m| {
            let ckpt = Checkpoint::load(&layout.checkpoint())?;
            let mut outputs = Vec::new();
            for mode in pipeline_modes(&data) {
                let gen = generate(&ckpt, &data, &cfg.eval.split, mode, &cfg.sample, None)?;
                let dir = layout.samples(mode.name());
                gen.write(&dir)?;
                m.outputs.insert(format!("samples_{}", mode.name()), dir.clone());
                outputs.push(dir);
            }
            Ok(outputs)
        })?;
    }
    if wanted(Stage::Eval) {
        let data = load_data()?;
        run_stage(&mut manifest, &layout, Stage::Eval, |m| {
            let mut outputs = Vec::new();
            for mode in pipeline_modes(&data) {
                let gen = SeriesBundle::read(&layout.samples(mode.name()))?;
                let report = eval::evaluate(&data, &gen, &cfg.eval, cfg.seed)?;
                let path = layout.report(mode.name());
                write_json(&path, &report)?;
                m.outputs.insert(format!("report_{}", mode.name()), path.clone());
                outputs.push(path);
            }
            Ok(outputs)
        })?;
    }
    if wanted(Stage::Diagnose) {
        let data = load_data()?;
        run_stage(&mut manifest, &layout, Stage::Diagnose, |m| {
            let channel = default_channel(cfg, &data);
            let d = &cfg.diagnose;
            let outputs = vec![layout.diagnostics().join("curves.csv"), layout.diagnostics().join("bins.csv")];
            diagnose(&data, &channel, d.frac, d.grid, d.bins, &outputs[0], &outputs[1])?;
            m.outputs.insert("diagnostics".into(), layout.diagnostics());
            Ok(outputs)
        })?;
    }
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub setting: String,
    pub metrics: BTreeMap<String, f64>,
}

fn metric_values(report: &Report) -> BTreeMap<String, f64> {
    report.iter().map(|(k, v)| (k.clone(), v.value)).collect()
}

/// One interventional report per sampler step count, all from the same
/// checkpoint. Reports land in `out/steps_<n>.json`.
pub fn step_sweep(
    ckpt: &Checkpoint,
    data: &SeriesBundle,
    cfg: &RunConfig,
    steps: &[usize],
    out: &Path,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &n in steps {
        let g = GuidanceConfig {
            steps: n,
            ..cfg.sample.clone()
        };
        let gen = generate(ckpt, data, &cfg.eval.split, Mode::Int, &g, None)?;
        let report = eval::evaluate(data, &gen, &cfg.eval, cfg.seed)?;
        write_json(&out.join(format!("steps_{n}.json")), &report)?;
        rows.push(SweepRow {
            setting: format!("steps={n}"),
            metrics: metric_values(&report),
        });
    }
    write_json(&out.join("steps_summary.json"), &rows)?;
    Ok(rows)
}

/// Trains one model per ablation variant and evaluates counterfactual
/// generation against the ground-truth pairs. Each variant gets its own run
/// directory `out/<variant>/`; the comparison table is `out/ablation.csv`.
pub fn ablation_sweep(data: &SeriesBundle, cfg: &RunConfig, variants: &[Ablation], out: &Path) -> Result<Vec<SweepRow>> {
    if !data.meta.counterfactual {
        return Err(Error::Data("the ablation sweep needs a bundle with counterfactual pairs".into()));
    }
    fs::create_dir_all(out)?;
    let data_dir = out.join("data");
    if !data_dir.join("meta.json").exists() {
        data.write(&data_dir)?;
    }
    let mut rows = Vec::new();
    for &variant in variants {
        let run_cfg = RunConfig {
            ablation: variant,
            dataset: crate::config::DatasetSection {
                bundle: Some(data_dir.clone()),
                ..cfg.dataset.clone()
            },
            ..cfg.clone()
        };
        let dir = out.join(variant.name());
        let manifest = run_pipeline(&run_cfg, &dir, &[Stage::Train, Stage::Sample, Stage::Eval])?;
        let path = manifest
            .outputs
            .get("report_cf")
            .cloned()
            .unwrap_or_else(|| RunLayout::new(&dir).report("cf"));
        let report: Report = serde_json::from_str(&fs::read_to_string(path)?)?;
        rows.push(SweepRow {
            setting: variant.name().into(),
            metrics: metric_values(&report),
        });
    }
    let mut w = csv::Writer::from_path(out.join("ablation.csv"))?;
    let metric_names: Vec<String> = rows.first().map(|r| r.metrics.keys().cloned().collect()).unwrap_or_default();
    let mut header = vec!["variant".to_string()];
    header.extend(metric_names.iter().cloned());
    w.write_record(&header)?;
    for r in &rows {
        let mut rec = vec![r.setting.clone()];
        rec.extend(metric_names.iter().map(|m| format!("{}", r.metrics.get(m).copied().unwrap_or(f64::NAN))));
        w.write_record(&rec)?;
    }
    w.flush()?;
    write_json(&out.join("ablation_summary.json"), &rows)?;
    Ok(rows)
}
