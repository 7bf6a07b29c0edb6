//! Run configuration: defaults, JSON file, and dotted-path command-line
//! overrides resolved into one typed [`RunConfig`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::diffusion::{make_schedule, Ablation, ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::oscillator::{DatasetConfig, InitRanges, Scenario, SeqConfig, SplitRanges};
use crate::sampling::GuidanceConfig;

/// Where the data comes from: the oscillator simulator or a CSV ingest spec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// `VM` or `VP` for simulated data; ignored when `spec` is set.
    pub scenario: String,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub horizon_steps: usize,
    pub dt: f64,
    /// Also build counterfactual pairs for the simulated data.
    pub counterfactual: bool,
    /// Built-in ingest spec name (`air_quality`, `traffic`) or a JSON file.
    pub spec: Option<String>,
    pub csv: Vec<PathBuf>,
    /// Use an existing bundle directory instead of generating one.
    pub bundle: Option<PathBuf>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            scenario: "VM".into(),
            train: 3000,
            val: 1000,
            test: 1000,
            horizon_steps: 64,
            dt: 0.25,
            counterfactual: true,
            spec: None,
            csv: Vec::new(),
            bundle: None,
        }
    }
}

impl DatasetSection {
    pub fn synthetic(&self, seed: u64) -> Result<DatasetConfig> {
        let scenario: Scenario = self.scenario.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
        let mut cfg = DatasetConfig::new(scenario, self.train, self.val, self.test, seed);
        cfg.seq = SeqConfig {
            horizon_steps: self.horizon_steps,
            dt: self.dt,
            ..SeqConfig::default()
        };
        cfg.ranges = SplitRanges::table();
        cfg.init_ranges = InitRanges::FACTUAL;
        if cfg.counts.values().any(|&n| n == 0) {
            return Err(Error::Config(format!(
                "dataset counts must be positive, got {:?}",
                cfg.counts.iter().map(|(s, n)| (s.name(), *n)).collect::<BTreeMap<_, _>>()
            )));
        }
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnoseSection {
    /// Context channel name or index.
    pub context: Option<String>,
    pub frac: f64,
    pub grid: usize,
    pub bins: usize,
}

impl Default for DiagnoseSection {
    fn default() -> Self {
        Self {
            context: None,
            frac: 0.3,
            grid: 50,
            bins: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub steps: Vec<usize>,
    pub ablations: Vec<Ablation>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            steps: vec![5, 10, 20, 50, 100],
            ablations: vec![Ablation::Full, Ablation::RandEnv, Ablation::NoSw, Ablation::FrozenEnv],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sample: GuidanceConfig,
    pub eval: EvalConfig,
    pub diagnose: DiagnoseSection,
    pub sweep: SweepSection,
    pub ablation: Ablation,
    pub seed: u64,
}

/// Model hyperparameters also reachable under `train.` on the command line.
const ALIASES: &[(&str, &str)] = &[("train.k", "model.k"), ("train.h", "model.h")];

impl RunConfig {
    /// Training config with the run-level ablation applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            ablation: self.ablation,
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train_config().validate()?;
        self.sample.validate(&make_schedule(self.model.diffusion_steps, self.model.schedule)?)?;
        if !(self.diagnose.frac > 0.0 && self.diagnose.frac <= 1.0) {
            return Err(Error::Config(format!("diagnose.frac must lie in (0, 1], got {}", self.diagnose.frac)));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let canon = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&canon))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

/// Parses `value` as JSON when possible, otherwise as a bare string.
fn override_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sets `path` (dot separated) inside `root`, creating objects as needed.
fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("malformed override key '{path}'")));
    }
    let mut cur = root;
    for (i, key) in keys.iter().enumerate() {
        let Value::Object(map) = cur else {
            return Err(Error::Config(format!(
                "override '{path}': '{}' is not a section",
                keys[..i].join(".")
            )));
        };
        if i + 1 == keys.len() {
            map.insert(key.to_string(), value);
            return Ok(());
        }
        cur = map
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("loop returns on the last key")
}

/// Recursively overlays `top` onto `base`; objects merge, everything else
/// replaces.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn from_value(value: Value, origin: &str) -> Result<RunConfig> {
    serde_path_to_error::deserialize(value)
        .map_err(|e| Error::Config(format!("{origin}: {} (at '{}')", e.inner(), e.path())))
}

/// Resolves defaults, then the optional JSON file, then `key=value` style
/// overrides in order (the last one wins).
pub fn parse_config(file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut value = serde_json::to_value(RunConfig::default())?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let file_value: Value = if text.trim().is_empty() {
            Value::Object(Default::default())
        } else {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        if !file_value.is_object() {
            return Err(Error::Config(format!("{}: top level must be an object", path.display())));
        }
        // Type-check the file on its own so errors name file paths.
        let mut check = serde_json::to_value(RunConfig::default())?;
        merge(&mut check, file_value.clone());
        from_value(check, &path.display().to_string())?;
        merge(&mut value, file_value);
    }
    for (key, raw) in overrides {
        let key = ALIASES
            .iter()
            .find(|(alias, _)| alias == key)
            .map(|(_, target)| target.to_string())
            .unwrap_or_else(|| key.clone());
        set_path(&mut value, &key, override_value(raw))?;
    }
    let cfg = from_value(value, "command-line overrides")?;
    cfg.validate()?;
    Ok(cfg)
}

/// Splits `--a.b value` / `--a.b=value` pairs from free arguments.
pub fn parse_override_args(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let arg = &args[i];
        let Some(key) = arg.strip_prefix("--") else {
            return Err(Error::Config(format!("unexpected argument '{arg}' (overrides look like --section.key value)")));
        };
        if let Some((k, v)) = key.split_once('=') {
            out.push((k.to_string(), v.to_string()));
            i += 1;
        } else {
            let Some(v) = args.get(i + 1) else {
                return Err(Error::Config(format!("override '--{key}' is missing a value")));
            };
            out.push((key.to_string(), v.clone()));
            i += 2;
        }
    }
    Ok(out)
}
