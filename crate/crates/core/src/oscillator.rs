//! Damped harmonic oscillator benchmark with time-varying mass, damping and
//! stiffness, plus factual/counterfactual dataset construction.
//!
//! The governing equation is `m(t) x'' + gamma(t) x' + k(t) x = 0` with
//!
//! * `m(t) = m0 + alpha t`
//! * `gamma(t) = gamma0 + beta sin(omega_gamma t)`
//! * `k(t) = k0 (1 - eta (1 - exp(-lambda t)))`
//!
//! The target series is the acceleration, the context is `(velocity, position)`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::{BundleMeta, Normalization, Series, SeriesBundle, SplitData, SCHEMA_VERSION};
use crate::error::{invalid, Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scenario {
    /// Variable mass only.
    VM,
    /// Variable mass, damping and stiffness.
    VP,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scenario::VM => write!(f, "harmonic_vm"),
            Scenario::VP => write!(f, "harmonic_vp"),
        }
    }
}

impl FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vm" | "harmonic_vm" | "harmonic-vm" => Ok(Scenario::VM),
            "vp" | "harmonic_vp" | "harmonic-vp" => Ok(Scenario::VP),
            other => invalid(format!("unknown scenario '{other}' (expected VM or VP)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => invalid(format!("unknown split '{other}'")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OscParams {
    pub m0: f64,
    pub gamma0: f64,
    pub k0: f64,
    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,
    pub omega_gamma: f64,
    pub lambda: f64,
    pub scenario: Scenario,
}

impl OscParams {
    /// Defaults with all time variation switched off.
    pub fn constant(scenario: Scenario) -> Self {
        Self {
            m0: 1.0,
            gamma0: 0.1,
            k0: 1.0,
            alpha: 0.0,
            beta: 0.0,
            eta: 0.0,
            omega_gamma: 0.2,
            lambda: 0.05,
            scenario,
        }
    }

    pub fn mass(&self, t: f64) -> f64 {
        self.m0 + self.alpha * t
    }

    pub fn damping(&self, t: f64) -> f64 {
        self.gamma0 + self.beta * (self.omega_gamma * t).sin()
    }

    pub fn stiffness(&self, t: f64) -> f64 {
        self.k0 * (1.0 - self.eta * (1.0 - (-self.lambda * t).exp()))
    }

    /// Right-hand side of the governing equation solved for acceleration.
    pub fn acceleration(&self, t: f64, x: f64, v: f64) -> f64 {
        -(self.damping(t) * v + self.stiffness(t) * x) / self.mass(t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitialState {
    pub x0: f64,
    pub v0: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn len(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn is_empty(&self) -> bool {
        self.hi < self.lo
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    fn draw(&self, rng: &mut seed::Rng) -> f64 {
        let u: f64 = rng.random();
        self.lo + (self.hi - self.lo) * u
    }

    fn overlaps(&self, other: &Interval) -> bool {
        self.lo <= other.hi && other.lo <= self.hi
    }
}

/// Ranges for initial-state draws.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitRanges {
    pub x0: Interval,
    pub v0: Interval,
}

impl InitRanges {
    pub const FACTUAL: InitRanges = InitRanges {
        x0: Interval::new(-2.0, 2.0),
        v0: Interval::new(-1.5, 1.5),
    };
    pub const COUNTERFACTUAL: InitRanges = InitRanges {
        x0: Interval::new(2.2, 4.0),
        v0: Interval::new(-2.5, -1.0),
    };

    pub fn draw(&self, rng: &mut seed::Rng) -> InitialState {
        InitialState {
            x0: self.x0.draw(rng),
            v0: self.v0.draw(rng),
        }
    }
}

/// Dominant per-split intervals for the varied parameters, indexed train/val/test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRanges {
    pub alpha: [Interval; 3],
    pub beta: [Interval; 3],
    pub eta: [Interval; 3],
    pub p_dom: f64,
}

impl SplitRanges {
    /// Split table for both oscillator scenarios (beta/eta unused in VM).
    pub fn table() -> Self {
        Self {
            alpha: [
                Interval::new(0.0, 0.2),
                Interval::new(0.3, 0.5),
                Interval::new(0.6, 1.0),
            ],
            beta: [
                Interval::new(0.0, 0.01),
                Interval::new(0.018, 0.022),
                Interval::new(0.035, 0.04),
            ],
            eta: [
                Interval::new(0.002, 0.08),
                Interval::new(0.18, 0.22),
                Interval::new(0.42, 0.5),
            ],
            p_dom: 0.8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p_dom > 0.0 && self.p_dom <= 1.0) {
            return invalid(format!("p_dom must lie in (0, 1], got {}", self.p_dom));
        }
        for (name, set) in [("alpha", &self.alpha), ("beta", &self.beta), ("eta", &self.eta)] {
            for i in 0..3 {
                if set[i].is_empty() {
                    return invalid(format!("{name} interval {i} is empty"));
                }
                for j in i + 1..3 {
                    if set[i].overlaps(&set[j]) {
                        return invalid(format!("{name} intervals {i} and {j} overlap"));
                    }
                }
            }
        }
        Ok(())
    }

    /// 80/20 mixture draw: dominant interval with probability `p_dom`, else the
    /// union of the other two splits' intervals weighted by length.
    fn draw_mixture(set: &[Interval; 3], split: Split, p_dom: f64, rng: &mut seed::Rng) -> f64 {
        let u: f64 = rng.random();
        let own = set[split.index()];
        if u < p_dom {
            return own.draw(rng);
        }
        let others: Vec<Interval> = (0..3)
            .filter(|&i| i != split.index())
            .map(|i| set[i])
            .collect();
        let total: f64 = others.iter().map(Interval::len).sum();
        let pick: f64 = rng.random::<f64>() * total;
        let chosen = if pick < others[0].len() { others[0] } else { others[1] };
        chosen.draw(rng)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub position: Vec<f64>,
    pub velocity: Vec<f64>,
    pub acceleration: Vec<f64>,
    pub dt: f64,
    pub params: OscParams,
    pub init: InitialState,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.position.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position.is_empty()
    }

    /// Largest residual of `m a + gamma v + k x` over the grid, divided by `m`.
    pub fn max_residual(&self) -> f64 {
        (0..self.len())
            .map(|i| {
                let t = i as f64 * self.dt;
                let p = &self.params;
                let r = p.mass(t) * self.acceleration[i]
                    + p.damping(t) * self.velocity[i]
                    + p.stiffness(t) * self.position[i];
                (r / p.mass(t)).abs()
            })
            .fold(0.0, f64::max)
    }
}

/// Sequence grid and integrator resolution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeqConfig {
    pub horizon_steps: usize,
    pub dt: f64,
    /// RK4 sub-steps per output grid interval.
    pub substeps: usize,
}

impl Default for SeqConfig {
    fn default() -> Self {
        Self {
            horizon_steps: 64,
            dt: 0.25,
            substeps: 32,
        }
    }
}

/// Classical RK4 on `(x, v)' = (v, a(t, x, v))`, sampled on `t_i = i dt`.
pub fn simulate_trajectory(
    params: &OscParams,
    init: InitialState,
    horizon_steps: usize,
    dt: f64,
) -> Result<Trajectory> {
    simulate_with_substeps(params, init, horizon_steps, dt, SeqConfig::default().substeps)
}

pub fn simulate_with_substeps(
    params: &OscParams,
    init: InitialState,
    horizon_steps: usize,
    dt: f64,
    substeps: usize,
) -> Result<Trajectory> {
    if horizon_steps < 2 {
        return invalid("horizon_steps must be at least 2");
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return invalid(format!("dt must be positive, got {dt}"));
    }
    if !(init.x0.is_finite() && init.v0.is_finite()) {
        return invalid("initial state must be finite");
    }
    if params.scenario == Scenario::VM && (params.beta != 0.0 || params.eta != 0.0) {
        return invalid("VM scenario requires beta = eta = 0");
    }
    let substeps = substeps.max(1);
    let h = dt / substeps as f64;
    // Positivity on every point the integrator evaluates.
    let last = (horizon_steps - 1) * substeps;
    for j in 0..=2 * last {
        let t = j as f64 * h * 0.5;
        if !(params.mass(t) > 0.0) {
            return invalid(format!("mass is non-positive at t = {t}"));
        }
        if !(params.stiffness(t) > 0.0) {
            return invalid(format!("stiffness is non-positive at t = {t}"));
        }
    }

    let mut position = Vec::with_capacity(horizon_steps);
    let mut velocity = Vec::with_capacity(horizon_steps);
    let mut acceleration = Vec::with_capacity(horizon_steps);
    let (mut x, mut v) = (init.x0, init.v0);
    for i in 0..horizon_steps {
        let t_i = i as f64 * dt;
        if !(x.is_finite() && v.is_finite()) {
            return Err(Error::Diverged { step: i, time: t_i });
        }
        position.push(x);
        velocity.push(v);
        acceleration.push(params.acceleration(t_i, x, v));
        if i + 1 == horizon_steps {
            break;
        }
        for s in 0..substeps {
            let t = t_i + s as f64 * h;
            let (k1x, k1v) = (v, params.acceleration(t, x, v));
            let (x2, v2) = (x + 0.5 * h * k1x, v + 0.5 * h * k1v);
            let (k2x, k2v) = (v2, params.acceleration(t + 0.5 * h, x2, v2));
            let (x3, v3) = (x + 0.5 * h * k2x, v + 0.5 * h * k2v);
            let (k3x, k3v) = (v3, params.acceleration(t + 0.5 * h, x3, v3));
            let (x4, v4) = (x + h * k3x, v + h * k3v);
            let (k4x, k4v) = (v4, params.acceleration(t + h, x4, v4));
            x += h / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x);
            v += h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
        }
    }
    Ok(Trajectory {
        position,
        velocity,
        acceleration,
        dt,
        params: *params,
        init,
    })
}

/// Draws environment parameters for one sample of `split`.
pub fn sample_environment(
    split: Split,
    scenario: Scenario,
    ranges: &SplitRanges,
    rng: &mut seed::Rng,
) -> Result<OscParams> {
    ranges.validate()?;
    let mut p = OscParams::constant(scenario);
    p.alpha = SplitRanges::draw_mixture(&ranges.alpha, split, ranges.p_dom, rng);
    if scenario == Scenario::VP {
        p.beta = SplitRanges::draw_mixture(&ranges.beta, split, ranges.p_dom, rng);
        p.eta = SplitRanges::draw_mixture(&ranges.eta, split, ranges.p_dom, rng);
    }
    Ok(p)
}

/// Seeded convenience wrapper around [`sample_environment`].
pub fn sample_environment_seeded(
    split: &str,
    scenario: Scenario,
    ranges: &SplitRanges,
    rng_seed: u64,
) -> Result<OscParams> {
    let split: Split = split.parse()?;
    let mut rng = seed::rng(rng_seed);
    sample_environment(split, scenario, ranges, &mut rng)
}

/// Per-sample ground truth stored alongside the tensors (never a model input).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub params: OscParams,
    pub init: InitialState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cf_init: Option<InitialState>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub scenario: Scenario,
    pub counts: BTreeMap<Split, usize>,
    pub seq: SeqConfig,
    pub ranges: SplitRanges,
    pub init_ranges: InitRanges,
    pub seed: u64,
}

impl DatasetConfig {
    pub fn new(scenario: Scenario, train: usize, val: usize, test: usize, seed: u64) -> Self {
        Self {
            scenario,
            counts: [(Split::Train, train), (Split::Val, val), (Split::Test, test)]
                .into_iter()
                .collect(),
            seq: SeqConfig::default(),
            ranges: SplitRanges::table(),
            init_ranges: InitRanges::FACTUAL,
            seed,
        }
    }

    /// Content hash over everything that determines the dataset.
    pub fn dataset_id(&self) -> String {
        let canon = serde_json::to_vec(self).expect("config serializes");
        let digest = <sha2::Sha256 as sha2::Digest>::digest(&canon);
        format!("{}-{}", self.scenario, &hex::encode(digest)[..16])
    }
}

/// Generated oscillator dataset: a series bundle plus typed ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub config: DatasetConfig,
    pub bundle: SeriesBundle,
    pub records: BTreeMap<Split, Vec<SampleRecord>>,
}

fn trajectory_to_rows(traj: &Trajectory, x: &mut Vec<f32>, c: &mut Vec<f32>) {
    for i in 0..traj.len() {
        x.push(traj.acceleration[i] as f32);
        c.push(traj.velocity[i] as f32);
        c.push(traj.position[i] as f32);
    }
}

/// Simulates factual trajectories for every split.
pub fn build_dataset(config: &DatasetConfig) -> Result<SynthDataset> {
    config.ranges.validate()?;
    let seq = config.seq;
    let t_len = seq.horizon_steps;
    let mut splits = BTreeMap::new();
    let mut records = BTreeMap::new();
    for (&split, &count) in &config.counts {
        if count == 0 {
            return invalid(format!("split {split} has zero samples"));
        }
        let sims: Vec<Result<(SampleRecord, Trajectory)>> = (0..count)
            .into_par_iter()
            .map(|i| {
                let mut rng = seed::rng_for(config.seed, &format!("data/{split}/{i}"));
                let params = sample_environment(split, config.scenario, &config.ranges, &mut rng)?;
                let init = config.init_ranges.draw(&mut rng);
                let traj = simulate_with_substeps(&params, init, t_len, seq.dt, seq.substeps)?;
                Ok((
                    SampleRecord {
                        params,
                        init,
                        cf_init: None,
                    },
                    traj,
                ))
            })
            .collect();
        let mut x = Vec::with_capacity(count * t_len);
        let mut c = Vec::with_capacity(count * t_len * 2);
        let mut recs = Vec::with_capacity(count);
        for sim in sims {
            let (rec, traj) = sim?;
            trajectory_to_rows(&traj, &mut x, &mut c);
            recs.push(rec);
        }
        let params_json = recs
            .iter()
            .map(serde_json::to_value)
            .collect::<std::result::Result<Vec<_>, _>>()?;
        splits.insert(
            split.name().to_string(),
            SplitData {
                x: Series::new(count, t_len, 1, x)?,
                c: Series::new(count, t_len, 2, c)?,
                params: params_json,
                xcf: None,
                ccf: None,
            },
        );
        records.insert(split, recs);
    }
    let train = splits
        .get("train")
        .ok_or_else(|| Error::InvalidInput("dataset needs a train split".into()))?;
    let nx = Normalization::fit(&[&train.x]);
    let nc = Normalization::fit(&[&train.c]);
    let normalization = Normalization {
        min: nx.min.iter().chain(&nc.min).copied().collect(),
        max: nx.max.iter().chain(&nc.max).copied().collect(),
    };
    let meta = BundleMeta {
        schema_version: SCHEMA_VERSION,
        dataset_id: config.dataset_id(),
        scenario: config.scenario.to_string(),
        splits: config
            .counts
            .iter()
            .map(|(s, &n)| (s.name().to_string(), n))
            .collect(),
        t: t_len,
        d: 1,
        d_c: 2,
        dt: seq.dt,
        channel_names: vec!["acceleration".into(), "velocity".into(), "position".into()],
        normalization,
        seed: config.seed,
        context_kinds: vec![],
        counterfactual: false,
        generated: None,
        report: None,
    };
    Ok(SynthDataset {
        config: config.clone(),
        bundle: SeriesBundle { meta, splits },
        records,
    })
}

/// Re-simulates every sample under its own environment parameters with an
/// initial state drawn from `cf_ranges`, storing the counterfactual tensors.
pub fn build_cf_pairs(dataset: &SynthDataset, cf_ranges: &InitRanges, seed_value: u64) -> Result<SynthDataset> {
    let seq = dataset.config.seq;
    let mut out = dataset.clone();
    for (split, recs) in dataset.records.iter() {
        let name = split.name();
        let data = out
            .bundle
            .splits
            .get_mut(name)
            .ok_or_else(|| Error::InvalidInput(format!("missing split {name}")))?;
        if recs.len() != data.len() {
            return invalid(format!("split {name}: parameter metadata missing"));
        }
        let sims: Vec<Result<(InitialState, Trajectory)>> = recs
            .par_iter()
            .enumerate()
            .map(|(i, rec)| {
                let mut rng = seed::rng_for(seed_value, &format!("cf/{name}/{i}"));
                let init = cf_ranges.draw(&mut rng);
                let traj = simulate_with_substeps(&rec.params, init, seq.horizon_steps, seq.dt, seq.substeps)?;
                Ok((init, traj))
            })
            .collect();
        let mut x = Vec::new();
        let mut c = Vec::new();
        let mut new_recs = Vec::with_capacity(recs.len());
        for (rec, sim) in recs.iter().zip(sims) {
            let (init, traj) = sim?;
            trajectory_to_rows(&traj, &mut x, &mut c);
            new_recs.push(SampleRecord {
                cf_init: Some(init),
                ..rec.clone()
            });
        }
        data.xcf = Some(Series::new(recs.len(), seq.horizon_steps, 1, x)?);
        data.ccf = Some(Series::new(recs.len(), seq.horizon_steps, 2, c)?);
        data.params = new_recs
            .iter()
            .map(serde_json::to_value)
            .collect::<std::result::Result<Vec<_>, _>>()?;
        out.records.insert(*split, new_recs);
    }
    out.bundle.meta.counterfactual = true;
    Ok(out)
}

/// Recovers typed records from a bundle's `params` metadata.
pub fn records_from_bundle(bundle: &SeriesBundle, split: &str) -> Result<Vec<SampleRecord>> {
    let data = bundle.split(split)?;
    if data.params.len() != data.len() {
        return invalid(format!("split {split}: parameter metadata missing"));
    }
    data.params
        .iter()
        .map(|v| {
            serde_json::from_value(v.clone())
                .map_err(|e| Error::InvalidInput(format!("split {split}: bad params record: {e}")))
        })
        .collect()
}
