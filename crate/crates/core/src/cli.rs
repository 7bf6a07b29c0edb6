//! The `catsg` command line.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::DType;
use clap::{Args, Parser, Subcommand};

use crate::bundle::SeriesBundle;
use crate::config::{self, RunConfig};
use crate::data;
use crate::diffusion::{self, Ablation, Checkpoint};
use crate::error::{Error, Result};
use crate::eval::{self, Metric};
use crate::ingest::{self, DatasetSpec};
use crate::pipeline::{self, Mode, Stage};
use crate::sampling::{ContextAction, Sampler};

#[derive(Debug, Parser)]
#[command(name = "catsg", version, about = "Causal time series generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON run config; `--section.key value` flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate the oscillator benchmark (with counterfactual pairs).
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ingest CSV files into a series bundle.
    Ingest {
        /// Built-in spec name (air_quality, traffic) or a JSON spec file.
        #[arg(long)]
        spec: String,
        #[arg(long, num_args = 1.., required = true)]
        csv: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a bundle's train split.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ablation: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate series from a checkpoint.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "int")]
        mode: String,
        #[arg(long)]
        omega: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        sampler: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Context edits as JSON (or a path to a JSON file).
        #[arg(long)]
        action: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare generated series against real ones.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        gen: PathBuf,
        #[arg(long)]
        metrics: Option<String>,
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-split LOWESS curves and binned means of target vs one context.
    Diagnose {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        context: String,
        #[arg(long, default_value_t = 0.3)]
        frac: f64,
        #[arg(long, default_value_t = 50)]
        grid: usize,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        /// Curves CSV; the binned table goes next to it as `<stem>_bins.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Export latent representations and environment posteriors as CSV.
    EmbedExport {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Step-count sweep on one checkpoint and/or ablation sweep on CF pairs.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "both", value_parser = ["steps", "ablation", "both"])]
        kind: String,
        /// Bundle to use; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint for the step sweep; trained when absent.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full pipeline into one directory, resuming completed stages.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated subset of data,train,sample,eval,diagnose.
        #[arg(long)]
        stages: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Separates `--section.key value` overrides (any long flag containing a
/// dot) from the arguments clap understands.
pub fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut plain = Vec::new();
    let mut dotted = Vec::new();
    let mut it = args.into_iter().peekable();
    while let Some(a) = it.next() {
        let is_override = a
            .strip_prefix("--")
            .map(|k| k.split('=').next().unwrap_or("").contains('.'))
            .unwrap_or(false);
        if !is_override {
            plain.push(a);
            continue;
        }
        dotted.push(a.clone());
        if !a.contains('=') {
            match it.next() {
                Some(v) => dotted.push(v),
                None => return Err(Error::Config(format!("override '{a}' is missing a value"))),
            }
        }
    }
    Ok((plain, config::parse_override_args(&dotted)?))
}

fn load_config(args: &ConfigArgs, overrides: &[(String, String)]) -> Result<RunConfig> {
    config::parse_config(args.config.as_deref(), overrides)
}

fn with_extra(mut overrides: Vec<(String, String)>, extra: &[(&str, Option<String>)]) -> Vec<(String, String)> {
    // Explicit flags take precedence over dotted overrides.
    for (k, v) in extra {
        if let Some(v) = v {
            overrides.push((k.to_string(), v.clone()));
        }
    }
    overrides
}

fn read_action(s: &str) -> Result<ContextAction> {
    let path = Path::new(s);
    if !s.trim_start().starts_with('{') && path.exists() {
        return ContextAction::parse(&fs::read_to_string(path)?);
    }
    ContextAction::parse(s)
}

fn bins_path(curves: &Path) -> PathBuf {
    let stem = curves.file_stem().and_then(|s| s.to_str()).unwrap_or("curves");
    curves.with_file_name(format!("{stem}_bins.csv"))
}

/// Writes per-sample latent `h` and posterior `w` rows for every split.
pub fn embed_export(ckpt: &Checkpoint, data: &SeriesBundle, out: &Path) -> Result<()> {
    let model = &ckpt.model;
    if !model.uses_env() {
        return Err(Error::Config("checkpoint was trained without an environment bank".into()));
    }
    let mut w = csv::Writer::from_path(out)?;
    let h_dim = model.config.h;
    let k = model.num_branches();
    let mut header = vec!["sample_id".to_string(), "split".into()];
    header.extend((0..h_dim).map(|i| format!("h_{i}")));
    header.extend((0..k).map(|i| format!("w_{i}")));
    w.write_record(&header)?;
    for (name, s) in &data.splits {
        let chunk = 256;
        for start in (0..s.x.n).step_by(chunk) {
            let idx: Vec<usize> = (start..(start + chunk).min(s.x.n)).collect();
            let x = data::series_tensor(&ckpt.normalizer.x_to_model(&s.x.select(&idx)), DType::F32)?;
            let c = data::series_tensor(&ckpt.normalizer.c_to_model(&s.c.select(&idx)), DType::F32)?;
            let ctx = model.encode_context(&c)?;
            let post = model.posterior(&x, &ctx)?;
            let h = post.h.to_dtype(DType::F64)?.to_vec2::<f64>()?;
            let wv = post.w.to_dtype(DType::F64)?.to_vec2::<f64>()?;
            for (j, i) in idx.iter().enumerate() {
                let mut rec = vec![i.to_string(), name.clone()];
                rec.extend(h[j].iter().map(|v| v.to_string()));
                rec.extend(wv[j].iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn run(cli: Cli, overrides: Vec<(String, String)>) -> Result<()> {
    match cli.command {
        Command::GenData { cfg, scenario, seed, out } => {
            let overrides = with_extra(
                overrides,
                &[("dataset.scenario", scenario), ("seed", seed.map(|s| s.to_string()))],
            );
            let rc = load_config(&cfg, &overrides)?;
            let bundle = pipeline::build_data(&rc)?;
            bundle.write(&out)?;
            rc.write(&out.join(pipeline::CONFIG_FILE))?;
            println!("{} {}", bundle.meta.dataset_id, out.display());
        }
        Command::Ingest { spec, csv, out } => {
            let spec = match DatasetSpec::builtin(&spec) {
                Some(s) => s,
                None => DatasetSpec::load(Path::new(&spec))?,
            };
            let paths: Vec<&Path> = csv.iter().map(PathBuf::as_path).collect();
            let bundle = ingest::ingest(&spec, &paths)?;
            bundle.write(&out)?;
            println!("{} {}", bundle.meta.dataset_id, out.display());
        }
        Command::Train {
            cfg,
            data,
            ablation,
            seed,
            out,
        } => {
            if let Some(a) = &ablation {
                Ablation::parse(a)?;
            }
            let overrides = with_extra(overrides, &[("ablation", ablation), ("seed", seed.map(|s| s.to_string()))]);
            let rc = load_config(&cfg, &overrides)?;
            let bundle = SeriesBundle::read(&data)?;
            if let Some(parent) = out.parent() {
                fs::create_dir_all(parent)?;
            }
            let outcome = diffusion::train(&bundle, &rc.model, &rc.train_config(), rc.seed, Some(&out))?;
            rc.write(&out.with_extension("config.json"))?;
            log::info!("trained {} steps in {:.1}s", outcome.checkpoint.step, outcome.seconds);
        }
        Command::Sample {
            ckpt,
            data,
            mode,
            omega,
            steps,
            sampler,
            seed,
            split,
            action,
            out,
        } => {
            let mode = Mode::parse(&mode)?;
            let checkpoint = Checkpoint::load(&ckpt)?;
            let bundle = SeriesBundle::read(&data)?;
            let mut g = crate::sampling::GuidanceConfig::default();
            if let Some(o) = omega {
                g.omega = o;
            }
            if let Some(s) = steps {
                g.steps = s;
            }
            if let Some(s) = sampler {
                g.sampler = Sampler::parse(&s)?;
            }
            if let Some(s) = seed {
                g.seed = s;
            }
            let actions = match action {
                Some(a) => Some(read_action(&a)?.apply(&bundle.split(&split)?.c, &bundle.meta)?),
                None => None,
            };
            let gen = pipeline::generate(&checkpoint, &bundle, &split, mode, &g, actions.as_ref())?;
            gen.write(&out)?;
        }
        Command::Eval {
            cfg,
            real,
            gen,
            metrics,
            split,
            seed,
            out,
        } => {
            let metrics = metrics
                .map(|m| Metric::parse_list(&m))
                .transpose()?
                .map(|m| serde_json::to_string(&m).expect("metrics serialize"));
            let overrides = with_extra(
                overrides,
                &[
                    ("eval.metrics", metrics),
                    ("eval.split", split),
                    ("seed", seed.map(|s| s.to_string())),
                ],
            );
            let rc = load_config(&cfg, &overrides)?;
            let report = eval::evaluate(&SeriesBundle::read(&real)?, &SeriesBundle::read(&gen)?, &rc.eval, rc.seed)?;
            pipeline::write_json(&out, &report)?;
        }
        Command::Diagnose {
            data,
            context,
            frac,
            grid,
            bins,
            out,
        } => {
            let bundle = SeriesBundle::read(&data)?;
            pipeline::diagnose(&bundle, &context, frac, grid, bins, &out, &bins_path(&out))?;
        }
        Command::EmbedExport { ckpt, data, out } => {
            embed_export(&Checkpoint::load(&ckpt)?, &SeriesBundle::read(&data)?, &out)?;
        }
        Command::Sweep {
            cfg,
            kind,
            data,
            ckpt,
            out,
        } => {
            let rc = load_config(&cfg, &overrides)?;
            fs::create_dir_all(&out)?;
            rc.write(&out.join(pipeline::CONFIG_FILE))?;
            let bundle = match &data {
                Some(d) => SeriesBundle::read(d)?,
                None => pipeline::build_data(&rc)?,
            };
            if kind == "steps" || kind == "both" {
                let checkpoint = match &ckpt {
                    Some(p) => Checkpoint::load(p)?,
                    None => diffusion::train(&bundle, &rc.model, &rc.train_config(), rc.seed, Some(&out.join("model.ckpt")))?.checkpoint,
                };
                for row in pipeline::step_sweep(&checkpoint, &bundle, &rc, &rc.sweep.steps, &out)? {
                    println!("{} {:?}", row.setting, row.metrics);
                }
            }
            if kind == "ablation" || kind == "both" {
                for row in pipeline::ablation_sweep(&bundle, &rc, &rc.sweep.ablations, &out.join("ablation"))? {
                    println!("{} {:?}", row.setting, row.metrics);
                }
            }
        }
        Command::Run { cfg, stages, out } => {
            let rc = load_config(&cfg, &overrides)?;
            let stages = match stages {
                None => Stage::ALL.to_vec(),
                Some(s) => s
                    .split(',')
                    .map(|p| {
                        Stage::ALL
                            .into_iter()
                            .find(|st| st.name() == p.trim())
                            .ok_or_else(|| Error::Config(format!("unknown stage '{p}'")))
                    })
                    .collect::<Result<Vec<_>>>()?,
            };
            let manifest = pipeline::run_pipeline(&rc, &out, &stages)?;
            for (k, v) in &manifest.outputs {
                println!("{k} {}", v.display());
            }
        }
    }
    Ok(())
}

/// Entry point shared by the binary: returns the process exit code.
pub fn main_with_args(args: Vec<String>) -> i32 {
    let (plain, overrides) = match split_overrides(args) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let cli = match Cli::try_parse_from(plain) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli, overrides) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
