//! Counterfactual generation: abduct the environment posterior from each
//! factual pair, then regenerate under the counterfactual context and
//! compare with the simulated ground truth.
//!
//! cargo run --release --example counterfactual -- [checkpoint] [train_steps]
//!
//! A checkpoint trained on a different dataset is rejected at sampling time.

use std::path::Path;

use catsg::bundle::Series;
use catsg::diffusion::{self, Checkpoint, ModelConfig, TrainConfig, UNetConfig};
use catsg::eval::{mdd, HistogramSpec};
use catsg::oscillator::{build_cf_pairs, build_dataset, DatasetConfig, InitRanges, Scenario};
use catsg::sampling::{sample_counterfactual, GuidanceConfig};

fn rmse(a: &Series, b: &Series) -> f64 {
    let s: f64 = a.data.iter().zip(&b.data).map(|(p, q)| ((p - q) as f64).powi(2)).sum();
    (s / a.data.len() as f64).sqrt()
}

fn main() -> catsg::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let ckpt_path = args.next();
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(300);

    let mut cfg = DatasetConfig::new(Scenario::VM, 1000, 300, 300, 7);
    cfg.seq.horizon_steps = 32;
    let factual = build_dataset(&cfg)?;
    let data = build_cf_pairs(&factual, &InitRanges::COUNTERFACTUAL, 8)?.bundle;

    let ckpt = match ckpt_path.as_deref().map(Path::new) {
        Some(p) if p.exists() => Checkpoint::load(p)?,
        other => {
            let model = ModelConfig {
                k: 4,
                h: 32,
                unet: UNetConfig {
                    base: 16,
                    mults: vec![1, 2],
                    blocks_per_level: 1,
                    groups: 4,
                },
                ..ModelConfig::default()
            };
            let train = TrainConfig {
                steps,
                batch_size: 64,
                log_every: 100,
                ..TrainConfig::default()
            };
            let ckpt = diffusion::train(&data, &model, &train, 7, None)?.checkpoint;
            if let Some(p) = other {
                ckpt.save(p)?;
            }
            ckpt
        }
    };

    let test = data.split("test")?;
    let (xcf, ccf) = (test.xcf.as_ref().expect("paired data"), test.ccf.as_ref().expect("paired data"));
    let spec = HistogramSpec::default();
    println!("factual vs counterfactual truth: rmse {:.4}", rmse(&test.x, xcf));
    for omega in [0.0, 1.0, 2.0] {
        let cfg = GuidanceConfig {
            omega,
            ..GuidanceConfig::default()
        };
        let out = sample_counterfactual(&ckpt, &test.x, &test.c, ccf, &cfg)?;
        println!(
            "omega {omega}: rmse {:.4}, mdd {:.4}",
            rmse(&out.x, xcf),
            mdd(xcf, &out.x, &spec)?
        );
    }
    Ok(())
}
