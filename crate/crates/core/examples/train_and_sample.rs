//! Train a small model on the variable-mass oscillator and compare
//! interventional samples with the test split.
//!
//! cargo run --release --example train_and_sample -- [steps]

use catsg::diffusion::{self, ModelConfig, TrainConfig, UNetConfig};
use catsg::eval::{self, EvalConfig, Metric};
use catsg::oscillator::{build_dataset, DatasetConfig, Scenario};
use catsg::pipeline::{generate, Mode};
use catsg::sampling::GuidanceConfig;

fn main() -> catsg::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let data = build_dataset(&DatasetConfig::new(Scenario::VM, 1000, 300, 300, 7))?.bundle;

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
        log_every: 50,
        ..TrainConfig::default()
    };
    let outcome = diffusion::train(&data, &model, &train, 7, None)?;
    println!("trained {} steps in {:.1}s", outcome.checkpoint.step, outcome.seconds);

    let started = std::time::Instant::now();
    let gen = generate(&outcome.checkpoint, &data, "test", Mode::Int, &GuidanceConfig::default(), None)?;
    println!("sampled {} series in {:.1}s", gen.split("test")?.x.n, started.elapsed().as_secs_f64());

    let cfg = EvalConfig {
        metrics: vec![Metric::Mdd, Metric::Kl, Metric::Mmd],
        ..EvalConfig::default()
    };
    for (name, entry) in eval::evaluate(&data, &gen, &cfg, 7)? {
        println!("{name}: {:.4}", entry.value);
    }
    Ok(())
}
