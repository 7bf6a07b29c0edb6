//! Balanced environment assignment: Sinkhorn on random prototype scores,
//! then the posterior of an untrained inference network over a batch.
//!
//! cargo run --release --example environment_inference

use candle_core::DType;
use rand_distr::{Distribution, StandardNormal};

use catsg::data;
use catsg::diffusion::{CatsgModel, DataShape, ModelConfig};
use catsg::envinfer::{marginals, sinkhorn, SinkhornConfig};
use catsg::oscillator::{build_dataset, DatasetConfig, Scenario};
use catsg::seed;

fn main() -> catsg::Result<()> {
    let (n, k) = (12, 3);
    let mut rng = seed::rng(1);
    // Scores skewed towards the first prototype.
    let s: Vec<f64> = (0..n * k)
        .map(|i| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z + if i % k == 0 { 2.0 } else { 0.0 }
        })
        .collect();
    for iters in [1, 2, 5, 50] {
        let q = sinkhorn(&s, n, k, 0.1, &SinkhornConfig { reg: 0.05, iters })?;
        let (_, cols) = marginals(&q, n, k);
        println!("{iters:>2} iterations: column sums {cols:.3?} (target {:.1})", n as f64 / k as f64);
    }

    let mut cfg = DatasetConfig::new(Scenario::VM, 64, 8, 8, 3);
    cfg.seq.horizon_steps = 32;
    let bundle = build_dataset(&cfg)?.bundle;
    let shape = DataShape {
        t: 32,
        d_x: bundle.meta.d,
        context_kinds: bundle.meta.context_kinds_full(),
    };
    let model = CatsgModel::new(&ModelConfig { k: 4, h: 16, ..ModelConfig::default() }, &shape, DType::F32, 5)?;
    let train = bundle.split("train")?;
    let x = data::series_tensor(&train.x, DType::F32)?;
    let c = data::series_tensor(&train.c, DType::F32)?;
    let post = model.posterior(&x, &model.encode_context(&c)?)?;
    let w = post.w.to_vec2::<f32>()?;
    for (i, row) in w.iter().take(5).enumerate() {
        println!("sample {i}: w = {row:.3?}");
    }
    Ok(())
}
