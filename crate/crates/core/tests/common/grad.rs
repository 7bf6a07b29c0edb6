//! Finite-difference gradient checks of every learnable block on tiny
//! random shapes in f64.

#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use rand_distr::{Distribution, StandardNormal};

use catsg::bundle::ChannelKind;
use catsg::diffusion::{UNet, UNetConfig};
use catsg::envinfer::{EnvInfer, EnvInferConfig, FeatureExtractor, Tcn, TcnConfig};
use catsg::eval::{EmbedderConfig, EmbedderPair};
use catsg::gradcheck::{check_params, GradCheckReport};
use catsg::nn::ParamStore;
use catsg::seed;
use catsg::Result;

pub const STEP: f64 = 1e-5;
pub const COORDS: usize = 6;

pub fn randn(shape: &[usize], seed_value: u64) -> Tensor {
    let mut rng = seed::rng(seed_value);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn probe_loss(out: &Tensor, probe: &Tensor) -> Result<Tensor> {
    Ok(out.mul(probe)?.sum_all()?)
}

pub fn tcn(seed_value: u64) -> Result<GradCheckReport> {
    let mut store = ParamStore::new(DType::F64);
    let mut rng = seed::rng(seed_value);
    let tcn = Tcn::new(&mut store.builder(&mut rng).pp("tcn"), 3, 5, &TcnConfig::default())?;
    let x = randn(&[2, 9, 3], seed_value + 1);
    let probe = randn(&[2, 9, 5], seed_value + 2);
    check_params(&store, &[], COORDS, STEP, seed_value, || probe_loss(&tcn.forward(&x)?, &probe))
}

pub fn attention_pool(seed_value: u64) -> Result<GradCheckReport> {
    let mut store = ParamStore::new(DType::F64);
    let mut rng = seed::rng(seed_value);
    let fx = FeatureExtractor::new(&mut store.builder(&mut rng).pp("features"), 4, 2)?;
    let h = randn(&[3, 8, 4], seed_value + 1);
    let probe = randn(&[3, 4], seed_value + 2);
    check_params(&store, &[], COORDS, STEP, seed_value, || {
        probe_loss(&fx.forward(&h)?.attention, &probe)
    })
}

pub fn projection(seed_value: u64) -> Result<GradCheckReport> {
    let mut store = ParamStore::new(DType::F64);
    let mut rng = seed::rng(seed_value);
    let cfg = EnvInferConfig {
        width: 6,
        top_k: 2,
        ..EnvInferConfig::default()
    };
    let ei = EnvInfer::new(&mut store.builder(&mut rng).pp("envinfer"), 1, 2, &cfg)?;
    let x = randn(&[3, 8, 1], seed_value + 1);
    let c = randn(&[3, 8, 2], seed_value + 2);
    let probe = randn(&[3, 6], seed_value + 3);
    check_params(&store, &[], COORDS, STEP, seed_value, || probe_loss(&ei.latent(&x, &c)?, &probe))
}

pub fn unet(seed_value: u64) -> Result<GradCheckReport> {
    let mut store = ParamStore::new(DType::F64);
    let mut rng = seed::rng(seed_value);
    let cfg = UNetConfig {
        base: 4,
        mults: vec![1, 2],
        blocks_per_level: 1,
        groups: 2,
    };
    let net = UNet::new(&mut store.builder(&mut rng).pp("denoiser"), 3, 1, &cfg)?;
    let x = randn(&[2, 8, 3], seed_value + 1);
    let probe = randn(&[2, 8, 1], seed_value + 2);
    let ts = [3.0, 250.0];
    check_params(&store, &[], COORDS, STEP, seed_value, || probe_loss(&net.forward(&x, &ts)?, &probe))
}

pub fn embedders(seed_value: u64) -> Result<GradCheckReport> {
    let kinds = vec![
        ChannelKind::Continuous,
        ChannelKind::Categorical {
            vocab: vec!["a".into(), "b".into()],
        },
    ];
    let cfg = EmbedderConfig {
        dim: 3,
        width: 4,
        ..EmbedderConfig::default()
    };
    let pair = EmbedderPair::new(1, &kinds, &cfg, DType::F64, seed_value)?;
    let x = randn(&[4, 8, 1], seed_value + 1);
    // Context after one-hot expansion: one continuous + three indicator channels.
    let mut cv = randn(&[4, 8, 4], seed_value + 2).to_vec3::<f64>()?;
    for (i, sample) in cv.iter_mut().enumerate() {
        for row in sample.iter_mut() {
            row[1..].fill(0.0);
            row[1 + i % 3] = 1.0;
        }
    }
    let c = Tensor::new(cv, &Device::Cpu)?;
    check_params(&pair.store, &[], COORDS, STEP, seed_value, || pair.contrastive_loss(&x, &c))
}

/// All blocks, named.
pub fn all(seed_value: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    Ok(vec![
        ("tcn", tcn(seed_value)?),
        ("attention_pool", attention_pool(seed_value)?),
        ("projection_mlp", projection(seed_value)?),
        ("unet", unet(seed_value)?),
        ("embedders", embedders(seed_value)?),
    ])
}
