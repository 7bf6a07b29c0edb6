//! Distribution distances on shifted Gaussians, the Fréchet closed forms and
//! Stouffer aggregation of per-task Welch tests.
//!
//! cargo run --release --example metrics

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Normal};

use catsg::bundle::Series;
use catsg::eval::stats::{stouffer_combine, TaskSummary};
use catsg::eval::{frechet, kl, mdd, mmd, Bandwidth, GaussianSummary, HistogramSpec};
use catsg::seed;

fn gaussian(n: usize, mean: f64, seed_value: u64) -> Series {
    let mut rng = seed::rng(seed_value);
    let d = Normal::new(mean, 1.0).unwrap();
    Series::new(n, 16, 1, (0..n * 16).map(|_| d.sample(&mut rng) as f32).collect()).unwrap()
}

fn main() -> catsg::Result<()> {
    let real = gaussian(500, 0.0, 1);
    let spec = HistogramSpec::default();
    println!("shift   mdd     kl      mmd");
    for shift in [0.0, 0.25, 0.5, 1.0, 2.0] {
        let gen = gaussian(500, shift, 2);
        println!(
            "{shift:<6.2}  {:.4}  {:.4}  {:.4}",
            mdd(&real, &gen, &spec)?,
            kl(&real, &gen, &spec)?,
            mmd(&real, &gen, Bandwidth::Median)?
        );
    }

    let g = |mu: [f64; 2], s: f64| GaussianSummary {
        mu: DVector::from_row_slice(&mu),
        sigma: DMatrix::identity(2, 2) * s,
    };
    println!("frechet, shifted mean: {:.6}", frechet(&g([0.0, 0.0], 1.0), &g([1.0, 0.0], 1.0))?);
    println!("frechet, scaled covariance: {:.6}", frechet(&g([0.0, 0.0], 4.0), &g([0.0, 0.0], 1.0))?);

    let tasks = [
        TaskSummary { mean_a: 0.12, std_a: 0.01, mean_b: 0.15, std_b: 0.02, n: 5 },
        TaskSummary { mean_a: 0.30, std_a: 0.03, mean_b: 0.33, std_b: 0.02, n: 5 },
        TaskSummary { mean_a: 0.08, std_a: 0.01, mean_b: 0.08, std_b: 0.01, n: 5 },
    ];
    let s = stouffer_combine(&tasks)?;
    println!("stouffer: Z = {:.3}, p = {:.4}", s.z_comb, s.p_overall);
    Ok(())
}
