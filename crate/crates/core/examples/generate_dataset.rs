//! Build the variable-mass benchmark with counterfactual pairs and write it
//! as a bundle.
//!
//! cargo run --release --example generate_dataset -- [out_dir]

use catsg::oscillator::{build_cf_pairs, build_dataset, DatasetConfig, InitRanges, Scenario, Split};

fn main() -> catsg::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "vm_bundle".into());
    let factual = build_dataset(&DatasetConfig::new(Scenario::VM, 1000, 300, 300, 7))?;
    let ds = build_cf_pairs(&factual, &InitRanges::COUNTERFACTUAL, 8)?;
    for split in Split::ALL {
        let recs = &ds.records[&split];
        let alphas: Vec<f64> = recs.iter().map(|r| r.params.alpha).collect();
        let lo = alphas.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = alphas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        println!("{:>5}: {} samples, alpha in [{lo:.3}, {hi:.3}]", split.name(), recs.len());
    }
    ds.bundle.write(std::path::Path::new(&out))?;
    println!("dataset {} written to {out}", ds.bundle.meta.dataset_id);
    Ok(())
}
