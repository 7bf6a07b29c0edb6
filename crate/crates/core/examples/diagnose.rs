//! Spurious-correlation diagnostics: LOWESS curves and binned conditional
//! means of acceleration against velocity, split by split.
//!
//! cargo run --release --example diagnose -- [out_dir]

use std::path::Path;

use catsg::oscillator::{build_dataset, DatasetConfig, Scenario};
use catsg::pipeline::diagnose;

fn main() -> catsg::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "diagnostics".into());
    let data = build_dataset(&DatasetConfig::new(Scenario::VM, 400, 100, 100, 3))?.bundle;
    let (curves, bins) = (Path::new(&out).join("curves.csv"), Path::new(&out).join("bins.csv"));
    diagnose(&data, "velocity", 0.3, 25, 8, &curves, &bins)?;
    let mut reader = csv::Reader::from_path(&bins)?;
    println!("{:?}", reader.headers()?);
    for row in reader.records().take(12) {
        println!("{:?}", row?);
    }
    println!("curves in {}, bins in {}", curves.display(), bins.display());
    Ok(())
}
