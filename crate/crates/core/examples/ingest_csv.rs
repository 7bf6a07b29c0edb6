//! Ingest a traffic-style CSV into a bundle: temperature-based splits,
//! 24-hour windows, categorical vocabularies and phase channels.
//!
//! cargo run --release --example ingest_csv -- [file.csv]
//!
//! Without an argument a small synthetic file in the traffic layout is used.

use std::fmt::Write as _;
use std::path::PathBuf;

use catsg::ingest::{ingest, DatasetSpec};

fn synthetic_csv() -> std::io::Result<PathBuf> {
    let mut body = String::from("holiday,temp,rain_1h,snow_1h,clouds_all,weather_main,weather_description,date_time,traffic_volume\n");
    let weather = ["Clear", "Clouds", "Rain", "Mist"];
    for day in 0..90 {
        // Kelvin; cold, mild and warm stretches feed the three splits.
        let temp = 273.15 + [5.0, 17.0, 27.0][day / 30];
        for hour in 0..24 {
            let volume = 3000.0 + 2000.0 * (std::f64::consts::PI * hour as f64 / 12.0).sin() + 10.0 * day as f64;
            let _ = writeln!(
                body,
                "None,{temp:.2},0,0,{},{},x,2016-{:02}-{:02} {hour:02}:00:00,{volume:.0}",
                (day * 7 + hour) % 100,
                weather[(day + hour / 6) % 4],
                1 + day / 28,
                1 + day % 28
            );
        }
    }
    let path = std::env::temp_dir().join("catsg_traffic_example.csv");
    std::fs::write(&path, body)?;
    Ok(path)
}

fn main() -> catsg::Result<()> {
    let path = match std::env::args().nth(1) {
        Some(p) => PathBuf::from(p),
        None => synthetic_csv()?,
    };
    let bundle = ingest(&DatasetSpec::traffic(), &[path.as_path()])?;
    for (name, split) in &bundle.splits {
        println!("{name:>5}: {} windows of {} hours", split.x.n, split.x.t);
    }
    println!("context channels: {}", bundle.meta.context_names().join(", "));
    if let Some(report) = &bundle.meta.report {
        println!("{}", serde_json::to_string_pretty(report)?);
    }
    Ok(())
}
