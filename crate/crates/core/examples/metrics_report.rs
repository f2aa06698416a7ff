//! Runs a session and writes the JSON, CSV and SVG reports to a directory.
//!
//!     cargo run --release --example metrics_report -- /tmp/report offset

use std::path::PathBuf;

use reachmap::metrics::MetricsReport;
use reachmap::task::{run_protocol, Preset, SyntheticUser};
use reachmap::Config;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("reachmap-report"));
    let preset: Preset = args.next().as_deref().unwrap_or("twist-asymmetric").parse()?;

    let config = Config::default();
    let mut user = SyntheticUser::preset(preset, 21, config.input_rate);
    let session = run_protocol(&mut user, &config, 21, &mut ())?;
    let report = MetricsReport::from_phases(&session.phases, config.m_z)?;

    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("metrics.json"), report.to_json())?;
    std::fs::write(out.join("metrics.csv"), report.to_csv())?;
    std::fs::write(out.join("metrics.svg"), report.to_svg())?;

    for p in &report.pairs {
        println!(
            "{:>6}: gained {} kept {} lost {} never {}; mean path delta on kept targets {}",
            p.condition.to_string(),
            p.tally.gained,
            p.tally.kept,
            p.tally.lost,
            p.tally.never,
            p.mean_path_delta.map_or("n/a".into(), |d| format!("{d:+.3}"))
        );
    }
    println!("reports in {}", out.display());
    Ok(())
}
