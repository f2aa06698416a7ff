//! Calibrates every synthetic preset from a sweep and prints what the
//! profile kept: retained share, twist range, and per-bin hull extents.
//!
//!     cargo run --release --example bias_profile

use reachmap::bias_profile::{filter_reachable, InflectionParams, OmitReason};
use reachmap::task::{Preset, SyntheticUser};
use reachmap::{build_profile, Config};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = Config::default();
    let params = InflectionParams::from(&config);
    for preset in Preset::ALL {
        let user = SyntheticUser::preset(preset, 5, config.input_rate);
        let sweep = user.calibration_sweep(40, 120);
        let filtered = filter_reachable(&sweep, &params, config.omission_f_threshold, config.deadzone);
        let unstable = filtered.omitted.iter().filter(|(_, r)| *r == OmitReason::Unstable).count();
        let profile = build_profile(&sweep, &config)?;

        println!(
            "{preset}: {} samples, {:.1}% retained ({unstable} unstable), z range [{:+.2}, {:+.2}], cm ({:+.3}, {:+.3})",
            sweep.len(),
            100.0 * profile.retained_fraction,
            profile.z_range[0],
            profile.z_range[1],
            profile.xi.cm_x,
            profile.xi.cm_y,
        );
        for (i, bin) in profile.bins.iter().enumerate() {
            let v = bin.hull.vertices();
            let (x0, x1) = v.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.x), b.max(p.x)));
            let (y0, y1) = v.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.y), b.max(p.y)));
            let note = bin.borrowed_from.map(|b| format!(" (borrowed from bin {b})")).unwrap_or_default();
            println!(
                "  bin {i}: {:>4} samples, {:>2} vertices, x [{x0:+.2}, {x1:+.2}] y [{y0:+.2}, {y1:+.2}]{note}",
                bin.sample_count,
                v.len()
            );
        }
    }
    Ok(())
}
