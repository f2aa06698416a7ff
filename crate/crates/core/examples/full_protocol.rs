//! Runs the whole protocol headless for one synthetic preset and prints the
//! completion taxonomy of each mapped round against the unmapped round.
//!
//!     cargo run --release --example full_protocol -- contraction 7

use reachmap::metrics::MetricsReport;
use reachmap::task::{run_protocol, Preset, SyntheticUser};
use reachmap::Config;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let preset: Preset = args.next().as_deref().unwrap_or("contraction").parse()?;
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(7);

    let config = Config::default();
    let mut user = SyntheticUser::preset(preset, seed, config.input_rate);
    let session = run_protocol(&mut user, &config, seed, &mut ())?;
    let report = MetricsReport::from_phases(&session.phases, config.m_z)?;

    println!("preset {preset}, seed {seed}, phases {:?}", session.plan.phases);
    for c in &report.conditions {
        let t = c.time_to_first_reach;
        println!(
            "{:>9}: {:>3}/{:<3} completed, time to first reach {:.2} ± {:.2} s (n = {})",
            c.phase.to_string(),
            c.completed,
            c.trials,
            t.mean.unwrap_or(f64::NAN),
            t.sd.unwrap_or(f64::NAN),
            t.n
        );
    }
    for p in &report.pairs {
        let t = p.tally;
        println!(
            "{:>9} vs no-adr: gained {} kept {} lost {} never {}, mean path delta {:+.3}",
            p.condition.to_string(),
            t.gained,
            t.kept,
            t.lost,
            t.never,
            p.mean_path_delta.unwrap_or(f64::NAN)
        );
        for b in &p.bins {
            println!(
                "           bin {}: +{} ={} -{} ·{}",
                b.z_bin, b.tally.gained, b.tally.kept, b.tally.lost, b.tally.never
            );
        }
    }
    if let Some(profile) = &session.profile {
        println!(
            "profile: {} samples, retained {:.1}%, z range [{:.3}, {:.3}]",
            profile.sample_count,
            100.0 * profile.retained_fraction,
            profile.z_range[0],
            profile.z_range[1]
        );
    }
    Ok(())
}
