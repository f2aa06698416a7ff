//! One reaching trial per condition for a contracted user aiming at a large
//! far-corner target.
//!
//!     cargo run --release --example center_out_trial

use std::sync::Arc;

use reachmap::task::{run_trial, Preset, SyntheticUser, Target};
use reachmap::{build_profile, compile_stack, Condition, Config};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = Config::default();
    let calib = SyntheticUser::preset(Preset::Contraction, 9, config.input_rate);
    let (stack, _) = compile_stack(&build_profile(&calib.calibration_sweep(40, 120), &config)?, &config)?;
    let stack = Arc::new(stack);
    let target = Target { id: 124, order: 0, x: 0.8, y: 0.8, z: 0.8 };

    for condition in Condition::ALL {
        let mut user = SyntheticUser::preset(Preset::Contraction, 9, config.input_rate);
        let s = condition.needs_stack().then(|| stack.clone());
        let rec = run_trial(&mut user, target, condition, s, &config)?;
        let end = rec.trajectory.last().map(|p| p.dot).unwrap_or_default();
        println!(
            "{condition:>6}: {:?} in {:.2} s, first reach {}, path {:.3} (straight {:.3}), final dot ({:+.2}, {:+.2}, size {:+.2})",
            rec.outcome,
            rec.duration,
            rec.time_to_first_reach.map_or("never".into(), |t| format!("{t:.2} s")),
            rec.path_length,
            rec.straight_line_distance(),
            end.x,
            end.y,
            end.size
        );
    }
    Ok(())
}
