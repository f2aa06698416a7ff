//! Feeds a tremulous user through both mapped conditions, shows the
//! smoothing weight it earns, bridges a simulated drop-out, and times the
//! per-sample step.
//!
//!     cargo run --release --example realtime_pipeline

use std::sync::Arc;
use std::time::Instant;

use reachmap::task::{Preset, SyntheticUser};
use reachmap::{build_profile, compile_stack, Condition, Config, ControlSample, DeploymentState};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = Config::default();
    let user = SyntheticUser::preset(Preset::Tremor, 4, config.input_rate);
    let sweep = user.calibration_sweep(40, 120);
    let (stack, _) = compile_stack(&build_profile(&sweep, &config)?, &config)?;
    let stack = Arc::new(stack);

    // Holding still near neutral with the preset's 8 Hz tremor on top.
    let spec = user.spec().clone();
    let dt = config.frame_dt();
    let circle: Vec<ControlSample> = (1..=600)
        .map(|i| {
            let t = i as f64 * dt;
            let a = 0.5 * std::f64::consts::TAU * t / 10.0;
            let u = spec.bias([0.04 * a.cos(), 0.04 * a.sin(), 0.0], t);
            ControlSample::new(t, u[0], u[1], u[2])
        })
        .collect();

    for condition in [Condition::Adr, Condition::AdrSmoothed] {
        let mut d = DeploymentState::new(condition, &config, Some(stack.clone()))?;
        let mut jitter = 0.0;
        let mut last: Option<[f64; 3]> = None;
        let mut alpha = 0.0;
        for s in &circle {
            let out = d.step(s);
            if let Some(p) = last {
                jitter += (out.x - p[0]).abs() + (out.y - p[1]).abs();
            }
            last = Some(out.vector());
            alpha += out.alpha;
        }
        println!(
            "{condition:>6}: mean alpha {:.3}, mean |du| per sample {:.4}, final f {:.1} Hz",
            alpha / circle.len() as f64,
            jitter / circle.len() as f64,
            d.frequency()
        );
    }

    // Drop ten frames out of a steady push and show the substituted outputs.
    let mut d = DeploymentState::new(Condition::AdrSmoothed, &config, Some(stack.clone()))?;
    for i in 1..=40 {
        d.ingest(&ControlSample::new(i as f64 * dt, 0.3, 0.1, 0.0));
    }
    let outs = d.ingest(&ControlSample::new(51.0 * dt, 0.3, 0.1, 0.0));
    let synth = outs.iter().filter(|o| o.synthesized).count();
    println!("drop-out of 10 frames: {synth} synthesized outputs, then the live one");
    for o in outs.iter().step_by(3) {
        println!("  t {:.3}  ({:+.3}, {:+.3})  synthesized {}", o.t, o.x, o.y, o.synthesized);
    }

    let mut d = DeploymentState::new(Condition::AdrSmoothed, &config, Some(stack))?;
    let mut times: Vec<f64> = sweep
        .iter()
        .map(|s| {
            let t0 = Instant::now();
            std::hint::black_box(d.step(s));
            t0.elapsed().as_secs_f64() * 1e6
        })
        .collect();
    times.sort_by(f64::total_cmp);
    println!(
        "step latency over {} samples: median {:.2} us, p99.9 {:.2} us, max {:.2} us",
        times.len(),
        times[times.len() / 2],
        times[(times.len() as f64 * 0.999) as usize],
        times[times.len() - 1]
    );
    Ok(())
}
