//! Records a session, reloads it, checks that replay reproduces the
//! deployed stream, then asks what smoothing would have done to every
//! recorded round.
//!
//!     cargo run --release --example replay_archive

use reachmap::session_store::{replay, SessionArchive, SessionRecorder};
use reachmap::task::{run_protocol, Preset, SyntheticUser};
use reachmap::{Condition, Config};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = Config::default();
    let dir = std::env::temp_dir().join("reachmap-replay-example");
    let seed = 13;
    let mut user = SyntheticUser::preset(Preset::Combined, seed, config.input_rate);
    let mut rec = SessionRecorder::create(&dir, seed, &config, "synthetic:combined")?;
    run_protocol(&mut user, &config, seed, &mut rec)?;
    let manifest = rec.finish()?;
    println!("archived {} phases to {}", manifest.phases.len(), dir.display());

    let archive = SessionArchive::load(&dir)?;
    let same = replay(&archive, None)?;
    let recorded = std::fs::read(dir.join("deployed.ndjson"))?;
    println!(
        "replay under recorded conditions: deployed stream {} ({} outputs)",
        if same.deployed_ndjson() == recorded { "identical" } else { "differs" },
        same.deployed.len()
    );

    let smoothed = replay(&archive, Some(Condition::AdrSmoothed))?;
    for (a, b) in same.phases.iter().zip(&smoothed.phases) {
        let done = |p: &reachmap::task::PhaseRecord| p.trials.iter().filter(|t| t.completed()).count();
        println!(
            "{:>9}: {:>3} completed as recorded, {:>3} if replayed under adr-s",
            a.phase.to_string(),
            done(a),
            done(b)
        );
    }
    Ok(())
}
