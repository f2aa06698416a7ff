//! Compiles the stack for a contracted user, writes it to disk, reads it
//! back and shows where a few raw inputs land.
//!
//!     cargo run --release --example compile_map

use reachmap::task::{Preset, SyntheticUser};
use reachmap::{build_profile, compile_stack, Config, ControlSample, RemapStack};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = Config::default();
    let user = SyntheticUser::preset(Preset::Contraction, 2, config.input_rate);
    let profile = build_profile(&user.calibration_sweep(40, 120), &config)?;
    let (stack, report) = compile_stack(&profile, &config)?;
    println!(
        "{}x{}x{} stack compiled in {:.1} ms",
        stack.m_x,
        stack.m_y,
        stack.m_z(),
        report.elapsed_ms
    );
    for (i, b) in report.bins.iter().enumerate() {
        println!(
            "  bin {i}: rho {:.3}..{:.3}, {} cells inside the hull",
            b.rho_min, b.rho_max, b.inside_cells
        );
    }

    let dir = std::env::temp_dir().join("reachmap-compile-map");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("stack.bin");
    stack.save(&path, &config, &report)?;
    let loaded = RemapStack::load(&path)?;
    println!(
        "wrote {} ({} bytes) and sidecar; profile hash {}",
        path.display(),
        std::fs::metadata(&path)?.len(),
        &loaded.profile_hash_hex()[..16]
    );

    for (x, y, z) in [(0.0, 0.0, 0.0), (0.25, 0.0, 0.0), (0.45, 0.45, 0.0), (-0.3, 0.2, 0.4), (0.0, 0.0, -0.45)] {
        let out = loaded.lookup(&ControlSample::new(0.0, x, y, z));
        println!("  ({x:+.2}, {y:+.2}, {z:+.2}) -> ({:+.3}, {:+.3}, {:+.3})", out[0], out[1], out[2]);
    }
    Ok(())
}
