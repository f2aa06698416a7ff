use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use reachmap::bias_profile::build_profile;
use reachmap::map_compiler::{compile_stack, RemapStack};
use reachmap::session_store::{read_samples, replay, SessionArchive, SessionRecorder};
use reachmap::task::{run_protocol, Preset, SyntheticUser, UserSpec};
use reachmap::{BiasProfile, Condition, Config};
use reachmap_service::ServiceConfig;

type Result<T> = std::result::Result<T, Box<dyn std::error::Error>>;

#[derive(Parser)]
#[command(name = "reachmap", version, about = "Bias-aware control remapping: calibrate, compile, simulate and serve")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build a bias profile from a raw sample stream.
    Profile {
        /// Archive directory, raw.ndjson, or one sample per line.
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        mz: Option<usize>,
    },
    /// Compile a profile into a binary remap stack plus JSON sidecar.
    CompileMap {
        #[arg(long)]
        profile: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        mx: Option<usize>,
        #[arg(long)]
        my: Option<usize>,
        /// Must match the profile's bin count.
        #[arg(long)]
        mz: Option<usize>,
        #[arg(long)]
        eta: Option<f64>,
    },
    /// Run the full protocol with a synthetic user and archive it.
    Simulate {
        /// Preset name or a user spec JSON file.
        #[arg(long, default_value = "contraction")]
        user: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write metrics.json, metrics.csv and metrics.svg for an archive.
    Report {
        dir: PathBuf,
        /// Output directory; defaults to the archive.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-run an archive's raw samples and compare with what was recorded.
    Replay {
        dir: PathBuf,
        /// Replay every phase under this condition instead of its own.
        #[arg(long)]
        condition: Option<Condition>,
        /// Write the replayed deployed stream here.
        #[arg(long)]
        deployed_out: Option<PathBuf>,
    },
    /// Summarize an archive, a stack file or a profile.
    Inspect { path: PathBuf },
    /// Run the live session bridge.
    Serve {
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn engine_config(path: Option<&Path>) -> Result<Config> {
    let base = match path {
        Some(p) => Config::from_json_str(&fs::read_to_string(p)?)?,
        None => Config::default(),
    };
    Ok(base.with_env_overrides("REACHMAP_")?)
}

fn user_spec(arg: &str) -> Result<UserSpec> {
    if let Ok(p) = arg.parse::<Preset>() {
        return Ok(p.spec());
    }
    let text = fs::read_to_string(arg).map_err(|e| format!("`{arg}` is neither a preset ({}) nor a readable file: {e}", preset_names()))?;
    Ok(serde_json::from_str(&text)?)
}

fn preset_names() -> String {
    Preset::ALL.iter().map(|p| p.as_str()).collect::<Vec<_>>().join(", ")
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Cmd::Profile {
            samples,
            out,
            config,
            mz,
        } => {
            let mut config = engine_config(config.as_deref())?;
            if let Some(m) = mz {
                config.m_z = m;
            }
            let stream = read_samples(&samples)?;
            let profile = build_profile(&stream, &config)?;
            fs::write(&out, profile.to_json())?;
            println!(
                "{} samples, {:.1}% retained, {} bins, z range [{:.3}, {:.3}] -> {}",
                profile.sample_count,
                100.0 * profile.retained_fraction,
                profile.m_z(),
                profile.z_range[0],
                profile.z_range[1],
                out.display()
            );
        }
        Cmd::CompileMap {
            profile,
            out,
            config,
            mx,
            my,
            mz,
            eta,
        } => {
            let profile = BiasProfile::from_json(&fs::read_to_string(&profile)?)?;
            let mut config = match config {
                Some(p) => engine_config(Some(&p))?,
                None => profile.config.clone(),
            };
            config.m_x = mx.unwrap_or(config.m_x);
            config.m_y = my.unwrap_or(config.m_y);
            config.eta = eta.unwrap_or(config.eta);
            if let Some(m) = mz {
                if m != profile.m_z() {
                    return Err(format!("profile has {} twist bins; rebuild it with `profile --mz {m}`", profile.m_z()).into());
                }
            }
            let (stack, report) = compile_stack(&profile, &config)?;
            stack.save(&out, &config, &report)?;
            println!(
                "{}x{}x{} stack in {:.1} ms, profile {} -> {}",
                stack.m_x,
                stack.m_y,
                stack.m_z(),
                report.elapsed_ms,
                &stack.profile_hash_hex()[..16],
                out.display()
            );
            for (i, b) in report.bins.iter().enumerate() {
                println!("  bin {i}: rho {:.3}..{:.3} (mean {:.3})", b.rho_min, b.rho_max, b.rho_mean);
            }
        }
        Cmd::Simulate {
            user,
            seed,
            out,
            config,
        } => {
            let config = engine_config(config.as_deref())?;
            let spec = user_spec(&user)?;
            let name = spec.name.clone();
            let mut op = SyntheticUser::new(spec, seed, config.input_rate);
            let mut recorder = SessionRecorder::create(&out, seed, &config, &format!("synthetic:{name}"))?;
            let session = run_protocol(&mut op, &config, seed, &mut recorder)?;
            recorder.finish()?;
            for p in &session.phases {
                let done = p.trials.iter().filter(|t| t.completed()).count();
                println!("{:>9}: {done}/{} completed", p.phase.to_string(), p.trials.len());
            }
            println!("archive written to {}", out.display());
        }
        Cmd::Report { dir, out } => {
            let archive = SessionArchive::load(&dir)?;
            let report = archive.metrics()?;
            let out = out.unwrap_or_else(|| dir.clone());
            fs::create_dir_all(&out)?;
            fs::write(out.join("metrics.json"), report.to_json())?;
            fs::write(out.join("metrics.csv"), report.to_csv())?;
            fs::write(out.join("metrics.svg"), report.to_svg())?;
            for p in &report.pairs {
                let t = p.tally;
                println!(
                    "{:>6}: gained {} kept {} lost {} never {}",
                    p.condition.to_string(),
                    t.gained,
                    t.kept,
                    t.lost,
                    t.never
                );
            }
            println!("metrics written to {}", out.display());
        }
        Cmd::Replay {
            dir,
            condition,
            deployed_out,
        } => {
            let archive = SessionArchive::load(&dir)?;
            for w in &archive.summary().warnings {
                log::warn!("{w}");
            }
            let rep = replay(&archive, condition)?;
            let bytes = rep.deployed_ndjson();
            if let Some(p) = deployed_out {
                fs::write(p, &bytes)?;
            }
            let report = rep.metrics(archive.config().m_z)?;
            for c in &report.conditions {
                println!("{:>9}: {}/{} completed", c.phase.to_string(), c.completed, c.trials);
            }
            if condition.is_none() {
                let recorded = fs::read(dir.join("deployed.ndjson"))?;
                let same_stream = recorded == bytes;
                let same_metrics = archive.metrics()? == report;
                println!(
                    "deployed stream {}, metrics {}",
                    if same_stream { "identical" } else { "DIFFERS" },
                    if same_metrics { "identical" } else { "DIFFER" }
                );
                if !(same_stream && same_metrics) {
                    std::process::exit(1);
                }
            }
        }
        Cmd::Inspect { path } => inspect(&path)?,
        Cmd::Serve { port, config } => {
            let mut config = ServiceConfig::load(config.as_deref())?;
            if let Some(p) = port {
                config.port = p;
            }
            tokio::runtime::Runtime::new()?.block_on(reachmap_service::serve(config))?;
        }
    }
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    if path.is_dir() {
        return print_json(&SessionArchive::load(path)?.summary());
    }
    let bytes = fs::read(path)?;
    if bytes.starts_with(b"RMAP") {
        let stack = Arc::new(RemapStack::read_binary(&bytes[..])?);
        return print_json(&serde_json::json!({
            "m_x": stack.m_x,
            "m_y": stack.m_y,
            "m_z": stack.m_z(),
            "bin_edges": stack.bin_edges,
            "hysteresis": stack.hysteresis,
            "borrowed": stack.borrowed,
            "profile_hash": stack.profile_hash_hex(),
        }));
    }
    let profile = BiasProfile::from_json(std::str::from_utf8(&bytes)?)?;
    print_json(&serde_json::json!({
        "fingerprint": hex_string(&profile.fingerprint()),
        "input_digest": profile.input_digest,
        "sample_count": profile.sample_count,
        "retained_fraction": profile.retained_fraction,
        "z_range": profile.z_range,
        "bin_edges": profile.bin_edges,
        "bins": profile.bins.iter().map(|b| serde_json::json!({
            "samples": b.sample_count,
            "hull_vertices": b.hull.vertices().len(),
            "borrowed_from": b.borrowed_from,
            "cm_inside": b.cm_inside,
        })).collect::<Vec<_>>(),
    }))
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
