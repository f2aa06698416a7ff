use reachmap::bias_profile::stream_digest;
use reachmap::session_store::{SessionArchive, SessionRecorder};
use reachmap::task::{run_protocol, run_trial, Phase, Preset, SyntheticUser, Target, UserSpec};
use reachmap::{BiasProfile, Condition, Config, RemapStack};

/// Closed-form error of one axis under saturated proportional control:
/// constant speed while `kp·e ≥ 1`, then geometric decay by `1 − kp·dt`.
fn axis_error(target: f64, n: usize, kp: f64, dt: f64) -> f64 {
    let e0 = target.abs();
    let knee = 1.0 / kp;
    if e0 < knee {
        return e0 * (1.0 - kp * dt).powi(n as i32);
    }
    let saturated = ((e0 - knee) / dt).floor() as usize + 1;
    if n <= saturated {
        e0 - n as f64 * dt
    } else {
        (e0 - saturated as f64 * dt) * (1.0 - kp * dt).powi((n - saturated) as i32)
    }
}

fn ttfr_oracle(target: &Target, config: &Config, kp: f64) -> f64 {
    let dt = config.frame_dt();
    let n = (1..)
        .find(|&n| {
            let ex = axis_error(target.x, n, kp, dt);
            let ey = axis_error(target.y, n, kp, dt);
            (ex * ex + ey * ey).sqrt() <= config.position_tolerance
        })
        .unwrap();
    n as f64 * dt
}

#[test]
fn first_reach_matches_closed_form_for_a_noise_free_user() {
    let config = Config::default();
    let spec = UserSpec {
        noise_sigma: 0.0,
        ..Preset::Identity.spec()
    };
    let dt = config.frame_dt();
    for (x, y) in [(0.8, 0.0), (0.0, -0.4), (0.8, 0.8), (-0.4, 0.8), (0.4, -0.8), (-0.8, -0.8)] {
        let target = Target { id: 0, order: 0, x, y, z: 0.0 };
        let mut user = SyntheticUser::new(spec.clone(), 1, config.input_rate);
        let rec = run_trial(&mut user, target, Condition::Unmapped, None, &config).unwrap();
        let got = rec.time_to_first_reach.expect("noise-free user reaches every z = 0 target");
        let want = ttfr_oracle(&target, &config, spec.kp);
        assert!((got - want).abs() <= dt + 1e-9, "({x}, {y}): {got} vs closed form {want}");
        assert!(rec.completed());
    }
}

#[test]
fn calibration_consumes_exactly_the_unmapped_stream() {
    let config = Config {
        training_targets: 2,
        ..Config::default()
    };
    let seed = 8;
    let dir = tempfile::tempdir().unwrap();
    let mut user = SyntheticUser::preset(Preset::Offset, seed, config.input_rate);
    let mut rec = SessionRecorder::create(dir.path(), seed, &config, "oracle").unwrap();
    let session = run_protocol(&mut user, &config, seed, &mut rec).unwrap();
    let manifest = rec.finish().unwrap();

    let archive = SessionArchive::load(dir.path()).unwrap();
    let recorded = archive.raw_samples(Phase::Unmapped);
    let from_trials: Vec<_> = session
        .phase(Phase::Unmapped)
        .unwrap()
        .trials
        .iter()
        .flat_map(|t| t.raw_samples())
        .collect();
    assert_eq!(recorded, from_trials);
    assert_eq!(recorded, session.calibration_stream);

    let profile = BiasProfile::from_json(&std::fs::read_to_string(dir.path().join("profile.json")).unwrap()).unwrap();
    assert_eq!(profile.input_digest, stream_digest(&recorded));
    assert_eq!(profile.sample_count, recorded.len());
    assert_eq!(&profile, session.profile.as_ref().unwrap());

    let stack = RemapStack::load(&dir.path().join("stack.bin")).unwrap();
    assert_eq!(stack.profile_hash, profile.fingerprint());
    assert_eq!(stack.to_bytes(), session.stack.as_ref().unwrap().to_bytes());
    let sidecar: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("stack.json")).unwrap()).unwrap();
    assert_eq!(sidecar["profile_hash"], stack.profile_hash_hex());
    assert!(manifest.files.contains_key("stack.bin"));

    // The mapped rounds ran through that stack: the recorded remapped
    // outputs agree with a direct lookup of their raw samples.
    let adr = session.phase(Phase::Adr).unwrap();
    let mut active = None;
    for p in adr.trials.iter().flat_map(|t| &t.trajectory).filter(|p| !p.output.synthesized).take(500) {
        let bin = stack.select_bin(p.raw.u_z, active);
        active = Some(bin);
        let o = stack.lookup_in_bin(&p.raw.clamped(), bin);
        assert_eq!([p.output.x, p.output.y, p.output.z], o);
    }
}
