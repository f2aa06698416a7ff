//! Session archives: append-only recording, integrity-checked loading and
//! deterministic replay through any condition.
//!
//! ```text
//! <dir>/manifest.json    version, seed, config, phase index, SHA-256 per file
//! <dir>/raw.ndjson       header, then phase / trial / sample / break events
//! <dir>/deployed.ndjson  one pipeline output per line
//! <dir>/trials.ndjson    one trial summary per line
//! <dir>/profile.json     bias profile (after calibration)
//! <dir>/stack.bin        compiled remap stack, with stack.json sidecar
//! ```

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::bias_profile::{BiasProfile, ControlSample};
use crate::config::Config;
use crate::deployment::{Condition, DeployedOutput, DeploymentState};
use crate::error::{ArchiveError, TaskError};
use crate::map_compiler::{compile_stack, CompileReport, RemapStack};
use crate::metrics::MetricsReport;
use crate::task::{DotState, Outcome, Phase, PhaseRecord, SessionSink, Target, TrialRecord, TrialRunner};

pub const ARCHIVE_VERSION: u32 = 1;

pub const MANIFEST: &str = "manifest.json";
pub const RAW: &str = "raw.ndjson";
pub const DEPLOYED: &str = "deployed.ndjson";
pub const TRIALS: &str = "trials.ndjson";
pub const PROFILE: &str = "profile.json";
pub const STACK: &str = "stack.bin";
pub const STACK_SIDECAR: &str = "stack.json";

/// One line of `raw.ndjson`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RawEvent {
    Header {
        version: u32,
        seed: u64,
        config: Config,
        #[serde(default)]
        operator: String,
    },
    Phase {
        phase: Phase,
        targets: Vec<usize>,
    },
    TrialStart {
        phase: Phase,
        target: Target,
    },
    /// A raw sample with the dot state after it was applied.
    Sample {
        t: f64,
        u_x: f64,
        u_y: f64,
        u_z: f64,
        #[serde(default)]
        dot: Option<DotState>,
    },
    TrialEnd {
        phase: Phase,
        target_id: usize,
        outcome: Outcome,
    },
    Break {
        phase: Phase,
        after: usize,
    },
    Calibrated {
        profile_fingerprint: String,
        input_digest: String,
    },
    /// Event types from newer writers.
    #[serde(other)]
    Unknown,
}

/// One line of `trials.ndjson`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub phase: Phase,
    pub condition: Condition,
    pub target: Target,
    pub outcome: Outcome,
    pub time_to_first_reach: Option<f64>,
    pub path_length: f64,
    pub hold_satisfied: bool,
    pub start_t: f64,
    pub duration: f64,
    pub samples: usize,
}

impl From<&TrialRecord> for TrialSummary {
    fn from(r: &TrialRecord) -> Self {
        Self {
            phase: r.phase,
            condition: r.condition,
            target: r.target,
            outcome: r.outcome,
            time_to_first_reach: r.time_to_first_reach,
            path_length: r.path_length,
            hold_satisfied: r.hold_satisfied,
            start_t: r.start_t,
            duration: r.duration,
            samples: r.raw_samples().len(),
        }
    }
}

impl TrialSummary {
    /// A record without trajectory, enough for every metric.
    pub fn to_record(&self) -> TrialRecord {
        TrialRecord {
            phase: self.phase,
            condition: self.condition,
            target: self.target,
            trajectory: Vec::new(),
            outcome: self.outcome,
            time_to_first_reach: self.time_to_first_reach,
            path_length: self.path_length,
            hold_satisfied: self.hold_satisfied,
            start_t: self.start_t,
            duration: self.duration,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseEntry {
    pub phase: Phase,
    pub trials: usize,
    pub completed: usize,
    pub breaks: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub config: Config,
    #[serde(default)]
    pub operator: String,
    #[serde(default)]
    pub complete: bool,
    #[serde(default)]
    pub phases: Vec<PhaseEntry>,
    /// SHA-256 (hex) of every other file in the archive.
    #[serde(default)]
    pub files: BTreeMap<String, String>,
}

/// Serialized form of one output, as stored in `deployed.ndjson`.
pub fn deployed_line(out: &DeployedOutput) -> Vec<u8> {
    let mut v = serde_json::to_vec(out).expect("output serializes");
    v.push(b'\n');
    v
}

pub fn deployed_ndjson(outputs: &[DeployedOutput]) -> Vec<u8> {
    outputs.iter().flat_map(deployed_line).collect()
}

fn write_line<T: Serialize>(w: &mut impl Write, value: &T) -> io::Result<()> {
    serde_json::to_writer(&mut *w, value).map_err(io::Error::other)?;
    w.write_all(b"\n")
}

pub fn file_digest(path: &Path) -> io::Result<String> {
    let mut f = BufReader::new(File::open(path)?);
    let mut h = Sha256::new();
    io::copy(&mut f, &mut h)?;
    Ok(hex::encode(h.finalize()))
}

/// Append-only archive writer; streams are flushed at every trial end.
pub struct SessionRecorder {
    dir: PathBuf,
    raw: BufWriter<File>,
    deployed: BufWriter<File>,
    trials: BufWriter<File>,
    manifest: Manifest,
    current: Option<PhaseEntry>,
}

impl SessionRecorder {
    pub fn create(dir: &Path, seed: u64, config: &Config, operator: &str) -> Result<Self, ArchiveError> {
        fs::create_dir_all(dir)?;
        let open = |name: &str| File::create(dir.join(name)).map(BufWriter::new);
        let mut rec = Self {
            dir: dir.to_path_buf(),
            raw: open(RAW)?,
            deployed: open(DEPLOYED)?,
            trials: open(TRIALS)?,
            manifest: Manifest {
                version: ARCHIVE_VERSION,
                seed,
                config: config.clone(),
                operator: operator.into(),
                complete: false,
                phases: Vec::new(),
                files: BTreeMap::new(),
            },
            current: None,
        };
        for stale in [PROFILE, STACK, STACK_SIDECAR] {
            let p = dir.join(stale);
            if p.exists() {
                fs::remove_file(p)?;
            }
        }
        write_line(
            &mut rec.raw,
            &RawEvent::Header {
                version: ARCHIVE_VERSION,
                seed,
                config: config.clone(),
                operator: operator.into(),
            },
        )?;
        rec.raw.flush()?;
        rec.write_manifest()?;
        Ok(rec)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn write_manifest(&self) -> io::Result<()> {
        let tmp = self.dir.join("manifest.json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(&self.manifest).map_err(io::Error::other)?)?;
        fs::rename(tmp, self.dir.join(MANIFEST))
    }

    fn close_phase(&mut self) {
        if let Some(p) = self.current.take() {
            self.manifest.phases.push(p);
        }
    }

    /// Flushes the streams without closing the archive.
    pub fn flush(&mut self) -> io::Result<()> {
        self.raw.flush()?;
        self.deployed.flush()?;
        self.trials.flush()
    }

    /// Flushes everything, hashes the files and marks the archive complete.
    pub fn finish(mut self) -> Result<Manifest, ArchiveError> {
        self.close_phase();
        self.raw.flush()?;
        self.deployed.flush()?;
        self.trials.flush()?;
        let mut files = BTreeMap::new();
        for name in [RAW, DEPLOYED, TRIALS, PROFILE, STACK, STACK_SIDECAR] {
            let p = self.dir.join(name);
            if p.exists() {
                files.insert(name.to_string(), file_digest(&p)?);
            }
        }
        self.manifest.files = files;
        self.manifest.complete = true;
        self.write_manifest()?;
        Ok(self.manifest)
    }
}

impl SessionSink for SessionRecorder {
    fn phase_start(&mut self, phase: Phase, targets: &[Target]) -> io::Result<()> {
        self.close_phase();
        self.current = Some(PhaseEntry {
            phase,
            trials: 0,
            completed: 0,
            breaks: Vec::new(),
        });
        write_line(
            &mut self.raw,
            &RawEvent::Phase {
                phase,
                targets: targets.iter().map(|t| t.id).collect(),
            },
        )
    }

    fn trial_start(&mut self, phase: Phase, target: &Target) -> io::Result<()> {
        write_line(&mut self.raw, &RawEvent::TrialStart { phase, target: *target })
    }

    fn sample(&mut self, raw: &ControlSample, outputs: &[DeployedOutput], dot: &DotState) -> io::Result<()> {
        write_line(
            &mut self.raw,
            &RawEvent::Sample {
                t: raw.t,
                u_x: raw.u_x,
                u_y: raw.u_y,
                u_z: raw.u_z,
                dot: Some(*dot),
            },
        )?;
        for o in outputs {
            self.deployed.write_all(&deployed_line(o))?;
        }
        Ok(())
    }

    fn trial_end(&mut self, record: &TrialRecord) -> io::Result<()> {
        write_line(
            &mut self.raw,
            &RawEvent::TrialEnd {
                phase: record.phase,
                target_id: record.target.id,
                outcome: record.outcome,
            },
        )?;
        write_line(&mut self.trials, &TrialSummary::from(record))?;
        if let Some(p) = self.current.as_mut() {
            p.trials += 1;
            p.completed += record.completed() as usize;
        }
        self.raw.flush()?;
        self.deployed.flush()?;
        self.trials.flush()
    }

    fn break_marker(&mut self, phase: Phase, after_trials: usize) -> io::Result<()> {
        if let Some(p) = self.current.as_mut() {
            p.breaks.push(after_trials);
        }
        write_line(&mut self.raw, &RawEvent::Break { phase, after: after_trials })?;
        self.raw.flush()
    }

    fn calibrated(&mut self, profile: &BiasProfile, stack: &RemapStack, report: &CompileReport) -> io::Result<()> {
        fs::write(self.dir.join(PROFILE), profile.to_json())?;
        stack
            .save(&self.dir.join(STACK), &self.manifest.config, report)
            .map_err(io::Error::other)?;
        write_line(
            &mut self.raw,
            &RawEvent::Calibrated {
                profile_fingerprint: hex::encode(profile.fingerprint()),
                input_digest: profile.input_digest.clone(),
            },
        )?;
        self.close_phase();
        self.raw.flush()?;
        self.write_manifest()
    }
}

/// Raw samples of one recorded trial.
#[derive(Clone, Debug, PartialEq)]
pub struct RecordedTrial {
    pub target: Target,
    pub samples: Vec<ControlSample>,
    /// `None` when the recording ends mid-trial.
    pub outcome: Option<Outcome>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecordedPhase {
    pub phase: Phase,
    pub trials: Vec<RecordedTrial>,
    pub breaks: Vec<usize>,
}

/// A loaded archive.
#[derive(Clone, Debug)]
pub struct SessionArchive {
    pub dir: PathBuf,
    pub manifest: Manifest,
    /// Set when the recording stopped before it was finalized.
    pub truncated: bool,
    pub warnings: Vec<String>,
    pub events: Vec<RawEvent>,
    pub deployed: Vec<DeployedOutput>,
    pub trials: Vec<TrialSummary>,
    pub profile: Option<BiasProfile>,
    pub stack: Option<Arc<RemapStack>>,
}

fn read_ndjson<T: for<'de> Deserialize<'de>>(
    path: &Path,
    tolerate_tail: bool,
    warnings: &mut Vec<String>,
) -> Result<Vec<T>, ArchiveError> {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let f = BufReader::new(File::open(path)?);
    let lines: Vec<String> = f.lines().collect::<Result<_, _>>()?;
    let mut out = Vec::with_capacity(lines.len());
    let n = lines.len();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(v) => out.push(v),
            Err(e) if tolerate_tail && i + 1 == n => {
                warnings.push(format!("{name}: dropped incomplete final line ({e})"));
            }
            Err(e) => {
                return Err(ArchiveError::Malformed {
                    file: name,
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

impl SessionArchive {
    pub fn load(dir: &Path) -> Result<Self, ArchiveError> {
        let mut warnings = Vec::new();
        if !dir.join(RAW).exists() {
            return Err(ArchiveError::MissingFile(RAW.into()));
        }
        let manifest_path = dir.join(MANIFEST);
        let manifest: Option<Manifest> = if manifest_path.exists() {
            Some(serde_json::from_slice(&fs::read(&manifest_path)?)?)
        } else {
            None
        };
        if let Some(m) = &manifest {
            if m.version > ARCHIVE_VERSION {
                return Err(ArchiveError::VersionMismatch {
                    found: m.version,
                    supported: ARCHIVE_VERSION,
                });
            }
        }
        let complete = manifest.as_ref().is_some_and(|m| m.complete);
        if let Some(m) = manifest.as_ref().filter(|m| m.complete) {
            for (file, digest) in &m.files {
                let p = dir.join(file);
                if !p.exists() {
                    return Err(ArchiveError::MissingFile(file.clone()));
                }
                if &file_digest(&p)? != digest {
                    return Err(ArchiveError::HashMismatch { file: file.clone() });
                }
            }
        }

        let events: Vec<RawEvent> = read_ndjson(&dir.join(RAW), !complete, &mut warnings)?;
        let manifest = match manifest {
            Some(m) => m,
            None => match events.first() {
                Some(RawEvent::Header {
                    version,
                    seed,
                    config,
                    operator,
                }) => {
                    if *version > ARCHIVE_VERSION {
                        return Err(ArchiveError::VersionMismatch {
                            found: *version,
                            supported: ARCHIVE_VERSION,
                        });
                    }
                    Manifest {
                        version: *version,
                        seed: *seed,
                        config: config.clone(),
                        operator: operator.clone(),
                        complete: false,
                        phases: Vec::new(),
                        files: BTreeMap::new(),
                    }
                }
                _ => {
                    return Err(ArchiveError::Malformed {
                        file: RAW.into(),
                        line: 1,
                        message: "missing header record".into(),
                    })
                }
            },
        };

        let optional = |name: &str| dir.join(name).exists().then(|| dir.join(name));
        let deployed = match optional(DEPLOYED) {
            Some(p) => read_ndjson(&p, !complete, &mut warnings)?,
            None => Vec::new(),
        };
        let trials = match optional(TRIALS) {
            Some(p) => read_ndjson(&p, !complete, &mut warnings)?,
            None => Vec::new(),
        };
        let profile = match optional(PROFILE) {
            Some(p) => Some(BiasProfile::from_json(&fs::read_to_string(p)?)?),
            None => None,
        };
        let stack = match optional(STACK) {
            Some(p) => Some(Arc::new(RemapStack::load(&p)?)),
            None => None,
        };
        if let (Some(p), Some(s)) = (&profile, &stack) {
            if p.fingerprint() != s.profile_hash {
                warnings.push("stack was compiled from a different profile".into());
            }
        }
        if events.iter().any(|e| matches!(e, RawEvent::Unknown)) {
            warnings.push("raw.ndjson contains event types this version does not know; they were skipped".into());
        }

        let truncated = !complete;
        if truncated {
            warnings.insert(0, "archive was not finalized; loading the recorded prefix".into());
            for w in &warnings {
                log::warn!("{}: {w}", dir.display());
            }
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            truncated,
            warnings,
            events,
            deployed,
            trials,
            profile,
            stack,
        })
    }

    pub fn config(&self) -> &Config {
        &self.manifest.config
    }

    /// Recorded trials grouped by phase, from the event stream.
    pub fn phases(&self) -> Vec<RecordedPhase> {
        let mut out: Vec<RecordedPhase> = Vec::new();
        for e in &self.events {
            match e {
                RawEvent::Phase { phase, .. } => out.push(RecordedPhase {
                    phase: *phase,
                    trials: Vec::new(),
                    breaks: Vec::new(),
                }),
                RawEvent::TrialStart { target, .. } => {
                    if let Some(p) = out.last_mut() {
                        p.trials.push(RecordedTrial {
                            target: *target,
                            samples: Vec::new(),
                            outcome: None,
                        });
                    }
                }
                RawEvent::Sample { t, u_x, u_y, u_z, .. } => {
                    if let Some(tr) = out.last_mut().and_then(|p| p.trials.last_mut()) {
                        tr.samples.push(ControlSample {
                            t: *t,
                            u_x: *u_x,
                            u_y: *u_y,
                            u_z: *u_z,
                        });
                    }
                }
                RawEvent::TrialEnd { outcome, .. } => {
                    if let Some(tr) = out.last_mut().and_then(|p| p.trials.last_mut()) {
                        tr.outcome = Some(*outcome);
                    }
                }
                RawEvent::Break { after, .. } => {
                    if let Some(p) = out.last_mut() {
                        p.breaks.push(*after);
                    }
                }
                _ => {}
            }
        }
        out
    }

    /// Every recorded raw sample of `phase`, in order.
    pub fn raw_samples(&self, phase: Phase) -> Vec<ControlSample> {
        self.phases()
            .into_iter()
            .filter(|p| p.phase == phase)
            .flat_map(|p| p.trials.into_iter().flat_map(|t| t.samples))
            .collect()
    }

    /// Phase records rebuilt from the trial summaries (no trajectories).
    pub fn phase_records(&self) -> Vec<PhaseRecord> {
        let mut out: Vec<PhaseRecord> = Vec::new();
        let breaks: Vec<(Phase, Vec<usize>)> = self.phases().into_iter().map(|p| (p.phase, p.breaks)).collect();
        for s in &self.trials {
            if out.last().is_none_or(|p| p.phase != s.phase) {
                let b = breaks.iter().find(|(p, _)| *p == s.phase).map(|(_, b)| b.clone()).unwrap_or_default();
                out.push(PhaseRecord {
                    phase: s.phase,
                    trials: Vec::new(),
                    breaks: b,
                });
            }
            out.last_mut().unwrap().trials.push(s.to_record());
        }
        out
    }

    pub fn metrics(&self) -> Result<MetricsReport, crate::error::MetricsError> {
        MetricsReport::from_phases(&self.phase_records(), self.config().m_z)
    }

    /// The archived stack, or one compiled from the archived profile.
    pub fn stack_or_compile(&self) -> Result<Option<Arc<RemapStack>>, ArchiveError> {
        if let Some(s) = &self.stack {
            return Ok(Some(s.clone()));
        }
        match &self.profile {
            Some(p) => {
                let (s, _) = compile_stack(p, self.config()).map_err(TaskError::from)?;
                Ok(Some(Arc::new(s)))
            }
            None => Ok(None),
        }
    }

    pub fn summary(&self) -> ArchiveSummary {
        let phases = self.phases();
        ArchiveSummary {
            dir: self.dir.display().to_string(),
            version: self.manifest.version,
            seed: self.manifest.seed,
            operator: self.manifest.operator.clone(),
            complete: !self.truncated,
            warnings: self.warnings.clone(),
            phases: phases
                .iter()
                .map(|p| PhaseEntry {
                    phase: p.phase,
                    trials: p.trials.len(),
                    completed: p.trials.iter().filter(|t| t.outcome == Some(Outcome::Completed)).count(),
                    breaks: p.breaks.clone(),
                })
                .collect(),
            raw_samples: phases.iter().flat_map(|p| &p.trials).map(|t| t.samples.len()).sum(),
            deployed_outputs: self.deployed.len(),
            synthesized_outputs: self.deployed.iter().filter(|o| o.synthesized).count(),
            profile: self.profile.as_ref().map(|p| ProfileSummary {
                fingerprint: hex::encode(p.fingerprint()),
                input_digest: p.input_digest.clone(),
                sample_count: p.sample_count,
                retained_fraction: p.retained_fraction,
                z_range: p.z_range,
                hull_vertices: p.bins.iter().map(|b| b.hull.vertices().len()).collect(),
                borrowed: p.bins.iter().map(|b| b.borrowed_from).collect(),
            }),
            stack: self.stack.as_ref().map(|s| StackSummary {
                m_x: s.m_x,
                m_y: s.m_y,
                m_z: s.m_z(),
                profile_hash: s.profile_hash_hex(),
                bin_edges: s.bin_edges.clone(),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileSummary {
    pub fingerprint: String,
    pub input_digest: String,
    pub sample_count: usize,
    pub retained_fraction: f64,
    pub z_range: [f64; 2],
    pub hull_vertices: Vec<usize>,
    pub borrowed: Vec<Option<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackSummary {
    pub m_x: usize,
    pub m_y: usize,
    pub m_z: usize,
    pub profile_hash: String,
    pub bin_edges: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchiveSummary {
    pub dir: String,
    pub version: u32,
    pub seed: u64,
    pub operator: String,
    pub complete: bool,
    pub warnings: Vec<String>,
    pub phases: Vec<PhaseEntry>,
    pub raw_samples: usize,
    pub deployed_outputs: usize,
    pub synthesized_outputs: usize,
    pub profile: Option<ProfileSummary>,
    pub stack: Option<StackSummary>,
}

#[derive(Clone, Debug)]
pub struct Replay {
    pub phases: Vec<PhaseRecord>,
    pub deployed: Vec<DeployedOutput>,
}

impl Replay {
    pub fn deployed_ndjson(&self) -> Vec<u8> {
        deployed_ndjson(&self.deployed)
    }

    pub fn metrics(&self, m_z: usize) -> Result<MetricsReport, crate::error::MetricsError> {
        MetricsReport::from_phases(&self.phases, m_z)
    }
}

/// Runs one recorded phase open-loop under `condition`. Every recorded
/// sample reaches the pipeline; a trial stops integrating once it resolves.
pub fn replay_phase(
    recorded: &RecordedPhase,
    condition: Condition,
    stack: Option<Arc<RemapStack>>,
    config: &Config,
) -> Result<(PhaseRecord, Vec<DeployedOutput>), TaskError> {
    let mut deployment = DeploymentState::new(condition, config, stack)?;
    let mut deployed = Vec::new();
    let mut trials = Vec::with_capacity(recorded.trials.len());
    for (i, tr) in recorded.trials.iter().enumerate() {
        if i > 0 && recorded.breaks.contains(&i) {
            deployment.reset();
        }
        let mut runner = TrialRunner::new(recorded.phase, condition, tr.target, config);
        for s in &tr.samples {
            let outs = deployment.ingest(s);
            if runner.outcome().is_none() {
                runner.advance(s, &outs);
            }
            deployed.extend(outs);
        }
        trials.push(runner.finish());
    }
    Ok((
        PhaseRecord {
            phase: recorded.phase,
            trials,
            breaks: recorded.breaks.clone(),
        },
        deployed,
    ))
}

/// Replays every recorded phase, under its own condition or `condition`.
pub fn replay(archive: &SessionArchive, condition: Option<Condition>) -> Result<Replay, ArchiveError> {
    let mut phases = Vec::new();
    let mut deployed = Vec::new();
    let mut stack: Option<Option<Arc<RemapStack>>> = None;
    for rp in archive.phases() {
        let c = condition.unwrap_or(rp.phase.condition());
        let s = if c.needs_stack() {
            if stack.is_none() {
                stack = Some(archive.stack_or_compile()?);
            }
            match stack.clone().flatten() {
                Some(s) => Some(s),
                None => return Err(ArchiveError::MissingStack(c.to_string())),
            }
        } else {
            None
        };
        let (record, outs) = replay_phase(&rp, c, s, archive.config())?;
        phases.push(record);
        deployed.extend(outs);
    }
    Ok(Replay { phases, deployed })
}

/// Reads raw samples from an archive directory, an archive `raw.ndjson`, or
/// a plain file of one `ControlSample` per line.
pub fn read_samples(path: &Path) -> Result<Vec<ControlSample>, ArchiveError> {
    let path = if path.is_dir() { path.join(RAW) } else { path.to_path_buf() };
    let name = path.display().to_string();
    let f = BufReader::new(File::open(&path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| ArchiveError::Malformed {
            file: name.clone(),
            line: i + 1,
            message: e.to_string(),
        })?;
        match value.get("type").and_then(|t| t.as_str()) {
            Some("sample") | None => {
                let s: ControlSample = serde_json::from_value(value).map_err(|e| ArchiveError::Malformed {
                    file: name.clone(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
                out.push(s);
            }
            Some(_) => {}
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::{drive, ProtocolMachine, ProtocolPlan, Preset, SyntheticUser};

    fn small_config() -> Config {
        Config {
            m_x: 40,
            m_y: 40,
            training_targets: 2,
            trial_timeout: 5.0,
            break_every: 3,
            m_z: 1,
            ..Config::default()
        }
    }

    /// Six planar targets spread over every direction, so one bin's hull
    /// surrounds its centroid comfortably.
    fn spread_targets() -> Vec<Target> {
        let pts = [(0.8, 0.0), (0.0, 0.8), (-0.8, 0.0), (0.0, -0.8), (0.8, 0.8), (-0.8, -0.8)];
        pts.iter()
            .enumerate()
            .map(|(i, &(x, y))| Target { id: 50 + i, order: i, x, y, z: 0.0 })
            .collect()
    }

    fn record_session(dir: &Path, seed: u64, preset: Preset) -> crate::task::Session {
        let cfg = small_config();
        let mut plan = ProtocolPlan::new(seed, &cfg);
        plan.task = spread_targets();
        let mut rec = SessionRecorder::create(dir, seed, &cfg, preset.as_str()).unwrap();
        let mut user = SyntheticUser::preset(preset, seed, cfg.input_rate);
        let session = drive(ProtocolMachine::with_plan(cfg, plan), &mut user, &mut rec).unwrap();
        rec.finish().unwrap();
        session
    }

    #[test]
    fn empty_session_is_a_valid_archive() {
        let dir = tempfile::tempdir().unwrap();
        let rec = SessionRecorder::create(dir.path(), 1, &Config::default(), "none").unwrap();
        let m = rec.finish().unwrap();
        assert!(m.complete);
        let a = SessionArchive::load(dir.path()).unwrap();
        assert!(!a.truncated);
        assert!(a.phases().is_empty());
        assert!(a.trials.is_empty());
        assert_eq!(a.manifest, m);
    }

    #[test]
    fn write_then_read_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let session = record_session(dir.path(), 3, Preset::Contraction);
        let a = SessionArchive::load(dir.path()).unwrap();
        assert!(!a.truncated, "{:?}", a.warnings);
        let trials: Vec<TrialSummary> = session.phases.iter().flat_map(|p| p.trials.iter().map(TrialSummary::from)).collect();
        assert_eq!(a.trials, trials);
        let outs: Vec<DeployedOutput> = session
            .phases
            .iter()
            .flat_map(|p| p.trials.iter().flat_map(|t| t.trajectory.iter().map(|pt| pt.output)))
            .collect();
        assert_eq!(a.deployed, outs);
        assert_eq!(a.profile.as_ref(), session.profile.as_ref());
        assert_eq!(a.stack.as_deref(), session.stack.as_deref());
        assert_eq!(a.raw_samples(Phase::Unmapped), session.calibration_stream);
        assert_eq!(a.manifest.phases.len(), 4);
        assert_eq!(a.manifest.phases[1].breaks, vec![3]);
    }

    #[test]
    fn replay_under_recorded_conditions_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let session = record_session(dir.path(), 5, Preset::Identity);
        let a = SessionArchive::load(dir.path()).unwrap();
        let r = replay(&a, None).unwrap();
        assert_eq!(r.deployed_ndjson(), fs::read(dir.path().join(DEPLOYED)).unwrap());
        assert_eq!(r.phases, session.phases);
        let m = small_config().m_z;
        assert_eq!(r.metrics(m).unwrap(), MetricsReport::from_phases(&session.phases, m).unwrap());
        assert_eq!(a.metrics().unwrap(), r.metrics(m).unwrap());
    }

    #[test]
    fn replay_under_another_condition_uses_the_archived_map() {
        let dir = tempfile::tempdir().unwrap();
        record_session(dir.path(), 6, Preset::Contraction);
        let a = SessionArchive::load(dir.path()).unwrap();
        let r = replay(&a, Some(Condition::Adr)).unwrap();
        assert!(r.phases.iter().all(|p| p.trials.iter().all(|t| t.condition == Condition::Adr)));
        assert_eq!(r.deployed.len(), a.deployed.len());
        assert!(r.deployed.iter().all(|o| o.bin.is_some()));
    }

    #[test]
    fn replay_without_stack_or_profile_fails() {
        let dir = tempfile::tempdir().unwrap();
        record_session(dir.path(), 7, Preset::Identity);
        fs::remove_file(dir.path().join(MANIFEST)).unwrap();
        fs::remove_file(dir.path().join(STACK)).unwrap();
        fs::remove_file(dir.path().join(PROFILE)).unwrap();
        let a = SessionArchive::load(dir.path()).unwrap();
        assert!(matches!(replay(&a, Some(Condition::AdrSmoothed)), Err(ArchiveError::MissingStack(_))));
        assert!(replay(&a, Some(Condition::Unmapped)).is_ok());
    }

    #[test]
    fn tampering_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        record_session(dir.path(), 8, Preset::Identity);
        let p = dir.path().join(TRIALS);
        let mut bytes = fs::read(&p).unwrap();
        bytes.push(b'\n');
        fs::write(&p, bytes).unwrap();
        assert!(matches!(SessionArchive::load(dir.path()), Err(ArchiveError::HashMismatch { file }) if file == TRIALS));
    }

    #[test]
    fn partial_archive_loads_with_warning() {
        let dir = tempfile::tempdir().unwrap();
        record_session(dir.path(), 9, Preset::Identity);
        // Cut raw.ndjson mid-line and drop the finalized manifest.
        let raw = fs::read(dir.path().join(RAW)).unwrap();
        fs::write(dir.path().join(RAW), &raw[..raw.len() / 2]).unwrap();
        let mut m: Manifest = serde_json::from_slice(&fs::read(dir.path().join(MANIFEST)).unwrap()).unwrap();
        m.complete = false;
        fs::write(dir.path().join(MANIFEST), serde_json::to_vec(&m).unwrap()).unwrap();
        let a = SessionArchive::load(dir.path()).unwrap();
        assert!(a.truncated);
        assert!(a.warnings.iter().any(|w| w.contains("incomplete final line")));
        let phases = a.phases();
        assert!(!phases.is_empty());
        let r = replay(&a, Some(Condition::Unmapped)).unwrap();
        assert_eq!(r.phases.len(), phases.len());
    }

    #[test]
    fn newer_versions_are_rejected_and_unknown_fields_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let rec = SessionRecorder::create(dir.path(), 1, &Config::default(), "x").unwrap();
        rec.finish().unwrap();
        let raw_path = dir.path().join(RAW);
        let mut raw = fs::read_to_string(&raw_path).unwrap();
        raw.push_str("{\"type\":\"annotation\",\"text\":\"hi\"}\n");
        raw.push_str("{\"type\":\"phase\",\"phase\":\"no-adr\",\"targets\":[1],\"color\":\"red\"}\n");
        fs::write(&raw_path, raw).unwrap();
        let mut m: Manifest = serde_json::from_slice(&fs::read(dir.path().join(MANIFEST)).unwrap()).unwrap();
        m.files.insert(RAW.into(), file_digest(&raw_path).unwrap());
        let mut v = serde_json::to_value(&m).unwrap();
        v["future_field"] = serde_json::json!(42);
        fs::write(dir.path().join(MANIFEST), serde_json::to_vec(&v).unwrap()).unwrap();
        let a = SessionArchive::load(dir.path()).unwrap();
        assert_eq!(a.phases().len(), 1);
        assert!(a.warnings.iter().any(|w| w.contains("event types")));

        v["version"] = serde_json::json!(ARCHIVE_VERSION + 1);
        fs::write(dir.path().join(MANIFEST), serde_json::to_vec(&v).unwrap()).unwrap();
        assert!(matches!(SessionArchive::load(dir.path()), Err(ArchiveError::VersionMismatch { found: 2, .. })));
    }

    #[test]
    fn samples_read_from_plain_and_archive_files() {
        let dir = tempfile::tempdir().unwrap();
        let session = record_session(dir.path(), 10, Preset::Identity);
        let all: Vec<ControlSample> = session.phases.iter().flat_map(|p| p.trials.iter().flat_map(|t| t.raw_samples())).collect();
        assert_eq!(read_samples(dir.path()).unwrap(), all);
        let plain = dir.path().join("plain.ndjson");
        let mut w = fs::File::create(&plain).unwrap();
        for s in &all[..10] {
            writeln!(w, "{}", serde_json::to_string(s).unwrap()).unwrap();
        }
        drop(w);
        assert_eq!(read_samples(&plain).unwrap(), all[..10].to_vec());
    }
}
