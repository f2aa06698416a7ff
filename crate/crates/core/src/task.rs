//! The 3D center-out reaching bench: a target lattice, trial completion
//! logic, synthetic users and the phased protocol.
//!
//! The deployed `(x, y)` commands the dot's velocity and the deployed `z`
//! sets the dot's size directly. [`ProtocolMachine`] advances one raw sample
//! at a time so headless runs and the live service share the same engine.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io;
use std::str::FromStr;
use std::sync::Arc;

use crate::bias_profile::{build_profile, BiasProfile, ControlSample};
use crate::config::Config;
use crate::deployment::{Condition, DeployedOutput, DeploymentSnapshot, DeploymentState};
use crate::error::TaskError;
use crate::map_compiler::{compile_stack, CompileReport, RemapStack};

/// Per-axis lattice coordinates shared by position and size.
pub const LATTICE_LEVELS: [f64; 5] = [-0.8, -0.4, 0.0, 0.4, 0.8];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub id: usize,
    /// Position in the round's presentation sequence.
    pub order: usize,
    pub x: f64,
    pub y: f64,
    /// Size level.
    pub z: f64,
}

/// The 125 lattice targets in id order: `id = 25·iz + 5·iy + ix`.
pub fn target_lattice() -> Vec<Target> {
    let mut out = Vec::with_capacity(125);
    for &z in &LATTICE_LEVELS {
        for &y in &LATTICE_LEVELS {
            for &x in &LATTICE_LEVELS {
                let id = out.len();
                out.push(Target { id, order: id, x, y, z });
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DotState {
    pub x: f64,
    pub y: f64,
    pub size: f64,
}

impl DotState {
    pub fn within(&self, target: &Target, position_tolerance: f64, size_tolerance: f64) -> bool {
        let d = ((self.x - target.x).powi(2) + (self.y - target.y).powi(2)).sqrt();
        d <= position_tolerance && (self.size - target.z).abs() <= size_tolerance
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    Completed,
    TimedOut,
    /// The input stream ended before the trial resolved.
    Aborted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "training")]
    Training,
    #[serde(rename = "no-adr")]
    Unmapped,
    #[serde(rename = "adr")]
    Adr,
    #[serde(rename = "adr-s")]
    AdrSmoothed,
}

impl Phase {
    pub fn condition(self) -> Condition {
        match self {
            Phase::Training | Phase::Unmapped => Condition::Unmapped,
            Phase::Adr => Condition::Adr,
            Phase::AdrSmoothed => Condition::AdrSmoothed,
        }
    }

    pub fn for_condition(c: Condition) -> Self {
        match c {
            Condition::Unmapped => Phase::Unmapped,
            Condition::Adr => Phase::Adr,
            Condition::AdrSmoothed => Phase::AdrSmoothed,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Training => "training",
            Phase::Unmapped => "no-adr",
            Phase::Adr => "adr",
            Phase::AdrSmoothed => "adr-s",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "training" => Ok(Phase::Training),
            other => other.parse::<Condition>().map(Phase::for_condition),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    /// The raw sample whose arrival produced this output.
    pub raw: ControlSample,
    pub output: DeployedOutput,
    pub dot: DotState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub phase: Phase,
    pub condition: Condition,
    pub target: Target,
    pub trajectory: Vec<TrajectoryPoint>,
    pub outcome: Outcome,
    /// Seconds from trial start to the first in-tolerance frame.
    pub time_to_first_reach: Option<f64>,
    pub path_length: f64,
    pub hold_satisfied: bool,
    pub start_t: f64,
    pub duration: f64,
}

impl TrialRecord {
    pub fn completed(&self) -> bool {
        self.outcome == Outcome::Completed
    }

    /// Distinct raw samples of the trial, in arrival order.
    pub fn raw_samples(&self) -> Vec<ControlSample> {
        let mut out: Vec<ControlSample> = Vec::new();
        for p in &self.trajectory {
            if !p.output.synthesized {
                out.push(p.raw);
            }
        }
        out
    }

    pub fn straight_line_distance(&self) -> f64 {
        (self.target.x.powi(2) + self.target.y.powi(2)).sqrt()
    }
}

/// What an operator perceives before producing its next sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskView {
    pub target: Target,
    pub dot: DotState,
    pub elapsed: f64,
}

/// Completion logic and dot kinematics for one trial.
///
/// The runner only ever sees deployed outputs; the condition label is
/// carried into the record and has no effect on behavior.
#[derive(Clone, Debug)]
pub struct TrialRunner {
    phase: Phase,
    condition: Condition,
    target: Target,
    hold: f64,
    position_tolerance: f64,
    size_tolerance: f64,
    timeout: f64,
    gain: f64,
    frame_dt: f64,
    dot: DotState,
    start_t: Option<f64>,
    last_t: f64,
    inside_since: Option<f64>,
    first_reach: Option<f64>,
    path_length: f64,
    trajectory: Vec<TrajectoryPoint>,
    outcome: Option<Outcome>,
}

const TIME_SLACK: f64 = 1e-9;

impl TrialRunner {
    pub fn new(phase: Phase, condition: Condition, target: Target, config: &Config) -> Self {
        Self {
            phase,
            condition,
            target,
            hold: config.hold_seconds,
            position_tolerance: config.position_tolerance,
            size_tolerance: config.size_tolerance,
            timeout: config.trial_timeout,
            gain: config.velocity_gain,
            frame_dt: config.frame_dt(),
            dot: DotState::default(),
            start_t: None,
            last_t: 0.0,
            inside_since: None,
            first_reach: None,
            path_length: 0.0,
            trajectory: Vec::new(),
            outcome: None,
        }
    }

    pub fn target(&self) -> &Target {
        &self.target
    }

    pub fn dot(&self) -> DotState {
        self.dot
    }

    pub fn outcome(&self) -> Option<Outcome> {
        self.outcome
    }

    pub fn elapsed(&self) -> f64 {
        self.start_t.map_or(0.0, |s| self.last_t - s)
    }

    /// Fraction of the hold already satisfied.
    pub fn hold_progress(&self) -> f64 {
        match self.inside_since {
            Some(since) => ((self.last_t - since) / self.hold).clamp(0.0, 1.0),
            None => 0.0,
        }
    }

    pub fn view(&self) -> TaskView {
        TaskView {
            target: self.target,
            dot: self.dot,
            elapsed: self.elapsed(),
        }
    }

    /// Integrates the outputs produced by one raw sample.
    pub fn advance(&mut self, raw: &ControlSample, outputs: &[DeployedOutput]) -> Option<Outcome> {
        for out in outputs {
            if self.outcome.is_some() {
                break;
            }
            let start = *self.start_t.get_or_insert_with(|| {
                self.last_t = out.t - self.frame_dt;
                self.last_t
            });
            let dt = (out.t - self.last_t).max(0.0);
            self.last_t = out.t;
            let prev = self.dot;
            self.dot.x = (prev.x + self.gain * out.x * dt).clamp(-1.0, 1.0);
            self.dot.y = (prev.y + self.gain * out.y * dt).clamp(-1.0, 1.0);
            self.dot.size = out.z.clamp(-1.0, 1.0);
            self.path_length += ((self.dot.x - prev.x).powi(2) + (self.dot.y - prev.y).powi(2)).sqrt();
            self.trajectory.push(TrajectoryPoint {
                raw: *raw,
                output: *out,
                dot: self.dot,
            });

            let elapsed = out.t - start;
            if self.dot.within(&self.target, self.position_tolerance, self.size_tolerance) {
                self.first_reach.get_or_insert(elapsed);
                let since = *self.inside_since.get_or_insert(out.t);
                if out.t - since >= self.hold - TIME_SLACK {
                    self.outcome = Some(Outcome::Completed);
                }
            } else {
                self.inside_since = None;
            }
            if self.outcome.is_none() && elapsed >= self.timeout - TIME_SLACK {
                self.outcome = Some(Outcome::TimedOut);
            }
        }
        self.outcome
    }

    pub fn finish(self) -> TrialRecord {
        let outcome = self.outcome.unwrap_or(Outcome::Aborted);
        let start_t = self.start_t.unwrap_or(0.0);
        TrialRecord {
            phase: self.phase,
            condition: self.condition,
            target: self.target,
            outcome,
            time_to_first_reach: self.first_reach,
            path_length: self.path_length,
            hold_satisfied: outcome == Outcome::Completed,
            start_t,
            duration: self.last_t - start_t,
            trajectory: self.trajectory,
        }
    }
}

/// Source of raw interface samples.
pub trait Operator {
    fn begin_trial(&mut self, _target: &Target) {}

    /// The next raw sample, or `None` when the source is exhausted.
    fn next_sample(&mut self, view: &TaskView) -> Option<ControlSample>;
}

/// Affine bias, tremor and control policy of a synthetic user.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UserSpec {
    pub name: String,
    pub scale: [f64; 3],
    pub offset: [f64; 3],
    pub tremor_amplitude: [f64; 3],
    pub tremor_hz: f64,
    /// Proportional gain from planar target error to intent.
    pub kp: f64,
    /// Integral gain from size error to twist intent.
    pub ki_z: f64,
    /// Stationary deviation of the reaction noise added to intent.
    pub noise_sigma: f64,
    pub noise_tau: f64,
}

impl Default for UserSpec {
    fn default() -> Self {
        Self {
            name: "custom".into(),
            scale: [1.0; 3],
            offset: [0.0; 3],
            tremor_amplitude: [0.0; 3],
            tremor_hz: 0.0,
            kp: 4.0,
            ki_z: 5.0,
            noise_sigma: 0.01,
            noise_tau: 0.2,
        }
    }
}

impl UserSpec {
    /// Interface reading for a given intent, tremor included.
    pub fn bias(&self, intent: [f64; 3], t: f64) -> [f64; 3] {
        let phase = (2.0 * std::f64::consts::PI * self.tremor_hz * t).sin();
        [0, 1, 2].map(|i| {
            (self.scale[i] * intent[i].clamp(-1.0, 1.0) + self.offset[i] + self.tremor_amplitude[i] * phase)
                .clamp(-1.0, 1.0)
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Identity,
    Contraction,
    Offset,
    TwistAsymmetric,
    #[serde(rename = "tremor-8hz")]
    Tremor,
    Combined,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::Identity,
        Preset::Contraction,
        Preset::Offset,
        Preset::TwistAsymmetric,
        Preset::Tremor,
        Preset::Combined,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Identity => "identity",
            Preset::Contraction => "contraction",
            Preset::Offset => "offset",
            Preset::TwistAsymmetric => "twist-asymmetric",
            Preset::Tremor => "tremor-8hz",
            Preset::Combined => "combined",
        }
    }

    pub fn spec(self) -> UserSpec {
        let base = UserSpec {
            name: self.as_str().into(),
            ..UserSpec::default()
        };
        match self {
            Preset::Identity => base,
            Preset::Contraction => UserSpec {
                scale: [0.5; 3],
                ..base
            },
            Preset::Offset => UserSpec {
                scale: [0.4, 0.4, 1.0],
                offset: [0.3, 0.1, 0.0],
                ..base
            },
            Preset::TwistAsymmetric => UserSpec {
                scale: [1.0, 1.0, 0.6],
                offset: [0.0, 0.0, 0.3],
                ..base
            },
            Preset::Tremor => UserSpec {
                tremor_amplitude: [0.15, 0.15, 0.05],
                tremor_hz: 8.0,
                ..base
            },
            Preset::Combined => UserSpec {
                scale: [0.6, 0.5, 0.6],
                offset: [0.15, -0.1, 0.1],
                tremor_amplitude: [0.08, 0.08, 0.03],
                tremor_hz: 6.0,
                ..base
            },
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Preset::ALL
            .into_iter()
            .find(|p| p.as_str().eq_ignore_ascii_case(s) || (s.eq_ignore_ascii_case("tremor") && *p == Preset::Tremor))
            .ok_or_else(|| {
                let names: Vec<_> = Preset::ALL.iter().map(|p| p.as_str()).collect();
                format!("unknown preset `{s}` (expected one of {})", names.join(", "))
            })
    }
}

/// Closed-loop synthetic user: a proportional planar policy, an integrating
/// twist policy, Ornstein-Uhlenbeck reaction noise and the bias from its `UserSpec`.
#[derive(Clone, Debug)]
pub struct SyntheticUser {
    spec: UserSpec,
    rng: ChaCha8Rng,
    noise: [f64; 3],
    c_z: f64,
    frame: u64,
    rate: f64,
}

impl SyntheticUser {
    pub fn new(spec: UserSpec, seed: u64, input_rate: f64) -> Self {
        Self {
            spec,
            rng: ChaCha8Rng::seed_from_u64(seed),
            noise: [0.0; 3],
            c_z: 0.0,
            frame: 0,
            rate: input_rate,
        }
    }

    pub fn preset(preset: Preset, seed: u64, input_rate: f64) -> Self {
        Self::new(preset.spec(), seed, input_rate)
    }

    pub fn spec(&self) -> &UserSpec {
        &self.spec
    }

    /// Session time of the most recent sample.
    pub fn time(&self) -> f64 {
        self.frame as f64 / self.rate
    }

    fn step_noise(&mut self, dt: f64) {
        let (sigma, tau) = (self.spec.noise_sigma, self.spec.noise_tau);
        if sigma <= 0.0 {
            return;
        }
        let decay = (-dt / tau).exp();
        let spread = sigma * (1.0 - decay * decay).sqrt();
        for n in &mut self.noise {
            let z: f64 = self.rng.sample(StandardNormal);
            *n = *n * decay + spread * z;
        }
    }

    /// Open-loop exploration for calibration: `loops` slow circles pushed
    /// past the cube edge while the twist intent ramps from -1 to 1. Tremor
    /// applies; reaction noise does not.
    pub fn calibration_sweep(&self, loops: usize, samples_per_loop: usize) -> Vec<ControlSample> {
        let total = loops * samples_per_loop;
        (0..total)
            .map(|i| {
                let theta = 2.0 * std::f64::consts::PI * i as f64 / samples_per_loop as f64;
                let z = if total > 1 {
                    -1.0 + 2.0 * i as f64 / (total - 1) as f64
                } else {
                    0.0
                };
                let intent = [1.5 * theta.cos(), 1.5 * theta.sin(), z];
                let t = (i + 1) as f64 / self.rate;
                let u = self.spec.bias(intent, t);
                ControlSample::new(t, u[0], u[1], u[2])
            })
            .collect()
    }
}

impl Operator for SyntheticUser {
    fn begin_trial(&mut self, _target: &Target) {
        self.c_z = 0.0;
    }

    fn next_sample(&mut self, view: &TaskView) -> Option<ControlSample> {
        let dt = 1.0 / self.rate;
        self.frame += 1;
        let t = self.time();
        self.step_noise(dt);

        let kp = self.spec.kp;
        let ex = view.target.x - view.dot.x;
        let ey = view.target.y - view.dot.y;
        self.c_z = (self.c_z + self.spec.ki_z * (view.target.z - view.dot.size) * dt).clamp(-1.0, 1.0);

        let intent = [
            ((kp * ex).clamp(-1.0, 1.0) + self.noise[0]).clamp(-1.0, 1.0),
            ((kp * ey).clamp(-1.0, 1.0) + self.noise[1]).clamp(-1.0, 1.0),
            (self.c_z + self.noise[2]).clamp(-1.0, 1.0),
        ];
        let u = self.spec.bias(intent, t);
        Some(ControlSample::new(t, u[0], u[1], u[2]))
    }
}

/// Open-loop playback of a recorded raw stream.
#[derive(Clone, Debug)]
pub struct RecordedStream {
    samples: Vec<ControlSample>,
    next: usize,
}

impl RecordedStream {
    pub fn new(samples: Vec<ControlSample>) -> Self {
        Self { samples, next: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.samples.len() - self.next
    }
}

impl Operator for RecordedStream {
    fn next_sample(&mut self, _view: &TaskView) -> Option<ControlSample> {
        let s = self.samples.get(self.next).copied()?;
        self.next += 1;
        Some(s)
    }
}

/// Receives session events as they happen. Every hook defaults to a no-op.
pub trait SessionSink {
    fn phase_start(&mut self, _phase: Phase, _targets: &[Target]) -> io::Result<()> {
        Ok(())
    }
    fn trial_start(&mut self, _phase: Phase, _target: &Target) -> io::Result<()> {
        Ok(())
    }
    fn sample(&mut self, _raw: &ControlSample, _outputs: &[DeployedOutput], _dot: &DotState) -> io::Result<()> {
        Ok(())
    }
    fn trial_end(&mut self, _record: &TrialRecord) -> io::Result<()> {
        Ok(())
    }
    fn break_marker(&mut self, _phase: Phase, _after_trials: usize) -> io::Result<()> {
        Ok(())
    }
    fn calibrated(&mut self, _profile: &BiasProfile, _stack: &RemapStack, _report: &CompileReport) -> io::Result<()> {
        Ok(())
    }
}

impl SessionSink for () {}

/// Phases and target sequences of one session, fixed by its seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolPlan {
    pub seed: u64,
    pub phases: Vec<Phase>,
    pub training: Vec<Target>,
    /// Shared by every task round.
    pub task: Vec<Target>,
}

impl ProtocolPlan {
    pub fn new(seed: u64, config: &Config) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lattice = target_lattice();
        let n_train = config.training_targets.min(lattice.len());
        let mut training: Vec<Target> = rand::seq::index::sample(&mut rng, lattice.len(), n_train)
            .into_iter()
            .map(|i| lattice[i])
            .collect();
        for (i, t) in training.iter_mut().enumerate() {
            t.order = i;
        }
        let mut task = lattice;
        task.shuffle(&mut rng);
        for (i, t) in task.iter_mut().enumerate() {
            t.order = i;
        }
        let mapped = if rng.random_bool(0.5) {
            [Phase::Adr, Phase::AdrSmoothed]
        } else {
            [Phase::AdrSmoothed, Phase::Adr]
        };
        let mut phases = Vec::with_capacity(4);
        if n_train > 0 {
            phases.push(Phase::Training);
        }
        phases.push(Phase::Unmapped);
        phases.extend(mapped);
        Self {
            seed,
            phases,
            training,
            task,
        }
    }

    pub fn targets(&self, phase: Phase) -> &[Target] {
        match phase {
            Phase::Training => &self.training,
            _ => &self.task,
        }
    }

    pub fn total_trials(&self) -> usize {
        self.phases.iter().map(|p| self.targets(*p).len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: Phase,
    pub trials: Vec<TrialRecord>,
    /// Trial counts after which a break was offered.
    pub breaks: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Session {
    pub seed: u64,
    pub config: Config,
    pub plan: ProtocolPlan,
    pub phases: Vec<PhaseRecord>,
    pub profile: Option<BiasProfile>,
    pub stack: Option<Arc<RemapStack>>,
    pub compile_report: Option<CompileReport>,
    /// Raw samples of the unmapped round, exactly as handed to calibration.
    pub calibration_stream: Vec<ControlSample>,
}

impl Session {
    pub fn phase(&self, phase: Phase) -> Option<&PhaseRecord> {
        self.phases.iter().find(|p| p.phase == phase)
    }

    pub fn trial_count(&self) -> usize {
        self.phases.iter().map(|p| p.trials.len()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MachineState {
    /// Waiting for the next phase to be started.
    AwaitingPhase,
    Running,
    /// Paused at a trial boundary until resumed.
    Break,
    /// The unmapped round is over; a map must be installed before continuing.
    Calibrating,
    Finished,
}

impl fmt::Display for MachineState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MachineState::AwaitingPhase => "awaiting a phase start",
            MachineState::Running => "running a trial",
            MachineState::Break => "on a break",
            MachineState::Calibrating => "calibrating",
            MachineState::Finished => "finished",
        })
    }
}

/// Result of feeding one raw sample.
#[derive(Clone, Debug, Default)]
pub struct StepResult {
    pub outputs: Vec<DeployedOutput>,
    pub finished: Option<TrialRecord>,
    /// Set when the next trial of the same phase started immediately.
    pub started: Option<Target>,
}

/// Step-wise protocol engine: training, unmapped round, calibration and the
/// two mapped rounds.
#[derive(Debug)]
pub struct ProtocolMachine {
    config: Config,
    plan: ProtocolPlan,
    phase_index: usize,
    state: MachineState,
    deployment: Option<DeploymentState>,
    runner: Option<TrialRunner>,
    trial_index: usize,
    current: Option<PhaseRecord>,
    phases: Vec<PhaseRecord>,
    calibration: Vec<ControlSample>,
    profile: Option<BiasProfile>,
    stack: Option<Arc<RemapStack>>,
    compile_report: Option<CompileReport>,
    break_requested: bool,
}

impl ProtocolMachine {
    pub fn new(config: Config, seed: u64) -> Self {
        let plan = ProtocolPlan::new(seed, &config);
        Self::with_plan(config, plan)
    }

    pub fn with_plan(config: Config, plan: ProtocolPlan) -> Self {
        Self {
            config,
            plan,
            phase_index: 0,
            state: MachineState::AwaitingPhase,
            deployment: None,
            runner: None,
            trial_index: 0,
            current: None,
            phases: Vec::new(),
            calibration: Vec::new(),
            profile: None,
            stack: None,
            compile_report: None,
            break_requested: false,
        }
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn plan(&self) -> &ProtocolPlan {
        &self.plan
    }

    pub fn state(&self) -> MachineState {
        self.state
    }

    /// The running phase, or the next one when between phases.
    pub fn phase(&self) -> Option<Phase> {
        self.plan.phases.get(self.phase_index).copied()
    }

    pub fn trial_index(&self) -> usize {
        self.trial_index
    }

    pub fn runner(&self) -> Option<&TrialRunner> {
        self.runner.as_ref()
    }

    pub fn deployment(&self) -> Option<DeploymentSnapshot> {
        self.deployment.as_ref().map(DeploymentState::snapshot)
    }

    pub fn view(&self) -> Option<TaskView> {
        self.runner.as_ref().map(TrialRunner::view)
    }

    pub fn completed_phases(&self) -> &[PhaseRecord] {
        &self.phases
    }

    /// Trials finished so far in the running phase.
    pub fn current_phase(&self) -> Option<&PhaseRecord> {
        self.current.as_ref()
    }

    pub fn profile(&self) -> Option<&BiasProfile> {
        self.profile.as_ref()
    }

    pub fn stack(&self) -> Option<&Arc<RemapStack>> {
        self.stack.as_ref()
    }

    /// Raw samples of the unmapped round collected so far.
    pub fn calibration_stream(&self) -> &[ControlSample] {
        &self.calibration
    }

    fn expect(&self, state: MachineState, action: &str) -> Result<(), TaskError> {
        if self.state == state {
            Ok(())
        } else {
            Err(TaskError::OutOfPhase {
                action: action.into(),
                state: self.state.to_string(),
            })
        }
    }

    pub fn start_phase(&mut self, sink: &mut dyn SessionSink) -> Result<Target, TaskError> {
        self.expect(MachineState::AwaitingPhase, "start a phase")?;
        let phase = self.plan.phases[self.phase_index];
        let condition = phase.condition();
        let stack = if condition.needs_stack() { self.stack.clone() } else { None };
        self.deployment = Some(DeploymentState::new(condition, &self.config, stack)?);
        self.trial_index = 0;
        self.current = Some(PhaseRecord {
            phase,
            trials: Vec::new(),
            breaks: Vec::new(),
        });
        sink.phase_start(phase, self.plan.targets(phase))?;
        self.start_trial(sink)
    }

    fn start_trial(&mut self, sink: &mut dyn SessionSink) -> Result<Target, TaskError> {
        let phase = self.plan.phases[self.phase_index];
        let target = self.plan.targets(phase)[self.trial_index];
        self.runner = Some(TrialRunner::new(phase, phase.condition(), target, &self.config));
        sink.trial_start(phase, &target)?;
        self.state = MachineState::Running;
        Ok(target)
    }

    pub fn push_sample(&mut self, raw: &ControlSample, sink: &mut dyn SessionSink) -> Result<StepResult, TaskError> {
        self.expect(MachineState::Running, "accept input")?;
        let phase = self.plan.phases[self.phase_index];
        let deployment = self.deployment.as_mut().expect("running phase has a pipeline");
        let runner = self.runner.as_mut().expect("running phase has a trial");
        let outputs = deployment.ingest(raw);
        let outcome = runner.advance(raw, &outputs);
        sink.sample(raw, &outputs, &runner.dot())?;
        if phase == Phase::Unmapped {
            self.calibration.push(*raw);
        }
        let mut result = StepResult {
            outputs,
            ..Default::default()
        };
        if outcome.is_none() {
            return Ok(result);
        }

        let record = self.runner.take().expect("trial present").finish();
        sink.trial_end(&record)?;
        let current = self.current.as_mut().expect("phase record present");
        current.trials.push(record.clone());
        result.finished = Some(record);
        self.trial_index += 1;

        let total = self.plan.targets(phase).len();
        if self.trial_index == total {
            self.finish_phase();
        } else if self.break_requested
            || (self.config.break_every > 0 && self.trial_index % self.config.break_every == 0)
        {
            self.break_requested = false;
            current.breaks.push(self.trial_index);
            sink.break_marker(phase, self.trial_index)?;
            self.state = MachineState::Break;
        } else {
            result.started = Some(self.start_trial(sink)?);
        }
        Ok(result)
    }

    fn finish_phase(&mut self) {
        let record = self.current.take().expect("phase record present");
        let phase = record.phase;
        self.phases.push(record);
        self.deployment = None;
        self.runner = None;
        if phase == Phase::Unmapped {
            self.state = MachineState::Calibrating;
        } else {
            self.advance_phase();
        }
    }

    fn advance_phase(&mut self) {
        self.phase_index += 1;
        self.state = if self.phase_index == self.plan.phases.len() {
            MachineState::Finished
        } else {
            MachineState::AwaitingPhase
        };
    }

    /// Asks for a break at the next trial boundary.
    pub fn request_break(&mut self) -> Result<(), TaskError> {
        self.expect(MachineState::Running, "request a break")?;
        self.break_requested = true;
        Ok(())
    }

    /// Ends a break. Signal history is discarded so the pause is not
    /// mistaken for a drop-out.
    pub fn resume(&mut self, sink: &mut dyn SessionSink) -> Result<Target, TaskError> {
        self.expect(MachineState::Break, "resume")?;
        if let Some(d) = self.deployment.as_mut() {
            d.reset();
        }
        self.start_trial(sink)
    }

    /// Moves `condition`'s round to the front of the remaining mapped rounds.
    pub fn set_next_condition(&mut self, condition: Condition) -> Result<(), TaskError> {
        self.expect(MachineState::AwaitingPhase, "set the condition")?;
        let wanted = Phase::for_condition(condition);
        let next = self.plan.phases[self.phase_index];
        let remaining = &mut self.plan.phases[self.phase_index..];
        let pos = remaining.iter().position(|p| *p == wanted);
        match pos {
            Some(i) if next.condition().needs_stack() && condition.needs_stack() => {
                remaining.swap(0, i);
                Ok(())
            }
            Some(0) => Ok(()),
            _ => Err(TaskError::OutOfPhase {
                action: format!("switch to {condition}"),
                state: format!("the next phase is {next}"),
            }),
        }
    }

    /// Builds the profile and stack from the unmapped round in place.
    pub fn calibrate(&mut self, sink: &mut dyn SessionSink) -> Result<(), TaskError> {
        self.expect(MachineState::Calibrating, "calibrate")?;
        let profile = build_profile(&self.calibration, &self.config)?;
        let (stack, report) = compile_stack(&profile, &self.config)?;
        self.install_calibration(profile, Arc::new(stack), report, sink)
    }

    /// Installs a profile and stack computed elsewhere.
    pub fn install_calibration(
        &mut self,
        profile: BiasProfile,
        stack: Arc<RemapStack>,
        report: CompileReport,
        sink: &mut dyn SessionSink,
    ) -> Result<(), TaskError> {
        self.expect(MachineState::Calibrating, "install a map")?;
        sink.calibrated(&profile, &stack, &report)?;
        self.profile = Some(profile);
        self.stack = Some(stack);
        self.compile_report = Some(report);
        self.advance_phase();
        Ok(())
    }

    pub fn into_session(self) -> Session {
        Session {
            seed: self.plan.seed,
            config: self.config,
            plan: self.plan,
            phases: self.phases,
            profile: self.profile,
            stack: self.stack,
            compile_report: self.compile_report,
            calibration_stream: self.calibration,
        }
    }
}

/// Runs the full protocol headless, taking every break immediately.
pub fn run_protocol(
    operator: &mut dyn Operator,
    config: &Config,
    seed: u64,
    sink: &mut dyn SessionSink,
) -> Result<Session, TaskError> {
    drive(ProtocolMachine::new(config.clone(), seed), operator, sink)
}

/// Drives `machine` to completion with `operator`.
pub fn drive(
    mut machine: ProtocolMachine,
    operator: &mut dyn Operator,
    sink: &mut dyn SessionSink,
) -> Result<Session, TaskError> {
    loop {
        match machine.state() {
            MachineState::AwaitingPhase => {
                let t = machine.start_phase(sink)?;
                operator.begin_trial(&t);
            }
            MachineState::Break => {
                let t = machine.resume(sink)?;
                operator.begin_trial(&t);
            }
            MachineState::Calibrating => machine.calibrate(sink)?,
            MachineState::Running => {
                let view = machine.view().expect("running trial");
                let sample = operator
                    .next_sample(&view)
                    .ok_or_else(|| TaskError::StreamEnded(machine.phase().map_or("session".into(), |p| p.to_string())))?;
                let step = machine.push_sample(&sample, sink)?;
                if let Some(t) = step.started {
                    operator.begin_trial(&t);
                }
            }
            MachineState::Finished => return Ok(machine.into_session()),
        }
    }
}

/// Runs one isolated trial on a fresh pipeline.
pub fn run_trial(
    operator: &mut dyn Operator,
    target: Target,
    condition: Condition,
    stack: Option<Arc<RemapStack>>,
    config: &Config,
) -> Result<TrialRecord, TaskError> {
    let mut deployment = DeploymentState::new(condition, config, stack)?;
    let mut runner = TrialRunner::new(Phase::for_condition(condition), condition, target, config);
    operator.begin_trial(&target);
    while runner.outcome().is_none() {
        let Some(sample) = operator.next_sample(&runner.view()) else {
            break;
        };
        let outputs = deployment.ingest(&sample);
        runner.advance(&sample, &outputs);
    }
    Ok(runner.finish())
}
