//! Real-time signal pipeline: raw passthrough, remapped, or remapped with
//! tremor-adaptive smoothing, plus drop-out recovery.

use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::bias_profile::{ControlSample, InflectionParams, InflectionTracker};
use crate::config::Config;
use crate::error::TaskError;
use crate::map_compiler::RemapStack;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Condition {
    /// Raw signals pass through unchanged.
    #[serde(rename = "no-adr")]
    Unmapped,
    /// Every sample goes through the compiled map.
    #[serde(rename = "adr")]
    Adr,
    /// Remapped, then blended with its moving average by `α(f)`.
    #[serde(rename = "adr-s")]
    AdrSmoothed,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::Unmapped, Condition::Adr, Condition::AdrSmoothed];

    pub fn needs_stack(self) -> bool {
        self != Condition::Unmapped
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Unmapped => "no-adr",
            Condition::Adr => "adr",
            Condition::AdrSmoothed => "adr-s",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "no-adr" | "none" | "unmapped" | "raw" => Ok(Condition::Unmapped),
            "adr" => Ok(Condition::Adr),
            "adr-s" | "adr_s" | "adrs" | "smoothed" => Ok(Condition::AdrSmoothed),
            other => Err(format!("unknown condition `{other}` (expected no-adr, adr or adr-s)")),
        }
    }
}

/// Smoothing weight for inflection frequency `f`: zero below `f_lower`, one
/// at or above `f_upper`, linear in between.
pub fn alpha_map(f: f64, f_lower: f64, f_upper: f64) -> f64 {
    if f < f_lower {
        0.0
    } else if f >= f_upper {
        1.0
    } else {
        ((f - f_lower) / (f_upper - f_lower)).clamp(0.0, 1.0)
    }
}

/// One pipeline output.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeployedOutput {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// Emitted by drop-out recovery rather than computed from a raw sample.
    pub synthesized: bool,
    pub alpha: f64,
    pub frequency: f64,
    pub bin: Option<usize>,
}

impl DeployedOutput {
    pub fn vector(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

/// Read-only view of the pipeline for telemetry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeploymentSnapshot {
    pub condition: Condition,
    pub frequency: f64,
    pub alpha: f64,
    pub active_bin: Option<usize>,
    pub buffered: usize,
    pub last_t: Option<f64>,
}

/// Single-writer pipeline state. `step` must not be called concurrently.
#[derive(Clone, Debug)]
pub struct DeploymentState {
    condition: Condition,
    stack: Option<Arc<RemapStack>>,
    k: usize,
    f_lower: f64,
    f_upper: f64,
    gap_threshold: f64,
    input_rate: f64,
    buffer: VecDeque<[f64; 3]>,
    tracker: InflectionTracker,
    alpha: f64,
    active_bin: Option<usize>,
    last_t: Option<f64>,
}

impl DeploymentState {
    pub fn new(condition: Condition, config: &Config, stack: Option<Arc<RemapStack>>) -> Result<Self, TaskError> {
        if condition.needs_stack() && stack.is_none() {
            return Err(TaskError::MissingStack(condition.to_string()));
        }
        Ok(Self {
            condition,
            stack,
            k: config.k.max(1),
            f_lower: config.f_lower,
            f_upper: config.f_upper,
            gap_threshold: config.gap_threshold(),
            input_rate: config.input_rate,
            buffer: VecDeque::with_capacity(config.k.max(1)),
            tracker: InflectionTracker::new(InflectionParams::from(config)),
            alpha: 0.0,
            active_bin: None,
            last_t: None,
        })
    }

    pub fn condition(&self) -> Condition {
        self.condition
    }

    pub fn stack(&self) -> Option<&Arc<RemapStack>> {
        self.stack.as_ref()
    }

    /// Switches condition (and optionally the map), clearing the smoothing
    /// buffer so outputs of different maps are never averaged together.
    pub fn set_condition(&mut self, condition: Condition, stack: Option<Arc<RemapStack>>) -> Result<(), TaskError> {
        let stack = stack.or_else(|| self.stack.clone());
        if condition.needs_stack() && stack.is_none() {
            return Err(TaskError::MissingStack(condition.to_string()));
        }
        self.condition = condition;
        self.stack = stack;
        self.buffer.clear();
        self.active_bin = None;
        Ok(())
    }

    /// Forgets all signal history, so the next sample is treated as the first.
    pub fn reset(&mut self) {
        self.buffer.clear();
        self.tracker.clear();
        self.alpha = 0.0;
        self.active_bin = None;
        self.last_t = None;
    }

    pub fn frequency(&self) -> f64 {
        self.tracker.frequency()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn buffer_len(&self) -> usize {
        self.buffer.len()
    }

    pub fn snapshot(&self) -> DeploymentSnapshot {
        DeploymentSnapshot {
            condition: self.condition,
            frequency: self.frequency(),
            alpha: self.alpha,
            active_bin: self.active_bin,
            buffered: self.buffer.len(),
            last_t: self.last_t,
        }
    }

    /// Mean of the buffered remapped outputs.
    pub fn buffer_mean(&self) -> Option<[f64; 3]> {
        if self.buffer.is_empty() {
            return None;
        }
        let n = self.buffer.len() as f64;
        let mut m = [0.0; 3];
        for v in &self.buffer {
            for (a, b) in m.iter_mut().zip(v) {
                *a += b;
            }
        }
        Some(m.map(|a| a / n))
    }

    /// Output a fully released interface settles to.
    pub fn neutral(&self) -> [f64; 3] {
        let z = match (&self.stack, self.condition) {
            (Some(s), c) if c.needs_stack() => s.z_map.neutral(),
            _ => 0.0,
        };
        [0.0, 0.0, z]
    }

    /// Processes one raw sample.
    pub fn step(&mut self, raw: &ControlSample) -> DeployedOutput {
        let raw = raw.clamped();
        let frequency = self.tracker.push(raw);
        self.alpha = alpha_map(frequency, self.f_lower, self.f_upper);

        let (mapped, bin) = match (&self.stack, self.condition) {
            (Some(stack), c) if c.needs_stack() => {
                let bin = stack.select_bin(raw.u_z, self.active_bin);
                self.active_bin = Some(bin);
                (stack.lookup_in_bin(&raw, bin), Some(bin))
            }
            _ => ([raw.u_x, raw.u_y, raw.u_z], None),
        };

        if self.buffer.len() == self.k {
            self.buffer.pop_front();
        }
        self.buffer.push_back(mapped);

        let out = if self.condition == Condition::AdrSmoothed {
            let mean = self.buffer_mean().expect("buffer holds the current sample");
            let a = self.alpha;
            [0, 1, 2].map(|i| (1.0 - a) * mapped[i] + a * mean[i])
        } else {
            mapped
        };
        self.last_t = Some(raw.t);
        let out = out.map(|v| v.clamp(-1.0, 1.0));
        DeployedOutput {
            t: raw.t,
            x: out[0],
            y: out[1],
            z: out[2],
            synthesized: false,
            alpha: self.alpha,
            frequency,
            bin,
        }
    }

    /// Number of missing input frames before a sample at `t`, if the interval
    /// since the previous sample counts as a drop-out.
    pub fn detect_gap(&self, t: f64) -> Option<usize> {
        let last = self.last_t?;
        let dt = t - last;
        if dt > self.gap_threshold {
            let missed = (dt * self.input_rate).round() as usize;
            Some(missed.saturating_sub(1).max(1))
        } else {
            None
        }
    }

    /// Synthesized outputs for `missed` frames after the last sample: the
    /// buffered mean for `k` frames, a linear decay to neutral over another
    /// `k`, then neutral.
    pub fn recover_signal(&self, missed: usize) -> Vec<DeployedOutput> {
        let last_t = self.last_t.unwrap_or(0.0);
        let neutral = self.neutral();
        let mean = self.buffer_mean().unwrap_or(neutral);
        let k = self.k;
        let dt = 1.0 / self.input_rate;
        (1..=missed)
            .map(|i| {
                let w = if i <= k {
                    0.0
                } else {
                    ((i - k) as f64 / k as f64).min(1.0)
                };
                let v = [0, 1, 2].map(|j| {
                    if w >= 1.0 {
                        neutral[j]
                    } else {
                        (1.0 - w) * mean[j] + w * neutral[j]
                    }
                });
                DeployedOutput {
                    t: last_t + i as f64 * dt,
                    x: v[0],
                    y: v[1],
                    z: v[2],
                    synthesized: true,
                    alpha: self.alpha,
                    frequency: self.frequency(),
                    bin: self.active_bin,
                }
            })
            .collect()
    }

    /// Gap recovery followed by the regular step for `raw`.
    pub fn ingest(&mut self, raw: &ControlSample) -> Vec<DeployedOutput> {
        let mut out = match self.detect_gap(raw.t) {
            Some(missed) => self.recover_signal(missed),
            None => Vec::new(),
        };
        out.push(self.step(raw));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bias_profile::equal_width_edges;
    use crate::geometry::{ConvexHull, Point2};
    use crate::map_compiler::compile_from_hulls;
    use proptest::prelude::*;

    fn contraction_stack() -> Arc<RemapStack> {
        let cfg = Config {
            m_x: 80,
            m_y: 80,
            ..Config::default()
        };
        let hulls = vec![ConvexHull::square(Point2::ORIGIN, 0.5); 5];
        let (s, _) = compile_from_hulls(&hulls, &[None; 5], &equal_width_edges(5), [-0.5, 0.5], [0; 32], &cfg).unwrap();
        Arc::new(s)
    }

    fn sample(i: usize, x: f64, y: f64, z: f64) -> ControlSample {
        ControlSample::new(i as f64 / 60.0, x, y, z)
    }

    #[test]
    fn alpha_cases() {
        let a = |f| alpha_map(f, 8.0, 20.0);
        assert_eq!(a(0.0), 0.0);
        assert_eq!(a(7.99), 0.0);
        assert_eq!(a(8.0), 0.0);
        assert_eq!(a(14.0), 0.5);
        assert_eq!(a(20.0), 1.0);
        assert_eq!(a(40.0), 1.0);
    }

    #[test]
    fn alpha_is_monotone_and_continuous() {
        let mut last = 0.0;
        for i in 0..=4000 {
            let v = alpha_map(i as f64 * 0.01, 8.0, 20.0);
            assert!(v >= last && v - last <= 0.01 / 12.0 + 1e-12);
            last = v;
        }
    }

    #[test]
    fn missing_stack_is_rejected() {
        let cfg = Config::default();
        assert!(matches!(
            DeploymentState::new(Condition::Adr, &cfg, None),
            Err(TaskError::MissingStack(_))
        ));
        let mut s = DeploymentState::new(Condition::Unmapped, &cfg, None).unwrap();
        assert!(s.set_condition(Condition::AdrSmoothed, None).is_err());
    }

    #[test]
    fn passthrough_is_clamped_input() {
        let mut s = DeploymentState::new(Condition::Unmapped, &Config::default(), None).unwrap();
        let out = s.step(&ControlSample { t: 0.0, u_x: 1.7, u_y: -0.3, u_z: -2.0 });
        assert_eq!(out.vector(), [1.0, -0.3, -1.0]);
    }

    #[test]
    fn adr_applies_the_stack() {
        let stack = contraction_stack();
        let mut s = DeploymentState::new(Condition::Adr, &Config::default(), Some(stack.clone())).unwrap();
        let raw = sample(0, 0.25, 0.0, 0.0);
        assert_eq!(s.step(&raw).vector(), stack.lookup(&raw));
    }

    #[test]
    fn smoothed_constant_input_equals_remapped() {
        let stack = contraction_stack();
        let mut s = DeploymentState::new(Condition::AdrSmoothed, &Config::default(), Some(stack.clone())).unwrap();
        let raw = sample(0, 0.2, -0.1, 0.1);
        let want = stack.lookup(&raw);
        let mut out = None;
        for i in 0..30 {
            out = Some(s.step(&ControlSample { t: i as f64 / 60.0, ..raw }));
        }
        let out = out.unwrap();
        for (a, b) in out.vector().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    /// Feeds the first `n` samples, then returns the output of one more.
    fn drive(cond: Condition, samples: &[ControlSample]) -> (DeploymentState, DeployedOutput) {
        let mut s = DeploymentState::new(cond, &Config::default(), Some(contraction_stack())).unwrap();
        let mut out = None;
        for x in samples {
            out = Some(s.step(x));
        }
        (s, out.unwrap())
    }

    #[test]
    fn low_frequency_uses_current_output() {
        // A slow corner: a single inflection in the window, 2 Hz.
        let samples: Vec<_> = (0..40)
            .map(|i| if i < 30 { sample(i, 0.3, 0.0, 0.0) } else { sample(i, 0.0, 0.3, 0.0) })
            .collect();
        let (s, out) = drive(Condition::AdrSmoothed, &samples);
        assert!(s.frequency() < 8.0);
        assert_eq!(out.alpha, 0.0);
        let direct = contraction_stack().lookup(samples.last().unwrap());
        assert_eq!(out.vector(), direct);
    }

    #[test]
    fn high_frequency_uses_buffer_mean() {
        // Direction flips every sample: far above 20 Hz.
        let samples: Vec<_> = (0..60)
            .map(|i| {
                let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                ControlSample::new(i as f64 / 40.0, 0.3 * sign, 0.1 * sign, 0.0)
            })
            .collect();
        let (s, out) = drive(Condition::AdrSmoothed, &samples);
        assert!(s.frequency() >= 20.0);
        assert_eq!(out.alpha, 1.0);
        let mean = s.buffer_mean().unwrap();
        for (a, b) in out.vector().iter().zip(mean) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn condition_switch_clears_buffer() {
        let mut s = DeploymentState::new(Condition::Adr, &Config::default(), Some(contraction_stack())).unwrap();
        for i in 0..10 {
            s.step(&sample(i, 0.1, 0.1, 0.0));
        }
        assert_eq!(s.buffer_len(), 10);
        s.set_condition(Condition::AdrSmoothed, None).unwrap();
        assert_eq!(s.buffer_len(), 0);
        assert_eq!(s.condition(), Condition::AdrSmoothed);
    }

    #[test]
    fn buffer_never_exceeds_k() {
        let mut s = DeploymentState::new(Condition::Unmapped, &Config::default(), None).unwrap();
        for i in 0..100 {
            s.step(&sample(i, 0.1, 0.0, 0.0));
            assert!(s.buffer_len() <= 20);
        }
    }

    #[test]
    fn short_gap_repeats_the_mean() {
        let mut s = DeploymentState::new(Condition::Unmapped, &Config::default(), None).unwrap();
        for i in 0..30 {
            s.step(&sample(i, 0.6, -0.2, 0.1));
        }
        let mean = s.buffer_mean().unwrap();
        let out = s.ingest(&sample(35, 0.6, -0.2, 0.1));
        assert_eq!(out.len(), 5 + 1);
        for o in &out[..5] {
            assert!(o.synthesized);
            for (a, b) in o.vector().iter().zip(mean) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        assert!(!out[5].synthesized);
    }

    #[test]
    fn long_gap_decays_to_neutral() {
        let stack = contraction_stack();
        let mut s = DeploymentState::new(Condition::Adr, &Config::default(), Some(stack)).unwrap();
        for i in 0..30 {
            s.step(&sample(i, 0.4, 0.4, 0.3));
        }
        let k = 20;
        let synth = s.recover_signal(3 * k);
        assert_eq!(synth.len(), 3 * k);
        let mean = s.buffer_mean().unwrap();
        assert_eq!(synth[k - 1].vector(), mean);
        let half = synth[k + k / 2 - 1].vector();
        for j in 0..3 {
            assert!((half[j] - 0.5 * (mean[j] + s.neutral()[j])).abs() < 1e-12);
        }
        for o in &synth[2 * k - 1..] {
            assert_eq!(o.vector(), s.neutral());
        }
        assert!(synth[2 * k - 2].vector() != s.neutral());
    }

    #[test]
    fn no_gap_no_synthesis() {
        let mut s = DeploymentState::new(Condition::Unmapped, &Config::default(), None).unwrap();
        for i in 0..100 {
            let out = s.ingest(&sample(i, 0.1, 0.0, 0.0));
            assert_eq!(out.len(), 1);
            assert!(!out[0].synthesized);
        }
        assert_eq!(s.detect_gap(99.0 / 60.0 + 2.9 / 60.0), None);
        assert_eq!(s.detect_gap(99.0 / 60.0 + 4.0 / 60.0), Some(3));
    }

    fn smooth_config() -> Config {
        Config {
            f_lower: 0.0,
            f_upper: 0.0,
            ..Config::default()
        }
    }

    proptest! {
        #[test]
        fn smoothed_output_lies_between_current_and_mean(v in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0), 5..80)) {
            let mut s = DeploymentState::new(Condition::AdrSmoothed, &Config::default(), Some(contraction_stack())).unwrap();
            for (i, (x, y, z)) in v.iter().enumerate() {
                let raw = sample(i, *x, *y, *z);
                let out = s.step(&raw);
                let mapped = *s.buffer.back().unwrap();
                let mean = s.buffer_mean().unwrap();
                for j in 0..3 {
                    let (lo, hi) = (mapped[j].min(mean[j]), mapped[j].max(mean[j]));
                    prop_assert!(out.vector()[j] >= lo - 1e-12 && out.vector()[j] <= hi + 1e-12);
                }
            }
        }

        #[test]
        fn full_smoothing_never_amplifies_steps(v in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 25..80)) {
            let cfg = smooth_config();
            let mut s = DeploymentState::new(Condition::AdrSmoothed, &cfg, Some(contraction_stack())).unwrap();
            let mut outs = Vec::new();
            let mut mapped = Vec::new();
            for (i, (x, y)) in v.iter().enumerate() {
                let o = s.step(&sample(i, *x, *y, 0.0));
                prop_assert_eq!(o.alpha, 1.0);
                outs.push(o.vector());
                mapped.push(*s.buffer.back().unwrap());
            }
            let k = cfg.k;
            for t in k..outs.len() {
                let max_step = (t + 1 - k..=t)
                    .map(|i| (0..3).map(|j| (mapped[i][j] - mapped[i - 1][j]).abs()).fold(0.0, f64::max))
                    .fold(0.0, f64::max);
                for j in 0..3 {
                    prop_assert!((outs[t][j] - outs[t - 1][j]).abs() <= max_step + 1e-12);
                }
            }
        }
    }
}
