//! Runtime parameters shared by calibration, compilation, deployment and the
//! task bench. Every field has a default; config files may set any subset.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ZBinning {
    /// `m_z` equal-width bins over `[-1, 1]`.
    EqualWidth,
    /// Bin edges at quantiles of the retained twist samples.
    Quantile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    /// Below this inflection frequency (Hz) no smoothing is blended in.
    pub f_lower: f64,
    /// At or above this inflection frequency (Hz) the output is fully smoothed.
    pub f_upper: f64,
    /// Analysis rate (Hz) of the inflection window.
    pub f_rate: f64,
    /// Window length in samples, shared by the inflection counter and the
    /// moving average.
    pub k: usize,
    /// Samples whose rolling inflection frequency exceeds this are omitted.
    pub omission_f_threshold: f64,
    /// Minimum trajectory displacement per sample for a direction to count.
    pub min_displacement: f64,
    /// Angle (degrees) at which a trace is clipped and counted as an inflection.
    pub inflection_angle_deg: f64,
    /// Ray-marching step.
    pub eta: f64,
    pub m_x: usize,
    pub m_y: usize,
    pub m_z: usize,
    /// Radial level count kept per cell for diagnostics.
    pub n_levels: usize,
    pub deadzone: f64,
    /// Proximity radius for hull vertex weights.
    pub weights_radius: f64,
    pub z_binning: ZBinning,
    pub z_stretch: bool,
    /// Half-width of the band around a bin edge inside which the active bin
    /// is kept.
    pub hysteresis: f64,
    /// Nominal rate (Hz) of raw interface samples.
    pub input_rate: f64,
    /// Missing-frame count beyond which an inter-sample interval is a gap.
    pub gap_frames: usize,

    pub hold_seconds: f64,
    pub position_tolerance: f64,
    pub size_tolerance: f64,
    pub trial_timeout: f64,
    /// Dot speed (workspace units per second) at full deflection.
    pub velocity_gain: f64,
    pub training_targets: usize,
    pub break_every: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            f_lower: 8.0,
            f_upper: 20.0,
            f_rate: 40.0,
            k: 20,
            omission_f_threshold: 8.0,
            min_displacement: 1e-4,
            inflection_angle_deg: 30.0,
            eta: 0.5,
            m_x: 160,
            m_y: 160,
            m_z: 5,
            n_levels: 16,
            deadzone: 0.05,
            weights_radius: 2.0 * 2.0 / 160.0,
            z_binning: ZBinning::EqualWidth,
            z_stretch: true,
            hysteresis: 0.02,
            input_rate: 60.0,
            gap_frames: 3,
            hold_seconds: 2.0,
            position_tolerance: 0.05,
            size_tolerance: 0.05,
            trial_timeout: 45.0,
            velocity_gain: 1.0,
            training_targets: 25,
            break_every: 25,
        }
    }
}

impl Config {
    pub fn cell_width_x(&self) -> f64 {
        2.0 / self.m_x as f64
    }

    pub fn cell_width_y(&self) -> f64 {
        2.0 / self.m_y as f64
    }

    pub fn frame_dt(&self) -> f64 {
        1.0 / self.input_rate
    }

    /// Interval above which consecutive raw samples are treated as a drop-out.
    pub fn gap_threshold(&self) -> f64 {
        self.gap_frames as f64 / self.input_rate
    }

    pub fn from_json_str(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    /// Overrides fields from `PREFIX_<FIELD>` environment variables. Values
    /// are parsed as JSON first and fall back to a plain string.
    pub fn with_env_overrides(self, prefix: &str) -> Result<Self, serde_json::Error> {
        self.with_overrides(|key| std::env::var(format!("{prefix}{}", key.to_ascii_uppercase())).ok())
    }

    pub fn with_overrides<F>(self, lookup: F) -> Result<Self, serde_json::Error>
    where
        F: Fn(&str) -> Option<String>,
    {
        let mut value = serde_json::to_value(&self)?;
        if let serde_json::Value::Object(map) = &mut value {
            for (key, slot) in map.iter_mut() {
                if let Some(raw) = lookup(key) {
                    *slot = serde_json::from_str(&raw).unwrap_or(serde_json::Value::String(raw));
                }
            }
        }
        serde_json::from_value(value)
    }
}
