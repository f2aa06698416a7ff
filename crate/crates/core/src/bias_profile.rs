//! From a raw interface recording to a user's reachable set: instability and
//! deadzone omission, summary statistics, and one convex hull per twist bin.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::VecDeque;

use crate::config::{Config, ZBinning};
use crate::error::ProfileError;
use crate::geometry::{convex_hull, ConvexHull, Point2};

pub const PROFILE_VERSION: u32 = 1;

/// One raw 3-axis interface reading.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlSample {
    /// Seconds since session start.
    pub t: f64,
    pub u_x: f64,
    pub u_y: f64,
    /// Twist.
    pub u_z: f64,
}

impl ControlSample {
    /// Builds a sample with every component clamped to `[-1, 1]`.
    pub fn new(t: f64, u_x: f64, u_y: f64, u_z: f64) -> Self {
        Self {
            t,
            u_x: clamp_unit(u_x),
            u_y: clamp_unit(u_y),
            u_z: clamp_unit(u_z),
        }
    }

    pub fn clamped(self) -> Self {
        Self::new(self.t, self.u_x, self.u_y, self.u_z)
    }

    pub fn planar(&self) -> Point2 {
        Point2::new(self.u_x, self.u_y)
    }
}

fn clamp_unit(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(-1.0, 1.0)
    }
}

/// Checks the stream is non-empty with strictly increasing timestamps.
pub fn validate_stream(stream: &[ControlSample]) -> Result<(), ProfileError> {
    if stream.is_empty() {
        return Err(ProfileError::EmptyStream);
    }
    for (i, w) in stream.windows(2).enumerate() {
        if !(w[1].t > w[0].t) {
            return Err(ProfileError::NonMonotonicTime { index: i + 1 });
        }
    }
    Ok(())
}

/// Parameters of the inflection counter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InflectionParams {
    pub f_rate: f64,
    pub k: usize,
    pub angle_deg: f64,
    pub min_displacement: f64,
}

impl From<&Config> for InflectionParams {
    fn from(c: &Config) -> Self {
        Self {
            f_rate: c.f_rate,
            k: c.k,
            angle_deg: c.inflection_angle_deg,
            min_displacement: c.min_displacement,
        }
    }
}

impl Default for InflectionParams {
    fn default() -> Self {
        (&Config::default()).into()
    }
}

/// Rate of trace clipping in a window sampled at `f_rate`.
///
/// The interface commands velocity, so each sample is the trajectory's
/// displacement over one analysis period. Displacements shorter than
/// `min_displacement` have no direction and are skipped. A turn of at least
/// `angle_deg` between successive displacements clips the current trace and
/// counts one inflection. The count is reported per second of window.
pub fn inflection_frequency(window: &[ControlSample], params: &InflectionParams) -> f64 {
    if window.len() < 3 {
        return 0.0;
    }
    let threshold = params.angle_deg.to_radians() - 1e-9;
    let mut previous: Option<Point2> = None;
    let mut inflections = 0usize;
    for s in window {
        let d = s.planar();
        if d.norm() < params.min_displacement {
            continue;
        }
        if let Some(p) = previous {
            let turn = (p.x * d.y - p.y * d.x).atan2(p.x * d.x + p.y * d.y).abs();
            if turn >= threshold {
                inflections += 1;
            }
        }
        previous = Some(d);
    }
    inflections as f64 / (window.len() as f64 / params.f_rate)
}

/// Nearest-neighbour resampling of the tail of `history` onto the analysis
/// grid `t_last - j / f_rate`, `j = k-1 … 0`. Times before the first sample
/// are dropped, so early windows are shorter than `k`.
pub fn analysis_window(history: &[ControlSample], params: &InflectionParams) -> Vec<ControlSample> {
    let Some(last) = history.last() else {
        return Vec::new();
    };
    let first_t = history[0].t;
    let period = 1.0 / params.f_rate;
    let mut out = Vec::with_capacity(params.k);
    for j in (0..params.k).rev() {
        let tau = last.t - j as f64 * period;
        if tau < first_t - 0.5 * period {
            continue;
        }
        let idx = history.partition_point(|s| s.t < tau);
        let pick = match idx {
            0 => 0,
            i if i >= history.len() => history.len() - 1,
            i => {
                if (history[i].t - tau) < (tau - history[i - 1].t) {
                    i
                } else {
                    i - 1
                }
            }
        };
        out.push(history[pick]);
    }
    out
}

/// Streaming inflection-frequency estimator over the most recent raw samples.
#[derive(Clone, Debug)]
pub struct InflectionTracker {
    params: InflectionParams,
    history: VecDeque<ControlSample>,
    frequency: f64,
}

impl InflectionTracker {
    pub fn new(params: InflectionParams) -> Self {
        Self {
            params,
            history: VecDeque::new(),
            frequency: 0.0,
        }
    }

    pub fn push(&mut self, sample: ControlSample) -> f64 {
        let span = (self.params.k as f64 + 2.0) / self.params.f_rate;
        while self.history.front().is_some_and(|s| s.t < sample.t - span) {
            self.history.pop_front();
        }
        self.history.push_back(sample);
        let window = analysis_window(self.history.make_contiguous(), &self.params);
        self.frequency = inflection_frequency(&window, &self.params);
        self.frequency
    }

    pub fn frequency(&self) -> f64 {
        self.frequency
    }

    pub fn clear(&mut self) {
        self.history.clear();
        self.frequency = 0.0;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OmitReason {
    Unstable,
    Deadzone,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FilteredStream {
    pub retained: Vec<ControlSample>,
    pub omitted: Vec<(ControlSample, OmitReason)>,
    /// Rolling inflection frequency of every input sample, in input order.
    pub frequencies: Vec<f64>,
}

/// Splits a time-ordered stream into the reachable set and omitted samples.
///
/// A sample is unstable when the inflection frequency of the window ending
/// at it exceeds `f_threshold`; it falls in the deadzone when its planar
/// deflection is below `deadzone_radius`.
pub fn filter_reachable(
    stream: &[ControlSample],
    params: &InflectionParams,
    f_threshold: f64,
    deadzone_radius: f64,
) -> FilteredStream {
    let mut out = FilteredStream {
        frequencies: Vec::with_capacity(stream.len()),
        ..Default::default()
    };
    for i in 0..stream.len() {
        let window = analysis_window(&stream[..=i], params);
        let f = inflection_frequency(&window, params);
        out.frequencies.push(f);
        let s = stream[i];
        if f > f_threshold {
            out.omitted.push((s, OmitReason::Unstable));
        } else if s.planar().norm() < deadzone_radius {
            out.omitted.push((s, OmitReason::Deadzone));
        } else {
            out.retained.push(s);
        }
    }
    out
}

/// Location and spread of a planar control distribution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Xi {
    pub mu_x: f64,
    pub sigma_x: f64,
    pub mu_y: f64,
    pub sigma_y: f64,
    pub cm_x: f64,
    pub cm_y: f64,
}

impl Xi {
    /// Population statistics; `None` for an empty set.
    pub fn from_points(points: &[Point2]) -> Option<Self> {
        if points.is_empty() {
            return None;
        }
        let n = points.len() as f64;
        let mu_x = points.iter().map(|p| p.x).sum::<f64>() / n;
        let mu_y = points.iter().map(|p| p.y).sum::<f64>() / n;
        let var_x = points.iter().map(|p| (p.x - mu_x).powi(2)).sum::<f64>() / n;
        let var_y = points.iter().map(|p| (p.y - mu_y).powi(2)).sum::<f64>() / n;
        Some(Self {
            mu_x,
            sigma_x: var_x.sqrt(),
            mu_y,
            sigma_y: var_y.sqrt(),
            cm_x: mu_x,
            cm_y: mu_y,
        })
    }

    pub fn center_of_mass(&self) -> Point2 {
        Point2::new(self.cm_x, self.cm_y)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinProfile {
    pub sample_count: usize,
    /// Statistics of the bin's own retained samples.
    pub xi: Option<Xi>,
    pub hull: ConvexHull,
    /// Set when the bin could not form a hull and copies a neighbour's.
    pub borrowed_from: Option<usize>,
    /// Whether the bin's center of mass falls inside its hull.
    pub cm_inside: bool,
}

/// The calibrated reachable set of one user.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasProfile {
    pub version: u32,
    pub xi: Xi,
    pub bins: Vec<BinProfile>,
    /// `m_z + 1` twist bin edges, first `-1` and last `1`.
    pub bin_edges: Vec<f64>,
    pub z_range: [f64; 2],
    pub retained_fraction: f64,
    pub deadzone_radius: f64,
    pub sample_count: usize,
    /// SHA-256 of the raw calibration stream.
    pub input_digest: String,
    pub config: Config,
}

impl BiasProfile {
    pub fn m_z(&self) -> usize {
        self.bins.len()
    }

    pub fn bin_of(&self, u_z: f64) -> usize {
        bin_index(&self.bin_edges, u_z)
    }

    /// SHA-256 of the profile's canonical JSON form.
    pub fn fingerprint(&self) -> [u8; 32] {
        let bytes = serde_json::to_vec(self).expect("profile serializes");
        Sha256::digest(&bytes).into()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("profile serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// Bin containing `z`; values on an interior edge belong to the upper bin.
pub fn bin_index(edges: &[f64], z: f64) -> usize {
    let m = edges.len() - 1;
    edges[1..m].partition_point(|e| *e <= z)
}

pub fn equal_width_edges(m_z: usize) -> Vec<f64> {
    (0..=m_z).map(|i| -1.0 + 2.0 * i as f64 / m_z as f64).collect()
}

fn quantile_edges(m_z: usize, retained: &[ControlSample]) -> Vec<f64> {
    let mut z: Vec<f64> = retained.iter().map(|s| s.u_z).collect();
    z.sort_by(f64::total_cmp);
    let mut edges = vec![-1.0];
    for i in 1..m_z {
        let q = z[((i * z.len()) / m_z).min(z.len() - 1)];
        let prev = *edges.last().unwrap();
        edges.push(if q > prev { q } else { prev + f64::EPSILON });
    }
    edges.push(1.0);
    edges
}

/// SHA-256 over the little-endian bits of every sample field.
pub fn stream_digest(stream: &[ControlSample]) -> String {
    let mut h = Sha256::new();
    for s in stream {
        for v in [s.t, s.u_x, s.u_y, s.u_z] {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Calibrates a bias profile from a raw recording.
pub fn build_profile(stream: &[ControlSample], config: &Config) -> Result<BiasProfile, ProfileError> {
    validate_stream(stream)?;
    let clamped: Vec<ControlSample> = stream.iter().map(|s| s.clamped()).collect();
    let params = InflectionParams::from(config);
    let filtered = filter_reachable(&clamped, &params, config.omission_f_threshold, config.deadzone);
    let retained = &filtered.retained;
    if retained.is_empty() {
        return Err(ProfileError::InsufficientData { retained: 0 });
    }

    let m_z = config.m_z.max(1);
    let bin_edges = match config.z_binning {
        ZBinning::EqualWidth => equal_width_edges(m_z),
        ZBinning::Quantile => quantile_edges(m_z, retained),
    };
    let mut per_bin: Vec<Vec<Point2>> = vec![Vec::new(); m_z];
    for s in retained {
        per_bin[bin_index(&bin_edges, s.u_z)].push(s.planar());
    }

    let own_hulls: Vec<Option<ConvexHull>> = per_bin
        .iter()
        .map(|pts| convex_hull(pts, config.weights_radius).ok())
        .collect();
    if own_hulls.iter().all(Option::is_none) {
        return Err(ProfileError::InsufficientData {
            retained: retained.len(),
        });
    }

    let bins = (0..m_z)
        .map(|i| {
            let (hull, borrowed_from) = match &own_hulls[i] {
                Some(h) => (h.clone(), None),
                None => {
                    let donor = (0..m_z)
                        .filter(|j| own_hulls[*j].is_some())
                        .min_by_key(|j| j.abs_diff(i))
                        .expect("at least one populated bin");
                    (own_hulls[donor].clone().unwrap(), Some(donor))
                }
            };
            let xi = Xi::from_points(&per_bin[i]);
            let cm_inside = xi.is_some_and(|x| hull.contains(x.center_of_mass()));
            BinProfile {
                sample_count: per_bin[i].len(),
                xi,
                hull,
                borrowed_from,
                cm_inside,
            }
        })
        .collect();

    let all: Vec<Point2> = retained.iter().map(|s| s.planar()).collect();
    let (z_min, z_max) = retained
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s.u_z), hi.max(s.u_z)));

    Ok(BiasProfile {
        version: PROFILE_VERSION,
        xi: Xi::from_points(&all).expect("retained set is non-empty"),
        bins,
        bin_edges,
        z_range: [z_min, z_max],
        retained_fraction: retained.len() as f64 / clamped.len() as f64,
        deadzone_radius: config.deadzone,
        sample_count: clamped.len(),
        input_digest: stream_digest(stream),
        config: config.clone(),
    })
}
