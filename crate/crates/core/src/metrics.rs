//! Completion taxonomy, path efficiency and time-to-first-reach over paired
//! rounds, with JSON, CSV and SVG renderings.
//!
//! Every aggregate is recomputed from the trial records on each call.

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

use crate::bias_profile::{bin_index, equal_width_edges};
use crate::deployment::Condition;
use crate::error::MetricsError;
use crate::task::{PhaseRecord, Phase, Target, TrialRecord, LATTICE_LEVELS};

pub const REPORT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    /// Completed only with remapping.
    Gained,
    Kept,
    /// Completed only without remapping.
    Lost,
    Never,
}

impl Category {
    pub fn of(base: bool, mapped: bool) -> Self {
        match (base, mapped) {
            (false, true) => Category::Gained,
            (true, true) => Category::Kept,
            (true, false) => Category::Lost,
            (false, false) => Category::Never,
        }
    }

    pub fn color(self) -> &'static str {
        match self {
            Category::Gained => "#2ca02c",
            Category::Kept => "#1f77b4",
            Category::Lost => "#d62728",
            Category::Never => "#9e9e9e",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Gained => "gained",
            Category::Kept => "kept",
            Category::Lost => "lost",
            Category::Never => "never",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub gained: usize,
    pub kept: usize,
    pub lost: usize,
    pub never: usize,
}

impl Tally {
    pub fn add(&mut self, c: Category) {
        match c {
            Category::Gained => self.gained += 1,
            Category::Kept => self.kept += 1,
            Category::Lost => self.lost += 1,
            Category::Never => self.never += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.gained + self.kept + self.lost + self.never
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionTaxonomy {
    /// `(target id, category)` in presentation order.
    pub per_target: Vec<(usize, Category)>,
    pub tally: Tally,
}

fn check_pairing(base: &[TrialRecord], mapped: &[TrialRecord]) -> Result<(), MetricsError> {
    let mismatch = base
        .iter()
        .zip(mapped)
        .position(|(a, b)| a.target.id != b.target.id)
        .or((base.len() != mapped.len()).then(|| base.len().min(mapped.len())));
    match mismatch {
        Some(index) => Err(MetricsError::TargetMismatch {
            base: base.len(),
            mapped: mapped.len(),
            index,
        }),
        None => Ok(()),
    }
}

pub fn categorize(base: &[TrialRecord], mapped: &[TrialRecord]) -> Result<CompletionTaxonomy, MetricsError> {
    check_pairing(base, mapped)?;
    let mut tally = Tally::default();
    let per_target = base
        .iter()
        .zip(mapped)
        .map(|(a, b)| {
            let c = Category::of(a.completed(), b.completed());
            tally.add(c);
            (a.target.id, c)
        })
        .collect();
    Ok(CompletionTaxonomy { per_target, tally })
}

/// `mapped − base` path length for each target completed in both rounds.
pub fn path_efficiency(base: &[TrialRecord], mapped: &[TrialRecord]) -> Result<Vec<(usize, f64)>, MetricsError> {
    check_pairing(base, mapped)?;
    Ok(base
        .iter()
        .zip(mapped)
        .filter(|(a, b)| a.completed() && b.completed())
        .map(|(a, b)| (a.target.id, b.path_length - a.path_length))
        .collect())
}

pub fn time_to_first_reach(trials: &[TrialRecord]) -> Vec<(usize, Option<f64>)> {
    trials.iter().map(|t| (t.target.id, t.time_to_first_reach)).collect()
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = (n > 1).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
        Self {
            n,
            mean: Some(mean),
            sd,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionMetrics {
    pub phase: Phase,
    pub condition: Condition,
    pub trials: usize,
    pub completed: usize,
    pub time_to_first_reach: Summary,
    pub path_length: Summary,
}

impl ConditionMetrics {
    pub fn from_phase(phase: &PhaseRecord) -> Self {
        let ttfr: Vec<f64> = phase.trials.iter().filter_map(|t| t.time_to_first_reach).collect();
        let paths: Vec<f64> = phase.trials.iter().filter(|t| t.completed()).map(|t| t.path_length).collect();
        Self {
            phase: phase.phase,
            condition: phase.phase.condition(),
            trials: phase.trials.len(),
            completed: phase.trials.iter().filter(|t| t.completed()).count(),
            time_to_first_reach: Summary::of(&ttfr),
            path_length: Summary::of(&paths),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetRow {
    pub target: Target,
    pub z_bin: usize,
    pub category: Category,
    pub base_path: f64,
    pub mapped_path: f64,
    pub path_delta: Option<f64>,
    pub base_ttfr: Option<f64>,
    pub mapped_ttfr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinBreakdown {
    pub z_bin: usize,
    pub tally: Tally,
    pub mean_path_delta: Option<f64>,
}

/// One mapped round compared against the unmapped round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub condition: Condition,
    pub tally: Tally,
    pub mean_path_delta: Option<f64>,
    pub bins: Vec<BinBreakdown>,
    pub targets: Vec<TargetRow>,
}

impl PairReport {
    pub fn compare(base: &[TrialRecord], mapped: &[TrialRecord], condition: Condition, m_z: usize) -> Result<Self, MetricsError> {
        let taxonomy = categorize(base, mapped)?;
        let edges = equal_width_edges(m_z.max(1));
        let targets: Vec<TargetRow> = base
            .iter()
            .zip(mapped)
            .zip(&taxonomy.per_target)
            .map(|((a, b), (_, c))| TargetRow {
                target: a.target,
                z_bin: bin_index(&edges, a.target.z),
                category: *c,
                base_path: a.path_length,
                mapped_path: b.path_length,
                path_delta: (*c == Category::Kept).then(|| b.path_length - a.path_length),
                base_ttfr: a.time_to_first_reach,
                mapped_ttfr: b.time_to_first_reach,
            })
            .collect();
        let deltas: Vec<f64> = targets.iter().filter_map(|r| r.path_delta).collect();
        let bins = (0..edges.len() - 1)
            .map(|z_bin| {
                let rows: Vec<&TargetRow> = targets.iter().filter(|r| r.z_bin == z_bin).collect();
                let mut tally = Tally::default();
                rows.iter().for_each(|r| tally.add(r.category));
                let d: Vec<f64> = rows.iter().filter_map(|r| r.path_delta).collect();
                BinBreakdown {
                    z_bin,
                    tally,
                    mean_path_delta: Summary::of(&d).mean,
                }
            })
            .collect();
        Ok(Self {
            condition,
            tally: taxonomy.tally,
            mean_path_delta: Summary::of(&deltas).mean,
            bins,
            targets,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub version: u32,
    pub conditions: Vec<ConditionMetrics>,
    pub pairs: Vec<PairReport>,
}

impl MetricsReport {
    /// Scores every mapped round against the unmapped round. Training is
    /// reported per condition but never paired.
    pub fn from_phases(phases: &[PhaseRecord], m_z: usize) -> Result<Self, MetricsError> {
        let conditions = phases.iter().map(ConditionMetrics::from_phase).collect();
        let base = phases.iter().find(|p| p.phase == Phase::Unmapped);
        let mut pairs = Vec::new();
        if let Some(base) = base {
            for p in phases.iter().filter(|p| p.phase.condition().needs_stack()) {
                pairs.push(PairReport::compare(&base.trials, &p.trials, p.phase.condition(), m_z)?);
            }
        }
        Ok(Self {
            version: REPORT_VERSION,
            conditions,
            pairs,
        })
    }

    pub fn condition(&self, phase: Phase) -> Option<&ConditionMetrics> {
        self.conditions.iter().find(|c| c.phase == phase)
    }

    pub fn pair(&self, condition: Condition) -> Option<&PairReport> {
        self.pairs.iter().find(|p| p.condition == condition)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per (mapped condition, target).
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "condition,target_id,order,x,y,z,z_bin,category,base_path,mapped_path,path_delta,base_ttfr,mapped_ttfr\n",
        );
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        for pair in &self.pairs {
            for r in &pair.targets {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{},{},{:.6},{:.6},{},{},{}",
                    pair.condition,
                    r.target.id,
                    r.target.order,
                    r.target.x,
                    r.target.y,
                    r.target.z,
                    r.z_bin,
                    r.category.as_str(),
                    r.base_path,
                    r.mapped_path,
                    opt(r.path_delta),
                    opt(r.base_ttfr),
                    opt(r.mapped_ttfr),
                );
            }
        }
        s
    }

    /// Grid plot: per mapped condition, one row of size-level panels colored
    /// by category and one row shaded by path delta on kept targets (blue
    /// shorter, orange longer).
    pub fn to_svg(&self) -> String {
        const CELL: f64 = 18.0;
        const GAP: f64 = 14.0;
        let n = LATTICE_LEVELS.len();
        let panel = CELL * n as f64;
        let width = GAP + (panel + GAP) * n as f64 + 90.0;
        let row_h = panel + GAP + 16.0;
        let height = 30.0 + row_h * 2.0 * self.pairs.len().max(1) as f64;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(s, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);
        let max_delta = self
            .pairs
            .iter()
            .flat_map(|p| p.targets.iter().filter_map(|r| r.path_delta))
            .fold(0.0f64, |m, d| m.max(d.abs()))
            .max(1e-9);
        let level_index = |v: f64| {
            LATTICE_LEVELS
                .iter()
                .enumerate()
                .min_by(|a, b| (a.1 - v).abs().total_cmp(&(b.1 - v).abs()))
                .map(|(i, _)| i)
                .unwrap_or(0)
        };
        for (pi, pair) in self.pairs.iter().enumerate() {
            for row in 0..2 {
                let y0 = 30.0 + row_h * (2 * pi + row) as f64;
                let label = if row == 0 { "completion" } else { "path delta" };
                let _ = writeln!(s, r#"<text x="{GAP}" y="{}">{} · {label}</text>"#, y0 - 4.0, pair.condition);
                for r in &pair.targets {
                    let (ix, iy, iz) = (level_index(r.target.x), level_index(r.target.y), level_index(r.target.z));
                    let x = GAP + (panel + GAP) * iz as f64 + CELL * ix as f64;
                    let y = y0 + CELL * (n - 1 - iy) as f64;
                    let fill = if row == 0 {
                        r.category.color().to_string()
                    } else {
                        match r.path_delta {
                            Some(d) => {
                                let a = (d.abs() / max_delta).clamp(0.08, 1.0);
                                let rgb = if d < 0.0 { "31,119,180" } else { "255,127,14" };
                                format!("rgba({rgb},{a:.3})")
                            }
                            None => "#f2f2f2".into(),
                        }
                    };
                    let _ = writeln!(
                        s,
                        r##"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{fill}" stroke="#ffffff"><title>target {} ({:.1}, {:.1}, {:.1}) {}</title></rect>"##,
                        r.target.id,
                        r.target.x,
                        r.target.y,
                        r.target.z,
                        r.category.as_str()
                    );
                }
                for (iz, z) in LATTICE_LEVELS.iter().enumerate() {
                    let x = GAP + (panel + GAP) * iz as f64;
                    let _ = writeln!(s, r#"<text x="{x}" y="{}">z = {z:+.1}</text>"#, y0 + panel + 12.0);
                }
            }
        }
        let lx = width - 82.0;
        for (i, c) in [Category::Gained, Category::Kept, Category::Lost, Category::Never].iter().enumerate() {
            let y = 30.0 + 16.0 * i as f64;
            let _ = writeln!(s, r#"<rect x="{lx}" y="{y}" width="10" height="10" fill="{}"/>"#, c.color());
            let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, lx + 14.0, y + 9.0, c.as_str());
        }
        s.push_str("</svg>\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::{target_lattice, Outcome};

    fn trial(target: Target, completed: bool, path: f64, ttfr: Option<f64>) -> TrialRecord {
        TrialRecord {
            phase: Phase::Unmapped,
            condition: Condition::Unmapped,
            target,
            trajectory: Vec::new(),
            outcome: if completed { Outcome::Completed } else { Outcome::TimedOut },
            time_to_first_reach: ttfr,
            path_length: path,
            hold_satisfied: completed,
            start_t: 0.0,
            duration: 1.0,
        }
    }

    fn round(f: impl Fn(&Target) -> bool) -> Vec<TrialRecord> {
        target_lattice().iter().map(|t| trial(*t, f(t), 1.0, f(t).then_some(1.0))).collect()
    }

    #[test]
    fn identical_all_completed_is_all_kept() {
        let a = round(|_| true);
        let t = categorize(&a, &a).unwrap();
        assert_eq!(t.tally, Tally { kept: 125, ..Default::default() });
        assert!(path_efficiency(&a, &a).unwrap().iter().all(|(_, d)| *d == 0.0));
    }

    #[test]
    fn none_to_all_is_all_gained() {
        let t = categorize(&round(|_| false), &round(|_| true)).unwrap();
        assert_eq!(t.tally, Tally { gained: 125, ..Default::default() });
    }

    #[test]
    fn self_comparison_has_only_kept_and_never() {
        let a = round(|t| t.id % 3 == 0);
        let t = categorize(&a, &a).unwrap();
        assert_eq!(t.tally.gained + t.tally.lost, 0);
        assert_eq!(t.tally.total(), 125);
    }

    #[test]
    fn mismatched_lists_are_rejected() {
        let a = round(|_| true);
        let mut b = a.clone();
        b.swap(3, 4);
        assert_eq!(
            categorize(&a, &b).unwrap_err(),
            MetricsError::TargetMismatch { base: 125, mapped: 125, index: 3 }
        );
        assert!(categorize(&a, &b[..100]).is_err());
    }

    #[test]
    fn straighter_mapped_paths_give_negative_deltas() {
        let a = round(|_| true);
        let b: Vec<_> = a.iter().map(|t| TrialRecord { path_length: 0.8, ..t.clone() }).collect();
        assert!(path_efficiency(&a, &b).unwrap().iter().all(|(_, d)| *d < 0.0));
    }

    #[test]
    fn deltas_only_on_kept_targets() {
        let a = round(|t| t.id < 100);
        let b = round(|t| t.id >= 50);
        let deltas = path_efficiency(&a, &b).unwrap();
        assert_eq!(deltas.len(), 50);
        let r = PairReport::compare(&a, &b, Condition::Adr, 5).unwrap();
        assert_eq!(r.tally, Tally { gained: 25, kept: 50, lost: 50, never: 0 });
        for row in &r.targets {
            assert_eq!(row.path_delta.is_some(), row.category == Category::Kept);
        }
        let bin_sum: usize = r.bins.iter().map(|b| b.tally.total()).sum();
        assert_eq!(bin_sum, 125);
        assert_eq!(r.bins.len(), 5);
        for b in &r.bins {
            assert_eq!(b.tally.total(), 25);
        }
    }

    #[test]
    fn summary_matches_hand_computation() {
        let s = Summary::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, Some(2.5));
        assert!((s.sd.unwrap() - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(Summary::of(&[]).mean, None);
        assert_eq!(Summary::of(&[7.0]).sd, None);
    }

    #[test]
    fn timed_out_trials_have_no_reach_time() {
        let a = round(|t| t.id % 2 == 0);
        for (id, ttfr) in time_to_first_reach(&a) {
            assert_eq!(ttfr.is_some(), id % 2 == 0);
        }
    }

    #[test]
    fn report_renders_all_formats() {
        let phases = vec![
            PhaseRecord { phase: Phase::Unmapped, trials: round(|t| t.z.abs() < 0.5), breaks: vec![] },
            PhaseRecord { phase: Phase::Adr, trials: round(|_| true), breaks: vec![] },
        ];
        let r = MetricsReport::from_phases(&phases, 5).unwrap();
        assert_eq!(r.pair(Condition::Adr).unwrap().tally.gained, 50);
        let back: MetricsReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 126);
        assert!(csv.lines().nth(1).unwrap().starts_with("adr,"));
        let svg = r.to_svg();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<rect x=").count(), 250 + 4);
        assert!(svg.contains(Category::Gained.color()));
    }
}
