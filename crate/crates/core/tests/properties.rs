use proptest::prelude::*;
use reachmap::bias_profile::equal_width_edges;
use reachmap::map_compiler::compile_from_hulls;
use reachmap::metrics::{categorize, path_efficiency, Category, MetricsReport};
use reachmap::task::{
    run_trial, target_lattice, DotState, Outcome, Phase, PhaseRecord, RecordedStream, Target, TrialRecord,
};
use reachmap::{convex_hull, Condition, Config, ControlSample, ConvexHull, Point2};

fn small() -> Config {
    Config {
        m_x: 40,
        m_y: 40,
        m_z: 3,
        ..Config::default()
    }
}

/// A hull around a jittered ellipse that always contains a neighbourhood of
/// its own centroid.
fn ellipse_hull() -> impl Strategy<Value = ConvexHull> {
    (0.2f64..0.9, 0.2f64..0.9, -0.1f64..0.1, -0.1f64..0.1, 5usize..24, any::<u64>()).prop_map(|(a, b, cx, cy, n, seed)| {
        let pts: Vec<Point2> = (0..n)
            .map(|i| {
                let jitter = 1.0 - 0.2 * (((seed >> (i % 60)) & 7) as f64 / 7.0);
                let t = std::f64::consts::TAU * i as f64 / n as f64;
                Point2::new(cx + a * jitter * t.cos(), cy + b * jitter * t.sin())
            })
            .collect();
        convex_hull(&pts, 0.025).unwrap()
    })
}

fn record(target: Target, completed: bool, path: f64) -> TrialRecord {
    TrialRecord {
        phase: Phase::Unmapped,
        condition: Condition::Unmapped,
        target,
        trajectory: Vec::new(),
        outcome: if completed { Outcome::Completed } else { Outcome::TimedOut },
        time_to_first_reach: completed.then_some(1.0),
        path_length: path,
        hold_satisfied: completed,
        start_t: 0.0,
        duration: if completed { 3.0 } else { 45.0 },
    }
}

fn session(flags: &[(bool, f64)]) -> Vec<TrialRecord> {
    target_lattice()
        .into_iter()
        .zip(flags)
        .map(|(t, &(c, p))| record(t, c, p))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn lookup_is_total_bounded_and_deterministic(h in prop::collection::vec(ellipse_hull(), 3), probe in prop::collection::vec((-1.0f64..=1.0, -1.0f64..=1.0, -1.0f64..=1.0), 64)) {
        let config = small();
        let edges = equal_width_edges(3);
        let (a, _) = compile_from_hulls(&h, &[None; 3], &edges, [-1.0, 1.0], [7; 32], &config).unwrap();
        let (b, _) = compile_from_hulls(&h, &[None; 3], &edges, [-1.0, 1.0], [7; 32], &config).unwrap();
        prop_assert_eq!(a.to_bytes(), b.to_bytes());
        for (x, y, z) in probe {
            let o = a.lookup(&ControlSample::new(0.0, x, y, z));
            for v in o {
                prop_assert!(v.is_finite() && (-1.0..=1.0).contains(&v), "{:?} -> {:?}", (x, y, z), o);
            }
        }
        // Lattice corners and centre too.
        for x in [-1.0, 0.0, 1.0] {
            for y in [-1.0, 0.0, 1.0] {
                for z in [-1.0, 0.0, 1.0] {
                    let o = a.lookup(&ControlSample::new(0.0, x, y, z));
                    prop_assert!(o.iter().all(|v| v.is_finite()));
                }
            }
        }
    }

    #[test]
    fn taxonomy_partitions_and_tallies(base in prop::collection::vec((any::<bool>(), 0.5f64..3.0), 125), mapped in prop::collection::vec((any::<bool>(), 0.5f64..3.0), 125)) {
        let a = session(&base);
        let b = session(&mapped);
        let tax = categorize(&a, &b).unwrap();
        let t = tax.tally;
        prop_assert_eq!(t.gained + t.kept + t.lost + t.never, 125);
        for ((x, y), (id, cat)) in a.iter().zip(&b).zip(&tax.per_target) {
            prop_assert_eq!(x.target.id, *id);
            prop_assert_eq!(*cat, Category::of(x.completed(), y.completed()));
        }
        // Recompute every count straight from the records.
        let count = |want: Category| a.iter().zip(&b).filter(|(x, y)| Category::of(x.completed(), y.completed()) == want).count();
        prop_assert_eq!(t.gained, count(Category::Gained));
        prop_assert_eq!(t.kept, count(Category::Kept));
        prop_assert_eq!(t.lost, count(Category::Lost));
        prop_assert_eq!(t.never, count(Category::Never));

        let deltas = path_efficiency(&a, &b).unwrap();
        prop_assert_eq!(deltas.len(), t.kept);
        for ((id, d), (x, y)) in deltas.iter().zip(a.iter().zip(&b).filter(|(x, y)| x.completed() && y.completed())) {
            prop_assert_eq!(*id, x.target.id);
            prop_assert_eq!(*d, y.path_length - x.path_length);
        }

        let self_tax = categorize(&a, &a).unwrap().tally;
        prop_assert_eq!(self_tax.gained + self_tax.lost, 0);

        let phases = vec![
            PhaseRecord { phase: Phase::Unmapped, trials: a.clone(), breaks: vec![] },
            PhaseRecord {
                phase: Phase::Adr,
                trials: b.iter().cloned().map(|mut r| { r.phase = Phase::Adr; r.condition = Condition::Adr; r }).collect(),
                breaks: vec![],
            },
        ];
        let report = MetricsReport::from_phases(&phases, 5).unwrap();
        let adr = report.pair(Condition::Adr).unwrap();
        prop_assert_eq!(adr.tally, t);
        prop_assert_eq!(report.condition(Phase::Adr).unwrap().completed, b.iter().filter(|r| r.completed()).count());
        let bins: usize = adr.bins.iter().map(|bin| bin.tally.gained + bin.tally.kept + bin.tally.lost + bin.tally.never).sum();
        prop_assert_eq!(bins, 125);
    }

    #[test]
    fn path_length_is_at_least_the_straight_line(v in prop::collection::vec((-1.0f64..=1.0, -1.0f64..=1.0, -1.0f64..=1.0), 2..200), ix in 0usize..125) {
        let config = Config::default();
        let dt = config.frame_dt();
        let samples: Vec<ControlSample> = v.iter().enumerate()
            .map(|(i, &(x, y, z))| ControlSample::new((i + 1) as f64 * dt, x, y, z))
            .collect();
        let target = target_lattice()[ix];
        let mut op = RecordedStream::new(samples);
        let rec = run_trial(&mut op, target, Condition::Unmapped, None, &config).unwrap();
        let start = DotState::default();
        let end = rec.trajectory.last().map(|p| p.dot).unwrap_or_default();
        let planar = ((end.x - start.x).powi(2) + (end.y - start.y).powi(2)).sqrt();
        prop_assert!(rec.path_length + 1e-12 >= planar);
        if rec.completed() {
            prop_assert!(rec.path_length + config.position_tolerance + 1e-12 >= rec.straight_line_distance());
        }
    }

    #[test]
    fn collinear_sets_are_rejected(c in -1.0f64..1.0, n in 3usize..40, vertical in any::<bool>()) {
        let pts: Vec<Point2> = (0..n)
            .map(|i| {
                let s = -1.0 + i as f64 / 20.0;
                if vertical { Point2::new(c, s) } else { Point2::new(s, c) }
            })
            .collect();
        prop_assert!(convex_hull(&pts, 0.0).is_err());
    }
}
