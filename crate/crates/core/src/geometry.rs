//! Planar geometry kernel: strict convex hulls with vertex weights, point
//! membership, ray marching to region boundaries and radial level sets.
//!
//! All coordinates live in the normalized control plane `[-1, 1]²`.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::GeometryError;

/// Tolerance used by edge-side tests in [`ConvexHull::contains`].
pub const EDGE_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const ORIGIN: Point2 = Point2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn from_polar(radius: f64, theta: f64) -> Self {
        Self::new(radius * theta.cos(), radius * theta.sin())
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, other: Point2) -> f64 {
        (self - other).norm()
    }

    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn clamp_unit(self) -> Self {
        Self::new(self.x.clamp(-1.0, 1.0), self.y.clamp(-1.0, 1.0))
    }

    pub fn scale(self, k: f64) -> Self {
        Self::new(self.x * k, self.y * k)
    }
}

impl std::ops::Add for Point2 {
    type Output = Point2;
    fn add(self, rhs: Point2) -> Point2 {
        Point2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl std::ops::Sub for Point2 {
    type Output = Point2;
    fn sub(self, rhs: Point2) -> Point2 {
        Point2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

/// Twice the signed area of the triangle `(o, a, b)`; positive when `b` lies
/// to the left of `o → a`.
pub fn cross(o: Point2, a: Point2, b: Point2) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// A strictly convex polygon stored as a counter-clockwise vertex ring.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "HullRecord", into = "HullRecord")]
pub struct ConvexHull {
    vertices: Vec<Point2>,
    /// Edge `i` joins `vertices[simplices[i].0]` to `vertices[simplices[i].1]`.
    simplices: Vec<(usize, usize)>,
    vertex_weights: Vec<u32>,
    centroid: Point2,
}

/// Strict convex hull of `points` (Andrew's monotone chain).
///
/// Collinear points along an edge are dropped so only the extreme endpoints
/// remain. Each vertex is weighted by the number of input points within
/// `weights_radius` of it, the vertex itself included.
pub fn convex_hull(points: &[Point2], weights_radius: f64) -> Result<ConvexHull, GeometryError> {
    if points.iter().any(|p| !p.is_finite()) {
        return Err(GeometryError::NonFinite);
    }
    if points.len() < 3 {
        return Err(GeometryError::DegenerateInput {
            reason: format!("{} points, need at least 3", points.len()),
        });
    }

    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    sorted.dedup();

    let mut ring: Vec<Point2> = Vec::with_capacity(sorted.len() + 1);
    for &p in &sorted {
        while ring.len() >= 2 && cross(ring[ring.len() - 2], ring[ring.len() - 1], p) <= 0.0 {
            ring.pop();
        }
        ring.push(p);
    }
    let lower_len = ring.len() + 1;
    for &p in sorted.iter().rev().skip(1) {
        while ring.len() >= lower_len && cross(ring[ring.len() - 2], ring[ring.len() - 1], p) <= 0.0 {
            ring.pop();
        }
        ring.push(p);
    }
    ring.pop();

    if ring.len() < 3 {
        return Err(GeometryError::DegenerateInput {
            reason: "all points are collinear".into(),
        });
    }

    ConvexHull::from_ccw_ring(ring, points, weights_radius)
}

impl ConvexHull {
    /// Builds a hull from an already strictly convex CCW ring, weighting its
    /// vertices against `samples`.
    pub fn from_ccw_ring(
        vertices: Vec<Point2>,
        samples: &[Point2],
        weights_radius: f64,
    ) -> Result<Self, GeometryError> {
        let n = vertices.len();
        if n < 3 {
            return Err(GeometryError::DegenerateInput {
                reason: format!("ring of {n} vertices"),
            });
        }
        for i in 0..n {
            if cross(vertices[i], vertices[(i + 1) % n], vertices[(i + 2) % n]) <= 0.0 {
                return Err(GeometryError::NotConvex { index: (i + 1) % n });
            }
        }
        let simplices = (0..n).map(|i| (i, (i + 1) % n)).collect();
        let vertex_weights = vertices
            .iter()
            .map(|v| {
                let near = samples.iter().filter(|s| s.distance(*v) <= weights_radius).count();
                near.max(1) as u32
            })
            .collect();
        let centroid = area_centroid(&vertices);
        Ok(Self {
            vertices,
            simplices,
            vertex_weights,
            centroid,
        })
    }

    /// The axis-aligned square `[-half, half]²` around `center`.
    pub fn square(center: Point2, half: f64) -> Self {
        let ring = vec![
            center + Point2::new(-half, -half),
            center + Point2::new(half, -half),
            center + Point2::new(half, half),
            center + Point2::new(-half, half),
        ];
        Self::from_ccw_ring(ring, &[], 0.0).expect("square is convex")
    }

    /// Axis-aligned rectangle `[x0, x1] × [y0, y1]`.
    pub fn rectangle(x0: f64, x1: f64, y0: f64, y1: f64) -> Self {
        let ring = vec![
            Point2::new(x0, y0),
            Point2::new(x1, y0),
            Point2::new(x1, y1),
            Point2::new(x0, y1),
        ];
        Self::from_ccw_ring(ring, &[], 0.0).expect("rectangle with positive extent")
    }

    pub fn vertices(&self) -> &[Point2] {
        &self.vertices
    }

    pub fn simplices(&self) -> &[(usize, usize)] {
        &self.simplices
    }

    pub fn vertex_weights(&self) -> &[u32] {
        &self.vertex_weights
    }

    pub fn centroid(&self) -> Point2 {
        self.centroid
    }

    pub fn edge(&self, i: usize) -> (Point2, Point2) {
        let (a, b) = self.simplices[i];
        (self.vertices[a], self.vertices[b])
    }

    pub fn edge_midpoints(&self) -> impl Iterator<Item = Point2> + '_ {
        (0..self.simplices.len()).map(|i| {
            let (a, b) = self.edge(i);
            Point2::new(0.5 * (a.x + b.x), 0.5 * (a.y + b.y))
        })
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.vertices)
    }

    /// Inside-or-on test; edges are widened by `tolerance` (in cross-product
    /// units normalized by edge length).
    pub fn contains_with_tolerance(&self, p: Point2, tolerance: f64) -> bool {
        (0..self.simplices.len()).all(|i| {
            let (a, b) = self.edge(i);
            cross(a, b, p) >= -tolerance * a.distance(b)
        })
    }

    pub fn contains(&self, p: Point2) -> bool {
        self.contains_with_tolerance(p, EDGE_TOLERANCE)
    }
}

/// Serialized form; simplices and centroid are rederived on load.
#[derive(Serialize, Deserialize)]
struct HullRecord {
    vertices: Vec<Point2>,
    vertex_weights: Vec<u32>,
}

impl From<ConvexHull> for HullRecord {
    fn from(h: ConvexHull) -> Self {
        Self {
            vertices: h.vertices,
            vertex_weights: h.vertex_weights,
        }
    }
}

impl TryFrom<HullRecord> for ConvexHull {
    type Error = GeometryError;

    fn try_from(r: HullRecord) -> Result<Self, GeometryError> {
        if r.vertex_weights.len() != r.vertices.len() {
            return Err(GeometryError::DegenerateInput {
                reason: "vertex weight count differs from vertex count".into(),
            });
        }
        let mut hull = ConvexHull::from_ccw_ring(r.vertices, &[], 0.0)?;
        hull.vertex_weights = r.vertex_weights.into_iter().map(|w| w.max(1)).collect();
        Ok(hull)
    }
}

fn signed_area(ring: &[Point2]) -> f64 {
    let n = ring.len();
    0.5 * (0..n)
        .map(|i| {
            let (a, b) = (ring[i], ring[(i + 1) % n]);
            a.x * b.y - b.x * a.y
        })
        .sum::<f64>()
}

fn area_centroid(ring: &[Point2]) -> Point2 {
    let n = ring.len();
    let (mut cx, mut cy, mut twice_area) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (a, b) = (ring[i], ring[(i + 1) % n]);
        let w = a.x * b.y - b.x * a.y;
        twice_area += w;
        cx += (a.x + b.x) * w;
        cy += (a.y + b.y) * w;
    }
    Point2::new(cx / (3.0 * twice_area), cy / (3.0 * twice_area))
}

/// A closed planar region that rays can be marched against.
pub trait Region {
    fn contains(&self, p: Point2) -> bool;
    /// Upper bound on the distance between any two points of the region.
    fn diameter(&self) -> f64;
}

/// The full control square `[-1, 1]²`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FullSpace;

impl FullSpace {
    /// Exact distance from `origin` (inside the square) to the square boundary
    /// along `theta`.
    pub fn exit_distance(origin: Point2, theta: f64) -> f64 {
        let (dx, dy) = (theta.cos(), theta.sin());
        let along = |o: f64, d: f64| {
            if d > 1e-15 {
                (1.0 - o) / d
            } else if d < -1e-15 {
                (-1.0 - o) / d
            } else {
                f64::INFINITY
            }
        };
        along(origin.x, dx).min(along(origin.y, dy)).max(0.0)
    }
}

impl Region for FullSpace {
    fn contains(&self, p: Point2) -> bool {
        p.x.abs() <= 1.0 && p.y.abs() <= 1.0
    }

    fn diameter(&self) -> f64 {
        2.0 * std::f64::consts::SQRT_2
    }
}

impl Region for ConvexHull {
    fn contains(&self, p: Point2) -> bool {
        ConvexHull::contains(self, p)
    }

    fn diameter(&self) -> f64 {
        let v = &self.vertices;
        let mut d: f64 = 0.0;
        for (i, a) in v.iter().enumerate() {
            for b in &v[i + 1..] {
                d = d.max(a.distance(*b));
            }
        }
        d
    }
}

/// Closed disk, mostly useful for level-set checks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Disk {
    pub center: Point2,
    pub radius: f64,
}

impl Region for Disk {
    fn contains(&self, p: Point2) -> bool {
        p.distance(self.center) <= self.radius
    }

    fn diameter(&self) -> f64 {
        2.0 * self.radius
    }
}

/// Bisection stops once the bracket is narrower than this.
const BISECTION_WIDTH: f64 = 1e-10;

/// Marches from `origin` along `theta` in steps of `eta` until the first
/// point outside `region`, then bisects the last step down to the boundary.
///
/// The returned point lies at or just beyond the boundary, within `1e-10`
/// (far inside the `eta / 100` contract).
pub fn ray_to_boundary<R: Region + ?Sized>(
    origin: Point2,
    theta: f64,
    region: &R,
    eta: f64,
) -> Result<Point2, GeometryError> {
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(GeometryError::InvalidStep { eta });
    }
    if !origin.is_finite() || !region.contains(origin) {
        return Err(GeometryError::OriginOutside { origin });
    }
    let dir = Point2::from_polar(1.0, theta);
    let max_steps = (10.0 * region.diameter() / eta).ceil().max(1.0) as usize;

    let mut inside = 0.0;
    let mut outside = None;
    for step in 1..=max_steps {
        let s = step as f64 * eta;
        if !region.contains(origin + dir.scale(s)) {
            outside = Some(s);
            break;
        }
        inside = s;
    }
    let mut outside = outside.ok_or(GeometryError::NoBoundaryHit { theta, steps: max_steps })?;

    while outside - inside > BISECTION_WIDTH {
        let mid = 0.5 * (inside + outside);
        if region.contains(origin + dir.scale(mid)) {
            inside = mid;
        } else {
            outside = mid;
        }
    }
    Ok(origin + dir.scale(outside))
}

/// Distance from `origin` to the boundary of `region` along `theta`.
pub fn boundary_distance<R: Region + ?Sized>(
    origin: Point2,
    theta: f64,
    region: &R,
    eta: f64,
) -> Result<f64, GeometryError> {
    ray_to_boundary(origin, theta, region, eta).map(|p| p.distance(origin))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionSource {
    FullSpace,
    Hull,
}

/// Cell-wise radial level sets of a region over an `m_x × m_y` grid on
/// `[-1, 1]²`. Cells whose center lies outside the region hold `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelSetPartition {
    pub n_levels: usize,
    pub m_x: usize,
    pub m_y: usize,
    pub source: PartitionSource,
    pub center: Point2,
    /// Row-major, `y` outer: index `iy * m_x + ix`.
    pub cell_level: Vec<Option<u16>>,
}

impl LevelSetPartition {
    pub fn level(&self, ix: usize, iy: usize) -> Option<u16> {
        self.cell_level[iy * self.m_x + ix]
    }
}

/// Center of cell `i` in a grid of `m` cells spanning `[-1, 1]`.
pub fn cell_center(i: usize, m: usize) -> f64 {
    -1.0 + (i as f64 + 0.5) * 2.0 / m as f64
}

/// Region descriptor accepted by [`partition_level_sets`].
#[derive(Clone, Copy, Debug)]
pub enum PartitionRegion<'a> {
    FullSpace,
    Hull(&'a ConvexHull),
}

/// Normalized radial coordinate of `p`: distance from `center` over the
/// boundary distance along the same direction. `None` outside the region.
pub fn radial_fraction<R: Region + ?Sized>(
    region: &R,
    center: Point2,
    p: Point2,
    eta: f64,
) -> Result<Option<f64>, GeometryError> {
    if !region.contains(p) {
        return Ok(None);
    }
    let r = p.distance(center);
    if r == 0.0 {
        return Ok(Some(0.0));
    }
    let d = boundary_distance(center, (p - center).angle(), region, eta)?;
    Ok(Some((r / d).min(1.0)))
}

pub fn level_of(fraction: f64, n_levels: usize) -> u16 {
    ((n_levels as f64 * fraction).floor() as usize).min(n_levels - 1) as u16
}

/// Assigns every grid cell inside `region` the level `floor(n · ρ)`, where
/// `ρ` is the cell's radial fraction from `center`.
pub fn partition_level_sets(
    region: PartitionRegion<'_>,
    m_x: usize,
    m_y: usize,
    n_levels: usize,
    center: Point2,
    eta: f64,
) -> Result<LevelSetPartition, GeometryError> {
    if n_levels == 0 || n_levels > u16::MAX as usize {
        return Err(GeometryError::InvalidLevels { n_levels });
    }
    let (source, region): (_, &dyn Region) = match region {
        PartitionRegion::FullSpace => (PartitionSource::FullSpace, &FullSpace),
        PartitionRegion::Hull(h) => (PartitionSource::Hull, h),
    };
    if !region.contains(center) {
        return Err(GeometryError::OriginOutside { origin: center });
    }
    let mut cell_level = Vec::with_capacity(m_x * m_y);
    for iy in 0..m_y {
        for ix in 0..m_x {
            let p = Point2::new(cell_center(ix, m_x), cell_center(iy, m_y));
            let level = radial_fraction(region, center, p, eta)?.map(|f| level_of(f, n_levels));
            cell_level.push(level);
        }
    }
    Ok(LevelSetPartition {
        n_levels,
        m_x,
        m_y,
        source,
        center,
        cell_level,
    })
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut t = theta % (2.0 * PI);
    if t <= -PI {
        t += 2.0 * PI;
    } else if t > PI {
        t -= 2.0 * PI;
    }
    t
}
