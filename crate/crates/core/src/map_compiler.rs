//! Compiles a bias profile into a stack of precomputed 2D lookup grids, one
//! per twist bin, plus a 1D twist stretch.
//!
//! Each grid realizes a radial stretch about the hull centroid. A cell
//! center `p` at distance `r` from the centroid `c` in direction `θ`, where
//! the hull boundary lies at `d_hull(θ)`, maps to the point at fraction
//! `min(1, r / d_hull(θ))` of the way from the neutral origin to the square
//! boundary along `θ`. The centroid maps to neutral, the hull boundary to the
//! square boundary, and everything outside the hull saturates on the square.
//! `rho = d_hull(θ) / d_full(θ)` (centroid-relative coverage) and the radial
//! level index are kept per cell as diagnostics.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use crate::bias_profile::{bin_index, BiasProfile, ControlSample};
use crate::config::Config;
use crate::error::{CompileError, FormatError};
use crate::geometry::{
    boundary_distance, cell_center, level_of, ray_to_boundary, ConvexHull, FullSpace, Point2,
};

pub const STACK_MAGIC: [u8; 4] = *b"RMAP";
pub const STACK_VERSION: u32 = 1;

/// Level value stored for cells outside the hull.
pub const EXTERIOR_LEVEL: f32 = -1.0;

/// One compiled twist-bin map, stored as `f32` struct-of-arrays in row-major
/// order (`iy * m_x + ix`).
#[derive(Clone, Debug, PartialEq)]
pub struct RemapGrid {
    pub m_x: usize,
    pub m_y: usize,
    pub out_x: Vec<f32>,
    pub out_y: Vec<f32>,
    pub rho: Vec<f32>,
    pub level: Vec<f32>,
}

impl RemapGrid {
    fn with_capacity(m_x: usize, m_y: usize) -> Self {
        let n = m_x * m_y;
        Self {
            m_x,
            m_y,
            out_x: Vec::with_capacity(n),
            out_y: Vec::with_capacity(n),
            rho: Vec::with_capacity(n),
            level: Vec::with_capacity(n),
        }
    }

    pub fn index(&self, ix: usize, iy: usize) -> usize {
        iy * self.m_x + ix
    }

    pub fn cell_output(&self, ix: usize, iy: usize) -> Point2 {
        let i = self.index(ix, iy);
        Point2::new(self.out_x[i] as f64, self.out_y[i] as f64)
    }

    fn axis(v: f64, m: usize) -> (usize, f64) {
        let f = (v + 1.0) * m as f64 / 2.0 - 0.5;
        let i0 = (f.floor().max(0.0) as usize).min(m - 2);
        (i0, (f - i0 as f64).clamp(0.0, 1.0))
    }

    /// Bilinear interpolation between the four surrounding cell centers.
    pub fn evaluate(&self, p: Point2) -> Point2 {
        let (ix, tx) = Self::axis(p.x.clamp(-1.0, 1.0), self.m_x);
        let (iy, ty) = Self::axis(p.y.clamp(-1.0, 1.0), self.m_y);
        let i00 = self.index(ix, iy);
        let i10 = i00 + 1;
        let i01 = i00 + self.m_x;
        let i11 = i01 + 1;
        let blend = |v: &[f32]| {
            let a = v[i00] as f64 * (1.0 - tx) + v[i10] as f64 * tx;
            let b = v[i01] as f64 * (1.0 - tx) + v[i11] as f64 * tx;
            a * (1.0 - ty) + b * ty
        };
        Point2::new(blend(&self.out_x), blend(&self.out_y)).clamp_unit()
    }
}

/// Monotone piecewise-linear twist stretch with constant extension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZMap {
    /// `(input, output)` knots with strictly increasing inputs.
    pub knots: Vec<(f32, f32)>,
}

impl ZMap {
    pub fn identity() -> Self {
        Self {
            knots: vec![(-1.0, -1.0), (1.0, 1.0)],
        }
    }

    /// Stretches `[z_min, z_max]` onto `[-1, 1]`. When the range straddles
    /// zero the rest twist stays at zero and each side stretches separately.
    pub fn stretch(z_min: f64, z_max: f64) -> Self {
        let (lo, hi) = (z_min as f32, z_max as f32);
        if !(hi - lo > 1e-6) {
            return Self::identity();
        }
        let knots = if lo < -1e-6 && hi > 1e-6 {
            vec![(lo, -1.0), (0.0, 0.0), (hi, 1.0)]
        } else {
            vec![(lo, -1.0), (hi, 1.0)]
        };
        Self { knots }
    }

    pub fn apply(&self, z: f64) -> f64 {
        let k = &self.knots;
        let first = k[0];
        let last = k[k.len() - 1];
        if z <= first.0 as f64 {
            return first.1 as f64;
        }
        if z >= last.0 as f64 {
            return last.1 as f64;
        }
        let i = k.partition_point(|kn| (kn.0 as f64) <= z) - 1;
        let (x0, y0) = (k[i].0 as f64, k[i].1 as f64);
        let (x1, y1) = (k[i + 1].0 as f64, k[i + 1].1 as f64);
        y0 + (y1 - y0) * (z - x0) / (x1 - x0)
    }

    /// Output for the rest twist.
    pub fn neutral(&self) -> f64 {
        self.apply(0.0)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub rho_min: f64,
    pub rho_max: f64,
    pub rho_mean: f64,
    pub min_hull_distance: f64,
    pub inside_cells: usize,
    /// Coverage of each hull edge, probed along its midpoint direction.
    pub simplex_rho: Vec<f64>,
}

/// The radial stretch evaluated exactly at one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stretch {
    pub output: Point2,
    /// Distance from the hull centroid.
    pub radius: f64,
    pub d_hull: f64,
    /// `min(1, radius / d_hull)`.
    pub fraction: f64,
    pub rho: f64,
}

/// Maps `p` by the centroid-relative radial stretch of `hull`.
pub fn stretch_point(hull: &ConvexHull, p: Point2, eta: f64) -> Result<Stretch, CompileError> {
    let center = hull.centroid();
    let v = p - center;
    let radius = v.norm();
    let theta = if radius > 0.0 { v.angle() } else { 0.0 };
    let d_hull = boundary_distance(center, theta, hull, eta)?;
    let d_full = FullSpace::exit_distance(center, theta);
    let fraction = (radius / d_hull).min(1.0);
    let output = Point2::from_polar(fraction * FullSpace::exit_distance(Point2::ORIGIN, theta), theta).clamp_unit();
    Ok(Stretch {
        output,
        radius,
        d_hull,
        fraction,
        rho: (d_hull / d_full).min(1.0),
    })
}

/// Compiles the radial stretch for one hull.
pub fn compile_grid(hull: &ConvexHull, config: &Config) -> Result<(RemapGrid, GridReport), CompileError> {
    let (m_x, m_y) = (config.m_x, config.m_y);
    if m_x < 2 || m_y < 2 {
        return Err(CompileError::InvalidConfig(format!("grid {m_x}×{m_y} too small")));
    }
    if config.n_levels == 0 {
        return Err(CompileError::InvalidConfig("n_levels must be at least 1".into()));
    }
    let center = hull.centroid();
    let minimum = 2.0 * config.cell_width_x().max(config.cell_width_y());
    let eta = config.eta;

    let mut grid = RemapGrid::with_capacity(m_x, m_y);
    let mut report = GridReport {
        rho_min: f64::INFINITY,
        rho_max: 0.0,
        min_hull_distance: f64::INFINITY,
        ..Default::default()
    };
    let mut rho_sum = 0.0;

    for iy in 0..m_y {
        for ix in 0..m_x {
            let p = Point2::new(cell_center(ix, m_x), cell_center(iy, m_y));
            let s = stretch_point(hull, p, eta)?;
            report.min_hull_distance = report.min_hull_distance.min(s.d_hull);
            if s.d_hull < minimum {
                return Err(CompileError::DegenerateHull {
                    bin: None,
                    distance: s.d_hull,
                    minimum,
                });
            }
            let (out, rho, r, d_hull, fraction) = (s.output, s.rho, s.radius, s.d_hull, s.fraction);
            let level = if r <= d_hull {
                level_of(fraction, config.n_levels) as f32
            } else {
                EXTERIOR_LEVEL
            };
            if r <= d_hull {
                report.inside_cells += 1;
            }
            rho_sum += rho;
            report.rho_min = report.rho_min.min(rho);
            report.rho_max = report.rho_max.max(rho);
            grid.out_x.push(out.x as f32);
            grid.out_y.push(out.y as f32);
            grid.rho.push(rho as f32);
            grid.level.push(level);
        }
    }
    report.rho_mean = rho_sum / (m_x * m_y) as f64;

    for mid in hull.edge_midpoints() {
        let to_mid = mid - center;
        let theta = to_mid.angle();
        let exit = ray_to_boundary(mid, theta, &FullSpace, eta)?;
        let inner = to_mid.norm();
        report.simplex_rho.push(inner / (inner + exit.distance(mid)));
    }
    Ok((grid, report))
}

/// The compiled map `φ` for every twist bin.
#[derive(Clone, Debug, PartialEq)]
pub struct RemapStack {
    pub m_x: usize,
    pub m_y: usize,
    pub grids: Vec<RemapGrid>,
    /// `m_z + 1` edges, stored at `f32` precision.
    pub bin_edges: Vec<f64>,
    pub hysteresis: f64,
    pub z_map: ZMap,
    pub borrowed: Vec<Option<usize>>,
    pub profile_hash: [u8; 32],
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CompileReport {
    pub bins: Vec<GridReport>,
    pub elapsed_ms: f64,
}

/// Sidecar document written next to a binary stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackSidecar {
    pub version: u32,
    pub profile_hash: String,
    pub config: Config,
    pub report: CompileReport,
}

fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

/// Compiles one grid per bin hull. Bins that borrowed a neighbour's hull
/// reuse that neighbour's grid.
pub fn compile_from_hulls(
    hulls: &[ConvexHull],
    borrowed: &[Option<usize>],
    bin_edges: &[f64],
    z_range: [f64; 2],
    profile_hash: [u8; 32],
    config: &Config,
) -> Result<(RemapStack, CompileReport), CompileError> {
    let start = Instant::now();
    if hulls.is_empty() || bin_edges.len() != hulls.len() + 1 || borrowed.len() != hulls.len() {
        return Err(CompileError::InvalidConfig(format!(
            "{} hulls, {} edges, {} borrow flags",
            hulls.len(),
            bin_edges.len(),
            borrowed.len()
        )));
    }
    let compiled: Vec<Option<(RemapGrid, GridReport)>> = (0..hulls.len())
        .into_par_iter()
        .map(|i| {
            if borrowed[i].is_some() {
                return Ok(None);
            }
            compile_grid(&hulls[i], config)
                .map(Some)
                .map_err(|e| match e {
                    CompileError::DegenerateHull { distance, minimum, .. } => CompileError::DegenerateHull {
                        bin: Some(i),
                        distance,
                        minimum,
                    },
                    other => other,
                })
        })
        .collect::<Result<_, _>>()?;

    let mut grids = Vec::with_capacity(hulls.len());
    let mut reports = Vec::with_capacity(hulls.len());
    for i in 0..hulls.len() {
        let source = borrowed[i].unwrap_or(i);
        let (grid, report) = compiled[source].clone().ok_or_else(|| {
            CompileError::InvalidConfig(format!("bin {i} borrows from bin {source}, which also borrows"))
        })?;
        grids.push(grid);
        reports.push(report);
    }

    let z_map = if config.z_stretch {
        ZMap::stretch(z_range[0], z_range[1])
    } else {
        ZMap::identity()
    };
    let stack = RemapStack {
        m_x: config.m_x,
        m_y: config.m_y,
        grids,
        bin_edges: bin_edges.iter().map(|e| f32_round(*e)).collect(),
        hysteresis: f32_round(config.hysteresis),
        z_map,
        borrowed: borrowed.to_vec(),
        profile_hash,
    };
    let report = CompileReport {
        bins: reports,
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    Ok((stack, report))
}

/// Compiles the full stack for a calibrated profile.
pub fn compile_stack(profile: &BiasProfile, config: &Config) -> Result<(RemapStack, CompileReport), CompileError> {
    let hulls: Vec<ConvexHull> = profile.bins.iter().map(|b| b.hull.clone()).collect();
    let borrowed: Vec<Option<usize>> = profile.bins.iter().map(|b| b.borrowed_from).collect();
    compile_from_hulls(
        &hulls,
        &borrowed,
        &profile.bin_edges,
        profile.z_range,
        profile.fingerprint(),
        config,
    )
}

impl RemapStack {
    pub fn m_z(&self) -> usize {
        self.grids.len()
    }

    pub fn bin_of(&self, u_z: f64) -> usize {
        bin_index(&self.bin_edges, u_z)
    }

    /// Bin for `u_z`, keeping `current` while `u_z` stays within the
    /// hysteresis band around that bin's edges.
    pub fn select_bin(&self, u_z: f64, current: Option<usize>) -> usize {
        let raw = self.bin_of(u_z);
        match current {
            Some(b) if b != raw && b < self.m_z() => {
                let lo = if b == 0 { f64::NEG_INFINITY } else { self.bin_edges[b] - self.hysteresis };
                let hi = if b + 1 == self.m_z() {
                    f64::INFINITY
                } else {
                    self.bin_edges[b + 1] + self.hysteresis
                };
                if (lo..hi).contains(&u_z) {
                    b
                } else {
                    raw
                }
            }
            _ => raw,
        }
    }

    pub fn lookup_in_bin(&self, u: &ControlSample, bin: usize) -> [f64; 3] {
        let p = self.grids[bin].evaluate(u.planar());
        [p.x, p.y, self.z_map.apply(u.u_z).clamp(-1.0, 1.0)]
    }

    /// Remaps one raw sample; total over the input cube.
    pub fn lookup(&self, u: &ControlSample) -> [f64; 3] {
        self.lookup_in_bin(u, self.bin_of(u.u_z))
    }

    pub fn profile_hash_hex(&self) -> String {
        hex::encode(self.profile_hash)
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<(), FormatError> {
        w.write_all(&STACK_MAGIC)?;
        w.write_u32::<LittleEndian>(STACK_VERSION)?;
        w.write_u32::<LittleEndian>(self.m_x as u32)?;
        w.write_u32::<LittleEndian>(self.m_y as u32)?;
        w.write_u32::<LittleEndian>(self.m_z() as u32)?;
        w.write_all(&self.profile_hash)?;

        let mut put = |v: f32| w.write_f32::<LittleEndian>(v);
        for e in &self.bin_edges {
            put(*e as f32)?;
        }
        put(self.hysteresis as f32)?;
        put(self.z_map.knots.len() as f32)?;
        for (a, b) in &self.z_map.knots {
            put(*a)?;
            put(*b)?;
        }
        for b in &self.borrowed {
            put(b.map_or(-1.0, |d| d as f32))?;
        }
        for g in &self.grids {
            for array in [&g.out_x, &g.out_y, &g.rho, &g.level] {
                for v in array.iter() {
                    put(*v)?;
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_binary(&mut buf).expect("writing to memory");
        buf
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self, FormatError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != STACK_MAGIC {
            return Err(FormatError::BadMagic);
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != STACK_VERSION {
            return Err(FormatError::VersionMismatch {
                found: version,
                supported: STACK_VERSION,
            });
        }
        let m_x = r.read_u32::<LittleEndian>()? as usize;
        let m_y = r.read_u32::<LittleEndian>()? as usize;
        let m_z = r.read_u32::<LittleEndian>()? as usize;
        if m_x < 2 || m_y < 2 || m_z == 0 || m_x * m_y > 1 << 26 || m_z > 1024 {
            return Err(FormatError::Malformed(format!("dimensions {m_x}×{m_y}×{m_z}")));
        }
        let mut profile_hash = [0u8; 32];
        r.read_exact(&mut profile_hash)?;

        let mut get = || r.read_f32::<LittleEndian>().map_err(FormatError::from);
        let bin_edges = (0..=m_z).map(|_| get().map(f64::from)).collect::<Result<Vec<_>, _>>()?;
        let hysteresis = get()? as f64;
        let n_knots = get()?;
        if !(2.0..=64.0).contains(&n_knots) || n_knots.fract() != 0.0 {
            return Err(FormatError::Malformed(format!("z-map knot count {n_knots}")));
        }
        let knots = (0..n_knots as usize)
            .map(|_| Ok((get()?, get()?)))
            .collect::<Result<Vec<_>, FormatError>>()?;
        let borrowed = (0..m_z)
            .map(|_| {
                get().map(|v| {
                    if v < 0.0 {
                        None
                    } else {
                        Some(v as usize)
                    }
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let n = m_x * m_y;
        let mut grids = Vec::with_capacity(m_z);
        for _ in 0..m_z {
            let mut arrays: [Vec<f32>; 4] = Default::default();
            for a in arrays.iter_mut() {
                *a = (0..n).map(|_| get()).collect::<Result<_, _>>()?;
            }
            let [out_x, out_y, rho, level] = arrays;
            grids.push(RemapGrid {
                m_x,
                m_y,
                out_x,
                out_y,
                rho,
                level,
            });
        }
        if r.read(&mut [0u8])? != 0 {
            return Err(FormatError::Malformed("trailing bytes after the last grid".into()));
        }
        Ok(Self {
            m_x,
            m_y,
            grids,
            bin_edges,
            hysteresis,
            z_map: ZMap { knots },
            borrowed,
            profile_hash,
        })
    }

    /// Writes `path` (binary) and `path` with a `.json` extension (sidecar).
    pub fn save(&self, path: &Path, config: &Config, report: &CompileReport) -> Result<(), FormatError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_binary(&mut f)?;
        f.flush()?;
        let sidecar = StackSidecar {
            version: STACK_VERSION,
            profile_hash: self.profile_hash_hex(),
            config: config.clone(),
            report: report.clone(),
        };
        std::fs::write(path.with_extension("json"), serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_binary(f)
    }
}
