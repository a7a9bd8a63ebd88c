//! Nested-domain descriptions, conforming tetrahedral meshes, and probe
//! pole placement.
//!
//! The laboratory operates on a pair of solids `D ⊂⊂ Ω`: an outer domain Ω
//! with boundary ∂Ω carrying an accessible patch γ, and an optional obstacle
//! D whose boundary ∂D is the transmission interface. Geometry is restricted
//! to an analytic catalog (balls, boxes, ellipsoids, convex polyhedra, and
//! disjoint unions for obstacles) so that normals, radial support functions,
//! and signed distances are exact — pole placement and near-boundary
//! integral oracles rely on that exactness.
//!
//! Two mesh generators cover the catalog:
//!
//! * **Onion** — for star-shaped configurations (single obstacle component,
//!   both surfaces star-shaped about the obstacle center): a cube-sphere
//!   direction grid times radial layers. The interface is then an exact
//!   union of mesh facets, which keeps transmission-condition quadrature
//!   clean.
//! * **Lattice** — for box outers with arbitrary obstacle unions: a Kuhn
//!   tetrahedral grid whose near-interface vertices are snapped onto the
//!   obstacle surface.
//!
//! Probe poles are placed as `x_δ = x₀ + δ·ν(x₀)` and validated by the
//! exterior-ball condition `B(x_δ, c·δ) ∩ closure(region) = ∅` with a
//! configurable constant `c` (default 0.5).

mod lattice;
mod onion;

use crate::{LabError, Result};
use serde::{Deserialize, Serialize};

/// 3D point.
pub type Point = nalgebra::Point3<f64>;
/// 3D vector.
pub type Vector = nalgebra::Vector3<f64>;

/// Default exterior-ball constant for pole placement.
pub const DEFAULT_EXTERIOR_BALL_C: f64 = 0.5;

/// Analytic solid catalog.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Solid {
    /// Ball with center and radius.
    Ball { center: [f64; 3], radius: f64 },
    /// Axis-aligned box.
    Box { min: [f64; 3], max: [f64; 3] },
    /// Axis-aligned ellipsoid with semi-axes.
    Ellipsoid { center: [f64; 3], semi_axes: [f64; 3] },
    /// Convex polyhedron as intersection of half-spaces n·x ≤ d
    /// (normals need not be unit; they are normalized on use).
    ConvexPolyhedron { halfspaces: Vec<([f64; 3], f64)> },
    /// Union of pairwise disjoint members (obstacles only).
    Union { members: Vec<Solid> },
}

impl Solid {
    /// A representative interior point (exact center for primitives).
    pub fn center(&self) -> Point {
        match self {
            Solid::Ball { center, .. } | Solid::Ellipsoid { center, .. } => {
                Point::new(center[0], center[1], center[2])
            }
            Solid::Box { min, max } => Point::new(
                0.5 * (min[0] + max[0]),
                0.5 * (min[1] + max[1]),
                0.5 * (min[2] + max[2]),
            ),
            Solid::ConvexPolyhedron { halfspaces } => {
                // Average of per-face foot points; adequate for the catalog's
                // well-centered polyhedra, validated by `contains`.
                let mut acc = Vector::zeros();
                for (n, d) in halfspaces {
                    let nv = Vector::new(n[0], n[1], n[2]);
                    let nn = nv.norm();
                    acc += nv * (*d / (nn * nn));
                }
                Point::from(acc / halfspaces.len() as f64)
            }
            Solid::Union { members } => members[0].center(),
        }
    }

    /// Membership test (closed solid).
    pub fn contains(&self, p: &Point) -> bool {
        match self {
            Solid::Ball { center, radius } => {
                let c = Point::new(center[0], center[1], center[2]);
                (p - c).norm() <= *radius
            }
            Solid::Box { min, max } => {
                (0..3).all(|i| p[i] >= min[i] && p[i] <= max[i])
            }
            Solid::Ellipsoid { center, semi_axes } => {
                let mut s = 0.0;
                for i in 0..3 {
                    let t = (p[i] - center[i]) / semi_axes[i];
                    s += t * t;
                }
                s <= 1.0
            }
            Solid::ConvexPolyhedron { halfspaces } => halfspaces.iter().all(|(n, d)| {
                let nv = Vector::new(n[0], n[1], n[2]);
                let nn = nv.norm();
                nv.dot(&p.coords) / nn <= *d / nn
            }),
            Solid::Union { members } => members.iter().any(|m| m.contains(p)),
        }
    }

    /// Signed distance to the boundary: negative inside, positive outside.
    /// Exact for balls, boxes and ellipsoids, and for interior points of
    /// convex polyhedra; for exterior points of polyhedra it is the
    /// max-halfspace value, a lower bound on the true distance (the
    /// conservative direction for exterior-ball checks).
    pub fn signed_distance(&self, p: &Point) -> f64 {
        match self {
            Solid::Ball { center, radius } => {
                let c = Point::new(center[0], center[1], center[2]);
                (p - c).norm() - *radius
            }
            Solid::Box { min, max } => {
                let mut outside = Vector::zeros();
                let mut inside_margin = f64::INFINITY;
                for i in 0..3 {
                    let lo = min[i] - p[i];
                    let hi = p[i] - max[i];
                    if lo > 0.0 {
                        outside[i] = lo;
                    } else if hi > 0.0 {
                        outside[i] = hi;
                    }
                    inside_margin = inside_margin.min((p[i] - min[i]).min(max[i] - p[i]));
                }
                let d_out = outside.norm();
                if d_out > 0.0 {
                    d_out
                } else {
                    -inside_margin
                }
            }
            Solid::Ellipsoid { center, semi_axes } => {
                ellipsoid_signed_distance(p, center, semi_axes)
            }
            Solid::ConvexPolyhedron { halfspaces } => {
                let mut worst = f64::NEG_INFINITY;
                for (n, d) in halfspaces {
                    let nv = Vector::new(n[0], n[1], n[2]);
                    let nn = nv.norm();
                    worst = worst.max((nv.dot(&p.coords) - *d) / nn);
                }
                worst
            }
            Solid::Union { members } => members
                .iter()
                .map(|m| m.signed_distance(p))
                .fold(f64::INFINITY, f64::min),
        }
    }

    /// Outward unit normal at (or near) a boundary point.
    pub fn normal_at(&self, p: &Point) -> Vector {
        match self {
            Solid::Ball { center, .. } => {
                let c = Point::new(center[0], center[1], center[2]);
                (p - c).normalize()
            }
            Solid::Box { min, max } => {
                // Face with the smallest slack wins.
                let mut best = (f64::INFINITY, Vector::x());
                for i in 0..3 {
                    let lo = (p[i] - min[i]).abs();
                    let hi = (max[i] - p[i]).abs();
                    let mut axis = Vector::zeros();
                    axis[i] = 1.0;
                    if lo < best.0 {
                        best = (lo, -axis);
                    }
                    if hi < best.0 {
                        best = (hi, axis);
                    }
                }
                best.1
            }
            Solid::Ellipsoid { center, semi_axes } => {
                let mut g = Vector::zeros();
                for i in 0..3 {
                    g[i] = (p[i] - center[i]) / (semi_axes[i] * semi_axes[i]);
                }
                g.normalize()
            }
            Solid::ConvexPolyhedron { halfspaces } => {
                let mut best = (f64::NEG_INFINITY, Vector::x());
                for (n, d) in halfspaces {
                    let nv = Vector::new(n[0], n[1], n[2]);
                    let nn = nv.norm();
                    let v = (nv.dot(&p.coords) - *d) / nn;
                    if v > best.0 {
                        best = (v, nv / nn);
                    }
                }
                best.1
            }
            Solid::Union { members } => {
                let nearest = members
                    .iter()
                    .min_by(|a, b| {
                        a.signed_distance(p)
                            .abs()
                            .total_cmp(&b.signed_distance(p).abs())
                    })
                    .expect("empty union");
                nearest.normal_at(p)
            }
        }
    }

    /// Distance from `origin` along unit direction `dir` to the boundary
    /// (the radial support function for star-shaped solids). `origin` must
    /// be inside the solid.
    pub fn radius_along(&self, origin: &Point, dir: &Vector) -> Result<f64> {
        let err = || {
            LabError::Geometry("radial support query failed: origin outside or grazing ray".into())
        };
        match self {
            Solid::Ball { center, radius } => {
                let c = Point::new(center[0], center[1], center[2]);
                let oc = origin - c;
                // |oc + t d|² = R²
                let b = oc.dot(dir);
                let disc = b * b - (oc.norm_squared() - radius * radius);
                if disc < 0.0 {
                    return Err(err());
                }
                let t = -b + disc.sqrt();
                if t <= 0.0 {
                    return Err(err());
                }
                Ok(t)
            }
            Solid::Ellipsoid { center, semi_axes } => {
                let mut a2 = 0.0;
                let mut b2 = 0.0;
                let mut c2 = -1.0;
                for i in 0..3 {
                    let oi = (origin[i] - center[i]) / semi_axes[i];
                    let di = dir[i] / semi_axes[i];
                    a2 += di * di;
                    b2 += 2.0 * oi * di;
                    c2 += oi * oi;
                }
                let disc = b2 * b2 - 4.0 * a2 * c2;
                if disc < 0.0 {
                    return Err(err());
                }
                let t = (-b2 + disc.sqrt()) / (2.0 * a2);
                if t <= 0.0 {
                    return Err(err());
                }
                Ok(t)
            }
            Solid::Box { min, max } => {
                let mut t_exit = f64::INFINITY;
                for i in 0..3 {
                    if dir[i].abs() < 1e-300 {
                        continue;
                    }
                    let t1 = (min[i] - origin[i]) / dir[i];
                    let t2 = (max[i] - origin[i]) / dir[i];
                    let t_hi = t1.max(t2);
                    t_exit = t_exit.min(t_hi);
                }
                if !t_exit.is_finite() || t_exit <= 0.0 {
                    return Err(err());
                }
                Ok(t_exit)
            }
            Solid::ConvexPolyhedron { halfspaces } => {
                let mut t_exit = f64::INFINITY;
                for (n, d) in halfspaces {
                    let nv = Vector::new(n[0], n[1], n[2]);
                    let denom = nv.dot(dir);
                    if denom > 1e-300 {
                        let t = (*d - nv.dot(&origin.coords)) / denom;
                        t_exit = t_exit.min(t);
                    }
                }
                if !t_exit.is_finite() || t_exit <= 0.0 {
                    return Err(err());
                }
                Ok(t_exit)
            }
            Solid::Union { .. } => Err(LabError::Geometry(
                "unions are not star-shaped; no radial support".into(),
            )),
        }
    }

    /// Axis-aligned bounding box.
    pub fn bounding_box(&self) -> (Point, Point) {
        match self {
            Solid::Ball { center, radius } => (
                Point::new(center[0] - radius, center[1] - radius, center[2] - radius),
                Point::new(center[0] + radius, center[1] + radius, center[2] + radius),
            ),
            Solid::Box { min, max } => (
                Point::new(min[0], min[1], min[2]),
                Point::new(max[0], max[1], max[2]),
            ),
            Solid::Ellipsoid { center, semi_axes } => (
                Point::new(
                    center[0] - semi_axes[0],
                    center[1] - semi_axes[1],
                    center[2] - semi_axes[2],
                ),
                Point::new(
                    center[0] + semi_axes[0],
                    center[1] + semi_axes[1],
                    center[2] + semi_axes[2],
                ),
            ),
            Solid::ConvexPolyhedron { .. } => {
                // Sample the support function over a direction fan.
                let c = self.center();
                let mut lo = c;
                let mut hi = c;
                for dir in fibonacci_directions(256) {
                    if let Ok(t) = self.radius_along(&c, &dir) {
                        let p = c + dir * t;
                        for i in 0..3 {
                            lo[i] = lo[i].min(p[i]);
                            hi[i] = hi[i].max(p[i]);
                        }
                    }
                }
                (lo, hi)
            }
            Solid::Union { members } => {
                let mut lo = Point::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
                let mut hi = Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
                for m in members {
                    let (l, h) = m.bounding_box();
                    for i in 0..3 {
                        lo[i] = lo[i].min(l[i]);
                        hi[i] = hi[i].max(h[i]);
                    }
                }
                (lo, hi)
            }
        }
    }

    /// Diameter estimate from the bounding box.
    pub fn diameter(&self) -> f64 {
        let (lo, hi) = self.bounding_box();
        (hi - lo).norm()
    }

    /// Deterministic quasi-uniform boundary samples (star solids sample the
    /// support function; unions sample each member).
    pub fn surface_samples(&self, count: usize) -> Vec<Point> {
        match self {
            Solid::Union { members } => {
                let per = (count / members.len()).max(8);
                members
                    .iter()
                    .flat_map(|m| m.surface_samples(per))
                    .collect()
            }
            _ => {
                let c = self.center();
                fibonacci_directions(count)
                    .into_iter()
                    .filter_map(|d| self.radius_along(&c, &d).ok().map(|t| c + d * t))
                    .collect()
            }
        }
    }

    /// Members of a union (a primitive is its own single component).
    pub fn components(&self) -> Vec<&Solid> {
        match self {
            Solid::Union { members } => members.iter().collect(),
            s => vec![s],
        }
    }
}

/// Exact signed distance to an axis-aligned ellipsoid via the Lagrange
/// parameter: the closest boundary point satisfies
/// `x_i = a_i² p_i / (a_i² + t)` with `Σ (a_i p_i / (a_i² + t))² = 1`,
/// solved by bisection in t ∈ (−min a_i², ∞).
fn ellipsoid_signed_distance(p: &Point, center: &[f64; 3], semi_axes: &[f64; 3]) -> f64 {
    let q = [
        p[0] - center[0],
        p[1] - center[1],
        p[2] - center[2],
    ];
    let level: f64 = (0..3).map(|i| (q[i] / semi_axes[i]).powi(2)).sum();
    if level < 1e-300 {
        return -semi_axes.iter().cloned().fold(f64::INFINITY, f64::min);
    }
    let inside = level <= 1.0;

    let val = |t: f64| -> f64 {
        (0..3)
            .map(|i| {
                let a2 = semi_axes[i] * semi_axes[i];
                let num = semi_axes[i] * q[i] / (a2 + t);
                num * num
            })
            .sum::<f64>()
            - 1.0
    };
    // Bracket the root.
    let a2min = semi_axes.iter().map(|a| a * a).fold(f64::INFINITY, f64::min);
    let mut lo = -a2min + 1e-14 * a2min.max(1.0);
    let mut hi = 1.0;
    // For outside points t* > 0, inside t* ∈ (−a_min², 0).
    if inside {
        hi = 0.0;
    } else {
        lo = 0.0;
        while val(hi) > 0.0 {
            hi *= 2.0;
            if hi > 1e12 {
                break;
            }
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if val(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let t = 0.5 * (lo + hi);
    let mut dist2 = 0.0;
    for i in 0..3 {
        let a2 = semi_axes[i] * semi_axes[i];
        let xi = a2 * q[i] / (a2 + t);
        dist2 += (q[i] - xi) * (q[i] - xi);
    }
    let d = dist2.sqrt();
    if inside {
        -d
    } else {
        d
    }
}

/// Deterministic Fibonacci-lattice unit directions.
pub fn fibonacci_directions(count: usize) -> Vec<Vector> {
    let phi = (1.0 + 5.0f64.sqrt()) / 2.0;
    (0..count)
        .map(|k| {
            let z = 1.0 - (2.0 * k as f64 + 1.0) / count as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let theta = 2.0 * std::f64::consts::PI * (k as f64 / phi).fract();
            Vector::new(r * theta.cos(), r * theta.sin(), z)
        })
        .collect()
}

/// Smoothness tag for a catalog surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SurfaceRegularity {
    /// Lipschitz only (e.g. box corners).
    Lipschitz,
    /// Continuously differentiable.
    C1,
    /// Derivative Lipschitz (spheres, ellipsoids).
    C11,
}

/// Accessible boundary patch: the solid-angle sector of ∂Ω whose points `x`
/// satisfy `angle(x − center, axis) ≤ half_angle`. A half-angle ≥ π marks
/// the whole boundary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundaryPatch {
    /// Sector axis (normalized on use).
    pub axis: [f64; 3],
    /// Sector half-angle in radians.
    pub half_angle: f64,
}

impl BoundaryPatch {
    /// The full boundary.
    pub fn full() -> Self {
        BoundaryPatch {
            axis: [0.0, 0.0, 1.0],
            half_angle: std::f64::consts::PI + 1.0,
        }
    }

    /// Whether a boundary point (relative to the outer center) lies in γ.
    pub fn contains(&self, rel: &Vector) -> bool {
        if self.half_angle >= std::f64::consts::PI {
            return true;
        }
        let axis = Vector::new(self.axis[0], self.axis[1], self.axis[2]).normalize();
        let r = rel.norm();
        if r < 1e-300 {
            return false;
        }
        (rel.dot(&axis) / r).clamp(-1.0, 1.0).acos() <= self.half_angle
    }
}

/// Description of the nested computational domains.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainSpec {
    /// Ambient dimension; meshes and solvers require 3, kernel formulas are
    /// generic.
    pub dimension: usize,
    /// Outer domain Ω.
    pub outer: Solid,
    /// Obstacle D (optional; may be a disjoint union).
    pub obstacle: Option<Solid>,
    /// Accessible patch γ ⊂ ∂Ω.
    pub gamma: BoundaryPatch,
    /// Regularity tag for ∂Ω.
    pub outer_regularity: SurfaceRegularity,
    /// Regularity tag for ∂D.
    pub obstacle_regularity: SurfaceRegularity,
}

impl DomainSpec {
    /// Ball-in-ball configuration used throughout the catalog scenarios.
    pub fn ball_in_ball(outer_radius: f64, obstacle_radius: f64) -> Self {
        DomainSpec {
            dimension: 3,
            outer: Solid::Ball {
                center: [0.0; 3],
                radius: outer_radius,
            },
            obstacle: Some(Solid::Ball {
                center: [0.0; 3],
                radius: obstacle_radius,
            }),
            gamma: BoundaryPatch::full(),
            outer_regularity: SurfaceRegularity::C11,
            obstacle_regularity: SurfaceRegularity::C11,
        }
    }

    /// Outer ball without an obstacle.
    pub fn ball(outer_radius: f64) -> Self {
        DomainSpec {
            dimension: 3,
            outer: Solid::Ball {
                center: [0.0; 3],
                radius: outer_radius,
            },
            obstacle: None,
            gamma: BoundaryPatch::full(),
            outer_regularity: SurfaceRegularity::C11,
            obstacle_regularity: SurfaceRegularity::C11,
        }
    }

    /// Nesting margin: minimal distance from the obstacle surface to ∂Ω
    /// (∞ without an obstacle).
    pub fn nesting_margin(&self) -> f64 {
        let Some(obstacle) = &self.obstacle else {
            return f64::INFINITY;
        };
        let mut margin = f64::INFINITY;
        for p in obstacle.surface_samples(512) {
            // Inside Ω the signed distance is negative; its magnitude is the
            // distance to ∂Ω (exact for the convex catalog).
            let sd = self.outer.signed_distance(&p);
            if sd >= 0.0 {
                return -1.0; // obstacle pokes out of Ω
            }
            margin = margin.min(-sd);
        }
        margin
    }

    /// Validates the structural invariants: strict nesting with positive
    /// margin, obstacle components pairwise disjoint, γ nonempty.
    pub fn validate(&self) -> Result<()> {
        if self.dimension != 3 {
            return Err(LabError::Geometry(format!(
                "meshes and solvers require dimension 3, got {}",
                self.dimension
            )));
        }
        if matches!(self.outer, Solid::Union { .. }) {
            return Err(LabError::Geometry(
                "outer domain must be a single connected primitive".into(),
            ));
        }
        if self.gamma.half_angle <= 0.0 {
            return Err(LabError::Geometry("boundary patch γ is empty".into()));
        }
        if let Some(obstacle) = &self.obstacle {
            let margin = self.nesting_margin();
            if margin <= 0.0 {
                return Err(LabError::Geometry(
                    "obstacle closure is not strictly inside the outer domain".into(),
                ));
            }
            // Pairwise disjointness of union members, by mutual samples.
            let comps = obstacle.components();
            for i in 0..comps.len() {
                for j in (i + 1)..comps.len() {
                    for p in comps[i].surface_samples(128) {
                        if comps[j].signed_distance(&p) <= 0.0 {
                            return Err(LabError::Geometry(
                                "obstacle union members must be pairwise disjoint".into(),
                            ));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Mesh region label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Region {
    /// Ω ∖ D̄ (the exterior side of the interface).
    Plus,
    /// D (the obstacle side).
    Minus,
}

/// Tag of a tagged facet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FacetTag {
    /// Accessible patch γ ⊂ ∂Ω.
    Gamma,
    /// ∂Ω ∖ γ.
    OuterRest,
    /// Transmission interface ∂D.
    Interface,
}

/// A tagged triangular facet: outer-boundary facets know their owning cell;
/// interface facets know both neighbors.
#[derive(Debug, Clone)]
pub struct BoundaryFacet {
    /// Vertex indices.
    pub vertices: [usize; 3],
    /// Tag.
    pub tag: FacetTag,
    /// Outward unit normal (from Ω on ∂Ω, from D on ∂D).
    pub normal: Vector,
    /// Adjacent cell on the + side (`None` only for Minus-only meshes).
    pub plus_cell: Option<usize>,
    /// Adjacent cell on the − side (interface facets only).
    pub minus_cell: Option<usize>,
    /// Facet area.
    pub area: f64,
}

/// Conforming tetrahedral mesh with tagged interface and boundary facets.
#[derive(Debug, Clone)]
pub struct Mesh {
    /// Vertex coordinates.
    pub vertices: Vec<Point>,
    /// Tetrahedra as 4 vertex indices, positively oriented.
    pub cells: Vec<[usize; 4]>,
    /// Region label per cell.
    pub cell_region: Vec<Region>,
    /// Tagged facets (interface and outer boundary).
    pub facets: Vec<BoundaryFacet>,
    /// Marker: vertex lies on ∂Ω.
    pub vertex_on_outer: Vec<bool>,
    /// Marker: vertex lies on ∂D.
    pub vertex_on_interface: Vec<bool>,
    /// Achieved characteristic size (max cell diameter).
    pub h: f64,
    /// Requested target size.
    pub h_target: f64,
    locator: CellLocator,
}

/// Uniform-bin point locator over cells.
#[derive(Debug, Clone)]
struct CellLocator {
    lo: Point,
    inv_spacing: f64,
    dims: [usize; 3],
    bins: Vec<Vec<u32>>,
}

impl CellLocator {
    fn build(vertices: &[Point], cells: &[[usize; 4]]) -> Self {
        let mut lo = Point::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
        let mut hi = Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for v in vertices {
            for i in 0..3 {
                lo[i] = lo[i].min(v[i]);
                hi[i] = hi[i].max(v[i]);
            }
        }
        let extent = (hi - lo).norm().max(1e-12);
        let target_bins = (cells.len() as f64).cbrt().ceil().max(2.0) as usize;
        let spacing = extent / target_bins as f64;
        let dims = [
            (((hi[0] - lo[0]) / spacing).ceil() as usize).max(1),
            (((hi[1] - lo[1]) / spacing).ceil() as usize).max(1),
            (((hi[2] - lo[2]) / spacing).ceil() as usize).max(1),
        ];
        let mut bins = vec![Vec::new(); dims[0] * dims[1] * dims[2]];
        let clampi = |x: f64, d: usize| -> usize {
            (x.floor() as i64).clamp(0, d as i64 - 1) as usize
        };
        for (ci, cell) in cells.iter().enumerate() {
            let mut clo = [f64::INFINITY; 3];
            let mut chi = [f64::NEG_INFINITY; 3];
            for &v in cell {
                for i in 0..3 {
                    clo[i] = clo[i].min(vertices[v][i]);
                    chi[i] = chi[i].max(vertices[v][i]);
                }
            }
            let i0 = clampi((clo[0] - lo[0]) / spacing, dims[0]);
            let i1 = clampi((chi[0] - lo[0]) / spacing, dims[0]);
            let j0 = clampi((clo[1] - lo[1]) / spacing, dims[1]);
            let j1 = clampi((chi[1] - lo[1]) / spacing, dims[1]);
            let k0 = clampi((clo[2] - lo[2]) / spacing, dims[2]);
            let k1 = clampi((chi[2] - lo[2]) / spacing, dims[2]);
            for i in i0..=i1 {
                for j in j0..=j1 {
                    for k in k0..=k1 {
                        bins[(i * dims[1] + j) * dims[2] + k].push(ci as u32);
                    }
                }
            }
        }
        CellLocator {
            lo,
            inv_spacing: 1.0 / spacing,
            dims,
            bins,
        }
    }

    fn candidates(&self, p: &Point) -> &[u32] {
        let idx = |x: f64, d: usize| -> usize {
            ((x * self.inv_spacing).floor() as i64).clamp(0, d as i64 - 1) as usize
        };
        let i = idx(p[0] - self.lo[0], self.dims[0]);
        let j = idx(p[1] - self.lo[1], self.dims[1]);
        let k = idx(p[2] - self.lo[2], self.dims[2]);
        &self.bins[(i * self.dims[1] + j) * self.dims[2] + k]
    }
}

/// Barycentric coordinates of `p` in tetrahedron `cell`.
pub fn barycentric(vertices: &[Point], cell: &[usize; 4], p: &Point) -> [f64; 4] {
    let a = vertices[cell[0]];
    let b = vertices[cell[1]];
    let c = vertices[cell[2]];
    let d = vertices[cell[3]];
    let m = nalgebra::Matrix3::from_columns(&[b - a, c - a, d - a]);
    match m.lu().solve(&(p - a)) {
        Some(x) => [1.0 - x[0] - x[1] - x[2], x[0], x[1], x[2]],
        None => [-1.0, -1.0, -1.0, -1.0],
    }
}

/// Signed volume of a tetrahedron.
pub fn tet_volume(a: &Point, b: &Point, c: &Point, d: &Point) -> f64 {
    (b - a).cross(&(c - a)).dot(&(d - a)) / 6.0
}

impl Mesh {
    pub(crate) fn finalize(
        vertices: Vec<Point>,
        mut cells: Vec<[usize; 4]>,
        cell_region: Vec<Region>,
        facets: Vec<BoundaryFacet>,
        vertex_on_outer: Vec<bool>,
        vertex_on_interface: Vec<bool>,
        h_target: f64,
    ) -> Result<Mesh> {
        // Orient all cells positively.
        for cell in cells.iter_mut() {
            let vol = tet_volume(
                &vertices[cell[0]],
                &vertices[cell[1]],
                &vertices[cell[2]],
                &vertices[cell[3]],
            );
            if vol < 0.0 {
                cell.swap(2, 3);
            }
        }
        // Positive-volume invariant.
        let mut h = 0.0f64;
        for cell in &cells {
            let vol = tet_volume(
                &vertices[cell[0]],
                &vertices[cell[1]],
                &vertices[cell[2]],
                &vertices[cell[3]],
            );
            if vol <= 0.0 {
                return Err(LabError::Geometry(
                    "mesh generation produced a degenerate cell".into(),
                ));
            }
            for i in 0..4 {
                for j in (i + 1)..4 {
                    h = h.max((vertices[cell[i]] - vertices[cell[j]]).norm());
                }
            }
        }
        let locator = CellLocator::build(&vertices, &cells);
        Ok(Mesh {
            vertices,
            cells,
            cell_region,
            facets,
            vertex_on_outer,
            vertex_on_interface,
            h,
            h_target,
            locator,
        })
    }

    /// Number of cells in a region.
    pub fn region_cell_count(&self, region: Region) -> usize {
        self.cell_region.iter().filter(|&&r| r == region).count()
    }

    /// Locates the cell containing `p`; returns (cell index, barycentric
    /// coordinates). Points outside the mesh return `None`.
    pub fn locate(&self, p: &Point) -> Option<(usize, [f64; 4])> {
        let mut best: Option<(usize, [f64; 4], f64)> = None;
        for &ci in self.locator.candidates(p) {
            let bc = barycentric(&self.vertices, &self.cells[ci as usize], p);
            let worst = bc.iter().cloned().fold(f64::INFINITY, f64::min);
            if worst >= -1e-9 {
                return Some((ci as usize, bc));
            }
            if best.map_or(true, |(_, _, w)| worst > w) {
                best = Some((ci as usize, bc, worst));
            }
        }
        // Accept a slightly-outside match (snapped surfaces, round-off).
        best.and_then(|(ci, bc, w)| if w > -1e-6 { Some((ci, bc)) } else { None })
    }

    /// Volume of a cell.
    pub fn cell_volume(&self, ci: usize) -> f64 {
        let c = &self.cells[ci];
        tet_volume(
            &self.vertices[c[0]],
            &self.vertices[c[1]],
            &self.vertices[c[2]],
            &self.vertices[c[3]],
        )
    }

    /// Centroid of a cell.
    pub fn cell_centroid(&self, ci: usize) -> Point {
        let c = &self.cells[ci];
        let s = self.vertices[c[0]].coords
            + self.vertices[c[1]].coords
            + self.vertices[c[2]].coords
            + self.vertices[c[3]].coords;
        Point::from(s / 4.0)
    }

    /// Constant gradient of the P1 basis functions on a cell: rows are
    /// ∇λ_i, the barycentric gradients.
    pub fn cell_gradients(&self, ci: usize) -> [Vector; 4] {
        let c = &self.cells[ci];
        let a = self.vertices[c[0]];
        let b = self.vertices[c[1]];
        let cc = self.vertices[c[2]];
        let d = self.vertices[c[3]];
        let m = nalgebra::Matrix3::from_columns(&[b - a, cc - a, d - a]);
        let inv = m.try_inverse().expect("positive cell is invertible");
        // x = a + M ξ, λ_1..3 = ξ, λ_0 = 1 − Σξ; ∇ξ_i are the rows of M⁻¹.
        let g1 = Vector::new(inv[(0, 0)], inv[(0, 1)], inv[(0, 2)]);
        let g2 = Vector::new(inv[(1, 0)], inv[(1, 1)], inv[(1, 2)]);
        let g3 = Vector::new(inv[(2, 0)], inv[(2, 1)], inv[(2, 2)]);
        [-(g1 + g2 + g3), g1, g2, g3]
    }

    /// Evaluates a P1 coefficient vector at a point.
    pub fn eval_p1(&self, coeffs: &[num_complex::Complex64], p: &Point) -> Option<num_complex::Complex64> {
        self.locate(p).map(|(ci, bc)| {
            let c = &self.cells[ci];
            (0..4).map(|i| coeffs[c[i]] * bc[i]).sum()
        })
    }

    /// Evaluates the (cellwise-constant) gradient of a P1 vector at a point.
    pub fn eval_p1_gradient(
        &self,
        coeffs: &[num_complex::Complex64],
        p: &Point,
    ) -> Option<[num_complex::Complex64; 3]> {
        self.locate(p).map(|(ci, _)| self.gradient_in_cell(coeffs, ci))
    }

    /// Gradient of a P1 vector in a given cell.
    pub fn gradient_in_cell(
        &self,
        coeffs: &[num_complex::Complex64],
        ci: usize,
    ) -> [num_complex::Complex64; 3] {
        let grads = self.cell_gradients(ci);
        let c = &self.cells[ci];
        let mut g = [num_complex::Complex64::new(0.0, 0.0); 3];
        for i in 0..4 {
            let coeff = coeffs[c[i]];
            for d in 0..3 {
                g[d] += coeff * grads[i][d];
            }
        }
        g
    }

    /// Plain-text export: vertex and cell listings for external viewers.
    pub fn export_listing(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("vertices {}\n", self.vertices.len()));
        for v in &self.vertices {
            s.push_str(&format!("{:.17e} {:.17e} {:.17e}\n", v[0], v[1], v[2]));
        }
        s.push_str(&format!("cells {}\n", self.cells.len()));
        for (cell, region) in self.cells.iter().zip(&self.cell_region) {
            let r = match region {
                Region::Plus => '+',
                Region::Minus => '-',
            };
            s.push_str(&format!(
                "{} {} {} {} {}\n",
                cell[0], cell[1], cell[2], cell[3], r
            ));
        }
        s
    }
}

/// Builds a conforming tetrahedral mesh for a domain description.
///
/// Star-shaped configurations (no obstacle, or a single obstacle component
/// with both surfaces star-shaped about the obstacle center) use the onion
/// generator; box outers with general obstacle unions use the snapped Kuhn
/// lattice. The returned mesh satisfies max cell diameter ≤ 2·h_target.
pub fn build_mesh(spec: &DomainSpec, h_target: f64) -> Result<Mesh> {
    spec.validate()?;
    if h_target <= 0.0 {
        return Err(LabError::Geometry("h_target must be positive".into()));
    }
    let margin = spec.nesting_margin();
    if margin < 1.5 * h_target {
        return Err(LabError::Geometry(format!(
            "nesting margin {margin:.4} is below mesh resolution (need ≥ 1.5·h = {:.4})",
            1.5 * h_target
        )));
    }

    let star_ok = match &spec.obstacle {
        None => true,
        Some(Solid::Union { .. }) => false,
        Some(_) => true,
    };
    if star_ok {
        onion::build(spec, h_target)
    } else if matches!(spec.outer, Solid::Box { .. }) {
        lattice::build(spec, h_target)
    } else {
        Err(LabError::Geometry(
            "multi-component obstacles require a box outer domain in this catalog".into(),
        ))
    }
}

/// Places a probe pole `x_δ = x0 + δ·ν` and verifies the exterior-ball
/// condition `B(x_δ, c·δ) ∩ closure(region) = ∅` for the probed region.
pub fn place_pole(
    region: &Solid,
    x0: &Point,
    nu: &Vector,
    delta: f64,
    c: f64,
) -> Result<Point> {
    if delta <= 0.0 {
        return Err(LabError::PolePlacement("delta must be positive".into()));
    }
    if (nu.norm() - 1.0).abs() > 1e-9 {
        return Err(LabError::PolePlacement("nu must be a unit vector".into()));
    }
    let x_delta = x0 + nu * delta;
    // dist(x_δ, region) ≥ c·δ ⟺ the open ball B(x_δ, cδ) misses the region.
    let dist = region.signed_distance(&x_delta);
    if dist < c * delta - 1e-12 {
        return Err(LabError::PolePlacement(format!(
            "exterior-ball check failed: dist(pole, region) = {dist:.3e} < c·δ = {:.3e}",
            c * delta
        )));
    }
    Ok(x_delta)
}

/// Connectivity summary of a mesh.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConnectivityReport {
    /// Number of connected components of the + region.
    pub plus_components: usize,
    /// Number of connected components of the − region.
    pub minus_components: usize,
    /// Component count per region expected from the DomainSpec, when given.
    pub expected_minus_components: Option<usize>,
    /// Whether the counts match the expectation.
    pub matches_spec: bool,
    /// Tags adjacent to each + component (sorted, deduplicated).
    pub plus_boundary_tags: Vec<Vec<FacetTag>>,
}

/// Computes region components by same-region face adjacency, and which
/// tagged surfaces touch each + component.
pub fn connectivity_report(mesh: &Mesh, spec: Option<&DomainSpec>) -> ConnectivityReport {
    use std::collections::HashMap;

    // Face-to-cells adjacency.
    let mut face_map: HashMap<[usize; 3], Vec<usize>> = HashMap::new();
    for (ci, cell) in mesh.cells.iter().enumerate() {
        for f in 0..4 {
            let mut tri = [
                cell[(f + 1) % 4],
                cell[(f + 2) % 4],
                cell[(f + 3) % 4],
            ];
            tri.sort_unstable();
            face_map.entry(tri).or_default().push(ci);
        }
    }

    // Union-find over same-region neighbors.
    let n = mesh.cells.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for cells in face_map.values() {
        if cells.len() == 2 && mesh.cell_region[cells[0]] == mesh.cell_region[cells[1]] {
            let a = find(&mut parent, cells[0]);
            let b = find(&mut parent, cells[1]);
            parent[a.max(b)] = a.min(b);
        }
    }

    let mut plus_roots: Vec<usize> = Vec::new();
    let mut minus_roots: Vec<usize> = Vec::new();
    for ci in 0..n {
        let r = find(&mut parent, ci);
        match mesh.cell_region[ci] {
            Region::Plus => {
                if !plus_roots.contains(&r) {
                    plus_roots.push(r);
                }
            }
            Region::Minus => {
                if !minus_roots.contains(&r) {
                    minus_roots.push(r);
                }
            }
        }
    }

    // Boundary adjacency of + components.
    let mut plus_tags: Vec<Vec<FacetTag>> = vec![Vec::new(); plus_roots.len()];
    for facet in &mesh.facets {
        if let Some(pc) = facet.plus_cell {
            let r = find(&mut parent, pc);
            if let Some(k) = plus_roots.iter().position(|&x| x == r) {
                if !plus_tags[k].contains(&facet.tag) {
                    plus_tags[k].push(facet.tag);
                }
            }
        }
    }

    let expected_minus = spec.map(|s| {
        s.obstacle
            .as_ref()
            .map(|o| o.components().len())
            .unwrap_or(0)
    });
    let matches_spec = match expected_minus {
        Some(exp) => minus_roots.len() == exp && plus_roots.len() == 1,
        None => true,
    };

    ConnectivityReport {
        plus_components: plus_roots.len(),
        minus_components: minus_roots.len(),
        expected_minus_components: expected_minus,
        matches_spec,
        plus_boundary_tags: plus_tags,
    }
}
