//! Quadrature rules on tetrahedral meshes, with adaptive subdivision near
//! singular points.
//!
//! The assembly and probing integrals use fixed low-order rules:
//!
//! * tetrahedra — the symmetric 4-point rule, exact for quadratics;
//! * triangles — the symmetric 3-point rule, exact for quadratics.
//!
//! Integrands with a pole just outside the integration region (probe
//! kernels) are handled by recursive longest-edge bisection: a cell is
//! split until its diameter is at most half its distance to the pole, which
//! equidistributes the quadrature error of `|x − pole|^{−k}` integrands
//! across scales.

use crate::geometry::{tet_volume, Mesh, Point, Region, Vector};
use num_complex::Complex64;
use rayon::prelude::*;

/// Barycentric points and weights of the degree-2 tetrahedron rule
/// (weights sum to 1; multiply by the cell volume).
pub fn tet_rule_deg2() -> [([f64; 4], f64); 4] {
    let a = 0.585_410_196_624_968_5; // (5 + 3√5)/20
    let b = 0.138_196_601_125_010_5; // (5 − √5)/20
    [
        ([a, b, b, b], 0.25),
        ([b, a, b, b], 0.25),
        ([b, b, a, b], 0.25),
        ([b, b, b, a], 0.25),
    ]
}

/// Barycentric points and weights of the degree-2 triangle rule
/// (weights sum to 1; multiply by the facet area).
pub fn tri_rule_deg2() -> [([f64; 3], f64); 3] {
    let third = 1.0 / 3.0;
    [
        ([2.0 * third, third / 2.0, third / 2.0], third),
        ([third / 2.0, 2.0 * third, third / 2.0], third),
        ([third / 2.0, third / 2.0, 2.0 * third], third),
    ]
}

/// Quadrature nodes (point, weight) covering the cells of one region.
pub fn region_quadrature(mesh: &Mesh, region: Region) -> Vec<(Point, f64)> {
    let rule = tet_rule_deg2();
    let mut out = Vec::new();
    for (ci, cell) in mesh.cells.iter().enumerate() {
        if mesh.cell_region[ci] != region {
            continue;
        }
        let vol = mesh.cell_volume(ci);
        for (bc, w) in rule.iter() {
            let mut p = Vector::zeros();
            for i in 0..4 {
                p += mesh.vertices[cell[i]].coords * bc[i];
            }
            out.push((Point::from(p), w * vol));
        }
    }
    out
}

/// Integrates a complex integrand over a region with the fixed rule.
/// Deterministic: cells are mapped in parallel, then summed in index order.
pub fn integrate_region<F>(mesh: &Mesh, region: Region, f: F) -> Complex64
where
    F: Fn(&Point, usize) -> Complex64 + Sync,
{
    let rule = tet_rule_deg2();
    let partial: Vec<Complex64> = (0..mesh.cells.len())
        .into_par_iter()
        .map(|ci| {
            if mesh.cell_region[ci] != region {
                return Complex64::new(0.0, 0.0);
            }
            let cell = &mesh.cells[ci];
            let vol = mesh.cell_volume(ci);
            let mut acc = Complex64::new(0.0, 0.0);
            for (bc, w) in rule.iter() {
                let mut p = Vector::zeros();
                for i in 0..4 {
                    p += mesh.vertices[cell[i]].coords * bc[i];
                }
                acc += f(&Point::from(p), ci) * (w * vol);
            }
            acc
        })
        .collect();
    partial.into_iter().sum()
}

/// Integrates over the cells of a region with adaptive longest-edge
/// bisection near a pole: every leaf satisfies
/// `diam(leaf) ≤ ratio · dist(leaf centroid, pole)` (or the depth cap).
/// The integrand receives the quadrature point and the original cell index.
pub fn integrate_region_adaptive<F>(
    mesh: &Mesh,
    region: Region,
    pole: &Point,
    ratio: f64,
    max_depth: u32,
    f: F,
) -> Complex64
where
    F: Fn(&Point, usize) -> Complex64 + Sync,
{
    let partial: Vec<Complex64> = (0..mesh.cells.len())
        .into_par_iter()
        .map(|ci| {
            if mesh.cell_region[ci] != region {
                return Complex64::new(0.0, 0.0);
            }
            let cell = &mesh.cells[ci];
            let verts = [
                mesh.vertices[cell[0]],
                mesh.vertices[cell[1]],
                mesh.vertices[cell[2]],
                mesh.vertices[cell[3]],
            ];
            integrate_tet_adaptive(&verts, pole, ratio, max_depth, &|p| f(p, ci))
        })
        .collect();
    partial.into_iter().sum()
}

/// Adaptive integral over one tetrahedron (see `integrate_region_adaptive`).
pub fn integrate_tet_adaptive<F>(
    verts: &[Point; 4],
    pole: &Point,
    ratio: f64,
    max_depth: u32,
    f: &F,
) -> Complex64
where
    F: Fn(&Point) -> Complex64,
{
    // Longest edge.
    let mut longest = (0usize, 1usize, 0.0f64);
    for i in 0..4 {
        for j in (i + 1)..4 {
            let d = (verts[i] - verts[j]).norm();
            if d > longest.2 {
                longest = (i, j, d);
            }
        }
    }
    let diam = longest.2;
    let centroid = Point::from(
        (verts[0].coords + verts[1].coords + verts[2].coords + verts[3].coords) / 4.0,
    );
    let dist = (centroid - pole).norm();
    if max_depth == 0 || diam <= ratio * dist {
        let vol = tet_volume(&verts[0], &verts[1], &verts[2], &verts[3]).abs();
        let mut acc = Complex64::new(0.0, 0.0);
        for (bc, w) in tet_rule_deg2().iter() {
            let mut p = Vector::zeros();
            for i in 0..4 {
                p += verts[i].coords * bc[i];
            }
            acc += f(&Point::from(p)) * (w * vol);
        }
        return acc;
    }
    let mid = Point::from((verts[longest.0].coords + verts[longest.1].coords) / 2.0);
    let mut child_a = *verts;
    let mut child_b = *verts;
    child_a[longest.1] = mid;
    child_b[longest.0] = mid;
    integrate_tet_adaptive(&child_a, pole, ratio, max_depth - 1, f)
        + integrate_tet_adaptive(&child_b, pole, ratio, max_depth - 1, f)
}

/// Integrates a complex integrand over tagged facets. The integrand
/// receives the quadrature point, the facet's outward unit normal and the
/// facet index.
pub fn integrate_facets<F, P>(mesh: &Mesh, select: P, f: F) -> Complex64
where
    F: Fn(&Point, &Vector, usize) -> Complex64 + Sync,
    P: Fn(usize) -> bool + Sync,
{
    let rule = tri_rule_deg2();
    let partial: Vec<Complex64> = (0..mesh.facets.len())
        .into_par_iter()
        .map(|fi| {
            if !select(fi) {
                return Complex64::new(0.0, 0.0);
            }
            let facet = &mesh.facets[fi];
            let mut acc = Complex64::new(0.0, 0.0);
            for (bc, w) in rule.iter() {
                let mut p = Vector::zeros();
                for i in 0..3 {
                    p += mesh.vertices[facet.vertices[i]].coords * bc[i];
                }
                acc += f(&Point::from(p), &facet.normal, fi) * (w * facet.area);
            }
            acc
        })
        .collect();
    partial.into_iter().sum()
}

/// Adaptive facet integration: triangles are quadrisected until their
/// diameter is at most `ratio` times the distance to the pole; subdivision
/// midpoints can be reprojected onto the true surface via `project`.
pub fn integrate_facets_adaptive<F, P, Pr>(
    mesh: &Mesh,
    select: P,
    pole: &Point,
    ratio: f64,
    max_depth: u32,
    project: Pr,
    f: F,
) -> Complex64
where
    F: Fn(&Point, &Vector, usize) -> Complex64 + Sync,
    P: Fn(usize) -> bool + Sync,
    Pr: Fn(&Point) -> Point + Sync,
{
    let partial: Vec<Complex64> = (0..mesh.facets.len())
        .into_par_iter()
        .map(|fi| {
            if !select(fi) {
                return Complex64::new(0.0, 0.0);
            }
            let facet = &mesh.facets[fi];
            let tri = [
                mesh.vertices[facet.vertices[0]],
                mesh.vertices[facet.vertices[1]],
                mesh.vertices[facet.vertices[2]],
            ];
            integrate_tri_adaptive(&tri, &facet.normal, pole, ratio, max_depth, &project, &|p,
                n| {
                f(p, n, fi)
            })
        })
        .collect();
    partial.into_iter().sum()
}

fn integrate_tri_adaptive<F, Pr>(
    tri: &[Point; 3],
    normal: &Vector,
    pole: &Point,
    ratio: f64,
    max_depth: u32,
    project: &Pr,
    f: &F,
) -> Complex64
where
    F: Fn(&Point, &Vector) -> Complex64,
    Pr: Fn(&Point) -> Point,
{
    let diam = (tri[0] - tri[1])
        .norm()
        .max((tri[1] - tri[2]).norm())
        .max((tri[2] - tri[0]).norm());
    let centroid = Point::from((tri[0].coords + tri[1].coords + tri[2].coords) / 3.0);
    let dist = (centroid - pole).norm();
    if max_depth == 0 || diam <= ratio * dist {
        let area = 0.5 * (tri[1] - tri[0]).cross(&(tri[2] - tri[0])).norm();
        let mut acc = Complex64::new(0.0, 0.0);
        for (bc, w) in tri_rule_deg2().iter() {
            let mut p = Vector::zeros();
            for i in 0..3 {
                p += tri[i].coords * bc[i];
            }
            acc += f(&Point::from(p), normal) * (w * area);
        }
        return acc;
    }
    let m01 = project(&Point::from((tri[0].coords + tri[1].coords) / 2.0));
    let m12 = project(&Point::from((tri[1].coords + tri[2].coords) / 2.0));
    let m20 = project(&Point::from((tri[2].coords + tri[0].coords) / 2.0));
    let children = [
        [tri[0], m01, m20],
        [m01, tri[1], m12],
        [m20, m12, tri[2]],
        [m01, m12, m20],
    ];
    children
        .iter()
        .map(|c| integrate_tri_adaptive(c, normal, pole, ratio, max_depth - 1, project, f))
        .sum()
}
