//! Snapped Kuhn-lattice mesh generator for box outers with general
//! obstacle unions.
//!
//! A uniform cube grid aligned with the box is subdivided into six
//! tetrahedra per cube (all sharing the cube's main diagonal, which keeps
//! shared faces consistent between neighbors). Grid vertices close to the
//! obstacle surface are snapped onto it along the surface normal, after
//! which cells are classified by the region of their centroid. Faces whose
//! two cells straddle the interface then lie on the snapped surface, giving
//! a conforming (if slightly faceted) transmission interface.

use super::*;

pub(super) fn build(spec: &DomainSpec, h_target: f64) -> Result<Mesh> {
    // Warping can stretch edges; shrink the grid until the diameter
    // contract (max cell diameter ≤ 2·h_target) holds.
    let mut scale = 1.0;
    for _ in 0..4 {
        let mesh = build_with_spacing(spec, h_target, scale * h_target)?;
        if mesh.h <= 2.0 * h_target {
            return Ok(mesh);
        }
        scale *= 0.75;
    }
    Err(LabError::Geometry(
        "lattice warp kept exceeding the cell-diameter contract".into(),
    ))
}

fn build_with_spacing(spec: &DomainSpec, h_target: f64, spacing_max: f64) -> Result<Mesh> {
    let Solid::Box { min, max } = &spec.outer else {
        return Err(LabError::Geometry(
            "lattice generation requires a box outer domain".into(),
        ));
    };
    let obstacle = spec.obstacle.as_ref().ok_or_else(|| {
        LabError::Geometry("lattice generation expects an obstacle".into())
    })?;
    let dims = [
        (((max[0] - min[0]) / spacing_max).ceil() as usize).max(2),
        (((max[1] - min[1]) / spacing_max).ceil() as usize).max(2),
        (((max[2] - min[2]) / spacing_max).ceil() as usize).max(2),
    ];
    let spacing = [
        (max[0] - min[0]) / dims[0] as f64,
        (max[1] - min[1]) / dims[1] as f64,
        (max[2] - min[2]) / dims[2] as f64,
    ];
    let s_min = spacing.iter().cloned().fold(f64::INFINITY, f64::min);

    // Grid vertices.
    let nx = dims[0] + 1;
    let ny = dims[1] + 1;
    let nz = dims[2] + 1;
    let gid = |i: usize, j: usize, k: usize| -> usize { (i * ny + j) * nz + k };
    let mut vertices = Vec::with_capacity(nx * ny * nz);
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                vertices.push(Point::new(
                    min[0] + spacing[0] * i as f64,
                    min[1] + spacing[1] * j as f64,
                    min[2] + spacing[2] * k as f64,
                ));
            }
        }
    }

    // Kuhn subdivision: six tets around the main diagonal c000 → c111.
    let kuhn = |c: [usize; 8]| -> [[usize; 4]; 6] {
        // Corner order: c[bzyx] with bit 0 = x, bit 1 = y, bit 2 = z.
        let v000 = c[0b000];
        let v100 = c[0b001];
        let v010 = c[0b010];
        let v110 = c[0b011];
        let v001 = c[0b100];
        let v101 = c[0b101];
        let v011 = c[0b110];
        let v111 = c[0b111];
        [
            [v000, v100, v110, v111],
            [v000, v110, v010, v111],
            [v000, v010, v011, v111],
            [v000, v011, v001, v111],
            [v000, v001, v101, v111],
            [v000, v101, v100, v111],
        ]
    };

    let mut cells: Vec<[usize; 4]> = Vec::new();
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                let corners = [
                    gid(i, j, k),
                    gid(i + 1, j, k),
                    gid(i, j + 1, k),
                    gid(i + 1, j + 1, k),
                    gid(i, j, k + 1),
                    gid(i + 1, j, k + 1),
                    gid(i, j + 1, k + 1),
                    gid(i + 1, j + 1, k + 1),
                ];
                cells.extend_from_slice(&kuhn(corners));
            }
        }
    }

    // Edge warp: every mesh edge that strictly crosses the obstacle surface
    // gets its nearer endpoint moved (along the edge, by bisection of the
    // signed distance) onto the surface. A moved vertex has distance 0 and
    // never moves again, so the passes terminate; afterwards no edge joins
    // a strict-inside to a strict-outside vertex, and since a tetrahedron is
    // a complete graph on its vertices, every cell is cleanly one-sided.
    let mut edges: Vec<(usize, usize)> = Vec::new();
    {
        use std::collections::HashSet;
        let mut seen: HashSet<(usize, usize)> = HashSet::new();
        for cell in &cells {
            for a in 0..4 {
                for b in (a + 1)..4 {
                    let e = (cell[a].min(cell[b]), cell[a].max(cell[b]));
                    if seen.insert(e) {
                        edges.push(e);
                    }
                }
            }
        }
        edges.sort_unstable();
    }
    let tol = 1e-9 * s_min;
    let mut dist: Vec<f64> = vertices.iter().map(|v| obstacle.signed_distance(v)).collect();
    for _pass in 0..16 {
        let mut moved = false;
        for &(u, v) in &edges {
            let (du, dv) = (dist[u], dist[v]);
            if !(du > tol && dv < -tol || du < -tol && dv > tol) {
                continue;
            }
            let w = if du.abs() <= dv.abs() { u } else { v };
            // Bisection for the surface crossing on the segment u→v.
            let (mut lo, mut hi, lo_sign) = (0.0f64, 1.0f64, du);
            let a = vertices[u];
            let b = vertices[v];
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                let p = Point::from(a.coords * (1.0 - mid) + b.coords * mid);
                if obstacle.signed_distance(&p) * lo_sign > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let t = 0.5 * (lo + hi);
            vertices[w] = Point::from(a.coords * (1.0 - t) + b.coords * t);
            dist[w] = 0.0;
            moved = true;
        }
        if !moved {
            break;
        }
    }

    let cell_region: Vec<Region> = cells
        .iter()
        .map(|c| {
            let strict_inside = c.iter().any(|&v| dist[v] < -tol);
            let strict_outside = c.iter().any(|&v| dist[v] > tol);
            match (strict_inside, strict_outside) {
                (true, false) => Region::Minus,
                (false, true) => Region::Plus,
                (false, false) => {
                    // All four vertices on the surface: side by centroid.
                    let centroid = Point::from(
                        (vertices[c[0]].coords
                            + vertices[c[1]].coords
                            + vertices[c[2]].coords
                            + vertices[c[3]].coords)
                            / 4.0,
                    );
                    if obstacle.signed_distance(&centroid) < 0.0 {
                        Region::Minus
                    } else {
                        Region::Plus
                    }
                }
                (true, true) => Region::Plus, // unreachable after warp
            }
        })
        .collect();

    // Face adjacency for interface detection.
    use std::collections::HashMap;
    let mut face_map: HashMap<[usize; 3], Vec<usize>> = HashMap::new();
    for (ci, cell) in cells.iter().enumerate() {
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

    let mut facets: Vec<BoundaryFacet> = Vec::new();
    let mut on_outer = vec![false; vertices.len()];
    let mut on_iface = vec![false; vertices.len()];
    let outer_center = spec.outer.center();

    for (tri, adj) in &face_map {
        let (normal_raw, area, centroid) = {
            let a = vertices[tri[0]];
            let b = vertices[tri[1]];
            let c = vertices[tri[2]];
            let n = (b - a).cross(&(c - a));
            (
                n,
                0.5 * n.norm(),
                Point::from((a.coords + b.coords + c.coords) / 3.0),
            )
        };
        if area < 1e-14 * s_min * s_min {
            return Err(LabError::Geometry(
                "snapping produced a degenerate interface face; use a finer h".into(),
            ));
        }
        match adj.len() {
            1 => {
                // Outer boundary face (box faces are lattice-aligned).
                let ci = adj[0];
                let mut normal = normal_raw.normalize();
                let centroid_cell = Point::from(
                    (vertices[cells[ci][0]].coords
                        + vertices[cells[ci][1]].coords
                        + vertices[cells[ci][2]].coords
                        + vertices[cells[ci][3]].coords)
                        / 4.0,
                );
                if normal.dot(&(centroid - centroid_cell)) < 0.0 {
                    normal = -normal;
                }
                let tag = if spec.gamma.contains(&(centroid - outer_center)) {
                    FacetTag::Gamma
                } else {
                    FacetTag::OuterRest
                };
                for &v in tri {
                    on_outer[v] = true;
                }
                facets.push(BoundaryFacet {
                    vertices: *tri,
                    tag,
                    normal,
                    plus_cell: Some(ci),
                    minus_cell: None,
                    area,
                });
            }
            2 => {
                let (r0, r1) = (cell_region[adj[0]], cell_region[adj[1]]);
                if r0 != r1 {
                    let (pc, mc) = if r0 == Region::Plus {
                        (adj[0], adj[1])
                    } else {
                        (adj[1], adj[0])
                    };
                    // Interface face: verify its vertices sit on the
                    // snapped surface (resolution check).
                    for &v in tri {
                        if obstacle.signed_distance(&vertices[v]).abs() > 1e-6 * s_min {
                            return Err(LabError::Geometry(
                                "obstacle surface is under-resolved by the lattice; use a finer h"
                                    .into(),
                            ));
                        }
                        on_iface[v] = true;
                    }
                    let mut normal = normal_raw.normalize();
                    let mcentroid = Point::from(
                        (vertices[cells[mc][0]].coords
                            + vertices[cells[mc][1]].coords
                            + vertices[cells[mc][2]].coords
                            + vertices[cells[mc][3]].coords)
                            / 4.0,
                    );
                    if normal.dot(&(centroid - mcentroid)) < 0.0 {
                        normal = -normal;
                    }
                    facets.push(BoundaryFacet {
                        vertices: *tri,
                        tag: FacetTag::Interface,
                        normal,
                        plus_cell: Some(pc),
                        minus_cell: Some(mc),
                        area,
                    });
                }
            }
            _ => {
                return Err(LabError::Geometry(
                    "non-manifold face in lattice mesh".into(),
                ));
            }
        }
    }

    // Deterministic facet order (HashMap iteration is not).
    facets.sort_by(|a, b| a.vertices.cmp(&b.vertices));

    Mesh::finalize(
        vertices,
        cells,
        cell_region,
        facets,
        on_outer,
        on_iface,
        h_target,
    )
}
