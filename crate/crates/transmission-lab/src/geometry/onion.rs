//! Onion mesh generator for star-shaped nested domains.
//!
//! A cube-sphere direction grid (six N×N face patches, shared edges
//! deduplicated) is swept radially from the obstacle center. The obstacle
//! surface and ∂Ω each coincide with one vertex shell, so the transmission
//! interface is exactly a union of mesh facets:
//!
//! ```text
//!        ∂Ω shell ───────●───●───●
//!                        │   │   │    + region (prism shells → 3 tets each)
//!        ∂D shell ───────●───●───●
//!                        │   │   │    − region
//!        center ─────────●───●───●    (innermost shell cones to the center)
//! ```
//!
//! Quad faces are triangulated by the min-global-index diagonal rule and
//! prisms are tetrahedralized by coning from their minimal-index vertex, so
//! neighboring cells always agree on shared faces.

use super::*;

/// Builds the onion mesh. Requires either no obstacle or a single obstacle
/// component, with all surfaces star-shaped about the obstacle center.
pub(super) fn build(spec: &DomainSpec, h_target: f64) -> Result<Mesh> {
    let center = spec
        .obstacle
        .as_ref()
        .map(|o| o.center())
        .unwrap_or_else(|| spec.outer.center());

    if !spec.outer.contains(&center) {
        return Err(LabError::Geometry(
            "onion center is outside the outer domain".into(),
        ));
    }

    // Angular resolution: one cube face spans ~π/2 of arc at the largest
    // radius; keep surface edges ≲ h (cube-corner distortion ≈ 1.2).
    let outer_c = spec.outer.center();
    let r_max_estimate = {
        let (lo, hi) = spec.outer.bounding_box();
        0.5 * (hi - lo).norm()
    };
    let n_ang = (((std::f64::consts::FRAC_PI_2 * r_max_estimate * 1.25) / h_target).ceil()
        as usize)
        .max(2);

    let sphere = CubeSphere::new(n_ang);

    // Radial support per direction.
    let mut r_obstacle = vec![0.0f64; sphere.dirs.len()];
    let mut r_outer = vec![0.0f64; sphere.dirs.len()];
    for (k, d) in sphere.dirs.iter().enumerate() {
        r_outer[k] = spec.outer.radius_along(&center, d)?;
        if let Some(obstacle) = &spec.obstacle {
            let rd = obstacle.radius_along(&center, d)?;
            if rd >= r_outer[k] {
                return Err(LabError::Geometry(
                    "surfaces are not radially nested about the obstacle center".into(),
                ));
            }
            r_obstacle[k] = rd;
        }
    }

    // Layer counts from the largest radial spans.
    let has_obstacle = spec.obstacle.is_some();
    let max_rd = r_obstacle.iter().cloned().fold(0.0f64, f64::max);
    let max_span = r_outer
        .iter()
        .zip(&r_obstacle)
        .map(|(ro, rd)| ro - rd)
        .fold(0.0f64, f64::max);
    let n_in = if has_obstacle {
        ((max_rd / (0.85 * h_target)).ceil() as usize).max(2)
    } else {
        0
    };
    let n_out = ((max_span / (0.85 * h_target)).ceil() as usize).max(2);
    let layers_total = n_in + n_out; // shells 1..=layers_total; shell 0 is the center point

    // Vertex ids: center = 0; shell k (1-based), direction j →
    // 1 + (k−1)·n_dirs + j.
    let n_dirs = sphere.dirs.len();
    let mut vertices = Vec::with_capacity(1 + layers_total * n_dirs);
    vertices.push(center);
    for k in 1..=layers_total {
        for j in 0..n_dirs {
            let r = if has_obstacle && k <= n_in {
                r_obstacle[j] * (k as f64 / n_in as f64)
            } else {
                let k_out = k - n_in;
                r_obstacle[j] + (r_outer[j] - r_obstacle[j]) * (k_out as f64 / n_out as f64)
            };
            vertices.push(center + sphere.dirs[j] * r);
        }
    }
    let vid = |k: usize, j: usize| -> usize {
        if k == 0 {
            0
        } else {
            1 + (k - 1) * n_dirs + j
        }
    };

    // Cells. Track the owning cell of each interface/outer-shell triangle.
    let mut cells: Vec<[usize; 4]> = Vec::new();
    let mut cell_region: Vec<Region> = Vec::new();
    use std::collections::HashMap;
    let mut iface_owner: HashMap<[usize; 3], (Option<usize>, Option<usize>)> = HashMap::new();
    let mut outer_owner: HashMap<[usize; 3], usize> = HashMap::new();

    let sorted3 = |t: [usize; 3]| -> [usize; 3] {
        let mut s = t;
        s.sort_unstable();
        s
    };

    // Innermost cone fan.
    let first_shell_region = if has_obstacle { Region::Minus } else { Region::Plus };
    for tri in &sphere.triangles {
        let t = [vid(1, tri[0]), vid(1, tri[1]), vid(1, tri[2])];
        cells.push([0, t[0], t[1], t[2]]);
        cell_region.push(first_shell_region);
    }

    // Prism shells: the shell between layers k and k+1 lies inside D
    // exactly when k+1 ≤ n_in.
    for k in 1..layers_total {
        let shell_region = if has_obstacle && k + 1 <= n_in {
            Region::Minus
        } else {
            Region::Plus
        };
        for tri in &sphere.triangles {
            let bottom = [vid(k, tri[0]), vid(k, tri[1]), vid(k, tri[2])];
            let top = [vid(k + 1, tri[0]), vid(k + 1, tri[1]), vid(k + 1, tri[2])];
            for tet in prism_tets(bottom, top) {
                cells.push(tet);
                cell_region.push(shell_region);
                let ci = cells.len() - 1;
                if has_obstacle && k == n_in {
                    // Cells just above the interface: register as + owners.
                    let key = sorted3(bottom);
                    if tet_touches(&tet, &bottom) {
                        iface_owner.entry(key).or_insert((None, None)).0 = Some(ci);
                    }
                }
                if k + 1 == layers_total && tet_touches(&tet, &top) {
                    outer_owner.insert(sorted3(top), cells.len() - 1);
                }
            }
        }
    }

    // − owners of interface triangles: cells of the shell below the
    // interface (or the cone fan when n_in == 1).
    if has_obstacle {
        if n_in == 1 {
            for (ti, tri) in sphere.triangles.iter().enumerate() {
                let t = sorted3([vid(1, tri[0]), vid(1, tri[1]), vid(1, tri[2])]);
                iface_owner.entry(t).or_insert((None, None)).1 = Some(ti);
            }
        } else {
            // Recompute: walk the shell n_in−1 → n_in again to find cells
            // touching the top triangles.
            let k = n_in - 1;
            // Cells were pushed in deterministic order; rather than track
            // indices through the loop above, search cells by vertex set.
            let mut top_tris: HashMap<[usize; 3], ()> = HashMap::new();
            for tri in &sphere.triangles {
                top_tris.insert(
                    sorted3([vid(k + 1, tri[0]), vid(k + 1, tri[1]), vid(k + 1, tri[2])]),
                    (),
                );
            }
            for (ci, cell) in cells.iter().enumerate() {
                if cell_region[ci] != Region::Minus {
                    continue;
                }
                for f in 0..4 {
                    let tri = sorted3([
                        cell[(f + 1) % 4],
                        cell[(f + 2) % 4],
                        cell[(f + 3) % 4],
                    ]);
                    if top_tris.contains_key(&tri) {
                        iface_owner.entry(tri).or_insert((None, None)).1 = Some(ci);
                    }
                }
            }
        }
    }

    // Facets.
    let mut facets: Vec<BoundaryFacet> = Vec::new();
    let tri_geom = |t: &[usize; 3], verts: &[Point]| -> (Vector, f64, Point) {
        let a = verts[t[0]];
        let b = verts[t[1]];
        let c = verts[t[2]];
        let n = (b - a).cross(&(c - a));
        let area = 0.5 * n.norm();
        let centroid = Point::from((a.coords + b.coords + c.coords) / 3.0);
        (n.normalize(), area, centroid)
    };

    if has_obstacle {
        for tri in &sphere.triangles {
            let t = [vid(n_in, tri[0]), vid(n_in, tri[1]), vid(n_in, tri[2])];
            let key = sorted3(t);
            let (plus_cell, minus_cell) = *iface_owner.get(&key).ok_or_else(|| {
                LabError::Geometry("interface facet lost its adjacent cells".into())
            })?;
            let (mut normal, area, centroid) = tri_geom(&t, &vertices);
            // Outward from D: along the radial direction.
            if normal.dot(&(centroid - center)) < 0.0 {
                normal = -normal;
            }
            facets.push(BoundaryFacet {
                vertices: t,
                tag: FacetTag::Interface,
                normal,
                plus_cell,
                minus_cell,
                area,
            });
        }
    }
    for tri in &sphere.triangles {
        let t = [
            vid(layers_total, tri[0]),
            vid(layers_total, tri[1]),
            vid(layers_total, tri[2]),
        ];
        let key = sorted3(t);
        let owner = *outer_owner.get(&key).ok_or_else(|| {
            LabError::Geometry("outer facet lost its adjacent cell".into())
        })?;
        let (mut normal, area, centroid) = tri_geom(&t, &vertices);
        if normal.dot(&(centroid - center)) < 0.0 {
            normal = -normal;
        }
        let tag = if spec.gamma.contains(&(centroid - outer_c)) {
            FacetTag::Gamma
        } else {
            FacetTag::OuterRest
        };
        facets.push(BoundaryFacet {
            vertices: t,
            tag,
            normal,
            plus_cell: Some(owner),
            minus_cell: None,
            area,
        });
    }

    // Vertex markers.
    let n_verts = vertices.len();
    let mut on_outer = vec![false; n_verts];
    let mut on_iface = vec![false; n_verts];
    for j in 0..n_dirs {
        on_outer[vid(layers_total, j)] = true;
        if has_obstacle {
            on_iface[vid(n_in, j)] = true;
        }
    }

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

fn tet_touches(tet: &[usize; 4], tri: &[usize; 3]) -> bool {
    tri.iter().all(|v| tet.contains(v))
}

/// Deduplicated cube-sphere direction grid with a consistent triangulation.
struct CubeSphere {
    dirs: Vec<Vector>,
    /// Triangles as direction-index triples.
    triangles: Vec<[usize; 3]>,
}

impl CubeSphere {
    fn new(n: usize) -> Self {
        use std::collections::HashMap;
        // Lattice points on the cube surface with integer coordinates in
        // [−n, n] (units of 1/n); deduplicate across faces by the integer
        // key.
        let mut key_to_idx: HashMap<[i64; 3], usize> = HashMap::new();
        let mut dirs: Vec<Vector> = Vec::new();
        let mut quads: Vec<[usize; 4]> = Vec::new();

        let mut intern = |key: [i64; 3]| -> usize {
            if let Some(&idx) = key_to_idx.get(&key) {
                return idx;
            }
            let p = Vector::new(key[0] as f64, key[1] as f64, key[2] as f64) / n as f64;
            let idx = dirs.len();
            dirs.push(p.normalize());
            key_to_idx.insert(key, idx);
            idx
        };

        // Faces: axis ∈ {0,1,2}, sign ∈ {−1, +1}; (u, v) the other axes.
        for axis in 0..3usize {
            for sign in [-1i64, 1i64] {
                let u_axis = (axis + 1) % 3;
                let v_axis = (axis + 2) % 3;
                for i in 0..n as i64 {
                    for j in 0..n as i64 {
                        let mut corner = |di: i64, dj: i64| -> usize {
                            let mut key = [0i64; 3];
                            key[axis] = sign * n as i64;
                            key[u_axis] = 2 * (i + di) - n as i64;
                            key[v_axis] = 2 * (j + dj) - n as i64;
                            intern(key)
                        };
                        // Orientation is irrelevant here (normals are fixed
                        // radially later); consistency of the diagonal is
                        // what matters.
                        quads.push([corner(0, 0), corner(1, 0), corner(1, 1), corner(0, 1)]);
                    }
                }
            }
        }

        // Min-index diagonal triangulation of each quad.
        let mut triangles = Vec::with_capacity(2 * quads.len());
        for q in quads {
            let min_pos = (0..4).min_by_key(|&p| q[p]).unwrap();
            // Diagonal from min_pos to min_pos+2.
            let a = q[min_pos];
            let b = q[(min_pos + 1) % 4];
            let c = q[(min_pos + 2) % 4];
            let d = q[(min_pos + 3) % 4];
            triangles.push([a, b, c]);
            triangles.push([a, c, d]);
        }

        CubeSphere { dirs, triangles }
    }
}

/// Tetrahedralizes a triangular prism by coning from its minimal-index
/// vertex; quad faces are split by the min-index diagonal, so adjacent
/// prisms (and the spherical triangle faces) always match.
fn prism_tets(bottom: [usize; 3], top: [usize; 3]) -> Vec<[usize; 4]> {
    let apex = *bottom.iter().chain(top.iter()).min().unwrap();
    let mut surface: Vec<[usize; 3]> = vec![bottom, top];
    for e in 0..3 {
        let (bj, bk) = (bottom[e], bottom[(e + 1) % 3]);
        let (tj, tk) = (top[e], top[(e + 1) % 3]);
        // Quad (bj, bk, tk, tj); diagonal through the min-index vertex.
        let quad = [bj, bk, tk, tj];
        let min_pos = (0..4).min_by_key(|&p| quad[p]).unwrap();
        let a = quad[min_pos];
        let b = quad[(min_pos + 1) % 4];
        let c = quad[(min_pos + 2) % 4];
        let d = quad[(min_pos + 3) % 4];
        surface.push([a, b, c]);
        surface.push([a, c, d]);
    }
    surface
        .into_iter()
        .filter(|t| !t.contains(&apex))
        .map(|t| [apex, t[0], t[1], t[2]])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn prism_decomposition_fills_the_prism() {
        // A concrete prism; check the 3 tets tile its volume.
        let verts = [
            Point::new(0.0, 0.0, 0.0),
            Point::new(1.0, 0.0, 0.0),
            Point::new(0.0, 1.0, 0.0),
            Point::new(0.0, 0.0, 1.0),
            Point::new(1.0, 0.0, 1.0),
            Point::new(0.0, 1.0, 1.0),
        ];
        for perm in [[0usize, 1, 2], [2, 0, 1], [1, 2, 0]] {
            let bottom = [perm[0], perm[1], perm[2]];
            let top = [perm[0] + 3, perm[1] + 3, perm[2] + 3];
            let tets = prism_tets(bottom, top);
            assert_eq!(tets.len(), 3);
            let vol: f64 = tets
                .iter()
                .map(|t| {
                    tet_volume(&verts[t[0]], &verts[t[1]], &verts[t[2]], &verts[t[3]]).abs()
                })
                .sum();
            assert_relative_eq!(vol, 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn cube_sphere_directions_are_unit_and_closed() {
        let cs = CubeSphere::new(4);
        assert_eq!(cs.dirs.len(), 6 * 4 * 4 + 2);
        for d in &cs.dirs {
            assert_relative_eq!(d.norm(), 1.0, epsilon = 1e-12);
        }
        // Closed surface: every edge in exactly two triangles.
        use std::collections::HashMap;
        let mut edges: HashMap<(usize, usize), usize> = HashMap::new();
        for t in &cs.triangles {
            for e in 0..3 {
                let a = t[e];
                let b = t[(e + 1) % 3];
                *edges.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        assert!(edges.values().all(|&c| c == 2));
    }

    #[test]
    fn onion_mesh_volume_approximates_ball_volume() {
        let spec = DomainSpec::ball(1.0);
        let mesh = super::build(&spec, 0.3).unwrap();
        let vol: f64 = (0..mesh.cells.len()).map(|ci| mesh.cell_volume(ci)).sum();
        let exact = 4.0 / 3.0 * std::f64::consts::PI;
        // Polyhedral approximation from inside; a few percent at h = 0.3.
        assert!((vol - exact).abs() / exact < 0.05, "vol = {vol}");
    }
}
