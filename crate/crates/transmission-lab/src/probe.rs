//! Obstacle probing with singular solutions.
//!
//! This module drives the laboratory's inverse machinery: it builds fields
//! with a point pole just outside a trial obstacle, sweeps the pole toward a
//! candidate contact point, and reads off geometry and coefficient
//! information from how fast weighted energies blow up.
//!
//! # Mathematical foundation
//!
//! Let `G(·, y)` be the fundamental solution of the exterior operator
//! `L_{A⁺,q⁺}` with pole `y` (computed by
//! [`kernels::solve_magnetic_green`](crate::kernels::solve_magnetic_green)),
//! and let `V` be a *probing domain* containing the obstacle `D`. The
//! **singular solution** with pole `y ∉ D̄` is
//!
//! ```text
//!     u = G(·, y) + E₀,
//! ```
//!
//! where the correction `E₀` restores the transmission conditions that the
//! smooth-medium fundamental solution violates across `∂D`:
//!
//! ```text
//!     L_{A⁺,q⁺} E₀⁺ = 0                 in V ∖ D̄,
//!     L_{A⁻,q⁻} E₀⁻ = f⁻               in D,
//!     E₀⁺ = a E₀⁻ + (a−1) G            on ∂D,
//!     N⁺E₀⁺ = b N⁻E₀⁻ + c E₀⁻ + g₁     on ∂D,
//!     E₀⁺ = 0                          on ∂V,
//! ```
//!
//! with the interface and volume data generated by `G` itself:
//!
//! ```text
//!     g₁ = (b−1) ∂_ν G + ( i(bA⁻ − A⁺)·ν + c ) G,
//!     f⁻ = 2i (A⁻−A⁺)·∇G + ( i ∇·(A⁻−A⁺) + |A⁺|² − |A⁻|² + q⁺ − q⁻ ) G.
//! ```
//!
//! Because the pole sits outside `D̄`, all of this data is smooth, and the
//! correction problem is an ordinary transmission solve (module
//! [`forward`](crate::forward)). The correction obeys
//!
//! ```text
//!     ‖E₀⁺‖_{H¹} + ‖E₀⁻‖_{H¹} ≤ C ‖G(·, y)‖_{H¹(D)},
//! ```
//!
//! so it stays bounded for far poles and can grow at most like
//! `‖G‖_{H¹(D)} ∼ δ^{1−n/2}` when the pole approaches `∂D` at distance `δ`.
//!
//! ## Contact indicator
//!
//! Pick an anchor `x₀`, a retreat direction `ν`, and poles `x_δ = x₀ + δν`.
//! For a trial obstacle `D₂` with trial coefficients `(a₂, b₂, c₂)` and the
//! observed medium's singular solution `u₁ = G + E₀₁`, the indicator is the
//! singular volume term of the data-gap identity:
//!
//! ```text
//!     I(δ) = ∫_{D₂} a₂⁻¹ (b₂ − a₂) ∇u₁ · ∇Ḡ dx
//!          = ∫_{D₂} w |∇G|² dx  +  ∫_{D₂} w ∇E₀₁ · ∇Ḡ dx ,    w = b₂/a₂ − 1.
//! ```
//!
//! The first ("core") term is an exact pole integral evaluated by adaptive
//! octree quadrature — no mesh enters it. The second ("correction") term
//! carries the observed medium's response. When `x₀` touches the region
//! where the observed data disagrees with the trivial continuation, `I(δ)`
//! blows up like `δ^{2−n}` (slope `−1` in 3D on a log–log plot); when every
//! pole keeps a fixed distance from the obstacle, `I(δ)` stays bounded
//! (slope `≈ 0`). The marching reconstructor classifies on the correction
//! series alone, because the core blows up at every anchored trial surface
//! and carries no information about the *observed* obstacle.
//!
//! ```text
//!             ∂Ω  (Dirichlet data on the accessible patch)
//!        ┌──────────────────────────────────────────────┐
//!        │       Ω                                      │
//!        │     ┌────────── V (probing hull) ─────────┐  │
//!        │     │              ___                     │  │
//!        │     │             / D \    ×──×──×  poles  │  │
//!        │     │             \___/    x_δ = x₀ + δν   │  │
//!        │     │           obstacle                   │  │
//!        │     └──────────────────────────────────────┘  │
//!        └──────────────────────────────────────────────┘
//! ```
//!
//! ## Coefficient recovery on the interface
//!
//! With the obstacle known and two observed media sharing it, interior
//! Green's functions `G₁, G₂` of the two minus-side operators feed two
//! functionals per boundary anchor:
//!
//! ```text
//!     R(δ) = | ∫_D (b₁/b₂ − a₁/a₂) ∇G₁ · ∇Ḡ₂ dx |          (volume),
//!     B(δ) = | ∫_{∂D} (b₂a₂)⁻¹ (c₁a₂ − c₂a₁) G₁ Ḡ₂ dS |     (surface).
//! ```
//!
//! `R` blows up like `δ^{2−n}` exactly when `ρ = b₁/b₂ − a₁/a₂ ≠ 0` at the
//! anchor; with `ρ ≡ 0`, `B` grows like `σ₃(δ) = log(1/δ)` exactly when
//! `β = c₁a₂ − c₂a₁ ≠ 0`, while the competing interior remainder stays
//! bounded (`τ₃ = 1`). Under the self-adjointness normalization `ab ≡ 1` on
//! both media, null verdicts for `ρ` and `β` upgrade to coefficient
//! equalities `a₁ = a₂, b₁ = b₂, c₁ = c₂`.
//!
//! ## Runge approximation
//!
//! Solutions generated by boundary data on the accessible patch are dense
//! (in `H¹`) among solutions on the smaller probing domain. The
//! [`runge_approximate`] experiment quantifies this: it projects a target
//! solution onto growing dictionaries of solver-generated solutions and
//! reports the (nonincreasing) `H¹` residual per dictionary size.

use crate::forward::{
    assemble, ensure_unique_solvability, interpolate_nodal, nodal_h1_seminorm, nodal_l2_norm,
    solve_with_data, AssembledSystem, CauchyDataSet, FieldFn, TransmissionProblem,
    TransmissionSolution,
};
use crate::geometry::{
    build_mesh, fibonacci_directions, place_pole, BoundaryPatch, DomainSpec, Mesh, Point, Region,
    Solid, SurfaceRegularity, Vector,
};
use crate::kernels::{
    fit_log_log, geometric_deltas, integrate_solid_adaptive, integrate_surface_adaptive,
    project_to_surface, solve_magnetic_green, GreenGridSpec, GreensFunction, SlopeFit,
};
use crate::medium::{Branch, Medium, ScalarExpr};
use crate::{LabError, Result};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

// ---------------------------------------------------------------------------
// Singular solutions: context, pairs, and the standalone operation.
// ---------------------------------------------------------------------------

/// Reusable machinery for building singular solutions on one probing domain:
/// the validated domain, its mesh, and the assembled transmission system.
///
/// Building the context performs all pole-independent work once; after that,
/// [`SingularSolutionContext::pair_at`] only rebuilds the pole-dependent
/// interface data and re-solves against the shared factor-free system, so
/// pole sweeps can run in parallel over `&self`.
#[derive(Debug)]
pub struct SingularSolutionContext {
    spec: DomainSpec,
    medium: Medium,
    mesh: Arc<Mesh>,
    sys: AssembledSystem,
    green_grid: GreenGridSpec,
    trivial_jumps: bool,
    solvability_gap: Option<f64>,
    solves: AtomicUsize,
}

impl SingularSolutionContext {
    /// Validates the probing domain and medium, optionally certifies unique
    /// solvability (inflating the domain if the shift sits on a resonance),
    /// builds the mesh, and assembles the transmission system.
    pub fn new(
        spec: &DomainSpec,
        medium: &Medium,
        h: f64,
        green_grid: &GreenGridSpec,
        certify_solvability: bool,
    ) -> Result<Self> {
        spec.validate()?;
        medium.validate(spec)?;
        let (final_spec, solvability_gap) = if certify_solvability {
            let outcome = ensure_unique_solvability(
                spec,
                medium,
                Complex64::new(0.0, 0.0),
                h.max(0.12),
                5e-3,
                4,
            )?;
            (outcome.spec, Some(outcome.gap))
        } else {
            (spec.clone(), None)
        };
        let mesh = Arc::new(build_mesh(&final_spec, h)?);
        let base = TransmissionProblem::homogeneous(
            final_spec.clone(),
            mesh.clone(),
            medium.clone(),
        );
        let sys = assemble(&base)?;
        Ok(SingularSolutionContext {
            spec: final_spec,
            medium: medium.clone(),
            mesh,
            sys,
            green_grid: green_grid.clone(),
            trivial_jumps: jump_data_is_trivial(medium),
            solvability_gap,
            solves: AtomicUsize::new(0),
        })
    }

    /// The (possibly inflated) probing domain.
    pub fn spec(&self) -> &DomainSpec {
        &self.spec
    }

    /// The shared mesh.
    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    /// Certified spectral gap, when solvability was certified.
    pub fn solvability_gap(&self) -> Option<f64> {
        self.solvability_gap
    }

    /// Number of correction solves performed through this context.
    pub fn solve_count(&self) -> usize {
        self.solves.load(Ordering::Relaxed)
    }

    /// Builds the singular solution `u = G + E₀` for one pole.
    ///
    /// The pole must lie strictly outside the obstacle closure; a pole inside
    /// the probing hull is accepted (and flagged in the result) — the
    /// correction data only samples `G` on `D̄`, away from its singularity.
    /// Thread-safe: takes `&self` and never mutates the assembled system.
    pub fn pair_at(&self, y: &Point) -> Result<SingularSolutionPair> {
        if let Some(obstacle) = &self.spec.obstacle {
            if obstacle.signed_distance(y) <= 1e-12 {
                return Err(LabError::PolePlacement(format!(
                    "pole ({:.4}, {:.4}, {:.4}) lies inside the obstacle closure",
                    y.x, y.y, y.z
                )));
            }
        }
        let green = Arc::new(solve_magnetic_green(
            &self.medium,
            Branch::Plus,
            &self.spec.outer,
            y,
            &self.green_grid,
        )?);
        if !green.potential_free && green.residual > 1e3 * self.green_grid.tol {
            return Err(LabError::Solver(format!(
                "fundamental-solution iteration stalled at residual {:.3e}",
                green.residual
            )));
        }
        let correction = if self.spec.obstacle.is_none() || self.trivial_jumps {
            // No interface inside the hull, or identical media across it:
            // every source of the correction problem vanishes identically.
            None
        } else {
            Some(self.solve_correction(&green)?)
        };
        self.solves.fetch_add(1, Ordering::Relaxed);

        let (norm_plus, norm_minus, norm_green) = self.pair_norms(&green, correction.as_ref());
        let bound_constant = if norm_green > 0.0 {
            (norm_plus + norm_minus) / norm_green
        } else {
            0.0
        };
        Ok(SingularSolutionPair {
            pole: *y,
            pole_inside_domain: self.spec.outer.signed_distance(y) < 0.0,
            spec: self.spec.clone(),
            green,
            correction,
            mesh: self.mesh.clone(),
            norm_green_h1_obstacle: norm_green,
            norm_correction_plus: norm_plus,
            norm_correction_minus: norm_minus,
            bound_constant,
        })
    }

    /// Solves the correction problem for one fundamental solution.
    fn solve_correction(&self, green: &Arc<GreensFunction>) -> Result<TransmissionSolution> {
        let obstacle = self
            .spec
            .obstacle
            .clone()
            .expect("correction requires an interface");
        let medium = self.medium.clone();

        let g0 = {
            let g = green.clone();
            let m = medium.clone();
            FieldFn::complex(move |p: &Point| Complex64::new(m.a_at(p) - 1.0, 0.0) * g.eval(p))
        };
        let g1 = {
            let g = green.clone();
            let m = medium.clone();
            let solid = obstacle.clone();
            FieldFn::complex(move |p: &Point| {
                let nu = solid.normal_at(p);
                let val = g.eval(p);
                let grad = g.eval_grad(p);
                let dn = grad[0] * nu.x + grad[1] * nu.y + grad[2] * nu.z;
                let b = m.b_at(p);
                let c = m.c_at(p);
                let tangent_mix = m.magnetic(Branch::Minus).eval(p) * b
                    - m.magnetic(Branch::Plus).eval(p);
                Complex64::new(b - 1.0, 0.0) * dn
                    + (Complex64::new(0.0, tangent_mix.dot(&nu)) + Complex64::new(c, 0.0)) * val
            })
        };
        let f_minus = {
            let g = green.clone();
            let m = medium.clone();
            FieldFn::complex(move |p: &Point| {
                let val = g.eval(p);
                let grad = g.eval_grad(p);
                let a_minus = m.magnetic(Branch::Minus).eval(p);
                let a_plus = m.magnetic(Branch::Plus).eval(p);
                let diff = a_minus - a_plus;
                let dg = grad[0] * diff.x + grad[1] * diff.y + grad[2] * diff.z;
                let div_diff = m.magnetic(Branch::Minus).divergence(p)
                    - m.magnetic(Branch::Plus).divergence(p);
                let zero_order = Complex64::new(0.0, div_diff)
                    + Complex64::new(a_plus.norm_squared() - a_minus.norm_squared(), 0.0)
                    + (m.electric(Branch::Plus).eval(p) - m.electric(Branch::Minus).eval(p));
                Complex64::new(0.0, 2.0) * dg + zero_order * val
            })
        };

        let problem = TransmissionProblem::homogeneous(
            self.spec.clone(),
            self.mesh.clone(),
            self.medium.clone(),
        )
        .with_interface_jumps(g0, g1)
        .with_sources(FieldFn::zero(), f_minus);
        solve_with_data(&problem, &self.sys)
    }

    /// `H¹` diagnostics: correction norms on both sides and the obstacle-side
    /// norm of the fundamental solution that controls them.
    fn pair_norms(
        &self,
        green: &Arc<GreensFunction>,
        correction: Option<&TransmissionSolution>,
    ) -> (f64, f64, f64) {
        let norm_green = if self.spec.obstacle.is_some() {
            let g = green.clone();
            let nodal = interpolate_nodal(&self.mesh, &FieldFn::complex(move |p| g.eval(p)));
            region_h1_norm(&self.mesh, &nodal, Some(Region::Minus))
        } else {
            0.0
        };
        match correction {
            None => (0.0, 0.0, norm_green),
            Some(sol) => (
                region_h1_norm(&self.mesh, &sol.u_plus, Some(Region::Plus)),
                region_h1_norm(&self.mesh, &sol.u_minus, Some(Region::Minus)),
                norm_green,
            ),
        }
    }
}

/// Full `H¹` norm of a nodal field over one region (or the whole mesh).
fn region_h1_norm(mesh: &Mesh, vals: &[Complex64], region: Option<Region>) -> f64 {
    let l2 = nodal_l2_norm(mesh, vals, region);
    let semi = nodal_h1_seminorm(mesh, vals, region);
    (l2 * l2 + semi * semi).sqrt()
}

/// `H¹` norm of a nodal field over the cells of one region whose centroids
/// fall inside a ball (used for near-contact energy diagnostics).
fn region_h1_norm_in_ball(
    mesh: &Mesh,
    vals: &[Complex64],
    region: Region,
    center: &Point,
    radius: f64,
) -> f64 {
    let mut acc = 0.0;
    for ci in 0..mesh.cells.len() {
        if mesh.cell_region[ci] != region {
            continue;
        }
        let verts = mesh.cells[ci];
        let centroid = Point::from(
            (verts
                .iter()
                .map(|&v| mesh.vertices[v].coords)
                .sum::<Vector>())
                / 4.0,
        );
        if (centroid - center).norm() > radius {
            continue;
        }
        let vol = mesh.cell_volume(ci);
        // Exact P1 mass: ∫_T u ū = (vol/20) Σ_{ij} (1+δ_ij) u_i ū_j.
        let mut mass = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                let w = if i == j { 2.0 } else { 1.0 };
                mass += w * (vals[verts[i]] * vals[verts[j]].conj()).re;
            }
        }
        acc += vol / 20.0 * mass;
        let grads = mesh.cell_gradients(ci);
        let mut gx = Complex64::new(0.0, 0.0);
        let mut gy = Complex64::new(0.0, 0.0);
        let mut gz = Complex64::new(0.0, 0.0);
        for k in 0..4 {
            gx += vals[verts[k]] * grads[k].x;
            gy += vals[verts[k]] * grads[k].y;
            gz += vals[verts[k]] * grads[k].z;
        }
        acc += vol * (gx.norm_sqr() + gy.norm_sqr() + gz.norm_sqr());
    }
    acc.max(0.0).sqrt()
}

/// Structural test for "identical media across the interface": all jump
/// coefficients trivial and both branch potentials structurally zero, so
/// every source of the correction problem vanishes identically.
fn jump_data_is_trivial(medium: &Medium) -> bool {
    let scalar_zero = |e: &ScalarExpr| matches!(e, ScalarExpr::Constant(v) if *v == 0.0);
    matches!(medium.coef_a, ScalarExpr::Constant(v) if v == 1.0)
        && matches!(medium.coef_b, ScalarExpr::Constant(v) if v == 1.0)
        && matches!(medium.coef_c, ScalarExpr::Constant(v) if v == 0.0)
        && medium.component_factors.is_empty()
        && medium.magnetic_plus.is_structurally_zero()
        && medium.magnetic_minus.is_structurally_zero()
        && scalar_zero(&medium.electric_plus.re)
        && scalar_zero(&medium.electric_plus.im)
        && scalar_zero(&medium.electric_minus.re)
        && scalar_zero(&medium.electric_minus.im)
}

/// A singular solution `u = G + E₀` on a probing domain: the fundamental
/// solution of the exterior operator plus the transmission correction.
#[derive(Debug, Clone)]
pub struct SingularSolutionPair {
    /// Pole location `y`.
    pub pole: Point,
    /// Whether the pole sits inside the probing hull (the standard sweep
    /// configuration; the strict pole-excluding hull is an experiment flag).
    pub pole_inside_domain: bool,
    /// The probing domain the correction was solved on.
    pub spec: DomainSpec,
    /// Fundamental solution `G(·, pole)` of the exterior operator.
    pub green: Arc<GreensFunction>,
    /// Correction `E₀` (`None` exactly when every source vanishes, i.e. no
    /// interface inside the hull or identical media across it).
    pub correction: Option<TransmissionSolution>,
    /// Mesh carrying the correction.
    pub mesh: Arc<Mesh>,
    /// `‖G‖_{H¹(D)}` — the quantity that controls the correction size.
    pub norm_green_h1_obstacle: f64,
    /// `‖E₀⁺‖_{H¹}` over the exterior region.
    pub norm_correction_plus: f64,
    /// `‖E₀⁻‖_{H¹}` over the obstacle.
    pub norm_correction_minus: f64,
    /// Reported constant `(‖E₀⁺‖ + ‖E₀⁻‖) / ‖G‖_{H¹(D)}` (0 when exact-zero).
    pub bound_constant: f64,
}

impl SingularSolutionPair {
    /// Correction value at a point (region-aware; 0 outside the mesh or when
    /// the correction vanishes identically).
    pub fn correction_at(&self, p: &Point) -> Complex64 {
        match &self.correction {
            None => Complex64::new(0.0, 0.0),
            Some(sol) => sol
                .field_at(&self.mesh, p)
                .unwrap_or_else(|| Complex64::new(0.0, 0.0)),
        }
    }

    /// Correction gradient at a point (region-aware; 0 outside the mesh).
    pub fn correction_grad_at(&self, p: &Point) -> [Complex64; 3] {
        match &self.correction {
            None => [Complex64::new(0.0, 0.0); 3],
            Some(sol) => sol
                .gradient_at(&self.mesh, p)
                .unwrap_or([Complex64::new(0.0, 0.0); 3]),
        }
    }

    /// Total field `u = G + E₀` at a point.
    pub fn total_field_at(&self, p: &Point) -> Complex64 {
        self.green.eval(p) + self.correction_at(p)
    }

    /// Total gradient `∇u = ∇G + ∇E₀` at a point.
    pub fn total_gradient_at(&self, p: &Point) -> [Complex64; 3] {
        let mut g = self.green.eval_grad(p);
        let e = self.correction_grad_at(p);
        for c in 0..3 {
            g[c] += e[c];
        }
        g
    }

    /// Sum of the correction `H¹` norms (the left side of the reported
    /// boundedness constant).
    pub fn correction_h1(&self) -> f64 {
        self.norm_correction_plus + self.norm_correction_minus
    }
}

/// Builds the singular solution `u = G + E₀` on probing domain `v` with
/// medium `m` and pole `y`.
///
/// Certifies unique solvability of the homogeneous problem on `v` first
/// (inflating the domain if needed — the returned pair records the domain
/// actually used). The pole must lie strictly outside the obstacle closure;
/// poles inside the hull are accepted and flagged, since the correction data
/// samples `G` only on `D̄` where it is smooth.
pub fn singular_solution(
    v: &DomainSpec,
    m: &Medium,
    y: &Point,
    h: f64,
    green_grid: &GreenGridSpec,
) -> Result<SingularSolutionPair> {
    let ctx = SingularSolutionContext::new(v, m, h, green_grid, true)?;
    ctx.pair_at(y)
}

// ---------------------------------------------------------------------------
// Observed scenarios and trial obstacles.
// ---------------------------------------------------------------------------

/// An observed medium: the scenario that generated the boundary data, with
/// the data record optionally attached.
///
/// Probing needs to re-solve the observed medium's correction problem for
/// every pole, which a bare boundary-data table cannot drive; the scenario
/// therefore carries its generating domain and coefficients, and treats the
/// attached Cauchy data as the measurement record (for hashing, distances,
/// and diagnostics).
#[derive(Debug, Clone)]
pub struct ObservedScenario {
    /// The generating domain (outer boundary and true obstacle, if any).
    pub spec: DomainSpec,
    /// The generating coefficients.
    pub medium: Medium,
    /// The measured boundary data, when recorded.
    pub cauchy: Option<CauchyDataSet>,
}

impl ObservedScenario {
    /// Scenario without an attached data record.
    pub fn new(spec: DomainSpec, medium: Medium) -> Self {
        ObservedScenario {
            spec,
            medium,
            cauchy: None,
        }
    }

    /// Attaches a measured data record.
    pub fn with_data(mut self, cauchy: CauchyDataSet) -> Self {
        self.cauchy = Some(cauchy);
        self
    }
}

/// A trial obstacle: the candidate solid together with the trial medium that
/// jumps across its boundary (only `a₂, b₂, c₂` of the trial medium enter
/// the indicator; its potentials matter only for the optional trial-side
/// boundary-term log).
#[derive(Debug, Clone)]
pub struct TrialObstacle {
    /// Candidate obstacle `D₂`.
    pub solid: Solid,
    /// Trial coefficients `(a₂, b₂, c₂, A₂±, q₂±)`.
    pub medium: Medium,
}

impl TrialObstacle {
    /// Trial with the default unit-contrast coefficients `a₂ = 1, b₂ = 2,
    /// c₂ = 0` (weight `w = b₂/a₂ − 1 = 1`).
    pub fn with_unit_contrast(solid: Solid) -> Self {
        let mut medium = Medium::trivial();
        medium.coef_b = ScalarExpr::Constant(2.0);
        TrialObstacle { solid, medium }
    }
}

// ---------------------------------------------------------------------------
// Indicator configuration and curves.
// ---------------------------------------------------------------------------

/// Which indicator series drives the contact classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IndicatorSeries {
    /// Core + correction (the full singular volume term). Default for
    /// anchored probes of observed data.
    Full,
    /// Correction term alone. Used by the marching reconstructor, where the
    /// core blows up at every trial surface and carries no information.
    Correction,
}

/// Contact classification of an indicator curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Classification {
    /// The fitted slope reaches the blow-up band: the probe point touches
    /// the region where the observed data disagrees with the trial.
    Contact,
    /// The curve stays bounded (or vanishes identically): no disagreement
    /// within reach of the pole sweep.
    InteriorClear,
    /// The slope falls between the two thresholds.
    Inconclusive,
}

/// Numerical policy for indicator sweeps.
#[derive(Debug, Clone)]
pub struct IndicatorConfig {
    /// Mesh target for the probing hull.
    pub h: f64,
    /// Slope at or below which the curve classifies as contact
    /// (`2−n` plus a 0.25 safety gap in 3D).
    pub contact_slope: f64,
    /// Slope at or above which the curve classifies as interior-clear
    /// (`(2−n)/2` in 3D).
    pub clear_slope: f64,
    /// Which series drives the classification.
    pub classify_on: IndicatorSeries,
    /// Probing hull radius as a multiple of the trial circumradius.
    pub hull_inflation: f64,
    /// Exterior-ball constant for pole placement (`dist(x_δ, D₂) ≥ c·δ`).
    pub pole_margin: f64,
    /// Collocation grid for fundamental solutions.
    pub green_grid: GreenGridSpec,
    /// Certify unique solvability of the hull problem before sweeping.
    pub certify_solvability: bool,
    /// Also solve the trial medium's correction per pole and log the
    /// boundary terms of the gap identity (diagnostic only).
    pub with_boundary_log: bool,
    /// Octree depths (base, boundary, pole) for volume quadrature.
    pub volume_depths: (u32, u32, u32),
    /// Surface quadrature resolution for boundary-term logs.
    pub surface_resolution: f64,
    /// Radius factor (× trial diameter) of the near-contact ball used for
    /// the logged `‖u₂⁻‖_{H¹(B ∩ D₂)}` diagnostic.
    pub contact_ball_factor: f64,
    /// Rebuild a pole-excluding hull per δ (experiment flag): the hull
    /// surface passes between the trial obstacle and each pole, which is
    /// only feasible when δ exceeds three mesh widths.
    pub delta_dependent_hull: bool,
}

impl Default for IndicatorConfig {
    fn default() -> Self {
        IndicatorConfig {
            h: 0.1,
            contact_slope: -0.75,
            clear_slope: -0.5,
            classify_on: IndicatorSeries::Full,
            hull_inflation: 1.45,
            pole_margin: 0.5,
            green_grid: GreenGridSpec {
                n: 18,
                ..GreenGridSpec::default()
            },
            certify_solvability: false,
            with_boundary_log: false,
            volume_depths: (2, 5, 12),
            surface_resolution: 0.08,
            contact_ball_factor: 0.6,
            delta_dependent_hull: false,
        }
    }
}

/// Default pole-retreat grid: 8 geometric distances spanning
/// `[0.02, 0.2] ×` the trial obstacle diameter, largest first.
pub fn default_delta_grid(trial: &Solid) -> Vec<f64> {
    let d = trial.diameter();
    geometric_deltas(0.02 * d, 0.2 * d, 8)
}

/// Per-δ boundary terms of the data-gap identity (logged, never classified:
/// they are remainder-bounded and carry no leading-order information).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundaryTermLog {
    /// Pole distance δ.
    pub delta: f64,
    /// `−∫_{∂D₂} c₂ u₂⁻ v̄ dS` (re, im).
    pub interface_term: (f64, f64),
    /// `⟨N⁺u₁⁺, v⟩ − ⟨u₁⁺, N⁺v⟩` over the true interface (re, im);
    /// zero when the observed scenario has no nested obstacle.
    pub inner_boundary_term: (f64, f64),
    /// Tangential-patch term: identically zero here because the indicator
    /// integrates over the whole trial obstacle, so the patch boundary on
    /// `∂D₂` is empty.
    pub tangential_term: (f64, f64),
    /// `‖u₂⁻‖_{H¹(D₂)}` for the trial singular solution.
    pub u2_minus_h1: f64,
    /// `‖u₂⁻‖_{H¹(B ∩ D₂)}` over the near-contact ball `B`.
    pub u2_minus_h1_contact_ball: f64,
}

/// One pole sweep of the contact indicator: the sampled series, their
/// log–log fits, and the classification.
#[derive(Debug, Clone)]
pub struct IndicatorCurve {
    /// Anchor `x₀`.
    pub anchor: Point,
    /// Retreat direction `ν` (unit).
    pub direction: Vector,
    /// Pole distances, strictly decreasing.
    pub deltas: Vec<f64>,
    /// Pole positions `x₀ + δν`.
    pub poles: Vec<Point>,
    /// Core series `∫_{D₂} w |∇G|²` (real, exact octree quadrature).
    pub core: Vec<f64>,
    /// Correction series `∫_{D₂} w ∇E₀₁ · ∇Ḡ`.
    pub correction: Vec<Complex64>,
    /// Full indicator `I(δ)` = core + correction.
    pub full: Vec<Complex64>,
    /// `‖E₀⁺‖ + ‖E₀⁻‖` per δ (correction size diagnostics).
    pub correction_h1: Vec<f64>,
    /// `‖G‖_{H¹(D)}` per δ (the controlling fundamental-solution norm;
    /// zero when the hull contains no observed interface).
    pub green_h1_obstacle: Vec<f64>,
    /// Log–log fit of `|I(δ)|`.
    pub full_fit: Option<SlopeFit>,
    /// Log–log fit of the correction magnitude.
    pub correction_fit: Option<SlopeFit>,
    /// Which series produced `classification`.
    pub classified_on: IndicatorSeries,
    /// Contact verdict.
    pub classification: Classification,
    /// Optional boundary-term log (one entry per δ when requested).
    pub boundary_log: Vec<BoundaryTermLog>,
}

impl IndicatorCurve {
    /// The fit that produced the classification.
    pub fn fitted(&self) -> Option<&SlopeFit> {
        match self.classified_on {
            IndicatorSeries::Full => self.full_fit.as_ref(),
            IndicatorSeries::Correction => self.correction_fit.as_ref(),
        }
    }

    /// Delimited text table: one row per δ, tab-separated columns
    /// `delta core corr_re corr_im full_abs correction_h1 green_h1`.
    pub fn export_delimited(&self) -> String {
        let mut out = String::from(
            "# contact indicator sweep: pole distance vs weighted energies\n\
             delta\tcore\tcorr_re\tcorr_im\tfull_abs\tcorrection_h1\tgreen_h1\n",
        );
        for i in 0..self.deltas.len() {
            out.push_str(&format!(
                "{:.12e}\t{:.12e}\t{:.12e}\t{:.12e}\t{:.12e}\t{:.12e}\t{:.12e}\n",
                self.deltas[i],
                self.core[i],
                self.correction[i].re,
                self.correction[i].im,
                self.full[i].norm(),
                self.correction_h1[i],
                self.green_h1_obstacle[i],
            ));
        }
        out
    }

    /// Serializable summary record.
    pub fn to_summary(&self) -> IndicatorSummary {
        let fit = self.fitted();
        IndicatorSummary {
            anchor: [self.anchor.x, self.anchor.y, self.anchor.z],
            direction: [self.direction.x, self.direction.y, self.direction.z],
            deltas: self.deltas.clone(),
            core: self.core.clone(),
            correction_re: self.correction.iter().map(|z| z.re).collect(),
            correction_im: self.correction.iter().map(|z| z.im).collect(),
            full_abs: self.full.iter().map(|z| z.norm()).collect(),
            correction_h1: self.correction_h1.clone(),
            green_h1_obstacle: self.green_h1_obstacle.clone(),
            slope: fit.map(|f| f.slope),
            slope_stderr: fit.map(|f| f.stderr),
            r2: fit.map(|f| f.r2),
            classification: self.classification,
            classified_on: self.classified_on,
            boundary_log: self.boundary_log.clone(),
        }
    }
}

/// Flat, serializable record of one indicator sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndicatorSummary {
    /// Anchor position.
    pub anchor: [f64; 3],
    /// Retreat direction.
    pub direction: [f64; 3],
    /// Pole distances.
    pub deltas: Vec<f64>,
    /// Core series.
    pub core: Vec<f64>,
    /// Correction series, real parts.
    pub correction_re: Vec<f64>,
    /// Correction series, imaginary parts.
    pub correction_im: Vec<f64>,
    /// Full indicator magnitudes.
    pub full_abs: Vec<f64>,
    /// Correction `H¹` sizes.
    pub correction_h1: Vec<f64>,
    /// Controlling fundamental-solution norms.
    pub green_h1_obstacle: Vec<f64>,
    /// Fitted slope of the classified series.
    pub slope: Option<f64>,
    /// Standard error of the slope.
    pub slope_stderr: Option<f64>,
    /// Fit quality.
    pub r2: Option<f64>,
    /// Contact verdict.
    pub classification: Classification,
    /// Which series was classified.
    pub classified_on: IndicatorSeries,
    /// Optional boundary-term log.
    pub boundary_log: Vec<BoundaryTermLog>,
}

// ---------------------------------------------------------------------------
// Probing hulls and obstacle position tests.
// ---------------------------------------------------------------------------

/// Where the observed obstacle sits relative to a probing hull.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TruePosition {
    /// Strictly inside the hull: the hull problem carries the interface.
    Nested,
    /// Strictly outside: the hull problem has no interface, so the
    /// correction vanishes identically.
    Disjoint,
}

/// Points on (or very near) a solid's surface, found by projecting rays from
/// the bounding-box center.
fn surface_probe_points(solid: &Solid, count: usize) -> Vec<Point> {
    let (lo, hi) = solid.bounding_box();
    let center = Point::new(
        0.5 * (lo.x + hi.x),
        0.5 * (lo.y + hi.y),
        0.5 * (lo.z + hi.z),
    );
    let reach = (hi - lo).norm();
    fibonacci_directions(count)
        .into_iter()
        .map(|d| project_to_surface(solid, &(center + d * reach)))
        .collect()
}

/// Center and circumradius of a solid: the bounding-box center paired with
/// the largest sampled surface distance from it (exact for balls; for other
/// shapes the hull inflation absorbs the small sampling deficit).
fn bounding_sphere(solid: &Solid) -> (Point, f64) {
    let (lo, hi) = solid.bounding_box();
    let center = Point::new(
        0.5 * (lo.x + hi.x),
        0.5 * (lo.y + hi.y),
        0.5 * (lo.z + hi.z),
    );
    let radius = surface_probe_points(solid, 64)
        .iter()
        .map(|p| (p - center).norm())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    (center, radius)
}

/// Builds the probing hull around a trial solid: an inflated circumscribed
/// ball when it fits strictly inside the outer domain (margin `1.5h`),
/// otherwise the whole outer domain. Returns the hull and whether the
/// compact ball was used.
fn probing_hull(trial: &Solid, outer: &Solid, inflation: f64, h: f64) -> (Solid, bool) {
    let (center, circum) = bounding_sphere(trial);
    let radius = circum * inflation.max(1.05);
    let margin = 1.5 * h + 1e-3;
    let fits = fibonacci_directions(64)
        .into_iter()
        .all(|d| outer.signed_distance(&(center + d * radius)) <= -margin)
        && outer.signed_distance(&center) <= -margin;
    if fits {
        (
            Solid::Ball {
                center: [center.x, center.y, center.z],
                radius,
            },
            true,
        )
    } else {
        (outer.clone(), false)
    }
}

/// Decides whether the observed obstacle lies strictly inside or strictly
/// outside a probing hull; straddling configurations are rejected because
/// the hull transmission problem cannot represent a clipped interface.
fn classify_true_position(obstacle: &Solid, hull: &Solid) -> Result<TruePosition> {
    let samples = surface_probe_points(obstacle, 64);
    let mut inside = 0usize;
    let mut outside = 0usize;
    for p in &samples {
        let sd = hull.signed_distance(p);
        if sd < -1e-9 {
            inside += 1;
        } else if sd > 1e-9 {
            outside += 1;
        } else {
            return Err(LabError::Geometry(
                "observed obstacle surface touches the probing hull boundary; \
                 inflate or shrink the trial region"
                    .into(),
            ));
        }
    }
    if outside == 0 {
        return Ok(TruePosition::Nested);
    }
    if inside == 0 {
        // Entirely-outside surface samples still admit the degenerate case
        // of a hull swallowed by the obstacle.
        let (hull_center, _) = bounding_sphere(hull);
        if obstacle.contains(&hull_center) {
            return Err(LabError::Geometry(
                "probing hull lies inside the observed obstacle".into(),
            ));
        }
        return Ok(TruePosition::Disjoint);
    }
    Err(LabError::Geometry(format!(
        "probing hull straddles the observed obstacle boundary \
         ({inside} surface samples inside, {outside} outside); \
         move or resize the trial region"
    )))
}

/// Validates a pole-retreat grid: positive, strictly decreasing, at least
/// five entries, and approximately geometric.
fn validate_delta_grid(deltas: &[f64]) -> Result<()> {
    if deltas.len() < 5 {
        return Err(LabError::Config(format!(
            "pole-retreat grid needs at least 5 distances for a slope fit, got {}",
            deltas.len()
        )));
    }
    let mut ratios = Vec::with_capacity(deltas.len() - 1);
    for w in deltas.windows(2) {
        if !(w[0].is_finite() && w[1].is_finite()) || w[1] <= 0.0 || w[1] >= w[0] {
            return Err(LabError::Config(
                "pole-retreat grid must be positive and strictly decreasing".into(),
            ));
        }
        ratios.push(w[1] / w[0]);
    }
    let min_r = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_r = ratios.iter().cloned().fold(0.0f64, f64::max);
    if max_r / min_r > 1.5 {
        return Err(LabError::Config(format!(
            "pole-retreat grid must be approximately geometric \
             (consecutive ratio spread {:.2}× exceeds 1.5×)",
            max_r / min_r
        )));
    }
    Ok(())
}

/// Checks that the trial contrast `b₂ − a₂` is sign-definite over the trial
/// obstacle (surface, interior shells, and the probe point itself) and
/// returns its sign.
fn check_weight_sign(trial: &TrialObstacle, x0: &Point) -> Result<f64> {
    let mut pts = surface_probe_points(&trial.solid, 48);
    let (center, _) = bounding_sphere(&trial.solid);
    let shells: Vec<Point> = pts
        .iter()
        .flat_map(|p| {
            [0.35, 0.7]
                .into_iter()
                .map(|f| center + (p - center) * f)
                .collect::<Vec<_>>()
        })
        .collect();
    pts.extend(shells);
    pts.push(project_to_surface(&trial.solid, x0));
    pts.push(center);
    let mut positive = 0usize;
    let mut negative = 0usize;
    for p in &pts {
        let w = trial.medium.b_at(p) - trial.medium.a_at(p);
        if w > 1e-12 {
            positive += 1;
        } else if w < -1e-12 {
            negative += 1;
        } else {
            return Err(LabError::Medium(
                "trial contrast b₂ − a₂ degenerates near the probe point; \
                 the contact indicator requires a sign-definite jump"
                    .into(),
            ));
        }
    }
    if positive > 0 && negative > 0 {
        return Err(LabError::Medium(
            "trial contrast b₂ − a₂ changes sign over the trial obstacle; \
             the contact indicator requires a sign-definite jump"
                .into(),
        ));
    }
    Ok(if positive > 0 { 1.0 } else { -1.0 })
}

// ---------------------------------------------------------------------------
// The contact indicator.
// ---------------------------------------------------------------------------

/// One evaluated pole sample of the indicator.
struct IndicatorSample {
    core: f64,
    correction: Complex64,
    correction_h1: f64,
    green_h1: f64,
    log: Option<BoundaryTermLog>,
}

/// Sweeps poles `x₀ + δν` toward the anchor and classifies the blow-up rate
/// of the weighted volume term against the observed medium.
///
/// The probing hull is an inflated circumscribed ball of the trial solid
/// (falling back to the whole outer domain when the ball does not fit); the
/// observed obstacle must lie strictly inside or strictly outside it. The
/// trial contrast `b₂ − a₂` must be sign-definite (checked). Pole placement
/// failures surface as errors.
pub fn obstacle_indicator(
    x0: &Point,
    observed: &ObservedScenario,
    trial: &TrialObstacle,
    deltas: &[f64],
    config: &IndicatorConfig,
) -> Result<IndicatorCurve> {
    validate_delta_grid(deltas)?;
    check_weight_sign(trial, x0)?;
    let surface_anchor = project_to_surface(&trial.solid, x0);
    let direction = trial.solid.normal_at(&surface_anchor);

    if config.delta_dependent_hull {
        return delta_dependent_indicator(x0, &direction, observed, trial, deltas, config);
    }

    let (hull, _) = probing_hull(
        &trial.solid,
        &observed.spec.outer,
        config.hull_inflation,
        config.h,
    );
    let ctx = build_hull_context(&hull, observed, config)?;
    let trial_ctx = if config.with_boundary_log {
        Some(build_trial_context(&hull, trial, config)?)
    } else {
        None
    };
    indicator_with_context(
        &ctx,
        trial_ctx.as_ref(),
        observed,
        trial,
        x0,
        &direction,
        deltas,
        config,
    )
}

/// Builds the observed medium's correction context on a probing hull,
/// deciding whether the observed obstacle participates.
fn build_hull_context(
    hull: &Solid,
    observed: &ObservedScenario,
    config: &IndicatorConfig,
) -> Result<SingularSolutionContext> {
    let nested_obstacle = match &observed.spec.obstacle {
        None => None,
        Some(o) => match classify_true_position(o, hull)? {
            TruePosition::Nested => Some(o.clone()),
            TruePosition::Disjoint => None,
        },
    };
    let v_spec = DomainSpec {
        dimension: 3,
        outer: hull.clone(),
        obstacle: nested_obstacle,
        gamma: BoundaryPatch::full(),
        outer_regularity: SurfaceRegularity::C11,
        obstacle_regularity: observed.spec.obstacle_regularity,
    };
    SingularSolutionContext::new(
        &v_spec,
        &observed.medium,
        config.h,
        &config.green_grid,
        config.certify_solvability,
    )
}

/// Builds the trial medium's own correction context (boundary-term logging).
fn build_trial_context(
    hull: &Solid,
    trial: &TrialObstacle,
    config: &IndicatorConfig,
) -> Result<SingularSolutionContext> {
    let v_spec = DomainSpec {
        dimension: 3,
        outer: hull.clone(),
        obstacle: Some(trial.solid.clone()),
        gamma: BoundaryPatch::full(),
        outer_regularity: SurfaceRegularity::C11,
        obstacle_regularity: SurfaceRegularity::C11,
    };
    SingularSolutionContext::new(
        &v_spec,
        &trial.medium,
        config.h,
        &config.green_grid,
        false,
    )
}

/// Runs a pole sweep against prebuilt contexts (the marching reconstructor
/// calls this directly to share one context across every ray).
#[allow(clippy::too_many_arguments)]
fn indicator_with_context(
    ctx: &SingularSolutionContext,
    trial_ctx: Option<&SingularSolutionContext>,
    observed: &ObservedScenario,
    trial: &TrialObstacle,
    anchor: &Point,
    direction: &Vector,
    deltas: &[f64],
    config: &IndicatorConfig,
) -> Result<IndicatorCurve> {
    let samples: Vec<Result<(Point, IndicatorSample)>> = deltas
        .par_iter()
        .map(|&delta| {
            let pole = place_pole(&trial.solid, anchor, direction, delta, config.pole_margin)?;
            let sample = indicator_sample(
                ctx, trial_ctx, observed, trial, anchor, delta, &pole, config, true,
            )?;
            Ok((pole, sample))
        })
        .collect();

    let mut poles = Vec::with_capacity(deltas.len());
    let mut out = Vec::with_capacity(deltas.len());
    for s in samples {
        let (pole, sample) = s?;
        poles.push(pole);
        out.push(sample);
    }
    Ok(assemble_curve(anchor, direction, deltas, poles, out, config))
}

/// Evaluates one pole: the core octree integral, the correction pairing,
/// norm diagnostics, and the optional boundary-term log.
#[allow(clippy::too_many_arguments)]
fn indicator_sample(
    ctx: &SingularSolutionContext,
    trial_ctx: Option<&SingularSolutionContext>,
    observed: &ObservedScenario,
    trial: &TrialObstacle,
    anchor: &Point,
    delta: f64,
    pole: &Point,
    config: &IndicatorConfig,
    with_core: bool,
) -> Result<IndicatorSample> {
    let pair = ctx.pair_at(pole)?;
    let weight = {
        let m = trial.medium.clone();
        move |p: &Point| m.b_at(p) / m.a_at(p) - 1.0
    };
    let (base_d, bnd_d, pole_d) = config.volume_depths;

    let core = if with_core {
        let g = pair.green.clone();
        integrate_solid_adaptive(
            &trial.solid,
            &|p: &Point| {
                let grad = g.eval_grad(p);
                weight(p) * (grad[0].norm_sqr() + grad[1].norm_sqr() + grad[2].norm_sqr())
            },
            Some(pole),
            base_d,
            bnd_d,
            pole_d,
        )
    } else {
        0.0
    };

    let correction = if pair.correction.is_some() {
        let g = pair.green.clone();
        let pairing = |p: &Point| -> Complex64 {
            let eg = pair.correction_grad_at(p);
            let gg = g.eval_grad(p);
            let mut acc = Complex64::new(0.0, 0.0);
            for c in 0..3 {
                acc += eg[c] * gg[c].conj();
            }
            acc * weight(p)
        };
        let re = integrate_solid_adaptive(
            &trial.solid,
            &|p: &Point| pairing(p).re,
            Some(pole),
            base_d,
            bnd_d,
            pole_d,
        );
        let im = integrate_solid_adaptive(
            &trial.solid,
            &|p: &Point| pairing(p).im,
            Some(pole),
            base_d,
            bnd_d,
            pole_d,
        );
        Complex64::new(re, im)
    } else {
        Complex64::new(0.0, 0.0)
    };

    let log = match trial_ctx {
        None => None,
        Some(tctx) => Some(boundary_term_log(
            &pair, tctx, observed, trial, anchor, delta, pole, config,
        )?),
    };

    Ok(IndicatorSample {
        core,
        correction,
        correction_h1: pair.correction_h1(),
        green_h1: pair.norm_green_h1_obstacle,
        log,
    })
}

/// Evaluates the logged boundary terms of the gap identity for one pole:
/// the trial-interface term, the observed-interface pairing, and the
/// near-contact energies of the trial singular solution.
#[allow(clippy::too_many_arguments)]
fn boundary_term_log(
    observed_pair: &SingularSolutionPair,
    trial_ctx: &SingularSolutionContext,
    observed: &ObservedScenario,
    trial: &TrialObstacle,
    anchor: &Point,
    delta: f64,
    pole: &Point,
    config: &IndicatorConfig,
) -> Result<BoundaryTermLog> {
    let trial_pair = trial_ctx.pair_at(pole)?;
    let shift = 0.35 * config.h;

    // −∫_{∂D₂} c₂ u₂⁻ v̄ dS with the minus trace taken a fraction of a mesh
    // width inside and the plus trace the same distance outside.
    let interface_integrand = {
        let tp = trial_pair.clone();
        let solid = trial.solid.clone();
        let m = trial.medium.clone();
        move |p: &Point| -> Complex64 {
            let nu = solid.normal_at(p);
            let inner = tp.total_field_at(&(p - nu * shift));
            let outer = tp.total_field_at(&(p + nu * shift));
            -Complex64::new(m.c_at(p), 0.0) * inner * outer.conj()
        }
    };
    let int_re = integrate_surface_adaptive(
        &trial.solid,
        &|p: &Point| interface_integrand(p).re,
        pole,
        config.surface_resolution,
    )?;
    let int_im = integrate_surface_adaptive(
        &trial.solid,
        &|p: &Point| interface_integrand(p).im,
        pole,
        config.surface_resolution,
    )?;

    // ⟨N⁺u₁⁺, v⟩ − ⟨u₁⁺, N⁺v⟩ on the observed interface (when nested).
    let (inner_re, inner_im) = match &observed_pair.spec.obstacle {
        None => (0.0, 0.0),
        Some(true_solid) => {
            let integrand = {
                let op = observed_pair.clone();
                let tp = trial_pair.clone();
                let solid = true_solid.clone();
                let m = observed.medium.clone();
                move |p: &Point| -> Complex64 {
                    let nu = solid.normal_at(p);
                    let x_out = p + nu * shift;
                    let u = op.total_field_at(&x_out);
                    let du = op.total_gradient_at(&x_out);
                    let v = tp.total_field_at(&x_out);
                    let dv = tp.total_gradient_at(&x_out);
                    let a_nu = m.magnetic(Branch::Plus).eval(&x_out).dot(&nu);
                    let n_u = du[0] * nu.x + du[1] * nu.y + du[2] * nu.z
                        + Complex64::new(0.0, a_nu) * u;
                    let n_v = dv[0] * nu.x + dv[1] * nu.y + dv[2] * nu.z
                        + Complex64::new(0.0, a_nu) * v;
                    n_u * v.conj() - u * n_v.conj()
                }
            };
            (
                integrate_surface_adaptive(
                    true_solid,
                    &|p: &Point| integrand(p).re,
                    pole,
                    config.surface_resolution,
                )?,
                integrate_surface_adaptive(
                    true_solid,
                    &|p: &Point| integrand(p).im,
                    pole,
                    config.surface_resolution,
                )?,
            )
        }
    };

    // Trial-side minus field u₂⁻ = G₂ + E₀₂⁻ as nodal data on the trial mesh.
    let mesh = trial_ctx.mesh();
    let mut u2_minus = vec![Complex64::new(0.0, 0.0); mesh.vertices.len()];
    for (vi, vertex) in mesh.vertices.iter().enumerate() {
        let base = trial_pair.green.eval(vertex);
        let corr = match &trial_pair.correction {
            None => Complex64::new(0.0, 0.0),
            Some(sol) => sol.u_minus[vi],
        };
        u2_minus[vi] = base + corr;
    }
    let u2_h1 = region_h1_norm(mesh, &u2_minus, Some(Region::Minus));
    let ball_radius = config.contact_ball_factor * trial.solid.diameter();
    let u2_h1_ball =
        region_h1_norm_in_ball(mesh, &u2_minus, Region::Minus, anchor, ball_radius);

    Ok(BoundaryTermLog {
        delta,
        interface_term: (int_re, int_im),
        inner_boundary_term: (inner_re, inner_im),
        tangential_term: (0.0, 0.0),
        u2_minus_h1: u2_h1,
        u2_minus_h1_contact_ball: u2_h1_ball,
    })
}

/// Assembles series, fits, and classification into a curve.
fn assemble_curve(
    anchor: &Point,
    direction: &Vector,
    deltas: &[f64],
    poles: Vec<Point>,
    samples: Vec<IndicatorSample>,
    config: &IndicatorConfig,
) -> IndicatorCurve {
    let core: Vec<f64> = samples.iter().map(|s| s.core).collect();
    let correction: Vec<Complex64> = samples.iter().map(|s| s.correction).collect();
    let full: Vec<Complex64> = samples
        .iter()
        .map(|s| Complex64::new(s.core, 0.0) + s.correction)
        .collect();
    let correction_h1: Vec<f64> = samples.iter().map(|s| s.correction_h1).collect();
    let green_h1: Vec<f64> = samples.iter().map(|s| s.green_h1).collect();
    let boundary_log: Vec<BoundaryTermLog> =
        samples.into_iter().filter_map(|s| s.log).collect();

    let core_peak = core.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let full_abs: Vec<f64> = full.iter().map(|z| z.norm()).collect();
    let corr_abs: Vec<f64> = correction.iter().map(|z| z.norm()).collect();

    let full_fit = fit_log_log(deltas, &full_abs).ok();
    let corr_fit = fit_log_log(deltas, &corr_abs).ok();

    let classification = match config.classify_on {
        IndicatorSeries::Full => classify_series(&full_fit, &full_abs, 0.0, config),
        IndicatorSeries::Correction => classify_series(
            &corr_fit,
            &corr_abs,
            1e-12 * core_peak.max(f64::MIN_POSITIVE),
            config,
        ),
    };

    IndicatorCurve {
        anchor: *anchor,
        direction: *direction,
        deltas: deltas.to_vec(),
        poles,
        core,
        correction,
        full,
        correction_h1,
        green_h1_obstacle: green_h1,
        full_fit,
        correction_fit: corr_fit,
        classified_on: config.classify_on,
        classification,
        boundary_log,
    }
}

/// Applies the slope thresholds. A series that vanishes identically (below
/// the floor) is interior-clear: nothing within reach of the sweep responds.
fn classify_series(
    fit: &Option<SlopeFit>,
    values: &[f64],
    floor: f64,
    config: &IndicatorConfig,
) -> Classification {
    let peak = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak <= floor {
        return Classification::InteriorClear;
    }
    match fit {
        None => Classification::Inconclusive,
        Some(f) => {
            if f.slope <= config.contact_slope {
                Classification::Contact
            } else if f.slope >= config.clear_slope {
                Classification::InteriorClear
            } else {
                Classification::Inconclusive
            }
        }
    }
}

/// The pole-excluding variant (experiment flag): per δ, rebuild a hull whose
/// surface passes between the trial obstacle and the pole, so the pole never
/// enters the probing domain. Feasible only when the per-δ nesting margin
/// `δ/2` exceeds `1.5h` and the anchor sits on the trial circumsphere.
fn delta_dependent_indicator(
    x0: &Point,
    direction: &Vector,
    observed: &ObservedScenario,
    trial: &TrialObstacle,
    deltas: &[f64],
    config: &IndicatorConfig,
) -> Result<IndicatorCurve> {
    let (center, circum) = bounding_sphere(&trial.solid);
    let samples: Vec<Result<(Point, IndicatorSample)>> = deltas
        .par_iter()
        .map(|&delta| {
            if 0.5 * delta < 1.5 * config.h + 1e-6 {
                return Err(LabError::Geometry(format!(
                    "pole-excluding hull infeasible at δ = {delta:.4}: the per-δ nesting \
                     margin δ/2 falls below 1.5 mesh widths (h = {:.4}); enlarge δ or \
                     refine the mesh",
                    config.h
                )));
            }
            let hull = Solid::Ball {
                center: [center.x, center.y, center.z],
                radius: circum + 0.5 * delta,
            };
            let pole = place_pole(&trial.solid, x0, direction, delta, config.pole_margin)?;
            if hull.contains(&pole) {
                return Err(LabError::Geometry(
                    "pole-excluding hull infeasible: the pole falls inside the per-δ hull \
                     (anchor is not on the trial circumsphere)"
                        .into(),
                ));
            }
            let ctx = build_hull_context(&hull, observed, config)?;
            let sample = indicator_sample(
                &ctx, None, observed, trial, x0, delta, &pole, config, true,
            )?;
            Ok((pole, sample))
        })
        .collect();

    let mut poles = Vec::with_capacity(deltas.len());
    let mut out = Vec::with_capacity(deltas.len());
    for s in samples {
        let (pole, sample) = s?;
        poles.push(pole);
        out.push(sample);
    }
    Ok(assemble_curve(x0, direction, deltas, poles, out, config))
}

// ---------------------------------------------------------------------------
// Interface recovery of the coefficient combinations ρ and β.
// ---------------------------------------------------------------------------

/// Numerical policy for interface-coefficient recovery.
#[derive(Debug, Clone)]
pub struct RecoveryConfig {
    /// Pole-retreat grid; `None` uses 8 geometric distances in
    /// `[0.002, 0.02] ×` the obstacle diameter (the functionals are exact
    /// pole integrals, so the grid can go far below any mesh width).
    pub deltas: Option<Vec<f64>>,
    /// Collocation grid for the interior Green's functions.
    pub green_grid: GreenGridSpec,
    /// Interior-hull radius as a multiple of the obstacle circumradius.
    pub omega_inflation: f64,
    /// Volume slope at or below which ρ flags nonzero.
    pub rho_nonzero_slope: f64,
    /// Growth significance: β flags nonzero when the fitted `log(1/δ)`
    /// coefficient exceeds this many standard errors.
    pub beta_sigma_factor: f64,
    /// Octree depths (base, boundary, pole) for volume quadrature.
    pub volume_depths: (u32, u32, u32),
    /// Surface quadrature resolution.
    pub surface_resolution: f64,
    /// Exterior-ball constant for pole placement.
    pub pole_margin: f64,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        RecoveryConfig {
            deltas: None,
            green_grid: GreenGridSpec {
                n: 14,
                ..GreenGridSpec::default()
            },
            omega_inflation: 1.35,
            rho_nonzero_slope: -0.75,
            beta_sigma_factor: 3.0,
            volume_depths: (2, 4, 11),
            surface_resolution: 0.06,
            pole_margin: 0.5,
        }
    }
}

/// Recovery verdicts and series at one boundary anchor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnchorVerdict {
    /// Anchor on the interface.
    pub anchor: [f64; 3],
    /// Volume-functional magnitudes `R(δ)`.
    pub rho_values: Vec<f64>,
    /// Log–log fit of `R(δ)`.
    pub rho_fit: Option<SlopeFit>,
    /// `ρ ≠ 0` verdict (volume slope reaches the blow-up band).
    pub rho_nonzero: bool,
    /// Surface-functional magnitudes `B(δ)`.
    pub beta_values: Vec<f64>,
    /// Fitted coefficient of `log(1/δ)` in `B(δ)`.
    pub beta_growth: f64,
    /// Standard error of the growth coefficient.
    pub beta_growth_stderr: f64,
    /// `β ≠ 0` verdict (growth significant against the bounded remainder).
    pub beta_nonzero: bool,
    /// Magnitudes of the interior remainder of the surface identity
    /// (bounded in δ; vanishes identically when `a₁ = a₂` and the interior
    /// potentials agree).
    pub remainder_values: Vec<f64>,
}

/// Full interface-recovery report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RhoBetaReport {
    /// Per-anchor verdicts.
    pub anchors: Vec<AnchorVerdict>,
    /// The pole-retreat grid used.
    pub deltas: Vec<f64>,
    /// max |a·b − 1| sampled on each medium (the normalization gate).
    pub ab_defect: (f64, f64),
    /// With `ab ≡ 1` on both media: `a₁ = a₂` and `b₁ = b₂` exactly when
    /// ρ ≡ 0 at every anchor. `None` when the normalization fails.
    pub a_b_equal: Option<bool>,
    /// With `ab ≡ 1` and ρ ≡ 0: `c₁ = c₂` exactly when β ≡ 0 everywhere.
    pub c_equal: Option<bool>,
    /// Normalized residual of the interior cross-validation identity paired
    /// over two fixed exterior poles (identically zero when the interior
    /// potentials of the two media agree).
    pub cross_residual: f64,
    /// Distance between the attached boundary-data records, when both
    /// scenarios carry them.
    pub cauchy_distance: Option<f64>,
}

impl RhoBetaReport {
    /// Delimited text table: one row per (anchor, δ).
    pub fn export_delimited(&self) -> String {
        let mut out = String::from(
            "# interface recovery: volume functional R, surface functional B, remainder\n\
             anchor_x\tanchor_y\tanchor_z\tdelta\trho_value\tbeta_value\tremainder\n",
        );
        for verdict in &self.anchors {
            for (i, &d) in self.deltas.iter().enumerate() {
                out.push_str(&format!(
                    "{:.6}\t{:.6}\t{:.6}\t{:.12e}\t{:.12e}\t{:.12e}\t{:.12e}\n",
                    verdict.anchor[0],
                    verdict.anchor[1],
                    verdict.anchor[2],
                    d,
                    verdict.rho_values[i],
                    verdict.beta_values[i],
                    verdict.remainder_values[i],
                ));
            }
        }
        out
    }
}

/// Decides `ρ = b₁/b₂ − a₁/a₂ = 0` vs `≠ 0` and `β = c₁a₂ − c₂a₁ = 0` vs
/// `≠ 0` at each interface anchor from two observed media sharing the same
/// obstacle, using interior Green's functions of the two minus-side
/// operators.
///
/// Per anchor and δ, one pole feeds two functionals: the volume pairing
/// `R(δ) = |∫_D ρ̂ ∇G₁·∇Ḡ₂|` (blow-up slope `δ^{2−n}` ⟺ ρ ≠ 0) and the
/// surface pairing `B(δ) = |∫_{∂D} (b₂a₂)⁻¹ β̂ G₁Ḡ₂ dS|` (growth `log(1/δ)`
/// ⟺ β ≠ 0, tested against its bounded interior remainder, which is also
/// computed and reported). Under `ab ≡ 1` on both media, null verdicts
/// upgrade to coefficient equalities. Diagnostics include a cross-validation
/// residual that vanishes identically when the interior potentials agree.
pub fn recover_rho_beta(
    observed1: &ObservedScenario,
    observed2: &ObservedScenario,
    anchors: &[Point],
    config: &RecoveryConfig,
) -> Result<RhoBetaReport> {
    let obstacle1 = observed1.spec.obstacle.as_ref().ok_or_else(|| {
        LabError::Geometry("interface recovery requires an obstacle in scenario 1".into())
    })?;
    let obstacle2 = observed2.spec.obstacle.as_ref().ok_or_else(|| {
        LabError::Geometry("interface recovery requires an obstacle in scenario 2".into())
    })?;
    if !solids_agree(obstacle1, obstacle2) {
        return Err(LabError::Geometry(
            "interface recovery requires both scenarios to share the same obstacle".into(),
        ));
    }
    if anchors.is_empty() {
        return Err(LabError::Config("no recovery anchors supplied".into()));
    }
    let obstacle = obstacle1.clone();
    let diam = obstacle.diameter();
    let deltas = match &config.deltas {
        Some(d) => {
            validate_delta_grid(d)?;
            d.clone()
        }
        None => geometric_deltas(0.002 * diam, 0.02 * diam, 8),
    };

    let (center, circum) = bounding_sphere(&obstacle);
    let omega = Solid::Ball {
        center: [center.x, center.y, center.z],
        radius: circum * config.omega_inflation.max(1.1),
    };

    let m1 = &observed1.medium;
    let m2 = &observed2.medium;

    // Structural nullity pre-samples: skip quadrature when a combination
    // vanishes at every sample (exact for the constant-coefficient catalog).
    let probe_pts = {
        let mut pts = surface_probe_points(&obstacle, 24);
        pts.extend(
            surface_probe_points(&obstacle, 12)
                .iter()
                .map(|p| center + (p - center) * 0.5),
        );
        pts
    };
    let rho_hat = |p: &Point| m1.b_at(p) / m2.b_at(p) - m1.a_at(p) / m2.a_at(p);
    let beta_hat = |p: &Point| m1.c_at(p) * m2.a_at(p) - m2.c_at(p) * m1.a_at(p);
    let rho_null = probe_pts.iter().all(|p| rho_hat(p).abs() <= 1e-14);
    let beta_null = probe_pts.iter().all(|p| beta_hat(p).abs() <= 1e-14);
    let remainder_null = probe_pts.iter().all(|p| {
        let ratio_grad = ratio_gradient(m1, m2, p).norm();
        let a_diff = (m1.magnetic(Branch::Minus).eval(p) - m2.magnetic(Branch::Minus).eval(p))
            .norm();
        let pot_diff = (potential_term(m1, p) - potential_term(m2, p)).norm();
        ratio_grad <= 1e-14 && a_diff <= 1e-14 && pot_diff <= 1e-14
    });

    let verdicts: Vec<Result<AnchorVerdict>> = anchors
        .par_iter()
        .map(|x0| {
            recovery_at_anchor(
                x0,
                &obstacle,
                &omega,
                m1,
                m2,
                &deltas,
                config,
                rho_null,
                beta_null,
                remainder_null,
            )
        })
        .collect();
    let mut anchor_verdicts = Vec::with_capacity(anchors.len());
    for v in verdicts {
        anchor_verdicts.push(v?);
    }

    let ab_defect = (ab_defect_of(m1, &probe_pts), ab_defect_of(m2, &probe_pts));
    let normalized = ab_defect.0 <= 1e-9 && ab_defect.1 <= 1e-9;
    let all_rho_null = anchor_verdicts.iter().all(|v| !v.rho_nonzero);
    let all_beta_null = anchor_verdicts.iter().all(|v| !v.beta_nonzero);
    let a_b_equal = normalized.then_some(all_rho_null);
    let c_equal = normalized.then_some(all_rho_null && all_beta_null);

    let cross_residual = cross_validation_residual(&obstacle, &omega, m1, m2, config)?;
    let cauchy_distance = match (&observed1.cauchy, &observed2.cauchy) {
        (Some(c1), Some(c2)) => Some(c1.distance(c2)?),
        _ => None,
    };

    Ok(RhoBetaReport {
        anchors: anchor_verdicts,
        deltas,
        ab_defect,
        a_b_equal,
        c_equal,
        cross_residual,
        cauchy_distance,
    })
}

/// `∇(a₁/a₂)` at a point.
fn ratio_gradient(m1: &Medium, m2: &Medium, p: &Point) -> Vector {
    let a1 = m1.a_at(p);
    let a2 = m2.a_at(p);
    (m1.grad_a_at(p) * a2 - m2.grad_a_at(p) * a1) / (a2 * a2)
}

/// `|A⁻|² + q⁻` at a point (the interior zero-order potential content).
fn potential_term(m: &Medium, p: &Point) -> Complex64 {
    Complex64::new(m.magnetic(Branch::Minus).eval(p).norm_squared(), 0.0)
        + m.electric(Branch::Minus).eval(p)
}

/// max |a·b − 1| over sample points.
fn ab_defect_of(m: &Medium, pts: &[Point]) -> f64 {
    pts.iter()
        .map(|p| (m.a_at(p) * m.b_at(p) - 1.0).abs())
        .fold(0.0, f64::max)
}

/// Conservative structural equality for catalog solids.
fn solids_agree(s1: &Solid, s2: &Solid) -> bool {
    serde_json::to_string(s1).ok() == serde_json::to_string(s2).ok()
}

/// Runs the δ sweep of both recovery functionals at one anchor.
#[allow(clippy::too_many_arguments)]
fn recovery_at_anchor(
    x0: &Point,
    obstacle: &Solid,
    omega: &Solid,
    m1: &Medium,
    m2: &Medium,
    deltas: &[f64],
    config: &RecoveryConfig,
    rho_null: bool,
    beta_null: bool,
    remainder_null: bool,
) -> Result<AnchorVerdict> {
    let anchor = project_to_surface(obstacle, x0);
    let nu = obstacle.normal_at(&anchor);
    let (base_d, bnd_d, pole_d) = config.volume_depths;

    let mut rho_values = Vec::with_capacity(deltas.len());
    let mut beta_values = Vec::with_capacity(deltas.len());
    let mut remainder_values = Vec::with_capacity(deltas.len());

    for &delta in deltas {
        let pole = place_pole(obstacle, &anchor, &nu, delta, config.pole_margin)?;
        let g1 = solve_magnetic_green(m1, Branch::Minus, omega, &pole, &config.green_grid)?;
        let g2 = solve_magnetic_green(m2, Branch::Minus, omega, &pole, &config.green_grid)?;
        for g in [&g1, &g2] {
            if !g.potential_free && g.residual > 1e3 * config.green_grid.tol {
                return Err(LabError::Solver(format!(
                    "interior fundamental-solution iteration stalled at residual {:.3e}",
                    g.residual
                )));
            }
        }

        // Volume functional R(δ).
        let rho_value = if rho_null {
            0.0
        } else {
            let pairing = |p: &Point| -> Complex64 {
                let d1 = g1.eval_grad(p);
                let d2 = g2.eval_grad(p);
                let mut acc = Complex64::new(0.0, 0.0);
                for c in 0..3 {
                    acc += d1[c] * d2[c].conj();
                }
                acc * Complex64::new(
                    m1.b_at(p) / m2.b_at(p) - m1.a_at(p) / m2.a_at(p),
                    0.0,
                )
            };
            Complex64::new(
                integrate_solid_adaptive(
                    obstacle,
                    &|p: &Point| pairing(p).re,
                    Some(&pole),
                    base_d,
                    bnd_d,
                    pole_d,
                ),
                integrate_solid_adaptive(
                    obstacle,
                    &|p: &Point| pairing(p).im,
                    Some(&pole),
                    base_d,
                    bnd_d,
                    pole_d,
                ),
            )
            .norm()
        };

        // Surface functional B(δ).
        let beta_value = if beta_null {
            0.0
        } else {
            let pairing = |p: &Point| -> Complex64 {
                let w = (m1.c_at(p) * m2.a_at(p) - m2.c_at(p) * m1.a_at(p))
                    / (m2.b_at(p) * m2.a_at(p));
                g1.eval(p) * g2.eval(p).conj() * Complex64::new(w, 0.0)
            };
            Complex64::new(
                integrate_surface_adaptive(
                    obstacle,
                    &|p: &Point| pairing(p).re,
                    &pole,
                    config.surface_resolution,
                )?,
                integrate_surface_adaptive(
                    obstacle,
                    &|p: &Point| pairing(p).im,
                    &pole,
                    config.surface_resolution,
                )?,
            )
            .norm()
        };

        // Interior remainder of the surface identity: the terms that keep
        // B(δ) from being exactly the β pairing. Bounded in δ; identically
        // zero when a₁ = a₂ and the interior potentials agree.
        let remainder_value = if remainder_null {
            0.0
        } else {
            let pairing = |p: &Point| -> Complex64 {
                let ratio = m1.a_at(p) / m2.a_at(p);
                let grad_ratio = ratio_gradient(m1, m2, p);
                let a1f = m1.magnetic(Branch::Minus).eval(p);
                let a2f = m2.magnetic(Branch::Minus).eval(p);
                let v1 = g1.eval(p);
                let v2c = g2.eval(p).conj();
                let d1 = g1.eval_grad(p);
                let d2 = g2.eval_grad(p);
                // Gradient-level term: (∇ρ̃ + iρ̃(A₂−A₁)) · (G₁∇Ḡ₂ − Ḡ₂∇G₁)
                // with ρ̃ = a₁/a₂.
                let diff_a = a2f - a1f;
                let mut grad_term = Complex64::new(0.0, 0.0);
                for c in 0..3 {
                    let (gr, da) = match c {
                        0 => (grad_ratio.x, diff_a.x),
                        1 => (grad_ratio.y, diff_a.y),
                        _ => (grad_ratio.z, diff_a.z),
                    };
                    grad_term += Complex64::new(gr, ratio * da)
                        * (v1 * d2[c].conj() - v2c * d1[c]);
                }
                // Zero-order term:
                // (−i∇ρ̃·(A₂+A₁) + ρ̃(|A₂|² + q₂ − |A₁|² − q₁)) G₁Ḡ₂.
                let zero_order = (Complex64::new(0.0, -grad_ratio.dot(&(a2f + a1f)))
                    + Complex64::new(ratio, 0.0)
                        * (potential_term(m2, p) - potential_term(m1, p)))
                    * v1
                    * v2c;
                grad_term + zero_order
            };
            Complex64::new(
                integrate_solid_adaptive(
                    obstacle,
                    &|p: &Point| pairing(p).re,
                    Some(&pole),
                    base_d,
                    bnd_d,
                    pole_d,
                ),
                integrate_solid_adaptive(
                    obstacle,
                    &|p: &Point| pairing(p).im,
                    Some(&pole),
                    base_d,
                    bnd_d,
                    pole_d,
                ),
            )
            .norm()
        };

        rho_values.push(rho_value);
        beta_values.push(beta_value);
        remainder_values.push(remainder_value);
    }

    let rho_fit = fit_log_log(deltas, &rho_values).ok();
    let rho_nonzero = rho_fit
        .as_ref()
        .map(|f| f.slope <= config.rho_nonzero_slope)
        .unwrap_or(false);

    let sigmas: Vec<f64> = deltas.iter().map(|d| (1.0 / d).ln()).collect();
    let (beta_growth, beta_growth_stderr) = linear_fit(&sigmas, &beta_values);
    let beta_scale = beta_values.iter().fold(0.0f64, |m, v| m.max(*v));
    let beta_nonzero = beta_scale > 0.0
        && beta_growth > 0.0
        && beta_growth > config.beta_sigma_factor * beta_growth_stderr;

    Ok(AnchorVerdict {
        anchor: [anchor.x, anchor.y, anchor.z],
        rho_values,
        rho_fit,
        rho_nonzero,
        beta_values,
        beta_growth,
        beta_growth_stderr,
        beta_nonzero,
        remainder_values,
    })
}

/// Interior cross-validation: pairs the two media's interior fundamental
/// solutions (two fixed exterior poles) through the identity whose integrand
/// vanishes pointwise exactly when the interior potentials agree. Returns a
/// residual normalized by the integral of the termwise magnitudes.
fn cross_validation_residual(
    obstacle: &Solid,
    omega: &Solid,
    m1: &Medium,
    m2: &Medium,
    config: &RecoveryConfig,
) -> Result<f64> {
    let dirs = fibonacci_directions(7);
    let (center, circum) = bounding_sphere(obstacle);
    let standoff = 0.45 * obstacle.diameter();
    let mut poles = Vec::new();
    for k in [1usize, 4] {
        let sp = project_to_surface(obstacle, &(center + dirs[k] * (2.0 * circum)));
        let nu = obstacle.normal_at(&sp);
        poles.push(place_pole(obstacle, &sp, &nu, standoff, config.pole_margin)?);
    }
    let g1 = solve_magnetic_green(m1, Branch::Minus, omega, &poles[0], &config.green_grid)?;
    let g2 = solve_magnetic_green(m2, Branch::Minus, omega, &poles[1], &config.green_grid)?;

    let (base_d, bnd_d, _) = config.volume_depths;
    let numerator_term = |p: &Point| -> Complex64 {
        let u = g1.eval(p);
        let du = g1.eval_grad(p);
        let v = g2.eval(p);
        let dv = g2.eval_grad(p);
        let a_diff = m2.magnetic(Branch::Minus).eval(p) - m1.magnetic(Branch::Minus).eval(p);
        let mut transport = Complex64::new(0.0, 0.0);
        for c in 0..3 {
            let comp = match c {
                0 => a_diff.x,
                1 => a_diff.y,
                _ => a_diff.z,
            };
            transport += Complex64::new(0.0, comp) * (v.conj() * du[c] - u * dv[c].conj());
        }
        let zero_order = (potential_term(m1, p) - potential_term(m2, p)) * u * v.conj();
        transport + zero_order
    };
    let scale_term = |p: &Point| -> f64 {
        let u = g1.eval(p);
        let du = g1.eval_grad(p);
        let v = g2.eval(p);
        let dv = g2.eval_grad(p);
        let du_n = (du[0].norm_sqr() + du[1].norm_sqr() + du[2].norm_sqr()).sqrt();
        let dv_n = (dv[0].norm_sqr() + dv[1].norm_sqr() + dv[2].norm_sqr()).sqrt();
        let a_diff =
            (m2.magnetic(Branch::Minus).eval(p) - m1.magnetic(Branch::Minus).eval(p)).norm();
        let pot_diff = (potential_term(m1, p) - potential_term(m2, p)).norm();
        a_diff * (v.norm() * du_n + u.norm() * dv_n) + pot_diff * u.norm() * v.norm()
    };

    let num = Complex64::new(
        integrate_solid_adaptive(
            obstacle,
            &|p: &Point| numerator_term(p).re,
            None,
            base_d,
            bnd_d,
            0,
        ),
        integrate_solid_adaptive(
            obstacle,
            &|p: &Point| numerator_term(p).im,
            None,
            base_d,
            bnd_d,
            0,
        ),
    )
    .norm();
    let scale = integrate_solid_adaptive(obstacle, &scale_term, None, base_d, bnd_d, 0);
    if scale <= 1e-300 {
        return Ok(0.0);
    }
    Ok(num / scale)
}

/// Ordinary least squares `y ≈ slope·x + intercept`; returns the slope and
/// its standard error (0 when fewer than 3 points).
fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n < 3 || n != ys.len() {
        return (0.0, 0.0);
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx <= 0.0 {
        return (0.0, 0.0);
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let r = y - (slope * x + intercept);
            r * r
        })
        .sum();
    let stderr = (ss_res / (nf - 2.0) / sxx).sqrt();
    (slope, stderr)
}

// ---------------------------------------------------------------------------
// H¹ best approximation from solution dictionaries (density workhorse).
// ---------------------------------------------------------------------------

/// Residual history of an H¹ least-squares fit against nested dictionary
/// prefixes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RungeReport {
    /// Dictionary prefix sizes, as requested.
    pub sizes: Vec<usize>,
    /// H¹ residual ‖target − best fit‖ for each prefix.
    pub residuals: Vec<f64>,
    /// H¹ norm of the target itself (the size-0 residual).
    pub target_norm: f64,
    /// Whether any prefix Gram matrix was numerically rank-deficient.
    pub rank_deficient: bool,
    /// Smallest singular-value ratio σ_min/σ_max seen across prefixes.
    pub singular_value_ratio: f64,
}

/// Best-approximates a nodal target field by span prefixes of a solution
/// dictionary in the full H¹ inner product of the mesh, reporting the
/// residual decay.
///
/// The normal equations are solved through a complex SVD pseudo-inverse, so
/// (near-)linearly-dependent dictionary members degrade gracefully: the
/// residual stays optimal and the report flags rank deficiency instead of
/// failing. Residuals are computed directly as the H¹ norm of the nodal
/// residual field, so they are nonnegative and nonincreasing in the prefix
/// size by construction.
pub fn runge_approximate(
    mesh: &Mesh,
    target: &[Complex64],
    dictionary: &[Vec<Complex64>],
    sizes: &[usize],
) -> Result<RungeReport> {
    let nv = mesh.vertices.len();
    if target.len() != nv {
        return Err(LabError::Config(format!(
            "target field has {} nodal values but the mesh has {} vertices",
            target.len(),
            nv
        )));
    }
    for (i, member) in dictionary.iter().enumerate() {
        if member.len() != nv {
            return Err(LabError::Config(format!(
                "dictionary member {i} has {} nodal values but the mesh has {} vertices",
                member.len(),
                nv
            )));
        }
    }
    if sizes.is_empty() {
        return Err(LabError::Config("no prefix sizes requested".into()));
    }
    let max_size = *sizes.iter().max().unwrap();
    if max_size > dictionary.len() {
        return Err(LabError::Config(format!(
            "prefix size {} exceeds the dictionary ({} members)",
            max_size,
            dictionary.len()
        )));
    }

    // Exact H¹ Gram data on the piecewise-linear space.
    let gram = h1_gram(mesh, dictionary, target);
    let target_norm = region_h1_norm(mesh, target, None);

    let mut residuals = Vec::with_capacity(sizes.len());
    let mut rank_deficient = false;
    let mut sv_ratio = f64::INFINITY;
    for &size in sizes {
        if size == 0 {
            residuals.push(target_norm);
            continue;
        }
        let g = gram.matrix.view((0, 0), (size, size)).into_owned();
        let rhs = gram.rhs.rows(0, size).into_owned();
        let svd = g.clone().svd(true, true);
        let smax = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
        let smin = svd
            .singular_values
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if smax <= 0.0 {
            rank_deficient = true;
            residuals.push(target_norm);
            continue;
        }
        let ratio = smin / smax;
        sv_ratio = sv_ratio.min(ratio);
        if ratio < 1e-10 {
            rank_deficient = true;
        }
        let pinv = svd.pseudo_inverse(1e-12 * smax).map_err(|e| {
            LabError::Solver(format!("Gram pseudo-inverse failed: {e}"))
        })?;
        // Normal equations G c̄ = b with b_i = ⟨φ_i, target⟩, so the
        // coefficients are the conjugate of the pseudo-solve.
        let conj_coeffs = &pinv * &rhs;
        let coeffs: Vec<Complex64> = conj_coeffs.iter().map(|z| z.conj()).collect();
        let mut residual_field = target.to_vec();
        for (k, c) in coeffs.iter().enumerate() {
            for (node, value) in residual_field.iter_mut().enumerate() {
                *value -= c * dictionary[k][node];
            }
        }
        residuals.push(region_h1_norm(mesh, &residual_field, None));
    }
    if !sv_ratio.is_finite() {
        sv_ratio = 1.0;
    }
    Ok(RungeReport {
        sizes: sizes.to_vec(),
        residuals,
        target_norm,
        rank_deficient,
        singular_value_ratio: sv_ratio,
    })
}

struct GramData {
    matrix: nalgebra::DMatrix<Complex64>,
    rhs: nalgebra::DVector<Complex64>,
}

/// Exact H¹ inner products ⟨x, y⟩ = ∫ ∇x·∇ȳ + x ȳ of nodal fields on the
/// piecewise-linear space: per-cell stiffness `vol·∇x·∇ȳ` plus the exact
/// P1 mass pairing `(vol/20)·Σ_{i,j}(1 + δ_ij) x_i ȳ_j`.
fn h1_gram(mesh: &Mesh, dictionary: &[Vec<Complex64>], target: &[Complex64]) -> GramData {
    let m = dictionary.len();
    let mut matrix = nalgebra::DMatrix::<Complex64>::zeros(m, m);
    let mut rhs = nalgebra::DVector::<Complex64>::zeros(m);
    for (ci, cell) in mesh.cells.iter().enumerate() {
        let vol = mesh.cell_volume(ci);
        let grads = mesh.cell_gradients(ci);
        let cell_grad = |vals: &[Complex64]| -> [Complex64; 3] {
            let mut g = [Complex64::new(0.0, 0.0); 3];
            for (k, &node) in cell.iter().enumerate() {
                let v = vals[node];
                g[0] += v * grads[k].x;
                g[1] += v * grads[k].y;
                g[2] += v * grads[k].z;
            }
            g
        };
        let pair = |x: &[Complex64], y: &[Complex64]| -> Complex64 {
            let gx = cell_grad(x);
            let gy = cell_grad(y);
            let mut stiff = Complex64::new(0.0, 0.0);
            for c in 0..3 {
                stiff += gx[c] * gy[c].conj();
            }
            let mut mass = Complex64::new(0.0, 0.0);
            for (i, &ni) in cell.iter().enumerate() {
                for (j, &nj) in cell.iter().enumerate() {
                    let w = if i == j { 2.0 } else { 1.0 };
                    mass += x[ni] * y[nj].conj() * w;
                }
            }
            stiff * vol + mass * (vol / 20.0)
        };
        for i in 0..m {
            rhs[i] += pair(&dictionary[i], target);
            for j in 0..m {
                matrix[(i, j)] += pair(&dictionary[i], &dictionary[j]);
            }
        }
    }
    GramData { matrix, rhs }
}

/// Nodal traces of free-space point-source fields `1/(4π|x − y|)` for a list
/// of exterior poles — the standard dictionary for density experiments.
pub fn fundamental_dictionary(mesh: &Mesh, poles: &[Point]) -> Result<Vec<Vec<Complex64>>> {
    let mut dict = Vec::with_capacity(poles.len());
    for pole in poles {
        let mut member = Vec::with_capacity(mesh.vertices.len());
        for v in &mesh.vertices {
            let r = (v - pole).norm();
            if r < 1e-6 {
                return Err(LabError::PolePlacement(format!(
                    "dictionary pole ({:.3}, {:.3}, {:.3}) touches a mesh vertex",
                    pole.x, pole.y, pole.z
                )));
            }
            member.push(Complex64::new(1.0 / (4.0 * std::f64::consts::PI * r), 0.0));
        }
        dict.push(member);
    }
    Ok(dict)
}

// ---------------------------------------------------------------------------
// Obstacle reconstruction by ray marching.
// ---------------------------------------------------------------------------

/// Numerical policy for the marching reconstructor.
#[derive(Debug, Clone)]
pub struct ReconstructionConfig {
    /// Number of probing rays (quasi-uniform directions).
    pub rays: usize,
    /// Radius of the moving trial ball.
    pub probe_radius: f64,
    /// Outer search radius: rays start at this distance from the origin.
    pub search_radius: f64,
    /// Pole-retreat grid relative to the trial-ball diameter:
    /// `(lo, hi, count)` geometric.
    pub deltas_rel: (f64, f64, usize),
    /// Number of coarse inward steps per ray.
    pub coarse_steps: usize,
    /// Bisection refinements after the first contact.
    pub bisection_levels: usize,
    /// Slope at or below which a bisection probe counts as contact-side.
    pub bisection_slope: f64,
    /// Mesh width for the shared correction context.
    pub h: f64,
    /// Collocation grid for the probing fundamental solutions.
    pub green_grid: GreenGridSpec,
    /// Octree depths (base, boundary, pole) for the pairing integrals.
    pub volume_depths: (u32, u32, u32),
    /// Exterior-ball constant for pole placement.
    pub pole_margin: f64,
    /// Maximum gap at which adjacent ray contacts join one cluster.
    pub cluster_link: f64,
    /// Smallest admissible anchor parameter along a ray (fraction of the
    /// search radius); marching below it records a miss.
    pub min_t: f64,
    /// Slope thresholds and series policy for the per-probe classification.
    pub indicator: IndicatorConfig,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        ReconstructionConfig {
            rays: 50,
            probe_radius: 0.22,
            search_radius: 0.8,
            deltas_rel: (0.03, 0.2, 6),
            coarse_steps: 10,
            bisection_levels: 6,
            bisection_slope: -0.9,
            h: 0.1,
            green_grid: GreenGridSpec {
                n: 16,
                ..GreenGridSpec::default()
            },
            volume_depths: (2, 5, 12),
            pole_margin: 0.5,
            cluster_link: 0.25,
            min_t: 0.05,
            indicator: IndicatorConfig {
                classify_on: IndicatorSeries::Correction,
                ..IndicatorConfig::default()
            },
        }
    }
}

/// Why a ray stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RayStatus {
    /// Contact was found and bracketed.
    Contact,
    /// The ray marched to its inner limit without a contact (recorded, not
    /// fatal: the ray may simply miss the scatterer).
    NoContact,
    /// The sweep could not produce a classification along this ray.
    Inconclusive,
}

/// One probing ray's outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RayOutcome {
    /// Unit direction of the ray.
    pub direction: [f64; 3],
    /// Status after marching and refinement.
    pub status: RayStatus,
    /// Estimated contact point (anchor position at first contact), when any.
    pub contact_point: Option<[f64; 3]>,
    /// Anchor parameter `t` of the contact along the ray.
    pub contact_t: Option<f64>,
    /// Fitted slope at the final contact verification.
    pub final_slope: Option<f64>,
    /// Heuristic confidence in [0, 1] from slope depth and fit error.
    pub confidence: f64,
    /// Number of indicator probes spent on this ray.
    pub probes: usize,
}

/// Aggregated reconstruction output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconstructionReport {
    /// Per-ray outcomes, ordered by ray index.
    pub rays: Vec<RayOutcome>,
    /// Contact points grouped into connected clusters (indices into `rays`).
    pub clusters: Vec<Vec<usize>>,
    /// Fraction of rays that found contact.
    pub contact_fraction: f64,
    /// Total number of correction solves spent.
    pub solves: usize,
    /// Wall-clock seconds.
    pub wall_seconds: f64,
}

impl ReconstructionReport {
    /// Delimited point cloud of contacts: direction, point, confidence.
    pub fn export_cloud(&self) -> String {
        let mut out = String::from(
            "# reconstruction contact cloud\n\
             dir_x\tdir_y\tdir_z\tx\ty\tz\tconfidence\tcluster\n",
        );
        let cluster_of = |ray: usize| -> i64 {
            for (ci, members) in self.clusters.iter().enumerate() {
                if members.contains(&ray) {
                    return ci as i64;
                }
            }
            -1
        };
        for (ri, ray) in self.rays.iter().enumerate() {
            if let Some(p) = ray.contact_point {
                out.push_str(&format!(
                    "{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.4}\t{}\n",
                    ray.direction[0],
                    ray.direction[1],
                    ray.direction[2],
                    p[0],
                    p[1],
                    p[2],
                    ray.confidence,
                    cluster_of(ri),
                ));
            }
        }
        out
    }
}

/// March state for one ray.
struct RayProbe<'a> {
    ctx: &'a SingularSolutionContext,
    observed: &'a ObservedScenario,
    direction: Vector,
    config: &'a ReconstructionConfig,
    probes: usize,
}

/// Slope probe at anchor parameter `t`: sweeps the correction series of a
/// trial ball whose far surface point is the anchor `t·u`, and returns the
/// fitted slope when one exists. The core series is skipped entirely — it
/// diverges for every anchored sweep and carries no information about the
/// observed medium.
impl RayProbe<'_> {
    fn slope_at(&mut self, t: f64) -> Result<ProbeReading> {
        let cfg = &self.config.indicator;
        let anchor = Point::new(
            t * self.direction.x,
            t * self.direction.y,
            t * self.direction.z,
        );
        let center = anchor - self.direction * self.config.probe_radius;
        let trial_solid = Solid::Ball {
            center: [center.x, center.y, center.z],
            radius: self.config.probe_radius,
        };
        let (lo, hi, count) = self.config.deltas_rel;
        let diam = 2.0 * self.config.probe_radius;
        let deltas = geometric_deltas(lo * diam, hi * diam, count);

        let mut values = Vec::with_capacity(deltas.len());
        for &delta in &deltas {
            let pole = place_pole(
                &trial_solid,
                &anchor,
                &self.direction,
                delta,
                self.config.pole_margin,
            )?;
            self.probes += 1;
            let pair = match self.ctx.pair_at(&pole) {
                Ok(p) => p,
                // A pole landing inside the observed obstacle means the
                // march already overshot the boundary: the contact is
                // further out, which is exactly what a deep slope signals.
                Err(LabError::PolePlacement(_)) => return Ok(ProbeReading::Overshot),
                Err(e) => return Err(e),
            };
            if pair.correction.is_none() {
                return Ok(ProbeReading::Empty);
            }
            let trial = TrialObstacle::with_unit_contrast(trial_solid.clone());
            let sample = indicator_sample(
                self.ctx,
                None,
                self.observed,
                &trial,
                &anchor,
                delta,
                &pole,
                cfg,
                false,
            )?;
            values.push(sample.correction.norm());
        }
        let peak = values.iter().fold(0.0f64, |m, v| m.max(*v));
        if peak <= f64::MIN_POSITIVE {
            return Ok(ProbeReading::Empty);
        }
        match fit_log_log(&deltas, &values) {
            Ok(fit) => Ok(ProbeReading::Slope(fit)),
            Err(_) => Ok(ProbeReading::Unreadable),
        }
    }
}

enum ProbeReading {
    /// Clean sweep with a fitted slope.
    Slope(SlopeFit),
    /// Pole placement hit the observed obstacle: contact lies further out.
    Overshot,
    /// Correction vanishes identically (no interface in reach).
    Empty,
    /// Values present but unfittable.
    Unreadable,
}

/// Reconstructs the scatterer's visible boundary by marching trial balls
/// inward along quasi-uniform rays and bracketing, per ray, the first anchor
/// at which the correction-series slope reaches the contact band.
///
/// All rays share a single correction context on one probing hull: the
/// corrected singular solutions depend only on the observed medium and the
/// pole, never on the trial ball, so the expensive forward assembly happens
/// once. Ray results are merged in ray order, keeping the output independent
/// of scheduling.
pub fn reconstruct_obstacle(
    observed: &ObservedScenario,
    config: &ReconstructionConfig,
) -> Result<ReconstructionReport> {
    if config.rays == 0 {
        return Err(LabError::Config("reconstruction needs at least one ray".into()));
    }
    if config.search_radius <= config.probe_radius {
        return Err(LabError::Config(
            "search radius must exceed the probe radius".into(),
        ));
    }
    let start = Instant::now();

    // One shared hull containing every anchor the march can visit.
    let hull = Solid::Ball {
        center: [0.0, 0.0, 0.0],
        radius: config.search_radius + 0.01,
    };
    let mut icfg = config.indicator.clone();
    icfg.h = config.h;
    icfg.green_grid = config.green_grid.clone();
    icfg.volume_depths = config.volume_depths;
    icfg.pole_margin = config.pole_margin;
    icfg.classify_on = IndicatorSeries::Correction;
    let ctx = build_hull_context(&hull, observed, &icfg)?;

    let directions = fibonacci_directions(config.rays);
    let outcomes: Vec<Result<RayOutcome>> = directions
        .par_iter()
        .map(|dir| march_ray(&ctx, observed, dir, config, &icfg))
        .collect();
    let mut rays = Vec::with_capacity(config.rays);
    for o in outcomes {
        rays.push(o?);
    }

    let clusters = cluster_contacts(&rays, config.cluster_link);
    let contact_count = rays
        .iter()
        .filter(|r| r.status == RayStatus::Contact)
        .count();
    Ok(ReconstructionReport {
        contact_fraction: contact_count as f64 / rays.len() as f64,
        rays,
        clusters,
        solves: ctx.solve_count(),
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Marches one ray outside-in: coarse steps to the first contact-band slope,
/// then bisection against the last clear anchor, then a full classification
/// at the bracketed anchor.
fn march_ray(
    ctx: &SingularSolutionContext,
    observed: &ObservedScenario,
    direction: &Vector,
    config: &ReconstructionConfig,
    icfg: &IndicatorConfig,
) -> Result<RayOutcome> {
    let mut probe = RayProbe {
        ctx,
        observed,
        direction: *direction,
        config,
        probes: 0,
    };
    let t_hi = config.search_radius;
    let t_lo = config.min_t * config.search_radius;
    let step = (t_hi - t_lo) / config.coarse_steps.max(1) as f64;

    let mut last_clear = t_hi;
    let mut first_hit: Option<f64> = None;
    for k in 0..=config.coarse_steps {
        let t = t_hi - step * k as f64;
        if t < t_lo - 1e-12 {
            break;
        }
        match probe.slope_at(t)? {
            ProbeReading::Overshot => {
                first_hit = Some(t);
                break;
            }
            ProbeReading::Slope(fit) => {
                if fit.slope <= config.bisection_slope {
                    first_hit = Some(t);
                    break;
                }
                last_clear = t;
            }
            ProbeReading::Empty => {
                last_clear = t;
            }
            ProbeReading::Unreadable => {
                // Keep marching; an isolated unreadable sweep should not
                // abort the ray.
            }
        }
    }

    let Some(mut hit) = first_hit else {
        return Ok(RayOutcome {
            direction: [direction.x, direction.y, direction.z],
            status: RayStatus::NoContact,
            contact_point: None,
            contact_t: None,
            final_slope: None,
            confidence: 0.0,
            probes: probe.probes,
        });
    };

    // Bisection between the last clear anchor and the first hit.
    let mut clear = last_clear.max(hit);
    for _ in 0..config.bisection_levels {
        if (clear - hit).abs() <= 1e-4 {
            break;
        }
        let mid = 0.5 * (clear + hit);
        match probe.slope_at(mid)? {
            ProbeReading::Overshot => hit = mid,
            ProbeReading::Slope(fit) => {
                if fit.slope <= config.bisection_slope {
                    hit = mid;
                } else {
                    clear = mid;
                }
            }
            ProbeReading::Empty => clear = mid,
            ProbeReading::Unreadable => break,
        }
    }

    // Final verification at the bracketed contact anchor with the full
    // classification thresholds.
    let verdict = probe.slope_at(hit)?;
    let (status, final_slope, confidence) = match verdict {
        ProbeReading::Slope(fit) => {
            let contact = fit.slope <= icfg.contact_slope;
            let span = (icfg.clear_slope - icfg.contact_slope).abs().max(1e-9);
            let depth = ((icfg.clear_slope - fit.slope) / span).clamp(0.0, 1.0);
            let sharpness = (1.0 - fit.stderr / 0.3).clamp(0.0, 1.0);
            (
                if contact {
                    RayStatus::Contact
                } else {
                    RayStatus::Inconclusive
                },
                Some(fit.slope),
                depth * sharpness,
            )
        }
        // Overshot at the bracketed anchor: the pole grid itself crosses the
        // boundary, the strongest possible contact signal.
        ProbeReading::Overshot => (RayStatus::Contact, None, 0.75),
        ProbeReading::Empty | ProbeReading::Unreadable => {
            (RayStatus::Inconclusive, None, 0.0)
        }
    };

    let contact_point = Point::new(
        hit * direction.x,
        hit * direction.y,
        hit * direction.z,
    );
    Ok(RayOutcome {
        direction: [direction.x, direction.y, direction.z],
        status,
        contact_point: (status == RayStatus::Contact)
            .then_some([contact_point.x, contact_point.y, contact_point.z]),
        contact_t: (status == RayStatus::Contact).then_some(hit),
        final_slope,
        confidence: if status == RayStatus::Contact {
            confidence.max(0.05)
        } else {
            0.0
        },
        probes: probe.probes,
    })
}

/// Union-find clustering of contact points by Euclidean linkage.
fn cluster_contacts(rays: &[RayOutcome], link: f64) -> Vec<Vec<usize>> {
    let contacts: Vec<(usize, [f64; 3])> = rays
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.contact_point.map(|p| (i, p)))
        .collect();
    let n = contacts.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], i: usize) -> usize {
        let mut root = i;
        while parent[root] != root {
            root = parent[root];
        }
        let mut cur = i;
        while cur != root {
            let next = parent[cur];
            parent[cur] = root;
            cur = next;
        }
        root
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let (_, a) = contacts[i];
            let (_, b) = contacts[j];
            let d2 = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2);
            if d2.sqrt() <= link {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri] = rj;
                }
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..n {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(contacts[i].0);
    }
    groups.into_values().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::medium::apply_component_scaling;
    use approx::assert_relative_eq;

    fn ball(cx: f64, cy: f64, cz: f64, r: f64) -> Solid {
        Solid::Ball {
            center: [cx, cy, cz],
            radius: r,
        }
    }

    fn spec_with(outer: Solid, obstacle: Option<Solid>) -> DomainSpec {
        DomainSpec {
            dimension: 3,
            outer,
            obstacle,
            gamma: BoundaryPatch::full(),
            outer_regularity: SurfaceRegularity::C11,
            obstacle_regularity: SurfaceRegularity::C11,
        }
    }

    fn medium_abc(a: f64, b: f64, c: f64, q_minus: f64) -> Medium {
        let mut m = Medium::trivial();
        m.coef_a = ScalarExpr::Constant(a);
        m.coef_b = ScalarExpr::Constant(b);
        m.coef_c = ScalarExpr::Constant(c);
        m.electric_minus.re = ScalarExpr::Constant(q_minus);
        m
    }

    fn jump_medium(b: f64, c: f64, q_minus: f64) -> Medium {
        medium_abc(1.0, b, c, q_minus)
    }

    #[test]
    fn identical_media_need_no_correction() {
        let spec = spec_with(ball(0.0, 0.0, 0.0, 0.7), Some(ball(0.0, 0.0, 0.0, 0.4)));
        let grid = GreenGridSpec {
            n: 12,
            ..GreenGridSpec::default()
        };
        let pair = singular_solution(
            &spec,
            &Medium::trivial(),
            &Point::new(0.55, 0.0, 0.0),
            0.15,
            &grid,
        )
        .unwrap();
        assert!(pair.correction.is_none());
        assert_eq!(pair.correction_h1(), 0.0);
        assert_eq!(pair.bound_constant, 0.0);
        assert!(pair.pole_inside_domain);
        let probe = Point::new(0.2, 0.1, 0.0);
        assert_eq!(pair.correction_at(&probe), Complex64::new(0.0, 0.0));
        let total = pair.total_field_at(&probe);
        let expected = 1.0 / (4.0 * std::f64::consts::PI * (probe - pair.pole).norm());
        assert_relative_eq!(total.re, expected, max_relative = 1e-12);
        assert!(total.im.abs() < 1e-15);
        assert!(pair.norm_green_h1_obstacle > 0.0);
    }

    #[test]
    fn far_poles_keep_bounded_corrections() {
        let spec = spec_with(ball(0.0, 0.0, 0.0, 0.9), Some(ball(0.0, 0.0, 0.0, 0.35)));
        let medium = jump_medium(2.0, 0.3, 0.5);
        let grid = GreenGridSpec {
            n: 14,
            ..GreenGridSpec::default()
        };
        let ctx = SingularSolutionContext::new(&spec, &medium, 0.12, &grid, false).unwrap();
        let poles = [
            Point::new(0.65, 0.0, 0.0),
            Point::new(0.0, 0.65, 0.0),
            Point::new(0.0, 0.0, 0.65),
        ];
        let pairs: Vec<SingularSolutionPair> =
            poles.iter().map(|y| ctx.pair_at(y).unwrap()).collect();
        for pair in &pairs {
            assert!(pair.correction.is_some());
            assert!(pair.correction_h1() > 0.0);
            assert!(pair.correction_h1().is_finite());
            assert!(
                pair.bound_constant <= 100.0,
                "boundedness constant {}",
                pair.bound_constant
            );
        }
        let norms: Vec<f64> = pairs.iter().map(|p| p.correction_h1()).collect();
        let max = norms.iter().fold(0.0f64, |m, v| m.max(*v));
        let min = norms.iter().fold(f64::INFINITY, |m, v| m.min(*v));
        assert!(
            max / min <= 2.0,
            "directional spread of far-pole corrections: {min:.3e} … {max:.3e}"
        );
        assert_eq!(ctx.solve_count(), 3);
    }

    /// Poles retreating toward the interface drive the controlling
    /// fundamental-solution norm — and with it the near-contact energy of
    /// the full singular solution — like `δ^{1−n/2}` (slope −1/2 in 3D),
    /// while the correction stays controlled by that norm with a uniform
    /// constant. All three series are measured above the mesh resolution
    /// floor and the two H¹ endpoints are pinned to the closed form.
    #[test]
    fn near_pole_sweep_grows_at_half_rate() {
        let spec = spec_with(ball(0.0, 0.0, 0.0, 1.62), Some(ball(0.0, 0.0, 0.0, 1.2)));
        let medium = jump_medium(2.0, 0.0, 0.0);
        let grid = GreenGridSpec {
            n: 16,
            ..GreenGridSpec::default()
        };
        let ctx = SingularSolutionContext::new(&spec, &medium, 0.1, &grid, false).unwrap();
        // Pole distances from 1.3 to 5.2 mesh widths: above the resolution
        // floor, inside the pre-asymptotic growth window.
        let deltas = geometric_deltas(0.13, 0.52, 8);
        let anchor = Point::new(1.2, 0.0, 0.0);

        let pairs: Vec<SingularSolutionPair> = deltas
            .iter()
            .map(|&d| ctx.pair_at(&Point::new(1.2 + d, 0.0, 0.0)).unwrap())
            .collect();
        let corr: Vec<f64> = pairs.iter().map(|p| p.correction_h1()).collect();
        let green: Vec<f64> = pairs.iter().map(|p| p.norm_green_h1_obstacle).collect();
        let near_ball: Vec<f64> = pairs
            .iter()
            .map(|p| {
                let sol = p.correction.as_ref().unwrap();
                let g = p.green.clone();
                let g_nodal =
                    interpolate_nodal(&p.mesh, &FieldFn::complex(move |q: &Point| g.eval(q)));
                let total: Vec<Complex64> = g_nodal
                    .iter()
                    .zip(&sol.u_minus)
                    .map(|(a, b)| a + b)
                    .collect();
                region_h1_norm_in_ball(&p.mesh, &total, Region::Minus, &anchor, 1.44)
            })
            .collect();

        // Closed-form H¹(B_R) norm of G₀(·, y) at |y| = s = R + δ:
        //   ‖∇G₀‖²  = (π/s)/(16π²) · [ 2Rs/(s²−R²) + ln((s−R)/(s+R)) ]
        //   ‖G₀‖²   = (1/(8π)) · [ R − ((s²−R²)/(2s)) · ln((s+R)/(s−R)) ]
        // (both from integrating 1/r⁴ resp. 1/r² over the ball in spherical
        // coordinates about the pole axis).
        let h1_closed_form = |r: f64, delta: f64| -> f64 {
            let s = r + delta;
            let grad = (std::f64::consts::PI / s) / (16.0 * std::f64::consts::PI.powi(2))
                * (2.0 * r * s / (s * s - r * r) + ((s - r) / (s + r)).ln());
            let mass = (r - (s * s - r * r) / (2.0 * s) * ((s + r) / (s - r)).ln())
                / (8.0 * std::f64::consts::PI);
            (grad + mass).sqrt()
        };
        assert_relative_eq!(green[0], h1_closed_form(1.2, deltas[0]), max_relative = 5e-3);
        assert_relative_eq!(green[7], h1_closed_form(1.2, deltas[7]), max_relative = 5e-2);

        let corr_fit = fit_log_log(&deltas, &corr).unwrap();
        let green_fit = fit_log_log(&deltas, &green).unwrap();
        let ball_fit = fit_log_log(&deltas, &near_ball).unwrap();
        // The fundamental-solution H¹ norm and the near-contact energy of the
        // full singular solution follow the δ^{1−n/2} = δ^{−1/2} law (the
        // closed form gives −0.54 on this pre-asymptotic window; the mesh
        // steepens it slightly).
        assert!(
            (-0.65..=-0.45).contains(&green_fit.slope),
            "fundamental-solution norm slope {:.4}",
            green_fit.slope
        );
        assert!(
            (-0.65..=-0.40).contains(&ball_fit.slope),
            "near-contact energy slope {:.4}",
            ball_fit.slope
        );
        // The correction is driven by the Neumann jump (b−1)∂_νG, whose
        // data scale is the gradient part alone; on this window the closed
        // form puts that at −0.78, steeper than the full-norm law but still
        // far from the volume blow-up −1 of the indicator core.
        assert!(
            (-0.95..=-0.65).contains(&corr_fit.slope),
            "correction growth slope {:.4}",
            corr_fit.slope
        );
        // The boundedness constant stays uniform along the sweep.
        let ratios: Vec<f64> = corr.iter().zip(&green).map(|(c, g)| c / g).collect();
        let rmax = ratios.iter().fold(0.0f64, |m, v| m.max(*v));
        let rmin = ratios.iter().fold(f64::INFINITY, |m, v| m.min(*v));
        assert!(
            rmax / rmin <= 5.0,
            "boundedness constant drifts: {rmin:.3} … {rmax:.3}"
        );
        assert_eq!(ctx.solve_count(), deltas.len());
    }

    #[test]
    fn volume_quadrature_matches_closed_form() {
        // ∫_{B(0,R)} |∇G₀(·, y)|² dx with R = 0.4 and y = (R+δ)e₁. Reference
        // values from the closed form
        //   (π/s)/(16π²) · [ 2Rs/(s²−R²) + ln((s−R)/(s+R)) ],  s = R + δ.
        let domain = ball(0.0, 0.0, 0.0, 0.4);
        let cases = [
            (0.32, 9.791894272674e-03, 2e-2),
            (0.16, 3.996306718572e-02, 2e-2),
            (0.08, 1.266877566999e-01, 2e-2),
            (0.048, 2.634827766518e-01, 2e-2),
            (1e-2, 1.751644650052e+00, 5e-2),
            (1e-3, 1.953783277497e+01, 5e-2),
        ];
        let mut got = Vec::new();
        for &(delta, expected, tol) in &cases {
            let pole = Point::new(0.4 + delta, 0.0, 0.0);
            let value = integrate_solid_adaptive(
                &domain,
                &|p: &Point| {
                    let r2 = (p - pole).norm_squared();
                    1.0 / (16.0 * std::f64::consts::PI.powi(2) * r2 * r2)
                },
                Some(&pole),
                2,
                5,
                12,
            );
            assert_relative_eq!(value, expected, max_relative = tol);
            got.push((delta, value));
        }
        // Deep-retreat slope between δ = 10⁻² and 10⁻³ sits in the blow-up
        // band δ^{2−n}.
        let slope = (got[5].1 / got[4].1).ln() / (got[5].0 / got[4].0).ln();
        assert!((-1.13..=-0.97).contains(&slope), "deep slope {slope:.4}");
    }

    #[test]
    fn surface_quadrature_matches_closed_form() {
        // ∫_{∂B(0,R)} |G₀(·, y)|² dS with R = 0.5 and y = (R+δ)e₁. Reference
        // values from the closed form (R/(8πs)) · ln((s+R)/(s−R)), s = R + δ.
        let sphere = ball(0.0, 0.0, 0.0, 0.5);
        let cases = [
            (0.25, 4.269166656056e-02),
            (0.125, 6.993983051321e-02),
            (0.0625, 1.002044241201e-01),
        ];
        for &(delta, expected) in &cases {
            let pole = Point::new(0.5 + delta, 0.0, 0.0);
            let value = integrate_surface_adaptive(
                &sphere,
                &|p: &Point| {
                    let r2 = (p - pole).norm_squared();
                    1.0 / (16.0 * std::f64::consts::PI.powi(2) * r2)
                },
                &pole,
                0.05,
            )
            .unwrap();
            assert_relative_eq!(value, expected, max_relative = 2e-2);
        }
    }

    #[test]
    fn indicator_classifies_contact_far_and_disjoint() {
        let omega = ball(0.0, 0.0, 0.0, 1.0);
        let true_obstacle = ball(0.0, 0.0, 0.0, 0.4);
        let observed = ObservedScenario::new(
            spec_with(omega.clone(), Some(true_obstacle.clone())),
            jump_medium(2.0, 0.0, 0.0),
        );
        let trial = TrialObstacle::with_unit_contrast(true_obstacle.clone());
        let deep = geometric_deltas(1e-3, 1e-2, 8);
        let config = IndicatorConfig::default();
        let x_contact = Point::new(0.4, 0.0, 0.0);

        // Contact: anchor on the observed surface → blow-up at the volume
        // rate δ^{2−n}.
        let contact =
            obstacle_indicator(&x_contact, &observed, &trial, &deep, &config).unwrap();
        assert_eq!(contact.classification, Classification::Contact);
        assert_eq!(contact.classified_on, IndicatorSeries::Full);
        let slope = contact.full_fit.as_ref().unwrap().slope;
        assert!((-1.2..=-0.85).contains(&slope), "contact slope {slope:.4}");
        // The core series is an exact pole integral with unit trial weight:
        // its endpoints must match the closed form used in
        // `volume_quadrature_matches_closed_form`.
        assert_relative_eq!(contact.core[0], 1.751644650052e+00, max_relative = 5e-2);
        assert_relative_eq!(contact.core[7], 1.953783277497e+01, max_relative = 5e-2);
        assert!(contact
            .poles
            .iter()
            .zip(&contact.deltas)
            .all(|(p, d)| (p.x - (0.4 + d)).abs() < 1e-12 && p.y.abs() < 1e-12));

        // Far anchor: displaced 0.3 outward, every pole keeps that standoff
        // and the sweep stays bounded.
        let far = obstacle_indicator(
            &Point::new(0.7, 0.0, 0.0),
            &observed,
            &trial,
            &deep,
            &config,
        )
        .unwrap();
        assert_eq!(far.classification, Classification::InteriorClear);
        let far_slope = far.full_fit.as_ref().unwrap().slope;
        assert!(far_slope.abs() <= 0.15, "far slope {far_slope:.4}");

        // Disjoint trial: its hull separates from the observed obstacle, so
        // the correction series vanishes identically.
        let trial_far = TrialObstacle::with_unit_contrast(ball(0.0, 0.63, 0.0, 0.15));
        let disjoint_cfg = IndicatorConfig {
            h: 0.09,
            classify_on: IndicatorSeries::Correction,
            ..IndicatorConfig::default()
        };
        let disjoint = obstacle_indicator(
            &Point::new(0.0, 0.78, 0.0),
            &observed,
            &trial_far,
            &default_delta_grid(&trial_far.solid),
            &disjoint_cfg,
        )
        .unwrap();
        assert_eq!(disjoint.classification, Classification::InteriorClear);
        assert_eq!(disjoint.classified_on, IndicatorSeries::Correction);
        assert!(disjoint.correction.iter().all(|z| z.norm() == 0.0));
        assert!(disjoint.correction_fit.is_none());
        assert!(disjoint.green_h1_obstacle.iter().all(|&g| g == 0.0));

        // Scaling the trial medium's (a, b) by a common component factor
        // leaves the indicator unchanged: only b/a enters the weight.
        let scaled_medium = apply_component_scaling(
            &trial.medium,
            &spec_with(omega.clone(), Some(true_obstacle.clone())),
            &[2.0],
        )
        .unwrap();
        let scaled = TrialObstacle {
            solid: true_obstacle.clone(),
            medium: scaled_medium,
        };
        let contact_scaled =
            obstacle_indicator(&x_contact, &observed, &scaled, &deep, &config).unwrap();
        assert_eq!(contact_scaled.classification, contact.classification);
        for (a, b) in contact.full.iter().zip(&contact_scaled.full) {
            assert_relative_eq!(a.norm(), b.norm(), max_relative = 1e-12);
        }

        // Export and summary round-trip.
        let table = contact.export_delimited();
        assert_eq!(table.lines().count(), 2 + deep.len());
        assert!(table.lines().nth(1).unwrap().starts_with("delta\t"));
        let summary = contact.to_summary();
        let json = serde_json::to_string(&summary).unwrap();
        let back: IndicatorSummary = serde_json::from_str(&json).unwrap();
        assert_eq!(
            serde_json::to_value(&back).unwrap(),
            serde_json::to_value(&summary).unwrap()
        );
    }

    #[test]
    fn degenerate_trial_contrast_is_rejected() {
        let observed = ObservedScenario::new(
            spec_with(ball(0.0, 0.0, 0.0, 1.0), Some(ball(0.0, 0.0, 0.0, 0.4))),
            jump_medium(2.0, 0.0, 0.0),
        );
        let mut trial = TrialObstacle::with_unit_contrast(ball(0.0, 0.0, 0.0, 0.4));
        trial.medium.coef_a = ScalarExpr::Constant(1.5);
        trial.medium.coef_b = ScalarExpr::Constant(1.5);
        let deltas = default_delta_grid(&trial.solid);
        let err = obstacle_indicator(
            &Point::new(0.4, 0.0, 0.0),
            &observed,
            &trial,
            &deltas,
            &IndicatorConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, LabError::Medium(_)), "got {err:?}");
    }

    #[test]
    fn invalid_grids_and_poles_are_rejected() {
        // Ascending grid.
        assert!(matches!(
            validate_delta_grid(&[0.01, 0.02, 0.04, 0.08, 0.16]),
            Err(LabError::Config(_))
        ));
        // Too short for a slope fit.
        assert!(matches!(
            validate_delta_grid(&[0.1, 0.05, 0.025, 0.0125]),
            Err(LabError::Config(_))
        ));
        // Wildly uneven ratios.
        assert!(matches!(
            validate_delta_grid(&[1.0, 0.9, 0.5, 0.45, 0.1]),
            Err(LabError::Config(_))
        ));
        // The default grid is geometric, descending, 8 long, spanning
        // 2 % … 20 % of the trial's diameter estimate.
        let trial_ball = ball(0.0, 0.0, 0.0, 0.15);
        let grid = default_delta_grid(&trial_ball);
        assert_eq!(grid.len(), 8);
        assert!(validate_delta_grid(&grid).is_ok());
        let d = trial_ball.diameter();
        assert_relative_eq!(grid[0], 0.2 * d, max_relative = 1e-9);
        assert_relative_eq!(grid[7], 0.02 * d, max_relative = 1e-9);

        // Poles must stay outside the obstacle closure.
        let spec = spec_with(ball(0.0, 0.0, 0.0, 0.5), Some(ball(0.0, 0.0, 0.0, 0.3)));
        let medium = jump_medium(2.0, 0.0, 0.0);
        let grid_spec = GreenGridSpec {
            n: 10,
            ..GreenGridSpec::default()
        };
        let ctx = SingularSolutionContext::new(&spec, &medium, 0.12, &grid_spec, false).unwrap();
        for y in [Point::new(0.1, 0.0, 0.0), Point::new(0.3, 0.0, 0.0)] {
            assert!(matches!(
                ctx.pair_at(&y),
                Err(LabError::PolePlacement(_))
            ));
        }
        // Just outside is fine, and flagged as interior to the probing hull.
        let pair = ctx.pair_at(&Point::new(0.42, 0.0, 0.0)).unwrap();
        assert!(pair.pole_inside_domain);
        assert!(pair.correction.is_some());
    }

    #[test]
    fn probing_hulls_fall_back_and_reject_straddles() {
        let outer = ball(0.0, 0.0, 0.0, 1.0);
        // Compact hull around a small trial: inflated circumscribed ball.
        let (hull, compact) = probing_hull(&ball(0.0, 0.0, 0.0, 0.4), &outer, 1.45, 0.1);
        assert!(compact);
        match &hull {
            Solid::Ball { radius, .. } => assert_relative_eq!(*radius, 0.58, max_relative = 1e-9),
            other => panic!("expected a ball hull, got {other:?}"),
        }
        // An oversized trial falls back to the whole outer domain.
        let (fallback, compact2) = probing_hull(&ball(0.0, 0.0, 0.0, 0.8), &outer, 1.45, 0.1);
        assert!(!compact2);
        assert!(solids_agree(&fallback, &outer));
        // Straddling configurations are rejected.
        assert!(matches!(
            classify_true_position(&ball(0.0, 0.0, 0.0, 0.4), &ball(0.3, 0.0, 0.0, 0.3)),
            Err(LabError::Geometry(_))
        ));
        // Nested and disjoint succeed.
        assert_eq!(
            classify_true_position(&ball(0.0, 0.0, 0.0, 0.2), &ball(0.0, 0.0, 0.0, 0.5)).unwrap(),
            TruePosition::Nested
        );
        assert_eq!(
            classify_true_position(&ball(0.0, 0.0, 0.0, 0.2), &ball(0.8, 0.0, 0.0, 0.3)).unwrap(),
            TruePosition::Disjoint
        );
        // A hull swallowed by the obstacle is rejected.
        assert!(matches!(
            classify_true_position(&ball(0.0, 0.0, 0.0, 0.6), &ball(0.0, 0.0, 0.0, 0.2)),
            Err(LabError::Geometry(_))
        ));
    }

    #[test]
    fn interface_recovery_separates_the_four_regimes() {
        let obstacle = ball(0.0, 0.0, 0.0, 0.5);
        let spec = spec_with(ball(0.0, 0.0, 0.0, 1.0), Some(obstacle.clone()));
        let anchors = [Point::new(0.5, 0.0, 0.0)];
        let config = RecoveryConfig::default();
        let scenario = |m: Medium| ObservedScenario::new(spec.clone(), m);

        // Regime 1: both combinations jump → volume blow-up and surface
        // log-growth.
        let ra = recover_rho_beta(
            &scenario(jump_medium(1.5, 0.6, 0.0)),
            &scenario(jump_medium(1.0, 0.1, 0.0)),
            &anchors,
            &config,
        )
        .unwrap();
        assert_eq!(ra.anchors.len(), 1);
        assert_eq!(ra.deltas.len(), 8);
        let va = &ra.anchors[0];
        assert!(va.rho_nonzero, "volume fit {:?}", va.rho_fit);
        assert!(va.rho_fit.as_ref().unwrap().slope <= -0.75);
        assert!(
            va.beta_nonzero,
            "surface growth {} ± {}",
            va.beta_growth, va.beta_growth_stderr
        );
        assert!(va.beta_growth > 0.0);
        assert!(va.remainder_values.iter().all(|&r| r == 0.0));
        assert!(ra.ab_defect.0 > 1e-9);
        assert!(ra.a_b_equal.is_none());
        assert!(ra.c_equal.is_none());
        assert!(ra.cross_residual <= 1e-12);
        assert!(ra.cauchy_distance.is_none());
        let table = ra.export_delimited();
        assert_eq!(table.lines().count(), 2 + 8);

        // Regime 2: identical normalized media → null verdicts upgrade to
        // coefficient equalities.
        let m_eq = medium_abc(1.0 / 1.3, 1.3, 0.2, 0.0);
        let rb = recover_rho_beta(
            &scenario(m_eq.clone()),
            &scenario(m_eq),
            &anchors,
            &config,
        )
        .unwrap();
        let vb = &rb.anchors[0];
        assert!(!vb.rho_nonzero);
        assert!(!vb.beta_nonzero);
        assert!(vb.rho_values.iter().all(|&x| x == 0.0));
        assert!(vb.beta_values.iter().all(|&x| x == 0.0));
        assert_eq!(rb.a_b_equal, Some(true));
        assert_eq!(rb.c_equal, Some(true));
        assert!(rb.cross_residual <= 1e-12);

        // Regime 3: equal interface coefficients but different interior
        // potentials → null ρ/β, nonzero bounded remainder, and a
        // cross-validation residual that flags the interior mismatch.
        let rc = recover_rho_beta(
            &scenario(medium_abc(1.0, 1.0, 0.0, 0.4)),
            &scenario(Medium::trivial()),
            &anchors,
            &config,
        )
        .unwrap();
        let vc = &rc.anchors[0];
        assert!(!vc.rho_nonzero);
        assert!(!vc.beta_nonzero);
        assert_eq!(rc.a_b_equal, Some(true));
        let rem_max = vc.remainder_values.iter().fold(0.0f64, |m, v| m.max(*v));
        let rem_min = vc
            .remainder_values
            .iter()
            .fold(f64::INFINITY, |m, v| m.min(*v));
        assert!(rem_max > 0.0);
        assert!(
            rem_max / rem_min <= 5.0,
            "interior remainder should stay bounded: {rem_min:.3e} … {rem_max:.3e}"
        );
        assert!(
            rc.cross_residual > 1e-3,
            "cross-validation should flag the potential mismatch, got {:.3e}",
            rc.cross_residual
        );

        // Regime 4: β jump detected against a nonzero bounded remainder.
        let rd = recover_rho_beta(
            &scenario(medium_abc(1.0, 1.1, 0.7, 0.3)),
            &scenario(medium_abc(1.0, 1.1, 0.2, 0.0)),
            &anchors,
            &config,
        )
        .unwrap();
        let vd = &rd.anchors[0];
        assert!(!vd.rho_nonzero);
        assert!(
            vd.beta_nonzero,
            "surface growth {} ± {} should dominate the bounded remainder",
            vd.beta_growth, vd.beta_growth_stderr
        );
        let rd_max = vd.remainder_values.iter().fold(0.0f64, |m, v| m.max(*v));
        assert!(rd_max > 0.0 && rd_max.is_finite());

        // Shared-obstacle requirement.
        let other = spec_with(ball(0.0, 0.0, 0.0, 1.0), Some(ball(0.0, 0.0, 0.0, 0.45)));
        assert!(matches!(
            recover_rho_beta(
                &scenario(Medium::trivial()),
                &ObservedScenario::new(other, Medium::trivial()),
                &anchors,
                &config,
            ),
            Err(LabError::Geometry(_))
        ));
    }

    #[test]
    fn runge_residuals_shrink_with_dictionary_size() {
        let mesh = build_mesh(&spec_with(ball(0.0, 0.0, 0.0, 0.8), None), 0.2).unwrap();
        let dirs = fibonacci_directions(12);
        let dict: Vec<Vec<Complex64>> = dirs
            .iter()
            .map(|d| {
                let w = d * 0.8;
                mesh.vertices
                    .iter()
                    .map(|v| {
                        let phase = w.dot(&v.coords);
                        Complex64::new(phase.cos(), phase.sin())
                    })
                    .collect()
            })
            .collect();
        let target = fundamental_dictionary(&mesh, &[Point::new(1.6, 0.0, 0.0)])
            .unwrap()
            .pop()
            .unwrap();

        let report = runge_approximate(&mesh, &target, &dict, &[0, 3, 6, 12]).unwrap();
        assert_relative_eq!(report.residuals[0], report.target_norm, max_relative = 1e-12);
        for w in report.residuals.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "residuals must not increase: {w:?}");
        }
        assert!(
            report.residuals[3] < 0.9 * report.residuals[0],
            "twelve members should capture part of a smooth target: {:?}",
            report.residuals
        );
        assert!(!report.rank_deficient);

        // A target inside the dictionary span is reproduced to solver
        // precision.
        let in_dict = runge_approximate(&mesh, &dict[0], &dict, &[1, 4]).unwrap();
        assert!(in_dict.residuals[0] <= 1e-8 * in_dict.target_norm);
        assert!(in_dict.residuals[1] <= 1e-8 * in_dict.target_norm);

        // Duplicated members degrade rank, not results.
        let dup = vec![dict[0].clone(), dict[0].clone(), dict[1].clone()];
        let rep = runge_approximate(&mesh, &target, &dup, &[3]).unwrap();
        assert!(rep.rank_deficient);
        assert!(rep.singular_value_ratio < 1e-10);

        // Bad requests are rejected.
        assert!(matches!(
            runge_approximate(&mesh, &target, &dict, &[13]),
            Err(LabError::Config(_))
        ));
        assert!(matches!(
            runge_approximate(&mesh, &target[..5], &dict, &[1]),
            Err(LabError::Config(_))
        ));
        assert!(matches!(
            runge_approximate(&mesh, &target, &dict, &[]),
            Err(LabError::Config(_))
        ));
        // Dictionary poles may not touch mesh vertices.
        assert!(matches!(
            fundamental_dictionary(&mesh, &[mesh.vertices[0]]),
            Err(LabError::PolePlacement(_))
        ));
    }

    #[test]
    fn marching_reconstruction_finds_the_ball() {
        let observed = ObservedScenario::new(
            spec_with(ball(0.0, 0.0, 0.0, 1.0), Some(ball(0.0, 0.0, 0.0, 0.4))),
            jump_medium(2.0, 0.0, 0.0),
        );
        let config = ReconstructionConfig {
            rays: 6,
            h: 0.12,
            coarse_steps: 6,
            bisection_levels: 3,
            deltas_rel: (0.03, 0.2, 5),
            ..ReconstructionConfig::default()
        };
        let report = reconstruct_obstacle(&observed, &config).unwrap();
        assert_eq!(report.rays.len(), 6);
        let contacts: Vec<&RayOutcome> = report
            .rays
            .iter()
            .filter(|r| r.status == RayStatus::Contact)
            .collect();
        assert!(
            contacts.len() >= 5,
            "expected ≥ 5/6 contact rays, got {} (statuses {:?})",
            contacts.len(),
            report.rays.iter().map(|r| r.status).collect::<Vec<_>>()
        );
        let mean_err: f64 = contacts
            .iter()
            .map(|r| {
                let p = r.contact_point.unwrap();
                ((p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - 0.4).abs()
            })
            .sum::<f64>()
            / contacts.len() as f64;
        assert!(mean_err <= 0.08, "mean radial error {mean_err:.4}");
        for c in &contacts {
            assert!(c.confidence > 0.0);
            assert!(c.probes > 0);
        }
        let membership: usize = report.clusters.iter().map(|c| c.len()).sum();
        assert_eq!(membership, contacts.len());
        assert!(report.solves > 0);
        assert!(report.wall_seconds > 0.0);
        let cloud = report.export_cloud();
        assert!(cloud.starts_with("# reconstruction contact cloud"));
        assert_eq!(cloud.lines().count(), 2 + contacts.len());

        // Without any scatterer every ray records a miss (not an error).
        let empty = ObservedScenario::new(
            spec_with(ball(0.0, 0.0, 0.0, 1.0), None),
            Medium::trivial(),
        );
        let silent = reconstruct_obstacle(&empty, &config).unwrap();
        assert!(silent
            .rays
            .iter()
            .all(|r| r.status == RayStatus::NoContact));
        assert_eq!(silent.contact_fraction, 0.0);
        assert!(silent.clusters.is_empty());

        // Config validation.
        assert!(matches!(
            reconstruct_obstacle(
                &empty,
                &ReconstructionConfig {
                    rays: 0,
                    ..ReconstructionConfig::default()
                }
            ),
            Err(LabError::Config(_))
        ));
        assert!(matches!(
            reconstruct_obstacle(
                &empty,
                &ReconstructionConfig {
                    search_radius: 0.1,
                    probe_radius: 0.2,
                    ..ReconstructionConfig::default()
                }
            ),
            Err(LabError::Config(_))
        ));
    }

    #[test]
    fn contact_clusters_follow_the_linkage() {
        let mk = |p: [f64; 3]| RayOutcome {
            direction: [0.0, 0.0, 1.0],
            status: RayStatus::Contact,
            contact_point: Some(p),
            contact_t: Some(1.0),
            final_slope: Some(-1.0),
            confidence: 0.5,
            probes: 1,
        };
        let mut rays = vec![mk([0.0, 0.0, 0.0]), mk([0.1, 0.0, 0.0]), mk([1.0, 0.0, 0.0])];
        rays.push(RayOutcome {
            direction: [0.0, 0.0, -1.0],
            status: RayStatus::NoContact,
            contact_point: None,
            contact_t: None,
            final_slope: None,
            confidence: 0.0,
            probes: 1,
        });
        let clusters = cluster_contacts(&rays, 0.25);
        assert_eq!(clusters.len(), 2);
        let mut sizes: Vec<usize> = clusters.iter().map(|c| c.len()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![1, 2]);
        let linked = clusters.iter().find(|c| c.len() == 2).unwrap();
        assert!(linked.contains(&0) && linked.contains(&1));
    }

    #[test]
    fn pole_excluding_hulls_require_deep_retreats() {
        let observed = ObservedScenario::new(
            spec_with(ball(0.0, 0.0, 0.0, 1.0), Some(ball(0.0, 0.0, 0.0, 0.4))),
            jump_medium(2.0, 0.0, 0.0),
        );
        let trial = TrialObstacle::with_unit_contrast(ball(0.0, 0.0, 0.0, 0.4));
        let config = IndicatorConfig {
            delta_dependent_hull: true,
            ..IndicatorConfig::default()
        };
        // Deep retreats: every per-δ hull fits between obstacle and pole.
        let grid = geometric_deltas(0.31, 0.62, 5);
        let curve = obstacle_indicator(
            &Point::new(0.4, 0.0, 0.0),
            &observed,
            &trial,
            &grid,
            &config,
        )
        .unwrap();
        assert_eq!(curve.classification, Classification::Contact);
        assert_eq!(curve.deltas.len(), 5);
        // Shallow retreats make the per-δ nesting margin collapse below the
        // mesh resolution.
        let shallow = geometric_deltas(0.06, 0.24, 5);
        assert!(matches!(
            obstacle_indicator(
                &Point::new(0.4, 0.0, 0.0),
                &observed,
                &trial,
                &shallow,
                &config,
            ),
            Err(LabError::Geometry(_))
        ));
    }
}
