//! # transmission-lab
//!
//! A numerical laboratory for inverse transmission problems of magnetic
//! Schrödinger operators
//!
//! ```text
//!     L_{A,q} u = Σ_j (D_j + A_j)² u + q u,      D_j = -i ∂_j,
//! ```
//!
//! posed on a pair of nested Lipschitz domains `D ⊂⊂ Ω ⊂ ℝⁿ` (n = 3 by
//! default). Across the interior interface `∂D` the field satisfies the
//! transmission conditions
//!
//! ```text
//!     u⁺ = a u⁻ + g₀,
//!     (∂_ν + iA⁺·ν) u⁺ = b (∂_ν + iA⁻·ν) u⁻ + c u⁻ + g₁,
//! ```
//!
//! with Dirichlet data on the outer boundary `∂Ω`. The laboratory provides
//! the computational machinery used to *probe* such media from boundary
//! measurements:
//!
//! * [`geometry`] — nested-domain descriptions, conforming tetrahedral
//!   meshes with tagged interfaces, and pole placement `x_δ = x₀ + δν`.
//! * [`medium`] — coefficient catalogs for `(A±, q±, a, b, c)`, gauge
//!   transformations `A⁻ → A⁻ + ∇ψ`, component scalings
//!   `(a,b,c) → (αa, αb, αc)`, and Lipschitz boundary extensions.
//! * [`kernels`] — the Laplace kernel `G₀`, magnetic Green's functions via
//!   the volume integral (Lippmann–Schwinger) equation, near-boundary
//!   integral growth laws, and the rate functions `μ_n, τ_n, σ_n`.
//! * [`forward`] — the P1 finite-element transmission solver: Hermitian
//!   assembly in the self-adjoint regime `ab ≡ 1`, generalized eigenvalue
//!   scans, Cauchy-data extraction on a boundary patch, and the interface
//!   energy-flux jump.
//! * [`probe`] — singular solutions `u = G + E₀` with poles approaching the
//!   obstacle, the contact indicator built from the singular volume term
//!   `∫ a₂⁻¹(b₂−a₂) ∇u₁·∇v̄`, recovery of the transmission-coefficient
//!   combinations `ρ = b₁/b₂ − a₁/a₂` and `β = c₁a₂ − c₂a₁`, Runge-type
//!   least squares, and ray-fan obstacle reconstruction.
//! * [`boundary_recovery`] — oscillatory solutions concentrating at a
//!   boundary point that recover the tangential part of the magnetic
//!   potential difference, with an optional Carleman-constant probe
//!   (feature `carleman`).
//! * [`scattering`] — fixed-frequency scattering with an exact spherical
//!   Dirichlet-to-Neumann truncation, a cutoff-coupled interior/exterior
//!   (Lax–Phillips) solve, far-field extraction, and Herglotz matching.
//! * [`harness`] — scenario configs, result records, curve exports, and
//!   deterministic reruns.
//!
//! The intended entry points are the runnable examples (one per major
//! capability, see `examples/`) and the thin `tlab` command-line front end.
//!
//! ## Conventions
//!
//! * All fields are complex (`num_complex::Complex64`); self-adjoint
//!   scenarios produce Hermitian discrete systems exactly.
//! * Meshes are conforming P1 tetrahedra; the interface `∂D` and the outer
//!   boundary `∂Ω` are unions of tagged facets.
//! * Every randomized start is seeded; repeated runs of the same scenario
//!   must produce byte-identical records.

pub mod boundary_recovery;
pub mod forward;
pub mod geometry;
pub mod harness;
pub mod kernels;
pub mod linalg;
pub mod medium;
pub mod probe;
pub mod quadrature;
pub mod scattering;

use thiserror::Error;

/// Errors surfaced by laboratory operations.
#[derive(Debug, Error)]
pub enum LabError {
    /// Domain description violates a geometric precondition
    /// (non-nested domains, infeasible margins, bad mesh targets, ...).
    #[error("geometry error: {0}")]
    Geometry(String),

    /// Pole placement failed the exterior-ball check
    /// `B(x_δ, cδ) ∩ closure(region) = ∅`.
    #[error("pole placement error: {0}")]
    PolePlacement(String),

    /// Medium description violates a precondition (degenerate coefficient,
    /// failed self-adjointness predicate, sign condition, ...).
    #[error("medium error: {0}")]
    Medium(String),

    /// An iterative solver failed to converge within its budget.
    #[error("solver error: {0}")]
    Solver(String),

    /// The discrete transmission problem is (numerically) non-injective at
    /// the requested configuration and no admissible perturbation was found
    /// within the search budget.
    #[error("solvability error: {0}")]
    Solvability(String),

    /// Scenario configuration failed validation.
    #[error("config error: {0}")]
    Config(String),

    /// Input/output failure while reading configs or writing records.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Crate-wide result type.
pub type Result<T> = std::result::Result<T, LabError>;
