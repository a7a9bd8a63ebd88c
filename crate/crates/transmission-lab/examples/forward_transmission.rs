//! Solve one magnetic transmission problem end to end and audit it.
//!
//! A unit ball carries an obstacle of radius 1/2 with jump coefficients
//! a = 2, b = 1/2 (so a·b ≡ 1: the self-adjoint normalization), c = 0.3,
//! and a rotational magnetic potential inside the obstacle. The outer
//! Dirichlet data is the harmonic polynomial x₁² − x₃²; interface jump
//! data is chosen so the exact fields are u⁺ = x₁² − x₃² and u⁻ = x₁x₂.
//!
//! Run with: `cargo run --example forward_transmission [h]`

use std::sync::Arc;

use num_complex::Complex64;
use transmission_lab::forward::{
    cauchy_data, energy_flux_jump, solve, spectrum, FieldFn, TransmissionProblem,
};
use transmission_lab::geometry::{build_mesh, DomainSpec, Point, Region};
use transmission_lab::medium::{Medium, ScalarExpr, VectorField};

fn u_exact(p: &Point) -> f64 {
    p[0] * p[0] - p[2] * p[2]
}

fn v_exact(p: &Point) -> f64 {
    p[0] * p[1]
}

fn main() -> transmission_lab::Result<()> {
    let h: f64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0.2);

    let spec = DomainSpec::ball_in_ball(1.0, 0.5);
    println!("mesh: target h = {h}");
    let mesh = Arc::new(build_mesh(&spec, h)?);
    let cells_minus = mesh
        .cell_region
        .iter()
        .filter(|r| **r == Region::Minus)
        .count();
    println!(
        "  {} vertices, {} cells ({} inside the obstacle), achieved h = {:.4}",
        mesh.vertices.len(),
        mesh.cells.len(),
        cells_minus,
        mesh.h
    );

    let mut medium = Medium::trivial();
    medium.coef_a = ScalarExpr::Constant(2.0);
    medium.coef_b = ScalarExpr::Constant(0.5);
    medium.coef_c = ScalarExpr::Constant(0.3);
    medium.magnetic_minus = VectorField::new([
        ScalarExpr::Scaled(-0.4, Box::new(ScalarExpr::coordinate(1))),
        ScalarExpr::Scaled(0.4, Box::new(ScalarExpr::coordinate(0))),
        ScalarExpr::zero(),
    ]);
    let report = medium.validate(&spec)?;
    println!(
        "medium: self-adjoint = {}, max |a·b − 1| = {:.2e}",
        report.self_adjoint, report.max_ab_defect
    );

    // Interface data for the manufactured pair (∂_ν w = 4w on the sphere
    // r = 1/2 for any homogeneous quadratic w). The magnetic interface
    // terms cancel because A⁻ is tangential there.
    let problem = TransmissionProblem::homogeneous(spec, mesh.clone(), medium)
        .with_dirichlet(FieldFn::real(u_exact))
        .with_interface_jumps(
            FieldFn::real(|p| u_exact(p) - 2.0 * v_exact(p)),
            FieldFn::real(|p| 4.0 * u_exact(p) - 2.3 * v_exact(p)),
        );

    let solution = solve(&problem)?;
    let d = &solution.diagnostics;
    println!(
        "solve: method = {}, {} iterations, residual = {:.2e}, unique = {}",
        d.method, d.iterations, d.residual, d.unique
    );
    println!("  condition estimate ≈ {:.2e}", d.condition_estimate);

    // Nodal error against the exact fields.
    let mut worst_plus = 0.0f64;
    let mut worst_minus = 0.0f64;
    for (v, p) in mesh.vertices.iter().enumerate() {
        let err = (solution.u_plus[v] - Complex64::new(u_exact(p), 0.0)).norm();
        worst_plus = worst_plus.max(err);
    }
    for ci in 0..mesh.cells.len() {
        if mesh.cell_region[ci] != Region::Minus {
            continue;
        }
        for &v in &mesh.cells[ci] {
            let p = &mesh.vertices[v];
            let err = (solution.u_minus[v] - Complex64::new(v_exact(p), 0.0)).norm();
            worst_minus = worst_minus.max(err);
        }
    }
    println!(
        "error: max |u⁺ − exact| = {:.3e}, max |u⁻ − exact| = {:.3e}",
        worst_plus, worst_minus
    );

    let data = cauchy_data(&problem, &solution)?;
    println!(
        "cauchy data on γ: {} samples, ‖(u, ∂_ν u)‖ = {:.4}, fingerprint = {:016x}",
        data.points.len(),
        data.norm(),
        data.hash
    );

    let jump = energy_flux_jump(&problem, &solution)?;
    println!(
        "interface energy-flux audit: max |jump| = {:.3e}, L² = {:.3e} over area {:.4}",
        jump.max_abs, jump.l2, jump.area
    );

    let tones = spectrum(&problem, 4, 1e-6)?;
    println!(
        "lowest transmission tones: {:?}",
        tones
            .eigenvalues
            .iter()
            .map(|l| (l * 100.0).round() / 100.0)
            .collect::<Vec<_>>()
    );
    Ok(())
}
