//! Coefficient fields of the magnetic Schrödinger transmission problem.
//!
//! The operator on each side of the interface is
//!
//! ```text
//!     L_{A,q} u = Σ_j (D_j + A_j)² u + q u,          D_j = −i ∂_j,
//! ```
//!
//! with magnetic potential A (real vector field) and electric potential q
//! (complex scalar field). Across the interface ∂D the solution branches
//! are coupled by coefficients a, b (positive, gradient-Lipschitz) and c
//! (continuous):
//!
//! ```text
//!     u⁺ = a u⁻ + g₀,
//!     (∂_ν + iA⁺·ν) u⁺ = b (∂_ν + iA⁻·ν) u⁻ + c u⁻ + g₁.
//! ```
//!
//! All fields come from a closed-form expression catalog (polynomials,
//! Gaussians, trigonometric products and their sums/products) with exact
//! gradients and Hessians, defined on all of Ω so that restrictions and
//! extensions never leave the catalog.
//!
//! Structure-preserving transformations:
//!
//! * **Gauge change** — replacing A⁻ by A⁻ + ∇ψ with ψ = 0 on ∂D conjugates
//!   the interior operator by e^{iψ} and leaves all exterior observations
//!   unchanged. `apply_gauge` performs the substitution after verifying the
//!   boundary condition.
//! * **Component scaling** — multiplying (a, b, c) by a constant α > 0 on
//!   one obstacle component changes nothing observable; it breaks the
//!   self-adjointness normalization a·b ≡ 1 (e.g. α = 2 gives a·b ≡ 4).
//!
//! The medium is *self-adjoint* exactly when every field is real-valued and
//! a·b ≡ 1 on ∂D; this is the regime in which transmission eigenvalues are
//! real and the boundary data carries Hermitian structure.

use crate::geometry::{fibonacci_directions, DomainSpec, Point, Solid, Vector};
use crate::{LabError, Result};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

/// Closed-form scalar expression with exact derivatives.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum ScalarExpr {
    /// Constant value.
    Constant(f64),
    /// Sum of monomials `coef · x^i y^j z^k`.
    Polynomial { terms: Vec<(f64, [u32; 3])> },
    /// `amplitude · exp(−|x − center|² / width²)`.
    Gaussian {
        amplitude: f64,
        center: [f64; 3],
        width: f64,
    },
    /// `amplitude · cos(f₀x + φ₀) · cos(f₁y + φ₁) · cos(f₂z + φ₂)`.
    TrigProduct {
        amplitude: f64,
        freq: [f64; 3],
        phase: [f64; 3],
    },
    /// Sum of sub-expressions.
    Sum(Vec<ScalarExpr>),
    /// Scalar multiple.
    Scaled(f64, Box<ScalarExpr>),
    /// Pointwise product.
    Product(Box<ScalarExpr>, Box<ScalarExpr>),
    /// Radial pullback onto a sphere: evaluates the inner expression at the
    /// radial projection `center + radius·(x − center)/|x − center|`. This
    /// is the boundary-trace extension for ball interfaces.
    RadialPullback {
        inner: Box<ScalarExpr>,
        center: [f64; 3],
        radius: f64,
    },
}

impl ScalarExpr {
    /// Zero.
    pub fn zero() -> Self {
        ScalarExpr::Constant(0.0)
    }

    /// The coordinate monomial x_i.
    pub fn coordinate(i: usize) -> Self {
        let mut exps = [0u32; 3];
        exps[i] = 1;
        ScalarExpr::Polynomial {
            terms: vec![(1.0, exps)],
        }
    }

    /// Evaluates the expression.
    pub fn eval(&self, p: &Point) -> f64 {
        match self {
            ScalarExpr::Constant(c) => *c,
            ScalarExpr::Polynomial { terms } => terms
                .iter()
                .map(|(c, e)| {
                    c * p[0].powi(e[0] as i32)
                        * p[1].powi(e[1] as i32)
                        * p[2].powi(e[2] as i32)
                })
                .sum(),
            ScalarExpr::Gaussian {
                amplitude,
                center,
                width,
            } => {
                let r2 = (0..3).map(|i| (p[i] - center[i]).powi(2)).sum::<f64>();
                amplitude * (-r2 / (width * width)).exp()
            }
            ScalarExpr::TrigProduct {
                amplitude,
                freq,
                phase,
            } => {
                amplitude
                    * (freq[0] * p[0] + phase[0]).cos()
                    * (freq[1] * p[1] + phase[1]).cos()
                    * (freq[2] * p[2] + phase[2]).cos()
            }
            ScalarExpr::Sum(terms) => terms.iter().map(|t| t.eval(p)).sum(),
            ScalarExpr::Scaled(s, inner) => s * inner.eval(p),
            ScalarExpr::Product(f, g) => f.eval(p) * g.eval(p),
            ScalarExpr::RadialPullback {
                inner,
                center,
                radius,
            } => {
                let c = Point::new(center[0], center[1], center[2]);
                let r = (p - c).norm();
                if r < 1e-14 {
                    // Continuous extension into the center: average over a
                    // few pullback directions.
                    let dirs = [Vector::x(), Vector::y(), Vector::z()];
                    return dirs
                        .iter()
                        .map(|d| inner.eval(&(c + d * *radius)))
                        .sum::<f64>()
                        / 3.0;
                }
                inner.eval(&(c + (p - c) * (radius / r)))
            }
        }
    }

    /// Exact gradient.
    pub fn gradient(&self, p: &Point) -> Vector {
        match self {
            ScalarExpr::Constant(_) => Vector::zeros(),
            ScalarExpr::Polynomial { terms } => {
                let mut g = Vector::zeros();
                for (c, e) in terms {
                    for d in 0..3 {
                        if e[d] == 0 {
                            continue;
                        }
                        let mut v = c * e[d] as f64;
                        for i in 0..3 {
                            let pw = if i == d { e[i] - 1 } else { e[i] };
                            v *= p[i].powi(pw as i32);
                        }
                        g[d] += v;
                    }
                }
                g
            }
            ScalarExpr::Gaussian {
                amplitude,
                center,
                width,
            } => {
                let r2 = (0..3).map(|i| (p[i] - center[i]).powi(2)).sum::<f64>();
                let val = amplitude * (-r2 / (width * width)).exp();
                let mut g = Vector::zeros();
                for i in 0..3 {
                    g[i] = val * (-2.0 * (p[i] - center[i]) / (width * width));
                }
                g
            }
            ScalarExpr::TrigProduct {
                amplitude,
                freq,
                phase,
            } => {
                let cs: Vec<f64> = (0..3).map(|i| (freq[i] * p[i] + phase[i]).cos()).collect();
                let sn: Vec<f64> = (0..3).map(|i| (freq[i] * p[i] + phase[i]).sin()).collect();
                let mut g = Vector::zeros();
                for d in 0..3 {
                    let mut v = -amplitude * freq[d] * sn[d];
                    for i in 0..3 {
                        if i != d {
                            v *= cs[i];
                        }
                    }
                    g[d] = v;
                }
                g
            }
            ScalarExpr::Sum(terms) => terms
                .iter()
                .map(|t| t.gradient(p))
                .fold(Vector::zeros(), |a, b| a + b),
            ScalarExpr::Scaled(s, inner) => inner.gradient(p) * *s,
            ScalarExpr::Product(f, g) => {
                f.gradient(p) * g.eval(p) + g.gradient(p) * f.eval(p)
            }
            ScalarExpr::RadialPullback {
                inner,
                center,
                radius,
            } => {
                // f*(x) = f(π(x)), π(x) = c + R·u, u = (x−c)/r.
                // ∇f* = Dπᵀ ∇f(π(x)), Dπ = (R/r)(I − u uᵀ).
                let c = Point::new(center[0], center[1], center[2]);
                let rel = p - c;
                let r = rel.norm();
                if r < 1e-10 {
                    return Vector::zeros(); // Lipschitz but not smooth at c
                }
                let u = rel / r;
                let gi = inner.gradient(&(c + u * *radius));
                (gi - u * u.dot(&gi)) * (*radius / r)
            }
        }
    }

    /// Exact Hessian (symmetric). `RadialPullback` is only Lipschitz in the
    /// radial direction and is not supported here.
    pub fn hessian(&self, p: &Point) -> nalgebra::Matrix3<f64> {
        use nalgebra::Matrix3;
        match self {
            ScalarExpr::Constant(_) => Matrix3::zeros(),
            ScalarExpr::Polynomial { terms } => {
                let mut h = Matrix3::zeros();
                for (c, e) in terms {
                    for d1 in 0..3 {
                        for d2 in 0..3 {
                            let mut exps = [e[0] as i32, e[1] as i32, e[2] as i32];
                            let mut coef = *c;
                            for d in [d1, d2] {
                                if exps[d] == 0 {
                                    coef = 0.0;
                                    break;
                                }
                                coef *= exps[d] as f64;
                                exps[d] -= 1;
                            }
                            if coef != 0.0 {
                                let mut v = coef;
                                for i in 0..3 {
                                    v *= p[i].powi(exps[i]);
                                }
                                h[(d1, d2)] += v;
                            }
                        }
                    }
                }
                h
            }
            ScalarExpr::Gaussian {
                amplitude,
                center,
                width,
            } => {
                let w2 = width * width;
                let r2 = (0..3).map(|i| (p[i] - center[i]).powi(2)).sum::<f64>();
                let val = amplitude * (-r2 / w2).exp();
                let mut h = Matrix3::zeros();
                for i in 0..3 {
                    for j in 0..3 {
                        let di = p[i] - center[i];
                        let dj = p[j] - center[j];
                        let mut v = val * (4.0 * di * dj / (w2 * w2));
                        if i == j {
                            v -= val * 2.0 / w2;
                        }
                        h[(i, j)] = v;
                    }
                }
                h
            }
            ScalarExpr::TrigProduct {
                amplitude,
                freq,
                phase,
            } => {
                let cs: Vec<f64> = (0..3).map(|i| (freq[i] * p[i] + phase[i]).cos()).collect();
                let sn: Vec<f64> = (0..3).map(|i| (freq[i] * p[i] + phase[i]).sin()).collect();
                let mut h = Matrix3::zeros();
                for i in 0..3 {
                    for j in 0..3 {
                        let mut v = *amplitude;
                        if i == j {
                            // ∂²ᵢ of cos(fᵢxᵢ+φᵢ) is −fᵢ²·cos(fᵢxᵢ+φᵢ).
                            v *= -freq[i] * freq[i];
                            for k in 0..3 {
                                v *= cs[k];
                            }
                        } else {
                            v *= freq[i] * freq[j] * sn[i] * sn[j];
                            for k in 0..3 {
                                if k != i && k != j {
                                    v *= cs[k];
                                }
                            }
                        }
                        h[(i, j)] = v;
                    }
                }
                h
            }
            ScalarExpr::Sum(terms) => terms
                .iter()
                .map(|t| t.hessian(p))
                .fold(Matrix3::zeros(), |a, b| a + b),
            ScalarExpr::Scaled(s, inner) => inner.hessian(p) * *s,
            ScalarExpr::Product(f, g) => {
                let (fv, gv) = (f.eval(p), g.eval(p));
                let (fg, gg) = (f.gradient(p), g.gradient(p));
                f.hessian(p) * gv
                    + g.hessian(p) * fv
                    + fg * gg.transpose()
                    + gg * fg.transpose()
            }
            ScalarExpr::RadialPullback { .. } => {
                panic!("radial pullbacks are Lipschitz, not twice differentiable")
            }
        }
    }
}

/// Complex scalar field as a pair of real expressions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComplexField {
    /// Real part.
    pub re: ScalarExpr,
    /// Imaginary part.
    pub im: ScalarExpr,
}

impl ComplexField {
    /// Zero field.
    pub fn zero() -> Self {
        ComplexField {
            re: ScalarExpr::zero(),
            im: ScalarExpr::zero(),
        }
    }

    /// Real field.
    pub fn real(expr: ScalarExpr) -> Self {
        ComplexField {
            re: expr,
            im: ScalarExpr::zero(),
        }
    }

    /// Constant complex value.
    pub fn constant(v: Complex64) -> Self {
        ComplexField {
            re: ScalarExpr::Constant(v.re),
            im: ScalarExpr::Constant(v.im),
        }
    }

    /// Evaluates the field.
    pub fn eval(&self, p: &Point) -> Complex64 {
        Complex64::new(self.re.eval(p), self.im.eval(p))
    }
}

/// Real vector field: three catalog components plus accumulated gauge
/// gradients ∇ψ_k (kept symbolic so gauge round-trips cancel pointwise).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VectorField {
    /// Cartesian components.
    pub components: [ScalarExpr; 3],
    /// Gauge contributions: the field value gains Σ_k ∇ψ_k.
    pub gauge_terms: Vec<ScalarExpr>,
}

impl VectorField {
    /// Zero field.
    pub fn zero() -> Self {
        VectorField {
            components: [ScalarExpr::zero(), ScalarExpr::zero(), ScalarExpr::zero()],
            gauge_terms: Vec::new(),
        }
    }

    /// Field from components.
    pub fn new(components: [ScalarExpr; 3]) -> Self {
        VectorField {
            components,
            gauge_terms: Vec::new(),
        }
    }

    /// Evaluates the field.
    pub fn eval(&self, p: &Point) -> Vector {
        let mut v = Vector::new(
            self.components[0].eval(p),
            self.components[1].eval(p),
            self.components[2].eval(p),
        );
        for psi in &self.gauge_terms {
            v += psi.gradient(p);
        }
        v
    }

    /// Jacobian matrix (row i = ∇ of component i).
    pub fn jacobian(&self, p: &Point) -> nalgebra::Matrix3<f64> {
        let mut j = nalgebra::Matrix3::zeros();
        for i in 0..3 {
            let g = self.components[i].gradient(p);
            for d in 0..3 {
                j[(i, d)] = g[d];
            }
        }
        for psi in &self.gauge_terms {
            j += psi.hessian(p);
        }
        j
    }

    /// Divergence (Jacobian trace).
    pub fn divergence(&self, p: &Point) -> f64 {
        self.jacobian(p).trace()
    }

    /// Whether the field is identically zero (structural check).
    pub fn is_structurally_zero(&self) -> bool {
        fn expr_zero(e: &ScalarExpr) -> bool {
            match e {
                ScalarExpr::Constant(c) => *c == 0.0,
                ScalarExpr::Scaled(s, inner) => *s == 0.0 || expr_zero(inner),
                ScalarExpr::Sum(ts) => ts.iter().all(expr_zero),
                ScalarExpr::Polynomial { terms } => terms.iter().all(|(c, _)| *c == 0.0),
                _ => false,
            }
        }
        self.components.iter().all(expr_zero) && self.gauge_terms.is_empty()
    }
}

/// Gauge function ψ: must vanish on the transmission interface.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaugeFunction {
    /// The scalar potential ψ.
    pub psi: ScalarExpr,
}

impl GaugeFunction {
    /// Verifies ψ = 0 on ∂D at quasi-uniform surface samples.
    pub fn verify_vanishes_on(&self, obstacle: &Solid) -> Result<()> {
        for p in obstacle.surface_samples(256) {
            let v = self.psi.eval(&p);
            if v.abs() > 1e-10 {
                return Err(LabError::Medium(format!(
                    "gauge function does not vanish on the interface: |ψ| = {:.3e} at {:?}",
                    v.abs(),
                    p
                )));
            }
        }
        Ok(())
    }
}

/// Side of the transmission interface.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    /// Ω ∖ D̄.
    Plus,
    /// D.
    Minus,
}

/// Complete coefficient description of a transmission medium.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Medium {
    /// Magnetic potential A⁺ on Ω ∖ D̄ (defined globally).
    pub magnetic_plus: VectorField,
    /// Magnetic potential A⁻ on D (defined globally).
    pub magnetic_minus: VectorField,
    /// Electric potential q⁺.
    pub electric_plus: ComplexField,
    /// Electric potential q⁻.
    pub electric_minus: ComplexField,
    /// Transmission coefficient a (Dirichlet jump), positive.
    pub coef_a: ScalarExpr,
    /// Transmission coefficient b (conormal jump), positive.
    pub coef_b: ScalarExpr,
    /// Transmission coefficient c (zeroth-order coupling).
    pub coef_c: ScalarExpr,
    /// Per-obstacle-component multiplicative factors applied to (a, b, c);
    /// identity when empty.
    pub component_factors: Vec<(Solid, f64)>,
}

impl Default for Medium {
    fn default() -> Self {
        Medium::trivial()
    }
}

/// Validation outcome for a medium on a domain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MediumReport {
    /// True exactly when all fields are real and a·b ≡ 1 at the samples.
    pub self_adjoint: bool,
    /// max |a·b − 1| over interface samples.
    pub max_ab_defect: f64,
    /// Non-fatal hypotheses at risk (e.g. |a − 1| not bounded away from 0).
    pub warnings: Vec<String>,
}

impl Medium {
    /// Vacuum medium: A = 0, q = 0, a = b = 1, c = 0.
    pub fn trivial() -> Self {
        Medium {
            magnetic_plus: VectorField::zero(),
            magnetic_minus: VectorField::zero(),
            electric_plus: ComplexField::zero(),
            electric_minus: ComplexField::zero(),
            coef_a: ScalarExpr::Constant(1.0),
            coef_b: ScalarExpr::Constant(1.0),
            coef_c: ScalarExpr::zero(),
            component_factors: Vec::new(),
        }
    }

    /// Multiplicative component factor at a point (nearest obstacle
    /// component wins; 1 without scaling).
    fn factor_at(&self, p: &Point) -> f64 {
        if self.component_factors.is_empty() {
            return 1.0;
        }
        let mut best = (f64::INFINITY, 1.0);
        for (solid, alpha) in &self.component_factors {
            let d = solid.signed_distance(p).abs();
            if d < best.0 {
                best = (d, *alpha);
            }
        }
        best.1
    }

    /// a at a point (with component scaling).
    pub fn a_at(&self, p: &Point) -> f64 {
        self.coef_a.eval(p) * self.factor_at(p)
    }

    /// ∇a at a point.
    pub fn grad_a_at(&self, p: &Point) -> Vector {
        self.coef_a.gradient(p) * self.factor_at(p)
    }

    /// b at a point.
    pub fn b_at(&self, p: &Point) -> f64 {
        self.coef_b.eval(p) * self.factor_at(p)
    }

    /// ∇b at a point.
    pub fn grad_b_at(&self, p: &Point) -> Vector {
        self.coef_b.gradient(p) * self.factor_at(p)
    }

    /// c at a point.
    pub fn c_at(&self, p: &Point) -> f64 {
        self.coef_c.eval(p) * self.factor_at(p)
    }

    /// Magnetic potential of a branch.
    pub fn magnetic(&self, branch: Branch) -> &VectorField {
        match branch {
            Branch::Plus => &self.magnetic_plus,
            Branch::Minus => &self.magnetic_minus,
        }
    }

    /// Electric potential of a branch.
    pub fn electric(&self, branch: Branch) -> &ComplexField {
        match branch {
            Branch::Plus => &self.electric_plus,
            Branch::Minus => &self.electric_minus,
        }
    }

    /// The reduced zeroth-order potential q̃ = A² − i∇·A + q of a branch,
    /// the potential seen by the Green's-function integral equation.
    pub fn q_tilde_at(&self, branch: Branch, p: &Point) -> Complex64 {
        let a = self.magnetic(branch);
        let q = self.electric(branch).eval(p);
        let av = a.eval(p);
        Complex64::new(av.norm_squared(), -a.divergence(p)) + q
    }

    /// Checks positivity of a, b and evaluates a·b ≡ 1 / realness, issuing
    /// hypothesis warnings. Samples cover D̄, ∂D and Ω.
    pub fn validate(&self, spec: &DomainSpec) -> Result<MediumReport> {
        let mut warnings = Vec::new();
        let samples = medium_sample_points(spec);
        let surface: Vec<Point> = spec
            .obstacle
            .as_ref()
            .map(|o| o.surface_samples(256))
            .unwrap_or_default();

        let mut max_ab_defect = 0.0f64;
        let mut min_a_dist_from_one = f64::INFINITY;
        for p in samples.iter().chain(surface.iter()) {
            let a = self.a_at(p);
            let b = self.b_at(p);
            if a <= 0.0 || b <= 0.0 {
                return Err(LabError::Medium(format!(
                    "transmission coefficients must be positive: a = {a:.3e}, b = {b:.3e} at {p:?}"
                )));
            }
            min_a_dist_from_one = min_a_dist_from_one.min((a - 1.0).abs());
        }
        for p in &surface {
            max_ab_defect = max_ab_defect.max((self.a_at(p) * self.b_at(p) - 1.0).abs());
        }

        let mut all_real = true;
        for p in &samples {
            if self.electric_plus.im.eval(p).abs() > 1e-14
                || self.electric_minus.im.eval(p).abs() > 1e-14
            {
                all_real = false;
                break;
            }
        }
        let self_adjoint = all_real && max_ab_defect <= 1e-12;

        if !surface.is_empty() && min_a_dist_from_one < 1e-3 {
            warnings.push(format!(
                "|a − 1| reaches {min_a_dist_from_one:.2e}: the interface-visibility hypothesis \
                 (a − 1 bounded away from zero) is at risk"
            ));
        }
        Ok(MediumReport {
            self_adjoint,
            max_ab_defect,
            warnings,
        })
    }

    /// Whether the medium is self-adjoint on the given domain.
    pub fn is_self_adjoint(&self, spec: &DomainSpec) -> bool {
        self.validate(spec).map(|r| r.self_adjoint).unwrap_or(false)
    }
}

/// Deterministic sample points covering Ω (volume fan about the center).
fn medium_sample_points(spec: &DomainSpec) -> Vec<Point> {
    let c = spec.outer.center();
    let mut pts = vec![c];
    for dir in fibonacci_directions(64) {
        if let Ok(t) = spec.outer.radius_along(&c, &dir) {
            for frac in [0.25, 0.5, 0.75, 0.95] {
                pts.push(c + dir * (t * frac));
            }
        }
    }
    pts
}

/// Replaces A⁻ by A⁻ + ∇ψ after verifying ψ = 0 on ∂D. The interior
/// operator is conjugated by e^{iψ}; every exterior observation is
/// unchanged.
pub fn apply_gauge(medium: &Medium, gauge: &GaugeFunction, spec: &DomainSpec) -> Result<Medium> {
    let obstacle = spec.obstacle.as_ref().ok_or_else(|| {
        LabError::Medium("gauge transformations require an obstacle".into())
    })?;
    gauge.verify_vanishes_on(obstacle)?;
    let mut out = medium.clone();
    out.magnetic_minus.gauge_terms.push(gauge.psi.clone());
    Ok(out)
}

/// Scales (a, b, c) by α_l > 0 on each obstacle component. The transmission
/// conditions are invariant; the product a·b is not.
pub fn apply_component_scaling(
    medium: &Medium,
    spec: &DomainSpec,
    alphas: &[f64],
) -> Result<Medium> {
    let obstacle = spec.obstacle.as_ref().ok_or_else(|| {
        LabError::Medium("component scaling requires an obstacle".into())
    })?;
    let comps = obstacle.components();
    if comps.len() != alphas.len() {
        return Err(LabError::Medium(format!(
            "expected {} scaling factors, got {}",
            comps.len(),
            alphas.len()
        )));
    }
    if alphas.iter().any(|&a| a <= 0.0) {
        return Err(LabError::Medium("scaling factors must be positive".into()));
    }
    let mut out = medium.clone();
    for (solid, &alpha) in comps.iter().zip(alphas) {
        // Compose with any existing factors on the same component.
        if let Some(entry) = out
            .component_factors
            .iter_mut()
            .find(|(s, _)| same_solid(s, solid))
        {
            entry.1 *= alpha;
        } else {
            out.component_factors.push(((*solid).clone(), alpha));
        }
    }
    Ok(out)
}

fn same_solid(a: &Solid, b: &Solid) -> bool {
    // Structural comparison through the serialized form; catalog solids are
    // plain data.
    serde_json::to_string(a).ok() == serde_json::to_string(b).ok()
}

/// Extends a boundary trace on a ball interface to a global field by radial
/// pullback: `f*(x) = f(center + radius·(x−center)/|x−center|)`. The
/// extension is linear in the trace and preserves Lipschitz bounds up to a
/// geometry constant.
pub fn lipschitz_extension(trace: &ScalarExpr, component: &Solid) -> Result<ScalarExpr> {
    match component {
        Solid::Ball { center, radius } => Ok(ScalarExpr::RadialPullback {
            inner: Box::new(trace.clone()),
            center: *center,
            radius: *radius,
        }),
        _ => Err(LabError::Medium(
            "boundary-trace extension is implemented for ball interfaces".into(),
        )),
    }
}

/// Measures the Lipschitz constant of a field over a solid (sampled) and of
/// its trace over the surface, returning (volume constant, surface
/// constant). The ratio quantifies the extension's Lipschitz inflation.
pub fn lipschitz_constants(
    field: &ScalarExpr,
    trace: &ScalarExpr,
    component: &Solid,
    n_samples: usize,
) -> (f64, f64) {
    let surf = component.surface_samples(n_samples);
    let mut surface_k = 0.0f64;
    for i in 0..surf.len() {
        for j in (i + 1)..surf.len() {
            let d = (surf[i] - surf[j]).norm();
            if d > 1e-9 {
                surface_k = surface_k.max((trace.eval(&surf[i]) - trace.eval(&surf[j])).abs() / d);
            }
        }
    }
    // Volume samples: shrunk copies of the surface fan.
    let c = component.center();
    let mut vol: Vec<Point> = Vec::new();
    for frac in [0.35, 0.6, 0.85, 1.0] {
        for p in &surf {
            vol.push(Point::from(c.coords + (p - c) * frac));
        }
    }
    let mut volume_k = 0.0f64;
    for i in 0..vol.len() {
        for j in (i + 1)..vol.len() {
            let d = (vol[i] - vol[j]).norm();
            if d > 1e-6 {
                volume_k = volume_k.max((field.eval(&vol[i]) - field.eval(&vol[j])).abs() / d);
            }
        }
    }
    (volume_k, surface_k)
}
