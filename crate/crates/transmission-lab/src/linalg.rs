//! Sparse linear algebra for the finite-element solvers.
//!
//! Everything here is deliberately small and deterministic:
//!
//! * [`CsrMatrix`] — compressed sparse row storage over `Complex64`,
//!   assembled from (row, col, value) triplets with duplicate summing.
//!   Row-parallel products gather results by row index, so repeated runs
//!   produce bit-identical vectors regardless of thread count.
//! * [`cg`] — conjugate gradients for Hermitian positive definite systems
//!   with an optional Jacobi preconditioner.
//! * [`bicgstab`] — BiCGStab for general complex systems.
//! * [`cgnr`] — CG on the normal equations `AᴴA x = Aᴴ b`; used both as a
//!   least-squares fallback and to probe near-singular systems.
//! * [`subspace_smallest`] — seeded block subspace iteration with
//!   Rayleigh–Ritz extraction for the generalized Hermitian problem
//!   `K x = λ M x` (`M` positive definite), returning the smallest
//!   eigenvalues. Ritz blocks are diagonalized through the real embedding
//!   `H ↦ [[Re H, −Im H], [Im H, Re H]]` of a Hermitian matrix, which is
//!   symmetric and has each eigenvalue of `H` twice.
//!
//! The iterative solvers report the achieved relative residual so callers
//! can distinguish "converged", "stalled" (near-singular operator), and
//! "diverged".

use num_complex::Complex64;
use rayon::prelude::*;

/// Convergence report of an iterative solve.
#[derive(Debug, Clone, Copy)]
pub struct SolveReport {
    /// Relative residual ‖b − Ax‖ / ‖b‖ at exit.
    pub rel_residual: f64,
    /// Iterations used.
    pub iterations: usize,
    /// Whether the requested tolerance was met.
    pub converged: bool,
}

/// Compressed sparse row matrix over `Complex64`.
#[derive(Debug, Clone)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<Complex64>,
}

impl CsrMatrix {
    /// Builds a CSR matrix from unordered triplets; duplicates are summed.
    pub fn from_triplets(
        nrows: usize,
        ncols: usize,
        triplets: &[(usize, usize, Complex64)],
    ) -> Self {
        let mut entries: Vec<(usize, usize, Complex64)> = triplets.to_vec();
        entries.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));

        let mut row_ptr = vec![0usize; nrows + 1];
        let mut col_idx: Vec<usize> = Vec::with_capacity(entries.len());
        let mut values: Vec<Complex64> = Vec::with_capacity(entries.len());

        let mut last: Option<(usize, usize)> = None;
        for &(r, c, v) in &entries {
            assert!(r < nrows && c < ncols, "triplet out of bounds");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(c);
                values.push(v);
                last = Some((r, c));
            }
            row_ptr[r + 1] = col_idx.len();
        }
        // Fill cumulative offsets across empty rows.
        for r in 1..=nrows {
            if row_ptr[r] < row_ptr[r - 1] {
                row_ptr[r] = row_ptr[r - 1];
            }
        }
        CsrMatrix {
            nrows,
            ncols,
            row_ptr,
            col_idx,
            values,
        }
    }

    /// Number of rows.
    pub fn nrows(&self) -> usize {
        self.nrows
    }

    /// Number of columns.
    pub fn ncols(&self) -> usize {
        self.ncols
    }

    /// Number of stored entries.
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Stored entries of one row as (column, value) pairs.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, Complex64)> + '_ {
        let lo = self.row_ptr[r];
        let hi = self.row_ptr[r + 1];
        self.col_idx[lo..hi]
            .iter()
            .zip(&self.values[lo..hi])
            .map(|(&c, &v)| (c, v))
    }

    /// y = A x (row-parallel, deterministic).
    pub fn mul_vec(&self, x: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(x.len(), self.ncols);
        let mut y = vec![Complex64::new(0.0, 0.0); self.nrows];
        y.par_iter_mut().enumerate().for_each(|(r, yr)| {
            let mut acc = Complex64::new(0.0, 0.0);
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            *yr = acc;
        });
        y
    }

    /// y = Aᴴ x (built via an explicit transpose walk; used by `cgnr`).
    pub fn mul_adjoint_vec(&self, x: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(x.len(), self.nrows);
        let mut y = vec![Complex64::new(0.0, 0.0); self.ncols];
        // Sequential scatter keeps the summation order fixed.
        for r in 0..self.nrows {
            let xr = x[r];
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                y[self.col_idx[k]] += self.values[k].conj() * xr;
            }
        }
        y
    }

    /// Diagonal entries (zero where a row stores no diagonal).
    pub fn diagonal(&self) -> Vec<Complex64> {
        let mut d = vec![Complex64::new(0.0, 0.0); self.nrows.min(self.ncols)];
        for r in 0..d.len() {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                if self.col_idx[k] == r {
                    d[r] = self.values[k];
                }
            }
        }
        d
    }

    /// Maximum Hermitian asymmetry max |A_{ij} − conj(A_{ji})| over stored
    /// entries; used by the assembly tests.
    pub fn hermitian_defect(&self) -> f64 {
        let mut defect: f64 = 0.0;
        for r in 0..self.nrows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let c = self.col_idx[k];
                let v = self.values[k];
                let mut vt = Complex64::new(0.0, 0.0);
                for k2 in self.row_ptr[c]..self.row_ptr[c + 1] {
                    if self.col_idx[k2] == r {
                        vt = self.values[k2];
                    }
                }
                defect = defect.max((v - vt.conj()).norm());
            }
        }
        defect
    }

    /// Largest entry magnitude; scale reference for tolerance checks.
    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// A + shift·B on the union sparsity pattern.
    pub fn add_scaled(&self, other: &CsrMatrix, shift: Complex64) -> CsrMatrix {
        assert_eq!(self.nrows, other.nrows);
        assert_eq!(self.ncols, other.ncols);
        let mut triplets: Vec<(usize, usize, Complex64)> =
            Vec::with_capacity(self.nnz() + other.nnz());
        for r in 0..self.nrows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                triplets.push((r, self.col_idx[k], self.values[k]));
            }
            for k in other.row_ptr[r]..other.row_ptr[r + 1] {
                triplets.push((r, other.col_idx[k], shift * other.values[k]));
            }
        }
        CsrMatrix::from_triplets(self.nrows, self.ncols, &triplets)
    }
}

/// Inner product ⟨x, y⟩ = Σ conj(x_i) y_i with fixed summation order.
pub fn dot(x: &[Complex64], y: &[Complex64]) -> Complex64 {
    let mut acc = Complex64::new(0.0, 0.0);
    for i in 0..x.len() {
        acc += x[i].conj() * y[i];
    }
    acc
}

/// Euclidean norm.
pub fn norm(x: &[Complex64]) -> f64 {
    dot(x, x).re.sqrt()
}

fn axpy(alpha: Complex64, x: &[Complex64], y: &mut [Complex64]) {
    for i in 0..x.len() {
        y[i] += alpha * x[i];
    }
}

/// Conjugate gradients for Hermitian positive definite `A x = b` with a
/// Jacobi preconditioner built from the matrix diagonal.
pub fn cg(a: &CsrMatrix, b: &[Complex64], tol: f64, max_iter: usize) -> (Vec<Complex64>, SolveReport) {
    let n = b.len();
    let bnorm = norm(b).max(f64::MIN_POSITIVE);
    let diag = a.diagonal();
    let precond: Vec<Complex64> = diag
        .iter()
        .map(|d| {
            let m = d.norm();
            if m > 0.0 {
                Complex64::new(1.0, 0.0) / Complex64::new(m, 0.0)
            } else {
                Complex64::new(1.0, 0.0)
            }
        })
        .collect();

    let mut x = vec![Complex64::new(0.0, 0.0); n];
    let mut r = b.to_vec();
    let mut z: Vec<Complex64> = r.iter().zip(&precond).map(|(ri, pi)| ri * pi).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);

    let mut iterations = 0;
    let mut rel = norm(&r) / bnorm;
    while rel > tol && iterations < max_iter {
        let ap = a.mul_vec(&p);
        let pap = dot(&p, &ap);
        if pap.norm() == 0.0 {
            break;
        }
        let alpha = rz / pap;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &ap, &mut r);
        z = r.iter().zip(&precond).map(|(ri, pi)| ri * pi).collect();
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        iterations += 1;
        rel = norm(&r) / bnorm;
    }
    let report = SolveReport {
        rel_residual: rel,
        iterations,
        converged: rel <= tol,
    };
    (x, report)
}

/// BiCGStab for general complex `A x = b` with Jacobi preconditioning.
pub fn bicgstab(
    a: &CsrMatrix,
    b: &[Complex64],
    tol: f64,
    max_iter: usize,
) -> (Vec<Complex64>, SolveReport) {
    let n = b.len();
    let bnorm = norm(b).max(f64::MIN_POSITIVE);
    let diag = a.diagonal();
    let precond: Vec<Complex64> = diag
        .iter()
        .map(|d| {
            let m = d.norm();
            if m > 1e-300 {
                d.conj() / Complex64::new(m * m, 0.0)
            } else {
                Complex64::new(1.0, 0.0)
            }
        })
        .collect();
    let apply_pre = |v: &[Complex64]| -> Vec<Complex64> {
        v.iter().zip(&precond).map(|(vi, pi)| vi * pi).collect()
    };

    let mut x = vec![Complex64::new(0.0, 0.0); n];
    let mut r = b.to_vec();
    let r_hat = r.clone();
    let mut rho = Complex64::new(1.0, 0.0);
    let mut alpha = Complex64::new(1.0, 0.0);
    let mut omega = Complex64::new(1.0, 0.0);
    let mut v = vec![Complex64::new(0.0, 0.0); n];
    let mut p = vec![Complex64::new(0.0, 0.0); n];

    let mut iterations = 0;
    let mut rel = norm(&r) / bnorm;
    while rel > tol && iterations < max_iter {
        let rho_new = dot(&r_hat, &r);
        if rho_new.norm() < 1e-300 {
            break;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        let p_hat = apply_pre(&p);
        v = a.mul_vec(&p_hat);
        let denom = dot(&r_hat, &v);
        if denom.norm() < 1e-300 {
            break;
        }
        alpha = rho / denom;
        let mut s = r.clone();
        axpy(-alpha, &v, &mut s);
        if norm(&s) / bnorm <= tol {
            axpy(alpha, &p_hat, &mut x);
            r = s;
            iterations += 1;
            rel = norm(&r) / bnorm;
            break;
        }
        let s_hat = apply_pre(&s);
        let t = a.mul_vec(&s_hat);
        let tt = dot(&t, &t);
        if tt.norm() < 1e-300 {
            break;
        }
        omega = dot(&t, &s) / tt;
        axpy(alpha, &p_hat, &mut x);
        axpy(omega, &s_hat, &mut x);
        r = s;
        axpy(-omega, &t, &mut r);
        iterations += 1;
        rel = norm(&r) / bnorm;
        if omega.norm() < 1e-300 {
            break;
        }
    }
    let report = SolveReport {
        rel_residual: rel,
        iterations,
        converged: rel <= tol,
    };
    (x, report)
}

/// CG on the normal equations `AᴴA x = Aᴴ b` (CGNR). Converges to the
/// least-squares solution; used as the fallback route for near-singular
/// systems and to pair with compatibility checks.
pub fn cgnr(
    a: &CsrMatrix,
    b: &[Complex64],
    tol: f64,
    max_iter: usize,
) -> (Vec<Complex64>, SolveReport) {
    let n = a.ncols();
    let mut x = vec![Complex64::new(0.0, 0.0); n];
    let mut r = b.to_vec(); // residual in data space
    let mut z = a.mul_adjoint_vec(&r); // gradient in solution space
    let mut p = z.clone();
    let znorm0 = norm(&z).max(f64::MIN_POSITIVE);
    let mut zz = dot(&z, &z);

    let mut iterations = 0;
    let mut rel = 1.0;
    while rel > tol && iterations < max_iter {
        let ap = a.mul_vec(&p);
        let ap2 = dot(&ap, &ap);
        if ap2.norm() < 1e-300 {
            break;
        }
        let alpha = zz / ap2;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &ap, &mut r);
        z = a.mul_adjoint_vec(&r);
        let zz_new = dot(&z, &z);
        let beta = zz_new / zz;
        zz = zz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        iterations += 1;
        rel = norm(&z) / znorm0; // normal-equation residual
    }
    let report = SolveReport {
        rel_residual: rel,
        iterations,
        converged: rel <= tol,
    };
    (x, report)
}

/// Result of a subspace-iteration eigenvalue solve.
#[derive(Debug, Clone)]
pub struct EigResult {
    /// Eigenvalues, ascending.
    pub values: Vec<f64>,
    /// Eigenvectors, one per eigenvalue (columns of the Ritz basis).
    pub vectors: Vec<Vec<Complex64>>,
    /// Relative residuals ‖K x − λ M x‖ / ((‖K‖_scale + |λ|·‖M‖_scale)·‖x‖).
    pub residuals: Vec<f64>,
}

/// Smallest `m` eigenvalues of the generalized Hermitian problem
/// `K x = λ M x` with `M` Hermitian positive definite, via seeded block
/// subspace iteration with CG inner solves of `(K + σM) y = M x`.
///
/// The shift `σ ≥ 0` must make `K + σM` positive definite; it is increased
/// automatically (doubling, up to a budget) when the inner CG stalls.
pub fn subspace_smallest(
    k: &CsrMatrix,
    m_mat: &CsrMatrix,
    m_want: usize,
    seed: u64,
    tol: f64,
    max_outer: usize,
) -> crate::Result<EigResult> {
    use rand::Rng;
    use rand::SeedableRng;

    let n = k.nrows();
    assert_eq!(m_mat.nrows(), n);
    let block = (m_want + 8.min(m_want.max(4))).min(n);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);

    // Seeded start block.
    let mut basis: Vec<Vec<Complex64>> = (0..block)
        .map(|_| {
            (0..n)
                .map(|_| Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5))
                .collect()
        })
        .collect();

    let k_scale = k.max_abs().max(1e-300);
    let m_scale = m_mat.max_abs().max(1e-300);

    let mut sigma = 0.0f64;
    let mut shifted = k.clone();
    let mut shift_budget = 6;

    let m_orthonormalize = |basis: &mut Vec<Vec<Complex64>>, m_mat: &CsrMatrix| {
        // Modified Gram–Schmidt in the M inner product.
        let cols = basis.len();
        for j in 0..cols {
            for i in 0..j {
                let mbj = m_mat.mul_vec(&basis[j]);
                let proj = dot(&basis[i], &mbj);
                let bi = basis[i].clone();
                axpy(-proj, &bi, &mut basis[j]);
            }
            let mbj = m_mat.mul_vec(&basis[j]);
            let nn = dot(&basis[j], &mbj).re.max(1e-300).sqrt();
            for v in basis[j].iter_mut() {
                *v /= nn;
            }
        }
    };

    m_orthonormalize(&mut basis, m_mat);

    let mut values = vec![0.0f64; block];
    let mut residuals = vec![f64::INFINITY; block];

    for _outer in 0..max_outer {
        // Inverse-iterate the block through (K + σM)⁻¹ M.
        let mut next: Vec<Vec<Complex64>> = Vec::with_capacity(block);
        let mut all_ok = true;
        for b in &basis {
            let rhs = m_mat.mul_vec(b);
            let (y, rep) = cg(&shifted, &rhs, 1e-12, 20 * n.max(50));
            if !rep.converged && rep.rel_residual > 1e-6 {
                all_ok = false;
                break;
            }
            next.push(y);
        }
        if !all_ok {
            // The shifted operator is not (numerically) positive definite:
            // increase the shift and retry.
            if shift_budget == 0 {
                return Err(crate::LabError::Solver(
                    "subspace iteration: no positive-definite shift found".into(),
                ));
            }
            shift_budget -= 1;
            sigma = if sigma == 0.0 {
                k_scale / m_scale * 1e-3
            } else {
                sigma * 2.0
            };
            shifted = k.add_scaled(m_mat, Complex64::new(sigma, 0.0));
            continue;
        }
        basis = next;
        m_orthonormalize(&mut basis, m_mat);

        // Rayleigh–Ritz on the M-orthonormal basis: H_ij = ⟨b_i, K b_j⟩.
        let mut h = nalgebra::DMatrix::<f64>::zeros(2 * block, 2 * block);
        for j in 0..block {
            let kbj = k.mul_vec(&basis[j]);
            for i in 0..block {
                let hij = dot(&basis[i], &kbj);
                // Real embedding of the Hermitian block.
                h[(i, j)] = hij.re;
                h[(i + block, j + block)] = hij.re;
                h[(i + block, j)] = hij.im;
                h[(i, j + block)] = -hij.im;
            }
        }
        // Symmetrize against round-off before the dense solve.
        let h_sym = (&h + h.transpose()) * 0.5;
        let eig = nalgebra::SymmetricEigen::new(h_sym);
        // Each Hermitian eigenvalue appears twice in the embedding; keep one
        // representative per pair, ascending.
        let mut order: Vec<usize> = (0..2 * block).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let mut ritz_vals: Vec<f64> = Vec::with_capacity(block);
        let mut ritz_vecs: Vec<Vec<Complex64>> = Vec::with_capacity(block);
        let mut used = vec![false; 2 * block];
        for &idx in &order {
            if ritz_vals.len() == block {
                break;
            }
            if used[idx] {
                continue;
            }
            used[idx] = true;
            // Pair partner: closest remaining eigenvalue (the duplicate).
            let mut partner = None;
            let mut best = f64::INFINITY;
            for &jdx in &order {
                if !used[jdx] {
                    let d = (eig.eigenvalues[jdx] - eig.eigenvalues[idx]).abs();
                    if d < best {
                        best = d;
                        partner = Some(jdx);
                    }
                }
            }
            if let Some(p) = partner {
                used[p] = true;
            }
            ritz_vals.push(eig.eigenvalues[idx]);
            // Complex Ritz coefficients from the embedded eigenvector.
            let col = eig.eigenvectors.column(idx);
            let mut vec_c = vec![Complex64::new(0.0, 0.0); n];
            for j in 0..block {
                let cj = Complex64::new(col[j], col[j + block]);
                axpy(cj, &basis[j], &mut vec_c);
            }
            let nn = {
                let mv = m_mat.mul_vec(&vec_c);
                dot(&vec_c, &mv).re.max(1e-300).sqrt()
            };
            for v in vec_c.iter_mut() {
                *v /= nn;
            }
            ritz_vecs.push(vec_c);
        }

        // Residuals for the wanted pairs.
        let mut max_res = 0.0f64;
        for i in 0..m_want.min(block) {
            let lam = ritz_vals[i];
            let kx = k.mul_vec(&ritz_vecs[i]);
            let mx = m_mat.mul_vec(&ritz_vecs[i]);
            let mut r = kx;
            axpy(Complex64::new(-lam, 0.0), &mx, &mut r);
            let res = norm(&r) / ((k_scale + lam.abs() * m_scale) * norm(&ritz_vecs[i]));
            residuals[i] = res;
            max_res = max_res.max(res);
        }
        values = ritz_vals;
        basis = ritz_vecs;

        if max_res < tol {
            break;
        }
    }

    Ok(EigResult {
        values: values[..m_want.min(values.len())].to_vec(),
        vectors: basis[..m_want.min(basis.len())].to_vec(),
        residuals: residuals[..m_want.min(residuals.len())].to_vec(),
    })
}

/// Rough two-sided conditioning probe: power iteration for σ_max(A) and
/// inverse iteration through [`cgnr`] for σ_min(A). Iteration counts are
/// capped; the result is a diagnostic, not a certified bound.
pub fn singular_value_probe(a: &CsrMatrix, seed: u64, iters: usize) -> (f64, f64) {
    use rand::Rng;
    use rand::SeedableRng;
    let n = a.ncols();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<Complex64> = (0..n)
        .map(|_| Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5))
        .collect();
    let nv = norm(&v).max(1e-300);
    v.iter_mut().for_each(|x| *x /= nv);

    // σ_max via power iteration on AᴴA.
    let mut smax = 0.0f64;
    for _ in 0..iters {
        let av = a.mul_vec(&v);
        let atav = a.mul_adjoint_vec(&av);
        let nn = norm(&atav).max(1e-300);
        smax = nn.sqrt();
        v = atav;
        v.iter_mut().for_each(|x| *x /= nn);
    }

    // σ_min via inverse iteration: w ← argmin ‖A u − w‖ (least squares).
    let mut w: Vec<Complex64> = (0..n)
        .map(|_| Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5))
        .collect();
    let nw = norm(&w).max(1e-300);
    w.iter_mut().for_each(|x| *x /= nw);
    let mut smin = smax;
    for _ in 0..iters.min(4) {
        let (u, _rep) = cgnr(a, &w, 1e-10, 4 * n.max(50));
        let nu = norm(&u);
        if nu < 1e-300 {
            break;
        }
        smin = 1.0 / nu;
        w = u;
        w.iter_mut().for_each(|x| *x /= nu);
    }
    (smax, smin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn dense_from(a: &CsrMatrix) -> nalgebra::DMatrix<Complex64> {
        let mut d = nalgebra::DMatrix::<Complex64>::zeros(a.nrows(), a.ncols());
        for r in 0..a.nrows() {
            for (cidx, v) in a.row(r) {
                d[(r, cidx)] += v;
            }
        }
        d
    }

    #[test]
    fn triplet_duplicates_are_summed() {
        let a = CsrMatrix::from_triplets(
            2,
            2,
            &[
                (0, 0, c(1.0, 0.0)),
                (0, 0, c(2.0, 1.0)),
                (1, 0, c(-1.0, 0.0)),
                (0, 1, c(0.5, 0.0)),
            ],
        );
        assert_eq!(a.nnz(), 3);
        let d = a.diagonal();
        assert_relative_eq!(d[0].re, 3.0);
        assert_relative_eq!(d[0].im, 1.0);
    }

    #[test]
    fn cg_solves_1d_laplacian() {
        // Tridiagonal (-1, 2, -1): SPD. Solution of A x = e_mid is the
        // discrete Green's function, a hat peaking at the midpoint.
        let n = 64;
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, c(2.0, 0.0)));
            if i + 1 < n {
                t.push((i, i + 1, c(-1.0, 0.0)));
                t.push((i + 1, i, c(-1.0, 0.0)));
            }
        }
        let a = CsrMatrix::from_triplets(n, n, &t);
        let mut b = vec![c(0.0, 0.0); n];
        b[n / 2] = c(1.0, 0.0);
        let (x, rep) = cg(&a, &b, 1e-12, 10 * n);
        assert!(rep.converged, "rel residual {}", rep.rel_residual);
        let r = a.mul_vec(&x);
        let err: f64 = r
            .iter()
            .zip(&b)
            .map(|(ri, bi)| (ri - bi).norm())
            .fold(0.0, f64::max);
        assert!(err < 1e-10);
    }

    #[test]
    fn bicgstab_matches_dense_solve() {
        // Small complex non-Hermitian system vs nalgebra's dense LU.
        let n = 12;
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, c(4.0 + i as f64 * 0.1, 0.5)));
            if i + 1 < n {
                t.push((i, i + 1, c(-1.0, 0.3)));
                t.push((i + 1, i, c(-0.7, -0.2)));
            }
        }
        let a = CsrMatrix::from_triplets(n, n, &t);
        let b: Vec<Complex64> = (0..n).map(|i| c(1.0 / (i as f64 + 1.0), 0.2)).collect();
        let (x, rep) = bicgstab(&a, &b, 1e-12, 400);
        assert!(rep.converged);

        let ad = dense_from(&a);
        let bd = nalgebra::DVector::from_vec(b.clone());
        let xd = ad.lu().solve(&bd).unwrap();
        for i in 0..n {
            assert!((x[i] - xd[i]).norm() < 1e-8, "entry {i}");
        }
    }

    #[test]
    fn cgnr_finds_least_squares_solution() {
        // Overdetermined 4x2 system; compare against the normal-equation
        // solution computed densely.
        let t = vec![
            (0, 0, c(1.0, 0.0)),
            (0, 1, c(1.0, 0.0)),
            (1, 0, c(1.0, 0.0)),
            (1, 1, c(2.0, 0.0)),
            (2, 0, c(1.0, 0.0)),
            (2, 1, c(3.0, 0.0)),
            (3, 0, c(1.0, 0.0)),
            (3, 1, c(4.0, 0.0)),
        ];
        let a = CsrMatrix::from_triplets(4, 2, &t);
        let b = vec![c(6.0, 0.0), c(5.0, 0.0), c(7.0, 0.0), c(10.0, 0.0)];
        let (x, _rep) = cgnr(&a, &b, 1e-13, 200);
        // Known least-squares fit of y = x0 + x1 k against (6,5,7,10).
        assert_relative_eq!(x[0].re, 3.5, epsilon = 1e-8);
        assert_relative_eq!(x[1].re, 1.4, epsilon = 1e-8);
    }

    #[test]
    fn subspace_iteration_reproduces_1d_fem_eigenvalues() {
        // P1 finite elements for -u'' = λ u on (0,1), zero boundary values:
        // K = (1/h)·tridiag(-1,2,-1), M = (h/6)·tridiag(1,4,1). The discrete
        // eigenvalues have the closed form
        //     λ_k = (6/h²)·(1 − cos kπh)/(2 + cos kπh),
        // which converges to (kπ)² from above.
        let n = 80;
        let h = 1.0 / (n as f64 + 1.0);
        let mut tk = Vec::new();
        let mut tm = Vec::new();
        for i in 0..n {
            tk.push((i, i, c(2.0 / h, 0.0)));
            tm.push((i, i, c(4.0 * h / 6.0, 0.0)));
            if i + 1 < n {
                tk.push((i, i + 1, c(-1.0 / h, 0.0)));
                tk.push((i + 1, i, c(-1.0 / h, 0.0)));
                tm.push((i, i + 1, c(h / 6.0, 0.0)));
                tm.push((i + 1, i, c(h / 6.0, 0.0)));
            }
        }
        let k = CsrMatrix::from_triplets(n, n, &tk);
        let m = CsrMatrix::from_triplets(n, n, &tm);
        let res = subspace_smallest(&k, &m, 3, 7, 1e-10, 60).unwrap();
        for (idx, lam) in res.values.iter().enumerate() {
            let kk = (idx + 1) as f64;
            let th = kk * std::f64::consts::PI * h;
            let exact = 6.0 / (h * h) * (1.0 - th.cos()) / (2.0 + th.cos());
            assert_relative_eq!(*lam, exact, max_relative = 1e-8);
        }
        // First discrete eigenvalue is within O(h²) of π².
        let pi2 = std::f64::consts::PI.powi(2);
        assert!((res.values[0] - pi2).abs() / pi2 < 2e-3);
    }

    #[test]
    fn subspace_iteration_is_deterministic() {
        let n = 40;
        let mut tk = Vec::new();
        let mut tm = Vec::new();
        for i in 0..n {
            tk.push((i, i, c(2.0, 0.0)));
            tm.push((i, i, c(1.0, 0.0)));
            if i + 1 < n {
                tk.push((i, i + 1, c(-1.0, 0.0)));
                tk.push((i + 1, i, c(-1.0, 0.0)));
            }
        }
        let k = CsrMatrix::from_triplets(n, n, &tk);
        let m = CsrMatrix::from_triplets(n, n, &tm);
        let r1 = subspace_smallest(&k, &m, 4, 42, 1e-10, 50).unwrap();
        let r2 = subspace_smallest(&k, &m, 4, 42, 1e-10, 50).unwrap();
        assert_eq!(r1.values, r2.values, "same seed must give identical values");
    }

    proptest! {
        #[test]
        fn csr_matvec_matches_dense(seed in 0u64..1000) {
            use rand::Rng;
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = 8;
            let mut t = Vec::new();
            for i in 0..n {
                for j in 0..n {
                    if rng.gen::<f64>() < 0.3 {
                        t.push((i, j, c(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)));
                    }
                }
            }
            let a = CsrMatrix::from_triplets(n, n, &t);
            let x: Vec<Complex64> =
                (0..n).map(|_| c(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)).collect();
            let y = a.mul_vec(&x);
            let ad = dense_from(&a);
            let xd = nalgebra::DVector::from_vec(x.clone());
            let yd = &ad * &xd;
            for i in 0..n {
                prop_assert!((y[i] - yd[i]).norm() < 1e-12);
            }
        }

        #[test]
        fn cg_residual_meets_tolerance_on_random_spd(seed in 0u64..200) {
            use rand::Rng;
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = 10;
            // A = Bᴴ B + I is Hermitian positive definite.
            let mut bd = nalgebra::DMatrix::<Complex64>::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    bd[(i, j)] = c(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5);
                }
            }
            let ad = bd.adjoint() * &bd + nalgebra::DMatrix::<Complex64>::identity(n, n);
            let mut t = Vec::new();
            for i in 0..n {
                for j in 0..n {
                    t.push((i, j, ad[(i, j)]));
                }
            }
            let a = CsrMatrix::from_triplets(n, n, &t);
            let b: Vec<Complex64> =
                (0..n).map(|_| c(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)).collect();
            let (x, rep) = cg(&a, &b, 1e-10, 2000);
            prop_assert!(rep.converged);
            let r = a.mul_vec(&x);
            let res: f64 = r.iter().zip(&b).map(|(ri, bi)| (ri - bi).norm_sqr()).sum::<f64>().sqrt();
            let bn: f64 = b.iter().map(|bi| bi.norm_sqr()).sum::<f64>().sqrt();
            prop_assert!(res / bn < 1e-9);
        }
    }
}
