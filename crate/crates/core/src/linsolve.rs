//! Preconditioned conjugate gradients (Jacobi or incomplete Cholesky) and
//! the rigid-mode constrained solve used by pure-traction elasticity.

use log::debug;
use nalgebra::{DMatrix, DVector};

use crate::fem::{dot, norm2, SparseMatrix};

pub const DEFAULT_TOL: f64 = 1e-10;

/// Relative size of the rigid component of a load above which it is rejected.
pub const COMPATIBILITY_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    /// ‖b − Ax‖ / ‖b‖ (or ‖b − Ax‖ when b = 0)
    pub residual: f64,
    pub converged: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum SolveError {
    #[error("dimension mismatch: operator is {rows}x{cols}, vector has {len}")]
    Dimension { rows: usize, cols: usize, len: usize },
    #[error("operator is not flagged symmetric positive definite")]
    NotSpd,
    #[error("operator is not symmetric")]
    Nonsymmetric,
    #[error("non-finite value encountered at iteration {0}")]
    Breakdown(usize),
    #[error("load has a rigid-mode component of relative size {0:.3e}")]
    Incompatible(f64),
    #[error("constraint functionals are rank deficient")]
    RankDeficient,
    #[error("solver did not converge: {0:?}")]
    NotConverged(SolveReport),
}

/// Something that can be applied to a vector and exposes its diagonal.
pub trait LinearOperator {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64], y: &mut [f64]);
    fn diagonal(&self) -> Vec<f64>;

    /// The assembled matrix, when there is one; needed for factorizations.
    fn as_sparse(&self) -> Option<&SparseMatrix> {
        None
    }
}

impl LinearOperator for SparseMatrix {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.mul_vec_into(x, y)
    }

    fn diagonal(&self) -> Vec<f64> {
        SparseMatrix::diagonal(self)
    }

    fn as_sparse(&self) -> Option<&SparseMatrix> {
        Some(self)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PrecondKind {
    #[default]
    Jacobi,
    /// IC(0); falls back to Jacobi for operators without an assembled matrix
    IncompleteCholesky,
}

/// Zero-fill incomplete Cholesky factor L (lower triangle of A's pattern,
/// diagonal stored last in each row), so that LLᵀ ≈ A.
#[derive(Clone, Debug)]
pub struct IncompleteCholesky {
    offsets: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    /// relative diagonal shift that was needed for positive pivots
    pub shift: f64,
}

impl IncompleteCholesky {
    /// Factors A, retrying with growing diagonal shifts A + α·diag(A) when a
    /// pivot is not positive. `None` if even the largest shift fails.
    pub fn new(a: &SparseMatrix) -> Option<Self> {
        [0.0, 1e-3, 1e-2, 0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 1.0, 2.0, 5.0]
            .into_iter()
            .find_map(|shift| Self::factor(a, shift))
    }

    fn factor(a: &SparseMatrix, shift: f64) -> Option<Self> {
        let n = a.nrows();
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        let mut cols = Vec::new();
        let mut vals: Vec<f64> = Vec::new();
        let mut w = vec![0.0; n];
        for i in 0..n {
            let (ac, av) = a.row(i);
            let start = cols.len();
            let mut diag = 0.0;
            for (&j, &v) in ac.iter().zip(av) {
                if j < i {
                    cols.push(j);
                    w[j] = v;
                } else if j == i {
                    diag = v * (1.0 + shift);
                }
            }
            let mut d = diag;
            for p in start..cols.len() {
                let k = cols[p];
                let (kc, kv) = (&cols[offsets[k]..offsets[k + 1] - 1], &vals[offsets[k]..offsets[k + 1]]);
                let mut s = w[k];
                for (&j, &l) in kc.iter().zip(kv) {
                    s -= w[j] * l;
                }
                let lik = s / kv[kv.len() - 1];
                w[k] = lik;
                d -= lik * lik;
            }
            if !(d > 0.0) || !d.is_finite() {
                return None;
            }
            for p in start..cols.len() {
                vals.push(w[cols[p]]);
                w[cols[p]] = 0.0;
            }
            cols.push(i);
            vals.push(d.sqrt());
            offsets.push(cols.len());
        }
        Some(Self {
            offsets,
            cols,
            vals,
            shift,
        })
    }

    /// z = (LLᵀ)⁻¹ r
    pub fn apply(&self, r: &[f64], z: &mut [f64]) {
        let n = self.offsets.len() - 1;
        for i in 0..n {
            let (lo, hi) = (self.offsets[i], self.offsets[i + 1] - 1);
            let mut s = r[i];
            for p in lo..hi {
                s -= self.vals[p] * z[self.cols[p]];
            }
            z[i] = s / self.vals[hi];
        }
        for i in (0..n).rev() {
            let (lo, hi) = (self.offsets[i], self.offsets[i + 1] - 1);
            z[i] /= self.vals[hi];
            let zi = z[i];
            for p in lo..hi {
                z[self.cols[p]] -= self.vals[p] * zi;
            }
        }
    }
}

/// A built preconditioner; reusable across solves with the same matrix.
pub enum Preconditioner {
    Jacobi(Vec<f64>),
    Cholesky(IncompleteCholesky),
}

impl Preconditioner {
    pub fn build<A: LinearOperator + ?Sized>(a: &A, kind: PrecondKind) -> Self {
        if kind == PrecondKind::IncompleteCholesky {
            if let Some(ic) = a.as_sparse().and_then(IncompleteCholesky::new) {
                if ic.shift > 0.0 {
                    debug!("incomplete Cholesky needed diagonal shift {}", ic.shift);
                }
                return Preconditioner::Cholesky(ic);
            }
            debug!("incomplete Cholesky unavailable, using Jacobi");
        }
        Preconditioner::Jacobi(
            a.diagonal()
                .into_iter()
                .map(|d| if d > 0.0 { 1.0 / d } else { 1.0 })
                .collect(),
        )
    }

    pub fn apply(&self, r: &[f64], z: &mut [f64]) {
        match self {
            Preconditioner::Jacobi(inv) => {
                for ((zi, ri), di) in z.iter_mut().zip(r).zip(inv) {
                    *zi = ri * di;
                }
            }
            Preconditioner::Cholesky(ic) => ic.apply(r, z),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CgOptions {
    pub tol: f64,
    /// Defaults to 20·n.
    pub maxit: Option<usize>,
    pub precond: PrecondKind,
}

impl Default for CgOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            maxit: None,
            precond: PrecondKind::Jacobi,
        }
    }
}

impl CgOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self { tol, ..Self::default() }
    }
}

/// CG on a sparse matrix flagged SPD. Non-convergence is reported, not raised.
pub fn cg(
    a: &SparseMatrix,
    b: &[f64],
    x0: Option<&[f64]>,
    tol: f64,
    maxit: Option<usize>,
) -> Result<(Vec<f64>, SolveReport), SolveError> {
    if !a.is_symmetric() {
        return Err(SolveError::Nonsymmetric);
    }
    if !a.is_spd() {
        return Err(SolveError::NotSpd);
    }
    pcg(
        a,
        b,
        x0,
        CgOptions {
            tol,
            maxit,
            ..CgOptions::default()
        },
        None,
    )
}

/// Preconditioned CG for symmetric positive (semi)definite operators with a
/// consistent right-hand side. `monitor` sees every iterate, starting with x₀.
pub fn pcg<A: LinearOperator + ?Sized>(
    a: &A,
    b: &[f64],
    x0: Option<&[f64]>,
    opts: CgOptions,
    monitor: Option<&mut dyn FnMut(usize, &[f64])>,
) -> Result<(Vec<f64>, SolveReport), SolveError> {
    let pre = Preconditioner::build(a, opts.precond);
    pcg_with(a, b, x0, opts, &pre, monitor)
}

fn pcg_with<A: LinearOperator + ?Sized>(
    a: &A,
    b: &[f64],
    x0: Option<&[f64]>,
    opts: CgOptions,
    pre: &Preconditioner,
    mut monitor: Option<&mut dyn FnMut(usize, &[f64])>,
) -> Result<(Vec<f64>, SolveReport), SolveError> {
    let n = a.dim();
    if b.len() != n || x0.is_some_and(|x| x.len() != n) {
        return Err(SolveError::Dimension {
            rows: n,
            cols: n,
            len: if b.len() != n { b.len() } else { x0.unwrap().len() },
        });
    }
    let maxit = opts.maxit.unwrap_or(20 * n.max(1));

    let mut x = x0.map_or_else(|| vec![0.0; n], |x| x.to_vec());
    if let Some(m) = monitor.as_mut() {
        m(0, &x);
    }
    let bnorm = norm2(b);
    let mut r = vec![0.0; n];
    a.apply(&x, &mut r);
    for (ri, bi) in r.iter_mut().zip(b) {
        *ri = bi - *ri;
    }
    let scale = if bnorm > 0.0 { bnorm } else { 1.0 };
    let mut rnorm = norm2(&r);
    if rnorm <= opts.tol * scale {
        return Ok((
            x,
            SolveReport {
                iterations: 0,
                residual: rnorm / scale,
                converged: true,
            },
        ));
    }
    let mut z = vec![0.0; n];
    pre.apply(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    for it in 1..=maxit {
        a.apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        let alpha = rz / pap;
        if !alpha.is_finite() {
            return Err(SolveError::Breakdown(it));
        }
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if let Some(m) = monitor.as_mut() {
            m(it, &x);
        }
        rnorm = norm2(&r);
        if !rnorm.is_finite() {
            return Err(SolveError::Breakdown(it));
        }
        if rnorm <= opts.tol * scale {
            return Ok((
                x,
                SolveReport {
                    iterations: it,
                    residual: rnorm / scale,
                    converged: true,
                },
            ));
        }
        pre.apply(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Ok((
        x,
        SolveReport {
            iterations: maxit,
            residual: rnorm / scale,
            converged: false,
        },
    ))
}

/// CG that turns non-convergence into an error.
pub fn solve_spd(
    a: &SparseMatrix,
    b: &[f64],
    x0: Option<&[f64]>,
    tol: f64,
) -> Result<(Vec<f64>, SolveReport), SolveError> {
    let (x, rep) = cg(a, b, x0, tol, None)?;
    if !rep.converged {
        return Err(SolveError::NotConverged(rep));
    }
    Ok((x, rep))
}

/// Constraint functionals `rows` (Cx = 0) and a basis of rigid modes that the
/// load must be orthogonal to. If the operator annihilates the modes they are
/// also its kernel.
#[derive(Clone, Debug)]
pub struct Constraints {
    pub rows: Vec<Vec<f64>>,
    pub modes: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct ConstrainedSolution {
    pub x: Vec<f64>,
    pub multipliers: Vec<f64>,
    pub report: SolveReport,
}

impl Constraints {
    /// max over rows of |cₖᵀx| / ‖cₖ‖.
    pub fn residual(&self, x: &[f64]) -> f64 {
        self.rows
            .iter()
            .map(|c| dot(c, x).abs() / norm2(c))
            .fold(0.0, f64::max)
    }

    /// Rigid component of b relative to ‖b‖, using an orthonormal basis of
    /// the modes.
    pub fn incompatibility(&self, b: &[f64]) -> f64 {
        let bnorm = norm2(b);
        if bnorm == 0.0 {
            return 0.0;
        }
        let q = orthonormalize(&self.modes);
        q.iter().map(|qk| dot(qk, b).powi(2)).sum::<f64>().sqrt() / bnorm
    }

    fn block(&self) -> Result<DMatrix<f64>, SolveError> {
        let m = self.rows.len();
        if self.modes.len() != m {
            return Err(SolveError::RankDeficient);
        }
        let cr = DMatrix::from_fn(m, m, |i, j| dot(&self.rows[i], &self.modes[j]));
        let sv = cr.clone().singular_values();
        let (lo, hi) = sv.iter().fold((f64::INFINITY, 0.0f64), |(l, h), &s| (l.min(s), h.max(s)));
        if m > 0 && !(lo > 1e-12 * hi) {
            return Err(SolveError::RankDeficient);
        }
        Ok(cr)
    }
}

/// Euclidean Gram–Schmidt (twice, for stability).
pub fn orthonormalize(vs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(vs.len());
    for v in vs {
        let mut w = v.clone();
        for _ in 0..2 {
            for q in &out {
                let c = dot(q, &w);
                for (wi, qi) in w.iter_mut().zip(q) {
                    *wi -= c * qi;
                }
            }
        }
        let nrm = norm2(&w);
        if nrm > 0.0 {
            for wi in &mut w {
                *wi /= nrm;
            }
            out.push(w);
        }
    }
    out
}

fn annihilates(a: &SparseMatrix, modes: &[Vec<f64>]) -> bool {
    let amax = a.max_abs();
    modes.iter().all(|r| {
        let ar = a.mul_vec(r);
        norm2(&ar) <= 1e-9 * amax * norm2(r)
    })
}

/// Solves the saddle system A x + Cᵀλ = b, C x = 0.
///
/// When A annihilates the rigid modes R (pure traction) the multipliers are
/// λ = (CR)⁻ᵀ Rᵀ b, the singular consistent system is solved by CG and the
/// kernel component is removed with x ← x − R (CR)⁻¹ C x. Otherwise A is SPD
/// and the multiplier block is eliminated through its Schur complement.
pub fn solve_constrained(
    a: &SparseMatrix,
    b: &[f64],
    c: &Constraints,
    x0: Option<&[f64]>,
    tol: f64,
) -> Result<ConstrainedSolution, SolveError> {
    solve_constrained_with(a, b, c, x0, CgOptions::with_tol(tol))
}

/// [`solve_constrained`] with explicit CG options; the preconditioner is
/// built once and shared by all inner solves.
pub fn solve_constrained_with(
    a: &SparseMatrix,
    b: &[f64],
    c: &Constraints,
    x0: Option<&[f64]>,
    opts: CgOptions,
) -> Result<ConstrainedSolution, SolveError> {
    let pre = Preconditioner::build(a, opts.precond);
    solve_constrained_preconditioned(a, b, c, x0, opts, &pre)
}

/// [`solve_constrained_with`] with a preconditioner built by the caller;
/// `opts.precond` is ignored.
pub fn solve_constrained_preconditioned(
    a: &SparseMatrix,
    b: &[f64],
    c: &Constraints,
    x0: Option<&[f64]>,
    opts: CgOptions,
    pre: &Preconditioner,
) -> Result<ConstrainedSolution, SolveError> {
    let n = a.nrows();
    if b.len() != n || c.rows.iter().chain(&c.modes).any(|v| v.len() != n) {
        return Err(SolveError::Dimension {
            rows: n,
            cols: a.ncols(),
            len: b.len(),
        });
    }
    if !a.is_symmetric() {
        return Err(SolveError::Nonsymmetric);
    }
    let cr = c.block()?;
    let m = c.rows.len();
    let inc = c.incompatibility(b);
    if inc > COMPATIBILITY_TOL {
        return Err(SolveError::Incompatible(inc));
    }
    let lu = cr.clone().lu();

    if annihilates(a, &c.modes) {
        let rtb = DVector::from_fn(m, |k, _| dot(&c.modes[k], b));
        let lam = cr.transpose().lu().solve(&rtb).ok_or(SolveError::RankDeficient)?;
        let mut rhs = b.to_vec();
        for k in 0..m {
            for (ri, ck) in rhs.iter_mut().zip(&c.rows[k]) {
                *ri -= lam[k] * ck;
            }
        }
        let (mut x, report) = pcg_with(a, &rhs, x0, opts, pre, None)?;
        if !report.converged {
            return Err(SolveError::NotConverged(report));
        }
        remove_kernel(&mut x, c, &lu)?;
        return Ok(ConstrainedSolution {
            x,
            multipliers: lam.iter().copied().collect(),
            report,
        });
    }

    // Schur complement S = C A⁻¹ Cᵀ
    let solve = |rhs: &[f64], guess: Option<&[f64]>| -> Result<(Vec<f64>, SolveReport), SolveError> {
        let (x, rep) = pcg_with(a, rhs, guess, opts, pre, None)?;
        if !rep.converged {
            return Err(SolveError::NotConverged(rep));
        }
        Ok((x, rep))
    };
    let (y, mut report) = solve(b, x0)?;
    let mut z = Vec::with_capacity(m);
    for row in &c.rows {
        let (zk, rep) = solve(row, None)?;
        report.iterations += rep.iterations;
        report.residual = report.residual.max(rep.residual);
        z.push(zk);
    }
    let s = DMatrix::from_fn(m, m, |i, j| dot(&c.rows[i], &z[j]));
    let cy = DVector::from_fn(m, |i, _| dot(&c.rows[i], &y));
    let lam = s.lu().solve(&cy).ok_or(SolveError::RankDeficient)?;
    let mut x = y;
    for k in 0..m {
        for (xi, zk) in x.iter_mut().zip(&z[k]) {
            *xi -= lam[k] * zk;
        }
    }
    Ok(ConstrainedSolution {
        x,
        multipliers: lam.iter().copied().collect(),
        report,
    })
}

/// x ← x − R (CR)⁻¹ C x, applied twice to clean up rounding.
fn remove_kernel(x: &mut [f64], c: &Constraints, lu: &nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>) -> Result<(), SolveError> {
    let m = c.rows.len();
    for _ in 0..2 {
        let cx = DVector::from_fn(m, |k, _| dot(&c.rows[k], x));
        let coef = lu.solve(&cx).ok_or(SolveError::RankDeficient)?;
        for k in 0..m {
            for (xi, rk) in x.iter_mut().zip(&c.modes[k]) {
                *xi -= coef[k] * rk;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::TripletBuilder;
    use approx::assert_relative_eq;

    fn dense_to_sparse(a: &[&[f64]], spd: bool) -> SparseMatrix {
        let n = a.len();
        let mut b = TripletBuilder::new(n, n);
        for i in 0..n {
            for j in 0..n {
                b.add(i, j, a[i][j]);
            }
        }
        b.finalize(true, spd)
    }

    #[test]
    fn identity_solves_in_one_iteration() {
        let a = SparseMatrix::identity(5);
        let b = [1.0, -2.0, 3.0, 0.5, 7.0];
        let (x, rep) = cg(&a, &b, None, 1e-12, None).unwrap();
        assert!(rep.converged && rep.iterations <= 1);
        for (xi, bi) in x.iter().zip(&b) {
            assert_relative_eq!(xi, bi, epsilon = 1e-14);
        }
    }

    #[test]
    fn two_by_two_system() {
        let a = dense_to_sparse(&[&[4.0, 1.0], &[1.0, 3.0]], true);
        let (x, rep) = cg(&a, &[1.0, 2.0], None, 1e-12, None).unwrap();
        assert!(rep.converged);
        assert_relative_eq!(x[0], 1.0 / 11.0, epsilon = 1e-12);
        assert_relative_eq!(x[1], 7.0 / 11.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_rhs_gives_zero_in_zero_iterations() {
        let a = dense_to_sparse(&[&[4.0, 1.0], &[1.0, 3.0]], true);
        let (x, rep) = cg(&a, &[0.0, 0.0], None, 1e-12, None).unwrap();
        assert_eq!(rep.iterations, 0);
        assert_eq!(x, vec![0.0, 0.0]);
    }

    #[test]
    fn rejects_unflagged_and_nonsymmetric() {
        let a = dense_to_sparse(&[&[4.0, 1.0], &[1.0, 3.0]], false);
        assert!(matches!(cg(&a, &[1.0, 1.0], None, 1e-10, None), Err(SolveError::NotSpd)));
        let mut b = TripletBuilder::new(2, 2);
        b.add(0, 0, 1.0);
        b.add(0, 1, 2.0);
        b.add(1, 1, 1.0);
        let ns = b.finalize(false, true);
        assert!(matches!(cg(&ns, &[1.0, 1.0], None, 1e-10, None), Err(SolveError::Nonsymmetric)));
    }

    #[test]
    fn reports_non_convergence() {
        let n = 50;
        let mut b = TripletBuilder::new(n, n);
        for i in 0..n {
            b.add(i, i, 2.0 + i as f64);
            if i + 1 < n {
                b.add(i, i + 1, -1.0);
                b.add(i + 1, i, -1.0);
            }
        }
        let a = b.finalize(true, true);
        let rhs = vec![1.0; n];
        let (_, rep) = cg(&a, &rhs, None, 1e-14, Some(2)).unwrap();
        assert!(!rep.converged);
        assert_eq!(rep.iterations, 2);
    }

    #[test]
    fn nan_is_breakdown() {
        let a = dense_to_sparse(&[&[4.0, 1.0], &[1.0, 3.0]], true);
        assert!(matches!(
            cg(&a, &[f64::NAN, 1.0], None, 1e-12, None),
            Err(SolveError::Breakdown(_))
        ));
    }

    fn laplacian_1d(n: usize) -> SparseMatrix {
        // pure Neumann path graph Laplacian, kernel = constants
        let mut b = TripletBuilder::new(n, n);
        for i in 0..n - 1 {
            b.add(i, i, 1.0);
            b.add(i + 1, i + 1, 1.0);
            b.add(i, i + 1, -1.0);
            b.add(i + 1, i, -1.0);
        }
        b.finalize(true, false)
    }

    #[test]
    fn constrained_singular_system() {
        let n = 12;
        let a = laplacian_1d(n);
        let c = Constraints {
            rows: vec![vec![1.0; n]],
            modes: vec![vec![1.0; n]],
        };
        let b: Vec<f64> = (0..n).map(|i| i as f64 - 5.5).collect();
        let sol = solve_constrained(&a, &b, &c, None, 1e-12).unwrap();
        assert!(c.residual(&sol.x) < 1e-12 * norm2(&sol.x));
        let ax = a.mul_vec(&sol.x);
        for (u, v) in ax.iter().zip(&b) {
            assert!((u - v).abs() < 1e-9);
        }
        assert!(sol.multipliers[0].abs() < 1e-14);
        let shifted: Vec<f64> = vec![3.0; n];
        let sol2 = solve_constrained(&a, &b, &c, Some(&shifted), 1e-12).unwrap();
        for (u, v) in sol.x.iter().zip(&sol2.x) {
            assert!((u - v).abs() < 1e-9 * norm2(&sol.x));
        }
    }

    #[test]
    fn constrained_rejects_incompatible_load() {
        let n = 6;
        let a = laplacian_1d(n);
        let c = Constraints {
            rows: vec![vec![1.0; n]],
            modes: vec![vec![1.0; n]],
        };
        assert!(matches!(
            solve_constrained(&a, &[1.0; 6], &c, None, 1e-12),
            Err(SolveError::Incompatible(_))
        ));
        let zero = solve_constrained(&a, &[0.0; 6], &c, None, 1e-12).unwrap();
        assert!(zero.x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constrained_rejects_rank_deficient_rows() {
        let n = 6;
        let a = laplacian_1d(n);
        let c = Constraints {
            rows: vec![vec![0.0; n]],
            modes: vec![vec![1.0; n]],
        };
        assert!(matches!(
            solve_constrained(&a, &[0.0; 6], &c, None, 1e-12),
            Err(SolveError::RankDeficient)
        ));
    }

    #[test]
    fn schur_path_matches_dense_kkt() {
        // SPD operator with one linear constraint
        let a = dense_to_sparse(
            &[&[4.0, 1.0, 0.0], &[1.0, 3.0, 1.0], &[0.0, 1.0, 5.0]],
            true,
        );
        let c = Constraints {
            rows: vec![vec![1.0, 1.0, 1.0]],
            modes: vec![vec![1.0, 1.0, 1.0]],
        };
        let b = [1.0, -2.0, 1.0];
        let sol = solve_constrained(&a, &b, &c, None, 1e-13).unwrap();
        let kkt = DMatrix::from_row_slice(
            4,
            4,
            &[
                4.0, 1.0, 0.0, 1.0, 1.0, 3.0, 1.0, 1.0, 0.0, 1.0, 5.0, 1.0, 1.0, 1.0, 1.0, 0.0,
            ],
        );
        let rhs = DVector::from_row_slice(&[1.0, -2.0, 1.0, 0.0]);
        let exact = kkt.lu().solve(&rhs).unwrap();
        for i in 0..3 {
            assert_relative_eq!(sol.x[i], exact[i], epsilon = 1e-10);
        }
        assert_relative_eq!(sol.multipliers[0], exact[3], epsilon = 1e-10);
    }

    #[test]
    fn a_norm_error_is_monotone() {
        let n = 40;
        let mut b = TripletBuilder::new(n, n);
        for i in 0..n {
            b.add(i, i, 2.5 + (i % 3) as f64);
            if i + 1 < n {
                b.add(i, i + 1, -1.0);
                b.add(i + 1, i, -1.0);
            }
        }
        let a = b.finalize(true, true);
        let rhs: Vec<f64> = (0..n).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
        let (exact, _) = cg(&a, &rhs, None, 1e-15, None).unwrap();
        let mut errs = Vec::new();
        let mut mon = |_: usize, x: &[f64]| {
            let e: Vec<f64> = x.iter().zip(&exact).map(|(a, b)| a - b).collect();
            errs.push(a.bilinear(&e, &e).sqrt());
        };
        pcg(&a, &rhs, None, CgOptions::with_tol(1e-12), Some(&mut mon)).unwrap();
        assert!(errs.len() > 3);
        for w in errs.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-14);
        }
    }

    fn tridiagonal(n: usize) -> SparseMatrix {
        let mut b = TripletBuilder::new(n, n);
        for i in 0..n {
            b.add(i, i, 2.5 + (i % 3) as f64);
            if i + 1 < n {
                b.add(i, i + 1, -1.0);
                b.add(i + 1, i, -1.0);
            }
        }
        b.finalize(true, true)
    }

    #[test]
    fn incomplete_cholesky_is_exact_without_fill() {
        // a tridiagonal factor has no fill, so IC(0) is the full Cholesky
        let n = 9;
        let a = tridiagonal(n);
        let ic = IncompleteCholesky::new(&a).unwrap();
        assert_eq!(ic.shift, 0.0);
        let dense = DMatrix::from_fn(n, n, |i, j| a.get(i, j));
        let r: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let expect = dense.cholesky().unwrap().solve(&DVector::from_column_slice(&r));
        let mut z = vec![0.0; n];
        ic.apply(&r, &mut z);
        for i in 0..n {
            assert!((z[i] - expect[i]).abs() < 1e-13);
        }
        let opts = CgOptions {
            precond: PrecondKind::IncompleteCholesky,
            ..CgOptions::with_tol(1e-12)
        };
        let (_, rep) = pcg(&a, &r, None, opts, None).unwrap();
        assert!(rep.iterations <= 1);
    }

    #[test]
    fn incomplete_cholesky_shifts_indefinite_pivots() {
        // diagonally weak but SPD-looking pattern: pivots fail without a shift
        let a = dense_to_sparse(&[&[1.0, 2.0], &[2.0, 1.0]], true);
        let ic = IncompleteCholesky::new(&a).unwrap();
        assert!(ic.shift > 0.0);
    }

    #[test]
    fn constrained_solve_agrees_across_preconditioners() {
        let n = 12;
        let a = laplacian_1d(n);
        let c = Constraints {
            rows: vec![vec![1.0; n]],
            modes: vec![vec![1.0; n]],
        };
        let b: Vec<f64> = (0..n).map(|i| i as f64 - 5.5).collect();
        let jac = solve_constrained(&a, &b, &c, None, 1e-12).unwrap();
        let opts = CgOptions {
            precond: PrecondKind::IncompleteCholesky,
            ..CgOptions::with_tol(1e-12)
        };
        let ic = solve_constrained_with(&a, &b, &c, None, opts).unwrap();
        for (x, y) in jac.x.iter().zip(&ic.x) {
            assert!((x - y).abs() < 1e-8);
        }
    }
}
