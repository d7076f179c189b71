//! Sparse linear algebra for the concentration and Poisson systems.
//!
//! Matrices are stored in compressed sparse row form. The Krylov solvers keep a
//! fixed iteration and summation order so identical inputs reproduce
//! bit-identical outputs.

use std::fmt;

use crate::error::{Error, Result};

/// Relative residual tolerance used for every solve unless configured otherwise.
pub const DEFAULT_TOL: f64 = 1e-12;

/// Right-hand sides below this norm are treated as exactly zero.
const TINY_RHS: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a matrix from unsorted triplets; duplicate entries are summed.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for &(r, c, v) in triplets {
            if r >= n || c >= n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: r.max(c) + 1,
                });
            }
            rows[r].push((c, v));
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|&(c, _)| c);
            let mut k = 0;
            while k < row.len() {
                let c = row[k].0;
                let mut v = 0.0;
                while k < row.len() && row[k].0 == c {
                    v += row[k].1;
                    k += 1;
                }
                col_idx.push(c);
                values.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        Ok(Self {
            n,
            row_ptr,
            col_idx,
            values,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// `(column, value)` pairs of row `r`.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.row_ptr[r], self.row_ptr[r + 1]);
        self.col_idx[a..b]
            .iter()
            .copied()
            .zip(self.values[a..b].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.row(r).find(|&(cc, _)| cc == c).map_or(0.0, |(_, v)| v)
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|r| self.get(r, r)).collect()
    }

    pub fn max_row_nnz(&self) -> usize {
        self.row_ptr
            .windows(2)
            .map(|w| w[1] - w[0])
            .max()
            .unwrap_or(0)
    }

    pub fn to_dense(&self) -> dense::DenseMatrix {
        let mut m = dense::DenseMatrix::zeros(self.n);
        for r in 0..self.n {
            for (c, v) in self.row(r) {
                m[(r, c)] += v;
            }
        }
        m
    }

    fn with_diagonal_shift(&self, rel: f64) -> CsrMatrix {
        let mut m = self.clone();
        for r in 0..m.n {
            for k in m.row_ptr[r]..m.row_ptr[r + 1] {
                if m.col_idx[k] == r {
                    m.values[k] *= 1.0 + rel;
                }
            }
        }
        m
    }

    fn matvec_into(&self, x: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            let (a, b) = (self.row_ptr[r], self.row_ptr[r + 1]);
            let mut s = 0.0;
            for k in a..b {
                s += self.values[k] * x[self.col_idx[k]];
            }
            *o = s;
        }
    }
}

/// Incomplete LU factorization with the sparsity pattern of the matrix.
///
/// Exists without breakdown for M-matrices; used as the preconditioner of
/// the nonsymmetric solver.
#[derive(Debug, Clone)]
pub struct Ilu0 {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    /// Strict lower part holds `L` (unit diagonal implied), the rest `U`.
    values: Vec<f64>,
    diag_pos: Vec<usize>,
}

impl Ilu0 {
    /// Returns `None` on a missing or vanishing pivot.
    pub fn new(a: &CsrMatrix) -> Option<Self> {
        let n = a.n;
        let mut values = a.values.clone();
        let mut diag_pos = vec![usize::MAX; n];
        for r in 0..n {
            for k in a.row_ptr[r]..a.row_ptr[r + 1] {
                if a.col_idx[k] == r {
                    diag_pos[r] = k;
                }
            }
            if diag_pos[r] == usize::MAX {
                return None;
            }
        }
        let mut marker = vec![usize::MAX; n];
        for i in 0..n {
            let (lo, hi) = (a.row_ptr[i], a.row_ptr[i + 1]);
            for k in lo..hi {
                marker[a.col_idx[k]] = k;
            }
            for p in lo..hi {
                let k = a.col_idx[p];
                if k >= i {
                    break;
                }
                let pivot = values[diag_pos[k]];
                if pivot == 0.0 || !pivot.is_finite() {
                    return None;
                }
                let lik = values[p] / pivot;
                values[p] = lik;
                for q in diag_pos[k] + 1..a.row_ptr[k + 1] {
                    let m = marker[a.col_idx[q]];
                    if m != usize::MAX {
                        values[m] -= lik * values[q];
                    }
                }
            }
            for k in lo..hi {
                marker[a.col_idx[k]] = usize::MAX;
            }
            let d = values[diag_pos[i]];
            if d == 0.0 || !d.is_finite() {
                return None;
            }
        }
        Some(Self {
            n,
            row_ptr: a.row_ptr.clone(),
            col_idx: a.col_idx.clone(),
            values,
            diag_pos,
        })
    }

    /// `out = (LU)^{-1} r`.
    pub fn apply(&self, r: &[f64], out: &mut [f64]) {
        for i in 0..self.n {
            let mut s = r[i];
            for k in self.row_ptr[i]..self.diag_pos[i] {
                s -= self.values[k] * out[self.col_idx[k]];
            }
            out[i] = s;
        }
        for i in (0..self.n).rev() {
            let mut s = out[i];
            for k in self.diag_pos[i] + 1..self.row_ptr[i + 1] {
                s -= self.values[k] * out[self.col_idx[k]];
            }
            out[i] = s / self.values[self.diag_pos[i]];
        }
    }
}

enum Preconditioner {
    Ilu(Ilu0),
    Jacobi(Vec<f64>),
}

impl Preconditioner {
    fn new(a: &CsrMatrix) -> Self {
        match Ilu0::new(a) {
            Some(ilu) => Preconditioner::Ilu(ilu),
            None => Preconditioner::Jacobi(
                a.diagonal()
                    .iter()
                    .map(|&d| if d != 0.0 { 1.0 / d } else { 1.0 })
                    .collect(),
            ),
        }
    }

    fn apply(&self, r: &[f64], out: &mut [f64]) {
        match self {
            Preconditioner::Ilu(ilu) => ilu.apply(r, out),
            Preconditioner::Jacobi(inv) => {
                for ((o, ri), d) in out.iter_mut().zip(r).zip(inv) {
                    *o = ri * d;
                }
            }
        }
    }
}

pub fn matvec(a: &CsrMatrix, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != a.n {
        return Err(Error::DimensionMismatch {
            expected: a.n,
            got: x.len(),
        });
    }
    let mut out = vec![0.0; a.n];
    a.matvec_into(x, &mut out);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    pub final_relative_residual: f64,
    pub converged: bool,
}

impl fmt::Display for SolveStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} iterations, relative residual {:e}, converged={}",
            self.iterations, self.final_relative_residual, self.converged
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub tol: f64,
    /// Iteration cap; `None` means `10 * n`.
    pub maxit: Option<usize>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            maxit: None,
        }
    }
}

impl SolverOptions {
    pub fn maxit_for(&self, n: usize) -> usize {
        self.maxit.unwrap_or(10 * n).max(1)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `||b - a x|| / ||b||`, recomputed from scratch.
pub fn relative_residual(a: &CsrMatrix, x: &[f64], b: &[f64]) -> f64 {
    let mut ax = vec![0.0; a.n];
    a.matvec_into(x, &mut ax);
    let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    let nb = norm2(b);
    if nb < TINY_RHS {
        norm2(&r)
    } else {
        norm2(&r) / nb
    }
}

/// Normwise backward error `‖b − Ax‖ / (‖|A||x|‖ + ‖b‖)`; the floor that
/// rounding alone leaves on badly scaled systems is a few machine epsilons.
pub fn backward_error(a: &CsrMatrix, x: &[f64], b: &[f64]) -> f64 {
    let mut r = vec![0.0; a.n];
    a.matvec_into(x, &mut r);
    let mut res = 0.0;
    let mut scale = 0.0;
    for row in 0..a.n {
        let ax_abs: f64 = (a.row_ptr[row]..a.row_ptr[row + 1])
            .map(|k| (a.values[k] * x[a.col_idx[k]]).abs())
            .sum();
        res += (b[row] - r[row]).powi(2);
        scale += (ax_abs + b[row].abs()).powi(2);
    }
    if scale == 0.0 {
        0.0
    } else {
        (res / scale).sqrt()
    }
}

fn check_dims(a: &CsrMatrix, b: &[f64]) -> Result<()> {
    if b.len() != a.n {
        return Err(Error::DimensionMismatch {
            expected: a.n,
            got: b.len(),
        });
    }
    Ok(())
}

/// BiCGSTAB for general nonsingular systems, preconditioned by ILU(0) (Jacobi
/// when the incomplete factorization breaks down).
///
/// Converges when the relative residual reaches `tol`, or, on systems whose
/// scaling puts that out of reach of rounding, when the normwise backward
/// error does. Returns the iterate together with its statistics;
/// non-convergence is an error carrying the final statistics.
pub fn solve_nonsymmetric(
    a: &CsrMatrix,
    b: &[f64],
    opts: SolverOptions,
) -> Result<(Vec<f64>, SolveStats)> {
    solve_nonsymmetric_from(a, b, None, opts)
}

/// As [`solve_nonsymmetric`], starting from `x0` when given.
pub fn solve_nonsymmetric_from(
    a: &CsrMatrix,
    b: &[f64],
    x0: Option<&[f64]>,
    opts: SolverOptions,
) -> Result<(Vec<f64>, SolveStats)> {
    check_dims(a, b)?;
    let n = a.n;
    if norm2(b) < TINY_RHS {
        return Ok((
            vec![0.0; n],
            SolveStats {
                iterations: 0,
                final_relative_residual: 0.0,
                converged: true,
            },
        ));
    }
    let pre = Preconditioner::new(a);
    let maxit = opts.maxit_for(n);
    let mut x = match x0 {
        Some(x0) => {
            check_dims(a, x0)?;
            x0.to_vec()
        }
        None => {
            let mut x = vec![0.0; n];
            pre.apply(b, &mut x);
            x
        }
    };
    let mut iterations = 0;
    let mut rel = relative_residual(a, &x, b);
    // Recurrence residuals drift from the true one on badly scaled systems;
    // restarting from the current iterate recovers the last digits.
    for _ in 0..=MAX_RESTARTS {
        if rel <= opts.tol || iterations >= maxit {
            break;
        }
        let (x_new, its) = bicgstab_cycle(a, b, &x, &pre, opts.tol, maxit - iterations);
        iterations += its;
        let rel_new = relative_residual(a, &x_new, b);
        if !(rel_new < rel) {
            break;
        }
        x = x_new;
        rel = rel_new;
    }
    let converged = rel <= opts.tol || backward_error(a, &x, b) <= opts.tol;
    let stats = SolveStats {
        iterations,
        final_relative_residual: rel,
        converged,
    };
    if !stats.converged {
        return Err(Error::NotConverged { stats });
    }
    Ok((x, stats))
}

const MAX_RESTARTS: usize = 8;
const SPD_SHIFT: f64 = 1e-4;

fn bicgstab_cycle(
    a: &CsrMatrix,
    b: &[f64],
    x0: &[f64],
    pre: &Preconditioner,
    tol: f64,
    maxit: usize,
) -> (Vec<f64>, usize) {
    let n = a.n;
    let bnorm = norm2(b);
    let mut x = x0.to_vec();
    let mut r = vec![0.0; n];
    a.matvec_into(&x, &mut r);
    for (ri, bi) in r.iter_mut().zip(b) {
        *ri = bi - *ri;
    }
    let r_hat = r.clone();
    let mut p = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut t = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut z = vec![0.0; n];
    let (mut rho_prev, mut alpha, mut omega) = (1.0, 1.0, 1.0);

    let mut iterations = 0;
    let mut rel = norm2(&r) / bnorm;
    while rel > tol && iterations < maxit {
        iterations += 1;
        let rho = dot(&r_hat, &r);
        if rho == 0.0 || !rho.is_finite() {
            break;
        }
        if iterations == 1 {
            p.copy_from_slice(&r);
        } else {
            let beta = (rho / rho_prev) * (alpha / omega);
            for k in 0..n {
                p[k] = r[k] + beta * (p[k] - omega * v[k]);
            }
        }
        pre.apply(&p, &mut y);
        a.matvec_into(&y, &mut v);
        let rv = dot(&r_hat, &v);
        if rv == 0.0 {
            break;
        }
        alpha = rho / rv;
        for k in 0..n {
            s[k] = r[k] - alpha * v[k];
        }
        if norm2(&s) / bnorm <= tol {
            for k in 0..n {
                x[k] += alpha * y[k];
            }
            break;
        }
        pre.apply(&s, &mut z);
        a.matvec_into(&z, &mut t);
        let tt = dot(&t, &t);
        if tt == 0.0 {
            break;
        }
        omega = dot(&t, &s) / tt;
        for k in 0..n {
            x[k] += alpha * y[k] + omega * z[k];
            r[k] = s[k] - omega * t[k];
        }
        rho_prev = rho;
        rel = norm2(&r) / bnorm;
        if omega == 0.0 {
            break;
        }
    }
    (x, iterations)
}

/// Conjugate gradients for symmetric positive (semi)definite systems.
///
/// With `constant_nullspace`, the matrix is assumed singular with the constant
/// vector as its kernel: `b` must be orthogonal to constants (relative to
/// `tol_compat`) and the returned solution has zero mean.
pub fn solve_spd(
    a: &CsrMatrix,
    b: &[f64],
    opts: SolverOptions,
    constant_nullspace: bool,
) -> Result<(Vec<f64>, SolveStats)> {
    check_dims(a, b)?;
    let n = a.n;
    let mut rhs = b.to_vec();
    if constant_nullspace {
        let mean = rhs.iter().sum::<f64>() / n as f64;
        let scale = rhs.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let tol = 1e-10 * scale;
        if mean.abs() > tol {
            return Err(Error::IncompatibleRhs { mean, tol });
        }
        rhs.iter_mut().for_each(|v| *v -= mean);
    }
    let bnorm = norm2(&rhs);
    if bnorm < TINY_RHS {
        return Ok((
            vec![0.0; n],
            SolveStats {
                iterations: 0,
                final_relative_residual: 0.0,
                converged: true,
            },
        ));
    }
    // On a symmetric matrix ILU(0) is the incomplete Cholesky factorization;
    // the small diagonal shift keeps it away from the zero pivot of a
    // singular operator.
    let pre = Preconditioner::new(&a.with_diagonal_shift(SPD_SHIFT));
    let maxit = opts.maxit_for(n);
    let mut x = vec![0.0; n];
    let mut iterations = 0;
    let mut rel = 1.0;
    for _ in 0..=MAX_RESTARTS {
        if rel <= opts.tol || iterations >= maxit {
            break;
        }
        let (x_new, its) = cg_cycle(
            a,
            &rhs,
            &x,
            &pre,
            constant_nullspace,
            opts.tol,
            maxit - iterations,
        );
        iterations += its;
        let rel_new = relative_residual(a, &x_new, &rhs);
        if !(rel_new < rel) {
            break;
        }
        x = x_new;
        rel = rel_new;
    }
    let stats = SolveStats {
        iterations,
        final_relative_residual: rel,
        converged: rel <= opts.tol,
    };
    if !stats.converged {
        return Err(Error::NotConverged { stats });
    }
    Ok((x, stats))
}

fn project_mean(v: &mut [f64]) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= m);
}

fn cg_cycle(
    a: &CsrMatrix,
    rhs: &[f64],
    x0: &[f64],
    pre: &Preconditioner,
    constant_nullspace: bool,
    tol: f64,
    maxit: usize,
) -> (Vec<f64>, usize) {
    let n = a.n;
    let bnorm = norm2(rhs);
    let project = |v: &mut [f64]| {
        if constant_nullspace {
            project_mean(v);
        }
    };
    let mut x = x0.to_vec();
    let mut r = vec![0.0; n];
    a.matvec_into(&x, &mut r);
    for (ri, bi) in r.iter_mut().zip(rhs) {
        *ri = bi - *ri;
    }
    let mut z = vec![0.0; n];
    pre.apply(&r, &mut z);
    project(&mut z);
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let mut iterations = 0;
    let mut rel = norm2(&r) / bnorm;
    while rel > tol && iterations < maxit {
        iterations += 1;
        a.matvec_into(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            break;
        }
        let alpha = rz / pap;
        for k in 0..n {
            x[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        rel = norm2(&r) / bnorm;
        pre.apply(&r, &mut z);
        project(&mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for k in 0..n {
            p[k] = z[k] + beta * p[k];
        }
    }
    project(&mut x);
    (x, iterations)
}

/// Dense reference linear algebra used as an independent oracle in tests.
pub mod dense {
    use std::ops::{Index, IndexMut};

    #[derive(Debug, Clone, PartialEq)]
    pub struct DenseMatrix {
        pub n: usize,
        pub data: Vec<f64>,
    }

    impl DenseMatrix {
        pub fn zeros(n: usize) -> Self {
            Self {
                n,
                data: vec![0.0; n * n],
            }
        }

        pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
            (0..self.n)
                .map(|r| (0..self.n).map(|c| self[(r, c)] * x[c]).sum())
                .collect()
        }

        /// Gaussian elimination with partial pivoting. `None` if singular.
        pub fn solve(&self, b: &[f64]) -> Option<Vec<f64>> {
            let n = self.n;
            let mut a = self.data.clone();
            let mut x = b.to_vec();
            for col in 0..n {
                let piv = (col..n)
                    .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))?;
                if a[piv * n + col] == 0.0 {
                    return None;
                }
                if piv != col {
                    for k in 0..n {
                        a.swap(piv * n + k, col * n + k);
                    }
                    x.swap(piv, col);
                }
                for row in col + 1..n {
                    let f = a[row * n + col] / a[col * n + col];
                    if f != 0.0 {
                        for k in col..n {
                            a[row * n + k] -= f * a[col * n + k];
                        }
                        x[row] -= f * x[col];
                    }
                }
            }
            for row in (0..n).rev() {
                let mut s = x[row];
                for k in row + 1..n {
                    s -= a[row * n + k] * x[k];
                }
                x[row] = s / a[row * n + row];
            }
            Some(x)
        }

        pub fn inverse(&self) -> Option<DenseMatrix> {
            let n = self.n;
            let mut inv = DenseMatrix::zeros(n);
            for c in 0..n {
                let mut e = vec![0.0; n];
                e[c] = 1.0;
                let col = self.solve(&e)?;
                for r in 0..n {
                    inv[(r, c)] = col[r];
                }
            }
            Some(inv)
        }
    }

    impl Index<(usize, usize)> for DenseMatrix {
        type Output = f64;
        fn index(&self, (r, c): (usize, usize)) -> &f64 {
            &self.data[r * self.n + c]
        }
    }

    impl IndexMut<(usize, usize)> for DenseMatrix {
        fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
            &mut self.data[r * self.n + c]
        }
    }
}
