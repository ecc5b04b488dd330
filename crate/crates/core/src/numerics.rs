//! Dense complex linear algebra used by every detector.
//!
//! Matrices are small (at most a few hundred rows), so everything here is a
//! straightforward row-major implementation: Hermitian eigen-decomposition by
//! cyclic Jacobi sweeps, a dominant-eigenvalue power iteration, a truncated
//! SVD built on the Gram matrix, and Cholesky-based Hermitian solves.

use std::ops::{Index, IndexMut};

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Column vector of complex doubles.
pub type ComplexVector = Vec<Complex64>;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// Dense row-major complex matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl ComplexMatrix {
    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<Complex64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Dimension(format!("empty matrix {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if !data.iter().all(|z| z.is_finite()) {
            return Err(Error::NonFinite("matrix entries".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![ZERO; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = ONE;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_real_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = Complex64::new(d, 0.0);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Row-major entries.
    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<Complex64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[Complex64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> ComplexVector {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.is_finite())
    }

    /// `self * x`.
    pub fn mul_vec(&self, x: &[Complex64]) -> ComplexVector {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|i| {
                self.row(i)
                    .iter()
                    .zip(x)
                    .fold(ZERO, |acc, (a, b)| acc + a * b)
            })
            .collect()
    }

    /// `self^H * x`.
    pub fn adjoint_mul_vec(&self, x: &[Complex64]) -> ComplexVector {
        debug_assert_eq!(x.len(), self.rows);
        let mut out = vec![ZERO; self.cols];
        for (i, xi) in x.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += a.conj() * xi;
            }
        }
        out
    }

    pub fn matmul(&self, other: &ComplexMatrix) -> ComplexMatrix {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = ComplexMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == ZERO {
                    continue;
                }
                let orow = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        out
    }

    pub fn adjoint(&self) -> ComplexMatrix {
        ComplexMatrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)].conj())
    }

    /// `self^H * self`.
    pub fn gram(&self) -> ComplexMatrix {
        let n = self.cols;
        let mut g = ComplexMatrix::zeros(n, n);
        for r in 0..self.rows {
            let row = self.row(r);
            for i in 0..n {
                let ai = row[i].conj();
                for j in i..n {
                    g.data[i * n + j] += ai * row[j];
                }
            }
        }
        for i in 0..n {
            g.data[i * n + i].im = 0.0;
            for j in 0..i {
                g.data[i * n + j] = g.data[j * n + i].conj();
            }
        }
        g
    }

    /// `self * self^H`.
    pub fn outer_gram(&self) -> ComplexMatrix {
        let n = self.rows;
        let mut g = ComplexMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = self
                    .row(i)
                    .iter()
                    .zip(self.row(j))
                    .fold(ZERO, |acc, (a, b)| acc + a * b.conj());
                g.data[i * n + j] = v;
                g.data[j * n + i] = v.conj();
            }
            g.data[i * n + i].im = 0.0;
        }
        g
    }

    pub fn frobenius_norm_sqr(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_norm_sqr().sqrt()
    }

    pub fn trace(&self) -> Complex64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn diag_real(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)].re).collect()
    }

    pub fn scale(&self, a: Complex64) -> ComplexMatrix {
        ComplexMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|z| z * a).collect(),
        }
    }

    pub fn scale_real(&self, a: f64) -> ComplexMatrix {
        self.scale(Complex64::new(a, 0.0))
    }

    pub fn add(&self, other: &ComplexMatrix) -> ComplexMatrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        ComplexMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn sub(&self, other: &ComplexMatrix) -> ComplexMatrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        ComplexMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    /// `self + a * I` for square matrices.
    pub fn add_identity(&self, a: f64) -> ComplexMatrix {
        assert!(self.is_square());
        let mut out = self.clone();
        for i in 0..self.rows {
            out[(i, i)] += a;
        }
        out
    }

    /// Real part of the Frobenius inner product `sum conj(self_ij) other_ij`.
    pub fn inner_re(&self, other: &ComplexMatrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.re * b.re + a.im * b.im)
            .sum()
    }
}

impl Index<(usize, usize)> for ComplexMatrix {
    type Output = Complex64;

    fn index(&self, (i, j): (usize, usize)) -> &Complex64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for ComplexMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut Complex64 {
        &mut self.data[i * self.cols + j]
    }
}

/// `sum conj(a_i) b_i`.
pub fn inner(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).fold(ZERO, |acc, (x, y)| acc + x.conj() * y)
}

/// Real part of `sum conj(a_i) b_i`, i.e. the real inner product of the
/// stacked (re, im) vectors.
pub fn inner_re(a: &[Complex64], b: &[Complex64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.re * y.re + x.im * y.im).sum()
}

pub fn norm_sqr(v: &[Complex64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum()
}

pub fn sub_vec(a: &[Complex64], b: &[Complex64]) -> ComplexVector {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Eigen-decomposition of a Hermitian matrix, eigenvalues in descending order
/// and eigenvectors stored as the columns of `vectors`.
#[derive(Clone, Debug)]
pub struct HermitianEigen {
    pub values: Vec<f64>,
    pub vectors: ComplexMatrix,
}

const JACOBI_MAX_SWEEPS: usize = 100;

/// Cyclic Jacobi eigen-decomposition of a Hermitian matrix.
///
/// Only the upper triangle's Hermitian part is trusted; the input is
/// symmetrized before rotating.
pub fn hermitian_eigen(m: &ComplexMatrix) -> Result<HermitianEigen> {
    if !m.is_square() {
        return Err(Error::NotSquare {
            rows: m.rows,
            cols: m.cols,
        });
    }
    if !m.is_finite() {
        return Err(Error::NonFinite("hermitian_eigen input".into()));
    }
    let n = m.rows;
    let mut a = ComplexMatrix::from_fn(n, n, |i, j| (m[(i, j)] + m[(j, i)].conj()) * 0.5);
    let mut v = ComplexMatrix::identity(n);
    let total = a.frobenius_norm_sqr();

    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)].norm_sqr())
            .sum();
        if off <= 1e-30 * total || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                let abs = apq.norm();
                if abs < 1e-300 {
                    continue;
                }
                let phase = apq / abs;
                let app = a[(p, p)].re;
                let aqq = a[(q, q)].re;
                let theta = (aqq - app) / (2.0 * abs);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (theta * theta + 1.0).sqrt())
                } else {
                    -1.0 / (-theta + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                let ph_conj = phase.conj();
                // Columns: A <- A J, V <- V J with J = diag(1, e^{-ia}) R.
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = akp * c - akq * ph_conj * s;
                    a[(k, q)] = akp * s + akq * ph_conj * c;
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = vkp * c - vkq * ph_conj * s;
                    v[(k, q)] = vkp * s + vkq * ph_conj * c;
                }
                // Rows: A <- J^H A.
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = apk * c - aqk * phase * s;
                    a[(q, k)] = apk * s + aqk * phase * c;
                }
                a[(p, q)] = ZERO;
                a[(q, p)] = ZERO;
                a[(p, p)].im = 0.0;
                a[(q, q)].im = 0.0;
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].re.total_cmp(&a[(i, i)].re));
    let values = order.iter().map(|&i| a[(i, i)].re).collect();
    let vectors = ComplexMatrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok(HermitianEigen { values, vectors })
}

/// Default tolerance for [`largest_eigenvalue`].
pub const POWER_TOL: f64 = 1e-8;
/// Default iteration cap for [`largest_eigenvalue`].
pub const POWER_MAX_ITER: usize = 1000;

/// Dominant eigenvalue of a Hermitian PSD matrix by power iteration from the
/// normalized all-ones vector.
///
/// Stops once the eigen-residual `||G v - lambda v||` drops below
/// `tol * lambda`, which bounds the distance of the Rayleigh quotient to an
/// eigenvalue. Non-convergence is reported with the best estimate attached.
pub fn largest_eigenvalue(g: &ComplexMatrix, tol: f64, max_iter: usize) -> Result<f64> {
    if !g.is_square() {
        return Err(Error::NotSquare {
            rows: g.rows,
            cols: g.cols,
        });
    }
    let n = g.rows;
    let mut v = vec![Complex64::new(1.0 / (n as f64).sqrt(), 0.0); n];
    let mut lambda = 0.0;
    for _ in 0..max_iter {
        let w = g.mul_vec(&v);
        lambda = inner(&v, &w).re;
        let residual: f64 = w
            .iter()
            .zip(&v)
            .map(|(wi, vi)| (wi - vi * lambda).norm_sqr())
            .sum::<f64>()
            .sqrt();
        if residual <= tol * lambda.abs() {
            return Ok(lambda);
        }
        let norm = norm_sqr(&w).sqrt();
        if norm == 0.0 {
            // Start vector lies in the null space; G v = 0 exactly.
            return Ok(0.0);
        }
        v = w.into_iter().map(|z| z / norm).collect();
    }
    Err(Error::NotConverged {
        best: lambda,
        iterations: max_iter,
    })
}

/// Relative threshold below which singular values are treated as zero.
pub const SINGULAR_FLOOR: f64 = 1e-12;

/// Thin SVD `H = U diag(sigma) V^H` of a tall matrix.
#[derive(Clone, Debug)]
pub struct SvdFactors {
    /// `N_r x N_t`, orthonormal columns.
    pub u: ComplexMatrix,
    /// Descending, nonnegative, length `N_t`.
    pub sigma: Vec<f64>,
    /// `N_t x N_t` unitary.
    pub v: ComplexMatrix,
}

impl SvdFactors {
    pub fn reconstruct(&self) -> ComplexMatrix {
        let us = ComplexMatrix::from_fn(self.u.rows, self.u.cols, |i, j| self.u[(i, j)] * self.sigma[j]);
        us.matmul(&self.v.adjoint())
    }
}

/// Truncated SVD via the Hermitian eigen-decomposition of `H^H H`, with
/// `U = H V Sigma^+` and zero-singular-value columns of `U` completed
/// orthonormally.
pub fn truncated_svd(h: &ComplexMatrix) -> Result<SvdFactors> {
    let (nr, nt) = (h.rows, h.cols);
    if nr < nt {
        return Err(Error::Dimension(format!(
            "truncated_svd needs rows >= cols, got {nr}x{nt}"
        )));
    }
    if !h.is_finite() {
        return Err(Error::NonFinite("truncated_svd input".into()));
    }
    let eig = hermitian_eigen(&h.gram())?;
    let mut sigma: Vec<f64> = eig.values.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let v = eig.vectors;
    let floor = SINGULAR_FLOOR * sigma[0];

    let hv = h.matmul(&v);
    let mut u = ComplexMatrix::zeros(nr, nt);
    let mut filled = vec![false; nt];
    for k in 0..nt {
        if sigma[k] > floor && sigma[k] > 0.0 {
            for i in 0..nr {
                u[(i, k)] = hv[(i, k)] / sigma[k];
            }
            filled[k] = true;
        } else {
            sigma[k] = 0.0;
        }
    }
    // Modified Gram-Schmidt in singular-value order keeps U orthonormal to
    // working precision; missing columns are completed from the standard basis.
    let mut basis_probe = 0usize;
    for k in 0..nt {
        if filled[k] {
            let mut col = u.column(k);
            orthogonalize_against(&mut col, &u, k);
            let norm = norm_sqr(&col).sqrt();
            for i in 0..nr {
                u[(i, k)] = col[i] / norm;
            }
            continue;
        }
        loop {
            let mut col = vec![ZERO; nr];
            col[basis_probe % nr] = ONE;
            basis_probe += 1;
            orthogonalize_against(&mut col, &u, k);
            orthogonalize_against(&mut col, &u, k);
            let norm = norm_sqr(&col).sqrt();
            if norm > 1e-6 {
                for i in 0..nr {
                    u[(i, k)] = col[i] / norm;
                }
                break;
            }
        }
    }
    Ok(SvdFactors { u, sigma, v })
}

fn orthogonalize_against(col: &mut [Complex64], u: &ComplexMatrix, upto: usize) {
    for j in 0..upto {
        let proj: Complex64 = (0..u.rows).map(|i| u[(i, j)].conj() * col[i]).sum();
        for (i, c) in col.iter_mut().enumerate() {
            *c -= u[(i, j)] * proj;
        }
    }
}

/// Upper bound on the squared Cholesky pivot ratio accepted by
/// [`hermitian_solve`].
pub const MAX_CONDITION: f64 = 1e15;

/// Lower-triangular Cholesky factor `M = L L^H`.
#[derive(Clone, Debug)]
pub struct Cholesky {
    l: ComplexMatrix,
}

impl Cholesky {
    pub fn new(m: &ComplexMatrix) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::NotSquare {
                rows: m.rows,
                cols: m.cols,
            });
        }
        let n = m.rows;
        let mut l = ComplexMatrix::zeros(n, n);
        let (mut dmin, mut dmax) = (f64::INFINITY, 0.0f64);
        for j in 0..n {
            let mut d = m[(j, j)].re;
            for k in 0..j {
                d -= l[(j, k)].norm_sqr();
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite { index: j, pivot: d });
            }
            let ljj = d.sqrt();
            dmin = dmin.min(ljj);
            dmax = dmax.max(ljj);
            l[(j, j)] = Complex64::new(ljj, 0.0);
            for i in (j + 1)..n {
                let mut s = m[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)].conj();
                }
                l[(i, j)] = s / ljj;
            }
        }
        let estimate = (dmax / dmin).powi(2);
        if estimate > MAX_CONDITION {
            return Err(Error::IllConditioned { estimate });
        }
        Ok(Self { l })
    }

    /// Solves `M x = b` for one right-hand side.
    pub fn solve_vec(&self, b: &[Complex64]) -> ComplexVector {
        let n = self.l.rows;
        let mut z = b.to_vec();
        for i in 0..n {
            let mut s = z[i];
            for k in 0..i {
                s -= self.l[(i, k)] * z[k];
            }
            z[i] = s / self.l[(i, i)].re;
        }
        for i in (0..n).rev() {
            let mut s = z[i];
            for k in (i + 1)..n {
                s -= self.l[(k, i)].conj() * z[k];
            }
            z[i] = s / self.l[(i, i)].re;
        }
        z
    }

    pub fn solve(&self, b: &ComplexMatrix) -> ComplexMatrix {
        let mut out = ComplexMatrix::zeros(b.rows, b.cols);
        for j in 0..b.cols {
            let x = self.solve_vec(&b.column(j));
            for (i, xi) in x.into_iter().enumerate() {
                out[(i, j)] = xi;
            }
        }
        out
    }
}

/// Solves `M X = B` for Hermitian positive definite `M`.
pub fn hermitian_solve(m: &ComplexMatrix, b: &ComplexMatrix) -> Result<ComplexMatrix> {
    if b.rows != m.rows {
        return Err(Error::Dimension(format!(
            "solve: M is {}x{}, B has {} rows",
            m.rows, m.cols, b.rows
        )));
    }
    Ok(Cholesky::new(m)?.solve(b))
}

/// Inverse of a Hermitian positive definite matrix, returned exactly
/// Hermitian.
pub fn hermitian_inverse(m: &ComplexMatrix) -> Result<ComplexMatrix> {
    let mut inv = hermitian_solve(m, &ComplexMatrix::identity(m.rows))?;
    let n = m.rows;
    for i in 0..n {
        inv[(i, i)].im = 0.0;
        for j in (i + 1)..n {
            let avg = (inv[(i, j)] + inv[(j, i)].conj()) * 0.5;
            inv[(i, j)] = avg;
            inv[(j, i)] = avg.conj();
        }
    }
    Ok(inv)
}

/// Principal square root of a Hermitian PSD matrix.
pub fn psd_sqrt(m: &ComplexMatrix) -> Result<ComplexMatrix> {
    let eig = hermitian_eigen(m)?;
    let n = m.rows;
    let roots: Vec<f64> = eig.values.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let v = &eig.vectors;
    Ok(ComplexMatrix::from_fn(n, n, |i, j| {
        (0..n).map(|k| v[(i, k)] * roots[k] * v[(j, k)].conj()).sum()
    }))
}
