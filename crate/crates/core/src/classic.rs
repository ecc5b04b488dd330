//! Zero-forcing, LMMSE and exhaustive maximum-likelihood detectors.

use num_complex::Complex64;

use crate::constellation::Constellation;
use crate::detection::DetectionResult;
use crate::error::{Error, Result};
use crate::numerics::{hermitian_solve, norm_sqr, Cholesky, ComplexMatrix, ComplexVector};

/// Largest `N_t log2(M)` the exhaustive search accepts.
pub const ML_MAX_BITS: u32 = 20;

fn check_shapes(y: &[Complex64], h: &ComplexMatrix) -> Result<()> {
    if y.len() != h.rows() {
        return Err(Error::Dimension(format!("y has {} entries, H has {} rows", y.len(), h.rows())));
    }
    Ok(())
}

/// `(H^H H)^{-1} H^H y`; fails on rank-deficient `H`.
pub fn detect_zf(y: &[Complex64], h: &ComplexMatrix, c: &Constellation) -> Result<DetectionResult> {
    check_shapes(y, h)?;
    let xhat = Cholesky::new(&h.gram())?.solve_vec(&h.adjoint_mul_vec(y));
    Ok(DetectionResult::from_soft(xhat, c))
}

fn check_noise(noise_var: f64) -> Result<()> {
    if !(noise_var > 0.0) || !noise_var.is_finite() {
        return Err(Error::InvalidArgument(format!("noise_var must be positive, got {noise_var}")));
    }
    Ok(())
}

/// `H^H (H H^H + noise_var I)^{-1} y` evaluated with an `N_r x N_r` solve.
pub fn lmmse_receive_form(y: &[Complex64], h: &ComplexMatrix, noise_var: f64) -> Result<ComplexVector> {
    check_shapes(y, h)?;
    check_noise(noise_var)?;
    let m = h.outer_gram().add_identity(noise_var);
    let z = Cholesky::new(&m)?.solve_vec(y);
    Ok(h.adjoint_mul_vec(&z))
}

/// `(H^H H + noise_var I)^{-1} H^H y`, algebraically equal to the receive
/// form with an `N_t x N_t` solve.
pub fn lmmse_transmit_form(y: &[Complex64], h: &ComplexMatrix, noise_var: f64) -> Result<ComplexVector> {
    check_shapes(y, h)?;
    check_noise(noise_var)?;
    let m = h.gram().add_identity(noise_var);
    Ok(Cholesky::new(&m)?.solve_vec(&h.adjoint_mul_vec(y)))
}

/// LMMSE with unit-power symbols, solving in whichever dimension is smaller.
pub fn detect_lmmse(y: &[Complex64], h: &ComplexMatrix, noise_var: f64, c: &Constellation) -> Result<DetectionResult> {
    let xhat = if h.rows() > h.cols() {
        lmmse_transmit_form(y, h, noise_var)?
    } else {
        lmmse_receive_form(y, h, noise_var)?
    };
    Ok(DetectionResult::from_soft(xhat, c))
}

/// Exact `argmin ||y - H x||^2` over all symbol vectors, enumerated in
/// lexicographic index order; the first minimizer wins ties.
pub fn detect_ml(y: &[Complex64], h: &ComplexMatrix, c: &Constellation) -> Result<DetectionResult> {
    check_shapes(y, h)?;
    let nt = h.cols();
    let bits = nt as u32 * c.bits_per_symbol();
    if bits > ML_MAX_BITS {
        return Err(Error::InvalidArgument(format!(
            "exhaustive ML over {bits} bits exceeds the {ML_MAX_BITS}-bit limit; use a smaller N_t or constellation"
        )));
    }
    let m = c.len();
    let nr = h.rows();
    // columns[j][k] = H[:, j] * c_k
    let columns: Vec<Vec<ComplexVector>> = (0..nt)
        .map(|j| {
            let col = h.column(j);
            c.points().iter().map(|p| col.iter().map(|z| z * p).collect()).collect()
        })
        .collect();

    let mut idx = vec![0usize; nt];
    let mut best = idx.clone();
    let mut best_cost = f64::INFINITY;
    let mut e = vec![Complex64::new(0.0, 0.0); nr];
    loop {
        e.copy_from_slice(y);
        for (j, &k) in idx.iter().enumerate() {
            for (ei, hc) in e.iter_mut().zip(&columns[j][k]) {
                *ei -= hc;
            }
        }
        let cost = norm_sqr(&e);
        if cost < best_cost {
            best_cost = cost;
            best.copy_from_slice(&idx);
        }
        // Odometer with the last index running fastest.
        let mut pos = nt;
        loop {
            if pos == 0 {
                let xhat = c.symbols(&best);
                return Ok(DetectionResult { xhat, hard: best });
            }
            pos -= 1;
            idx[pos] += 1;
            if idx[pos] < m {
                break;
            }
            idx[pos] = 0;
        }
    }
}

/// Normal-equations solve used as an independent reference in tests and
/// diagnostics: `hermitian_solve(H^H H, H^H y)`.
pub fn normal_equations(y: &[Complex64], h: &ComplexMatrix) -> Result<ComplexVector> {
    let rhs = ComplexMatrix::new(h.cols(), 1, h.adjoint_mul_vec(y))?;
    Ok(hermitian_solve(&h.gram(), &rhs)?.into_data())
}
