//! Euclidean projections onto the PSD cone, the Z-matrix set and their
//! intersection, the symmetric M-matrices.

use nalgebra::DMatrix;

use super::SolverSettings;
use crate::linalg::{self, max_asymmetry};
use crate::{Error, Result};

/// Asymmetry tolerated by [`project_psd`], relative to the largest entry.
pub const SYMMETRY_TOLERANCE: f64 = 1e-8;

fn check_symmetric(a: &DMatrix<f64>) -> Result<()> {
    linalg::ensure_square(a)?;
    let scale = a.amax().max(1.0);
    let asym = max_asymmetry(a);
    if asym > SYMMETRY_TOLERANCE * scale {
        return Err(Error::Asymmetric(asym));
    }
    Ok(())
}

/// Nearest PSD matrix in Frobenius norm: `Q max(Ω, 0) Qᵀ`.
pub fn project_psd(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_symmetric(a)?;
    let mut sym = a.clone();
    linalg::symmetrize(&mut sym);
    Ok(psd_part(sym))
}

/// PSD projection of an already symmetric matrix. A matrix that admits a
/// Cholesky factorization is its own projection.
fn psd_part(sym: DMatrix<f64>) -> DMatrix<f64> {
    if linalg::is_positive_definite(&sym) {
        return sym;
    }
    let (values, vectors) = linalg::sym_eigen(&sym);
    linalg::recompose(&vectors, &values.map(|w| w.max(0.0)))
}

/// Clips off-diagonal entries at zero from above; the diagonal is untouched.
pub fn project_z(a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = a.clone();
    clip_off_diagonal(&mut out);
    out
}

fn clip_off_diagonal(a: &mut DMatrix<f64>) {
    let (rows, cols) = a.shape();
    for j in 0..cols {
        for i in 0..rows {
            if i != j && a[(i, j)] > 0.0 {
                a[(i, j)] = 0.0;
            }
        }
    }
}

/// Iterates of Dykstra's alternating projection between the PSD cone and the
/// Z-matrix set.
#[derive(Debug, Clone)]
pub struct DykstraState {
    pub current: DMatrix<f64>,
    pub correction_psd: DMatrix<f64>,
    pub correction_z: DMatrix<f64>,
    pub iterations_used: usize,
    pub converged: bool,
    /// Diagonal shift added after the loop to make `current` PSD.
    pub diagonal_shift: f64,
}

/// Projection onto the symmetric M-matrices by Dykstra's method.
///
/// Stops after `settings.inner_iters` rounds or once successive iterates
/// differ by less than `settings.inner_tol` relative to their Frobenius norm.
/// The final iterate is a Z-matrix by construction; any remaining negative
/// eigenvalue is removed by shifting the diagonal, which keeps the off-diagonal
/// pattern intact.
pub fn project_m_matrix(a: &DMatrix<f64>, settings: &SolverSettings) -> Result<DykstraState> {
    check_symmetric(a)?;
    let n = a.nrows();
    let mut current = a.clone();
    linalg::symmetrize(&mut current);
    let mut correction_psd = DMatrix::zeros(n, n);
    let mut correction_z = DMatrix::zeros(n, n);
    let mut iterations_used = 0;
    let mut converged = false;

    while iterations_used < settings.inner_iters {
        let shifted = &current + &correction_psd;
        let psd = psd_part(shifted.clone());
        correction_psd = shifted - &psd;

        let shifted = &psd + &correction_z;
        let mut next = shifted.clone();
        clip_off_diagonal(&mut next);
        correction_z = shifted - &next;

        iterations_used += 1;
        let change = (&next - &current).norm();
        let scale = next.norm().max(1.0);
        current = next;
        if change <= settings.inner_tol * scale {
            converged = true;
            break;
        }
    }

    let mut diagonal_shift = 0.0;
    if !linalg::is_positive_definite(&current) {
        let lowest = linalg::min_eigenvalue(&current);
        if lowest < 0.0 {
            diagonal_shift = -lowest;
            for i in 0..n {
                current[(i, i)] += diagonal_shift;
            }
        }
    }

    Ok(DykstraState {
        current,
        correction_psd,
        correction_z,
        iterations_used,
        converged,
        diagonal_shift,
    })
}
