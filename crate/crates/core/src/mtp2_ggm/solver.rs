//! Projected gradient ascent with monotone backtracking.

use nalgebra::DMatrix;

use super::{
    centered_scatter, cholesky, gradient_with, objective_with, project_m_matrix, trace_product,
    Initialization, PrecisionEstimate, SolverSettings,
};
use crate::linalg::{self, symmetrize};
use crate::{Error, Result};

/// Acceptance slack for rounding noise in objective comparisons.
const ASCENT_SLACK: f64 = 1e-12;

/// Fraction of the first-order predicted gain a trial step must realize.
/// Without it, steps that overshoot the optimum to a point of equal objective
/// are accepted and the iterates oscillate.
const SUFFICIENT_ASCENT: f64 = 1e-4;

const MIN_STEP: f64 = 1e-20;
const MAX_STEP: f64 = 1e20;

/// Raises the spectrum of `a` to at least `eps * trace(a) / N` by a diagonal
/// shift, leaving the off-diagonal entries unchanged.
fn floor_spectrum(mut a: DMatrix<f64>, eps: f64) -> Result<DMatrix<f64>> {
    let n = a.nrows() as f64;
    let trace = a.trace();
    if !(trace > 0.0 && trace.is_finite()) {
        return Err(Error::Domain(format!(
            "cannot floor a matrix with trace {trace}"
        )));
    }
    let floor = eps * trace / n;
    let mut probe = a.clone();
    for i in 0..a.nrows() {
        probe[(i, i)] -= floor;
    }
    if linalg::is_positive_definite(&probe) {
        return Ok(a);
    }
    let lowest = linalg::min_eigenvalue(&a);
    // The shift also raises the trace, hence the (1 - eps) divisor; the extra
    // margin absorbs eigenvalue rounding.
    let shift = (floor - lowest) / (1.0 - eps) + 1e-6 * floor;
    for i in 0..a.nrows() {
        a[(i, i)] += shift;
    }
    Ok(a)
}

/// Projected gradient ascent for the M-matrix constrained log-likelihood.
///
/// Every iterate is projected onto the M-matrices and spectrum-floored. The
/// first trial step moves Λ by `learning_rate` times its Frobenius norm; later trials use the Barzilai-Borwein
/// step of the previous displacement, or the previous step divided by the
/// shrink factor when that is unavailable. With backtracking, a trial is
/// accepted only if the objective does not decrease.
pub fn fit(z: &DMatrix<f64>, settings: &SolverSettings) -> Result<PrecisionEstimate> {
    settings.validate()?;
    let (n, t) = z.shape();
    if n < 2 || t < 2 {
        return Err(Error::InsufficientData(format!(
            "precision estimation needs N >= 2 and T >= 2, got {n} x {t}"
        )));
    }
    let s = centered_scatter(z)?;

    let start = match settings.init {
        Initialization::Scatter => &s * t as f64,
        Initialization::DiagonalInverse => {
            if let Some(i) = (0..n).find(|&i| s[(i, i)] <= 0.0) {
                return Err(Error::Initialization(format!(
                    "asset {i} has zero variance"
                )));
            }
            DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 / s[(i, i)] } else { 0.0 })
        }
    };
    let projected = project_m_matrix(&start, settings)?;
    let mut lambda = floor_spectrum(projected.current, settings.pd_floor)
        .map_err(|e| Error::Initialization(e.to_string()))?;
    let mut chol = cholesky(&lambda)
        .map_err(|_| Error::Initialization("initial iterate is not positive definite".into()))?;
    let mut value = objective_with(&chol, &lambda, &s);
    if !value.is_finite() {
        return Err(Error::Initialization(format!(
            "initial objective is {value}"
        )));
    }

    let mut objective_trace = vec![value];
    let mut diagnostics = Vec::new();
    let mut converged = false;
    let mut step = settings.learning_rate;
    let mut iterations = 0;
    let attempts = if settings.backtracking.enabled {
        settings.backtracking.max_halvings + 1
    } else {
        1
    };

    let mut previous: Option<(DMatrix<f64>, DMatrix<f64>)> = None;

    while iterations < settings.outer_iters {
        let grad = gradient_with(&chol, &s);
        if previous.is_none() {
            // Returns live on scales far from 1, so the first trial moves
            // Λ by `learning_rate` relative to its own norm.
            let g = grad.norm();
            if g > 0.0 {
                step = (settings.learning_rate * lambda.norm() / g).clamp(MIN_STEP, MAX_STEP);
            }
        }
        if let Some((last_lambda, last_grad)) = &previous {
            // Barzilai-Borwein trial step from the last displacement; the
            // curvature along it is negative for the concave objective.
            let ds = &lambda - last_lambda;
            let curvature = trace_product(&ds, &(&grad - last_grad));
            if curvature < 0.0 {
                step = (ds.norm_squared() / -curvature).clamp(MIN_STEP, MAX_STEP);
            }
        }
        let mut accepted = None;
        for _ in 0..attempts {
            let mut trial = &lambda + &grad * step;
            symmetrize(&mut trial);
            let candidate = floor_spectrum(
                project_m_matrix(&trial, settings)?.current,
                settings.pd_floor,
            );
            if let Ok(candidate) = candidate {
                if let Ok(c) = cholesky(&candidate) {
                    let f = objective_with(&c, &candidate, &s);
                    let predicted = trace_product(&grad, &(&candidate - &lambda)).max(0.0);
                    let required =
                        value + SUFFICIENT_ASCENT * predicted - ASCENT_SLACK * value.abs().max(1.0);
                    let ok = f.is_finite() && (!settings.backtracking.enabled || f >= required);
                    if ok {
                        accepted = Some((candidate, c, f));
                        break;
                    }
                }
            }
            step *= settings.backtracking.shrink;
        }

        let Some((next, next_chol, f)) = accepted else {
            diagnostics.push(format!(
                "step stalled at iteration {iterations}: no trial step kept the objective from decreasing"
            ));
            break;
        };
        iterations += 1;
        let change = (f - value).abs() / value.abs().max(1.0);
        previous = Some((std::mem::replace(&mut lambda, next), grad));
        chol = next_chol;
        value = f;
        objective_trace.push(f);
        if change < settings.objective_tol {
            converged = true;
            break;
        }
        if settings.backtracking.enabled {
            step /= settings.backtracking.shrink;
        }
    }
    if !converged && diagnostics.is_empty() {
        diagnostics.push(format!(
            "iteration budget of {} exhausted",
            settings.outer_iters
        ));
    }

    let diag = lambda.diagonal().iter().copied().collect();
    Ok(PrecisionEstimate {
        lambda,
        diag,
        objective_trace,
        converged,
        centered_covariance: s,
        iterations,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::exact_covariance_sample;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tridiagonal(n: usize, diag: f64, off: f64) -> DMatrix<f64> {
        DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                diag
            } else if i.abs_diff(j) == 1 {
                off
            } else {
                0.0
            }
        })
    }

    #[test]
    fn identity_covariance_recovers_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = exact_covariance_sample(&DMatrix::identity(3, 3), 50, &mut rng).unwrap();
        let est = fit(&z, &SolverSettings::default()).unwrap();
        assert!(
            (&est.lambda - DMatrix::identity(3, 3)).norm() <= 1e-4,
            "{}",
            est.lambda
        );
    }

    #[test]
    fn tridiagonal_precision_is_recovered() {
        let target = tridiagonal(6, 2.0, -0.5);
        let sigma = target.clone().try_inverse().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = exact_covariance_sample(&sigma, 200, &mut rng).unwrap();
        for init in [Initialization::Scatter, Initialization::DiagonalInverse] {
            let settings = SolverSettings {
                init,
                ..SolverSettings::default()
            };
            let est = fit(&z, &settings).unwrap();
            assert!(
                linalg::relative_frobenius(&est.lambda, &target) <= 1e-3,
                "{init:?}"
            );
            assert!(est.objective_trace.windows(2).all(|w| w[1] >= w[0] - 1e-9));
        }
    }

    #[test]
    fn recovery_holds_at_return_scale() {
        // Daily returns have variances near 1e-4, so Λ entries are near 1e4.
        let target = tridiagonal(6, 2.0, -0.5) * 1e4;
        let sigma = target.clone().try_inverse().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = exact_covariance_sample(&sigma, 200, &mut rng).unwrap();
        for init in [Initialization::Scatter, Initialization::DiagonalInverse] {
            let settings = SolverSettings {
                init,
                ..SolverSettings::default()
            };
            let est = fit(&z, &settings).unwrap();
            assert!(est.converged, "{init:?}: {:?}", est.diagnostics);
            assert!(
                linalg::relative_frobenius(&est.lambda, &target) <= 1e-3,
                "{init:?}"
            );
        }
    }

    #[test]
    fn negative_correlation_binds_the_constraint() {
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, -0.5, -0.5, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = exact_covariance_sample(&sigma, 100, &mut rng).unwrap();
        let est = fit(&z, &SolverSettings::default()).unwrap();
        assert!(est.lambda[(0, 1)] <= 1e-10 && est.lambda[(1, 0)] <= 1e-10);
        // With the off-diagonal pinned at zero the optimum is diag(1 / S_ii).
        assert!((est.lambda[(0, 0)] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn estimate_invariants_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = DMatrix::from_fn(5, 40, |_, _| rand::Rng::random_range(&mut rng, -1.0..1.0));
        let settings = SolverSettings::default();
        let est = fit(&z, &settings).unwrap();
        let n = 5;
        for i in 0..n {
            assert!(est.diag[i] > 0.0);
            for j in 0..n {
                if i != j {
                    assert!(est.lambda[(i, j)] <= 1e-10);
                }
            }
        }
        let floor = settings.pd_floor * est.lambda.trace() / n as f64;
        assert!(linalg::min_eigenvalue(&est.lambda) >= floor);
        assert!(est.objective_trace.windows(2).all(|w| w[1] >= w[0] - 1e-9));
        let again = fit(&z, &settings).unwrap();
        assert_eq!(est.objective_trace, again.objective_trace);
    }

    #[test]
    fn floor_spectrum_shifts_only_the_diagonal() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
        let out = floor_spectrum(a.clone(), 1e-3).unwrap();
        assert_eq!(out[(0, 1)], -1.0);
        assert!(linalg::min_eigenvalue(&out) >= 1e-3 * out.trace() / 2.0);
        assert!(floor_spectrum(DMatrix::zeros(2, 2), 1e-8).is_err());
    }

    #[test]
    fn rejects_tiny_inputs() {
        assert!(fit(&DMatrix::zeros(1, 10), &SolverSettings::default()).is_err());
        assert!(fit(&DMatrix::zeros(3, 1), &SolverSettings::default()).is_err());
    }
}
