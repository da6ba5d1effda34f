//! Gaussian graphical model with an M-matrix (MTP2) constrained precision.
//!
//! The estimate maximizes `log det Λ - tr(Λ S)` over symmetric M-matrices,
//! where `S = (1/T) Z H Zᵀ` is the centered sample covariance of the rows of
//! `Z`. Optimization is projected gradient ascent; each projection is computed
//! with Dykstra's method from the closed-form PSD and Z-matrix projections.

mod projection;
mod solver;

use std::io::Write;

use nalgebra::{Cholesky, DMatrix, Dyn};
use serde::{Deserialize, Serialize};

use crate::linalg::{self, symmetrize};
use crate::{Error, Result};

pub use projection::{project_m_matrix, project_psd, project_z, DykstraState, SYMMETRY_TOLERANCE};
pub use solver::fit;

/// Starting point of the ascent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Initialization {
    /// Projection of the raw scatter `Z H Zᵀ` onto the M-matrices.
    #[default]
    Scatter,
    /// Projection of `diag(1 / S_ii)`.
    DiagonalInverse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Backtracking {
    pub enabled: bool,
    /// Step multiplier after a rejected trial, in `(0, 1)`.
    pub shrink: f64,
    pub max_halvings: usize,
}

impl Default for Backtracking {
    fn default() -> Self {
        Self {
            enabled: true,
            shrink: 0.5,
            max_halvings: 30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    /// First trial step, relative to the Frobenius norm of the initial Λ.
    pub learning_rate: f64,
    pub outer_iters: usize,
    pub inner_iters: usize,
    /// Relative objective change that ends the outer loop.
    pub objective_tol: f64,
    /// Relative change between Dykstra iterates that ends the inner loop.
    pub inner_tol: f64,
    /// Eigenvalue floor as a fraction of `trace(Λ) / N`.
    pub pd_floor: f64,
    pub init: Initialization,
    pub backtracking: Backtracking,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            learning_rate: 1.0,
            outer_iters: 500,
            inner_iters: 100,
            objective_tol: 1e-8,
            inner_tol: 1e-10,
            pd_floor: 1e-8,
            init: Initialization::Scatter,
            backtracking: Backtracking::default(),
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("solver: {what}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.outer_iters == 0 || self.inner_iters == 0 {
            return bad("iteration counts must be at least 1");
        }
        if !(self.pd_floor > 0.0 && self.pd_floor < 1.0) {
            return bad("pd_floor must lie in (0, 1)");
        }
        if !(self.objective_tol >= 0.0 && self.inner_tol >= 0.0) {
            return bad("tolerances must be non-negative");
        }
        let shrink = self.backtracking.shrink;
        if !(shrink > 0.0 && shrink < 1.0) {
            return bad("backtracking.shrink must lie in (0, 1)");
        }
        Ok(())
    }
}

/// Fitted precision matrix and solver diagnostics.
#[derive(Debug, Clone)]
pub struct PrecisionEstimate {
    pub lambda: DMatrix<f64>,
    /// `Λ_ii`.
    pub diag: Vec<f64>,
    /// Objective after initialization and after every accepted step.
    pub objective_trace: Vec<f64>,
    pub converged: bool,
    /// `(1/T) Z H Zᵀ`.
    pub centered_covariance: DMatrix<f64>,
    pub iterations: usize,
    pub diagnostics: Vec<String>,
}

impl PrecisionEstimate {
    pub fn final_objective(&self) -> f64 {
        *self
            .objective_trace
            .last()
            .expect("trace holds the initial objective")
    }

    pub fn write_objective_trace_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(["iter", "objective"])?;
        for (i, f) in self.objective_trace.iter().enumerate() {
            out.write_record([i.to_string(), format!("{f:?}")])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// `(1/T) Z H Zᵀ` with `H = I - (1/T) 11ᵀ`.
pub fn centered_scatter(z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if z.ncols() < 2 {
        return Err(Error::InsufficientData(format!(
            "centered scatter needs T >= 2, got {}",
            z.ncols()
        )));
    }
    Ok(linalg::centered_covariance(z))
}

fn cholesky(lambda: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    linalg::ensure_square(lambda)?;
    lambda
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Domain("Λ is not positive definite".into()))
}

/// `tr(A B)` for symmetric `A`, `B`.
fn trace_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.component_mul(b).sum()
}

fn objective_with(chol: &Cholesky<f64, Dyn>, lambda: &DMatrix<f64>, s: &DMatrix<f64>) -> f64 {
    chol.ln_determinant() - trace_product(lambda, s)
}

/// `log det Λ - tr(Λ S)`.
pub fn objective(lambda: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<f64> {
    if lambda.shape() != s.shape() {
        return Err(Error::Shape {
            expected: lambda.shape(),
            found: s.shape(),
        });
    }
    let chol = cholesky(lambda)?;
    Ok(objective_with(&chol, lambda, s))
}

fn gradient_with(chol: &Cholesky<f64, Dyn>, s: &DMatrix<f64>) -> DMatrix<f64> {
    let mut g = chol.inverse() - s;
    symmetrize(&mut g);
    g
}

/// `∇f(Λ) = Λ⁻¹ - S`.
pub fn gradient(lambda: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if lambda.shape() != s.shape() {
        return Err(Error::Shape {
            expected: lambda.shape(),
            found: s.shape(),
        });
    }
    let chol = cholesky(lambda)?;
    Ok(gradient_with(&chol, s))
}
