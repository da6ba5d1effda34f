//! Whitening baselines: ZCA and OAS-shrinkage ZCA.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::linalg;
use crate::market_data::ReturnMatrix;
use crate::{Error, Result};

/// Smallest admissible `min eig / max eig` of the covariance for plain ZCA.
pub const CONDITION_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WhiteningMethod {
    Zca,
    ShrinkageZca,
}

#[derive(Debug, Clone)]
pub struct WhiteningTransform {
    /// Symmetric `Σ^{-1/2}`.
    pub matrix: DMatrix<f64>,
    pub method: WhiteningMethod,
    /// Weight on the scaled identity target; 0 for plain ZCA.
    pub shrinkage_coefficient: f64,
}

fn checked_covariance(train: &ReturnMatrix) -> Result<DMatrix<f64>> {
    if train.n_assets() < 2 || train.n_periods() < 2 {
        return Err(Error::InsufficientData(format!(
            "whitening needs N >= 2 and T >= 2, got {} x {}",
            train.n_assets(),
            train.n_periods()
        )));
    }
    Ok(linalg::centered_covariance(train.values()))
}

fn whiten(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (values, vectors) = linalg::sym_eigen(cov);
    let lowest = values[0];
    let highest = values[values.len() - 1];
    let ratio = if highest > 0.0 { lowest / highest } else { 0.0 };
    if !(ratio > CONDITION_FLOOR) {
        return Err(Error::Singular { ratio });
    }
    let mut w = linalg::recompose(&vectors, &values.map(|v| 1.0 / v.sqrt()));
    linalg::symmetrize(&mut w);
    Ok(w)
}

/// ZCA whitening by the inverse square root of the training covariance.
pub fn fit_zca(train: &ReturnMatrix) -> Result<WhiteningTransform> {
    let cov = checked_covariance(train)?;
    Ok(WhiteningTransform {
        matrix: whiten(&cov)?,
        method: WhiteningMethod::Zca,
        shrinkage_coefficient: 0.0,
    })
}

/// Oracle approximating shrinkage coefficient (Chen, Wiesel, Eldar and Hero,
/// 2010) for `S` estimated from `n` observations, clipped to `[0, 1]`.
pub fn oas_coefficient(s: &DMatrix<f64>, n: usize) -> f64 {
    let p = s.nrows() as f64;
    let n = n as f64;
    let tr = s.trace();
    let tr_sq = s.component_mul(s).sum();
    let num = (1.0 - 2.0 / p) * tr_sq + tr * tr;
    let den = (n + 1.0 - 2.0 / p) * (tr_sq - tr * tr / p);
    if den <= 0.0 {
        return 1.0;
    }
    (num / den).clamp(0.0, 1.0)
}

/// `(1 - ρ) S + ρ (tr S / N) I`.
pub fn oas_shrunk_covariance(s: &DMatrix<f64>, rho: f64) -> DMatrix<f64> {
    let mu = s.trace() / s.nrows() as f64;
    let mut out = s * (1.0 - rho);
    for i in 0..s.nrows() {
        out[(i, i)] += rho * mu;
    }
    out
}

/// ZCA whitening of the OAS-shrunk training covariance.
pub fn fit_shrinkage_zca(train: &ReturnMatrix) -> Result<WhiteningTransform> {
    let s = checked_covariance(train)?;
    if s.trace() <= 0.0 {
        return Err(Error::Degenerate(
            "training covariance has zero trace".into(),
        ));
    }
    let rho = oas_coefficient(&s, train.n_periods());
    let shrunk = oas_shrunk_covariance(&s, rho);
    Ok(WhiteningTransform {
        matrix: whiten(&shrunk)?,
        method: WhiteningMethod::ShrinkageZca,
        shrinkage_coefficient: rho,
    })
}
