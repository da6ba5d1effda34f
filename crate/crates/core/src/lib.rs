//! Residual factor extraction for multivariate return panels.
//!
//! The pipeline removes the dominant principal components selected by an
//! information criterion, then removes the remaining cross-asset structure with
//! a Gaussian graphical model whose precision matrix is constrained to be a
//! symmetric M-matrix (an MTP2 Gaussian). Whitening baselines, orthogonality
//! metrics and a contrarian backtest are provided for evaluation.

pub mod backtest;
pub mod baselines;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod market_data;
pub mod mtp2_ggm;
pub mod ortho_metrics;
pub mod residual_pipeline;
pub mod spectral_factor;
pub mod synthetic;

pub use error::{Error, Result};
pub use market_data::{PricePanel, ReturnMatrix, WindowSplit};
pub use mtp2_ggm::{PrecisionEstimate, SolverSettings};
pub use residual_pipeline::{LinearResidualizer, Method, ResidualMatrix, ResidualTransform};
pub use spectral_factor::{PcaProjector, SpectralDecomposition};
