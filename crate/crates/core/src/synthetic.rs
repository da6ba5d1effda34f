//! Synthetic price panels from a factor model with sector blocks.
//!
//! Returns are `x = B f + c_n g_{b(n)} + h_n ε`: a few broad factors, one
//! positively loaded factor per sector block and heteroscedastic idiosyncratic
//! noise. Because block loadings are positive, the within-sector dependence is
//! compatible with an M-matrix precision.

use chrono::{Datelike, NaiveDate, Weekday};
use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::linalg;
use crate::market_data::{PricePanel, ReturnMatrix};
use crate::{Error, Result};

/// Lowest simulated one-period return, keeping prices positive.
const RETURN_FLOOR: f64 = -0.95;

const START_PRICE: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_assets: usize,
    /// Number of simulated returns; the price panel has one more date.
    pub n_periods: usize,
    pub n_factors: usize,
    /// Number of equally sized sector blocks; 0 disables them.
    pub sector_blocks: usize,
    /// Idiosyncratic return volatility per period.
    pub noise_scale: f64,
    /// Broad factor volatility as a multiple of `noise_scale`.
    pub factor_scale: f64,
    /// Sector factor volatility as a multiple of `noise_scale`.
    pub block_scale: f64,
    pub seed: u64,
    pub start_date: NaiveDate,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_assets: 60,
            n_periods: 750,
            n_factors: 1,
            sector_blocks: 6,
            noise_scale: 0.01,
            factor_scale: 5.0,
            block_scale: 0.5,
            seed: 0,
            start_date: NaiveDate::from_ymd_opt(2015, 1, 1).expect("valid date"),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::Config(format!("synthetic: {what}")));
        if self.n_assets < 2 || self.n_periods < 2 {
            return bad(format!(
                "need at least 2 assets and 2 periods, got {} x {}",
                self.n_assets, self.n_periods
            ));
        }
        if self.sector_blocks > self.n_assets {
            return bad(format!(
                "{} sector blocks exceed {} assets",
                self.sector_blocks, self.n_assets
            ));
        }
        for (name, v) in [
            ("noise_scale", self.noise_scale),
            ("factor_scale", self.factor_scale),
            ("block_scale", self.block_scale),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if self.noise_scale == 0.0 {
            return bad("noise_scale must be positive".into());
        }
        Ok(())
    }

    /// Sector index of asset `i`.
    pub fn block_of(&self, i: usize) -> Option<usize> {
        (self.sector_blocks > 0).then(|| i * self.sector_blocks / self.n_assets)
    }
}

fn tickers(n: usize) -> Vec<String> {
    let width = n.to_string().len();
    (0..n).map(|i| format!("S{i:0width$}")).collect()
}

/// The next `count` weekdays starting at `start` (inclusive when a weekday).
pub fn business_days(start: NaiveDate, count: usize) -> Vec<NaiveDate> {
    start
        .iter_days()
        .filter(|d| !matches!(d.weekday(), Weekday::Sat | Weekday::Sun))
        .take(count)
        .collect()
}

fn normal_matrix(rows: usize, cols: usize, sd: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let dist = Normal::new(0.0, sd).expect("finite non-negative sd");
    DMatrix::from_fn(rows, cols, |_, _| dist.sample(rng))
}

/// Simulated returns labeled by the later price date of each period.
pub fn generate_returns(spec: &SyntheticSpec) -> Result<ReturnMatrix> {
    spec.validate()?;
    let (n, t) = (spec.n_assets, spec.n_periods);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut x = DMatrix::zeros(n, t);
    if spec.n_factors > 0 {
        // First factor is a market factor with loadings around 1; the rest
        // are long-short style factors.
        let loadings = DMatrix::from_fn(n, spec.n_factors, |_, j| {
            let z: f64 = rng.sample(StandardNormal);
            if j == 0 {
                1.0 + 0.3 * z
            } else {
                z
            }
        });
        let factors = normal_matrix(
            spec.n_factors,
            t,
            spec.factor_scale * spec.noise_scale,
            &mut rng,
        );
        x += loadings * factors;
    }
    if spec.sector_blocks > 0 {
        let sector = normal_matrix(
            spec.sector_blocks,
            t,
            spec.block_scale * spec.noise_scale,
            &mut rng,
        );
        for i in 0..n {
            let b = spec.block_of(i).expect("blocks enabled");
            let loading = rng.random_range(0.5..1.5);
            for j in 0..t {
                x[(i, j)] += loading * sector[(b, j)];
            }
        }
    }
    for i in 0..n {
        let h = rng.random_range(0.5..1.5) * spec.noise_scale;
        for j in 0..t {
            let e: f64 = rng.sample(StandardNormal);
            x[(i, j)] += h * e;
        }
    }
    x.apply(|v| *v = v.max(RETURN_FLOOR));

    let dates = business_days(spec.start_date, t + 1);
    ReturnMatrix::new(tickers(n), dates[1..].to_vec(), x)
}

/// Price panel obtained by compounding simulated returns from 100.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<PricePanel> {
    let returns = generate_returns(spec)?;
    let x = returns.values();
    let (n, t) = x.shape();
    let mut prices = DMatrix::zeros(n, t + 1);
    for i in 0..n {
        prices[(i, 0)] = START_PRICE;
        for j in 0..t {
            prices[(i, j + 1)] = prices[(i, j)] * (1.0 + x[(i, j)]);
        }
    }
    let dates = business_days(spec.start_date, t + 1);
    PricePanel::new(returns.assets().to_vec(), dates, prices)
}

/// An `N x T` sample whose centered sample covariance (divisor `T`) equals
/// `sigma` up to rounding.
///
/// A Gaussian draw is centered, whitened by the inverse square root of its own
/// scatter and colored by `sigma^{1/2}`.
pub fn exact_covariance_sample(
    sigma: &DMatrix<f64>,
    t: usize,
    rng: &mut impl Rng,
) -> Result<DMatrix<f64>> {
    linalg::ensure_square(sigma)?;
    let n = sigma.nrows();
    if t <= n {
        return Err(Error::InsufficientData(format!(
            "exact covariance construction needs T > N, got T = {t}, N = {n}"
        )));
    }
    let raw = DMatrix::from_fn(n, t, |_, _| rng.sample::<f64, _>(StandardNormal));
    let centered = linalg::center_rows(&raw);
    let whitener = linalg::inverse_sqrt_pd(&linalg::centered_covariance(&centered))?;
    Ok(linalg::sqrt_psd(sigma) * whitener * centered)
}
