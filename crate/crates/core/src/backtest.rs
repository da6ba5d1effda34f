//! Short-term contrarian strategy on residuals and its performance metrics.
//!
//! On day `s` the portfolio holds weights formed from the residuals of day
//! `s - d` and earns the raw returns of day `s`: long the assets with the most
//! negative residual, short the most positive, zero net and unit gross
//! exposure.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::market_data::ReturnMatrix;
use crate::residual_pipeline::ResidualMatrix;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LegRule {
    /// `min(ceil(q N), floor(N / 2))` assets per side.
    #[default]
    Quantile,
    /// Long every negative signal, short every positive one.
    SignSplit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategyConfig {
    pub lags: Vec<usize>,
    pub leg_rule: LegRule,
    pub leg_fraction: f64,
    pub cvar_alpha: f64,
    pub risk_free: f64,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            lags: vec![2, 3, 4, 5],
            leg_rule: LegRule::Quantile,
            leg_fraction: 0.1,
            cvar_alpha: 0.05,
            risk_free: 0.0,
        }
    }
}

impl StrategyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("strategy: {what}")));
        if self.lags.is_empty() || self.lags.contains(&0) {
            return bad("lags must be nonempty and each at least 1");
        }
        if !(self.leg_fraction > 0.0 && self.leg_fraction <= 0.5) {
            return bad("leg_fraction must lie in (0, 0.5]");
        }
        if !(self.cvar_alpha > 0.0 && self.cvar_alpha < 1.0) {
            return bad("cvar_alpha must lie in (0, 1)");
        }
        if !self.risk_free.is_finite() {
            return bad("risk_free must be finite");
        }
        Ok(())
    }
}

/// Contrarian weights for one cross-section of signals, or `None` for a flat
/// day (fewer than two distinct finite signals, or an empty leg). Ties are
/// broken by asset order.
pub fn contrarian_positions(signal: &[f64], rule: LegRule, leg_fraction: f64) -> Option<Vec<f64>> {
    let finite: Vec<usize> = (0..signal.len())
        .filter(|&i| signal[i].is_finite())
        .collect();
    let first = *finite.first()?;
    if finite.iter().all(|&i| signal[i] == signal[first]) {
        return None;
    }
    let mut weights = vec![0.0; signal.len()];
    match rule {
        LegRule::Quantile => {
            let n = finite.len();
            let m = ((leg_fraction * n as f64).ceil() as usize).clamp(1, n / 2);
            let mut ascending = finite.clone();
            ascending.sort_by(|&a, &b| signal[a].total_cmp(&signal[b]).then(a.cmp(&b)));
            let mut descending = finite;
            descending.sort_by(|&a, &b| signal[b].total_cmp(&signal[a]).then(a.cmp(&b)));
            let long = &ascending[..m];
            let each = 0.5 / m as f64;
            for &i in long {
                weights[i] = each;
            }
            for &i in descending.iter().filter(|i| !long.contains(i)).take(m) {
                weights[i] = -each;
            }
        }
        LegRule::SignSplit => {
            let neg: Vec<usize> = finite
                .iter()
                .copied()
                .filter(|&i| signal[i] < 0.0)
                .collect();
            let pos: Vec<usize> = finite
                .iter()
                .copied()
                .filter(|&i| signal[i] > 0.0)
                .collect();
            if neg.is_empty() || pos.is_empty() {
                return None;
            }
            for &i in &neg {
                weights[i] = 0.5 / neg.len() as f64;
            }
            for &i in &pos {
                weights[i] = -0.5 / pos.len() as f64;
            }
        }
    }
    Some(weights)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategyReturns {
    pub dates: Vec<NaiveDate>,
    pub values: Vec<f64>,
    /// Days without a valid signal; their return is recorded as 0.
    pub flat: Vec<bool>,
    pub lag: usize,
}

/// Strategy returns at lag `d` for residuals and raw returns over the same window.
pub fn run_strategy(
    residuals: &ResidualMatrix,
    raw: &ReturnMatrix,
    cfg: &StrategyConfig,
    d: usize,
) -> Result<StrategyReturns> {
    if residuals.assets != raw.assets() || residuals.dates != raw.dates() {
        return Err(Error::Alignment(
            "residuals and raw returns cover different assets or dates".into(),
        ));
    }
    if d == 0 {
        return Err(Error::Config("lag must be at least 1".into()));
    }
    let t = raw.n_periods();
    if t <= d {
        return Err(Error::InsufficientData(format!(
            "window of {t} periods leaves no trade at lag {d}"
        )));
    }
    let x = raw.values();
    let mut out = StrategyReturns {
        dates: raw.dates()[d..].to_vec(),
        values: Vec::with_capacity(t - d),
        flat: Vec::with_capacity(t - d),
        lag: d,
    };
    for s in d..t {
        let signal: Vec<f64> = residuals.values.column(s - d).iter().copied().collect();
        match contrarian_positions(&signal, cfg.leg_rule, cfg.leg_fraction) {
            Some(w) => {
                let r = w
                    .iter()
                    .enumerate()
                    .filter(|(_, w)| **w != 0.0)
                    .map(|(i, w)| w * x[(i, s)])
                    .sum();
                out.values.push(r);
                out.flat.push(false);
            }
            None => {
                out.values.push(0.0);
                out.flat.push(true);
            }
        }
    }
    Ok(out)
}

/// A metric and whether it fell back to a conventional value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metric {
    pub value: f64,
    pub degenerate: bool,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// `(mean - r_f) / std` with the population standard deviation; 0 and
/// flagged degenerate when the deviation vanishes.
pub fn sharpe(returns: &[f64], risk_free: f64) -> Result<Metric> {
    if returns.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "Sharpe ratio needs at least 2 returns, got {}",
            returns.len()
        )));
    }
    let m = mean(returns);
    let var = returns.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / returns.len() as f64;
    let sd = var.sqrt();
    if sd <= 1e-14 * m.abs() || sd == 0.0 {
        return Ok(Metric {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Metric {
        value: (m - risk_free) / sd,
        degenerate: false,
    })
}

/// `c_t = Π_{s≤t} (1 + r_s)`.
pub fn wealth_curve(returns: &[f64]) -> Vec<f64> {
    returns
        .iter()
        .scan(1.0, |c, r| {
            *c *= 1.0 + r;
            Some(*c)
        })
        .collect()
}

/// `(max c - min c) / max c` over the whole curve, ignoring the order of the
/// extremes.
pub fn literal_drawdown(wealth: &[f64]) -> Result<f64> {
    if wealth.len() < 2 {
        return Err(Error::InsufficientData(
            "drawdown needs at least 2 points".into(),
        ));
    }
    let max = wealth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = wealth.iter().copied().fold(f64::INFINITY, f64::min);
    if !(max > 0.0) {
        return Err(Error::Undefined(format!("wealth curve maximum is {max}")));
    }
    Ok((max - min) / max)
}

/// Largest decline from a running peak, relative to that peak.
pub fn running_peak_drawdown(wealth: &[f64]) -> Result<f64> {
    if wealth.len() < 2 {
        return Err(Error::InsufficientData(
            "drawdown needs at least 2 points".into(),
        ));
    }
    let mut peak = f64::NEG_INFINITY;
    let mut worst: f64 = 0.0;
    for &c in wealth {
        peak = peak.max(c);
        if !(peak > 0.0) {
            return Err(Error::Undefined(format!("wealth curve peak is {peak}")));
        }
        worst = worst.max((peak - c) / peak);
    }
    Ok(worst)
}

pub fn max_drawdown(returns: &[f64]) -> Result<f64> {
    literal_drawdown(&wealth_curve(returns))
}

/// `|mean|` of the worst `ceil(alpha T)` returns.
pub fn cvar(returns: &[f64], alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!(
            "cvar alpha must lie in (0, 1), got {alpha}"
        )));
    }
    let needed = (1.0 / alpha - 1e-9).ceil() as usize;
    if returns.len() < needed {
        return Err(Error::InsufficientData(format!(
            "CVaR at alpha {alpha} needs {needed} returns, got {}",
            returns.len()
        )));
    }
    // The epsilon keeps alpha T that is integral up to rounding from rounding up.
    let tail = ((alpha * returns.len() as f64 - 1e-9).ceil() as usize).max(1);
    let mut sorted = returns.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(mean(&sorted[..tail]).abs())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LagPerformance {
    pub lag: usize,
    pub sr: f64,
    pub sr_degenerate: bool,
    pub mdd: f64,
    pub mdd_running_peak: f64,
    pub cvar: f64,
    pub flat_days: usize,
}

pub fn evaluate_lag(series: &StrategyReturns, cfg: &StrategyConfig) -> Result<LagPerformance> {
    let sr = sharpe(&series.values, cfg.risk_free)?;
    let wealth = wealth_curve(&series.values);
    Ok(LagPerformance {
        lag: series.lag,
        sr: sr.value,
        sr_degenerate: sr.degenerate,
        mdd: literal_drawdown(&wealth)?,
        mdd_running_peak: running_peak_drawdown(&wealth)?,
        cvar: cvar(&series.values, cfg.cvar_alpha)?,
        flat_days: series.flat.iter().filter(|f| **f).count(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerformanceReport {
    pub window: String,
    pub method: String,
    pub sr: f64,
    pub mdd: f64,
    pub mdd_running_peak: f64,
    pub cvar: f64,
    pub per_lag: Vec<LagPerformance>,
}

/// Arithmetic means of the per-lag metrics.
pub fn aggregate(
    window: &str,
    method: &str,
    per_lag: Vec<LagPerformance>,
) -> Result<PerformanceReport> {
    if per_lag.is_empty() {
        return Err(Error::InsufficientData("no lag to aggregate".into()));
    }
    let avg =
        |f: fn(&LagPerformance) -> f64| per_lag.iter().map(f).sum::<f64>() / per_lag.len() as f64;
    Ok(PerformanceReport {
        window: window.to_string(),
        method: method.to_string(),
        sr: avg(|p| p.sr),
        mdd: avg(|p| p.mdd),
        mdd_running_peak: avg(|p| p.mdd_running_peak),
        cvar: avg(|p| p.cvar),
        per_lag,
    })
}

/// Runs every configured lag and aggregates.
pub fn backtest(
    residuals: &ResidualMatrix,
    raw: &ReturnMatrix,
    cfg: &StrategyConfig,
    window: &str,
    method: &str,
) -> Result<PerformanceReport> {
    cfg.validate()?;
    let per_lag = cfg
        .lags
        .iter()
        .map(|&d| evaluate_lag(&run_strategy(residuals, raw, cfg, d)?, cfg))
        .collect::<Result<Vec<_>>>()?;
    aggregate(window, method, per_lag)
}
