//! Cross-asset correlation, partial correlation and orthogonality scores.
//!
//! The ℓ₂ mean is the mean of squared correlations (not a root mean square),
//! so `l1_mean² <= l2_mean <= l1_mean` always holds.

use std::io::Write;

use nalgebra::DMatrix;

use crate::{Error, Result};

/// Pearson correlations of the rows of a matrix.
#[derive(Debug, Clone)]
pub struct Correlation {
    /// Unit diagonal; pairs involving a zero-variance row are NaN.
    pub matrix: DMatrix<f64>,
    pub zero_variance: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationSummary {
    pub l1_mean: f64,
    pub l2_mean: f64,
    pub n_pairs: usize,
    pub max_abs: f64,
    pub matrix: Option<DMatrix<f64>>,
}

pub fn correlation_matrix(m: &DMatrix<f64>) -> Result<Correlation> {
    let (n, t) = m.shape();
    if t < 2 {
        return Err(Error::InsufficientData(format!(
            "correlation needs T >= 2, got {t}"
        )));
    }
    let centered = crate::linalg::center_rows(m);
    let norms: Vec<f64> = centered.row_iter().map(|r| r.norm()).collect();
    let scale: Vec<f64> = m.row_iter().map(|r| r.amax()).collect();
    // A row whose centered norm is at rounding level relative to its entries
    // is constant for practical purposes.
    let zero_variance: Vec<usize> = (0..n)
        .filter(|&i| norms[i] <= 1e-14 * scale[i] * (t as f64).sqrt() || norms[i] == 0.0)
        .collect();
    let gram = &centered * centered.transpose();
    let mut matrix = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0
        } else if zero_variance.contains(&i) || zero_variance.contains(&j) {
            f64::NAN
        } else {
            (gram[(i, j)] / (norms[i] * norms[j])).clamp(-1.0, 1.0)
        }
    });
    crate::linalg::symmetrize(&mut matrix);
    Ok(Correlation {
        matrix,
        zero_variance,
    })
}

/// Partial correlations `-Λ_ij / sqrt(Λ_ii Λ_jj)`, unit diagonal.
pub fn partial_correlations(lambda: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    crate::linalg::ensure_square(lambda)?;
    let n = lambda.nrows();
    if let Some(i) = (0..n).find(|&i| !(lambda[(i, i)] > 0.0)) {
        return Err(Error::Domain(format!(
            "precision diagonal entry {i} is {}",
            lambda[(i, i)]
        )));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0
        } else {
            -lambda[(i, j)] / (lambda[(i, i)] * lambda[(j, j)]).sqrt()
        }
    }))
}

/// Means over unordered off-diagonal pairs; NaN entries are skipped.
pub fn summarize(corr: &DMatrix<f64>) -> Result<CorrelationSummary> {
    crate::linalg::ensure_square(corr)?;
    let n = corr.nrows();
    if n < 2 {
        return Err(Error::Undefined(
            "correlation summary needs at least 2 assets".into(),
        ));
    }
    let (mut l1, mut l2, mut max_abs, mut pairs) = (0.0, 0.0, 0.0f64, 0usize);
    for j in 1..n {
        for i in 0..j {
            let r = corr[(i, j)];
            if r.is_nan() {
                continue;
            }
            l1 += r.abs();
            l2 += r * r;
            max_abs = max_abs.max(r.abs());
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Err(Error::Undefined(
            "no asset pair has a defined correlation".into(),
        ));
    }
    Ok(CorrelationSummary {
        l1_mean: l1 / pairs as f64,
        l2_mean: l2 / pairs as f64,
        n_pairs: pairs,
        max_abs,
        matrix: None,
    })
}

/// Correlates the rows of `m` and summarizes, optionally retaining the matrix.
pub fn summarize_rows(
    m: &DMatrix<f64>,
    keep_matrix: bool,
) -> Result<(CorrelationSummary, Vec<usize>)> {
    let corr = correlation_matrix(m)?;
    let mut summary = summarize(&corr.matrix)?;
    if keep_matrix {
        summary.matrix = Some(corr.matrix);
    }
    Ok((summary, corr.zero_variance))
}

/// Square CSV with a ticker header row and a ticker first column.
pub fn write_correlation_csv<W: Write>(
    matrix: &DMatrix<f64>,
    assets: &[String],
    writer: W,
) -> Result<()> {
    if matrix.shape() != (assets.len(), assets.len()) {
        return Err(Error::Shape {
            expected: (assets.len(), assets.len()),
            found: matrix.shape(),
        });
    }
    let mut out = csv::Writer::from_writer(writer);
    let mut header = vec![String::new()];
    header.extend(assets.iter().cloned());
    out.write_record(&header)?;
    for (i, name) in assets.iter().enumerate() {
        let mut row = vec![name.clone()];
        row.extend(matrix.row(i).iter().map(|v| format!("{v:?}")));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

/// Counts of off-diagonal `|ρ|` in `bins` equal-width bins over `[0, 1]`.
pub fn abs_histogram(corr: &DMatrix<f64>, bins: usize) -> Result<Vec<usize>> {
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    let n = corr.nrows();
    let mut counts = vec![0; bins];
    for j in 1..n {
        for i in 0..j {
            let r = corr[(i, j)].abs();
            if r.is_nan() {
                continue;
            }
            let b = ((r * bins as f64) as usize).min(bins - 1);
            counts[b] += 1;
        }
    }
    Ok(counts)
}

/// Histogram rows `(lower, upper, count)`.
pub fn write_abs_histogram_csv<W: Write>(
    corr: &DMatrix<f64>,
    bins: usize,
    writer: W,
) -> Result<()> {
    let counts = abs_histogram(corr, bins)?;
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(["lower", "upper", "count"])?;
    for (b, c) in counts.iter().enumerate() {
        let lo = b as f64 / bins as f64;
        let hi = (b + 1) as f64 / bins as f64;
        out.write_record([format!("{lo:?}"), format!("{hi:?}"), c.to_string()])?;
    }
    out.flush()?;
    Ok(())
}
