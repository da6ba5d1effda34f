//! Principal-factor removal with an information-criterion factor count.

use std::io::Write;

use nalgebra::{DMatrix, DVector, SVD};

use crate::market_data::ReturnMatrix;
use crate::{Error, Result};

/// Singular values below this fraction of the largest are treated as numerical zeros.
pub const SINGULAR_VALUE_FLOOR: f64 = 1e-12;

/// Compact SVD `X = U diag(σ) Vᵀ` with `σ` descending.
///
/// Each singular pair is sign-normalized so that the largest-magnitude entry
/// of `u_i` is positive, which makes the decomposition a deterministic
/// function of `X`.
#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    u: DMatrix<f64>,
    singular_values: DVector<f64>,
    v: DMatrix<f64>,
}

impl SpectralDecomposition {
    /// `N x M` left singular vectors.
    pub fn u(&self) -> &DMatrix<f64> {
        &self.u
    }

    /// `T x M` right singular vectors.
    pub fn v(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn singular_values(&self) -> &DVector<f64> {
        &self.singular_values
    }

    /// Singular values with everything below `1e-12 σ₁` raised to that floor.
    pub fn floored_singular_values(&self) -> DVector<f64> {
        let floor = SINGULAR_VALUE_FLOOR * self.singular_values[0];
        self.singular_values.map(|s| s.max(floor))
    }

    /// `M = min(N, T)`.
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut us = self.u.clone();
        for (j, &s) in self.singular_values.iter().enumerate() {
            us.column_mut(j).scale_mut(s);
        }
        us * self.v.transpose()
    }
}

pub fn decompose(train: &ReturnMatrix) -> Result<SpectralDecomposition> {
    decompose_matrix(train.values())
}

pub fn decompose_matrix(x: &DMatrix<f64>) -> Result<SpectralDecomposition> {
    let (n, t) = x.shape();
    if n < 2 || t < 2 {
        return Err(Error::InsufficientData(format!(
            "SVD needs at least a 2 x 2 matrix, got {n} x {t}"
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("matrix has non-finite entries".into()));
    }
    if x.iter().all(|&v| v == 0.0) {
        return Err(Error::Degenerate("matrix is identically zero".into()));
    }

    let svd = SVD::new(x.clone(), true, true);
    let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
        return Err(Error::Degenerate(
            "SVD did not produce singular vectors".into(),
        ));
    };
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    let m = order.len();
    let mut u_sorted = DMatrix::zeros(n, m);
    let mut v_sorted = DMatrix::zeros(t, m);
    let mut sigma = DVector::zeros(m);
    for (dst, &src) in order.iter().enumerate() {
        let mut ucol = u.column(src).into_owned();
        let mut vcol = v_t.row(src).transpose();
        let pivot = ucol
            .iter()
            .copied()
            .fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if pivot < 0.0 {
            ucol.neg_mut();
            vcol.neg_mut();
        }
        u_sorted.set_column(dst, &ucol);
        v_sorted.set_column(dst, &vcol);
        sigma[dst] = svd.singular_values[src].max(0.0);
    }
    Ok(SpectralDecomposition {
        u: u_sorted,
        singular_values: sigma,
        v: v_sorted,
    })
}

/// `u_k u_kᵀ X` for the 1-based factor index `k`, which equals `σ_k u_k v_kᵀ`.
pub fn extract_single_factor(
    decomp: &SpectralDecomposition,
    x: &DMatrix<f64>,
    k: usize,
) -> Result<DMatrix<f64>> {
    if k == 0 || k > decomp.rank() {
        return Err(Error::Index {
            index: k,
            max: decomp.rank(),
        });
    }
    if x.nrows() != decomp.u.nrows() {
        return Err(Error::Shape {
            expected: (decomp.u.nrows(), x.ncols()),
            found: x.shape(),
        });
    }
    let u = decomp.u.column(k - 1);
    Ok(u * (u.transpose() * x))
}

/// Outcome of the factor-count search.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorSelection {
    pub k: usize,
    /// `(k, IC_k)` for every admissible `k` in `0..=k_max`.
    pub ic_curve: Vec<(usize, f64)>,
    /// Values of `k` skipped because the residual energy was zero.
    pub excluded: Vec<usize>,
}

/// Default cap on the number of removed factors: `min(⌊M/2⌋, 30)`.
pub fn default_k_max(rank: usize) -> usize {
    (rank / 2).min(30)
}

/// Minimizes `IC_k = log Σ_{i>k} σ_i² + k log(M)/M` over `0 ≤ k ≤ k_max`.
pub fn select_k(decomp: &SpectralDecomposition, k_max: usize) -> Result<FactorSelection> {
    let m = decomp.rank();
    if k_max == 0 || k_max >= m {
        return Err(Error::Config(format!(
            "k_max must satisfy 0 < k_max < M = {m}, got {k_max}"
        )));
    }
    // tail[k] = Σ_{i >= k} σ_i² (0-based), summed from the smallest upward.
    let mut tail = vec![0.0; m + 1];
    for i in (0..m).rev() {
        tail[i] = tail[i + 1] + decomp.singular_values[i].powi(2);
    }
    let penalty = (m as f64).ln() / m as f64;
    let mut ic_curve = Vec::with_capacity(k_max + 1);
    let mut excluded = Vec::new();
    for (k, &energy) in tail.iter().enumerate().take(k_max + 1) {
        if energy > 0.0 && energy.is_finite() {
            ic_curve.push((k, energy.ln() + k as f64 * penalty));
        } else {
            log::warn!("IC_{k} undefined: residual energy is zero; excluded");
            excluded.push(k);
        }
    }
    let &(k, _) = ic_curve
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .ok_or_else(|| Error::Degenerate("no admissible factor count".into()))?;
    Ok(FactorSelection {
        k,
        ic_curve,
        excluded,
    })
}

/// `W_PCA = I - U_k U_kᵀ`, the projector removing the first `k` principal factors.
#[derive(Debug, Clone)]
pub struct PcaProjector {
    pub k: usize,
    pub matrix: DMatrix<f64>,
    pub ic_curve: Vec<(usize, f64)>,
}

pub fn build_projector(decomp: &SpectralDecomposition, k: usize) -> Result<PcaProjector> {
    if k > decomp.rank() {
        return Err(Error::Index {
            index: k,
            max: decomp.rank(),
        });
    }
    let n = decomp.u.nrows();
    let uk = decomp.u.columns(0, k);
    let mut matrix = DMatrix::identity(n, n) - uk * uk.transpose();
    crate::linalg::symmetrize(&mut matrix);
    Ok(PcaProjector {
        k,
        matrix,
        ic_curve: Vec::new(),
    })
}

/// `Z = W_PCA X`.
pub fn apply_projector(proj: &PcaProjector, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.nrows() != proj.matrix.ncols() {
        return Err(Error::Shape {
            expected: (proj.matrix.ncols(), x.ncols()),
            found: x.shape(),
        });
    }
    Ok(&proj.matrix * x)
}

/// Decompose, select `k` (default cap when `k_max` is `None`) and build the projector.
pub fn fit_pca(
    train: &ReturnMatrix,
    k_max: Option<usize>,
) -> Result<(SpectralDecomposition, PcaProjector)> {
    let decomp = decompose(train)?;
    let k_max = k_max
        .unwrap_or_else(|| default_k_max(decomp.rank()))
        .min(decomp.rank() - 1);
    let selection = select_k(&decomp, k_max)?;
    let mut proj = build_projector(&decomp, selection.k)?;
    proj.ic_curve = selection.ic_curve;
    Ok((decomp, proj))
}

pub fn write_ic_curve_csv<W: Write>(curve: &[(usize, f64)], writer: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(["k", "ic"])?;
    for (k, ic) in curve {
        out.write_record([k.to_string(), format!("{ic:?}")])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(n: usize, t: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, t, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Decomposition with the given singular values and random orthonormal factors.
    fn with_singular_values(sigma: &[f64], n: usize, t: usize) -> SpectralDecomposition {
        let q_left = random_matrix(n, n, 1).qr().q();
        let q_right = random_matrix(t, t, 2).qr().q();
        let m = sigma.len();
        let x = q_left.columns(0, m)
            * DMatrix::from_diagonal(&DVector::from_row_slice(sigma))
            * q_right.columns(0, m).transpose();
        decompose_matrix(&x).unwrap()
    }

    #[test]
    fn diagonal_matrix_is_its_own_svd() {
        let x = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 1.0]);
        let d = decompose_matrix(&x).unwrap();
        assert!((d.singular_values()[0] - 3.0).abs() < 1e-14);
        assert!((d.singular_values()[1] - 1.0).abs() < 1e-14);
        assert!((d.u().abs() - DMatrix::identity(2, 2)).norm() < 1e-14);
        assert!((d.v().abs() - DMatrix::identity(2, 2)).norm() < 1e-14);
    }

    #[test]
    fn rank_one_matrix_floors_trailing_value() {
        let u = DVector::from_vec(vec![0.6, 0.8]);
        let v = DVector::from_vec(vec![1.0, 2.0, 2.0]) / 3.0;
        let x = &u * v.transpose() * 5.0;
        let d = decompose_matrix(&x).unwrap();
        assert!((d.singular_values()[0] - 5.0).abs() < 1e-13);
        assert!(d.singular_values()[1] < 1e-12);
        assert_eq!(
            d.floored_singular_values()[1],
            SINGULAR_VALUE_FLOOR * d.singular_values()[0]
        );
    }

    #[test]
    fn random_reconstruction_and_orthonormality() {
        let x = random_matrix(4, 6, 7);
        let d = decompose_matrix(&x).unwrap();
        assert_eq!(d.rank(), 4);
        assert!((d.reconstruct() - &x).norm() / x.norm() <= 1e-8);
        assert!((d.u().transpose() * d.u() - DMatrix::identity(4, 4)).norm() <= 1e-10);
        assert!((d.v().transpose() * d.v() - DMatrix::identity(4, 4)).norm() <= 1e-10);
        assert!(d
            .singular_values()
            .as_slice()
            .windows(2)
            .all(|w| w[0] >= w[1]));
        let wide = random_matrix(6, 4, 8);
        assert!(
            (decompose_matrix(&wide).unwrap().reconstruct() - &wide).norm() / wide.norm() <= 1e-8
        );
    }

    #[test]
    fn zero_matrix_is_degenerate() {
        assert!(matches!(
            decompose_matrix(&DMatrix::zeros(3, 4)),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn single_factor_extraction() {
        let x = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 1.0]);
        let d = decompose_matrix(&x).unwrap();
        let f = extract_single_factor(&d, &x, 1).unwrap();
        assert!((f - DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 0.0])).norm() < 1e-14);
        assert!(matches!(
            extract_single_factor(&d, &x, 0),
            Err(Error::Index { .. })
        ));
        assert!(matches!(
            extract_single_factor(&d, &x, 3),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn extracted_factors_match_outer_products_and_sum_to_x() {
        let x = random_matrix(5, 8, 11);
        let d = decompose_matrix(&x).unwrap();
        let direct = d.u().column(1) * d.v().column(1).transpose() * d.singular_values()[1];
        assert!((extract_single_factor(&d, &x, 2).unwrap() - direct).norm() <= 1e-10);
        let total = (1..=d.rank()).fold(DMatrix::zeros(5, 8), |acc, k| {
            acc + extract_single_factor(&d, &x, k).unwrap()
        });
        assert!((total - &x).norm() <= 1e-8);
    }

    /// Direct evaluation of the information criterion from squared singular values.
    fn ic_oracle(sigma_sq: &[f64], k: usize) -> f64 {
        let m = sigma_sq.len() as f64;
        sigma_sq[k..].iter().sum::<f64>().ln() + k as f64 * m.ln() / m
    }

    #[test]
    fn ic_small_example() {
        let d = with_singular_values(&[10.0, 1.0, 1.0, 1.0], 4, 6);
        let sel = select_k(&d, 2).unwrap();
        assert_eq!(sel.k, 2);
        let expected = [4.634729, 1.445186, 1.386294];
        for ((k, ic), want) in sel.ic_curve.iter().zip(expected) {
            assert!((ic - want).abs() < 1e-5, "IC_{k} = {ic}, want {want}");
        }
    }

    #[test]
    fn ic_flat_spectrum_selects_zero() {
        let d = with_singular_values(&[1.0; 20], 20, 25);
        assert_eq!(select_k(&d, 3).unwrap().k, 0);
    }

    #[test]
    fn ic_single_dominant_factor() {
        let mut sigma = vec![1.0; 50];
        sigma[0] = 100.0;
        let d = with_singular_values(&sigma, 50, 60);
        let sel = select_k(&d, 10).unwrap();
        let sq: Vec<f64> = sigma.iter().map(|s| s * s).collect();
        let brute = (0..=10)
            .min_by(|&a, &b| ic_oracle(&sq, a).total_cmp(&ic_oracle(&sq, b)))
            .unwrap();
        assert_eq!(brute, 1);
        assert_eq!(sel.k, 1);
    }

    #[test]
    fn ic_excludes_zero_energy_tail() {
        let x = DMatrix::from_row_slice(3, 3, &[2.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let d = decompose_matrix(&x).unwrap();
        let sel = select_k(&d, 2).unwrap();
        assert_eq!(sel.excluded, vec![2]);
        assert_eq!(sel.ic_curve.len(), 2);
    }

    #[test]
    fn k_max_must_be_inside_rank() {
        let d = decompose_matrix(&random_matrix(4, 6, 3)).unwrap();
        assert!(select_k(&d, 0).is_err());
        assert!(select_k(&d, 4).is_err());
        assert_eq!(default_k_max(4), 2);
        assert_eq!(default_k_max(500), 30);
    }

    #[test]
    fn ic_shift_under_rescaling() {
        let x = random_matrix(6, 12, 5);
        let a = select_k(&decompose_matrix(&x).unwrap(), 3).unwrap();
        let b = select_k(&decompose_matrix(&(&x * 7.5)).unwrap(), 3).unwrap();
        assert_eq!(a.k, b.k);
        for ((_, ia), (_, ib)) in a.ic_curve.iter().zip(&b.ic_curve) {
            assert!((ib - ia - 2.0 * 7.5f64.ln()).abs() < 1e-10);
        }
    }

    #[test]
    fn projector_examples() {
        let d = decompose_matrix(&random_matrix(3, 5, 9)).unwrap();
        let p0 = build_projector(&d, 0).unwrap();
        assert_eq!(p0.matrix, DMatrix::identity(3, 3));

        let x = DMatrix::from_row_slice(
            3,
            4,
            &[5.0, 4.0, -5.0, 3.0, 0.1, 0.0, 0.0, 0.0, 0.0, 0.2, 0.0, 0.0],
        );
        let d = decompose_matrix(&x).unwrap();
        assert!((d.u().column(0).abs() - DVector::from_vec(vec![1.0, 0.0, 0.0])).norm() < 2e-2);
        let full = build_projector(&d, 3).unwrap();
        assert!(apply_projector(&full, &x).unwrap().norm() < 1e-10);
    }

    #[test]
    fn canonical_direction_projector() {
        let x = DMatrix::from_row_slice(3, 3, &[9.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 1.0]);
        let d = decompose_matrix(&x).unwrap();
        let p = build_projector(&d, 1).unwrap();
        assert!(
            (&p.matrix - DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 1.0, 1.0]))).norm()
                < 1e-14
        );
        let ones = DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 1.0, 0.5, 0.0, 2.0, 3.0, 1.0, 0.0]);
        let z = apply_projector(&p, &ones).unwrap();
        assert!(z.row(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn projector_is_idempotent_and_annihilates_removed_factors() {
        let x = random_matrix(8, 20, 21);
        let d = decompose_matrix(&x).unwrap();
        let p = build_projector(&d, 3).unwrap();
        assert!((&p.matrix * &p.matrix - &p.matrix).norm() <= 1e-10);
        assert!((p.matrix.trace() - 5.0).abs() <= 1e-8);
        let z = apply_projector(&p, &x).unwrap();
        assert!((d.u().columns(0, 3).transpose() * &z).norm() <= 1e-10);
        assert!((apply_projector(&p, &z).unwrap() - &z).norm() <= 1e-10);
        assert!(apply_projector(&p, &DMatrix::zeros(7, 2)).is_err());
    }

    #[test]
    fn projector_ignores_singular_vector_signs() {
        let x = random_matrix(6, 10, 4);
        let d = decompose_matrix(&x).unwrap();
        let mut flipped = d.clone();
        flipped.u.column_mut(1).neg_mut();
        flipped.v.column_mut(1).neg_mut();
        let a = build_projector(&d, 2).unwrap().matrix;
        let b = build_projector(&flipped, 2).unwrap().matrix;
        assert!((a - b).norm() <= 1e-10);
        assert!((flipped.reconstruct() - &x).norm() <= 1e-10);
    }
}
