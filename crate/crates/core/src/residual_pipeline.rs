//! Residual transforms: PCA removal, GGM conditional-mean removal on top of
//! it, and the whitening baselines, all as fixed linear maps `R = W X`.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::baselines::{fit_shrinkage_zca, fit_zca};
use crate::market_data::ReturnMatrix;
use crate::mtp2_ggm::{self, PrecisionEstimate, SolverSettings};
use crate::spectral_factor::{apply_projector, fit_pca, PcaProjector};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Pca,
    PcaGgm,
    Zca,
    ShrinkageZca,
    /// Excess return over the equal-weighted cross-sectional mean.
    MarketExcess,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Pca,
        Method::PcaGgm,
        Method::Zca,
        Method::ShrinkageZca,
        Method::MarketExcess,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Pca => "pca",
            Method::PcaGgm => "pca_ggm",
            Method::Zca => "zca",
            Method::ShrinkageZca => "shrinkage_zca",
            Method::MarketExcess => "market_excess",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// Anything that maps a return panel through a fixed `N x N` matrix.
pub trait LinearResidualizer {
    fn matrix(&self) -> &DMatrix<f64>;
    fn assets(&self) -> &[String];

    fn residualize(&self, x: &ReturnMatrix) -> Result<ResidualMatrix> {
        if x.assets() != self.assets() {
            return Err(Error::Alignment(format!(
                "transform was fitted on {} assets that differ from the {} assets supplied",
                self.assets().len(),
                x.n_assets()
            )));
        }
        Ok(ResidualMatrix {
            assets: x.assets().to_vec(),
            dates: x.dates().to_vec(),
            values: self.matrix() * x.values(),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Provenance {
    pub train_label: String,
    pub k: Option<usize>,
    pub solver_iterations: Option<usize>,
    pub solver_converged: Option<bool>,
    pub diagnostics: Vec<String>,
    pub shrinkage_coefficient: Option<f64>,
}

/// A fitted residual map. For `pca_ggm`, `w = w_ggm · w_pca`.
#[derive(Debug, Clone)]
pub struct ResidualTransform {
    pub method: Method,
    pub assets: Vec<String>,
    pub w: DMatrix<f64>,
    pub w_pca: Option<DMatrix<f64>>,
    pub w_ggm: Option<DMatrix<f64>>,
    pub lambda: Option<DMatrix<f64>>,
    pub provenance: Provenance,
}

impl LinearResidualizer for ResidualTransform {
    fn matrix(&self) -> &DMatrix<f64> {
        &self.w
    }

    fn assets(&self) -> &[String] {
        &self.assets
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualMatrix {
    pub assets: Vec<String>,
    pub dates: Vec<chrono::NaiveDate>,
    pub values: DMatrix<f64>,
}

/// `D⁻¹ Λ`: each row of `Λ` divided by its diagonal entry.
pub fn build_ggm_transform(lambda: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    crate::linalg::ensure_square(lambda)?;
    let n = lambda.nrows();
    if let Some(i) = (0..n).find(|&i| !(lambda[(i, i)] > 0.0)) {
        return Err(Error::Domain(format!(
            "precision diagonal entry {i} is {}",
            lambda[(i, i)]
        )));
    }
    let mut w = DMatrix::from_fn(n, n, |i, j| lambda[(i, j)] / lambda[(i, i)]);
    for i in 0..n {
        w[(i, i)] = 1.0;
    }
    Ok(w)
}

/// `E[z_i | z_{-i}] = -Σ_{j≠i} (Λ_ij / Λ_ii) z_j`.
pub fn conditional_mean(lambda: &DMatrix<f64>, z: &DVector<f64>, i: usize) -> Result<f64> {
    let n = lambda.nrows();
    if i >= n {
        return Err(Error::Index {
            index: i,
            max: n.saturating_sub(1),
        });
    }
    if z.len() != n {
        return Err(Error::Shape {
            expected: (n, 1),
            found: (z.len(), 1),
        });
    }
    let d = lambda[(i, i)];
    Ok(-(0..n)
        .filter(|&j| j != i)
        .map(|j| lambda[(i, j)] / d * z[j])
        .sum::<f64>())
}

/// `W = W_GGM · W_PCA`.
pub fn compose(pca: &PcaProjector, w_ggm: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if w_ggm.ncols() != pca.matrix.nrows() {
        return Err(Error::Shape {
            expected: pca.matrix.shape(),
            found: w_ggm.shape(),
        });
    }
    Ok(w_ggm * &pca.matrix)
}

/// Options shared by every fitting method.
#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    pub k_max: Option<usize>,
    pub solver: SolverSettings,
}

/// A fitted `pca_ggm` transform together with its precision estimate.
pub fn fit_pca_ggm(
    train: &ReturnMatrix,
    label: &str,
    options: &FitOptions,
) -> Result<(ResidualTransform, PrecisionEstimate)> {
    let (_, pca) = fit_pca(train, options.k_max)?;
    let z = apply_projector(&pca, train.values())?;
    let est = mtp2_ggm::fit(&z, &options.solver)?;
    let w_ggm = build_ggm_transform(&est.lambda)?;
    let w = compose(&pca, &w_ggm)?;
    let transform = ResidualTransform {
        method: Method::PcaGgm,
        assets: train.assets().to_vec(),
        w,
        w_pca: Some(pca.matrix),
        w_ggm: Some(w_ggm),
        lambda: Some(est.lambda.clone()),
        provenance: Provenance {
            train_label: label.to_string(),
            k: Some(pca.k),
            solver_iterations: Some(est.iterations),
            solver_converged: Some(est.converged),
            diagnostics: est.diagnostics.clone(),
            shrinkage_coefficient: None,
        },
    };
    Ok((transform, est))
}

/// Fits `method` on the training window.
pub fn fit_transform(
    method: Method,
    train: &ReturnMatrix,
    label: &str,
    options: &FitOptions,
) -> Result<ResidualTransform> {
    let base = |w: DMatrix<f64>, provenance: Provenance| ResidualTransform {
        method,
        assets: train.assets().to_vec(),
        w,
        w_pca: None,
        w_ggm: None,
        lambda: None,
        provenance: Provenance {
            train_label: label.to_string(),
            ..provenance
        },
    };
    match method {
        Method::Pca => {
            let (_, pca) = fit_pca(train, options.k_max)?;
            let k = Some(pca.k);
            let mut t = base(
                pca.matrix.clone(),
                Provenance {
                    k,
                    ..Provenance::default()
                },
            );
            t.w_pca = Some(pca.matrix);
            Ok(t)
        }
        Method::PcaGgm => fit_pca_ggm(train, label, options).map(|(t, _)| t),
        Method::Zca | Method::ShrinkageZca => {
            let white = if method == Method::Zca {
                fit_zca(train)?
            } else {
                fit_shrinkage_zca(train)?
            };
            let provenance = Provenance {
                shrinkage_coefficient: Some(white.shrinkage_coefficient),
                ..Provenance::default()
            };
            Ok(base(white.matrix, provenance))
        }
        Method::MarketExcess => {
            let n = train.n_assets();
            let w = DMatrix::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64);
            Ok(base(w, Provenance::default()))
        }
    }
}

// Dump layout, one item per line, whitespace separated:
//
//   resfactor-transform 1
//   method <name>
//   label <rest of line>
//   k <integer or ->
//   assets <N>
//   <ticker>            (N lines)
//   matrix <name> <N>   (name is w, w_pca, w_ggm or lambda; absent ones omitted)
//   <N numbers>         (N lines, row-major, shortest round-trip formatting)
//   end

const DUMP_MAGIC: &str = "resfactor-transform 1";

impl ResidualTransform {
    pub fn write_dump<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{DUMP_MAGIC}")?;
        writeln!(out, "method {}", self.method)?;
        writeln!(out, "label {}", self.provenance.train_label)?;
        match self.provenance.k {
            Some(k) => writeln!(out, "k {k}")?,
            None => writeln!(out, "k -")?,
        }
        writeln!(out, "assets {}", self.assets.len())?;
        for a in &self.assets {
            writeln!(out, "{a}")?;
        }
        let matrices = [
            ("w", Some(&self.w)),
            ("w_pca", self.w_pca.as_ref()),
            ("w_ggm", self.w_ggm.as_ref()),
            ("lambda", self.lambda.as_ref()),
        ];
        for (name, m) in matrices {
            let Some(m) = m else { continue };
            writeln!(out, "matrix {name} {}", m.nrows())?;
            for row in m.row_iter() {
                let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
                writeln!(out, "{}", line.join(" "))?;
            }
        }
        writeln!(out, "end")?;
        Ok(())
    }

    pub fn read_dump<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines().enumerate().map(|(i, l)| (i as u64 + 1, l));
        let mut next = |what: &str| -> Result<(u64, String)> {
            match lines.next() {
                Some((n, Ok(l))) => Ok((n, l)),
                Some((_, Err(e))) => Err(e.into()),
                None => Err(Error::parse(
                    0,
                    format!("unexpected end of dump, expected {what}"),
                )),
            }
        };
        let field = |(n, line): (u64, String), key: &str| -> Result<(u64, String)> {
            line.strip_prefix(key)
                .and_then(|rest| rest.strip_prefix(' ').or(rest.is_empty().then_some("")))
                .map(|rest| (n, rest.to_string()))
                .ok_or_else(|| Error::parse(n, format!("expected {key:?}")))
        };

        let (n, magic) = next("header")?;
        if magic != DUMP_MAGIC {
            return Err(Error::parse(n, "not a transform dump"));
        }
        let (n, method) = field(next("method")?, "method")?;
        let method = method
            .parse::<Method>()
            .map_err(|e| Error::parse(n, e.to_string()))?;
        let (_, label) = field(next("label")?, "label")?;
        let (n, k) = field(next("k")?, "k")?;
        let k = match k.as_str() {
            "-" => None,
            s => Some(
                s.parse::<usize>()
                    .map_err(|e| Error::parse(n, e.to_string()))?,
            ),
        };
        let (n, count) = field(next("assets")?, "assets")?;
        let count: usize = count
            .parse()
            .map_err(|e: std::num::ParseIntError| Error::parse(n, e.to_string()))?;
        let mut assets = Vec::with_capacity(count);
        for _ in 0..count {
            assets.push(next("ticker")?.1);
        }

        let mut transform = ResidualTransform {
            method,
            assets,
            w: DMatrix::zeros(0, 0),
            w_pca: None,
            w_ggm: None,
            lambda: None,
            provenance: Provenance {
                train_label: label,
                k,
                ..Provenance::default()
            },
        };
        let mut saw_w = false;
        loop {
            let (n, line) = next("matrix or end")?;
            if line == "end" {
                break;
            }
            let (_, rest) = field((n, line), "matrix")?;
            let mut parts = rest.split_whitespace();
            let name = parts.next().unwrap_or_default().to_string();
            let size: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::parse(n, "matrix header needs a name and a size"))?;
            if size != count {
                return Err(Error::parse(
                    n,
                    format!("matrix size {size} does not match {count} assets"),
                ));
            }
            let mut values = Vec::with_capacity(size * size);
            for _ in 0..size {
                let (n, row) = next("matrix row")?;
                let parsed: std::result::Result<Vec<f64>, _> =
                    row.split_whitespace().map(str::parse::<f64>).collect();
                let parsed = parsed.map_err(|e| Error::parse(n, e.to_string()))?;
                if parsed.len() != size {
                    return Err(Error::parse(
                        n,
                        format!("expected {size} values, found {}", parsed.len()),
                    ));
                }
                values.extend(parsed);
            }
            let m = DMatrix::from_row_slice(size, size, &values);
            match name.as_str() {
                "w" => {
                    transform.w = m;
                    saw_w = true;
                }
                "w_pca" => transform.w_pca = Some(m),
                "w_ggm" => transform.w_ggm = Some(m),
                "lambda" => transform.lambda = Some(m),
                other => return Err(Error::parse(n, format!("unknown matrix {other:?}"))),
            }
        }
        if !saw_w {
            return Err(Error::parse(0, "dump has no w matrix"));
        }
        Ok(transform)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral_factor::{build_projector, decompose_matrix};
    use crate::synthetic::{generate_returns, SyntheticSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(n: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(n, n, v)
    }

    fn random_m_matrix(n: usize, rng: &mut impl Rng) -> DMatrix<f64> {
        let mut a = DMatrix::from_fn(n, n, |i, j| {
            if i < j {
                -rng.random_range(0.0..1.0)
            } else {
                0.0
            }
        });
        a = &a + a.transpose();
        for i in 0..n {
            a[(i, i)] = -a.row(i).sum() + rng.random_range(0.1..1.0);
        }
        a
    }

    #[test]
    fn ggm_transform_examples() {
        let w = build_ggm_transform(&m(2, &[2.0, -1.0, -1.0, 2.0])).unwrap();
        assert_eq!(w, m(2, &[1.0, -0.5, -0.5, 1.0]));
        assert_eq!(
            build_ggm_transform(&m(2, &[3.0, 0.0, 0.0, 7.0])).unwrap(),
            DMatrix::identity(2, 2)
        );
        let lambda = m(3, &[4.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 4.0]);
        let w = build_ggm_transform(&lambda).unwrap();
        assert_eq!(
            w,
            m(3, &[1.0, -0.25, 0.0, -0.5, 1.0, -0.5, 0.0, -0.25, 1.0])
        );
        assert!(matches!(
            build_ggm_transform(&m(2, &[0.0, 0.0, 0.0, 1.0])),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn conditional_mean_examples() {
        let lambda = m(2, &[2.0, -1.0, -1.0, 2.0]);
        let z = DVector::from_vec(vec![1.0, 0.0]);
        assert_eq!(
            conditional_mean(&lambda, &DVector::from_vec(vec![0.0, 1.0]), 0).unwrap(),
            0.5
        );
        assert_eq!(conditional_mean(&lambda, &z, 1).unwrap(), 0.5);
        let diag = m(2, &[2.0, 0.0, 0.0, 5.0]);
        assert_eq!(conditional_mean(&diag, &z, 1).unwrap(), 0.0);
        assert!(matches!(
            conditional_mean(&lambda, &z, 2),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn conditional_mean_agrees_with_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let lambda = random_m_matrix(5, &mut rng);
            let z = DVector::from_fn(5, |_, _| rng.random_range(-1.0..1.0));
            let wz = build_ggm_transform(&lambda).unwrap() * &z;
            for i in 0..5 {
                let resid = z[i] - conditional_mean(&lambda, &z, i).unwrap();
                assert!((resid - wz[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn compose_examples() {
        let x = DMatrix::from_row_slice(
            3,
            4,
            &[
                1.0, 0.2, -0.3, 0.5, 0.1, 0.9, 0.4, -0.2, -0.5, 0.3, 0.8, 0.1,
            ],
        );
        let decomp = decompose_matrix(&x).unwrap();
        let id = DMatrix::identity(3, 3);
        let k0 = build_projector(&decomp, 0).unwrap();
        assert_eq!(compose(&k0, &id).unwrap(), id);
        let k1 = build_projector(&decomp, 1).unwrap();
        assert_eq!(compose(&k1, &id).unwrap(), k1.matrix);
        let w_ggm =
            build_ggm_transform(&m(3, &[4.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 4.0])).unwrap();
        let w = compose(&k1, &w_ggm).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let oracle: f64 = (0..3).map(|l| w_ggm[(i, l)] * k1.matrix[(l, j)]).sum();
                assert!((w[(i, j)] - oracle).abs() < 1e-12);
            }
        }
        assert!(compose(&k1, &DMatrix::identity(2, 2)).is_err());
    }

    fn sample_returns() -> ReturnMatrix {
        let spec = SyntheticSpec {
            n_assets: 12,
            n_periods: 300,
            sector_blocks: 3,
            ..SyntheticSpec::default()
        };
        generate_returns(&spec).unwrap()
    }

    #[test]
    fn pca_ggm_transform_invariants() {
        let x = sample_returns();
        let (t, _) = fit_pca_ggm(&x, "train", &FitOptions::default()).unwrap();
        let w_ggm = t.w_ggm.as_ref().unwrap();
        let w_pca = t.w_pca.as_ref().unwrap();
        for i in 0..12 {
            assert_eq!(w_ggm[(i, i)], 1.0);
            for j in 0..12 {
                if i != j {
                    assert!(w_ggm[(i, j)] <= 0.0);
                }
            }
        }
        assert!((w_ggm * w_pca - &t.w).amax() <= 1e-12);

        let r = t.residualize(&x).unwrap();
        assert!((&r.values - &t.w * x.values()).amax() <= 1e-10);
        let z = w_pca * x.values();
        assert!((&r.values - w_ggm * z).amax() <= 1e-12);
    }

    #[test]
    fn residualize_requires_matching_assets() {
        let x = sample_returns();
        let t = fit_transform(Method::Pca, &x, "train", &FitOptions::default()).unwrap();
        let fewer = x.select_assets(&[0, 1, 2]).unwrap();
        assert!(matches!(t.residualize(&fewer), Err(Error::Alignment(_))));
    }

    #[test]
    fn annihilates_factor_span() {
        let x = sample_returns();
        let t = fit_transform(Method::Pca, &x, "train", &FitOptions::default()).unwrap();
        let k = t.provenance.k.unwrap();
        assert!(k >= 1);
        let decomp = decompose_matrix(x.values()).unwrap();
        let u1 = decomp.u().column(0);
        assert!((&t.w * u1).amax() < 1e-10);
    }

    #[test]
    fn every_method_fits() {
        let x = sample_returns();
        for method in Method::ALL {
            let t = fit_transform(method, &x, "w", &FitOptions::default()).unwrap();
            assert_eq!(t.method, method);
            assert_eq!(t.w.shape(), (12, 12));
        }
        let t = fit_transform(Method::MarketExcess, &x, "w", &FitOptions::default()).unwrap();
        let r = t.residualize(&x).unwrap();
        assert!(
            r.values.row_sum().amax() < 1e-14,
            "{}",
            r.values.row_sum().amax()
        );
    }

    #[test]
    fn method_names_round_trip() {
        for method in Method::ALL {
            assert_eq!(method.name().parse::<Method>().unwrap(), method);
        }
        assert!("ica".parse::<Method>().is_err());
    }

    #[test]
    fn dump_round_trip() {
        let x = sample_returns();
        for method in [Method::PcaGgm, Method::Zca] {
            let t =
                fit_transform(method, &x, "train 2015/01-2015/12", &FitOptions::default()).unwrap();
            let mut buf = Vec::new();
            t.write_dump(&mut buf).unwrap();
            let back = ResidualTransform::read_dump(buf.as_slice()).unwrap();
            assert_eq!(back.method, t.method);
            assert_eq!(back.assets, t.assets);
            assert_eq!(back.w, t.w);
            assert_eq!(back.lambda, t.lambda);
            assert_eq!(back.provenance.train_label, t.provenance.train_label);
            assert_eq!(back.provenance.k, t.provenance.k);
        }
        assert!(ResidualTransform::read_dump("junk\n".as_bytes()).is_err());
    }
}
