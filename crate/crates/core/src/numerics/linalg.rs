//! Covariance parameterizations shared by the mixed and joint models.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Structure of the random-effects covariance matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CovStructure {
    Diagonal,
    #[default]
    Unstructured,
}

impl CovStructure {
    pub fn n_params(self, q: usize) -> usize {
        match self {
            CovStructure::Diagonal => q,
            CovStructure::Unstructured => q * (q + 1) / 2,
        }
    }

    /// Coordinate labels, e.g. `log_chol[1,1]`, `chol[2,1]`.
    pub fn labels(self, q: usize) -> Vec<String> {
        match self {
            CovStructure::Diagonal => (0..q).map(|i| format!("log_chol[{i},{i}]")).collect(),
            CovStructure::Unstructured => {
                let mut out = Vec::new();
                for i in 0..q {
                    for j in 0..=i {
                        if i == j {
                            out.push(format!("log_chol[{i},{i}]"));
                        } else {
                            out.push(format!("chol[{i},{j}]"));
                        }
                    }
                }
                out
            }
        }
    }
}

/// Lower Cholesky factor from log-Cholesky coordinates (diagonal on log scale).
pub fn chol_from_params(params: &[f64], q: usize, structure: CovStructure) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(q, q);
    match structure {
        CovStructure::Diagonal => {
            for i in 0..q {
                l[(i, i)] = params[i].exp();
            }
        }
        CovStructure::Unstructured => {
            let mut k = 0;
            for i in 0..q {
                for j in 0..=i {
                    l[(i, j)] = if i == j { params[k].exp() } else { params[k] };
                    k += 1;
                }
            }
        }
    }
    l
}

pub fn cov_from_params(params: &[f64], q: usize, structure: CovStructure) -> DMatrix<f64> {
    let l = chol_from_params(params, q, structure);
    &l * l.transpose()
}

pub fn params_from_cov(d: &DMatrix<f64>, structure: CovStructure) -> Result<Vec<f64>> {
    let q = d.nrows();
    match structure {
        CovStructure::Diagonal => (0..q)
            .map(|i| {
                if d[(i, i)] > 0.0 {
                    Ok(0.5 * d[(i, i)].ln())
                } else {
                    Err(Error::Numerical(
                        "covariance diagonal must be positive".into(),
                    ))
                }
            })
            .collect(),
        CovStructure::Unstructured => {
            let chol = d
                .clone()
                .cholesky()
                .ok_or_else(|| Error::Numerical("covariance is not positive definite".into()))?;
            let l = chol.l();
            let mut out = Vec::with_capacity(q * (q + 1) / 2);
            for i in 0..q {
                for j in 0..=i {
                    out.push(if i == j { l[(i, i)].ln() } else { l[(i, j)] });
                }
            }
            Ok(out)
        }
    }
}

/// Gradient of `f(D)` with respect to log-Cholesky coordinates, given the
/// lower factor `l` and the gradient `g_l = ∂f/∂L` (lower triangle used).
pub fn chol_param_gradient(
    l: &DMatrix<f64>,
    g_l: &DMatrix<f64>,
    structure: CovStructure,
) -> Vec<f64> {
    let q = l.nrows();
    match structure {
        CovStructure::Diagonal => (0..q).map(|i| g_l[(i, i)] * l[(i, i)]).collect(),
        CovStructure::Unstructured => {
            let mut out = Vec::with_capacity(q * (q + 1) / 2);
            for i in 0..q {
                for j in 0..=i {
                    out.push(if i == j {
                        g_l[(i, i)] * l[(i, i)]
                    } else {
                        g_l[(i, j)]
                    });
                }
            }
            out
        }
    }
}

/// Serde adapter storing a matrix as a list of rows.
pub mod rows {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = (0..m.nrows())
            .map(|i| m.row(i).iter().copied().collect())
            .collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let n = rows.len();
        let m = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != m) {
            return Err(serde::de::Error::custom("ragged matrix rows"));
        }
        Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let d = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.0, -0.2, 0.1, -0.2, 0.5]);
        let p = params_from_cov(&d, CovStructure::Unstructured).unwrap();
        assert_eq!(p.len(), 6);
        let back = cov_from_params(&p, 3, CovStructure::Unstructured);
        assert!((back - &d).abs().max() < 1e-12);
        let dd = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![0.49, 4.52]));
        let p = params_from_cov(&dd, CovStructure::Diagonal).unwrap();
        assert!(
            (cov_from_params(&p, 2, CovStructure::Diagonal) - dd)
                .abs()
                .max()
                < 1e-12
        );
        assert_eq!(
            CovStructure::Unstructured.labels(2),
            vec!["log_chol[0,0]", "chol[1,0]", "log_chol[1,1]"]
        );
    }
}
