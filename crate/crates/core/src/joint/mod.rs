//! Joint model for a longitudinal marker and a time-to-event outcome.
//!
//! The marker follows the mixed model of [`crate::lmm`]; the hazard is
//! `h_i(t) = h0(t) exp{γ'w_i + α'f(M_i(t))}` where `f` is one of the
//! functional forms in [`FunctionalForm`]. Random effects are integrated
//! with adaptive Gauss-Hermite quadrature centered at the longitudinal
//! empirical-Bayes posterior of each subject.

mod fit;
mod likelihood;
mod path;

pub use fit::{fit_joint, JointFit, JointSpec};
pub use likelihood::{joint_loglik, JointModel, QuadratureConfig};
pub use path::{
    cum_hazard, hazard, linear_predictor, survival, Path, PathTheta, PointFeatures, SubjectContext,
};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::linalg::{self, chol_from_params, params_from_cov, CovStructure};
use crate::numerics::BSplineBasis;

/// Feature of the longitudinal process entering the hazard.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FunctionalForm {
    /// `α m(t)`
    Value,
    /// `α1 m(t) + α2 m'(t)`
    ValueSlope,
    /// `α ∫_0^t m(s) ds`
    Area,
    /// `α ∫_0^t ρ(t - s) m(s) ds` with `ρ(x) = φ(x) / {Φ(t) - 0.5}`
    WeightedArea,
    /// `α'b`
    SharedRe,
}

impl FunctionalForm {
    pub fn n_alpha(self, q: usize) -> usize {
        match self {
            FunctionalForm::ValueSlope => 2,
            FunctionalForm::SharedRe => q,
            _ => 1,
        }
    }

    pub fn alpha_labels(self, q: usize) -> Vec<String> {
        match self {
            FunctionalForm::Value => vec!["alpha[value]".into()],
            FunctionalForm::ValueSlope => vec!["alpha[value]".into(), "alpha[slope]".into()],
            FunctionalForm::Area => vec!["alpha[area]".into()],
            FunctionalForm::WeightedArea => vec!["alpha[weighted_area]".into()],
            FunctionalForm::SharedRe => (0..q).map(|j| format!("alpha[b{j}]")).collect(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FunctionalForm::Value => "value",
            FunctionalForm::ValueSlope => "value_slope",
            FunctionalForm::Area => "area",
            FunctionalForm::WeightedArea => "weighted_area",
            FunctionalForm::SharedRe => "shared_re",
        }
    }
}

impl std::str::FromStr for FunctionalForm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "value" => FunctionalForm::Value,
            "value_slope" => FunctionalForm::ValueSlope,
            "area" => FunctionalForm::Area,
            "weighted_area" => FunctionalForm::WeightedArea,
            "shared_re" => FunctionalForm::SharedRe,
            other => return Err(Error::Usage(format!("unknown functional form '{other}'"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Weibull,
    BsplineLog,
}

/// Baseline hazard parameters.
///
/// Weibull: `h0(t) = σ_t t^(σ_t - 1)`, with the log scale carried by the
/// intercept of `γ`. B-spline: `log h0(t) = c_0 + Σ_{q≥2} c_q B_q(t)` with
/// cubic B-splines on `[low, high]` (the first B-spline is absorbed by the
/// intercept) and `h0` held constant beyond the boundary knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaselineHazard {
    Weibull {
        shape: f64,
    },
    BsplineLog {
        boundary: (f64, f64),
        internal_knots: Vec<f64>,
        coefs: Vec<f64>,
    },
}

impl BaselineHazard {
    pub fn kind(&self) -> BaselineKind {
        match self {
            BaselineHazard::Weibull { .. } => BaselineKind::Weibull,
            BaselineHazard::BsplineLog { .. } => BaselineKind::BsplineLog,
        }
    }

    /// Cubic B-spline log baseline with internal knots at the 1/6, .., 5/6
    /// quantiles of the event times and boundary `[0, max_time]`.
    pub fn bspline_at_event_quantiles(
        event_times: &[f64],
        max_time: f64,
    ) -> Result<BaselineHazard> {
        if event_times.is_empty() {
            return Err(Error::Data(
                "no events to place baseline hazard knots".into(),
            ));
        }
        let mut v = event_times.to_vec();
        v.sort_by(f64::total_cmp);
        let mut knots: Vec<f64> = (1..=5)
            .map(|k| crate::numerics::spline::quantile_sorted(&v, k as f64 / 6.0))
            .filter(|&k| k > 0.0 && k < max_time)
            .collect();
        knots.dedup();
        let n_basis = knots.len() + 4;
        Ok(BaselineHazard::BsplineLog {
            boundary: (0.0, max_time),
            internal_knots: knots,
            coefs: vec![0.0; n_basis],
        })
    }

    pub fn n_params(&self) -> usize {
        match self {
            BaselineHazard::Weibull { .. } => 1,
            BaselineHazard::BsplineLog { coefs, .. } => coefs.len(),
        }
    }

    pub fn labels(&self) -> Vec<String> {
        match self {
            BaselineHazard::Weibull { .. } => vec!["log_shape".into()],
            BaselineHazard::BsplineLog { coefs, .. } => {
                (0..coefs.len()).map(|k| format!("gamma_h0[{k}]")).collect()
            }
        }
    }

    fn free(&self) -> Vec<f64> {
        match self {
            BaselineHazard::Weibull { shape } => vec![shape.ln()],
            BaselineHazard::BsplineLog { coefs, .. } => coefs.clone(),
        }
    }

    fn with_free(&self, x: &[f64]) -> BaselineHazard {
        match self {
            BaselineHazard::Weibull { .. } => BaselineHazard::Weibull { shape: x[0].exp() },
            BaselineHazard::BsplineLog {
                boundary,
                internal_knots,
                ..
            } => BaselineHazard::BsplineLog {
                boundary: *boundary,
                internal_knots: internal_knots.clone(),
                coefs: x.to_vec(),
            },
        }
    }

    /// Evaluator for the baseline design at arbitrary times.
    pub fn basis(&self) -> Result<BaselineBasis> {
        Ok(match self {
            BaselineHazard::Weibull { .. } => BaselineBasis::Weibull,
            BaselineHazard::BsplineLog {
                boundary,
                internal_knots,
                ..
            } => BaselineBasis::Bspline(BSplineBasis::with_boundary(
                boundary.0,
                boundary.1,
                internal_knots,
                4,
            )?),
        })
    }

    /// Knots at which the baseline hazard has kinks.
    pub fn breakpoints(&self) -> Vec<f64> {
        match self {
            BaselineHazard::Weibull { .. } => vec![],
            BaselineHazard::BsplineLog {
                boundary,
                internal_knots,
                ..
            } => {
                let mut v = internal_knots.clone();
                v.push(boundary.1);
                v
            }
        }
    }

    /// `log h0` from precomputed baseline features.
    pub fn log_h0(&self, feat: &[f64]) -> f64 {
        match self {
            BaselineHazard::Weibull { shape } => shape.ln() + (shape - 1.0) * feat[0],
            BaselineHazard::BsplineLog { coefs, .. } => {
                coefs.iter().zip(feat).map(|(a, b)| a * b).sum()
            }
        }
    }

    /// Gradient of `log h0` with respect to the free baseline coordinates.
    pub(crate) fn log_h0_grad(&self, feat: &[f64], out: &mut [f64]) {
        match self {
            BaselineHazard::Weibull { shape } => out[0] = 1.0 + shape * feat[0],
            BaselineHazard::BsplineLog { .. } => out.copy_from_slice(feat),
        }
    }
}

/// Baseline design evaluator: `[ln t]` for Weibull, `[1, B_2(t), .., B_n(t)]`
/// for the B-spline log baseline.
#[derive(Debug, Clone)]
pub enum BaselineBasis {
    Weibull,
    Bspline(BSplineBasis),
}

impl BaselineBasis {
    pub fn features(&self, t: f64) -> Vec<f64> {
        match self {
            BaselineBasis::Weibull => vec![t.ln()],
            BaselineBasis::Bspline(b) => {
                let (lo, hi) = b.boundary();
                let v = b.eval(t.clamp(lo, hi));
                let mut out = Vec::with_capacity(v.len());
                out.push(1.0);
                out.extend_from_slice(&v[1..]);
                out
            }
        }
    }
}

/// Full parameter bundle of the joint model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointTheta {
    pub beta: Vec<f64>,
    #[serde(rename = "D", with = "linalg::rows")]
    pub d: DMatrix<f64>,
    pub sigma: f64,
    /// Survival covariate coefficients; with a Weibull baseline the first
    /// entry is the log-scale intercept `γ0`.
    pub gamma: Vec<f64>,
    pub alpha: Vec<f64>,
    pub baseline: BaselineHazard,
}

impl JointTheta {
    pub fn q(&self) -> usize {
        self.d.nrows()
    }

    /// Coordinates `(β, log-Cholesky(D), log σ, γ, α, baseline)`.
    pub fn to_free(&self, structure: CovStructure) -> Result<Vec<f64>> {
        let mut x = self.beta.clone();
        x.extend(params_from_cov(&self.d, structure)?);
        x.push(self.sigma.ln());
        x.extend_from_slice(&self.gamma);
        x.extend_from_slice(&self.alpha);
        x.extend(self.baseline.free());
        Ok(x)
    }

    /// Inverse of [`to_free`](Self::to_free), using `self` for dimensions.
    pub fn with_free(&self, x: &[f64], structure: CovStructure) -> JointTheta {
        let q = self.q();
        let mut k = 0;
        let mut take = |n: usize| {
            let s = &x[k..k + n];
            k += n;
            s
        };
        let beta = take(self.beta.len()).to_vec();
        let l = chol_from_params(take(structure.n_params(q)), q, structure);
        let sigma = take(1)[0].exp();
        let gamma = take(self.gamma.len()).to_vec();
        let alpha = take(self.alpha.len()).to_vec();
        let baseline = self.baseline.with_free(take(self.baseline.n_params()));
        JointTheta {
            beta,
            d: &l * l.transpose(),
            sigma,
            gamma,
            alpha,
            baseline,
        }
    }

    /// Free coordinates of the log-Cholesky diagonal of `D`.
    pub fn log_variance_coordinates(&self, structure: CovStructure) -> Vec<usize> {
        let (p, q) = (self.beta.len(), self.q());
        match structure {
            CovStructure::Diagonal => (p..p + q).collect(),
            CovStructure::Unstructured => (0..q).map(|i| p + i * (i + 1) / 2 + i).collect(),
        }
    }

    pub fn n_free(&self, structure: CovStructure) -> usize {
        self.beta.len()
            + structure.n_params(self.q())
            + 1
            + self.gamma.len()
            + self.alpha.len()
            + self.baseline.n_params()
    }

    /// Labels of the free coordinates.
    pub fn free_labels(
        &self,
        structure: CovStructure,
        gamma_names: &[String],
        form: FunctionalForm,
    ) -> Vec<String> {
        let mut out: Vec<String> = (0..self.beta.len()).map(|j| format!("beta[{j}]")).collect();
        out.extend(
            structure
                .labels(self.q())
                .into_iter()
                .map(|l| format!("D.{l}")),
        );
        out.push("log_sigma".into());
        out.extend(gamma_names.iter().map(|g| format!("gamma[{g}]")));
        out.extend(form.alpha_labels(self.q()));
        out.extend(self.baseline.labels());
        out
    }
}
