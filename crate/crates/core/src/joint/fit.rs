//! Maximum-likelihood fitting of the joint model.

use log::{debug, info, warn};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::likelihood::{survival_row, Mode};
use super::{
    BaselineBasis, BaselineHazard, BaselineKind, FunctionalForm, JointModel, JointTheta,
    QuadratureConfig, SubjectContext,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::lmm::{fit_lmm, Design, LmmSpec};
use crate::numerics::linalg::{self, CovStructure};
use crate::numerics::optim::{jacobian_of_gradient, minimize_bfgs, BfgsOptions};

const MAX_RESTARTS: usize = 10;

/// Joint model specification.
#[derive(Debug, Clone)]
pub struct JointSpec {
    pub lmm: LmmSpec,
    pub form: FunctionalForm,
    pub baseline: BaselineKind,
    pub quadrature: QuadratureConfig,
    /// Iteration limit of the quasi-Newton search.
    pub max_iter: usize,
    /// Relative log-likelihood change that counts as a stalled iteration.
    pub rel_tol: f64,
    /// Gradient max-norm at which the search stops.
    pub grad_tol: f64,
    /// Warm start; skips the two-stage initialization.
    pub start: Option<JointTheta>,
}

impl JointSpec {
    pub fn new(lmm: LmmSpec, form: FunctionalForm, baseline: BaselineKind) -> Self {
        JointSpec {
            lmm,
            form,
            baseline,
            quadrature: QuadratureConfig::default(),
            max_iter: 500,
            rel_tol: 1e-12,
            grad_tol: 1e-4,
            start: None,
        }
    }
}

/// Fitted joint model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JointFit {
    pub theta: JointTheta,
    pub form: FunctionalForm,
    pub design: Design,
    pub covariance_structure: CovStructure,
    /// Names of the survival coefficients in `theta.gamma`.
    pub gamma_names: Vec<String>,
    /// Labels of the free coordinates indexing the matrices below.
    pub coordinate_labels: Vec<String>,
    /// Observed information (negative Hessian of the log-likelihood) in free coordinates.
    #[serde(with = "linalg::rows")]
    pub observed_information: DMatrix<f64>,
    /// Inverse of the observed information; zero when it is not positive definite.
    #[serde(with = "linalg::rows")]
    pub covariance: DMatrix<f64>,
    pub information_pd: bool,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub nodes_per_dim: usize,
    pub n_nodes: usize,
}

impl JointFit {
    pub fn baseline_basis(&self) -> Result<BaselineBasis> {
        self.theta.baseline.basis()
    }

    /// Hazard context for a subject; `basis` comes from [`baseline_basis`](Self::baseline_basis).
    pub fn context<'a>(
        &'a self,
        basis: &'a BaselineBasis,
        covariates: &[f64],
    ) -> Result<SubjectContext<'a>> {
        let g = self.design.group_of(covariates)?;
        let w = survival_row(&self.theta.baseline, covariates);
        Ok(SubjectContext::new(
            &self.design,
            self.form,
            basis,
            &self.theta.baseline.breakpoints(),
            g,
            w,
        ))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<JointFit> {
        Ok(serde_json::from_str(s)?)
    }
}

fn initial_theta(
    dataset: &Dataset,
    spec: &JointSpec,
    beta: Vec<f64>,
    d: DMatrix<f64>,
    sigma: f64,
) -> Result<JointTheta> {
    let events: Vec<f64> = dataset
        .subjects()
        .iter()
        .filter(|s| s.event)
        .map(|s| s.event_time)
        .collect();
    if events.is_empty() {
        return Err(Error::Data("no events in the data".into()));
    }
    let exposure: f64 = dataset.subjects().iter().map(|s| s.event_time).sum();
    let rate = (events.len() as f64 / exposure).ln();
    let max_time = dataset.event_times().into_iter().fold(0.0, f64::max);
    let n_cov = dataset.covariate_names().len();
    let q = d.nrows();
    let (gamma, baseline) = match spec.baseline {
        BaselineKind::Weibull => {
            let mut g = vec![0.0; n_cov + 1];
            g[0] = rate;
            (g, BaselineHazard::Weibull { shape: 1.0 })
        }
        BaselineKind::BsplineLog => {
            let mut b = BaselineHazard::bspline_at_event_quantiles(&events, max_time)?;
            if let BaselineHazard::BsplineLog { coefs, .. } = &mut b {
                coefs[0] = rate;
            }
            (vec![0.0; n_cov], b)
        }
    };
    Ok(JointTheta {
        beta,
        d,
        sigma,
        gamma,
        alpha: vec![0.0; spec.form.n_alpha(q)],
        baseline,
    })
}

/// Fit the joint model by maximum likelihood.
///
/// Longitudinal parameters start at the mixed-model fit and survival
/// parameters at a fit with the random effects fixed at their
/// empirical-Bayes means. The full likelihood is then maximized with the
/// quadrature nodes re-centered at every evaluation.
pub fn fit_joint(dataset: &Dataset, spec: &JointSpec) -> Result<JointFit> {
    let structure = spec.lmm.covariance;
    let design = Design::from_spec(&spec.lmm, dataset)?;
    let mut theta = match &spec.start {
        Some(start) => start.clone(),
        None => {
            let lmm = fit_lmm(dataset, &spec.lmm)?;
            initial_theta(dataset, spec, lmm.beta, lmm.d, lmm.sigma)?
        }
    };
    if theta.beta.len() != design.p()
        || theta.q() != design.q()
        || theta.alpha.len() != spec.form.n_alpha(design.q())
    {
        return Err(Error::Usage(
            "starting values do not match the model dimensions".into(),
        ));
    }
    let model = JointModel::new(
        dataset,
        &design,
        spec.form,
        &theta.baseline,
        structure,
        &spec.quadrature,
    )?;
    if theta.gamma.len() != model.gamma_names.len() {
        return Err(Error::Usage(
            "starting values do not match the survival covariates".into(),
        ));
    }
    info!(
        "joint fit: {} subjects, form {}, {} quadrature nodes",
        model.n_subjects(),
        spec.form.name(),
        model.n_nodes()
    );

    if spec.start.is_none() {
        // survival parameters with the random effects plugged in
        let x_all = theta.to_free(structure)?;
        let start = theta.beta.len() + structure.n_params(theta.q()) + 1;
        let means = model.eb_means(&theta)?;
        let plug = model.plug_in(&means);
        let base = theta.clone();
        let opt = minimize_bfgs(
            |xs: &[f64]| {
                let mut x = x_all.clone();
                x[start..].copy_from_slice(xs);
                let (v, g) = model.eval(
                    &base.with_free(&x, structure),
                    &plug,
                    Mode::SurvivalOnly,
                    true,
                );
                (-v, g[start..].iter().map(|v| -v).collect())
            },
            &x_all[start..],
            &BfgsOptions::default(),
        );
        let mut x = x_all.clone();
        x[start..].copy_from_slice(&opt.x);
        theta = theta.with_free(&x, structure);
        debug!("survival-only start: loglik {:.6}", -opt.value);
    }

    let opts = BfgsOptions {
        max_iter: spec.max_iter,
        rel_tol: spec.rel_tol,
        grad_tol: spec.grad_tol,
        ..BfgsOptions::default()
    };
    let x0 = theta.to_free(structure)?;
    let base = theta.clone();
    let objective = |x: &[f64]| {
        let cand = base.with_free(x, structure);
        let Ok(nodes) = model.centers(&cand) else {
            return (f64::INFINITY, vec![0.0; x.len()]);
        };
        let (v, g) = model.eval(&cand, &nodes, Mode::Full, true);
        if !v.is_finite() {
            return (f64::INFINITY, g);
        }
        (-v, g.iter().map(|v| -v).collect())
    };
    // restart with a fresh Hessian approximation until a restart stops paying off
    let mut opt = minimize_bfgs(objective, &x0, &opts);
    let mut iterations = opt.iterations;
    for _ in 0..MAX_RESTARTS {
        if !opt.converged || iterations >= spec.max_iter {
            break;
        }
        let next = minimize_bfgs(objective, &opt.x, &opts);
        iterations += next.iterations;
        let gain = opt.value - next.value;
        if next.value <= opt.value {
            opt = next;
        }
        if gain < 1e-10 * (1.0 + opt.value.abs()) {
            break;
        }
    }
    theta = base.with_free(&opt.x, structure);
    let converged = opt.converged;
    let last = -opt.value;
    debug!("joint fit: loglik {last:.8} after {iterations} iterations");
    if !converged {
        warn!(
            "joint fit did not converge within {} iterations",
            spec.max_iter
        );
    }

    let nodes = model.centers(&theta)?;
    let x_hat = theta.to_free(structure)?;
    let hess = jacobian_of_gradient(
        |x: &[f64]| {
            model
                .eval(&theta.with_free(x, structure), &nodes, Mode::Full, true)
                .1
        },
        &x_hat,
        1e-5,
    );
    let information = -hess;
    let (covariance, information_pd) = match information.clone().cholesky() {
        Some(c) => (c.inverse(), true),
        None => {
            warn!("observed information is not positive definite");
            (DMatrix::zeros(x_hat.len(), x_hat.len()), false)
        }
    };
    let coordinate_labels = theta.free_labels(structure, &model.gamma_names, spec.form);
    Ok(JointFit {
        form: spec.form,
        design,
        covariance_structure: structure,
        gamma_names: model.gamma_names.clone(),
        coordinate_labels,
        observed_information: information,
        covariance,
        information_pd,
        loglik: last,
        converged,
        iterations,
        nodes_per_dim: spec.quadrature.nodes_for(theta.q()),
        n_nodes: model.n_nodes(),
        theta,
    })
}
