//! Linear mixed-effects submodel for the marker trajectory.
//!
//! The subject-specific trajectory is
//! `m_i(t) = x_i(t)'β + z_i(t)'b_i`, with `x_i(t)` holding group-specific
//! intercepts and natural-spline terms and `z_i(t) = (1, B_1(t), ..., B_d(t))`.
//! Parameters are estimated by maximum marginal likelihood, with the random
//! effects integrated out analytically.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Observation, SubjectRecord};
use crate::error::{Error, Result};
use crate::numerics::linalg::{self, chol_from_params, params_from_cov, CovStructure};
use crate::numerics::optim::{minimize_bfgs, numeric_gradient, BfgsOptions};
use crate::numerics::NcsBasis;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Model specification for [`fit_lmm`].
#[derive(Debug, Clone)]
pub struct LmmSpec {
    pub basis: NcsBasis,
    /// Covariate whose distinct levels get their own intercept and spline
    /// coefficients.
    pub group_covariate: Option<String>,
    /// Include the spline terms; when false both designs are intercept-only.
    pub time_terms: bool,
    /// Include random effects `b_i ~ N(0, D)`.
    pub random_effects: bool,
    pub covariance: CovStructure,
}

impl LmmSpec {
    pub fn new(basis: NcsBasis) -> Self {
        LmmSpec {
            basis,
            group_covariate: None,
            time_terms: true,
            random_effects: true,
            covariance: CovStructure::Unstructured,
        }
    }

    pub fn grouped_by(mut self, covariate: impl Into<String>) -> Self {
        self.group_covariate = Some(covariate.into());
        self
    }

    pub fn with_covariance(mut self, covariance: CovStructure) -> Self {
        self.covariance = covariance;
        self
    }
}

/// Which functional of the trajectory a design row describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    Value,
    Slope,
    Area,
}

/// Fixed and random design layout shared by the mixed and joint models.
///
/// Fixed effects are ordered term-major: for terms `(1, B_1, .., B_d)` and
/// groups `g_1, .., g_G`, coefficient `k * G + g` multiplies term `k` in
/// group `g`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Design {
    #[serde(rename = "knots")]
    pub basis: NcsBasis,
    pub group_covariate: Option<String>,
    group_index: Option<usize>,
    pub groups: Vec<f64>,
    pub time_terms: bool,
    pub random_effects: bool,
}

impl Design {
    /// Design with explicit grouping levels: `(covariate position, levels)`.
    pub fn with_levels(spec: &LmmSpec, grouping: Option<(usize, Vec<f64>)>) -> Design {
        let (group_index, groups) = match grouping {
            Some((idx, levels)) if spec.group_covariate.is_some() => (Some(idx), levels),
            _ => (None, vec![]),
        };
        Design {
            basis: spec.basis.clone(),
            group_covariate: spec.group_covariate.clone(),
            group_index,
            groups,
            time_terms: spec.time_terms,
            random_effects: spec.random_effects,
        }
    }

    pub fn from_spec(spec: &LmmSpec, dataset: &Dataset) -> Result<Design> {
        let (group_index, groups) = match &spec.group_covariate {
            None => (None, vec![]),
            Some(name) => {
                let idx = dataset.covariate_index(name)?;
                let mut levels: Vec<f64> = dataset
                    .subjects()
                    .iter()
                    .map(|s| s.covariates[idx])
                    .collect();
                levels.sort_by(f64::total_cmp);
                levels.dedup();
                (Some(idx), levels)
            }
        };
        Ok(Design {
            basis: spec.basis.clone(),
            group_covariate: spec.group_covariate.clone(),
            group_index,
            groups,
            time_terms: spec.time_terms,
            random_effects: spec.random_effects,
        })
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len().max(1)
    }

    /// Number of terms per group: `1 + dim` with spline terms, else 1.
    pub fn n_terms(&self) -> usize {
        if self.time_terms {
            1 + self.basis.dimension()
        } else {
            1
        }
    }

    pub fn p(&self) -> usize {
        self.n_terms() * self.n_groups()
    }

    pub fn q(&self) -> usize {
        if self.random_effects {
            self.n_terms()
        } else {
            0
        }
    }

    /// Group index of a subject with the given covariate vector.
    pub fn group_of(&self, covariates: &[f64]) -> Result<usize> {
        match self.group_index {
            None => Ok(0),
            Some(idx) => {
                let v = *covariates
                    .get(idx)
                    .ok_or_else(|| Error::Data("subject lacks the grouping covariate".into()))?;
                self.groups.iter().position(|&g| g == v).ok_or_else(|| {
                    Error::Data(format!("unknown level {v} of the grouping covariate"))
                })
            }
        }
    }

    /// The per-group term vector of `term` at `t`.
    pub fn terms(&self, term: Term, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.n_terms()];
        self.terms_into(term, t, &mut out);
        out
    }

    pub fn terms_into(&self, term: Term, t: f64, out: &mut [f64]) {
        out[0] = match term {
            Term::Value => 1.0,
            Term::Slope => 0.0,
            Term::Area => t,
        };
        if self.time_terms {
            let rest = &mut out[1..];
            match term {
                Term::Value => self.basis.eval_into(t, rest),
                Term::Slope => self.basis.deriv_into(t, rest),
                Term::Area => self.basis.integral_into(t, rest),
            }
        }
    }

    /// Expand a term vector into the fixed-effects row for group `g`.
    pub fn x_from_terms(&self, g: usize, terms: &[f64], out: &mut [f64]) {
        let ng = self.n_groups();
        out.iter_mut().for_each(|v| *v = 0.0);
        for (k, &v) in terms.iter().enumerate() {
            out[k * ng + g] = v;
        }
    }

    /// `x'β` for group `g` given a term vector.
    pub fn x_dot(&self, g: usize, terms: &[f64], beta: &[f64]) -> f64 {
        let ng = self.n_groups();
        terms
            .iter()
            .enumerate()
            .map(|(k, v)| v * beta[k * ng + g])
            .sum()
    }

    /// `z'b` given a term vector.
    pub fn z_dot(&self, terms: &[f64], b: &[f64]) -> f64 {
        if self.random_effects {
            terms.iter().zip(b).map(|(t, b)| t * b).sum()
        } else {
            0.0
        }
    }

    /// Fixed (`n x p`) and random (`n x q`) design matrices at the observation times.
    pub fn matrices(&self, g: usize, obs: &[Observation]) -> (DMatrix<f64>, DMatrix<f64>) {
        let (p, q) = (self.p(), self.q());
        let mut x = DMatrix::zeros(obs.len(), p);
        let mut z = DMatrix::zeros(obs.len(), q);
        let mut terms = vec![0.0; self.n_terms()];
        let mut row = vec![0.0; p];
        for (i, o) in obs.iter().enumerate() {
            self.terms_into(Term::Value, o.time, &mut terms);
            self.x_from_terms(g, &terms, &mut row);
            for j in 0..p {
                x[(i, j)] = row[j];
            }
            for j in 0..q {
                z[(i, j)] = terms[j];
            }
        }
        (x, z)
    }
}

/// Value, slope and area-from-zero of a subject trajectory at one time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trajectory {
    pub value: f64,
    pub slope: f64,
    pub area: f64,
}

/// Evaluate `m(t)`, `m'(t)` and `∫_0^t m(s) ds` for group `g` and random effects `b`.
pub fn trajectory(beta: &[f64], design: &Design, g: usize, b: &[f64], t: f64) -> Trajectory {
    let mut terms = vec![0.0; design.n_terms()];
    let mut eval = |term| {
        design.terms_into(term, t, &mut terms);
        design.x_dot(g, &terms, beta) + design.z_dot(&terms, b)
    };
    Trajectory {
        value: eval(Term::Value),
        slope: eval(Term::Slope),
        area: eval(Term::Area),
    }
}

/// Fitted mixed model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmmFit {
    #[serde(flatten)]
    pub design: Design,
    pub beta: Vec<f64>,
    #[serde(rename = "D", with = "linalg::rows")]
    pub d: DMatrix<f64>,
    pub sigma: f64,
    pub covariance: CovStructure,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Per-subject sufficient statistics for the Gaussian marginal likelihood.
#[derive(Debug, Clone)]
struct SubjectStats {
    n: usize,
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
    yty: f64,
    ztz: DMatrix<f64>,
    ztx: DMatrix<f64>,
    zty: DVector<f64>,
}

/// Data prepared for repeated evaluation of the marginal likelihood.
#[derive(Debug, Clone)]
pub struct LmmModel {
    pub design: Design,
    stats: Vec<SubjectStats>,
    n_obs: usize,
}

impl LmmModel {
    pub fn new(dataset: &Dataset, spec: &LmmSpec) -> Result<LmmModel> {
        let design = Design::from_spec(spec, dataset)?;
        let mut stats = Vec::with_capacity(dataset.len());
        let mut n_obs = 0;
        for s in dataset.subjects() {
            let g = design.group_of(&s.covariates)?;
            let (x, z) = design.matrices(g, &s.observations);
            let y = DVector::from_iterator(
                s.observations.len(),
                s.observations.iter().map(|o| o.value),
            );
            n_obs += y.len();
            stats.push(SubjectStats {
                n: y.len(),
                xtx: x.transpose() * &x,
                xty: x.transpose() * &y,
                yty: y.dot(&y),
                ztz: z.transpose() * &z,
                ztx: z.transpose() * &x,
                zty: z.transpose() * &y,
            });
        }
        Ok(LmmModel {
            design,
            stats,
            n_obs,
        })
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    /// Marginal log-likelihood at `(β, D, σ)`.
    pub fn loglik(&self, beta: &[f64], d: &DMatrix<f64>, sigma: f64) -> Result<f64> {
        let l = cholesky_psd(d)?;
        let beta = DVector::from_column_slice(beta);
        let s2 = sigma * sigma;
        let mut total = 0.0;
        for st in &self.stats {
            let rr = st.yty - 2.0 * beta.dot(&st.xty) + beta.dot(&(&st.xtx * &beta));
            let (logdet, quad) = if st.ztz.nrows() == 0 {
                (st.n as f64 * s2.ln(), rr / s2)
            } else {
                let zr = &st.zty - &st.ztx * &beta;
                let (c_chol, w) = woodbury_core(&l, &st.ztz, s2, &zr)?;
                let q = l.nrows();
                let ldc = 2.0 * c_chol.l().diagonal().map(f64::ln).sum();
                let cw = c_chol.solve(&w);
                (
                    (st.n as f64 - q as f64) * s2.ln() + ldc,
                    (rr - w.dot(&cw)) / s2,
                )
            };
            total += -0.5 * (st.n as f64 * LN_2PI + logdet + quad);
        }
        Ok(total)
    }

    /// GLS estimate of β and the profiled log-likelihood for given `(D, σ)`.
    pub fn profile(&self, d: &DMatrix<f64>, sigma: f64) -> Result<(Vec<f64>, f64)> {
        let l = cholesky_psd(d)?;
        let p = self.design.p();
        let s2 = sigma * sigma;
        let mut xvx = DMatrix::zeros(p, p);
        let mut xvy = DVector::zeros(p);
        let mut yvy = 0.0;
        let mut logdet = 0.0;
        for st in &self.stats {
            if st.ztz.nrows() == 0 {
                xvx += &st.xtx / s2;
                xvy += &st.xty / s2;
                yvy += st.yty / s2;
                logdet += st.n as f64 * s2.ln();
                continue;
            }
            let lt = l.transpose();
            let lzx = &lt * &st.ztx;
            let (c_chol, w) = woodbury_core(&l, &st.ztz, s2, &st.zty)?;
            let cx = c_chol.solve(&lzx);
            let cw = c_chol.solve(&w);
            xvx += (&st.xtx - lzx.transpose() * &cx) / s2;
            xvy += (&st.xty - lzx.transpose() * &cw) / s2;
            yvy += (st.yty - w.dot(&cw)) / s2;
            let q = l.nrows();
            logdet +=
                (st.n as f64 - q as f64) * s2.ln() + 2.0 * c_chol.l().diagonal().map(f64::ln).sum();
        }
        let chol = xvx
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical("GLS normal equations not positive definite".into()))?;
        let beta = chol.solve(&xvy);
        let quad = yvy - beta.dot(&xvy);
        let ll = -0.5 * (self.n_obs as f64 * LN_2PI + logdet + quad);
        Ok((beta.as_slice().to_vec(), ll))
    }

    fn check_rank(&self) -> Result<()> {
        let p = self.design.p();
        let mut xtx = DMatrix::zeros(p, p);
        for st in &self.stats {
            xtx += &st.xtx;
        }
        let scale: Vec<f64> = (0..p).map(|i| xtx[(i, i)].sqrt()).collect();
        if scale.iter().any(|&s| s == 0.0) {
            return Err(Error::Data("rank-deficient fixed-effects design".into()));
        }
        let norm = DMatrix::from_fn(p, p, |i, j| xtx[(i, j)] / (scale[i] * scale[j]));
        let eig = norm.symmetric_eigenvalues();
        let (lo, hi) = eig
            .iter()
            .fold((f64::INFINITY, 0.0_f64), |(a, b), &e| (a.min(e), b.max(e)));
        if lo <= 1e-12 * hi {
            return Err(Error::Data("rank-deficient fixed-effects design".into()));
        }
        Ok(())
    }

    fn ols(&self) -> (Vec<f64>, f64) {
        let p = self.design.p();
        let mut xtx = DMatrix::zeros(p, p);
        let mut xty = DVector::zeros(p);
        let mut yty = 0.0;
        for st in &self.stats {
            xtx += &st.xtx;
            xty += &st.xty;
            yty += st.yty;
        }
        let beta = xtx
            .cholesky()
            .map(|c| c.solve(&xty))
            .unwrap_or_else(|| DVector::zeros(p));
        let rss = (yty - beta.dot(&xty)).max(0.0);
        (beta.as_slice().to_vec(), rss / self.n_obs as f64)
    }
}

/// `C = σ²I + L'Z'ZL` (Cholesky) and `w = L'v`.
fn woodbury_core(
    l: &DMatrix<f64>,
    ztz: &DMatrix<f64>,
    s2: f64,
    v: &DVector<f64>,
) -> Result<(nalgebra::Cholesky<f64, nalgebra::Dyn>, DVector<f64>)> {
    let q = l.nrows();
    let lt = l.transpose();
    let c = DMatrix::identity(q, q) * s2 + &lt * ztz * l;
    let chol = c
        .cholesky()
        .ok_or_else(|| Error::Numerical("marginal covariance not positive definite".into()))?;
    Ok((chol, lt * v))
}

/// Lower factor `L` with `LL' = D`, allowing zero rows for singular `D`.
pub fn cholesky_psd(d: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let q = d.nrows();
    let mut l = DMatrix::zeros(q, q);
    for j in 0..q {
        let mut diag = d[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        let tol = 1e-12 * d[(j, j)].abs().max(1e-300);
        if diag < -tol || !diag.is_finite() {
            return Err(Error::Numerical(
                "covariance matrix is not positive semidefinite".into(),
            ));
        }
        if diag <= tol {
            continue;
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..q {
            let mut v = d[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / ljj;
        }
    }
    Ok(l)
}

/// Maximum-likelihood fit of the mixed model.
pub fn fit_lmm(dataset: &Dataset, spec: &LmmSpec) -> Result<LmmFit> {
    let model = LmmModel::new(dataset, spec)?;
    model.check_rank()?;
    let q = model.design.q();
    let (beta0, s2) = model.ols();
    if q == 0 {
        let sigma = s2.sqrt();
        if !(sigma > 0.0) {
            return Err(Error::Numerical("zero residual variance".into()));
        }
        let d = DMatrix::zeros(0, 0);
        let loglik = model.loglik(&beta0, &d, sigma)?;
        return Ok(LmmFit {
            design: model.design,
            beta: beta0,
            d,
            sigma,
            covariance: spec.covariance,
            loglik,
            converged: true,
            iterations: 0,
        });
    }
    let structure = spec.covariance;
    let d0 = DMatrix::identity(q, q) * (0.5 * s2);
    let mut x0 = params_from_cov(&d0, structure)?;
    x0.push(0.5 * (0.5 * s2).ln());
    let objective = |x: &[f64]| -> f64 {
        let (d, sigma) = unpack(x, q, structure);
        match model.profile(&d, sigma) {
            Ok((_, ll)) if ll.is_finite() => -ll,
            _ => f64::INFINITY,
        }
    };
    let fg = |x: &[f64]| {
        let f = objective(x);
        if !f.is_finite() {
            return (f, vec![0.0; x.len()]);
        }
        (f, numeric_gradient(objective, x, 1e-6))
    };
    let opt = minimize_bfgs(fg, &x0, &BfgsOptions::default());
    let (d, sigma) = unpack(&opt.x, q, structure);
    let (beta, loglik) = model.profile(&d, sigma)?;
    Ok(LmmFit {
        design: model.design,
        beta,
        d,
        sigma,
        covariance: structure,
        loglik,
        converged: opt.converged,
        iterations: opt.iterations,
    })
}

fn unpack(x: &[f64], q: usize, structure: CovStructure) -> (DMatrix<f64>, f64) {
    let k = structure.n_params(q);
    let l = chol_from_params(&x[..k], q, structure);
    (&l * l.transpose(), x[k].exp())
}

/// Gaussian posterior of the random effects given the marker history.
#[derive(Debug, Clone, PartialEq)]
pub struct EbMode {
    pub mode: DVector<f64>,
    /// Negative Hessian of the log posterior, `Z'Z/σ² + D⁻¹`.
    pub curvature: DMatrix<f64>,
    pub covariance: DMatrix<f64>,
}

/// Posterior of `b` for a subject with group `g` and observations `obs`.
pub fn gaussian_posterior(
    design: &Design,
    beta: &[f64],
    d: &DMatrix<f64>,
    sigma: f64,
    g: usize,
    obs: &[Observation],
) -> Result<EbMode> {
    let q = design.q();
    let (x, z) = design.matrices(g, obs);
    let y = DVector::from_iterator(obs.len(), obs.iter().map(|o| o.value));
    let r = y - x * DVector::from_column_slice(beta);
    let s2 = sigma * sigma;
    let l = cholesky_psd(d)?;
    let ztz = z.transpose() * &z;
    let (c_chol, w) = woodbury_core(&l, &ztz, s2, &(z.transpose() * r))?;
    let mode = &l * c_chol.solve(&w);
    let covariance = (&l * c_chol.solve(&l.transpose())) * s2;
    let curvature = match d.clone().cholesky() {
        Some(dc) => ztz / s2 + dc.inverse(),
        None => DMatrix::from_element(q, q, f64::INFINITY),
    };
    Ok(EbMode {
        mode,
        curvature,
        covariance,
    })
}

/// Empirical-Bayes posterior mode and curvature for one subject.
pub fn eb_mode(subject: &SubjectRecord, fit: &LmmFit) -> Result<EbMode> {
    if subject.observations.is_empty() {
        return Err(Error::Data(format!(
            "subject {}: no observations",
            subject.id
        )));
    }
    let g = fit.design.group_of(&subject.covariates)?;
    gaussian_posterior(
        &fit.design,
        &fit.beta,
        &fit.d,
        fit.sigma,
        g,
        &subject.observations,
    )
}

impl LmmFit {
    pub fn trajectory(&self, subject: &SubjectRecord, b: &[f64], t: f64) -> Result<Trajectory> {
        let g = self.design.group_of(&subject.covariates)?;
        Ok(trajectory(&self.beta, &self.design, g, b, t))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<LmmFit> {
        Ok(serde_json::from_str(s)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gauss_hermite;

    fn toy() -> Dataset {
        let obs = |v: &[(f64, f64)]| {
            v.iter()
                .map(|&(time, value)| Observation { time, value })
                .collect()
        };
        let subjects = vec![
            SubjectRecord {
                id: "a".into(),
                covariates: vec![0.0],
                event_time: 10.0,
                event: true,
                observations: obs(&[(0.0, 1.0), (1.0, 2.5), (4.0, 2.0)]),
            },
            SubjectRecord {
                id: "b".into(),
                covariates: vec![1.0],
                event_time: 10.0,
                event: false,
                observations: obs(&[(0.0, -1.0), (2.0, 0.5)]),
            },
            SubjectRecord {
                id: "c".into(),
                covariates: vec![1.0],
                event_time: 8.0,
                event: false,
                observations: obs(&[(0.5, 0.3), (3.0, 1.2), (6.0, 0.1), (7.5, 0.9)]),
            },
        ];
        Dataset::new(subjects, vec!["trt".into()]).unwrap()
    }

    fn basis() -> NcsBasis {
        NcsBasis::new((0.0, 10.0), &[3.0]).unwrap()
    }

    #[test]
    fn design_layout_is_term_major() {
        let ds = toy();
        let spec = LmmSpec::new(basis()).grouped_by("trt");
        let d = Design::from_spec(&spec, &ds).unwrap();
        assert_eq!((d.p(), d.q()), (6, 3));
        let terms = d.terms(Term::Value, 2.0);
        let mut row = vec![0.0; 6];
        d.x_from_terms(1, &terms, &mut row);
        assert_eq!(row[0], 0.0);
        assert_eq!(row[1], 1.0);
        assert_eq!(row[3], terms[1]);
        assert_eq!(row[5], terms[2]);
        assert!(d.group_of(&[2.0]).is_err());
    }

    #[test]
    fn zero_parameters_give_zero_trajectory() {
        let ds = toy();
        let d = Design::from_spec(&LmmSpec::new(basis()), &ds).unwrap();
        let tr = trajectory(&[0.0; 3], &d, 0, &[0.0; 3], 4.2);
        assert_eq!((tr.value, tr.slope, tr.area), (0.0, 0.0, 0.0));
    }

    #[test]
    fn trajectory_slope_and_area_match_numerics() {
        let ds = toy();
        let d = Design::from_spec(&LmmSpec::new(basis()).grouped_by("trt"), &ds).unwrap();
        let beta = [0.4, -0.2, 1.1, 0.7, -0.5, 0.3];
        let b = [0.1, -0.3, 0.25];
        for &t in &[0.3, 2.0, 3.0, 5.5, 9.9, 12.0] {
            let tr = trajectory(&beta, &d, 1, &b, t);
            let h = 1e-5;
            let fd = (trajectory(&beta, &d, 1, &b, t + h).value
                - trajectory(&beta, &d, 1, &b, t - h).value)
                / (2.0 * h);
            assert!((tr.slope - fd).abs() < 1e-6);
            let q = crate::numerics::gk15_panels(
                |s| trajectory(&beta, &d, 1, &b, s).value,
                0.0,
                t,
                &[3.0, 10.0],
            );
            assert!((tr.area - q).abs() < 1e-9);
        }
    }

    #[test]
    fn intercept_only_without_random_effects_is_mean_and_ml_sd() {
        let ds = toy();
        let mut spec = LmmSpec::new(basis());
        spec.time_terms = false;
        spec.random_effects = false;
        let fit = fit_lmm(&ds, &spec).unwrap();
        let ys: Vec<f64> = ds
            .subjects()
            .iter()
            .flat_map(|s| s.observations.iter().map(|o| o.value))
            .collect();
        let n = ys.len() as f64;
        let mean = ys.iter().sum::<f64>() / n;
        let sd = (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((fit.beta[0] - mean).abs() < 1e-12);
        assert!((fit.sigma - sd).abs() < 1e-12);
        assert!(fit.converged);
    }

    #[test]
    fn marginal_loglik_matches_gauss_hermite() {
        // two random effects: intercept + one spline term
        let ds = toy();
        let spec = LmmSpec::new(NcsBasis::new((0.0, 10.0), &[]).unwrap());
        let model = LmmModel::new(&ds, &spec).unwrap();
        assert_eq!(model.design.q(), 2);
        let beta = [0.5, 0.8];
        let d = DMatrix::from_row_slice(2, 2, &[0.8, 0.2, 0.2, 0.5]);
        let sigma = 0.7;
        let analytic = model.loglik(&beta, &d, sigma).unwrap();
        // adaptive rule centered at each subject's posterior
        let gh = gauss_hermite(15).unwrap();
        let dinv = d.clone().try_inverse().unwrap();
        let mut total = 0.0;
        for s in ds.subjects() {
            let eb =
                gaussian_posterior(&model.design, &beta, &d, sigma, 0, &s.observations).unwrap();
            let lc = eb.covariance.clone().cholesky().unwrap().l();
            let mut acc = 0.0;
            for (&x1, &w1) in gh.nodes.iter().zip(&gh.weights) {
                for (&x2, &w2) in gh.nodes.iter().zip(&gh.weights) {
                    let zv = DVector::from_vec(vec![x1, x2]);
                    let b = &eb.mode + &lc * &zv * 2f64.sqrt();
                    let mut lp = -LN_2PI
                        - 0.5 * d.determinant().ln()
                        - 0.5 * (b.transpose() * &dinv * &b)[(0, 0)];
                    for o in &s.observations {
                        let m = trajectory(&beta, &model.design, 0, b.as_slice(), o.time).value;
                        lp += -0.5 * LN_2PI - sigma.ln() - 0.5 * ((o.value - m) / sigma).powi(2);
                    }
                    acc += w1 * w2 * (lp + zv.dot(&zv)).exp();
                }
            }
            total += (acc * 2.0 * lc.determinant()).ln();
        }
        let mut dense = 0.0;
        for s in ds.subjects() {
            let (x, z) = model.design.matrices(0, &s.observations);
            let y = DVector::from_iterator(
                s.observations.len(),
                s.observations.iter().map(|o| o.value),
            );
            let r = y - x * DVector::from_column_slice(&beta);
            let v = &z * &d * z.transpose() + DMatrix::identity(r.len(), r.len()) * sigma * sigma;
            let vc = v.clone().cholesky().unwrap();
            dense += -0.5 * (r.len() as f64 * LN_2PI + v.determinant().ln() + r.dot(&vc.solve(&r)));
        }
        assert!(
            (analytic - dense).abs() < 1e-10,
            "{analytic} vs dense {dense}"
        );
        assert!((analytic - total).abs() < 1e-6, "{analytic} vs {total}");
    }

    #[test]
    fn eb_mode_closed_form_and_curvature() {
        let ds = toy();
        let spec = LmmSpec::new(NcsBasis::new((0.0, 10.0), &[]).unwrap());
        let design = Design::from_spec(&spec, &ds).unwrap();
        let beta = [0.5, 0.8];
        let d = DMatrix::from_row_slice(2, 2, &[0.8, 0.2, 0.2, 0.5]);
        let sigma = 0.7;
        let s = &ds.subjects()[2];
        let eb = gaussian_posterior(&design, &beta, &d, sigma, 0, &s.observations).unwrap();
        let dinv = d.clone().try_inverse().unwrap();
        let logpost = |b: &[f64]| {
            let bv = DVector::from_column_slice(b);
            let mut lp = -0.5 * (bv.transpose() * &dinv * &bv)[(0, 0)];
            for o in &s.observations {
                let m = trajectory(&beta, &design, 0, b, o.time).value;
                lp -= 0.5 * ((o.value - m) / sigma).powi(2);
            }
            lp
        };
        let g = numeric_gradient(logpost, eb.mode.as_slice(), 1e-6);
        assert!(g.iter().all(|v| v.abs() < 1e-7));
        let h = crate::numerics::optim::jacobian_of_gradient(
            |b| numeric_gradient(logpost, b, 1e-5),
            eb.mode.as_slice(),
            1e-4,
        );
        assert!((h + &eb.curvature).abs().max() < 1e-4);
        let prod = &eb.curvature * &eb.covariance;
        assert!((prod - DMatrix::identity(2, 2)).abs().max() < 1e-10);
    }

    #[test]
    fn fit_beats_start_and_round_trips() {
        let ds = toy();
        let spec = LmmSpec::new(NcsBasis::new((0.0, 10.0), &[]).unwrap())
            .with_covariance(CovStructure::Diagonal);
        let fit = fit_lmm(&ds, &spec).unwrap();
        let model = LmmModel::new(&ds, &spec).unwrap();
        let ll = model.loglik(&fit.beta, &fit.d, fit.sigma).unwrap();
        assert!((ll - fit.loglik).abs() < 1e-9);
        let other = model
            .loglik(&fit.beta, &(DMatrix::identity(2, 2) * 0.3), 0.9)
            .unwrap();
        assert!(fit.loglik >= other);
        let back = LmmFit::from_json(&fit.to_json().unwrap()).unwrap();
        assert_eq!(back.beta, fit.beta);
        assert!(fit.to_json().unwrap().contains("\"D\""));
    }
}
