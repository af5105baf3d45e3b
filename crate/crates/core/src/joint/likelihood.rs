//! Joint log-likelihood with adaptive Gauss-Hermite integration over the
//! random effects, and its analytic gradient for fixed quadrature nodes.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::path::{c_vec, eta_fixed, Path, PathTheta, PointFeatures, SubjectContext};
use super::{BaselineBasis, BaselineHazard, FunctionalForm, JointTheta};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::lmm::{cholesky_psd, Design};
use crate::numerics::gauss_hermite;
use crate::numerics::linalg::{chol_param_gradient, CovStructure};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Node budget of the product Gauss-Hermite rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureConfig {
    /// Nodes per dimension; `None` picks 7 for `q <= 2` and 5 otherwise.
    pub nodes_per_dim: Option<usize>,
    /// Product nodes whose weight is below this fraction of the largest are dropped.
    pub prune: f64,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        QuadratureConfig {
            nodes_per_dim: None,
            prune: 1e-10,
        }
    }
}

impl QuadratureConfig {
    pub fn nodes_for(&self, q: usize) -> usize {
        self.nodes_per_dim.unwrap_or(if q <= 2 { 7 } else { 5 })
    }
}

/// Pruned product rule on the standardized scale.
#[derive(Debug, Clone)]
struct Grid {
    q: usize,
    x: Vec<f64>,
    idx: Vec<usize>,
    /// `Σ log w + |z|²` per product node.
    log_w: Vec<f64>,
    /// `K x (1 + q)` matrix with rows `(1, z_k)`.
    one_z: DMatrix<f64>,
}

impl Grid {
    fn product(q: usize, config: &QuadratureConfig) -> Result<Grid> {
        let rule = gauss_hermite(config.nodes_for(q))?;
        let n = rule.len();
        let total = n.pow(q as u32);
        let wmax = rule
            .weights
            .iter()
            .cloned()
            .fold(0.0, f64::max)
            .powi(q as i32);
        let mut idx = Vec::new();
        let mut log_w = Vec::new();
        let mut zs = Vec::new();
        let mut tuple = vec![0usize; q];
        for k in 0..total {
            let mut r = k;
            for d in 0..q {
                tuple[d] = r % n;
                r /= n;
            }
            let w: f64 = tuple.iter().map(|&j| rule.weights[j]).product();
            if w < config.prune * wmax {
                continue;
            }
            let z: Vec<f64> = tuple.iter().map(|&j| rule.nodes[j]).collect();
            log_w.push(w.ln() + z.iter().map(|v| v * v).sum::<f64>());
            idx.extend_from_slice(&tuple);
            zs.push(z);
        }
        let k = zs.len();
        let one_z = DMatrix::from_fn(k, q + 1, |i, j| if j == 0 { 1.0 } else { zs[i][j - 1] });
        Ok(Grid {
            q,
            x: rule.nodes,
            idx,
            log_w,
            one_z,
        })
    }

    /// A single node at the center, used for plug-in evaluation.
    fn point(q: usize) -> Grid {
        Grid {
            q,
            x: vec![0.0],
            idx: vec![0; q],
            log_w: vec![0.0],
            one_z: DMatrix::from_fn(1, q + 1, |_, j| if j == 0 { 1.0 } else { 0.0 }),
        }
    }

    fn len(&self) -> usize {
        self.log_w.len()
    }
}

/// Quadrature center and scale of one subject.
#[derive(Debug, Clone)]
pub(crate) struct SubjectNodes {
    mu: DVector<f64>,
    /// Lower factor of the node spread; nodes are `mu + √2 L z`.
    l: DMatrix<f64>,
    /// `(q/2) log 2 + log |L|`.
    log_jac: f64,
}

#[derive(Debug, Clone)]
struct SubjectData {
    x: DMatrix<f64>,
    z: DMatrix<f64>,
    y: DVector<f64>,
    ztz: DMatrix<f64>,
    event: bool,
    w: Vec<f64>,
    at_event: PointFeatures,
    path: Path,
}

/// Prepared joint-model data for repeated likelihood evaluation.
#[derive(Debug, Clone)]
pub struct JointModel {
    pub design: Design,
    pub form: FunctionalForm,
    pub structure: CovStructure,
    pub baseline_template: BaselineHazard,
    pub gamma_names: Vec<String>,
    subjects: Vec<SubjectData>,
    grid: Grid,
    point: Grid,
}

/// Newton iterations with step halving for the mode of
/// `log p(y | b) + log p(b) + δ log h(T | b) - H(T | b)`, starting from the
/// longitudinal posterior `N(mean, cov)`. Returns the mode and the negative
/// Hessian there.
fn posterior_mode(
    sd: &SubjectData,
    theta: &JointTheta,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
) -> Option<(DVector<f64>, DMatrix<f64>)> {
    let q = mean.len();
    let prec = cov.clone().try_inverse()?;
    let pt = PathTheta::new(theta, &sd.w, &sd.path);
    let mut c_t = vec![0.0; q];
    if sd.event {
        c_vec(theta, &sd.at_event, &mut c_t);
    }
    let c_t = DVector::from_vec(c_t);
    let mut gh = vec![0.0; q];
    let mut hh = vec![0.0; q * q];
    let mut derivs = |b: &DVector<f64>| {
        let d = b - mean;
        let h = pt.cum_hazard_derivs(b.as_slice(), &mut gh, &mut hh);
        let f = -0.5 * d.dot(&(&prec * &d)) + c_t.dot(b) - h;
        let g = -(&prec * &d) + &c_t - DVector::from_column_slice(&gh);
        let nh = &prec + DMatrix::from_row_slice(q, q, &hh);
        (f, g, nh)
    };
    let mut b = mean.clone();
    let (mut f, mut g, mut nh) = derivs(&b);
    for _ in 0..50 {
        let step = nh.clone().cholesky()?.solve(&g);
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..30 {
            let cand = &b + &step * t;
            let (fc, gc, nhc) = derivs(&cand);
            if fc.is_finite() && fc >= f - 1e-12 * f.abs() {
                let done = (fc - f).abs() < 1e-10 * (1.0 + f.abs());
                b = cand;
                f = fc;
                g = gc;
                nh = nhc;
                moved = !done;
                break;
            }
            t *= 0.5;
        }
        if !moved || g.amax() < 1e-8 {
            break;
        }
    }
    f.is_finite().then_some((b, nh))
}

/// Survival design row: a leading 1 for the Weibull intercept, then covariates.
pub(crate) fn survival_row(baseline: &BaselineHazard, covariates: &[f64]) -> Vec<f64> {
    match baseline {
        BaselineHazard::Weibull { .. } => std::iter::once(1.0)
            .chain(covariates.iter().copied())
            .collect(),
        BaselineHazard::BsplineLog { .. } => covariates.to_vec(),
    }
}

pub(crate) fn gamma_names(baseline: &BaselineHazard, covariate_names: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    if matches!(baseline, BaselineHazard::Weibull { .. }) {
        out.push("(intercept)".to_string());
    }
    out.extend(covariate_names.iter().cloned());
    out
}

impl JointModel {
    pub fn new(
        dataset: &Dataset,
        design: &Design,
        form: FunctionalForm,
        baseline: &BaselineHazard,
        structure: CovStructure,
        quad: &QuadratureConfig,
    ) -> Result<JointModel> {
        let q = design.q();
        if q == 0 {
            return Err(Error::Usage("the joint model needs random effects".into()));
        }
        let bb: BaselineBasis = baseline.basis()?;
        let breaks = baseline.breakpoints();
        let subjects = dataset
            .subjects()
            .iter()
            .map(|s| {
                let g = design.group_of(&s.covariates)?;
                let w = survival_row(baseline, &s.covariates);
                let ctx = SubjectContext::new(design, form, &bb, &breaks, g, w.clone());
                let (x, z) = design.matrices(g, &s.observations);
                let y = DVector::from_iterator(
                    s.observations.len(),
                    s.observations.iter().map(|o| o.value),
                );
                Ok(SubjectData {
                    ztz: z.transpose() * &z,
                    x,
                    z,
                    y,
                    event: s.event,
                    w,
                    at_event: ctx.features(s.event_time),
                    path: ctx.path(0.0, s.event_time),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(JointModel {
            design: design.clone(),
            form,
            structure,
            baseline_template: baseline.clone(),
            gamma_names: gamma_names(baseline, dataset.covariate_names()),
            subjects,
            grid: Grid::product(q, quad)?,
            point: Grid::point(q),
        })
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.grid.len()
    }

    /// Quadrature centers at the mode of each subject's full random-effects
    /// posterior under `θ`, scaled by the inverse curvature there.
    pub(crate) fn centers(&self, theta: &JointTheta) -> Result<Vec<SubjectNodes>> {
        let q = self.design.q();
        self.subjects
            .par_iter()
            .map(|sd| {
                let (mean, cov) = posterior_from_matrices(sd, theta)?;
                let (mu, spread) = match posterior_mode(sd, theta, &mean, &cov) {
                    Some((mu, neg_hess)) => match neg_hess.try_inverse() {
                        Some(inv) => (mu, inv),
                        None => (mean, cov),
                    },
                    None => (mean, cov),
                };
                let l = spread.cholesky().map(|c| c.l()).ok_or_else(|| {
                    Error::Numerical("random-effects posterior is not positive definite".into())
                })?;
                let log_jac = 0.5 * q as f64 * 2f64.ln() + l.diagonal().map(f64::ln).sum();
                Ok(SubjectNodes { mu, l, log_jac })
            })
            .collect()
    }

    /// Plug-in centers at given random-effect values (for survival-only fits).
    pub(crate) fn plug_in(&self, means: &[DVector<f64>]) -> Vec<SubjectNodes> {
        let q = self.design.q();
        means
            .iter()
            .map(|m| SubjectNodes {
                mu: m.clone(),
                l: DMatrix::zeros(q, q),
                log_jac: 0.0,
            })
            .collect()
    }

    /// Empirical-Bayes means of the random effects under `θ`.
    pub(crate) fn eb_means(&self, theta: &JointTheta) -> Result<Vec<DVector<f64>>> {
        self.subjects
            .iter()
            .map(|sd| posterior_from_matrices(sd, theta).map(|p| p.0))
            .collect()
    }

    /// Log-likelihood with nodes re-centered at `θ`.
    pub fn loglik(&self, theta: &JointTheta) -> Result<f64> {
        let nodes = self.centers(theta)?;
        Ok(self.eval(theta, &nodes, Mode::Full, false).0)
    }

    /// Value and gradient (free coordinates) for fixed nodes.
    pub(crate) fn eval(
        &self,
        theta: &JointTheta,
        nodes: &[SubjectNodes],
        mode: Mode,
        want_grad: bool,
    ) -> (f64, Vec<f64>) {
        let n_free = theta.n_free(self.structure);
        let prior = match PriorFactor::new(theta) {
            Some(p) => p,
            None => return (f64::NEG_INFINITY, vec![0.0; n_free]),
        };
        let grid = match mode {
            Mode::Full => &self.grid,
            Mode::SurvivalOnly => &self.point,
        };
        let parts: Vec<(f64, Vec<f64>)> = self
            .subjects
            .par_iter()
            .zip(nodes.par_iter())
            .map(|(sd, nd)| self.subject_eval(theta, &prior, sd, nd, grid, mode, want_grad))
            .collect();
        let mut total = 0.0;
        let mut grad = vec![
            0.0;
            if want_grad {
                grad_len(theta, theta.q())
            } else {
                0
            }
        ];
        for (v, g) in parts {
            total += v;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        if !total.is_finite() {
            total = f64::NEG_INFINITY;
        }
        if want_grad && mode == Mode::Full {
            // D gradient from the accumulated ∂/∂L
            let q = theta.q();
            let p = theta.beta.len();
            let mut gl = DMatrix::zeros(q, q);
            for i in 0..q {
                for j in 0..q {
                    gl[(i, j)] = grad[p + i * q + j];
                }
            }
            let gd = chol_param_gradient(&prior.l, &gl, self.structure);
            let tail: Vec<f64> = grad[p + q * q..].to_vec();
            grad.truncate(p);
            grad.extend(gd);
            grad.extend(tail);
        } else if want_grad {
            let q = theta.q();
            let p = theta.beta.len();
            let nd = self.structure.n_params(q);
            let tail: Vec<f64> = grad[p + q * q..].to_vec();
            grad.truncate(p);
            grad.extend(std::iter::repeat(0.0).take(nd));
            grad.extend(tail);
        }
        (total, grad)
    }

    #[allow(clippy::too_many_arguments)]
    fn subject_eval(
        &self,
        theta: &JointTheta,
        prior: &PriorFactor,
        sd: &SubjectData,
        nd: &SubjectNodes,
        grid: &Grid,
        mode: Mode,
        want_grad: bool,
    ) -> (f64, Vec<f64>) {
        let q = grid.q;
        let p = theta.beta.len();
        let k_n = grid.len();
        let full = mode == Mode::Full;
        let sqrt2 = std::f64::consts::SQRT_2;
        let beta = DVector::from_column_slice(&theta.beta);

        // nodes b_k = mu + √2 L z_k, as a q x K matrix
        let zt = grid.one_z.columns(1, q).transpose();
        let mut b = &nd.l * &zt * sqrt2;
        for mut col in b.column_iter_mut() {
            col += &nd.mu;
        }

        let mut ell: Vec<f64> = vec![0.0; k_n];
        // longitudinal and prior terms
        let (r, rr, zr) = if full {
            let r = &sd.y - &sd.x * &beta;
            let rr = r.dot(&r);
            let zr = sd.z.transpose() * &r;
            let s2 = theta.sigma * theta.sigma;
            let n = sd.y.len() as f64;
            let c0 = -0.5 * n * LN_2PI
                - n * theta.sigma.ln()
                - 0.5 * q as f64 * LN_2PI
                - prior.log_det_half;
            let ztz_b = &sd.ztz * &b;
            let v = prior.l_inv_times(&b);
            for k in 0..k_n {
                let bk = b.column(k);
                let quad = rr - 2.0 * zr.dot(&bk) + bk.dot(&ztz_b.column(k));
                ell[k] = grid.log_w[k] + nd.log_jac + c0
                    - 0.5 * quad / s2
                    - 0.5 * v.column(k).norm_squared();
            }
            (r, rr, zr)
        } else {
            (DVector::zeros(0), 0.0, DVector::zeros(0))
        };

        // event term
        let mut c_t = vec![0.0; q];
        c_vec(theta, &sd.at_event, &mut c_t);
        let c_t = DVector::from_vec(c_t);
        if sd.event {
            let base =
                theta.baseline.log_h0(&sd.at_event.h0) + eta_fixed(theta, &sd.w, &sd.at_event);
            let cb = b.transpose() * &c_t;
            for k in 0..k_n {
                ell[k] += base + cb[k];
            }
        }

        // cumulative hazard over the path: h_sk
        let pt = PathTheta::new(theta, &sd.w, &sd.path);
        let s_n = pt.len();
        let n1 = grid.x.len();
        let mut hmat = DMatrix::<f64>::zeros(s_n, k_n);
        let mut factors = vec![0.0; q * n1];
        for s in 0..s_n {
            let c = DVector::from_column_slice(&pt.c[s * q..(s + 1) * q]);
            let base = (pt.a[s] + c.dot(&nd.mu)).exp();
            let g = nd.l.transpose() * &c * sqrt2;
            for d in 0..q {
                for j in 0..n1 {
                    factors[d * n1 + j] = (g[d] * grid.x[j]).exp();
                }
            }
            for k in 0..k_n {
                let mut h = base;
                for d in 0..q {
                    h *= factors[d * n1 + grid.idx[k * q + d]];
                }
                hmat[(s, k)] = h;
            }
        }
        let hk = hmat.row_sum();
        for k in 0..k_n {
            ell[k] -= hk[k];
        }

        let mx = ell.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !mx.is_finite() {
            return (
                f64::NEG_INFINITY,
                vec![0.0; if want_grad { grad_len(theta, q) } else { 0 }],
            );
        }
        let mut pi: Vec<f64> = ell.iter().map(|e| (e - mx).exp()).collect();
        let sum: f64 = pi.iter().sum();
        let value = mx + sum.ln();
        if !want_grad {
            return (value, vec![]);
        }
        pi.iter_mut().for_each(|v| *v /= sum);
        let pi_v = DVector::from_vec(pi);

        // posterior moments
        let eb = &b * &pi_v;
        let mut ebb = DMatrix::zeros(q, q);
        for k in 0..k_n {
            let bk = b.column(k);
            ebb += bk * bk.transpose() * pi_v[k];
        }
        // ḡ_s and Σ_k π_k h_sk z_k
        let mut pz = grid.one_z.clone();
        for k in 0..k_n {
            let w = pi_v[k];
            pz.row_mut(k).scale_mut(w);
        }
        let gm = &hmat * pz; // S x (1 + q)
        let gbar: Vec<f64> = (0..s_n).map(|s| gm[(s, 0)]).collect();
        let gbar_b: Vec<DVector<f64>> = (0..s_n)
            .map(|s| {
                let gz = DVector::from_iterator(q, (0..q).map(|d| gm[(s, d + 1)]));
                &nd.mu * gbar[s] + &nd.l * gz * sqrt2
            })
            .collect();

        let mut grad = vec![0.0; grad_len(theta, q)];
        let n_gamma = theta.gamma.len();
        let n_alpha = theta.alpha.len();
        let off_d = p;
        let off_sigma = p + q * q;
        let off_gamma = off_sigma + 1;
        let off_alpha = off_gamma + n_gamma;
        let off_base = off_alpha + n_alpha;

        if full {
            let s2 = theta.sigma * theta.sigma;
            let resid = &r - &sd.z * &eb;
            let gb = sd.x.transpose() * resid / s2;
            for j in 0..p {
                grad[j] += gb[j];
            }
            let e_rss = rr - 2.0 * zr.dot(&eb) + (&sd.ztz * &ebb).trace();
            grad[off_sigma] += -(sd.y.len() as f64) + e_rss / s2;
            // ∂/∂L of log p(b): D⁻¹ E[bb'] L⁻ᵀ - diag(1/L_jj)
            let gl = prior.dinv_ebb_ltinv(&ebb);
            for i in 0..q {
                for j in 0..=i {
                    let mut v = gl[(i, j)];
                    if i == j {
                        v -= 1.0 / prior.l[(i, i)];
                    }
                    grad[off_d + i * q + j] += v;
                }
            }
        }

        // survival blocks
        let delta = if sd.event { 1.0 } else { 0.0 };
        let eh: f64 = gbar.iter().sum();
        for (j, w) in sd.w.iter().enumerate() {
            grad[off_gamma + j] += w * (delta - eh);
        }
        let q_c = q;
        for (j, al) in theta.alpha.iter().enumerate() {
            let a_t = &sd.at_event.a[j * p..(j + 1) * p];
            let c_tj = &sd.at_event.c[j * q_c..(j + 1) * q_c];
            // β gradient from the event term and α gradient
            if sd.event {
                let ab: f64 = a_t.iter().zip(&theta.beta).map(|(a, b)| a * b).sum();
                let cb: f64 = c_tj.iter().zip(eb.iter()).map(|(c, b)| c * b).sum();
                grad[off_alpha + j] += ab + cb;
                for m in 0..p {
                    grad[m] += al * a_t[m];
                }
            }
            for s in 0..s_n {
                let f = &sd.path.points[s];
                let a_s = &f.a[j * p..(j + 1) * p];
                let c_s = &f.c[j * q_c..(j + 1) * q_c];
                let ab: f64 = a_s.iter().zip(&theta.beta).map(|(a, b)| a * b).sum();
                let cb: f64 = c_s.iter().zip(gbar_b[s].iter()).map(|(c, b)| c * b).sum();
                grad[off_alpha + j] -= gbar[s] * ab + cb;
                let coef = gbar[s] * al;
                if coef != 0.0 {
                    for m in 0..p {
                        grad[m] -= coef * a_s[m];
                    }
                }
            }
        }
        let nb = theta.baseline.n_params();
        let mut tmp = vec![0.0; nb];
        if sd.event {
            theta.baseline.log_h0_grad(&sd.at_event.h0, &mut tmp);
            for m in 0..nb {
                grad[off_base + m] += tmp[m];
            }
        }
        for s in 0..s_n {
            theta.baseline.log_h0_grad(&sd.path.points[s].h0, &mut tmp);
            for m in 0..nb {
                grad[off_base + m] -= gbar[s] * tmp[m];
            }
        }
        (value, grad)
    }
}

fn grad_len(theta: &JointTheta, q: usize) -> usize {
    theta.beta.len() + q * q + 1 + theta.gamma.len() + theta.alpha.len() + theta.baseline.n_params()
}

fn posterior_from_matrices(
    sd: &SubjectData,
    theta: &JointTheta,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let r = &sd.y - &sd.x * DVector::from_column_slice(&theta.beta);
    let s2 = theta.sigma * theta.sigma;
    let l = cholesky_psd(&theta.d)?;
    let q = l.nrows();
    let lt = l.transpose();
    let c = DMatrix::identity(q, q) * s2 + &lt * &sd.ztz * &l;
    let chol = c.cholesky().ok_or_else(|| {
        Error::Numerical("random-effects posterior is not positive definite".into())
    })?;
    let mode = &l * chol.solve(&(lt * sd.z.transpose() * r));
    let cov = (&l * chol.solve(&l.transpose())) * s2;
    Ok((mode, cov))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Mode {
    Full,
    SurvivalOnly,
}

/// Cholesky quantities of `D` shared by all subjects.
struct PriorFactor {
    l: DMatrix<f64>,
    l_inv: DMatrix<f64>,
    d_inv: DMatrix<f64>,
    log_det_half: f64,
}

impl PriorFactor {
    fn new(theta: &JointTheta) -> Option<PriorFactor> {
        if !(theta.sigma > 0.0 && theta.sigma.is_finite()) {
            return None;
        }
        let chol = theta.d.clone().cholesky()?;
        let l = chol.l();
        let l_inv = l.clone().try_inverse()?;
        let d_inv = l_inv.transpose() * &l_inv;
        let log_det_half = l.diagonal().map(f64::ln).sum();
        Some(PriorFactor {
            l,
            l_inv,
            d_inv,
            log_det_half,
        })
    }

    fn l_inv_times(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        &self.l_inv * b
    }

    fn dinv_ebb_ltinv(&self, ebb: &DMatrix<f64>) -> DMatrix<f64> {
        &self.d_inv * ebb * self.l_inv.transpose()
    }
}

/// Joint log-likelihood of `dataset` under `θ`, with nodes centered at the
/// longitudinal posterior of each subject.
pub fn joint_loglik(
    theta: &JointTheta,
    dataset: &Dataset,
    design: &Design,
    form: FunctionalForm,
    quad: &QuadratureConfig,
) -> Result<f64> {
    let model = JointModel::new(
        dataset,
        design,
        form,
        &theta.baseline,
        CovStructure::Unstructured,
        quad,
    )?;
    model.loglik(theta)
}
