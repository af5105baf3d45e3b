//! Per-subject hazard evaluation along quadrature paths.

use super::{BaselineBasis, FunctionalForm, JointTheta};
use crate::lmm::{Design, Term};
use crate::numerics::quadrature::{gk15_panel_points_graded, gk15_panels};
use crate::numerics::std_normal_cdf;
use crate::numerics::std_normal_pdf;

/// Everything about one subject that the hazard needs besides `θ` and `b`.
#[derive(Debug, Clone)]
pub struct SubjectContext<'a> {
    pub design: &'a Design,
    pub form: FunctionalForm,
    pub baseline: &'a BaselineBasis,
    /// Kinks of the integrand: spline knots and baseline knots.
    pub breakpoints: Vec<f64>,
    pub group: usize,
    /// Survival design row (leading 1 with a Weibull baseline).
    pub w: Vec<f64>,
}

/// Association design at one time: `A_j` (fixed part, `J x p`), `C_j`
/// (random part, `J x q`) and the baseline features.
#[derive(Debug, Clone, PartialEq)]
pub struct PointFeatures {
    pub a: Vec<f64>,
    pub c: Vec<f64>,
    pub h0: Vec<f64>,
}

/// Quadrature points over an interval with their features.
#[derive(Debug, Clone)]
pub struct Path {
    pub times: Vec<f64>,
    pub log_weights: Vec<f64>,
    pub points: Vec<PointFeatures>,
}

impl<'a> SubjectContext<'a> {
    pub fn new(
        design: &'a Design,
        form: FunctionalForm,
        baseline: &'a BaselineBasis,
        baseline_breaks: &[f64],
        group: usize,
        w: Vec<f64>,
    ) -> Self {
        let mut breakpoints: Vec<f64> = design.basis.breaks().to_vec();
        breakpoints.extend_from_slice(baseline_breaks);
        breakpoints.sort_by(f64::total_cmp);
        breakpoints.dedup();
        SubjectContext {
            design,
            form,
            baseline,
            breakpoints,
            group,
            w,
        }
    }

    fn weighted_terms(&self, s: f64, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        if s < 1e-8 {
            return;
        }
        let norm = std_normal_cdf(s) - 0.5;
        let n = out.len();
        let mut buf = vec![0.0; n];
        let mut breaks = self.design.basis.breaks().to_vec();
        breaks.extend([s - 4.0, s - 2.0, s - 1.0]);
        breaks.sort_by(f64::total_cmp);
        for k in 0..n {
            out[k] = gk15_panels(
                |r| {
                    self.design.terms_into(Term::Value, r, &mut buf);
                    std_normal_pdf(s - r) * buf[k]
                },
                0.0,
                s,
                &breaks,
            ) / norm;
        }
    }

    pub fn features(&self, s: f64) -> PointFeatures {
        let d = self.design;
        let (p, q) = (d.p(), d.q());
        let nt = d.n_terms();
        let terms_of = |term: Term| {
            let mut t = vec![0.0; nt];
            d.terms_into(term, s, &mut t);
            t
        };
        let channels: Vec<Vec<f64>> = match self.form {
            FunctionalForm::Value => vec![terms_of(Term::Value)],
            FunctionalForm::ValueSlope => vec![terms_of(Term::Value), terms_of(Term::Slope)],
            FunctionalForm::Area => vec![terms_of(Term::Area)],
            FunctionalForm::WeightedArea => {
                let mut t = vec![0.0; nt];
                self.weighted_terms(s, &mut t);
                vec![t]
            }
            FunctionalForm::SharedRe => {
                let mut c = vec![0.0; q * q];
                for j in 0..q {
                    c[j * q + j] = 1.0;
                }
                return PointFeatures {
                    a: vec![0.0; q * p],
                    c,
                    h0: self.baseline.features(s),
                };
            }
        };
        let mut a = vec![0.0; channels.len() * p];
        let mut c = vec![0.0; channels.len() * q];
        for (j, t) in channels.iter().enumerate() {
            d.x_from_terms(self.group, t, &mut a[j * p..(j + 1) * p]);
            c[j * q..(j + 1) * q].copy_from_slice(&t[..q]);
        }
        PointFeatures {
            a,
            c,
            h0: self.baseline.features(s),
        }
    }

    /// GK15 points over `[lo, hi]`, split at the context breakpoints, with
    /// the first panel graded toward `lo`.
    pub fn path(&self, lo: f64, hi: f64) -> Path {
        let (times, weights) = gk15_panel_points_graded(lo, hi, &self.breakpoints);
        let points = times.iter().map(|&s| self.features(s)).collect();
        Path {
            log_weights: weights.iter().map(|w| w.ln()).collect(),
            times,
            points,
        }
    }
}

/// Fixed part of the linear predictor `γ'w + Σ α_j A_j'β`.
pub(crate) fn eta_fixed(theta: &JointTheta, w: &[f64], f: &PointFeatures) -> f64 {
    let p = theta.beta.len();
    let mut eta: f64 = theta.gamma.iter().zip(w).map(|(g, w)| g * w).sum();
    for (j, al) in theta.alpha.iter().enumerate() {
        let ab: f64 = f.a[j * p..(j + 1) * p]
            .iter()
            .zip(&theta.beta)
            .map(|(a, b)| a * b)
            .sum();
        eta += al * ab;
    }
    eta
}

/// Random-effects loading `c = Σ α_j C_j`.
pub(crate) fn c_vec(theta: &JointTheta, f: &PointFeatures, out: &mut [f64]) {
    let q = out.len();
    out.iter_mut().for_each(|v| *v = 0.0);
    for (j, al) in theta.alpha.iter().enumerate() {
        for k in 0..q {
            out[k] += al * f.c[j * q + k];
        }
    }
}

/// Per-point offsets `a_s = log ω_s + log h0(s) + fixed η` and loadings `c_s`
/// (row-major, `S x q`) of a path under `θ`.
#[derive(Debug, Clone)]
pub struct PathTheta {
    pub a: Vec<f64>,
    pub c: Vec<f64>,
}

impl PathTheta {
    pub fn new(theta: &JointTheta, w: &[f64], path: &Path) -> PathTheta {
        let q = theta.q();
        let mut a = Vec::with_capacity(path.times.len());
        let mut c = vec![0.0; path.times.len() * q];
        for (k, f) in path.points.iter().enumerate() {
            a.push(path.log_weights[k] + theta.baseline.log_h0(&f.h0) + eta_fixed(theta, w, f));
            c_vec(theta, f, &mut c[k * q..(k + 1) * q]);
        }
        PathTheta { a, c }
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    /// `Σ_s exp(a_s + c_s'b)`.
    pub fn cum_hazard(&self, b: &[f64]) -> f64 {
        let q = b.len();
        self.a
            .iter()
            .enumerate()
            .map(|(k, a)| {
                let cb: f64 = self.c[k * q..(k + 1) * q]
                    .iter()
                    .zip(b)
                    .map(|(c, b)| c * b)
                    .sum();
                (a + cb).exp()
            })
            .sum()
    }

    /// Cumulative hazard with its gradient and Hessian in `b`.
    pub fn cum_hazard_derivs(&self, b: &[f64], grad: &mut [f64], hess: &mut [f64]) -> f64 {
        let q = b.len();
        grad.iter_mut().for_each(|v| *v = 0.0);
        hess.iter_mut().for_each(|v| *v = 0.0);
        let mut total = 0.0;
        for (k, a) in self.a.iter().enumerate() {
            let c = &self.c[k * q..(k + 1) * q];
            let h = (a + c.iter().zip(b).map(|(c, b)| c * b).sum::<f64>()).exp();
            total += h;
            for i in 0..q {
                grad[i] += h * c[i];
                for j in 0..q {
                    hess[i * q + j] += h * c[i] * c[j];
                }
            }
        }
        total
    }
}

fn point_eta(ctx: &SubjectContext, theta: &JointTheta, b: &[f64], f: &PointFeatures) -> f64 {
    let mut c = vec![0.0; theta.q()];
    c_vec(theta, f, &mut c);
    eta_fixed(theta, &ctx.w, f) + c.iter().zip(b).map(|(c, b)| c * b).sum::<f64>()
}

/// `η_i(t) = γ'w + α'f(M_i(t))`.
pub fn linear_predictor(ctx: &SubjectContext, theta: &JointTheta, b: &[f64], t: f64) -> f64 {
    point_eta(ctx, theta, b, &ctx.features(t))
}

/// `h_i(t) = h0(t) exp(η_i(t))`.
pub fn hazard(ctx: &SubjectContext, theta: &JointTheta, b: &[f64], t: f64) -> f64 {
    let f = ctx.features(t);
    (theta.baseline.log_h0(&f.h0) + point_eta(ctx, theta, b, &f)).exp()
}

/// `H_i(t) = ∫_0^t h_i(s) ds` by GK15 panels split at all knots.
pub fn cum_hazard(ctx: &SubjectContext, theta: &JointTheta, b: &[f64], t: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    PathTheta::new(theta, &ctx.w, &ctx.path(0.0, t)).cum_hazard(b)
}

/// `S_i(t) = exp(-H_i(t))`.
pub fn survival(ctx: &SubjectContext, theta: &JointTheta, b: &[f64], t: f64) -> f64 {
    (-cum_hazard(ctx, theta, b, t)).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::joint::BaselineHazard;
    use nalgebra::DMatrix;

    fn design(time_terms: bool) -> Design {
        let json = format!(
            r#"{{"knots":{{"boundary_knots":[0.0,19.0],"internal_knots":[2.1,5.5]}},
               "group_covariate":"trt","group_index":0,"groups":[0.0,1.0],
               "time_terms":{time_terms},"random_effects":true}}"#
        );
        serde_json::from_str(&json).unwrap()
    }

    fn theta(alpha: Vec<f64>, q: usize, p: usize) -> JointTheta {
        JointTheta {
            beta: (0..p).map(|k| 0.3 + 0.1 * k as f64).collect(),
            d: DMatrix::identity(q, q),
            sigma: 1.0,
            gamma: vec![-2.0, 0.41],
            alpha,
            baseline: BaselineHazard::Weibull { shape: 1.65 },
        }
    }

    #[test]
    fn hazard_matches_weibull_at_zero_association() {
        let d = design(true);
        let bb = BaselineHazard::Weibull { shape: 1.65 }.basis().unwrap();
        let ctx = SubjectContext::new(&d, FunctionalForm::Value, &bb, &[], 1, vec![1.0, 0.0]);
        let mut th = theta(vec![0.0], 4, 8);
        th.gamma = vec![0.0, 0.0];
        assert!((hazard(&ctx, &th, &[0.0; 4], 1.0) - 1.65).abs() < 1e-14);
        for form in [
            FunctionalForm::Value,
            FunctionalForm::ValueSlope,
            FunctionalForm::Area,
            FunctionalForm::WeightedArea,
            FunctionalForm::SharedRe,
        ] {
            let ctx = SubjectContext::new(&d, form, &bb, &[], 1, vec![1.0, 1.0]);
            let th = theta(vec![0.0; form.n_alpha(4)], 4, 8);
            for &t in &[0.5, 3.0, 12.0] {
                assert!(
                    (linear_predictor(&ctx, &th, &[0.3, -0.1, 0.2, 0.5], t) - (-2.0 + 0.41)).abs()
                        < 1e-14
                );
            }
        }
    }

    #[test]
    fn shared_re_cum_hazard_closed_form() {
        let d = design(true);
        let bb = BaselineHazard::Weibull { shape: 1.6 }.basis().unwrap();
        let ctx = SubjectContext::new(&d, FunctionalForm::SharedRe, &bb, &[], 0, vec![1.0, 1.0]);
        let mut th = theta(vec![-0.3, -0.8, 0.3, 0.8], 4, 8);
        th.baseline = BaselineHazard::Weibull { shape: 1.6 };
        th.gamma = vec![-6.73, 0.41];
        let b = [0.4, -0.2, 0.9, 0.1];
        let eta: f64 = -6.73 + 0.41 + (-0.3 * 0.4 + -0.8 * -0.2 + 0.3 * 0.9 + 0.8 * 0.1);
        for &t in &[0.1f64, 2.1, 7.0, 19.0] {
            let h = cum_hazard(&ctx, &th, &b, t);
            let exact = eta.exp() * t.powf(1.6);
            assert!(
                (h - exact).abs() < 1e-8 * exact.max(1e-300) + 1e-14,
                "{h} vs {exact}"
            );
        }
        assert_eq!(cum_hazard(&ctx, &th, &b, 0.0), 0.0);
        assert_eq!(survival(&ctx, &th, &b, 0.0), 1.0);
    }

    #[test]
    fn constant_trajectory_value_form_closed_form() {
        // intercept-only trajectory: m(t) = beta_g + b0
        let d = design(false);
        let bb = BaselineHazard::Weibull { shape: 1.65 }.basis().unwrap();
        let ctx = SubjectContext::new(&d, FunctionalForm::Value, &bb, &[], 1, vec![1.0, 1.0]);
        let mut th = theta(vec![0.7], 1, 2);
        th.beta = vec![0.5, 1.2];
        let b = [0.3];
        let eta: f64 = -2.0 + 0.41 + 0.7 * (1.2 + 0.3);
        for &t in &[0.5f64, 4.0, 19.0, 25.0] {
            let exact = eta.exp() * t.powf(1.65);
            assert!((cum_hazard(&ctx, &th, &b, t) - exact).abs() < 1e-8 * exact);
        }
    }

    #[test]
    fn weighted_area_of_constant_is_constant() {
        let d = design(false);
        let bb = BaselineHazard::Weibull { shape: 1.65 }.basis().unwrap();
        let ctx = SubjectContext::new(
            &d,
            FunctionalForm::WeightedArea,
            &bb,
            &[],
            0,
            vec![1.0, 0.0],
        );
        let mut th = theta(vec![0.9], 1, 2);
        th.beta = vec![1.0, 0.0];
        for &t in &[6.0, 10.0, 19.0] {
            let eta = linear_predictor(&ctx, &th, &[0.0], t);
            assert!((eta - (-2.0 + 0.9)).abs() < 1e-9, "{eta}");
        }
        assert_eq!(ctx.features(0.0).a, vec![0.0, 0.0]);
        // ρ integrates to one for any t > 0
        let f = ctx.features(1.3);
        assert!((f.a[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn path_derivatives_match_finite_differences() {
        let d = design(true);
        let bb = BaselineHazard::Weibull { shape: 1.65 }.basis().unwrap();
        let ctx = SubjectContext::new(&d, FunctionalForm::ValueSlope, &bb, &[], 1, vec![1.0, 1.0]);
        let th = theta(vec![0.2, 0.5], 4, 8);
        let pt = PathTheta::new(&th, &ctx.w, &ctx.path(0.0, 7.0));
        let b = [0.1, 0.2, -0.3, 0.4];
        let mut g = [0.0; 4];
        let mut h = [0.0; 16];
        let v = pt.cum_hazard_derivs(&b, &mut g, &mut h);
        assert!((v - pt.cum_hazard(&b)).abs() < 1e-14);
        let fd = crate::numerics::optim::numeric_gradient(|x| pt.cum_hazard(x), &b, 1e-6);
        for k in 0..4 {
            assert!((fd[k] - g[k]).abs() < 1e-6 * (1.0 + g[k].abs()));
        }
    }
}
