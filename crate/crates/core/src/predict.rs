//! Monte Carlo dynamic predictions from a fitted joint model.
//!
//! For draw `k`, parameters are sampled from the asymptotic normal
//! distribution of the estimator, random effects from their posterior given
//! the marker history and survival up to the landmark, and the conditional
//! survival ratio `S(u | b, θ) / S(t | b, θ)` is recorded. The prediction is
//! the mean of the ratios, with percentile bands.
//!
//! Draw `k` uses its own ChaCha8 stream `(seed, k)`, so results do not depend
//! on how draws are scheduled across threads.

use log::debug;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Observation;
use crate::error::{Error, Result};
use crate::joint::{JointFit, JointTheta, Path, PathTheta, SubjectContext};
use crate::lmm::gaussian_posterior;
use crate::numerics::spline::quantile_sorted;

/// Default number of Monte Carlo draws.
pub const DEFAULT_DRAWS: usize = 200;

const PROPOSAL_DF: f64 = 4.0;
const MH_ROUNDS: usize = 5;

/// A subject to predict for: covariates and marker history up to the landmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewSubject {
    pub covariates: Vec<f64>,
    pub history: Vec<Observation>,
    pub landmark: f64,
}

impl NewSubject {
    pub fn new(
        covariates: Vec<f64>,
        history: Vec<Observation>,
        landmark: f64,
    ) -> Result<NewSubject> {
        if history.is_empty() {
            return Err(Error::Data("marker history is empty".into()));
        }
        if history.windows(2).any(|w| w[1].time < w[0].time) {
            return Err(Error::Data("marker history is not sorted by time".into()));
        }
        let last = history[history.len() - 1].time;
        if !(landmark >= last) {
            return Err(Error::Data(format!(
                "landmark {landmark} precedes the last observation at {last}"
            )));
        }
        Ok(NewSubject {
            covariates,
            history,
            landmark,
        })
    }
}

/// Conditional survival predictions over a horizon grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicPrediction {
    pub landmark: f64,
    pub horizons: Vec<f64>,
    pub point: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Standard deviation of the per-draw ratios.
    pub sd: Vec<f64>,
    pub draws: usize,
    pub seed: u64,
    /// Parameter draws collapsed to the estimate (information not positive definite).
    pub degenerate_theta: bool,
    /// Draws whose random effects fell back to the longitudinal posterior mode.
    pub mode_fallbacks: usize,
    pub acceptance_rate: f64,
}

impl DynamicPrediction {
    /// CSV with columns `u,pi_hat,lo,hi`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("u,pi_hat,lo,hi\n");
        for k in 0..self.horizons.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                self.horizons[k], self.point[k], self.lower[k], self.upper[k]
            ));
        }
        out
    }
}

fn draw_rng(seed: u64, k: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    rng
}

/// Marginal variance above which a log-scale variance coordinate counts as
/// unidentified (a component estimated at the boundary).
const FLAT_LOG_VARIANCE: f64 = 25.0;

/// Lower Cholesky factor of the estimator covariance, or `None` when the
/// draws must collapse to the estimate. Variance components estimated at
/// the boundary are held at their estimate and the remaining coordinates
/// are drawn from the inverse of their own information block.
fn sampling_factor(fit: &JointFit) -> Option<DMatrix<f64>> {
    if !fit.information_pd || fit.covariance.iter().all(|v| *v == 0.0) {
        return None;
    }
    let flat: Vec<usize> = fit
        .theta
        .log_variance_coordinates(fit.covariance_structure)
        .into_iter()
        .filter(|&k| fit.covariance[(k, k)] > FLAT_LOG_VARIANCE)
        .collect();
    if flat.is_empty() {
        return fit.covariance.clone().cholesky().map(|c| c.l());
    }
    debug!(
        "holding {} boundary variance coordinate(s) at the estimate",
        flat.len()
    );
    let n = fit.covariance.nrows();
    let keep: Vec<usize> = (0..n).filter(|k| !flat.contains(k)).collect();
    let block = fit
        .observed_information
        .select_rows(&keep)
        .select_columns(&keep);
    let l_block = block.cholesky()?.inverse().cholesky()?.l();
    let mut l = DMatrix::zeros(n, n);
    for (a, &i) in keep.iter().enumerate() {
        for (b, &j) in keep.iter().enumerate() {
            l[(i, j)] = l_block[(a, b)];
        }
    }
    Some(l)
}

fn theta_draw(
    fit: &JointFit,
    x_hat: &[f64],
    factor: Option<&DMatrix<f64>>,
    rng: &mut ChaCha8Rng,
) -> JointTheta {
    match factor {
        None => fit.theta.clone(),
        Some(l) => {
            let z = DVector::from_iterator(
                x_hat.len(),
                (0..x_hat.len()).map(|_| rng.sample::<f64, _>(StandardNormal)),
            );
            let x = DVector::from_column_slice(x_hat) + l * z;
            fit.theta.with_free(x.as_slice(), fit.covariance_structure)
        }
    }
}

/// `K` parameter draws from `N(θ̂, H⁻¹)` in the free coordinates. The flag
/// is true when the information is not usable and every draw equals `θ̂`.
pub fn sample_theta(fit: &JointFit, k: usize, seed: u64) -> Result<(Vec<JointTheta>, bool)> {
    let x_hat = fit.theta.to_free(fit.covariance_structure)?;
    let factor = sampling_factor(fit);
    let draws = (0..k)
        .map(|i| theta_draw(fit, &x_hat, factor.as_ref(), &mut draw_rng(seed, i)))
        .collect();
    Ok((draws, factor.is_none()))
}

/// One posterior draw of the random effects.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomEffectsDraw {
    pub b: Vec<f64>,
    pub accepted: usize,
    pub proposals: usize,
    /// The conditioned mode could not be found; the draw is the longitudinal mode.
    pub fallback: bool,
}

/// Log-density pieces of `p(b | T > t, Y(t), θ)` for one subject.
struct Target {
    ztz: DMatrix<f64>,
    ztr: DVector<f64>,
    s2: f64,
    d_inv: DMatrix<f64>,
    path: PathTheta,
}

impl Target {
    fn new(
        fit: &JointFit,
        theta: &JointTheta,
        ctx: &SubjectContext,
        subject: &NewSubject,
        path: &Path,
    ) -> Result<Target> {
        let (x, z) = fit.design.matrices(ctx.group, &subject.history);
        let y = DVector::from_iterator(
            subject.history.len(),
            subject.history.iter().map(|o| o.value),
        );
        let r = y - x * DVector::from_column_slice(&theta.beta);
        let d_inv = theta
            .d
            .clone()
            .cholesky()
            .ok_or_else(|| {
                Error::Numerical("random-effects covariance is not positive definite".into())
            })?
            .inverse();
        Ok(Target {
            ztz: z.transpose() * &z,
            ztr: z.transpose() * r,
            s2: theta.sigma * theta.sigma,
            d_inv,
            path: PathTheta::new(theta, &ctx.w, path),
        })
    }

    fn log_density(&self, b: &DVector<f64>) -> f64 {
        let quad = -2.0 * self.ztr.dot(b) + b.dot(&(&self.ztz * b));
        -0.5 * quad / self.s2 - 0.5 * b.dot(&(&self.d_inv * b)) - self.path.cum_hazard(b.as_slice())
    }

    /// Gradient and negative Hessian of the log density.
    fn derivs(&self, b: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
        let q = b.len();
        let mut gh = vec![0.0; q];
        let mut hh = vec![0.0; q * q];
        let h = self.path.cum_hazard_derivs(b.as_slice(), &mut gh, &mut hh);
        let quad = -2.0 * self.ztr.dot(b) + b.dot(&(&self.ztz * b));
        let value = -0.5 * quad / self.s2 - 0.5 * b.dot(&(&self.d_inv * b)) - h;
        let grad = (&self.ztr - &self.ztz * b) / self.s2 - &self.d_inv * b - DVector::from_vec(gh);
        let neg_hess = &self.ztz / self.s2 + &self.d_inv + DMatrix::from_row_slice(q, q, &hh);
        (value, grad, neg_hess)
    }

    /// Newton iterations with step halving.
    fn mode(&self, start: DVector<f64>) -> Option<(DVector<f64>, DMatrix<f64>)> {
        let mut b = start;
        let (mut f, mut g, mut h) = self.derivs(&b);
        for _ in 0..100 {
            let step = h.clone().cholesky()?.solve(&g);
            let mut scale = 1.0;
            let mut moved = false;
            for _ in 0..40 {
                let cand = &b + &step * scale;
                let fc = self.log_density(&cand);
                if fc.is_finite() && fc >= f - 1e-12 * f.abs() {
                    b = cand;
                    moved = true;
                    break;
                }
                scale *= 0.5;
            }
            let (f_new, g_new, h_new) = self.derivs(&b);
            let done = !moved || (f_new - f).abs() < 1e-12 * (1.0 + f.abs()) || g_new.amax() < 1e-9;
            f = f_new;
            g = g_new;
            h = h_new;
            if done {
                break;
            }
        }
        if !f.is_finite() || g.amax() > 1e-4 * (1.0 + f.abs()) {
            return None;
        }
        Some((b, h))
    }
}

/// Multivariate t proposal.
struct Proposal {
    center: DVector<f64>,
    l: DMatrix<f64>,
    prec: DMatrix<f64>,
    chi: ChiSquared<f64>,
}

impl Proposal {
    fn new(center: DVector<f64>, neg_hess: &DMatrix<f64>) -> Option<Proposal> {
        let prec = neg_hess.clone();
        let cov = prec.clone().cholesky()?.inverse();
        let l = cov.cholesky()?.l();
        Some(Proposal {
            center,
            l,
            prec,
            chi: ChiSquared::new(PROPOSAL_DF).ok()?,
        })
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let q = self.center.len();
        let z = DVector::from_iterator(q, (0..q).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let w: f64 = self.chi.sample(rng) / PROPOSAL_DF;
        &self.center + &self.l * z / w.sqrt()
    }

    fn log_density(&self, b: &DVector<f64>) -> f64 {
        let d = b - &self.center;
        let q = d.len() as f64;
        -0.5 * (PROPOSAL_DF + q) * (1.0 + d.dot(&(&self.prec * &d)) / PROPOSAL_DF).ln()
    }
}

fn sample_b_inner(
    fit: &JointFit,
    theta: &JointTheta,
    ctx: &SubjectContext,
    subject: &NewSubject,
    path: &Path,
    rng: &mut ChaCha8Rng,
) -> Result<RandomEffectsDraw> {
    let eb = gaussian_posterior(
        &fit.design,
        &theta.beta,
        &theta.d,
        theta.sigma,
        ctx.group,
        &subject.history,
    )?;
    let target = Target::new(fit, theta, ctx, subject, path)?;
    let fallback = |b: DVector<f64>| RandomEffectsDraw {
        b: b.as_slice().to_vec(),
        accepted: 0,
        proposals: 0,
        fallback: true,
    };
    let Some((mode, neg_hess)) = target.mode(eb.mode.clone()) else {
        return Ok(fallback(eb.mode));
    };
    let Some(proposal) = Proposal::new(mode, &neg_hess) else {
        return Ok(fallback(eb.mode));
    };
    let mut current = proposal.draw(rng);
    let mut log_ratio = target.log_density(&current) - proposal.log_density(&current);
    let mut accepted = 0;
    for _ in 0..MH_ROUNDS {
        let cand = proposal.draw(rng);
        let lr = target.log_density(&cand) - proposal.log_density(&cand);
        let u: f64 = rng.gen();
        if lr.is_finite() && (!log_ratio.is_finite() || u.ln() < lr - log_ratio) {
            current = cand;
            log_ratio = lr;
            accepted += 1;
        }
    }
    Ok(RandomEffectsDraw {
        b: current.as_slice().to_vec(),
        accepted,
        proposals: MH_ROUNDS,
        fallback: false,
    })
}

/// One draw from `p(b | T > t, Y(t), θ)` by independence Metropolis-Hastings
/// with a multivariate t proposal centered at the posterior mode.
pub fn sample_b(
    fit: &JointFit,
    theta: &JointTheta,
    subject: &NewSubject,
    rng: &mut ChaCha8Rng,
) -> Result<RandomEffectsDraw> {
    let basis = fit.baseline_basis()?;
    let ctx = fit.context(&basis, &subject.covariates)?;
    let path = ctx.path(0.0, subject.landmark);
    sample_b_inner(fit, theta, &ctx, subject, &path, rng)
}

/// Monte Carlo estimate of `Pr(T > u | T > t, Y(t))` for each horizon `u`.
pub fn predict_jm(
    fit: &JointFit,
    subject: &NewSubject,
    horizons: &[f64],
    draws: usize,
    seed: u64,
) -> Result<DynamicPrediction> {
    let t = subject.landmark;
    if draws == 0 {
        return Err(Error::Usage("the number of draws must be positive".into()));
    }
    if horizons.iter().any(|&u| !(u >= t)) {
        return Err(Error::Usage(format!(
            "horizons must not precede the landmark {t}"
        )));
    }
    if horizons.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Usage("horizons must be nondecreasing".into()));
    }
    let basis = fit.baseline_basis()?;
    let ctx = fit.context(&basis, &subject.covariates)?;
    let to_landmark = ctx.path(0.0, t);
    let mut segments = Vec::with_capacity(horizons.len());
    let mut prev = t;
    for &u in horizons {
        segments.push(ctx.path(prev, u));
        prev = u;
    }
    let x_hat = fit.theta.to_free(fit.covariance_structure)?;
    let factor = sampling_factor(fit);

    let results: Vec<Result<(Vec<f64>, RandomEffectsDraw)>> = (0..draws)
        .into_par_iter()
        .map(|k| {
            let mut rng = draw_rng(seed, k);
            let theta = theta_draw(fit, &x_hat, factor.as_ref(), &mut rng);
            let draw = sample_b_inner(fit, &theta, &ctx, subject, &to_landmark, &mut rng)?;
            let mut h = 0.0;
            let ratios = segments
                .iter()
                .map(|seg| {
                    h += PathTheta::new(&theta, &ctx.w, seg).cum_hazard(&draw.b);
                    (-h).exp()
                })
                .collect();
            Ok((ratios, draw))
        })
        .collect();
    let mut per_draw = Vec::with_capacity(draws);
    let (mut accepted, mut proposals, mut fallbacks) = (0usize, 0usize, 0usize);
    for r in results {
        let (ratios, d) = r?;
        accepted += d.accepted;
        proposals += d.proposals;
        fallbacks += d.fallback as usize;
        per_draw.push(ratios);
    }
    let acceptance_rate = if proposals > 0 {
        accepted as f64 / proposals as f64
    } else {
        0.0
    };
    debug!(
        "dynamic prediction: {draws} draws, acceptance {acceptance_rate:.3}, {fallbacks} fallbacks"
    );

    let n_h = horizons.len();
    let mut point = Vec::with_capacity(n_h);
    let mut lower = Vec::with_capacity(n_h);
    let mut upper = Vec::with_capacity(n_h);
    let mut sd = Vec::with_capacity(n_h);
    for j in 0..n_h {
        let mut col: Vec<f64> = per_draw.iter().map(|r| r[j]).collect();
        let mean = col.iter().sum::<f64>() / draws as f64;
        let ss: f64 = col.iter().map(|v| (v - mean).powi(2)).sum();
        point.push(mean);
        sd.push(if draws > 1 {
            (ss / (draws - 1) as f64).sqrt()
        } else {
            0.0
        });
        col.sort_by(f64::total_cmp);
        lower.push(quantile_sorted(&col, 0.025));
        upper.push(quantile_sorted(&col, 0.975));
    }
    Ok(DynamicPrediction {
        landmark: t,
        horizons: horizons.to_vec(),
        point,
        lower,
        upper,
        sd,
        draws,
        seed,
        degenerate_theta: factor.is_none(),
        mode_fallbacks: fallbacks,
        acceptance_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::joint::{BaselineHazard, FunctionalForm};
    use crate::lmm::Design;
    use crate::numerics::linalg::CovStructure;
    use crate::numerics::std_normal_pdf;

    fn design() -> Design {
        serde_json::from_str(
            r#"{"knots":{"boundary_knots":[0.0,19.0],"internal_knots":[2.1,5.5]},
               "group_covariate":"trt","group_index":0,"groups":[0.0,1.0],
               "time_terms":true,"random_effects":true}"#,
        )
        .unwrap()
    }

    fn intercept_design() -> Design {
        serde_json::from_str(
            r#"{"knots":{"boundary_knots":[0.0,19.0],"internal_knots":[]},
               "group_covariate":null,"group_index":null,"groups":[0.0],
               "time_terms":false,"random_effects":true}"#,
        )
        .unwrap()
    }

    fn fit_with(design: Design, theta: JointTheta, form: FunctionalForm) -> JointFit {
        let n = theta.n_free(CovStructure::Unstructured);
        JointFit {
            coordinate_labels: vec![String::new(); n],
            gamma_names: vec![],
            theta,
            form,
            design,
            covariance_structure: CovStructure::Unstructured,
            observed_information: DMatrix::zeros(n, n),
            covariance: DMatrix::zeros(n, n),
            information_pd: false,
            loglik: 0.0,
            converged: true,
            iterations: 0,
            nodes_per_dim: 5,
            n_nodes: 625,
        }
    }

    fn scenario_fit(alpha: f64) -> JointFit {
        let theta = JointTheta {
            beta: vec![0.93, -0.6, 0.63, 0.42, 1.1, 0.54, 0.54, 0.55],
            d: DMatrix::from_diagonal(&DVector::from_vec(vec![0.49, 4.52, 2.33, 1.52])),
            sigma: 2.0,
            gamma: vec![-6.73, 0.41],
            alpha: vec![alpha],
            baseline: BaselineHazard::Weibull { shape: 1.65 },
        };
        fit_with(design(), theta, FunctionalForm::Value)
    }

    fn history() -> Vec<Observation> {
        [(0.0, 1.2), (1.5, 2.0), (4.0, 3.1), (6.2, 2.4)]
            .iter()
            .map(|&(time, value)| Observation { time, value })
            .collect()
    }

    #[test]
    fn gaussian_reduction_at_zero_association() {
        let fit = scenario_fit(0.0);
        let subject = NewSubject::new(vec![1.0], history(), 7.0).unwrap();
        let th = &fit.theta;
        let post = gaussian_posterior(&fit.design, &th.beta, &th.d, th.sigma, 1, &subject.history)
            .unwrap();
        let n = 10_000;
        let q = 4;
        let mut sum = DVector::zeros(q);
        let mut draws = Vec::with_capacity(n);
        let (mut acc, mut prop) = (0, 0);
        for k in 0..n {
            let mut rng = draw_rng(99, k);
            let d = sample_b(&fit, th, &subject, &mut rng).unwrap();
            assert!(!d.fallback);
            acc += d.accepted;
            prop += d.proposals;
            let b = DVector::from_vec(d.b);
            sum += &b;
            draws.push(b);
        }
        assert!(acc as f64 / prop as f64 > 0.5);
        let mean = sum / n as f64;
        for j in 0..q {
            let se = (post.covariance[(j, j)] / n as f64).sqrt();
            assert!((mean[j] - post.mode[j]).abs() < 4.0 * se, "mean {j}");
        }
        // covariance entries: SE of a sample covariance from fourth moments
        for i in 0..q {
            for j in 0..=i {
                let prods: Vec<f64> = draws
                    .iter()
                    .map(|b| (b[i] - post.mode[i]) * (b[j] - post.mode[j]))
                    .collect();
                let m = prods.iter().sum::<f64>() / n as f64;
                let var = prods.iter().map(|p| (p - m).powi(2)).sum::<f64>() / (n - 1) as f64;
                let se = (var / n as f64).sqrt();
                assert!(
                    (m - post.covariance[(i, j)]).abs() < 4.0 * se,
                    "cov {i}{j}: {m} vs {}",
                    post.covariance[(i, j)]
                );
            }
        }
    }

    #[test]
    fn deterministic_under_seed_and_ratio_properties() {
        let fit = scenario_fit(0.7);
        let subject = NewSubject::new(vec![0.0], history(), 6.5).unwrap();
        let horizons = [6.5, 7.0, 9.0, 12.0, 19.0];
        let a = predict_jm(&fit, &subject, &horizons, 50, 3).unwrap();
        let b = predict_jm(&fit, &subject, &horizons, 50, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.point[0], 1.0);
        assert!(a.point.windows(2).all(|w| w[1] <= w[0]));
        assert!(a.point.iter().all(|p| (0.0..=1.0).contains(p)));
        assert!(a.degenerate_theta);
        for j in 0..horizons.len() {
            assert!(a.lower[j] <= a.point[j] + 1e-12 && a.point[j] <= a.upper[j] + 1e-12);
        }
        let mut r1 = draw_rng(5, 2);
        let mut r2 = draw_rng(5, 2);
        assert_eq!(
            sample_b(&fit, &fit.theta, &subject, &mut r1).unwrap(),
            sample_b(&fit, &fit.theta, &subject, &mut r2).unwrap()
        );
    }

    #[test]
    fn theta_sampling_moments_and_degenerate_case() {
        let mut fit = scenario_fit(0.7);
        let (draws, degenerate) = sample_theta(&fit, 3, 1).unwrap();
        assert!(degenerate);
        assert!(draws.iter().all(|d| *d == fit.theta));
        let n = fit.theta.n_free(CovStructure::Unstructured);
        let sd: Vec<f64> = (0..n).map(|j| 0.01 + 0.002 * j as f64).collect();
        fit.covariance =
            DMatrix::from_diagonal(&DVector::from_iterator(n, sd.iter().map(|s| s * s)));
        fit.observed_information = fit.covariance.clone().try_inverse().unwrap();
        fit.information_pd = true;
        let k = 100_000;
        let (draws, degenerate) = sample_theta(&fit, k, 8).unwrap();
        assert!(!degenerate);
        let x_hat = fit.theta.to_free(CovStructure::Unstructured).unwrap();
        let mut mean = vec![0.0; n];
        for d in &draws {
            for (m, v) in mean
                .iter_mut()
                .zip(d.to_free(CovStructure::Unstructured).unwrap())
            {
                *m += v / k as f64;
            }
        }
        for j in 0..n {
            assert!(
                (mean[j] - x_hat[j]).abs() < 4.0 * sd[j] / (k as f64).sqrt(),
                "coord {j}"
            );
        }
        let (again, _) = sample_theta(&fit, 5, 8).unwrap();
        assert_eq!(&again[..], &draws[..5]);
    }

    #[test]
    fn boundary_variance_is_held_at_estimate() {
        let mut fit = scenario_fit(0.7);
        let s = CovStructure::Unstructured;
        let n = fit.theta.n_free(s);
        let flat = 13;
        let labels = fit
            .theta
            .free_labels(s, &["a".into(), "b".into()], FunctionalForm::Value);
        assert_eq!(labels[flat], "D.log_chol[2,2]");
        assert_eq!(fit.theta.log_variance_coordinates(s), vec![8, 10, 13, 17]);
        // coordinate 0 is correlated with the unidentified log-variance
        let mut cov = DMatrix::from_diagonal(&DVector::from_element(n, 0.01));
        cov[(flat, flat)] = 3000.0f64.powi(2);
        cov[(0, flat)] = 0.6 * 0.1 * 3000.0;
        cov[(flat, 0)] = cov[(0, flat)];
        fit.observed_information = cov.clone().try_inverse().unwrap();
        fit.covariance = cov;
        fit.information_pd = true;
        let x_hat = fit.theta.to_free(s).unwrap();
        let k = 20_000;
        let (draws, _) = sample_theta(&fit, k, 2).unwrap();
        let mut ss = 0.0;
        for d in &draws {
            assert!(d.d.iter().all(|v| v.is_finite()));
            let x = d.to_free(s).unwrap();
            assert!((x[flat] - x_hat[flat]).abs() < 1e-9);
            ss += (x[0] - x_hat[0]).powi(2);
        }
        // conditional variance 0.01 (1 - 0.36); SE of a variance estimate is about var sqrt(2/k)
        let cond = 0.01 * (1.0 - 0.36);
        assert!((ss / k as f64 - cond).abs() < 4.0 * cond * (2.0 / k as f64).sqrt());
    }

    #[test]
    fn matches_one_dimensional_quadrature() {
        let theta = JointTheta {
            beta: vec![1.0],
            d: DMatrix::from_element(1, 1, 0.6),
            sigma: 0.7,
            gamma: vec![-2.0],
            alpha: vec![0.8],
            baseline: BaselineHazard::Weibull { shape: 1.4 },
        };
        let fit = fit_with(intercept_design(), theta.clone(), FunctionalForm::Value);
        let hist: Vec<Observation> = [(0.0, 1.5), (1.0, 1.9), (2.0, 1.4)]
            .iter()
            .map(|&(time, value)| Observation { time, value })
            .collect();
        let t = 2.5;
        let u = 4.0;
        let subject = NewSubject::new(vec![], hist.clone(), t).unwrap();
        // posterior of b ∝ Π φ((y - 1 - b)/σ) φ(b/√D) exp(-H(t|b)),
        // H(t|b) = exp(γ0 + α(1 + b)) t^k
        let h = |b: f64, s: f64| (-2.0 + 0.8 * (1.0 + b)).exp() * s.powf(1.4);
        let log_post = |b: f64| {
            let ll: f64 = hist
                .iter()
                .map(|o| (std_normal_pdf((o.value - 1.0 - b) / 0.7)).ln())
                .sum();
            ll - 0.5 * b * b / 0.6 - h(b, t)
        };
        // dense trapezoid over b
        let (mut num, mut den) = (0.0, 0.0);
        let m = log_post(0.4);
        for i in 0..=20_000 {
            let b = -5.0 + i as f64 * 5e-4;
            let f = (log_post(b) - m).exp();
            den += f;
            num += f * (-(h(b, u) - h(b, t))).exp();
        }
        let exact = num / den;
        let k = 20_000;
        let pred = predict_jm(&fit, &subject, &[u], k, 11).unwrap();
        // per-draw ratios replayed from the same streams give the Monte Carlo SE
        let ratios: Vec<f64> = (0..k)
            .map(|i| {
                let d = sample_b(&fit, &theta, &subject, &mut draw_rng(11, i)).unwrap();
                (-(h(d.b[0], u) - h(d.b[0], t))).exp()
            })
            .collect();
        let mean = ratios.iter().sum::<f64>() / k as f64;
        assert!((mean - pred.point[0]).abs() < 1e-6);
        let sd = (ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (k - 1) as f64).sqrt();
        let se = sd / (k as f64).sqrt();
        assert!(
            (pred.point[0] - exact).abs() < 3.0 * se,
            "{} vs {exact} (se {se})",
            pred.point[0]
        );
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(NewSubject::new(vec![], vec![], 1.0).is_err());
        assert!(NewSubject::new(vec![1.0], history(), 5.0).is_err());
        let fit = scenario_fit(0.7);
        let s = NewSubject::new(vec![1.0], history(), 7.0).unwrap();
        assert!(predict_jm(&fit, &s, &[6.0], 10, 1).is_err());
        assert!(predict_jm(&fit, &s, &[8.0], 0, 1).is_err());
    }
}
