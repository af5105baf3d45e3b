//! Landmark analysis.
//!
//! At a landmark time `t` the subjects still at risk are kept, the marker
//! history is summarized by a last-value, last-value-plus-slope, or
//! step-function area feature, and a proportional hazards model is fitted on
//! the reset time scale `s = T - t`. Predictions are
//! `exp{-H0(u - t) exp(γ'w + α'f)}`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{risk_set, Dataset, Observation};
use crate::error::{Error, Result};
use crate::numerics::optim::{minimize_bfgs, BfgsOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LandmarkForm {
    Value,
    ValueSlope,
    Area,
}

impl LandmarkForm {
    pub fn n_features(self) -> usize {
        match self {
            LandmarkForm::ValueSlope => 2,
            _ => 1,
        }
    }

    pub fn feature_names(self) -> Vec<&'static str> {
        match self {
            LandmarkForm::Value => vec!["value"],
            LandmarkForm::ValueSlope => vec!["value", "slope"],
            LandmarkForm::Area => vec!["area"],
        }
    }
}

/// Summarize a marker history at landmark `t`.
///
/// Only observations at or before `t` are used. A single observation gives
/// slope 0. The area integrates the step function holding each observed
/// value until the next measurement, with the last value carried to `t`.
pub fn history_features(history: &[Observation], t: f64, form: LandmarkForm) -> Result<Vec<f64>> {
    let k = history.partition_point(|o| o.time <= t);
    let hist = &history[..k];
    let last = hist
        .last()
        .ok_or_else(|| Error::Data(format!("no observation at or before landmark {t}")))?;
    Ok(match form {
        LandmarkForm::Value => vec![last.value],
        LandmarkForm::ValueSlope => {
            let slope = if hist.len() >= 2 {
                let prev = hist[hist.len() - 2];
                (last.value - prev.value) / (last.time - prev.time)
            } else {
                0.0
            };
            vec![last.value, slope]
        }
        LandmarkForm::Area => {
            let mut area = 0.0;
            for w in hist.windows(2) {
                area += w[0].value * (w[1].time - w[0].time);
            }
            area += last.value * (t - last.time);
            vec![area]
        }
    })
}

/// One landmark-dataset row.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkRow {
    pub subject_id: String,
    /// Reset time `T_i - t`.
    pub time: f64,
    pub event: bool,
    pub covariates: Vec<f64>,
    pub features: Vec<f64>,
}

/// Landmark dataset: the risk set at `t` with its features.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkData {
    pub landmark_time: f64,
    pub form: LandmarkForm,
    pub covariate_names: Vec<String>,
    pub rows: Vec<LandmarkRow>,
}

/// Build the landmark dataset for `risk_set(dataset, t)`.
pub fn landmark_features(dataset: &Dataset, t: f64, form: LandmarkForm) -> Result<LandmarkData> {
    let idx = risk_set(dataset, t);
    if idx.is_empty() {
        return Err(Error::Data(format!("empty risk set at landmark {t}")));
    }
    let rows = idx
        .into_iter()
        .map(|i| {
            let s = &dataset.subjects()[i];
            let features = history_features(&s.observations, t, form).map_err(|_| {
                Error::Data(format!(
                    "subject {}: no observation at or before landmark {t}",
                    s.id
                ))
            })?;
            Ok(LandmarkRow {
                subject_id: s.id.clone(),
                time: s.event_time - t,
                event: s.event,
                covariates: s.covariates.clone(),
                features,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LandmarkData {
        landmark_time: t,
        form,
        covariate_names: dataset.covariate_names().to_vec(),
        rows,
    })
}

impl LandmarkData {
    fn design(&self) -> Vec<Vec<f64>> {
        self.rows
            .iter()
            .map(|r| r.covariates.iter().chain(&r.features).copied().collect())
            .collect()
    }

    fn column_names(&self) -> Vec<String> {
        self.covariate_names
            .iter()
            .cloned()
            .chain(self.form.feature_names().into_iter().map(String::from))
            .collect()
    }

    fn check_design(&self, x: &[Vec<f64>]) -> Result<()> {
        if !self.rows.iter().any(|r| r.event) {
            return Err(Error::Data(format!(
                "no events after landmark {}",
                self.landmark_time
            )));
        }
        let names = self.column_names();
        for (j, name) in names.iter().enumerate() {
            let first = x[0][j];
            if x.iter().all(|row| row[j] == first) {
                return Err(Error::Data(format!(
                    "covariate {name} is constant in the landmark data; its coefficient is not identifiable"
                )));
            }
        }
        Ok(())
    }
}

/// Cox fit on the reset time scale with its Breslow baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxFit {
    pub gamma: Vec<f64>,
    pub alpha: Vec<f64>,
    /// `(s, dH0(s))` at each distinct event reset time.
    pub baseline_steps: Vec<(f64, f64)>,
    pub landmark_time: f64,
    pub form: LandmarkForm,
    pub covariate_names: Vec<String>,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Partial log-likelihood with Breslow ties, its score and information.
/// `order` lists rows by decreasing time.
fn partial_loglik(
    x: &[Vec<f64>],
    times: &[f64],
    events: &[bool],
    order: &[usize],
    coef: &[f64],
) -> (f64, DVector<f64>, DMatrix<f64>) {
    let p = coef.len();
    let eta: Vec<f64> = x
        .iter()
        .map(|r| r.iter().zip(coef).map(|(a, b)| a * b).sum())
        .collect();
    let shift = eta.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut s0 = 0.0;
    let mut s1 = DVector::zeros(p);
    let mut s2 = DMatrix::zeros(p, p);
    let mut ll = 0.0;
    let mut score = DVector::zeros(p);
    let mut info = DMatrix::zeros(p, p);
    let mut k = 0;
    while k < order.len() {
        let tk = times[order[k]];
        let mut j = k;
        let mut d = 0.0;
        let mut xsum = DVector::zeros(p);
        let mut etasum = 0.0;
        while j < order.len() && times[order[j]] == tk {
            let i = order[j];
            let w = (eta[i] - shift).exp();
            let xi = DVector::from_column_slice(&x[i]);
            s0 += w;
            s1 += &xi * w;
            s2 += &xi * xi.transpose() * w;
            if events[i] {
                d += 1.0;
                xsum += &xi;
                etasum += eta[i];
            }
            j += 1;
        }
        if d > 0.0 {
            let mean = &s1 / s0;
            ll += etasum - d * (s0.ln() + shift);
            score += xsum - &mean * d;
            info += (&s2 / s0 - &mean * mean.transpose()) * d;
        }
        k = j;
    }
    (ll, score, info)
}

/// Fit the Cox model by Newton-Raphson with step halving.
pub fn fit_cox(data: &LandmarkData) -> Result<CoxFit> {
    let x = data.design();
    data.check_design(&x)?;
    let n = x.len();
    let p = x[0].len();
    // center columns for stability; coefficients are unaffected
    let means: Vec<f64> = (0..p)
        .map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    let xc: Vec<Vec<f64>> = x
        .iter()
        .map(|r| r.iter().zip(&means).map(|(a, m)| a - m).collect())
        .collect();
    let times: Vec<f64> = data.rows.iter().map(|r| r.time).collect();
    let events: Vec<bool> = data.rows.iter().map(|r| r.event).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[b].total_cmp(&times[a]));

    let mut coef = vec![0.0; p];
    let (mut ll, mut score, mut info) = partial_loglik(&xc, &times, &events, &order, &coef);
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..100 {
        iterations = it;
        let chol = info.clone().cholesky().ok_or_else(|| {
            Error::Numerical(
                "Cox information matrix is singular; covariates may be collinear".into(),
            )
        })?;
        let step = chol.solve(&score);
        // Newton decrement: invariant to rescaling the covariates
        if score.dot(&step) <= 1e-14 * (1.0 + ll.abs()) {
            let last: Vec<f64> = coef.iter().zip(step.iter()).map(|(c, s)| c + s).collect();
            let (ll_t, _, _) = partial_loglik(&xc, &times, &events, &order, &last);
            if ll_t.is_finite() && ll_t >= ll - 1e-12 * ll.abs() {
                coef = last;
                ll = ll_t;
            }
            converged = true;
            break;
        }
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let trial: Vec<f64> = coef
                .iter()
                .zip(step.iter())
                .map(|(c, s)| c + lambda * s)
                .collect();
            let (ll_t, score_t, info_t) = partial_loglik(&xc, &times, &events, &order, &trial);
            if ll_t.is_finite() && ll_t >= ll - 1e-12 * ll.abs() {
                coef = trial;
                ll = ll_t;
                score = score_t;
                info = info_t;
                accepted = true;
                break;
            }
            lambda *= 0.5;
        }
        if !accepted || coef.iter().any(|c| c.abs() > 1e3) {
            break;
        }
    }
    if !converged {
        log::warn!(
            "Cox fit at landmark {} did not converge (possible monotone likelihood)",
            data.landmark_time
        );
    }
    let n_cov = data.covariate_names.len();
    let mut fit = CoxFit {
        gamma: coef[..n_cov].to_vec(),
        alpha: coef[n_cov..].to_vec(),
        baseline_steps: vec![],
        landmark_time: data.landmark_time,
        form: data.form,
        covariate_names: data.covariate_names.clone(),
        loglik: ll,
        converged,
        iterations,
    };
    fit.baseline_steps = breslow_steps(&x, &times, &events, &order, &coef);
    Ok(fit)
}

fn breslow_steps(
    x: &[Vec<f64>],
    times: &[f64],
    events: &[bool],
    order: &[usize],
    coef: &[f64],
) -> Vec<(f64, f64)> {
    let risk: Vec<f64> = x
        .iter()
        .map(|r| r.iter().zip(coef).map(|(a, b)| a * b).sum::<f64>().exp())
        .collect();
    let mut steps = Vec::new();
    let mut s0 = 0.0;
    let mut k = 0;
    while k < order.len() {
        let tk = times[order[k]];
        let mut j = k;
        let mut d = 0.0;
        while j < order.len() && times[order[j]] == tk {
            s0 += risk[order[j]];
            if events[order[j]] {
                d += 1.0;
            }
            j += 1;
        }
        if d > 0.0 {
            steps.push((tk, d / s0));
        }
        k = j;
    }
    steps.reverse();
    steps
}

/// Breslow cumulative baseline hazard at reset time `s`.
pub fn breslow_cumhaz(fit: &CoxFit, s: f64) -> f64 {
    fit.baseline_steps
        .iter()
        .take_while(|(ts, _)| *ts <= s)
        .map(|(_, d)| d)
        .sum()
}

impl CoxFit {
    pub fn linear_predictor(&self, covariates: &[f64], features: &[f64]) -> f64 {
        let g: f64 = self.gamma.iter().zip(covariates).map(|(a, b)| a * b).sum();
        let a: f64 = self.alpha.iter().zip(features).map(|(a, b)| a * b).sum();
        g + a
    }
}

/// `π̂(u | t) = exp{-H0(u - t) exp(η)}`.
pub fn predict_lm(fit: &CoxFit, covariates: &[f64], features: &[f64], u: f64) -> f64 {
    let h = breslow_cumhaz(fit, u - fit.landmark_time);
    (-h * fit.linear_predictor(covariates, features).exp()).exp()
}

/// Landmark model with a Weibull baseline on the reset scale:
/// `h(s) = σ_t s^(σ_t - 1) exp(γ0 + γ'w + α'f)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeibullLandmarkFit {
    pub gamma0: f64,
    pub gamma: Vec<f64>,
    pub alpha: Vec<f64>,
    pub shape: f64,
    pub landmark_time: f64,
    pub form: LandmarkForm,
    pub covariate_names: Vec<String>,
    pub loglik: f64,
    pub converged: bool,
}

impl WeibullLandmarkFit {
    pub fn linear_predictor(&self, covariates: &[f64], features: &[f64]) -> f64 {
        let g: f64 = self.gamma.iter().zip(covariates).map(|(a, b)| a * b).sum();
        let a: f64 = self.alpha.iter().zip(features).map(|(a, b)| a * b).sum();
        self.gamma0 + g + a
    }

    pub fn predict(&self, covariates: &[f64], features: &[f64], u: f64) -> f64 {
        let s = (u - self.landmark_time).max(0.0);
        (-s.powf(self.shape) * self.linear_predictor(covariates, features).exp()).exp()
    }
}

/// Maximum-likelihood Weibull fit on the landmark data.
pub fn fit_weibull_landmark(data: &LandmarkData) -> Result<WeibullLandmarkFit> {
    let x = data.design();
    data.check_design(&x)?;
    let n = x.len();
    let p = x[0].len();
    let means: Vec<f64> = (0..p)
        .map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    let xc: Vec<Vec<f64>> = x
        .iter()
        .map(|r| r.iter().zip(&means).map(|(a, m)| a - m).collect())
        .collect();
    let times: Vec<f64> = data.rows.iter().map(|r| r.time).collect();
    let logt: Vec<f64> = times.iter().map(|t| t.ln()).collect();
    let events: Vec<bool> = data.rows.iter().map(|r| r.event).collect();
    let n_events = events.iter().filter(|&&e| e).count() as f64;
    let total_time: f64 = times.iter().sum();
    // params: [c0, coef.., log shape]
    let fg = |th: &[f64]| {
        let c0 = th[0];
        let coef = &th[1..=p];
        let k = th[p + 1].exp();
        let mut ll = 0.0;
        let mut g = vec![0.0; p + 2];
        for i in 0..n {
            let eta = c0 + xc[i].iter().zip(coef).map(|(a, b)| a * b).sum::<f64>();
            let hk = (k * logt[i] + eta).exp();
            let mut r = -hk;
            if events[i] {
                ll += k.ln() + (k - 1.0) * logt[i] + eta;
                r += 1.0;
                g[p + 1] += 1.0 + k * logt[i];
            }
            ll -= hk;
            g[0] += r;
            for j in 0..p {
                g[j + 1] += r * xc[i][j];
            }
            g[p + 1] -= hk * k * logt[i];
        }
        (-ll, g.into_iter().map(|v| -v).collect())
    };
    let mut x0 = vec![0.0; p + 2];
    x0[0] = (n_events / total_time).ln();
    let opts = BfgsOptions {
        rel_tol: 1e-12,
        grad_tol: 1e-8,
        ..Default::default()
    };
    let opt = minimize_bfgs(fg, &x0, &opts);
    let coef = &opt.x[1..=p];
    let gamma0 = opt.x[0] - coef.iter().zip(&means).map(|(a, m)| a * m).sum::<f64>();
    let n_cov = data.covariate_names.len();
    Ok(WeibullLandmarkFit {
        gamma0,
        gamma: coef[..n_cov].to_vec(),
        alpha: coef[n_cov..].to_vec(),
        shape: opt.x[p + 1].exp(),
        landmark_time: data.landmark_time,
        form: data.form,
        covariate_names: data.covariate_names.clone(),
        loglik: -opt.value,
        converged: opt.converged,
    })
}

/// Baseline hazard used by a landmark model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LandmarkBaseline {
    #[default]
    Breslow,
    Weibull,
}

/// A fitted landmark model of either baseline kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "baseline", rename_all = "snake_case")]
pub enum LandmarkModel {
    Breslow(CoxFit),
    Weibull(WeibullLandmarkFit),
}

impl LandmarkModel {
    pub fn fit(
        dataset: &Dataset,
        t: f64,
        form: LandmarkForm,
        baseline: LandmarkBaseline,
    ) -> Result<LandmarkModel> {
        let data = landmark_features(dataset, t, form)?;
        Ok(match baseline {
            LandmarkBaseline::Breslow => LandmarkModel::Breslow(fit_cox(&data)?),
            LandmarkBaseline::Weibull => LandmarkModel::Weibull(fit_weibull_landmark(&data)?),
        })
    }

    pub fn landmark_time(&self) -> f64 {
        match self {
            LandmarkModel::Breslow(f) => f.landmark_time,
            LandmarkModel::Weibull(f) => f.landmark_time,
        }
    }

    pub fn form(&self) -> LandmarkForm {
        match self {
            LandmarkModel::Breslow(f) => f.form,
            LandmarkModel::Weibull(f) => f.form,
        }
    }

    pub fn loglik(&self) -> f64 {
        match self {
            LandmarkModel::Breslow(f) => f.loglik,
            LandmarkModel::Weibull(f) => f.loglik,
        }
    }

    pub fn converged(&self) -> bool {
        match self {
            LandmarkModel::Breslow(f) => f.converged,
            LandmarkModel::Weibull(f) => f.converged,
        }
    }

    /// Conditional survival `π̂(u | t)` for a subject with covariates and history.
    pub fn predict(&self, covariates: &[f64], history: &[Observation], u: f64) -> Result<f64> {
        let t = self.landmark_time();
        let f = history_features(history, t, self.form())?;
        Ok(match self {
            LandmarkModel::Breslow(fit) => predict_lm(fit, covariates, &f, u),
            LandmarkModel::Weibull(fit) => fit.predict(covariates, &f, u),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(v: &[(f64, f64)]) -> Vec<Observation> {
        v.iter()
            .map(|&(time, value)| Observation { time, value })
            .collect()
    }

    #[test]
    fn features_follow_conventions() {
        let h = obs(&[(0.0, 2.0), (3.0, 4.0)]);
        assert_eq!(
            history_features(&h, 5.0, LandmarkForm::Value).unwrap(),
            vec![4.0]
        );
        assert_eq!(
            history_features(&h, 5.0, LandmarkForm::Area).unwrap(),
            vec![14.0]
        );
        assert_eq!(
            history_features(&h, 5.0, LandmarkForm::ValueSlope).unwrap(),
            vec![4.0, 2.0 / 3.0]
        );
        assert_eq!(
            history_features(&h[..1], 5.0, LandmarkForm::ValueSlope).unwrap(),
            vec![2.0, 0.0]
        );
        // later observations ignored
        assert_eq!(
            history_features(&h, 2.0, LandmarkForm::Value).unwrap(),
            vec![2.0]
        );
        assert!(history_features(&obs(&[(3.0, 1.0)]), 2.0, LandmarkForm::Value).is_err());
    }

    fn data(rows: &[(f64, bool, f64)]) -> LandmarkData {
        LandmarkData {
            landmark_time: 0.0,
            form: LandmarkForm::Value,
            covariate_names: vec![],
            rows: rows
                .iter()
                .enumerate()
                .map(|(i, &(time, event, f))| LandmarkRow {
                    subject_id: format!("s{i}"),
                    time,
                    event,
                    covariates: vec![],
                    features: vec![f],
                })
                .collect(),
        }
    }

    #[test]
    fn cox_matches_grid_search() {
        let d = data(&[
            (1.0, true, 1.0),
            (2.0, true, 0.0),
            (3.0, false, 1.0),
            (4.0, true, 1.0),
            (5.0, false, 0.0),
        ]);
        let fit = fit_cox(&d).unwrap();
        assert!(fit.converged);
        // brute-force partial likelihood
        let pl = |b: f64| {
            let mut ll = 0.0;
            for r in &d.rows {
                if r.event {
                    let denom: f64 = d
                        .rows
                        .iter()
                        .filter(|o| o.time >= r.time)
                        .map(|o| (b * o.features[0]).exp())
                        .sum();
                    ll += b * r.features[0] - denom.ln();
                }
            }
            ll
        };
        let mut best = (f64::NEG_INFINITY, 0.0);
        let mut lo = -5.0;
        let mut hi = 5.0;
        for _ in 0..6 {
            let step = (hi - lo) / 1000.0;
            for k in 0..=1000 {
                let b = lo + k as f64 * step;
                let v = pl(b);
                if v > best.0 {
                    best = (v, b);
                }
            }
            lo = best.1 - 2.0 * step;
            hi = best.1 + 2.0 * step;
        }
        assert!(
            (fit.alpha[0] - best.1).abs() < 1e-6,
            "{} vs {}",
            fit.alpha[0],
            best.1
        );
        assert!((fit.loglik - best.0).abs() < 1e-9);
    }

    #[test]
    fn constant_covariate_and_no_events_are_errors() {
        let d = data(&[(1.0, true, 1.0), (2.0, false, 1.0)]);
        assert!(matches!(fit_cox(&d), Err(Error::Data(m)) if m.contains("not identifiable")));
        let d = data(&[(1.0, false, 1.0), (2.0, false, 0.0)]);
        assert!(matches!(fit_cox(&d), Err(Error::Data(m)) if m.contains("no events")));
    }

    #[test]
    fn null_model_breslow_is_nelson_aalen() {
        let fit = CoxFit {
            gamma: vec![],
            alpha: vec![0.0],
            baseline_steps: breslow_steps(
                &[vec![0.0], vec![0.0], vec![0.0]],
                &[1.0, 2.0, 3.0],
                &[true, true, false],
                &[2, 1, 0],
                &[0.0],
            ),
            landmark_time: 0.0,
            form: LandmarkForm::Value,
            covariate_names: vec![],
            loglik: 0.0,
            converged: true,
            iterations: 0,
        };
        assert_eq!(breslow_cumhaz(&fit, 0.5), 0.0);
        assert!((breslow_cumhaz(&fit, 2.0) - (1.0 / 3.0 + 1.0 / 2.0)).abs() < 1e-15);
        assert_eq!(predict_lm(&fit, &[], &[1.0], 0.0), 1.0);
        let p = predict_lm(&fit, &[], &[1.0], 2.5);
        assert!((p - (-(1.0f64 / 3.0 + 0.5)).exp()).abs() < 1e-15);
    }

    #[test]
    fn weibull_landmark_recovers_exponential_rate() {
        // exponential data with rate 0.5 * exp(0.7 f); event times from fixed quantiles
        let mut rows = Vec::new();
        for i in 0..400 {
            let f = (i % 2) as f64;
            let u = (i as f64 + 0.5) / 400.0;
            let rate = 0.5 * (0.7 * f).exp();
            let t = -(1.0 - u).ln() / rate;
            rows.push((t, true, f));
        }
        let fit = fit_weibull_landmark(&data(&rows)).unwrap();
        assert!(fit.converged);
        assert!((fit.shape - 1.0).abs() < 0.1);
        assert!((fit.alpha[0] - 0.7).abs() < 0.15);
        assert!((fit.gamma0 - 0.5f64.ln()).abs() < 0.15);
    }
}
