//! Discrimination and calibration measures for dynamic predictions.
//!
//! All measures are computed from a [`PredictorHandle`], which maps a
//! subject, a landmark `t` and horizons `u >= t` to `π̂(u | t)`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use log::{debug, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SubjectRecord};
use crate::error::{Error, Result};
use crate::joint::JointFit;
use crate::landmark::{LandmarkBaseline, LandmarkForm, LandmarkModel};
use crate::numerics::QuadratureRule;
use crate::predict::{predict_jm, NewSubject};

/// Right-continuous step survival curve starting at 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSurvival {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl StepSurvival {
    pub fn eval(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&s| s <= t);
        if k == 0 {
            1.0
        } else {
            self.values[k - 1]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KmTarget {
    Event,
    /// Censoring distribution: the roles of events and censorings are swapped.
    Censoring,
}

/// Product-limit estimator; tied times are handled in one factor.
pub fn kaplan_meier(times: &[f64], status: &[bool], target: KmTarget) -> Result<StepSurvival> {
    if times.is_empty() || times.len() != status.len() {
        return Err(Error::Data("Kaplan-Meier needs a non-empty sample".into()));
    }
    let mut idx: Vec<usize> = (0..times.len()).collect();
    idx.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let hit = |i: usize| match target {
        KmTarget::Event => status[i],
        KmTarget::Censoring => !status[i],
    };
    let n = times.len();
    let mut out = StepSurvival {
        times: vec![],
        values: vec![],
    };
    let mut s = 1.0;
    let mut k = 0;
    while k < n {
        let t = times[idx[k]];
        let at_risk = n - k;
        let mut d = 0;
        let mut m = k;
        while m < n && times[idx[m]] == t {
            d += hit(idx[m]) as usize;
            m += 1;
        }
        if d > 0 {
            s *= 1.0 - d as f64 / at_risk as f64;
            out.times.push(t);
            out.values.push(s);
        }
        k = m;
    }
    Ok(out)
}

/// `{Ŝ(t) - Ŝ(t + Δt)} Ŝ(t + Δt)`, the estimated probability that a random
/// pair is comparable at `t`.
pub fn weight_e(surv: &StepSurvival, t: f64, dt: f64) -> f64 {
    let a = surv.eval(t);
    let b = surv.eval(t + dt);
    ((a - b) * b).max(0.0)
}

/// Ordered comparable pairs `(i, j)`: `i` has an event in `(t, t + Δt]`
/// and `j` is known to survive past it.
pub fn comparable_pairs(dataset: &Dataset, t: f64, dt: f64) -> Vec<(usize, usize)> {
    let s = dataset.subjects();
    let end = t + dt;
    let cases: Vec<usize> = (0..s.len())
        .filter(|&i| s[i].event && s[i].event_time > t && s[i].event_time <= end)
        .collect();
    let controls: Vec<usize> = (0..s.len())
        .filter(|&j| s[j].event_time > end || (s[j].event_time == end && !s[j].event))
        .collect();
    let mut out = Vec::with_capacity(cases.len() * controls.len());
    for &i in &cases {
        for &j in &controls {
            if i != j {
                out.push((i, j));
            }
        }
    }
    out
}

/// Source of dynamic predictions for metric evaluation.
pub trait PredictorHandle: Sync {
    fn name(&self) -> String;

    /// `π̂(u | t)` for each horizon `u >= t`, using the subject's covariates
    /// and marker history through `t` only.
    fn predict(&self, subject: &SubjectRecord, t: f64, horizons: &[f64]) -> Result<Vec<f64>>;
}

/// Joint-model predictions by Monte Carlo.
pub struct JointPredictor {
    pub label: String,
    pub fit: JointFit,
    pub draws: usize,
    pub seed: u64,
}

impl PredictorHandle for JointPredictor {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn predict(&self, subject: &SubjectRecord, t: f64, horizons: &[f64]) -> Result<Vec<f64>> {
        let history = subject.history_until(t).to_vec();
        let ns = NewSubject::new(subject.covariates.clone(), history, t)
            .map_err(|e| Error::Data(format!("subject {}: {e}", subject.id)))?;
        Ok(predict_jm(&self.fit, &ns, horizons, self.draws, self.seed)?.point)
    }
}

/// Landmark predictions, refitting on the training data at each new
/// landmark time and caching the fits.
pub struct LandmarkPredictor {
    pub label: String,
    pub training: Dataset,
    pub form: LandmarkForm,
    pub baseline: LandmarkBaseline,
    cache: Mutex<HashMap<u64, Arc<Result<LandmarkModel>>>>,
}

impl LandmarkPredictor {
    pub fn new(
        label: impl Into<String>,
        training: Dataset,
        form: LandmarkForm,
        baseline: LandmarkBaseline,
    ) -> Self {
        LandmarkPredictor {
            label: label.into(),
            training,
            form,
            baseline,
            cache: Mutex::new(HashMap::new()),
        }
    }

    /// Seed the cache with an existing fit.
    pub fn with_fit(self, model: LandmarkModel) -> Self {
        self.cache
            .lock()
            .unwrap()
            .insert(model.landmark_time().to_bits(), Arc::new(Ok(model)));
        self
    }

    pub fn model_at(&self, t: f64) -> Arc<Result<LandmarkModel>> {
        if let Some(m) = self.cache.lock().unwrap().get(&t.to_bits()) {
            return m.clone();
        }
        let m = Arc::new(LandmarkModel::fit(
            &self.training,
            t,
            self.form,
            self.baseline,
        ));
        self.cache.lock().unwrap().insert(t.to_bits(), m.clone());
        m
    }
}

impl PredictorHandle for LandmarkPredictor {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn predict(&self, subject: &SubjectRecord, t: f64, horizons: &[f64]) -> Result<Vec<f64>> {
        let model = self.model_at(t);
        let model = match model.as_ref() {
            Ok(m) => m,
            Err(e) => return Err(Error::Data(format!("landmark fit at {t}: {e}"))),
        };
        let history = subject.history_until(t);
        horizons
            .iter()
            .map(|&u| model.predict(&subject.covariates, history, u))
            .collect()
    }
}

fn predict_many<P: PredictorHandle + ?Sized>(
    predictor: &P,
    dataset: &Dataset,
    indices: &[usize],
    t: f64,
    horizons: &[f64],
) -> Result<HashMap<usize, Vec<f64>>> {
    let rows: Vec<Result<(usize, Vec<f64>)>> = indices
        .par_iter()
        .map(|&i| {
            predictor
                .predict(&dataset.subjects()[i], t, horizons)
                .map(|p| (i, p))
        })
        .collect();
    rows.into_iter().collect()
}

/// Proportion of comparable pairs ranked concordantly, `π̂_i < π̂_j` strictly.
pub fn auc_hat<P: PredictorHandle + ?Sized>(
    predictor: &P,
    dataset: &Dataset,
    t: f64,
    dt: f64,
) -> Result<f64> {
    let pairs: Vec<(usize, usize)> = comparable_pairs(dataset, t, dt)
        .into_iter()
        .filter(|&(i, j)| {
            let s = dataset.subjects();
            !s[i].history_until(t).is_empty() && !s[j].history_until(t).is_empty()
        })
        .collect();
    if pairs.is_empty() {
        return Err(Error::Data(format!(
            "no comparable pairs at t = {t}, dt = {dt}"
        )));
    }
    let mut involved: Vec<usize> = pairs.iter().flat_map(|&(i, j)| [i, j]).collect();
    involved.sort_unstable();
    involved.dedup();
    let pred = predict_many(predictor, dataset, &involved, t, &[t + dt])?;
    let concordant = pairs
        .iter()
        .filter(|&&(i, j)| pred[&i][0] < pred[&j][0])
        .count();
    Ok(concordant as f64 / pairs.len() as f64)
}

/// Dynamic concordance index and its per-abscissa components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicConcordance {
    pub value: f64,
    pub dt: f64,
    pub t_max: f64,
    pub abscissas: Vec<f64>,
    /// AUC per abscissa; `None` where it is undefined and excluded.
    pub auc: Vec<Option<f64>>,
    pub weights: Vec<f64>,
}

/// Weighted average of `AUC(t_k, Δt)` over the 15 Gauss-Kronrod abscissas on
/// `[0, t_max]`, weighted by the quadrature weight times `Pr{E(t_k)}`.
///
/// Abscissas where the AUC is undefined (no comparable pairs, or a
/// landmark model that cannot be fitted there) are left out of both sums.
pub fn c_dyn_hat<P: PredictorHandle + ?Sized>(
    predictor: &P,
    dataset: &Dataset,
    dt: f64,
    t_max: f64,
) -> Result<DynamicConcordance> {
    if !(t_max > 0.0) || !(dt > 0.0) {
        return Err(Error::Usage("t_max and dt must be positive".into()));
    }
    let km = kaplan_meier(&dataset.event_times(), &dataset.events(), KmTarget::Event)?;
    let (abscissas, qw) = QuadratureRule::gauss_kronrod_15().rescaled(0.0, t_max);
    let mut auc = Vec::with_capacity(15);
    let mut weights = Vec::with_capacity(15);
    let (mut num, mut den) = (0.0, 0.0);
    for (k, &t) in abscissas.iter().enumerate() {
        let w = qw[k] * weight_e(&km, t, dt);
        weights.push(w);
        match auc_hat(predictor, dataset, t, dt) {
            Ok(a) => {
                num += w * a;
                den += w;
                auc.push(Some(a));
            }
            Err(Error::Data(msg)) => {
                debug!("{}: abscissa {t:.4} excluded: {msg}", predictor.name());
                auc.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    if !(den > 0.0) {
        return Err(Error::Data(
            "dynamic concordance undefined: no usable abscissa".into(),
        ));
    }
    let excluded = auc.iter().filter(|a| a.is_none()).count();
    if excluded > 0 {
        warn!(
            "{}: {excluded} of 15 abscissas excluded from the dynamic concordance",
            predictor.name()
        );
    }
    Ok(DynamicConcordance {
        value: num / den,
        dt,
        t_max,
        abscissas,
        auc,
        weights,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    #[default]
    Absolute,
    Square,
}

impl Loss {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Loss::Absolute => x.abs(),
            Loss::Square => x * x,
        }
    }
}

impl std::str::FromStr for Loss {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "absolute" => Ok(Loss::Absolute),
            "square" => Ok(Loss::Square),
            other => Err(Error::Usage(format!("unknown loss '{other}'"))),
        }
    }
}

/// Prediction errors `PE(s | t)` for several `s`, sharing predictions.
fn pe_grid<P: PredictorHandle + ?Sized>(
    predictor: &P,
    dataset: &Dataset,
    t: f64,
    grid: &[f64],
    loss: Loss,
) -> Result<Vec<f64>> {
    let subjects = dataset.subjects();
    let at_risk: Vec<usize> = (0..subjects.len())
        .filter(|&i| subjects[i].event_time >= t)
        .collect();
    if at_risk.is_empty() {
        return Err(Error::Data(format!("empty risk set at t = {t}")));
    }
    let pred_t = predict_many(predictor, dataset, &at_risk, t, grid)?;
    // π̂_i(s | T_i) for subjects censored before s
    let censored: Vec<usize> = at_risk
        .iter()
        .copied()
        .filter(|&i| !subjects[i].event && grid.iter().any(|&s| subjects[i].event_time < s))
        .collect();
    let rows: Vec<Result<(usize, Vec<f64>)>> = censored
        .par_iter()
        .map(|&i| {
            let ti = subjects[i].event_time;
            let later: Vec<f64> = grid.iter().map(|&s| s.max(ti)).collect();
            predictor.predict(&subjects[i], ti, &later).map(|p| (i, p))
        })
        .collect();
    let pred_c: HashMap<usize, Vec<f64>> = rows.into_iter().collect::<Result<_>>()?;
    let n = at_risk.len() as f64;
    Ok(grid
        .iter()
        .enumerate()
        .map(|(k, &s)| {
            at_risk
                .iter()
                .map(|&i| {
                    let subj = &subjects[i];
                    let p = pred_t[&i][k];
                    if subj.event_time >= s {
                        loss.eval(1.0 - p)
                    } else if subj.event {
                        loss.eval(0.0 - p)
                    } else {
                        let pc = pred_c[&i][k];
                        pc * loss.eval(1.0 - p) + (1.0 - pc) * loss.eval(0.0 - p)
                    }
                })
                .sum::<f64>()
                / n
        })
        .collect())
}

/// Censoring-aware prediction error `PE(u | t)`.
pub fn pe_hat<P: PredictorHandle + ?Sized>(
    predictor: &P,
    dataset: &Dataset,
    t: f64,
    u: f64,
    loss: Loss,
) -> Result<f64> {
    if !(u > t) {
        return Err(Error::Usage(format!(
            "horizon {u} must exceed the landmark {t}"
        )));
    }
    Ok(pe_grid(predictor, dataset, t, &[u], loss)?[0])
}

/// Integrated prediction error over `[t, u]`: a weighted average of
/// `PE(T_i | t)` over event times `T_i` in `[t, u]` with weights
/// `Ŝ_C(t) / Ŝ_C(T_i)`. With `literal`, the averaged quantity is
/// `PE(u | t)` for every event, which collapses to `PE(u | t)`.
pub fn ipe_hat<P: PredictorHandle + ?Sized>(
    predictor: &P,
    dataset: &Dataset,
    t: f64,
    u: f64,
    loss: Loss,
    literal: bool,
) -> Result<f64> {
    if !(u > t) {
        return Err(Error::Usage(format!(
            "horizon {u} must exceed the landmark {t}"
        )));
    }
    let subjects = dataset.subjects();
    let events: Vec<f64> = subjects
        .iter()
        .filter(|s| s.event && s.event_time >= t && s.event_time <= u)
        .map(|s| s.event_time)
        .collect();
    if events.is_empty() {
        return Err(Error::Data(format!("no events in [{t}, {u}]")));
    }
    let cens = kaplan_meier(
        &dataset.event_times(),
        &dataset.events(),
        KmTarget::Censoring,
    )?;
    let sc_t = cens.eval(t);
    let weights: Vec<f64> = events.iter().map(|&s| sc_t / cens.eval(s)).collect();
    let values = if literal {
        vec![pe_grid(predictor, dataset, t, &[u], loss)?[0]; events.len()]
    } else {
        let mut grid = events.clone();
        grid.sort_by(f64::total_cmp);
        grid.dedup();
        let pe = pe_grid(predictor, dataset, t, &grid, loss)?;
        events
            .iter()
            .map(|s| pe[grid.partition_point(|g| g < s)])
            .collect()
    };
    let num: f64 = weights.iter().zip(&values).map(|(w, v)| w * v).sum();
    let den: f64 = weights.iter().sum();
    Ok(num / den)
}

/// Explained variation `1 - M2 / M1` of a model `M2` relative to `M1`.
pub fn r2(m1: f64, m2: f64) -> Result<f64> {
    if m1 == 0.0 || !m1.is_finite() {
        return Err(Error::Numerical("reference measure is zero".into()));
    }
    Ok(1.0 - m2 / m1)
}

/// One row of a metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub model: String,
    pub metric: String,
    pub t: f64,
    /// Horizon `u` for PE/IPE, window `Δt` for AUC and C_dyn.
    pub param: f64,
    pub value: Option<f64>,
    pub note: Option<String>,
}

/// Settings for [`evaluate_predictors`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationConfig {
    pub t: f64,
    pub u: f64,
    pub dt: f64,
    pub t_max: f64,
    pub loss: Loss,
    pub literal_ipe: bool,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            t: 7.5,
            u: 9.5,
            dt: 2.0,
            t_max: 15.0,
            loss: Loss::Absolute,
            literal_ipe: false,
        }
    }
}

fn row(model: &str, metric: &str, t: f64, param: f64, r: Result<f64>) -> MetricRow {
    let (value, note) = match r {
        Ok(v) => (Some(v), None),
        Err(e) => (None, Some(e.to_string())),
    };
    MetricRow {
        model: model.to_string(),
        metric: metric.to_string(),
        t,
        param,
        value,
        note,
    }
}

/// PE, IPE, AUC and C_dyn for each predictor; undefined values are reported
/// as missing with the reason.
pub fn evaluate_predictors(
    predictors: &[&dyn PredictorHandle],
    dataset: &Dataset,
    cfg: &EvaluationConfig,
) -> Vec<MetricRow> {
    let mut out = Vec::new();
    for p in predictors {
        let name = p.name();
        out.push(row(
            &name,
            "PE",
            cfg.t,
            cfg.u,
            pe_hat(*p, dataset, cfg.t, cfg.u, cfg.loss),
        ));
        out.push(row(
            &name,
            "IPE",
            cfg.t,
            cfg.u,
            ipe_hat(*p, dataset, cfg.t, cfg.u, cfg.loss, cfg.literal_ipe),
        ));
        out.push(row(
            &name,
            "AUC",
            cfg.t,
            cfg.u - cfg.t,
            auc_hat(*p, dataset, cfg.t, cfg.u - cfg.t),
        ));
        out.push(row(
            &name,
            "C_dyn",
            cfg.t_max,
            cfg.dt,
            c_dyn_hat(*p, dataset, cfg.dt, cfg.t_max).map(|c| c.value),
        ));
    }
    out
}

/// `R²` rows for a reference model against every other model, for PE and IPE.
pub fn r2_rows(rows: &[MetricRow], reference: &str) -> Vec<MetricRow> {
    let lookup = |model: &str, metric: &str| {
        rows.iter()
            .find(|r| r.model == model && r.metric == metric)
            .and_then(|r| r.value.map(|v| (v, r.t, r.param)))
    };
    let mut models: Vec<&str> = rows.iter().map(|r| r.model.as_str()).collect();
    models.dedup();
    let mut out = Vec::new();
    for m in models.into_iter().filter(|m| *m != reference) {
        for metric in ["PE", "IPE"] {
            let label = format!("R2_{metric}");
            match (lookup(reference, metric), lookup(m, metric)) {
                (Some((m1, t, u)), Some((m2, _, _))) => out.push(row(m, &label, t, u, r2(m1, m2))),
                _ => out.push(MetricRow {
                    model: m.to_string(),
                    metric: label,
                    t: f64::NAN,
                    param: f64::NAN,
                    value: None,
                    note: Some("component measure missing".into()),
                }),
            }
        }
    }
    out
}

/// CSV rendering of metric rows; missing values are written as `NA`.
pub fn rows_to_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("model,metric,t,param,value,note\n");
    for r in rows {
        let v = r
            .value
            .map(|v| v.to_string())
            .unwrap_or_else(|| "NA".into());
        let note = r.note.clone().unwrap_or_default().replace(['"', ','], ";");
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.model, r.metric, r.t, r.param, v, note
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Observation;

    fn subject(id: usize, t: f64, event: bool) -> SubjectRecord {
        SubjectRecord {
            id: format!("s{id}"),
            covariates: vec![],
            event_time: t,
            event,
            observations: vec![Observation {
                time: 0.0,
                value: id as f64,
            }],
        }
    }

    fn dataset(rows: &[(f64, bool)]) -> Dataset {
        let s = rows
            .iter()
            .enumerate()
            .map(|(i, &(t, e))| subject(i, t, e))
            .collect();
        Dataset::new(s, vec![]).unwrap()
    }

    /// Predictor returning a fixed score per subject index (parsed from the id).
    struct Scores(Vec<f64>);

    impl PredictorHandle for Scores {
        fn name(&self) -> String {
            "scores".into()
        }
        fn predict(&self, s: &SubjectRecord, t: f64, horizons: &[f64]) -> Result<Vec<f64>> {
            let i: usize = s.id[1..].parse().unwrap();
            Ok(horizons
                .iter()
                .map(|&u| if u == t { 1.0 } else { self.0[i] })
                .collect())
        }
    }

    #[test]
    fn kaplan_meier_hand_values() {
        let km = kaplan_meier(&[1.0, 2.0, 3.0], &[true, false, true], KmTarget::Event).unwrap();
        assert_eq!(km.eval(0.5), 1.0);
        assert_eq!(km.eval(1.0), 1.0 - 1.0 / 3.0);
        assert_eq!(km.eval(2.0), 1.0 - 1.0 / 3.0);
        assert_eq!(km.eval(3.0), 0.0);
        let c = kaplan_meier(&[1.0, 2.0, 3.0], &[true, false, true], KmTarget::Censoring).unwrap();
        assert_eq!(c.times, vec![2.0]);
        assert_eq!(c.eval(2.0), 0.5);
        let all = kaplan_meier(&[1.0, 2.0], &[false, false], KmTarget::Event).unwrap();
        assert_eq!(all.eval(5.0), 1.0);
        assert!(kaplan_meier(&[], &[], KmTarget::Event).is_err());
        // ties: two events at 1 out of four
        let tie = kaplan_meier(
            &[1.0, 1.0, 2.0, 4.0],
            &[true, true, false, true],
            KmTarget::Event,
        )
        .unwrap();
        assert_eq!(tie.eval(1.0), 0.5);
        assert_eq!(tie.eval(4.0), 0.0);
    }

    #[test]
    fn weight_e_values() {
        let s = StepSurvival {
            times: vec![1.0, 3.0],
            values: vec![0.8, 0.5],
        };
        assert!((weight_e(&s, 1.0, 2.0) - 0.15).abs() < 1e-15);
        let one = StepSurvival {
            times: vec![],
            values: vec![],
        };
        assert_eq!(weight_e(&one, 1.0, 2.0), 0.0);
    }

    #[test]
    fn pairs_and_auc() {
        let ds = dataset(&[(1.0, true), (5.0, false)]);
        assert_eq!(comparable_pairs(&ds, 0.0, 2.0), vec![(0, 1)]);
        assert!(comparable_pairs(&ds, 1.5, 2.0).is_empty());
        // censored exactly at the window end is a control
        let ds2 = dataset(&[(1.0, true), (2.0, false), (2.0, true)]);
        assert_eq!(comparable_pairs(&ds2, 0.0, 2.0), vec![(0, 1), (2, 1)]);

        assert_eq!(
            auc_hat(&Scores(vec![0.2, 0.9]), &ds, 0.0, 2.0).unwrap(),
            1.0
        );
        assert_eq!(
            auc_hat(&Scores(vec![0.5, 0.5]), &ds, 0.0, 2.0).unwrap(),
            0.0
        );
        assert!(auc_hat(&Scores(vec![0.5, 0.5]), &ds, 1.5, 2.0).is_err());
    }

    #[test]
    fn c_dyn_composition() {
        let ds = dataset(&[(1.0, true), (2.5, true), (4.0, false), (6.0, true)]);
        let p = Scores(vec![0.1, 0.3, 0.9, 0.2]);
        let c = c_dyn_hat(&p, &ds, 2.0, 5.0).unwrap();
        let km = kaplan_meier(&ds.event_times(), &ds.events(), KmTarget::Event).unwrap();
        let (x, w) = QuadratureRule::gauss_kronrod_15().rescaled(0.0, 5.0);
        let (mut num, mut den) = (0.0, 0.0);
        for k in 0..15 {
            if let Ok(a) = auc_hat(&p, &ds, x[k], 2.0) {
                let wk = w[k] * weight_e(&km, x[k], 2.0);
                num += wk * a;
                den += wk;
            }
        }
        assert!((c.value - num / den).abs() < 1e-15);
        assert!((0.0..=1.0).contains(&c.value));
        let perfect = Scores(vec![0.0, 0.1, 1.0, 0.5]);
        let cp = c_dyn_hat(&perfect, &ds, 2.0, 5.0).unwrap();
        assert_eq!(cp.value, 1.0);
        assert_eq!(
            c_dyn_hat(&Scores(vec![0.4; 4]), &ds, 2.0, 5.0)
                .unwrap()
                .value,
            0.0
        );
    }

    #[test]
    fn prediction_error_cases() {
        // no censoring inside the window
        let ds = dataset(&[(2.0, true), (3.0, true), (8.0, false), (9.0, true)]);
        let perfect = Scores(vec![0.0, 0.0, 1.0, 1.0]);
        assert_eq!(
            pe_hat(&perfect, &ds, 1.0, 5.0, Loss::Absolute).unwrap(),
            0.0
        );
        let half = Scores(vec![0.5; 4]);
        assert_eq!(pe_hat(&half, &ds, 1.0, 5.0, Loss::Absolute).unwrap(), 0.5);
        assert_eq!(pe_hat(&half, &ds, 1.0, 5.0, Loss::Square).unwrap(), 0.25);

        // one censoring at 3 inside (1, 5]
        let ds = dataset(&[(2.0, true), (3.0, false), (8.0, false), (9.0, true)]);
        let p = Scores(vec![0.3, 0.6, 0.8, 0.7]);
        // the censored subject's π̂(u | T_i) equals its score 0.6 here
        let terms = [
            0.3,                   // event before u
            0.6 * 0.4 + 0.4 * 0.6, // censored in window
            0.2,                   // survivor
            0.3,                   // survivor
        ];
        let expected = terms.iter().sum::<f64>() / 4.0;
        assert!((pe_hat(&p, &ds, 1.0, 5.0, Loss::Absolute).unwrap() - expected).abs() < 1e-15);
        assert!(pe_hat(&p, &ds, 10.0, 12.0, Loss::Absolute).is_err());
    }

    #[test]
    fn integrated_prediction_error_cases() {
        let ds = dataset(&[(2.0, true), (8.0, false), (9.0, true)]);
        let p = Scores(vec![0.3, 0.8, 0.7]);
        let one = ipe_hat(&p, &ds, 1.0, 5.0, Loss::Absolute, false).unwrap();
        assert!((one - pe_hat(&p, &ds, 1.0, 2.0, Loss::Absolute).unwrap()).abs() < 1e-15);
        let lit = ipe_hat(&p, &ds, 1.0, 5.0, Loss::Absolute, true).unwrap();
        assert_eq!(lit, pe_hat(&p, &ds, 1.0, 5.0, Loss::Absolute).unwrap());

        // two events around an interim censoring
        let ds = dataset(&[(2.0, true), (3.0, false), (4.0, true), (9.0, false)]);
        let p = Scores(vec![0.2, 0.5, 0.4, 0.9]);
        let cens = kaplan_meier(&ds.event_times(), &ds.events(), KmTarget::Censoring).unwrap();
        // Ŝ_C: 1 before 3, 2/3 from 3 (three at risk), 0 from 9
        assert_eq!(cens.eval(2.0), 1.0);
        assert!((cens.eval(4.0) - 2.0 / 3.0).abs() < 1e-15);
        let (w1, w2) = (1.0, 1.5);
        let pe2 = pe_hat(&p, &ds, 1.0, 2.0, Loss::Absolute).unwrap();
        let pe4 = pe_hat(&p, &ds, 1.0, 4.0, Loss::Absolute).unwrap();
        let expected = (w1 * pe2 + w2 * pe4) / (w1 + w2);
        assert!(
            (ipe_hat(&p, &ds, 1.0, 5.0, Loss::Absolute, false).unwrap() - expected).abs() < 1e-15
        );
        assert!(ipe_hat(&p, &ds, 5.0, 8.5, Loss::Absolute, false).is_err());
    }

    #[test]
    fn r2_values() {
        assert_eq!(r2(0.1, 0.1).unwrap(), 0.0);
        assert_eq!(r2(0.1, 0.0).unwrap(), 1.0);
        assert!((r2(0.10, 0.08).unwrap() - 0.2).abs() < 1e-12);
        assert!(r2(0.0, 0.1).is_err());
    }
}
