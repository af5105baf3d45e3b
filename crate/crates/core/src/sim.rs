//! Simulation scenarios, gold-standard predictions and the held-out
//! prediction benchmark comparing landmark and joint models.

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Observation, SubjectRecord};
use crate::error::{Error, Result};
use crate::joint::{
    fit_joint, BaselineHazard, BaselineKind, FunctionalForm, JointFit, JointSpec, JointTheta,
    PathTheta, SubjectContext,
};
use crate::landmark::{LandmarkBaseline, LandmarkForm, LandmarkModel};
use crate::lmm::{Design, LmmSpec};
use crate::numerics::linalg::CovStructure;
use crate::numerics::spline::quantile_sorted;
use crate::numerics::{brent_root, NcsBasis};
use crate::predict::{predict_jm, NewSubject};

/// End of follow-up.
pub const FOLLOW_UP: f64 = 19.0;
/// Measurements per subject, including the baseline visit.
pub const MEASUREMENTS: usize = 10;
/// Target censoring fraction.
pub const TARGET_CENSORING: f64 = 0.45;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScenarioId {
    I,
    II,
    III,
    IV,
}

impl ScenarioId {
    pub const ALL: [ScenarioId; 4] = [
        ScenarioId::I,
        ScenarioId::II,
        ScenarioId::III,
        ScenarioId::IV,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn form(self) -> FunctionalForm {
        match self {
            ScenarioId::I => FunctionalForm::Value,
            ScenarioId::II => FunctionalForm::ValueSlope,
            ScenarioId::III => FunctionalForm::Area,
            ScenarioId::IV => FunctionalForm::SharedRe,
        }
    }

    /// Label of the correctly specified joint model.
    pub fn correct_model(self) -> &'static str {
        ["JM1", "JM2", "JM3", "JM4"][self.index()]
    }

    /// Calibrated upper limit of the uniform censoring distribution;
    /// `None` means administrative censoring only.
    pub fn censoring_limit(self) -> Option<f64> {
        CALIBRATED_TC[self.index()]
    }
}

/// Upper limits `t_C` found by [`calibrate_censoring`] with 10⁴ pilot subjects
/// and seed 2024. Under all four scenarios fewer than half of the subjects
/// have an event before the end of follow-up, so the target fraction is
/// below the administrative floor and no random censoring is added.
const CALIBRATED_TC: [Option<f64>; 4] = [None, None, None, None];

impl std::str::FromStr for ScenarioId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "I" => Ok(ScenarioId::I),
            "II" => Ok(ScenarioId::II),
            "III" => Ok(ScenarioId::III),
            "IV" => Ok(ScenarioId::IV),
            other => Err(Error::Usage(format!(
                "unknown scenario '{other}' (expected I, II, III or IV)"
            ))),
        }
    }
}

impl std::fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(["I", "II", "III", "IV"][self.index()])
    }
}

/// Spline basis of the simulation and benchmark marker model.
pub fn marker_basis() -> NcsBasis {
    NcsBasis::new((0.0, FOLLOW_UP), &[2.1, 5.5]).expect("valid knots")
}

/// Mixed-model specification used for fitting in the benchmark.
pub fn marker_spec(covariance: CovStructure) -> LmmSpec {
    LmmSpec::new(marker_basis())
        .grouped_by("trt")
        .with_covariance(covariance)
}

/// A data-generating model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: ScenarioId,
    pub form: FunctionalForm,
    pub theta: JointTheta,
    pub design: Design,
    /// Upper limit of the uniform censoring distribution; `None` for
    /// administrative censoring only.
    pub t_c: Option<f64>,
}

impl Scenario {
    pub fn new(id: ScenarioId) -> Scenario {
        let (alpha, shape) = match id {
            ScenarioId::I => (vec![0.7], 1.65),
            ScenarioId::II => (vec![0.05, 3.3], 1.65),
            ScenarioId::III => (vec![0.08], 1.65),
            ScenarioId::IV => (vec![-0.3, -0.8, 0.3, 0.8], 1.60),
        };
        let theta = JointTheta {
            beta: vec![0.93, -0.6, 0.63, 0.42, 1.1, 0.54, 0.54, 0.55],
            d: DMatrix::from_diagonal(&DVector::from_vec(vec![0.49, 4.52, 2.33, 1.52])),
            sigma: 2.0,
            gamma: vec![-6.73, 0.41],
            alpha,
            baseline: BaselineHazard::Weibull { shape },
        };
        let spec = marker_spec(CovStructure::Diagonal);
        Scenario {
            id,
            form: id.form(),
            theta,
            design: Design::with_levels(&spec, Some((0, vec![0.0, 1.0]))),
            t_c: id.censoring_limit(),
        }
    }
}

/// Simulated data with the quantities needed for gold-standard predictions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimTruth {
    pub scenario: Scenario,
    pub seed: u64,
    /// Random effects by subject, in dataset order.
    pub b: Vec<Vec<f64>>,
    /// Uncensored event times (`None` beyond the end of follow-up).
    pub event_times: Vec<Option<f64>>,
}

struct HazardPath<'a> {
    ctx: SubjectContext<'a>,
}

impl HazardPath<'_> {
    fn increment(&self, theta: &JointTheta, b: &[f64], lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            return 0.0;
        }
        PathTheta::new(theta, &self.ctx.w, &self.ctx.path(lo, hi)).cum_hazard(b)
    }
}

/// Event time solving `H(T) = target` along the subject's true trajectory,
/// or `None` if the cumulative hazard stays below the target up to `FOLLOW_UP`.
fn event_time(
    path: &HazardPath,
    theta: &JointTheta,
    b: &[f64],
    target: f64,
) -> Result<Option<f64>> {
    let mut h = 0.0;
    let mut lo = 0.0;
    for k in 1..=FOLLOW_UP as usize {
        let hi = k as f64;
        let inc = path.increment(theta, b, lo, hi);
        if h + inc >= target {
            let base = h;
            let root = brent_root(
                |s| base + path.increment(theta, b, lo, s) - target,
                lo,
                hi,
                1e-12,
            )?;
            return Ok(Some(root));
        }
        h += inc;
        lo = hi;
    }
    Ok(None)
}

fn sample_b(theta: &JointTheta, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let l = theta.d.clone().cholesky().expect("positive definite D").l();
    let z = DVector::from_iterator(
        theta.q(),
        (0..theta.q()).map(|_| rng.sample::<f64, _>(StandardNormal)),
    );
    (l * z).as_slice().to_vec()
}

/// Simulate `n` subjects from `scenario` with a fixed seed.
///
/// Treatment alternates 0/1. Each subject is measured at time 0 and at nine
/// sorted Uniform(0, 19) times; observations after the observed time are
/// dropped. Event times are drawn by inverting the cumulative hazard,
/// censoring is Uniform(0, `t_C`) with administrative censoring at 19.
pub fn simulate_dataset(scenario: &Scenario, n: usize, seed: u64) -> Result<(Dataset, SimTruth)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta = &scenario.theta;
    let basis = theta.baseline.basis()?;
    let breaks = theta.baseline.breakpoints();
    let mut subjects = Vec::with_capacity(n);
    let mut bs = Vec::with_capacity(n);
    let mut events = Vec::with_capacity(n);
    for i in 0..n {
        let trt = (i % 2) as f64;
        let g = scenario.design.group_of(&[trt])?;
        let b = sample_b(theta, &mut rng);
        let mut times: Vec<f64> = (1..MEASUREMENTS)
            .map(|_| rng.gen::<f64>() * FOLLOW_UP)
            .collect();
        times.sort_by(f64::total_cmp);
        times.insert(0, 0.0);
        let obs: Vec<Observation> = times
            .iter()
            .map(|&t| {
                let m = crate::lmm::trajectory(&theta.beta, &scenario.design, g, &b, t).value;
                Observation {
                    time: t,
                    value: m + theta.sigma * rng.sample::<f64, _>(StandardNormal),
                }
            })
            .collect();
        let u: f64 = rng.gen();
        let v: f64 = rng.gen();
        let c = scenario.t_c.map_or(f64::INFINITY, |t_c| v * t_c);
        let ctx = SubjectContext::new(
            &scenario.design,
            scenario.form,
            &basis,
            &breaks,
            g,
            vec![1.0, trt],
        );
        let t_star = event_time(&HazardPath { ctx }, theta, &b, -(1.0 - u).ln())?;
        let limit = c.min(FOLLOW_UP);
        let (time, event) = match t_star {
            Some(t) if t <= limit => (t, true),
            _ => (limit, false),
        };
        subjects.push(SubjectRecord {
            id: format!("{}", i + 1),
            covariates: vec![trt],
            event_time: time,
            event,
            observations: obs.into_iter().filter(|o| o.time <= time).collect(),
        });
        bs.push(b);
        events.push(t_star);
    }
    let ds = Dataset::new(subjects, vec!["trt".into()])?;
    Ok((
        ds,
        SimTruth {
            scenario: scenario.clone(),
            seed,
            b: bs,
            event_times: events,
        },
    ))
}

/// Expected censoring fraction with censoring limit `t_c`, given
/// uncensored pilot event times (`None` beyond the end of follow-up).
pub fn expected_censoring(pilot: &[Option<f64>], t_c: Option<f64>) -> f64 {
    let total: f64 = pilot
        .iter()
        .map(|t| match (t, t_c) {
            (None, _) => 1.0,
            (Some(t), Some(t_c)) => (t / t_c).min(1.0),
            (Some(_), None) => 0.0,
        })
        .sum();
    total / pilot.len() as f64
}

/// Result of a censoring calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub scenario: ScenarioId,
    /// `None` when the target cannot be reached by adding censoring.
    pub t_c: Option<f64>,
    /// Expected censoring fraction at `t_c`.
    pub expected: f64,
    /// Censoring fraction from the end of follow-up alone.
    pub administrative: f64,
    pub attainable: bool,
}

/// Censoring limit `t_C` giving the target censoring fraction, by bisection
/// on the expected fraction over `pilot_n` simulated subjects.
pub fn calibrate_censoring(
    id: ScenarioId,
    pilot_n: usize,
    seed: u64,
    target: f64,
) -> Result<Calibration> {
    if !(0.0..1.0).contains(&target) || pilot_n == 0 {
        return Err(Error::Usage(
            "target must lie in [0, 1) with at least one pilot subject".into(),
        ));
    }
    let mut scenario = Scenario::new(id);
    scenario.t_c = None;
    let (_, truth) = simulate_dataset(&scenario, pilot_n, seed)?;
    let pilot = truth.event_times;
    let administrative = expected_censoring(&pilot, None);
    if administrative >= target {
        warn!("scenario {id}: administrative censoring {administrative:.3} already exceeds the target {target}");
        return Ok(Calibration {
            scenario: id,
            t_c: None,
            expected: administrative,
            administrative,
            attainable: administrative == target,
        });
    }
    let (mut lo, mut hi) = (1e-6, FOLLOW_UP);
    while expected_censoring(&pilot, Some(hi)) > target {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if expected_censoring(&pilot, Some(mid)) > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-9 * hi {
            break;
        }
    }
    let t_c = 0.5 * (lo + hi);
    Ok(Calibration {
        scenario: id,
        t_c: Some(t_c),
        expected: expected_censoring(&pilot, Some(t_c)),
        administrative,
        attainable: true,
    })
}

/// Conditional survival of a subject under the true model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldRecord {
    pub subject_id: String,
    pub landmark: f64,
    pub horizons: Vec<f64>,
    pub probabilities: Vec<f64>,
}

/// `S(u | b, θ) / S(t | b, θ)` at the true parameters and random effects.
pub fn gold_standard(
    scenario: &Scenario,
    subject: &SubjectRecord,
    b: &[f64],
    t: f64,
    horizons: &[f64],
) -> Result<GoldRecord> {
    if horizons.iter().any(|&u| u < t) {
        return Err(Error::Usage(
            "horizons must not precede the landmark".into(),
        ));
    }
    let theta = &scenario.theta;
    let basis = theta.baseline.basis()?;
    let g = scenario.design.group_of(&subject.covariates)?;
    let ctx = SubjectContext::new(
        &scenario.design,
        scenario.form,
        &basis,
        &theta.baseline.breakpoints(),
        g,
        vec![1.0, subject.covariates[0]],
    );
    let path = HazardPath { ctx };
    let mut h = 0.0;
    let mut prev = t;
    let probabilities = horizons
        .iter()
        .map(|&u| {
            h += path.increment(theta, b, prev, u);
            prev = u;
            (-h).exp()
        })
        .collect();
    Ok(GoldRecord {
        subject_id: subject.id.clone(),
        landmark: t,
        horizons: horizons.to_vec(),
        probabilities,
    })
}

/// Ten equidistant horizons from just after `t` up to the end of follow-up.
pub fn benchmark_horizons(t: f64) -> Vec<f64> {
    (1..=10)
        .map(|k| t + k as f64 * (FOLLOW_UP - t) / 10.0)
        .collect()
}

pub fn rmse(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64).sqrt()
}

/// Which models the benchmark fits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSet {
    /// LM1-LM3 and JM1-JM4.
    All,
    /// LM1-LM3 and the correctly specified joint model.
    CorrectJoint,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub scenarios: Vec<ScenarioId>,
    pub replicates: usize,
    pub draws: usize,
    pub seed: u64,
    pub n: usize,
    pub held_out: usize,
    pub models: ModelSet,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            scenarios: ScenarioId::ALL.to_vec(),
            replicates: 25,
            draws: crate::predict::DEFAULT_DRAWS,
            seed: 1,
            n: 300,
            held_out: 10,
            models: ModelSet::All,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub scenario: ScenarioId,
    pub model: String,
    pub replicate: usize,
    pub subject: String,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub scenario: ScenarioId,
    pub model: String,
    pub count: usize,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

impl ModelSummary {
    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub config: BenchmarkConfig,
    pub rows: Vec<BenchmarkRow>,
    pub summary: Vec<ModelSummary>,
    /// Replicates that had to be redrawn for lack of censored subjects.
    pub redraws: usize,
}

impl BenchmarkReport {
    pub fn summary_for(&self, scenario: ScenarioId, model: &str) -> Option<&ModelSummary> {
        self.summary
            .iter()
            .find(|s| s.scenario == scenario && s.model == model)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("scenario,model,replicate,subject,rmse\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.scenario, r.model, r.replicate, r.subject, r.rmse
            ));
        }
        out
    }
}

/// Seed of an independent substream identified by `(a, b, c)`.
pub fn substream_seed(seed: u64, a: u64, b: u64, c: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((a << 48) ^ (b << 16) ^ c);
    rng.next_u64()
}

const LANDMARK_MODELS: [(&str, LandmarkForm); 3] = [
    ("LM1", LandmarkForm::Value),
    ("LM2", LandmarkForm::ValueSlope),
    ("LM3", LandmarkForm::Area),
];

const JOINT_MODELS: [(&str, FunctionalForm); 4] = [
    ("JM1", FunctionalForm::Value),
    ("JM2", FunctionalForm::ValueSlope),
    ("JM3", FunctionalForm::Area),
    ("JM4", FunctionalForm::SharedRe),
];

/// Outcome of one benchmark replicate.
struct Replicate {
    rows: Vec<BenchmarkRow>,
    redraws: usize,
}

fn run_replicate(id: ScenarioId, r: usize, cfg: &BenchmarkConfig) -> Result<Replicate> {
    let scenario = Scenario::new(id);
    let mut attempt = 0u64;
    let (ds, truth, held) = loop {
        let seed = substream_seed(cfg.seed, id.index() as u64 + 1, r as u64, attempt);
        let (ds, truth) = simulate_dataset(&scenario, cfg.n, seed)?;
        let censored: Vec<usize> = (0..ds.len()).filter(|&i| !ds.subjects()[i].event).collect();
        if censored.len() >= cfg.held_out {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let mut held: Vec<usize> = censored
                .choose_multiple(&mut rng, cfg.held_out)
                .copied()
                .collect();
            held.sort_unstable();
            break (ds, truth, held);
        }
        warn!(
            "scenario {id} replicate {r}: only {} censored subjects, redrawing",
            censored.len()
        );
        attempt += 1;
        if attempt > 100 {
            return Err(Error::Numerical(
                "could not draw enough censored subjects".into(),
            ));
        }
    };
    let train_idx: Vec<usize> = (0..ds.len())
        .filter(|i| held.binary_search(i).is_err())
        .collect();
    let train = ds.subset(&train_idx)?;

    let joint_forms: Vec<(&str, FunctionalForm)> = match cfg.models {
        ModelSet::All => JOINT_MODELS.to_vec(),
        ModelSet::CorrectJoint => JOINT_MODELS
            .iter()
            .copied()
            .filter(|(_, f)| *f == id.form())
            .collect(),
    };
    let fits: Vec<(&str, JointFit)> = joint_forms
        .iter()
        .map(|&(name, form)| {
            let spec = JointSpec::new(
                marker_spec(CovStructure::Diagonal),
                form,
                BaselineKind::Weibull,
            );
            fit_joint(&train, &spec).map(|f| (name, f))
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    for (k, &i) in held.iter().enumerate() {
        let subj = &ds.subjects()[i];
        let t = subj.last_observation_time();
        let horizons = benchmark_horizons(t);
        let gold = gold_standard(&scenario, subj, &truth.b[i], t, &horizons)?;
        let events_after = train.subjects().iter().any(|s| s.event && s.event_time > t);
        for (name, form) in LANDMARK_MODELS {
            // an event-free landmark risk set estimates a zero cumulative hazard
            let pred: Vec<f64> = if events_after {
                let model = LandmarkModel::fit(&train, t, form, LandmarkBaseline::Weibull)?;
                horizons
                    .iter()
                    .map(|&u| model.predict(&subj.covariates, &subj.observations, u))
                    .collect::<Result<_>>()?
            } else {
                vec![1.0; horizons.len()]
            };
            rows.push(BenchmarkRow {
                scenario: id,
                model: name.into(),
                replicate: r,
                subject: subj.id.clone(),
                rmse: rmse(&pred, &gold.probabilities),
            });
        }
        for (name, fit) in &fits {
            let ns = NewSubject::new(subj.covariates.clone(), subj.observations.clone(), t)?;
            let seed = substream_seed(cfg.seed, 100 + id.index() as u64, r as u64, k as u64);
            let pred = predict_jm(fit, &ns, &horizons, cfg.draws, seed)?;
            rows.push(BenchmarkRow {
                scenario: id,
                model: name.to_string(),
                replicate: r,
                subject: subj.id.clone(),
                rmse: rmse(&pred.point, &gold.probabilities),
            });
        }
    }
    info!("scenario {id} replicate {r} done");
    Ok(Replicate {
        rows,
        redraws: attempt as usize,
    })
}

/// Quartiles (type 7) of per-subject RMSEs by scenario and model.
pub fn summarize(rows: &[BenchmarkRow]) -> Vec<ModelSummary> {
    let mut keys: Vec<(ScenarioId, String)> =
        rows.iter().map(|r| (r.scenario, r.model.clone())).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .map(|(scenario, model)| {
            let mut v: Vec<f64> = rows
                .iter()
                .filter(|r| r.scenario == scenario && r.model == model)
                .map(|r| r.rmse)
                .collect();
            v.sort_by(f64::total_cmp);
            ModelSummary {
                scenario,
                model,
                count: v.len(),
                q1: quantile_sorted(&v, 0.25),
                median: quantile_sorted(&v, 0.5),
                q3: quantile_sorted(&v, 0.75),
            }
        })
        .collect()
}

/// Run the held-out prediction benchmark. Replicates run in parallel on
/// independent substreams, so the report does not depend on scheduling.
pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<BenchmarkReport> {
    if cfg.replicates < 1 {
        return Err(Error::Usage("at least one replicate is required".into()));
    }
    let jobs: Vec<(ScenarioId, usize)> = cfg
        .scenarios
        .iter()
        .flat_map(|&s| (0..cfg.replicates).map(move |r| (s, r)))
        .collect();
    let results: Vec<Result<Replicate>> = jobs
        .par_iter()
        .map(|&(s, r)| run_replicate(s, r, cfg))
        .collect();
    let mut rows = Vec::new();
    let mut redraws = 0;
    for res in results {
        let rep = res?;
        redraws += rep.redraws;
        rows.extend(rep.rows);
    }
    Ok(BenchmarkReport {
        config: cfg.clone(),
        summary: summarize(&rows),
        rows,
        redraws,
    })
}
