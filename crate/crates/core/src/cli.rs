//! Command-line front end: simulate, fit, predict, evaluate, benchmark and
//! calibrate, each echoing its resolved configuration into its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};

use crate::data::{
    load_dataset, load_longitudinal_csv, save_dataset, Dataset, Observation, SubjectRecord,
};
use crate::error::{Error, Result};
use crate::joint::{
    fit_joint, BaselineKind, FunctionalForm, JointFit, JointSpec, QuadratureConfig,
};
use crate::landmark::{LandmarkBaseline, LandmarkForm, LandmarkModel};
use crate::lmm::LmmSpec;
use crate::metrics::{
    evaluate_predictors, r2_rows, rows_to_csv, EvaluationConfig, JointPredictor, LandmarkPredictor,
    Loss, PredictorHandle,
};
use crate::numerics::spline::quantile_sorted;
use crate::numerics::{CovStructure, NcsBasis};
use crate::predict::{predict_jm, NewSubject, DEFAULT_DRAWS};
use crate::sim::{
    calibrate_censoring, run_benchmark, simulate_dataset, BenchmarkConfig, ModelSet, Scenario,
    ScenarioId, TARGET_CENSORING,
};

#[derive(Debug, Parser)]
#[command(
    name = "dynpred",
    version,
    about = "Dynamic survival predictions from longitudinal biomarkers"
)]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a dataset from one of the benchmark scenarios.
    Simulate(SimulateArgs),
    /// Fit a landmark or joint model.
    Fit(FitArgs),
    /// Dynamic predictions for a new subject from a fitted model.
    Predict(PredictArgs),
    /// Discrimination and calibration measures for one or more fits.
    Evaluate(EvaluateArgs),
    /// Held-out prediction benchmark against gold-standard probabilities.
    Benchmark(BenchmarkArgs),
    /// Recalibrate the censoring limits of the simulation scenarios.
    Calibrate(CalibrateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    None,
    Sqrt,
    Log,
}

impl Transform {
    fn apply(self, v: f64) -> Result<f64> {
        match self {
            Transform::None => Ok(v),
            Transform::Sqrt if v >= 0.0 => Ok(v.sqrt()),
            Transform::Log if v > 0.0 => Ok(v.ln()),
            _ => Err(Error::Data(format!(
                "marker value {v} outside the domain of the {self:?} transform"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Landmark,
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum FormArg {
    Value,
    ValueSlope,
    Area,
    WeightedArea,
    SharedRe,
}

impl FormArg {
    fn joint(self) -> FunctionalForm {
        match self {
            FormArg::Value => FunctionalForm::Value,
            FormArg::ValueSlope => FunctionalForm::ValueSlope,
            FormArg::Area => FunctionalForm::Area,
            FormArg::WeightedArea => FunctionalForm::WeightedArea,
            FormArg::SharedRe => FunctionalForm::SharedRe,
        }
    }

    fn landmark(self) -> Result<LandmarkForm> {
        match self {
            FormArg::Value => Ok(LandmarkForm::Value),
            FormArg::ValueSlope => Ok(LandmarkForm::ValueSlope),
            FormArg::Area => Ok(LandmarkForm::Area),
            other => Err(Error::Usage(format!(
                "the {} form has no landmark analogue; use --method joint",
                other.joint().name()
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineArg {
    Weibull,
    Bspline,
    Breslow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceArg {
    Unstructured,
    Diagonal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossArg {
    Absolute,
    Square,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelsArg {
    All,
    Correct,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SimulateArgs {
    /// Scenario id: I, II, III or IV.
    #[arg(long)]
    pub scenario: String,
    #[arg(long, default_value_t = 300)]
    pub n: usize,
    #[arg(long)]
    pub seed: u64,
    /// Directory receiving longitudinal.csv, survival.csv and truth.json.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct FitArgs {
    /// Marker table (subject_id,time,value).
    #[arg(long)]
    pub longitudinal: PathBuf,
    /// Survival table (subject_id,event_time,status,covariates...).
    #[arg(long)]
    pub survival: PathBuf,
    #[arg(long, value_enum)]
    pub method: Method,
    #[arg(long, value_enum, default_value = "value")]
    pub form: FormArg,
    /// Defaults to bspline for joint and breslow for landmark fits.
    #[arg(long, value_enum)]
    pub baseline: Option<BaselineArg>,
    /// Landmark time (landmark fits only).
    #[arg(long)]
    pub landmark: Option<f64>,
    /// Internal spline knots; defaults to the tertiles of the measurement times.
    #[arg(long, value_delimiter = ',')]
    pub knots: Option<Vec<f64>>,
    /// Spline boundary `lo,hi`; defaults to zero and the largest observed time.
    #[arg(long, value_delimiter = ',')]
    pub boundary: Option<Vec<f64>>,
    /// Covariate whose levels get separate mean trajectories.
    #[arg(long)]
    pub group_by: Option<String>,
    #[arg(long, value_enum, default_value = "unstructured")]
    pub covariance: CovarianceArg,
    #[arg(long, value_enum, default_value = "none")]
    pub transform: Transform,
    /// Quadrature nodes per random-effect dimension.
    #[arg(long)]
    pub nodes: Option<usize>,
    /// Earlier joint fit whose parameters start the search.
    #[arg(long)]
    pub warm_start: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct PredictArgs {
    /// Fit JSON written by `fit`.
    #[arg(long)]
    pub fit: PathBuf,
    /// Marker history (subject_id,time,value).
    #[arg(long)]
    pub history: PathBuf,
    /// Subject to select when the history holds several.
    #[arg(long)]
    pub subject: Option<String>,
    /// Baseline covariate as name=value; repeat for each covariate.
    #[arg(long = "covariate")]
    pub covariates: Vec<String>,
    #[arg(long)]
    pub landmark: f64,
    /// Prediction horizons, comma separated, each at or after the landmark.
    #[arg(long, value_delimiter = ',', required = true)]
    pub horizons: Vec<f64>,
    #[arg(long, visible_alias = "K", default_value_t = DEFAULT_DRAWS)]
    pub draws: usize,
    #[arg(long)]
    pub seed: u64,
    /// Prediction CSV; run metadata goes to the same path with a .json extension.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub longitudinal: PathBuf,
    #[arg(long)]
    pub survival: PathBuf,
    /// Fit JSON; repeat for each model.
    #[arg(long = "fit", required = true)]
    pub fits: Vec<PathBuf>,
    #[arg(long, default_value_t = 7.5)]
    pub t: f64,
    #[arg(long, default_value_t = 9.5)]
    pub u: f64,
    #[arg(long, default_value_t = 2.0)]
    pub dt: f64,
    #[arg(long, default_value_t = 15.0)]
    pub t_max: f64,
    #[arg(long, value_enum, default_value = "absolute")]
    pub loss: LossArg,
    /// Integrate the prediction error at the landmark instead of at each event time.
    #[arg(long)]
    pub literal_ipe: bool,
    /// Model label used as the reference for R² (defaults to the first fit).
    #[arg(long)]
    pub reference: Option<String>,
    #[arg(long, visible_alias = "K", default_value_t = DEFAULT_DRAWS)]
    pub draws: usize,
    #[arg(long)]
    pub seed: u64,
    /// Metrics CSV; run metadata goes to the same path with a .json extension.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct BenchmarkArgs {
    #[arg(long, value_delimiter = ',', default_value = "I,II,III,IV")]
    pub scenarios: Vec<String>,
    #[arg(long, default_value_t = 25)]
    pub replicates: usize,
    #[arg(long, visible_alias = "K", default_value_t = DEFAULT_DRAWS)]
    pub draws: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 300)]
    pub n: usize,
    #[arg(long, value_enum, default_value = "all")]
    pub models: ModelsArg,
    /// Directory receiving report.csv and summary.json.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct CalibrateArgs {
    #[arg(long, value_delimiter = ',', default_value = "I,II,III,IV")]
    pub scenarios: Vec<String>,
    #[arg(long, default_value_t = 10_000)]
    pub pilot: usize,
    #[arg(long, default_value_t = 2024)]
    pub seed: u64,
    #[arg(long, default_value_t = TARGET_CENSORING)]
    pub target: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Fitted model of either kind.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum FittedModel {
    Joint {
        fit: Box<JointFit>,
    },
    Landmark {
        form: LandmarkForm,
        baseline: LandmarkBaseline,
        fit: LandmarkModel,
    },
}

/// Artifact written by `fit`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitArtifact {
    pub command: String,
    pub config: FitArgs,
    pub covariate_names: Vec<String>,
    pub transform: Transform,
    pub loglik: f64,
    pub converged: bool,
    pub model: FittedModel,
}

impl FitArtifact {
    pub fn load(path: &Path) -> Result<FitArtifact> {
        Ok(serde_json::from_str(&read(path)?)?)
    }
}

#[derive(Serialize)]
struct Metadata<'a, C: Serialize, D: Serialize> {
    command: &'a str,
    config: &'a C,
    #[serde(flatten)]
    details: D,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Usage(format!(
            "{} is not a readable file",
            path.display()
        )))
    }
}

fn require_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => Err(Error::Usage(format!(
            "output directory {} does not exist",
            p.display()
        ))),
        _ => Ok(()),
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn scenario_list(ids: &[String]) -> Result<Vec<ScenarioId>> {
    ids.iter().map(|s| s.trim().parse()).collect()
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Apply a marker transform to every observation.
pub fn transform_dataset(dataset: &Dataset, transform: Transform) -> Result<Dataset> {
    if transform == Transform::None {
        return Ok(dataset.clone());
    }
    let subjects = dataset
        .subjects()
        .iter()
        .map(|s| {
            let observations = s
                .observations
                .iter()
                .map(|o| {
                    Ok(Observation {
                        time: o.time,
                        value: transform.apply(o.value)?,
                    })
                })
                .collect::<Result<_>>()?;
            Ok(SubjectRecord {
                observations,
                ..s.clone()
            })
        })
        .collect::<Result<_>>()?;
    Dataset::new(subjects, dataset.covariate_names().to_vec())
}

fn load_input(longitudinal: &Path, survival: &Path, transform: Transform) -> Result<Dataset> {
    require_file(longitudinal)?;
    require_file(survival)?;
    let ds = load_dataset(longitudinal, survival).map_err(|e| match e {
        Error::Data(m) if m.contains("no subjects") => Error::Usage(format!("empty dataset: {m}")),
        other => other,
    })?;
    transform_dataset(&ds, transform)
}

fn marker_spec(args: &FitArgs, ds: &Dataset) -> Result<LmmSpec> {
    let mut times: Vec<f64> = ds
        .subjects()
        .iter()
        .flat_map(|s| s.observations.iter().map(|o| o.time))
        .collect();
    times.sort_by(f64::total_cmp);
    let max_time = ds
        .event_times()
        .into_iter()
        .chain(times.last().copied())
        .fold(0.0, f64::max);
    let (lo, hi) = match &args.boundary {
        Some(b) if b.len() == 2 => (b[0], b[1]),
        Some(_) => return Err(Error::Usage("--boundary takes two values: lo,hi".into())),
        None => (0.0, max_time),
    };
    let knots = match &args.knots {
        Some(k) => k.clone(),
        None => vec![
            quantile_sorted(&times, 1.0 / 3.0),
            quantile_sorted(&times, 2.0 / 3.0),
        ],
    };
    let mut spec =
        LmmSpec::new(NcsBasis::new((lo, hi), &knots)?).with_covariance(match args.covariance {
            CovarianceArg::Unstructured => CovStructure::Unstructured,
            CovarianceArg::Diagonal => CovStructure::Diagonal,
        });
    if let Some(g) = &args.group_by {
        spec = spec.grouped_by(g.clone());
    }
    Ok(spec)
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let id: ScenarioId = args.scenario.parse()?;
    if args.n == 0 {
        return Err(Error::Usage("--n must be positive".into()));
    }
    ensure_dir(&args.out_dir)?;
    let (ds, truth) = simulate_dataset(&Scenario::new(id), args.n, args.seed)?;
    save_dataset(
        &ds,
        args.out_dir.join("longitudinal.csv"),
        args.out_dir.join("survival.csv"),
    )?;
    #[derive(Serialize)]
    struct Details<'a> {
        censored_fraction: f64,
        truth: &'a crate::sim::SimTruth,
    }
    let censored = ds.subjects().iter().filter(|s| !s.event).count() as f64 / ds.len() as f64;
    write_json(
        &args.out_dir.join("truth.json"),
        &Metadata {
            command: "simulate",
            config: args,
            details: Details {
                censored_fraction: censored,
                truth: &truth,
            },
        },
    )?;
    info!(
        "simulated {} subjects, {:.1}% censored",
        ds.len(),
        100.0 * censored
    );
    Ok(())
}

pub fn cmd_fit(args: &FitArgs) -> Result<FitArtifact> {
    require_parent(&args.out)?;
    let (model, loglik, converged, ds) = match args.method {
        Method::Landmark => {
            let form = args.form.landmark()?;
            let baseline = match args.baseline.unwrap_or(BaselineArg::Breslow) {
                BaselineArg::Breslow => LandmarkBaseline::Breslow,
                BaselineArg::Weibull => LandmarkBaseline::Weibull,
                BaselineArg::Bspline => {
                    return Err(Error::Usage(
                        "landmark fits take a breslow or weibull baseline".into(),
                    ))
                }
            };
            let t = args
                .landmark
                .ok_or_else(|| Error::Usage("landmark fits need --landmark".into()))?;
            if args.warm_start.is_some() {
                return Err(Error::Usage(
                    "--warm-start applies to joint fits only".into(),
                ));
            }
            let ds = load_input(&args.longitudinal, &args.survival, args.transform)?;
            let fit = LandmarkModel::fit(&ds, t, form, baseline)?;
            let (ll, conv) = (fit.loglik(), fit.converged());
            (
                FittedModel::Landmark {
                    form,
                    baseline,
                    fit,
                },
                ll,
                conv,
                ds,
            )
        }
        Method::Joint => {
            let baseline = match args.baseline.unwrap_or(BaselineArg::Bspline) {
                BaselineArg::Weibull => BaselineKind::Weibull,
                BaselineArg::Bspline => BaselineKind::BsplineLog,
                BaselineArg::Breslow => {
                    return Err(Error::Usage(
                        "joint fits take a weibull or bspline baseline".into(),
                    ))
                }
            };
            if args.landmark.is_some() {
                return Err(Error::Usage(
                    "--landmark applies to landmark fits only".into(),
                ));
            }
            let start = match &args.warm_start {
                Some(p) => {
                    require_file(p)?;
                    match FitArtifact::load(p)?.model {
                        FittedModel::Joint { fit } => Some(fit.theta),
                        FittedModel::Landmark { .. } => {
                            return Err(Error::Usage(
                                "warm start must come from a joint fit".into(),
                            ))
                        }
                    }
                }
                None => None,
            };
            let ds = load_input(&args.longitudinal, &args.survival, args.transform)?;
            let mut spec = JointSpec::new(marker_spec(args, &ds)?, args.form.joint(), baseline);
            spec.start = start;
            spec.quadrature = QuadratureConfig {
                nodes_per_dim: args.nodes,
                ..QuadratureConfig::default()
            };
            let fit = fit_joint(&ds, &spec)?;
            let (ll, conv) = (fit.loglik, fit.converged);
            (FittedModel::Joint { fit: Box::new(fit) }, ll, conv, ds)
        }
    };
    let artifact = FitArtifact {
        command: "fit".into(),
        config: args.clone(),
        covariate_names: ds.covariate_names().to_vec(),
        transform: args.transform,
        loglik,
        converged,
        model,
    };
    write_json(&args.out, &artifact)?;
    info!(
        "fit written to {} (loglik {loglik:.4}, converged {converged})",
        args.out.display()
    );
    Ok(artifact)
}

fn parse_covariates(pairs: &[String], names: &[String]) -> Result<Vec<f64>> {
    let mut values = vec![None; names.len()];
    for p in pairs {
        let (k, v) = p
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("covariate '{p}' is not name=value")))?;
        let i = names.iter().position(|n| n == k.trim()).ok_or_else(|| {
            Error::Usage(format!(
                "unknown covariate '{k}' (expected one of {names:?})"
            ))
        })?;
        let x: f64 = v
            .trim()
            .parse()
            .map_err(|_| Error::Usage(format!("covariate '{k}' has non-numeric value '{v}'")))?;
        values[i] = Some(x);
    }
    values
        .into_iter()
        .zip(names)
        .map(|(v, n)| v.ok_or_else(|| Error::Usage(format!("missing covariate '{n}'"))))
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "NA".into())
}

pub fn cmd_predict(args: &PredictArgs) -> Result<()> {
    require_file(&args.fit)?;
    require_file(&args.history)?;
    require_parent(&args.out)?;
    let artifact = FitArtifact::load(&args.fit)?;
    let covariates = parse_covariates(&args.covariates, &artifact.covariate_names)?;
    let rows = load_longitudinal_csv(&args.history)?;
    let mut ids: Vec<&str> = rows.iter().map(|r| r.subject_id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    let id = match (&args.subject, ids.as_slice()) {
        (Some(s), _) => s.clone(),
        (None, [one]) => one.to_string(),
        (None, []) => return Err(Error::Data("marker history is empty".into())),
        (None, _) => {
            return Err(Error::Usage(
                "history holds several subjects; choose one with --subject".into(),
            ))
        }
    };
    let mut history: Vec<Observation> = rows
        .iter()
        .filter(|r| r.subject_id == id)
        .map(|r| {
            Ok(Observation {
                time: r.time,
                value: artifact.transform.apply(r.value)?,
            })
        })
        .collect::<Result<_>>()?;
    if history.is_empty() {
        return Err(Error::Data(format!("no marker history for subject {id}")));
    }
    history.sort_by(|a, b| a.time.total_cmp(&b.time));
    let subject = NewSubject::new(covariates, history, args.landmark)?;

    #[derive(Serialize)]
    struct Details {
        subject: String,
        fit: PathBuf,
        method: Method,
        diagnostics: serde_json::Value,
    }
    let (csv, method, diagnostics) = match &artifact.model {
        FittedModel::Joint { fit } => {
            let pred = predict_jm(fit, &subject, &args.horizons, args.draws, args.seed)?;
            let diag = serde_json::json!({
                "degenerate_theta": pred.degenerate_theta,
                "mode_fallbacks": pred.mode_fallbacks,
                "acceptance_rate": pred.acceptance_rate,
            });
            (pred.to_csv(), Method::Joint, diag)
        }
        FittedModel::Landmark { fit, .. } => {
            if fit.landmark_time() != args.landmark {
                return Err(Error::Usage(format!(
                    "the landmark model was fitted at t = {}; refit it at {} for this prediction",
                    fit.landmark_time(),
                    args.landmark
                )));
            }
            if args.horizons.iter().any(|&u| u < args.landmark) {
                return Err(Error::Usage(
                    "horizons must not precede the landmark".into(),
                ));
            }
            let mut out = String::from("u,pi_hat,lo,hi\n");
            for &u in &args.horizons {
                let p = fit.predict(&subject.covariates, &subject.history, u)?;
                out.push_str(&format!("{u},{p},{},{}\n", fmt_opt(None), fmt_opt(None)));
            }
            (out, Method::Landmark, serde_json::Value::Null)
        }
    };
    write(&args.out, &csv)?;
    write_json(
        &sidecar(&args.out),
        &Metadata {
            command: "predict",
            config: args,
            details: Details {
                subject: id,
                fit: args.fit.clone(),
                method,
                diagnostics,
            },
        },
    )
}

fn label_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    require_parent(&args.out)?;
    if !(args.t < args.u) || args.dt <= 0.0 || args.t_max <= 0.0 {
        return Err(Error::Usage(
            "evaluation needs t < u, dt > 0 and t_max > 0".into(),
        ));
    }
    let artifacts: Vec<(String, FitArtifact)> = args
        .fits
        .iter()
        .map(|p| {
            require_file(p)?;
            Ok((label_of(p), FitArtifact::load(p)?))
        })
        .collect::<Result<_>>()?;
    let transform = artifacts[0].1.transform;
    if artifacts.iter().any(|(_, a)| a.transform != transform) {
        return Err(Error::Usage(
            "all fits must share the same marker transform".into(),
        ));
    }
    let ds = load_input(&args.longitudinal, &args.survival, transform)?;
    let handles: Vec<Box<dyn PredictorHandle>> = artifacts
        .into_iter()
        .map(|(label, a)| -> Box<dyn PredictorHandle> {
            match a.model {
                FittedModel::Joint { fit } => Box::new(JointPredictor {
                    label,
                    fit: *fit,
                    draws: args.draws,
                    seed: args.seed,
                }),
                FittedModel::Landmark { form, baseline, .. } => {
                    Box::new(LandmarkPredictor::new(label, ds.clone(), form, baseline))
                }
            }
        })
        .collect();
    let refs: Vec<&dyn PredictorHandle> = handles.iter().map(|h| h.as_ref()).collect();
    let cfg = EvaluationConfig {
        t: args.t,
        u: args.u,
        dt: args.dt,
        t_max: args.t_max,
        loss: match args.loss {
            LossArg::Absolute => Loss::Absolute,
            LossArg::Square => Loss::Square,
        },
        literal_ipe: args.literal_ipe,
    };
    let mut rows = evaluate_predictors(&refs, &ds, &cfg);
    let reference = args.reference.clone().unwrap_or_else(|| refs[0].name());
    if !refs.iter().any(|h| h.name() == reference) {
        return Err(Error::Usage(format!(
            "reference model '{reference}' is not among the fits"
        )));
    }
    let r2 = r2_rows(&rows, &reference);
    rows.extend(r2);
    write(&args.out, &rows_to_csv(&rows))?;
    #[derive(Serialize)]
    struct Details<'a> {
        evaluation: &'a EvaluationConfig,
        reference: String,
        n_subjects: usize,
        missing: usize,
    }
    write_json(
        &sidecar(&args.out),
        &Metadata {
            command: "evaluate",
            config: args,
            details: Details {
                evaluation: &cfg,
                reference,
                n_subjects: ds.len(),
                missing: rows.iter().filter(|r| r.value.is_none()).count(),
            },
        },
    )
}

pub fn cmd_benchmark(args: &BenchmarkArgs) -> Result<()> {
    if args.replicates < 1 {
        return Err(Error::Usage("--replicates must be at least 1".into()));
    }
    let scenarios = scenario_list(&args.scenarios)?;
    ensure_dir(&args.out_dir)?;
    let cfg = BenchmarkConfig {
        scenarios,
        replicates: args.replicates,
        draws: args.draws,
        seed: args.seed,
        n: args.n,
        held_out: 10,
        models: match args.models {
            ModelsArg::All => ModelSet::All,
            ModelsArg::Correct => ModelSet::CorrectJoint,
        },
    };
    let report = run_benchmark(&cfg)?;
    write(&args.out_dir.join("report.csv"), &report.to_csv())?;
    #[derive(Serialize)]
    struct Details<'a> {
        redraws: usize,
        summary: &'a [crate::sim::ModelSummary],
    }
    write_json(
        &args.out_dir.join("summary.json"),
        &Metadata {
            command: "benchmark",
            config: args,
            details: Details {
                redraws: report.redraws,
                summary: &report.summary,
            },
        },
    )
}

pub fn cmd_calibrate(args: &CalibrateArgs) -> Result<()> {
    if let Some(out) = &args.out {
        require_parent(out)?;
    }
    let results = scenario_list(&args.scenarios)?
        .into_iter()
        .map(|id| calibrate_censoring(id, args.pilot, args.seed, args.target))
        .collect::<Result<Vec<_>>>()?;
    for c in &results {
        println!(
            "scenario {}: t_C = {}, expected censoring {:.4}, administrative {:.4}, attainable {}",
            c.scenario,
            c.t_c.map_or("none".to_string(), |t| format!("{t:.6}")),
            c.expected,
            c.administrative,
            c.attainable
        );
    }
    if let Some(out) = &args.out {
        #[derive(Serialize)]
        struct Details<'a> {
            calibration: &'a [crate::sim::Calibration],
        }
        write_json(
            out,
            &Metadata {
                command: "calibrate",
                config: args,
                details: Details {
                    calibration: &results,
                },
            },
        )?;
    }
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Fit(a) => cmd_fit(a).map(|_| ()),
        Command::Predict(a) => cmd_predict(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Benchmark(a) => cmd_benchmark(a),
        Command::Calibrate(a) => cmd_calibrate(a),
    }
}

/// Parse arguments, run the command and return the process exit code:
/// 0 success, 2 usage error, 3 data error, 4 numerical failure.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
