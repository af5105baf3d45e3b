//! Discrimination and calibration table for joint and landmark models:
//! PE, IPE, AUC and C_dyn at t = 7.5, u = 9.5 with Δt = 2 over [0, 15].

use dynpred::joint::{fit_joint, BaselineKind, FunctionalForm, JointSpec};
use dynpred::landmark::{LandmarkBaseline, LandmarkForm};
use dynpred::metrics::{
    evaluate_predictors, r2_rows, rows_to_csv, EvaluationConfig, JointPredictor, LandmarkPredictor,
    PredictorHandle,
};
use dynpred::numerics::CovStructure;
use dynpred::sim::{marker_spec, simulate_dataset, Scenario, ScenarioId};

fn main() -> dynpred::Result<()> {
    let (ds, _) = simulate_dataset(&Scenario::new(ScenarioId::I), 300, 21)?;
    let spec = JointSpec::new(
        marker_spec(CovStructure::Diagonal),
        FunctionalForm::Value,
        BaselineKind::Weibull,
    );
    let jm = JointPredictor {
        label: "JM value".into(),
        fit: fit_joint(&ds, &spec)?,
        draws: 50,
        seed: 1,
    };
    let lm = LandmarkPredictor::new(
        "LM value",
        ds.clone(),
        LandmarkForm::Value,
        LandmarkBaseline::Breslow,
    );
    let handles: [&dyn PredictorHandle; 2] = [&jm, &lm];
    let mut rows = evaluate_predictors(&handles, &ds, &EvaluationConfig::default());
    let r2 = r2_rows(&rows, "JM value");
    rows.extend(r2);
    print!("{}", rows_to_csv(&rows));
    Ok(())
}
