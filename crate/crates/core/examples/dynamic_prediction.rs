//! Joint-model predictions that update as new marker measurements arrive.

use dynpred::joint::{fit_joint, BaselineKind, FunctionalForm, JointSpec};
use dynpred::numerics::CovStructure;
use dynpred::predict::{predict_jm, NewSubject};
use dynpred::sim::{marker_spec, simulate_dataset, Scenario, ScenarioId};

fn main() -> dynpred::Result<()> {
    let (ds, _) = simulate_dataset(&Scenario::new(ScenarioId::I), 300, 8)?;
    let spec = JointSpec::new(
        marker_spec(CovStructure::Diagonal),
        FunctionalForm::Value,
        BaselineKind::Weibull,
    );
    let fit = fit_joint(&ds, &spec)?;

    let subject = ds
        .subjects()
        .iter()
        .find(|s| s.observations.len() >= 6)
        .expect("a subject with a long history");
    println!("subject {} (trt = {})", subject.id, subject.covariates[0]);
    for k in 2..=subject.observations.len() {
        let history = subject.observations[..k].to_vec();
        let t = history[k - 1].time;
        let horizons = [t, t + 2.0, t + 4.0];
        let pred = predict_jm(
            &fit,
            &NewSubject::new(subject.covariates.clone(), history, t)?,
            &horizons,
            200,
            11,
        )?;
        let cells: Vec<String> = pred
            .horizons
            .iter()
            .zip(pred.point.iter().zip(pred.lower.iter().zip(&pred.upper)))
            .skip(1)
            .map(|(u, (p, (lo, hi)))| format!("pi({u:.1}) = {p:.3} [{lo:.3}, {hi:.3}]"))
            .collect();
        println!(
            "t = {t:5.2}, y = {:6.2}: {}",
            subject.observations[k - 1].value,
            cells.join("; ")
        );
    }
    Ok(())
}
