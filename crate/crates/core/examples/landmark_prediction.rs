//! Landmark Cox model with a Breslow baseline: fit at t = 5 on the subjects
//! still at risk and predict conditional survival for one of them.

use dynpred::landmark::{LandmarkBaseline, LandmarkForm, LandmarkModel};
use dynpred::sim::{simulate_dataset, Scenario, ScenarioId};

fn main() -> dynpred::Result<()> {
    let (ds, _) = simulate_dataset(&Scenario::new(ScenarioId::II), 300, 3)?;
    let t = 5.0;
    for form in [
        LandmarkForm::Value,
        LandmarkForm::ValueSlope,
        LandmarkForm::Area,
    ] {
        let model = LandmarkModel::fit(&ds, t, form, LandmarkBaseline::Breslow)?;
        let subject = ds
            .subjects()
            .iter()
            .find(|s| s.event_time > t)
            .expect("a subject at risk");
        let history = subject.history_until(t);
        let probs: Vec<String> = [6.0, 8.0, 10.0]
            .iter()
            .map(|&u| {
                model
                    .predict(&subject.covariates, history, u)
                    .map(|p| format!("{p:.3}"))
            })
            .collect::<dynpred::Result<_>>()?;
        println!(
            "{form:?}: loglik {:.3}; subject {} pi(6, 8, 10 | 5) = {}",
            model.loglik(),
            subject.id,
            probs.join(", ")
        );
    }
    Ok(())
}
