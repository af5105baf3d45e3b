//! Calibrate the uniform censoring limit of each simulation scenario against
//! the 45% target and report the censoring realized by the stored constants.

use dynpred::sim::{calibrate_censoring, simulate_dataset, Scenario, ScenarioId, TARGET_CENSORING};

fn main() -> dynpred::Result<()> {
    for id in ScenarioId::ALL {
        let cal = calibrate_censoring(id, 10_000, 2024, TARGET_CENSORING)?;
        let (ds, _) = simulate_dataset(&Scenario::new(id), 3000, 7)?;
        let censored = ds.subjects().iter().filter(|s| !s.event).count() as f64 / ds.len() as f64;
        println!(
            "scenario {id}: t_C = {:?}, expected {:.3} (administrative {:.3}, attainable {}), realized {censored:.3}",
            cal.t_c, cal.expected, cal.administrative, cal.attainable
        );
    }
    Ok(())
}
