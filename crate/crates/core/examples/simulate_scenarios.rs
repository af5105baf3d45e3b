//! Simulate each benchmark scenario and summarize the generated data.

use dynpred::sim::{simulate_dataset, Scenario, ScenarioId};

fn main() -> dynpred::Result<()> {
    for id in ScenarioId::ALL {
        let scenario = Scenario::new(id);
        let (ds, truth) = simulate_dataset(&scenario, 300, 42)?;
        let events = ds.subjects().iter().filter(|s| s.event).count();
        let obs: usize = ds.subjects().iter().map(|s| s.observations.len()).sum();
        let beyond = truth.event_times.iter().filter(|t| t.is_none()).count();
        println!(
            "scenario {id} ({}): {} subjects, {events} events, {obs} measurements, {beyond} event-free at end of follow-up",
            scenario.form.name(),
            ds.len()
        );
    }
    Ok(())
}
