//! A small run of the held-out benchmark: RMSE of model predictions against
//! the true conditional survival for ten censored subjects per replicate.

use dynpred::sim::{run_benchmark, BenchmarkConfig, ModelSet, ScenarioId};

fn main() -> dynpred::Result<()> {
    let cfg = BenchmarkConfig {
        scenarios: vec![ScenarioId::I],
        replicates: 2,
        draws: 100,
        seed: 2,
        models: ModelSet::CorrectJoint,
        ..BenchmarkConfig::default()
    };
    let report = run_benchmark(&cfg)?;
    for s in &report.summary {
        println!(
            "scenario {} {:>4}: median RMSE {:.4} (IQR {:.4} - {:.4}, n = {})",
            s.scenario, s.model, s.median, s.q1, s.q3, s.count
        );
    }
    Ok(())
}
