//! Fit the spline mixed model to simulated marker data and compare the
//! estimates with the generating values.

use dynpred::lmm::{eb_mode, fit_lmm};
use dynpred::numerics::CovStructure;
use dynpred::sim::{marker_spec, simulate_dataset, Scenario, ScenarioId};

fn main() -> dynpred::Result<()> {
    let scenario = Scenario::new(ScenarioId::I);
    let (ds, truth) = simulate_dataset(&scenario, 300, 1)?;
    let fit = fit_lmm(&ds, &marker_spec(CovStructure::Diagonal))?;
    println!("loglik {:.3}, converged {}", fit.loglik, fit.converged);
    for (k, (est, tru)) in fit.beta.iter().zip(&scenario.theta.beta).enumerate() {
        println!("beta[{k}] {est:>8.3}  (true {tru:.3})");
    }
    for k in 0..fit.d.nrows() {
        println!(
            "D[{k},{k}]  {:>8.3}  (true {:.3})",
            fit.d[(k, k)],
            scenario.theta.d[(k, k)]
        );
    }
    println!(
        "sigma    {:>8.3}  (true {:.3})",
        fit.sigma, scenario.theta.sigma
    );

    let subject = &ds.subjects()[0];
    let post = eb_mode(subject, &fit)?;
    println!(
        "subject {}: EB mode {:?}, true b {:?}",
        subject.id,
        post.mode.as_slice(),
        truth.b[0]
    );
    Ok(())
}
