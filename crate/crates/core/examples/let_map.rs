//! Link entering times and the exact input-output map for a slowly varying
//! speed limit, checked against the solver outflow.

use vsl::scenario::refinement_control;
use vsl::{analytic_outflow, build_let, simulate, Problem, Result, Signal};

fn main() -> Result<()> {
    let problem = Problem::test1()?;
    let p = *problem.params();
    let shape = refinement_control(&p);
    let v = Signal::from_fn(0.0, problem.dt(), problem.n_steps(), |t| shape.value_at(t))?;
    let table = build_let(&v, p.road_length)?;
    let t0 = table.first_exit().expect("road drains within the horizon");
    println!("first exit t0 = {t0:.4}, tau(T) = {:.4}", table.tau_at_horizon().unwrap());
    println!("{:>6} {:>10} {:>10} {:>10}", "t", "tau(t)", "tau_inv(t)", "v-distance");
    for t in [2.0, 4.0, 6.0, 8.0, 10.0, 12.0] {
        let tau = table.tau(t).unwrap();
        println!(
            "{t:>6.2} {tau:>10.5} {:>10.5} {:>10.2e}",
            table.tau_inv(t).unwrap(),
            table.travelled(tau, t) - p.road_length
        );
    }

    // the entrance accepts at most v * rho_cr
    let accepted = Signal::new(
        0.0,
        problem.dt(),
        problem.inflow().values().iter().zip(v.values()).map(|(i, v)| i.min(v * p.rho_cr)).collect(),
    )?;
    let exact = analytic_outflow(&v, &accepted, p.road_length, None)?;
    let trace = simulate(problem.solver(), &v, problem.inflow(), &p)?;
    println!("L1 gap on [t0, T]: {:.5}", exact.l1_distance(&trace.outflow(), t0)?);
    Ok(())
}
