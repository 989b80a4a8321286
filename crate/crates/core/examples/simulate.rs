//! Runs the Godunov solver on the first benchmark road at both fixed speed
//! limits and reports cost, mass balance and the free-flow bound.
//!
//! ```text
//! cargo run --release --example simulate [-- out.csv]
//! ```

use std::fs::File;

use vsl::{Problem, Result};

fn main() -> Result<()> {
    let problem = Problem::test1()?;
    let p = *problem.params();
    println!(
        "J = {} cells, dt = {}, {} steps",
        problem.solver().n_cells,
        problem.dt(),
        problem.n_steps()
    );
    for v in [p.v_max, p.v_min] {
        let control = problem.constant_control(v)?;
        let trace = problem.simulate_with_history(&control)?;
        let cost = problem.cost_of_trace(&trace)?;
        let worst = trace.mass_residuals().iter().fold(0.0f64, |m, r| m.max(r.abs()));
        println!(
            "v = {v:<4} cost = {:.6}  max density = {:.4}  worst mass residual = {worst:.2e}",
            cost.value,
            trace.max_density().unwrap(),
        );
    }
    if let Some(path) = std::env::args().nth(1) {
        let trace = problem.simulate(&problem.constant_control(p.v_max)?)?;
        trace.write_csv(File::create(&path)?)?;
        println!("trace written to {path}");
    }
    Ok(())
}
