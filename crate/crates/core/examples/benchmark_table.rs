//! Cost table of all five policies for a built-in scenario (`test1` by
//! default, or `test2`), with compute times.

use vsl::scenario::{run_scenario, Scenario};
use vsl::Result;

fn main() -> Result<()> {
    env_logger::init();
    let name = std::env::args().nth(1).unwrap_or_else(|| "test1".into());
    let scenario = Scenario::builtin(&name).expect("test1, test2 or trivial");
    let report = run_scenario(&scenario, None)?;
    print!("{}", report.table);
    println!();
    for s in &report.summaries {
        println!("{:<32} {:>10.3} s", s.label, s.wall_time_s);
    }
    Ok(())
}
