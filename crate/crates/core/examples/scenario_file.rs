//! Parses a scenario written inline, runs it into a temporary directory and
//! compares the policy directories it produced.

use vsl::scenario::{compare, run_scenario, Scenario};
use vsl::Result;

const SCENARIO: &str = "
name = short
cells = 50
t_end = 5
inflow = sin-capped base=0.3 amp=0.3 freq=1 cap=0.5
target = constant value=0.3
samples = 200
seed = 11
";

fn main() -> Result<()> {
    let scenario = Scenario::parse(SCENARIO, std::path::Path::new("."))?;
    let out = std::env::temp_dir().join("vsl-scenario-example");
    std::fs::create_dir_all(&out)?;
    let report = run_scenario(&scenario, Some(&out))?;
    println!("{}", report.table);
    let dirs: Vec<_> = report.summaries.iter().map(|s| out.join(s.policy.slug())).collect();
    println!("{}", compare(&dirs)?);
    Ok(())
}
