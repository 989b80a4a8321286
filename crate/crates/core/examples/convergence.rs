//! Grid refinement: solver outflow against the exact input-output map.

use vsl::scenario::{convergence, refinement_control};
use vsl::{Problem, Result};

fn main() -> Result<()> {
    let problem = Problem::test1()?;
    let report = convergence(&problem, &refinement_control(problem.params()), 4)?;
    print!("{report}");
    Ok(())
}
