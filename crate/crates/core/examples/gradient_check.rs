//! Needle-variation derivatives next to finite differences, on a coarse and a
//! fine grid. Pass a cell count to override the default pair.

use vsl::scenario::{gradient_check, GradientCheckOptions};
use vsl::{Problem, Result};

fn main() -> Result<()> {
    let grids: Vec<usize> = match std::env::args().nth(1) {
        Some(j) => vec![j.parse().expect("cell count")],
        None => vec![100, 200],
    };
    for cells in grids {
        let problem = Problem::test1()?.with_cells(cells)?;
        let report = gradient_check(&problem, &GradientCheckOptions::default())?;
        println!("{report}\n");
    }
    Ok(())
}
