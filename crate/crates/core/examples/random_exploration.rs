//! Random binary speed schedules on the first benchmark: cost histogram and
//! the best draw.
//!
//! ```text
//! cargo run --release --example random_exploration -- [samples] [seed]
//! ```

use vsl::policies::{histogram, random_exploration, ReOptions};
use vsl::{Problem, Result};

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let samples = args.next().map_or(1000, |s| s.parse().expect("sample count"));
    let seed = args.next().map_or(0, |s| s.parse().expect("seed"));
    let problem = Problem::test1()?;
    let r = random_exploration(&problem, &ReOptions { samples, seed })?;
    let costs = r.sample_costs.as_deref().unwrap_or_default();
    let widest = histogram(costs, 20).iter().map(|b| b.1).max().unwrap_or(1);
    for (edge, count) in histogram(costs, 20) {
        println!("{edge:>9.5} {:<50} {count}", "#".repeat(count * 50 / widest));
    }
    println!(
        "best sample {} of {samples}: cost {:.6}, TV {} ({:.2?})",
        r.meta.best_sample.unwrap(),
        r.cost,
        r.tv,
        r.wall_time
    );
    Ok(())
}
