//! Projected gradient descent from the midpoint speed, printing the accepted
//! costs.

use vsl::policies::{gradient_descent, instantaneous_policy, GdmOptions};
use vsl::{Problem, Result};

fn main() -> Result<()> {
    let problem = match std::env::args().nth(1).as_deref() {
        Some("test2") => Problem::test2()?,
        _ => Problem::test1()?,
    };
    let ip = instantaneous_policy(&problem)?;
    println!("instantaneous policy: cost {:.6}, TV {:.3}", ip.cost, ip.tv);

    let r = gradient_descent(&problem, &GdmOptions::default())?;
    for (i, c) in r.meta.cost_history.iter().enumerate() {
        println!("iter {i:>3}  J = {c:.6}");
    }
    println!(
        "gradient method: cost {:.6}, TV {:.3}, {} iterations{} ({:.2?})",
        r.cost,
        r.tv,
        r.meta.iterations.unwrap_or(0),
        if r.meta.stalled { ", line search stalled" } else { "" },
        r.wall_time
    );
    Ok(())
}
