use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vsl::scenario::{
    compare, convergence, gradient_check, refinement_control, run_scenario, GradientCheckOptions, PolicySelection,
    Scenario,
};
use vsl::{Error, Result};

#[derive(Parser)]
#[command(name = "vsl", version, about = "Variable speed limit control on a single road")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Overrides shared by the scenario verbs.
#[derive(clap::Args)]
struct Overrides {
    /// Random exploration seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// ip, re, gdm, fixed-min, fixed-max or all.
    #[arg(long)]
    policy: Option<PolicySelection>,
    /// Random exploration sample count.
    #[arg(long)]
    samples: Option<usize>,
    /// Number of cells.
    #[arg(long)]
    cells: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the scenario's policies and write traces, summaries and a cost table.
    Run {
        /// Scenario file or built-in name (test1, test2, trivial).
        scenario: String,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Compare finished policy directories.
    Compare {
        #[arg(required = true, num_args = 2..)]
        dirs: Vec<PathBuf>,
    },
    /// Print needle derivatives next to finite differences.
    GradientCheck {
        scenario: String,
        #[command(flatten)]
        overrides: Overrides,
        /// Constant speed limit to differentiate around.
        #[arg(long)]
        speed: Option<f64>,
    },
    /// Outflow error against the exact input-output map under grid refinement.
    Convergence {
        scenario: String,
        #[command(flatten)]
        overrides: Overrides,
        /// Number of grids, each with twice the cells of the previous one.
        #[arg(long, default_value_t = 3)]
        levels: usize,
    },
}

fn load(arg: &str, o: &Overrides) -> Result<Scenario> {
    let mut s = Scenario::resolve(arg)?;
    if let Some(seed) = o.seed {
        s.re.seed = seed;
    }
    if let Some(p) = o.policy {
        s.policy = p;
    }
    if let Some(n) = o.samples {
        s.re.samples = n;
    }
    if let Some(j) = o.cells {
        s.solver.n_cells = j;
    }
    if let Some(out) = &o.out {
        s.output = Some(out.clone());
    }
    s.validate()?;
    Ok(s)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { scenario, overrides } => {
            let s = load(&scenario, &overrides)?;
            let out = s.output.clone().unwrap_or_else(|| PathBuf::from("runs").join(&s.name));
            fs::create_dir_all(&out)?;
            let report = run_scenario(&s, Some(&out))?;
            print!("{}", report.table);
            println!("\nwritten to {}", out.display());
        }
        Command::Compare { dirs } => print!("{}", compare(&dirs)?),
        Command::GradientCheck {
            scenario,
            overrides,
            speed,
        } => {
            let s = load(&scenario, &overrides)?;
            let opts = GradientCheckOptions {
                speed,
                ..GradientCheckOptions::default()
            };
            let report = gradient_check(&s.problem()?, &opts)?;
            println!("{report}");
            if let Some(out) = &s.output {
                fs::create_dir_all(out)?;
                report.write_csv(fs::File::create(out.join("gradient.csv"))?)?;
            }
        }
        Command::Convergence {
            scenario,
            overrides,
            levels,
        } => {
            if levels < 2 {
                return Err(Error::Config("convergence needs at least two levels".into()));
            }
            let s = load(&scenario, &overrides)?;
            let problem = s.problem()?;
            print!("{}", convergence(&problem, &refinement_control(problem.params()), levels)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
