//! Scenario files, experiment orchestration and reports.
//!
//! A scenario is flat `key = value` text with `#` comments:
//!
//! ```text
//! name = test1
//! cells = 100
//! t_end = 15
//! initial_density = 0.4
//! inflow = sin-capped base=0.3 amp=0.3 freq=1 cap=0.5
//! target = constant value=0.3
//! policy = all
//! samples = 1000
//! seed = 0
//! ```
//!
//! Signals are either a preset with named parameters or `csv:<path>` with a
//! `t,value` file. The initial density is a number or `csv:<path>` with one
//! `x,rho` row per cell. Relative paths resolve against the scenario file.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cost::{NeedleOptions, NeedleSide, Sensitivity, VariationVector};
use crate::error::{Error, Result};
use crate::letmap::analytic_outflow;
use crate::model::{fmt_full, FluxParams, Preset, Signal};
use crate::policies::{histogram, run_policy, GdmOptions, PolicyKind, PolicyResult, ReOptions};
use crate::problem::{Problem, Source};
use crate::solver::{simulate, InitialDensity, SolverConfig};

/// Which policies a run executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PolicySelection {
    All,
    Only(PolicyKind),
}

impl PolicySelection {
    pub fn kinds(self) -> Vec<PolicyKind> {
        match self {
            PolicySelection::All => PolicyKind::ALL.to_vec(),
            PolicySelection::Only(k) => vec![k],
        }
    }
}

impl std::str::FromStr for PolicySelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            Ok(PolicySelection::All)
        } else {
            s.parse().map(PolicySelection::Only)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub params: FluxParams,
    pub solver: SolverConfig,
    pub inflow: Source,
    pub target: Source,
    pub control_steps: usize,
    pub policy: PolicySelection,
    pub re: ReOptions,
    pub gdm: GdmOptions,
    pub output: Option<PathBuf>,
}

const TEST1: &str = "\
name = test1
inflow = sin-capped base=0.3 amp=0.3 freq=1 cap=0.5
target = constant value=0.3
";

const TEST2: &str = "\
name = test2
inflow = sin-capped base=0.3 amp=0.3 freq=1 cap=0.5
target = abs-sin amp=0.4 omega=3.141592653589793 phase=0.3
";

const TRIVIAL: &str = "\
name = trivial
initial_density = 0.4
inflow = constant value=0.3
target = constant value=0.3
";

/// Names accepted by [`Scenario::builtin`].
pub const BUILTINS: [&str; 3] = ["test1", "test2", "trivial"];

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

fn number<T: std::str::FromStr>(line: usize, key: &str, s: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    s.parse::<T>()
        .map_err(|e| parse_err(line, format!("{key}: cannot read `{s}`: {e}")))
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// `name k=v ...` or `csv:path`.
fn parse_source(line: usize, key: &str, value: &str, base: &Path) -> Result<Source> {
    if let Some(path) = value.strip_prefix("csv:") {
        let path = resolve(base, path.trim());
        let file = File::open(&path).map_err(|e| parse_err(line, format!("{key}: {}: {e}", path.display())))?;
        return Ok(Source::Samples(Signal::read_csv(file)?));
    }
    let mut words = value.split_whitespace();
    let name = words.next().ok_or_else(|| parse_err(line, format!("{key}: empty signal")))?;
    let mut args = BTreeMap::new();
    for w in words {
        let (k, v) = w
            .split_once('=')
            .ok_or_else(|| parse_err(line, format!("{key}: expected `name=value`, got `{w}`")))?;
        if args.insert(k.to_string(), number::<f64>(line, k, v)?).is_some() {
            return Err(parse_err(line, format!("{key}: parameter `{k}` given twice")));
        }
    }
    let mut take = |k: &str| -> Result<f64> {
        args.remove(k)
            .ok_or_else(|| parse_err(line, format!("{key}: preset `{name}` needs `{k}`")))
    };
    let preset = match name {
        "constant" => Preset::Constant { value: take("value")? },
        "sin-capped" => Preset::SinCapped {
            base: take("base")?,
            amp: take("amp")?,
            freq: take("freq")?,
            cap: take("cap")?,
        },
        "abs-sin" => Preset::AbsSin {
            amp: take("amp")?,
            omega: take("omega")?,
            phase: take("phase")?,
        },
        other => {
            return Err(parse_err(
                line,
                format!("{key}: unknown preset `{other}` (constant, sin-capped, abs-sin or csv:path)"),
            ))
        }
    };
    if let Some(k) = args.keys().next() {
        return Err(parse_err(line, format!("{key}: preset `{name}` has no parameter `{k}`")));
    }
    Ok(Source::Preset(preset))
}

fn parse_initial(line: usize, value: &str, base: &Path) -> Result<InitialDensity> {
    let Some(path) = value.strip_prefix("csv:") else {
        return Ok(InitialDensity::Constant(number(line, "initial_density", value)?));
    };
    let path = resolve(base, path.trim());
    let file = File::open(&path).map_err(|e| parse_err(line, format!("initial_density: {}: {e}", path.display())))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let mut cells = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = rec
            .get(1)
            .ok_or_else(|| parse_err(i + 2, format!("{}: expected `x,rho`", path.display())))?;
        cells.push(number(i + 2, "rho", field)?);
    }
    Ok(InitialDensity::Profile(cells))
}

impl Scenario {
    /// Parses scenario text; `base` resolves relative CSV paths.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut s = Scenario {
            name: "scenario".into(),
            params: FluxParams::standard(),
            solver: SolverConfig::standard(),
            inflow: Source::Preset(Preset::Constant { value: 0.3 }),
            target: Source::Preset(Preset::Constant { value: 0.3 }),
            control_steps: 1,
            policy: PolicySelection::All,
            re: ReOptions::default(),
            gdm: GdmOptions::default(),
            output: None,
        };
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| parse_err(line, format!("expected `key = value`, got `{content}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if let Some(prev) = seen.insert(key.to_string(), line) {
                return Err(parse_err(line, format!("`{key}` already set on line {prev}")));
            }
            match key {
                "name" => s.name = value.to_string(),
                "road_length" => s.params.road_length = number(line, key, value)?,
                "rho_cr" => s.params.rho_cr = number(line, key, value)?,
                "rho_max" => s.params.rho_max = number(line, key, value)?,
                "v_min" => s.params.v_min = number(line, key, value)?,
                "v_max" => s.params.v_max = number(line, key, value)?,
                "cells" => s.solver.n_cells = number(line, key, value)?,
                "t_end" => s.solver.t_end = number(line, key, value)?,
                "cfl_safety" => s.solver.cfl_safety = number(line, key, value)?,
                "initial_density" => s.solver.initial_density = parse_initial(line, value, base)?,
                "inflow" => s.inflow = parse_source(line, key, value, base)?,
                "target" => s.target = parse_source(line, key, value, base)?,
                "control_steps" => s.control_steps = number(line, key, value)?,
                "policy" => s.policy = value.parse().map_err(|e: Error| parse_err(line, e.to_string()))?,
                "seed" => s.re.seed = number(line, key, value)?,
                "samples" => s.re.samples = number(line, key, value)?,
                "gdm_eps" => s.gdm.eps = number(line, key, value)?,
                "gdm_relative" => s.gdm.relative = number(line, key, value)?,
                "gdm_max_iter" => s.gdm.max_iter = number(line, key, value)?,
                "output" => s.output = Some(resolve(base, value)),
                other => return Err(parse_err(line, format!("unknown key `{other}`"))),
            }
        }
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read scenario {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Scenario::parse(&text, base)
    }

    pub fn builtin(name: &str) -> Option<Self> {
        let text = match name {
            "test1" => TEST1,
            "test2" => TEST2,
            "trivial" => TRIVIAL,
            _ => return None,
        };
        Some(Scenario::parse(text, Path::new(".")).expect("built-in scenarios are valid"))
    }

    /// A built-in name or a path to a scenario file.
    pub fn resolve(arg: &str) -> Result<Self> {
        match Scenario::builtin(arg) {
            Some(s) if !Path::new(arg).exists() => Ok(s),
            _ => Scenario::load(Path::new(arg)),
        }
    }

    /// Checks every parameter before any compute.
    pub fn validate(&self) -> Result<()> {
        if self.re.samples == 0 {
            return Err(Error::config("samples must be at least 1"));
        }
        if !(self.gdm.eps >= 0.0) {
            return Err(Error::config("gdm_eps must be non-negative"));
        }
        self.problem().map(|_| ())
    }

    pub fn problem(&self) -> Result<Problem> {
        Problem::new(self.params, self.solver.clone(), self.inflow.clone(), self.target.clone())?
            .with_control_steps(self.control_steps)
    }
}

/// Full-precision per-policy record written as `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub scenario: String,
    pub policy: PolicyKind,
    pub label: String,
    pub cost: f64,
    pub tv: f64,
    pub wall_time_s: f64,
    pub seed: Option<u64>,
    pub samples: Option<usize>,
    pub best_sample: Option<usize>,
    pub iterations: Option<usize>,
    pub stalled: bool,
    pub division_guards: usize,
    pub cells: usize,
    pub dt: f64,
    pub control_dt: f64,
    pub horizon: f64,
}

impl PolicySummary {
    fn new(scenario: &str, problem: &Problem, r: &PolicyResult) -> Self {
        PolicySummary {
            scenario: scenario.to_string(),
            policy: r.kind,
            label: r.kind.label().to_string(),
            cost: r.cost,
            tv: r.tv,
            wall_time_s: r.wall_time.as_secs_f64(),
            seed: r.meta.seed,
            samples: r.meta.samples,
            best_sample: r.meta.best_sample,
            iterations: r.meta.iterations,
            stalled: r.meta.stalled,
            division_guards: r.meta.division_guards,
            cells: problem.solver().n_cells,
            dt: problem.dt(),
            control_dt: problem.control_dt(),
            horizon: problem.horizon(),
        }
    }
}

/// Formats with six significant digits.
pub fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let mag = x.abs().log10().floor() as i32;
    if (-4..6).contains(&mag) {
        format!("{:.*}", (5 - mag).max(0) as usize, x)
    } else {
        format!("{x:.5e}")
    }
}

/// Rows of a cost table, in run order.
pub fn format_table(name: &str, problem: &Problem, rows: &[PolicySummary]) -> String {
    let mut s = format!(
        "Scenario {name}: J = {} cells, dt = {}, T = {}\n\n",
        problem.solver().n_cells,
        sig6(problem.dt()),
        sig6(problem.horizon())
    );
    s += &format!("{:<32} {:>14} {:>14}\n", "Policy", "Cost", "TV(v)");
    for r in rows {
        s += &format!("{:<32} {:>14} {:>14}\n", r.label, sig6(r.cost), sig6(r.tv));
    }
    s
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_columns(path: &Path, header: &[&str], columns: &[&[f64]], t0: f64, dt: f64) -> Result<()> {
    let mut out = csv::Writer::from_writer(create(path)?);
    out.write_record(header)?;
    let n = columns.first().map_or(0, |c| c.len());
    for i in 0..n {
        let mut rec = vec![fmt_full(t0 + i as f64 * dt)];
        rec.extend(columns.iter().map(|c| fmt_full(c[i])));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

/// Number of bins in the random-exploration cost histogram.
pub const HISTOGRAM_BINS: usize = 40;

/// Writes one policy's artifacts into `dir`.
pub fn write_policy(dir: &Path, summary: &PolicySummary, problem: &Problem, r: &PolicyResult) -> Result<()> {
    fs::create_dir_all(dir)?;
    let c = &r.control;
    write_columns(&dir.join("control.csv"), &["t", "v"], &[c.values()], c.t0(), c.dt())?;
    write_columns(
        &dir.join("outflow.csv"),
        &["t", "out", "target"],
        &[r.trace.outflow_values(), problem.target().values()],
        0.0,
        problem.dt(),
    )?;
    r.trace.write_csv(create(&dir.join("trace.csv"))?)?;
    if let Some(costs) = &r.sample_costs {
        let mut out = csv::Writer::from_writer(create(&dir.join("histogram.csv"))?);
        out.write_record(["cost_bin", "count"])?;
        for (edge, n) in histogram(costs, HISTOGRAM_BINS) {
            out.write_record([fmt_full(edge), n.to_string()])?;
        }
        out.flush()?;
        let mut out = csv::Writer::from_writer(create(&dir.join("samples.csv"))?);
        out.write_record(["sample", "cost"])?;
        for (i, c) in costs.iter().enumerate() {
            out.write_record([i.to_string(), fmt_full(*c)])?;
        }
        out.flush()?;
    }
    let mut w = create(&dir.join("summary.json"))?;
    serde_json::to_writer_pretty(&mut w, summary)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// Results of a scenario run.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub summaries: Vec<PolicySummary>,
    pub results: Vec<PolicyResult>,
    pub table: String,
}

/// Runs the selected policies one after another and, when `out` is given,
/// writes one directory per policy plus `table.txt` and `summary.json`.
pub fn run_scenario(scenario: &Scenario, out: Option<&Path>) -> Result<RunReport> {
    let problem = scenario.problem()?;
    let mut summaries = Vec::new();
    let mut results = Vec::new();
    for kind in scenario.policy.kinds() {
        log::info!("{}: running {}", scenario.name, kind.label());
        let r = run_policy(&problem, kind, &scenario.re, &scenario.gdm)?;
        let summary = PolicySummary::new(&scenario.name, &problem, &r);
        if let Some(dir) = out {
            write_policy(&dir.join(kind.slug()), &summary, &problem, &r)?;
        }
        summaries.push(summary);
        results.push(r);
    }
    let table = format_table(&scenario.name, &problem, &summaries);
    if let Some(dir) = out {
        fs::write(dir.join("table.txt"), &table)?;
        let mut w = create(&dir.join("summary.json"))?;
        serde_json::to_writer_pretty(&mut w, &summaries)?;
        writeln!(w)?;
        w.flush()?;
    }
    Ok(RunReport {
        summaries,
        results,
        table,
    })
}

/// One policy directory loaded back from disk.
#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub dir: PathBuf,
    pub summary: PolicySummary,
    pub control: Signal,
    pub histogram: Option<String>,
}

impl LoadedRun {
    pub fn load(dir: &Path) -> Result<Self> {
        let open = |name: &str| {
            File::open(dir.join(name)).map_err(|e| {
                Error::config(format!("{} is not a policy run directory: {name}: {e}", dir.display()))
            })
        };
        let summary: PolicySummary = serde_json::from_reader(open("summary.json")?)?;
        let control = Signal::read_csv(open("control.csv")?)?;
        let histogram = fs::read_to_string(dir.join("histogram.csv")).ok();
        Ok(LoadedRun {
            dir: dir.to_path_buf(),
            summary,
            control,
            histogram,
        })
    }
}

/// Side-by-side costs, TVs, wall times and control distances.
#[derive(Debug, Clone)]
pub struct CompareReport {
    pub runs: Vec<LoadedRun>,
    /// `l1[i][j]` is the L1 distance between the controls of runs `i` and `j`.
    pub l1: Vec<Vec<f64>>,
}

impl CompareReport {
    /// `Some(true)` when both runs carry identical cost histograms.
    pub fn same_histogram(&self, i: usize, j: usize) -> Option<bool> {
        Some(self.runs[i].histogram.as_ref()? == self.runs[j].histogram.as_ref()?)
    }
}

impl fmt::Display for CompareReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<4} {:<36} {:>14} {:>14} {:>14}", "#", "Run", "Cost", "TV(v)", "Time [s]")?;
        for (i, r) in self.runs.iter().enumerate() {
            writeln!(
                f,
                "{:<4} {:<36} {:>14} {:>14} {:>14}",
                i,
                r.dir.display().to_string(),
                sig6(r.summary.cost),
                sig6(r.summary.tv),
                sig6(r.summary.wall_time_s)
            )?;
        }
        writeln!(f, "\nL1 distance between controls")?;
        write!(f, "{:<4}", "")?;
        for j in 0..self.runs.len() {
            write!(f, " {j:>12}")?;
        }
        writeln!(f)?;
        for (i, row) in self.l1.iter().enumerate() {
            write!(f, "{i:<4}")?;
            for d in row {
                write!(f, " {:>12}", sig6(*d))?;
            }
            writeln!(f)?;
        }
        for i in 0..self.runs.len() {
            for j in i + 1..self.runs.len() {
                if let Some(same) = self.same_histogram(i, j) {
                    writeln!(f, "histograms {i} and {j}: {}", if same { "identical" } else { "different" })?;
                }
            }
        }
        Ok(())
    }
}

/// Loads policy directories and compares them. All runs must share the
/// solver and control grids.
pub fn compare(dirs: &[PathBuf]) -> Result<CompareReport> {
    if dirs.len() < 2 {
        return Err(Error::config("compare needs at least two run directories"));
    }
    let runs = dirs.iter().map(|d| LoadedRun::load(d)).collect::<Result<Vec<_>>>()?;
    let first = &runs[0];
    for r in &runs[1..] {
        let same = r.summary.cells == first.summary.cells
            && r.summary.dt == first.summary.dt
            && r.summary.horizon == first.summary.horizon
            && r.control.same_grid(&first.control);
        if !same {
            return Err(Error::domain(format!(
                "grid mismatch: {} ({} cells, dt {}, {} control intervals) vs {} ({} cells, dt {}, {} control intervals)",
                first.dir.display(),
                first.summary.cells,
                first.summary.dt,
                first.control.len(),
                r.dir.display(),
                r.summary.cells,
                r.summary.dt,
                r.control.len()
            )));
        }
    }
    let l1 = runs
        .iter()
        .map(|a| runs.iter().map(|b| a.control.l1_distance(&b.control)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    Ok(CompareReport { runs, l1 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheckOptions {
    /// Constant speed limit around which to differentiate; the midpoint when `None`.
    pub speed: Option<f64>,
    /// Needle times; chosen automatically when `None`.
    pub times: Option<Vec<f64>>,
    pub count: usize,
    pub dv: f64,
    pub needle: NeedleOptions,
}

impl Default for GradientCheckOptions {
    fn default() -> Self {
        GradientCheckOptions {
            speed: None,
            times: None,
            count: 20,
            dv: 1e-3,
            needle: NeedleOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientCheckRow {
    pub t: f64,
    pub step: usize,
    pub right: f64,
    pub left: f64,
    pub fd: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientCheckReport {
    pub cells: usize,
    pub speed: f64,
    pub formula_domain: (f64, f64),
    pub rows: Vec<GradientCheckRow>,
}

impl GradientCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.rows.iter().map(|r| r.rel_err).fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let v = VariationVector {
            times: self.rows.iter().map(|r| r.t).collect(),
            right: self.rows.iter().map(|r| Some(r.right)).collect(),
            left: self.rows.iter().map(|r| Some(r.left)).collect(),
            from_formula: vec![true; self.rows.len()],
        };
        let fd: Vec<_> = self.rows.iter().map(|r| Some(r.fd)).collect();
        v.write_csv(w, Some(&fd))
    }
}

impl fmt::Display for GradientCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "needle vs finite difference, J = {} cells, v = {}, closed form on [{}, {})",
            self.cells,
            sig6(self.speed),
            sig6(self.formula_domain.0),
            sig6(self.formula_domain.1)
        )?;
        writeln!(f, "{:>10} {:>14} {:>14} {:>14} {:>10}", "t", "needle(+)", "needle(-)", "fd(+)", "rel.err")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:>10} {:>14} {:>14} {:>14} {:>10}",
                sig6(r.t),
                sig6(r.right),
                sig6(r.left),
                sig6(r.fd),
                sig6(r.rel_err)
            )?;
        }
        write!(f, "max relative error {}", sig6(self.max_rel_err()))
    }
}

/// Needle steps inside the closed-form domain, preferring steps around which
/// inflow and target stay constant for `halo` steps on each side.
fn needle_steps(sens: &Sensitivity, count: usize, halo: usize) -> Vec<usize> {
    let problem = sens.problem();
    let n = problem.n_steps();
    let steady = |s: &Signal, k: usize| {
        let vals = s.values();
        k >= halo && k + halo < n && vals[k - halo..=k + halo].iter().all(|&x| x == vals[k])
    };
    let domain: Vec<usize> = (0..n).filter(|&k| sens.in_formula_domain(k)).collect();
    let flat: Vec<usize> = domain
        .iter()
        .copied()
        .filter(|&k| steady(problem.inflow(), k) && steady(problem.target(), k))
        .collect();
    let pool = if flat.len() >= count { flat } else { domain };
    if pool.len() <= count {
        return pool;
    }
    (0..count)
        .map(|i| pool[(2 * i + 1) * pool.len() / (2 * count)])
        .collect()
}

/// Compares the closed-form needle derivative with finite differences at a
/// constant control.
pub fn gradient_check(problem: &Problem, opts: &GradientCheckOptions) -> Result<GradientCheckReport> {
    let p = problem.params();
    let speed = opts.speed.unwrap_or(0.5 * (p.v_min + p.v_max));
    let v = problem.constant_control(speed)?;
    let sens = Sensitivity::new(problem, &v)?;
    let domain = sens
        .formula_domain()
        .ok_or_else(|| Error::domain("no car crosses the road within the horizon"))?;
    let steps = match &opts.times {
        Some(ts) => ts.iter().map(|t| (t / problem.dt()).round() as usize).collect(),
        None => needle_steps(&sens, opts.count, 2),
    };
    let rows = steps
        .into_iter()
        .map(|n| {
            let right = sens.needle(n, NeedleSide::Plus, &opts.needle)?;
            let left = sens.needle(n, NeedleSide::Minus, &opts.needle)?;
            let fd = sens.fd(n..n + 1, opts.dv)?;
            Ok(GradientCheckRow {
                t: n as f64 * problem.dt(),
                step: n,
                right,
                left,
                fd,
                rel_err: (right - fd).abs() / fd.abs(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradientCheckReport {
        cells: problem.solver().n_cells,
        speed,
        formula_domain: domain,
        rows,
    })
}

/// Speed-limit profile used by the refinement study: a slow sine around the
/// midpoint speed.
pub fn refinement_control(p: &FluxParams) -> Preset {
    Preset::SinCapped {
        base: 0.5 * (p.v_min + p.v_max),
        amp: 0.4 * (p.v_max - p.v_min),
        freq: 1.0 / 3.0,
        cap: p.v_max,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub cells: usize,
    /// L1 gap over `[t0, T]` between solver and exact outflow.
    pub l1_gap: f64,
    /// Gap on the previous grid divided by this gap.
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub rows: Vec<ConvergenceRow>,
}

impl fmt::Display for ConvergenceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>8} {:>14} {:>8}", "cells", "L1 gap", "ratio")?;
        for r in &self.rows {
            let ratio = r.ratio.map(sig6).unwrap_or_else(|| "-".into());
            writeln!(f, "{:>8} {:>14} {:>8}", r.cells, sig6(r.l1_gap), ratio)?;
        }
        Ok(())
    }
}

/// L1 gap over `[t0, T]` between the solver outflow and the exact
/// input-output map under `control`. The exact map is fed the flux the
/// entrance can accept, `min(In, v rho_cr)`.
pub fn outflow_gap(problem: &Problem, control: &Preset) -> Result<f64> {
    let p = problem.params();
    let v = Signal::from_fn(0.0, problem.dt(), problem.n_steps(), |t| control.value_at(t))?;
    let trace = simulate(problem.solver(), &v, problem.inflow(), p)?;
    let accepted = Signal::new(
        0.0,
        problem.dt(),
        problem
            .inflow()
            .values()
            .iter()
            .zip(v.values())
            .map(|(i, v)| i.min(v * p.rho_cr))
            .collect(),
    )?;
    let exact = analytic_outflow(&v, &accepted, p.road_length, None)?;
    let t0 = exact
        .first_exit
        .ok_or_else(|| Error::domain("no car crosses the road within the horizon"))?;
    exact.l1_distance(&trace.outflow(), t0)
}

/// Outflow gap on `cells`, `2 cells`, `4 cells`, ...
pub fn convergence(problem: &Problem, control: &Preset, levels: usize) -> Result<ConvergenceReport> {
    let base = problem.solver().n_cells;
    let mut rows: Vec<ConvergenceRow> = Vec::new();
    for l in 0..levels {
        let cells = base << l;
        let gap = outflow_gap(&problem.with_cells(cells)?, control)?;
        let ratio = rows.last().map(|r| r.l1_gap / gap);
        rows.push(ConvergenceRow { cells, l1_gap: gap, ratio });
    }
    Ok(ConvergenceReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_parse() {
        for name in BUILTINS {
            let s = Scenario::builtin(name).unwrap();
            assert_eq!(s.name, name);
            s.problem().unwrap();
        }
        let t1 = Scenario::builtin("test1").unwrap().problem().unwrap();
        assert_eq!(t1.inflow(), Problem::test1().unwrap().inflow());
        let t2 = Scenario::builtin("test2").unwrap().problem().unwrap();
        assert_eq!(t2.target(), Problem::test2().unwrap().target());
    }

    #[test]
    fn parse_keys_and_comments() {
        let text = "# comment\nname = demo\ncells = 40  # trailing\nt_end = 2\ninflow = constant value=0.2\npolicy = ip\nseed = 9\n";
        let s = Scenario::parse(text, Path::new(".")).unwrap();
        assert_eq!(s.solver.n_cells, 40);
        assert_eq!(s.policy, PolicySelection::Only(PolicyKind::Instantaneous));
        assert_eq!(s.re.seed, 9);
        assert_eq!(s.inflow, Source::Preset(Preset::Constant { value: 0.2 }));
    }

    #[test]
    fn parse_errors_carry_lines() {
        let cases = [
            ("cells = 10\nbogus = 1\n", 2),
            ("\n\ncells = ten\n", 3),
            ("inflow = wobble amp=1\n", 1),
            ("inflow = constant\n", 1),
            ("inflow = constant value=0.2 extra=1\n", 1),
            ("cells = 10\ncells = 20\n", 2),
            ("just words\n", 1),
            ("policy = fastest\n", 1),
        ];
        for (text, line) in cases {
            match Scenario::parse(text, Path::new(".")) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn infeasible_parameters_rejected() {
        for text in ["v_min = 0\n", "v_min = 2\n", "rho_cr = 1.5\n", "cells = 1\n", "samples = 0\n"] {
            assert!(matches!(Scenario::parse(text, Path::new(".")), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn csv_sources() {
        let dir = tempfile::tempdir().unwrap();
        let sig = Signal::constant(0.0, 0.5, 8, 0.25).unwrap();
        sig.write_csv(File::create(dir.path().join("in.csv")).unwrap()).unwrap();
        fs::write(dir.path().join("rho.csv"), "x,rho\n0.25,0.1\n0.75,0.2\n").unwrap();
        let text = "cells = 2\nt_end = 1\ninflow = csv:in.csv\ninitial_density = csv:rho.csv\n";
        let s = Scenario::parse(text, dir.path()).unwrap();
        assert_eq!(s.inflow, Source::Samples(sig));
        assert_eq!(s.solver.initial_density, InitialDensity::Profile(vec![0.1, 0.2]));
        let err = Scenario::parse("inflow = csv:missing.csv\n", dir.path()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn six_significant_digits() {
        assert_eq!(sig6(873.0786), "873.079");
        assert_eq!(sig6(0.427870123), "0.427870");
        assert_eq!(sig6(12.0), "12.0000");
        assert_eq!(sig6(0.0), "0");
        assert_eq!(sig6(1234567.0), "1.23457e6");
    }

    #[test]
    fn trivial_run_is_exact_for_feedback_policies() {
        let mut s = Scenario::builtin("trivial").unwrap();
        s.solver.n_cells = 20;
        s.re.samples = 8;
        let report = run_scenario(&s, None).unwrap();
        assert_eq!(report.summaries.len(), 5);
        let bound = 1e-6 * 15.0 * 0.09;
        for r in &report.summaries {
            match r.policy {
                PolicyKind::Instantaneous | PolicyKind::GradientDescent => assert!(r.cost <= bound),
                _ => assert!(r.cost > bound),
            }
        }
        assert!(report.table.lines().count() >= 7);
    }

    #[test]
    fn convergence_rows() {
        let p = Problem::test1().unwrap().with_horizon(4.0).unwrap().with_cells(25).unwrap();
        let r = convergence(&p, &refinement_control(p.params()), 2).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert!(r.rows[1].l1_gap < r.rows[0].l1_gap);
        assert!(r.rows[1].ratio.is_some());
    }
}
