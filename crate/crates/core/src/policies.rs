//! Control policies: fixed speeds, the instantaneous feedback law, random
//! exploration over binary schedules and projected gradient descent.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::{GradientOptions, Sensitivity};
use crate::error::{Error, Result};
use crate::model::Signal;
use crate::problem::Problem;
use crate::solver::{Simulation, SimulationTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    FixedMax,
    FixedMin,
    Instantaneous,
    RandomExploration,
    GradientDescent,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [
        PolicyKind::FixedMax,
        PolicyKind::FixedMin,
        PolicyKind::Instantaneous,
        PolicyKind::RandomExploration,
        PolicyKind::GradientDescent,
    ];

    /// Short name used on the command line and for output directories.
    pub fn slug(self) -> &'static str {
        match self {
            PolicyKind::FixedMax => "fixed-max",
            PolicyKind::FixedMin => "fixed-min",
            PolicyKind::Instantaneous => "ip",
            PolicyKind::RandomExploration => "re",
            PolicyKind::GradientDescent => "gdm",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            PolicyKind::FixedMax => "Fixed speed v = v_max",
            PolicyKind::FixedMin => "Fixed speed v = v_min",
            PolicyKind::Instantaneous => "Instantaneous policy",
            PolicyKind::RandomExploration => "Minimum of random exploration",
            PolicyKind::GradientDescent => "Gradient method",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.slug() == s)
            .ok_or_else(|| Error::config(format!("unknown policy '{s}'")))
    }
}

/// Policy-specific bookkeeping.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyMeta {
    pub iterations: Option<usize>,
    pub samples: Option<usize>,
    pub seed: Option<u64>,
    /// Index of the winning random sample.
    pub best_sample: Option<usize>,
    /// Gradient descent ended because no step size lowered the cost.
    pub stalled: bool,
    /// Costs of the accepted gradient iterates, starting with the initial control.
    pub cost_history: Vec<f64>,
    /// Steps where the instantaneous law met an empty exit cell.
    pub division_guards: usize,
}

#[derive(Debug, Clone)]
pub struct PolicyResult {
    pub kind: PolicyKind,
    pub control: Signal,
    pub trace: SimulationTrace,
    pub cost: f64,
    pub tv: f64,
    /// Compute time of the policy itself, without the final evaluation and I/O.
    pub wall_time: Duration,
    pub meta: PolicyMeta,
    /// Cost of every random sample, in draw order.
    pub sample_costs: Option<Vec<f64>>,
}

impl PolicyResult {
    fn finish(problem: &Problem, kind: PolicyKind, control: Signal, wall_time: Duration, meta: PolicyMeta) -> Result<Self> {
        let eval = problem.evaluate(&control)?;
        Ok(PolicyResult {
            kind,
            tv: control.total_variation(),
            cost: eval.cost.value,
            trace: eval.trace,
            control,
            wall_time,
            meta,
            sample_costs: None,
        })
    }
}

/// Constant speed limit `v_max` or `v_min`.
pub fn fixed_speed(problem: &Problem, kind: PolicyKind) -> Result<PolicyResult> {
    let p = problem.params();
    let v = match kind {
        PolicyKind::FixedMax => p.v_max,
        PolicyKind::FixedMin => p.v_min,
        other => return Err(Error::config(format!("{other} is not a fixed-speed policy"))),
    };
    let start = Instant::now();
    let control = problem.constant_control(v)?;
    PolicyResult::finish(problem, kind, control, start.elapsed(), PolicyMeta::default())
}

/// Closed-loop feedback `v = P(f*(t^n) / rho_J^n)`, applied from the next
/// control interval on. The first interval uses the initial exit density.
pub fn instantaneous_policy(problem: &Problem) -> Result<PolicyResult> {
    let p = problem.params();
    let start = Instant::now();
    let mut guards = 0;
    let mut law = |f: f64, rho: f64, n: usize| -> f64 {
        if rho <= 0.0 {
            guards += 1;
            log::warn!("empty exit cell at step {n}; speed limit set to v_max");
            p.v_max
        } else {
            (f / rho).clamp(p.v_min, p.v_max)
        }
    };
    let target = problem.target().values();
    let mut sim = Simulation::new(problem.solver(), problem.inflow(), p, false)?;
    let mut controls = Vec::with_capacity(problem.n_intervals());
    let mut v = law(target[0], problem.solver().initial_exit_density(), 0);
    let mut last = (target[0], problem.solver().initial_exit_density());
    for k in 0..problem.n_intervals() {
        if k > 0 {
            v = law(last.0, last.1, k * problem.control_steps());
        }
        controls.push(v);
        for n in problem.interval_steps(k) {
            last = (target[n], sim.exit_density());
            sim.advance(v)?;
        }
    }
    let wall = start.elapsed();
    let control = problem.control(controls)?;
    let meta = PolicyMeta {
        division_guards: guards,
        ..PolicyMeta::default()
    };
    PolicyResult::finish(problem, PolicyKind::Instantaneous, control, wall, meta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReOptions {
    pub samples: usize,
    pub seed: u64,
}

impl Default for ReOptions {
    fn default() -> Self {
        ReOptions { samples: 1000, seed: 0 }
    }
}

/// Binary schedule number `index` for `seed`: a fair coin per control
/// interval picks `v_min` or `v_max`. Every index owns its own stream, so the
/// draw does not depend on how samples are scheduled across threads.
pub fn draw_binary_schedule(problem: &Problem, seed: u64, index: u64) -> Result<Signal> {
    let p = problem.params();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let values = (0..problem.n_intervals())
        .map(|_| if rng.random_bool(0.5) { p.v_max } else { p.v_min })
        .collect();
    problem.control(values)
}

/// Evaluates `samples` random binary schedules and keeps the cheapest; ties
/// go to the lowest sample index.
pub fn random_exploration(problem: &Problem, opts: &ReOptions) -> Result<PolicyResult> {
    if opts.samples == 0 {
        return Err(Error::config("random exploration needs at least one sample"));
    }
    let start = Instant::now();
    let costs: Vec<f64> = (0..opts.samples as u64)
        .into_par_iter()
        .map(|i| problem.cost_of(&draw_binary_schedule(problem, opts.seed, i)?))
        .collect::<Result<_>>()?;
    let best = costs
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
        .expect("at least one sample");
    let control = draw_binary_schedule(problem, opts.seed, best as u64)?;
    let wall = start.elapsed();
    let meta = PolicyMeta {
        samples: Some(opts.samples),
        seed: Some(opts.seed),
        best_sample: Some(best),
        ..PolicyMeta::default()
    };
    let mut result = PolicyResult::finish(problem, PolicyKind::RandomExploration, control, wall, meta)?;
    result.sample_costs = Some(costs);
    Ok(result)
}

/// Equal-width histogram of `costs` as `(lower bin edge, count)`.
pub fn histogram(costs: &[f64], bins: usize) -> Vec<(f64, usize)> {
    if costs.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = costs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = costs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0; bins];
    for &c in costs {
        let b = if width > 0.0 { ((c - lo) / width) as usize } else { 0 };
        counts[b.min(bins - 1)] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, n)| (lo + i as f64 * width, n))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GdmOptions {
    /// Starting control; the midpoint speed when `None`.
    pub v_init: Option<Signal>,
    /// Stop once an accepted step lowers the cost by no more than this.
    pub eps: f64,
    /// Compare `eps` with the cost change relative to the current cost.
    pub relative: bool,
    pub max_iter: usize,
    /// Step-size halvings tried before declaring a stall.
    pub max_halvings: usize,
    /// First trial step moves the control by at most this fraction of `v_max - v_min`.
    pub initial_step: f64,
    pub gradient: GradientOptions,
}

impl Default for GdmOptions {
    fn default() -> Self {
        GdmOptions {
            v_init: None,
            eps: 1e-6,
            relative: false,
            max_iter: 100,
            max_halvings: 20,
            initial_step: 0.1,
            gradient: GradientOptions::default(),
        }
    }
}

/// Projected gradient descent with backtracking: `v <- P(v - alpha g)`,
/// halving `alpha` until the cost drops.
pub fn gradient_descent(problem: &Problem, opts: &GdmOptions) -> Result<PolicyResult> {
    let p = problem.params();
    if !(opts.eps >= 0.0) || !(opts.initial_step > 0.0) {
        return Err(Error::config("eps must be non-negative and the initial step positive"));
    }
    let start = Instant::now();
    let mut v = match &opts.v_init {
        Some(v) => {
            problem.check_control(v)?;
            v.clone()
        }
        None => problem.constant_control(0.5 * (p.v_min + p.v_max))?,
    };
    let mut cost = problem.cost_of(&v)?;
    let mut history = vec![cost];
    let mut stalled = false;
    for iter in 0..opts.max_iter {
        let sens = Sensitivity::new(problem, &v)?;
        let g = sens.gradient(&opts.gradient)?.descent_direction();
        let g_max = g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if g_max == 0.0 {
            log::info!("gdm: zero descent direction at iteration {iter}");
            break;
        }
        let mut alpha = opts.initial_step * (p.v_max - p.v_min) / g_max;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let values = v
                .values()
                .iter()
                .zip(&g)
                .map(|(x, d)| (x - alpha * d).clamp(p.v_min, p.v_max))
                .collect();
            let candidate = problem.control(values)?;
            let c = problem.cost_of(&candidate)?;
            if c < cost {
                accepted = Some((candidate, c));
                break;
            }
            alpha *= 0.5;
        }
        let Some((candidate, c)) = accepted else {
            log::info!("gdm: line search stalled at iteration {iter}, J = {cost}");
            stalled = true;
            break;
        };
        let drop = cost - c;
        log::debug!("gdm: iteration {iter}, J = {c}, alpha = {alpha}");
        v = candidate;
        cost = c;
        history.push(cost);
        let tol = if opts.relative { opts.eps * cost.abs() } else { opts.eps };
        if drop <= tol {
            break;
        }
    }
    let wall = start.elapsed();
    let meta = PolicyMeta {
        iterations: Some(history.len() - 1),
        stalled,
        cost_history: history,
        ..PolicyMeta::default()
    };
    PolicyResult::finish(problem, PolicyKind::GradientDescent, v, wall, meta)
}

/// Runs one policy with the given random-exploration and descent settings.
pub fn run_policy(problem: &Problem, kind: PolicyKind, re: &ReOptions, gdm: &GdmOptions) -> Result<PolicyResult> {
    match kind {
        PolicyKind::FixedMax | PolicyKind::FixedMin => fixed_speed(problem, kind),
        PolicyKind::Instantaneous => instantaneous_policy(problem),
        PolicyKind::RandomExploration => random_exploration(problem, re),
        PolicyKind::GradientDescent => gradient_descent(problem, gdm),
    }
}
