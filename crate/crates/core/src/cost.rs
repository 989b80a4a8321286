//! Tracking cost, needle-variation derivatives and a finite-difference oracle.
//!
//! A needle variation raises (or lowers) the speed limit by `dv` on a single
//! solver step `[t^n, t^{n+1})`. Its first-order effect on the cost, divided
//! by `dv * dt`, has a closed form in free flow built from four pieces:
//!
//! 1. the direct change of the exit flux, `2 rho_J^2 v - 2 rho_J f*`;
//! 2. and 3. the shift of every spatial density jump, which reaches the exit
//!    earlier by `dt * dv / v`, weighted by `v` and `f*` at its exit time;
//! 4. the gap left behind at the entrance, which exits at `tau^{-1}(t^{n+1})`.
//!
//! The formula holds for `t^n` in `[t0, tau(T))`. Elsewhere the gradient falls
//! back on [`Sensitivity::fd`], which restarts the solver from the stored
//! state instead of rerunning the whole horizon.

use std::io::Write;
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::letmap::{build_let, LetTable};
use crate::model::{fmt_full, Side, Signal};
use crate::problem::Problem;
use crate::solver::{Simulation, SimulationTrace};

/// Value of the cost together with its integrand.
#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub value: f64,
    /// `(Out - f*)^2` on the solver steps.
    pub per_step_residual: Signal,
    pub tv_of_control: Option<f64>,
}

/// Left Riemann sum of `(out - target)^2` with step `dt`.
pub fn cost(out: &Signal, target: &Signal, dt: f64) -> Result<CostReport> {
    if !out.same_grid(target) {
        return Err(Error::domain(format!(
            "outflow ({} samples, dt = {}) and target ({} samples, dt = {}) are on different grids",
            out.len(),
            out.dt(),
            target.len(),
            target.dt()
        )));
    }
    if (out.dt() - dt).abs() > 1e-12 * dt {
        return Err(Error::domain(format!("cost step {dt} differs from the signal step {}", out.dt())));
    }
    let residual: Vec<f64> = out
        .values()
        .iter()
        .zip(target.values())
        .map(|(o, f)| (o - f) * (o - f))
        .collect();
    let value = running_sum(&residual)[residual.len()] * dt;
    Ok(CostReport {
        value,
        per_step_residual: Signal::new(out.t0(), out.dt(), residual)?,
        tv_of_control: None,
    })
}

/// Prefix sums accumulated left to right, so that a restarted run that keeps
/// adding from `prefix[n]` reproduces the full-run sum bit for bit.
fn running_sum(xs: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(xs.len() + 1);
    out.push(acc);
    for &x in xs {
        acc += x;
        out.push(acc);
    }
    out
}

/// `sum_j phi_j (psi_{j+1} - psi_j)`: the integral of `phi` against the jumps
/// of the cell profile `psi`, with `phi_j` read at the interface between cells
/// `j` and `j + 1`.
pub fn measure_integral(phi: &[f64], psi: &[f64]) -> Result<f64> {
    if psi.len() != phi.len() + 1 {
        return Err(Error::domain(format!(
            "{} interface weights for {} cells; need one fewer weight than cells",
            phi.len(),
            psi.len()
        )));
    }
    Ok(phi.iter().zip(psi.windows(2)).map(|(w, d)| w * (d[1] - d[0])).sum())
}

/// Direction of the needle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NeedleSide {
    /// `dv > 0`; needs `v < v_max`.
    #[default]
    Plus,
    /// `dv < 0`; needs `v > v_min`.
    Minus,
}

impl NeedleSide {
    fn limit(self) -> Side {
        match self {
            NeedleSide::Plus => Side::Right,
            NeedleSide::Minus => Side::Left,
        }
    }
}

/// Target value used in the entrance term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetTerm {
    /// `f*` just before the exit time of the car entering right after the needle.
    #[default]
    ExitTime,
    /// `f*` at the needle itself.
    AtNeedle,
}

/// Weights of the density-jump integrals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntegralWeights {
    /// `v` and `f*` at the exit time of each jump.
    #[default]
    Exit,
    /// `v^2` and `f* v`: an extra factor `v` on both weights.
    Squared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct NeedleOptions {
    pub target_term: TargetTerm,
    pub weights: IntegralWeights,
}

/// Everything needed to differentiate the cost around one control: the run
/// with its density history, the LET map of the applied speed and the
/// running cost.
#[derive(Debug, Clone)]
pub struct Sensitivity<'a> {
    problem: &'a Problem,
    /// Control on the solver steps.
    control: Signal,
    trace: SimulationTrace,
    table: LetTable,
    prefix: Vec<f64>,
}

impl<'a> Sensitivity<'a> {
    pub fn new(problem: &'a Problem, v: &Signal) -> Result<Self> {
        let trace = problem.simulate_with_history(v)?;
        let control = trace.control();
        let table = build_let(&control, problem.params().road_length)?;
        let report = problem.cost_of_trace(&trace)?;
        let prefix = running_sum(report.per_step_residual.values());
        Ok(Sensitivity {
            problem,
            control,
            trace,
            table,
            prefix,
        })
    }

    pub fn problem(&self) -> &Problem {
        self.problem
    }

    pub fn cost(&self) -> f64 {
        self.prefix[self.prefix.len() - 1] * self.problem.dt()
    }

    pub fn trace(&self) -> &SimulationTrace {
        &self.trace
    }

    pub fn let_table(&self) -> &LetTable {
        &self.table
    }

    /// Speed applied on each solver step.
    pub fn control(&self) -> &Signal {
        &self.control
    }

    /// `[t0, tau(T))`, or `None` when no car crosses the road within the horizon.
    pub fn formula_domain(&self) -> Option<(f64, f64)> {
        Some((self.table.first_exit()?, self.table.tau_at_horizon()?))
    }

    /// True when the needle on step `n` lies inside [`Sensitivity::formula_domain`].
    pub fn in_formula_domain(&self, n: usize) -> bool {
        let tol = 1e-9 * self.problem.dt();
        let t = self.control.time(n);
        self.formula_domain()
            .is_some_and(|(t0, end)| t >= t0 - tol && t < end - tol)
    }

    fn check_admissible(&self, n: usize, side: NeedleSide) -> Result<f64> {
        let p = self.problem.params();
        let v = *self
            .control
            .values()
            .get(n)
            .ok_or_else(|| Error::domain(format!("step {n} beyond the horizon")))?;
        let ok = match side {
            NeedleSide::Plus => v < p.v_max,
            NeedleSide::Minus => v > p.v_min,
        };
        if !ok {
            return Err(Error::domain(format!(
                "needle {side:?} at step {n} leaves [{}, {}] from v = {v}",
                p.v_min, p.v_max
            )));
        }
        Ok(v)
    }

    /// Closed-form needle derivative at step `n`, per unit `dv * dt`.
    pub fn needle(&self, n: usize, side: NeedleSide, opts: &NeedleOptions) -> Result<f64> {
        let p = self.problem.params();
        let dt = self.problem.dt();
        let dx = self.problem.dx();
        let v_hat = self.check_admissible(n, side)?;
        if !self.in_formula_domain(n) {
            return Err(Error::domain(match self.formula_domain() {
                Some((t0, end)) => format!(
                    "needle at t = {} outside [{t0}, {end}) where the closed form holds",
                    self.control.time(n)
                ),
                None => "no car crosses the road within the horizon".to_string(),
            }));
        }
        let rho = &self
            .trace
            .history()
            .ok_or_else(|| Error::domain("density history was not recorded"))?[n];
        let target = self.problem.target();
        let inflow = self.problem.inflow().values()[n];
        let f_star = target.values()[n];
        let rho_exit = rho[rho.len() - 1];
        let direct = 2.0 * rho_exit * rho_exit * v_hat - 2.0 * rho_exit * f_star;

        // Position after the needle: cars at interface x leave at t' + s(x).
        let t_after = (n + 1) as f64 * dt;
        let lim = side.limit();
        let n_if = rho.len() - 1;
        let mut w_speed = Vec::with_capacity(n_if);
        let mut w_target = Vec::with_capacity(n_if);
        for k in 1..=n_if {
            let x = k as f64 * dx;
            // a jump still on the road at T has no effect on the cost
            let (wv, wf) = match self.table.exit_time(t_after, x) {
                Some(te) if te < self.table.horizon() => {
                    let v = self.control.limits(te, lim);
                    let f = target.limits(te, lim);
                    match opts.weights {
                        IntegralWeights::Exit => (v, f),
                        IntegralWeights::Squared => (v * v, f * v),
                    }
                }
                _ => (0.0, 0.0),
            };
            w_speed.push(wv);
            w_target.push(wf);
        }
        let rho_sq: Vec<f64> = rho.iter().map(|r| r * r).collect();
        let jumps_sq = -measure_integral(&w_speed, &rho_sq)?;
        let jumps = 2.0 * measure_integral(&w_target, rho)?;

        // When the entrance is supply-limited the accepted inflow follows the
        // speed limit and fills the gap the needle would otherwise open.
        let entrance = if inflow > v_hat * p.rho_cr {
            0.0
        } else {
            match self.table.tau_inv(t_after) {
                Some(te) if te < self.table.horizon() => {
                    let v_exit = self.control.left_limit(te);
                    let f_term = match opts.target_term {
                        TargetTerm::ExitTime => target.left_limit(te),
                        TargetTerm::AtNeedle => f_star,
                    };
                    2.0 * (inflow / v_hat) * (f_term - v_exit * inflow / v_hat)
                }
                _ => 0.0,
            }
        };
        Ok(direct + jumps_sq + jumps + entrance)
    }

    /// `(J(v + dv on steps) - J(v)) / (dv * dt * steps.len())`, from a restart
    /// at the stored state.
    pub fn fd(&self, steps: Range<usize>, dv: f64) -> Result<f64> {
        let n_steps = self.problem.n_steps();
        if steps.is_empty() || steps.end > n_steps {
            return Err(Error::domain(format!("step range {steps:?} outside 0..{n_steps}")));
        }
        if !(dv != 0.0 && dv.is_finite()) {
            return Err(Error::domain(format!("perturbation must be finite and nonzero, got {dv}")));
        }
        let p = self.problem.params();
        for m in steps.clone() {
            let v = self.control.values()[m] + dv;
            if !(v >= p.v_min && v <= p.v_max) {
                return Err(Error::domain(format!(
                    "perturbed speed {v} at step {m} leaves [{}, {}]",
                    p.v_min, p.v_max
                )));
            }
        }
        let start = steps.start;
        let history = self
            .trace
            .history()
            .ok_or_else(|| Error::domain("density history was not recorded"))?;
        let mut sim = Simulation::resume(
            p,
            self.problem.dx(),
            self.problem.dt(),
            n_steps,
            self.problem.inflow(),
            start,
            history[start].clone(),
            false,
        );
        let target = self.problem.target().values();
        let mut acc = self.prefix[start];
        for m in start..n_steps {
            let mut v = self.control.values()[m];
            if steps.contains(&m) {
                v += dv;
            }
            let out = sim.advance(v)?.outflow;
            let r = out - target[m];
            acc += r * r;
        }
        let dt = self.problem.dt();
        Ok((acc * dt - self.cost()) / (dv * dt * steps.len() as f64))
    }

    /// Both one-sided derivatives with respect to every control interval.
    pub fn gradient(&self, opts: &GradientOptions) -> Result<VariationVector> {
        let problem = self.problem;
        let p = problem.params();
        let entries: Vec<(Option<f64>, Option<f64>, bool)> = (0..problem.n_intervals())
            .into_par_iter()
            .map(|k| {
                let steps = problem.interval_steps(k);
                let v = self.control.values()[steps.start];
                let formula = opts.use_formula && steps.clone().all(|n| self.in_formula_domain(n));
                let side = |side: NeedleSide| -> Result<Option<f64>> {
                    let room = match side {
                        NeedleSide::Plus => p.v_max - v,
                        NeedleSide::Minus => v - p.v_min,
                    };
                    if room <= 0.0 {
                        return Ok(None);
                    }
                    if formula {
                        let mut sum = 0.0;
                        for n in steps.clone() {
                            sum += self.needle(n, side, &opts.needle)?;
                        }
                        Ok(Some(sum / steps.len() as f64))
                    } else {
                        let h = opts.fd_step.min(room);
                        let dv = if side == NeedleSide::Plus { h } else { -h };
                        self.fd(steps.clone(), dv).map(Some)
                    }
                };
                Ok((side(NeedleSide::Plus)?, side(NeedleSide::Minus)?, formula))
            })
            .collect::<Result<_>>()?;
        let times = (0..problem.n_intervals())
            .map(|k| k as f64 * problem.control_dt())
            .collect();
        let (right, left, from_formula) = entries.into_iter().fold(
            (Vec::new(), Vec::new(), Vec::new()),
            |(mut r, mut l, mut f), (a, b, c)| {
                r.push(a);
                l.push(b);
                f.push(c);
                (r, l, f)
            },
        );
        Ok(VariationVector {
            times,
            right,
            left,
            from_formula,
        })
    }
}

/// Closed-form needle derivative; see [`Sensitivity::needle`].
pub fn needle_variation(sens: &Sensitivity, n: usize, side: NeedleSide, opts: &NeedleOptions) -> Result<f64> {
    sens.needle(n, side, opts)
}

/// Finite-difference needle derivative on the single step `n`, with signed
/// perturbation `dv`.
pub fn fd_variation(sens: &Sensitivity, n: usize, dv: f64) -> Result<f64> {
    sens.fd(n..n + 1, dv)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientOptions {
    pub needle: NeedleOptions,
    /// Perturbation used where the closed form does not apply.
    pub fd_step: f64,
    /// When false every entry comes from finite differences.
    pub use_formula: bool,
}

impl Default for GradientOptions {
    fn default() -> Self {
        GradientOptions {
            needle: NeedleOptions::default(),
            fd_step: 1e-3,
            use_formula: true,
        }
    }
}

/// One-sided derivatives per control interval. `None` marks a side that
/// would leave the speed bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationVector {
    pub times: Vec<f64>,
    pub right: Vec<Option<f64>>,
    pub left: Vec<Option<f64>>,
    /// True where the entry came from the closed form.
    pub from_formula: Vec<bool>,
}

impl VariationVector {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Entry that moves the control downhill: the right derivative when
    /// raising the speed lowers the cost, else the left derivative when
    /// lowering it does, else zero.
    pub fn descent_direction(&self) -> Vec<f64> {
        self.right
            .iter()
            .zip(&self.left)
            .map(|(r, l)| match (r, l) {
                (Some(r), _) if *r < 0.0 => *r,
                (_, Some(l)) if *l > 0.0 => *l,
                _ => 0.0,
            })
            .collect()
    }

    /// Writes `t,left,right,fd`; `fd` is an optional reference column.
    pub fn write_csv<W: Write>(&self, w: W, fd: Option<&[Option<f64>]>) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["t", "left", "right", "fd"])?;
        let cell = |x: Option<f64>| x.map(fmt_full).unwrap_or_default();
        for i in 0..self.len() {
            let f = fd.and_then(|f| f.get(i).copied().flatten());
            out.write_record([fmt_full(self.times[i]), cell(self.left[i]), cell(self.right[i]), cell(f)])?;
        }
        out.flush()?;
        Ok(())
    }
}
