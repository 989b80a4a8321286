//! A tracking problem: road, solver grid, inflow, target and control grid.

use crate::cost::{cost, CostReport};
use crate::error::{Error, Result};
use crate::model::{FluxParams, Preset, Signal};
use crate::solver::{simulate_with, InitialDensity, SimulationTrace, SolverConfig};

/// Where a time-dependent input comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    Preset(Preset),
    /// Samples on their own grid, evaluated right-continuously.
    Samples(Signal),
}

impl Source {
    pub fn value_at(&self, t: f64) -> f64 {
        match self {
            Source::Preset(p) => p.value_at(t),
            Source::Samples(s) => s.eval(t),
        }
    }

    fn sample(&self, dt: f64, len: usize) -> Result<Signal> {
        Signal::from_fn(0.0, dt, len, |t| self.value_at(t))
    }
}

/// Optimal control problem on a single road.
///
/// Inflow and target are sampled once at the left endpoint of every solver
/// step, which is how the solver and the cost read them.
#[derive(Debug, Clone)]
pub struct Problem {
    params: FluxParams,
    solver: SolverConfig,
    inflow_source: Source,
    target_source: Source,
    control_steps: usize,
    inflow: Signal,
    target: Signal,
}

/// Simulation and cost of one control.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub trace: SimulationTrace,
    pub cost: CostReport,
}

impl Problem {
    pub fn new(params: FluxParams, solver: SolverConfig, inflow: Source, target: Source) -> Result<Self> {
        params.validate().map_err(|e| Error::config(e.to_string()))?;
        solver.validate(&params)?;
        let dt = solver.dt(&params);
        let n = solver.n_steps(&params);
        let inflow_signal = inflow.sample(dt, n)?;
        let target_signal = target.sample(dt, n)?;
        for (name, s) in [("inflow", &inflow_signal), ("target", &target_signal)] {
            if let Some(i) = s.values().iter().position(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(Error::config(format!(
                    "{name} must be non-negative, got {} at t = {}",
                    s.values()[i],
                    s.time(i)
                )));
            }
        }
        Ok(Problem {
            params,
            solver,
            inflow_source: inflow,
            target_source: target,
            control_steps: 1,
            inflow: inflow_signal,
            target: target_signal,
        })
    }

    /// Road and horizon shared by the two benchmark tests.
    fn benchmark(target: Preset) -> Result<Self> {
        Problem::new(
            FluxParams::standard(),
            SolverConfig::standard(),
            Source::Preset(Preset::SinCapped {
                base: 0.3,
                amp: 0.3,
                freq: 1.0,
                cap: 0.5,
            }),
            Source::Preset(target),
        )
    }

    /// Sinusoidal capped inflow, constant target 0.3.
    pub fn test1() -> Result<Self> {
        Problem::benchmark(Preset::Constant { value: 0.3 })
    }

    /// Sinusoidal capped inflow, target `|0.4 sin(pi t - 0.3)|`.
    pub fn test2() -> Result<Self> {
        Problem::benchmark(Preset::AbsSin {
            amp: 0.4,
            omega: std::f64::consts::PI,
            phase: 0.3,
        })
    }

    /// Constant inflow equal to the target with the matching steady density,
    /// so the midpoint speed tracks the target exactly.
    pub fn trivial() -> Result<Self> {
        let p = FluxParams::standard();
        let f = 0.3;
        let v = 0.5 * (p.v_min + p.v_max);
        let mut solver = SolverConfig::standard();
        solver.initial_density = InitialDensity::Constant(f / v);
        Problem::new(
            p,
            solver,
            Source::Preset(Preset::Constant { value: f }),
            Source::Preset(Preset::Constant { value: f }),
        )
    }

    /// Same problem on a grid with `n_cells` cells. A constant initial density
    /// carries over; a profile must be supplied again.
    pub fn with_cells(&self, n_cells: usize) -> Result<Self> {
        let mut solver = self.solver.clone();
        solver.n_cells = n_cells;
        if let InitialDensity::Profile(cells) = &solver.initial_density {
            if cells.len() != n_cells {
                return Err(Error::config("cannot change the cell count of a profiled initial density"));
            }
        }
        Problem::new(
            self.params,
            solver,
            self.inflow_source.clone(),
            self.target_source.clone(),
        )?
        .with_control_steps(self.control_steps)
    }

    pub fn with_horizon(&self, t_end: f64) -> Result<Self> {
        let mut solver = self.solver.clone();
        solver.t_end = t_end;
        Problem::new(
            self.params,
            solver,
            self.inflow_source.clone(),
            self.target_source.clone(),
        )?
        .with_control_steps(self.control_steps)
    }

    /// Holds every control value for `steps` solver steps.
    pub fn with_control_steps(mut self, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("control interval must span at least one solver step"));
        }
        self.control_steps = steps;
        Ok(self)
    }

    pub fn params(&self) -> &FluxParams {
        &self.params
    }

    pub fn solver(&self) -> &SolverConfig {
        &self.solver
    }

    pub fn inflow_source(&self) -> &Source {
        &self.inflow_source
    }

    pub fn target_source(&self) -> &Source {
        &self.target_source
    }

    /// Inflow sampled on the solver steps.
    pub fn inflow(&self) -> &Signal {
        &self.inflow
    }

    /// Target sampled on the solver steps.
    pub fn target(&self) -> &Signal {
        &self.target
    }

    pub fn dt(&self) -> f64 {
        self.solver.dt(&self.params)
    }

    pub fn dx(&self) -> f64 {
        self.solver.dx(&self.params)
    }

    pub fn n_steps(&self) -> usize {
        self.inflow.len()
    }

    pub fn horizon(&self) -> f64 {
        self.inflow.t_end()
    }

    pub fn control_steps(&self) -> usize {
        self.control_steps
    }

    pub fn control_dt(&self) -> f64 {
        self.control_steps as f64 * self.dt()
    }

    pub fn n_intervals(&self) -> usize {
        self.n_steps().div_ceil(self.control_steps)
    }

    /// Solver steps covered by control interval `k`.
    pub fn interval_steps(&self, k: usize) -> std::ops::Range<usize> {
        let start = k * self.control_steps;
        start..((k + 1) * self.control_steps).min(self.n_steps())
    }

    /// Control with the given values on the control grid.
    pub fn control(&self, values: Vec<f64>) -> Result<Signal> {
        let s = Signal::new(0.0, self.control_dt(), values)?;
        self.check_control(&s)?;
        Ok(s)
    }

    pub fn constant_control(&self, v: f64) -> Result<Signal> {
        self.control(vec![v; self.n_intervals()])
    }

    /// The control grid must match and every value must be admissible.
    pub fn check_control(&self, v: &Signal) -> Result<()> {
        let grid = Signal::constant(0.0, self.control_dt(), self.n_intervals(), 0.0)?;
        if !grid.same_grid(v) {
            return Err(Error::domain(format!(
                "control grid (t0 = {}, dt = {}, {} intervals) does not match the problem grid (dt = {}, {} intervals)",
                v.t0(),
                v.dt(),
                v.len(),
                self.control_dt(),
                self.n_intervals()
            )));
        }
        for (i, &x) in v.values().iter().enumerate() {
            self.params.check_speed(x).map_err(|e| Error::domain(format!("control interval {i}: {e}")))?;
        }
        Ok(())
    }

    pub fn simulate(&self, v: &Signal) -> Result<SimulationTrace> {
        self.check_control(v)?;
        simulate_with(&self.solver, v, &self.inflow, &self.params, false)
    }

    /// Simulation keeping every density snapshot, as the needle formula needs.
    pub fn simulate_with_history(&self, v: &Signal) -> Result<SimulationTrace> {
        self.check_control(v)?;
        simulate_with(&self.solver, v, &self.inflow, &self.params, true)
    }

    pub fn cost_of_trace(&self, trace: &SimulationTrace) -> Result<CostReport> {
        let mut report = cost(&trace.outflow(), &self.target, self.dt())?;
        report.tv_of_control = Some(trace.control().total_variation());
        Ok(report)
    }

    pub fn evaluate(&self, v: &Signal) -> Result<Evaluation> {
        let trace = self.simulate(v)?;
        let mut cost = self.cost_of_trace(&trace)?;
        cost.tv_of_control = Some(v.total_variation());
        Ok(Evaluation { trace, cost })
    }

    pub fn cost_of(&self, v: &Signal) -> Result<f64> {
        Ok(self.evaluate(v)?.cost.value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn benchmark_grid() {
        let p = Problem::test1().unwrap();
        assert_eq!(p.n_steps(), 3000);
        assert!((p.dt() - 0.005).abs() < 1e-15);
        assert_eq!(p.n_intervals(), 3000);
        assert!((p.inflow().values()[100] - 0.3).abs() < 1e-12);
        assert_eq!(p.inflow().values()[50], 0.5);
        assert_eq!(p.inflow().max(), 0.5);
    }

    #[test]
    fn coarse_control_grid() {
        let p = Problem::test1().unwrap().with_control_steps(7).unwrap();
        assert_eq!(p.n_intervals(), 429);
        assert_eq!(p.interval_steps(428), 2996..3000);
        let v = p.constant_control(0.8).unwrap();
        let trace = p.simulate(&v).unwrap();
        assert_eq!(trace.len(), 3000);
    }

    #[test]
    fn control_checks() {
        let p = Problem::test1().unwrap();
        assert!(p.constant_control(1.2).is_err());
        let wrong = Signal::constant(0.0, 0.01, 1500, 0.7).unwrap();
        assert!(matches!(p.simulate(&wrong), Err(Error::Domain(_))));
    }

    #[test]
    fn trivial_problem_is_exact() {
        let p = Problem::trivial().unwrap();
        let v = p.constant_control(0.75).unwrap();
        assert!(p.cost_of(&v).unwrap() < 1e-25);
    }

    #[test]
    fn negative_inflow_rejected() {
        let r = Problem::new(
            FluxParams::standard(),
            SolverConfig::standard(),
            Source::Preset(Preset::Constant { value: -0.1 }),
            Source::Preset(Preset::Constant { value: 0.3 }),
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
