//! Explicit Godunov finite-volume solver for the road IBVP.
//!
//! Boundary treatment: the left interface carries the inflow in flux form,
//! `F_in = min(In(t^n), supply(rho_1))`; the right boundary copies the last cell
//! into a ghost cell, so `F_out = f(rho_J, v^n)`.
//!
//! The time step is fixed per run: `dt = cfl_safety * dx / (2 * max|f'|)`,
//! where the wave-speed bound is taken over every admissible speed limit.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{fmt_full, DensityField, FluxParams, Signal};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum InitialDensity {
    Constant(f64),
    Profile(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub n_cells: usize,
    pub t_end: f64,
    pub cfl_safety: f64,
    pub initial_density: InitialDensity,
}

impl SolverConfig {
    pub fn new(n_cells: usize, t_end: f64, cfl_safety: f64, initial_density: InitialDensity) -> Self {
        SolverConfig {
            n_cells,
            t_end,
            cfl_safety,
            initial_density,
        }
    }

    /// J = 100 cells, T = 15, full CFL budget, rho0 = 0.4.
    pub fn standard() -> Self {
        SolverConfig::new(100, 15.0, 1.0, InitialDensity::Constant(0.4))
    }

    pub fn with_cells(mut self, n_cells: usize) -> Self {
        self.n_cells = n_cells;
        self
    }

    pub fn validate(&self, p: &FluxParams) -> Result<()> {
        if self.n_cells < 2 {
            return Err(Error::config(format!("need at least 2 cells, got {}", self.n_cells)));
        }
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(Error::config(format!("horizon must be positive, got {}", self.t_end)));
        }
        if !(self.cfl_safety > 0.0 && self.cfl_safety <= 1.0) {
            return Err(Error::config(format!(
                "cfl_safety must lie in (0, 1], got {}",
                self.cfl_safety
            )));
        }
        match &self.initial_density {
            InitialDensity::Constant(rho) => p.check_density(*rho).map_err(|e| Error::config(e.to_string()))?,
            InitialDensity::Profile(cells) => {
                if cells.len() != self.n_cells {
                    return Err(Error::config(format!(
                        "initial profile has {} cells, solver has {}",
                        cells.len(),
                        self.n_cells
                    )));
                }
                for &rho in cells {
                    p.check_density(rho).map_err(|e| Error::config(e.to_string()))?;
                }
            }
        }
        Ok(())
    }

    pub fn dx(&self, p: &FluxParams) -> f64 {
        p.road_length / self.n_cells as f64
    }

    pub fn dt(&self, p: &FluxParams) -> f64 {
        self.cfl_safety * self.dx(p) / (2.0 * p.max_wave_speed())
    }

    pub fn n_steps(&self, p: &FluxParams) -> usize {
        (self.t_end / self.dt(p) - 1e-9).ceil() as usize
    }

    pub fn initial_field(&self, p: &FluxParams) -> Result<DensityField> {
        let dx = self.dx(p);
        match &self.initial_density {
            InitialDensity::Constant(rho) => DensityField::constant(self.n_cells, dx, *rho, p),
            InitialDensity::Profile(cells) => DensityField::new(dx, cells.clone(), p),
        }
    }

    /// Density at the road exit at t = 0.
    pub fn initial_exit_density(&self) -> f64 {
        match &self.initial_density {
            InitialDensity::Constant(rho) => *rho,
            InitialDensity::Profile(cells) => *cells.last().unwrap_or(&0.0),
        }
    }
}

/// Godunov interface flux for the Riemann problem `(rho_l, rho_r)`.
///
/// For the unimodal diagram the min/max over the state interval reduces to
/// `min(demand(rho_l), supply(rho_r))`.
pub fn godunov_flux(rho_left: f64, rho_right: f64, v: f64, p: &FluxParams) -> Result<f64> {
    p.check_density(rho_left)?;
    p.check_density(rho_right)?;
    p.check_speed(v)?;
    Ok(interface_flux(rho_left, rho_right, v, p))
}

#[inline]
fn interface_flux(rho_left: f64, rho_right: f64, v: f64, p: &FluxParams) -> f64 {
    p.demand(rho_left, v).min(p.supply(rho_right, v))
}

/// Boundary fluxes of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepFluxes {
    /// Flux accepted through the left boundary.
    pub inflow: f64,
    /// Flux leaving through the right boundary.
    pub outflow: f64,
}

/// Advances `rho` by one step in place. `fluxes` is scratch of length `rho.len() + 1`.
fn advance_cells(rho: &mut [f64], fluxes: &mut [f64], v: f64, inflow: f64, dt_over_dx: f64, p: &FluxParams) -> StepFluxes {
    let n = rho.len();
    fluxes[0] = inflow.min(p.supply(rho[0], v));
    for j in 1..n {
        fluxes[j] = interface_flux(rho[j - 1], rho[j], v, p);
    }
    fluxes[n] = p.flux_value(rho[n - 1], v);
    for j in 0..n {
        rho[j] -= dt_over_dx * (fluxes[j + 1] - fluxes[j]);
    }
    StepFluxes {
        inflow: fluxes[0],
        outflow: fluxes[n],
    }
}

fn check_cfl(dt: f64, dx: f64, v: f64, field: &[f64], p: &FluxParams) -> Result<()> {
    let slope = p.rho_cr / (p.rho_max - p.rho_cr);
    let speed = field
        .iter()
        .map(|&r| {
            if r < p.rho_cr {
                v
            } else if r > p.rho_cr {
                v * slope
            } else {
                v * slope.max(1.0)
            }
        })
        .fold(0.0, f64::max);
    if dt * speed > 0.5 * dx * (1.0 + 1e-12) {
        return Err(Error::config(format!(
            "CFL violated: dt * max|f'| = {} > dx / 2 = {}",
            dt * speed,
            0.5 * dx
        )));
    }
    Ok(())
}

/// One conservative Godunov step.
pub fn step(field: &DensityField, v: f64, inflow: f64, dt: f64, p: &FluxParams) -> Result<DensityField> {
    p.check_speed(v)?;
    if !(inflow >= 0.0 && inflow.is_finite()) {
        return Err(Error::domain(format!("inflow must be non-negative, got {inflow}")));
    }
    if !(dt > 0.0) {
        return Err(Error::config(format!("time step must be positive, got {dt}")));
    }
    check_cfl(dt, field.dx(), v, field.cells(), p)?;
    let mut rho = field.cells().to_vec();
    let mut fluxes = vec![0.0; rho.len() + 1];
    advance_cells(&mut rho, &mut fluxes, v, inflow, dt / field.dx(), p);
    if let Some(j) = rho.iter().position(|r| !r.is_finite()) {
        return Err(Error::Numerical {
            step: 0,
            msg: format!("non-finite density in cell {j}"),
        });
    }
    Ok(DensityField::from_raw(field.dx(), rho))
}

/// Incremental simulation: the caller supplies the speed limit one step at a
/// time. Open-loop runs go through [`simulate`]; the closed-loop
/// instantaneous policy drives this directly.
#[derive(Debug, Clone)]
pub struct Simulation<'a> {
    p: FluxParams,
    dx: f64,
    dt: f64,
    n_steps: usize,
    inflow: &'a Signal,
    rho: Vec<f64>,
    fluxes: Vec<f64>,
    step: usize,
    trace: SimulationTrace,
}

impl<'a> Simulation<'a> {
    pub fn new(cfg: &SolverConfig, inflow: &'a Signal, p: &FluxParams, record_history: bool) -> Result<Self> {
        p.validate()?;
        cfg.validate(p)?;
        let field = cfg.initial_field(p)?;
        Ok(Self::resume(
            p,
            cfg.dx(p),
            cfg.dt(p),
            cfg.n_steps(p),
            inflow,
            0,
            field.into_cells(),
            record_history,
        ))
    }

    /// Restart from a known state at step `start`. The trace then covers
    /// steps `start..n_steps` only.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn resume(
        p: &FluxParams,
        dx: f64,
        dt: f64,
        n_steps: usize,
        inflow: &'a Signal,
        start: usize,
        state: Vec<f64>,
        record_history: bool,
    ) -> Self {
        let remaining = n_steps.saturating_sub(start);
        let mass = state.iter().sum::<f64>() * dx;
        let mut trace = SimulationTrace {
            dt,
            dx,
            start_step: start,
            outflow: Vec::with_capacity(remaining),
            exit_density: Vec::with_capacity(remaining),
            control: Vec::with_capacity(remaining),
            inflow_flux: Vec::with_capacity(remaining),
            mass: Vec::with_capacity(remaining + 1),
            history: record_history.then(|| Vec::with_capacity(remaining + 1)),
            final_state: Vec::new(),
        };
        trace.mass.push(mass);
        if let Some(h) = trace.history.as_mut() {
            h.push(state.clone());
        }
        let n = state.len();
        Simulation {
            p: *p,
            dx,
            dt,
            n_steps,
            inflow,
            rho: state,
            fluxes: vec![0.0; n + 1],
            step: start,
            trace,
        }
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Index of the next step to take.
    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn time(&self) -> f64 {
        self.step as f64 * self.dt
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.n_steps
    }

    pub fn state(&self) -> &[f64] {
        &self.rho
    }

    pub fn exit_density(&self) -> f64 {
        self.rho[self.rho.len() - 1]
    }

    /// Takes one step under speed limit `v` on `[t^n, t^{n+1})`.
    pub fn advance(&mut self, v: f64) -> Result<StepFluxes> {
        if self.is_finished() {
            return Err(Error::domain("simulation horizon already reached"));
        }
        self.p.check_speed(v).map_err(|e| Error::Numerical {
            step: self.step,
            msg: e.to_string(),
        })?;
        let inflow = self.inflow.eval(self.time());
        if !(inflow >= 0.0 && inflow.is_finite()) {
            return Err(Error::Numerical {
                step: self.step,
                msg: format!("inflow sample {inflow} is not a non-negative number"),
            });
        }
        let exit_density = self.exit_density();
        let fl = advance_cells(&mut self.rho, &mut self.fluxes, v, inflow, self.dt / self.dx, &self.p);
        let mass = self.rho.iter().sum::<f64>() * self.dx;
        if !mass.is_finite() {
            let j = self.rho.iter().position(|r| !r.is_finite()).unwrap_or(0);
            return Err(Error::Numerical {
                step: self.step,
                msg: format!("non-finite density in cell {j}"),
            });
        }
        let t = &mut self.trace;
        t.outflow.push(fl.outflow);
        t.exit_density.push(exit_density);
        t.control.push(v);
        t.inflow_flux.push(fl.inflow);
        t.mass.push(mass);
        if let Some(h) = t.history.as_mut() {
            h.push(self.rho.clone());
        }
        self.step += 1;
        Ok(fl)
    }

    pub fn finish(mut self) -> SimulationTrace {
        self.trace.final_state = self.rho;
        self.trace
    }
}

/// Runs the solver over the full horizon with the open-loop control `v`,
/// sampled at the left endpoint of every step.
pub fn simulate(cfg: &SolverConfig, v: &Signal, inflow: &Signal, p: &FluxParams) -> Result<SimulationTrace> {
    simulate_with(cfg, v, inflow, p, false)
}

/// As [`simulate`], optionally keeping every density snapshot.
pub fn simulate_with(
    cfg: &SolverConfig,
    v: &Signal,
    inflow: &Signal,
    p: &FluxParams,
    record_history: bool,
) -> Result<SimulationTrace> {
    let mut sim = Simulation::new(cfg, inflow, p, record_history)?;
    while !sim.is_finished() {
        let vn = v.eval(sim.time());
        sim.advance(vn)?;
    }
    Ok(sim.finish())
}

/// Per-step record of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationTrace {
    dt: f64,
    dx: f64,
    start_step: usize,
    outflow: Vec<f64>,
    exit_density: Vec<f64>,
    control: Vec<f64>,
    inflow_flux: Vec<f64>,
    /// Total mass before every step and after the last one.
    mass: Vec<f64>,
    history: Option<Vec<Vec<f64>>>,
    final_state: Vec<f64>,
}

impl SimulationTrace {
    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn len(&self) -> usize {
        self.outflow.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outflow.is_empty()
    }

    pub fn start_time(&self) -> f64 {
        self.start_step as f64 * self.dt
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|i| (self.start_step + i) as f64 * self.dt).collect()
    }

    fn signal(&self, values: &[f64]) -> Signal {
        Signal::new(self.start_time(), self.dt, values.to_vec()).expect("trace has at least one step")
    }

    /// `Out(t^n) = f(rho_J^n, v^n)`.
    pub fn outflow(&self) -> Signal {
        self.signal(&self.outflow)
    }

    pub fn outflow_values(&self) -> &[f64] {
        &self.outflow
    }

    /// Exit-cell density at the start of every step.
    pub fn exit_density(&self) -> Signal {
        self.signal(&self.exit_density)
    }

    pub fn exit_density_values(&self) -> &[f64] {
        &self.exit_density
    }

    /// Speed limit applied on every step.
    pub fn control(&self) -> Signal {
        self.signal(&self.control)
    }

    pub fn control_values(&self) -> &[f64] {
        &self.control
    }

    /// Flux accepted through the left boundary on every step.
    pub fn inflow_flux(&self) -> Signal {
        self.signal(&self.inflow_flux)
    }

    pub fn inflow_flux_values(&self) -> &[f64] {
        &self.inflow_flux
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    /// `(M^{n+1} - M^n) - dt (F_in - F_out)` for every step.
    pub fn mass_residuals(&self) -> Vec<f64> {
        (0..self.len())
            .map(|n| (self.mass[n + 1] - self.mass[n]) - self.dt * (self.inflow_flux[n] - self.outflow[n]))
            .collect()
    }

    /// Density snapshots `rho^0 ..= rho^N`, when recorded.
    pub fn history(&self) -> Option<&[Vec<f64>]> {
        self.history.as_deref()
    }

    /// Density at the start of step `n` (absolute index), when recorded.
    pub fn state_at(&self, n: usize) -> Option<DensityField> {
        let h = self.history.as_ref()?;
        let row = h.get(n.checked_sub(self.start_step)?)?;
        Some(DensityField::from_raw(self.dx, row.clone()))
    }

    pub fn final_state(&self) -> &[f64] {
        &self.final_state
    }

    /// Largest density seen anywhere, when history is recorded.
    pub fn max_density(&self) -> Option<f64> {
        self.history
            .as_ref()
            .map(|h| h.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max))
    }

    pub fn min_density(&self) -> Option<f64> {
        self.history
            .as_ref()
            .map(|h| h.iter().flatten().copied().fold(f64::INFINITY, f64::min))
    }

    /// CSV with columns `t,out,exit_density,v`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["t", "out", "exit_density", "v"])?;
        for (i, t) in self.times().into_iter().enumerate() {
            out.write_record([
                fmt_full(t),
                fmt_full(self.outflow[i]),
                fmt_full(self.exit_density[i]),
                fmt_full(self.control[i]),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Density history as a CSV matrix, one row per time level.
    pub fn write_history_csv<W: Write>(&self, w: W) -> Result<()> {
        let h = self
            .history
            .as_ref()
            .ok_or_else(|| Error::domain("trace was recorded without density history"))?;
        let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        for row in h {
            out.write_record(row.iter().map(|x| fmt_full(*x)))?;
        }
        out.flush()?;
        Ok(())
    }
}
