//! Fundamental diagram, piecewise-constant signals and density fields.
//!
//! The flux is the triangular (Newell-Daganzo) diagram scaled by the
//! time-varying speed limit `v`:
//!
//! ```text
//! f(rho, v) = rho * v                                     0 <= rho <= rho_cr
//!           = v * rho_cr * (rho_max - rho) / (rho_max - rho_cr)   rho_cr < rho <= rho_max
//! ```

use std::f64::consts::PI;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slack allowed on range checks so that round-off from a conservative
/// update does not trip a domain error.
pub(crate) const RANGE_SLACK: f64 = 1e-12;

/// Grid-point snapping tolerance, in units of the sampling step.
const GRID_SNAP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FluxParams {
    pub road_length: f64,
    pub rho_cr: f64,
    pub rho_max: f64,
    pub v_min: f64,
    pub v_max: f64,
}

impl FluxParams {
    pub fn new(road_length: f64, rho_cr: f64, rho_max: f64, v_min: f64, v_max: f64) -> Result<Self> {
        let p = FluxParams {
            road_length,
            rho_cr,
            rho_max,
            v_min,
            v_max,
        };
        p.validate()?;
        Ok(p)
    }

    /// L = 1, rho_cr = 0.5, rho_max = 1, v in [0.5, 1].
    pub fn standard() -> Self {
        FluxParams {
            road_length: 1.0,
            rho_cr: 0.5,
            rho_max: 1.0,
            v_min: 0.5,
            v_max: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all_finite = [self.road_length, self.rho_cr, self.rho_max, self.v_min, self.v_max]
            .iter()
            .all(|x| x.is_finite());
        if !all_finite {
            return Err(Error::config("flux parameters must be finite"));
        }
        if self.road_length <= 0.0 {
            return Err(Error::config(format!("road length must be positive, got {}", self.road_length)));
        }
        if !(0.0 < self.rho_cr && self.rho_cr < self.rho_max) {
            return Err(Error::config(format!(
                "need 0 < rho_cr < rho_max, got rho_cr = {}, rho_max = {}",
                self.rho_cr, self.rho_max
            )));
        }
        if !(0.0 < self.v_min && self.v_min <= self.v_max) {
            return Err(Error::config(format!(
                "need 0 < v_min <= v_max, got v_min = {}, v_max = {}",
                self.v_min, self.v_max
            )));
        }
        Ok(())
    }

    /// Slope magnitude of the congested branch relative to `v`.
    fn congested_slope(&self) -> f64 {
        self.rho_cr / (self.rho_max - self.rho_cr)
    }

    /// Largest characteristic speed over all admissible densities and speeds.
    pub fn max_wave_speed(&self) -> f64 {
        self.v_max * self.congested_slope().max(1.0)
    }

    /// Flux without range checks. Callers guarantee admissible arguments.
    #[inline]
    pub fn flux_value(&self, rho: f64, v: f64) -> f64 {
        if rho <= self.rho_cr {
            rho * v
        } else {
            v * self.congested_slope() * (self.rho_max - rho)
        }
    }

    /// Sending function: non-decreasing envelope of the flux.
    #[inline]
    pub fn demand(&self, rho: f64, v: f64) -> f64 {
        if rho <= self.rho_cr {
            rho * v
        } else {
            v * self.rho_cr
        }
    }

    /// Receiving function: non-increasing envelope of the flux.
    #[inline]
    pub fn supply(&self, rho: f64, v: f64) -> f64 {
        if rho <= self.rho_cr {
            v * self.rho_cr
        } else {
            self.flux_value(rho, v)
        }
    }

    pub(crate) fn check_density(&self, rho: f64) -> Result<()> {
        if !(rho >= -RANGE_SLACK && rho <= self.rho_max + RANGE_SLACK) {
            return Err(Error::domain(format!("density {rho} outside [0, {}]", self.rho_max)));
        }
        Ok(())
    }

    pub(crate) fn check_speed(&self, v: f64) -> Result<()> {
        if !(v >= self.v_min - RANGE_SLACK && v <= self.v_max + RANGE_SLACK) {
            return Err(Error::domain(format!(
                "speed {v} outside [{}, {}]",
                self.v_min, self.v_max
            )));
        }
        Ok(())
    }
}

/// Flux of the fundamental diagram at density `rho` under speed limit `v`.
pub fn flux(rho: f64, v: f64, p: &FluxParams) -> Result<f64> {
    p.check_density(rho)?;
    p.check_speed(v)?;
    Ok(p.flux_value(rho, v))
}

/// Clamp `x` into `[a, b]`.
pub fn projection(x: f64, a: f64, b: f64) -> Result<f64> {
    if !(a <= b) {
        return Err(Error::domain(format!("empty projection interval [{a}, {b}]")));
    }
    Ok(x.clamp(a, b))
}

/// Sum of absolute jumps between consecutive samples.
pub fn total_variation(s: &Signal) -> f64 {
    s.values.windows(2).map(|w| (w[1] - w[0]).abs()).sum()
}

/// Piecewise-constant time series: `values[i]` holds on `[t0 + i*dt, t0 + (i+1)*dt)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Signal {
    t0: f64,
    dt: f64,
    values: Vec<f64>,
}

impl Signal {
    pub fn new(t0: f64, dt: f64, values: Vec<f64>) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::domain(format!("signal step must be positive, got {dt}")));
        }
        if !t0.is_finite() {
            return Err(Error::domain("signal start time must be finite"));
        }
        if values.is_empty() {
            return Err(Error::domain("signal needs at least one sample"));
        }
        Ok(Signal { t0, dt, values })
    }

    pub fn constant(t0: f64, dt: f64, len: usize, value: f64) -> Result<Self> {
        Signal::new(t0, dt, vec![value; len])
    }

    /// Samples `f` at the left endpoint of every interval.
    pub fn from_fn(t0: f64, dt: f64, len: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        let values = (0..len).map(|i| f(t0 + i as f64 * dt)).collect();
        Signal::new(t0, dt, values)
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// End of the last interval.
    pub fn t_end(&self) -> f64 {
        self.time(self.values.len())
    }

    /// Left endpoint of interval `i`.
    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.time(i)).collect()
    }

    /// Position of `t` in units of `dt`, snapped onto grid points that are
    /// within round-off.
    fn grid_coordinate(&self, t: f64) -> f64 {
        let x = (t - self.t0) / self.dt;
        let k = x.round();
        if (x - k).abs() < GRID_SNAP {
            k
        } else {
            x
        }
    }

    /// Index of the interval containing `t` (right-continuous), clamped to the domain.
    pub fn index_at(&self, t: f64) -> usize {
        let x = self.grid_coordinate(t).floor();
        if x <= 0.0 {
            0
        } else {
            (x as usize).min(self.values.len() - 1)
        }
    }

    /// Right-continuous evaluation: the sample of the interval containing `t`.
    pub fn eval(&self, t: f64) -> f64 {
        self.values[self.index_at(t)]
    }

    /// Right limit, identical to [`Signal::eval`].
    pub fn right_limit(&self, t: f64) -> f64 {
        self.eval(t)
    }

    /// Left limit: the sample of the interval that ends at or contains `t`.
    pub fn left_limit(&self, t: f64) -> f64 {
        let x = self.grid_coordinate(t);
        let k = if x.fract() == 0.0 { x - 1.0 } else { x.floor() };
        if k <= 0.0 {
            self.values[0]
        } else {
            self.values[(k as usize).min(self.values.len() - 1)]
        }
    }

    /// Both one-sided limits at `t`.
    pub fn limits(&self, t: f64, side: Side) -> f64 {
        match side {
            Side::Right => self.right_limit(t),
            Side::Left => self.left_limit(t),
        }
    }

    pub fn total_variation(&self) -> f64 {
        total_variation(self)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Exact integral over the whole domain.
    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.dt
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Signal {
        Signal {
            t0: self.t0,
            dt: self.dt,
            values: self.values.iter().map(|&x| f(x)).collect(),
        }
    }

    /// True when both signals share start, step and length.
    pub fn same_grid(&self, other: &Signal) -> bool {
        self.values.len() == other.values.len()
            && (self.t0 - other.t0).abs() <= GRID_SNAP * self.dt
            && (self.dt - other.dt).abs() <= GRID_SNAP * self.dt
    }

    /// Resample onto a new uniform grid by right-continuous evaluation at the
    /// left endpoints of the new intervals.
    pub fn resample(&self, t0: f64, dt: f64, len: usize) -> Result<Signal> {
        Signal::from_fn(t0, dt, len, |t| self.eval(t))
    }

    /// L1 distance between two signals on the same grid.
    pub fn l1_distance(&self, other: &Signal) -> Result<f64> {
        if !self.same_grid(other) {
            return Err(Error::domain("L1 distance needs signals on the same grid"));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            * self.dt)
    }

    /// Writes `t,value` rows with a header.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["t", "value"])?;
        for (i, v) in self.values.iter().enumerate() {
            out.write_record([fmt_full(self.time(i)), fmt_full(*v)])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads `t,value` rows. Times must form a uniform grid.
    pub fn read_csv<R: Read>(r: R) -> Result<Signal> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        let mut ts = Vec::new();
        let mut vs = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            if rec.len() < 2 {
                return Err(Error::Parse {
                    line,
                    msg: "expected two columns `t,value`".into(),
                });
            }
            let parse = |s: &str| -> Result<f64> {
                s.parse::<f64>().map_err(|e| Error::Parse {
                    line,
                    msg: format!("`{s}`: {e}"),
                })
            };
            ts.push(parse(&rec[0])?);
            vs.push(parse(&rec[1])?);
        }
        if ts.is_empty() {
            return Err(Error::Parse {
                line: 1,
                msg: "signal file has no samples".into(),
            });
        }
        let dt = if ts.len() > 1 { ts[1] - ts[0] } else { 1.0 };
        if !(dt > 0.0) {
            return Err(Error::Parse {
                line: 3,
                msg: "sample times must increase".into(),
            });
        }
        for (i, t) in ts.iter().enumerate() {
            let expected = ts[0] + i as f64 * dt;
            if (t - expected).abs() > 1e-6 * dt.max(1.0) {
                return Err(Error::Parse {
                    line: i + 2,
                    msg: format!("non-uniform sample time {t}, expected {expected}"),
                });
            }
        }
        Signal::new(ts[0], dt, vs)
    }
}

/// Which one-sided limit of a piecewise-constant function to take.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
}

/// Analytic signal shapes that scenarios refer to by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "kebab-case")]
pub enum Preset {
    /// `value`
    Constant { value: f64 },
    /// `min(base + amp * sin(2 pi freq t), cap)`
    SinCapped { base: f64, amp: f64, freq: f64, cap: f64 },
    /// `|amp * sin(omega t - phase)|`
    AbsSin { amp: f64, omega: f64, phase: f64 },
}

impl Preset {
    pub fn value_at(&self, t: f64) -> f64 {
        match *self {
            Preset::Constant { value } => value,
            Preset::SinCapped { base, amp, freq, cap } => (base + amp * (2.0 * PI * freq * t).sin()).min(cap),
            Preset::AbsSin { amp, omega, phase } => (amp * (omega * t - phase).sin()).abs(),
        }
    }

    pub fn sample(&self, t0: f64, dt: f64, len: usize) -> Result<Signal> {
        Signal::from_fn(t0, dt, len, |t| self.value_at(t))
    }

    pub fn name(&self) -> &'static str {
        match self {
            Preset::Constant { .. } => "constant",
            Preset::SinCapped { .. } => "sin-capped",
            Preset::AbsSin { .. } => "abs-sin",
        }
    }
}

/// Cell-averaged densities on a uniform spatial grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    dx: f64,
    cells: Vec<f64>,
}

impl DensityField {
    pub fn new(dx: f64, cells: Vec<f64>, p: &FluxParams) -> Result<Self> {
        if !(dx > 0.0 && dx.is_finite()) {
            return Err(Error::domain(format!("cell width must be positive, got {dx}")));
        }
        if cells.is_empty() {
            return Err(Error::domain("density field needs at least one cell"));
        }
        for &rho in &cells {
            p.check_density(rho)?;
        }
        Ok(DensityField { dx, cells })
    }

    pub fn constant(n_cells: usize, dx: f64, rho: f64, p: &FluxParams) -> Result<Self> {
        DensityField::new(dx, vec![rho; n_cells], p)
    }

    /// Wraps already validated data (solver internals).
    pub(crate) fn from_raw(dx: f64, cells: Vec<f64>) -> Self {
        DensityField { dx, cells }
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn cells(&self) -> &[f64] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Density of the last (exit) cell.
    pub fn exit_density(&self) -> f64 {
        *self.cells.last().expect("non-empty")
    }

    pub fn mass(&self) -> f64 {
        self.cells.iter().sum::<f64>() * self.dx
    }

    pub fn max(&self) -> f64 {
        self.cells.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.cells.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Errors if any cell is congested (above `rho_cr`).
    pub fn check_free_flow(&self, p: &FluxParams) -> Result<()> {
        match self.cells.iter().position(|&r| r > p.rho_cr + RANGE_SLACK) {
            Some(j) => Err(Error::domain(format!(
                "cell {j} is congested: density {} > rho_cr = {}",
                self.cells[j], p.rho_cr
            ))),
            None => Ok(()),
        }
    }

    pub fn into_cells(self) -> Vec<f64> {
        self.cells
    }
}

/// Full-precision float formatting shared by every CSV writer (round-trips exactly).
pub(crate) fn fmt_full(x: f64) -> String {
    format!("{x:?}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn p() -> FluxParams {
        FluxParams::standard()
    }

    #[test]
    fn flux_examples() {
        assert_abs_diff_eq!(flux(0.4, 1.0, &p()).unwrap(), 0.4);
        assert_abs_diff_eq!(flux(1.0, 0.7, &p()).unwrap(), 0.0);
        assert_abs_diff_eq!(flux(0.75, 1.0, &p()).unwrap(), 0.25);
    }

    #[test]
    fn flux_is_continuous_at_critical_density() {
        let q = p();
        let below = q.flux_value(q.rho_cr - 1e-12, 0.8);
        let above = q.flux_value(q.rho_cr + 1e-12, 0.8);
        assert_abs_diff_eq!(below, above, epsilon = 1e-11);
        assert_abs_diff_eq!(q.flux_value(q.rho_cr, 0.8), 0.8 * q.rho_cr);
    }

    #[test]
    fn flux_rejects_out_of_range() {
        assert!(matches!(flux(1.2, 1.0, &p()), Err(Error::Domain(_))));
        assert!(matches!(flux(-0.1, 1.0, &p()), Err(Error::Domain(_))));
        assert!(matches!(flux(0.3, 0.2, &p()), Err(Error::Domain(_))));
        assert!(matches!(flux(0.3, 1.5, &p()), Err(Error::Domain(_))));
    }

    #[test]
    fn params_validation() {
        assert!(FluxParams::new(1.0, 0.5, 1.0, 0.5, 1.0).is_ok());
        assert!(FluxParams::new(1.0, 0.0, 1.0, 0.5, 1.0).is_err());
        assert!(FluxParams::new(1.0, 1.0, 1.0, 0.5, 1.0).is_err());
        assert!(FluxParams::new(1.0, 0.5, 1.0, 0.0, 1.0).is_err());
        assert!(FluxParams::new(1.0, 0.5, 1.0, 0.8, 0.7).is_err());
        assert!(FluxParams::new(0.0, 0.5, 1.0, 0.5, 1.0).is_err());
    }

    #[test]
    fn total_variation_examples() {
        let s = Signal::new(0.0, 1.0, vec![0.5, 0.5, 0.5]).unwrap();
        assert_eq!(total_variation(&s), 0.0);
        let s = Signal::new(0.0, 1.0, vec![1.0, 0.5, 1.0]).unwrap();
        assert_abs_diff_eq!(total_variation(&s), 1.0);
    }

    #[test]
    fn projection_examples() {
        assert_eq!(projection(1.5, 0.5, 1.0).unwrap(), 1.0);
        assert_eq!(projection(0.75, 0.5, 1.0).unwrap(), 0.75);
        assert_eq!(projection(0.25, 0.5, 1.0).unwrap(), 0.5);
        assert!(projection(0.3, 1.0, 0.5).is_err());
    }

    #[test]
    fn signal_limits() {
        let s = Signal::new(0.0, 0.5, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.eval(0.0), 1.0);
        assert_eq!(s.eval(0.25), 1.0);
        assert_eq!(s.eval(0.5), 2.0);
        assert_eq!(s.left_limit(0.5), 1.0);
        assert_eq!(s.left_limit(0.75), 2.0);
        assert_eq!(s.left_limit(0.0), 1.0);
        // grid points reached by accumulation still snap
        let t = 0.1 + 0.1 + 0.1 + 0.1 + 0.1;
        assert_eq!(s.eval(t), 2.0);
        assert_eq!(s.left_limit(t), 1.0);
        // clamped outside the domain
        assert_eq!(s.eval(-1.0), 1.0);
        assert_eq!(s.eval(10.0), 3.0);
        assert_eq!(s.t_end(), 1.5);
    }

    #[test]
    fn signal_rejects_bad_construction() {
        assert!(Signal::new(0.0, 0.0, vec![1.0]).is_err());
        assert!(Signal::new(0.0, 1.0, vec![]).is_err());
    }

    #[test]
    fn csv_roundtrip_and_errors() {
        let s = Signal::from_fn(0.0, 0.005, 50, |t| (t * 3.0).sin()).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let back = Signal::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.values(), s.values());
        assert!(back.same_grid(&s));

        let bad = "t,value\n0,1\n0.5,2\n2.0,3\n";
        assert!(matches!(Signal::read_csv(bad.as_bytes()), Err(Error::Parse { line: 4, .. })));
        let bad = "t,value\n0,abc\n";
        assert!(matches!(Signal::read_csv(bad.as_bytes()), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn presets() {
        let inflow = Preset::SinCapped {
            base: 0.3,
            amp: 0.3,
            freq: 1.0,
            cap: 0.5,
        };
        assert_abs_diff_eq!(inflow.value_at(0.0), 0.3);
        assert_abs_diff_eq!(inflow.value_at(0.25), 0.5);
        assert_abs_diff_eq!(inflow.value_at(0.75), 0.0, epsilon = 1e-15);
        let target = Preset::AbsSin {
            amp: 0.4,
            omega: PI,
            phase: 0.3,
        };
        assert_abs_diff_eq!(target.value_at(0.0), 0.4 * 0.3f64.sin());
    }

    #[test]
    fn density_field_checks() {
        let q = p();
        assert!(DensityField::new(0.1, vec![0.2, 1.1], &q).is_err());
        let f = DensityField::new(0.1, vec![0.2, 0.6], &q).unwrap();
        assert!(f.check_free_flow(&q).is_err());
        let f = DensityField::constant(10, 0.1, 0.4, &q).unwrap();
        assert!(f.check_free_flow(&q).is_ok());
        assert_abs_diff_eq!(f.mass(), 0.4, epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn flux_shape(rho in 0.0..=1.0f64, v in 0.5..=1.0f64, dv in 0.0..0.5f64) {
            let q = p();
            let f = q.flux_value(rho, v);
            prop_assert!(f >= 0.0 && f <= v * q.rho_cr + 1e-15);
            // monotone in v
            let v2 = (v + dv).min(q.v_max);
            prop_assert!(q.flux_value(rho, v2) >= f);
            // increasing then decreasing in rho
            let r2 = (rho + 1e-3).min(q.rho_max);
            if r2 <= q.rho_cr {
                prop_assert!(q.flux_value(r2, v) >= f);
            } else if rho >= q.rho_cr {
                prop_assert!(q.flux_value(r2, v) <= f);
            }
        }

        #[test]
        fn tv_invariant_under_refinement(vals in prop::collection::vec(0.5..1.0f64, 1..40), k in 1usize..5) {
            let s = Signal::new(0.0, 1.0, vals.clone()).unwrap();
            let refined: Vec<f64> = vals.iter().flat_map(|&x| std::iter::repeat_n(x, k)).collect();
            let r = Signal::new(0.0, 1.0 / k as f64, refined).unwrap();
            prop_assert!((s.total_variation() - r.total_variation()).abs() < 1e-12);
        }

        #[test]
        fn projection_idempotent(x in -5.0..5.0f64, a in -1.0..1.0f64, w in 0.0..2.0f64) {
            let b = a + w;
            let once = projection(x, a, b).unwrap();
            prop_assert_eq!(projection(once, a, b).unwrap(), once);
            prop_assert!(once >= a && once <= b);
        }
    }
}
