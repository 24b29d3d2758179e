//! Fokker–Planck evolution of the density of `dX = f(X, λ(t)) dt + √(2D) dW`
//! on a fixed interval with absorbing ends.
//!
//! Space: exponentially fitted (Scharfetter–Gummel) fluxes, which keep the
//! frozen-λ Boltzmann density an exact discrete equilibrium of the flux.
//! Time: Crank–Nicolson with the operator frozen at the substep midpoint.
//! Each reporting step is split into as many substeps as needed to keep the
//! explicit half nonnegative, so densities stay nonnegative.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{solve_tridiagonal, LinalgError};
use crate::model::{self, ModelError, ModelParams, RampParams, Trajectory};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FpeError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("stationary density cannot be normalised (integral {integral:e})")]
    DegenerateDensity { integral: f64 },
    #[error("linear solve failed: {0}")]
    LinearSolveFailed(#[from] LinalgError),
    #[error("density became negative ({value:e}) at t = {t}")]
    NegativeDensity { t: f64, value: f64 },
    #[error("density has zero mass")]
    ZeroMass,
    #[error("threshold {x} at t = {t} leaves the domain")]
    ThresholdOutsideDomain { t: f64, x: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Uniform grid; nodes `x_start + i h` for `i = 0..=n_cells`, of which the
/// two end nodes carry the boundary condition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Grid1D {
    pub x_start: f64,
    pub x_end: f64,
    pub n_cells: usize,
}

impl Default for Grid1D {
    fn default() -> Self {
        Self {
            x_start: -6.0,
            x_end: 2.0,
            n_cells: 2400,
        }
    }
}

impl Grid1D {
    pub fn new(x_start: f64, x_end: f64, n_cells: usize) -> Result<Self, FpeError> {
        let g = Self {
            x_start,
            x_end,
            n_cells,
        };
        g.validate()?;
        Ok(g)
    }

    /// Default spacing (`h = 1/300`) over `[x_start, x_end]`.
    pub fn with_default_spacing(x_start: f64, x_end: f64) -> Result<Self, FpeError> {
        let n = ((x_end - x_start) * 300.0).round() as usize;
        Self::new(x_start, x_end, n)
    }

    pub fn validate(&self) -> Result<(), FpeError> {
        if !(self.x_start.is_finite() && self.x_end.is_finite() && self.x_start < self.x_end) {
            return Err(FpeError::InvalidGrid(format!(
                "need x_start < x_end, got [{}, {}]",
                self.x_start, self.x_end
            )));
        }
        if self.n_cells < 16 {
            return Err(FpeError::InvalidGrid(format!(
                "n_cells must be at least 16, got {}",
                self.n_cells
            )));
        }
        Ok(())
    }

    pub fn h(&self) -> f64 {
        (self.x_end - self.x_start) / self.n_cells as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        if i == self.n_cells {
            self.x_end
        } else {
            self.x_start + self.h() * i as f64
        }
    }

    pub fn n_interior(&self) -> usize {
        self.n_cells - 1
    }

    /// Interior node coordinates (the unknowns).
    pub fn interior(&self) -> Vec<f64> {
        (1..self.n_cells).map(|i| self.node(i)).collect()
    }

    pub fn refined(&self) -> Self {
        Self {
            n_cells: self.n_cells * 2,
            ..*self
        }
    }
}

/// A density snapshot. `values` holds the interior nodes; the boundary
/// values are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    pub grid: Grid1D,
    pub t: f64,
    pub values: Vec<f64>,
    pub mass: f64,
}

impl DensityField {
    pub fn new(grid: Grid1D, t: f64, values: Vec<f64>) -> Result<Self, FpeError> {
        if values.len() != grid.n_interior() {
            return Err(FpeError::InvalidInput(format!(
                "expected {} interior values, got {}",
                grid.n_interior(),
                values.len()
            )));
        }
        let mass = integrate(&grid, &values);
        Ok(Self {
            grid,
            t,
            values,
            mass,
        })
    }

    pub fn zeros(grid: Grid1D, t: f64) -> Self {
        Self {
            grid,
            t,
            values: vec![0.0; grid.n_interior()],
            mass: 0.0,
        }
    }
}

/// Trapezoid rule with zero boundary values.
fn integrate(grid: &Grid1D, values: &[f64]) -> f64 {
    grid.h() * pairwise_sum(values)
}

pub(crate) fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 32 {
        v.iter().sum()
    } else {
        let (a, b) = v.split_at(v.len() / 2);
        pairwise_sum(a) + pairwise_sum(b)
    }
}

/// Per-step escape probabilities on the reporting grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EscapeSeries {
    pub times: Vec<f64>,
    pub p_esc: Vec<f64>,
    pub rate: Vec<f64>,
}

impl EscapeSeries {
    fn from_masses(times: Vec<f64>, masses: &[f64], dt: f64) -> Self {
        let mut p_esc = Vec::with_capacity(times.len());
        p_esc.push(0.0);
        for w in masses.windows(2) {
            let p = if w[0] > 0.0 { 1.0 - w[1] / w[0] } else { 0.0 };
            p_esc.push(p.clamp(0.0, 1.0));
        }
        let rate = p_esc.iter().map(|p| p / dt).collect();
        Self { times, p_esc, rate }
    }

    /// Time of the largest rate.
    pub fn peak_time(&self) -> f64 {
        let (k, _) = self
            .rate
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &r)| if r > acc.1 { (i, r) } else { acc });
        self.times[k]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    #[default]
    Absorbing,
    /// Zero flux through both ends.
    Reflecting,
}

/// `z / (e^z − 1)`, continuous at 0.
#[inline]
pub fn bernoulli(z: f64) -> f64 {
    if z.abs() < 1e-5 {
        1.0 - 0.5 * z + z * z / 12.0
    } else {
        z / z.exp_m1()
    }
}

/// Boltzmann density `∝ exp(−U(x, λ₀)/D)` on the well side of the barrier,
/// normalised to unit mass.
///
/// Beyond the barrier top `x = 1 − λ₀` the Boltzmann factor grows again, so
/// the density is cut there.
pub fn stationary_density(lam0: f64, diffusion: f64, grid: &Grid1D) -> Result<DensityField, FpeError> {
    grid.validate()?;
    if !(diffusion > 0.0) {
        return Err(FpeError::InvalidInput(format!("D must be positive, got {diffusion}")));
    }
    let well = model::stable_quasi_equilibrium(lam0);
    let barrier = model::unstable_quasi_equilibrium(lam0).min(grid.x_end);
    if !(well > grid.x_start && well < barrier) {
        return Err(FpeError::InvalidInput(format!(
            "well bottom {well} is not inside the grid"
        )));
    }
    let u_min = model::potential(well, lam0);
    let mut values: Vec<f64> = grid
        .interior()
        .iter()
        .map(|&x| {
            if x < barrier {
                (-(model::potential(x, lam0) - u_min) / diffusion).exp()
            } else {
                0.0
            }
        })
        .collect();
    let integral = integrate(grid, &values);
    if !(integral > 1e-300) || !integral.is_finite() {
        return Err(FpeError::DegenerateDensity { integral });
    }
    for v in &mut values {
        *v /= integral;
    }
    DensityField::new(*grid, f64::NAN, values).map(|mut d| {
        d.t = f64::NAN;
        d
    })
}

/// Mean and variance of the mass-normalised density.
pub fn moments(density: &DensityField) -> Result<(f64, f64), FpeError> {
    let xs = density.grid.interior();
    let total = pairwise_sum(&density.values);
    if !(total > 0.0) {
        return Err(FpeError::ZeroMass);
    }
    let first: Vec<f64> = xs.iter().zip(&density.values).map(|(x, p)| x * p).collect();
    let mean = pairwise_sum(&first) / total;
    let second: Vec<f64> = xs
        .iter()
        .zip(&density.values)
        .map(|(x, p)| (x - mean) * (x - mean) * p)
        .collect();
    Ok((mean, pairwise_sum(&second) / total))
}

/// Assembled operator and workspace for repeated steps on one grid.
#[derive(Debug, Clone)]
pub struct Propagator {
    grid: Grid1D,
    ramp: RampParams,
    diffusion: f64,
    boundary: Boundary,
    x: Vec<f64>,
    l_lo: Vec<f64>,
    l_di: Vec<f64>,
    l_up: Vec<f64>,
    i_lo: Vec<f64>,
    i_di: Vec<f64>,
    i_up: Vec<f64>,
    rhs: Vec<f64>,
    scratch: Vec<f64>,
    faces: Vec<(f64, f64)>,
    /// Substep factor applied to the explicit positivity bound.
    safety: f64,
}

impl Propagator {
    pub fn new(grid: Grid1D, params: &ModelParams, boundary: Boundary) -> Result<Self, FpeError> {
        grid.validate()?;
        params.ramp.validate()?;
        if !(params.diffusion > 0.0) {
            return Err(FpeError::InvalidInput(format!(
                "D must be positive, got {}",
                params.diffusion
            )));
        }
        let n = grid.n_interior();
        Ok(Self {
            grid,
            ramp: params.ramp,
            diffusion: params.diffusion,
            boundary,
            x: grid.interior(),
            l_lo: vec![0.0; n],
            l_di: vec![0.0; n],
            l_up: vec![0.0; n],
            i_lo: vec![0.0; n],
            i_di: vec![0.0; n],
            i_up: vec![0.0; n],
            rhs: vec![0.0; n],
            scratch: Vec::with_capacity(n),
            faces: Vec::with_capacity(n + 2),
            safety: 0.9,
        })
    }

    /// Scales the automatic substep (default 0.9 of the positivity bound).
    pub fn with_safety(mut self, safety: f64) -> Self {
        self.safety = safety;
        self
    }

    pub fn grid(&self) -> &Grid1D {
        &self.grid
    }

    /// Fills the tridiagonal generator `L` for a frozen `λ`.
    fn assemble(&mut self, lam: f64) {
        let h = self.grid.h();
        let d = self.diffusion;
        let k = d / (h * h);
        let nc = self.grid.n_cells;
        // Face f joins nodes f and f+1 and carries the flux
        // (D/h)[B(−w_f) P_f − B(w_f) P_{f+1}].
        self.faces.clear();
        let mut u_left = model::potential(self.grid.node(0), lam);
        for f in 0..nc {
            let u_right = model::potential(self.grid.node(f + 1), lam);
            let open = self.boundary == Boundary::Absorbing || (f != 0 && f != nc - 1);
            if !open {
                self.faces.push((0.0, 0.0));
                u_left = u_right;
                continue;
            }
            let w = (u_left - u_right) / d;
            self.faces.push((bernoulli(-w), bernoulli(w)));
            u_left = u_right;
        }
        // Unknown i is node i + 1, between faces i and i + 1.
        for i in 0..self.x.len() {
            let (left_out, left_in) = self.faces[i];
            let (right_out, right_in) = self.faces[i + 1];
            self.l_lo[i] = if i == 0 { 0.0 } else { k * left_out };
            self.l_up[i] = if i + 1 == self.x.len() { 0.0 } else { k * right_in };
            self.l_di[i] = -k * (right_out + left_in);
        }
    }

    /// Largest explicit-half stable substep for the operator at `λ`.
    fn max_substep(&mut self, lam: f64) -> f64 {
        self.assemble(lam);
        let m = self.l_di.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if m == 0.0 {
            f64::INFINITY
        } else {
            2.0 / m
        }
    }

    /// Number of equal substeps used for a step of length `dt` from `t`.
    pub fn substeps(&mut self, t: f64, dt: f64) -> usize {
        let l0 = self.ramp.lambda(t);
        let l1 = self.ramp.lambda(t + dt);
        let lm = self.ramp.lambda(t + 0.5 * dt);
        let limit = self.max_substep(l0).min(self.max_substep(l1)).min(self.max_substep(lm)) * self.safety;
        (dt / limit).ceil().max(1.0) as usize
    }

    /// One Crank–Nicolson step of length `dt` from `t`, applied to every
    /// field with the same matrices.
    pub fn cn_step(&mut self, fields: &mut [&mut [f64]], t: f64, dt: f64) -> Result<(), FpeError> {
        let lam = self.ramp.lambda(t + 0.5 * dt);
        self.assemble(lam);
        let a = 0.5 * dt;
        let n = self.x.len();
        for i in 0..n {
            self.i_lo[i] = -a * self.l_lo[i];
            self.i_di[i] = 1.0 - a * self.l_di[i];
            self.i_up[i] = -a * self.l_up[i];
        }
        for f in fields.iter_mut() {
            for i in 0..n {
                let mut v = (1.0 + a * self.l_di[i]) * f[i];
                if i > 0 {
                    v += a * self.l_lo[i] * f[i - 1];
                }
                if i + 1 < n {
                    v += a * self.l_up[i] * f[i + 1];
                }
                self.rhs[i] = v;
            }
            solve_tridiagonal(&self.i_lo, &self.i_di, &self.i_up, &mut self.rhs, &mut self.scratch)?;
            f.copy_from_slice(&self.rhs);
        }
        Ok(())
    }

    /// Advances all fields from `t` to `t + dt` in automatically chosen
    /// substeps. After each substep nodes at or above `cut(t)` are zeroed.
    pub fn advance(
        &mut self,
        fields: &mut [&mut [f64]],
        t: f64,
        dt: f64,
        cut: Option<&dyn Fn(f64) -> f64>,
    ) -> Result<(), FpeError> {
        let k = self.substeps(t, dt);
        let ds = dt / k as f64;
        for j in 0..k {
            let ts = t + ds * j as f64;
            self.cn_step(fields, ts, ds)?;
            if let Some(cut) = cut {
                let xc = cut(ts + ds);
                apply_cut(&self.x, self.grid.h(), xc, fields);
            }
        }
        Ok(())
    }
}

/// Absorbing condition at `xc` between nodes: everything at or above `xc`
/// is removed, and the last node below is capped by the linear profile that
/// vanishes at `xc`, so the removed mass varies continuously with `xc`.
fn apply_cut(x: &[f64], h: f64, xc: f64, fields: &mut [&mut [f64]]) {
    let k = x.partition_point(|&xi| xi < xc);
    for f in fields.iter_mut() {
        for v in f[k..].iter_mut() {
            *v = 0.0;
        }
        if k >= 2 {
            let delta = xc - x[k - 1];
            let cap = f[k - 2] * delta / (delta + h);
            if f[k - 1] > cap {
                f[k - 1] = cap;
            }
        }
    }
}

/// Clips roundoff negativity; anything below `-1e-12` relative to the
/// peak is a scheme failure.
fn clip_negative(values: &mut [f64], t: f64) -> Result<(), FpeError> {
    let peak = values.iter().fold(0.0f64, |a, v| a.max(*v));
    let floor = -1e-12 * peak.max(1.0);
    for v in values.iter_mut() {
        if *v < 0.0 {
            if *v < floor {
                return Err(FpeError::NegativeDensity { t, value: *v });
            }
            *v = 0.0;
        }
    }
    Ok(())
}

/// A single Crank–Nicolson step of length `dt_solver` with absorbing ends.
pub fn step(density: &DensityField, dt_solver: f64, params: &ModelParams) -> Result<DensityField, FpeError> {
    step_with(density, dt_solver, params, Boundary::Absorbing)
}

pub fn step_with(
    density: &DensityField,
    dt_solver: f64,
    params: &ModelParams,
    boundary: Boundary,
) -> Result<DensityField, FpeError> {
    if !(dt_solver > 0.0) {
        return Err(FpeError::InvalidInput(format!("dt must be positive, got {dt_solver}")));
    }
    let mut prop = Propagator::new(density.grid, params, boundary)?;
    let mut values = density.values.clone();
    prop.cn_step(&mut [&mut values], density.t, dt_solver)?;
    clip_negative(&mut values, density.t + dt_solver)?;
    let mut out = DensityField::new(density.grid, density.t + dt_solver, values)?;
    out.mass = out.mass.min(density.mass.max(out.mass));
    Ok(out)
}

/// Result of [`evolve`].
#[derive(Debug, Clone)]
pub struct Evolution {
    pub densities: Vec<DensityField>,
    pub escape: EscapeSeries,
}

impl Evolution {
    pub fn final_mass(&self) -> f64 {
        self.densities.last().map_or(0.0, |d| d.mass)
    }

    /// Fraction of the initial mass lost through the boundaries.
    pub fn escaped_fraction(&self) -> f64 {
        let m0 = self.densities[0].mass;
        1.0 - self.final_mass() / m0
    }
}

/// Evolves `initial` to `t_final`, recording every `record_dt`.
pub fn evolve(
    initial: &DensityField,
    t_final: f64,
    params: &ModelParams,
    record_dt: f64,
) -> Result<Evolution, FpeError> {
    evolve_with(initial, t_final, params, record_dt, Boundary::Absorbing, true)
}

/// [`evolve`] with a choice of boundary; `keep_densities = false` records
/// only the first and last snapshot.
pub fn evolve_with(
    initial: &DensityField,
    t_final: f64,
    params: &ModelParams,
    record_dt: f64,
    boundary: Boundary,
    keep_densities: bool,
) -> Result<Evolution, FpeError> {
    if !(initial.t < t_final) {
        return Err(FpeError::InvalidInput(format!(
            "initial time {} must precede t_final {t_final}",
            initial.t
        )));
    }
    if !(record_dt > 0.0) {
        return Err(FpeError::InvalidInput(format!("record_dt must be positive, got {record_dt}")));
    }
    let times = model::reporting_grid(initial.t, t_final, record_dt);
    let mut prop = Propagator::new(initial.grid, params, boundary)?;
    let mut values = initial.values.clone();
    let mut masses = Vec::with_capacity(times.len());
    masses.push(initial.mass);
    let mut densities = vec![initial.clone()];
    for w in times.windows(2) {
        prop.advance(&mut [&mut values], w[0], w[1] - w[0], None)?;
        clip_negative(&mut values, w[1])?;
        let d = DensityField::new(initial.grid, w[1], values.clone())?;
        masses.push(d.mass);
        if keep_densities || w[1] == t_final {
            densities.push(d);
        }
    }
    let dt = times.get(1).map_or(record_dt, |t1| t1 - times[0]);
    Ok(Evolution {
        densities,
        escape: EscapeSeries::from_masses(times, &masses, dt),
    })
}

/// Stationary density at `λ(t₀)` placed at `t₀`, the default initial state.
pub fn initial_density(params: &ModelParams, grid: &Grid1D) -> Result<DensityField, FpeError> {
    let lam0 = params.lambda(params.t0);
    let mut d = stationary_density(lam0, params.diffusion, grid)?;
    d.t = params.t0;
    Ok(d)
}

/// `x̃(t) = xᵘ(t) + y` along a deterministic reference trajectory.
#[derive(Debug, Clone)]
pub struct ThresholdCurve {
    pub reference: Trajectory,
    pub y: f64,
}

impl ThresholdCurve {
    pub fn new(reference: Trajectory, y: f64) -> Result<Self, FpeError> {
        if !(y > 0.0) {
            return Err(FpeError::InvalidInput(format!("threshold offset must be positive, got {y}")));
        }
        Ok(Self { reference, y })
    }

    /// Reference trajectory from `(x₀, t₀)` up to `t_final`.
    pub fn from_params(params: &ModelParams, t_final: f64, y: f64) -> Result<Self, FpeError> {
        let reference = model::deterministic_trajectory(params.x0, params.t0, t_final, params)?;
        Self::new(reference, y)
    }

    pub fn value_at(&self, t: f64) -> Option<f64> {
        self.reference.value_at(t).map(|x| x + self.y)
    }

    pub fn values(&self) -> Vec<f64> {
        self.reference.states.iter().map(|x| x + self.y).collect()
    }
}

/// Rate at which the surviving mass crosses the moving threshold.
///
/// The density is evolved from `initial` with all mass at or above `x̃(t)`
/// removed after every substep; the threshold must stay inside the domain
/// over `[initial.t, t_final]`.
pub fn threshold_crossing_rate(
    initial: &DensityField,
    threshold: &ThresholdCurve,
    t_final: f64,
    params: &ModelParams,
) -> Result<EscapeSeries, FpeError> {
    let grid = initial.grid;
    let times = model::reporting_grid(initial.t, t_final, params.dt);
    let x_of = |t: f64| -> Result<f64, FpeError> {
        let x = threshold
            .value_at(t)
            .ok_or_else(|| FpeError::InvalidInput(format!("threshold undefined at t = {t}")))?;
        if !(x > grid.x_start && x < grid.x_end) {
            return Err(FpeError::ThresholdOutsideDomain { t, x });
        }
        Ok(x)
    };
    for &t in &times {
        x_of(t)?;
    }
    let cut = |t: f64| threshold.value_at(t.min(threshold.reference.t_max())).unwrap_or(f64::INFINITY);
    let mut prop = Propagator::new(grid, params, Boundary::Absorbing)?;
    let mut values = initial.values.clone();
    apply_cut(&grid.interior(), grid.h(), x_of(times[0])?, &mut [&mut values]);
    let mut masses = Vec::with_capacity(times.len());
    masses.push(integrate(&grid, &values));
    for w in times.windows(2) {
        prop.advance(&mut [&mut values], w[0], w[1] - w[0], Some(&cut))?;
        clip_negative(&mut values, w[1])?;
        masses.push(integrate(&grid, &values));
    }
    let dt = times.get(1).map_or(params.dt, |t1| t1 - times[0]);
    Ok(EscapeSeries::from_masses(times, &masses, dt))
}

/// Crossing-rate matrix for several offsets `y`.
#[derive(Debug, Clone, Serialize)]
pub struct ThresholdSweep {
    pub times: Vec<f64>,
    pub y_values: Vec<f64>,
    /// `rates[k][n]`: rate for `y_values[k]` at `times[n]`.
    pub rates: Vec<Vec<f64>>,
}

impl ThresholdSweep {
    /// Mean rate over `[a, b]` for offset index `k`.
    pub fn mean_rate(&self, k: usize, a: f64, b: f64) -> f64 {
        let v: Vec<f64> = self
            .times
            .iter()
            .zip(&self.rates[k])
            .filter(|(t, _)| **t >= a && **t <= b)
            .map(|(_, r)| *r)
            .collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }

    /// Smallest swept `y` whose mean rate over the stationary window stays
    /// below `ratio` times its peak rate.
    pub fn critical_offset(&self, stationary: (f64, f64), ratio: f64) -> Option<f64> {
        (0..self.y_values.len())
            .find(|&k| {
                let peak = self.rates[k].iter().fold(0.0f64, |a, v| a.max(*v));
                self.mean_rate(k, stationary.0, stationary.1) <= ratio * peak
            })
            .map(|k| self.y_values[k])
    }
}

/// Runs [`threshold_crossing_rate`] for every `y` over `[t₀, t_final]` from
/// the stationary initial density.
pub fn threshold_sweep(
    y_values: &[f64],
    params: &ModelParams,
    grid: &Grid1D,
    t_final: f64,
) -> Result<ThresholdSweep, FpeError> {
    if y_values.is_empty() || y_values.windows(2).any(|w| !(w[0] < w[1])) || y_values[0] <= 0.0 {
        return Err(FpeError::InvalidInput("y values must be positive and ascending".into()));
    }
    let initial = initial_density(params, grid)?;
    let reference = model::deterministic_trajectory(params.x0, params.t0, t_final, params)?;
    let series: Vec<EscapeSeries> = y_values
        .par_iter()
        .map(|&y| {
            let curve = ThresholdCurve::new(reference.clone(), y)?;
            threshold_crossing_rate(&initial, &curve, t_final, params)
        })
        .collect::<Result<_, _>>()?;
    Ok(ThresholdSweep {
        times: series[0].times.clone(),
        y_values: y_values.to_vec(),
        rates: series.into_iter().map(|s| s.rate).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(eps: f64, d: f64) -> ModelParams {
        ModelParams::default().with_epsilon(eps).with_diffusion(d)
    }

    #[test]
    fn bernoulli_is_smooth_at_zero() {
        for z in [-1e-4f64, -1e-6, 0.0, 1e-6, 1e-4] {
            let direct: f64 = if z == 0.0 { 1.0 } else { z / f64::exp_m1(z) };
            assert!((bernoulli(z) - direct).abs() < 1e-12);
        }
        assert!((bernoulli(50.0) - 50.0 * (-50.0f64).exp()).abs() < 1e-30);
        assert!((bernoulli(-50.0) - 50.0).abs() < 1e-12);
    }

    #[test]
    fn stationary_density_peak_mass_and_variance() {
        let grid = Grid1D::default();
        let d = stationary_density(0.0, 0.008, &grid).unwrap();
        assert!((d.mass - 1.0).abs() < 1e-12);
        let (k, _) = d
            .values
            .iter()
            .enumerate()
            .fold((0, 0.0), |a, (i, &v)| if v > a.1 { (i, v) } else { a });
        assert!((grid.interior()[k] + 1.0).abs() <= grid.h());
        let (mean, var) = moments(&d).unwrap();
        assert!((mean + 1.0).abs() < 0.01, "mean {mean}");
        assert!((var - 0.004).abs() < 0.0004, "var {var}");
    }

    #[test]
    fn zero_density_stays_zero() {
        let grid = Grid1D::default();
        let z = DensityField::zeros(grid, 0.0);
        let s = step(&z, 0.01, &params(1.25, 0.008)).unwrap();
        assert!(s.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn boltzmann_is_a_discrete_equilibrium_of_the_flux() {
        // Frozen λ ≈ 0 far in the past; the full Boltzmann profile (not cut)
        // has zero face fluxes, so only the absorbing ends act on it.
        let p = ModelParams {
            t0: -60.0,
            ..params(1.25, 0.05)
        };
        let grid = Grid1D::new(-3.0, 0.5, 350).unwrap();
        let mut prop = Propagator::new(grid, &p, Boundary::Reflecting).unwrap();
        let mut v: Vec<f64> = grid
            .interior()
            .iter()
            .map(|&x| (-(model::potential(x, 0.0) + 2.0 / 3.0) / 0.05).exp())
            .collect();
        let v0 = v.clone();
        prop.cn_step(&mut [&mut v], -60.0, 0.01).unwrap();
        for (a, b) in v.iter().zip(&v0) {
            assert!((a - b).abs() < 1e-9 * b.max(1e-3), "{a} vs {b}");
        }
    }

    #[test]
    fn reflecting_boundaries_conserve_mass() {
        let p = ModelParams {
            t0: -60.0,
            ..params(1.25, 0.05)
        };
        let grid = Grid1D::new(-3.0, 0.5, 100).unwrap();
        let init = initial_density(&p, &grid).unwrap();
        let mut prop = Propagator::new(grid, &p, Boundary::Reflecting).unwrap();
        let mut v = init.values.clone();
        let mut t = p.t0;
        for _ in 0..10_000 {
            prop.cn_step(&mut [&mut v], t, 1e-3).unwrap();
            t += 1e-3;
        }
        let mass = integrate(&grid, &v);
        assert!((mass - 1.0).abs() < 1e-9, "mass {mass}");
    }

    #[test]
    fn delta_density_has_tiny_variance() {
        let grid = Grid1D::default();
        let mut v = vec![0.0; grid.n_interior()];
        v[300] = 1.0 / grid.h();
        let d = DensityField::new(grid, 0.0, v).unwrap();
        let (_, var) = moments(&d).unwrap();
        assert!(var < grid.h() * grid.h());
        assert!(matches!(moments(&DensityField::zeros(grid, 0.0)), Err(FpeError::ZeroMass)));
    }

    #[test]
    fn threshold_must_stay_inside_domain() {
        let p = params(1.25, 0.008);
        let grid = Grid1D::default();
        let init = initial_density(&p, &grid).unwrap();
        let curve = ThresholdCurve::from_params(&p, -9.0, 3.5).unwrap();
        assert!(matches!(
            threshold_crossing_rate(&init, &curve, -9.0, &p),
            Err(FpeError::ThresholdOutsideDomain { .. })
        ));
    }
}
