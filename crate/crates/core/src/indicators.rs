//! Ensemble early-warning indicators computed from the density evolution.
//!
//! The lag-1 covariance is obtained without sampling: alongside `P` the
//! fields `(x − c)P` and `(x − c)²P` are propagated over one reporting step
//! with the same operator, which gives the joint moments of
//! `(X_{n−1}, X_n)` over the paths that survive to `t_n`.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::fokker_planck::{self, pairwise_sum, Boundary, FpeError, Grid1D, Propagator};
use crate::model::{self, ModelParams};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IndicatorError {
    #[error(transparent)]
    Fpe(#[from] FpeError),
    #[error("variance vanished at t = {t}")]
    ZeroVariance { t: f64 },
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IndicatorSeries {
    pub times: Vec<f64>,
    pub autocorrelation: Vec<f64>,
    pub variance: Vec<f64>,
    /// `(1 − a_n)/Δt`.
    pub decay_rate: Vec<f64>,
    pub mean: Vec<f64>,
    /// Surviving mass at each time.
    pub mass: Vec<f64>,
}

impl IndicatorSeries {
    /// Value of `series` at the reporting time closest to `t`.
    pub fn at(&self, series: &[f64], t: f64) -> f64 {
        let k = self
            .times
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))
            .map_or(0, |(i, _)| i);
        series[k]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OuBaseline {
    pub theta: f64,
    pub a: f64,
    pub v: f64,
}

/// Lag-`dt` autocorrelation and variance of the OU process with rate `θ`.
pub fn ou_baseline(theta: f64, diffusion: f64, dt: f64) -> Result<OuBaseline, IndicatorError> {
    if !(theta > 0.0 && diffusion > 0.0 && dt >= 0.0) {
        return Err(IndicatorError::InvalidInput(format!(
            "need θ > 0, D > 0, Δt ≥ 0 (got {theta}, {diffusion}, {dt})"
        )));
    }
    Ok(OuBaseline {
        theta,
        a: (-theta * dt).exp(),
        v: diffusion / theta,
    })
}

/// Barrier height and prefactor of the Kramers time at `λ = 0`.
pub const KRAMERS_DELTA_U: f64 = 4.0 / 3.0;
pub const KRAMERS_PREFACTOR: f64 = std::f64::consts::PI;

/// `π exp(ΔU/D)`; `+∞` when the exponential overflows.
pub fn kramers_time(diffusion: f64) -> f64 {
    if !(diffusion > 0.0) {
        return f64::NAN;
    }
    KRAMERS_PREFACTOR * (KRAMERS_DELTA_U / diffusion).exp()
}

/// Indicator series on `[t_span.0, t_span.1]`, starting from the stationary
/// density at `λ(t_span.0)`.
pub fn lag1_series(
    params: &ModelParams,
    grid: &Grid1D,
    t_span: (f64, f64),
) -> Result<IndicatorSeries, IndicatorError> {
    if !(t_span.0 < t_span.1) {
        return Err(IndicatorError::InvalidInput(format!("empty span {t_span:?}")));
    }
    let dt = params.dt;
    let xs = grid.interior();
    let mut p = fokker_planck::stationary_density(params.lambda(t_span.0), params.diffusion, grid)?.values;
    let mut prop = Propagator::new(*grid, params, Boundary::Absorbing)?;
    let times = model::reporting_grid(t_span.0, t_span.1, dt);
    let n = times.len() - 1;
    let mut out = IndicatorSeries {
        times: times[1..].to_vec(),
        autocorrelation: Vec::with_capacity(n),
        variance: Vec::with_capacity(n),
        decay_rate: Vec::with_capacity(n),
        mean: Vec::with_capacity(n),
        mass: Vec::with_capacity(n),
    };
    let h = grid.h();
    let weighted = |f: &dyn Fn(f64) -> f64, v: &[f64]| -> f64 {
        let terms: Vec<f64> = xs.iter().zip(v).map(|(&x, &q)| f(x) * q).collect();
        pairwise_sum(&terms)
    };
    for w in times.windows(2) {
        let s0 = pairwise_sum(&p);
        if !(s0 > 0.0) {
            return Err(FpeError::ZeroMass.into());
        }
        let c = weighted(&|x| x, &p) / s0;
        let mut q: Vec<f64> = xs.iter().zip(&p).map(|(x, v)| (x - c) * v).collect();
        let mut r: Vec<f64> = xs.iter().zip(&p).map(|(x, v)| (x - c) * (x - c) * v).collect();
        let step = w[1] - w[0];
        prop.advance(&mut [&mut p, &mut q, &mut r], w[0], step, None)?;
        for v in p.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let s = pairwise_sum(&p);
        if !(s > 0.0) {
            return Err(FpeError::ZeroMass.into());
        }
        let mean = weighted(&|x| x, &p) / s;
        let var = weighted(&|x| (x - mean) * (x - mean), &p) / s;
        let m1 = pairwise_sum(&q) / s;
        let var_prev = pairwise_sum(&r) / s - m1 * m1;
        let cov = weighted(&|x| x - mean, &q) / s;
        let denom = (var_prev * var).sqrt();
        if !(denom > 0.0) {
            return Err(IndicatorError::ZeroVariance { t: w[1] });
        }
        let a = cov / denom;
        out.autocorrelation.push(a);
        out.variance.push(var);
        out.decay_rate.push((1.0 - a) / step);
        out.mean.push(mean);
        out.mass.push(h * s);
    }
    Ok(out)
}

/// Indicator series for each upper boundary, on grids with the default
/// spacing.
pub fn domain_sweep(
    x_end_values: &[f64],
    params: &ModelParams,
    t_span: (f64, f64),
) -> Result<Vec<IndicatorSeries>, IndicatorError> {
    if let Some(bad) = x_end_values.iter().find(|&&x| !(x > params.x_start + 1.0)) {
        return Err(IndicatorError::InvalidInput(format!(
            "x_end {bad} must exceed x_start + 1"
        )));
    }
    x_end_values
        .par_iter()
        .map(|&x_end| {
            let grid = Grid1D::with_default_spacing(params.x_start, x_end)?;
            lag1_series(params, &grid, t_span)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Rise,
    Fall,
}

/// First time after the plateau window at which `values` departs from its
/// plateau mean by the relative amount `rel` in the given direction.
pub fn onset_time(
    times: &[f64],
    values: &[f64],
    plateau: (f64, f64),
    rel: f64,
    direction: Direction,
) -> Option<f64> {
    let base: Vec<f64> = times
        .iter()
        .zip(values)
        .filter(|(t, _)| **t >= plateau.0 && **t <= plateau.1)
        .map(|(_, v)| *v)
        .collect();
    if base.is_empty() {
        return None;
    }
    let mean = base.iter().sum::<f64>() / base.len() as f64;
    times
        .iter()
        .zip(values)
        .filter(|(t, _)| **t > plateau.1)
        .find(|(_, v)| match direction {
            Direction::Rise => **v > mean * (1.0 + rel),
            Direction::Fall => **v < mean * (1.0 - rel),
        })
        .map(|(t, _)| *t)
}

/// Plateau window and relative change used for onset detection.
pub const ONSET_PLATEAU: (f64, f64) = (-6.0, -4.0);
pub const ONSET_REL: f64 = 0.05;
