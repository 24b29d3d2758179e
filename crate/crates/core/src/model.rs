//! The ramped saddle-node model: `x' = (x + λ(t))² − 1` with a tanh ramp
//! `λ(t)` of height `λ_max` and speed `ε`.
//!
//! Everything here is a closed-form function of its arguments, plus the
//! deterministic trajectories (invariant manifolds, reference trajectory)
//! and the bisection for the critical ramp speed.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ode::{self, IntegratorOptions, Stop};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model parameters: {0}")]
    InvalidParams(String),
    #[error("trajectory diverged at t = {t_blowup} before the final time")]
    DivergedBeforeFinalTime { t_blowup: f64 },
    #[error("backward integration of the stable manifold diverged at t = {t}")]
    BackwardIntegrationDiverged { t: f64 },
    #[error("integration failed at t = {t}: {reason}")]
    IntegrationFailed { t: f64, reason: String },
    #[error("bracket [{lo}, {hi}] does not straddle the critical rate (both ends {class})")]
    BracketInvalid { lo: f64, hi: f64, class: &'static str },
}

/// Shape of the parameter ramp.
///
/// `epsilon = 0` is accepted and freezes the ramp at `λ_max / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RampParams {
    pub epsilon: f64,
    pub lambda_max: f64,
}

impl Default for RampParams {
    fn default() -> Self {
        Self {
            epsilon: 1.25,
            lambda_max: 3.0,
        }
    }
}

impl RampParams {
    pub fn new(epsilon: f64, lambda_max: f64) -> Result<Self, ModelError> {
        let ramp = Self {
            epsilon,
            lambda_max,
        };
        ramp.validate()?;
        Ok(ramp)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(ModelError::InvalidParams(format!(
                "epsilon must be finite and non-negative, got {}",
                self.epsilon
            )));
        }
        if !(self.lambda_max.is_finite() && self.lambda_max > 0.0) {
            return Err(ModelError::InvalidParams(format!(
                "lambda_max must be positive, got {}",
                self.lambda_max
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn lambda(&self, t: f64) -> f64 {
        lambda_of_t(t, self)
    }

    #[inline]
    pub fn lambda_dot(&self, t: f64) -> f64 {
        lambda_dot(t, self)
    }

    /// `dλ/dt` written as a function of `λ` (the autonomous λ-equation).
    #[inline]
    pub fn h3(&self, lam: f64) -> f64 {
        h3(lam, self)
    }

    #[inline]
    pub fn h3_prime(&self, lam: f64) -> f64 {
        self.epsilon * (self.lambda_max - 2.0 * lam)
    }
}

/// All scalar parameters of the stochastic ramped saddle-node system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelParams {
    pub ramp: RampParams,
    /// Diffusion coefficient `D`; the noise amplitude is `sqrt(2D)`.
    pub diffusion: f64,
    pub t0: f64,
    pub x0: f64,
    /// Escape destination `x_T`.
    pub x_target: f64,
    pub x_start: f64,
    pub x_end: f64,
    /// Reporting time step.
    pub dt: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            ramp: RampParams::default(),
            diffusion: 0.008,
            t0: -10.0,
            x0: -1.0,
            x_target: 4.0,
            x_start: -6.0,
            x_end: 2.0,
            dt: 0.01,
        }
    }
}

impl ModelParams {
    pub fn with_ramp(mut self, epsilon: f64, lambda_max: f64) -> Self {
        self.ramp = RampParams {
            epsilon,
            lambda_max,
        };
        self
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.ramp.epsilon = epsilon;
        self
    }

    pub fn with_diffusion(mut self, diffusion: f64) -> Self {
        self.diffusion = diffusion;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.ramp.validate()?;
        let bad = |msg: String| Err(ModelError::InvalidParams(msg));
        if !(self.diffusion.is_finite() && self.diffusion > 0.0) {
            return bad(format!("diffusion must be positive, got {}", self.diffusion));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.x_start < self.x0 && self.x0 < self.x_end) {
            return bad(format!(
                "need x_start < x0 < x_end, got {} / {} / {}",
                self.x_start, self.x0, self.x_end
            ));
        }
        if !(self.t0.is_finite() && self.x_target.is_finite()) {
            return bad("t0 and x_target must be finite".into());
        }
        Ok(())
    }

    #[inline]
    pub fn lambda(&self, t: f64) -> f64 {
        self.ramp.lambda(t)
    }
}

/// `λ(t) = (λ_max/2)·[tanh(λ_max·ε·t/2) + 1]`, evaluated as the equivalent
/// logistic `λ_max/(1 + exp(−λ_max·ε·t))` so the lower tail keeps full
/// relative precision.
#[inline]
pub fn lambda_of_t(t: f64, ramp: &RampParams) -> f64 {
    ramp.lambda_max / (1.0 + (-ramp.lambda_max * ramp.epsilon * t).exp())
}

/// `dλ/dt = (ε·λ_max²/4)·sech²(λ_max·ε·t/2)`.
#[inline]
pub fn lambda_dot(t: f64, ramp: &RampParams) -> f64 {
    let arg = 0.5 * ramp.lambda_max * ramp.epsilon * t;
    // sech² = 1 - tanh², but computed from cosh to keep precision in the tails.
    let c = arg.abs().cosh();
    if !c.is_finite() {
        return 0.0;
    }
    0.25 * ramp.epsilon * ramp.lambda_max * ramp.lambda_max / (c * c)
}

/// Drift of the state equation.
#[inline]
pub fn drift(x: f64, lam: f64) -> f64 {
    let s = x + lam;
    s * s - 1.0
}

#[inline]
pub fn h3(lam: f64, ramp: &RampParams) -> f64 {
    ramp.epsilon * lam * (ramp.lambda_max - lam)
}

/// Potential `U(x, λ(t))` and the derivatives used by the path functional.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PotentialTerms {
    pub u: f64,
    pub u_x: f64,
    pub u_xx: f64,
    pub u_t: f64,
}

/// Potential terms at `(x, λ)`, with `dλ/dt` taken from the λ-equation.
#[inline]
pub fn potential_terms_at(x: f64, lam: f64, ramp: &RampParams) -> PotentialTerms {
    PotentialTerms {
        u: -x * x * x / 3.0 - lam * x * x + (1.0 - lam * lam) * x,
        u_x: -x * x - 2.0 * lam * x + 1.0 - lam * lam,
        u_xx: -2.0 * (x + lam),
        u_t: -h3(lam, ramp) * x * (x + 2.0 * lam),
    }
}

pub fn potential_terms(x: f64, t: f64, params: &ModelParams) -> PotentialTerms {
    potential_terms_at(x, params.lambda(t), &params.ramp)
}

/// `U(x, λ)` alone.
#[inline]
pub fn potential(x: f64, lam: f64) -> f64 {
    -x * x * x / 3.0 - lam * x * x + (1.0 - lam * lam) * x
}

/// `∂U/∂λ` at fixed `x`.
#[inline]
pub fn potential_lambda(x: f64, lam: f64) -> f64 {
    -x * (x + 2.0 * lam)
}

/// `V_s = U_x²/(4D) − U_xx/2 − U_t/(2D)` at `(x, λ)`.
#[inline]
pub fn v_s_at(x: f64, lam: f64, ramp: &RampParams, diffusion: f64) -> f64 {
    let p = potential_terms_at(x, lam, ramp);
    p.u_x * p.u_x / (4.0 * diffusion) - 0.5 * p.u_xx - p.u_t / (2.0 * diffusion)
}

pub fn v_s(x: f64, t: f64, params: &ModelParams) -> f64 {
    v_s_at(x, params.lambda(t), &params.ramp, params.diffusion)
}

/// The expanded polynomial form of `V_s`, kept as an independent evaluation
/// route for cross-checking [`v_s_at`].
pub fn v_s_expanded(x: f64, lam: f64, ramp: &RampParams, diffusion: f64) -> f64 {
    let l2 = lam * lam;
    let a = 1.0 - l2;
    let num = x.powi(4) + 4.0 * l2 * x * x + a * a + 4.0 * lam * x.powi(3)
        - 2.0 * x * (x + 2.0 * lam) * a;
    num / (4.0 * diffusion)
        + x
        + lam
        + ramp.epsilon * lam * x * (ramp.lambda_max - lam) * (x + 2.0 * lam) / (2.0 * diffusion)
}

/// `h₂ = 2D·∂V_s/∂x` at `(x, λ)`.
///
/// With `s = x + λ` this is `2s·(f + h₃) + 2D`.
#[inline]
pub fn h2_at(x: f64, lam: f64, ramp: &RampParams, diffusion: f64) -> f64 {
    let s = x + lam;
    2.0 * s * (s * s - 1.0 + h3(lam, ramp)) + 2.0 * diffusion
}

pub fn h2(x1: f64, t: f64, params: &ModelParams) -> f64 {
    h2_at(x1, params.lambda(t), &params.ramp, params.diffusion)
}

/// `h₂` and its first and second partial derivatives in `(x, λ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct H2Partials {
    pub h2: f64,
    pub dx: f64,
    pub dlam: f64,
    pub dxx: f64,
    pub dxlam: f64,
    pub dlamlam: f64,
}

pub fn h2_partials(x: f64, lam: f64, ramp: &RampParams, diffusion: f64) -> H2Partials {
    let s = x + lam;
    let g3 = h3(lam, ramp);
    let g3p = ramp.h3_prime(lam);
    let base = 6.0 * s * s - 2.0 + 2.0 * g3;
    H2Partials {
        h2: 2.0 * s * (s * s - 1.0 + g3) + 2.0 * diffusion,
        dx: base,
        dlam: base + 2.0 * s * g3p,
        dxx: 12.0 * s,
        dxlam: 12.0 * s + 2.0 * g3p,
        dlamlam: 12.0 * s + 4.0 * g3p - 4.0 * ramp.epsilon * s,
    }
}

/// `∂V_s/∂λ` at fixed `x`.
pub fn v_s_lambda(x: f64, lam: f64, ramp: &RampParams, diffusion: f64) -> f64 {
    let s = x + lam;
    let f = s * s - 1.0;
    f * s / diffusion
        + 1.0
        + (ramp.h3_prime(lam) * (s * s - lam * lam) + 2.0 * h3(lam, ramp) * x) / (2.0 * diffusion)
}

/// `∂²V_s/∂λ²` at fixed `x`.
pub fn v_s_lambda_lambda(x: f64, lam: f64, ramp: &RampParams, diffusion: f64) -> f64 {
    let s = x + lam;
    let f = s * s - 1.0;
    (2.0 * s * s + f) / diffusion
        + (-2.0 * ramp.epsilon * (s * s - lam * lam) + 4.0 * ramp.h3_prime(lam) * x)
            / (2.0 * diffusion)
}

/// A point `(x, λ)` of the extended phase plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub x: f64,
    pub lambda: f64,
}

/// The four equilibria of the extended `(x, λ)` system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumSet {
    /// Saddle on `λ = 0` (stable in `x`).
    pub s_minus: PhasePoint,
    /// Source on `λ = 0`.
    pub u_minus: PhasePoint,
    /// Sink on `λ = λ_max`.
    pub s_plus: PhasePoint,
    /// Saddle on `λ = λ_max` (unstable in `x`).
    pub u_plus: PhasePoint,
}

pub fn equilibria(ramp: &RampParams) -> EquilibriumSet {
    let lm = ramp.lambda_max;
    EquilibriumSet {
        s_minus: PhasePoint {
            x: stable_quasi_equilibrium(0.0),
            lambda: 0.0,
        },
        u_minus: PhasePoint {
            x: unstable_quasi_equilibrium(0.0),
            lambda: 0.0,
        },
        s_plus: PhasePoint {
            x: stable_quasi_equilibrium(lm),
            lambda: lm,
        },
        u_plus: PhasePoint {
            x: unstable_quasi_equilibrium(lm),
            lambda: lm,
        },
    }
}

/// Frozen-λ stable equilibrium `−λ − 1`.
#[inline]
pub fn stable_quasi_equilibrium(lam: f64) -> f64 {
    -lam - 1.0
}

/// Frozen-λ unstable equilibrium `−λ + 1`.
#[inline]
pub fn unstable_quasi_equilibrium(lam: f64) -> f64 {
    -lam + 1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    UnstableManifoldWuSminus,
    StableManifoldWsUplus,
    DeterministicReference,
}

/// A deterministic trajectory sampled on a reporting grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<f64>,
    /// `dx/dt` at each sample, used for cubic Hermite interpolation.
    pub slopes: Vec<f64>,
    pub kind: TrajectoryKind,
}

impl Trajectory {
    fn from_samples(times: Vec<f64>, states: Vec<f64>, ramp: &RampParams, kind: TrajectoryKind) -> Self {
        let slopes = times
            .iter()
            .zip(&states)
            .map(|(&t, &x)| drift(x, ramp.lambda(t)))
            .collect();
        Self {
            times,
            states,
            slopes,
            kind,
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn t_min(&self) -> f64 {
        self.times[0]
    }

    pub fn t_max(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    /// Cubic Hermite interpolation; `None` outside the sampled window.
    pub fn value_at(&self, t: f64) -> Option<f64> {
        let n = self.times.len();
        if n == 0 || t < self.times[0] || t > self.times[n - 1] {
            return None;
        }
        if n == 1 {
            return Some(self.states[0]);
        }
        let k = match self
            .times
            .binary_search_by(|probe| probe.partial_cmp(&t).expect("finite times"))
        {
            Ok(i) => return Some(self.states[i]),
            Err(i) => i - 1,
        };
        let (t0, t1) = (self.times[k], self.times[k + 1]);
        let h = t1 - t0;
        let s = (t - t0) / h;
        let (y0, y1) = (self.states[k], self.states[k + 1]);
        let (m0, m1) = (self.slopes[k] * h, self.slopes[k + 1] * h);
        let s2 = s * s;
        let s3 = s2 * s;
        Some(
            (2.0 * s3 - 3.0 * s2 + 1.0) * y0
                + (s3 - 2.0 * s2 + s) * m0
                + (-2.0 * s3 + 3.0 * s2) * y1
                + (s3 - s2) * m1,
        )
    }
}

/// Uniform reporting grid from `a` to `b` (either direction) with spacing
/// close to `dt`; both endpoints are included exactly.
pub fn reporting_grid(a: f64, b: f64, dt: f64) -> Vec<f64> {
    let n = ((b - a).abs() / dt).round().max(1.0) as usize;
    let step = (b - a) / n as f64;
    (0..=n)
        .map(|i| if i == n { b } else { a + step * i as f64 })
        .collect()
}

fn stop_time(stop: Stop) -> f64 {
    match stop {
        Stop::BlowUp { t } | Stop::StepUnderflow { t } | Stop::TooManySteps { t } => t,
    }
}

/// Integrates `x' = f(x, λ(t))` from `(t_init, x_init)` to `t_final` and
/// samples the result every `params.dt`.
pub fn deterministic_trajectory(
    x_init: f64,
    t_init: f64,
    t_final: f64,
    params: &ModelParams,
) -> Result<Trajectory, ModelError> {
    deterministic_trajectory_with(x_init, t_init, t_final, params, &IntegratorOptions::default())
}

pub fn deterministic_trajectory_with(
    x_init: f64,
    t_init: f64,
    t_final: f64,
    params: &ModelParams,
    opts: &IntegratorOptions,
) -> Result<Trajectory, ModelError> {
    params.ramp.validate()?;
    if !(t_init < t_final) {
        return Err(ModelError::InvalidParams(format!(
            "t_init ({t_init}) must be below t_final ({t_final})"
        )));
    }
    let ramp = params.ramp;
    let times = reporting_grid(t_init, t_final, params.dt);
    let rhs = |t: f64, x: f64| drift(x, ramp.lambda(t));
    match ode::integrate(rhs, t_init, x_init, &times, opts) {
        Ok(states) => Ok(Trajectory::from_samples(
            times,
            states,
            &ramp,
            TrajectoryKind::DeterministicReference,
        )),
        Err(inc) => match inc.stop {
            Stop::BlowUp { t } => Err(ModelError::DivergedBeforeFinalTime { t_blowup: t }),
            other => Err(ModelError::IntegrationFailed {
                t: stop_time(other),
                reason: format!("{other:?}"),
            }),
        },
    }
}

/// Unit-λ-component unstable eigendirection of `S₋`: `x`-slope per unit `λ`.
fn s_minus_unstable_slope(ramp: &RampParams) -> f64 {
    // Jacobian at (−1, 0): [[−2, −2], [0, ε λ_max]]; eigenvector (v, 1) with
    // −2v − 2 = ε λ_max v.
    -2.0 / (2.0 + ramp.epsilon * ramp.lambda_max)
}

/// `W^u(S₋)` on `t_span`, seeded on the unstable eigendirection of `S₋` at
/// the actual `λ(t_span.0)`.
pub fn unstable_manifold_wu_sminus(
    params: &ModelParams,
    t_span: (f64, f64),
) -> Result<Trajectory, ModelError> {
    let ramp = params.ramp;
    let lam0 = ramp.lambda(t_span.0);
    let x_init = stable_quasi_equilibrium(0.0) + s_minus_unstable_slope(&ramp) * lam0;
    let mut traj = deterministic_trajectory(x_init, t_span.0, t_span.1, params)?;
    traj.kind = TrajectoryKind::UnstableManifoldWuSminus;
    Ok(traj)
}

/// Offset from `U₊` used to seed the backward integration of `W^s(U₊)`.
pub const STABLE_MANIFOLD_SEED_OFFSET: f64 = 1e-8;

/// `W^s(U₊)` on `t_span`, integrated backward in time from `t_span.1`.
pub fn stable_manifold_ws_uplus(
    params: &ModelParams,
    t_span: (f64, f64),
) -> Result<Trajectory, ModelError> {
    params.ramp.validate()?;
    let (ta, tb) = t_span;
    if !(ta < tb) {
        return Err(ModelError::InvalidParams(format!(
            "empty time span [{ta}, {tb}]"
        )));
    }
    let ramp = params.ramp;
    // Seed on the stable eigendirection at the actual λ(t_b), just below
    // the saddle.
    let lam_b = ramp.lambda(tb);
    let deficit = ramp.lambda_max - lam_b;
    let x_seed = unstable_quasi_equilibrium(ramp.lambda_max)
        + stable_direction_x_offset(&ramp, deficit)
        - STABLE_MANIFOLD_SEED_OFFSET;
    let mut back = reporting_grid(tb, ta, params.dt);
    let rhs = |t: f64, x: f64| drift(x, ramp.lambda(t));
    let states = match ode::integrate(rhs, tb, x_seed, &back, &IntegratorOptions::default()) {
        Ok(s) => s,
        Err(inc) => {
            return Err(ModelError::BackwardIntegrationDiverged {
                t: stop_time(inc.stop),
            })
        }
    };
    back.reverse();
    let mut states = states;
    states.reverse();
    Ok(Trajectory::from_samples(
        back,
        states,
        &ramp,
        TrajectoryKind::StableManifoldWsUplus,
    ))
}

/// `x`-offset of the stable eigendirection of `U₊` at a `λ` deficit `δ` below
/// `λ_max`.
fn stable_direction_x_offset(ramp: &RampParams, deficit: f64) -> f64 {
    // Jacobian at (1 − λ_max, λ_max): [[2, 2], [0, −ε λ_max]]; stable
    // eigenvector (v, 1) with 2v + 2 = −ε λ_max v.
    let v = -2.0 / (2.0 + ramp.epsilon * ramp.lambda_max);
    // λ = λ_max − δ ⇒ x = x_U₊ − v·δ.
    -v * deficit
}

/// Default bisection bracket for the critical rate.
pub const CRITICAL_BRACKET: (f64, f64) = (1.0, 1.6);

/// Start time used when classifying a ramp speed.
const CLASSIFY_T_START: f64 = -10.0;
/// Horizon long enough for the post-ramp saddle `U₊` to resolve near-critical
/// trajectories to either side.
const CLASSIFY_T_END: f64 = 60.0;

/// Whether the deterministic trajectory from `x = −1` at `t = −10` escapes.
pub fn tips(epsilon: f64, lambda_max: f64, opts: &IntegratorOptions) -> Result<bool, ModelError> {
    let ramp = RampParams::new(epsilon, lambda_max)?;
    let rhs = |t: f64, x: f64| drift(x, ramp.lambda(t));
    match ode::integrate(rhs, CLASSIFY_T_START, -1.0, &[CLASSIFY_T_END], opts) {
        Ok(_) => Ok(false),
        Err(inc) => match inc.stop {
            Stop::BlowUp { .. } => Ok(true),
            other => Err(ModelError::IntegrationFailed {
                t: stop_time(other),
                reason: format!("{other:?}"),
            }),
        },
    }
}

/// Bisection for the critical ramp speed `ε_c` using the default bracket.
pub fn find_critical_epsilon(ramp_height: f64, tol: f64) -> Result<f64, ModelError> {
    find_critical_epsilon_in(
        ramp_height,
        CRITICAL_BRACKET,
        tol,
        &IntegratorOptions::default(),
    )
    .map(|r| r.epsilon_c)
}

/// One bisection evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BisectionStep {
    pub lo: f64,
    pub hi: f64,
    pub mid: f64,
    pub tips: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriticalRate {
    pub epsilon_c: f64,
    pub tolerance: f64,
    pub trace: Vec<BisectionStep>,
}

pub fn find_critical_epsilon_in(
    ramp_height: f64,
    bracket: (f64, f64),
    tol: f64,
    opts: &IntegratorOptions,
) -> Result<CriticalRate, ModelError> {
    if !(tol > 0.0) {
        return Err(ModelError::InvalidParams(format!("tol must be positive, got {tol}")));
    }
    let (mut lo, mut hi) = if bracket.0 <= bracket.1 {
        bracket
    } else {
        (bracket.1, bracket.0)
    };
    let tip_lo = tips(lo, ramp_height, opts)?;
    let tip_hi = tips(hi, ramp_height, opts)?;
    if tip_lo == tip_hi {
        return Err(ModelError::BracketInvalid {
            lo,
            hi,
            class: if tip_lo { "tip" } else { "track" },
        });
    }
    let mut trace = Vec::new();
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        let t = tips(mid, ramp_height, opts)?;
        trace.push(BisectionStep { lo, hi, mid, tips: t });
        if t == tip_lo {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(CriticalRate {
        epsilon_c: 0.5 * (lo + hi),
        tolerance: tol,
        trace,
    })
}
