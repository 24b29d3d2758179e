//! Parameter continuation of escape paths.
//!
//! The optimal path is reached from a trivial solution in three runs:
//!
//! 1. `T_init: 0 → 1` at `T_end = t₀ + 1`, `x_T = x₀` (switches the
//!    Euler–Lagrange forcing on),
//! 2. `x_T: x₀ → x_target` (pulls the end point over the barrier),
//! 3. `T_end → 20` with `M` and `m` monitored; the sign change of `m` at
//!    which `M` is maximal is refined to the optimal escape time.
//!
//! From there `(ε, D)` are continued with `T_end` free and `m = 0` imposed.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::bvp_path::{self, BvpError, Constraint, Param, PathSolution, SolveOptions};
use crate::fokker_planck::ThresholdCurve;
use crate::model::{self, ModelError, ModelParams, Trajectory};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ContinuationError {
    #[error("step size underflow at {param} = {param_value}")]
    StepUnderflow { param: &'static str, param_value: f64 },
    #[error("seed does not converge: {0}")]
    NoConvergedSeed(BvpError),
    #[error("m-root at T_end = {t_end} is not a maximum of M")]
    MNotMaximal { t_end: f64 },
    #[error("no m sign change between T_end = {from} and {to}")]
    NoRoot { from: f64, to: f64 },
    #[error("path does not cross the curve")]
    NoCrossing,
    #[error("need at least {needed} converged points, got {got}")]
    InsufficientPoints { needed: usize, got: usize },
    #[error(transparent)]
    Bvp(#[from] BvpError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Initialisation values of the seeding steps.
pub const INIT_EPSILON: f64 = 1.25;
pub const INIT_DIFFUSION: f64 = 0.05;
/// End of the Step-3 sweep in `T_end`.
pub const STEP3_TARGET: f64 = 20.0;
/// Offset used to confirm that an m-root is a maximum of `M`.
pub const MAXIMALITY_OFFSET: f64 = 0.1;
pub const ROOT_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepPolicy {
    /// First step as a fraction of the distance to the target.
    pub initial_fraction: f64,
    pub min_step: f64,
    /// Largest step as a fraction of the distance to the target.
    pub max_fraction: f64,
    /// Largest step in `T_end`, which also bounds the resolution of the m
    /// sign-change scan.
    pub max_t_end_step: f64,
    pub grow_after: usize,
}

impl Default for StepPolicy {
    fn default() -> Self {
        Self {
            initial_fraction: 0.1,
            min_step: 1e-5,
            max_fraction: 0.25,
            max_t_end_step: 0.1,
            grow_after: 3,
        }
    }
}

impl StepPolicy {
    fn max_step(&self, param: Param, span: f64) -> f64 {
        let cap = self.max_fraction * span;
        if param == Param::TEnd {
            cap.min(self.max_t_end_step)
        } else {
            cap
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ContinuationSetup {
    pub free: Vec<Param>,
    pub constraints: Vec<Constraint>,
    pub policy: StepPolicy,
    pub solve: SolveOptions,
    pub keep_solutions: bool,
    pub refine_roots: bool,
}

impl ContinuationSetup {
    /// `T_end` free with `m = 0` imposed.
    pub fn optimal_time() -> Self {
        Self {
            free: vec![Param::TEnd],
            constraints: vec![Constraint::MZero],
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RootKind {
    /// `m` goes from negative to positive: `M` is maximal.
    Maximum,
    Minimum,
}

/// A refined sign change of `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct MRoot {
    pub value: f64,
    pub kind: RootKind,
    /// Bracket `(v_a, m_a, v_b, m_b)` from the continuation run.
    pub bracket: (f64, f64, f64, f64),
    pub solution: PathSolution,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuationRun {
    pub parameter: Param,
    pub start: f64,
    pub target: f64,
    pub values: Vec<f64>,
    /// Accepted step sizes (in the stepping coordinate).
    pub steps: Vec<f64>,
    pub t_end: Vec<f64>,
    pub big_m: Vec<f64>,
    pub m: Vec<f64>,
    pub solutions: Vec<PathSolution>,
    pub roots: Vec<MRoot>,
    pub arclength_steps: usize,
    pub last: PathSolution,
}

impl ContinuationRun {
    fn record(&mut self, sol: &PathSolution, keep: bool) {
        self.values.push(sol.get(self.parameter));
        self.t_end.push(sol.t_end);
        self.big_m.push(sol.big_m);
        self.m.push(sol.m);
        if keep {
            self.solutions.push(sol.clone());
        }
    }
}

/// `D` is stepped in `ln D`.
fn to_coord(param: Param, v: f64) -> f64 {
    if param == Param::Diffusion {
        v.ln()
    } else {
        v
    }
}

fn from_coord(param: Param, c: f64) -> f64 {
    if param == Param::Diffusion {
        c.exp()
    } else {
        c
    }
}

/// Secant extrapolation from `prev` through `cur` to coordinate `c_new`;
/// a copy of `cur` when there is no history.
fn predict(
    cur: &PathSolution,
    prev: Option<&PathSolution>,
    param: Param,
    free: &[Param],
    c_new: f64,
) -> PathSolution {
    let mut guess = cur.clone();
    if let Some(prev) = prev {
        let c_cur = to_coord(param, cur.get(param));
        let c_prev = to_coord(param, prev.get(param));
        let dc = c_cur - c_prev;
        if dc != 0.0 {
            let r = (c_new - c_cur) / dc;
            let prev = prev.remesh(cur.mesh.clone());
            for (g, (a, b)) in guess.u.iter_mut().zip(cur.u.iter().zip(&prev.u)) {
                *g = a + r * (a - b);
            }
            for &p in free {
                let (a, b) = (cur.get(p), prev.get(p));
                guess.set(p, a + r * (a - b));
            }
        }
    }
    guess.set(param, from_coord(param, c_new));
    guess
}

fn opposite_signs(a: f64, b: f64) -> bool {
    a.is_finite() && b.is_finite() && ((a < 0.0 && b > 0.0) || (a > 0.0 && b < 0.0))
}

/// Refines a sign change of `m` in `param` between two solutions by the
/// Illinois variant of regula falsi on a fixed mesh.
pub fn refine_m_root(
    a: &PathSolution,
    b: &PathSolution,
    param: Param,
    setup: &ContinuationSetup,
) -> Result<MRoot, ContinuationError> {
    let (va, vb) = (a.get(param), b.get(param));
    let (ma0, mb0) = (a.m, b.m);
    if !opposite_signs(ma0, mb0) {
        return Err(ContinuationError::NoRoot { from: va, to: vb });
    }
    let kind = if (vb - va) * (mb0 - ma0) > 0.0 {
        RootKind::Maximum
    } else {
        RootKind::Minimum
    };
    let opts = SolveOptions {
        adapt: 0,
        ..setup.solve
    };
    let mesh = b.mesh.clone();
    let mut sa = bvp_path::newton(&a.remesh(mesh.clone()), &setup.free, &setup.constraints, &opts)?;
    let mut sb = bvp_path::newton(&b.remesh(mesh), &setup.free, &setup.constraints, &opts)?;
    let (mut fa, mut fb) = (sa.m, sb.m);
    if !opposite_signs(fa, fb) {
        return Err(ContinuationError::NoRoot { from: va, to: vb });
    }
    let mut side = 0i8;
    for _ in 0..60 {
        let (xa, xb) = (sa.get(param), sb.get(param));
        let x = xb - fb * (xb - xa) / (fb - fa);
        let w = (x - xa) / (xb - xa);
        let mut guess = sa.clone();
        for (g, (ua, ub)) in guess.u.iter_mut().zip(sa.u.iter().zip(&sb.u)) {
            *g = ua + w * (ub - ua);
        }
        for &p in &setup.free {
            guess.set(p, sa.get(p) + w * (sb.get(p) - sa.get(p)));
        }
        guess.set(param, x);
        let sc = bvp_path::newton(&guess, &setup.free, &setup.constraints, &opts)?;
        let fc = sc.m;
        if fc.abs() < ROOT_TOL || (xb - xa).abs() < 1e-14 * (1.0 + x.abs()) {
            return Ok(MRoot {
                value: x,
                kind,
                bracket: (va, ma0, vb, mb0),
                solution: sc,
            });
        }
        if opposite_signs(fc, fb) {
            sa = sb;
            fa = fb;
            side = 0;
        } else {
            if side == -1 {
                fa *= 0.5;
            }
            side = -1;
        }
        sb = sc;
        fb = fc;
    }
    let (best, x) = if fa.abs() < fb.abs() { (sa, fa) } else { (sb, fb) };
    log::warn!("m-root refinement stopped at |m| = {:e}", x.abs());
    Ok(MRoot {
        value: best.get(param),
        kind,
        bracket: (va, ma0, vb, mb0),
        solution: best,
    })
}

/// Pseudo-arclength step along the secant through `prev` and `cur`.
fn arclength_step(
    cur: &PathSolution,
    prev: &PathSolution,
    param: Param,
    setup: &ContinuationSetup,
    scale: f64,
) -> Result<PathSolution, BvpError> {
    let prev = prev.remesh(cur.mesh.clone());
    let mut free = vec![param];
    free.extend(setup.free.iter().copied());
    let du: Vec<f64> = cur.u.iter().zip(&prev.u).map(|(a, b)| a - b).collect();
    let dp: Vec<f64> = free.iter().map(|&p| cur.get(p) - prev.get(p)).collect();
    let norm = (du.iter().chain(&dp).map(|v| v * v).sum::<f64>()).sqrt();
    if !(norm > 0.0) {
        return Err(BvpError::Invalid("zero secant".into()));
    }
    let tangent_u: Vec<f64> = du.iter().map(|v| v / norm).collect();
    let tangent_p: Vec<f64> = dp.iter().map(|v| v / norm).collect();
    let ds = scale * norm;
    let mut guess = cur.clone();
    for (g, t) in guess.u.iter_mut().zip(&tangent_u) {
        *g += ds * t;
    }
    for (&p, t) in free.iter().zip(&tangent_p) {
        guess.set(p, cur.get(p) + ds * t);
    }
    let mut constraints = vec![Constraint::Arclength {
        base_u: cur.u.clone(),
        base_p: free.iter().map(|&p| cur.get(p)).collect(),
        tangent_u,
        tangent_p,
        ds,
    }];
    constraints.extend(setup.constraints.iter().cloned());
    bvp_path::solve_bvp(&guess, &free, &constraints, &setup.solve)
}

/// Natural-parameter continuation of `seed` in `param` up to `target`.
pub fn continue_in(
    param: Param,
    target: f64,
    seed: &PathSolution,
    setup: &ContinuationSetup,
) -> Result<ContinuationRun, ContinuationError> {
    if param == Param::Diffusion && !(target > 0.0) {
        return Err(BvpError::Invalid(format!("D target must be positive, got {target}")).into());
    }
    let first = bvp_path::solve_bvp(seed, &setup.free, &setup.constraints, &setup.solve)
        .map_err(ContinuationError::NoConvergedSeed)?;
    let start = first.get(param);
    let mut run = ContinuationRun {
        parameter: param,
        start,
        target,
        values: Vec::new(),
        steps: Vec::new(),
        t_end: Vec::new(),
        big_m: Vec::new(),
        m: Vec::new(),
        solutions: Vec::new(),
        roots: Vec::new(),
        arclength_steps: 0,
        last: first.clone(),
    };
    run.record(&first, setup.keep_solutions);
    let c_target = to_coord(param, target);
    let mut c_cur = to_coord(param, start);
    let span = (c_target - c_cur).abs();
    if span == 0.0 {
        return Ok(run);
    }
    let dir = (c_target - c_cur).signum();
    let policy = setup.policy;
    let h_max = policy.max_step(param, span);
    let mut h = (policy.initial_fraction * span).min(h_max);
    let mut cur = first;
    let mut prev: Option<PathSolution> = None;
    let mut streak = 0;
    while (c_target - c_cur) * dir > 1e-12 * (1.0 + c_target.abs()) {
        let h_try = h.min((c_target - c_cur).abs());
        let c_new = if h_try == (c_target - c_cur).abs() {
            c_target
        } else {
            c_cur + dir * h_try
        };
        let guess = predict(&cur, prev.as_ref(), param, &setup.free, c_new);
        let next = match bvp_path::solve_bvp(&guess, &setup.free, &setup.constraints, &setup.solve) {
            Ok(sol) => {
                streak += 1;
                if streak >= policy.grow_after {
                    h = (2.0 * h).min(h_max);
                    streak = 0;
                }
                run.steps.push(h_try);
                sol
            }
            Err(err) => {
                log::debug!("{} step {h_try:e} failed: {err}", param.name());
                streak = 0;
                h *= 0.5;
                if h >= policy.min_step {
                    continue;
                }
                let Some(p) = prev.as_ref() else {
                    return Err(ContinuationError::StepUnderflow {
                        param: param.name(),
                        param_value: cur.get(param),
                    });
                };
                let mut found = None;
                for scale in [1.0, 0.5, 0.25, 0.125] {
                    if let Ok(sol) = arclength_step(&cur, p, param, setup, scale) {
                        found = Some(sol);
                        break;
                    }
                }
                let progressed = found
                    .as_ref()
                    .map(|s| (to_coord(param, s.get(param)) - c_cur) * dir > 0.0)
                    .unwrap_or(false);
                if !progressed {
                    return Err(ContinuationError::StepUnderflow {
                        param: param.name(),
                        param_value: cur.get(param),
                    });
                }
                run.arclength_steps += 1;
                h = policy.min_step * 4.0;
                let sol = found.expect("checked");
                run.steps.push((to_coord(param, sol.get(param)) - c_cur).abs());
                sol
            }
        };
        if setup.refine_roots && opposite_signs(cur.m, next.m) {
            run.roots.push(refine_m_root(&cur, &next, param, setup)?);
        }
        run.record(&next, setup.keep_solutions);
        c_cur = to_coord(param, next.get(param));
        prev = Some(std::mem::replace(&mut cur, next));
    }
    run.last = cur;
    Ok(run)
}

/// Runs of the three seeding steps and the selected optimum.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedingSteps {
    pub step1: ContinuationRun,
    pub step2: ContinuationRun,
    pub step3: ContinuationRun,
    /// The maximum-type m-root of Step 3 with the largest `M`.
    pub root: MRoot,
}

/// Steps 1–3 at the given parameters.
pub fn seeding_steps(params: &ModelParams, setup: &ContinuationSetup) -> Result<SeedingSteps, ContinuationError> {
    params.validate()?;
    let mut p0 = *params;
    p0.x_target = params.x0;
    let seed = PathSolution::trivial_seed(&p0, params.t0 + 1.0, bvp_path::DEFAULT_INTERVALS);
    let plain = ContinuationSetup {
        free: Vec::new(),
        constraints: Vec::new(),
        refine_roots: false,
        ..setup.clone()
    };
    let step1 = continue_in(Param::TInit, 1.0, &seed, &plain)?;
    let step2 = continue_in(Param::XTarget, params.x_target, &step1.last, &plain)?;
    let scan = ContinuationSetup {
        refine_roots: true,
        ..plain
    };
    let step3 = continue_in(Param::TEnd, STEP3_TARGET, &step2.last, &scan)?;
    let root = step3
        .roots
        .iter()
        .filter(|r| r.kind == RootKind::Maximum)
        .max_by(|a, b| a.solution.big_m.total_cmp(&b.solution.big_m))
        .cloned();
    let root = match root {
        Some(r) => r,
        None => {
            return Err(match step3.roots.first() {
                Some(r) => ContinuationError::MNotMaximal { t_end: r.value },
                None => ContinuationError::NoRoot {
                    from: step3.start,
                    to: step3.target,
                },
            })
        }
    };
    Ok(SeedingSteps {
        step1,
        step2,
        step3,
        root,
    })
}

/// Whether `M` at `sol` exceeds `M` at `T_end ± MAXIMALITY_OFFSET`.
pub fn is_local_maximum(sol: &PathSolution, solve: &SolveOptions) -> Result<bool, ContinuationError> {
    let mut best = true;
    for dt in [-MAXIMALITY_OFFSET, MAXIMALITY_OFFSET] {
        let run = continue_in(Param::TEnd, sol.t_end + dt, sol, &ContinuationSetup {
            solve: *solve,
            ..ContinuationSetup::default()
        })?;
        if run.last.big_m >= sol.big_m {
            best = false;
        }
    }
    Ok(best)
}

/// Optimal-time optimal path at `params`: Steps 1–3 at the initialisation
/// values of `(ε, D)`, then continuation in `ε` and `D` with `m = 0`.
pub fn seed_optimal_path(params: &ModelParams) -> Result<PathSolution, ContinuationError> {
    let setup = ContinuationSetup::default();
    let init = params.with_epsilon(INIT_EPSILON).with_diffusion(INIT_DIFFUSION);
    let steps = seeding_steps(&init, &setup)?;
    let sol = continue_optimum(&steps.root.solution, params.ramp.epsilon, params.diffusion)?;
    if !is_local_maximum(&sol, &setup.solve)? {
        return Err(ContinuationError::MNotMaximal { t_end: sol.t_end });
    }
    Ok(sol)
}

/// Continues an optimal path (with `T_end` free, `m = 0`) to `(ε, D)`.
pub fn continue_optimum(sol: &PathSolution, epsilon: f64, diffusion: f64) -> Result<PathSolution, ContinuationError> {
    let setup = ContinuationSetup::optimal_time();
    let mut cur = bvp_path::solve_bvp(sol, &setup.free, &setup.constraints, &setup.solve)
        .map_err(ContinuationError::NoConvergedSeed)?;
    if cur.params.ramp.epsilon != epsilon {
        cur = continue_in(Param::Epsilon, epsilon, &cur, &setup)?.last;
    }
    if cur.params.diffusion != diffusion {
        cur = continue_in(Param::Diffusion, diffusion, &cur, &setup)?.last;
    }
    Ok(cur)
}

/// Curves a path can cross.
pub trait CrossingCurve {
    fn value_at(&self, t: f64) -> Option<f64>;
}

impl CrossingCurve for Trajectory {
    fn value_at(&self, t: f64) -> Option<f64> {
        Trajectory::value_at(self, t)
    }
}

impl CrossingCurve for ThresholdCurve {
    fn value_at(&self, t: f64) -> Option<f64> {
        ThresholdCurve::value_at(self, t)
    }
}

/// First time at which `x₁(t) − curve(t)` changes sign, located to 1e-6.
pub fn crossing_time(path: &PathSolution, curve: &dyn CrossingCurve) -> Result<f64, ContinuationError> {
    let gap = |t: f64| -> Option<f64> { Some(path.x1_at_time(t)? - curve.value_at(t)?) };
    let samples = 20 * path.mesh.n_intervals();
    let t0 = path.params.t0;
    let span = path.span();
    let mut last: Option<(f64, f64)> = None;
    for i in 0..=samples {
        let t = t0 + span * i as f64 / samples as f64;
        let Some(g) = gap(t) else {
            last = None;
            continue;
        };
        if let Some((ta, ga)) = last {
            if (ga < 0.0) != (g < 0.0) || g == 0.0 {
                let (mut a, mut b, mut fa) = (ta, t, ga);
                while b - a > 1e-7 {
                    let c = 0.5 * (a + b);
                    let fc = gap(c).ok_or(ContinuationError::NoCrossing)?;
                    if (fc < 0.0) == (fa < 0.0) && fc != 0.0 {
                        a = c;
                        fa = fc;
                    } else {
                        b = c;
                    }
                }
                return Ok(0.5 * (a + b));
            }
        }
        last = Some((t, g));
    }
    Err(ContinuationError::NoCrossing)
}

/// `W^s(U₊)` on a window covering every path at the given ramp.
pub fn separatrix_for(params: &ModelParams, t_max: f64) -> Result<Trajectory, ModelError> {
    model::stable_manifold_ws_uplus(params, (params.t0, t_max.max(10.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepCell {
    pub epsilon: f64,
    pub diffusion: f64,
    pub t_end: f64,
    pub t_cross: f64,
    pub big_m: f64,
    pub converged: bool,
}

/// Results on an `ε × D` grid, row-major in `ε`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepGrid {
    pub epsilon_values: Vec<f64>,
    pub d_values: Vec<f64>,
    pub cells: Vec<SweepCell>,
}

impl SweepGrid {
    pub fn cell(&self, i_eps: usize, i_d: usize) -> &SweepCell {
        &self.cells[i_eps * self.d_values.len() + i_d]
    }

    /// Cells of one `ε`, in ascending `D`.
    pub fn column(&self, i_eps: usize) -> &[SweepCell] {
        let n = self.d_values.len();
        &self.cells[i_eps * n..(i_eps + 1) * n]
    }

    fn matrix(&self, f: impl Fn(&SweepCell) -> f64) -> Vec<Vec<f64>> {
        (0..self.epsilon_values.len())
            .map(|i| self.column(i).iter().map(|c| if c.converged { f(c) } else { f64::NAN }).collect())
            .collect()
    }

    pub fn t_end_matrix(&self) -> Vec<Vec<f64>> {
        self.matrix(|c| c.t_end)
    }

    pub fn t_cross_matrix(&self) -> Vec<Vec<f64>> {
        self.matrix(|c| c.t_cross)
    }

    pub fn big_m_matrix(&self) -> Vec<Vec<f64>> {
        self.matrix(|c| c.big_m)
    }
}

/// `n` log-spaced values on `[a, b]`.
pub fn log_space(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    let (la, lb) = (a.ln(), b.ln());
    (0..n)
        .map(|i| {
            if i == 0 {
                a
            } else if i == n - 1 {
                b
            } else {
                (la + (lb - la) * i as f64 / (n - 1) as f64).exp()
            }
        })
        .collect()
}

pub fn lin_space(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    (0..n)
        .map(|i| if i == n - 1 { b } else { a + (b - a) * i as f64 / (n - 1) as f64 })
        .collect()
}

fn sweep_column(epsilon: f64, d_values: &[f64], base: &ModelParams) -> Vec<SweepCell> {
    let failed = |d: f64| SweepCell {
        epsilon,
        diffusion: d,
        t_end: f64::NAN,
        t_cross: f64::NAN,
        big_m: f64::NAN,
        converged: false,
    };
    let d_max = d_values.iter().cloned().fold(f64::MIN, f64::max);
    let params = base.with_epsilon(epsilon).with_diffusion(d_max);
    let steps = match seeding_steps(&params, &ContinuationSetup::default()) {
        Ok(s) => s,
        Err(err) => {
            log::warn!("sweep column ε = {epsilon}: seeding failed: {err}");
            return d_values.iter().map(|&d| failed(d)).collect();
        }
    };
    let manifold = separatrix_for(&params, STEP3_TARGET);
    let setup = ContinuationSetup::optimal_time();
    let mut order: Vec<usize> = (0..d_values.len()).collect();
    order.sort_by(|&a, &b| d_values[b].total_cmp(&d_values[a]));
    let mut cells: Vec<SweepCell> = d_values.iter().map(|&d| failed(d)).collect();
    let mut cur = steps.root.solution;
    for i in order {
        let d = d_values[i];
        match continue_in(Param::Diffusion, d, &cur, &setup) {
            Ok(run) => {
                cur = run.last;
                let t_cross = manifold
                    .as_ref()
                    .ok()
                    .and_then(|m| crossing_time(&cur, m).ok())
                    .unwrap_or(f64::NAN);
                cells[i] = SweepCell {
                    epsilon,
                    diffusion: d,
                    t_end: cur.t_end,
                    t_cross,
                    big_m: cur.big_m,
                    converged: true,
                };
            }
            Err(err) => log::warn!("sweep cell (ε = {epsilon}, D = {d}) failed: {err}"),
        }
    }
    cells
}

/// `T_end`, `t_cross` and `M` of the optimal path on an `ε × D` grid.
/// Columns run concurrently on the current rayon pool.
pub fn sweep_epsilon_d(epsilon_values: &[f64], d_values: &[f64], base: &ModelParams) -> SweepGrid {
    let columns: Vec<Vec<SweepCell>> = epsilon_values
        .par_iter()
        .map(|&eps| sweep_column(eps, d_values, base))
        .collect();
    SweepGrid {
        epsilon_values: epsilon_values.to_vec(),
        d_values: d_values.to_vec(),
        cells: columns.into_iter().flatten().collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub n: usize,
}

/// Least-squares line through `(x, y)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Option<LinearFit> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let r_squared = if syy == 0.0 { 1.0 } else { 1.0 - ss_res / syy };
    Some(LinearFit {
        slope,
        intercept,
        r_squared,
        n,
    })
}

/// Minimum number of converged cells per `ε` for [`delay_law_fit`].
pub const DELAY_FIT_MIN_POINTS: usize = 10;

/// Per-`ε` fit of `t_cross` against `ln(1/√(2D))` over cells with `D` in
/// `d_range`.
pub fn delay_law_fit(grid: &SweepGrid, d_range: (f64, f64)) -> Result<Vec<LinearFit>, ContinuationError> {
    (0..grid.epsilon_values.len())
        .map(|i| {
            let (x, y): (Vec<f64>, Vec<f64>) = grid
                .column(i)
                .iter()
                .filter(|c| c.converged && c.t_cross.is_finite())
                .filter(|c| c.diffusion >= d_range.0 * (1.0 - 1e-12) && c.diffusion <= d_range.1 * (1.0 + 1e-12))
                .map(|c| ((1.0 / (2.0 * c.diffusion).sqrt()).ln(), c.t_cross))
                .unzip();
            if x.len() < DELAY_FIT_MIN_POINTS {
                return Err(ContinuationError::InsufficientPoints {
                    needed: DELAY_FIT_MIN_POINTS,
                    got: x.len(),
                });
            }
            linear_fit(&x, &y).ok_or(ContinuationError::InsufficientPoints { needed: 2, got: x.len() })
        })
        .collect()
}

/// Default `ε` axis of the sweep.
pub fn default_epsilon_axis() -> Vec<f64> {
    lin_space(1.05, 1.25, 11)
}

/// Default `D` axis of the sweep.
pub fn default_d_axis() -> Vec<f64> {
    log_space(1e-3, 1e-1, 40)
}
