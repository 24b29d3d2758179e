//! Most likely escape path: the Euler–Lagrange boundary-value problem on
//! the rescaled interval `τ ∈ [0, 1]`, `t = t₀ + τ (T_end − t₀)`, extended
//! by the ramp ODE and the derivatives `z = ∂(x₁, x₂, λ)/∂T_end`.
//!
//! States `y = (x₁, x₂, λ, z₁, z₂, z₃)`, with `S = T_end − t₀`:
//!
//! ```text
//! x₁' = x₂ S                 z₁' = x₂ + z₂ S
//! x₂' = h₂ S T_init          z₂' = T_init (h₂ + (∂ₓh₂ z₁ + ∂_λh₂ z₃) S)
//! λ'  = h₃ S                 z₃' = h₃ + h₃' z₃ S
//! ```
//!
//! Boundary conditions: `x₁(0) = x₀`, `λ(0) = λ(t₀)`, `z₁(0) = z₃(0) = 0`,
//! `x₁(1) = x_T`, `z₁(1) = 0`.
//!
//! Discretisation: continuous piecewise polynomials of degree 4 represented
//! by their values at 5 equally spaced points per mesh interval, collocated
//! at the 4 Gauss–Legendre points. Free scalar parameters enter through a
//! bordered Newton system solved by block elimination.

use serde::Serialize;
use thiserror::Error;

use crate::linalg::{BandMatrix, DenseLu, LinalgError};
use crate::model::{self, ModelError, ModelParams};

pub const NDIM: usize = 6;
/// Polynomial degree per interval.
pub const DEGREE: usize = 4;
pub const DEFAULT_INTERVALS: usize = 200;

pub const X1: usize = 0;
pub const X2: usize = 1;
pub const LAM: usize = 2;
pub const Z1: usize = 3;
pub const Z2: usize = 4;
pub const Z3: usize = 5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BvpError {
    #[error("Newton iteration diverged (last residual {last_residual:e})")]
    NewtonDiverged { last_residual: f64 },
    #[error("singular Jacobian: {0}")]
    SingularJacobian(#[from] LinalgError),
    #[error("no convergence after {iterations} Newton iterations (residual {residual:e})")]
    MaxIterations { iterations: usize, residual: f64 },
    #[error("invalid problem: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Scalar parameters of the path problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Param {
    TEnd,
    TInit,
    XTarget,
    Epsilon,
    Diffusion,
}

impl Param {
    pub fn name(&self) -> &'static str {
        match self {
            Param::TEnd => "T_end",
            Param::TInit => "T_init",
            Param::XTarget => "x_T",
            Param::Epsilon => "epsilon",
            Param::Diffusion => "D",
        }
    }
}

/// Gauss–Legendre nodes on `[0, 1]` (4 points) and weights.
const GAUSS4: [(f64, f64); 4] = [
    (0.069_431_844_202_973_71, 0.173_927_422_568_726_93),
    (0.330_009_478_207_571_87, 0.326_072_577_431_273_07),
    (0.669_990_521_792_428_1, 0.326_072_577_431_273_07),
    (0.930_568_155_797_026_3, 0.173_927_422_568_726_93),
];

/// Gauss–Legendre nodes on `[0, 1]` (8 points) and weights.
const GAUSS8: [(f64, f64); 8] = [
    (0.019_855_071_751_231_856, 0.050_614_268_145_188_13),
    (0.101_666_761_293_186_6, 0.111_190_517_226_687_24),
    (0.237_233_795_041_835_5, 0.156_853_322_938_943_64),
    (0.408_282_678_752_175_1, 0.181_341_891_689_181),
    (0.591_717_321_247_825, 0.181_341_891_689_181),
    (0.762_766_204_958_164_5, 0.156_853_322_938_943_64),
    (0.898_333_238_706_813_4, 0.111_190_517_226_687_24),
    (0.980_144_928_248_768_1, 0.050_614_268_145_188_13),
];

/// Lagrange basis on the equally spaced points `i/DEGREE`.
fn lagrange(s: f64) -> [f64; DEGREE + 1] {
    let nodes: [f64; DEGREE + 1] = std::array::from_fn(|i| i as f64 / DEGREE as f64);
    std::array::from_fn(|i| {
        let mut v = 1.0;
        for (j, &sj) in nodes.iter().enumerate() {
            if j != i {
                v *= (s - sj) / (nodes[i] - sj);
            }
        }
        v
    })
}

fn lagrange_deriv(s: f64) -> [f64; DEGREE + 1] {
    let nodes: [f64; DEGREE + 1] = std::array::from_fn(|i| i as f64 / DEGREE as f64);
    std::array::from_fn(|i| {
        let mut total = 0.0;
        for k in 0..=DEGREE {
            if k == i {
                continue;
            }
            let mut v = 1.0 / (nodes[i] - nodes[k]);
            for (j, &sj) in nodes.iter().enumerate() {
                if j != i && j != k {
                    v *= (s - sj) / (nodes[i] - sj);
                }
            }
            total += v;
        }
        total
    })
}

/// Mesh on `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CollocationMesh {
    pub nodes: Vec<f64>,
}

impl CollocationMesh {
    pub fn uniform(n_intervals: usize) -> Self {
        Self {
            nodes: (0..=n_intervals).map(|i| i as f64 / n_intervals as f64).collect(),
        }
    }

    pub fn n_intervals(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn validate(&self) -> Result<(), BvpError> {
        let n = self.nodes.len();
        if n < 21 {
            return Err(BvpError::Invalid(format!("need at least 20 intervals, got {}", n.saturating_sub(1))));
        }
        if self.nodes[0] != 0.0 || self.nodes[n - 1] != 1.0 {
            return Err(BvpError::Invalid("mesh must span [0, 1]".into()));
        }
        if self.nodes.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(BvpError::Invalid("mesh nodes must increase".into()));
        }
        Ok(())
    }

    /// Interval containing `tau` and the local coordinate in `[0, 1]`.
    fn locate(&self, tau: f64) -> (usize, f64) {
        let n = self.n_intervals();
        let j = self.nodes.partition_point(|&x| x <= tau).clamp(1, n) - 1;
        let (a, b) = (self.nodes[j], self.nodes[j + 1]);
        (j, ((tau - a) / (b - a)).clamp(0.0, 1.0))
    }
}

/// Right-hand side of the extended system.
pub fn rhs_extended(y: &[f64; NDIM], t_end: f64, t_init: f64, params: &ModelParams) -> [f64; NDIM] {
    let s = t_end - params.t0;
    let (x1, x2, lam, z1, z2, z3) = (y[0], y[1], y[2], y[3], y[4], y[5]);
    let ramp = &params.ramp;
    let d = params.diffusion;
    let h2 = model::h2_at(x1, lam, ramp, d);
    let hp = model::h2_partials(x1, lam, ramp, d);
    let h3 = ramp.h3(lam);
    let h3p = ramp.h3_prime(lam);
    [
        x2 * s,
        h2 * s * t_init,
        h3 * s,
        x2 + z2 * s,
        t_init * (h2 + (hp.dx * z1 + hp.dlam * z3) * s),
        h3 + h3p * z3 * s,
    ]
}

/// Jacobian of [`rhs_extended`] with respect to the state.
pub fn jacobian_extended(y: &[f64; NDIM], t_end: f64, t_init: f64, params: &ModelParams) -> [[f64; NDIM]; NDIM] {
    let s = t_end - params.t0;
    let (x1, lam, z1, z3) = (y[0], y[2], y[3], y[5]);
    let ramp = &params.ramp;
    let hp = model::h2_partials(x1, lam, ramp, params.diffusion);
    let h3p = ramp.h3_prime(lam);
    let h3pp = -2.0 * ramp.epsilon;
    let mut j = [[0.0; NDIM]; NDIM];
    j[0][1] = s;
    j[1][0] = hp.dx * s * t_init;
    j[1][2] = hp.dlam * s * t_init;
    j[2][2] = h3p * s;
    j[3][1] = 1.0;
    j[3][4] = s;
    j[4][0] = t_init * (hp.dx + (hp.dxx * z1 + hp.dxlam * z3) * s);
    j[4][2] = t_init * (hp.dlam + (hp.dxlam * z1 + hp.dlamlam * z3) * s);
    j[4][3] = t_init * hp.dx * s;
    j[4][5] = t_init * hp.dlam * s;
    j[5][2] = h3p + h3pp * z3 * s;
    j[5][5] = h3p * s;
    j
}

/// A discrete path: polynomial values at the `DEGREE + 1` equally spaced
/// points of every interval (shared at the mesh nodes).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathSolution {
    pub mesh: CollocationMesh,
    /// Flat point values, `NDIM` per point, `DEGREE · n_intervals + 1` points.
    pub u: Vec<f64>,
    pub t_end: f64,
    pub t_init: f64,
    pub params: ModelParams,
    /// `M` at this solution.
    pub big_m: f64,
    /// `m` at this solution.
    pub m: f64,
    pub newton_iterations: usize,
    pub residual: f64,
}

impl PathSolution {
    pub fn n_points(&self) -> usize {
        self.u.len() / NDIM
    }

    pub fn point(&self, p: usize) -> [f64; NDIM] {
        std::array::from_fn(|c| self.u[p * NDIM + c])
    }

    /// Component `c` at the mesh nodes.
    pub fn node_values(&self, c: usize) -> Vec<f64> {
        (0..=self.mesh.n_intervals())
            .map(|j| self.u[j * DEGREE * NDIM + c])
            .collect()
    }

    pub fn x1(&self) -> Vec<f64> {
        self.node_values(X1)
    }
    pub fn x2(&self) -> Vec<f64> {
        self.node_values(X2)
    }
    pub fn lam(&self) -> Vec<f64> {
        self.node_values(LAM)
    }
    pub fn z1(&self) -> Vec<f64> {
        self.node_values(Z1)
    }
    pub fn z2(&self) -> Vec<f64> {
        self.node_values(Z2)
    }
    pub fn z3(&self) -> Vec<f64> {
        self.node_values(Z3)
    }

    pub fn span(&self) -> f64 {
        self.t_end - self.params.t0
    }

    /// Physical time of `τ`.
    pub fn time(&self, tau: f64) -> f64 {
        self.params.t0 + tau * self.span()
    }

    /// State at `τ` from the collocation polynomial.
    pub fn eval(&self, tau: f64) -> [f64; NDIM] {
        let (j, s) = self.mesh.locate(tau);
        let l = lagrange(s);
        let base = j * DEGREE;
        std::array::from_fn(|c| (0..=DEGREE).map(|i| l[i] * self.u[(base + i) * NDIM + c]).sum())
    }

    /// `dy/dτ` at `τ` from the collocation polynomial.
    pub fn eval_deriv(&self, tau: f64) -> [f64; NDIM] {
        let (j, s) = self.mesh.locate(tau);
        let h = self.mesh.nodes[j + 1] - self.mesh.nodes[j];
        let l = lagrange_deriv(s);
        let base = j * DEGREE;
        std::array::from_fn(|c| (0..=DEGREE).map(|i| l[i] * self.u[(base + i) * NDIM + c]).sum::<f64>() / h)
    }

    /// `x₁` at physical time `t`; `None` outside `[t₀, T_end]`.
    pub fn x1_at_time(&self, t: f64) -> Option<f64> {
        let tau = (t - self.params.t0) / self.span();
        if !(-1e-12..=1.0 + 1e-12).contains(&tau) {
            return None;
        }
        Some(self.eval(tau.clamp(0.0, 1.0))[X1])
    }

    pub fn get(&self, p: Param) -> f64 {
        match p {
            Param::TEnd => self.t_end,
            Param::TInit => self.t_init,
            Param::XTarget => self.params.x_target,
            Param::Epsilon => self.params.ramp.epsilon,
            Param::Diffusion => self.params.diffusion,
        }
    }

    pub fn set(&mut self, p: Param, v: f64) {
        match p {
            Param::TEnd => self.t_end = v,
            Param::TInit => self.t_init = v,
            Param::XTarget => self.params.x_target = v,
            Param::Epsilon => self.params.ramp.epsilon = v,
            Param::Diffusion => self.params.diffusion = v,
        }
    }

    /// The linear problem at `T_init = 0`: straight line from `x₀` to `x_T`,
    /// exact ramp, `z₃ = τ h₃(λ)`.
    pub fn trivial_seed(params: &ModelParams, t_end: f64, n_intervals: usize) -> Self {
        let mesh = CollocationMesh::uniform(n_intervals);
        let s = t_end - params.t0;
        let slope = (params.x_target - params.x0) / s;
        let np = DEGREE * n_intervals + 1;
        let mut u = vec![0.0; np * NDIM];
        for p in 0..np {
            let tau = p as f64 / (np - 1) as f64;
            let lam = params.lambda(params.t0 + tau * s);
            let y = &mut u[p * NDIM..(p + 1) * NDIM];
            y[X1] = params.x0 + (params.x_target - params.x0) * tau;
            y[X2] = slope;
            y[LAM] = lam;
            y[Z1] = 0.0;
            y[Z2] = -slope / s;
            y[Z3] = tau * params.ramp.h3(lam);
        }
        let mut sol = Self {
            mesh,
            u,
            t_end,
            t_init: 0.0,
            params: *params,
            big_m: f64::NAN,
            m: f64::NAN,
            newton_iterations: 0,
            residual: f64::NAN,
        };
        sol.refresh_functionals();
        sol
    }

    pub fn refresh_functionals(&mut self) {
        self.big_m = functional_big_m(self);
        self.m = functional_m(self);
    }

    /// Re-represents the solution on another mesh by polynomial evaluation.
    pub fn remesh(&self, mesh: CollocationMesh) -> Self {
        let n = mesh.n_intervals();
        let np = DEGREE * n + 1;
        let mut u = vec![0.0; np * NDIM];
        for j in 0..n {
            let (a, b) = (mesh.nodes[j], mesh.nodes[j + 1]);
            for i in 0..DEGREE {
                let y = self.eval(a + (b - a) * i as f64 / DEGREE as f64);
                u[(j * DEGREE + i) * NDIM..(j * DEGREE + i + 1) * NDIM].copy_from_slice(&y);
            }
        }
        let last = self.eval(1.0);
        u[(np - 1) * NDIM..].copy_from_slice(&last);
        Self {
            mesh,
            u,
            ..self.clone()
        }
    }
}

/// `∫₀¹ φ(y(τ)) dτ` by Gauss quadrature on every interval.
fn quadrature(path: &PathSolution, rule: &[(f64, f64)], phi: &dyn Fn(&[f64; NDIM]) -> f64) -> f64 {
    let mut parts = Vec::with_capacity(path.mesh.n_intervals());
    for j in 0..path.mesh.n_intervals() {
        let (a, b) = (path.mesh.nodes[j], path.mesh.nodes[j + 1]);
        let base = j * DEGREE;
        let mut acc = 0.0;
        for &(g, w) in rule {
            let l = lagrange(g);
            let y: [f64; NDIM] = std::array::from_fn(|c| (0..=DEGREE).map(|i| l[i] * path.u[(base + i) * NDIM + c]).sum());
            acc += w * phi(&y);
        }
        parts.push(acc * (b - a));
    }
    crate::fokker_planck::pairwise_sum(&parts)
}

fn m_integrand(y: &[f64; NDIM], s: f64, params: &ModelParams) -> f64 {
    let (x1, x2, lam, z1, z2, z3) = (y[0], y[1], y[2], y[3], y[4], y[5]);
    let ramp = &params.ramp;
    let d = params.diffusion;
    let vs = model::v_s_at(x1, lam, ramp, d);
    let h2 = model::h2_at(x1, lam, ramp, d);
    let vsl = model::v_s_lambda(x1, lam, ramp, d);
    x2 * x2 + 4.0 * d * vs + 2.0 * s * (x2 * z2 + h2 * z1) + 4.0 * d * s * vsl * z3
}

fn m_boundary(lam_end: f64, params: &ModelParams) -> f64 {
    2.0 * model::potential_lambda(params.x_target, lam_end) * params.ramp.h3(lam_end)
}

fn big_m_boundary(lam_start: f64, lam_end: f64, params: &ModelParams) -> f64 {
    (model::potential(params.x0, lam_start) - model::potential(params.x_target, lam_end)) / (2.0 * params.diffusion)
}

fn big_m_with(path: &PathSolution, rule: &[(f64, f64)], quadratic: bool) -> f64 {
    let p = path.params;
    let s = path.span();
    let d = p.diffusion;
    let first = path.point(0);
    let last = path.point(path.n_points() - 1);
    let integral = quadrature(path, rule, &|y| {
        let kinetic = if quadratic { y[X2] * y[X2] } else { y[X2] };
        (kinetic / (4.0 * d) + model::v_s_at(y[X1], y[LAM], &p.ramp, d)) * s
    });
    big_m_boundary(first[LAM], last[LAM], &p) - integral
}

/// `M = log F = (U(x₀, λ(t₀)) − U(x_T, λ(T_end)))/2D − ∫ (x₂²/4D + V_s) S dτ`.
pub fn functional_big_m(path: &PathSolution) -> f64 {
    big_m_with(path, &GAUSS4, true)
}

/// [`functional_big_m`] with the 8-point rule.
pub fn functional_big_m_refined(path: &PathSolution) -> f64 {
    big_m_with(path, &GAUSS8, true)
}

/// `M` with `x₂` in place of `x₂²` in the kinetic term.
pub fn functional_big_m_linear_kinetic(path: &PathSolution) -> f64 {
    big_m_with(path, &GAUSS4, false)
}

/// `m = −4D dM/dT_end`.
pub fn functional_m(path: &PathSolution) -> f64 {
    let p = path.params;
    let s = path.span();
    let last = path.point(path.n_points() - 1);
    m_boundary(last[LAM], &p) + quadrature(path, &GAUSS4, &|y| m_integrand(y, s, &p))
}

/// The stationarity integral with the alternative coefficients
/// `(z₂ + 2h₂z₁ + V_{s,λ}z₃) S` and the linear kinetic term `x₂`.
pub fn functional_m_alternative(path: &PathSolution) -> f64 {
    let p = path.params;
    let s = path.span();
    let d = p.diffusion;
    let last = path.point(path.n_points() - 1);
    m_boundary(last[LAM], &p)
        + quadrature(path, &GAUSS4, &|y| {
            let (x1, x2, lam, z1, z2, z3) = (y[0], y[1], y[2], y[3], y[4], y[5]);
            let h2 = model::h2_at(x1, lam, &p.ramp, d);
            let vsl = model::v_s_lambda(x1, lam, &p.ramp, d);
            (z2 + 2.0 * h2 * z1 + vsl * z3) * s + x2 + 4.0 * d * model::v_s_at(x1, lam, &p.ramp, d)
        })
}

/// Extra scalar equations for the bordered system.
#[derive(Debug, Clone, PartialEq)]
pub enum Constraint {
    /// `m = 0`.
    MZero,
    /// `⟨u − u₀, u̇⟩ + Σ (p − p₀) ṗ − Δs = 0` over the free parameters.
    Arclength {
        base_u: Vec<f64>,
        base_p: Vec<f64>,
        tangent_u: Vec<f64>,
        tangent_p: Vec<f64>,
        ds: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iterations: usize,
    /// Mesh adaptations after convergence (each followed by a re-solve).
    pub adapt: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iterations: 50,
            adapt: 1,
        }
    }
}

struct Workspace {
    basis: [[f64; DEGREE + 1]; DEGREE],
    dbasis: [[f64; DEGREE + 1]; DEGREE],
}

impl Workspace {
    fn new() -> Self {
        Self {
            basis: std::array::from_fn(|k| lagrange(GAUSS4[k].0)),
            dbasis: std::array::from_fn(|k| lagrange_deriv(GAUSS4[k].0)),
        }
    }
}

/// Residual of the collocation equations and boundary conditions, ordered
/// left conditions, collocation rows, right conditions.
fn residual(sol: &PathSolution, ws: &Workspace, out: &mut Vec<f64>) {
    let n = sol.mesh.n_intervals();
    let p = &sol.params;
    out.clear();
    let first = sol.point(0);
    let last = sol.point(sol.n_points() - 1);
    out.push(first[X1] - p.x0);
    out.push(first[LAM] - p.lambda(p.t0));
    out.push(first[Z1]);
    out.push(first[Z3]);
    for j in 0..n {
        let h = sol.mesh.nodes[j + 1] - sol.mesh.nodes[j];
        let base = j * DEGREE;
        for k in 0..DEGREE {
            let y: [f64; NDIM] = std::array::from_fn(|c| {
                (0..=DEGREE).map(|i| ws.basis[k][i] * sol.u[(base + i) * NDIM + c]).sum()
            });
            let f = rhs_extended(&y, sol.t_end, sol.t_init, p);
            for c in 0..NDIM {
                let dy: f64 = (0..=DEGREE).map(|i| ws.dbasis[k][i] * sol.u[(base + i) * NDIM + c]).sum();
                out.push(dy - h * f[c]);
            }
        }
    }
    out.push(last[X1] - p.x_target);
    out.push(last[Z1]);
}

fn band_jacobian(sol: &PathSolution, ws: &Workspace) -> BandMatrix {
    let n = sol.mesh.n_intervals();
    let nu = sol.u.len();
    let kl = NDIM * DEGREE + 3;
    let ku = NDIM * DEGREE + 1;
    let mut a = BandMatrix::zeros(nu, kl, ku);
    let p = &sol.params;
    a.set(0, X1, 1.0);
    a.set(1, LAM, 1.0);
    a.set(2, Z1, 1.0);
    a.set(3, Z3, 1.0);
    let mut row = 4;
    for j in 0..n {
        let h = sol.mesh.nodes[j + 1] - sol.mesh.nodes[j];
        let base = j * DEGREE;
        for k in 0..DEGREE {
            let y: [f64; NDIM] = std::array::from_fn(|c| {
                (0..=DEGREE).map(|i| ws.basis[k][i] * sol.u[(base + i) * NDIM + c]).sum()
            });
            let jac = jacobian_extended(&y, sol.t_end, sol.t_init, p);
            for c in 0..NDIM {
                for i in 0..=DEGREE {
                    let col0 = (base + i) * NDIM;
                    a.add(row + c, col0 + c, ws.dbasis[k][i]);
                    for (cc, &jv) in jac[c].iter().enumerate() {
                        if jv != 0.0 {
                            a.add(row + c, col0 + cc, -h * ws.basis[k][i] * jv);
                        }
                    }
                }
            }
            row += NDIM;
        }
    }
    a.set(row, nu - NDIM + X1, 1.0);
    a.set(row + 1, nu - NDIM + Z1, 1.0);
    a
}

/// Value and gradient (with respect to `u`) of an extra equation.
fn constraint_value(c: &Constraint, sol: &PathSolution, free: &[Param]) -> f64 {
    match c {
        Constraint::MZero => functional_m(sol),
        Constraint::Arclength {
            base_u,
            base_p,
            tangent_u,
            tangent_p,
            ds,
        } => {
            let du: f64 = sol.u.iter().zip(base_u).zip(tangent_u).map(|((u, b), t)| (u - b) * t).sum();
            let dp: f64 = free
                .iter()
                .zip(base_p)
                .zip(tangent_p)
                .map(|((p, b), t)| (sol.get(*p) - b) * t)
                .sum();
            du + dp - ds
        }
    }
}

fn constraint_gradient(c: &Constraint, sol: &PathSolution, ws: &Workspace) -> Vec<f64> {
    match c {
        Constraint::Arclength { tangent_u, .. } => tangent_u.clone(),
        Constraint::MZero => {
            let p = sol.params;
            let s = sol.span();
            let mut g = vec![0.0; sol.u.len()];
            for j in 0..sol.mesh.n_intervals() {
                let h = sol.mesh.nodes[j + 1] - sol.mesh.nodes[j];
                let base = j * DEGREE;
                for k in 0..DEGREE {
                    let w = GAUSS4[k].1 * h;
                    let y: [f64; NDIM] = std::array::from_fn(|c| {
                        (0..=DEGREE).map(|i| ws.basis[k][i] * sol.u[(base + i) * NDIM + c]).sum()
                    });
                    let phi0 = m_integrand(&y, s, &p);
                    for c in 0..NDIM {
                        let d = 1e-7 * (1.0 + y[c].abs());
                        let mut yp = y;
                        yp[c] += d;
                        let mut ym = y;
                        ym[c] -= d;
                        let dphi = if matches!(c, Z1 | Z2 | Z3) {
                            // Linear in z.
                            (m_integrand(&yp, s, &p) - phi0) / d
                        } else {
                            (m_integrand(&yp, s, &p) - m_integrand(&ym, s, &p)) / (2.0 * d)
                        };
                        for i in 0..=DEGREE {
                            g[(base + i) * NDIM + c] += w * dphi * ws.basis[k][i];
                        }
                    }
                }
            }
            let nu = sol.u.len();
            let lam_end = sol.u[nu - NDIM + LAM];
            let d = 1e-7 * (1.0 + lam_end.abs());
            g[nu - NDIM + LAM] += (m_boundary(lam_end + d, &p) - m_boundary(lam_end - d, &p)) / (2.0 * d);
            g
        }
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |a, x| a.max(x.abs()))
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Full residual including extra equations.
fn full_residual(sol: &PathSolution, free: &[Param], constraints: &[Constraint], ws: &Workspace, out: &mut Vec<f64>) {
    residual(sol, ws, out);
    for c in constraints {
        out.push(constraint_value(c, sol, free));
    }
}

/// Newton's method on the collocation system with `free` parameters
/// determined by the extra `constraints`.
pub fn newton(
    guess: &PathSolution,
    free: &[Param],
    constraints: &[Constraint],
    opts: &SolveOptions,
) -> Result<PathSolution, BvpError> {
    if free.len() != constraints.len() {
        return Err(BvpError::Invalid(format!(
            "{} free parameters for {} extra equations",
            free.len(),
            constraints.len()
        )));
    }
    guess.mesh.validate()?;
    guess.params.ramp.validate()?;
    let ws = Workspace::new();
    let mut sol = guess.clone();
    let nu = sol.u.len();
    let k = free.len();
    let mut r = Vec::with_capacity(nu + k);
    full_residual(&sol, free, constraints, &ws, &mut r);
    let mut rnorm = norm2(&r);
    for iter in 0..opts.max_iterations {
        let rmax = max_abs(&r);
        if !rmax.is_finite() {
            return Err(BvpError::NewtonDiverged { last_residual: rmax });
        }
        if rmax < opts.tol {
            sol.newton_iterations = iter;
            sol.residual = rmax;
            sol.refresh_functionals();
            return Ok(sol);
        }
        // Parameter columns and extra rows.
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k);
        let mut rp = Vec::with_capacity(nu + k);
        for &p in free {
            let v = sol.get(p);
            let d = 1e-7 * (1.0 + v.abs());
            let mut pert = sol.clone();
            pert.set(p, v + d);
            full_residual(&pert, free, constraints, &ws, &mut rp);
            cols.push(rp.iter().zip(&r).map(|(a, b)| (a - b) / d).collect());
        }
        let rows: Vec<Vec<f64>> = constraints.iter().map(|c| constraint_gradient(c, &sol, &ws)).collect();
        let lu = band_jacobian(&sol, &ws).factor()?;
        // Block elimination: A X = B, S = D − C X.
        let mut y = r[..nu].to_vec();
        lu.solve_in_place(&mut y);
        let mut xs: Vec<Vec<f64>> = cols
            .iter()
            .map(|c| {
                let mut v = c[..nu].to_vec();
                lu.solve_in_place(&mut v);
                v
            })
            .collect();
        let mut delta_p = vec![0.0; k];
        if k > 0 {
            let mut schur = vec![0.0; k * k];
            let mut rhs = vec![0.0; k];
            for a in 0..k {
                let dot = |v: &[f64]| rows[a].iter().zip(v).map(|(g, x)| g * x).sum::<f64>();
                rhs[a] = r[nu + a] - dot(&y);
                for b in 0..k {
                    schur[a * k + b] = cols[b][nu + a] - dot(&xs[b]);
                }
            }
            let slu = DenseLu::factor(k, schur)?;
            slu.solve_in_place(&mut rhs);
            delta_p = rhs;
        }
        // du = A⁻¹(r − B dp); the Newton step is the negative of (du, dp).
        for (b, xb) in xs.iter_mut().enumerate() {
            for (yi, xi) in y.iter_mut().zip(xb.iter()) {
                *yi -= delta_p[b] * xi;
            }
        }
        let mut step = 1.0;
        let mut accepted = false;
        let mut trial = sol.clone();
        for _ in 0..12 {
            for i in 0..nu {
                trial.u[i] = sol.u[i] - step * y[i];
            }
            for (b, &p) in free.iter().enumerate() {
                trial.set(p, sol.get(p) - step * delta_p[b]);
            }
            full_residual(&trial, free, constraints, &ws, &mut rp);
            let tn = norm2(&rp);
            if tn.is_finite() && tn <= (1.0 - 1e-4 * step) * rnorm {
                accepted = true;
                rnorm = tn;
                std::mem::swap(&mut r, &mut rp);
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // Near the rounding floor the line search cannot make progress.
            if max_abs(&r) < 1e3 * opts.tol {
                sol.newton_iterations = iter;
                sol.residual = max_abs(&r);
                sol.refresh_functionals();
                return Ok(sol);
            }
            return Err(BvpError::NewtonDiverged {
                last_residual: max_abs(&r),
            });
        }
        sol = trial;
    }
    let rmax = max_abs(&r);
    if rmax < opts.tol {
        sol.newton_iterations = opts.max_iterations;
        sol.residual = rmax;
        sol.refresh_functionals();
        return Ok(sol);
    }
    Err(BvpError::MaxIterations {
        iterations: opts.max_iterations,
        residual: rmax,
    })
}

/// Mesh that equidistributes the estimated `(DEGREE+1)`-th derivative of
/// the path components.
pub fn adapted_mesh(sol: &PathSolution) -> CollocationMesh {
    let n = sol.mesh.n_intervals();
    let nodes = &sol.mesh.nodes;
    // DEGREE-th derivative per interval (constant) from finite differences of
    // the equally spaced values.
    let binom: [f64; DEGREE + 1] = [1.0, -4.0, 6.0, -4.0, 1.0];
    let mut dk = vec![[0.0; NDIM]; n];
    for j in 0..n {
        let h = (nodes[j + 1] - nodes[j]) / DEGREE as f64;
        let hk = h.powi(DEGREE as i32);
        for c in 0..NDIM {
            let mut acc = 0.0;
            for (i, b) in binom.iter().enumerate() {
                acc += b * sol.u[(j * DEGREE + DEGREE - i) * NDIM + c];
            }
            dk[j][c] = acc / hk;
        }
    }
    // Jumps across nodes give the next derivative.
    let mut node_est = vec![0.0; n + 1];
    for i in 1..n {
        let w = 0.5 * (nodes[i + 1] - nodes[i - 1]);
        let mut s2 = 0.0;
        for c in [X1, X2, LAM] {
            let v = (dk[i][c] - dk[i - 1][c]) / w;
            s2 += v * v;
        }
        node_est[i] = s2.sqrt();
    }
    node_est[0] = node_est[1];
    node_est[n] = node_est[n - 1];
    let mut density: Vec<f64> = (0..n)
        .map(|j| (0.5 * (node_est[j] + node_est[j + 1])).powf(1.0 / (DEGREE as f64 + 1.0)))
        .collect();
    let widths: Vec<f64> = (0..n).map(|j| nodes[j + 1] - nodes[j]).collect();
    let total: f64 = density.iter().zip(&widths).map(|(d, w)| d * w).sum();
    if !(total > 0.0) || !total.is_finite() {
        return sol.mesh.clone();
    }
    // Keep a uniform floor so quiet stretches are not starved.
    let floor = 0.2 * total;
    for d in density.iter_mut() {
        *d += floor;
    }
    let mut cum = vec![0.0; n + 1];
    for j in 0..n {
        cum[j + 1] = cum[j] + density[j] * widths[j];
    }
    let total = cum[n];
    let mut new_nodes = Vec::with_capacity(n + 1);
    new_nodes.push(0.0);
    let mut j = 0;
    for i in 1..n {
        let target = total * i as f64 / n as f64;
        while cum[j + 1] < target {
            j += 1;
        }
        let frac = (target - cum[j]) / (cum[j + 1] - cum[j]);
        new_nodes.push(nodes[j] + frac * widths[j]);
    }
    new_nodes.push(1.0);
    CollocationMesh { nodes: new_nodes }
}

/// [`newton`] followed by `opts.adapt` rounds of mesh adaptation and
/// re-solution.
pub fn solve_bvp(
    guess: &PathSolution,
    free: &[Param],
    constraints: &[Constraint],
    opts: &SolveOptions,
) -> Result<PathSolution, BvpError> {
    let mut sol = newton(guess, free, constraints, opts)?;
    for _ in 0..opts.adapt {
        if constraints.iter().any(|c| matches!(c, Constraint::Arclength { .. })) {
            break;
        }
        let mesh = adapted_mesh(&sol);
        let moved = mesh
            .nodes
            .iter()
            .zip(&sol.mesh.nodes)
            .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        if moved < 1e-3 / sol.mesh.n_intervals() as f64 {
            break;
        }
        sol = newton(&sol.remesh(mesh), free, constraints, opts)?;
    }
    Ok(sol)
}

/// Largest Euler–Lagrange residual `|d²x/dt² − h₂|` at interval midpoints.
pub fn euler_lagrange_residual(sol: &PathSolution) -> f64 {
    let s = sol.span();
    let mut worst = 0.0f64;
    for j in 0..sol.mesh.n_intervals() {
        let tau = 0.5 * (sol.mesh.nodes[j] + sol.mesh.nodes[j + 1]);
        let y = sol.eval(tau);
        let dy = sol.eval_deriv(tau);
        // x₂ = dx/dt, so d²x/dt² = x₂'(τ)/S.
        let xdd = dy[X2] / s;
        let h2 = model::h2_at(y[X1], y[LAM], &sol.params.ramp, sol.params.diffusion);
        worst = worst.max((xdd - sol.t_init * h2).abs());
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> ModelParams {
        ModelParams::default().with_epsilon(1.25).with_diffusion(0.05)
    }

    #[test]
    fn lagrange_partition_of_unity() {
        for s in [0.0, 0.13, 0.5, 0.97] {
            let l = lagrange(s);
            assert!((l.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            let d = lagrange_deriv(s);
            assert!(d.iter().sum::<f64>().abs() < 1e-12);
            // Derivative of the identity.
            let ds: f64 = d.iter().enumerate().map(|(i, v)| v * i as f64 / 4.0).sum();
            assert!((ds - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gauss_rules_integrate_polynomials() {
        for (rule, deg) in [(&GAUSS4[..], 7), (&GAUSS8[..], 15)] {
            let q: f64 = rule.iter().map(|(x, w)| w * x.powi(deg)).sum();
            assert!((q - 1.0 / (deg as f64 + 1.0)).abs() < 1e-14);
        }
    }

    #[test]
    fn t_init_zero_freezes_x2() {
        let p = params();
        let y = [-0.3, 0.7, 1.2, 0.1, -0.2, 0.4];
        assert_eq!(rhs_extended(&y, -9.0, 0.0, &p)[X2], 0.0);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let p = params();
        let y = [-0.5, 0.3, 1.0, 0.2, -0.1, 0.7];
        let j = jacobian_extended(&y, 1.5, 0.8, &p);
        for c in 0..NDIM {
            let d = 1e-6;
            let mut yp = y;
            yp[c] += d;
            let mut ym = y;
            ym[c] -= d;
            let fp = rhs_extended(&yp, 1.5, 0.8, &p);
            let fm = rhs_extended(&ym, 1.5, 0.8, &p);
            for r in 0..NDIM {
                let fd = (fp[r] - fm[r]) / (2.0 * d);
                assert!((fd - j[r][c]).abs() < 1e-6 * (1.0 + fd.abs()), "({r},{c}) {fd} vs {}", j[r][c]);
            }
        }
    }

    #[test]
    fn trivial_seed_converges_immediately() {
        let mut p = params();
        p.x_target = p.x0;
        let seed = PathSolution::trivial_seed(&p, -9.0, 40);
        let sol = newton(&seed, &[], &[], &SolveOptions::default()).unwrap();
        assert!(sol.newton_iterations <= 3);
        for x in sol.x1() {
            assert!((x + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_path_functional() {
        // x₂ ≡ 0, x_T = x₀ at the well bottom with λ ≈ 0: V_s = −1, so
        // M = S.
        let mut p = params();
        p.t0 = -60.0;
        p.x_target = p.x0;
        let sol = PathSolution::trivial_seed(&p, -59.0, 40);
        assert!((functional_big_m(&sol) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn remesh_preserves_the_polynomial() {
        let mut p = params();
        p.x_target = 0.5;
        let sol = PathSolution::trivial_seed(&p, -9.0, 30);
        let other = sol.remesh(CollocationMesh::uniform(45));
        for tau in [0.0, 0.111, 0.5, 0.9, 1.0] {
            let a = sol.eval(tau);
            let b = other.eval(tau);
            assert!((a[X1] - b[X1]).abs() < 1e-12);
            assert!((a[LAM] - b[LAM]).abs() < 1e-6);
        }
    }
}
