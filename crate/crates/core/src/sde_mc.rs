//! Euler–Maruyama ensembles of `dX = f(X, λ(t)) dt + √(2D) dW`.
//!
//! Every path owns a ChaCha8 stream selected by its index, so results do not
//! depend on how paths are spread over threads. Paths are simulated in
//! fixed-size chunks; per-chunk sums are combined pairwise in chunk order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fokker_planck::{self, FpeError, Grid1D, ThresholdCurve};
use crate::indicators::IndicatorSeries;
use crate::model::{self, drift, ModelError, ModelParams};

/// Paths per chunk.
pub const CHUNK: usize = 512;
/// Number of batches used for batch-means standard errors.
const BATCHES: usize = 32;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum McError {
    #[error("invalid ensemble configuration: {0}")]
    InvalidConfig(String),
    #[error("only {survivors} paths survive at t = {t}")]
    TooFewSurvivors { t: f64, survivors: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fpe(#[from] FpeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InitialCondition {
    Point { x0: f64 },
    /// Sampled from the stationary density at `λ₀` on the default grid.
    Stationary { lam0: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub n_paths: usize,
    pub dt_sim: f64,
    pub seed: u64,
    pub initial: InitialCondition,
    /// Escape through `x̃(t) = xᵘ(t) + y` instead of `x ≥ x_T`.
    pub threshold_y: Option<f64>,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            n_paths: 100_000,
            dt_sim: 1e-3,
            seed: 20_240_607,
            initial: InitialCondition::Point { x0: -1.0 },
            threshold_y: None,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self, params: &ModelParams) -> Result<(), McError> {
        if self.n_paths == 0 {
            return Err(McError::InvalidConfig("n_paths must be at least 1".into()));
        }
        if !(self.dt_sim > 0.0 && self.dt_sim <= params.dt * (1.0 + 1e-12)) {
            return Err(McError::InvalidConfig(format!(
                "dt_sim must lie in (0, dt = {}], got {}",
                params.dt, self.dt_sim
            )));
        }
        if let Some(y) = self.threshold_y {
            if !(y > 0.0) {
                return Err(McError::InvalidConfig(format!("threshold offset must be positive, got {y}")));
            }
        }
        Ok(())
    }
}

/// Survivor sums at one reporting time `t_n`, over the paths alive at `t_n`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct StepSums {
    n: f64,
    s1: f64,
    s2: f64,
    p1: f64,
    p2: f64,
    cross: f64,
}

impl StepSums {
    fn add(&mut self, o: &StepSums) {
        self.n += o.n;
        self.s1 += o.s1;
        self.s2 += o.s2;
        self.p1 += o.p1;
        self.p2 += o.p2;
        self.cross += o.cross;
    }

    fn mean(&self) -> f64 {
        self.s1 / self.n
    }

    fn variance(&self) -> f64 {
        let m = self.mean();
        (self.s2 / self.n - m * m).max(0.0)
    }

    fn autocorrelation(&self) -> f64 {
        let m = self.mean();
        let mp = self.p1 / self.n;
        let cov = self.cross / self.n - m * mp;
        let vp = self.p2 / self.n - mp * mp;
        cov / (vp * self.variance()).sqrt()
    }
}

fn combine_pairwise(parts: &[Vec<StepSums>]) -> Vec<StepSums> {
    match parts.len() {
        0 => Vec::new(),
        1 => parts[0].clone(),
        n => {
            let (a, b) = parts.split_at(n / 2);
            let mut left = combine_pairwise(a);
            let right = combine_pairwise(b);
            for (l, r) in left.iter_mut().zip(&right) {
                l.add(r);
            }
            left
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleResult {
    pub n_paths: usize,
    pub seed: u64,
    pub dt_sim: f64,
    /// Reporting step of the statistics.
    pub dt: f64,
    pub times: Vec<f64>,
    pub survivors: Vec<usize>,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    /// Lag-one autocorrelation over paths alive at `t_n`; `NaN` at `t_0`.
    pub autocorrelation: Vec<f64>,
    pub se_variance: Vec<f64>,
    pub se_autocorrelation: Vec<f64>,
    pub escape_fraction: f64,
    /// Escape time of each escaped path, in path order.
    pub escape_times: Vec<f64>,
    /// Final state of every path (escaped paths hold their frozen value).
    pub final_states: Vec<f64>,
}

impl EnsembleResult {
    pub fn escape_fraction_se(&self) -> f64 {
        let p = self.escape_fraction;
        (p * (1.0 - p) / self.n_paths as f64).sqrt()
    }
}

struct ChunkOutput {
    sums: Vec<StepSums>,
    escape_times: Vec<(usize, f64)>,
    finals: Vec<f64>,
}

/// Inverse-CDF sampler of the stationary density.
struct StationarySampler {
    x: Vec<f64>,
    cdf: Vec<f64>,
}

impl StationarySampler {
    fn new(lam0: f64, diffusion: f64) -> Result<Self, FpeError> {
        let grid = Grid1D::default();
        let d = fokker_planck::stationary_density(lam0, diffusion, &grid)?;
        let mut x = vec![grid.x_start];
        x.extend(grid.interior());
        x.push(grid.x_end);
        let mut p = vec![0.0];
        p.extend(&d.values);
        p.push(0.0);
        let mut cdf = vec![0.0; x.len()];
        for i in 1..x.len() {
            cdf[i] = cdf[i - 1] + 0.5 * (p[i - 1] + p[i]) * (x[i] - x[i - 1]);
        }
        let total = cdf[cdf.len() - 1];
        for c in &mut cdf {
            *c /= total;
        }
        Ok(Self { x, cdf })
    }

    fn sample(&self, u: f64) -> f64 {
        let k = self.cdf.partition_point(|&c| c < u).clamp(1, self.x.len() - 1);
        let (c0, c1) = (self.cdf[k - 1], self.cdf[k]);
        let s = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.5 };
        self.x[k - 1] + s * (self.x[k] - self.x[k - 1])
    }
}

/// Per-path random stream.
pub fn path_rng(seed: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng
}

/// Simulates the ensemble over `t_span`, reporting every `params.dt`.
pub fn run_ensemble(
    config: &EnsembleConfig,
    params: &ModelParams,
    t_span: (f64, f64),
) -> Result<EnsembleResult, McError> {
    config.validate(params)?;
    params.ramp.validate()?;
    if !(t_span.0 < t_span.1) {
        return Err(McError::InvalidConfig(format!("empty time span {t_span:?}")));
    }
    let times = model::reporting_grid(t_span.0, t_span.1, params.dt);
    let dt_report = times[1] - times[0];
    let sub = (dt_report / config.dt_sim).round().max(1.0) as usize;
    let h = dt_report / sub as f64;
    let threshold = match config.threshold_y {
        Some(y) => Some(ThresholdCurve::new(
            model::deterministic_trajectory(params.x0, t_span.0, t_span.1, params)?,
            y,
        )?),
        None => None,
    };
    let sampler = match config.initial {
        InitialCondition::Stationary { lam0 } => Some(StationarySampler::new(lam0, params.diffusion)?),
        InitialCondition::Point { .. } => None,
    };
    let x_target = params.x_target;
    let noise = (2.0 * params.diffusion * h).sqrt();
    let ramp = params.ramp;
    let n_chunks = config.n_paths.div_ceil(CHUNK);

    let run_chunk = |c: usize| -> ChunkOutput {
        let lo = c * CHUNK;
        let hi = (lo + CHUNK).min(config.n_paths);
        let m = hi - lo;
        let mut rngs: Vec<ChaCha8Rng> = (lo..hi).map(|p| path_rng(config.seed, p)).collect();
        let mut x: Vec<f64> = match (config.initial, &sampler) {
            (InitialCondition::Point { x0 }, _) => vec![x0; m],
            (_, Some(s)) => rngs.iter_mut().map(|r| s.sample(r.random::<f64>())).collect(),
            _ => unreachable!(),
        };
        let mut alive = vec![true; m];
        let mut prev = x.clone();
        let mut sums = Vec::with_capacity(times.len());
        let mut escapes = Vec::new();
        let mut first = StepSums::default();
        for &xi in &x {
            first.n += 1.0;
            first.s1 += xi;
            first.s2 += xi * xi;
        }
        sums.push(first);
        for n in 1..times.len() {
            let t_base = times[n - 1];
            for j in 0..sub {
                let t = t_base + h * j as f64;
                let lam = ramp.lambda(t);
                let t_next = t + h;
                let bound = match &threshold {
                    Some(th) => th.value_at(t_next.min(th.reference.t_max())).unwrap_or(x_target),
                    None => x_target,
                };
                for k in 0..m {
                    if !alive[k] {
                        continue;
                    }
                    let z: f64 = rngs[k].sample(StandardNormal);
                    let xn = x[k] + drift(x[k], lam) * h + noise * z;
                    x[k] = xn.min(50.0);
                    if x[k] >= bound {
                        alive[k] = false;
                        escapes.push((lo + k, t_next));
                    }
                }
            }
            let mut s = StepSums::default();
            for k in 0..m {
                if alive[k] {
                    s.n += 1.0;
                    s.s1 += x[k];
                    s.s2 += x[k] * x[k];
                    s.p1 += prev[k];
                    s.p2 += prev[k] * prev[k];
                    s.cross += prev[k] * x[k];
                }
            }
            sums.push(s);
            prev.copy_from_slice(&x);
        }
        ChunkOutput {
            sums,
            escape_times: escapes,
            finals: x,
        }
    };

    let chunks: Vec<ChunkOutput> = (0..n_chunks).into_par_iter().map(run_chunk).collect();
    let parts: Vec<Vec<StepSums>> = chunks.iter().map(|c| c.sums.clone()).collect();
    let total = combine_pairwise(&parts);

    // Batch means over groups of chunks.
    let groups = BATCHES.min(n_chunks);
    let group_sums: Vec<Vec<StepSums>> = (0..groups)
        .map(|g| {
            let members: Vec<Vec<StepSums>> = (g..n_chunks).step_by(groups).map(|c| parts[c].clone()).collect();
            combine_pairwise(&members)
        })
        .collect();
    let batch_se = |f: &dyn Fn(&StepSums) -> f64, n: usize| -> f64 {
        if groups < 2 {
            return f64::NAN;
        }
        let vals: Vec<f64> = group_sums.iter().map(|g| f(&g[n])).filter(|v| v.is_finite()).collect();
        if vals.len() < 2 {
            return f64::NAN;
        }
        let k = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / k;
        (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k * (k - 1.0))).sqrt()
    };

    let mut escape_times: Vec<(usize, f64)> = chunks.iter().flat_map(|c| c.escape_times.iter().copied()).collect();
    escape_times.sort_by_key(|e| e.0);
    let final_states = chunks.iter().flat_map(|c| c.finals.iter().copied()).collect();
    let n_esc = escape_times.len();
    Ok(EnsembleResult {
        n_paths: config.n_paths,
        seed: config.seed,
        dt_sim: h,
        dt: dt_report,
        survivors: total.iter().map(|s| s.n as usize).collect(),
        mean: total.iter().map(|s| s.mean()).collect(),
        variance: total.iter().map(|s| s.variance()).collect(),
        autocorrelation: total
            .iter()
            .enumerate()
            .map(|(i, s)| if i == 0 { f64::NAN } else { s.autocorrelation() })
            .collect(),
        se_variance: (0..times.len()).map(|n| batch_se(&|s| s.variance(), n)).collect(),
        se_autocorrelation: (0..times.len())
            .map(|n| if n == 0 { f64::NAN } else { batch_se(&|s| s.autocorrelation(), n) })
            .collect(),
        escape_fraction: n_esc as f64 / config.n_paths as f64,
        escape_times: escape_times.into_iter().map(|e| e.1).collect(),
        final_states,
        times,
    })
}

/// Indicator series over the surviving paths.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalIndicators {
    pub series: IndicatorSeries,
    pub se_autocorrelation: Vec<f64>,
    pub se_variance: Vec<f64>,
    /// Set when the series stops early because too few paths survive.
    pub truncated_at: Option<f64>,
}

/// Minimum number of survivors for an indicator value.
pub const MIN_SURVIVORS: usize = 100;

pub fn empirical_indicators(result: &EnsembleResult, dt_report: f64) -> Result<EmpiricalIndicators, McError> {
    if (dt_report - result.dt).abs() > 1e-9 * result.dt {
        return Err(McError::InvalidConfig(format!(
            "statistics were collected every {}, not {dt_report}",
            result.dt
        )));
    }
    let mut series = IndicatorSeries {
        times: Vec::new(),
        autocorrelation: Vec::new(),
        variance: Vec::new(),
        decay_rate: Vec::new(),
        mean: Vec::new(),
        mass: Vec::new(),
    };
    let mut se_a = Vec::new();
    let mut se_v = Vec::new();
    let mut truncated_at = None;
    for n in 1..result.times.len() {
        if result.survivors[n] < MIN_SURVIVORS {
            if n == 1 {
                return Err(McError::TooFewSurvivors {
                    t: result.times[n],
                    survivors: result.survivors[n],
                });
            }
            truncated_at = Some(result.times[n]);
            break;
        }
        let a = result.autocorrelation[n];
        series.times.push(result.times[n]);
        series.autocorrelation.push(a);
        series.variance.push(result.variance[n]);
        series.decay_rate.push((1.0 - a) / dt_report);
        series.mean.push(result.mean[n]);
        series.mass.push(result.survivors[n] as f64 / result.n_paths as f64);
        se_a.push(result.se_autocorrelation[n]);
        se_v.push(result.se_variance[n]);
    }
    Ok(EmpiricalIndicators {
        series,
        se_autocorrelation: se_a,
        se_variance: se_v,
        truncated_at,
    })
}

/// Histogram of escape times with bins of width `bin` starting at `origin`.
pub fn escape_time_histogram(escape_times: &[f64], origin: f64, bin: f64) -> (Vec<f64>, Vec<usize>) {
    if escape_times.is_empty() {
        return (Vec::new(), Vec::new());
    }
    let last = escape_times.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let nb = (((last - origin) / bin).floor() as usize) + 1;
    let mut counts = vec![0usize; nb];
    for &t in escape_times {
        let k = ((t - origin) / bin).floor();
        if k >= 0.0 {
            counts[(k as usize).min(nb - 1)] += 1;
        }
    }
    let centers = (0..nb).map(|k| origin + bin * (k as f64 + 0.5)).collect();
    (centers, counts)
}
