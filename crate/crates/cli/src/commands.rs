use std::fmt;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use ratetip::config::{OutputFormat, RunConfig};
use ratetip::continuation::{self, ContinuationSetup, StepPolicy};
use ratetip::fokker_planck::{self, Boundary, ThresholdCurve};
use ratetip::indicators::{self, Direction, ONSET_PLATEAU, ONSET_REL};
use ratetip::io::{self, CsvTable};
use ratetip::model;
use ratetip::ode::IntegratorOptions;
use ratetip::sde_mc;

use crate::Command;

#[derive(Debug)]
pub enum Failure {
    Io(String),
    Numerical(String),
    Config(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Io(_) => 1,
            Failure::Numerical(_) => 2,
            Failure::Config(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Io(m) => write!(f, "I/O error: {m}"),
            Failure::Numerical(m) => write!(f, "numerical failure: {m}"),
            Failure::Config(m) => write!(f, "configuration error: {m}"),
        }
    }
}

fn numerical(e: impl fmt::Display) -> Failure {
    Failure::Numerical(e.to_string())
}

/// Files produced by a command, written only once the command succeeds.
struct Outcome {
    tables: Vec<(&'static str, CsvTable)>,
    summary: Value,
}

/// First 16 hex digits of the SHA-256 of the command name and config.
/// The output directory is not part of the hash.
pub fn config_hash(command: &str, cfg: &RunConfig) -> String {
    let mut key = cfg.clone();
    key.output_dir.clear();
    let mut h = Sha256::new();
    h.update(command.as_bytes());
    h.update([0u8]);
    h.update(serde_json::to_string(&key).expect("config serialises").as_bytes());
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn table_to_json(t: &CsvTable) -> Value {
    json!({
        "metadata": t.metadata,
        "columns": t.columns,
        "rows": t.rows,
    })
}

pub fn run(name: &str, cmd: &Command, cfg: &RunConfig) -> Result<(), Failure> {
    let start = Instant::now();
    let outcome = match cmd {
        Command::CriticalRate { .. } => critical_rate(cfg)?,
        Command::Fpe { .. } => fpe(cfg)?,
        Command::Indicators { .. } => indicator_series(cfg)?,
        Command::Mc { .. } => mc(cfg)?,
        Command::Path { .. } => path(cfg)?,
        Command::Sweep => sweep(cfg)?,
        Command::ThresholdSweep => threshold_sweep(cfg)?,
        Command::DomainSweep => domain_sweep(cfg)?,
    };
    let wall = start.elapsed().as_secs_f64();
    let dir = Path::new(&cfg.output_dir);
    std::fs::create_dir_all(dir).map_err(|e| Failure::Io(format!("{}: {e}", dir.display())))?;
    let hash = config_hash(name, cfg);
    let mut written = Vec::new();
    for (suffix, table) in &outcome.tables {
        let stem = if suffix.is_empty() {
            format!("{name}_{hash}")
        } else {
            format!("{name}_{suffix}_{hash}")
        };
        let (file, text) = match cfg.format {
            OutputFormat::Csv => (format!("{stem}.csv"), table.to_string()),
            OutputFormat::Json => (
                format!("{stem}.json"),
                serde_json::to_string_pretty(&table_to_json(table)).expect("serialisable"),
            ),
        };
        let target = dir.join(&file);
        std::fs::write(&target, text).map_err(|e| Failure::Io(format!("{}: {e}", target.display())))?;
        written.push(file);
    }
    let manifest = json!({
        "command": name,
        "version": env!("CARGO_PKG_VERSION"),
        "config_hash": hash,
        "config": cfg,
        "outputs": written,
        "wall_time_s": wall,
        "threads": rayon::current_num_threads(),
        "summary": outcome.summary,
    });
    let target = dir.join("manifest.json");
    std::fs::write(&target, serde_json::to_string_pretty(&manifest).expect("serialisable"))
        .map_err(|e| Failure::Io(format!("{}: {e}", target.display())))?;
    let mut out = std::io::stdout().lock();
    // A closed pipe on stdout is not a failure of the run.
    let _ = writeln!(out, "{}", serde_json::to_string_pretty(&outcome.summary).expect("serialisable"));
    Ok(())
}

fn critical_rate(cfg: &RunConfig) -> Result<Outcome, Failure> {
    let c = &cfg.critical;
    let r = model::find_critical_epsilon_in(cfg.model.ramp.lambda_max, c.bracket, c.tol, &IntegratorOptions::default())
        .map_err(numerical)?;
    let mut t = CsvTable::new(&["lo", "hi", "mid", "tips"]);
    for s in &r.trace {
        t.rows.push(vec![io::fmt_f64(s.lo), io::fmt_f64(s.hi), io::fmt_f64(s.mid), s.tips.to_string()]);
        eprintln!("  [{:.10}, {:.10}] mid {:.10} tips {}", s.lo, s.hi, s.mid, s.tips);
    }
    eprintln!("epsilon_c = {:.8} ± {:e}", r.epsilon_c, r.tolerance);
    Ok(Outcome {
        tables: vec![("", t)],
        summary: json!({"epsilon_c": r.epsilon_c, "tolerance": r.tolerance, "iterations": r.trace.len()}),
    })
}

fn fpe(cfg: &RunConfig) -> Result<Outcome, Failure> {
    let p = &cfg.model;
    let init = fokker_planck::initial_density(p, &cfg.grid).map_err(numerical)?;
    let ev = fokker_planck::evolve_with(&init, cfg.fpe.t_final, p, p.dt, Boundary::Absorbing, true)
        .map_err(numerical)?;
    let meta = json!({"epsilon": p.ramp.epsilon, "D": p.diffusion, "n_cells": cfg.grid.n_cells});
    let snapshots: Vec<_> = ev.densities.iter().step_by(cfg.fpe.density_every).collect();
    Ok(Outcome {
        tables: vec![
            ("", io::escape_series_csv(&ev.escape, meta.clone())),
            ("density", io::density_matrix_csv(&snapshots, meta)),
        ],
        summary: json!({
            "escaped_fraction": ev.escaped_fraction(),
            "escape_rate_peak_time": ev.escape.peak_time(),
        }),
    })
}

/// Linear relaxation rate of the well at `λ = 0`.
const OU_THETA: f64 = 2.0;

fn indicator_series(cfg: &RunConfig) -> Result<Outcome, Failure> {
    let p = &cfg.model;
    let s = indicators::lag1_series(p, &cfg.grid, (p.t0, cfg.indicators.t_final)).map_err(numerical)?;
    let base = indicators::ou_baseline(OU_THETA, p.diffusion, p.dt).map_err(numerical)?;
    let meta = json!({"epsilon": p.ramp.epsilon, "D": p.diffusion, "dt": p.dt});
    Ok(Outcome {
        summary: json!({
            "autocorrelation_at_minus3": s.at(&s.autocorrelation, -3.0),
            "variance_at_minus3": s.at(&s.variance, -3.0),
            "a_OU": base.a,
            "V_OU": base.v,
        }),
        tables: vec![("", io::indicator_csv(&s, &base, meta))],
    })
}

fn mc(cfg: &RunConfig) -> Result<Outcome, Failure> {
    let p = &cfg.model;
    let ens = cfg.ensemble_or_default();
    let r = sde_mc::run_ensemble(&ens, p, (p.t0, cfg.fpe.t_final)).map_err(numerical)?;
    let ind = sde_mc::empirical_indicators(&r, r.dt).map_err(numerical)?;
    let (edges, counts) = sde_mc::escape_time_histogram(&r.escape_times, p.t0, 0.05);
    let extra = json!({"epsilon": p.ramp.epsilon, "D": p.diffusion});
    Ok(Outcome {
        summary: json!({
            "seed": r.seed,
            "n_paths": r.n_paths,
            "escape_fraction": r.escape_fraction,
            "escape_fraction_se": r.escape_fraction_se(),
            "indicators_truncated_at": ind.truncated_at,
        }),
        tables: vec![
            ("", io::mc_indicator_csv(&ind, &r, extra.clone())),
            ("histogram", io::histogram_csv(&edges, &counts, &r, extra)),
        ],
    })
}

fn path(cfg: &RunConfig) -> Result<Outcome, Failure> {
    let p = &cfg.model;
    let sol = match &cfg.path.reseed_from {
        Some(file) => {
            let text = std::fs::read_to_string(file).map_err(|e| Failure::Io(format!("{file}: {e}")))?;
            let seed = io::read_path_csv(&text).map_err(|e| Failure::Config(format!("{file}: {e}")))?;
            continuation::continue_optimum(&seed, p.ramp.epsilon, p.diffusion).map_err(numerical)?
        }
        None => continuation::seed_optimal_path(p).map_err(numerical)?,
    };
    let manifold = continuation::separatrix_for(&sol.params, continuation::STEP3_TARGET).map_err(numerical)?;
    let t_cross = continuation::crossing_time(&sol, &manifold).ok();
    let t_threshold = match cfg.path.threshold_y {
        Some(y) => {
            let curve = ThresholdCurve::from_params(&sol.params, sol.t_end, y).map_err(numerical)?;
            continuation::crossing_time(&sol, &curve).ok()
        }
        None => None,
    };
    Ok(Outcome {
        summary: json!({
            "T_end": sol.t_end,
            "M": sol.big_m,
            "m": sol.m,
            "residual": sol.residual,
            "t_cross_stable_manifold": t_cross,
            "t_cross_threshold": t_threshold,
            "tolerance": ratetip::bvp_path::SolveOptions::default().tol,
            "n_intervals": sol.mesh.n_intervals(),
        }),
        tables: vec![("", io::path_csv(&sol))],
    })
}

fn sweep(cfg: &RunConfig) -> Result<Outcome, Failure> {
    let ranges = cfg.sweep_or_default();
    let grid = continuation::sweep_epsilon_d(&ranges.epsilon_values(), &ranges.d_values(), &cfg.model);
    let fits = continuation::delay_law_fit(&grid, (ranges.fit_d_min, ranges.fit_d_max));
    let converged = grid.cells.iter().filter(|c| c.converged).count();
    let summary = json!({
        "cells": grid.cells.len(),
        "converged": converged,
        "delay_law": match &fits {
            Ok(f) => json!(f),
            Err(e) => json!({"error": e.to_string()}),
        },
        "step_policy": StepPolicy::default(),
        "tolerance": ContinuationSetup::default().solve.tol,
    });
    let meta = json!({"n_epsilon": ranges.n_epsilon, "n_d": ranges.n_d});
    Ok(Outcome {
        tables: vec![("", io::sweep_csv(&grid, meta))],
        summary,
    })
}

fn threshold_sweep(cfg: &RunConfig) -> Result<Outcome, Failure> {
    let p = &cfg.model;
    let th = &cfg.threshold;
    let s = fokker_planck::threshold_sweep(&th.y_values, p, &cfg.grid, th.t_final).map_err(numerical)?;
    let peaks: Vec<f64> = s
        .rates
        .iter()
        .map(|r| {
            let k = r
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |a, (i, &v)| if v > a.1 { (i, v) } else { a })
                .0;
            s.times[k]
        })
        .collect();
    let y_c = s.critical_offset(ONSET_PLATEAU, th.ratio);
    let meta = json!({"epsilon": p.ramp.epsilon, "D": p.diffusion});
    Ok(Outcome {
        summary: json!({"y_values": th.y_values, "peak_times": peaks, "critical_offset": y_c}),
        tables: vec![("", io::threshold_sweep_csv(&s, meta))],
    })
}

fn domain_sweep(cfg: &RunConfig) -> Result<Outcome, Failure> {
    let p = &cfg.model;
    let xs = &cfg.indicators.x_end_values;
    let all = indicators::domain_sweep(xs, p, (p.t0, cfg.indicators.t_final)).map_err(numerical)?;
    let mut t = CsvTable::new(&["x_end", "t", "autocorrelation", "variance", "decay_rate"])
        .with_metadata(json!({"epsilon": p.ramp.epsilon, "D": p.diffusion}));
    let mut onsets = Vec::new();
    for (x_end, s) in xs.iter().zip(&all) {
        for i in 0..s.times.len() {
            t.push_numbers(&[*x_end, s.times[i], s.autocorrelation[i], s.variance[i], s.decay_rate[i]]);
        }
        onsets.push(json!({
            "x_end": x_end,
            "decay_rate_onset": indicators::onset_time(&s.times, &s.decay_rate, ONSET_PLATEAU, ONSET_REL, Direction::Fall),
            "variance_onset": indicators::onset_time(&s.times, &s.variance, ONSET_PLATEAU, ONSET_REL, Direction::Rise),
        }));
    }
    Ok(Outcome {
        tables: vec![("", t)],
        summary: json!({"onsets": onsets}),
    })
}
