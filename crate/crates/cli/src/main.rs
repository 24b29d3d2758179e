//! `ratetip` command-line driver.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ratetip::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "ratetip", version, about = "Rate-induced tipping under noise", allow_negative_numbers = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration (defaults apply to missing keys).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Ensemble seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Args, Default)]
struct Overrides {
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    #[arg(long = "lambda-max", global = true)]
    lambda_max: Option<f64>,
    #[arg(long = "D", global = true)]
    diffusion: Option<f64>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    t0: Option<f64>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    x0: Option<f64>,
    #[arg(long = "x-target", global = true, allow_hyphen_values = true)]
    x_target: Option<f64>,
    #[arg(long = "x-start", global = true, allow_hyphen_values = true)]
    x_start: Option<f64>,
    #[arg(long = "x-end", global = true, allow_hyphen_values = true)]
    x_end: Option<f64>,
    #[arg(long, global = true)]
    dt: Option<f64>,
    #[arg(long = "n-cells", global = true)]
    n_cells: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Critical ramp speed by bisection.
    CriticalRate {
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long, num_args = 2, value_names = ["LO", "HI"])]
        bracket: Option<Vec<f64>>,
    },
    /// Density evolution and escape series.
    Fpe {
        #[arg(long = "t-final", allow_hyphen_values = true)]
        t_final: Option<f64>,
    },
    /// Autocorrelation, variance and decay-rate series.
    Indicators {
        #[arg(long = "t-final", allow_hyphen_values = true)]
        t_final: Option<f64>,
    },
    /// Euler–Maruyama ensemble.
    Mc {
        #[arg(long = "n-paths")]
        n_paths: Option<usize>,
        #[arg(long = "t-final", allow_hyphen_values = true)]
        t_final: Option<f64>,
    },
    /// Optimal escape path.
    Path {
        /// Start from a previously written path CSV.
        #[arg(long)]
        reseed: Option<String>,
    },
    /// Optimal paths over the (ε, D) grid.
    Sweep,
    /// Escape rates through thresholds at several offsets.
    ThresholdSweep,
    /// Indicator series for several upper boundaries.
    DomainSweep,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::CriticalRate { .. } => "critical_rate",
            Command::Fpe { .. } => "fpe",
            Command::Indicators { .. } => "indicators",
            Command::Mc { .. } => "mc",
            Command::Path { .. } => "path",
            Command::Sweep => "sweep",
            Command::ThresholdSweep => "threshold_sweep",
            Command::DomainSweep => "domain_sweep",
        }
    }
}

fn apply_overrides(cfg: &mut RunConfig, cli: &Cli) {
    let o = &cli.overrides;
    let m = &mut cfg.model;
    if let Some(v) = o.epsilon {
        m.ramp.epsilon = v;
    }
    if let Some(v) = o.lambda_max {
        m.ramp.lambda_max = v;
    }
    if let Some(v) = o.diffusion {
        m.diffusion = v;
    }
    if let Some(v) = o.t0 {
        m.t0 = v;
    }
    if let Some(v) = o.x0 {
        m.x0 = v;
    }
    if let Some(v) = o.x_target {
        m.x_target = v;
    }
    if let Some(v) = o.dt {
        m.dt = v;
    }
    let mut regrid = false;
    if let Some(v) = o.x_start {
        m.x_start = v;
        regrid = true;
    }
    if let Some(v) = o.x_end {
        m.x_end = v;
        regrid = true;
    }
    if regrid {
        let h = (cfg.grid.x_end - cfg.grid.x_start) / cfg.grid.n_cells as f64;
        cfg.grid.x_start = m.x_start;
        cfg.grid.x_end = m.x_end;
        cfg.grid.n_cells = ((m.x_end - m.x_start) / h).round().max(1.0) as usize;
    }
    if let Some(n) = o.n_cells {
        cfg.grid.n_cells = n;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.to_string_lossy().into_owned();
    }
    if let Some(seed) = cli.seed {
        let mut e = cfg.ensemble_or_default();
        e.seed = seed;
        cfg.ensemble = Some(e);
    }
    match &cli.command {
        Command::CriticalRate { tol, bracket } => {
            if let Some(t) = tol {
                cfg.critical.tol = *t;
            }
            if let Some(b) = bracket {
                cfg.critical.bracket = (b[0], b[1]);
            }
        }
        Command::Fpe { t_final: Some(t) } => cfg.fpe.t_final = *t,
        Command::Indicators { t_final: Some(t) } => cfg.indicators.t_final = *t,
        Command::Mc { n_paths, t_final } => {
            let mut e = cfg.ensemble_or_default();
            if let Some(n) = n_paths {
                e.n_paths = *n;
            }
            cfg.ensemble = Some(e);
            if let Some(t) = t_final {
                cfg.fpe.t_final = *t;
            }
        }
        Command::Path { reseed: Some(p) } => cfg.path.reseed_from = Some(p.clone()),
        _ => {}
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, commands::Failure> {
    let text = match &cli.config {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| commands::Failure::Config(format!("cannot read {}: {e}", p.display())))?,
        None => "{}".to_string(),
    };
    let mut cfg: RunConfig =
        serde_json::from_str(&text).map_err(|e| commands::Failure::Config(format!("malformed config: {e}")))?;
    apply_overrides(&mut cfg, cli);
    cfg.validate().map_err(|e| commands::Failure::Config(e.to_string()))?;
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RATETIP_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = load_config(&cli).and_then(|cfg| {
        if let Some(j) = cli.jobs {
            rayon::ThreadPoolBuilder::new()
                .num_threads(j.max(1))
                .build_global()
                .map_err(|e| commands::Failure::Config(format!("--jobs: {e}")))?;
        }
        commands::run(cli.command.name(), &cli.command, &cfg)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("ratetip: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
