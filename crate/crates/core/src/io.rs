//! CSV tables: comma-separated, header row, LF endings, doubles written with
//! 17 significant digits. An optional first line `# {json}` carries run
//! metadata.

use std::io::Write;

use serde_json::{json, Value};
use thiserror::Error;

use crate::bvp_path::{CollocationMesh, PathSolution, DEGREE, NDIM};
use crate::continuation::SweepGrid;
use crate::fokker_planck::{DensityField, EscapeSeries, ThresholdSweep};
use crate::indicators::{IndicatorSeries, OuBaseline};
use crate::model::ModelParams;
use crate::sde_mc::{EmpiricalIndicators, EnsembleResult};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CsvError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("bad metadata: {0}")]
    Metadata(String),
    #[error("inconsistent table: {0}")]
    Shape(String),
}

/// 17 significant digits; reads back to the same double.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.16e}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub metadata: Option<Value>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl std::fmt::Display for CsvTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut buf = Vec::new();
        self.write_to(&mut buf).map_err(|_| std::fmt::Error)?;
        f.write_str(&String::from_utf8_lossy(&buf))
    }
}

impl CsvTable {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            metadata: None,
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn with_metadata(mut self, meta: Value) -> Self {
        self.metadata = Some(meta);
        self
    }

    pub fn push_numbers(&mut self, values: &[f64]) {
        self.rows.push(values.iter().map(|v| fmt_f64(*v)).collect());
    }

    pub fn write_to(&self, w: &mut dyn Write) -> std::io::Result<()> {
        if let Some(m) = &self.metadata {
            writeln!(w, "# {m}")?;
        }
        writeln!(w, "{}", self.columns.join(","))?;
        for r in &self.rows {
            writeln!(w, "{}", r.join(","))?;
        }
        Ok(())
    }

    /// Parses text produced by [`CsvTable::write_to`].
    pub fn parse(text: &str) -> Result<Self, CsvError> {
        let mut lines = text.split('\n').enumerate().peekable();
        let mut metadata = None;
        if let Some((_, l)) = lines.peek() {
            if let Some(rest) = l.strip_prefix('#') {
                metadata = Some(
                    serde_json::from_str(rest.trim()).map_err(|e| CsvError::Metadata(e.to_string()))?,
                );
                lines.next();
            }
        }
        let (_, header) = lines.next().ok_or(CsvError::Syntax {
            line: 1,
            msg: "missing header".into(),
        })?;
        let columns: Vec<String> = header.split(',').map(str::to_string).collect();
        if columns.iter().any(|c| c.is_empty()) {
            return Err(CsvError::Syntax {
                line: 1,
                msg: "empty column name".into(),
            });
        }
        let mut rows = Vec::new();
        for (i, l) in lines {
            if l.is_empty() {
                continue;
            }
            let row: Vec<String> = l.split(',').map(str::to_string).collect();
            if row.len() != columns.len() {
                return Err(CsvError::Syntax {
                    line: i + 1,
                    msg: format!("{} fields, expected {}", row.len(), columns.len()),
                });
            }
            rows.push(row);
        }
        Ok(Self {
            metadata,
            columns,
            rows,
        })
    }

    /// All cells as doubles, row by row.
    pub fn numbers(&self) -> Result<Vec<Vec<f64>>, CsvError> {
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                r.iter()
                    .map(|c| {
                        c.trim().parse::<f64>().map_err(|_| CsvError::Syntax {
                            line: i + 2,
                            msg: format!("not a number: {c:?}"),
                        })
                    })
                    .collect()
            })
            .collect()
    }
}

pub fn escape_series_csv(series: &EscapeSeries, meta: Value) -> CsvTable {
    let mut t = CsvTable::new(&["t", "p_esc", "rate"]).with_metadata(meta);
    for i in 0..series.times.len() {
        t.push_numbers(&[series.times[i], series.p_esc[i], series.rate[i]]);
    }
    t
}

/// Rows are times, columns the interior grid nodes.
pub fn density_matrix_csv(densities: &[&DensityField], meta: Value) -> CsvTable {
    let Some(first) = densities.first() else {
        return CsvTable::new(&["t"]).with_metadata(meta);
    };
    let mut columns = vec!["t".to_string()];
    columns.extend(first.grid.interior().iter().map(|x| fmt_f64(*x)));
    let mut t = CsvTable {
        metadata: Some(meta),
        columns,
        rows: Vec::new(),
    };
    for d in densities {
        let mut row = vec![d.t];
        row.extend_from_slice(&d.values);
        t.push_numbers(&row);
    }
    t
}

pub fn indicator_csv(series: &IndicatorSeries, baseline: &OuBaseline, meta: Value) -> CsvTable {
    let mut t = CsvTable::new(&["t", "autocorrelation", "variance", "decay_rate", "a_OU", "V_OU"]).with_metadata(meta);
    for i in 0..series.times.len() {
        t.push_numbers(&[
            series.times[i],
            series.autocorrelation[i],
            series.variance[i],
            series.decay_rate[i],
            baseline.a,
            baseline.v,
        ]);
    }
    t
}

fn ensemble_meta(result: &EnsembleResult, extra: Value) -> Value {
    let mut m = json!({
        "seed": result.seed,
        "n_paths": result.n_paths,
        "dt_sim": result.dt_sim,
        "escape_fraction": result.escape_fraction,
        "escape_fraction_se": result.escape_fraction_se(),
    });
    if let (Value::Object(a), Value::Object(b)) = (&mut m, extra) {
        a.extend(b);
    }
    m
}

pub fn mc_indicator_csv(ind: &EmpiricalIndicators, result: &EnsembleResult, extra: Value) -> CsvTable {
    let s = &ind.series;
    let mut t = CsvTable::new(&["t", "autocorrelation", "variance", "decay_rate", "se_autocorrelation", "se_variance"])
        .with_metadata(ensemble_meta(result, extra));
    for i in 0..s.times.len() {
        t.push_numbers(&[
            s.times[i],
            s.autocorrelation[i],
            s.variance[i],
            s.decay_rate[i],
            ind.se_autocorrelation[i],
            ind.se_variance[i],
        ]);
    }
    t
}

pub fn histogram_csv(edges: &[f64], counts: &[usize], result: &EnsembleResult, extra: Value) -> CsvTable {
    let mut t = CsvTable::new(&["t_left", "count"]).with_metadata(ensemble_meta(result, extra));
    for (e, c) in edges.iter().zip(counts) {
        t.rows.push(vec![fmt_f64(*e), c.to_string()]);
    }
    t
}

pub fn threshold_sweep_csv(sweep: &ThresholdSweep, meta: Value) -> CsvTable {
    let mut columns = vec!["t".to_string()];
    columns.extend(sweep.y_values.iter().map(|y| format!("rate_y{}", fmt_f64(*y))));
    let mut t = CsvTable {
        metadata: Some(meta),
        columns,
        rows: Vec::new(),
    };
    for (n, time) in sweep.times.iter().enumerate() {
        let mut row = vec![*time];
        row.extend(sweep.rates.iter().map(|r| r[n]));
        t.push_numbers(&row);
    }
    t
}

pub fn sweep_csv(grid: &SweepGrid, meta: Value) -> CsvTable {
    let mut t = CsvTable::new(&["epsilon", "D", "T_end", "t_cross", "M", "converged"]).with_metadata(meta);
    for c in &grid.cells {
        t.rows.push(vec![
            fmt_f64(c.epsilon),
            fmt_f64(c.diffusion),
            fmt_f64(c.t_end),
            fmt_f64(c.t_cross),
            fmt_f64(c.big_m),
            c.converged.to_string(),
        ]);
    }
    t
}

pub const PATH_COLUMNS: [&str; 8] = ["tau", "t", "x1", "x2", "lam", "z1", "z2", "z3"];

/// Every collocation point of the path.
pub fn path_csv(path: &PathSolution) -> CsvTable {
    let meta = json!({
        "T_end": path.t_end,
        "M": path.big_m,
        "m": path.m,
        "epsilon": path.params.ramp.epsilon,
        "D": path.params.diffusion,
        "T_init": path.t_init,
        "params": path.params,
    });
    let mut t = CsvTable::new(&PATH_COLUMNS).with_metadata(meta);
    let n = path.mesh.n_intervals();
    for j in 0..n {
        let (a, b) = (path.mesh.nodes[j], path.mesh.nodes[j + 1]);
        for i in 0..DEGREE {
            push_path_row(&mut t, path, j * DEGREE + i, a + (b - a) * i as f64 / DEGREE as f64);
        }
    }
    push_path_row(&mut t, path, n * DEGREE, 1.0);
    t
}

fn push_path_row(t: &mut CsvTable, path: &PathSolution, p: usize, tau: f64) {
    let y = path.point(p);
    let mut row = vec![tau, path.time(tau)];
    row.extend_from_slice(&y);
    t.push_numbers(&row);
}

/// Reads a path written by [`path_csv`].
pub fn read_path_csv(text: &str) -> Result<PathSolution, CsvError> {
    let table = CsvTable::parse(text)?;
    if table.columns != PATH_COLUMNS {
        return Err(CsvError::Shape(format!("expected columns {PATH_COLUMNS:?}")));
    }
    let meta = table.metadata.as_ref().ok_or(CsvError::Metadata("missing header line".into()))?;
    let num = |key: &str| -> Result<f64, CsvError> {
        meta.get(key)
            .and_then(Value::as_f64)
            .filter(|v| v.is_finite())
            .ok_or_else(|| CsvError::Metadata(format!("missing or non-finite {key}")))
    };
    let t_end = num("T_end")?;
    let t_init = num("T_init")?;
    let params: ModelParams = serde_json::from_value(
        meta.get("params").cloned().ok_or(CsvError::Metadata("missing params".into()))?,
    )
    .map_err(|e| CsvError::Metadata(e.to_string()))?;
    params.validate().map_err(|e| CsvError::Metadata(e.to_string()))?;
    if !(t_end > params.t0) {
        return Err(CsvError::Metadata(format!("T_end {t_end} must exceed t0 {}", params.t0)));
    }
    let rows = table.numbers()?;
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(CsvError::Shape("non-finite value".into()));
    }
    let np = rows.len();
    if np < 2 || (np - 1) % DEGREE != 0 {
        return Err(CsvError::Shape(format!("{np} points is not a multiple of {DEGREE} plus one")));
    }
    let nodes: Vec<f64> = rows.iter().step_by(DEGREE).map(|r| r[0]).collect();
    let mesh = CollocationMesh { nodes };
    mesh.validate().map_err(|e| CsvError::Shape(e.to_string()))?;
    let mut u = Vec::with_capacity(np * NDIM);
    for r in &rows {
        u.extend_from_slice(&r[2..2 + NDIM]);
    }
    let mut sol = PathSolution {
        mesh,
        u,
        t_end,
        t_init,
        params,
        big_m: f64::NAN,
        m: f64::NAN,
        newton_iterations: 0,
        residual: f64::NAN,
    };
    sol.refresh_functionals();
    Ok(sol)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn doubles_round_trip() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 6.02e23, f64::MIN_POSITIVE, f64::MAX] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
        assert!(fmt_f64(f64::NAN).parse::<f64>().unwrap().is_nan());
        assert_eq!(fmt_f64(f64::NEG_INFINITY).parse::<f64>().unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn table_round_trip() {
        let mut t = CsvTable::new(&["a", "b"]).with_metadata(json!({"seed": 3}));
        t.push_numbers(&[1.0, 2.0]);
        t.push_numbers(&[0.1, f64::NAN]);
        let text = t.to_string();
        assert!(text.starts_with("# {\"seed\":3}\na,b\n"));
        assert!(!text.contains('\r'));
        let back = CsvTable::parse(&text).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn ragged_rows_are_rejected() {
        assert!(matches!(CsvTable::parse("a,b\n1,2\n3\n"), Err(CsvError::Syntax { line: 3, .. })));
        assert!(CsvTable::parse("# {not json\na\n").is_err());
        assert!(CsvTable::parse("").is_err());
    }

    #[test]
    fn path_round_trip() {
        let mut p = ModelParams::default().with_diffusion(0.05);
        p.x_target = 0.0;
        let sol = PathSolution::trivial_seed(&p, -9.0, 25);
        let back = read_path_csv(&path_csv(&sol).to_string()).unwrap();
        assert_eq!(back.u, sol.u);
        assert_eq!(back.mesh.nodes, sol.mesh.nodes);
        assert_eq!(back.t_end, sol.t_end);
        assert_eq!(back.params, sol.params);
    }

    #[test]
    fn malformed_paths_are_rejected() {
        let p = ModelParams {
            x_target: 0.0,
            ..ModelParams::default()
        };
        let sol = PathSolution::trivial_seed(&p, -9.0, 25);
        let text = path_csv(&sol).to_string();
        let truncated: String = text.lines().take(10).map(|l| format!("{l}\n")).collect();
        assert!(read_path_csv(&truncated).is_err());
        assert!(read_path_csv(&text.replacen("\"T_end\"", "\"T_fin\"", 1)).is_err());
        assert!(read_path_csv(&text.replacen("tau,t", "tau,time", 1)).is_err());
    }
}
