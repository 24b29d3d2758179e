//! Run configuration: a single JSON document with one section per stage.
//! Every field has a default, so `{}` describes the headline case.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::continuation;
use crate::fokker_planck::Grid1D;
use crate::model::{ModelParams, CRITICAL_BRACKET};
use crate::sde_mc::EnsembleConfig;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CriticalSection {
    pub tol: f64,
    pub bracket: (f64, f64),
}

impl Default for CriticalSection {
    fn default() -> Self {
        Self {
            tol: 1e-4,
            bracket: CRITICAL_BRACKET,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FpeSection {
    pub t_final: f64,
    /// Write every n-th density snapshot.
    pub density_every: usize,
}

impl Default for FpeSection {
    fn default() -> Self {
        Self {
            t_final: 10.0,
            density_every: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IndicatorSection {
    pub t_final: f64,
    pub x_end_values: Vec<f64>,
}

impl Default for IndicatorSection {
    fn default() -> Self {
        Self {
            t_final: 5.0,
            x_end_values: vec![0.5, 1.0, 2.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThresholdSection {
    pub t_final: f64,
    pub y_values: Vec<f64>,
    /// Stationary-rate ratio defining the critical offset.
    pub ratio: f64,
}

impl Default for ThresholdSection {
    fn default() -> Self {
        Self {
            t_final: 5.0,
            y_values: vec![1.0, 1.1, 1.2, 1.3, 1.4, 1.5, 1.6, 1.7, 1.8],
            ratio: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathSection {
    /// Path CSV to start from instead of running the seeding steps.
    pub reseed_from: Option<String>,
    /// Threshold offset whose crossing time is reported.
    pub threshold_y: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepRanges {
    pub epsilon_min: f64,
    pub epsilon_max: f64,
    pub n_epsilon: usize,
    pub d_min: f64,
    pub d_max: f64,
    pub n_d: usize,
    /// `D` window of the delay-law fit.
    pub fit_d_min: f64,
    pub fit_d_max: f64,
}

impl Default for SweepRanges {
    fn default() -> Self {
        Self {
            epsilon_min: 1.05,
            epsilon_max: 1.25,
            n_epsilon: 11,
            d_min: 1e-3,
            d_max: 1e-1,
            n_d: 40,
            fit_d_min: 1e-3,
            fit_d_max: 1e-2,
        }
    }
}

impl SweepRanges {
    pub fn epsilon_values(&self) -> Vec<f64> {
        continuation::lin_space(self.epsilon_min, self.epsilon_max, self.n_epsilon)
    }

    pub fn d_values(&self) -> Vec<f64> {
        continuation::log_space(self.d_min, self.d_max, self.n_d)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let ok = self.n_epsilon >= 1
            && self.n_d >= 1
            && self.epsilon_min.is_finite()
            && self.epsilon_max >= self.epsilon_min
            && self.epsilon_max < 4.0 / 3.0
            && self.d_min > 0.0
            && self.d_max >= self.d_min
            && self.d_max.is_finite()
            && self.fit_d_min > 0.0
            && self.fit_d_max >= self.fit_d_min;
        if ok {
            Ok(())
        } else {
            Err(ConfigError::Invalid(format!("sweep ranges out of bounds: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelParams,
    pub grid: Grid1D,
    pub ensemble: Option<EnsembleConfig>,
    pub sweep: Option<SweepRanges>,
    pub critical: CriticalSection,
    pub fpe: FpeSection,
    pub indicators: IndicatorSection,
    pub threshold: ThresholdSection,
    pub path: PathSection,
    pub output_dir: String,
    pub format: OutputFormat,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelParams::default(),
            grid: Grid1D::default(),
            ensemble: None,
            sweep: None,
            critical: CriticalSection::default(),
            fpe: FpeSection::default(),
            indicators: IndicatorSection::default(),
            threshold: ThresholdSection::default(),
            path: PathSection::default(),
            output_dir: "out".into(),
            format: OutputFormat::Csv,
        }
    }
}

impl RunConfig {
    /// Parses and validates.
    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn ensemble_or_default(&self) -> EnsembleConfig {
        self.ensemble.unwrap_or_default()
    }

    pub fn sweep_or_default(&self) -> SweepRanges {
        self.sweep.unwrap_or_default()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.model.validate().map_err(|e| invalid(&e))?;
        self.grid.validate().map_err(|e| invalid(&e))?;
        if self.grid.x_start != self.model.x_start || self.grid.x_end != self.model.x_end {
            return Err(ConfigError::Invalid(format!(
                "grid [{}, {}] differs from model domain [{}, {}]",
                self.grid.x_start, self.grid.x_end, self.model.x_start, self.model.x_end
            )));
        }
        if let Some(e) = &self.ensemble {
            e.validate(&self.model).map_err(|e| invalid(&e))?;
        }
        if let Some(s) = &self.sweep {
            s.validate()?;
        }
        let c = &self.critical;
        if !(c.tol > 0.0 && c.bracket.0.is_finite() && c.bracket.1.is_finite()) {
            return Err(ConfigError::Invalid(format!("critical-rate settings {c:?}")));
        }
        if !(self.fpe.t_final > self.model.t0 && self.fpe.t_final.is_finite() && self.fpe.density_every >= 1) {
            return Err(ConfigError::Invalid(format!("fpe settings {:?}", self.fpe)));
        }
        if !(self.indicators.t_final > self.model.t0 && self.indicators.t_final.is_finite()) {
            return Err(ConfigError::Invalid(format!("indicator settings {:?}", self.indicators)));
        }
        if self.indicators.x_end_values.iter().any(|x| !(x.is_finite() && *x > self.model.x0)) {
            return Err(ConfigError::Invalid("x_end values must lie above x0".into()));
        }
        let th = &self.threshold;
        if !(th.t_final > self.model.t0 && th.t_final.is_finite() && th.ratio > 0.0 && th.ratio < 1.0)
            || th.y_values.iter().any(|y| !(y.is_finite() && *y > 0.0))
        {
            return Err(ConfigError::Invalid(format!("threshold settings {th:?}")));
        }
        if let Some(y) = self.path.threshold_y {
            if !(y > 0.0 && y.is_finite()) {
                return Err(ConfigError::Invalid(format!("path threshold offset {y}")));
            }
        }
        if self.output_dir.is_empty() {
            return Err(ConfigError::Invalid("output_dir is empty".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        let c = RunConfig::from_json_str("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.model.ramp.epsilon, 1.25);
        assert_eq!(c.model.diffusion, 0.008);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_json_str(r#"{"modle": {}}"#), Err(ConfigError::Parse(_))));
        assert!(matches!(
            RunConfig::from_json_str(r#"{"model": {"ramp": {"eps": 1.0}}}"#),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let c = RunConfig::from_json_str(r#"{"model": {"ramp": {"epsilon": 1.1}, "diffusion": 0.05}}"#).unwrap();
        assert_eq!(c.model.ramp.epsilon, 1.1);
        assert_eq!(c.model.ramp.lambda_max, 3.0);
        assert_eq!(c.model.t0, -10.0);
    }

    #[test]
    fn invalid_values_are_rejected() {
        for doc in [
            r#"{"model": {"diffusion": -1.0}}"#,
            r#"{"grid": {"n_cells": 3}}"#,
            r#"{"sweep": {"d_min": 0.0}}"#,
            r#"{"ensemble": {"n_paths": 0}}"#,
            r#"{"grid": {"x_end": 1.0, "n_cells": 2100}}"#,
        ] {
            assert!(matches!(RunConfig::from_json_str(doc), Err(ConfigError::Invalid(_))), "{doc}");
        }
    }

    #[test]
    fn round_trip() {
        let c = RunConfig {
            ensemble: Some(EnsembleConfig::default()),
            sweep: Some(SweepRanges::default()),
            ..RunConfig::default()
        };
        let back = RunConfig::from_json_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }
}
