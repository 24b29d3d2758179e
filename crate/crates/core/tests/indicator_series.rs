use std::sync::OnceLock;

use ratetip::fokker_planck::{self, Grid1D, ThresholdCurve};
use ratetip::indicators::{self, Direction, IndicatorSeries, ONSET_PLATEAU, ONSET_REL};
use ratetip::model::ModelParams;
use ratetip::sde_mc::{self, EnsembleConfig, InitialCondition};

fn headline() -> &'static IndicatorSeries {
    static CELL: OnceLock<IndicatorSeries> = OnceLock::new();
    CELL.get_or_init(|| {
        let p = ModelParams::default();
        indicators::lag1_series(&p, &Grid1D::default(), (p.t0, 5.0)).unwrap()
    })
}

fn domains() -> &'static Vec<IndicatorSeries> {
    static CELL: OnceLock<Vec<IndicatorSeries>> = OnceLock::new();
    CELL.get_or_init(|| {
        let p = ModelParams::default();
        indicators::domain_sweep(&[0.5, 1.0, 2.0], &p, (p.t0, 5.0)).unwrap()
    })
}

/// λ(t) < 1e-40 before t = −25 at ε = 1.25: a frozen well at λ = 0.
fn frozen(diffusion: f64) -> ModelParams {
    let mut p = ModelParams::default().with_diffusion(diffusion);
    p.t0 = -40.0;
    p
}

#[test]
fn lag_one_values_before_the_ramp() {
    let s = headline();
    let a = s.at(&s.autocorrelation, -3.0);
    let v = s.at(&s.variance, -3.0);
    assert!((a - 0.98).abs() < 0.005, "{a}");
    assert!((v - 0.004).abs() < 0.0004, "{v}");
}

#[test]
fn series_stay_in_range() {
    let s = headline();
    assert!(s.autocorrelation.iter().all(|a| a.abs() <= 1.0 + 1e-9));
    assert!(s.variance.iter().all(|v| *v >= -1e-12));
}

#[test]
#[ignore = "variance crosses its 5% onset at t = -0.80 (see README)"]
fn variance_does_not_rise_before_zero() {
    let s = &domains()[2];
    let t = indicators::onset_time(&s.times, &s.variance, ONSET_PLATEAU, ONSET_REL, Direction::Rise).unwrap();
    assert!(t >= 0.0, "{t}");
}

#[test]
fn decay_rate_onset_is_independent_of_the_boundary() {
    let onsets: Vec<f64> = domains()
        .iter()
        .map(|s| indicators::onset_time(&s.times, &s.decay_rate, ONSET_PLATEAU, ONSET_REL, Direction::Fall).unwrap())
        .collect();
    let spread = onsets.iter().cloned().fold(f64::MIN, f64::max) - onsets.iter().cloned().fold(f64::MAX, f64::min);
    assert!(spread < 0.2, "{onsets:?}");
}

#[test]
#[ignore = "the stationary start is cut at the barrier top, so the plateau is the same for every x_end >= 0.5 (see README)"]
fn plateau_variance_grows_with_the_domain() {
    let v: Vec<f64> = domains().iter().map(|s| s.at(&s.variance, -5.0)).collect();
    assert!(v[0] < v[1] && v[1] < v[2], "{v:?}");
}

#[test]
fn decay_rate_plateau_is_the_linear_rate() {
    let s = &domains()[2];
    let theta = s.at(&s.decay_rate, -5.0);
    assert!((theta - 2.0).abs() < 0.2, "{theta}");
}

#[test]
fn frozen_well_converges_to_the_ou_baseline() {
    for d in [0.004, 0.008] {
        let p = frozen(d);
        let s = indicators::lag1_series(&p, &Grid1D::default(), (p.t0, -38.0)).unwrap();
        let ou = indicators::ou_baseline(2.0, d, p.dt).unwrap();
        let (a, v) = (*s.autocorrelation.last().unwrap(), *s.variance.last().unwrap());
        assert!((a - ou.a).abs() < 0.02 * ou.a, "D = {d}: a = {a}");
        assert!((v - ou.v).abs() < 0.02 * ou.v, "D = {d}: V = {v}");
    }
}

#[test]
fn lag_covariance_matches_an_ensemble() {
    let p = frozen(0.008);
    let span = (p.t0, p.t0 + 0.1);
    let s = indicators::lag1_series(&p, &Grid1D::default(), span).unwrap();
    let cfg = EnsembleConfig {
        n_paths: 1_000_000,
        initial: InitialCondition::Stationary { lam0: 0.0 },
        ..EnsembleConfig::default()
    };
    let mc = sde_mc::run_ensemble(&cfg, &p, span).unwrap();
    for (k, t) in s.times.iter().enumerate() {
        let n = mc.times.iter().position(|u| (u - t).abs() < 1e-9).unwrap();
        let scale = (mc.variance[n] * mc.variance[n - 1]).sqrt();
        let cov_fpe = s.autocorrelation[k] * (s.variance[k] * mc.variance[n - 1]).sqrt();
        let cov_mc = mc.autocorrelation[n] * scale;
        // Delta method: relative errors of the correlation and the variance.
        let rel = ((mc.se_autocorrelation[n] / mc.autocorrelation[n]).powi(2) + (mc.se_variance[n] / mc.variance[n]).powi(2)).sqrt();
        let se = cov_mc.abs() * rel;
        assert!((cov_fpe - cov_mc).abs() < 3.0 * se, "t = {t}: {cov_fpe:e} vs {cov_mc:e} ± {se:e}");
        let gap = (s.autocorrelation[k] - mc.autocorrelation[n]).abs();
        assert!(gap < 3.0 * mc.se_autocorrelation[n], "t = {t}: a gap {gap:e}");
    }
}

#[test]
fn autocorrelation_rises_before_the_escape_peak() {
    let p = ModelParams::default();
    let s = headline();
    // A 5% rise of a ≈ 0.98 is unreachable; the rise is read off (1 − a)/Δt.
    let onset = indicators::onset_time(&s.times, &s.decay_rate, ONSET_PLATEAU, ONSET_REL, Direction::Fall).unwrap();
    let init = fokker_planck::initial_density(&p, &Grid1D::default()).unwrap();
    let curve = ThresholdCurve::from_params(&p, 5.0, 1.5).unwrap();
    let peak = fokker_planck::threshold_crossing_rate(&init, &curve, 5.0, &p).unwrap().peak_time();
    assert!(onset < peak, "{onset} vs {peak}");
}
