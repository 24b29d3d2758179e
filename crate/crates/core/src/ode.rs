//! Adaptive Dormand–Prince 5(4) integration of scalar non-autonomous ODEs.
//!
//! Only the scalar case is needed here: the state equation `x' = f(x, λ(t))`
//! with `λ(t)` available in closed form. Output is sampled exactly at the
//! requested reporting times by clamping the step to land on each of them.

/// Tolerances and guards for [`integrate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorOptions {
    pub rtol: f64,
    pub atol: f64,
    /// `|x|` above this bound is treated as finite-time blow-up.
    pub blowup: f64,
    pub min_step: f64,
    pub max_steps: usize,
}

impl Default for IntegratorOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-10,
            atol: 1e-10,
            blowup: 10.0,
            min_step: 1e-14,
            max_steps: 5_000_000,
        }
    }
}

impl IntegratorOptions {
    pub fn with_tolerance(mut self, tol: f64) -> Self {
        self.rtol = tol;
        self.atol = tol;
        self
    }
}

/// Why an integration stopped before reaching the last reporting time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Stop {
    /// `|x|` crossed the blow-up bound at this time.
    BlowUp { t: f64 },
    /// Step size fell below the floor (stiffness or a singularity).
    StepUnderflow { t: f64 },
    /// Step budget exhausted.
    TooManySteps { t: f64 },
}

/// Partial result of an integration that stopped early.
#[derive(Debug, Clone)]
pub struct Incomplete {
    pub stop: Stop,
    /// States at the reporting times reached before the stop.
    pub states: Vec<f64>,
}

// Dormand–Prince tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// b - b* (fifth minus fourth order weights)
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

/// Integrates `x' = rhs(t, x)` from `(t_start, x_start)` and returns the
/// state at each entry of `report_times`.
///
/// `report_times` must be monotone in the direction of integration (which
/// may be backward in time). A reporting time equal to `t_start` is allowed.
pub fn integrate<F>(
    rhs: F,
    t_start: f64,
    x_start: f64,
    report_times: &[f64],
    opts: &IntegratorOptions,
) -> Result<Vec<f64>, Incomplete>
where
    F: Fn(f64, f64) -> f64,
{
    let mut out = Vec::with_capacity(report_times.len());
    let Some(&t_last) = report_times.last() else {
        return Ok(out);
    };
    let dir = if t_last >= t_start { 1.0 } else { -1.0 };
    let mut t = t_start;
    let mut x = x_start;
    let mut k1 = rhs(t, x);
    let span = (t_last - t_start).abs().max(1e-3);
    let mut h = (span * 1e-3).min(1e-2);
    let mut steps = 0usize;

    for &target in report_times {
        while (target - t) * dir > 0.0 {
            if steps >= opts.max_steps {
                return Err(Incomplete {
                    stop: Stop::TooManySteps { t },
                    states: out,
                });
            }
            let remaining = (target - t).abs();
            let mut hs = h.min(remaining);
            // Avoid leaving a sliver shorter than rounding noise.
            if remaining - hs < 1e-12 * remaining.max(1.0) {
                hs = remaining;
            }
            let step = dir * hs;
            let k2 = rhs(t + C2 * step, x + step * A21 * k1);
            let k3 = rhs(t + C3 * step, x + step * (A31 * k1 + A32 * k2));
            let k4 = rhs(t + C4 * step, x + step * (A41 * k1 + A42 * k2 + A43 * k3));
            let k5 = rhs(
                t + C5 * step,
                x + step * (A51 * k1 + A52 * k2 + A53 * k3 + A54 * k4),
            );
            let k6 = rhs(
                t + step,
                x + step * (A61 * k1 + A62 * k2 + A63 * k3 + A64 * k4 + A65 * k5),
            );
            let x_new = x + step * (B1 * k1 + B3 * k3 + B4 * k4 + B5 * k5 + B6 * k6);
            let k7 = rhs(t + step, x_new);
            let err_abs = step * (E1 * k1 + E3 * k3 + E4 * k4 + E5 * k5 + E6 * k6 + E7 * k7);
            let scale = opts.atol + opts.rtol * x.abs().max(x_new.abs());
            let err = (err_abs / scale).abs();
            steps += 1;

            if !x_new.is_finite() || err.is_nan() {
                // Overflowed inside the step: shrink and retry, or give up.
                h = hs * 0.1;
                if h < opts.min_step {
                    return Err(Incomplete {
                        stop: Stop::BlowUp { t },
                        states: out,
                    });
                }
                continue;
            }

            if err <= 1.0 {
                t = if hs == remaining { target } else { t + step };
                x = x_new;
                k1 = k7;
                if x.abs() > opts.blowup {
                    return Err(Incomplete {
                        stop: Stop::BlowUp { t },
                        states: out,
                    });
                }
                let grow = if err == 0.0 {
                    5.0
                } else {
                    (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
                };
                // Do not let a short clamped step throttle the next one.
                h = (hs * grow).max(h.min(hs * 5.0));
            } else {
                h = hs * (0.9 * err.powf(-0.2)).clamp(0.1, 0.9);
                if h < opts.min_step {
                    return Err(Incomplete {
                        stop: Stop::StepUnderflow { t },
                        states: out,
                    });
                }
            }
        }
        out.push(x);
    }
    Ok(out)
}
