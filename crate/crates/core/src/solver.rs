//! Explicit Runge–Kutta integration recorded on the tape.
//!
//! Gradients come from backpropagating through the concrete solver steps.
//! Requested output times are always hit exactly by shortening the last
//! step of a segment; no dense-output interpolation is used, so a
//! time-dependent right-hand side is only ever evaluated at stage times.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Right-hand side `dh/dt = f(t, h)`.
pub trait OdeRhs {
    fn eval(&mut self, tape: &Tape, t: f64, h: &Tensor) -> Result<Tensor>;
}

impl<F> OdeRhs for F
where
    F: FnMut(&Tape, f64, &Tensor) -> Result<Tensor>,
{
    fn eval(&mut self, tape: &Tape, t: f64, h: &Tensor) -> Result<Tensor> {
        self(tape, t, h)
    }
}

/// Time-reversed system: integrating `s` forward from `-t_a` to `-t_b`
/// follows the original trajectory backward from `t_a` to `t_b`. The inner
/// right-hand side still sees the original (unnegated) times.
pub struct Reversed<R>(pub R);

impl<R: OdeRhs> OdeRhs for Reversed<R> {
    fn eval(&mut self, tape: &Tape, s: f64, h: &Tensor) -> Result<Tensor> {
        let f = self.0.eval(tape, -s, h)?;
        tape.neg(&f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMethod {
    Rk4,
    Dopri5,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub method: SolverMethod,
    /// RK4 step size.
    pub fixed_step: f64,
    pub rtol: f64,
    pub atol: f64,
    /// Upper bound on attempted steps per solve.
    pub max_steps: usize,
    /// Upper bound on the first adaptive step.
    pub initial_step: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self::rk4(0.25)
    }
}

impl SolverConfig {
    pub fn rk4(step: f64) -> Self {
        Self {
            method: SolverMethod::Rk4,
            fixed_step: step,
            rtol: 1e-5,
            atol: 1e-5,
            max_steps: 100_000,
            initial_step: 0.1,
        }
    }

    pub fn dopri5(rtol: f64, atol: f64) -> Self {
        Self {
            method: SolverMethod::Dopri5,
            fixed_step: 0.05,
            rtol,
            atol,
            max_steps: 100_000,
            initial_step: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.fixed_step, self.rtol, self.atol, self.initial_step];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) || self.max_steps == 0 {
            return Err(Error::Config(format!(
                "solver settings must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SolveStats {
    pub accepted: usize,
    pub rejected: usize,
    pub rhs_evals: usize,
}

impl SolveStats {
    fn attempted(&self) -> usize {
        self.accepted + self.rejected
    }
}

pub struct OdeProblem<R> {
    pub rhs: R,
    pub h0: Tensor,
    pub t_span: (f64, f64),
}

impl<R: OdeRhs> OdeProblem<R> {
    pub fn new(rhs: R, h0: Tensor, t_span: (f64, f64)) -> Result<Self> {
        if !(t_span.0.is_finite() && t_span.1.is_finite()) || t_span.0 > t_span.1 {
            return Err(Error::NonMonotoneTimes(format!(
                "t_span {:?} must be finite and ordered",
                t_span
            )));
        }
        Ok(Self { rhs, h0, t_span })
    }
}

/// Lifts the rhs call so that its output shape is checked.
fn call(
    rhs: &mut impl OdeRhs,
    tape: &Tape,
    t: f64,
    h: &Tensor,
    stats: &mut SolveStats,
) -> Result<Tensor> {
    stats.rhs_evals += 1;
    let f = rhs.eval(tape, t, h)?;
    if f.shape() != h.shape() {
        return Err(Error::ShapeMismatch {
            op: "ode_rhs",
            lhs: h.shape().to_vec(),
            rhs: f.shape().to_vec(),
        });
    }
    Ok(f)
}

/// `h + dt · Σ c_i k_i`, skipping zero coefficients.
fn combine(tape: &Tape, h: &Tensor, dt: f64, terms: &[(f64, &Tensor)]) -> Result<Tensor> {
    let mut acc = h.clone();
    for &(c, k) in terms {
        if c != 0.0 {
            acc = tape.axpy(&acc, dt * c, k)?;
        }
    }
    Ok(acc)
}

/// One classical RK4 step; the four stages see times `t`, `t + dt/2`
/// (twice) and `t + dt`.
pub fn rk4_step(tape: &Tape, rhs: &mut impl OdeRhs, t: f64, h: &Tensor, dt: f64) -> Result<Tensor> {
    rk4_step_counted(tape, rhs, t, h, t + dt, &mut SolveStats::default())
}

fn rk4_step_counted(
    tape: &Tape,
    rhs: &mut impl OdeRhs,
    t: f64,
    h: &Tensor,
    t_end: f64,
    stats: &mut SolveStats,
) -> Result<Tensor> {
    // the last stage is evaluated exactly at `t_end` so that consecutive
    // steps share stage times
    let dt = t_end - t;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "rk4 step must be positive, got {dt}"
        )));
    }
    let half = 0.5 * dt;
    let k1 = call(rhs, tape, t, h, stats)?;
    let k2 = call(rhs, tape, t + half, &tape.axpy(h, half, &k1)?, stats)?;
    let k3 = call(rhs, tape, t + half, &tape.axpy(h, half, &k2)?, stats)?;
    let k4 = call(rhs, tape, t_end, &tape.axpy(h, dt, &k3)?, stats)?;
    stats.accepted += 1;
    combine(
        tape,
        h,
        dt,
        &[
            (1.0 / 6.0, &k1),
            (1.0 / 3.0, &k2),
            (1.0 / 3.0, &k3),
            (1.0 / 6.0, &k4),
        ],
    )
}

fn rk4_segment(
    tape: &Tape,
    rhs: &mut impl OdeRhs,
    h: &Tensor,
    a: f64,
    b: f64,
    config: &SolverConfig,
    stats: &mut SolveStats,
) -> Result<Tensor> {
    let span = b - a;
    if span <= 0.0 {
        return Ok(h.clone());
    }
    let n = ((span / config.fixed_step) - 1e-9).ceil().max(1.0) as usize;
    if stats.attempted() + n > config.max_steps {
        return Err(Error::MaxStepsExceeded(config.max_steps));
    }
    let mut state = h.clone();
    let mut t = a;
    for k in 0..n {
        let next = if k + 1 == n {
            b
        } else {
            a + (k + 1) as f64 * config.fixed_step
        };
        state = rk4_step_counted(tape, rhs, t, &state, next, stats)?;
        t = next;
    }
    Ok(state)
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A2: [f64; 1] = [1.0 / 5.0];
const A3: [f64; 2] = [3.0 / 40.0, 9.0 / 40.0];
const A4: [f64; 3] = [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0];
const A5: [f64; 4] = [
    19372.0 / 6561.0,
    -25360.0 / 2187.0,
    64448.0 / 6561.0,
    -212.0 / 729.0,
];
const A6: [f64; 5] = [
    9017.0 / 3168.0,
    -355.0 / 33.0,
    46732.0 / 5247.0,
    49.0 / 176.0,
    -5103.0 / 18656.0,
];
const B: [f64; 6] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
];
/// Fifth-order minus embedded fourth-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 5.0;
const PI_BETA: f64 = 0.04;

struct Dopri5State {
    /// Step to try next; `None` before the first step.
    dt: Option<f64>,
    err_prev: f64,
}

fn dopri5_segment(
    tape: &Tape,
    rhs: &mut impl OdeRhs,
    h: &Tensor,
    a: f64,
    b: f64,
    config: &SolverConfig,
    ctl: &mut Dopri5State,
    stats: &mut SolveStats,
) -> Result<Tensor> {
    let span = b - a;
    if span <= 0.0 {
        return Ok(h.clone());
    }
    let min_step = 1e-12 * span;
    let mut t = a;
    let mut y = h.clone();
    let mut k1 = call(rhs, tape, t, &y, stats)?;
    let mut dt = match ctl.dt {
        Some(dt) => dt.min(span),
        // a vanishing initial slope gives no scale for the first step
        None if k1.data().iter().all(|&v| v == 0.0) => span,
        None => config.initial_step.min(span / 10.0),
    };
    loop {
        let remaining = b - t;
        let last = dt >= remaining * (1.0 - 1e-12);
        if last {
            dt = remaining;
        }
        if dt < min_step {
            return Err(Error::StepUnderflow { t, dt });
        }
        if stats.attempted() >= config.max_steps {
            return Err(Error::MaxStepsExceeded(config.max_steps));
        }

        let k2 = call(
            rhs,
            tape,
            t + C[1] * dt,
            &combine(tape, &y, dt, &[(A2[0], &k1)])?,
            stats,
        )?;
        let k3 = call(
            rhs,
            tape,
            t + C[2] * dt,
            &combine(tape, &y, dt, &[(A3[0], &k1), (A3[1], &k2)])?,
            stats,
        )?;
        let k4 = call(
            rhs,
            tape,
            t + C[3] * dt,
            &combine(tape, &y, dt, &[(A4[0], &k1), (A4[1], &k2), (A4[2], &k3)])?,
            stats,
        )?;
        let k5 = call(
            rhs,
            tape,
            t + C[4] * dt,
            &combine(
                tape,
                &y,
                dt,
                &[(A5[0], &k1), (A5[1], &k2), (A5[2], &k3), (A5[3], &k4)],
            )?,
            stats,
        )?;
        let k6 = call(
            rhs,
            tape,
            t + dt,
            &combine(
                tape,
                &y,
                dt,
                &[
                    (A6[0], &k1),
                    (A6[1], &k2),
                    (A6[2], &k3),
                    (A6[3], &k4),
                    (A6[4], &k5),
                ],
            )?,
            stats,
        )?;
        let y_new = combine(
            tape,
            &y,
            dt,
            &[
                (B[0], &k1),
                (B[2], &k3),
                (B[3], &k4),
                (B[4], &k5),
                (B[5], &k6),
            ],
        )?;
        let t_new = if last { b } else { t + dt };
        let k7 = call(rhs, tape, t_new, &y_new, stats)?;

        let ks = [&k1, &k2, &k3, &k4, &k5, &k6, &k7];
        let err = error_norm(&ks, dt, y.data(), y_new.data(), config);

        if err <= 1.0 {
            stats.accepted += 1;
            let fac = if err == 0.0 {
                FAC_MAX
            } else {
                let expo = 0.2 - PI_BETA * 0.75;
                (SAFETY * err.powf(-expo) * ctl.err_prev.max(1e-4).powf(PI_BETA))
                    .clamp(FAC_MIN, FAC_MAX)
            };
            ctl.err_prev = err.max(1e-4);
            ctl.dt = Some(dt * fac);
            y = y_new;
            k1 = k7;
            t = t_new;
            if last {
                return Ok(y);
            }
            dt *= fac;
        } else {
            stats.rejected += 1;
            let fac = (SAFETY * err.powf(-0.2)).clamp(FAC_MIN, 1.0);
            dt *= fac;
        }
    }
}

/// RMS of the embedded error estimate scaled by
/// `max(atol, rtol · max(|y|, |y_new|))` per component.
fn error_norm(ks: &[&Tensor; 7], dt: f64, y: &[f64], y_new: &[f64], config: &SolverConfig) -> f64 {
    let n = y.len();
    if n == 0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let e: f64 = E.iter().zip(ks).map(|(c, k)| c * k.data()[i]).sum::<f64>() * dt;
        let sc = config
            .atol
            .max(config.rtol * y[i].abs().max(y_new[i].abs()));
        acc += (e / sc).powi(2);
    }
    (acc / n as f64).sqrt()
}

/// Result of an adaptive solve over the problem's whole span.
#[derive(Clone, Debug)]
pub struct Dopri5Solution {
    pub state: Tensor,
    pub accepted: usize,
    pub rejected: usize,
}

pub fn dopri5_solve<R: OdeRhs>(
    tape: &Tape,
    problem: &mut OdeProblem<R>,
    config: &SolverConfig,
) -> Result<Dopri5Solution> {
    config.validate()?;
    let mut stats = SolveStats::default();
    let mut ctl = Dopri5State {
        dt: None,
        err_prev: 1e-4,
    };
    let (a, b) = problem.t_span;
    let state = dopri5_segment(
        tape,
        &mut problem.rhs,
        &problem.h0,
        a,
        b,
        config,
        &mut ctl,
        &mut stats,
    )?;
    Ok(Dopri5Solution {
        state,
        accepted: stats.accepted,
        rejected: stats.rejected,
    })
}

/// Stateful integrator for consecutive segments with one method.
pub struct Integrator<'c> {
    config: &'c SolverConfig,
    ctl: Dopri5State,
    pub stats: SolveStats,
}

impl<'c> Integrator<'c> {
    pub fn new(config: &'c SolverConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            ctl: Dopri5State {
                dt: None,
                err_prev: 1e-4,
            },
            stats: SolveStats::default(),
        })
    }

    /// Advances `h` from `a` to `b`. When `b < a` the system is integrated
    /// backward in time.
    pub fn advance(
        &mut self,
        tape: &Tape,
        rhs: &mut impl OdeRhs,
        h: &Tensor,
        a: f64,
        b: f64,
    ) -> Result<Tensor> {
        if b >= a {
            self.forward(tape, rhs, h, a, b)
        } else {
            let mut rev = ReversedRef(rhs);
            self.forward(tape, &mut rev, h, -a, -b)
        }
    }

    fn forward(
        &mut self,
        tape: &Tape,
        rhs: &mut impl OdeRhs,
        h: &Tensor,
        a: f64,
        b: f64,
    ) -> Result<Tensor> {
        match self.config.method {
            SolverMethod::Rk4 => rk4_segment(tape, rhs, h, a, b, self.config, &mut self.stats),
            SolverMethod::Dopri5 => dopri5_segment(
                tape,
                rhs,
                h,
                a,
                b,
                self.config,
                &mut self.ctl,
                &mut self.stats,
            ),
        }
    }
}

struct ReversedRef<'a, R>(&'a mut R);

impl<R: OdeRhs> OdeRhs for ReversedRef<'_, R> {
    fn eval(&mut self, tape: &Tape, s: f64, h: &Tensor) -> Result<Tensor> {
        let f = self.0.eval(tape, -s, h)?;
        tape.neg(&f)
    }
}

/// States at each of `output_times` (ascending, not before the problem's
/// start), integrating segment by segment.
pub fn odesolve_at<R: OdeRhs>(
    tape: &Tape,
    problem: &mut OdeProblem<R>,
    output_times: &[f64],
    config: &SolverConfig,
) -> Result<Vec<Tensor>> {
    let t0 = problem.t_span.0;
    check_ascending(t0, output_times)?;
    let mut integ = Integrator::new(config)?;
    let mut out = Vec::with_capacity(output_times.len());
    let mut state = problem.h0.clone();
    let mut t = t0;
    for &next in output_times {
        state = integ.advance(tape, &mut problem.rhs, &state, t, next)?;
        t = next;
        out.push(state.clone());
    }
    Ok(out)
}

pub(crate) fn check_ascending(t0: f64, times: &[f64]) -> Result<()> {
    let mut prev = t0;
    for (i, &t) in times.iter().enumerate() {
        if !t.is_finite() || t < prev {
            return Err(Error::NonMonotoneTimes(format!(
                "time {t} at position {i} precedes {prev}"
            )));
        }
        prev = t;
    }
    Ok(())
}
