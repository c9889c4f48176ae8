//! One-step integrators (plus a two-step Adams-Bashforth) that advance a
//! subsystem across one exchange interval and record a dense
//! [`MicroTrajectory`]: every micro-step node together with the right-hand
//! side evaluated there.
//!
//! The final micro step is always clipped so the last node lands on the
//! interval's right edge bit-exactly.

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// State of a (sub)system. Entries are expected to stay finite.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StateVec(Vec<f64>);

impl StateVec {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// `self + scale * dir`, allocated.
    fn axpy(&self, scale: f64, dir: &[f64]) -> StateVec {
        StateVec(self.0.iter().zip(dir).map(|(x, d)| x + scale * d).collect())
    }
}

impl Deref for StateVec {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for StateVec {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for StateVec {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl From<&[f64]> for StateVec {
    fn from(v: &[f64]) -> Self {
        Self(v.to_vec())
    }
}

/// Right-hand side `dx = f(t, x)` of a (sub)system. Any input signals the
/// subsystem reads are captured by the implementor.
pub trait Rhs {
    fn dim(&self) -> usize;
    fn eval(&self, t: f64, x: &[f64], dx: &mut [f64]);
}

impl<R: Rhs + ?Sized> Rhs for &R {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval(&self, t: f64, x: &[f64], dx: &mut [f64]) {
        (**self).eval(t, x, dx)
    }
}

/// Adapts a closure into an [`Rhs`].
pub struct FnRhs<F> {
    dim: usize,
    f: F,
}

impl<F> FnRhs<F>
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> Rhs for FnRhs<F>
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, t: f64, x: &[f64], dx: &mut [f64]) {
        (self.f)(t, x, dx)
    }
}

fn eval_checked<R: Rhs + ?Sized>(f: &R, t: f64, x: &[f64]) -> Result<StateVec> {
    let mut dx = StateVec::zeros(x.len());
    f.eval(t, x, &mut dx);
    if dx.is_finite() {
        Ok(dx)
    } else {
        Err(Error::NonFiniteRhs { t })
    }
}

fn ensure_finite(x: StateVec, t: f64) -> Result<StateVec> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFiniteRhs { t })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    EulerForward,
    Rk4,
    Rk45Adaptive,
    Ab2,
}

/// One-step method used by AB2 whenever it has no history.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Startup {
    #[default]
    Euler,
    Rk4,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepControl {
    pub method: Method,
    pub h_fixed: Option<f64>,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub h_min: f64,
    pub h_max: f64,
    pub ab2_startup: Startup,
}

/// Step growth cap of the elementary controller.
pub const MAX_GROWTH: f64 = 5.0;
const MIN_SHRINK: f64 = 0.2;
const SAFETY: f64 = 0.9;

impl StepControl {
    pub fn fixed(method: Method, h: f64) -> Self {
        Self {
            method,
            h_fixed: Some(h),
            rel_tol: 1e-6,
            abs_tol: 1e-6,
            h_min: 0.0,
            h_max: h,
            ab2_startup: Startup::Euler,
        }
    }

    pub fn adaptive(tol: f64, h_max: f64) -> Self {
        Self {
            method: Method::Rk45Adaptive,
            h_fixed: None,
            rel_tol: tol,
            abs_tol: tol,
            h_min: 1e-14,
            h_max,
            ab2_startup: Startup::Euler,
        }
    }

    pub fn with_startup(mut self, startup: Startup) -> Self {
        self.ab2_startup = startup;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h_min <= self.h_max) {
            return Err(Error::StepControl(format!(
                "h_min = {} exceeds h_max = {}",
                self.h_min, self.h_max
            )));
        }
        if !(self.rel_tol > 0.0 && self.abs_tol > 0.0) {
            return Err(Error::StepControl("tolerances must be positive".into()));
        }
        match self.method {
            Method::EulerForward | Method::Rk4 | Method::Ab2 => match self.h_fixed {
                Some(h) if h > 0.0 && h.is_finite() => Ok(()),
                Some(h) => Err(Error::StepControl(format!("invalid fixed step {h}"))),
                None => Err(Error::StepControl(format!(
                    "{:?} requires a fixed step size",
                    self.method
                ))),
            },
            Method::Rk45Adaptive => {
                if self.h_max > 0.0 {
                    Ok(())
                } else {
                    Err(Error::StepControl("h_max must be positive".into()))
                }
            }
        }
    }
}

pub fn step_euler<R: Rhs + ?Sized>(f: &R, t: f64, x: &StateVec, h: f64) -> Result<StateVec> {
    let k1 = eval_checked(f, t, x)?;
    ensure_finite(x.axpy(h, &k1), t)
}

pub fn step_rk4<R: Rhs + ?Sized>(f: &R, t: f64, x: &StateVec, h: f64) -> Result<StateVec> {
    let k1 = eval_checked(f, t, x)?;
    rk4_from(f, t, x, &k1, h)
}

fn rk4_from<R: Rhs + ?Sized>(
    f: &R,
    t: f64,
    x: &StateVec,
    k1: &[f64],
    h: f64,
) -> Result<StateVec> {
    let k2 = eval_checked(f, t + 0.5 * h, &x.axpy(0.5 * h, k1))?;
    let k3 = eval_checked(f, t + 0.5 * h, &x.axpy(0.5 * h, &k2))?;
    let k4 = eval_checked(f, t + h, &x.axpy(h, &k3))?;
    let out: Vec<f64> = (0..x.dim())
        .map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect();
    ensure_finite(StateVec(out), t)
}

// Dormand-Prince 5(4) tableau.
const DP_C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
// Fifth-order weights minus embedded fourth-order weights.
const DP_E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Accepted Dormand-Prince step.
#[derive(Debug, Clone, PartialEq)]
pub struct Rk45Step {
    pub x_new: StateVec,
    pub h_used: f64,
    pub h_next: f64,
    /// Scaled RMS norm of the embedded difference; `<= 1` on acceptance.
    pub err_est: f64,
    /// Right-hand side at `(t + h_used, x_new)` (first-same-as-last stage).
    pub deriv_new: StateVec,
}

struct Rk45Attempt {
    x5: StateVec,
    k7: StateVec,
    err: f64,
}

fn rk45_attempt<R: Rhs + ?Sized>(
    f: &R,
    t: f64,
    x: &StateVec,
    k1: &StateVec,
    h: f64,
    ctrl: &StepControl,
) -> Result<Rk45Attempt> {
    let n = x.dim();
    let mut k: Vec<StateVec> = Vec::with_capacity(7);
    k.push(k1.clone());
    for stage in 1..7 {
        let mut xs = x.clone();
        for (j, kj) in k.iter().enumerate() {
            let a = DP_A[stage][j];
            if a != 0.0 {
                for i in 0..n {
                    xs[i] += h * a * kj[i];
                }
            }
        }
        let ks = eval_checked(f, t + DP_C[stage] * h, &xs)?;
        if stage == 6 {
            // Stage 7 is evaluated at the fifth-order solution itself.
            let mut sum = 0.0;
            for i in 0..n {
                let mut e = 0.0;
                for (j, kj) in k.iter().enumerate() {
                    e += DP_E[j] * kj[i];
                }
                e += DP_E[6] * ks[i];
                let sc = ctrl.abs_tol + ctrl.rel_tol * x[i].abs().max(xs[i].abs());
                sum += (h * e / sc).powi(2);
            }
            let err = if n == 0 { 0.0 } else { (sum / n as f64).sqrt() };
            let x5 = ensure_finite(xs, t)?;
            return Ok(Rk45Attempt { x5, k7: ks, err });
        }
        k.push(ks);
    }
    unreachable!("Dormand-Prince has seven stages")
}

fn controller_factor(err: f64) -> f64 {
    if err == 0.0 {
        MAX_GROWTH
    } else {
        (SAFETY * err.powf(-0.2)).clamp(MIN_SHRINK, MAX_GROWTH)
    }
}

pub fn step_rk45<R: Rhs + ?Sized>(
    f: &R,
    t: f64,
    x: &StateVec,
    h_try: f64,
    ctrl: &StepControl,
) -> Result<Rk45Step> {
    let k1 = eval_checked(f, t, x)?;
    rk45_from(f, t, x, &k1, h_try, ctrl)
}

fn rk45_from<R: Rhs + ?Sized>(
    f: &R,
    t: f64,
    x: &StateVec,
    k1: &StateVec,
    h_try: f64,
    ctrl: &StepControl,
) -> Result<Rk45Step> {
    if ctrl.method != Method::Rk45Adaptive {
        return Err(Error::StepControl(format!(
            "step_rk45 called with {:?}",
            ctrl.method
        )));
    }
    let mut h = h_try;
    loop {
        let att = rk45_attempt(f, t, x, k1, h, ctrl)?;
        if att.err <= 1.0 {
            let h_next = (h * controller_factor(att.err)).min(ctrl.h_max);
            return Ok(Rk45Step {
                x_new: att.x5,
                h_used: h,
                h_next,
                err_est: att.err,
                deriv_new: att.k7,
            });
        }
        // A rejected step never grows.
        h *= controller_factor(att.err).min(1.0);
        if h < ctrl.h_min {
            return Err(Error::StepSizeUnderflow {
                t,
                h,
                h_min: ctrl.h_min,
            });
        }
    }
}

/// RHS sample at the node preceding the current one.
#[derive(Debug, Clone, PartialEq)]
pub struct Ab2History {
    pub t: f64,
    pub f: StateVec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ab2Step {
    pub x: StateVec,
    /// History to hand to the next step (this step's starting node).
    pub history: Ab2History,
}

const AB2_SPACING_TOL: f64 = 1e-9;

/// Two-step Adams-Bashforth. Without history the configured one-step
/// startup method is taken instead.
pub fn step_ab2<R: Rhs + ?Sized>(
    f: &R,
    history: Option<&Ab2History>,
    t: f64,
    x: &StateVec,
    h: f64,
    startup: Startup,
) -> Result<Ab2Step> {
    let fx = eval_checked(f, t, x)?;
    ab2_from(f, history, t, x, fx, h, startup)
}

fn ab2_from<R: Rhs + ?Sized>(
    f: &R,
    history: Option<&Ab2History>,
    t: f64,
    x: &StateVec,
    fx: StateVec,
    h: f64,
    startup: Startup,
) -> Result<Ab2Step> {
    let x_new = match history {
        Some(prev) => {
            let spacing = t - prev.t;
            if (spacing - h).abs() > AB2_SPACING_TOL * h.abs().max(f64::MIN_POSITIVE) {
                return Err(Error::HistoryMismatch { spacing, h });
            }
            let out: Vec<f64> = (0..x.dim())
                .map(|i| x[i] + h * (1.5 * fx[i] - 0.5 * prev.f[i]))
                .collect();
            ensure_finite(StateVec(out), t)?
        }
        None => match startup {
            Startup::Euler => ensure_finite(x.axpy(h, &fx), t)?,
            Startup::Rk4 => rk4_from(f, t, x, &fx, h)?,
        },
    };
    Ok(Ab2Step {
        x: x_new,
        history: Ab2History { t, f: fx },
    })
}

/// Dense record of one subsystem over one exchange interval.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MicroTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<StateVec>,
    pub derivs: Vec<StateVec>,
}

impl MicroTrajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn span(&self) -> (f64, f64) {
        (self.times[0], self.times[self.times.len() - 1])
    }

    pub fn end_state(&self) -> &StateVec {
        self.states.last().expect("empty trajectory")
    }

    pub fn end_deriv(&self) -> Option<&StateVec> {
        self.derivs.last()
    }

    fn push(&mut self, t: f64, x: StateVec, dx: StateVec) {
        self.times.push(t);
        self.states.push(x);
        self.derivs.push(dx);
    }
}

/// Number of fixed steps tiling `span`; a ratio within rounding of an
/// integer is not rounded up.
pub fn fixed_step_count(span: f64, h: f64) -> usize {
    let r = span / h;
    let nearest = r.round();
    let n = if (r - nearest).abs() <= 1e-9 * nearest.max(1.0) {
        nearest
    } else {
        r.ceil()
    };
    (n as usize).max(1)
}

pub fn integrate<R: Rhs + ?Sized>(
    f: &R,
    x0: &StateVec,
    interval: (f64, f64),
    ctrl: &StepControl,
) -> Result<MicroTrajectory> {
    integrate_with_history(f, x0, interval, ctrl, None).map(|(traj, _)| traj)
}

/// Like [`integrate`], but AB2 may start from a history carried over from
/// the previous interval. Returns the history at the final node.
pub fn integrate_with_history<R: Rhs + ?Sized>(
    f: &R,
    x0: &StateVec,
    interval: (f64, f64),
    ctrl: &StepControl,
    history: Option<Ab2History>,
) -> Result<(MicroTrajectory, Option<Ab2History>)> {
    let (ta, tb) = interval;
    if !(tb > ta) {
        return Err(Error::Config(format!("empty interval [{ta}, {tb}]")));
    }
    ctrl.validate()?;
    let wrap = |step: usize, t: f64| move |e: Error| Error::Step {
        step,
        t,
        source: Box::new(e),
    };

    let mut traj = MicroTrajectory::default();
    let mut x = x0.clone();
    let mut fx = eval_checked(f, ta, &x).map_err(wrap(0, ta))?;

    match ctrl.method {
        Method::EulerForward | Method::Rk4 | Method::Ab2 => {
            let h = ctrl.h_fixed.expect("validated");
            let n = fixed_step_count(tb - ta, h);
            let mut hist = history;
            let mut t = ta;
            for i in 0..n {
                let t_next = if i + 1 == n { tb } else { ta + (i + 1) as f64 * h };
                let h_i = t_next - t;
                let x_next = match ctrl.method {
                    Method::EulerForward => ensure_finite(x.axpy(h_i, &fx), t),
                    Method::Rk4 => rk4_from(f, t, &x, &fx, h_i),
                    _ => ab2_from(f, hist.as_ref(), t, &x, fx.clone(), h_i, ctrl.ab2_startup)
                        .map(|s| {
                            hist = Some(s.history);
                            s.x
                        }),
                }
                .map_err(wrap(i, t))?;
                traj.push(t, x, fx);
                x = x_next;
                t = t_next;
                fx = eval_checked(f, t, &x).map_err(wrap(i + 1, t))?;
            }
            traj.push(tb, x, fx);
            Ok((traj, hist))
        }
        Method::Rk45Adaptive => {
            let mut t = ta;
            let mut h = ctrl.h_max.min(tb - ta);
            let mut i = 0;
            loop {
                let remaining = tb - t;
                let last = h >= remaining;
                let h_try = if last { remaining } else { h };
                let step = rk45_from(f, t, &x, &fx, h_try, ctrl).map_err(wrap(i, t))?;
                let reached_end = last && step.h_used == h_try;
                let t_next = if reached_end { tb } else { t + step.h_used };
                traj.push(t, std::mem::replace(&mut x, step.x_new), fx);
                fx = step.deriv_new;
                t = t_next;
                i += 1;
                if reached_end {
                    break;
                }
                h = step.h_next;
            }
            traj.push(tb, x, fx);
            Ok((traj, None))
        }
    }
}
