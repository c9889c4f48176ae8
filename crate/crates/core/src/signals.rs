//! Input reconstruction between exchange times.
//!
//! Every reconstruction here is a polynomial on its support, so evaluation
//! and integration are closed form: hold functions ([`Extrapolant`]), the
//! degree-5 switch between consecutive hold functions ([`SwitchBlend`]) and
//! balance corrections riding on top of either ([`CorrectedInput`]).
//! [`BalanceLedger`] keeps track of committed balance errors and where they
//! are re-injected.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ode::MicroTrajectory;

/// Dense polynomial in the shifted variable `s = t - origin`.
#[derive(Debug, Clone, PartialEq)]
pub struct Poly {
    origin: f64,
    coeffs: Vec<f64>,
}

impl Poly {
    pub fn new(origin: f64, coeffs: Vec<f64>) -> Self {
        let coeffs = if coeffs.is_empty() { vec![0.0] } else { coeffs };
        Self { origin, coeffs }
    }

    pub fn constant(origin: f64, value: f64) -> Self {
        Self::new(origin, vec![value])
    }

    pub fn origin(&self) -> f64 {
        self.origin
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn eval(&self, t: f64) -> f64 {
        let s = t - self.origin;
        self.coeffs.iter().rev().fold(0.0, |acc, c| acc * s + c)
    }

    pub fn derivative_at(&self, t: f64) -> f64 {
        let s = t - self.origin;
        self.coeffs
            .iter()
            .enumerate()
            .skip(1)
            .rev()
            .fold(0.0, |acc, (i, c)| acc * s + i as f64 * c)
    }

    /// Same polynomial expressed around `origin`.
    pub fn shifted(&self, origin: f64) -> Poly {
        let d = origin - self.origin;
        let mut c = self.coeffs.clone();
        if d != 0.0 {
            // Repeated synthetic division (Taylor shift by d).
            let n = c.len();
            for i in 0..n {
                for j in (i..n - 1).rev() {
                    c[j] += d * c[j + 1];
                }
            }
        }
        Poly { origin, coeffs: c }
    }

    pub fn add(&self, other: &Poly) -> Poly {
        let o = other.shifted(self.origin);
        let n = self.coeffs.len().max(o.coeffs.len());
        let coeffs = (0..n)
            .map(|i| self.coeffs.get(i).unwrap_or(&0.0) + o.coeffs.get(i).unwrap_or(&0.0))
            .collect();
        Poly::new(self.origin, coeffs)
    }

    pub fn scale(&self, k: f64) -> Poly {
        Poly::new(self.origin, self.coeffs.iter().map(|c| k * c).collect())
    }

    pub fn mul(&self, other: &Poly) -> Poly {
        let o = other.shifted(self.origin);
        let mut coeffs = vec![0.0; self.coeffs.len() + o.coeffs.len() - 1];
        for (i, a) in self.coeffs.iter().enumerate() {
            for (j, b) in o.coeffs.iter().enumerate() {
                coeffs[i + j] += a * b;
            }
        }
        Poly::new(self.origin, coeffs)
    }

    pub fn integral(&self, a: f64, b: f64) -> f64 {
        let (sa, sb) = (a - self.origin, b - self.origin);
        let mut total = 0.0;
        let (mut pa, mut pb) = (sa, sb);
        for (i, c) in self.coeffs.iter().enumerate() {
            total += c * (pb - pa) / (i + 1) as f64;
            pa *= sa;
            pb *= sb;
        }
        total
    }
}

/// Anything that delivers an input value on an exchange interval.
pub trait InputSignal {
    fn support(&self) -> (f64, f64);
    fn eval(&self, t: f64) -> f64;
    fn poly(&self) -> &Poly;

    /// Closed-form integral over `[a, b]`, which must lie in the support.
    fn integrate(&self, a: f64, b: f64) -> Result<f64> {
        check_support(self.support(), a, b)?;
        Ok(self.poly().integral(a, b))
    }
}

fn check_support((lo, hi): (f64, f64), a: f64, b: f64) -> Result<()> {
    let tol = 1e-12 * (1.0 + lo.abs() + hi.abs());
    if a < lo - tol || b > hi + tol || a > b {
        Err(Error::OutsideSupport { a, b, lo, hi })
    } else {
        Ok(())
    }
}

pub fn integrate_extrapolant(e: &dyn InputSignal, a: f64, b: f64) -> Result<f64> {
    e.integrate(a, b)
}

/// Hold function of one input channel on one exchange interval.
///
/// Evaluation is defined everywhere (the polynomial is simply continued),
/// which lets the next interval's blend reuse it.
#[derive(Debug, Clone, PartialEq)]
pub struct Extrapolant {
    pub channel: usize,
    pub support: (f64, f64),
    poly: Poly,
}

impl Extrapolant {
    /// Wraps a polynomial; it is re-expressed around the support's left edge.
    pub fn from_poly(channel: usize, support: (f64, f64), poly: &Poly) -> Self {
        Self {
            channel,
            support,
            poly: poly.shifted(support.0),
        }
    }

    pub fn degree(&self) -> usize {
        self.poly.coeffs.len() - 1
    }

    /// Coefficients in powers of `t - support.0`.
    pub fn coeffs(&self) -> &[f64] {
        &self.poly.coeffs
    }

    pub fn with_channel(mut self, channel: usize) -> Self {
        self.channel = channel;
        self
    }
}

impl InputSignal for Extrapolant {
    fn support(&self) -> (f64, f64) {
        self.support
    }
    fn eval(&self, t: f64) -> f64 {
        self.poly.eval(t)
    }
    fn poly(&self) -> &Poly {
        &self.poly
    }
}

/// Zero-order hold: the sample value everywhere on the support.
pub fn fit_zoh(_t0: f64, u0: f64, support: (f64, f64)) -> Extrapolant {
    Extrapolant::from_poly(0, support, &Poly::constant(support.0, u0))
}

/// First-order hold from a value and a slope sampled at `t0`.
pub fn fit_foh(t0: f64, u0: f64, du0: f64, support: (f64, f64)) -> Extrapolant {
    Extrapolant::from_poly(0, support, &Poly::new(t0, vec![u0, du0]))
}

/// Interpolating polynomial of degree `degree` through the most recent
/// `degree + 1` samples, continued over `support`.
pub fn fit_lagrange(samples: &[(f64, f64)], degree: usize, support: (f64, f64)) -> Result<Extrapolant> {
    let needed = degree + 1;
    if samples.len() < needed {
        return Err(Error::NotEnoughSamples {
            degree,
            needed,
            got: samples.len(),
        });
    }
    let used = &samples[samples.len() - needed..];
    for (i, (ti, _)) in used.iter().enumerate() {
        if used[..i].iter().any(|(tj, _)| tj == ti) {
            return Err(Error::DuplicateSampleTime(*ti));
        }
    }
    let a = support.0;
    // Newton divided differences.
    let ts: Vec<f64> = used.iter().map(|(t, _)| t - a).collect();
    let mut dd: Vec<f64> = used.iter().map(|(_, u)| *u).collect();
    for level in 1..needed {
        for i in (level..needed).rev() {
            dd[i] = (dd[i] - dd[i - 1]) / (ts[i] - ts[i - level]);
        }
    }
    // Expand Newton form in s = t - a by Horner on the basis products.
    let mut coeffs = vec![dd[needed - 1]];
    for i in (0..needed - 1).rev() {
        // coeffs <- coeffs * (s - ts[i]) + dd[i]
        let mut next = vec![0.0; coeffs.len() + 1];
        for (k, c) in coeffs.iter().enumerate() {
            next[k + 1] += c;
            next[k] -= ts[i] * c;
        }
        next[0] += dd[i];
        coeffs = next;
    }
    Ok(Extrapolant::from_poly(0, support, &Poly::new(a, coeffs)))
}

/// Smoothstep `6τ⁵ - 15τ⁴ + 10τ³` on `[a, a + len]`, as a polynomial in `t - a`.
pub fn switch_poly(a: f64, len: f64) -> Poly {
    Poly::new(
        a,
        vec![
            0.0,
            0.0,
            0.0,
            10.0 / len.powi(3),
            -15.0 / len.powi(4),
            6.0 / len.powi(5),
        ],
    )
}

/// Convex switch from the previous interval's hold function to the current one.
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchBlend {
    pub prev: Extrapolant,
    pub next: Extrapolant,
    pub support: (f64, f64),
    poly: Poly,
}

impl SwitchBlend {
    pub fn sigma(&self, t: f64) -> f64 {
        let (a, b) = self.support;
        switch_poly(a, b - a).eval(t)
    }
}

impl InputSignal for SwitchBlend {
    fn support(&self) -> (f64, f64) {
        self.support
    }
    fn eval(&self, t: f64) -> f64 {
        self.poly.eval(t)
    }
    fn poly(&self) -> &Poly {
        &self.poly
    }
}

pub fn smooth_blend(prev: &Extrapolant, next: &Extrapolant, interval: (f64, f64)) -> SwitchBlend {
    let (a, b) = interval;
    let p = prev.poly.shifted(a);
    let n = next.poly.shifted(a);
    let sigma = switch_poly(a, b - a);
    let poly = p.add(&sigma.mul(&n.add(&p.scale(-1.0))));
    SwitchBlend {
        prev: prev.clone(),
        next: next.clone(),
        support: interval,
        poly,
    }
}

/// Shape of the unit-mass weight used to re-inject a balance error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    /// `1 / H` on the interval.
    #[default]
    ConstantBox,
    /// `30 τ² (1 - τ)² / H`: vanishes with its first derivative at both ends.
    SmoothBump,
}

pub fn weight_poly(kind: WeightKind, interval: (f64, f64)) -> Poly {
    let (a, b) = interval;
    let len = b - a;
    match kind {
        WeightKind::ConstantBox => Poly::constant(a, 1.0 / len),
        WeightKind::SmoothBump => Poly::new(
            a,
            vec![
                0.0,
                0.0,
                30.0 / len.powi(3),
                -60.0 / len.powi(4),
                30.0 / len.powi(5),
            ],
        ),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BaseSignal {
    Hold(Extrapolant),
    Blend(SwitchBlend),
}

impl BaseSignal {
    pub fn hold(&self) -> &Extrapolant {
        match self {
            BaseSignal::Hold(e) => e,
            BaseSignal::Blend(b) => &b.next,
        }
    }
}

impl InputSignal for BaseSignal {
    fn support(&self) -> (f64, f64) {
        match self {
            BaseSignal::Hold(e) => e.support,
            BaseSignal::Blend(b) => b.support,
        }
    }
    fn eval(&self, t: f64) -> f64 {
        self.poly().eval(t)
    }
    fn poly(&self) -> &Poly {
        match self {
            BaseSignal::Hold(e) => &e.poly,
            BaseSignal::Blend(b) => &b.poly,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correction {
    pub kind: WeightKind,
    pub amount: f64,
}

/// Base reconstruction plus re-injected balance errors.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectedInput {
    pub base: BaseSignal,
    pub corrections: Vec<Correction>,
    poly: Poly,
}

impl CorrectedInput {
    pub fn new(base: BaseSignal, corrections: Vec<Correction>) -> Self {
        let support = base.support();
        let poly = corrections.iter().fold(base.poly().clone(), |acc, c| {
            acc.add(&weight_poly(c.kind, support).scale(c.amount))
        });
        Self {
            base,
            corrections,
            poly,
        }
    }

    pub fn plain(base: BaseSignal) -> Self {
        Self::new(base, Vec::new())
    }

    pub fn correction_total(&self) -> f64 {
        self.corrections.iter().map(|c| c.amount).sum()
    }
}

impl InputSignal for CorrectedInput {
    fn support(&self) -> (f64, f64) {
        self.base.support()
    }
    fn eval(&self, t: f64) -> f64 {
        self.poly.eval(t)
    }
    fn poly(&self) -> &Poly {
        &self.poly
    }
}

pub fn corrected_eval(ci: &CorrectedInput, t: f64) -> f64 {
    ci.eval(t)
}

/// Integral of sampled data: cubic Hermite when derivatives are present,
/// trapezoid otherwise.
pub fn node_quadrature(times: &[f64], values: &[f64], derivs: Option<&[f64]>) -> f64 {
    let mut total = 0.0;
    for i in 1..times.len() {
        let h = times[i] - times[i - 1];
        total += 0.5 * h * (values[i - 1] + values[i]);
        if let Some(d) = derivs {
            total += h * h / 12.0 * (d[i - 1] - d[i]);
        }
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BalanceError {
    /// True integral minus delivered base integral; positive means the
    /// receiver got too little.
    pub delta_e: f64,
    pub sender_integral: f64,
    pub base_integral: f64,
    /// Set when the trapezoid fallback was used.
    pub reduced_order: bool,
}

/// Balance error of one channel over one interval. `component` indexes the
/// sender's local state.
pub fn compute_balance_error(
    sender: &MicroTrajectory,
    component: usize,
    base: &dyn InputSignal,
    interval: (f64, f64),
) -> Result<BalanceError> {
    if sender.is_empty() {
        return Err(Error::OutsideSupport {
            a: interval.0,
            b: interval.1,
            lo: f64::NAN,
            hi: f64::NAN,
        });
    }
    let (lo, hi) = sender.span();
    check_support((lo, hi), interval.0, interval.1)?;
    let values: Vec<f64> = sender.states.iter().map(|x| x[component]).collect();
    let have_derivs = sender.derivs.len() == sender.times.len();
    let derivs: Option<Vec<f64>> =
        have_derivs.then(|| sender.derivs.iter().map(|d| d[component]).collect());
    let sender_integral = node_quadrature(&sender.times, &values, derivs.as_deref());
    let base_integral = base.integrate(interval.0, interval.1)?;
    Ok(BalanceError {
        delta_e: sender_integral - base_integral,
        sender_integral,
        base_integral,
        reduced_order: !have_derivs,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LedgerEntry {
    /// Interval on which the error was committed (1-based).
    pub interval: usize,
    pub delta_e: f64,
    /// Part of `delta_e` not yet delivered.
    pub remaining: f64,
    /// `(target interval, amount)`.
    pub schedule: Vec<(usize, f64)>,
}

/// Committed balance errors per channel and their re-injection schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct BalanceLedger {
    pub weight_kind: WeightKind,
    pub spread_k: usize,
    channels: Vec<Vec<LedgerEntry>>,
}

impl BalanceLedger {
    pub fn new(n_channels: usize, weight_kind: WeightKind, spread_k: usize) -> Self {
        Self {
            weight_kind,
            spread_k: spread_k.max(1),
            channels: vec![Vec::new(); n_channels],
        }
    }

    pub fn entries(&self, channel: usize) -> &[LedgerEntry] {
        &self.channels[channel]
    }

    /// Splits `delta_e` into `spread_k` equal parts aimed at intervals
    /// `j + 1 ..= j + spread_k`.
    pub fn schedule_correction(&mut self, channel: usize, j: usize, delta_e: f64) {
        let k = self.spread_k;
        let schedule = if delta_e == 0.0 {
            Vec::new()
        } else {
            let part = delta_e / k as f64;
            let mut parts: Vec<(usize, f64)> = (1..k).map(|i| (j + i, part)).collect();
            let head: f64 = parts.iter().map(|(_, a)| a).sum();
            parts.push((j + k, delta_e - head));
            parts
        };
        self.channels[channel].push(LedgerEntry {
            interval: j,
            delta_e,
            remaining: delta_e,
            schedule,
        });
    }

    /// Corrections due on interval `target` for `channel`, oldest first.
    pub fn corrections_for(&self, channel: usize, target: usize) -> Vec<Correction> {
        self.channels[channel]
            .iter()
            .flat_map(|e| e.schedule.iter())
            .filter(|(t, _)| *t == target)
            .map(|&(_, amount)| Correction {
                kind: self.weight_kind,
                amount,
            })
            .collect()
    }

    /// Books everything scheduled for `target` as delivered.
    pub fn mark_delivered(&mut self, target: usize) {
        for entries in &mut self.channels {
            for e in entries.iter_mut() {
                for (t, amount) in &e.schedule {
                    if *t == target {
                        e.remaining -= amount;
                    }
                }
                if e.schedule.iter().all(|(t, _)| *t <= target) {
                    e.remaining = 0.0;
                }
            }
        }
    }

    /// Amount scheduled beyond the last interval, which can never be delivered.
    pub fn residual(&self, channel: usize, last_interval: usize) -> f64 {
        self.channels[channel]
            .iter()
            .flat_map(|e| e.schedule.iter())
            .filter(|(t, _)| *t > last_interval)
            .map(|(_, a)| a)
            .sum()
    }
}
