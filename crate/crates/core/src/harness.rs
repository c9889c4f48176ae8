//! Experiment drivers: convergence orders, energy stability, balance
//! correction and the multistep restart pitfall.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{DerivativeSource, Extrapolation, HRule, Partition, SchemeConfig, SystemKind, SystemSpec};
use crate::ode::{integrate, Method, StateVec, StepControl, Startup};
use crate::oracles::ReferenceSolution;
use crate::orchestrator::{energy, run_cosim_with, CosimRun, HistoryMode, RunOptions};

pub const DEFAULT_TOL: f64 = 1e-12;
pub const DEFAULT_H_RULE: HRule = HRule::Proportional(10);
pub const STABILITY_HS: [f64; 4] = [0.2, 0.1, 0.05, 0.025];
/// Relative energy growth above which a run counts as unstable.
pub const ENERGY_DELTA: f64 = 1e-3;
pub const MIN_FIT_LEVELS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Problem {
    LinearTriangular,
    LinearOffdiag,
    SpringMass,
}

impl Problem {
    pub fn system(self) -> SystemSpec {
        let lin = |b: [f64; 4]| {
            SystemSpec::linear(DMatrix::from_row_slice(2, 2, &b), vec![1.0, 1.0], (0.0, 2.0))
                .expect("preset is valid")
        };
        match self {
            Problem::LinearTriangular => lin([-1.0, 0.0, 1.0, -2.0]),
            Problem::LinearOffdiag => lin([0.0, 1.0, -1.0, 0.0]),
            Problem::SpringMass => SystemSpec::spring_mass(1.0, 1.0, 0.0, vec![1.0, 0.0], (0.0, 20.0))
                .expect("preset is valid"),
        }
    }

    /// One subsystem per state.
    pub fn partition(self, sys: &SystemSpec) -> Partition {
        Partition::from_blocks(sys, &[vec![0], vec![1]])
    }
}

impl fmt::Display for Problem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Problem::LinearTriangular => "linear_triangular",
            Problem::LinearOffdiag => "linear_offdiag",
            Problem::SpringMass => "spring_mass",
        })
    }
}

impl FromStr for Problem {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "linear_triangular" | "triangular" => Ok(Problem::LinearTriangular),
            "linear_offdiag" | "offdiag" => Ok(Problem::LinearOffdiag),
            "spring_mass" => Ok(Problem::SpringMass),
            _ => Err(Error::Config(format!("unknown problem '{s}'"))),
        }
    }
}

/// `H = 0.2 / 2^N` for `N = 0..n`.
pub fn default_levels(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.2 / f64::powi(2.0, i as i32)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrderFit {
    /// Least-squares slope of `log e` against `log H`.
    pub slope: f64,
    /// `log2(e_k / e_{k+1})` over adjacent retained levels.
    pub ratios: Vec<f64>,
    /// Indices dropped for non-positive or non-finite error.
    pub excluded: Vec<usize>,
}

pub fn estimate_order(errors: &[f64], hs: &[f64]) -> Result<OrderFit> {
    if errors.len() != hs.len() {
        return Err(Error::Config(format!(
            "{} errors for {} step sizes",
            errors.len(),
            hs.len()
        )));
    }
    let mut excluded = Vec::new();
    let mut pts = Vec::new();
    for (i, (&e, &h)) in errors.iter().zip(hs).enumerate() {
        if e > 0.0 && e.is_finite() && h > 0.0 {
            pts.push((h.ln(), e.ln()));
        } else {
            excluded.push(i);
        }
    }
    if pts.len() < 2 {
        return Err(Error::TooFewLevels(pts.len()));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Config("all step sizes coincide".into()));
    }
    let ratios = pts
        .windows(2)
        .map(|w| (w[0].1 - w[1].1) / std::f64::consts::LN_2)
        .collect();
    Ok(OrderFit {
        slope: sxy / sxx,
        ratios,
        excluded,
    })
}

/// A scheme setting swept over exchange steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub label: String,
    /// Its exchange step is replaced by each level.
    pub scheme: SchemeConfig,
    pub history: HistoryMode,
}

impl Variant {
    pub fn new(label: impl Into<String>, extrapolation: Extrapolation, solver: StepControl, h_rule: HRule) -> Self {
        Self {
            label: label.into(),
            scheme: SchemeConfig::new(1.0, extrapolation, solver, h_rule),
            history: HistoryMode::Restart,
        }
    }

    /// RK45 at the default tolerance under the default h rule.
    pub fn standard(label: impl Into<String>, extrapolation: Extrapolation) -> Self {
        Self::new(
            label,
            extrapolation,
            StepControl::adaptive(DEFAULT_TOL, f64::INFINITY),
            DEFAULT_H_RULE,
        )
    }

    pub fn with_correction(mut self, spread_k: usize) -> Self {
        self.scheme.balance_correction = true;
        self.scheme.spread_k = spread_k;
        self
    }

    pub fn with_history(mut self, history: HistoryMode) -> Self {
        self.history = history;
        self
    }

    pub fn at(&self, big_h: f64) -> SchemeConfig {
        SchemeConfig {
            exchange_step: big_h,
            ..self.scheme.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub variant: String,
    pub big_h: f64,
    pub h: f64,
    /// Euclidean error at the end time.
    pub error_end: f64,
    /// Largest Euclidean error over the exchange grid.
    pub error_sup: f64,
    /// Signed end-time error per state.
    pub component_errors: Vec<f64>,
    /// Run blew up or failed inside an interval.
    pub dnf: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantFit {
    pub variant: String,
    pub order_end: Option<OrderFit>,
    pub order_sup: Option<OrderFit>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub system: String,
    pub rows: Vec<ConvergenceRow>,
    pub fits: Vec<VariantFit>,
}

impl ConvergenceReport {
    pub fn fit(&self, variant: &str) -> Option<&VariantFit> {
        self.fits.iter().find(|f| f.variant == variant)
    }

    /// End-time fitted order of a variant.
    pub fn order(&self, variant: &str) -> Option<f64> {
        self.fit(variant)?.order_end.as_ref().map(|f| f.slope)
    }

    pub fn rows_of<'a>(&'a self, variant: &'a str) -> impl Iterator<Item = &'a ConvergenceRow> + 'a {
        self.rows.iter().filter(move |r| r.variant == variant)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn run_opts(history: HistoryMode) -> RunOptions {
    RunOptions {
        parallel: false,
        history,
        keep_trajectories: false,
    }
}

fn measure(
    sys: &SystemSpec,
    part: &Partition,
    oracle: &ReferenceSolution,
    variant: &Variant,
    big_h: f64,
) -> Result<ConvergenceRow> {
    let cfg = variant.at(big_h);
    let mut row = ConvergenceRow {
        variant: variant.label.clone(),
        big_h,
        h: cfg.resolved_micro_step(),
        error_end: f64::NAN,
        error_sup: f64::NAN,
        component_errors: vec![f64::NAN; sys.dim()],
        dnf: true,
    };
    let run = match run_cosim_with(sys, part, &cfg, &run_opts(variant.history)) {
        Ok(run) => run,
        Err(Error::Interval { .. }) => return Ok(row),
        Err(e) => return Err(e),
    };
    if !run.states.iter().all(|x| x.is_finite()) {
        return Ok(row);
    }
    let mut sup = 0.0f64;
    let mut last = Vec::new();
    for (&t, x) in run.grid.times().iter().zip(&run.states) {
        let exact = oracle.eval(t)?;
        last = x.iter().zip(exact.iter()).map(|(a, b)| a - b).collect();
        sup = sup.max(norm(&last));
    }
    row.error_end = norm(&last);
    row.error_sup = sup;
    row.component_errors = last;
    row.dnf = false;
    Ok(row)
}

fn fit_rows<'a>(rows: impl Iterator<Item = &'a ConvergenceRow>, sup: bool) -> Option<OrderFit> {
    let (errs, hs): (Vec<f64>, Vec<f64>) = rows
        .filter(|r| !r.dnf)
        .map(|r| (if sup { r.error_sup } else { r.error_end }, r.big_h))
        .unzip();
    let fit = estimate_order(&errs, &hs).ok()?;
    (errs.len() - fit.excluded.len() >= MIN_FIT_LEVELS).then_some(fit)
}

/// Runs every (variant, level) pair against the exact oracle of `problem`.
pub fn convergence_study(problem: Problem, variants: &[Variant], levels: &[f64]) -> Result<ConvergenceReport> {
    let sys = problem.system();
    let part = problem.partition(&sys);
    study_system(&problem.to_string(), &sys, &part, variants, levels)
}

pub fn study_system(
    name: &str,
    sys: &SystemSpec,
    part: &Partition,
    variants: &[Variant],
    levels: &[f64],
) -> Result<ConvergenceReport> {
    let oracle = ReferenceSolution::exact(sys);
    let jobs: Vec<(&Variant, f64)> = variants
        .iter()
        .flat_map(|v| levels.iter().map(move |&h| (v, h)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|(v, h)| measure(sys, part, &oracle, v, *h))
        .collect::<Result<Vec<_>>>()?;
    let fits = variants
        .iter()
        .map(|v| {
            let mine = || rows.iter().filter(|r| r.variant == v.label);
            VariantFit {
                variant: v.label.clone(),
                order_end: fit_rows(mine(), false),
                order_sup: fit_rows(mine(), true),
            }
        })
        .collect();
    Ok(ConvergenceReport {
        system: name.to_string(),
        rows,
        fits,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityRun {
    pub extrapolation: Extrapolation,
    pub derivative_source: DerivativeSource,
    pub big_h: f64,
    pub times: Vec<f64>,
    pub energy: Vec<f64>,
    /// `E(T_N) > E(T_0) (1 + δ)`.
    pub unstable: bool,
    pub strictly_growing: bool,
}

impl StabilityRun {
    pub fn initial_energy(&self) -> f64 {
        self.energy[0]
    }

    pub fn final_energy(&self) -> f64 {
        *self.energy.last().expect("grid has two points")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub runs: Vec<StabilityRun>,
    /// Largest relative energy deviation of the monolithic RK45 solution
    /// over the coarsest exchange grid.
    pub reference_drift: f64,
}

/// Energy series of the undamped spring-mass system for every `H` in `hs`
/// under ZOH and under FOH with sampled and with lagged derivative exports.
pub fn stability_experiment(sys: &SystemSpec, hs: &[f64], solver: &StepControl, h_rule: HRule) -> Result<StabilityReport> {
    let (c, m) = match sys.kind {
        SystemKind::SpringMass { c, m, d } if d == 0.0 => (c, m),
        _ => return Err(Error::Config("stability experiment needs an undamped spring-mass system".into())),
    };
    let part = Partition::from_blocks(sys, &[vec![0], vec![1]]);
    let schemes = [
        (Extrapolation::Zoh, DerivativeSource::Lagged),
        (Extrapolation::Foh, DerivativeSource::Sampled),
        (Extrapolation::Foh, DerivativeSource::Lagged),
    ];
    let jobs: Vec<(Extrapolation, DerivativeSource, f64)> = schemes
        .into_iter()
        .flat_map(|(e, d)| hs.iter().map(move |&h| (e, d, h)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(extrapolation, derivative_source, big_h)| {
            let cfg = SchemeConfig {
                derivative_source,
                ..SchemeConfig::new(big_h, extrapolation, solver.clone(), h_rule)
            };
            let run = run_cosim_with(sys, &part, &cfg, &run_opts(HistoryMode::Restart))?;
            let energy = run.energy.clone().expect("spring-mass runs record energy");
            let (e0, en) = (energy[0], *energy.last().expect("non-empty"));
            Ok(StabilityRun {
                extrapolation,
                derivative_source,
                big_h,
                times: run.grid.times().to_vec(),
                unstable: en > e0 * (1.0 + ENERGY_DELTA),
                strictly_growing: energy.windows(2).all(|w| w[1] > w[0]),
                energy,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let coarse = hs.iter().copied().fold(0.0, f64::max);
    let grid = crate::orchestrator::ExchangeGrid::uniform(sys.t_span.0, sys.t_span.1, coarse)?;
    let e0 = energy(&sys.x0, c, m);
    let mut x = sys.x0.clone();
    let mut drift = 0.0f64;
    let ctrl = StepControl::adaptive(DEFAULT_TOL, coarse);
    for w in grid.times().windows(2) {
        let traj = integrate(&sys.monolithic_rhs(), &x, (w[0], w[1]), &ctrl)?;
        x = traj.end_state().clone();
        drift = drift.max((energy(&x, c, m) - e0).abs() / e0);
    }
    Ok(StabilityReport {
        runs,
        reference_drift: drift,
    })
}

/// ZOH without and with balance correction, next to FOH, all sharing the
/// remaining settings of `base`.
pub fn balance_variants(base: &SchemeConfig) -> Vec<Variant> {
    let v = |label: &str, extrapolation, correction: Option<usize>| Variant {
        label: label.into(),
        scheme: SchemeConfig {
            extrapolation,
            balance_correction: correction.is_some(),
            spread_k: correction.unwrap_or(base.spread_k),
            ..base.clone()
        },
        history: HistoryMode::Restart,
    };
    vec![
        v("zoh", Extrapolation::Zoh, None),
        v("zoh_bc1", Extrapolation::Zoh, Some(1)),
        v("zoh_bc2", Extrapolation::Zoh, Some(2)),
        v("foh", Extrapolation::Foh, None),
    ]
}

pub fn balance_correction_study(levels: &[f64]) -> Result<ConvergenceReport> {
    let base = Variant::standard("base", Extrapolation::Zoh).scheme;
    convergence_study(Problem::SpringMass, &balance_variants(&base), levels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExactHoldCheck {
    pub max_abs_delta_e: f64,
    /// Largest state difference between corrected and plain runs.
    pub max_state_diff: f64,
}

/// Correction on a channel that FOH reconstructs exactly: the exchanged
/// state grows linearly in time.
pub fn exact_hold_correction_check() -> Result<ExactHoldCheck> {
    let b = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
    let sys = SystemSpec::linear(b, vec![0.5, 1.0, 0.75], (0.0, 1.0))?;
    let part = Partition::from_blocks(&sys, &[vec![0], vec![1, 2]]);
    let solver = StepControl::fixed(Method::Rk4, 0.01);
    let plain = SchemeConfig::new(0.1, Extrapolation::Foh, solver, HRule::Proportional(10));
    let corrected = SchemeConfig {
        balance_correction: true,
        ..plain.clone()
    };
    let opts = RunOptions::default();
    let a = run_cosim_with(&sys, &part, &plain, &opts)?;
    let b = run_cosim_with(&sys, &part, &corrected, &opts)?;
    let max_abs_delta_e = b
        .diagnostics
        .iter()
        .flat_map(|d| d.delta_e.iter())
        .fold(0.0f64, |m, e| m.max(e.abs()));
    let max_state_diff = a
        .states
        .iter()
        .zip(&b.states)
        .flat_map(|(x, y)| x.iter().zip(y.iter()).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max);
    Ok(ExactHoldCheck {
        max_abs_delta_e,
        max_state_diff,
    })
}

pub const PITFALL_LABELS: [&str; 4] = ["restart_euler", "carry_euler", "restart_rk4", "carry_rk4"];

/// Fixed-step AB2 under FOH, restarting at every exchange or carrying
/// history across it, with Euler or RK4 startup.
pub fn pitfall_variants(h_rule: HRule) -> Vec<Variant> {
    let mut out = Vec::new();
    for startup in [Startup::Euler, Startup::Rk4] {
        for history in [HistoryMode::Restart, HistoryMode::Carry] {
            // The micro step is resolved from the h rule per level.
            let solver = StepControl::fixed(Method::Ab2, f64::NAN).with_startup(startup);
            let idx = out.len();
            let label = PITFALL_LABELS[idx];
            out.push(Variant::new(label, Extrapolation::Foh, solver, h_rule).with_history(history));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PitfallReport {
    pub convergence: ConvergenceReport,
    /// Carried minus restarted order, Euler startup.
    pub gap_euler: Option<f64>,
    /// Same with RK4 startup.
    pub gap_rk4: Option<f64>,
    /// Variants whose end error has an interior local minimum over the
    /// levels, with the levels where the error sign flips.
    pub local_minima: Vec<(String, Vec<f64>)>,
}

pub fn pitfall_experiment(levels: &[f64], h_rule: HRule) -> Result<PitfallReport> {
    let sys = Problem::LinearTriangular.system();
    let part = Problem::LinearTriangular.partition(&sys);
    pitfall_on(&Problem::LinearTriangular.to_string(), &sys, &part, levels, h_rule)
}

pub fn pitfall_on(name: &str, sys: &SystemSpec, part: &Partition, levels: &[f64], h_rule: HRule) -> Result<PitfallReport> {
    if matches!(h_rule, HRule::SolverAdaptive) {
        return Err(Error::Config("pitfall experiment needs a fixed micro step".into()));
    }
    let convergence = study_system(name, sys, part, &pitfall_variants(h_rule), levels)?;
    let gap = |a: &str, b: &str| Some(convergence.order(a)? - convergence.order(b)?);
    let gap_euler = gap("carry_euler", "restart_euler");
    let gap_rk4 = gap("carry_rk4", "restart_rk4");
    let mut local_minima = Vec::new();
    for label in PITFALL_LABELS {
        let rows: Vec<&ConvergenceRow> = convergence.rows_of(label).filter(|r| !r.dnf).collect();
        let has_min = rows
            .windows(3)
            .any(|w| w[1].error_end < w[0].error_end && w[1].error_end < w[2].error_end);
        if has_min {
            let flips = rows
                .windows(2)
                .filter(|w| {
                    let last = w[0].component_errors.len() - 1;
                    w[0].component_errors[last].signum() != w[1].component_errors[last].signum()
                })
                .map(|w| w[1].big_h)
                .collect();
            local_minima.push((label.to_string(), flips));
        }
    }
    Ok(PitfallReport {
        convergence,
        gap_euler,
        gap_rk4,
        local_minima,
    })
}

/// Single co-simulation with the full trajectory kept.
pub fn single_run(sys: &SystemSpec, part: &Partition, cfg: &SchemeConfig, history: HistoryMode) -> Result<CosimRun> {
    run_cosim_with(
        sys,
        part,
        cfg,
        &RunOptions {
            parallel: true,
            history,
            keep_trajectories: true,
        },
    )
}

/// Exact states on the exchange grid of `run`.
pub fn oracle_states(sys: &SystemSpec, run: &CosimRun) -> Result<Vec<StateVec>> {
    let oracle = ReferenceSolution::exact(sys);
    run.grid.times().iter().map(|&t| oracle.eval(t)).collect()
}
