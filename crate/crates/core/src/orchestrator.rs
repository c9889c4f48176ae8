//! Explicit Jacobi co-simulation master.
//!
//! Per exchange interval `[T_{k-1}, T_k]`:
//! 1. take a snapshot of every channel at `T_{k-1}` (end-node data only;
//!    exported derivatives use either the reconstruction that just ended
//!    or the peer values sampled at `T_{k-1}`),
//! 2. build the receiver-side reconstruction (hold function, optional
//!    switch blend, due balance corrections),
//! 3. integrate all subsystems independently over the interval,
//! 4. book the balance error of every channel in the ledger.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{
    build_rhs, validate_wiring, Channel, DerivativeSource, Extrapolation, Partition, SchemeConfig, SubsystemRhs,
    SystemKind, SystemSpec, WiringDiagnostics,
};
use crate::ode::{integrate_with_history, Ab2History, MicroTrajectory, StateVec};
use crate::signals::{
    compute_balance_error, fit_foh, fit_lagrange, fit_zoh, smooth_blend, BalanceLedger, BaseSignal,
    CorrectedInput, Extrapolant, InputSignal,
};

#[derive(Debug, Clone, PartialEq)]
pub struct ExchangeGrid {
    times: Vec<f64>,
}

impl ExchangeGrid {
    /// `T_k = T_0 + k H`; the last point is pinned to `t_end`.
    pub fn uniform(t0: f64, t_end: f64, big_h: f64) -> Result<Self> {
        if !(big_h > 0.0) || !(t_end > t0) {
            return Err(Error::Config(format!(
                "cannot grid [{t0}, {t_end}] with H = {big_h}"
            )));
        }
        let n = crate::ode::fixed_step_count(t_end - t0, big_h);
        let mut times: Vec<f64> = (0..n).map(|k| t0 + k as f64 * big_h).collect();
        times.push(t_end);
        Self::from_times(times)
    }

    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 || times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config("exchange times must be strictly increasing".into()));
        }
        Ok(Self { times })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Number of exchange intervals.
    pub fn n(&self) -> usize {
        self.times.len() - 1
    }

    /// Interval `k` (1-based) is `[T_{k-1}, T_k]`.
    pub fn interval(&self, k: usize) -> (f64, f64) {
        (self.times[k - 1], self.times[k])
    }
}

/// Whether AB2 keeps its history across exchange times.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HistoryMode {
    #[default]
    Restart,
    Carry,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub parallel: bool,
    pub history: HistoryMode,
    pub keep_trajectories: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            parallel: false,
            history: HistoryMode::Restart,
            keep_trajectories: true,
        }
    }
}

/// End-node data of one subsystem at an exchange time.
#[derive(Debug, Clone, PartialEq)]
pub struct Endpoint {
    pub x: StateVec,
    pub dx: StateVec,
}

/// Values (and derivatives, where exported) of every channel at one exchange time.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub t: f64,
    pub values: Vec<f64>,
    pub derivs: Vec<Option<f64>>,
}

pub fn exchange_snapshot(t: f64, endpoints: &[Endpoint], part: &Partition, channels: &[Channel]) -> Snapshot {
    let mut values = Vec::with_capacity(channels.len());
    let mut derivs = Vec::with_capacity(channels.len());
    for ch in channels {
        let ep = &endpoints[ch.sender];
        values.push(ep.x[ch.sender_local]);
        let exported = part.subsystems[ch.sender]
            .outputs
            .iter()
            .any(|p| p.state == ch.state && p.export_derivative);
        derivs.push(exported.then(|| ep.dx[ch.sender_local]));
    }
    Snapshot { t, values, derivs }
}

/// Per-channel bookkeeping over a run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ChannelDiagnostics {
    /// Balance error per interval (index `k - 1`).
    pub delta_e: Vec<f64>,
    /// Integral of the reconstruction actually fed to the receiver.
    pub delivered: Vec<f64>,
    /// Integral of the sender's numerical signal.
    pub sender: Vec<f64>,
    pub reduced_order: bool,
    /// Scheduled corrections that fall past the final interval.
    pub residual: f64,
}

impl ChannelDiagnostics {
    /// `Σ delivered + residual - Σ sender`; zero up to rounding when every
    /// committed error is either delivered or left as residual.
    pub fn telescoping_defect(&self) -> f64 {
        let delivered: f64 = self.delivered.iter().sum();
        let sender: f64 = self.sender.iter().sum();
        delivered + self.residual - sender
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CosimRun {
    pub grid: ExchangeGrid,
    pub channels: Vec<Channel>,
    /// Full state at every exchange time.
    pub states: Vec<StateVec>,
    pub snapshots: Vec<Snapshot>,
    /// `trajectories[k - 1][s]`; empty unless kept.
    pub trajectories: Vec<Vec<MicroTrajectory>>,
    pub ledger: BalanceLedger,
    pub diagnostics: Vec<ChannelDiagnostics>,
    pub energy: Option<Vec<f64>>,
    pub wiring: WiringDiagnostics,
}

impl CosimRun {
    pub fn final_state(&self) -> &StateVec {
        self.states.last().expect("at least the initial state")
    }
}

pub fn energy(x: &[f64], c: f64, m: f64) -> f64 {
    0.5 * m * x[1] * x[1] + 0.5 * c * x[0] * x[0]
}

fn system_energy(sys: &SystemSpec, x: &[f64]) -> Option<f64> {
    match sys.kind {
        SystemKind::SpringMass { c, m, .. } => Some(energy(x, c, m)),
        _ => None,
    }
}

pub fn run_cosim(sys: &SystemSpec, part: &Partition, cfg: &SchemeConfig) -> Result<CosimRun> {
    run_cosim_with(sys, part, cfg, &RunOptions::default())
}

struct SubsystemState {
    rhs: SubsystemRhs,
    x: StateVec,
    history: Option<Ab2History>,
}

pub fn run_cosim_with(
    sys: &SystemSpec,
    part: &Partition,
    cfg: &SchemeConfig,
    opts: &RunOptions,
) -> Result<CosimRun> {
    let wiring = validate_wiring(sys, part, cfg)?;
    let grid = ExchangeGrid::uniform(sys.t_span.0, sys.t_span.1, cfg.exchange_step)?;
    let channels = part.channels();
    let n_sub = part.subsystems.len();

    let mut subs: Vec<SubsystemState> = (0..n_sub)
        .map(|k| {
            let rhs = build_rhs(sys, part, k)?;
            let x = StateVec::from(rhs.owned.iter().map(|&i| sys.x0[i]).collect::<Vec<_>>());
            Ok(SubsystemState { rhs, x, history: None })
        })
        .collect::<Result<_>>()?;
    let controls: Vec<_> = (0..n_sub).map(|k| cfg.resolved_control(k)).collect();
    // Channels are ordered by receiver, then slot.
    let slot_channels: Vec<Vec<usize>> = (0..n_sub)
        .map(|s| (0..channels.len()).filter(|&i| channels[i].receiver == s).collect())
        .collect();

    // Initial endpoints: derivatives under a hold of the peers' initial values.
    let mut endpoints: Vec<Endpoint> = subs
        .iter()
        .map(|s| {
            let mut dx = StateVec::zeros(s.rhs.dim());
            s.rhs.eval(grid.times()[0], &s.x, &|j, _| sys.x0[s.rhs.inputs[j]], &mut dx);
            Endpoint { x: s.x.clone(), dx }
        })
        .collect();

    let mut ledger = BalanceLedger::new(channels.len(), cfg.weight_kind, cfg.spread_k);
    let mut diagnostics = vec![ChannelDiagnostics::default(); channels.len()];
    let mut samples: Vec<Vec<(f64, f64)>> = vec![Vec::new(); channels.len()];
    let mut prev_hold: Vec<Option<Extrapolant>> = vec![None; channels.len()];
    let mut states = vec![sys.x0.clone()];
    let mut energy_series = system_energy(sys, &sys.x0).map(|e| vec![e]);
    let mut snapshots = Vec::with_capacity(grid.n());
    let mut trajectories = Vec::new();

    for k in 1..=grid.n() {
        let span = grid.interval(k);
        let snap = exchange_snapshot(span.0, &endpoints, part, &channels);

        let mut inputs: Vec<CorrectedInput> = Vec::with_capacity(channels.len());
        for (ci, _) in channels.iter().enumerate() {
            let value = snap.values[ci];
            samples[ci].push((span.0, value));
            let hold = match cfg.extrapolation {
                Extrapolation::Zoh => fit_zoh(span.0, value, span),
                Extrapolation::Foh => {
                    let slope = snap.derivs[ci].expect("validated: derivative exported");
                    fit_foh(span.0, value, slope, span)
                }
                Extrapolation::Lagrange(p) => {
                    let avail = samples[ci].len();
                    let degree = p.min(avail - 1);
                    fit_lagrange(&samples[ci], degree, span)?
                }
            }
            .with_channel(ci);
            let base = match (&prev_hold[ci], cfg.smoothing) {
                (Some(prev), true) => BaseSignal::Blend(smooth_blend(prev, &hold, span)),
                _ => BaseSignal::Hold(hold.clone()),
            };
            prev_hold[ci] = Some(hold);
            let corrections = if cfg.balance_correction {
                ledger.corrections_for(ci, k)
            } else {
                Vec::new()
            };
            inputs.push(CorrectedInput::new(base, corrections));
        }
        if cfg.balance_correction {
            ledger.mark_delivered(k);
        }
        snapshots.push(snap);

        // Jacobi step: every subsystem sees only this interval's reconstructions.
        let step = |(s, state): (usize, &SubsystemState)| -> Result<(MicroTrajectory, Option<Ab2History>)> {
            let slots: Vec<&CorrectedInput> = slot_channels[s].iter().map(|&i| &inputs[i]).collect();
            let rhs = state.rhs.with_inputs(&slots);
            let history = match opts.history {
                HistoryMode::Carry => state.history.clone(),
                HistoryMode::Restart => None,
            };
            integrate_with_history(&rhs, &state.x, span, &controls[s], history).map_err(|e| {
                Error::Interval {
                    interval: k,
                    subsystem: s,
                    source: Box::new(e),
                }
            })
        };
        let results: Vec<Result<(MicroTrajectory, Option<Ab2History>)>> = if opts.parallel {
            subs.par_iter().enumerate().map(step).collect()
        } else {
            subs.iter().enumerate().map(step).collect()
        };
        let mut trajs = Vec::with_capacity(n_sub);
        for (state, res) in subs.iter_mut().zip(results) {
            let (traj, history) = res?;
            state.x = traj.end_state().clone();
            state.history = history;
            trajs.push(traj);
        }

        for (ci, ch) in channels.iter().enumerate() {
            let sender = &trajs[ch.sender];
            let be = compute_balance_error(sender, ch.sender_local, &inputs[ci].base, span)?;
            let d = &mut diagnostics[ci];
            d.delta_e.push(be.delta_e);
            d.sender.push(be.sender_integral);
            d.delivered.push(inputs[ci].integrate(span.0, span.1)?);
            d.reduced_order |= be.reduced_order;
            if cfg.balance_correction {
                ledger.schedule_correction(ci, k, be.delta_e);
            }
        }

        endpoints = trajs
            .iter()
            .map(|t| Endpoint {
                x: t.end_state().clone(),
                dx: t.end_deriv().cloned().unwrap_or_default(),
            })
            .collect();
        let mut full = StateVec::zeros(sys.dim());
        for state in &subs {
            for (local, &i) in state.rhs.owned.iter().enumerate() {
                full[i] = state.x[local];
            }
        }
        if cfg.derivative_source == DerivativeSource::Sampled {
            for (state, ep) in subs.iter().zip(endpoints.iter_mut()) {
                let mut dx = StateVec::zeros(state.rhs.dim());
                state.rhs.eval(span.1, &state.x, &|j, _| full[state.rhs.inputs[j]], &mut dx);
                ep.dx = dx;
            }
        }
        if let Some(series) = energy_series.as_mut() {
            series.push(system_energy(sys, &full).unwrap_or(f64::NAN));
        }
        states.push(full);
        if opts.keep_trajectories {
            trajectories.push(trajs);
        }
    }

    for (ci, d) in diagnostics.iter_mut().enumerate() {
        d.residual = if cfg.balance_correction {
            ledger.residual(ci, grid.n())
        } else {
            d.delta_e.iter().sum()
        };
    }

    Ok(CosimRun {
        grid,
        channels,
        states,
        snapshots,
        trajectories,
        ledger,
        diagnostics,
        energy: energy_series,
        wiring,
    })
}
