//! Coupled system description, its split into subsystems and the
//! input/output wiring between them.
//!
//! Inputs are always whole differential states owned by another subsystem.
//! A subsystem integrates its owned rows of the system matrix, reading the
//! columns it does not own through its input channels.

use nalgebra::DMatrix;
use petgraph::algo::is_cyclic_directed;
use petgraph::graph::DiGraph;

use crate::error::{Error, Result};
use crate::ode::{Method, Rhs, StateVec, StepControl};
use crate::signals::{InputSignal, WeightKind};

#[derive(Debug, Clone, PartialEq)]
pub enum SystemKind {
    LinearDense(DMatrix<f64>),
    /// Undamped or damped oscillator with state `(s, v)`.
    SpringMass { c: f64, m: f64, d: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemSpec {
    pub kind: SystemKind,
    pub x0: StateVec,
    pub t_span: (f64, f64),
}

impl SystemSpec {
    pub fn linear(b: DMatrix<f64>, x0: Vec<f64>, t_span: (f64, f64)) -> Result<Self> {
        if !b.is_square() {
            return Err(Error::Config(format!(
                "system matrix is {}x{}, expected square",
                b.nrows(),
                b.ncols()
            )));
        }
        Self::checked(SystemKind::LinearDense(b), x0, t_span)
    }

    pub fn spring_mass(c: f64, m: f64, d: f64, x0: Vec<f64>, t_span: (f64, f64)) -> Result<Self> {
        if !(c > 0.0 && m > 0.0 && d >= 0.0) {
            return Err(Error::Config(format!(
                "spring-mass needs c > 0, m > 0, d >= 0 (got c={c}, m={m}, d={d})"
            )));
        }
        Self::checked(SystemKind::SpringMass { c, m, d }, x0, t_span)
    }

    fn checked(kind: SystemKind, x0: Vec<f64>, t_span: (f64, f64)) -> Result<Self> {
        let sys = Self {
            kind,
            x0: StateVec::from(x0),
            t_span,
        };
        if sys.x0.dim() != sys.dim() {
            return Err(Error::Config(format!(
                "initial state has {} entries, system has {}",
                sys.x0.dim(),
                sys.dim()
            )));
        }
        if !sys.x0.is_finite() {
            return Err(Error::Config("initial state is not finite".into()));
        }
        if !(t_span.1 > t_span.0) {
            return Err(Error::Config(format!("empty time span {t_span:?}")));
        }
        Ok(sys)
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            SystemKind::LinearDense(b) => b.nrows(),
            SystemKind::SpringMass { .. } => 2,
        }
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        match &self.kind {
            SystemKind::LinearDense(b) => b.clone(),
            SystemKind::SpringMass { c, m, d } => {
                DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -c / m, -d / m])
            }
        }
    }

    /// Largest real part among the eigenvalues of the system matrix.
    pub fn spectral_abscissa(&self) -> f64 {
        self.matrix()
            .complex_eigenvalues()
            .iter()
            .map(|z| z.re)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn monolithic_rhs(&self) -> LinearRhs {
        LinearRhs::new(self.matrix())
    }
}

/// `dx = B x`, evaluated row by row.
#[derive(Debug, Clone)]
pub struct LinearRhs {
    b: DMatrix<f64>,
}

impl LinearRhs {
    pub fn new(b: DMatrix<f64>) -> Self {
        Self { b }
    }
}

impl Rhs for LinearRhs {
    fn dim(&self) -> usize {
        self.b.nrows()
    }
    fn eval(&self, _t: f64, x: &[f64], dx: &mut [f64]) {
        for (i, out) in dx.iter_mut().enumerate() {
            *out = (0..x.len()).map(|j| self.b[(i, j)] * x[j]).sum();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OutputPort {
    pub state: usize,
    /// Whether the time derivative of the state is exported as well.
    pub export_derivative: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subsystem {
    pub owned: Vec<usize>,
    pub inputs: Vec<usize>,
    pub outputs: Vec<OutputPort>,
}

/// One exchanged signal: state `state`, owned by `sender` (at local index
/// `sender_local`), read by `receiver` through its input slot `slot`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Channel {
    pub receiver: usize,
    pub slot: usize,
    pub state: usize,
    pub sender: usize,
    pub sender_local: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub subsystems: Vec<Subsystem>,
}

impl Partition {
    /// Everything in one subsystem, no inputs.
    pub fn monolithic(dim: usize) -> Self {
        Self {
            subsystems: vec![Subsystem {
                owned: (0..dim).collect(),
                inputs: Vec::new(),
                outputs: Vec::new(),
            }],
        }
    }

    /// Builds a partition from owned index blocks; inputs are every
    /// non-owned column with a nonzero coupling coefficient, and every
    /// received state is exported together with its derivative.
    pub fn from_blocks(sys: &SystemSpec, blocks: &[Vec<usize>]) -> Self {
        let b = sys.matrix();
        let mut subsystems: Vec<Subsystem> = blocks
            .iter()
            .map(|owned| {
                let inputs = (0..b.ncols())
                    .filter(|j| !owned.contains(j))
                    .filter(|&j| owned.iter().any(|&i| b[(i, j)] != 0.0))
                    .collect();
                Subsystem {
                    owned: owned.clone(),
                    inputs,
                    outputs: Vec::new(),
                }
            })
            .collect();
        let received: Vec<usize> = subsystems.iter().flat_map(|s| s.inputs.clone()).collect();
        for s in &mut subsystems {
            s.outputs = s
                .owned
                .iter()
                .filter(|i| received.contains(i))
                .map(|&state| OutputPort {
                    state,
                    export_derivative: true,
                })
                .collect();
        }
        Self { subsystems }
    }

    pub fn owner_of(&self, state: usize) -> Option<(usize, usize)> {
        self.subsystems.iter().enumerate().find_map(|(k, s)| {
            s.owned.iter().position(|&i| i == state).map(|local| (k, local))
        })
    }

    /// Checks the structural invariants against a system of dimension `dim`.
    pub fn validate(&self, dim: usize) -> Result<()> {
        let mut owner = vec![None; dim];
        for (k, s) in self.subsystems.iter().enumerate() {
            if s.owned.is_empty() {
                return Err(Error::Config(format!("subsystem {k} owns no states")));
            }
            for &i in &s.owned {
                if i >= dim {
                    return Err(Error::Config(format!(
                        "subsystem {k} owns state {i}, system has {dim}"
                    )));
                }
                if let Some(other) = owner[i] {
                    return Err(Error::Config(format!(
                        "state {i} owned by subsystems {other} and {k}"
                    )));
                }
                owner[i] = Some(k);
            }
        }
        if let Some(i) = owner.iter().position(Option::is_none) {
            return Err(Error::Config(format!("state {i} is owned by no subsystem")));
        }
        for (k, s) in self.subsystems.iter().enumerate() {
            for &i in &s.inputs {
                if i >= dim {
                    return Err(Error::Config(format!(
                        "subsystem {k} receives state {i}, system has {dim}"
                    )));
                }
                if owner[i] == Some(k) {
                    return Err(Error::Config(format!(
                        "subsystem {k} both owns and receives state {i}; \
                         a received state becomes a parameter and is never solved"
                    )));
                }
            }
            for port in &s.outputs {
                if !s.owned.contains(&port.state) {
                    return Err(Error::Config(format!(
                        "subsystem {k} exports state {} it does not own",
                        port.state
                    )));
                }
            }
        }
        Ok(())
    }

    /// All channels, ordered by receiver then slot.
    pub fn channels(&self) -> Vec<Channel> {
        let mut out = Vec::new();
        for (receiver, s) in self.subsystems.iter().enumerate() {
            for (slot, &state) in s.inputs.iter().enumerate() {
                if let Some((sender, sender_local)) = self.owner_of(state) {
                    out.push(Channel {
                        receiver,
                        slot,
                        state,
                        sender,
                        sender_local,
                    });
                }
            }
        }
        out
    }

    fn port(&self, sender: usize, state: usize) -> Option<&OutputPort> {
        self.subsystems[sender].outputs.iter().find(|p| p.state == state)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Extrapolation {
    Zoh,
    Foh,
    Lagrange(usize),
}

impl Extrapolation {
    pub fn degree(self) -> usize {
        match self {
            Extrapolation::Zoh => 0,
            Extrapolation::Foh => 1,
            Extrapolation::Lagrange(p) => p,
        }
    }

    pub fn needs_derivative(self) -> bool {
        self == Extrapolation::Foh
    }
}

impl std::fmt::Display for Extrapolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Extrapolation::Zoh => write!(f, "zoh"),
            Extrapolation::Foh => write!(f, "foh"),
            Extrapolation::Lagrange(p) => write!(f, "lagrange:{p}"),
        }
    }
}

impl std::str::FromStr for Extrapolation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "zoh" | "constant" => Ok(Extrapolation::Zoh),
            "foh" | "linear" => Ok(Extrapolation::Foh),
            other => other
                .strip_prefix("lagrange:")
                .and_then(|p| p.parse().ok())
                .map(Extrapolation::Lagrange)
                .ok_or_else(|| Error::Config(format!("unknown extrapolation '{s}'"))),
        }
    }
}

/// How the micro step relates to the exchange step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HRule {
    /// `H = c h`.
    Proportional(u32),
    Fixed(f64),
    /// Micro steps are left to each solver (bounded by `H`).
    SolverAdaptive,
}

impl std::fmt::Display for HRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HRule::Proportional(c) => write!(f, "proportional:{c}"),
            HRule::Fixed(h) => write!(f, "fixed:{h:e}"),
            HRule::SolverAdaptive => write!(f, "adaptive"),
        }
    }
}

impl std::str::FromStr for HRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let bad = || Error::Config(format!("unknown h rule '{s}'"));
        if s == "adaptive" || s == "solver_adaptive" {
            Ok(HRule::SolverAdaptive)
        } else if let Some(c) = s.strip_prefix("proportional:") {
            c.parse().map(HRule::Proportional).map_err(|_| bad())
        } else if let Some(h) = s.strip_prefix("fixed:") {
            h.parse().map(HRule::Fixed).map_err(|_| bad())
        } else {
            Err(bad())
        }
    }
}

/// Input values used when a sender evaluates its exported derivative at `T_k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DerivativeSource {
    /// The reconstruction of the interval that ends at `T_k`.
    #[default]
    Lagged,
    /// The peer values sampled at `T_k`.
    Sampled,
}

impl std::fmt::Display for DerivativeSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DerivativeSource::Lagged => "lagged",
            DerivativeSource::Sampled => "sampled",
        })
    }
}

impl std::str::FromStr for DerivativeSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lagged" => Ok(DerivativeSource::Lagged),
            "sampled" => Ok(DerivativeSource::Sampled),
            _ => Err(Error::Config(format!("unknown derivative source '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchemeConfig {
    pub exchange_step: f64,
    pub extrapolation: Extrapolation,
    pub smoothing: bool,
    pub balance_correction: bool,
    pub weight_kind: WeightKind,
    pub spread_k: usize,
    /// One per subsystem; a single entry applies to all.
    pub solvers: Vec<StepControl>,
    pub h_rule: HRule,
    pub derivative_source: DerivativeSource,
}

impl SchemeConfig {
    pub fn new(exchange_step: f64, extrapolation: Extrapolation, solver: StepControl, h_rule: HRule) -> Self {
        Self {
            exchange_step,
            extrapolation,
            smoothing: false,
            balance_correction: false,
            weight_kind: WeightKind::ConstantBox,
            spread_k: 1,
            solvers: vec![solver],
            h_rule,
            derivative_source: DerivativeSource::Lagged,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let big_h = self.exchange_step;
        if !(big_h > 0.0 && big_h.is_finite()) {
            return Err(Error::Config(format!("exchange step must be positive, got {big_h}")));
        }
        if !(1..=4).contains(&self.spread_k) {
            return Err(Error::Config(format!("spread_k must be in 1..=4, got {}", self.spread_k)));
        }
        if self.solvers.is_empty() {
            return Err(Error::Config("no solver configured".into()));
        }
        for k in 0..self.solvers.len() {
            self.resolved_control(k).validate()?;
        }
        match self.h_rule {
            HRule::Proportional(c) if c < 1 => {
                Err(Error::Config("proportional factor must be >= 1".into()))
            }
            HRule::Fixed(h) => {
                let ratio = big_h / h;
                if !(h > 0.0 && h <= big_h * (1.0 + 1e-12)) {
                    Err(Error::Config(format!("fixed micro step {h} must lie in (0, H = {big_h}]")))
                } else if (ratio - ratio.round()).abs() > 1e-9 * ratio {
                    Err(Error::Config(format!("H = {big_h} is not a multiple of h = {h}")))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    /// Step control for subsystem `k` with the micro step resolved from the h rule.
    pub fn resolved_control(&self, k: usize) -> StepControl {
        let mut ctrl = self
            .solvers
            .get(k)
            .unwrap_or_else(|| &self.solvers[0])
            .clone();
        let big_h = self.exchange_step;
        let h = match self.h_rule {
            HRule::Proportional(c) => Some(big_h / c as f64),
            HRule::Fixed(h) => Some(h),
            HRule::SolverAdaptive => None,
        };
        match (ctrl.method, h) {
            (Method::Rk45Adaptive, Some(h)) => ctrl.h_max = h,
            (Method::Rk45Adaptive, None) => ctrl.h_max = ctrl.h_max.min(big_h),
            (_, Some(h)) => {
                ctrl.h_fixed = Some(h);
                ctrl.h_max = h;
            }
            (_, None) => {}
        }
        ctrl.h_min = ctrl.h_min.min(ctrl.h_max);
        ctrl
    }

    /// Micro step reported in study tables.
    pub fn resolved_micro_step(&self) -> f64 {
        let ctrl = self.resolved_control(0);
        ctrl.h_fixed.unwrap_or(ctrl.h_max)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WiringDiagnostics {
    /// The sender-to-receiver graph has no cycle, so coupling conditions
    /// could be satisfied one subsystem after the other.
    pub acyclic: bool,
    pub channels: usize,
    pub notes: Vec<String>,
}

pub fn validate_wiring(sys: &SystemSpec, part: &Partition, cfg: &SchemeConfig) -> Result<WiringDiagnostics> {
    part.validate(sys.dim())?;
    cfg.validate()?;
    let mut graph = DiGraph::<usize, ()>::new();
    let nodes: Vec<_> = (0..part.subsystems.len()).map(|k| graph.add_node(k)).collect();
    let channels = part.channels();
    let mut notes = Vec::new();
    for ch in &channels {
        let port = part.port(ch.sender, ch.state).ok_or_else(|| {
            Error::Config(format!(
                "subsystem {} receives state {} but subsystem {} does not export it",
                ch.receiver, ch.state, ch.sender
            ))
        })?;
        if cfg.extrapolation.needs_derivative() && !port.export_derivative {
            return Err(Error::Config(format!(
                "first-order hold on state {} needs its derivative, \
                 but subsystem {} does not export it",
                ch.state, ch.sender
            )));
        }
        graph.update_edge(nodes[ch.sender], nodes[ch.receiver], ());
    }
    let acyclic = !is_cyclic_directed(&graph);
    if !acyclic {
        notes.push("mutual dependency between subsystems: coupling is cyclic".into());
    }
    Ok(WiringDiagnostics {
        acyclic,
        channels: channels.len(),
        notes,
    })
}

/// Owned rows of the system matrix, split into owned and input columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsystemRhs {
    pub owned: Vec<usize>,
    pub inputs: Vec<usize>,
    own_coeffs: Vec<Vec<f64>>,
    input_coeffs: Vec<Vec<f64>>,
}

impl SubsystemRhs {
    pub fn dim(&self) -> usize {
        self.owned.len()
    }

    /// `input_eval(slot, t)` returns the value of input slot `slot` at `t`.
    pub fn eval(&self, t: f64, x: &[f64], input_eval: &dyn Fn(usize, f64) -> f64, dx: &mut [f64]) {
        let u: Vec<f64> = (0..self.inputs.len()).map(|j| input_eval(j, t)).collect();
        for (r, out) in dx.iter_mut().enumerate() {
            let own: f64 = self.own_coeffs[r].iter().zip(x).map(|(a, b)| a * b).sum();
            let inp: f64 = self.input_coeffs[r].iter().zip(&u).map(|(a, b)| a * b).sum();
            *out = own + inp;
        }
    }

    /// Binds the subsystem to one signal per input slot.
    pub fn with_inputs<'a, S: InputSignal>(&'a self, signals: &'a [&'a S]) -> BoundRhs<'a, S> {
        BoundRhs { rhs: self, signals }
    }
}

pub struct BoundRhs<'a, S> {
    rhs: &'a SubsystemRhs,
    signals: &'a [&'a S],
}

impl<S: InputSignal> Rhs for BoundRhs<'_, S> {
    fn dim(&self) -> usize {
        self.rhs.dim()
    }
    fn eval(&self, t: f64, x: &[f64], dx: &mut [f64]) {
        self.rhs.eval(t, x, &|j, t| self.signals[j].eval(t), dx)
    }
}

pub fn build_rhs(sys: &SystemSpec, part: &Partition, k: usize) -> Result<SubsystemRhs> {
    let sub = part
        .subsystems
        .get(k)
        .ok_or_else(|| Error::Config(format!("no subsystem {k}")))?;
    let b = sys.matrix();
    let n = b.nrows();
    for &i in sub.owned.iter().chain(&sub.inputs) {
        if i >= n {
            return Err(Error::Config(format!("state index {i} out of range for dimension {n}")));
        }
    }
    for &i in &sub.owned {
        for j in 0..n {
            if b[(i, j)] != 0.0 && !sub.owned.contains(&j) && !sub.inputs.contains(&j) {
                return Err(Error::Config(format!(
                    "row {i} of subsystem {k} depends on state {j}, which is neither owned nor an input"
                )));
            }
        }
    }
    let rows = |cols: &[usize]| -> Vec<Vec<f64>> {
        sub.owned
            .iter()
            .map(|&i| cols.iter().map(|&j| b[(i, j)]).collect())
            .collect()
    };
    Ok(SubsystemRhs {
        owned: sub.owned.clone(),
        inputs: sub.inputs.clone(),
        own_coeffs: rows(&sub.owned),
        input_coeffs: rows(&sub.inputs),
    })
}
