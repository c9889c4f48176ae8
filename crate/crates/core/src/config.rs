//! TOML run configuration and its resolved form.

use std::path::Path;

use nalgebra::DMatrix;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::harness::{default_levels, Problem, STABILITY_HS};
use crate::model::{Extrapolation, HRule, Partition, SchemeConfig, SystemKind, SystemSpec};
use crate::ode::{Method, StepControl, Startup};
use crate::orchestrator::HistoryMode;
use crate::output::num;
use crate::signals::WeightKind;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    system: SystemSection,
    #[serde(default)]
    scheme: SchemeSection,
    #[serde(default)]
    solver: SolverSection,
    #[serde(default, rename = "subsystem")]
    subsystems: Vec<SubsystemSection>,
    #[serde(default)]
    study: StudySection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct SystemSection {
    /// Named preset; explicit fields below override its values.
    problem: Option<String>,
    /// `linear` or `spring_mass` when no preset is named.
    kind: Option<String>,
    matrix: Option<Vec<Vec<f64>>>,
    c: Option<f64>,
    m: Option<f64>,
    d: Option<f64>,
    x0: Option<Vec<f64>>,
    t_span: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SchemeSection {
    exchange_step: f64,
    extrapolation: String,
    smoothing: bool,
    balance_correction: bool,
    weight: WeightKind,
    spread_k: usize,
    h_rule: String,
    history: String,
    derivative_source: String,
}

impl Default for SchemeSection {
    fn default() -> Self {
        Self {
            exchange_step: 0.1,
            extrapolation: "zoh".into(),
            smoothing: false,
            balance_correction: false,
            weight: WeightKind::ConstantBox,
            spread_k: 1,
            h_rule: "proportional:10".into(),
            history: "restart".into(),
            derivative_source: "lagged".into(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SolverSection {
    method: Method,
    h: Option<f64>,
    rel_tol: f64,
    abs_tol: f64,
    h_min: f64,
    h_max: Option<f64>,
    startup: Startup,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            method: Method::Rk45Adaptive,
            h: None,
            rel_tol: 1e-12,
            abs_tol: 1e-12,
            h_min: 1e-14,
            h_max: None,
            startup: Startup::Euler,
        }
    }
}

impl SolverSection {
    fn control(&self) -> StepControl {
        StepControl {
            method: self.method,
            h_fixed: self.h,
            rel_tol: self.rel_tol,
            abs_tol: self.abs_tol,
            h_min: self.h_min,
            h_max: self.h_max.or(self.h).unwrap_or(f64::INFINITY),
            ab2_startup: self.startup,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct SubsystemSection {
    states: Vec<usize>,
    solver: Option<SolverSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct StudySection {
    levels: usize,
    variants: Vec<String>,
    hs: Vec<f64>,
}

impl Default for StudySection {
    fn default() -> Self {
        Self {
            levels: 7,
            variants: Vec::new(),
            hs: STABILITY_HS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Study {
    pub levels: Vec<f64>,
    /// Empty means the scheme's own extrapolation.
    pub variants: Vec<Extrapolation>,
    pub stability_hs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub name: String,
    pub system: SystemSpec,
    pub partition: Partition,
    pub scheme: SchemeConfig,
    pub history: HistoryMode,
    pub study: Study,
}

fn parse_history(s: &str) -> Result<HistoryMode> {
    match s.trim().to_ascii_lowercase().as_str() {
        "restart" => Ok(HistoryMode::Restart),
        "carry" => Ok(HistoryMode::Carry),
        _ => Err(Error::Config(format!("unknown history mode '{s}'"))),
    }
}

fn history_name(h: HistoryMode) -> &'static str {
    match h {
        HistoryMode::Restart => "restart",
        HistoryMode::Carry => "carry",
    }
}

fn weight_name(w: WeightKind) -> &'static str {
    match w {
        WeightKind::ConstantBox => "constant_box",
        WeightKind::SmoothBump => "smooth_bump",
    }
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::EulerForward => "euler_forward",
        Method::Rk4 => "rk4",
        Method::Rk45Adaptive => "rk45_adaptive",
        Method::Ab2 => "ab2",
    }
}

fn nums(xs: &[f64]) -> String {
    xs.iter().map(|&x| num(x)).collect::<Vec<_>>().join(" ")
}

fn build_system(s: &SystemSection) -> Result<(String, SystemSpec)> {
    let preset = s.problem.as_deref().map(str::parse::<Problem>).transpose()?;
    let base = preset.map(Problem::system);
    let kind = match (&s.kind, &base) {
        (Some(k), _) => k.trim().to_ascii_lowercase(),
        (None, Some(b)) => match b.kind {
            SystemKind::LinearDense(_) => "linear".into(),
            SystemKind::SpringMass { .. } => "spring_mass".into(),
        },
        (None, None) => return Err(Error::Config("[system] needs `problem` or `kind`".into())),
    };
    let x0 = s.x0.clone().or_else(|| base.as_ref().map(|b| b.x0.to_vec()));
    let t_span = s
        .t_span
        .map(|[a, b]| (a, b))
        .or(base.as_ref().map(|b| b.t_span));
    let (x0, t_span) = match (x0, t_span) {
        (Some(x), Some(t)) => (x, t),
        _ => return Err(Error::Config("[system] needs `x0` and `t_span`".into())),
    };
    let sys = match kind.as_str() {
        "linear" => {
            let b = match (&s.matrix, &base) {
                (Some(rows), _) => {
                    let n = rows.len();
                    if rows.iter().any(|r| r.len() != n) {
                        return Err(Error::Config("system matrix must be square".into()));
                    }
                    DMatrix::from_row_iterator(n, n, rows.iter().flatten().copied())
                }
                (None, Some(b)) => b.matrix(),
                (None, None) => return Err(Error::Config("linear system needs `matrix`".into())),
            };
            SystemSpec::linear(b, x0, t_span)?
        }
        "spring_mass" => {
            let (c0, m0, d0) = match base.as_ref().map(|b| &b.kind) {
                Some(SystemKind::SpringMass { c, m, d }) => (*c, *m, *d),
                _ => (1.0, 1.0, 0.0),
            };
            SystemSpec::spring_mass(s.c.unwrap_or(c0), s.m.unwrap_or(m0), s.d.unwrap_or(d0), x0, t_span)?
        }
        other => return Err(Error::Config(format!("unknown system kind '{other}'"))),
    };
    let name = match preset {
        Some(p) => p.to_string(),
        None => kind,
    };
    Ok((name, sys))
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let file: ConfigFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let (name, system) = build_system(&file.system)?;
        let (partition, solvers) = if file.subsystems.is_empty() {
            let blocks: Vec<Vec<usize>> = (0..system.dim()).map(|i| vec![i]).collect();
            (Partition::from_blocks(&system, &blocks), vec![file.solver.control()])
        } else {
            let blocks: Vec<Vec<usize>> = file.subsystems.iter().map(|s| s.states.clone()).collect();
            let solvers = file
                .subsystems
                .iter()
                .map(|s| s.solver.as_ref().unwrap_or(&file.solver).control())
                .collect();
            (Partition::from_blocks(&system, &blocks), solvers)
        };
        partition.validate(system.dim())?;
        let sc = &file.scheme;
        let scheme = SchemeConfig {
            exchange_step: sc.exchange_step,
            extrapolation: sc.extrapolation.parse()?,
            smoothing: sc.smoothing,
            balance_correction: sc.balance_correction,
            weight_kind: sc.weight,
            spread_k: sc.spread_k,
            solvers,
            h_rule: sc.h_rule.parse()?,
            derivative_source: sc.derivative_source.parse()?,
        };
        scheme.validate()?;
        let study = Study {
            levels: default_levels(file.study.levels),
            variants: file
                .study
                .variants
                .iter()
                .map(|v| v.parse())
                .collect::<Result<_>>()?,
            stability_hs: file.study.hs.clone(),
        };
        Ok(Self {
            name,
            system,
            partition,
            scheme,
            history: parse_history(&sc.history)?,
            study,
        })
    }

    pub fn with_h_rule(mut self, rule: HRule) -> Result<Self> {
        self.scheme.h_rule = rule;
        self.scheme.validate()?;
        Ok(self)
    }

    pub fn with_levels(mut self, n: usize) -> Self {
        self.study.levels = default_levels(n);
        self
    }

    /// Resolved settings as `key,value` pairs; numbers carry 17 significant digits.
    pub fn echo(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: String| out.push((k.to_string(), v));
        put("system.name", self.name.clone());
        match &self.system.kind {
            SystemKind::LinearDense(b) => {
                put("system.kind", "linear".into());
                for i in 0..b.nrows() {
                    let row: Vec<f64> = b.row(i).iter().copied().collect();
                    put(&format!("system.matrix.{i}"), nums(&row));
                }
            }
            SystemKind::SpringMass { c, m, d } => {
                put("system.kind", "spring_mass".into());
                put("system.c", num(*c));
                put("system.m", num(*m));
                put("system.d", num(*d));
            }
        }
        put("system.x0", nums(&self.system.x0));
        put("system.t_span", nums(&[self.system.t_span.0, self.system.t_span.1]));
        for (k, sub) in self.partition.subsystems.iter().enumerate() {
            let idx = |v: &[usize]| v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ");
            put(&format!("subsystem.{k}.owned"), idx(&sub.owned));
            put(&format!("subsystem.{k}.inputs"), idx(&sub.inputs));
            let ctrl = self.scheme.resolved_control(k);
            let p = format!("subsystem.{k}.solver");
            put(&format!("{p}.method"), method_name(ctrl.method).into());
            put(&format!("{p}.h"), ctrl.h_fixed.map_or("none".into(), num));
            put(&format!("{p}.rel_tol"), num(ctrl.rel_tol));
            put(&format!("{p}.abs_tol"), num(ctrl.abs_tol));
            put(&format!("{p}.h_min"), num(ctrl.h_min));
            put(&format!("{p}.h_max"), num(ctrl.h_max));
            put(
                &format!("{p}.startup"),
                match ctrl.ab2_startup {
                    Startup::Euler => "euler",
                    Startup::Rk4 => "rk4",
                }
                .into(),
            );
        }
        let s = &self.scheme;
        put("scheme.exchange_step", num(s.exchange_step));
        put("scheme.extrapolation", s.extrapolation.to_string());
        put("scheme.smoothing", s.smoothing.to_string());
        put("scheme.balance_correction", s.balance_correction.to_string());
        put("scheme.weight", weight_name(s.weight_kind).into());
        put("scheme.spread_k", s.spread_k.to_string());
        put("scheme.h_rule", s.h_rule.to_string());
        put("scheme.derivative_source", s.derivative_source.to_string());
        put("scheme.history", history_name(self.history).into());
        put("study.levels", nums(&self.study.levels));
        put(
            "study.variants",
            self.study.variants.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" "),
        );
        put("study.hs", nums(&self.study.stability_hs));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_with_defaults() {
        let cfg = Config::from_toml("[system]\nproblem = \"spring_mass\"\n").unwrap();
        assert_eq!(cfg.name, "spring_mass");
        assert_eq!(cfg.system.t_span, (0.0, 20.0));
        assert_eq!(cfg.partition.subsystems.len(), 2);
        assert_eq!(cfg.scheme.h_rule, HRule::Proportional(10));
        assert_eq!(cfg.study.levels.len(), 7);
    }

    #[test]
    fn explicit_linear_system() {
        let text = r#"
            [system]
            kind = "linear"
            matrix = [[-1.0, 0.5, 0.0], [0.0, -2.0, 1.0], [0.3, 0.0, -1.0]]
            x0 = [1.0, 0.0, -1.0]
            t_span = [0.0, 1.0]

            [scheme]
            exchange_step = 0.05
            extrapolation = "lagrange:2"
            h_rule = "fixed:0.005"
            history = "carry"

            [solver]
            method = "ab2"
            startup = "rk4"

            [[subsystem]]
            states = [0, 1]

            [[subsystem]]
            states = [2]
            solver = { method = "rk4" }
        "#;
        let cfg = Config::from_toml(text).unwrap();
        assert_eq!(cfg.system.dim(), 3);
        assert_eq!(cfg.scheme.extrapolation, Extrapolation::Lagrange(2));
        assert_eq!(cfg.history, HistoryMode::Carry);
        assert_eq!(cfg.scheme.resolved_control(0).method, Method::Ab2);
        assert_eq!(cfg.scheme.resolved_control(1).method, Method::Rk4);
        assert_eq!(cfg.scheme.resolved_control(1).h_fixed, Some(0.005));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(Config::from_toml("[system]\nkind = \"linear\"\n").is_err());
        assert!(Config::from_toml("[system]\nproblem = \"pendulum\"\n").is_err());
        assert!(Config::from_toml("[system]\nproblem = \"spring_mass\"\n[scheme]\nspread_k = 9\n").is_err());
        assert!(Config::from_toml("[system]\nproblem = \"spring_mass\"\n[scheme]\nbogus = 1\n").is_err());
        let fixed_without_h = "[system]\nproblem = \"spring_mass\"\n[scheme]\nh_rule = \"adaptive\"\n[solver]\nmethod = \"rk4\"\n";
        assert!(Config::from_toml(fixed_without_h).is_err());
    }

    #[test]
    fn echo_is_stable_and_comma_free() {
        let cfg = Config::from_toml("[system]\nproblem = \"linear_offdiag\"\n").unwrap();
        let echo = cfg.echo();
        assert_eq!(echo, cfg.clone().echo());
        assert!(echo.iter().all(|(k, v)| !k.contains(',') && !v.contains(',')));
        assert!(echo.iter().any(|(k, v)| k == "system.matrix.0" && v.starts_with("0.0000000000000000e0 1.")));
    }
}
