//! Acceptance criteria, one PASS/FAIL line each. Exits nonzero on any failure.

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use nalgebra::DVector;

use cosim::harness::{
    balance_correction_study, convergence_study, default_levels, pitfall_experiment, stability_experiment,
    ConvergenceReport, Problem, StabilityRun, Variant, DEFAULT_H_RULE, DEFAULT_TOL, STABILITY_HS,
};
use cosim::model::{DerivativeSource, Extrapolation, HRule, SchemeConfig};
use cosim::ode::{integrate, FnRhs, Method, StepControl};
use cosim::orchestrator::{run_cosim, run_cosim_with, RunOptions};
use cosim::signals::{
    compute_balance_error, fit_lagrange, fit_zoh, switch_poly, weight_poly, InputSignal, Poly, WeightKind,
};

const EULER_TOL: f64 = 1e-13;
const ZOH_ORDER: (f64, f64) = (0.85, 1.3);
const FOH_ORDER: (f64, f64) = (1.8, 2.3);
const BC_ORDER: (f64, f64) = (1.8, 2.5);
const OFFDIAG_ORDER_GAP: f64 = 0.3;
const FIRST_COMPONENT_RATIO: f64 = 100.0;
const REFERENCE_DRIFT: f64 = 1e-6;
const TELESCOPING_TOL: f64 = 1e-8;
const LAGRANGE_TOL: f64 = 1e-10;
const UNIT_MASS_TOL: f64 = 1e-12;
const DELTA_E_TOL: f64 = 1e-14;
const FD_TOL: f64 = 1e-6;
const PITFALL_MIN_GAP: f64 = 0.5;
const PITFALL_RK4_GAP: f64 = 0.2;
const LEVELS: usize = 7;

struct Verdict {
    ok: bool,
    detail: String,
}

fn verdict(ok: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        ok,
        detail: detail.into(),
    }
}

struct Report {
    failures: usize,
}

impl Report {
    fn record(&mut self, id: u32, name: &str, limit: Option<Duration>, elapsed: Duration, v: Verdict) {
        let in_time = limit.is_none_or(|l| elapsed <= l);
        let ok = v.ok && in_time;
        if !ok {
            self.failures += 1;
        }
        let budget = match limit {
            Some(l) => format!("{:.2}s/{:.0}s", elapsed.as_secs_f64(), l.as_secs_f64()),
            None => format!("{:.2}s", elapsed.as_secs_f64()),
        };
        let slow = if in_time { "" } else { " [over time budget]" };
        println!(
            "{} {id} {name} ({budget}){slow}: {}",
            if ok { "PASS" } else { "FAIL" },
            v.detail
        );
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

fn within(x: f64, (lo, hi): (f64, f64)) -> bool {
    x >= lo && x <= hi
}

fn criterion_1() -> Verdict {
    let mut worst = 0.0f64;
    let big_h = 0.05;
    for p in [Problem::LinearTriangular, Problem::LinearOffdiag] {
        let sys = p.system();
        let part = p.partition(&sys);
        let cfg = SchemeConfig::new(
            big_h,
            Extrapolation::Zoh,
            StepControl::fixed(Method::EulerForward, big_h),
            HRule::Proportional(1),
        );
        let run = match run_cosim(&sys, &part, &cfg) {
            Ok(r) => r,
            Err(e) => return verdict(false, format!("{p}: {e}")),
        };
        let b = sys.matrix();
        let mut x = DVector::from_column_slice(&sys.x0);
        for state in &run.states {
            for i in 0..x.len() {
                worst = worst.max((state[i] - x[i]).abs());
            }
            x = &x + big_h * (&b * &x);
        }
    }
    verdict(worst <= EULER_TOL, format!("max deviation {worst:.3e} <= {EULER_TOL:e}"))
}

fn linear_reports() -> cosim::Result<(ConvergenceReport, ConvergenceReport)> {
    let variants = [
        Variant::standard("zoh", Extrapolation::Zoh),
        Variant::standard("foh", Extrapolation::Foh),
    ];
    let levels = default_levels(LEVELS);
    Ok((
        convergence_study(Problem::LinearTriangular, &variants, &levels)?,
        convergence_study(Problem::LinearOffdiag, &variants, &levels)?,
    ))
}

fn fmt_order(o: Option<f64>) -> String {
    o.map_or("none".into(), |v| format!("{v:.3}"))
}

fn criterion_2(tri: &ConvergenceReport, off: &ConvergenceReport) -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    for r in [tri, off] {
        for (label, range) in [("zoh", ZOH_ORDER), ("foh", FOH_ORDER)] {
            let o = r.order(label);
            ok &= o.is_some_and(|o| within(o, range));
            parts.push(format!("{} {label} {}", r.system, fmt_order(o)));
        }
    }
    let gap = match (tri.order("foh"), off.order("foh")) {
        (Some(a), Some(b)) => (a - b).abs(),
        _ => f64::INFINITY,
    };
    ok &= gap <= OFFDIAG_ORDER_GAP;
    parts.push(format!("foh order gap {gap:.3}"));
    verdict(ok, parts.join(", "))
}

fn criterion_3(tri: &ConvergenceReport) -> Verdict {
    let mut worst = f64::INFINITY;
    let mut ok = !tri.rows.is_empty();
    for row in &tri.rows {
        let (e1, e2) = (row.component_errors[0].abs(), row.component_errors[1].abs());
        let ratio = if e1 == 0.0 { f64::INFINITY } else { e2 / e1 };
        ok &= !row.dnf && ratio >= FIRST_COMPONENT_RATIO;
        worst = worst.min(ratio);
    }
    verdict(ok, format!("smallest coupled/free error ratio {worst:.3e} >= {FIRST_COMPONENT_RATIO}"))
}

fn criterion_4() -> Verdict {
    let report = match balance_correction_study(&default_levels(LEVELS)) {
        Ok(r) => r,
        Err(e) => return verdict(false, e.to_string()),
    };
    let mut ok = true;
    let mut parts = Vec::new();
    for (label, range) in [("zoh", ZOH_ORDER), ("foh", FOH_ORDER), ("zoh_bc1", BC_ORDER)] {
        let o = report.order(label);
        ok &= o.is_some_and(|o| within(o, range));
        parts.push(format!("{label} {} in [{}, {}]", fmt_order(o), range.0, range.1));
    }
    parts.push(format!("(zoh_bc2 {})", fmt_order(report.order("zoh_bc2"))));
    verdict(ok, parts.join(", "))
}

fn criterion_5() -> Verdict {
    let sys = Problem::SpringMass.system();
    let solver = StepControl::adaptive(DEFAULT_TOL, f64::INFINITY);
    let report = match stability_experiment(&sys, &STABILITY_HS, &solver, DEFAULT_H_RULE) {
        Ok(r) => r,
        Err(e) => return verdict(false, e.to_string()),
    };
    // ZOH, and FOH exporting the derivative from the sampled peer values.
    let (checked, lagged): (Vec<_>, Vec<_>) = report.runs.iter().partition(|r| {
        r.extrapolation == Extrapolation::Zoh || r.derivative_source == DerivativeSource::Sampled
    });
    let gain = |r: &&StabilityRun| r.final_energy() / r.initial_energy() - 1.0;
    let grown = checked.iter().filter(|r| r.final_energy() > r.initial_energy()).count();
    let min_growth = checked.iter().map(gain).fold(f64::INFINITY, f64::min);
    let lagged_gain = lagged.iter().map(gain).fold(f64::NEG_INFINITY, f64::max);
    let ok = checked.len() == 8 && grown == 8 && report.reference_drift <= REFERENCE_DRIFT;
    verdict(
        ok,
        format!(
            "{grown}/{} runs gain energy (smallest relative gain {min_growth:.3e}), reference drift {:.3e} <= {REFERENCE_DRIFT:e}; lagged-derivative FOH largest gain {lagged_gain:.3e}",
            checked.len(),
            report.reference_drift
        ),
    )
}

fn criterion_6() -> Verdict {
    let mut worst = 0.0f64;
    let mut runs = 0;
    for p in [Problem::LinearTriangular, Problem::LinearOffdiag, Problem::SpringMass] {
        let sys = p.system();
        let part = p.partition(&sys);
        for (ex, smoothing, weight) in [
            (Extrapolation::Zoh, false, WeightKind::ConstantBox),
            (Extrapolation::Foh, true, WeightKind::SmoothBump),
            (Extrapolation::Lagrange(2), false, WeightKind::SmoothBump),
        ] {
            let mut cfg = SchemeConfig::new(0.1, ex, StepControl::adaptive(1e-10, f64::INFINITY), DEFAULT_H_RULE);
            cfg.balance_correction = true;
            cfg.spread_k = 1;
            cfg.smoothing = smoothing;
            cfg.weight_kind = weight;
            let run = match run_cosim_with(&sys, &part, &cfg, &RunOptions::default()) {
                Ok(r) => r,
                Err(e) => return verdict(false, format!("{p} {ex}: {e}")),
            };
            for d in &run.diagnostics {
                let last = *d.delta_e.last().expect("at least one interval");
                let defect = d.delivered.iter().sum::<f64>() - d.sender.iter().sum::<f64>() + last;
                worst = worst.max(defect.abs());
            }
            runs += 1;
        }
    }
    verdict(
        worst <= TELESCOPING_TOL,
        format!("{runs} runs, max |sum delivered - sum sender + last dE| {worst:.3e} <= {TELESCOPING_TOL:e}"),
    )
}

/// Gauss-Legendre nodes and weights on [-1, 1] by Newton iteration on P_n.
fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    (0..n)
        .map(|i| {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=n {
                    let k = k as f64;
                    let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            (x, 2.0 / ((1.0 - x * x) * dp * dp))
        })
        .collect()
}

fn criterion_7() -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();

    // Lagrange exactness on degree <= P.
    let mut worst = 0.0f64;
    for p in 0..=4usize {
        for case in 0..20 {
            let coeffs: Vec<f64> = (0..=p).map(|j| ((case * 7 + j * 3) as f64).sin() * 2.0).collect();
            let truth = Poly::new(0.3, coeffs);
            let big_h = 0.05 + 0.01 * case as f64;
            let samples: Vec<(f64, f64)> = (0..=p)
                .map(|i| {
                    let t = i as f64 * big_h;
                    (t, truth.eval(t))
                })
                .collect();
            let t0 = samples.last().expect("non-empty").0;
            let ext = match fit_lagrange(&samples, p, (t0, t0 + big_h)) {
                Ok(e) => e,
                Err(e) => return verdict(false, e.to_string()),
            };
            for k in 0..=10 {
                let t = t0 + big_h * k as f64 / 10.0;
                let scale = 1.0 + truth.eval(t).abs();
                worst = worst.max((ext.eval(t) - truth.eval(t)).abs() / scale);
            }
        }
    }
    ok &= worst <= LAGRANGE_TOL;
    parts.push(format!("lagrange {worst:.2e}"));

    // Smoothstep contract by finite differences.
    let (a, len) = (0.4, 0.25);
    let s = switch_poly(a, len);
    let fd = |t: f64, d: f64| (s.eval(t + d) - s.eval(t - d)) / (2.0 * d);
    let fd2 = |t: f64, d: f64| (s.eval(t + d) - 2.0 * s.eval(t) + s.eval(t - d)) / (d * d);
    let d = 1e-5;
    let mut fd_worst = (s.eval(a) - 0.0).abs().max((s.eval(a + len) - 1.0).abs());
    for t in [a, a + len] {
        fd_worst = fd_worst.max(fd(t, d).abs()).max(fd2(t, 1e-4).abs() * 1e-2);
    }
    let monotone = (0..100).all(|i| {
        let t = a + len * i as f64 / 100.0;
        s.eval(t + len / 100.0) >= s.eval(t)
    });
    ok &= fd_worst <= FD_TOL && monotone;
    parts.push(format!("smoothstep fd {fd_worst:.2e}"));

    // Unit mass of every weight.
    let gl = gauss_legendre(50);
    let mut mass_worst = 0.0f64;
    for kind in [WeightKind::ConstantBox, WeightKind::SmoothBump] {
        for (lo, hi) in [(0.0, 1.0), (1.7, 1.75), (-3.0, 5.0)] {
            let g = weight_poly(kind, (lo, hi));
            let (mid, half) = (0.5 * (lo + hi), 0.5 * (hi - lo));
            let mass: f64 = gl.iter().map(|&(x, w)| w * half * g.eval(mid + half * x)).sum();
            mass_worst = mass_worst.max((mass - 1.0).abs());
        }
    }
    ok &= mass_worst <= UNIT_MASS_TOL;
    parts.push(format!("unit mass {mass_worst:.2e}"));

    // dE = H^2/2 for u(t) = t under ZOH.
    let mut de_worst = 0.0f64;
    for (t0, big_h) in [(0.0, 0.2), (1.0, 0.1), (3.5, 0.05)] {
        let ramp = FnRhs::new(1, |_t: f64, _x: &[f64], dx: &mut [f64]| dx[0] = 1.0);
        let ctrl = StepControl::fixed(Method::Rk4, big_h / 8.0);
        let traj = match integrate(&ramp, &[t0][..].into(), (t0, t0 + big_h), &ctrl) {
            Ok(t) => t,
            Err(e) => return verdict(false, e.to_string()),
        };
        let hold = fit_zoh(t0, t0, (t0, t0 + big_h));
        match compute_balance_error(&traj, 0, &hold, (t0, t0 + big_h)) {
            Ok(be) => de_worst = de_worst.max((be.delta_e - big_h * big_h / 2.0).abs()),
            Err(e) => return verdict(false, e.to_string()),
        }
    }
    ok &= de_worst <= DELTA_E_TOL;
    parts.push(format!("dE ramp {de_worst:.2e}"));
    verdict(ok, parts.join(", "))
}

fn criterion_8() -> Verdict {
    let report = match pitfall_experiment(&default_levels(LEVELS), DEFAULT_H_RULE) {
        Ok(r) => r,
        Err(e) => return verdict(false, e.to_string()),
    };
    let c = &report.convergence;
    let ok = report.gap_euler.is_some_and(|g| g >= PITFALL_MIN_GAP)
        && report.gap_rk4.is_some_and(|g| g.abs() <= PITFALL_RK4_GAP);
    verdict(
        ok,
        format!(
            "euler startup: restart {} carry {} gap {} >= {PITFALL_MIN_GAP}; rk4 startup: restart {} carry {} gap {} <= {PITFALL_RK4_GAP}",
            fmt_order(c.order("restart_euler")),
            fmt_order(c.order("carry_euler")),
            fmt_order(report.gap_euler),
            fmt_order(c.order("restart_rk4")),
            fmt_order(c.order("carry_rk4")),
            fmt_order(report.gap_rk4.map(f64::abs)),
        ),
    )
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map(|it| {
            it.filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.extension().is_some_and(|x| x == "csv"))
                .map(|p| {
                    let name = p.file_name().expect("file").to_string_lossy().into_owned();
                    (name, std::fs::read(&p).expect("readable output"))
                })
                .collect()
        })
        .unwrap_or_default();
    files.sort();
    files
}

fn criterion_9() -> Verdict {
    let configs = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let commands: [(&str, &str, &[&str]); 5] = [
        ("run", "spring_mass_zoh.toml", &[]),
        ("converge", "linear_triangular.toml", &["--levels", "4"]),
        ("stability", "stability.toml", &[]),
        ("balance", "balance.toml", &["--levels", "4"]),
        ("pitfall", "pitfall.toml", &["--levels", "4"]),
    ];
    let tmp = match tempfile::tempdir() {
        Ok(t) => t,
        Err(e) => return verdict(false, e.to_string()),
    };
    let mut compared = 0;
    for (cmd, config, extra) in commands {
        let mut outputs = Vec::new();
        for rep in 0..2 {
            let out = tmp.path().join(format!("{cmd}_{rep}"));
            let status = Command::new(env!("CARGO_BIN_EXE_cosim"))
                .arg(cmd)
                .arg(configs.join(config))
                .arg("--out")
                .arg(&out)
                .args(extra)
                .output();
            match status {
                Ok(o) if o.status.success() => {}
                Ok(o) => {
                    return verdict(
                        false,
                        format!("{cmd} failed: {}", String::from_utf8_lossy(&o.stderr).trim()),
                    )
                }
                Err(e) => return verdict(false, format!("{cmd}: {e}")),
            }
            outputs.push(csv_files(&out));
        }
        if outputs[0].is_empty() {
            return verdict(false, format!("{cmd} wrote no CSV"));
        }
        if outputs[0] != outputs[1] {
            return verdict(false, format!("{cmd} output differs between runs"));
        }
        compared += outputs[0].len();
    }
    verdict(true, format!("{compared} CSV files bit-identical across two runs of 5 commands"))
}

fn main() -> ExitCode {
    let mut report = Report { failures: 0 };
    let secs = |s: u64| Some(Duration::from_secs(s));

    let (v, t) = timed(criterion_1);
    report.record(1, "euler_equivalence", secs(1), t, v);

    let (reports, t) = timed(linear_reports);
    match reports {
        Ok((tri, off)) => {
            report.record(2, "linear_orders", secs(30), t, criterion_2(&tri, &off));
            let (v, t3) = timed(|| criterion_3(&tri));
            report.record(3, "triangular_free_component", None, t3, v);
        }
        Err(e) => {
            report.record(2, "linear_orders", secs(30), t, verdict(false, e.to_string()));
            report.record(3, "triangular_free_component", None, t, verdict(false, "no report"));
        }
    }

    let (v, t) = timed(criterion_4);
    report.record(4, "spring_mass_orders", secs(30), t, v);
    let (v, t) = timed(criterion_5);
    report.record(5, "instability", secs(5), t, v);
    let (v, t) = timed(criterion_6);
    report.record(6, "ledger_telescoping", secs(1), t, v);
    let (v, t) = timed(criterion_7);
    report.record(7, "signal_properties", secs(1), t, v);
    let (v, t) = timed(criterion_8);
    report.record(8, "multistep_pitfall", secs(10), t, v);
    let (v, t) = timed(criterion_9);
    report.record(9, "determinism", None, t, v);

    if report.failures == 0 {
        println!("all 9 criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("{} criteria failed", report.failures);
        ExitCode::FAILURE
    }
}
