use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cosim::config::Config;
use cosim::harness::{
    balance_variants, oracle_states, pitfall_on, single_run, stability_experiment, study_system, ConvergenceReport,
    Variant,
};
use cosim::model::{HRule, SchemeConfig};
use cosim::output::{num, OutputDir};

#[derive(Parser)]
#[command(name = "cosim", version, about = "Explicit co-simulation runs and convergence studies")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Single co-simulation: exchange-grid trajectory, snapshots and balance ledger.
    Run(Common),
    /// Error against the exact solution over a ladder of exchange steps.
    Converge(Common),
    /// Energy series of the undamped spring-mass system.
    Stability(Common),
    /// Fixed-step AB2 restarted at each exchange versus carried history.
    Pitfall(Common),
    /// ZOH with and without balance correction, next to FOH.
    Balance(Common),
}

#[derive(Args)]
struct Common {
    config: PathBuf,
    /// Output directory; defaults to `out/<command>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the h rule: `proportional:C`, `fixed:H` or `adaptive`.
    #[arg(long = "h-rule")]
    h_rule: Option<HRule>,
    /// Number of exchange-step levels `0.2 / 2^N`.
    #[arg(long)]
    levels: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<Config> {
        let mut cfg = Config::load(&self.config)?;
        if let Some(rule) = self.h_rule {
            cfg = cfg.with_h_rule(rule)?;
        }
        if let Some(n) = self.levels {
            cfg = cfg.with_levels(n);
        }
        Ok(cfg)
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let (name, common) = match &cli.command {
        Cmd::Run(c) => ("run", c),
        Cmd::Converge(c) => ("converge", c),
        Cmd::Stability(c) => ("stability", c),
        Cmd::Pitfall(c) => ("pitfall", c),
        Cmd::Balance(c) => ("balance", c),
    };
    let cfg = common
        .load()
        .with_context(|| format!("loading {}", common.config.display()))?;
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("out").join(name));
    let mut out = OutputDir::create(&dir)?;
    match &cli.command {
        Cmd::Run(_) => run(&cfg, &mut out)?,
        Cmd::Converge(_) => converge(&cfg, &mut out)?,
        Cmd::Stability(_) => stability(&cfg, &mut out)?,
        Cmd::Pitfall(_) => pitfall(&cfg, &mut out)?,
        Cmd::Balance(_) => balance(&cfg, &mut out)?,
    }
    let files = out.finish(name, &common.config.display().to_string(), &cfg.echo())?;
    println!("{name}: wrote {} files to {}", files.len(), dir.display());
    Ok(())
}

fn run(cfg: &Config, out: &mut OutputDir) -> Result<()> {
    let run = single_run(&cfg.system, &cfg.partition, &cfg.scheme, cfg.history)?;
    let exact = oracle_states(&cfg.system, &run)?;
    let dim = cfg.system.dim();
    let mut header = vec!["t".to_string()];
    header.extend((0..dim).map(|i| format!("x{i}")));
    header.extend((0..dim).map(|i| format!("exact{i}")));
    if run.energy.is_some() {
        header.push("energy".into());
    }
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = run.grid.times().iter().enumerate().map(|(k, &t)| {
        let mut row = vec![num(t)];
        row.extend(run.states[k].iter().map(|&x| num(x)));
        row.extend(exact[k].iter().map(|&x| num(x)));
        if let Some(e) = &run.energy {
            row.push(num(e[k]));
        }
        row
    });
    out.csv("trajectory.csv", &header, rows)?;

    let mut snaps = Vec::new();
    for s in &run.snapshots {
        for (c, ch) in run.channels.iter().enumerate() {
            snaps.push(vec![
                num(s.t),
                c.to_string(),
                ch.state.to_string(),
                num(s.values[c]),
                s.derivs[c].map_or("nan".into(), num),
            ]);
        }
    }
    out.csv("snapshots.csv", &["t", "channel", "state", "value", "derivative"], snaps)?;

    let mut balance = Vec::new();
    for (c, d) in run.diagnostics.iter().enumerate() {
        for k in 0..d.delta_e.len() {
            balance.push(vec![
                c.to_string(),
                (k + 1).to_string(),
                num(d.delta_e[k]),
                num(d.delivered[k]),
                num(d.sender[k]),
            ]);
        }
    }
    out.csv("balance.csv", &["channel", "interval", "delta_e", "delivered", "sender"], balance)?;
    out.csv(
        "channels.csv",
        &["channel", "receiver", "sender", "state", "residual", "telescoping_defect", "reduced_order"],
        run.channels.iter().zip(&run.diagnostics).enumerate().map(|(c, (ch, d))| {
            vec![
                c.to_string(),
                ch.receiver.to_string(),
                ch.sender.to_string(),
                ch.state.to_string(),
                num(d.residual),
                num(d.telescoping_defect()),
                d.reduced_order.to_string(),
            ]
        }),
    )?;
    Ok(())
}

fn write_report(report: &ConvergenceReport, out: &mut OutputDir) -> Result<()> {
    let dim = report.rows.first().map_or(0, |r| r.component_errors.len());
    let mut header: Vec<String> = ["variant", "H", "h", "error_end", "error_sup", "dnf"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..dim).map(|i| format!("error{i}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    out.csv(
        "convergence.csv",
        &header,
        report.rows.iter().map(|r| {
            let mut row = vec![
                r.variant.clone(),
                num(r.big_h),
                num(r.h),
                num(r.error_end),
                num(r.error_sup),
                r.dnf.to_string(),
            ];
            row.extend(r.component_errors.iter().map(|&e| num(e)));
            row
        }),
    )?;
    let fmt_fit = |f: &Option<cosim::harness::OrderFit>| match f {
        Some(f) => (
            num(f.slope),
            f.ratios.iter().map(|&r| num(r)).collect::<Vec<_>>().join(" "),
        ),
        None => ("nan".into(), String::new()),
    };
    out.csv(
        "orders.csv",
        &["system", "variant", "order_end", "order_sup", "ratios_end"],
        report.fits.iter().map(|f| {
            let (end, ratios) = fmt_fit(&f.order_end);
            let (sup, _) = fmt_fit(&f.order_sup);
            vec![report.system.clone(), f.variant.clone(), end, sup, ratios]
        }),
    )?;
    Ok(())
}

fn converge(cfg: &Config, out: &mut OutputDir) -> Result<()> {
    let extrapolations = if cfg.study.variants.is_empty() {
        vec![cfg.scheme.extrapolation]
    } else {
        cfg.study.variants.clone()
    };
    let variants: Vec<Variant> = extrapolations
        .into_iter()
        .map(|e| Variant {
            label: e.to_string(),
            scheme: SchemeConfig {
                extrapolation: e,
                ..cfg.scheme.clone()
            },
            history: cfg.history,
        })
        .collect();
    let report = study_system(&cfg.name, &cfg.system, &cfg.partition, &variants, &cfg.study.levels)?;
    write_report(&report, out)
}

fn balance(cfg: &Config, out: &mut OutputDir) -> Result<()> {
    let variants = balance_variants(&cfg.scheme);
    let report = study_system(&cfg.name, &cfg.system, &cfg.partition, &variants, &cfg.study.levels)?;
    write_report(&report, out)
}

fn stability(cfg: &Config, out: &mut OutputDir) -> Result<()> {
    if cfg.study.stability_hs.is_empty() {
        bail!("no exchange steps given in [study] hs");
    }
    let report = stability_experiment(&cfg.system, &cfg.study.stability_hs, &cfg.scheme.solvers[0], cfg.scheme.h_rule)?;
    let mut series = Vec::new();
    for r in &report.runs {
        for (t, e) in r.times.iter().zip(&r.energy) {
            series.push(vec![
                r.extrapolation.to_string(),
                r.derivative_source.to_string(),
                num(r.big_h),
                num(*t),
                num(*e),
            ]);
        }
    }
    out.csv("energy.csv", &["extrapolation", "derivative_source", "H", "t", "energy"], series)?;
    out.csv(
        "verdicts.csv",
        &["extrapolation", "derivative_source", "H", "energy_initial", "energy_final", "unstable", "strictly_growing"],
        report.runs.iter().map(|r| {
            vec![
                r.extrapolation.to_string(),
                r.derivative_source.to_string(),
                num(r.big_h),
                num(r.initial_energy()),
                num(r.final_energy()),
                r.unstable.to_string(),
                r.strictly_growing.to_string(),
            ]
        }),
    )?;
    out.csv(
        "reference.csv",
        &["reference", "max_relative_energy_drift"],
        [vec!["monolithic_rk45".into(), num(report.reference_drift)]],
    )?;
    Ok(())
}

fn pitfall(cfg: &Config, out: &mut OutputDir) -> Result<()> {
    let report = pitfall_on(&cfg.name, &cfg.system, &cfg.partition, &cfg.study.levels, cfg.scheme.h_rule)?;
    write_report(&report.convergence, out)?;
    let opt = |g: Option<f64>| g.map_or("nan".into(), num);
    out.csv(
        "pitfall.csv",
        &["quantity", "value"],
        [
            vec!["order_gap_euler_startup".into(), opt(report.gap_euler)],
            vec!["order_gap_rk4_startup".into(), opt(report.gap_rk4)],
        ],
    )?;
    out.csv(
        "local_minima.csv",
        &["variant", "sign_flip_H"],
        report.local_minima.iter().map(|(v, flips)| {
            vec![
                v.clone(),
                flips.iter().map(|&h| num(h)).collect::<Vec<_>>().join(" "),
            ]
        }),
    )?;
    Ok(())
}
