//! Subcommand dispatch.
//!
//! Exit codes: 0 success, 1 a verdict failed, 2 bad configuration or input,
//! 3 numerical failure. Any `--section.key value` pair overrides the matching
//! config key.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::cell;
use crate::coeff::Oscillating;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::experiments::{self, ExperimentKind, ExperimentResult};
use crate::io::RunDir;
use crate::linalg::Mat;
use crate::pde::{self, DirichletProblem, Domain};
use crate::quasicell;
use crate::reperiod;
use crate::scales;

#[derive(Parser, Debug)]
#[command(name = "multihom", version, about = "Multiscale homogenization correctors, effective tensors and experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named coefficient family.
    #[arg(long)]
    family: Option<String>,
    /// Parent directory of run directories.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run directory name (default: timestamp).
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args, Debug, Default)]
struct Point {
    /// Scale ratios, comma separated.
    #[arg(long)]
    lambda: Option<String>,
    /// Slow point, comma separated.
    #[arg(long)]
    x: Option<String>,
    /// Cell grid points per axis.
    #[arg(long)]
    resolution: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the cell problem at one point.
    Cell {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        point: Point,
    },
    /// Print the effective tensor.
    Effective {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        point: Point,
    },
    /// Fine Dirichlet solve on the unit box.
    Solve {
        #[command(flatten)]
        common: Common,
        /// Scales, comma separated.
        #[arg(long)]
        eps: Option<String>,
        #[arg(long)]
        intervals: Option<String>,
    },
    /// Classify a scale sequence and plan its rearrangement.
    Scales {
        #[command(flatten)]
        common: Common,
        /// Scale expression in `k`; repeat once per scale.
        #[arg(long = "entry")]
        entries: Vec<String>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Reperiodize a variable-separated coefficient.
    Reperiodize {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        point: Point,
    },
    /// Reiterated effective tensor of a cut-and-project coefficient.
    Quasi {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        x: Option<String>,
    },
    /// Homogenization error rate against the sum of scales.
    Convergence {
        #[command(flatten)]
        common: Common,
    },
    /// Gradient bounds across scale ratios.
    Lipschitz {
        #[command(flatten)]
        common: Common,
    },
    /// Campanato Hoelder constant across scale ratios.
    Holder {
        #[command(flatten)]
        common: Common,
    },
    /// Continuity of the effective tensor and corrector in the scale ratios.
    Stability {
        #[command(flatten)]
        common: Common,
    },
    /// H-convergence probe for a periodic sequence and a perturbed one.
    Hconv {
        #[command(flatten)]
        common: Common,
    },
    /// Quasi-periodic effective coefficient against oracles and fine 1D solves.
    Quasibench {
        #[command(flatten)]
        common: Common,
    },
    /// Parse a configuration and echo it.
    Validate {
        #[command(flatten)]
        common: Common,
    },
}

/// `(section.key, raw value)` pairs taken from the command line.
pub type Overrides = Vec<(String, String)>;

/// Pulls `--section.key value` and `--section.key=value` pairs out of `argv`.
pub fn split_overrides(argv: &[String]) -> Result<(Vec<String>, Overrides)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut i = 0;
    while i < argv.len() {
        let a = &argv[i];
        match a.strip_prefix("--") {
            Some(flag) if i > 0 && flag.split('=').next().is_some_and(|k| k.contains('.')) => {
                if let Some((k, v)) = flag.split_once('=') {
                    overrides.push((k.to_string(), v.to_string()));
                } else {
                    let v = argv
                        .get(i + 1)
                        .ok_or_else(|| Error::config(flag, "override is missing its value"))?;
                    overrides.push((flag.to_string(), v.clone()));
                    i += 1;
                }
            }
            _ => rest.push(a.clone()),
        }
        i += 1;
    }
    Ok((rest, overrides))
}

/// Runs one command line and returns the process exit code.
pub fn dispatch(argv: Vec<String>) -> i32 {
    let (rest, overrides) = match split_overrides(&argv) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let cli = match Cli::try_parse_from(&rest) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command, overrides) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn push(ov: &mut Vec<(String, String)>, key: &str, v: &Option<String>) {
    if let Some(v) = v {
        ov.push((key.to_string(), v.clone()));
    }
}

fn load(common: &Common, mut ov: Vec<(String, String)>, kind: Option<ExperimentKind>) -> Result<RunConfig> {
    // explicit flags win over --section.key pairs given earlier
    push(&mut ov, "coefficient.family", &common.family);
    push(&mut ov, "output.name", &common.name);
    if let Some(o) = &common.out {
        ov.push(("output.dir".into(), toml::Value::String(o.display().to_string()).to_string()));
    }
    match &common.config {
        Some(p) => RunConfig::from_file(p, &ov, kind),
        None => RunConfig::load("", &ov, kind),
    }
}

fn point_overrides(point: &Point, ov: &mut Vec<(String, String)>) {
    push(ov, "coefficient.lambda", &point.lambda);
    push(ov, "coefficient.x", &point.x);
    push(ov, "cell.resolution", &point.resolution);
}

fn run_dir(cfg: &RunConfig, command: &str) -> Result<RunDir> {
    let dir = RunDir::create(&cfg.output.dir, command, cfg.output.name.as_deref())?;
    dir.write("config.toml", &cfg.to_toml()?)?;
    Ok(dir)
}

fn format_matrix(m: &Mat<f64>) -> String {
    let mut s = String::new();
    for i in 0..m.rows() {
        let row: Vec<String> = (0..m.cols()).map(|j| format!("{:>12.6}", m[(i, j)])).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

fn point_of(cfg: &RunConfig, d: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let lambda = cfg.coefficient.lambda.clone().unwrap_or_else(|| vec![1.0; d]);
    let x = cfg.coefficient.x.clone().unwrap_or_else(|| vec![0.5; d]);
    if lambda.len() != d {
        return Err(Error::config("coefficient.lambda", format!("expected {d} entries, got {}", lambda.len())));
    }
    if x.len() != d {
        return Err(Error::config("coefficient.x", format!("expected {d} entries, got {}", x.len())));
    }
    Ok((lambda, x))
}

fn kind_of(cmd: &Command) -> Option<ExperimentKind> {
    Some(match cmd {
        Command::Convergence { .. } => ExperimentKind::Convergence,
        Command::Lipschitz { .. } => ExperimentKind::Lipschitz,
        Command::Holder { .. } => ExperimentKind::Holder,
        Command::Stability { .. } => ExperimentKind::Stability,
        Command::Hconv { .. } => ExperimentKind::Hconv,
        Command::Quasibench { .. } => ExperimentKind::Quasibench,
        _ => return None,
    })
}

/// Family used by each experiment when the config names none.
pub fn default_family(kind: ExperimentKind) -> &'static str {
    match kind {
        ExperimentKind::Convergence => "cross_laminate",
        ExperimentKind::Lipschitz | ExperimentKind::Stability => "checkerboard",
        ExperimentKind::Holder => "coupled",
        ExperimentKind::Hconv | ExperimentKind::Quasibench => "laminate",
    }
}

fn run(cmd: Command, mut ov: Vec<(String, String)>) -> Result<bool> {
    if let Some(kind) = kind_of(&cmd) {
        let common = match &cmd {
            Command::Convergence { common }
            | Command::Lipschitz { common }
            | Command::Holder { common }
            | Command::Stability { common }
            | Command::Hconv { common }
            | Command::Quasibench { common } => common,
            _ => unreachable!(),
        };
        let cfg = load(common, ov, Some(kind))?;
        return run_experiment(&cfg, kind);
    }
    match cmd {
        Command::Validate { common } => {
            if common.config.is_none() {
                return Err(Error::config("--config", "validate needs a configuration file"));
            }
            let cfg = load(&common, ov, None)?;
            print!("{}", cfg.to_toml()?);
            Ok(true)
        }
        Command::Cell { common, point } => {
            point_overrides(&point, &mut ov);
            let cfg = load(&common, ov, None)?;
            let spec = cfg.coefficient_spec("laminate")?;
            let (lambda, x) = point_of(&cfg, spec.dimension)?;
            let c = cell::solve_corrector(&spec, &x, &lambda, &cfg.cell_options())?;
            let dir = run_dir(&cfg, "cell")?;
            let mut csv = String::from("node");
            for j in 0..c.chi.len() {
                csv.push_str(&format!(",chi{}", j + 1));
            }
            csv.push('\n');
            for p in 0..c.chi.first().map_or(0, Vec::len) {
                csv.push_str(&p.to_string());
                for chi in &c.chi {
                    csv.push_str(&format!(",{:?}", chi[p]));
                }
                csv.push('\n');
            }
            dir.write("corrector.csv", &csv)?;
            dir.write_json(
                "summary.json",
                &json!({
                    "command": "cell",
                    "effective": c.effective,
                    "energy_norm": cell::energy_norm(&c),
                    "provenance": c.provenance,
                }),
            )?;
            print!("{}", format_matrix(&c.effective));
            println!("run directory: {}", dir.path.display());
            Ok(true)
        }
        Command::Effective { common, point } => {
            point_overrides(&point, &mut ov);
            let cfg = load(&common, ov, None)?;
            let spec = cfg.coefficient_spec("laminate")?;
            let (lambda, x) = point_of(&cfg, spec.dimension)?;
            let e = cell::effective_tensor(&spec, &x, &lambda, &cfg.cell_options())?;
            let dir = run_dir(&cfg, "effective")?;
            dir.write_json("summary.json", &json!({ "command": "effective", "effective": e }))?;
            print!("{}", format_matrix(&e.matrix));
            println!("run directory: {}", dir.path.display());
            Ok(true)
        }
        Command::Solve { common, eps, intervals } => {
            push(&mut ov, "pde.eps", &eps);
            push(&mut ov, "pde.intervals", &intervals);
            let cfg = load(&common, ov, None)?;
            let spec = cfg.coefficient_spec("laminate")?;
            let eps = cfg
                .pde
                .eps
                .clone()
                .ok_or_else(|| Error::config("pde.eps", "the fine solve needs one scale per fast variable"))?;
            let field = Oscillating::new(spec.clone(), eps)?;
            let dom = Domain::unit(spec.dimension, cfg.pde.intervals)?;
            let (f, g) = (cfg.pde.source, cfg.pde.boundary);
            let src = move |_: &[f64]| f;
            let bnd = move |_: &[f64]| g;
            let u = pde::solve(
                &DirichletProblem {
                    coefficient: &field,
                    source: &src,
                    boundary: &bnd,
                },
                &dom,
                &cfg.pde.solve_options(),
            )?;
            let dir = run_dir(&cfg, "solve")?;
            let mut csv: Vec<String> = (1..=spec.dimension).map(|i| format!("x{i}")).collect();
            csv.push("u".into());
            let mut text = csv.join(",") + "\n";
            for p in 0..dom.len() {
                let mut row: Vec<String> = dom.node(p).iter().map(|v| format!("{v:?}")).collect();
                row.push(format!("{:?}", u.values[p]));
                text.push_str(&row.join(","));
                text.push('\n');
            }
            dir.write("solution.csv", &text)?;
            let (l2, h1, sup) = u.norms();
            dir.write_json(
                "summary.json",
                &json!({
                    "command": "solve",
                    "l2": l2,
                    "h1": h1,
                    "interior_grad_sup": sup,
                    "iterations": u.iterations,
                    "residual": u.residual,
                    "warnings": u.warnings,
                }),
            )?;
            println!("L2 {l2:.6e}  H1 {h1:.6e}  iterations {}", u.iterations);
            println!("run directory: {}", dir.path.display());
            Ok(true)
        }
        Command::Scales { common, entries, csv } => {
            if !entries.is_empty() {
                let arr = toml::Value::Array(entries.into_iter().map(toml::Value::String).collect());
                ov.push(("scales.entries".into(), arr.to_string()));
            }
            if let Some(p) = csv {
                ov.push(("scales.csv".into(), toml::Value::String(p.display().to_string()).to_string()));
            }
            let mut cfg = load(&common, ov, None)?;
            if common.config.is_none() {
                cfg.resolve_paths(&std::env::current_dir()?)?;
            }
            let seq = cfg.scale_sequence()?;
            let (tail, tol) = (cfg.scales.tail_window, cfg.scales.tol);
            let classification = scales::classify(&seq, tail, tol)?;
            let plan = if seq.num_scales() == 2 {
                scales::reduce_two_scale(&seq, tail, tol)?
            } else {
                scales::rearrange(&seq, &classification)?
            };
            let dir = run_dir(&cfg, "scales")?;
            dir.write_json(
                "summary.json",
                &json!({ "command": "scales", "classification": classification, "plan": plan }),
            )?;
            println!(
                "separated: {}  well-separated: {}  exponent: {:?}",
                classification.separated, classification.well_separated, classification.exponent
            );
            println!("plan: {:?}, scales after rewriting: {}", plan.status, plan.m());
            if let Some(l) = plan.lambda {
                println!("lambda: {l}");
            }
            println!("run directory: {}", dir.path.display());
            Ok(true)
        }
        Command::Reperiodize { common, point } => {
            point_overrides(&point, &mut ov);
            let cfg = load(&common, ov, None)?;
            let spec = cfg.coefficient_spec("laminate")?;
            let lambda = cfg
                .coefficient
                .lambda
                .clone()
                .ok_or_else(|| Error::config("coefficient.lambda", "reperiodization needs lambda"))?;
            let maps = reperiod::build_maps(&lambda)?;
            let sharp = reperiod::reperiodize(&spec, &lambda)?;
            let dir = run_dir(&cfg, "reperiodize")?;
            dir.write_json("reperiodized.json", &sharp)?;
            dir.write_json("summary.json", &json!({ "command": "reperiodize", "maps": maps }))?;
            println!("floor: {:?}  phi: {:?}", maps.floor, maps.phi);
            println!("run directory: {}", dir.path.display());
            Ok(true)
        }
        Command::Quasi { common, x } => {
            push(&mut ov, "quasi.x", &x);
            let cfg = load(&common, ov, None)?;
            let spec = cfg.quasi_spec()?;
            let x = cfg.quasi.x.clone().unwrap_or_else(|| vec![0.0; spec.dimension]);
            let t = quasicell::reiterated_effective(&spec, &x, &cfg.quasi.rho_schedule, &cfg.quasi.options)?;
            let dir = run_dir(&cfg, "quasi")?;
            dir.write_json("summary.json", &json!({ "command": "quasi", "tensor": t }))?;
            print!("{}", format_matrix(&t.b0));
            println!("extrapolation error estimate: {:.3e}", t.sweep.error_estimate);
            println!("run directory: {}", dir.path.display());
            Ok(true)
        }
        _ => unreachable!("experiment commands handled above"),
    }
}

/// Runs the experiment of `kind` and writes its artifacts; false when a
/// verdict failed.
pub fn run_experiment(cfg: &RunConfig, kind: ExperimentKind) -> Result<bool> {
    let exp = cfg
        .experiment
        .as_ref()
        .ok_or_else(|| Error::config("experiment", "missing experiment section"))?;
    let result = execute(cfg, kind)?;
    let dir = run_dir(cfg, kind.name())?;
    write_result(&dir, exp, &result)?;
    print!("{}", result.report());
    println!("run directory: {}", dir.path.display());
    Ok(result.passed())
}

/// Runs an experiment without writing anything.
pub fn execute(cfg: &RunConfig, kind: ExperimentKind) -> Result<ExperimentResult> {
    let exp = cfg
        .experiment
        .as_ref()
        .ok_or_else(|| Error::config("experiment", "missing experiment section"))?;
    if kind == ExperimentKind::Quasibench {
        let spec = cfg.quasi_spec()?;
        return experiments::run_quasi_benchmark(&spec, exp, &cfg.quasi.options, &cfg.quasi.rho_schedule);
    }
    let spec = cfg.coefficient_spec(default_family(kind))?;
    match kind {
        ExperimentKind::Convergence => experiments::run_convergence(&spec, exp),
        ExperimentKind::Lipschitz => experiments::run_lipschitz_sweep(&spec, exp),
        ExperimentKind::Holder => experiments::run_holder_sweep(&spec, exp),
        ExperimentKind::Stability => experiments::run_stability(&spec, exp),
        ExperimentKind::Hconv => experiments::run_hconv_probe(&spec, exp),
        ExperimentKind::Quasibench => unreachable!(),
    }
}

fn write_result(dir: &RunDir, exp: &experiments::ExperimentConfig, r: &ExperimentResult) -> Result<()> {
    dir.write("result.csv", &r.to_csv())?;
    dir.write("report.txt", &r.report())?;
    dir.write_json(
        "summary.json",
        &json!({
            "command": r.kind.name(),
            "passed": r.passed(),
            "columns": r.columns,
            "rows": r.rows.len(),
            "fits": r.fits,
            "verdicts": r.verdicts,
            "stats": r.stats,
            "provenance": r.provenance,
            "threshold_source": exp.threshold_source,
        }),
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(s: &[&str]) -> Vec<String> {
        s.iter().map(|a| a.to_string()).collect()
    }

    #[test]
    fn overrides_split_from_flags() {
        let (rest, ov) = split_overrides(&argv(&[
            "multihom",
            "effective",
            "--lambda",
            "1,2.5",
            "--cell.resolution",
            "32",
            "--pde.tol=1e-8",
        ]))
        .unwrap();
        assert_eq!(rest, argv(&["multihom", "effective", "--lambda", "1,2.5"]));
        assert_eq!(
            ov,
            vec![
                ("cell.resolution".to_string(), "32".to_string()),
                ("pde.tol".to_string(), "1e-8".to_string())
            ]
        );
        assert!(split_overrides(&argv(&["m", "cell", "--cell.tol"])).is_err());
    }

    #[test]
    fn unknown_subcommand_is_config_error() {
        assert_eq!(dispatch(argv(&["multihom", "frobnicate"])), 2);
    }
}
