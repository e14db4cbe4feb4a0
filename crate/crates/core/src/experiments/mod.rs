//! Parameter sweeps measuring rates and stability constants, emitted as tables.
//!
//! Every harness solves `−div(A∇u) = f` on the unit box with zero boundary
//! data, dispatches parameter points to a bounded worker pool and returns
//! rows in sorted parameter order so that output is reproducible.

pub mod fit;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cell::{self, CellOptions};
use crate::coeff::{CoefficientField, CoefficientSpec, ConstantField, FnField, Oscillating, Shifted};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::pde::{self, DirichletProblem, Domain, FieldOnGrid, SolveOptions};
use crate::quasicell::{self, CutProjectSpec, QuasiOptions};
use crate::reperiod;

pub use fit::Fit;

/// Caps the worker pool.
pub const THREADS_ENV: &str = "MULTIHOM_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Convergence,
    Lipschitz,
    Holder,
    Stability,
    Hconv,
    Quasibench,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Convergence => "convergence",
            ExperimentKind::Lipschitz => "lipschitz",
            ExperimentKind::Holder => "holder",
            ExperimentKind::Stability => "stability",
            ExperimentKind::Hconv => "hconv",
            ExperimentKind::Quasibench => "quasibench",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdSource {
    /// Rate targets and oracle tolerances.
    Derived,
    /// Calibrated from a pilot run.
    #[default]
    Pilot,
    /// Exact identities.
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    /// One `(ε₁, …, εₙ)` per parameter point.
    #[serde(default)]
    pub eps_grid: Vec<Vec<f64>>,
    /// Exponents `k` of `ε = 2^{-k}` (hconv, quasibench).
    #[serde(default)]
    pub levels: Vec<u32>,
    /// Base point of the stability ladder.
    #[serde(default)]
    pub lambda: Vec<f64>,
    #[serde(default)]
    pub deltas: Vec<f64>,
    #[serde(default)]
    pub scalings: Vec<f64>,
    /// Fine-grid intervals per axis.
    #[serde(default = "d_intervals")]
    pub intervals: usize,
    #[serde(default = "d_cell_resolution")]
    pub cell_resolution: usize,
    #[serde(default = "d_tol")]
    pub tol: f64,
    #[serde(default = "d_max_iter")]
    pub max_iter: usize,
    #[serde(default = "d_ppp")]
    pub points_per_period: usize,
    #[serde(default = "d_slope")]
    pub slope_target: f64,
    #[serde(default = "d_corrector_slope")]
    pub corrector_slope_target: f64,
    #[serde(default = "d_threshold")]
    pub threshold: f64,
    #[serde(default)]
    pub threshold_source: ThresholdSource,
    #[serde(default = "d_invariance")]
    pub invariance_tol: f64,
    #[serde(default = "d_agreement")]
    pub agreement_tol: f64,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default = "d_radii")]
    pub radii: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
}

fn d_intervals() -> usize {
    256
}
fn d_cell_resolution() -> usize {
    64
}
fn d_tol() -> f64 {
    1e-10
}
fn d_max_iter() -> usize {
    20000
}
fn d_ppp() -> usize {
    pde::DEFAULT_POINTS_PER_PERIOD
}
fn d_slope() -> f64 {
    0.9
}
fn d_corrector_slope() -> f64 {
    1.8
}
fn d_threshold() -> f64 {
    2.0
}
fn d_invariance() -> f64 {
    1e-8
}
fn d_agreement() -> f64 {
    1e-3
}
fn d_alpha() -> f64 {
    0.9
}
fn d_radii() -> Vec<f64> {
    vec![0.25, 0.125, 0.0625, 0.03125]
}

pub fn golden() -> f64 {
    (1.0 + 5f64.sqrt()) / 2.0
}

impl ExperimentConfig {
    /// Defaults plus the standard parameter grid of `kind`.
    pub fn preset(kind: ExperimentKind) -> Self {
        let mut c: ExperimentConfig =
            toml::from_str(&format!("kind = \"{}\"", kind.name())).expect("defaults deserialize");
        let phi = golden();
        match kind {
            ExperimentKind::Convergence => {
                for ratio in [1.0, phi] {
                    for k in [8.0, 16.0, 32.0, 64.0] {
                        c.eps_grid.push(vec![1.0 / k, 1.0 / (k * ratio)]);
                    }
                }
                c.intervals = 1024;
            }
            ExperimentKind::Lipschitz | ExperimentKind::Holder => {
                let ratios: &[f64] = if kind == ExperimentKind::Lipschitz {
                    &[1.0, 1.5, phi, 2.0, std::f64::consts::E, std::f64::consts::PI]
                } else {
                    &[1.0, 1.01, 1.1, 1.25, phi, 2.0]
                };
                for e1 in [1.0 / 8.0, 1.0 / 12.0] {
                    for r in ratios {
                        c.eps_grid.push(vec![e1, e1 / r]);
                    }
                }
                c.intervals = 512;
            }
            ExperimentKind::Stability => {
                c.lambda = vec![1.0, 2.5];
                c.deltas = vec![0.2, 0.1, 0.05];
                c.scalings = vec![0.5, 2.0, 7.3];
                c.threshold_source = ThresholdSource::Derived;
            }
            ExperimentKind::Hconv => {
                c.levels = vec![2, 3, 4, 5, 6];
                c.intervals = 512;
                c.threshold_source = ThresholdSource::Derived;
            }
            ExperimentKind::Quasibench => {
                c.levels = vec![3, 4, 5, 6, 7];
                c.intervals = 2048;
                c.threshold_source = ThresholdSource::Derived;
            }
        }
        c
    }

    pub fn cell_options(&self) -> CellOptions {
        CellOptions::default().with_resolution(self.cell_resolution).with_tol(self.tol)
    }

    pub fn solve_options(&self) -> SolveOptions<f64> {
        SolveOptions {
            tol: self.tol,
            max_iter: self.max_iter,
            points_per_period: self.points_per_period,
            allow_underresolved: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        use ExperimentKind::*;
        let need = |ok: bool, key: &str, msg: &str| if ok { Ok(()) } else { Err(Error::config(key, msg)) };
        match self.kind {
            Convergence | Lipschitz | Holder => need(!self.eps_grid.is_empty(), "experiment.eps_grid", "must be nonempty")?,
            Hconv | Quasibench => need(!self.levels.is_empty(), "experiment.levels", "must be nonempty")?,
            Stability => {
                need(!self.lambda.is_empty(), "experiment.lambda", "must be nonempty")?;
                need(!self.deltas.is_empty(), "experiment.deltas", "must be nonempty")?;
            }
        }
        for (i, row) in self.eps_grid.iter().enumerate() {
            need(
                !row.is_empty() && row.iter().all(|e| e.is_finite() && *e > 0.0),
                &format!("experiment.eps_grid[{i}]"),
                "scales must be positive",
            )?;
        }
        need(self.intervals >= 4, "experiment.intervals", "must be at least 4")?;
        need(self.tol > 0.0 && self.tol < 1.0, "experiment.tol", "must lie in (0, 1)")?;
        need(self.alpha > 0.0 && self.alpha < 1.0, "experiment.alpha", "must lie in (0, 1)")?;
        need(self.threshold > 0.0, "experiment.threshold", "must be positive")?;
        need(self.points_per_period >= 1, "experiment.points_per_period", "must be positive")?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Comparison {
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = ">=")]
    Ge,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub name: String,
    /// `None` when the measurement is reported without a verdict.
    pub passed: Option<bool>,
    pub measured: f64,
    pub comparison: Comparison,
    pub threshold: f64,
    pub source: ThresholdSource,
}

impl Verdict {
    fn new(name: &str, measured: f64, comparison: Comparison, threshold: f64, source: ThresholdSource, active: bool) -> Self {
        let ok = match comparison {
            Comparison::Le => measured <= threshold,
            Comparison::Lt => measured < threshold,
            Comparison::Ge => measured >= threshold,
        };
        Verdict {
            name: name.to_string(),
            passed: active.then_some(ok),
            measured,
            comparison,
            threshold,
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentResult {
    pub kind: ExperimentKind,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub fits: Vec<Fit>,
    pub verdicts: Vec<Verdict>,
    pub stats: BTreeMap<String, f64>,
    pub provenance: BTreeMap<String, String>,
}

impl ExperimentResult {
    fn new(kind: ExperimentKind, columns: &[&str]) -> Self {
        let mut provenance = BTreeMap::new();
        provenance.insert("crate_version".into(), env!("CARGO_PKG_VERSION").into());
        provenance.insert("experiment".into(), kind.name().into());
        ExperimentResult {
            kind,
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            fits: Vec::new(),
            verdicts: Vec::new(),
            stats: BTreeMap::new(),
            provenance,
        }
    }

    /// False when any active verdict failed.
    pub fn passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.passed != Some(false))
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    pub fn verdict(&self, name: &str) -> Option<&Verdict> {
        self.verdicts.iter().find(|v| v.name == name)
    }

    pub fn fit(&self, name: &str, group: &str) -> Option<&Fit> {
        self.fits.iter().find(|f| f.name == name && f.group == group)
    }

    /// Comma-separated, header row, `.` decimals, LF line ends, shortest
    /// round-trip formatting.
    pub fn to_csv(&self) -> String {
        let mut s = self.columns.join(",");
        s.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }

    /// Plain-text summary.
    pub fn report(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "experiment: {}", self.kind.name());
        let _ = writeln!(s, "rows: {}", self.rows.len());
        for f in &self.fits {
            let _ = writeln!(
                s,
                "fit {}[{}]: slope {:.4} (95% CI {:.4} .. {:.4}, {} points)",
                f.name, f.group, f.slope, f.ci_low, f.ci_high, f.points
            );
        }
        for (k, v) in &self.stats {
            let _ = writeln!(s, "{k}: {v:.6e}");
        }
        for v in &self.verdicts {
            let tag = match v.passed {
                Some(true) => "PASS",
                Some(false) => "FAIL",
                None => "REPORT",
            };
            let cmp = match v.comparison {
                Comparison::Le => "<=",
                Comparison::Lt => "<",
                Comparison::Ge => ">=",
            };
            let _ = writeln!(
                s,
                "{tag} {}: {:.6e} {cmp} {:.6e} ({:?})",
                v.name, v.measured, v.threshold, v.source
            );
        }
        s
    }
}

/// Rayon pool sized by `MULTIHOM_THREADS` when set.
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| Error::config(THREADS_ENV, format!("`{v}` is not a positive integer")))?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::config(THREADS_ENV, e.to_string()))
}

fn map_points<P: Sync, R: Send>(points: &[P], f: impl Fn(&P) -> Result<R> + Sync + Send) -> Result<Vec<R>> {
    let pool = worker_pool()?;
    pool.install(|| points.par_iter().map(&f).collect())
}

fn sorted_grid(grid: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut g = grid.to_vec();
    g.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| y.total_cmp(x))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    g
}

fn unit_source(_: &[f64]) -> f64 {
    1.0
}

fn zero_boundary(_: &[f64]) -> f64 {
    0.0
}

fn solve_unit(field: &dyn CoefficientField<f64>, intervals: usize, cfg: &ExperimentConfig) -> Result<FieldOnGrid<f64>> {
    let dom = Domain::unit(field.dimension(), intervals)?;
    pde::solve(
        &DirichletProblem {
            coefficient: field,
            source: &unit_source,
            boundary: &zero_boundary,
        },
        &dom,
        &cfg.solve_options(),
    )
}

fn check_resolution(field: &dyn CoefficientField<f64>, intervals: usize, ppp: usize, what: &str) -> Result<()> {
    if let Some(fine) = field.finest_scale() {
        let h = 1.0 / intervals as f64;
        if h > fine / ppp as f64 * (1.0 + 1e-9) {
            return Err(Error::precondition(
                "experiment.intervals",
                format!(
                    "{intervals} intervals under-resolve {what}: need at least {}",
                    (ppp as f64 / fine).ceil()
                ),
            ));
        }
    }
    Ok(())
}

fn oscillating(spec: &CoefficientSpec<f64>, eps: &[f64]) -> Result<Oscillating<f64>> {
    if eps.len() != spec.num_scales {
        return Err(Error::precondition(
            "experiment.eps_grid",
            format!("rows need {} scales, got {}", spec.num_scales, eps.len()),
        ));
    }
    Ok(Oscillating::new(spec.clone(), eps.to_vec())?)
}

fn provenance(res: &mut ExperimentResult, spec: &CoefficientSpec<f64>, cfg: &ExperimentConfig) -> Result<()> {
    let e = spec.estimate_ellipticity(2000, cfg.seed)?;
    res.provenance.insert("seed".into(), cfg.seed.to_string());
    res.provenance.insert("sampled_lambda_min".into(), format!("{:?}", e.lambda_min));
    res.provenance.insert("sampled_lambda_max".into(), format!("{:?}", e.lambda_max));
    res.provenance.insert("threads".into(), worker_pool()?.current_num_threads().to_string());
    Ok(())
}

fn require_separated(spec: &CoefficientSpec<f64>) -> Result<()> {
    if spec.num_scales > 1 && !spec.variable_separated {
        return Err(Error::precondition(
            "coefficient.variable_separated",
            "this experiment needs a variable-separated field",
        ));
    }
    Ok(())
}

/// `λ = (1, ε₁/ε₂, …)`, one entry per coordinate.
fn lambda_of(eps: &[f64], d: usize) -> Vec<f64> {
    (0..d).map(|i| eps[0] / eps[i.min(eps.len() - 1)]).collect()
}

fn non_increasing_violations(v: &[f64]) -> f64 {
    v.windows(2).filter(|w| w[1] > w[0]).count() as f64
}

/// Homogenization error against `Σεᵢ` for each ratio regime.
pub fn run_convergence(spec: &CoefficientSpec<f64>, cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    require_separated(spec)?;
    let grid = sorted_grid(&cfg.eps_grid);
    for eps in &grid {
        check_resolution(&oscillating(spec, eps)?, cfg.intervals, cfg.points_per_period, &format!("eps = {eps:?}"))?;
    }
    let n = spec.num_scales;
    let d = spec.dimension;
    let mut cols: Vec<String> = (1..=n).map(|i| format!("eps{i}")).collect();
    cols.extend(["sum_eps", "ratio", "error_l2", "h2_proxy", "relative_error", "iterations"].map(String::from));
    let colrefs: Vec<&str> = cols.iter().map(String::as_str).collect();
    let mut res = ExperimentResult::new(ExperimentKind::Convergence, &colrefs);
    provenance(&mut res, spec, cfg)?;
    let tab = Domain::unit(d, 16)?;
    res.rows = map_points(&grid, |eps| {
        let fine = oscillating(spec, eps)?;
        let u = solve_unit(&fine, cfg.intervals, cfg)?;
        let eff = cell::effective_field(spec, &lambda_of(eps, d), &cfg.cell_options(), &tab)?;
        let u0 = solve_unit(eff.as_ref(), cfg.intervals, cfg)?;
        let err = u.l2_distance(&u0)?;
        let h2 = u0.h2_proxy();
        let mut row = eps.clone();
        row.extend([
            eps.iter().sum(),
            eps[0] / eps[eps.len() - 1],
            err,
            h2,
            if h2 > 0.0 { err / h2 } else { 0.0 },
            u.iterations as f64,
        ]);
        Ok(row)
    })?;
    let ratio_col = n + 1;
    let mut groups: BTreeMap<String, Vec<&Vec<f64>>> = BTreeMap::new();
    for r in &res.rows {
        groups.entry(format!("ratio={:.6}", r[ratio_col])).or_default().push(r);
    }
    let max_err = res.rows.iter().map(|r| r[n + 2]).fold(0.0, f64::max);
    res.stats.insert("max_error_l2".into(), max_err);
    for (g, rows) in &groups {
        let x: Vec<f64> = rows.iter().map(|r| r[n]).collect();
        let y: Vec<f64> = rows.iter().map(|r| r[n + 4]).collect();
        if let Some(f) = fit::loglog("relative_error_vs_sum_eps", g, &x, &y) {
            res.verdicts.push(Verdict::new(
                &format!("slope[{g}]"),
                f.slope,
                Comparison::Ge,
                cfg.slope_target,
                ThresholdSource::Derived,
                true,
            ));
            res.fits.push(f);
        }
    }
    if res.fits.is_empty() {
        // no oscillation: both problems coincide
        res.verdicts.push(Verdict::new(
            "max_error_l2",
            max_err,
            Comparison::Le,
            1e-10,
            ThresholdSource::Derived,
            true,
        ));
    }
    Ok(res)
}

/// Interior gradient bound over a sweep of scale pairs.
pub fn run_lipschitz_sweep(spec: &CoefficientSpec<f64>, cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    sweep_pairs(spec, cfg, ExperimentKind::Lipschitz)
}

/// Campanato `C^α` constant over a sweep of scale pairs.
pub fn run_holder_sweep(spec: &CoefficientSpec<f64>, cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    sweep_pairs(spec, cfg, ExperimentKind::Holder)
}

fn sweep_pairs(spec: &CoefficientSpec<f64>, cfg: &ExperimentConfig, kind: ExperimentKind) -> Result<ExperimentResult> {
    cfg.validate()?;
    let grid = sorted_grid(&cfg.eps_grid);
    for eps in &grid {
        check_resolution(&oscillating(spec, eps)?, cfg.intervals, cfg.points_per_period, &format!("eps = {eps:?}"))?;
    }
    let n = spec.num_scales;
    let metric = if kind == ExperimentKind::Lipschitz {
        ["grad_sup", "ratio_to_l2"]
    } else {
        ["campanato", "c_alpha"]
    };
    let mut cols: Vec<String> = (1..=n).map(|i| format!("eps{i}")).collect();
    cols.extend(["ratio", "l2"].map(String::from));
    cols.extend(metric.map(String::from));
    let colrefs: Vec<&str> = cols.iter().map(String::as_str).collect();
    let mut res = ExperimentResult::new(kind, &colrefs);
    provenance(&mut res, spec, cfg)?;
    let center = vec![0.5; spec.dimension];
    res.rows = map_points(&grid, |eps| {
        let u = solve_unit(&oscillating(spec, eps)?, cfg.intervals, cfg)?;
        let (l2, _, sup) = u.norms();
        let m = if kind == ExperimentKind::Lipschitz {
            sup
        } else {
            u.campanato(cfg.alpha, &center, &cfg.radii)?
        };
        let mut row = eps.clone();
        row.extend([eps[0] / eps[eps.len() - 1], l2, m, m / l2]);
        Ok(row)
    })?;
    let q: Vec<f64> = res.rows.iter().map(|r| r[n + 3]).collect();
    let ratio: Vec<f64> = res.rows.iter().map(|r| r[n]).collect();
    let max = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let spread = max / fit::median(&q);
    let rho = fit::spearman(&ratio, &q);
    res.stats.insert("max_over_median".into(), spread);
    res.stats.insert("spearman".into(), rho);
    res.stats.insert("max".into(), max);
    if kind == ExperimentKind::Holder {
        // the pair closest to equal scales
        let corner = res
            .rows
            .iter()
            .min_by(|a, b| (a[n] - 1.0).abs().total_cmp(&(b[n] - 1.0).abs()))
            .map(|r| r[n + 3])
            .unwrap_or(f64::NAN);
        res.stats.insert("corner_c_alpha".into(), corner);
        res.stats.insert("alpha".into(), cfg.alpha);
    }
    let active = kind == ExperimentKind::Holder || spec.variable_separated || spec.num_scales <= 1;
    res.verdicts.push(Verdict::new(
        "max_over_median",
        spread,
        Comparison::Le,
        cfg.threshold,
        cfg.threshold_source,
        active,
    ));
    if kind == ExperimentKind::Lipschitz {
        res.verdicts.push(Verdict::new(
            "abs_spearman",
            rho.abs(),
            Comparison::Lt,
            0.5,
            ThresholdSource::Derived,
            active,
        ));
    }
    Ok(res)
}

/// Continuity of `λ ↦ Â^λ` and of the corrector gradient, plus scaling invariance.
pub fn run_stability(spec: &CoefficientSpec<f64>, cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    require_separated(spec)?;
    let d = spec.dimension;
    if cfg.lambda.len() != d {
        return Err(Error::config("experiment.lambda", format!("expected {d} entries")));
    }
    let mut res = ExperimentResult::new(
        ExperimentKind::Stability,
        &["row_type", "parameter", "tensor_distance", "corrector_distance_sq"],
    );
    provenance(&mut res, spec, cfg)?;
    let x = vec![0.5; d];
    let opts = cfg.cell_options();
    let base = cell::solve_corrector(spec, &x, &cfg.lambda, &opts)?;
    // row_type 0: κ = λ, 1: κ = λ + δ e_d, 2: κ = tλ
    let mut points: Vec<(f64, f64)> = vec![(0.0, 0.0)];
    let mut deltas = cfg.deltas.clone();
    deltas.sort_by(|a, b| b.total_cmp(a));
    points.extend(deltas.iter().map(|&dl| (1.0, dl)));
    let mut scalings = cfg.scalings.clone();
    scalings.sort_by(f64::total_cmp);
    points.extend(scalings.iter().map(|&t| (2.0, t)));
    res.rows = map_points(&points, |&(kind, p)| {
        let kappa: Vec<f64> = match kind as u8 {
            0 => cfg.lambda.clone(),
            1 => {
                let mut k = cfg.lambda.clone();
                k[d - 1] += p;
                k
            }
            _ => cfg.lambda.iter().map(|l| l * p).collect(),
        };
        let c = cell::solve_corrector(spec, &x, &kappa, &opts)?;
        let td = base.effective.max_abs_diff(&c.effective);
        let cd = cell::corrector_distance(&base, &c)?;
        Ok(vec![kind, p, td, cd * cd])
    })?;
    let ladder: Vec<&Vec<f64>> = res.rows.iter().filter(|r| r[0] == 1.0).collect();
    let dl: Vec<f64> = ladder.iter().map(|r| r[1]).collect();
    let td: Vec<f64> = ladder.iter().map(|r| r[2]).collect();
    let cd: Vec<f64> = ladder.iter().map(|r| r[3]).collect();
    if let Some(f) = fit::loglog("tensor_distance_vs_delta", "ladder", &dl, &td) {
        res.verdicts.push(Verdict::new(
            "tensor_slope",
            f.slope,
            Comparison::Ge,
            cfg.slope_target,
            ThresholdSource::Derived,
            true,
        ));
        res.fits.push(f);
    }
    if let Some(f) = fit::loglog("corrector_distance_sq_vs_delta", "ladder", &dl, &cd) {
        res.verdicts.push(Verdict::new(
            "corrector_sq_slope",
            f.slope,
            Comparison::Ge,
            cfg.corrector_slope_target,
            ThresholdSource::Derived,
            true,
        ));
        res.fits.push(f);
    }
    let identity = res.rows.iter().filter(|r| r[0] == 0.0).map(|r| r[2].max(r[3])).fold(0.0, f64::max);
    res.verdicts.push(Verdict::new(
        "identity_row",
        identity,
        Comparison::Le,
        0.0,
        ThresholdSource::Paper,
        true,
    ));
    let scaling: Vec<f64> = res.rows.iter().filter(|r| r[0] == 2.0).map(|r| r[2]).collect();
    if !scaling.is_empty() {
        let worst = scaling.iter().copied().fold(0.0, f64::max);
        res.stats.insert("scaling_max_tensor_distance".into(), worst);
        res.verdicts.push(Verdict::new(
            "scaling_invariance",
            worst,
            Comparison::Le,
            cfg.invariance_tol,
            ThresholdSource::Paper,
            true,
        ));
    }
    for i in 0..d {
        for j in 0..d {
            res.stats.insert(format!("a_hat_{i}{j}"), base.effective[(i, j)]);
        }
    }
    Ok(res)
}

/// Periodic sequence `A_k = A(x/ε_k)` against its homogenized limit, and the
/// perturbed sequence `A_k + (1/k) I`.
pub fn run_hconv_probe(spec: &CoefficientSpec<f64>, cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    require_separated(spec)?;
    let d = spec.dimension;
    let mut levels = cfg.levels.clone();
    levels.sort_unstable();
    levels.dedup();
    if levels.contains(&0) {
        return Err(Error::config("experiment.levels", "levels start at 1"));
    }
    let eps_of = |k: u32| 0.5f64.powi(k as i32);
    for &k in &levels {
        let f = oscillating(spec, &vec![eps_of(k); spec.num_scales])?;
        check_resolution(&f, cfg.intervals, cfg.points_per_period, &format!("level {k}"))?;
    }
    let mut res = ExperimentResult::new(
        ExperimentKind::Hconv,
        &[
            "k",
            "eps",
            "distance_l2",
            "relative_distance",
            "flux_distance",
            "perturbed_distance_l2",
            "perturbed_flux_distance",
        ],
    );
    provenance(&mut res, spec, cfg)?;
    let tab = Domain::unit(d, 16)?;
    let limit = cell::effective_field(spec, &vec![1.0; d], &cfg.cell_options(), &tab)?;
    let ubar = solve_unit(limit.as_ref(), cfg.intervals, cfg)?;
    let flux_bar = ubar.mean_flux(limit.as_ref());
    let h2 = ubar.h2_proxy();
    let flux_gap = |u: &FieldOnGrid<f64>, a: &dyn CoefficientField<f64>| {
        u.mean_flux(a)
            .iter()
            .zip(&flux_bar)
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max)
    };
    res.rows = map_points(&levels, |&k| {
        let eps = eps_of(k);
        let ak = oscillating(spec, &vec![eps; spec.num_scales])?;
        let uk = solve_unit(&ak, cfg.intervals, cfg)?;
        let dist = uk.l2_distance(&ubar)?;
        let bk = Shifted {
            inner: &ak,
            shift: 1.0 / k as f64,
        };
        let vk = solve_unit(&bk, cfg.intervals, cfg)?;
        Ok(vec![
            k as f64,
            eps,
            dist,
            if h2 > 0.0 { dist / h2 } else { 0.0 },
            flux_gap(&uk, &ak),
            vk.l2_distance(&ubar)?,
            flux_gap(&vk, &bk),
        ])
    })?;
    let dist: Vec<f64> = res.rows.iter().map(|r| r[2]).collect();
    let last = res.rows.last().cloned().unwrap_or_default();
    res.verdicts.push(Verdict::new(
        "distance_non_increasing",
        non_increasing_violations(&dist),
        Comparison::Le,
        0.0,
        ThresholdSource::Derived,
        true,
    ));
    res.verdicts.push(Verdict::new(
        "final_relative_distance_over_eps",
        last[3] / last[1],
        Comparison::Le,
        1.0,
        ThresholdSource::Derived,
        true,
    ));
    let ratio = if last[2] > 0.0 { last[5] / last[2] } else if last[5] == 0.0 { 0.0 } else { f64::INFINITY };
    res.verdicts.push(Verdict::new(
        "perturbed_over_unperturbed",
        ratio,
        Comparison::Le,
        2.0,
        ThresholdSource::Derived,
        true,
    ));
    if let Some(f) = fit::loglog("distance_vs_eps", "unperturbed", &res.column("eps").unwrap_or_default(), &dist) {
        res.fits.push(f);
    }
    let pd = res.column("perturbed_distance_l2").unwrap_or_default();
    if let Some(f) = fit::loglog("distance_vs_eps", "perturbed", &res.column("eps").unwrap_or_default(), &pd) {
        res.fits.push(f);
    }
    for i in 0..d {
        res.stats.insert(format!("limit_tensor_{i}{i}"), limit.value(&vec![0.5; d])[(i, i)]);
    }
    Ok(res)
}

/// `(∫ b⁻¹)⁻¹` over the torus by a tensor midpoint rule (one-dimensional `x`).
pub fn harmonic_mean_oracle(spec: &CutProjectSpec<f64>, nodes_per_axis: usize) -> Result<f64> {
    if spec.dimension != 1 || spec.num_levels() != 1 {
        return Err(Error::precondition("quasi", "the harmonic-mean oracle needs d = 1 and one torus"));
    }
    let m = spec.torus_dims[0];
    let n = nodes_per_axis;
    let count = n.checked_pow(m as u32).filter(|c| *c <= 1 << 26).ok_or_else(|| {
        Error::precondition("quasi", "oracle grid too large")
    })?;
    let vals: Vec<f64> = (0..count)
        .into_par_iter()
        .map(|idx| {
            let mut r = idx;
            let w: Vec<f64> = (0..m)
                .map(|_| {
                    let v = ((r % n) as f64 + 0.5) / n as f64;
                    r /= n;
                    v
                })
                .collect();
            1.0 / spec.eval(&[0.0], &[&w])[(0, 0)]
        })
        .collect();
    Ok(count as f64 / vals.iter().sum::<f64>())
}

/// `B₀` from the regularized tower against the torus oracle and fine 1-D solves.
pub fn run_quasi_benchmark(
    spec: &CutProjectSpec<f64>,
    cfg: &ExperimentConfig,
    qopts: &QuasiOptions,
    rho_schedule: &[f64],
) -> Result<ExperimentResult> {
    cfg.validate()?;
    spec.validate()?;
    if spec.dimension != 1 || spec.num_levels() != 1 {
        return Err(Error::precondition("quasi", "the benchmark needs d = 1 and one torus"));
    }
    let tower = quasicell::reiterated_effective(spec, &[0.0], rho_schedule, qopts)?;
    let b0 = tower.b0[(0, 0)];
    let m = spec.torus_dims[0];
    let oracle = harmonic_mean_oracle(spec, if m <= 2 { 512 } else { 64 })?;
    let mut levels = cfg.levels.clone();
    levels.sort_unstable();
    levels.dedup();
    let proj = spec.projections[0].clone();
    let freq = (0..m).map(|a| proj[(a, 0)].abs()).fold(0.0, f64::max) * spec.bandwidth(0).max(1) as f64;
    let mut res = ExperimentResult::new(ExperimentKind::Quasibench, &["k", "eps", "intervals", "distance_l2", "b_probe"]);
    res.provenance.insert("seed".into(), cfg.seed.to_string());
    let points: Vec<(u32, usize)> = levels
        .iter()
        .map(|&k| {
            let eps = 0.5f64.powi(k as i32);
            let need = (cfg.points_per_period as f64 * freq / eps).ceil() as usize;
            (k, cfg.intervals.max(need.next_power_of_two()))
        })
        .collect();
    res.rows = map_points(&points, |&(k, intervals)| {
        let eps = 0.5f64.powi(k as i32);
        let s = spec.clone();
        let mcol: Vec<f64> = (0..m).map(|a| proj[(a, 0)]).collect();
        let field = FnField::new(1, move |x: &[f64]| {
            let w: Vec<f64> = mcol.iter().map(|c| c * x[0] / eps).collect();
            s.eval(x, &[&w])
        })
        .with_finest_scale(eps / freq);
        let u = solve_unit(&field, intervals, cfg)?;
        let u0 = solve_unit(&ConstantField(Mat::from_diag(&[b0])), intervals, cfg)?;
        // least-squares fit u ≈ q/B with q = x(1 − x)/2
        let q = FieldOnGrid::from_fn(u.domain.clone(), |x| x[0] * (1.0 - x[0]) / 2.0);
        let qq = q.l2().powi(2);
        let plus = FieldOnGrid::new(u.domain.clone(), u.values.iter().zip(&q.values).map(|(a, b)| a + b).collect());
        let minus = FieldOnGrid::new(u.domain.clone(), u.values.iter().zip(&q.values).map(|(a, b)| a - b).collect());
        let uq = (plus.l2().powi(2) - minus.l2().powi(2)) / 4.0;
        Ok(vec![k as f64, eps, intervals as f64, u.l2_distance(&u0)?, qq / uq])
    })?;
    let dist = res.column("distance_l2").unwrap_or_default();
    let probe = res.rows.last().map(|r| r[4]).unwrap_or(f64::NAN);
    res.stats.insert("b0".into(), b0);
    res.stats.insert("oracle".into(), oracle);
    res.stats.insert("probe".into(), probe);
    res.stats.insert("extrapolation_error".into(), tower.sweep.error_estimate);
    res.stats.insert("energy_ratio".into(), tower.sweep.energy_ratio());
    res.stats.insert("worst_small_divisor".into(), tower.nondegeneracy[0].value);
    res.verdicts.push(Verdict::new(
        "b0_vs_oracle",
        (b0 - oracle).abs(),
        Comparison::Le,
        cfg.agreement_tol,
        ThresholdSource::Derived,
        true,
    ));
    res.verdicts.push(Verdict::new(
        "probe_vs_b0",
        (probe - b0).abs(),
        Comparison::Le,
        cfg.agreement_tol,
        ThresholdSource::Derived,
        true,
    ));
    res.verdicts.push(Verdict::new(
        "distance_non_increasing",
        non_increasing_violations(&dist),
        Comparison::Le,
        0.0,
        ThresholdSource::Derived,
        true,
    ));
    if let Some(f) = fit::loglog("distance_vs_eps", "fine", &res.column("eps").unwrap_or_default(), &dist) {
        res.fits.push(f);
    }
    Ok(res)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub eps1: f64,
    pub lambda: Vec<f64>,
    pub floor: Vec<u64>,
    pub phi: Vec<f64>,
    pub intervals: usize,
    pub relative_l2: f64,
    pub iterations: [usize; 2],
}

fn equivalence_source(x: &[f64]) -> f64 {
    1.0 + x[0]
}

/// Solves the fine problem directly and through the reperiodized one-scale field
/// on `Φ(Ω)`, then compares after pulling back by `Φ`.
pub fn reperiod_equivalence(
    spec: &CoefficientSpec<f64>,
    eps1: f64,
    lambda: &[f64],
    intervals: usize,
    opts: &SolveOptions<f64>,
) -> Result<EquivalenceReport> {
    let d = spec.dimension;
    if !spec.variable_separated || spec.num_scales != d {
        return Err(Error::precondition(
            "coefficient",
            "equivalence check needs a variable-separated field with one scale per coordinate",
        ));
    }
    let maps = reperiod::build_maps(lambda)?;
    let eps: Vec<f64> = maps.lambda.iter().map(|l| eps1 / l).collect();
    let omega = Domain::unit(d, intervals)?;
    let fine = Oscillating::new(spec.clone(), eps)?;
    let u = pde::solve(
        &DirichletProblem {
            coefficient: &fine,
            source: &equivalence_source,
            boundary: &zero_boundary,
        },
        &omega,
        opts,
    )?;
    let sharp = reperiod::reperiodize(spec, lambda)?;
    let mapped = Domain::new(vec![0.0; d], maps.phi.clone(), omega.nodes.clone())?;
    let sharp_field = Oscillating::new(sharp, vec![eps1; d])?;
    let inv: Vec<f64> = maps.phi.iter().map(|p| 1.0 / p).collect();
    let inv2 = inv.clone();
    let src = move |xp: &[f64]| {
        let x: Vec<f64> = xp.iter().zip(&inv2).map(|(a, b)| a * b).collect();
        equivalence_source(&x)
    };
    let v = pde::solve(
        &DirichletProblem {
            coefficient: &sharp_field,
            source: &src,
            boundary: &zero_boundary,
        },
        &mapped,
        opts,
    )?;
    let back = reperiod::pull_back(&v, &inv, omega)?;
    Ok(EquivalenceReport {
        eps1,
        lambda: maps.lambda.clone(),
        floor: maps.floor.clone(),
        phi: maps.phi.clone(),
        intervals,
        relative_l2: u.l2_distance(&back)? / u.l2(),
        iterations: [u.iterations, v.iterations],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeff::families;

    fn small(kind: ExperimentKind) -> ExperimentConfig {
        let mut c = ExperimentConfig::preset(kind);
        c.intervals = 64;
        c.cell_resolution = 16;
        c.tol = 1e-9;
        c
    }

    #[test]
    fn presets_validate_and_roundtrip() {
        for kind in [
            ExperimentKind::Convergence,
            ExperimentKind::Lipschitz,
            ExperimentKind::Holder,
            ExperimentKind::Stability,
            ExperimentKind::Hconv,
            ExperimentKind::Quasibench,
        ] {
            let c = ExperimentConfig::preset(kind);
            c.validate().unwrap();
            let text = toml::to_string(&c).unwrap();
            let back: ExperimentConfig = toml::from_str(&text).unwrap();
            assert_eq!(back, c);
        }
        let c = ExperimentConfig::preset(ExperimentKind::Lipschitz);
        assert_eq!(c.eps_grid.len(), 12);
    }

    #[test]
    fn empty_grid_is_a_config_error() {
        let mut c = small(ExperimentKind::Convergence);
        c.eps_grid.clear();
        let err = c.validate().unwrap_err();
        assert!(err.to_string().contains("experiment.eps_grid"));
    }

    #[test]
    fn identity_convergence_has_zero_error() {
        let spec = families::by_name::<f64>("identity").unwrap();
        let mut c = small(ExperimentKind::Convergence);
        c.eps_grid = vec![vec![0.25, 0.25], vec![0.125, 0.125 / golden()]];
        let r = run_convergence(&spec, &c).unwrap();
        assert!(r.column("error_l2").unwrap().iter().all(|e| *e == 0.0));
        assert!(r.passed());
    }

    #[test]
    fn resolution_checked_before_solving() {
        let mut c = small(ExperimentKind::Convergence);
        c.eps_grid = vec![vec![1.0 / 64.0, 1.0 / 64.0]];
        let err = run_convergence(&families::cross_laminate(), &c).unwrap_err();
        assert!(err.to_string().contains("experiment.intervals"), "{err}");
    }

    #[test]
    fn constant_field_lipschitz_ratios_identical() {
        let spec = CoefficientSpec::constant(Mat::from_diag(&[2.0, 3.0]), 2).variable_separated(true);
        let mut c = small(ExperimentKind::Lipschitz);
        c.eps_grid.truncate(4);
        let r = run_lipschitz_sweep(&spec, &c).unwrap();
        let q = r.column("ratio_to_l2").unwrap();
        assert!(q.iter().all(|v| *v == q[0]));
        assert_eq!(r.stats["max_over_median"], 1.0);
    }

    #[test]
    fn coupled_lipschitz_is_report_only() {
        let mut c = small(ExperimentKind::Lipschitz);
        c.eps_grid = vec![vec![0.25, 0.25], vec![0.25, 0.125]];
        let r = run_lipschitz_sweep(&families::coupled(), &c).unwrap();
        assert!(r.verdicts.iter().all(|v| v.passed.is_none()));
    }

    #[test]
    fn harmonic_solution_has_finite_holder_constant() {
        let spec = families::by_name::<f64>("identity").unwrap();
        let mut c = small(ExperimentKind::Holder);
        c.eps_grid = vec![vec![0.25, 0.25]];
        c.radii = vec![0.25, 0.125];
        let r = run_holder_sweep(&spec, &c).unwrap();
        let v = r.column("c_alpha").unwrap()[0];
        assert!(v.is_finite() && v > 0.0);
    }

    #[test]
    fn stability_identity_and_scaling_rows() {
        let mut c = small(ExperimentKind::Stability);
        c.scalings = vec![2.0];
        let r = run_stability(&families::checkerboard(), &c).unwrap();
        assert_eq!(r.verdict("identity_row").unwrap().measured, 0.0);
        assert!(r.verdict("scaling_invariance").unwrap().measured <= 1e-8);
    }

    #[test]
    fn constant_hconv_distances_vanish() {
        let spec = CoefficientSpec::constant(Mat::from_diag(&[2.0, 3.0]), 2).variable_separated(true);
        let mut c = small(ExperimentKind::Hconv);
        c.levels = vec![2, 3];
        let r = run_hconv_probe(&spec, &c).unwrap();
        assert!(r.column("distance_l2").unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn constant_quasi_benchmark_recovers_constant() {
        let mut spec = CutProjectSpec::<f64>::golden_1d();
        spec.terms.clear();
        spec.mean = 1.5;
        let mut c = small(ExperimentKind::Quasibench);
        c.levels = vec![3, 4];
        c.intervals = 256;
        let q = QuasiOptions {
            cutoff: 8,
            ..QuasiOptions::default()
        };
        let r = run_quasi_benchmark(&spec, &c, &q, &quasicell::DEFAULT_RHO_SCHEDULE).unwrap();
        assert!((r.stats["b0"] - 1.5).abs() < 1e-12);
        assert!((r.stats["oracle"] - 1.5).abs() < 1e-10);
        assert!((r.stats["probe"] - 1.5).abs() < 1e-9);
    }

    #[test]
    fn integer_relation_aborts_with_witness() {
        let mut spec = CutProjectSpec::<f64>::golden_1d();
        spec.projections[0] = Mat::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let c = small(ExperimentKind::Quasibench);
        let err = run_quasi_benchmark(&spec, &c, &QuasiOptions::default(), &quasicell::DEFAULT_RHO_SCHEDULE).unwrap_err();
        assert!(matches!(err, Error::Degenerate { ref witness, .. } if witness == &vec![-2, 1]), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn csv_is_plain() {
        let mut r = ExperimentResult::new(ExperimentKind::Hconv, &["a", "b"]);
        r.rows = vec![vec![0.1, 2.0], vec![1e-300, -3.5]];
        assert_eq!(r.to_csv(), "a,b\n0.1,2.0\n1e-300,-3.5\n");
    }

    #[test]
    fn sorted_grid_orders_descending() {
        let g = sorted_grid(&[vec![0.125, 0.1], vec![0.25, 0.2], vec![0.25, 0.25]]);
        assert_eq!(g, vec![vec![0.25, 0.25], vec![0.25, 0.2], vec![0.125, 0.1]]);
    }

    #[test]
    fn reperiodized_solve_matches_direct_solve() {
        let opts = SolveOptions::default();
        let r = reperiod_equivalence(&families::checkerboard(), 0.25, &[1.0, 2.5], 128, &opts).unwrap();
        assert_eq!(r.floor, vec![1, 2]);
        assert!(r.relative_l2 < 5e-3, "{}", r.relative_l2);
    }
}
