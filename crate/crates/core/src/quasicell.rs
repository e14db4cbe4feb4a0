//! Cut-and-project quasi-periodic coefficients `a(x) = B(x, M₁x/ε₁, …, Mₙx/εₙ)`
//! with `B` periodic on tori `T^{mᵢ}`.
//!
//! Correctors live on the higher-dimensional tori and solve the regularized
//! problem `−div(M B Mᵀ∇χ) − ρ²Δχ = div(M B eⱼ)` (here `M` acts through
//! `Q = Mᵀ` in [`crate::torus`]). Effective tensors are obtained for a
//! decreasing `ρ` schedule and extrapolated to `ρ = 0` in `ρ²`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coeff::{CoefficientSpec, FourierTerm, MatrixTerm};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::real::Real;
use crate::scales::{self, ScaleSequence};
use crate::torus::{self, TorusGrid, TorusProblem};

pub const DEFAULT_Z_MAX: i64 = 64;
pub const DEGENERACY_THRESHOLD: f64 = 1e-12;
pub const DEFAULT_CUTOFF: usize = 32;
pub const DEFAULT_RHO_SCHEDULE: [f64; 4] = [0.2, 0.1, 0.05, 0.025];
pub const MAX_LEVELS: usize = 2;

/// `B(x, w₁, …, wₙ) = (c₀ + Σ terms) W + Σ Sₗ tₗ` with `wᵢ ∈ T^{mᵢ}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "T: Real")]
pub struct CutProjectSpec<T> {
    pub dimension: usize,
    pub torus_dims: Vec<usize>,
    /// `Mᵢ`, shape mᵢ×d.
    pub projections: Vec<Mat<T>>,
    pub mean: T,
    #[serde(default)]
    pub terms: Vec<FourierTerm<T>>,
    #[serde(default)]
    pub weights: Option<Vec<T>>,
    #[serde(default)]
    pub base_matrix: Option<Mat<T>>,
    #[serde(default)]
    pub matrix_terms: Vec<MatrixTerm<T>>,
}

impl<T: Real> CutProjectSpec<T> {
    /// `b(w) = 2 + ½ sin 2πw₁ + ½ sin 2πw₂` seen through `M = (1, φ)ᵀ`.
    pub fn golden_1d() -> Self {
        let phi = (T::one() + T::lit(5.0).sqrt()) / T::lit(2.0);
        CutProjectSpec {
            dimension: 1,
            torus_dims: vec![2],
            projections: vec![Mat::from_rows(&[vec![T::one()], vec![phi]]).expect("rectangular")],
            mean: T::lit(2.0),
            terms: vec![
                FourierTerm::new(T::lit(0.5), vec![vec![1, 0]]),
                FourierTerm::new(T::lit(0.5), vec![vec![0, 1]]),
            ],
            weights: None,
            base_matrix: None,
            matrix_terms: Vec::new(),
        }
    }

    /// Embeds a one-scale periodic spec with `M = I`.
    pub fn from_periodic(spec: &CoefficientSpec<T>) -> Result<Self> {
        if spec.num_scales != 1 {
            return Err(Error::precondition(
                "coefficient.num_scales",
                "periodic embedding needs a one-scale field",
            ));
        }
        if spec.depends_on_x() {
            return Err(Error::precondition("coefficient", "periodic embedding needs an x-independent field"));
        }
        Ok(CutProjectSpec {
            dimension: spec.dimension,
            torus_dims: vec![spec.dimension],
            projections: vec![Mat::identity(spec.dimension)],
            mean: spec.mean,
            terms: spec.terms.clone(),
            weights: spec.weights.clone(),
            base_matrix: spec.base_matrix.clone(),
            matrix_terms: spec.matrix_terms.clone(),
        })
    }

    pub fn identity(dimension: usize, projections: Vec<Mat<T>>) -> Self {
        CutProjectSpec {
            dimension,
            torus_dims: projections.iter().map(Mat::rows).collect(),
            projections,
            mean: T::one(),
            terms: Vec::new(),
            weights: None,
            base_matrix: None,
            matrix_terms: Vec::new(),
        }
    }

    pub fn num_levels(&self) -> usize {
        self.torus_dims.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dimension;
        let n = self.torus_dims.len();
        if n == 0 || n > MAX_LEVELS {
            return Err(Error::precondition(
                "quasi.torus_dims",
                format!("1..={MAX_LEVELS} levels are supported, got {n}"),
            ));
        }
        if self.projections.len() != n {
            return Err(Error::precondition("quasi.projections", "one projection per torus"));
        }
        for (i, (m, p)) in self.torus_dims.iter().zip(&self.projections).enumerate() {
            if p.rows() != *m || p.cols() != d {
                return Err(Error::precondition(
                    format!("quasi.projections[{i}]"),
                    format!("expected {m}x{d}, got {}x{}", p.rows(), p.cols()),
                ));
            }
            if *m > 3 {
                return Err(Error::precondition(format!("quasi.torus_dims[{i}]"), "torus dimension above 3"));
            }
        }
        let terms = self.terms.iter().chain(self.matrix_terms.iter().map(|t| &t.term));
        for (t_idx, t) in terms.enumerate() {
            if t.wave_vectors.len() != n {
                return Err(Error::precondition(
                    format!("quasi.terms[{t_idx}]"),
                    format!("expected {n} wave vectors"),
                ));
            }
            for (i, k) in t.wave_vectors.iter().enumerate() {
                if k.len() != self.torus_dims[i] {
                    return Err(Error::precondition(
                        format!("quasi.terms[{t_idx}].wave_vectors[{i}]"),
                        format!("expected length {}", self.torus_dims[i]),
                    ));
                }
            }
        }
        if let Some(w) = &self.weights {
            if w.len() != d || w.iter().any(|v| !(*v > T::zero())) {
                return Err(Error::precondition("quasi.weights", "d positive weights required"));
            }
        }
        for mt in &self.matrix_terms {
            if mt.matrix.rows() != d || mt.matrix.asymmetry() > T::zero() {
                return Err(Error::precondition("quasi.matrix_terms", "symmetric d x d matrices required"));
            }
        }
        Ok(())
    }

    pub fn eval(&self, x: &[T], ws: &[&[T]]) -> Mat<T> {
        let a = self.mean + self.terms.iter().map(|t| t.eval(x, ws)).sum::<T>();
        let mut m = match (&self.base_matrix, &self.weights) {
            (Some(b), _) => b.scaled(a),
            (None, Some(w)) => Mat::from_diag(&w.iter().map(|&wi| wi * a).collect::<Vec<_>>()),
            (None, None) => Mat::from_diag(&vec![a; self.dimension]),
        };
        for mt in &self.matrix_terms {
            m.add_scaled_in_place(&mt.matrix, mt.term.eval(x, ws));
        }
        m
    }

    /// Largest `|k|∞` on torus `level`.
    pub fn bandwidth(&self, level: usize) -> u64 {
        self.terms
            .iter()
            .chain(self.matrix_terms.iter().map(|t| &t.term))
            .filter_map(|t| t.wave_vectors.get(level))
            .flatten()
            .map(|k| k.unsigned_abs())
            .max()
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Nondegeneracy {
    pub nondegenerate: bool,
    /// Minimiser of `|Mᵀz|` over `0 < |z|∞ ≤ z_max`.
    pub witness: Vec<i64>,
    pub value: f64,
    pub z_max: i64,
}

/// Searches `0 < |z|∞ ≤ z_max` for the smallest `|Mᵀz|`.
pub fn validate_nondegeneracy<T: Real>(m: &Mat<T>, z_max: i64) -> Result<Nondegeneracy> {
    if z_max < 1 {
        return Err(Error::precondition("z_max", "must be at least 1"));
    }
    let (rows, d) = (m.rows(), m.cols());
    let mf = m.cast::<f64>();
    let side = (2 * z_max + 1) as usize;
    let total = side
        .checked_pow(rows as u32)
        .filter(|t| *t <= 1 << 28)
        .ok_or_else(|| Error::precondition("z_max", "search box too large for this torus dimension"))?;
    let mut best = (f64::INFINITY, vec![0i64; rows]);
    let mut z = vec![0i64; rows];
    for idx in 0..total {
        let mut r = idx;
        for c in z.iter_mut() {
            *c = (r % side) as i64 - z_max;
            r /= side;
        }
        // z and −z give the same value; keep the one whose last nonzero entry is positive
        match z.iter().rev().find(|c| **c != 0) {
            Some(c) if *c > 0 => {}
            _ => continue,
        }
        let mut s = 0.0;
        for col in 0..d {
            let v: f64 = (0..rows).map(|a| mf[(a, col)] * z[a] as f64).sum();
            s += v * v;
        }
        let v = s.sqrt();
        if v < best.0 {
            best = (v, z.clone());
        }
    }
    Ok(Nondegeneracy {
        nondegenerate: best.0 > DEGENERACY_THRESHOLD,
        witness: best.1,
        value: best.0,
        z_max,
    })
}

#[derive(Debug, Clone, Serialize)]
#[serde(bound = "T: Real")]
pub struct RegularizedCorrector<T> {
    pub rho: T,
    pub cutoff: usize,
    pub resolution: usize,
    /// `coefficients[j]`: Fourier coefficients of `χⱼ` with `|k|∞ ≤ cutoff`,
    /// as `(k, re, im)`.
    pub coefficients: Vec<Vec<(Vec<i64>, T, T)>>,
    /// `x[j][c][p]`: `Mᵀ∇χⱼ` on the grid.
    #[serde(skip)]
    pub x: Vec<Vec<Vec<T>>>,
    pub effective: Mat<T>,
    pub energy: T,
    pub iterations: Vec<usize>,
    pub weak_residual: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuasiOptions {
    #[serde(default = "default_cutoff")]
    pub cutoff: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_z_max")]
    pub z_max: i64,
}

fn default_cutoff() -> usize {
    DEFAULT_CUTOFF
}

fn default_tol() -> f64 {
    1e-10
}

fn default_max_iter() -> usize {
    torus::DEFAULT_MAX_ITER
}

fn default_z_max() -> i64 {
    DEFAULT_Z_MAX
}

impl Default for QuasiOptions {
    fn default() -> Self {
        QuasiOptions {
            cutoff: DEFAULT_CUTOFF,
            tol: default_tol(),
            max_iter: default_max_iter(),
            z_max: DEFAULT_Z_MAX,
        }
    }
}

fn check_cutoff<T: Real>(spec: &CutProjectSpec<T>, level: usize, cutoff: usize) -> Result<()> {
    let band = spec.bandwidth(level) as usize;
    if cutoff < 2 * band.max(1) {
        return Err(Error::precondition(
            "quasi.cutoff",
            format!("{cutoff} is below 2 x bandwidth {band} on torus {}", level + 1),
        ));
    }
    Ok(())
}

/// Rough spectral condition number of the regularized operator.
fn condition_estimate<T: Real>(q: &Mat<T>, field: &[Mat<T>], rho: T, cutoff: usize) -> f64 {
    let qf = q.cast::<f64>();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for b in field {
        let b = b.cast::<f64>();
        lo = lo.min(b.min_eigenvalue());
        hi = hi.max(b.max_eigenvalue());
    }
    let k = cutoff as f64;
    let m = qf.cols();
    let qnorm: f64 = qf.frobenius();
    let r2 = rho.to_f64_lossy().powi(2);
    let small = validate_nondegeneracy(&qf.transpose(), cutoff as i64)
        .map(|n| n.value * n.value)
        .unwrap_or(0.0);
    (hi * qnorm * qnorm + r2) * k * k * m as f64 / (lo * small + r2).max(f64::MIN_POSITIVE)
}

fn annotate(err: Error, rho: f64, cond: f64) -> Error {
    match err {
        Error::NotConverged {
            solver,
            iterations,
            residual,
            history,
        } => Error::NotConverged {
            solver: format!("{solver} at rho = {rho} (condition estimate {cond:.2e})"),
            iterations,
            residual,
            history,
        },
        e => e,
    }
}

fn solve_level<T: Real>(
    grid: &TorusGrid<T>,
    q: &Mat<T>,
    field: Vec<Mat<T>>,
    rho: T,
    cutoff: usize,
    opts: &QuasiOptions,
) -> Result<RegularizedCorrector<T>> {
    let problem = TorusProblem { q: q.clone(), field, rho };
    let sol = torus::solve(grid, &problem, T::lit(opts.tol), opts.max_iter).map_err(|e| {
        annotate(
            e,
            rho.to_f64_lossy(),
            condition_estimate(q, &problem.field, rho, cutoff),
        )
    })?;
    let n = grid.resolution();
    let m = grid.dim();
    let weak_residual = (0..sol.chi.len())
        .map(|j| torus::weak_residual(grid, &problem, &sol.chi[j], j))
        .collect::<Result<Vec<_>>>()?;
    let coefficients = sol
        .chi
        .iter()
        .map(|c| {
            let hat = grid.forward(c);
            let scale = T::from_usize(grid.len()).recip();
            (0..grid.len())
                .filter_map(|p| {
                    let mut r = p;
                    let mut k = vec![0i64; m];
                    for a in (0..m).rev() {
                        let i = r % n;
                        r /= n;
                        k[a] = if i <= n / 2 { i as i64 } else { i as i64 - n as i64 };
                    }
                    let keep = k.iter().all(|v| v.unsigned_abs() as usize <= cutoff && v.unsigned_abs() as usize != n / 2);
                    keep.then(|| (k, hat[p].re * scale, hat[p].im * scale))
                })
                .collect()
        })
        .collect();
    Ok(RegularizedCorrector {
        rho,
        cutoff,
        resolution: n,
        coefficients,
        energy: sol.energy(),
        x: sol.x,
        effective: sol.effective,
        iterations: sol.iterations,
        weak_residual,
    })
}

/// Regularized corrector on the innermost torus with the outer fast variables
/// `outer = (w₁, …, w_{n−1})` and `x` frozen.
pub fn solve_regularized_corrector<T: Real>(
    spec: &CutProjectSpec<T>,
    x: &[T],
    outer: &[Vec<T>],
    rho: T,
    opts: &QuasiOptions,
) -> Result<RegularizedCorrector<T>> {
    spec.validate()?;
    if !(rho > T::zero()) {
        return Err(Error::precondition("rho", "must be positive"));
    }
    let level = spec.num_levels() - 1;
    if outer.len() != level {
        return Err(Error::precondition("outer", format!("expected {level} outer variables")));
    }
    check_cutoff(spec, level, opts.cutoff)?;
    let grid = TorusGrid::new(spec.torus_dims[level], 2 * opts.cutoff)?;
    let field = (0..grid.len())
        .map(|p| {
            let w = grid.point(p);
            let mut ws: Vec<&[T]> = outer.iter().map(Vec::as_slice).collect();
            ws.push(&w);
            spec.eval(x, &ws)
        })
        .collect();
    solve_level(&grid, &spec.projections[level].transpose(), field, rho, opts.cutoff, opts)
}

/// Neville table in `h = ρ²`; returns the extrapolated value and the last correction.
pub fn richardson<T: Real>(rho: &[T], values: &[T]) -> (T, T) {
    let h: Vec<T> = rho.iter().map(|r| *r * *r).collect();
    let mut p = values.to_vec();
    let mut diag = vec![p[p.len() - 1]];
    let n = p.len();
    for level in 1..n {
        for i in (level..n).rev() {
            let (hi, hj) = (h[i], h[i - level]);
            p[i] = (hj * p[i] - hi * p[i - 1]) / (hj - hi);
        }
        diag.push(p[n - 1]);
    }
    let last = diag[diag.len() - 1];
    let prev = if diag.len() > 1 { diag[diag.len() - 2] } else { last };
    (last, (last - prev).abs())
}

#[derive(Debug, Clone, Serialize)]
#[serde(bound = "T: Real")]
pub struct RhoSweep<T> {
    pub rho: Vec<T>,
    pub raw: Vec<Mat<T>>,
    pub energies: Vec<T>,
    pub iterations: Vec<usize>,
    pub extrapolated: Mat<T>,
    pub error_estimate: T,
}

impl<T: Real> RhoSweep<T> {
    /// `max/min` of the corrector energies over the schedule.
    pub fn energy_ratio(&self) -> T {
        let lo = self.energies.iter().copied().fold(T::infinity(), T::min);
        let hi = self.energies.iter().copied().fold(T::zero(), T::max);
        if lo > T::zero() {
            hi / lo
        } else if hi > T::zero() {
            T::infinity()
        } else {
            T::one()
        }
    }
}

fn sweep<T: Real>(
    grid: &TorusGrid<T>,
    q: &Mat<T>,
    field: &[Mat<T>],
    schedule: &[T],
    opts: &QuasiOptions,
) -> Result<RhoSweep<T>> {
    let sols: Vec<RegularizedCorrector<T>> = schedule
        .par_iter()
        .map(|&rho| solve_level(grid, q, field.to_vec(), rho, opts.cutoff, opts))
        .collect::<Result<_>>()?;
    let raw: Vec<Mat<T>> = sols.iter().map(|s| s.effective.clone()).collect();
    let d = raw[0].rows();
    // successive changes must shrink, up to the solver tolerance
    let diffs: Vec<T> = raw.windows(2).map(|w| w[1].max_abs_diff(&w[0])).collect();
    let slack = T::lit(opts.tol.max(1e-12) * 10.0);
    for w in diffs.windows(2) {
        if w[1] > w[0] + slack {
            return Err(Error::Extrapolation {
                sequence: raw.iter().map(|m| m[(0, 0)].to_f64_lossy()).collect(),
            });
        }
    }
    let mut err = T::zero();
    let mut extrapolated = Mat::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            let vals: Vec<T> = raw.iter().map(|m| m[(i, j)]).collect();
            let (v, e) = richardson(schedule, &vals);
            extrapolated[(i, j)] = v;
            err = err.max(e);
        }
    }
    Ok(RhoSweep {
        rho: schedule.to_vec(),
        energies: sols.iter().map(|s| s.energy).collect(),
        iterations: sols.iter().map(|s| s.iterations.iter().copied().max().unwrap_or(0)).collect(),
        raw,
        extrapolated: extrapolated.symmetrized(),
        error_estimate: err,
    })
}

#[derive(Debug, Clone, Serialize)]
#[serde(bound = "T: Real")]
pub struct LevelSummary<T> {
    /// 1-based torus index whose corrector produced this level's field.
    pub torus: usize,
    pub solves: usize,
    pub min_eigenvalue: T,
    pub max_error_estimate: T,
    pub max_iterations: usize,
    pub max_energy_ratio: T,
}

#[derive(Debug, Clone, Serialize)]
#[serde(bound = "T: Real")]
pub struct ReiteratedTensor<T> {
    pub b0: Mat<T>,
    pub x: Vec<T>,
    /// Outermost ρ sweep producing `B₀`.
    pub sweep: RhoSweep<T>,
    /// From the innermost torus outwards.
    pub levels: Vec<LevelSummary<T>>,
    /// Smallest eigenvalue of the input field over the sampled grid.
    pub coercivity: T,
    pub coercive: bool,
    pub nondegeneracy: Vec<Nondegeneracy>,
}

struct Acc<T> {
    solves: usize,
    min_eig: T,
    max_err: T,
    max_iter: usize,
    max_ratio: T,
}

/// `B₀(x)` by solving from the innermost torus outwards.
pub fn reiterated_effective<T: Real>(
    spec: &CutProjectSpec<T>,
    x: &[T],
    rho_schedule: &[T],
    opts: &QuasiOptions,
) -> Result<ReiteratedTensor<T>> {
    spec.validate()?;
    if x.len() != spec.dimension {
        return Err(Error::precondition("x", format!("expected {} coordinates", spec.dimension)));
    }
    if rho_schedule.len() < 2 || rho_schedule.iter().any(|r| !(*r > T::zero())) {
        return Err(Error::precondition("quasi.rho_schedule", "at least two positive values"));
    }
    if rho_schedule.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::precondition("quasi.rho_schedule", "must be strictly decreasing"));
    }
    let mut nondegeneracy = Vec::new();
    for (i, m) in spec.projections.iter().enumerate() {
        check_cutoff(spec, i, opts.cutoff)?;
        let nd = validate_nondegeneracy(m, opts.z_max)?;
        if !nd.nondegenerate {
            return Err(Error::Degenerate {
                witness: nd.witness,
                value: nd.value,
            });
        }
        nondegeneracy.push(nd);
    }
    let n = spec.num_levels();
    let grids = spec
        .torus_dims
        .iter()
        .map(|&m| TorusGrid::new(m, 2 * opts.cutoff))
        .collect::<Result<Vec<_>>>()?;
    let accs: Vec<std::sync::Mutex<Acc<T>>> = (0..n)
        .map(|_| {
            std::sync::Mutex::new(Acc {
                solves: 0,
                min_eig: T::infinity(),
                max_err: T::zero(),
                max_iter: 0,
                max_ratio: T::one(),
            })
        })
        .collect();
    let coercivity = std::sync::Mutex::new(T::infinity());
    let ctx = Ctx {
        spec,
        x,
        schedule: rho_schedule,
        opts,
        grids: &grids,
        accs: &accs,
        coercivity: &coercivity,
    };
    let sweep = ctx.level(&[])?;
    let coercivity = *coercivity.lock().expect("poisoned");
    let levels: Vec<LevelSummary<T>> = (0..n)
        .rev()
        .map(|lvl| {
            let a = accs[lvl].lock().expect("poisoned");
            LevelSummary {
                torus: lvl + 1,
                solves: a.solves,
                min_eigenvalue: a.min_eig,
                max_error_estimate: a.max_err,
                max_iterations: a.max_iter,
                max_energy_ratio: a.max_ratio,
            }
        })
        .collect();
    let floor = coercivity - T::lit(opts.tol.max(1e-8)) - levels.iter().map(|l| l.max_error_estimate).fold(T::zero(), T::max);
    let coercive = levels.iter().all(|l| l.min_eigenvalue >= floor);
    Ok(ReiteratedTensor {
        b0: sweep.extrapolated.clone(),
        x: x.to_vec(),
        sweep,
        levels,
        coercivity,
        coercive,
        nondegeneracy,
    })
}

struct Ctx<'a, T> {
    spec: &'a CutProjectSpec<T>,
    x: &'a [T],
    schedule: &'a [T],
    opts: &'a QuasiOptions,
    grids: &'a [TorusGrid<T>],
    accs: &'a [std::sync::Mutex<Acc<T>>],
    coercivity: &'a std::sync::Mutex<T>,
}

impl<T: Real> Ctx<'_, T> {
    /// Sweep on torus `outer.len()` with the outer variables frozen.
    fn level(&self, outer: &[Vec<T>]) -> Result<RhoSweep<T>> {
        let lvl = outer.len();
        let n = self.spec.num_levels();
        let grid = &self.grids[lvl];
        let field: Vec<Mat<T>> = if lvl + 1 == n {
            let f: Vec<Mat<T>> = (0..grid.len())
                .map(|p| {
                    let w = grid.point(p);
                    let mut ws: Vec<&[T]> = outer.iter().map(Vec::as_slice).collect();
                    ws.push(&w);
                    self.spec.eval(self.x, &ws)
                })
                .collect();
            let lo = f.iter().map(Mat::min_eigenvalue).fold(T::infinity(), T::min);
            let mut c = self.coercivity.lock().expect("poisoned");
            *c = c.min(lo);
            f
        } else {
            (0..grid.len())
                .into_par_iter()
                .map(|p| {
                    let mut o = outer.to_vec();
                    o.push(grid.point(p));
                    self.level(&o).map(|s| s.extrapolated)
                })
                .collect::<Result<_>>()?
        };
        if lvl + 1 < n {
            let lo = field.iter().map(Mat::min_eigenvalue).fold(T::infinity(), T::min);
            let mut a = self.accs[lvl + 1].lock().expect("poisoned");
            a.min_eig = a.min_eig.min(lo);
        }
        let q = self.spec.projections[lvl].transpose();
        let s = sweep(grid, &q, &field, self.schedule, self.opts)?;
        let mut a = self.accs[lvl].lock().expect("poisoned");
        a.solves += self.schedule.len();
        a.max_err = a.max_err.max(s.error_estimate);
        a.max_iter = a.max_iter.max(s.iterations.iter().copied().max().unwrap_or(0));
        a.max_ratio = a.max_ratio.max(s.energy_ratio());
        if lvl == 0 {
            a.min_eig = a.min_eig.min(s.extrapolated.min_eigenvalue());
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeRow {
    pub k: f64,
    pub eps: Vec<f64>,
    pub integral: f64,
    pub target: f64,
    pub distance: f64,
}

/// `∫_{(0,1)^d} φ(M₁x/ε₁, …, Mₙx/εₙ) ψ(x) dx` against `[φ] ∫ψ` along a scale sequence.
///
/// `quad_resolution` is the number of midpoint nodes per finest oscillation.
/// Sequences long enough to classify must be separated.
pub fn weak_mean_probe<T: Real>(
    phi: &(dyn Fn(&[&[f64]]) -> f64 + Sync),
    projections: &[Mat<T>],
    eps_seq: &ScaleSequence,
    psi: &(dyn Fn(&[f64]) -> f64 + Sync),
    quad_resolution: usize,
) -> Result<Vec<ProbeRow>> {
    let n = projections.len();
    if eps_seq.num_scales() != n || n == 0 {
        return Err(Error::precondition("eps_seq", format!("expected {n} scales per row")));
    }
    let d = projections[0].cols();
    if d > 2 || projections.iter().any(|m| m.cols() != d) {
        return Err(Error::precondition("projections", "need a common dimension d <= 2"));
    }
    if eps_seq.len() >= scales::DEFAULT_TAIL_WINDOW {
        let c = scales::classify(eps_seq, scales::DEFAULT_TAIL_WINDOW, scales::DEFAULT_TOL)?;
        if !c.separated {
            return Err(Error::precondition("eps_seq", "scales must be separated"));
        }
    }
    let ms: Vec<Mat<f64>> = projections.iter().map(|m| m.cast::<f64>()).collect();
    let dims: Vec<usize> = ms.iter().map(Mat::rows).collect();
    // [φ] by a tensor midpoint rule on the product torus
    let total: usize = dims.iter().sum();
    let tq = 16usize;
    let mut mean = 0.0;
    let count = tq.pow(total as u32);
    let mut w = vec![0.0; total];
    for idx in 0..count {
        let mut r = idx;
        for c in w.iter_mut() {
            *c = ((r % tq) as f64 + 0.5) / tq as f64;
            r /= tq;
        }
        let mut parts: Vec<&[f64]> = Vec::with_capacity(n);
        let mut off = 0;
        for m in &dims {
            parts.push(&w[off..off + m]);
            off += m;
        }
        mean += phi(&parts);
    }
    mean /= count as f64;
    let rows = (0..eps_seq.len())
        .map(|row| {
            let eps = &eps_seq.entries[row];
            let freq = ms
                .iter()
                .zip(eps)
                .map(|(m, e)| (0..m.rows()).flat_map(|a| (0..d).map(move |c| (a, c))).map(|(a, c)| m[(a, c)].abs()).fold(0.0, f64::max) / e)
                .fold(1.0, f64::max);
            let nodes = (quad_resolution as f64 * freq).ceil() as usize;
            let h = 1.0 / nodes as f64;
            let (integral, psi_int) = (0..nodes.pow(d as u32))
                .into_par_iter()
                .map(|p| {
                    let x: Vec<f64> = if d == 1 {
                        vec![(p as f64 + 0.5) * h]
                    } else {
                        vec![((p / nodes) as f64 + 0.5) * h, ((p % nodes) as f64 + 0.5) * h]
                    };
                    let ws: Vec<Vec<f64>> = ms
                        .iter()
                        .zip(eps)
                        .map(|(m, e)| m.matvec(&x).iter().map(|v| v / e).collect())
                        .collect();
                    let refs: Vec<&[f64]> = ws.iter().map(Vec::as_slice).collect();
                    let ps = psi(&x);
                    (phi(&refs) * ps, ps)
                })
                .collect::<Vec<_>>()
                .into_iter()
                .fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
            let vol = h.powi(d as i32);
            let integral = integral * vol;
            let target = mean * psi_int * vol;
            ProbeRow {
                k: eps_seq.k[row],
                eps: eps.clone(),
                integral,
                target,
                distance: (integral - target).abs(),
            }
        })
        .collect();
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell::{self, CellOptions};
    use crate::coeff::families;

    fn golden() -> f64 {
        (1.0 + 5f64.sqrt()) / 2.0
    }

    /// `(∫∫ b⁻¹)⁻¹` by a midpoint rule; the integrand is analytic and periodic.
    fn harmonic_mean_oracle(n: usize) -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                let (a, b) = ((i as f64 + 0.5) / n as f64, (j as f64 + 0.5) / n as f64);
                let v = 2.0 + 0.5 * (std::f64::consts::TAU * a).sin() + 0.5 * (std::f64::consts::TAU * b).sin();
                s += 1.0 / v;
            }
        }
        (n * n) as f64 / s
    }

    #[test]
    fn golden_projection_is_nondegenerate() {
        let m = Mat::from_rows(&[vec![1.0], vec![golden()]]).expect("rectangular");
        let r = validate_nondegeneracy(&m, 32).unwrap();
        assert!(r.nondegenerate);
        // best approximation 34/21 has a denominator above 32; 21/13 is the worst
        let expect = (21.0 - 13.0 * golden()).abs();
        assert!((r.value - expect).abs() < 1e-12, "{:?}", r);
        assert_eq!(r.witness.iter().map(|v| v.abs()).collect::<Vec<_>>(), vec![21, 13]);
    }

    #[test]
    fn integer_relation_is_degenerate() {
        let m = Mat::from_rows(&[vec![1.0], vec![2.0]]).expect("rectangular");
        let r = validate_nondegeneracy(&m, 8).unwrap();
        assert!(!r.nondegenerate);
        assert_eq!(r.value, 0.0);
        assert_eq!(r.witness, vec![-2, 1]);
    }

    #[test]
    fn identity_projection_minimum_is_one() {
        let r = validate_nondegeneracy(&Mat::<f64>::identity(2), 4).unwrap();
        assert!(r.nondegenerate);
        assert_eq!(r.value, 1.0);
    }

    #[test]
    fn identity_field_has_zero_corrector() {
        let m = Mat::from_rows(&[vec![1.0], vec![golden()]]).expect("rectangular");
        let spec = CutProjectSpec::identity(1, vec![m]);
        for rho in [0.2, 0.01] {
            let c = solve_regularized_corrector(&spec, &[0.0], &[], rho, &QuasiOptions::default()).unwrap();
            assert_eq!(c.energy, 0.0);
            assert_eq!(c.effective, Mat::identity(1));
        }
        let t = reiterated_effective(&spec, &[0.0], &DEFAULT_RHO_SCHEDULE, &QuasiOptions::default()).unwrap();
        assert_eq!(t.b0, Mat::identity(1));
    }

    #[test]
    fn golden_corrector_energy_bounded_in_rho() {
        let spec = CutProjectSpec::<f64>::golden_1d();
        let opts = QuasiOptions::default();
        let energies: Vec<f64> = [0.2, 0.1, 0.05, 0.025]
            .iter()
            .map(|&r| solve_regularized_corrector(&spec, &[0.0], &[], r, &opts).unwrap().energy)
            .collect();
        assert!(energies.iter().all(|e| *e > 1e-4));
        let (lo, hi) = energies.iter().fold((f64::MAX, 0.0f64), |(a, b), e| (a.min(*e), b.max(*e)));
        assert!(hi / lo < 1.5, "{energies:?}");
    }

    #[test]
    fn golden_effective_matches_harmonic_mean() {
        let spec = CutProjectSpec::<f64>::golden_1d();
        let t = reiterated_effective(&spec, &[0.0], &DEFAULT_RHO_SCHEDULE, &QuasiOptions::default()).unwrap();
        let oracle = harmonic_mean_oracle(512);
        assert!((t.b0[(0, 0)] - oracle).abs() <= 1e-3, "{} vs {oracle}", t.b0[(0, 0)]);
        assert!(t.coercive);
        // successive ρ values approach the limit
        let raw: Vec<f64> = t.sweep.raw.iter().map(|m| m[(0, 0)]).collect();
        let diffs: Vec<f64> = raw.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
        assert!(diffs.windows(2).all(|w| w[1] < w[0]), "{raw:?}");
    }

    #[test]
    fn schedules_with_same_endpoint_agree() {
        let spec = CutProjectSpec::<f64>::golden_1d();
        let opts = QuasiOptions::default();
        let a = reiterated_effective(&spec, &[0.0], &[0.2, 0.1, 0.05, 0.025], &opts).unwrap();
        let b = reiterated_effective(&spec, &[0.0], &[0.15, 0.075, 0.025], &opts).unwrap();
        let est = a.sweep.error_estimate.max(b.sweep.error_estimate).max(1e-9);
        assert!(a.b0.max_abs_diff(&b.b0) <= 5.0 * est, "{} vs {}", a.b0[(0, 0)], b.b0[(0, 0)]);
    }

    #[test]
    fn periodic_embedding_matches_cell() {
        let spec = CoefficientSpec::scalar(
            2,
            1,
            2.0,
            vec![
                FourierTerm::new(0.5, vec![vec![1, 0]]),
                FourierTerm::new(0.5, vec![vec![0, 1]]),
                FourierTerm::new(0.25, vec![vec![1, 1]]),
            ],
        );
        let tol = 1e-6;
        let opts = QuasiOptions {
            cutoff: 16,
            ..QuasiOptions::default()
        };
        let q = reiterated_effective(&CutProjectSpec::from_periodic(&spec).unwrap(), &[0.0, 0.0], &DEFAULT_RHO_SCHEDULE, &opts)
            .unwrap();
        let c = cell::effective_tensor(&spec, &[0.0, 0.0], &[1.0, 1.0], &CellOptions::default().with_resolution(32)).unwrap();
        assert!(q.b0.max_abs_diff(&c.matrix) <= 2.0 * tol, "{:?} vs {:?}", q.b0, c.matrix);
    }

    #[test]
    fn two_level_tower_is_coercive_and_symmetric() {
        let mut spec = CutProjectSpec::<f64>::golden_1d();
        spec.torus_dims = vec![1, 2];
        spec.projections = vec![Mat::from_rows(&[vec![1.0]]).expect("rectangular"), spec.projections[0].clone()];
        spec.terms = vec![
            FourierTerm::new(0.5, vec![vec![1], vec![1, 0]]).with_kind(crate::coeff::TrigKind::Cos),
            FourierTerm::new(0.5, vec![vec![0], vec![0, 1]]),
        ];
        let opts = QuasiOptions {
            cutoff: 8,
            ..QuasiOptions::default()
        };
        let t = reiterated_effective(&spec, &[0.0], &DEFAULT_RHO_SCHEDULE, &opts).unwrap();
        assert_eq!(t.levels.len(), 2);
        assert!(t.coercive, "{:?}", t.levels);
        assert!(t.b0[(0, 0)] > 0.0 && t.b0[(0, 0)] < 2.0);
    }

    #[test]
    fn three_levels_rejected() {
        let mut spec = CutProjectSpec::identity(1, vec![Mat::identity(1); 3]);
        spec.mean = 2.0;
        assert!(reiterated_effective(&spec, &[0.0], &DEFAULT_RHO_SCHEDULE, &QuasiOptions::default()).is_err());
    }

    #[test]
    fn cutoff_must_cover_bandwidth() {
        let mut spec = CutProjectSpec::<f64>::golden_1d();
        spec.terms[0].wave_vectors = vec![vec![20, 0]];
        let err = solve_regularized_corrector(&spec, &[0.0], &[], 0.1, &QuasiOptions::default()).unwrap_err();
        assert!(err.to_string().contains("cutoff"));
    }

    #[test]
    fn weak_mean_of_constant_is_exact() {
        let m = vec![Mat::from_rows(&[vec![1.0], vec![golden()]]).expect("rectangular")];
        let seq = ScaleSequence::from_entries(vec![vec![0.5], vec![0.25], vec![0.125]]).unwrap();
        let rows = weak_mean_probe(&|_| 3.0, &m, &seq, &|_| 1.0, 8).unwrap();
        assert!(rows.iter().all(|r| r.distance < 1e-12));
    }

    #[test]
    fn weak_mean_decays_like_eps() {
        let g = golden();
        let m = vec![Mat::from_rows(&[vec![1.0], vec![g]]).expect("rectangular")];
        let entries: Vec<Vec<f64>> = (3..=10).map(|k| vec![0.5f64.powi(k)]).collect();
        let k: Vec<f64> = (3..=10).map(f64::from).collect();
        let seq = ScaleSequence::new(k, entries).unwrap();
        let phi = |w: &[&[f64]]| (std::f64::consts::TAU * w[0][1]).sin();
        let rows = weak_mean_probe(&phi, &m, &seq, &|_| 1.0, 64).unwrap();
        for r in &rows {
            let e = r.eps[0];
            let exact = (1.0 - (std::f64::consts::TAU * g / e).cos()) * e / (std::f64::consts::TAU * g);
            assert!((r.integral - exact).abs() < 1e-3 * e, "{} vs {exact}", r.integral);
            assert!(r.distance <= e / (std::f64::consts::PI * g) + 1e-12);
        }
    }

    #[test]
    fn weak_mean_at_fixed_eps_is_the_integral() {
        let m = vec![Mat::from_rows(&[vec![1.0], vec![golden()]]).expect("rectangular")];
        let seq = ScaleSequence::from_entries(vec![vec![1.0]]).unwrap();
        let phi = |w: &[&[f64]]| (std::f64::consts::TAU * w[0][1]).sin();
        let rows = weak_mean_probe(&phi, &m, &seq, &|_| 1.0, 64).unwrap();
        let g = golden();
        let exact = (1.0 - (std::f64::consts::TAU * g).cos()) / (std::f64::consts::TAU * g);
        assert_eq!(rows.len(), 1);
        assert!((rows[0].distance - exact.abs()).abs() < 1e-4);
    }

    #[test]
    fn coupled_family_cannot_embed() {
        assert!(CutProjectSpec::from_periodic(&families::coupled::<f64>()).is_err());
    }
}
