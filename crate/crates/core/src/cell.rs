//! λ-parametrised periodic cell problems and effective tensors.
//!
//! For a field frozen at a slow point `x`, the corrector solves on the unit torus
//!
//! ```text
//! −div(M A(x,·) M ∇χ̃ⱼ) = div(M A(x,·) eⱼ),   M = diag(λ)
//! ```
//!
//! and `Â = ∫ A (I + M∇χ̃)`. The reperiodized backend solves the one-scale
//! problem for `A♯` instead and maps back with `Â = Φ⁻¹ Â♯(Φx) Φ⁻¹`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coeff::{CoeffError, CoefficientField, CoefficientSpec};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::pde::Domain;
use crate::real::Real;
use crate::reperiod::{build_maps, reperiodize};
use crate::torus::{self, TorusGrid, TorusProblem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CellBackend {
    /// Scaled operator on the unit torus; any λ > 0.
    #[default]
    Direct,
    /// One-scale problem for the reperiodized field; λᵢ ≥ 1.
    Reperiodized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellOptions {
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default)]
    pub backend: CellBackend,
}

fn default_resolution() -> usize {
    64
}

fn default_tol() -> f64 {
    torus::DEFAULT_TOL
}

fn default_max_iter() -> usize {
    torus::DEFAULT_MAX_ITER
}

impl Default for CellOptions {
    fn default() -> Self {
        CellOptions {
            resolution: default_resolution(),
            tol: default_tol(),
            max_iter: default_max_iter(),
            backend: CellBackend::Direct,
        }
    }
}

impl CellOptions {
    pub fn with_resolution(mut self, n: usize) -> Self {
        self.resolution = n;
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_backend(mut self, backend: CellBackend) -> Self {
        self.backend = backend;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound = "T: Real")]
pub struct Provenance<T> {
    pub lambda: Vec<T>,
    pub anchor_x: Vec<T>,
    pub resolution: usize,
    pub tol: f64,
    pub backend: CellBackend,
    pub iterations: Vec<usize>,
    pub residuals: Vec<T>,
}

/// Correctors `χ̃ⱼ` on the cell grid together with `M∇χ̃ⱼ`.
#[derive(Debug, Clone)]
pub struct CorrectorField<T> {
    pub provenance: Provenance<T>,
    /// `chi[j][p]`, zero mean.
    pub chi: Vec<Vec<T>>,
    /// `gradient[j][c][p]`: component `c` of `M∇χ̃ⱼ`.
    pub gradient: Vec<Vec<Vec<T>>>,
    pub effective: Mat<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound = "T: Real")]
pub struct EffectiveTensor<T> {
    pub matrix: Mat<T>,
    pub provenance: Provenance<T>,
}

fn check_inputs<T: Real>(spec: &CoefficientSpec<T>, x: &[T], lambda: &[T], opts: &CellOptions) -> Result<()> {
    spec.validate()?;
    let d = spec.dimension;
    if !spec.variable_separated && spec.num_scales > 1 {
        return Err(Error::precondition(
            "coefficient",
            "cell problems need a variable-separated field or a single fast variable",
        ));
    }
    if x.len() != d {
        return Err(CoeffError::DimensionMismatch {
            what: "x".into(),
            expected: d,
            found: x.len(),
        }
        .into());
    }
    if lambda.len() != d {
        return Err(CoeffError::DimensionMismatch {
            what: "lambda".into(),
            expected: d,
            found: lambda.len(),
        }
        .into());
    }
    if let Some(i) = lambda.iter().position(|l| !(l.is_finite() && *l > T::zero())) {
        return Err(Error::precondition(format!("lambda[{i}]"), "must be positive and finite"));
    }
    let n = opts.resolution;
    if n < 16 || !n.is_power_of_two() {
        return Err(Error::precondition(
            "cell.resolution",
            format!("must be a power of two >= 16, got {n}"),
        ));
    }
    let band = spec.bandwidth().max(1) as usize;
    if n < 4 * band {
        return Err(Error::precondition(
            "cell.resolution",
            format!("{n} is below 4 x bandwidth {band}"),
        ));
    }
    Ok(())
}

fn sample_cell<T: Real>(spec: &CoefficientSpec<T>, x: &[T], grid: &TorusGrid<T>) -> Result<Vec<Mat<T>>> {
    let field: Vec<Mat<T>> = (0..grid.len())
        .into_par_iter()
        .map(|p| spec.eval_cell(x, &grid.point(p)))
        .collect();
    for (p, a) in field.iter().enumerate() {
        let ev = a.min_eigenvalue();
        if !(ev > T::zero()) {
            return Err(CoeffError::NotElliptic {
                min_eigenvalue: ev.to_f64_lossy(),
                sample: p,
            }
            .into());
        }
    }
    Ok(field)
}

pub fn solve_corrector<T: Real>(
    spec: &CoefficientSpec<T>,
    x: &[T],
    lambda: &[T],
    opts: &CellOptions,
) -> Result<CorrectorField<T>> {
    check_inputs(spec, x, lambda, opts)?;
    let d = spec.dimension;
    let grid = TorusGrid::new(d, opts.resolution)?;
    let tol = T::lit(opts.tol);
    let (sol, phi) = match opts.backend {
        CellBackend::Direct => {
            let field = sample_cell(spec, x, &grid)?;
            let problem = TorusProblem {
                q: Mat::from_diag(lambda),
                field,
                rho: T::zero(),
            };
            (torus::solve(&grid, &problem, tol, opts.max_iter)?, None)
        }
        CellBackend::Reperiodized => {
            let maps = build_maps(lambda)?;
            let need = 8 * maps.max_floor() as usize;
            if opts.resolution < need {
                return Err(Error::precondition(
                    "cell.resolution",
                    format!("{} is below 8 x max floor(lambda) = {need}", opts.resolution),
                ));
            }
            let sharp = reperiodize(spec, lambda)?;
            let band = sharp.bandwidth().max(1) as usize;
            if opts.resolution < 2 * band {
                return Err(Error::precondition(
                    "cell.resolution",
                    format!("{} does not resolve reperiodized bandwidth {band}", opts.resolution),
                ));
            }
            let xs: Vec<T> = x.iter().zip(&maps.phi).map(|(a, p)| *a * *p).collect();
            let field = sample_cell(&sharp, &xs, &grid)?;
            let problem = TorusProblem {
                q: Mat::identity(d),
                field,
                rho: T::zero(),
            };
            (torus::solve(&grid, &problem, tol, opts.max_iter)?, Some(maps.phi))
        }
    };
    let (effective, gradient) = match &phi {
        None => (sol.effective.clone(), sol.x.clone()),
        Some(phi) => {
            let inv: Vec<T> = phi.iter().map(|p| p.recip()).collect();
            // X = Φ X♯ Φ⁻¹ column by column
            let grad = sol
                .x
                .iter()
                .enumerate()
                .map(|(j, xj)| {
                    xj.iter()
                        .enumerate()
                        .map(|(c, comp)| comp.iter().map(|v| *v * phi[c] * inv[j]).collect())
                        .collect()
                })
                .collect();
            (sol.effective.sandwich_diag(&inv), grad)
        }
    };
    Ok(CorrectorField {
        provenance: Provenance {
            lambda: lambda.to_vec(),
            anchor_x: x.to_vec(),
            resolution: opts.resolution,
            tol: opts.tol,
            backend: opts.backend,
            iterations: sol.iterations,
            residuals: sol.residuals,
        },
        chi: sol.chi,
        gradient,
        effective,
    })
}

pub fn effective_tensor<T: Real>(
    spec: &CoefficientSpec<T>,
    x: &[T],
    lambda: &[T],
    opts: &CellOptions,
) -> Result<EffectiveTensor<T>> {
    if spec.num_scales == 0 || spec.bandwidth() == 0 {
        check_inputs(spec, x, lambda, opts)?;
        let ys: Vec<&[T]> = vec![x; spec.num_scales];
        return Ok(EffectiveTensor {
            matrix: spec.eval_unchecked(x, &ys),
            provenance: Provenance {
                lambda: lambda.to_vec(),
                anchor_x: x.to_vec(),
                resolution: opts.resolution,
                tol: opts.tol,
                backend: opts.backend,
                iterations: vec![0; spec.dimension],
                residuals: vec![T::zero(); spec.dimension],
            },
        });
    }
    let c = solve_corrector(spec, x, lambda, opts)?;
    Ok(EffectiveTensor {
        matrix: c.effective,
        provenance: c.provenance,
    })
}

/// `(∫ |M_λ∇χ̃^λ − M_κ∇χ̃^κ|²)^{1/2}` summed over directions.
pub fn corrector_distance<T: Real>(c1: &CorrectorField<T>, c2: &CorrectorField<T>) -> Result<T> {
    let (p1, p2) = (&c1.provenance, &c2.provenance);
    if p1.resolution != p2.resolution {
        return Err(Error::precondition(
            "corrector resolution",
            format!("{} vs {}", p1.resolution, p2.resolution),
        ));
    }
    if p1.anchor_x != p2.anchor_x || c1.chi.len() != c2.chi.len() {
        return Err(Error::precondition("corrector anchor", "correctors belong to different cells"));
    }
    if p1.backend != CellBackend::Direct || p2.backend != CellBackend::Direct {
        return Err(Error::precondition(
            "cell.backend",
            "distances are taken between direct-backend correctors on a shared grid",
        ));
    }
    let mut e = T::zero();
    for (a, b) in c1.gradient.iter().zip(&c2.gradient) {
        for (u, v) in a.iter().zip(b) {
            let s: T = u.iter().zip(v).map(|(p, q)| (*p - *q) * (*p - *q)).sum();
            e += s / T::from_usize(u.len());
        }
    }
    Ok(e.sqrt())
}

/// `∫ |M∇χ̃|²` summed over directions.
pub fn energy_norm<T: Real>(c: &CorrectorField<T>) -> T {
    let mut e = T::zero();
    for xj in &c.gradient {
        for comp in xj {
            e += comp.iter().map(|v| *v * *v).sum::<T>() / T::from_usize(comp.len());
        }
    }
    e
}

/// Harmonic and arithmetic means of the scalar factor on the cell grid, for
/// fields of the form `a·I`. `None` for anisotropic or matrix-valued fields.
pub fn voigt_reuss<T: Real>(spec: &CoefficientSpec<T>, x: &[T], resolution: usize) -> Result<Option<(T, T)>> {
    if spec.weights.is_some() || spec.base_matrix.is_some() || !spec.matrix_terms.is_empty() {
        return Ok(None);
    }
    let grid = TorusGrid::new(spec.dimension, resolution)?;
    let mut inv = T::zero();
    let mut sum = T::zero();
    for p in 0..grid.len() {
        let y = grid.point(p);
        let ys: Vec<&[T]> = vec![&y; spec.num_scales];
        let a = spec.scalar_part(x, &ys);
        inv += a.recip();
        sum += a;
    }
    let n = T::from_usize(grid.len());
    Ok(Some((n / inv, sum / n)))
}

/// Effective tensor tabulated on the nodes of `domain`, bilinearly interpolated.
pub struct TabulatedField<T> {
    domain: Domain<T>,
    values: Vec<Mat<T>>,
}

impl<T: Real> TabulatedField<T> {
    pub fn new(domain: Domain<T>, values: Vec<Mat<T>>) -> Self {
        TabulatedField { domain, values }
    }
}

impl<T: Real> CoefficientField<T> for TabulatedField<T> {
    fn dimension(&self) -> usize {
        self.values[0].rows()
    }

    fn value(&self, x: &[T]) -> Mat<T> {
        let dom = &self.domain;
        let d = dom.dim();
        let mut idx = Vec::with_capacity(d);
        let mut frac = Vec::with_capacity(d);
        for a in 0..d {
            let last = dom.nodes[a] - 1;
            let t = ((x[a] - dom.lower[a]) / dom.h(a)).max(T::zero()).min(T::from_usize(last));
            let i = (t.floor().to_f64_lossy() as usize).min(last - 1);
            idx.push(i);
            frac.push(t - T::from_usize(i));
        }
        let mut out = Mat::zeros(self.dimension(), self.dimension());
        for corner in 0..(1usize << d) {
            let mut w = T::one();
            let mut p = 0;
            for a in 0..d {
                let stride: usize = dom.nodes[a + 1..].iter().product();
                let bit = corner >> a & 1;
                w *= if bit == 1 { frac[a] } else { T::one() - frac[a] };
                p += (idx[a] + bit) * stride;
            }
            if w != T::zero() {
                out.add_scaled_in_place(&self.values[p], w);
            }
        }
        out
    }
}

/// `x ↦ Â^λ(x)`: a constant field when the coefficient has no slow dependence,
/// otherwise a table over the nodes of `tabulation`.
pub fn effective_field<T: Real>(
    spec: &CoefficientSpec<T>,
    lambda: &[T],
    opts: &CellOptions,
    tabulation: &Domain<T>,
) -> Result<Box<dyn CoefficientField<T>>> {
    if !spec.depends_on_x() {
        let x = vec![T::zero(); spec.dimension];
        let e = effective_tensor(spec, &x, lambda, opts)?;
        return Ok(Box::new(crate::coeff::ConstantField(e.matrix)));
    }
    let values: Result<Vec<Mat<T>>> = (0..tabulation.len())
        .into_par_iter()
        .map(|p| effective_tensor(spec, &tabulation.node(p), lambda, opts).map(|e| e.matrix))
        .collect();
    Ok(Box::new(TabulatedField::new(tabulation.clone(), values?)))
}
