//! Multiscale coefficient fields `A(x, y₁, …, yₙ)`.
//!
//! A field is a finite Fourier sum with integer wave vectors, so periodicity in
//! every fast variable is exact and symmetry holds by construction:
//!
//! ```text
//! A(x, ys) = a(x, ys) · W + Σⱼ Sⱼ · tⱼ(x, ys)
//! a(x, ys) = c₀ + Σⱼ ampⱼ · modⱼ(x) · Πᵢ trig(2π kⱼᵢ · yᵢ + φⱼ)
//! ```
//!
//! where `W` is a constant symmetric positive definite matrix (identity by
//! default) and each `Sⱼ` is a constant symmetric perturbation. Factors with a
//! zero wave vector are omitted from the product.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Mat;
use crate::real::{two_pi, Real};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoeffError {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        found: usize,
    },
    #[error("non-finite input at {what}")]
    NonFinite { what: String },
    #[error("invalid coefficient field: {0}")]
    Invalid(String),
    #[error("not elliptic: smallest eigenvalue {min_eigenvalue:.6e} at sample {sample}")]
    NotElliptic { min_eigenvalue: f64, sample: usize },
    #[error("declared ellipticity {declared} violated: sampled eigenvalues in [{min:.6e}, {max:.6e}]")]
    DeclaredEllipticityViolated { declared: f64, min: f64, max: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TrigKind {
    #[default]
    Sin,
    Cos,
}

impl TrigKind {
    fn apply<T: Real>(self, theta: T) -> T {
        match self {
            TrigKind::Sin => theta.sin(),
            TrigKind::Cos => theta.cos(),
        }
    }
}

/// Slowly varying factor `mod(x)` multiplying a Fourier term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
#[serde(bound = "T: Real")]
pub enum SlowModulation<T> {
    #[default]
    Constant,
    /// `offset + gradient · x`
    Affine { offset: T, gradient: Vec<T> },
    /// `kind(2π frequency · x + phase)`
    Trig {
        #[serde(default)]
        kind: TrigKind,
        frequency: Vec<T>,
        #[serde(default)]
        phase: T,
    },
}

impl<T: Real> SlowModulation<T> {
    pub fn eval(&self, x: &[T]) -> T {
        match self {
            SlowModulation::Constant => T::one(),
            SlowModulation::Affine { offset, gradient } => {
                *offset + gradient.iter().zip(x).map(|(g, xi)| *g * *xi).sum::<T>()
            }
            SlowModulation::Trig {
                kind,
                frequency,
                phase,
            } => {
                let dot: T = frequency.iter().zip(x).map(|(f, xi)| *f * *xi).sum();
                kind.apply(two_pi::<T>() * dot + *phase)
            }
        }
    }

    fn dims(&self) -> Option<usize> {
        match self {
            SlowModulation::Constant => None,
            SlowModulation::Affine { gradient, .. } => Some(gradient.len()),
            SlowModulation::Trig { frequency, .. } => Some(frequency.len()),
        }
    }

    /// Upper bound of `|mod|` over the box `[lo, hi]`.
    pub fn sup_bound(&self, lo: &[T], hi: &[T]) -> T {
        match self {
            SlowModulation::Constant | SlowModulation::Trig { .. } => T::one(),
            SlowModulation::Affine { offset, gradient } => {
                let mut s = offset.abs();
                for (i, g) in gradient.iter().enumerate() {
                    s += g.abs() * lo[i].abs().max(hi[i].abs());
                }
                s
            }
        }
    }

    /// Lipschitz constant in `x` (Euclidean norm).
    pub fn lipschitz(&self) -> T {
        match self {
            SlowModulation::Constant => T::zero(),
            SlowModulation::Affine { gradient, .. } => norm(gradient),
            SlowModulation::Trig { frequency, .. } => two_pi::<T>() * norm(frequency),
        }
    }

    /// `mod(D⁻¹ x)` for a diagonal `D`.
    pub fn compose_inverse_diag(&self, d: &[T]) -> Self {
        match self {
            SlowModulation::Constant => SlowModulation::Constant,
            SlowModulation::Affine { offset, gradient } => SlowModulation::Affine {
                offset: *offset,
                gradient: gradient.iter().zip(d).map(|(g, di)| *g / *di).collect(),
            },
            SlowModulation::Trig {
                kind,
                frequency,
                phase,
            } => SlowModulation::Trig {
                kind: *kind,
                frequency: frequency.iter().zip(d).map(|(f, di)| *f / *di).collect(),
                phase: *phase,
            },
        }
    }
}

fn norm<T: Real>(v: &[T]) -> T {
    v.iter().map(|&a| a * a).sum::<T>().sqrt()
}

/// One product term `amp · mod(x) · Πᵢ trig(2π kᵢ · yᵢ + φ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "T: Real")]
pub struct FourierTerm<T> {
    pub amplitude: T,
    /// One integer wave vector per fast variable.
    pub wave_vectors: Vec<Vec<i64>>,
    #[serde(default)]
    pub kind: TrigKind,
    #[serde(default)]
    pub phase: T,
    #[serde(default)]
    pub modulation: SlowModulation<T>,
}

impl<T: Real> FourierTerm<T> {
    pub fn new(amplitude: T, wave_vectors: Vec<Vec<i64>>) -> Self {
        FourierTerm {
            amplitude,
            wave_vectors,
            kind: TrigKind::Sin,
            phase: T::zero(),
            modulation: SlowModulation::Constant,
        }
    }

    pub fn with_kind(mut self, kind: TrigKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn with_phase(mut self, phase: T) -> Self {
        self.phase = phase;
        self
    }

    pub fn with_modulation(mut self, modulation: SlowModulation<T>) -> Self {
        self.modulation = modulation;
        self
    }

    pub fn eval(&self, x: &[T], ys: &[&[T]]) -> T {
        let mut prod = self.amplitude * self.modulation.eval(x);
        for (k, y) in self.wave_vectors.iter().zip(ys) {
            if k.iter().all(|&c| c == 0) {
                continue;
            }
            let dot: T = k.iter().zip(y.iter()).map(|(&ki, &yi)| T::lit(ki as f64) * yi).sum();
            prod *= self.kind.apply(two_pi::<T>() * dot + self.phase);
        }
        prod
    }

    /// Largest `|k|∞` over all wave vectors.
    pub fn bandwidth(&self) -> u64 {
        self.wave_vectors
            .iter()
            .flatten()
            .map(|k| k.unsigned_abs())
            .max()
            .unwrap_or(0)
    }

    fn magnitude_bound(&self, lo: &[T], hi: &[T]) -> T {
        self.amplitude.abs() * self.modulation.sup_bound(lo, hi)
    }
}

/// Symmetric matrix-valued perturbation `S · t(x, ys)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "T: Real")]
pub struct MatrixTerm<T> {
    pub matrix: Mat<T>,
    pub term: FourierTerm<T>,
}

/// Declared Hölder data `(L, γ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "T: Real")]
pub struct Smoothness<T> {
    pub lipschitz: T,
    #[serde(default = "one")]
    pub exponent: T,
}

fn one<T: Real>() -> T {
    T::one()
}

fn default_lambda<T: Real>() -> T {
    T::lit(0.1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "T: Real")]
pub struct CoefficientSpec<T> {
    pub dimension: usize,
    pub num_scales: usize,
    /// The constant `c₀` of the scalar factor.
    pub mean: T,
    #[serde(default)]
    pub terms: Vec<FourierTerm<T>>,
    /// Diagonal anisotropy `W = diag(weights)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<T>>,
    /// Full constant anisotropy `W`; exclusive with `weights`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_matrix: Option<Mat<T>>,
    #[serde(default)]
    pub matrix_terms: Vec<MatrixTerm<T>>,
    #[serde(default)]
    pub variable_separated: bool,
    #[serde(default = "default_lambda")]
    pub lambda_decl: T,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smoothness: Option<Smoothness<T>>,
    /// Box over which slow modulations are bounded; `[0,1]^d` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slow_box: Option<(Vec<T>, Vec<T>)>,
}

/// Sampled extreme eigenvalues.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EllipticityEstimate<T> {
    pub lambda_min: T,
    pub lambda_max: T,
}

impl<T: Real> CoefficientSpec<T> {
    /// Scalar field `c₀ + Σ terms` times the identity.
    pub fn scalar(dimension: usize, num_scales: usize, mean: T, terms: Vec<FourierTerm<T>>) -> Self {
        CoefficientSpec {
            dimension,
            num_scales,
            mean,
            terms,
            weights: None,
            base_matrix: None,
            matrix_terms: Vec::new(),
            variable_separated: false,
            lambda_decl: default_lambda(),
            smoothness: None,
            slow_box: None,
        }
    }

    pub fn identity(dimension: usize, num_scales: usize) -> Self {
        let mut s = Self::scalar(dimension, num_scales, T::one(), Vec::new());
        s.lambda_decl = T::one();
        s
    }

    /// Constant matrix `W`.
    pub fn constant(matrix: Mat<T>, num_scales: usize) -> Self {
        let mut s = Self::scalar(matrix.rows(), num_scales, T::one(), Vec::new());
        s.base_matrix = Some(matrix);
        s
    }

    pub fn with_weights(mut self, weights: Vec<T>) -> Self {
        self.weights = Some(weights);
        self
    }

    pub fn with_matrix_term(mut self, matrix: Mat<T>, term: FourierTerm<T>) -> Self {
        self.matrix_terms.push(MatrixTerm { matrix, term });
        self
    }

    pub fn variable_separated(mut self, on: bool) -> Self {
        self.variable_separated = on;
        self
    }

    pub fn with_lambda(mut self, lambda: T) -> Self {
        self.lambda_decl = lambda;
        self
    }

    pub fn with_smoothness(mut self, lipschitz: T, exponent: T) -> Self {
        self.smoothness = Some(Smoothness {
            lipschitz,
            exponent,
        });
        self
    }

    /// Structural checks: shapes, symmetry, declared constants.
    pub fn validate(&self) -> Result<(), CoeffError> {
        let d = self.dimension;
        let n = self.num_scales;
        if d == 0 {
            return Err(CoeffError::Invalid("dimension must be at least 1".into()));
        }
        let all_terms = self
            .terms
            .iter()
            .map(|t| ("terms", t))
            .chain(self.matrix_terms.iter().map(|m| ("matrix_terms", &m.term)));
        for (j, (group, t)) in all_terms.enumerate() {
            if t.wave_vectors.len() != n {
                return Err(CoeffError::DimensionMismatch {
                    what: format!("{group}[{j}].wave_vectors"),
                    expected: n,
                    found: t.wave_vectors.len(),
                });
            }
            for (i, k) in t.wave_vectors.iter().enumerate() {
                if k.len() != d {
                    return Err(CoeffError::DimensionMismatch {
                        what: format!("{group}[{j}].wave_vectors[{i}]"),
                        expected: d,
                        found: k.len(),
                    });
                }
                if self.variable_separated && k.iter().enumerate().any(|(c, &v)| c != i && v != 0) {
                    return Err(CoeffError::Invalid(format!(
                        "{group}[{j}].wave_vectors[{i}] couples coordinates; a variable-separated field lets scale {i} act on coordinate {i} only"
                    )));
                }
            }
            if let Some(m) = t.modulation.dims() {
                if m != d {
                    return Err(CoeffError::DimensionMismatch {
                        what: format!("{group}[{j}].modulation"),
                        expected: d,
                        found: m,
                    });
                }
            }
            if !t.amplitude.is_finite() || !t.phase.is_finite() {
                return Err(CoeffError::NonFinite {
                    what: format!("{group}[{j}]"),
                });
            }
        }
        if self.variable_separated && n != d {
            return Err(CoeffError::Invalid(format!(
                "variable-separated field needs one fast variable per coordinate (num_scales = {d}), got {n}"
            )));
        }
        if self.weights.is_some() && self.base_matrix.is_some() {
            return Err(CoeffError::Invalid("weights and base_matrix are exclusive".into()));
        }
        if let Some(w) = &self.weights {
            if w.len() != d {
                return Err(CoeffError::DimensionMismatch {
                    what: "weights".into(),
                    expected: d,
                    found: w.len(),
                });
            }
            if w.iter().any(|&v| !(v > T::zero())) {
                return Err(CoeffError::Invalid("weights must be positive".into()));
            }
        }
        if let Some(m) = &self.base_matrix {
            check_symmetric(m, d, "base_matrix")?;
            if !(m.min_eigenvalue() > T::zero()) {
                return Err(CoeffError::Invalid("base_matrix must be positive definite".into()));
            }
        }
        for (j, mt) in self.matrix_terms.iter().enumerate() {
            check_symmetric(&mt.matrix, d, &format!("matrix_terms[{j}].matrix"))?;
        }
        if !(self.lambda_decl > T::zero() && self.lambda_decl <= T::one()) {
            return Err(CoeffError::Invalid(format!(
                "lambda_decl must lie in (0, 1], got {}",
                self.lambda_decl
            )));
        }
        if let Some(s) = &self.smoothness {
            if !(s.lipschitz >= T::zero()) || !(s.exponent > T::zero() && s.exponent <= T::one()) {
                return Err(CoeffError::Invalid("smoothness needs L >= 0 and exponent in (0, 1]".into()));
            }
        }
        if let Some((lo, hi)) = &self.slow_box {
            if lo.len() != d || hi.len() != d {
                return Err(CoeffError::DimensionMismatch {
                    what: "slow_box".into(),
                    expected: d,
                    found: lo.len().min(hi.len()),
                });
            }
        }
        Ok(())
    }

    pub fn base(&self) -> Mat<T> {
        if let Some(m) = &self.base_matrix {
            m.clone()
        } else if let Some(w) = &self.weights {
            Mat::from_diag(w)
        } else {
            Mat::identity(self.dimension)
        }
    }

    pub fn slow_bounds(&self) -> (Vec<T>, Vec<T>) {
        self.slow_box
            .clone()
            .unwrap_or_else(|| (vec![T::zero(); self.dimension], vec![T::one(); self.dimension]))
    }

    /// Scalar factor `a(x, ys)` without shape checks.
    pub fn scalar_part(&self, x: &[T], ys: &[&[T]]) -> T {
        self.mean + self.terms.iter().map(|t| t.eval(x, ys)).sum::<T>()
    }

    /// Evaluates `A(x, ys)` with shape and finiteness checks.
    pub fn eval(&self, x: &[T], ys: &[Vec<T>]) -> Result<Mat<T>, CoeffError> {
        if x.len() != self.dimension {
            return Err(CoeffError::DimensionMismatch {
                what: "x".into(),
                expected: self.dimension,
                found: x.len(),
            });
        }
        if ys.len() != self.num_scales {
            return Err(CoeffError::DimensionMismatch {
                what: "ys".into(),
                expected: self.num_scales,
                found: ys.len(),
            });
        }
        for (i, y) in ys.iter().enumerate() {
            if y.len() != self.dimension {
                return Err(CoeffError::DimensionMismatch {
                    what: format!("ys[{i}]"),
                    expected: self.dimension,
                    found: y.len(),
                });
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(CoeffError::NonFinite {
                    what: format!("ys[{i}]"),
                });
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(CoeffError::NonFinite { what: "x".into() });
        }
        let refs: Vec<&[T]> = ys.iter().map(Vec::as_slice).collect();
        Ok(self.eval_unchecked(x, &refs))
    }

    /// Evaluates `A(x, ys)` assuming shapes were validated.
    pub fn eval_unchecked(&self, x: &[T], ys: &[&[T]]) -> Mat<T> {
        let a = self.scalar_part(x, ys);
        let mut m = match (&self.base_matrix, &self.weights) {
            (Some(b), _) => b.scaled(a),
            (None, Some(w)) => Mat::from_diag(&w.iter().map(|&wi| wi * a).collect::<Vec<_>>()),
            (None, None) => Mat::from_diag(&vec![a; self.dimension]),
        };
        for mt in &self.matrix_terms {
            let t = mt.term.eval(x, ys);
            if t != T::zero() {
                m.add_scaled_in_place(&mt.matrix, t);
            }
        }
        m
    }

    /// The one-cell field `y ↦ A(x, y, …, y)`, used when every fast variable is
    /// read at the same cell point (variable-separated fields, one-scale fields).
    pub fn eval_cell(&self, x: &[T], y: &[T]) -> Mat<T> {
        let ys: Vec<&[T]> = vec![y; self.num_scales];
        self.eval_unchecked(x, &ys)
    }

    /// True when some term carries a non-constant slow modulation.
    pub fn depends_on_x(&self) -> bool {
        self.terms
            .iter()
            .chain(self.matrix_terms.iter().map(|m| &m.term))
            .any(|t| t.modulation != SlowModulation::Constant)
    }

    /// Largest `|k|∞` appearing in any term.
    pub fn bandwidth(&self) -> u64 {
        self.terms
            .iter()
            .chain(self.matrix_terms.iter().map(|m| &m.term))
            .map(FourierTerm::bandwidth)
            .max()
            .unwrap_or(0)
    }

    /// Eigenvalue bounds implied by the construction (no sampling).
    pub fn constructive_bounds(&self) -> (T, T) {
        let (lo, hi) = self.slow_bounds();
        let base = self.base();
        let ev = base.sym_eigenvalues();
        let (wmin, wmax) = (ev[0], ev[ev.len() - 1]);
        let radius: T = self.terms.iter().map(|t| t.magnitude_bound(&lo, &hi)).sum();
        let amin = self.mean - radius;
        let amax = self.mean + radius;
        let perturb: T = self
            .matrix_terms
            .iter()
            .map(|mt| {
                let e = mt.matrix.sym_eigenvalues();
                let spec_norm = e[0].abs().max(e[e.len() - 1].abs());
                mt.term.magnitude_bound(&lo, &hi) * spec_norm
            })
            .sum();
        let lower = if amin > T::zero() { amin * wmin } else { amin * wmax } - perturb;
        let upper = if amax > T::zero() { amax * wmax } else { amax * wmin } + perturb;
        (lower, upper)
    }

    /// Fails unless the construction alone guarantees positive definiteness.
    pub fn check_constructive(&self) -> Result<(), CoeffError> {
        let (lower, _) = self.constructive_bounds();
        if lower > T::zero() {
            Ok(())
        } else {
            Err(CoeffError::NotElliptic {
                min_eigenvalue: lower.to_f64_lossy(),
                sample: 0,
            })
        }
    }

    /// Lipschitz constant of `x ↦ A(x, ys)` in the max-entry norm, uniform in `ys`.
    pub fn lipschitz_in_x(&self) -> T {
        let base = self.base().max_abs();
        let scalar: T = self
            .terms
            .iter()
            .map(|t| t.amplitude.abs() * t.modulation.lipschitz())
            .sum::<T>()
            * base;
        let mats: T = self
            .matrix_terms
            .iter()
            .map(|m| m.term.amplitude.abs() * m.term.modulation.lipschitz() * m.matrix.max_abs())
            .sum();
        scalar + mats
    }

    fn random_point(&self, rng: &mut ChaCha8Rng) -> (Vec<T>, Vec<Vec<T>>) {
        let (lo, hi) = self.slow_bounds();
        let x = (0..self.dimension)
            .map(|i| lo[i] + (hi[i] - lo[i]) * T::lit(rng.gen::<f64>()))
            .collect();
        let ys = (0..self.num_scales)
            .map(|_| (0..self.dimension).map(|_| T::lit(rng.gen::<f64>())).collect())
            .collect();
        (x, ys)
    }

    /// Samples extreme eigenvalues of `A` at `n_samples` random points.
    ///
    /// Fast variables are drawn from the unit cell, which suffices by
    /// periodicity. A non-positive minimum is reported as [`CoeffError::NotElliptic`];
    /// samples outside `[Λ, Λ⁻¹]` as [`CoeffError::DeclaredEllipticityViolated`].
    pub fn estimate_ellipticity(
        &self,
        n_samples: usize,
        seed: u64,
    ) -> Result<EllipticityEstimate<T>, CoeffError> {
        if n_samples == 0 {
            return Err(CoeffError::Invalid("n_samples must be at least 1".into()));
        }
        self.validate_shapes_only()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut lmin = T::infinity();
        let mut lmax = T::neg_infinity();
        for s in 0..n_samples {
            let (x, ys) = self.random_point(&mut rng);
            let refs: Vec<&[T]> = ys.iter().map(Vec::as_slice).collect();
            let ev = self.eval_unchecked(&x, &refs).sym_eigenvalues();
            if !(ev[0] > T::zero()) {
                return Err(CoeffError::NotElliptic {
                    min_eigenvalue: ev[0].to_f64_lossy(),
                    sample: s,
                });
            }
            lmin = lmin.min(ev[0]);
            lmax = lmax.max(ev[ev.len() - 1]);
        }
        if lmin < self.lambda_decl || lmax > self.lambda_decl.recip() {
            return Err(CoeffError::DeclaredEllipticityViolated {
                declared: self.lambda_decl.to_f64_lossy(),
                min: lmin.to_f64_lossy(),
                max: lmax.to_f64_lossy(),
            });
        }
        Ok(EllipticityEstimate {
            lambda_min: lmin,
            lambda_max: lmax,
        })
    }

    fn validate_shapes_only(&self) -> Result<(), CoeffError> {
        // lambda_decl range is checked by estimate_ellipticity itself
        let mut probe = self.clone();
        probe.lambda_decl = T::one();
        probe.validate()
    }

    /// Largest sampled ratio `|A(x,ys) − A(x',ys)|∞ / |x − x'|^γ`.
    pub fn sample_holder_ratio(&self, n_samples: usize, seed: u64, exponent: T) -> T {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = T::zero();
        for _ in 0..n_samples {
            let (x, ys) = self.random_point(&mut rng);
            let (x2, _) = self.random_point(&mut rng);
            let refs: Vec<&[T]> = ys.iter().map(Vec::as_slice).collect();
            let a = self.eval_unchecked(&x, &refs);
            let b = self.eval_unchecked(&x2, &refs);
            let dist = norm(&x.iter().zip(&x2).map(|(p, q)| *p - *q).collect::<Vec<_>>());
            if dist > T::zero() {
                worst = worst.max(a.max_abs_diff(&b) / dist.powf(exponent));
            }
        }
        worst
    }

    pub fn cast<U: Real>(&self) -> CoefficientSpec<U> {
        let c = |v: T| U::lit(v.to_f64_lossy());
        let cv = |v: &Vec<T>| v.iter().map(|&a| c(a)).collect::<Vec<U>>();
        let cm = |m: &SlowModulation<T>| match m {
            SlowModulation::Constant => SlowModulation::Constant,
            SlowModulation::Affine { offset, gradient } => SlowModulation::Affine {
                offset: c(*offset),
                gradient: cv(gradient),
            },
            SlowModulation::Trig {
                kind,
                frequency,
                phase,
            } => SlowModulation::Trig {
                kind: *kind,
                frequency: cv(frequency),
                phase: c(*phase),
            },
        };
        let ct = |t: &FourierTerm<T>| FourierTerm {
            amplitude: c(t.amplitude),
            wave_vectors: t.wave_vectors.clone(),
            kind: t.kind,
            phase: c(t.phase),
            modulation: cm(&t.modulation),
        };
        CoefficientSpec {
            dimension: self.dimension,
            num_scales: self.num_scales,
            mean: c(self.mean),
            terms: self.terms.iter().map(ct).collect(),
            weights: self.weights.as_ref().map(cv),
            base_matrix: self.base_matrix.as_ref().map(Mat::cast),
            matrix_terms: self
                .matrix_terms
                .iter()
                .map(|m| MatrixTerm {
                    matrix: m.matrix.cast(),
                    term: ct(&m.term),
                })
                .collect(),
            variable_separated: self.variable_separated,
            lambda_decl: c(self.lambda_decl),
            smoothness: self.smoothness.map(|s| Smoothness {
                lipschitz: c(s.lipschitz),
                exponent: c(s.exponent),
            }),
            slow_box: self.slow_box.as_ref().map(|(a, b)| (cv(a), cv(b))),
        }
    }
}

fn check_symmetric<T: Real>(m: &Mat<T>, d: usize, what: &str) -> Result<(), CoeffError> {
    if m.rows() != d || m.cols() != d {
        return Err(CoeffError::DimensionMismatch {
            what: what.to_string(),
            expected: d,
            found: m.rows(),
        });
    }
    if m.asymmetry() != T::zero() {
        return Err(CoeffError::Invalid(format!("{what} must be symmetric")));
    }
    Ok(())
}

/// A coefficient field on physical space, `x ↦ A(x)`.
pub trait CoefficientField<T: Real>: Send + Sync {
    fn dimension(&self) -> usize;
    fn value(&self, x: &[T]) -> Mat<T>;
    /// Smallest oscillation length, used by resolution checks.
    fn finest_scale(&self) -> Option<T> {
        None
    }
}

/// `A_ε(x) = A(x, x/ε₁, …, x/εₙ)`.
#[derive(Debug, Clone)]
pub struct Oscillating<T> {
    pub spec: CoefficientSpec<T>,
    pub eps: Vec<T>,
}

impl<T: Real> Oscillating<T> {
    pub fn new(spec: CoefficientSpec<T>, eps: Vec<T>) -> Result<Self, CoeffError> {
        spec.validate()?;
        if eps.len() != spec.num_scales {
            return Err(CoeffError::DimensionMismatch {
                what: "eps".into(),
                expected: spec.num_scales,
                found: eps.len(),
            });
        }
        if let Some(i) = eps.iter().position(|e| !(*e > T::zero())) {
            return Err(CoeffError::Invalid(format!("eps[{i}] must be positive")));
        }
        Ok(Oscillating { spec, eps })
    }
}

impl<T: Real> CoefficientField<T> for Oscillating<T> {
    fn dimension(&self) -> usize {
        self.spec.dimension
    }

    fn value(&self, x: &[T]) -> Mat<T> {
        let ys: Vec<Vec<T>> = self
            .eps
            .iter()
            .map(|&e| x.iter().map(|&xi| xi / e).collect())
            .collect();
        let refs: Vec<&[T]> = ys.iter().map(Vec::as_slice).collect();
        self.spec.eval_unchecked(x, &refs)
    }

    fn finest_scale(&self) -> Option<T> {
        if self.spec.bandwidth() == 0 {
            return None;
        }
        let band = T::lit(self.spec.bandwidth() as f64);
        self.eps.iter().copied().reduce(T::min).map(|e| e / band)
    }
}

/// Constant tensor field.
#[derive(Debug, Clone)]
pub struct ConstantField<T>(pub Mat<T>);

impl<T: Real> CoefficientField<T> for ConstantField<T> {
    fn dimension(&self) -> usize {
        self.0.rows()
    }

    fn value(&self, _x: &[T]) -> Mat<T> {
        self.0.clone()
    }
}

/// Field defined by a closure.
pub struct FnField<T, F> {
    dim: usize,
    f: F,
    finest: Option<T>,
}

impl<T: Real, F: Fn(&[T]) -> Mat<T> + Send + Sync> FnField<T, F> {
    pub fn new(dim: usize, f: F) -> Self {
        FnField { dim, f, finest: None }
    }

    pub fn with_finest_scale(mut self, s: T) -> Self {
        self.finest = Some(s);
        self
    }
}

impl<T: Real, F: Fn(&[T]) -> Mat<T> + Send + Sync> CoefficientField<T> for FnField<T, F> {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn value(&self, x: &[T]) -> Mat<T> {
        (self.f)(x)
    }

    fn finest_scale(&self) -> Option<T> {
        self.finest
    }
}

/// `A(x) + s·I`, the perturbed field of the H-convergence probe.
pub struct Shifted<'a, T> {
    pub inner: &'a dyn CoefficientField<T>,
    pub shift: T,
}

impl<T: Real> CoefficientField<T> for Shifted<'_, T> {
    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn value(&self, x: &[T]) -> Mat<T> {
        self.inner.value(x).add(&Mat::identity(self.dimension()).scaled(self.shift))
    }

    fn finest_scale(&self) -> Option<T> {
        self.inner.finest_scale()
    }
}

/// Named coefficient families used by the experiments and the CLI.
pub mod families {
    use super::*;

    fn sin_term<T: Real>(amp: f64, wave_vectors: Vec<Vec<i64>>) -> FourierTerm<T> {
        FourierTerm::new(T::lit(amp), wave_vectors)
    }

    /// `a(y₁) = 2 + sin(2π y₁)` in dimension `d`, one fast variable per coordinate.
    pub fn laminate<T: Real>(d: usize) -> CoefficientSpec<T> {
        let mut k = vec![vec![0i64; d]; d];
        k[0][0] = 1;
        CoefficientSpec::scalar(d, d, T::lit(2.0), vec![sin_term(1.0, k)])
            .variable_separated(true)
            .with_lambda(T::lit(1.0 / 3.0))
            .with_smoothness(T::zero(), T::one())
    }

    /// Variable-separated field oscillating in both directions:
    /// `2 + ½ sin 2πy₁ + ½ sin 2πy₂ + ¼ sin 2πy₁ · sin 2πy₂`.
    pub fn checkerboard<T: Real>() -> CoefficientSpec<T> {
        CoefficientSpec::scalar(
            2,
            2,
            T::lit(2.0),
            vec![
                sin_term(0.5, vec![vec![1, 0], vec![0, 0]]),
                sin_term(0.5, vec![vec![0, 0], vec![0, 1]]),
                sin_term(0.25, vec![vec![1, 0], vec![0, 1]]),
            ],
        )
        .variable_separated(true)
        .with_lambda(T::lit(0.3))
        .with_smoothness(T::zero(), T::one())
    }

    /// Coupled two-scale field `2 + ½ sin(2π y₁·e₁) sin(2π y₂·(e₁+e₂))`.
    pub fn coupled<T: Real>() -> CoefficientSpec<T> {
        CoefficientSpec::scalar(
            2,
            2,
            T::lit(2.0),
            vec![sin_term(0.5, vec![vec![1, 0], vec![1, 1]])],
        )
        .with_lambda(T::lit(0.4))
        .with_smoothness(T::zero(), T::one())
    }

    /// `diag(2 + sin 2πy₁⁽¹⁾, 2 + sin 2πy₂⁽²⁾)`: a laminate in each direction,
    /// the first read at scale ε₁ and the second at ε₂.
    pub fn cross_laminate<T: Real>() -> CoefficientSpec<T> {
        CoefficientSpec::scalar(2, 2, T::one(), Vec::new())
            .with_weights(vec![T::lit(2.0), T::lit(2.0)])
            .with_matrix_term(
                Mat::from_diag(&[T::one(), T::zero()]),
                sin_term(1.0, vec![vec![1, 0], vec![0, 0]]),
            )
            .with_matrix_term(
                Mat::from_diag(&[T::zero(), T::one()]),
                sin_term(1.0, vec![vec![0, 0], vec![0, 1]]),
            )
            .variable_separated(true)
            .with_lambda(T::lit(1.0 / 3.0))
            .with_smoothness(T::zero(), T::one())
    }

    /// Checkerboard with weights `(1, 2)` and an off-diagonal term driven by the first scale.
    pub fn anisotropic<T: Real>() -> CoefficientSpec<T> {
        let s = T::lit(0.3);
        let mut spec = checkerboard::<T>()
            .with_weights(vec![T::one(), T::lit(2.0)])
            .with_matrix_term(
                Mat::from_fn(2, 2, |i, j| if i == j { T::zero() } else { s }),
                sin_term(1.0, vec![vec![1, 0], vec![0, 0]]),
            )
            .with_lambda(T::lit(0.12));
        spec.smoothness = Some(Smoothness {
            lipschitz: T::zero(),
            exponent: T::one(),
        });
        spec
    }

    pub const NAMES: [&str; 8] = [
        "laminate",
        "laminate1d",
        "cross_laminate",
        "checkerboard",
        "anisotropic",
        "coupled",
        "identity",
        "identity1d",
    ];

    pub fn by_name<T: Real>(name: &str) -> Option<CoefficientSpec<T>> {
        match name {
            "laminate" => Some(laminate(2)),
            "laminate1d" => Some(laminate(1)),
            "cross_laminate" => Some(cross_laminate()),
            "checkerboard" => Some(checkerboard()),
            "anisotropic" => Some(anisotropic()),
            "coupled" => Some(coupled()),
            "identity" => Some(CoefficientSpec::identity(2, 2).variable_separated(true)),
            "identity1d" => Some(CoefficientSpec::identity(1, 1)),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_scale_example() -> CoefficientSpec<f64> {
        CoefficientSpec::scalar(
            2,
            2,
            2.0,
            vec![
                FourierTerm::new(0.5, vec![vec![1, 0], vec![0, 0]]),
                FourierTerm::new(0.5, vec![vec![0, 0], vec![0, 1]]),
            ],
        )
    }

    #[test]
    fn identity_evaluates_to_identity() {
        let s = CoefficientSpec::<f64>::identity(3, 2);
        let a = s.eval(&[0.3, -1.0, 7.0], &[vec![0.1, 0.2, 0.3], vec![5.0, 6.0, 7.0]]).unwrap();
        assert_eq!(a, Mat::identity(3));
    }

    #[test]
    fn one_dimensional_sine_at_quarter() {
        let s = families::laminate::<f64>(1);
        let a = s.eval(&[0.77], &[vec![0.25]]).unwrap();
        assert!((a[(0, 0)] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_phase_gives_mean() {
        let s = two_scale_example();
        let a = s.eval(&[0.5, 0.5], &[vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(a, Mat::from_diag(&[2.0, 2.0]));
    }

    #[test]
    fn dimension_errors_name_the_offender() {
        let s = two_scale_example();
        let err = s.eval(&[0.5, 0.5], &[vec![0.0, 0.0], vec![0.0]]).unwrap_err();
        assert_eq!(
            err,
            CoeffError::DimensionMismatch {
                what: "ys[1]".into(),
                expected: 2,
                found: 1
            }
        );
        let err = s.eval(&[0.5], &[vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap_err();
        assert!(matches!(err, CoeffError::DimensionMismatch { ref what, .. } if what == "x"));
        let err = s.eval(&[0.5, 0.5], &[vec![0.0, 0.0]]).unwrap_err();
        assert!(matches!(err, CoeffError::DimensionMismatch { ref what, .. } if what == "ys"));
        let err = s.eval(&[f64::NAN, 0.5], &[vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap_err();
        assert!(matches!(err, CoeffError::NonFinite { .. }));
    }

    #[test]
    fn ellipticity_of_identity_and_sine() {
        let id = CoefficientSpec::<f64>::identity(2, 1);
        let e = id.estimate_ellipticity(50, 7).unwrap();
        assert_eq!((e.lambda_min, e.lambda_max), (1.0, 1.0));

        let s = families::laminate::<f64>(1);
        let e = s.estimate_ellipticity(20_000, 3).unwrap();
        assert!((e.lambda_min - 1.0).abs() < 1e-4, "{e:?}");
        assert!((e.lambda_max - 3.0).abs() < 1e-4, "{e:?}");
        assert_eq!(s.estimate_ellipticity(20_000, 3).unwrap(), e);
    }

    #[test]
    fn negative_constant_is_not_elliptic() {
        let s = CoefficientSpec::<f64>::scalar(1, 0, -1.0, vec![]);
        assert!(matches!(
            s.estimate_ellipticity(10, 0),
            Err(CoeffError::NotElliptic { .. })
        ));
        assert!(s.check_constructive().is_err());
    }

    #[test]
    fn declared_lambda_is_enforced() {
        let s = families::laminate::<f64>(1).with_lambda(0.9);
        assert!(matches!(
            s.estimate_ellipticity(500, 1),
            Err(CoeffError::DeclaredEllipticityViolated { .. })
        ));
    }

    #[test]
    fn variable_separation_is_structural() {
        let bad = CoefficientSpec::<f64>::scalar(
            2,
            2,
            2.0,
            vec![FourierTerm::new(0.5, vec![vec![1, 1], vec![0, 0]])],
        )
        .variable_separated(true);
        assert!(bad.validate().is_err());
        assert!(families::checkerboard::<f64>().validate().is_ok());
        assert!(families::coupled::<f64>().validate().is_ok());
    }

    #[test]
    fn constructive_bounds_cover_samples() {
        for spec in [families::checkerboard::<f64>(), families::coupled(), families::laminate(2)] {
            let (lo, hi) = spec.constructive_bounds();
            let e = spec.estimate_ellipticity(2000, 11).unwrap();
            assert!(lo <= e.lambda_min && e.lambda_max <= hi);
            assert!(spec.check_constructive().is_ok());
        }
    }

    #[test]
    fn named_families_validate() {
        for name in families::NAMES {
            let spec = families::by_name::<f64>(name).unwrap();
            assert!(spec.validate().is_ok(), "{name}");
            let e = spec.estimate_ellipticity(2000, 5).unwrap();
            assert!(e.lambda_min >= spec.lambda_decl, "{name}: {}", e.lambda_min);
        }
        assert!(families::by_name::<f64>("nope").is_none());
    }

    #[test]
    fn toml_roundtrip() {
        let spec = families::checkerboard::<f64>().with_matrix_term(
            Mat::from_rows(&[vec![0.0, 0.1], vec![0.1, 0.0]]).unwrap(),
            FourierTerm::new(1.0, vec![vec![2, 0], vec![0, 0]]).with_kind(TrigKind::Cos),
        );
        let text = toml::to_string(&spec).unwrap();
        let back: CoefficientSpec<f64> = toml::from_str(&text).unwrap();
        assert_eq!(back, spec);
    }

    fn modulated() -> CoefficientSpec<f64> {
        CoefficientSpec::scalar(
            2,
            1,
            3.0,
            vec![
                FourierTerm::new(0.4, vec![vec![1, 2]]).with_modulation(SlowModulation::Trig {
                    kind: TrigKind::Cos,
                    frequency: vec![0.5, 0.25],
                    phase: 0.1,
                }),
                FourierTerm::new(0.3, vec![vec![0, 1]]).with_modulation(SlowModulation::Affine {
                    offset: 0.5,
                    gradient: vec![0.2, -0.3],
                }),
            ],
        )
        .with_matrix_term(
            Mat::from_rows(&[vec![0.2, 0.1], vec![0.1, -0.1]]).unwrap(),
            FourierTerm::new(1.0, vec![vec![1, 1]]).with_kind(TrigKind::Cos),
        )
    }

    proptest! {
        #[test]
        fn periodic_in_every_fast_variable(
            x0 in -2.0f64..2.0, x1 in -2.0f64..2.0,
            y0 in -3.0f64..3.0, y1 in -3.0f64..3.0,
            z0 in -5i64..5, z1 in -5i64..5,
        ) {
            let s = modulated();
            let a = s.eval(&[x0, x1], &[vec![y0, y1]]).unwrap();
            let b = s.eval(&[x0, x1], &[vec![y0 + z0 as f64, y1 + z1 as f64]]).unwrap();
            prop_assert!(a.max_abs_diff(&b) <= 1e-12);
            prop_assert_eq!(a.asymmetry(), 0.0);
        }

        #[test]
        fn declared_smoothness_holds(seed in 0u64..1000) {
            let s = modulated();
            let lip = s.lipschitz_in_x();
            let s = s.with_smoothness(lip, 1.0);
            let ratio = s.sample_holder_ratio(50, seed, 1.0);
            prop_assert!(ratio <= lip * (1.0 + 1e-12));
        }
    }
}
