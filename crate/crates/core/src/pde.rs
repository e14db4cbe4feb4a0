//! Finite-difference solver for `−div(A∇u) = f` on rectangles with Dirichlet data.
//!
//! The diagonal part of `A` enters through face fluxes with harmonic averages of
//! nodal values; the off-diagonal entry (d = 2) through centred cross
//! differences. The interior system is symmetric and is solved by conjugate
//! gradients preconditioned with a constant-coefficient Laplacian inverted by
//! sine transforms.

use std::sync::Arc;

use num_complex::Complex;
use serde::Serialize;

use crate::coeff::CoefficientField;
use crate::error::{Error, Result};
use crate::krylov::pcg;
use crate::real::{LineFft, Real};

pub const DEFAULT_POINTS_PER_PERIOD: usize = 8;

/// Axis-aligned box with a uniform node lattice (boundary nodes included).
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound = "T: Real")]
pub struct Domain<T> {
    pub lower: Vec<T>,
    pub upper: Vec<T>,
    pub nodes: Vec<usize>,
}

impl<T: Real> Domain<T> {
    pub fn new(lower: Vec<T>, upper: Vec<T>, nodes: Vec<usize>) -> Result<Self> {
        let d = nodes.len();
        if !(1..=2).contains(&d) || lower.len() != d || upper.len() != d {
            return Err(Error::precondition("domain", "dimension must be 1 or 2 with matching bounds"));
        }
        for a in 0..d {
            if !(upper[a] > lower[a]) {
                return Err(Error::precondition(format!("domain.upper[{a}]"), "must exceed lower bound"));
            }
            if nodes[a] < 5 {
                return Err(Error::precondition(
                    format!("domain.nodes[{a}]"),
                    "need at least 3 interior nodes",
                ));
            }
        }
        Ok(Domain { lower, upper, nodes })
    }

    /// `[0,1]^d` with `intervals` cells per axis.
    pub fn unit(d: usize, intervals: usize) -> Result<Self> {
        Self::new(vec![T::zero(); d], vec![T::one(); d], vec![intervals + 1; d])
    }

    pub fn dim(&self) -> usize {
        self.nodes.len()
    }

    pub fn len(&self) -> usize {
        self.nodes.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn h(&self, a: usize) -> T {
        (self.upper[a] - self.lower[a]) / T::from_usize(self.nodes[a] - 1)
    }

    pub fn max_h(&self) -> T {
        (0..self.dim()).map(|a| self.h(a)).fold(T::zero(), T::max)
    }

    fn stride(&self, a: usize) -> usize {
        self.nodes[a + 1..].iter().product()
    }

    pub fn multi_index(&self, p: usize) -> Vec<usize> {
        (0..self.dim()).map(|a| (p / self.stride(a)) % self.nodes[a]).collect()
    }

    pub fn node(&self, p: usize) -> Vec<T> {
        self.multi_index(p)
            .iter()
            .enumerate()
            .map(|(a, &i)| self.lower[a] + self.h(a) * T::from_usize(i))
            .collect()
    }

    pub fn is_boundary(&self, p: usize) -> bool {
        self.multi_index(p)
            .iter()
            .zip(&self.nodes)
            .any(|(&i, &n)| i == 0 || i == n - 1)
    }
}

/// Nodal values with solve metadata.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound = "T: Real")]
pub struct FieldOnGrid<T> {
    pub domain: Domain<T>,
    pub values: Vec<T>,
    pub iterations: usize,
    pub residual: T,
    pub warnings: Vec<String>,
}

impl<T: Real> FieldOnGrid<T> {
    pub fn new(domain: Domain<T>, values: Vec<T>) -> Self {
        FieldOnGrid {
            domain,
            values,
            iterations: 0,
            residual: T::zero(),
            warnings: Vec::new(),
        }
    }

    pub fn from_fn(domain: Domain<T>, f: impl Fn(&[T]) -> T) -> Self {
        let values = (0..domain.len()).map(|p| f(&domain.node(p))).collect();
        Self::new(domain, values)
    }

    /// Multilinear interpolation; points outside the box are a domain error.
    pub fn interpolate(&self, x: &[T]) -> Result<T> {
        let dom = &self.domain;
        let d = dom.dim();
        let slack = T::lit(1e-12);
        let mut base = 0usize;
        let mut frac = Vec::with_capacity(d);
        let mut strides = Vec::with_capacity(d);
        for a in 0..d {
            let t = (x[a] - dom.lower[a]) / dom.h(a);
            let last = T::from_usize(dom.nodes[a] - 1);
            if !(t >= -slack * last && t <= last * (T::one() + slack)) {
                return Err(Error::Domain(format!(
                    "point {:?} lies outside [{}, {}] along axis {a}",
                    x.iter().map(|v| v.to_f64_lossy()).collect::<Vec<_>>(),
                    dom.lower[a],
                    dom.upper[a]
                )));
            }
            let t = t.max(T::zero()).min(last);
            let i = (t.floor().to_f64_lossy() as usize).min(dom.nodes[a] - 2);
            frac.push(t - T::from_usize(i));
            base += i * dom.stride(a);
            strides.push(dom.stride(a));
        }
        let mut v = T::zero();
        for corner in 0..(1usize << d) {
            let mut w = T::one();
            let mut p = base;
            for a in 0..d {
                if corner >> a & 1 == 1 {
                    w *= frac[a];
                    p += strides[a];
                } else {
                    w *= T::one() - frac[a];
                }
            }
            if w != T::zero() {
                v += w * self.values[p];
            }
        }
        Ok(v)
    }

    fn trapezoid_weights(&self) -> Vec<T> {
        let dom = &self.domain;
        (0..dom.len())
            .map(|p| {
                dom.multi_index(p)
                    .iter()
                    .enumerate()
                    .map(|(a, &i)| {
                        let h = dom.h(a);
                        if i == 0 || i == dom.nodes[a] - 1 {
                            h * T::lit(0.5)
                        } else {
                            h
                        }
                    })
                    .fold(T::one(), |x, y| x * y)
            })
            .collect()
    }

    pub fn l2(&self) -> T {
        self.trapezoid_weights()
            .iter()
            .zip(&self.values)
            .map(|(w, v)| *w * *v * *v)
            .sum::<T>()
            .sqrt()
    }

    /// `‖self − other‖_{L²}` on a shared grid.
    pub fn l2_distance(&self, other: &Self) -> Result<T> {
        if self.domain != other.domain {
            return Err(Error::precondition("field", "grids differ"));
        }
        let diff: Vec<T> = self.values.iter().zip(&other.values).map(|(a, b)| *a - *b).collect();
        Ok(FieldOnGrid::new(self.domain.clone(), diff).l2())
    }

    /// Finite-difference gradient: centred inside, one-sided on the boundary.
    pub fn gradient(&self) -> Vec<Vec<T>> {
        let dom = &self.domain;
        (0..dom.dim())
            .map(|a| {
                let s = dom.stride(a);
                let h = dom.h(a);
                (0..dom.len())
                    .map(|p| {
                        let i = dom.multi_index(p)[a];
                        if i == 0 {
                            (self.values[p + s] - self.values[p]) / h
                        } else if i == dom.nodes[a] - 1 {
                            (self.values[p] - self.values[p - s]) / h
                        } else {
                            (self.values[p + s] - self.values[p - s]) / (h + h)
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// `(L², H¹ seminorm, sup |∇u| over the inner half)`.
    pub fn norms(&self) -> (T, T, T) {
        self.norms_with_margin(T::lit(0.25))
    }

    /// As [`norms`](Self::norms), with the sup taken over nodes at relative
    /// distance at least `margin` from every face.
    pub fn norms_with_margin(&self, margin: T) -> (T, T, T) {
        let dom = &self.domain;
        let grad = self.gradient();
        let w = self.trapezoid_weights();
        let mut h1 = T::zero();
        let mut sup = T::zero();
        for p in 0..dom.len() {
            let g2: T = grad.iter().map(|g| g[p] * g[p]).sum();
            h1 += w[p] * g2;
            let x = dom.node(p);
            let inside = (0..dom.dim()).all(|a| {
                let len = dom.upper[a] - dom.lower[a];
                let eps = dom.h(a) * T::lit(1e-9);
                x[a] >= dom.lower[a] + margin * len - eps && x[a] <= dom.upper[a] - margin * len + eps
            });
            if inside {
                sup = sup.max(g2.sqrt());
            }
        }
        (self.l2(), h1.sqrt(), sup)
    }

    /// Discrete `H²` proxy: L² norm of all second differences at interior nodes.
    pub fn h2_proxy(&self) -> T {
        let dom = &self.domain;
        let d = dom.dim();
        let mut acc = T::zero();
        let cell: T = (0..d).map(|a| dom.h(a)).fold(T::one(), |x, y| x * y);
        for p in 0..dom.len() {
            if dom.is_boundary(p) {
                continue;
            }
            let u = &self.values;
            let mut s = T::zero();
            for a in 0..d {
                let st = dom.stride(a);
                let h = dom.h(a);
                let v = (u[p + st] - u[p] - u[p] + u[p - st]) / (h * h);
                s += v * v;
            }
            if d == 2 {
                let (s0, s1) = (dom.stride(0), dom.stride(1));
                let v = (u[p + s0 + s1] - u[p + s0 - s1] - u[p - s0 + s1] + u[p - s0 - s1])
                    / (T::lit(4.0) * dom.h(0) * dom.h(1));
                s += v * v + v * v;
            }
            acc += s * cell;
        }
        acc.sqrt()
    }

    /// `max_r r^{−α} (mean over the ball B_r(center) of |u − mean|²)^{1/2}`.
    pub fn campanato(&self, alpha: T, center: &[T], radii: &[T]) -> Result<T> {
        let dom = &self.domain;
        if !(alpha > T::zero() && alpha < T::one()) {
            return Err(Error::precondition("alpha", "must lie in (0, 1)"));
        }
        if center.len() != dom.dim() {
            return Err(Error::precondition("center", "dimension mismatch"));
        }
        let mut best = T::zero();
        for &r in radii {
            for a in 0..dom.dim() {
                if center[a] - r < dom.lower[a] || center[a] + r > dom.upper[a] {
                    return Err(Error::Domain(format!(
                        "ball of radius {r} around {:?} leaves the domain",
                        center.iter().map(|c| c.to_f64_lossy()).collect::<Vec<_>>()
                    )));
                }
            }
            let mut n = 0usize;
            let mut sum = T::zero();
            let mut members = Vec::new();
            for p in 0..dom.len() {
                let x = dom.node(p);
                let dist2: T = x.iter().zip(center).map(|(a, b)| (*a - *b) * (*a - *b)).sum();
                if dist2 <= r * r {
                    n += 1;
                    sum += self.values[p];
                    members.push(p);
                }
            }
            if n == 0 {
                return Err(Error::Domain(format!("ball of radius {r} contains no nodes")));
            }
            let mean = sum / T::from_usize(n);
            let var: T = members
                .iter()
                .map(|&p| (self.values[p] - mean) * (self.values[p] - mean))
                .sum::<T>()
                / T::from_usize(n);
            best = best.max(r.powf(-alpha) * var.sqrt());
        }
        Ok(best)
    }

    /// Domain average of the flux `A∇u`.
    pub fn mean_flux(&self, coefficient: &dyn CoefficientField<T>) -> Vec<T> {
        let dom = &self.domain;
        let grad = self.gradient();
        let w = self.trapezoid_weights();
        let vol: T = w.iter().copied().sum();
        let mut out = vec![T::zero(); dom.dim()];
        for p in 0..dom.len() {
            let a = coefficient.value(&dom.node(p));
            let g: Vec<T> = grad.iter().map(|g| g[p]).collect();
            for (o, v) in out.iter_mut().zip(a.matvec(&g)) {
                *o += w[p] * v;
            }
        }
        out.iter().map(|v| *v / vol).collect()
    }
}

pub struct DirichletProblem<'a, T> {
    pub coefficient: &'a dyn CoefficientField<T>,
    pub source: &'a (dyn Fn(&[T]) -> T + Sync),
    pub boundary: &'a (dyn Fn(&[T]) -> T + Sync),
}

#[derive(Debug, Clone, Copy)]
pub struct SolveOptions<T> {
    pub tol: T,
    pub max_iter: usize,
    pub points_per_period: usize,
    /// Proceed (with a warning) when the grid under-resolves the coefficient.
    pub allow_underresolved: bool,
}

impl<T: Real> Default for SolveOptions<T> {
    fn default() -> Self {
        SolveOptions {
            tol: T::lit(1e-10),
            max_iter: 20_000,
            points_per_period: DEFAULT_POINTS_PER_PERIOD,
            allow_underresolved: false,
        }
    }
}

/// Packed DST-I along lines of length `n` via one complex FFT of length `2(n+1)`.
struct SineTransform<T> {
    n: usize,
    fft: Arc<dyn LineFft<T>>,
}

impl<T: Real> SineTransform<T> {
    fn new(n: usize) -> Self {
        SineTransform {
            n,
            fft: T::plan_fft(2 * (n + 1), false),
        }
    }

    /// Unnormalised DST-I of two real lines at once.
    fn pair(&self, a: &mut [T], b: &mut [T], buf: &mut [Complex<T>]) {
        let n = self.n;
        let z = Complex::new(T::zero(), T::zero());
        buf[0] = z;
        buf[n + 1] = z;
        for k in 0..n {
            let c = Complex::new(a[k], b[k]);
            buf[k + 1] = c;
            buf[2 * n + 1 - k] = -c;
        }
        self.fft.process(buf);
        let half = T::lit(0.5);
        for k in 0..n {
            let y = buf[k + 1];
            a[k] = -y.im * half;
            b[k] = y.re * half;
        }
    }

    fn lines(&self, data: &mut [T], count: usize, stride: usize, step: usize) {
        // line l starts at l*step and visits n entries spaced by stride
        let n = self.n;
        let mut buf = vec![Complex::new(T::zero(), T::zero()); 2 * (n + 1)];
        let mut la = vec![T::zero(); n];
        let mut lb = vec![T::zero(); n];
        let mut l = 0;
        while l < count {
            let second = l + 1 < count;
            for k in 0..n {
                la[k] = data[l * step + k * stride];
                lb[k] = if second { data[(l + 1) * step + k * stride] } else { T::zero() };
            }
            self.pair(&mut la, &mut lb, &mut buf);
            for k in 0..n {
                data[l * step + k * stride] = la[k];
                if second {
                    data[(l + 1) * step + k * stride] = lb[k];
                }
            }
            l += 2;
        }
    }
}

struct FdOperator<'a, T> {
    dom: &'a Domain<T>,
    /// `faces[a][p]`: harmonic-mean coefficient on the face between `p` and `p + stride(a)`.
    faces: Vec<Vec<T>>,
    /// Nodal off-diagonal entry (d = 2 only).
    cross: Option<Vec<T>>,
    interior: Vec<usize>,
    inner_sizes: Vec<usize>,
    symbol_inv: Vec<T>,
    dst: Vec<SineTransform<T>>,
}

impl<'a, T: Real> FdOperator<'a, T> {
    fn new(dom: &'a Domain<T>, coefficient: &dyn CoefficientField<T>) -> Result<Self> {
        let d = dom.dim();
        if coefficient.dimension() != d {
            return Err(Error::precondition(
                "coefficient",
                format!("field has dimension {}, domain {d}", coefficient.dimension()),
            ));
        }
        let len = dom.len();
        let mut diag = vec![vec![T::zero(); len]; d];
        let mut off = if d == 2 { Some(vec![T::zero(); len]) } else { None };
        let mut any_cross = false;
        for p in 0..len {
            let x = dom.node(p);
            let a = coefficient.value(&x);
            if !a.is_finite() {
                return Err(Error::Domain(format!("coefficient is not finite at {:?}", x)));
            }
            let scale = a.max_abs().max(T::one());
            if a.asymmetry() > T::lit(1e-12) * scale {
                return Err(Error::precondition(
                    "coefficient",
                    "must be symmetric for a symmetric discrete system",
                ));
            }
            for (k, dk) in diag.iter_mut().enumerate() {
                if !(a[(k, k)] > T::zero()) {
                    return Err(Error::Coeff(crate::coeff::CoeffError::NotElliptic {
                        min_eigenvalue: a[(k, k)].to_f64_lossy(),
                        sample: p,
                    }));
                }
                dk[p] = a[(k, k)];
            }
            if let Some(o) = off.as_mut() {
                o[p] = a[(0, 1)];
                any_cross |= a[(0, 1)] != T::zero();
            }
        }
        if !any_cross {
            off = None;
        }
        let faces: Vec<Vec<T>> = (0..d)
            .map(|a| {
                let s = dom.stride(a);
                (0..len)
                    .map(|p| {
                        if dom.multi_index(p)[a] + 1 < dom.nodes[a] {
                            let (l, r) = (diag[a][p], diag[a][p + s]);
                            T::lit(2.0) * l * r / (l + r)
                        } else {
                            T::zero()
                        }
                    })
                    .collect()
            })
            .collect();
        let interior: Vec<usize> = (0..len).filter(|&p| !dom.is_boundary(p)).collect();
        let inner_sizes: Vec<usize> = dom.nodes.iter().map(|n| n - 2).collect();
        let means: Vec<T> = faces
            .iter()
            .enumerate()
            .map(|(a, f)| {
                let cnt = (dom.nodes[a] - 1) * len / dom.nodes[a];
                f.iter().copied().sum::<T>() / T::from_usize(cnt)
            })
            .collect();
        let pi = T::PI();
        let eig: Vec<Vec<T>> = (0..d)
            .map(|a| {
                let m = inner_sizes[a];
                let h = dom.h(a);
                (1..=m)
                    .map(|k| {
                        let s = (pi * T::from_usize(k) / T::from_usize(2 * (m + 1))).sin();
                        means[a] * T::lit(4.0) * s * s / (h * h)
                    })
                    .collect()
            })
            .collect();
        let norm: T = inner_sizes
            .iter()
            .map(|&m| T::lit(2.0) / T::from_usize(m + 1))
            .fold(T::one(), |x, y| x * y);
        let symbol_inv = if d == 1 {
            eig[0].iter().map(|e| norm / *e).collect()
        } else {
            let mut s = Vec::with_capacity(inner_sizes[0] * inner_sizes[1]);
            for e0 in &eig[0] {
                for e1 in &eig[1] {
                    s.push(norm / (*e0 + *e1));
                }
            }
            s
        };
        let dst = inner_sizes.iter().map(|&m| SineTransform::new(m)).collect();
        Ok(FdOperator {
            dom,
            faces,
            cross: off,
            interior,
            inner_sizes,
            symbol_inv,
            dst,
        })
    }

    /// `out[p] = (L v)[p]` at interior nodes, zero on the boundary.
    fn apply(&self, v: &[T], out: &mut [T]) {
        let dom = self.dom;
        let d = dom.dim();
        out.iter_mut().for_each(|o| *o = T::zero());
        let strides: Vec<usize> = (0..d).map(|a| dom.stride(a)).collect();
        let ih2: Vec<T> = (0..d).map(|a| (dom.h(a) * dom.h(a)).recip()).collect();
        for &p in &self.interior {
            let mut acc = T::zero();
            for a in 0..d {
                let s = strides[a];
                let f = &self.faces[a];
                acc += (f[p] * (v[p] - v[p + s]) + f[p - s] * (v[p] - v[p - s])) * ih2[a];
            }
            if let Some(c) = &self.cross {
                let (s0, s1) = (strides[0], strides[1]);
                let k = (T::lit(4.0) * dom.h(0) * dom.h(1)).recip();
                let t = c[p + s0] * (v[p + s0 + s1] - v[p + s0 - s1])
                    - c[p - s0] * (v[p - s0 + s1] - v[p - s0 - s1])
                    + c[p + s1] * (v[p + s1 + s0] - v[p + s1 - s0])
                    - c[p - s1] * (v[p - s1 + s0] - v[p - s1 - s0]);
                acc -= t * k;
            }
            out[p] = acc;
        }
    }

    fn precondition(&self, r: &[T], z: &mut [T]) {
        let mut w: Vec<T> = self.interior.iter().map(|&p| r[p]).collect();
        if self.dom.dim() == 1 {
            self.dst[0].lines(&mut w, 1, 1, 0);
            for (x, s) in w.iter_mut().zip(&self.symbol_inv) {
                *x *= *s;
            }
            self.dst[0].lines(&mut w, 1, 1, 0);
        } else {
            let (m0, m1) = (self.inner_sizes[0], self.inner_sizes[1]);
            let both = |w: &mut Vec<T>| {
                self.dst[1].lines(w, m0, 1, m1);
                self.dst[0].lines(w, m1, m1, 1);
            };
            both(&mut w);
            for (x, s) in w.iter_mut().zip(&self.symbol_inv) {
                *x *= *s;
            }
            both(&mut w);
        }
        z.iter_mut().for_each(|v| *v = T::zero());
        for (&p, x) in self.interior.iter().zip(w) {
            z[p] = x;
        }
    }
}

/// Solves the Dirichlet problem on `domain` to relative residual `opts.tol`.
pub fn solve<T: Real>(
    problem: &DirichletProblem<'_, T>,
    domain: &Domain<T>,
    opts: &SolveOptions<T>,
) -> Result<FieldOnGrid<T>> {
    let mut warnings = Vec::new();
    if let Some(fine) = problem.coefficient.finest_scale() {
        let need = fine / T::from_usize(opts.points_per_period.max(1));
        if domain.max_h() > need * (T::one() + T::lit(1e-9)) {
            let msg = format!(
                "grid spacing {} exceeds {} = finest period / {}",
                domain.max_h(),
                need,
                opts.points_per_period
            );
            if !opts.allow_underresolved {
                return Err(Error::precondition("pde.resolution", msg));
            }
            warnings.push(msg);
        }
    }
    let op = FdOperator::new(domain, problem.coefficient)?;
    let len = domain.len();
    let mut lift = vec![T::zero(); len];
    for p in 0..len {
        if domain.is_boundary(p) {
            lift[p] = (problem.boundary)(&domain.node(p));
        }
    }
    let mut lifted = vec![T::zero(); len];
    op.apply(&lift, &mut lifted);
    let mut rhs = vec![T::zero(); len];
    for &p in &op.interior {
        rhs[p] = (problem.source)(&domain.node(p)) - lifted[p];
    }
    let out = pcg(
        "finite-difference solve",
        &rhs,
        |p, o| op.apply(p, o),
        |r, z| op.precondition(r, z),
        opts.tol,
        opts.max_iter,
    )?;
    let values: Vec<T> = out.solution.iter().zip(&lift).map(|(u, g)| *u + *g).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("solution is not finite".into()));
    }
    Ok(FieldOnGrid {
        domain: domain.clone(),
        values,
        iterations: out.iterations,
        residual: out.relative_residual,
        warnings,
    })
}

/// Assembles the interior system densely (small grids, for tests and diagnostics).
pub fn assemble_dense<T: Real>(
    coefficient: &dyn CoefficientField<T>,
    domain: &Domain<T>,
) -> Result<Vec<Vec<T>>> {
    let op = FdOperator::new(domain, coefficient)?;
    let len = domain.len();
    let n = op.interior.len();
    let mut m = vec![vec![T::zero(); n]; n];
    let mut e = vec![T::zero(); len];
    let mut col = vec![T::zero(); len];
    for (j, &pj) in op.interior.iter().enumerate() {
        e[pj] = T::one();
        op.apply(&e, &mut col);
        e[pj] = T::zero();
        for (i, &pi) in op.interior.iter().enumerate() {
            m[i][j] = col[pi];
        }
    }
    Ok(m)
}

/// Discrete flux `a_{i+½}(u_{i+1} − u_i)/h` across every face of a 1-D field.
pub fn face_fluxes_1d<T: Real>(u: &FieldOnGrid<T>, coefficient: &dyn CoefficientField<T>) -> Result<Vec<T>> {
    let dom = &u.domain;
    if dom.dim() != 1 {
        return Err(Error::precondition("field", "expected a 1-D grid"));
    }
    let op = FdOperator::new(dom, coefficient)?;
    let h = dom.h(0);
    Ok((0..dom.nodes[0] - 1)
        .map(|i| op.faces[0][i] * (u.values[i + 1] - u.values[i]) / h)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeff::{ConstantField, FnField};
    use crate::linalg::Mat;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn zero(_: &[f64]) -> f64 {
        0.0
    }

    #[test]
    fn affine_data_reproduced_exactly() {
        let dom = Domain::unit(2, 16).unwrap();
        let a = ConstantField(Mat::identity(2));
        let g = |x: &[f64]| x[0];
        let u = solve(
            &DirichletProblem {
                coefficient: &a,
                source: &zero,
                boundary: &g,
            },
            &dom,
            &SolveOptions {
                tol: 1e-14,
                ..Default::default()
            },
        )
        .unwrap();
        for p in 0..dom.len() {
            assert!((u.values[p] - dom.node(p)[0]).abs() < 1e-12);
        }
        let (_, _, sup) = u.norms();
        assert!((sup - 1.0).abs() < 1e-10);
    }

    fn manufactured_error(n: usize) -> f64 {
        let dom = Domain::unit(2, n).unwrap();
        let a = ConstantField(Mat::identity(2));
        let f = |x: &[f64]| 2.0 * PI * PI * (PI * x[0]).sin() * (PI * x[1]).sin();
        let u = solve(
            &DirichletProblem {
                coefficient: &a,
                source: &f,
                boundary: &zero,
            },
            &dom,
            &SolveOptions::default(),
        )
        .unwrap();
        let exact = FieldOnGrid::from_fn(dom, |x| (PI * x[0]).sin() * (PI * x[1]).sin());
        u.l2_distance(&exact).unwrap()
    }

    #[test]
    fn manufactured_solution_is_second_order() {
        let r = manufactured_error(32) / manufactured_error(64);
        assert!((3.6..=4.4).contains(&r), "ratio {r}");
    }

    #[test]
    fn one_d_flux_is_constant() {
        let eps = 1.0 / 8.0;
        let a = FnField::new(1, move |x: &[f64]| Mat::from_diag(&[2.0 + (2.0 * PI * x[0] / eps).sin()]))
            .with_finest_scale(eps);
        let dom = Domain::unit(1, 256).unwrap();
        let g = |x: &[f64]| x[0];
        let u = solve(
            &DirichletProblem {
                coefficient: &a,
                source: &zero,
                boundary: &g,
            },
            &dom,
            &SolveOptions {
                tol: 1e-13,
                ..Default::default()
            },
        )
        .unwrap();
        let q = face_fluxes_1d(&u, &a).unwrap();
        let spread = q.iter().fold(0.0f64, |m, v| m.max((v - q[0]).abs()));
        assert!(spread < 1e-10 * q[0].abs(), "{spread}");
    }

    #[test]
    fn resolution_rule_enforced() {
        let a = FnField::new(1, |_x: &[f64]| Mat::identity(1)).with_finest_scale(0.1);
        let dom = Domain::unit(1, 16).unwrap();
        let prob = DirichletProblem {
            coefficient: &a,
            source: &zero,
            boundary: &zero,
        };
        assert!(solve(&prob, &dom, &SolveOptions::default()).is_err());
        let u = solve(
            &prob,
            &dom,
            &SolveOptions {
                allow_underresolved: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(u.warnings.len(), 1);
    }

    #[test]
    fn norm_examples() {
        let dom = Domain::unit(2, 16).unwrap();
        let z = FieldOnGrid::from_fn(dom, |_| 0.0);
        assert_eq!(z.norms(), (0.0, 0.0, 0.0));
        let dom = Domain::<f64>::unit(2, 256).unwrap();
        let s = FieldOnGrid::from_fn(dom, |x| (2.0 * PI * x[0]).sin());
        assert!((s.l2() - 0.5f64.sqrt()).abs() < 1e-4);
    }

    #[test]
    fn campanato_of_linear_function_matches_disk_moment() {
        let dom = Domain::unit(2, 512).unwrap();
        let u = FieldOnGrid::from_fn(dom, |x| x[0]);
        let r = 0.1;
        let got = u.campanato(0.9, &[0.5, 0.5], &[r]).unwrap();
        // polar quadrature of (x₁ − c)² over the disk, divided by its area
        let (nr, nt) = (400, 400);
        let mut m2 = 0.0;
        for i in 0..nr {
            let rho = (i as f64 + 0.5) / nr as f64 * r;
            for j in 0..nt {
                let t = (j as f64 + 0.5) / nt as f64 * 2.0 * PI;
                m2 += (rho * t.cos()).powi(2) * rho;
            }
        }
        m2 *= (r / nr as f64) * (2.0 * PI / nt as f64) / (PI * r * r);
        let expect = r.powf(-0.9) * m2.sqrt();
        assert!((got - expect).abs() < 2e-3 * expect, "{got} vs {expect}");
        let c = FieldOnGrid::from_fn(Domain::unit(2, 64).unwrap(), |_| 3.0);
        assert_eq!(c.campanato(0.5, &[0.5, 0.5], &[0.25, 0.125]).unwrap(), 0.0);
        assert!(c.campanato(0.5, &[0.5, 0.5], &[0.6]).is_err());
    }

    #[test]
    fn system_is_symmetric_with_cross_terms() {
        let a = FnField::new(2, |x: &[f64]| {
            let o = 0.3 * (3.0 * x[0] + x[1]).sin();
            Mat::from_rows(&[vec![2.0 + x[0], o], vec![o, 2.5 - x[1]]]).unwrap()
        });
        let dom = Domain::new(vec![0.0, 0.0], vec![1.0, 2.0], vec![7, 9]).unwrap();
        let m = assemble_dense(&a, &dom).unwrap();
        for i in 0..m.len() {
            for j in 0..m.len() {
                assert!((m[i][j] - m[j][i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn interpolation_outside_is_error() {
        let dom = Domain::<f64>::unit(2, 8).unwrap();
        let u = FieldOnGrid::from_fn(dom, |x| x[0] + 2.0 * x[1]);
        assert!((u.interpolate(&[0.33, 0.71]).unwrap() - 1.75).abs() < 1e-14);
        assert!(u.interpolate(&[1.2, 0.5]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn maximum_principle(seed in 0u64..10_000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let c: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let k: Vec<f64> = (0..2).map(|_| rng.gen_range(1.0..6.0)).collect();
            let a = FnField::new(2, move |x: &[f64]| {
                Mat::from_diag(&[2.0 + (k[0] * x[0]).sin(), 2.0 + (k[1] * x[1] + x[0]).cos()])
            });
            let g = move |x: &[f64]| c[0] + c[1] * x[0] + c[2] * (5.0 * x[1]).sin() + c[3] * x[0] * x[1];
            let dom = Domain::unit(2, 24).unwrap();
            let u = solve(&DirichletProblem { coefficient: &a, source: &zero, boundary: &g }, &dom,
                          &SolveOptions { tol: 1e-12, ..Default::default() }).unwrap();
            let bvals: Vec<f64> = (0..dom.len()).filter(|&p| dom.is_boundary(p)).map(|p| u.values[p]).collect();
            let lo = bvals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = bvals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for v in &u.values {
                prop_assert!(*v >= lo - 1e-9 && *v <= hi + 1e-9);
            }
        }
    }
}
