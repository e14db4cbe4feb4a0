//! Pseudo-spectral corrector solver on the unit torus `T^m`.
//!
//! For a field `B(w)` of d×d matrices sampled on a uniform `N^m` grid and a
//! d×m matrix `Q`, solves for each direction `j`
//!
//! ```text
//! −div(Qᵀ B Q ∇χⱼ) − ρ² Δχⱼ = div(Qᵀ B eⱼ),   mean(χⱼ) = 0
//! ```
//!
//! and forms `Xⱼ = Q∇χⱼ` and the effective matrix `mean(B (I + X))`.
//! Derivatives are spectral with the Nyquist mode dropped, which makes the
//! discrete operator symmetric on real grid functions.

use std::sync::Arc;

use num_complex::Complex;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::krylov::{dot, pcg};
use crate::linalg::Mat;
use crate::real::{two_pi, LineFft, Real};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 4000;

/// Uniform grid on `T^m` with `n` points per axis and cached FFT plans.
pub struct TorusGrid<T> {
    m: usize,
    n: usize,
    len: usize,
    fwd: Arc<dyn LineFft<T>>,
    inv: Arc<dyn LineFft<T>>,
    /// `wave[a][p]`: signed frequency of axis `a` at flat index `p`, 0 at Nyquist.
    wave: Vec<Vec<T>>,
}

impl<T: Real> TorusGrid<T> {
    pub fn new(m: usize, n: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::precondition("torus dimension", "must be at least 1"));
        }
        if n < 2 || n % 2 != 0 {
            return Err(Error::precondition("resolution", format!("must be even and >= 2, got {n}")));
        }
        let len = n
            .checked_pow(m as u32)
            .filter(|&l| l <= 1 << 26)
            .ok_or_else(|| Error::precondition("resolution", format!("{n}^{m} grid points is too many")))?;
        let axis: Vec<T> = (0..n)
            .map(|i| {
                if i < n / 2 {
                    T::from_usize(i)
                } else if i == n / 2 {
                    T::zero()
                } else {
                    -T::from_usize(n - i)
                }
            })
            .collect();
        let wave = (0..m)
            .map(|a| {
                let stride = n.pow((m - 1 - a) as u32);
                (0..len).map(|p| axis[(p / stride) % n]).collect()
            })
            .collect();
        Ok(TorusGrid {
            m,
            n,
            len,
            fwd: T::plan_fft(n, false),
            inv: T::plan_fft(n, true),
            wave,
        })
    }

    pub fn dim(&self) -> usize {
        self.m
    }

    pub fn resolution(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Coordinates in `[0,1)^m` of flat index `p` (axis 0 varies slowest).
    pub fn point(&self, p: usize) -> Vec<T> {
        let h = T::from_usize(self.n).recip();
        (0..self.m)
            .map(|a| {
                let stride = self.n.pow((self.m - 1 - a) as u32);
                T::from_usize((p / stride) % self.n) * h
            })
            .collect()
    }

    fn transform(&self, data: &mut [Complex<T>], inverse: bool) {
        let plan = if inverse { &self.inv } else { &self.fwd };
        let n = self.n;
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
        for a in 0..self.m {
            let stride = n.pow((self.m - 1 - a) as u32);
            if stride == 1 {
                for line in data.chunks_mut(n) {
                    plan.process(line);
                }
                continue;
            }
            let block = n * stride;
            for outer in (0..self.len).step_by(block) {
                for inner in 0..stride {
                    let base = outer + inner;
                    for (i, b) in buf.iter_mut().enumerate() {
                        *b = data[base + i * stride];
                    }
                    plan.process(&mut buf);
                    for (i, b) in buf.iter().enumerate() {
                        data[base + i * stride] = *b;
                    }
                }
            }
        }
    }

    pub fn forward(&self, values: &[T]) -> Vec<Complex<T>> {
        let mut c: Vec<Complex<T>> = values.iter().map(|&v| Complex::new(v, T::zero())).collect();
        self.transform(&mut c, false);
        c
    }

    /// Inverse transform, normalised, real part.
    pub fn inverse_real(&self, mut spec: Vec<Complex<T>>) -> Vec<T> {
        self.transform(&mut spec, true);
        let s = T::from_usize(self.len).recip();
        spec.iter().map(|c| c.re * s).collect()
    }

    fn derivative_hat(&self, hat: &[Complex<T>], a: usize) -> Vec<Complex<T>> {
        let tp = two_pi::<T>();
        hat.iter()
            .zip(&self.wave[a])
            .map(|(c, &k)| Complex::new(-c.im, c.re) * (tp * k))
            .collect()
    }

    /// Spectral gradient, one array per axis.
    pub fn gradient(&self, values: &[T]) -> Vec<Vec<T>> {
        let hat = self.forward(values);
        (0..self.m)
            .map(|a| self.inverse_real(self.derivative_hat(&hat, a)))
            .collect()
    }

    /// Spectral divergence of a vector field given as one array per axis.
    pub fn divergence(&self, comps: &[Vec<T>]) -> Vec<T> {
        let mut acc = vec![Complex::new(T::zero(), T::zero()); self.len];
        for (a, c) in comps.iter().enumerate() {
            if c.iter().all(|v| *v == c[0]) {
                continue;
            }
            let d = self.derivative_hat(&self.forward(c), a);
            for (s, v) in acc.iter_mut().zip(d) {
                *s += v;
            }
        }
        self.inverse_real(acc)
    }

    /// True when every axis frequency is 0 or Nyquist (kernel of the gradient).
    fn is_null_mode(&self, p: usize) -> bool {
        (0..self.m).all(|a| self.wave[a][p] == T::zero())
    }

    pub fn mean(&self, values: &[T]) -> T {
        values.iter().copied().sum::<T>() / T::from_usize(self.len)
    }
}

/// Problem data for [`solve`].
pub struct TorusProblem<T> {
    /// d×m
    pub q: Mat<T>,
    /// `B` at each grid point.
    pub field: Vec<Mat<T>>,
    pub rho: T,
}

#[derive(Debug, Clone)]
pub struct TorusSolution<T> {
    /// `chi[j][p]`
    pub chi: Vec<Vec<T>>,
    /// `x[j][c][p]`: component `c` of `Q∇χⱼ`.
    pub x: Vec<Vec<Vec<T>>>,
    pub effective: Mat<T>,
    pub iterations: Vec<usize>,
    pub residuals: Vec<T>,
    pub histories: Vec<Vec<T>>,
}

impl<T: Real> TorusSolution<T> {
    /// `Σⱼ mean |Q∇χⱼ|²`.
    pub fn energy(&self) -> T {
        let mut e = T::zero();
        for xj in &self.x {
            for comp in xj {
                e += dot(comp, comp) / T::from_usize(comp.len());
            }
        }
        e
    }

    /// `(Σⱼ mean |Xⱼ − Yⱼ|²)^{1/2}`.
    pub fn distance(&self, other: &Self) -> T {
        let mut e = T::zero();
        for (xj, yj) in self.x.iter().zip(&other.x) {
            for (a, b) in xj.iter().zip(yj) {
                let s: T = a.iter().zip(b).map(|(p, q)| (*p - *q) * (*p - *q)).sum();
                e += s / T::from_usize(a.len());
            }
        }
        e.sqrt()
    }
}

struct Operator<'a, T> {
    grid: &'a TorusGrid<T>,
    m: usize,
    d: usize,
    /// QᵀBQ per point, m×m row-major.
    k: Vec<T>,
    /// QᵀB per point, m×d row-major.
    g: Vec<T>,
    rho2: T,
    inv_symbol: Vec<T>,
}

impl<'a, T: Real> Operator<'a, T> {
    fn new(grid: &'a TorusGrid<T>, problem: &TorusProblem<T>) -> Result<Self> {
        let m = grid.m;
        let d = problem.q.rows();
        if problem.q.cols() != m {
            return Err(Error::precondition(
                "projection",
                format!("Q has {} columns, torus has dimension {m}", problem.q.cols()),
            ));
        }
        if problem.field.len() != grid.len {
            return Err(Error::precondition(
                "field",
                format!("{} samples for a grid of {}", problem.field.len(), grid.len),
            ));
        }
        let qt = problem.q.transpose();
        let mut k = Vec::with_capacity(grid.len * m * m);
        let mut g = Vec::with_capacity(grid.len * m * d);
        let mut kbar = Mat::zeros(m, m);
        for b in &problem.field {
            if b.rows() != d || b.cols() != d {
                return Err(Error::precondition("field", format!("expected {d}x{d} samples")));
            }
            let gb = qt.matmul(b);
            let kb = gb.matmul(&problem.q);
            kbar.add_scaled_in_place(&kb, T::one());
            k.extend_from_slice(kb.as_slice());
            g.extend_from_slice(gb.as_slice());
        }
        let kbar = kbar.scaled(T::from_usize(grid.len).recip());
        let rho2 = problem.rho * problem.rho;
        let tp2 = two_pi::<T>() * two_pi::<T>();
        let inv_symbol = (0..grid.len)
            .map(|p| {
                if grid.is_null_mode(p) {
                    return T::zero();
                }
                let kv: Vec<T> = (0..m).map(|a| grid.wave[a][p]).collect();
                let s = tp2 * (kbar.bilinear(&kv, &kv) + rho2 * dot(&kv, &kv));
                if s > T::zero() {
                    s.recip()
                } else {
                    T::zero()
                }
            })
            .collect();
        Ok(Operator {
            grid,
            m,
            d,
            k,
            g,
            rho2,
            inv_symbol,
        })
    }

    fn apply(&self, x: &[T], out: &mut [T]) {
        let grid = self.grid;
        let m = self.m;
        let hat = grid.forward(x);
        let grads: Vec<Vec<T>> = (0..m).map(|a| grid.inverse_real(grid.derivative_hat(&hat, a))).collect();
        let tp2 = two_pi::<T>() * two_pi::<T>();
        let mut acc: Vec<Complex<T>> = hat
            .iter()
            .enumerate()
            .map(|(p, c)| {
                let k2: T = (0..m).map(|a| grid.wave[a][p] * grid.wave[a][p]).sum();
                *c * (self.rho2 * tp2 * k2)
            })
            .collect();
        for a in 0..m {
            let flux: Vec<T> = (0..grid.len)
                .map(|p| {
                    let row = &self.k[p * m * m + a * m..p * m * m + (a + 1) * m];
                    (0..m).map(|b| row[b] * grads[b][p]).sum()
                })
                .collect();
            // −div: minus the derivative of each flux component
            let dh = grid.derivative_hat(&grid.forward(&flux), a);
            for (s, v) in acc.iter_mut().zip(dh) {
                *s -= v;
            }
        }
        out.copy_from_slice(&grid.inverse_real(acc));
    }

    fn precondition(&self, r: &[T], z: &mut [T]) {
        let mut hat = self.grid.forward(r);
        for (c, s) in hat.iter_mut().zip(&self.inv_symbol) {
            *c = *c * *s;
        }
        z.copy_from_slice(&self.grid.inverse_real(hat));
    }

    fn rhs(&self, j: usize) -> Vec<T> {
        let (m, d) = (self.m, self.d);
        let comps: Vec<Vec<T>> = (0..m)
            .map(|a| (0..self.grid.len).map(|p| self.g[p * m * d + a * d + j]).collect())
            .collect();
        self.grid.divergence(&comps)
    }
}

/// Solves the corrector problem for every direction `j = 0..d`.
pub fn solve<T: Real>(
    grid: &TorusGrid<T>,
    problem: &TorusProblem<T>,
    tol: T,
    max_iter: usize,
) -> Result<TorusSolution<T>> {
    let op = Operator::new(grid, problem)?;
    let d = op.d;
    let solves: Vec<Result<_>> = (0..d)
        .into_par_iter()
        .map(|j| {
            let b = op.rhs(j);
            pcg(
                "torus corrector",
                &b,
                |p, out| op.apply(p, out),
                |r, z| op.precondition(r, z),
                tol,
                max_iter,
            )
        })
        .collect();
    let mut chi = Vec::with_capacity(d);
    let mut iterations = Vec::with_capacity(d);
    let mut residuals = Vec::with_capacity(d);
    let mut histories = Vec::with_capacity(d);
    for s in solves {
        let s = s?;
        chi.push(s.solution);
        iterations.push(s.iterations);
        residuals.push(s.relative_residual);
        histories.push(s.history);
    }
    let x: Vec<Vec<Vec<T>>> = chi
        .iter()
        .map(|c| {
            let grads = grid.gradient(c);
            (0..d)
                .map(|row| {
                    (0..grid.len)
                        .map(|p| (0..grid.m).map(|a| problem.q[(row, a)] * grads[a][p]).sum())
                        .collect()
                })
                .collect()
        })
        .collect();
    let inv_len = T::from_usize(grid.len).recip();
    let effective = Mat::from_fn(d, d, |i, j| {
        let mut s = T::zero();
        for (p, b) in problem.field.iter().enumerate() {
            let mut v = b[(i, j)];
            for c in 0..d {
                v += b[(i, c)] * x[j][c][p];
            }
            s += v;
        }
        s * inv_len
    });
    Ok(TorusSolution {
        chi,
        x,
        effective,
        iterations,
        residuals,
        histories,
    })
}

/// Largest Fourier-mode residual of the discrete corrector equation for
/// direction `j`, relative to the ℓ² norm of the right-hand side.
pub fn weak_residual<T: Real>(
    grid: &TorusGrid<T>,
    problem: &TorusProblem<T>,
    chi: &[T],
    j: usize,
) -> Result<T> {
    let op = Operator::new(grid, problem)?;
    let b = op.rhs(j);
    let mut ax = vec![T::zero(); grid.len];
    op.apply(chi, &mut ax);
    let r: Vec<T> = ax.iter().zip(&b).map(|(a, c)| *a - *c).collect();
    let rh = grid.forward(&r);
    let bh = grid.forward(&b);
    let bnorm = bh.iter().map(|c| c.norm_sqr()).sum::<T>().sqrt();
    let worst = rh.iter().map(|c| c.norm()).fold(T::zero(), T::max);
    Ok(if bnorm > T::zero() { worst / bnorm } else { worst })
}
