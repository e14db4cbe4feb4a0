//! Reperiodization of variable-separated coefficients.
//!
//! With `λᵢ = ε₁/εᵢ`, `M = diag(λ)`, `⌊M⌋ = diag(⌊λᵢ⌋)` and `Φ = M⌊M⌋⁻¹`,
//! the substitution `x' = Φx` turns `A(x, M x/ε₁)` into the one-scale field
//!
//! ```text
//! A♯(x', y) = Φ A(Φ⁻¹x', ⌊M⌋y) Φ
//! ```
//!
//! which is 1-periodic in `y` because `⌊M⌋` has integer entries.

use serde::Serialize;

use crate::coeff::CoefficientSpec;
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::pde::{Domain, FieldOnGrid};
use crate::real::Real;

/// Distance below which a ratio is treated as the nearest integer.
pub const INTEGER_SNAP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound = "T: Real")]
pub struct ReperiodizationMap<T> {
    pub lambda: Vec<T>,
    pub floor: Vec<u64>,
    pub phi: Vec<T>,
}

impl<T: Real> ReperiodizationMap<T> {
    pub fn m_lambda(&self) -> Mat<T> {
        Mat::from_diag(&self.lambda)
    }

    pub fn floor_m(&self) -> Mat<T> {
        Mat::from_diag(&self.floor.iter().map(|&f| T::lit(f as f64)).collect::<Vec<_>>())
    }

    pub fn phi_matrix(&self) -> Mat<T> {
        Mat::from_diag(&self.phi)
    }

    pub fn is_identity(&self) -> bool {
        self.phi.iter().all(|&p| p == T::one())
    }

    pub fn max_floor(&self) -> u64 {
        self.floor.iter().copied().max().unwrap_or(1)
    }
}

pub fn build_maps<T: Real>(lambda: &[T]) -> Result<ReperiodizationMap<T>> {
    if lambda.is_empty() {
        return Err(Error::precondition("lambda", "empty"));
    }
    let mut lam = Vec::with_capacity(lambda.len());
    let mut floor = Vec::with_capacity(lambda.len());
    let mut phi = Vec::with_capacity(lambda.len());
    for (i, &l) in lambda.iter().enumerate() {
        if !l.is_finite() || l < T::one() - T::lit(INTEGER_SNAP) {
            return Err(Error::precondition(
                format!("lambda[{i}]"),
                format!("must be >= 1 (normalise so the first scale is the largest), got {l}"),
            ));
        }
        let r = l.round();
        let l = if (l - r).abs() <= T::lit(INTEGER_SNAP) { r } else { l };
        let f = l.floor();
        lam.push(l);
        floor.push(f.to_f64_lossy() as u64);
        phi.push(l / f);
    }
    Ok(ReperiodizationMap {
        lambda: lam,
        floor,
        phi,
    })
}

/// Returns `A♯` for a variable-separated `spec`.
pub fn reperiodize<T: Real>(spec: &CoefficientSpec<T>, lambda: &[T]) -> Result<CoefficientSpec<T>> {
    spec.validate()?;
    if !spec.variable_separated {
        return Err(Error::precondition(
            "coefficient.variable_separated",
            "reperiodization needs a variable-separated field",
        ));
    }
    let d = spec.dimension;
    if lambda.len() != d {
        return Err(Error::precondition(
            "lambda",
            format!("expected {d} entries, got {}", lambda.len()),
        ));
    }
    let maps = build_maps(lambda)?;
    if maps.is_identity() && maps.floor.iter().all(|&f| f == 1) {
        return Ok(spec.clone());
    }
    let phi = &maps.phi;
    let mut out = spec.clone();
    let scale_term = |t: &mut crate::coeff::FourierTerm<T>| {
        for (i, k) in t.wave_vectors.iter_mut().enumerate() {
            // scale i reads coordinate i only
            k[i] *= maps.floor[i] as i64;
        }
        t.modulation = t.modulation.compose_inverse_diag(phi);
    };
    out.terms.iter_mut().for_each(scale_term);
    for mt in &mut out.matrix_terms {
        scale_term(&mut mt.term);
        mt.matrix = mt.matrix.sandwich_diag(phi);
    }
    if !maps.is_identity() {
        if let Some(b) = &spec.base_matrix {
            out.base_matrix = Some(b.sandwich_diag(phi));
        } else {
            let w = spec.weights.clone().unwrap_or_else(|| vec![T::one(); d]);
            out.weights = Some(w.iter().zip(phi).map(|(wi, p)| *wi * *p * *p).collect());
        }
        let pmax = phi.iter().copied().fold(T::one(), T::max);
        out.lambda_decl = spec.lambda_decl / (pmax * pmax);
        if let Some(s) = &mut out.smoothness {
            s.lipschitz *= pmax * pmax;
        }
        let (lo, hi) = spec.slow_bounds();
        out.slow_box = Some((
            lo.iter().zip(phi).map(|(a, p)| *a * *p).collect(),
            hi.iter().zip(phi).map(|(a, p)| *a * *p).collect(),
        ));
    }
    Ok(out)
}

/// `v(x') = u(Φ⁻¹x')` sampled on the grid of `Φ(Ω)` with the same node counts.
pub fn change_of_variables<T: Real>(u: &FieldOnGrid<T>, phi: &[T]) -> Result<FieldOnGrid<T>> {
    let dom = &u.domain;
    if phi.len() != dom.dim() {
        return Err(Error::precondition(
            "phi",
            format!("expected {} entries, got {}", dom.dim(), phi.len()),
        ));
    }
    let mapped = Domain::new(
        dom.lower.iter().zip(phi).map(|(a, p)| *a * *p).collect(),
        dom.upper.iter().zip(phi).map(|(a, p)| *a * *p).collect(),
        dom.nodes.clone(),
    )?;
    pull_back(u, phi, mapped)
}

/// Samples `x' ↦ u(Φ⁻¹x')` on an arbitrary grid of `Φ(Ω)` by multilinear interpolation.
pub fn pull_back<T: Real>(u: &FieldOnGrid<T>, phi: &[T], target: Domain<T>) -> Result<FieldOnGrid<T>> {
    let mut values = Vec::with_capacity(target.len());
    for p in 0..target.len() {
        let xp = target.node(p);
        let x: Vec<T> = xp.iter().zip(phi).map(|(a, f)| *a / *f).collect();
        values.push(u.interpolate(&x)?);
    }
    Ok(FieldOnGrid::new(target, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeff::{families, FourierTerm};
    use proptest::prelude::*;

    #[test]
    fn maps_examples() {
        let m = build_maps(&[1.0, 1.0]).unwrap();
        assert_eq!(m.phi_matrix(), Mat::identity(2));
        assert_eq!(m.floor_m(), Mat::identity(2));
        let m = build_maps(&[1.0, 2.5]).unwrap();
        assert_eq!(m.floor, vec![1, 2]);
        assert_eq!(m.phi, vec![1.0, 1.25]);
        let golden = (1.0 + 5f64.sqrt()) / 2.0;
        let m = build_maps(&[1.0, golden]).unwrap();
        assert_eq!(m.floor, vec![1, 1]);
        assert_eq!(m.phi[1], golden);
        assert!(build_maps(&[0.5, 1.0]).is_err());
    }

    #[test]
    fn near_integer_snaps() {
        let m = build_maps(&[1.0, 3.0 - 1e-14]).unwrap();
        assert_eq!(m.floor, vec![1, 3]);
        assert_eq!(m.phi[1], 1.0);
    }

    fn y2_laminate() -> CoefficientSpec<f64> {
        CoefficientSpec::scalar(2, 2, 2.0, vec![FourierTerm::new(1.0, vec![vec![0, 0], vec![0, 1]])])
            .variable_separated(true)
            .with_lambda(0.3)
    }

    #[test]
    fn unit_lambda_is_identity() {
        let s = families::checkerboard::<f64>();
        assert_eq!(reperiodize(&s, &[1.0, 1.0]).unwrap(), s);
    }

    #[test]
    fn integer_lambda_scales_wave_vectors() {
        let s = reperiodize(&y2_laminate(), &[1.0, 3.0]).unwrap();
        assert_eq!(s.terms[0].wave_vectors, vec![vec![0, 0], vec![0, 3]]);
        let y = [0.1, 0.05];
        let a = s.eval_cell(&[0.0, 0.0], &y);
        let expect = 2.0 + (std::f64::consts::TAU * 3.0 * 0.05).sin();
        assert!(a.max_abs_diff(&Mat::from_diag(&[expect, expect])) < 1e-14);
    }

    #[test]
    fn fractional_lambda_example() {
        let s = reperiodize(&y2_laminate(), &[1.0, 2.5]).unwrap();
        let y = [0.3, 0.07];
        let a = s.eval_cell(&[0.0, 0.0], &y);
        let v = 2.0 + (std::f64::consts::TAU * 2.0 * 0.07).sin();
        let expect = Mat::from_diag(&[v, v * 1.25 * 1.25]);
        assert!(a.max_abs_diff(&expect) < 1e-14);
        let e = s.estimate_ellipticity(2000, 4).unwrap();
        assert!(e.lambda_min >= 0.3 / 4.0);
    }

    #[test]
    fn coupled_spec_rejected() {
        assert!(reperiodize(&families::coupled::<f64>(), &[1.0, 2.0]).is_err());
    }

    proptest! {
        #[test]
        fn phi_between_one_and_two(l0 in 1.0f64..50.0, l1 in 1.0f64..1e6) {
            let m = build_maps(&[l0, l1]).unwrap();
            for p in m.phi {
                prop_assert!((1.0..=2.0).contains(&p));
            }
            prop_assert!(m.floor.iter().all(|&f| f >= 1));
        }

        #[test]
        fn transformed_field_is_periodic(l1 in 1.0f64..9.0, y0 in -2.0f64..2.0, y1 in -2.0f64..2.0,
                                          z0 in -4i64..4, z1 in -4i64..4) {
            let s = reperiodize(&families::checkerboard::<f64>(), &[1.0, l1]).unwrap();
            let a = s.eval_cell(&[0.2, 0.4], &[y0, y1]);
            let b = s.eval_cell(&[0.2, 0.4], &[y0 + z0 as f64, y1 + z1 as f64]);
            prop_assert!(a.max_abs_diff(&b) <= 1e-12);
        }

        #[test]
        fn sharp_field_matches_transformed_fine_field(l1 in 1.0f64..9.0, x0 in 0.0f64..1.0, x1 in 0.0f64..1.0) {
            let spec = families::checkerboard::<f64>();
            let eps1 = 0.1;
            let lam = [1.0, l1];
            let maps = build_maps(&lam).unwrap();
            let sharp = reperiodize(&spec, &lam).unwrap();
            let xp = [x0, x1];
            let lhs = sharp.eval_cell(&xp, &[x0 / eps1, x1 / eps1]);
            let x = [x0 / maps.phi[0], x1 / maps.phi[1]];
            let fine = spec.eval_cell(&x, &[x[0] / eps1, x[1] * l1 / eps1]);
            let rhs = fine.sandwich_diag(&maps.phi);
            prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-9);
        }
    }
}
