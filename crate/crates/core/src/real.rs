//! Scalar abstraction shared by every numerical kernel.
//!
//! All solvers are written against [`Real`], which is implemented for `f32`
//! and `f64`. FFT plans are obtained through the trait so generic code never
//! has to name `rustfft`'s own numeric bound.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::sync::Arc;

use num_complex::Complex;
use num_traits::{Float, FloatConst, NumAssign};
use rustfft::FftPlanner;
use serde::de::DeserializeOwned;
use serde::Serialize;

/// A one-dimensional in-place complex FFT of fixed length.
pub trait LineFft<T>: Send + Sync {
    fn len(&self) -> usize;
    fn process(&self, buffer: &mut [Complex<T>]);
}

struct RustFftLine<T: rustfft::FftNum>(Arc<dyn rustfft::Fft<T>>);

impl<T: rustfft::FftNum> LineFft<T> for RustFftLine<T> {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn process(&self, buffer: &mut [Complex<T>]) {
        self.0.process(buffer);
    }
}

/// Floating point scalar usable by the solvers.
pub trait Real:
    Float
    + FloatConst
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Machine epsilon used for snapping and tolerance floors.
    const EPS: Self;

    /// Converts an `f64` literal. Values outside the range of `Self` saturate.
    fn lit(x: f64) -> Self;

    fn to_f64_lossy(self) -> f64;

    fn from_usize(n: usize) -> Self {
        Self::lit(n as f64)
    }

    /// Plans an unnormalised FFT of the given length.
    fn plan_fft(len: usize, inverse: bool) -> Arc<dyn LineFft<Self>>;
}

impl Real for f64 {
    const EPS: Self = f64::EPSILON;

    fn lit(x: f64) -> Self {
        x
    }

    fn to_f64_lossy(self) -> f64 {
        self
    }

    fn plan_fft(len: usize, inverse: bool) -> Arc<dyn LineFft<Self>> {
        let mut planner = FftPlanner::<f64>::new();
        let fft = if inverse {
            planner.plan_fft_inverse(len)
        } else {
            planner.plan_fft_forward(len)
        };
        Arc::new(RustFftLine(fft))
    }
}

impl Real for f32 {
    const EPS: Self = f32::EPSILON;

    fn lit(x: f64) -> Self {
        x as f32
    }

    fn to_f64_lossy(self) -> f64 {
        self as f64
    }

    fn plan_fft(len: usize, inverse: bool) -> Arc<dyn LineFft<Self>> {
        let mut planner = FftPlanner::<f32>::new();
        let fft = if inverse {
            planner.plan_fft_inverse(len)
        } else {
            planner.plan_fft_forward(len)
        };
        Arc::new(RustFftLine(fft))
    }
}

pub(crate) fn two_pi<T: Real>() -> T {
    T::TAU()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip<T: Real>() -> T {
        let n = 12;
        let fwd = T::plan_fft(n, false);
        let inv = T::plan_fft(n, true);
        let orig: Vec<Complex<T>> = (0..n)
            .map(|i| Complex::new(T::lit((i as f64).sin()), T::zero()))
            .collect();
        let mut buf = orig.clone();
        fwd.process(&mut buf);
        inv.process(&mut buf);
        let scale = T::from_usize(n);
        orig.iter()
            .zip(&buf)
            .map(|(a, b)| (*a - *b / scale).norm())
            .fold(T::zero(), T::max)
    }

    #[test]
    fn fft_roundtrip_both_precisions() {
        assert!(roundtrip::<f64>() < 1e-14);
        assert!(roundtrip::<f32>() < 1e-5);
    }
}
