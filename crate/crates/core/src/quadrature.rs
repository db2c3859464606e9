//! Globally adaptive 15-point Gauss–Kronrod quadrature.
//!
//! Used as the numerical reference for the closed-form density identities in
//! [`crate::hurdle_dist`] and for normalising debiased densities that have no
//! closed form.

use crate::error::{Error, Result};
use crate::scalar::Real;

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];

const WGK: [f64; 8] = [
    0.022_935_322_010_529_225,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];

/// Gauss weights for the odd-indexed Kronrod nodes (and the centre).
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

#[derive(Debug, Clone, Copy)]
pub struct Tolerance {
    pub abs: f64,
    pub rel: f64,
    pub max_segments: usize,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance { abs: 1e-300, rel: 1e-12, max_segments: 4000 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Integral<T> {
    pub value: T,
    pub error: T,
    pub segments: usize,
}

struct Segment<T> {
    a: T,
    b: T,
    value: T,
    error: T,
}

fn gk15<T: Real, F: Fn(T) -> T>(f: &F, a: T, b: T) -> Segment<T> {
    let half = T::lit(0.5);
    let center = half * (a + b);
    let half_len = half * (b - a);
    let fc = f(center);
    let mut kronrod = fc * T::lit(WGK[7]);
    let mut gauss = fc * T::lit(WG[3]);
    for j in 0..7 {
        let dx = half_len * T::lit(XGK[j]);
        let pair = f(center - dx) + f(center + dx);
        kronrod = kronrod + T::lit(WGK[j]) * pair;
        if j % 2 == 1 {
            gauss = gauss + T::lit(WG[j / 2]) * pair;
        }
    }
    let value = kronrod * half_len;
    let error = ((kronrod - gauss) * half_len).abs();
    Segment { a, b, value, error }
}

/// Integrates `f` over `[a, b]`, bisecting the worst segment until the summed
/// error estimate falls below `max(tol.abs, tol.rel·|I|)`.
pub fn integrate<T: Real, F: Fn(T) -> T>(f: F, a: T, b: T, tol: Tolerance) -> Result<Integral<T>> {
    if !(a.is_finite() && b.is_finite()) {
        return Err(Error::Domain(format!("integration bounds must be finite: [{a}, {b}]")));
    }
    if a == b {
        return Ok(Integral { value: T::zero(), error: T::zero(), segments: 0 });
    }
    let mut segs = vec![gk15(&f, a, b)];
    loop {
        let total = segs.iter().fold(T::zero(), |s, g| s + g.value);
        let err = segs.iter().fold(T::zero(), |s, g| s + g.error);
        if !total.is_finite() {
            return Err(Error::Numerical(format!("non-finite integrand on [{a}, {b}]")));
        }
        let target = T::lit(tol.abs).max(T::lit(tol.rel) * total.abs());
        if err <= target || segs.len() >= tol.max_segments {
            return Ok(Integral { value: total, error: err, segments: segs.len() });
        }
        let (worst, _) = segs
            .iter()
            .enumerate()
            .fold((0, T::neg_infinity()), |(bi, be), (i, g)| if g.error > be { (i, g.error) } else { (bi, be) });
        let seg = segs.swap_remove(worst);
        let mid = T::lit(0.5) * (seg.a + seg.b);
        // Stop splitting once the segment can no longer be bisected.
        if mid <= seg.a || mid >= seg.b {
            segs.push(seg);
            let total = segs.iter().fold(T::zero(), |s, g| s + g.value);
            let err = segs.iter().fold(T::zero(), |s, g| s + g.error);
            return Ok(Integral { value: total, error: err, segments: segs.len() });
        }
        segs.push(gk15(&f, seg.a, mid));
        segs.push(gk15(&f, mid, seg.b));
    }
}

/// Trapezoid rule on an arbitrary (sorted) abscissa.
pub fn trapezoid<T: Real>(xs: &[T], ys: &[T]) -> T {
    debug_assert_eq!(xs.len(), ys.len());
    xs.windows(2)
        .zip(ys.windows(2))
        .fold(T::zero(), |acc, (x, y)| acc + T::lit(0.5) * (x[1] - x[0]) * (y[0] + y[1]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_is_exact() {
        let r = integrate(|x: f64| 3.0 * x * x - x + 2.0, -1.0, 2.0, Tolerance::default()).unwrap();
        // x^3 - x^2/2 + 2x on [-1, 2] = (8 - 2 + 4) - (-1 - 0.5 - 2) = 13.5
        assert!((r.value - 13.5).abs() < 1e-12);
    }

    #[test]
    fn gaussian_integrates_to_one() {
        let f = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let r = integrate(f, -12.0, 12.0, Tolerance::default()).unwrap();
        assert!((r.value - 1.0).abs() < 1e-13);
    }

    #[test]
    fn peaked_integrand_gets_refined() {
        let f = |x: f64| 1.0 / (1e-4 + x * x);
        let r = integrate(f, -1.0, 1.0, Tolerance::default()).unwrap();
        let exact = 2.0 * (1.0f64 / 1e-2).atan() / 1e-2;
        assert!(((r.value - exact) / exact).abs() < 1e-10);
        assert!(r.segments > 1);
    }

    #[test]
    fn works_in_single_precision() {
        let r = integrate(|x: f32| x.sin(), 0.0, std::f32::consts::PI, Tolerance { rel: 1e-6, ..Tolerance::default() })
            .unwrap();
        assert!((r.value - 2.0).abs() < 1e-5);
    }

    #[test]
    fn rejects_infinite_bounds() {
        assert!(integrate(|x: f64| x, 0.0, f64::INFINITY, Tolerance::default()).is_err());
    }

    #[test]
    fn trapezoid_is_exact_for_linear() {
        let xs = [0.0, 0.5, 2.0, 3.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        assert!((trapezoid(&xs, &ys) - 12.0).abs() < 1e-14);
    }
}
