//! Hurdle-lognormal family: densities, the debiasing transform between the
//! ideal and the prior-weighted inversion model, expectations and sampling.
//!
//! All density arithmetic happens on log values; `pdf` style functions only
//! exponentiate on the way out.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{self, Tolerance};
use crate::scalar::{half_ln_two_pi, Real};

/// Smallest admissible lognormal scale.
pub const SIGMA_MIN: f64 = 1e-3;

/// Log-axis half width (in units of the wider scale) used for numerical
/// integration of lognormal products.
pub const QUAD_HALF_WIDTH: f64 = 10.0;

fn check_sigma<T: Real>(name: &str, sigma: T) -> Result<()> {
    if !(sigma.is_finite() && sigma >= T::lit(SIGMA_MIN)) {
        return Err(Error::Domain(format!("{name} must be finite and >= {SIGMA_MIN}, got {sigma}")));
    }
    Ok(())
}

fn check_prob<T: Real>(name: &str, p: T) -> Result<()> {
    if !(p >= T::zero() && p <= T::one()) {
        return Err(Error::Domain(format!("{name} must lie in [0, 1], got {p}")));
    }
    Ok(())
}

/// Location/scale of a log-rate Gaussian.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LognormalParams<T> {
    mu: T,
    sigma: T,
}

impl<T: Real> LognormalParams<T> {
    pub fn new(mu: T, sigma: T) -> Result<Self> {
        if !mu.is_finite() {
            return Err(Error::Domain(format!("mu must be finite, got {mu}")));
        }
        check_sigma("sigma", sigma)?;
        Ok(LognormalParams { mu, sigma })
    }

    pub fn mu(&self) -> T {
        self.mu
    }

    pub fn sigma(&self) -> T {
        self.sigma
    }

    pub fn ln_pdf(&self, r: T) -> Result<T> {
        if !(r > T::zero()) {
            return Err(Error::Domain(format!("lognormal density needs r > 0, got {r}")));
        }
        Ok(self.ln_pdf_log_axis(r.ln()) - r.ln())
    }

    /// Log density of `x = ln r` (a Gaussian), without the `1/r` Jacobian.
    pub fn ln_pdf_log_axis(&self, x: T) -> T {
        let z = (x - self.mu) / self.sigma;
        -T::lit(0.5) * z * z - self.sigma.ln() - half_ln_two_pi()
    }

    pub fn pdf(&self, r: T) -> Result<T> {
        self.ln_pdf(r).map(T::exp)
    }

    /// `E[R] = exp(μ + σ²/2)`.
    pub fn mean(&self) -> T {
        (self.mu + T::lit(0.5) * self.sigma * self.sigma).exp()
    }

    pub fn median(&self) -> T {
        self.mu.exp()
    }
}

/// Marginal label distribution: dry mass `p0` plus a lognormal wet part.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginalPrior<T> {
    lmu: T,
    lsigma: T,
    p0: T,
}

impl<T: Real> MarginalPrior<T> {
    pub fn new(lmu: T, lsigma: T, p0: T) -> Result<Self> {
        if !lmu.is_finite() {
            return Err(Error::Domain(format!("lmu must be finite, got {lmu}")));
        }
        check_sigma("lsigma", lsigma)?;
        check_prob("p0", p0)?;
        Ok(MarginalPrior { lmu, lsigma, p0 })
    }

    pub fn lmu(&self) -> T {
        self.lmu
    }

    pub fn lsigma(&self) -> T {
        self.lsigma
    }

    pub fn p0(&self) -> T {
        self.p0
    }

    /// The wet-part lognormal `F(R)`.
    pub fn wet(&self) -> LognormalParams<T> {
        LognormalParams { mu: self.lmu, sigma: self.lsigma }
    }

    /// Moment estimates from a label sample: `p0` is the zero fraction, the
    /// lognormal parameters are the mean and (population) standard deviation
    /// of `ln r` over the positive labels.
    pub fn estimate(labels: &[T]) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Empty("labels"));
        }
        let mut n_wet = 0usize;
        let mut s = T::zero();
        for &r in labels {
            if r < T::zero() || !r.is_finite() {
                return Err(Error::Domain(format!("labels must be finite and >= 0, got {r}")));
            }
            if r > T::zero() {
                n_wet += 1;
                s = s + r.ln();
            }
        }
        if n_wet < 2 {
            return Err(Error::Domain("need at least two wet labels to estimate the marginal".into()));
        }
        let nw = T::from_usize_lossy(n_wet);
        let mean = s / nw;
        let ss = labels
            .iter()
            .filter(|&&r| r > T::zero())
            .fold(T::zero(), |acc, &r| acc + (r.ln() - mean).powi(2));
        let p0 = T::one() - nw / T::from_usize_lossy(labels.len());
        MarginalPrior::new(mean, (ss / nw).sqrt(), p0)
    }
}

/// Per-sample conditional hurdle parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HurdleParams<T> {
    p: T,
    dist: LognormalParams<T>,
}

impl<T: Real> HurdleParams<T> {
    pub fn new(p: T, dist: LognormalParams<T>) -> Result<Self> {
        check_prob("p", p)?;
        Ok(HurdleParams { p, dist })
    }

    pub fn from_parts(p: T, mu: T, sigma: T) -> Result<Self> {
        Self::new(p, LognormalParams::new(mu, sigma)?)
    }

    pub fn p(&self) -> T {
        self.p
    }

    pub fn dist(&self) -> LognormalParams<T> {
        self.dist
    }
}

pub fn lognormal_pdf<T: Real>(r: T, params: &LognormalParams<T>) -> Result<T> {
    params.pdf(r)
}

/// Mass at zero, density elsewhere.
pub fn hurdle_pdf<T: Real>(r: T, hp: &HurdleParams<T>) -> Result<T> {
    if r < T::zero() || r.is_nan() {
        return Err(Error::Domain(format!("hurdle density needs r >= 0, got {r}")));
    }
    if r == T::zero() {
        return Ok(hp.p);
    }
    if hp.p == T::one() {
        return Ok(T::zero());
    }
    Ok(((T::one() - hp.p).ln() + hp.dist.ln_pdf(r)?).exp())
}

/// `ln ∫₀^∞ pdf_a(r)·pdf_b(r) dr` for two lognormals, in closed form.
///
/// With `s² = σa² + σb²`, `σc² = (σa⁻² + σb⁻²)⁻¹`, `μc = σc²(μa/σa² + μb/σb²)`:
/// `−(μa−μb)²/(2s²) − ½ln(2π) − ½ln s² − μc + σc²/2`.
pub fn log_product_integral<T: Real>(a: &LognormalParams<T>, b: &LognormalParams<T>) -> T {
    let va = a.sigma * a.sigma;
    let vb = b.sigma * b.sigma;
    let s2 = va + vb;
    let vc = va * vb / s2;
    let mc = (a.mu * vb + b.mu * va) / s2;
    let d = a.mu - b.mu;
    -d * d / (T::lit(2.0) * s2) - half_ln_two_pi() - T::lit(0.5) * s2.ln() - mc + T::lit(0.5) * vc
}

/// The prior-weighted counterpart of an ideal lognormal, which is again
/// lognormal: scale `σc`, location `μc − σc²`.
pub fn debiased_lognormal<T: Real>(ideal: &LognormalParams<T>, prior: &MarginalPrior<T>) -> LognormalParams<T> {
    let va = ideal.sigma * ideal.sigma;
    let vb = prior.lsigma * prior.lsigma;
    let vc = va * vb / (va + vb);
    let mc = (ideal.mu * vb + prior.lmu * va) / (va + vb);
    LognormalParams { mu: mc - vc, sigma: vc.sqrt() }
}

/// `(1 − p)·exp(μ + σ²/2)`.
pub fn hurdle_expectation<T: Real>(hp: &HurdleParams<T>) -> T {
    (T::one() - hp.p) * hp.dist.mean()
}

/// One hurdle draw: zero with probability `p`, else `exp(μ + σz)`.
pub fn sample_hurdle<T: Real, R: Rng + ?Sized>(hp: &HurdleParams<T>, rng: &mut R) -> T {
    let u: f64 = rng.gen();
    if u < hp.p.as_f64() {
        return T::zero();
    }
    let z: f64 = StandardNormal.sample(rng);
    (hp.dist.mu + hp.dist.sigma * T::lit(z)).exp()
}

/// `n` draws from a ChaCha8 stream seeded with `seed`.
pub fn sample_hurdle_n<T: Real>(hp: &HurdleParams<T>, seed: u64, n: usize) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| sample_hurdle(hp, &mut rng)).collect()
}

/// A density on `(0, ∞)` obtained by reweighting an ideal density with a
/// prior and renormalising: `r ↦ ideal(r)·F(r) / ∫ ideal·F`.
pub struct DebiasedPdf<T, I, P> {
    ideal_ln_pdf: I,
    prior_ln_pdf: P,
    ln_norm: T,
}

impl<T: Real, I: Fn(T) -> T, P: Fn(T) -> T> DebiasedPdf<T, I, P> {
    pub fn ln_pdf(&self, r: T) -> T {
        (self.ideal_ln_pdf)(r) + (self.prior_ln_pdf)(r) - self.ln_norm
    }

    pub fn pdf(&self, r: T) -> T {
        self.ln_pdf(r).exp()
    }

    /// `ln ∫ ideal·F`.
    pub fn ln_normalizer(&self) -> T {
        self.ln_norm
    }
}

/// Integrates `exp(g(x))` over `[lo, hi]` in log space: the integrand is
/// shifted by its coarse-grid maximum before exponentiation.
pub fn log_integrate_exp<T: Real, G: Fn(T) -> T>(g: G, lo: T, hi: T) -> Result<T> {
    const COARSE: usize = 512;
    let step = (hi - lo) / T::from_usize_lossy(COARSE);
    let shift = (0..=COARSE)
        .map(|i| g(lo + step * T::from_usize_lossy(i)))
        .fold(T::neg_infinity(), T::max);
    if !shift.is_finite() {
        return Err(Error::Numerical(format!("log integrand is {shift} everywhere on [{lo}, {hi}]")));
    }
    let tol = Tolerance { abs: 1e-300, rel: 1e-13, max_segments: 4000 };
    let integral = quadrature::integrate(|x| (g(x) - shift).exp(), lo, hi, tol)?;
    if !(integral.value > T::zero()) || !integral.value.is_finite() {
        return Err(Error::Numerical(format!("integral underflowed on [{lo}, {hi}]")));
    }
    Ok(shift + integral.value.ln())
}

/// Debiasing transform with an arbitrary prior log density.
///
/// `support` is the log-rate interval `[ln r_lo, ln r_hi]` over which the
/// normaliser is integrated.
pub fn debias_transform_with<T, I, P>(ideal_ln_pdf: I, prior_ln_pdf: P, support: (T, T)) -> Result<DebiasedPdf<T, I, P>>
where
    T: Real,
    I: Fn(T) -> T,
    P: Fn(T) -> T,
{
    let (lo, hi) = support;
    let ln_norm = log_integrate_exp(
        |x: T| {
            let r = x.exp();
            ideal_ln_pdf(r) + prior_ln_pdf(r) + x
        },
        lo,
        hi,
    )?;
    Ok(DebiasedPdf { ideal_ln_pdf, prior_ln_pdf, ln_norm })
}

/// Debiasing transform against the lognormal wet marginal of `prior`,
/// integrated over `lμ ± 10·lσ` on the log-rate axis.
///
/// `ideal_ln_pdf` is a log density in the rate `r`.
pub fn debias_transform<T, I>(
    ideal_ln_pdf: I,
    prior: &MarginalPrior<T>,
) -> Result<DebiasedPdf<T, I, impl Fn(T) -> T>>
where
    T: Real,
    I: Fn(T) -> T,
{
    let wet = prior.wet();
    let half = T::lit(QUAD_HALF_WIDTH) * wet.sigma;
    let prior_ln = move |r: T| wet.ln_pdf_log_axis(r.ln()) - r.ln();
    debias_transform_with(ideal_ln_pdf, prior_ln, (wet.mu - half, wet.mu + half)).map_err(|e| {
        Error::Numerical(format!(
            "debias normaliser failed for prior (lmu={}, lsigma={}): {e}",
            prior.lmu, prior.lsigma
        ))
    })
}

/// Numerical debiasing of an ideal lognormal, integrated over `μ ± 10σ` of
/// the wider of the two components.
pub fn debias_lognormal_numeric<T: Real>(
    ideal: &LognormalParams<T>,
    prior: &MarginalPrior<T>,
) -> Result<DebiasedPdf<T, impl Fn(T) -> T, impl Fn(T) -> T>> {
    let a = *ideal;
    let b = prior.wet();
    let (center, width) = if a.sigma >= b.sigma { (a.mu, a.sigma) } else { (b.mu, b.sigma) };
    let half = T::lit(QUAD_HALF_WIDTH) * width;
    let ideal_ln = move |r: T| a.ln_pdf_log_axis(r.ln()) - r.ln();
    let prior_ln = move |r: T| b.ln_pdf_log_axis(r.ln()) - r.ln();
    debias_transform_with(ideal_ln, prior_ln, (center - half, center + half)).map_err(|e| {
        Error::Numerical(format!(
            "debias normaliser failed for ideal (mu={}, sigma={}) and prior (lmu={}, lsigma={}): {e}",
            a.mu, a.sigma, b.mu, b.sigma
        ))
    })
}

/// Multiplies a density sampled on `rates` by `exp(ln_weight(r))` and
/// renormalises with the trapezoid rule on the same grid.
pub fn reweight_grid<T: Real, W: Fn(T) -> T>(rates: &[T], density: &[T], ln_weight: W) -> Result<Vec<T>> {
    if rates.len() != density.len() {
        return Err(Error::LengthMismatch { what: "rates vs density", left: rates.len(), right: density.len() });
    }
    if rates.len() < 2 {
        return Err(Error::Empty("rate grid"));
    }
    let logs: Vec<T> = rates
        .iter()
        .zip(density)
        .map(|(&r, &d)| if d > T::zero() { d.ln() + ln_weight(r) } else { T::neg_infinity() })
        .collect();
    let shift = logs.iter().copied().fold(T::neg_infinity(), T::max);
    if !shift.is_finite() {
        return Err(Error::Numerical("reweighted density vanishes on the whole grid".into()));
    }
    let unnorm: Vec<T> = logs.iter().map(|&l| (l - shift).exp()).collect();
    let z = quadrature::trapezoid(rates, &unnorm);
    if !(z > T::zero()) {
        return Err(Error::Numerical("reweighted density has zero mass on the grid".into()));
    }
    Ok(unnorm.into_iter().map(|u| u / z).collect())
}

/// Grid version of [`debias_transform`]: weights by the lognormal marginal.
pub fn debias_grid<T: Real>(rates: &[T], ideal_density: &[T], prior: &MarginalPrior<T>) -> Result<Vec<T>> {
    let wet = prior.wet();
    reweight_grid(rates, ideal_density, |r| wet.ln_pdf_log_axis(r.ln()) - r.ln())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ln(mu: f64, sigma: f64) -> LognormalParams<f64> {
        LognormalParams::new(mu, sigma).unwrap()
    }

    #[test]
    fn pdf_at_one_is_inverse_sqrt_two_pi() {
        let v = lognormal_pdf(1.0, &ln(0.0, 1.0)).unwrap();
        assert!((v - 0.398_942_280_401_432_7).abs() < 1e-15);
    }

    #[test]
    fn pdf_at_median_with_marginal_defaults() {
        let r = 0.46f64.exp();
        let v = lognormal_pdf(r, &ln(0.46, 1.28)).unwrap();
        let expected = 1.0 / (r * 1.28 * (2.0 * std::f64::consts::PI).sqrt());
        assert!((v - expected).abs() < 1e-15);
    }

    #[test]
    fn domain_errors() {
        assert!(lognormal_pdf(0.0, &ln(0.0, 1.0)).is_err());
        assert!(lognormal_pdf(-1.0, &ln(0.0, 1.0)).is_err());
        assert!(LognormalParams::new(0.0, 0.0).is_err());
        assert!(LognormalParams::new(0.0, 1e-4).is_err());
        assert!(LognormalParams::new(f64::NAN, 1.0).is_err());
        assert!(HurdleParams::from_parts(1.2, 0.0, 1.0).is_err());
        assert!(MarginalPrior::new(0.0, 1.0, -0.1).is_err());
        let hp = HurdleParams::from_parts(0.3, 0.0, 1.0).unwrap();
        assert!(hurdle_pdf(-0.5, &hp).is_err());
    }

    #[test]
    fn hurdle_branches() {
        let hp = HurdleParams::from_parts(0.3, 0.0, 1.0).unwrap();
        assert_eq!(hurdle_pdf(0.0, &hp).unwrap(), 0.3);
        let all_dry = HurdleParams::from_parts(1.0, 0.0, 1.0).unwrap();
        assert_eq!(hurdle_pdf(2.5, &all_dry).unwrap(), 0.0);
        let half = HurdleParams::from_parts(0.5, 0.0, 1.0).unwrap();
        assert!((hurdle_pdf(1.0f64, &half).unwrap() - 0.199_471_140_200_716_35).abs() < 1e-15);
    }

    #[test]
    fn log_product_integral_standard_pair() {
        let a = ln(0.0, 1.0);
        let v = log_product_integral(&a, &a);
        let expected = 0.25 - 0.5 * 2f64.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((v - expected).abs() < 1e-14);
        assert!((v + 1.0155).abs() < 1e-4);
    }

    #[test]
    fn log_product_integral_is_symmetric() {
        let a = ln(-0.7, 0.3);
        let b = ln(1.9, 1.7);
        assert_eq!(log_product_integral(&a, &b), log_product_integral(&b, &a));
    }

    #[test]
    fn expectation_edges() {
        let dry = HurdleParams::from_parts(1.0, 3.0, 0.5).unwrap();
        assert_eq!(hurdle_expectation(&dry), 0.0);
        // Narrowest admissible scale: a near point mass at r = e^0 = 1.
        let point = HurdleParams::from_parts(0.0, 0.0, SIGMA_MIN).unwrap();
        assert!((hurdle_expectation(&point) - 1.0).abs() < 1e-6);
        let hp = HurdleParams::from_parts(0.5, 0.0, 0.5).unwrap();
        assert!((hurdle_expectation(&hp) - 0.5 * 0.125f64.exp()).abs() < 1e-15);
    }

    #[test]
    fn sampler_is_deterministic_and_respects_all_dry() {
        let hp = HurdleParams::from_parts(0.4, 0.2, 0.9).unwrap();
        assert_eq!(sample_hurdle_n(&hp, 9, 100), sample_hurdle_n(&hp, 9, 100));
        let dry = HurdleParams::from_parts(1.0, 0.2, 0.9).unwrap();
        assert!(sample_hurdle_n(&dry, 3, 1000).iter().all(|&r| r == 0.0));
    }

    #[test]
    fn debiased_lognormal_matches_numeric_transform() {
        let ideal = ln(0.3, 0.8);
        let prior = MarginalPrior::new(0.46, 1.28, 0.2).unwrap();
        let closed = debiased_lognormal(&ideal, &prior);
        let numeric = debias_lognormal_numeric(&ideal, &prior).unwrap();
        for r in [0.05, 0.3, 1.0, 4.0, 20.0] {
            let a = closed.pdf(r).unwrap();
            let b = numeric.pdf(r);
            assert!((a - b).abs() < 1e-10, "r={r}: {a} vs {b}");
        }
        assert!((numeric.ln_normalizer() - log_product_integral(&ideal, &prior.wet())).abs() < 1e-10);
    }

    #[test]
    fn underflowing_normaliser_reports_parameters() {
        let prior = MarginalPrior::new(0.0, 1.0, 0.2).unwrap();
        let err = match debias_transform(|_r: f64| f64::NEG_INFINITY, &prior) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("expected failure"),
        };
        assert!(err.contains("lmu=0") && err.contains("lsigma=1"), "{err}");
    }

    #[test]
    fn prior_estimate_recovers_moments() {
        let labels = [0.0, 0.0, 1.0, std::f64::consts::E, 1.0, std::f64::consts::E];
        let p = MarginalPrior::estimate(&labels).unwrap();
        assert!((p.p0() - 1.0 / 3.0).abs() < 1e-15);
        assert!((p.lmu() - 0.5).abs() < 1e-15);
        assert!((p.lsigma() - 0.5).abs() < 1e-15);
        assert!(MarginalPrior::<f64>::estimate(&[]).is_err());
    }
}
