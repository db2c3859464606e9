//! Training objectives.
//!
//! The hurdle negative log-likelihood splits into four per-sample terms:
//! `dry = −ln p` on zero labels, `wet = −ln(1−p)` on positive labels, the
//! lognormal term `(ln y − μ)²/(2σ²) + ln σ`, and the correction term that
//! accounts for the marginal prior (the log of the debiasing normaliser, up
//! to the constant `½ln(2π)`). Dropping the correction term gives the plain
//! hurdle-lognormal likelihood.
//!
//! The weighted MSE baselines regress the raw label, zeros included.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hurdle_dist::MarginalPrior;
use crate::scalar::{pairwise_sum, Real};

/// Clamp margin for the dry probability inside log terms.
pub const P_EPS: f64 = 1e-7;

pub fn clamp_p<T: Real>(p: T) -> T {
    p.max(T::lit(P_EPS)).min(T::one() - T::lit(P_EPS))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NllTerms<T> {
    pub dry: T,
    pub wet: T,
    pub lognorm: T,
    pub corr: T,
    pub total: T,
}

impl<T: Real> NllTerms<T> {
    /// Total with the correction term removed (plain hurdle likelihood).
    pub fn total_without_corr(&self) -> T {
        self.total - self.corr
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossGrad<T> {
    pub d_p: T,
    pub d_mu: T,
}

fn check_label<T: Real>(label: T) -> Result<()> {
    if !(label >= T::zero() && label.is_finite()) {
        return Err(Error::Domain(format!("label must be finite and >= 0, got {label}")));
    }
    Ok(())
}

fn check_sigma<T: Real>(sigma: T) -> Result<()> {
    if !(sigma > T::zero() && sigma.is_finite()) {
        return Err(Error::Domain(format!("sigma must be positive, got {sigma}")));
    }
    Ok(())
}

/// Correction term for a positive label.
pub fn corr_term<T: Real>(mu: T, sigma: T, prior: &MarginalPrior<T>) -> T {
    let (lmu, ls2) = (prior.lmu(), prior.lsigma() * prior.lsigma());
    let s2 = sigma * sigma;
    let two = T::lit(2.0);
    let num = lmu * lmu + mu * mu + ls2 * (two * mu - s2) + two * lmu * (s2 - mu);
    -num / (two * (ls2 + s2)) - T::lit(0.5) * (ls2 + s2).ln()
}

pub fn nll_terms<T: Real>(label: T, p: T, mu: T, sigma: T, prior: &MarginalPrior<T>) -> Result<NllTerms<T>> {
    check_label(label)?;
    check_sigma(sigma)?;
    let p = clamp_p(p);
    let mut t = NllTerms::default();
    if label == T::zero() {
        t.dry = -p.ln();
    } else {
        t.wet = -(T::one() - p).ln();
        let z = label.ln() - mu;
        t.lognorm = z * z / (T::lit(2.0) * sigma * sigma) + sigma.ln();
        t.corr = corr_term(mu, sigma, prior);
    }
    t.total = t.dry + t.wet + t.lognorm + t.corr;
    Ok(t)
}

/// Closed-form partial derivatives of [`nll_terms`]`.total`.
pub fn nll_grad<T: Real>(label: T, p: T, mu: T, sigma: T, prior: &MarginalPrior<T>) -> Result<LossGrad<T>> {
    check_label(label)?;
    check_sigma(sigma)?;
    let p = clamp_p(p);
    if label == T::zero() {
        return Ok(LossGrad { d_p: -T::one() / p, d_mu: T::zero() });
    }
    let ls2 = prior.lsigma() * prior.lsigma();
    let s2 = sigma * sigma;
    let d_mu = -(label.ln() - mu) / s2 - (mu + ls2 - prior.lmu()) / (ls2 + s2);
    Ok(LossGrad { d_p: T::one() / (T::one() - p), d_mu })
}

/// Which parts of the hurdle likelihood an objective keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HurdlePart {
    /// All four terms.
    Full,
    /// `dry + wet` only: the occurrence model of the two-model scheme.
    Occurrence,
    /// `lognorm (+ corr)` only, on wet samples: the intensity model.
    Intensity,
}

/// Loss and gradient contribution of one sample under a hurdle objective,
/// honouring the IMDL switch and the part selection.
pub fn hurdle_sample<T: Real>(
    label: T,
    p: T,
    mu: T,
    sigma: T,
    prior: &MarginalPrior<T>,
    imdl: bool,
    part: HurdlePart,
) -> Result<(T, LossGrad<T>)> {
    let terms = nll_terms(label, p, mu, sigma, prior)?;
    let mut grad = nll_grad(label, p, mu, sigma, prior)?;
    let wet = label > T::zero();
    if !imdl && wet {
        let ls2 = prior.lsigma() * prior.lsigma();
        grad.d_mu = grad.d_mu + (mu + ls2 - prior.lmu()) / (ls2 + sigma * sigma);
    }
    // The ablated loss is formed by subtracting the correction so that
    // `with − corr == without` holds bit for bit.
    let strip = |with_corr: T| if imdl { with_corr } else { with_corr - terms.corr };
    let loss = match part {
        HurdlePart::Full => strip(terms.total),
        HurdlePart::Occurrence => {
            grad.d_mu = T::zero();
            terms.dry + terms.wet
        }
        HurdlePart::Intensity => {
            grad.d_p = T::zero();
            strip(terms.lognorm + terms.corr)
        }
    };
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNll<T> {
    pub mean_total: T,
    pub mean_grad: LossGrad<T>,
    /// Per-sample gradients divided by the batch size.
    pub grads: Vec<LossGrad<T>>,
}

/// Sorts before pairwise summation so the result does not depend on the
/// order of the batch.
fn order_free_mean<T: Real>(mut xs: Vec<T>) -> T {
    let n = T::from_usize_lossy(xs.len());
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    pairwise_sum(&xs) / n
}

/// Mean NLL and mean gradients over a batch of `(p, μ)` predictions.
pub fn batch_nll<T: Real>(labels: &[T], params: &[(T, T)], sigma: T, prior: &MarginalPrior<T>) -> Result<BatchNll<T>> {
    if labels.is_empty() {
        return Err(Error::Empty("batch"));
    }
    if labels.len() != params.len() {
        return Err(Error::LengthMismatch { what: "labels vs params", left: labels.len(), right: params.len() });
    }
    let n = T::from_usize_lossy(labels.len());
    let mut totals = Vec::with_capacity(labels.len());
    let mut grads = Vec::with_capacity(labels.len());
    for (&y, &(p, mu)) in labels.iter().zip(params) {
        totals.push(nll_terms(y, p, mu, sigma, prior)?.total);
        let g = nll_grad(y, p, mu, sigma, prior)?;
        grads.push(LossGrad { d_p: g.d_p / n, d_mu: g.d_mu / n });
    }
    let mean_grad = LossGrad {
        d_p: order_free_mean(grads.iter().map(|g| g.d_p * n).collect()),
        d_mu: order_free_mean(grads.iter().map(|g| g.d_mu * n).collect()),
    };
    Ok(BatchNll { mean_total: order_free_mean(totals), mean_grad, grads })
}

/// Number of logarithmic bins for the inverse-frequency weights.
pub const NWMSE_BINS: usize = 30;
/// Cap applied to inverse-frequency weights before normalisation.
pub const NWMSE_W_MAX: f64 = 100.0;

/// Inverse-frequency weight table fitted on training labels. Zero labels have
/// their own bin; positive labels fall into `NWMSE_BINS` equal-width bins of
/// `ln r` between the smallest and largest positive training label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyTable<T> {
    pub ln_lo: T,
    pub ln_hi: T,
    pub zero_weight: T,
    pub bin_weights: Vec<T>,
}

impl<T: Real> FrequencyTable<T> {
    pub fn fit(labels: &[T]) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Empty("labels"));
        }
        for &y in labels {
            check_label(y)?;
        }
        let wet: Vec<T> = labels.iter().copied().filter(|&y| y > T::zero()).map(T::ln).collect();
        let (ln_lo, ln_hi) = wet
            .iter()
            .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &x| (lo.min(x), hi.max(x)));
        let (ln_lo, ln_hi) = if wet.is_empty() { (T::zero(), T::one()) } else { (ln_lo, ln_hi) };
        let mut table = FrequencyTable { ln_lo, ln_hi, zero_weight: T::one(), bin_weights: vec![T::one(); NWMSE_BINS] };
        let mut counts = vec![0usize; NWMSE_BINS];
        let mut zeros = 0usize;
        for &y in labels {
            match table.bin(y) {
                None => zeros += 1,
                Some(b) => counts[b] += 1,
            }
        }
        let n = T::from_usize_lossy(labels.len());
        let cap = T::lit(NWMSE_W_MAX);
        let inv = |c: usize| if c == 0 { cap } else { (n / T::from_usize_lossy(c)).min(cap) };
        table.zero_weight = inv(zeros);
        table.bin_weights = counts.iter().map(|&c| inv(c)).collect();
        let mean = (table.zero_weight * T::from_usize_lossy(zeros)
            + counts
                .iter()
                .zip(&table.bin_weights)
                .fold(T::zero(), |a, (&c, &w)| a + w * T::from_usize_lossy(c)))
            / n;
        table.zero_weight = table.zero_weight / mean;
        for w in &mut table.bin_weights {
            *w = *w / mean;
        }
        Ok(table)
    }

    /// `None` for zero labels.
    fn bin(&self, y: T) -> Option<usize> {
        if y <= T::zero() {
            return None;
        }
        let width = (self.ln_hi - self.ln_lo).max(T::lit(1e-12));
        let pos = ((y.ln() - self.ln_lo) / width * T::from_usize_lossy(NWMSE_BINS)).floor();
        let idx = pos.max(T::zero()).to_usize().unwrap_or(0);
        Some(idx.min(NWMSE_BINS - 1))
    }

    pub fn weight(&self, y: T) -> T {
        match self.bin(y) {
            None => self.zero_weight,
            Some(b) => self.bin_weights[b],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightScheme<T> {
    Omse,
    Lwmse { beta: T },
    Nwmse { table: Option<FrequencyTable<T>> },
}

impl<T: Real> WeightScheme<T> {
    pub fn lwmse_default() -> Self {
        WeightScheme::Lwmse { beta: T::one() }
    }

    pub fn weight(&self, label: T) -> Result<T> {
        match self {
            WeightScheme::Omse => Ok(T::one()),
            WeightScheme::Lwmse { beta } => Ok(T::one() + *beta * label),
            WeightScheme::Nwmse { table: Some(t) } => Ok(t.weight(label)),
            WeightScheme::Nwmse { table: None } => Err(Error::UnfittedWeights),
        }
    }

    /// Fits the frequency table for `Nwmse`; other schemes are unchanged.
    pub fn fitted(self, train_labels: &[T]) -> Result<Self> {
        match self {
            WeightScheme::Nwmse { .. } => Ok(WeightScheme::Nwmse { table: Some(FrequencyTable::fit(train_labels)?) }),
            other => Ok(other),
        }
    }
}

/// `w(label)·(pred − label)²` and its derivative in `pred`.
pub fn weighted_mse<T: Real>(prediction: T, label: T, scheme: &WeightScheme<T>) -> Result<(T, T)> {
    check_label(label)?;
    let w = scheme.weight(label)?;
    if !(w > T::zero() && w.is_finite()) {
        return Err(Error::Domain(format!("weight must be finite and positive, got {w}")));
    }
    let d = prediction - label;
    Ok((w * d * d, T::lit(2.0) * w * d))
}
