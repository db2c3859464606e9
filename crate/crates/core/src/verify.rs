//! Graded verification: per-threshold confusion counts, categorical scores
//! (POD, FAR, ETS) and continuous errors (RMSE, ME).
//!
//! A sample is an event at threshold `t` when its value is `>= t`. RMSE and ME
//! at `t` are computed over samples whose *observation* is `>= t`. Scores with
//! a zero denominator are `None`, never zero.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{pairwise_sum, Real};

/// Rain-rate thresholds in mm/h.
pub const DEFAULT_THRESHOLDS: [f64; 12] = [0.0, 0.1, 0.5, 1.0, 2.0, 3.0, 5.0, 7.0, 10.0, 15.0, 20.0, 30.0];

/// Column order of [`GradedReport::to_csv`].
pub const CSV_COLUMNS: [&str; 12] =
    ["threshold", "n_grade", "tp", "fp", "fn", "tn", "rmse", "me", "pod", "far", "ets", "bias"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeThresholds<T>(Vec<T>);

impl<T: Real> GradeThresholds<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("thresholds"));
        }
        if values.iter().any(|v| !v.is_finite()) || values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Domain("thresholds must be finite and strictly increasing".into()));
        }
        Ok(GradeThresholds(values))
    }

    pub fn values(&self) -> &[T] {
        &self.0
    }
}

impl<T: Real> Default for GradeThresholds<T> {
    fn default() -> Self {
        GradeThresholds(DEFAULT_THRESHOLDS.iter().map(|&v| T::lit(v)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn n(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// `TP / (TP + FN)`.
    pub fn pod(&self) -> Option<f64> {
        ratio(self.tp as f64, (self.tp + self.fn_) as f64)
    }

    /// `FP / (FP + TN)`.
    pub fn far(&self) -> Option<f64> {
        ratio(self.fp as f64, (self.fp + self.tn) as f64)
    }

    /// Equitable threat score with `hits_random = (TP+FP)(TP+FN)/n`.
    pub fn ets(&self) -> Option<f64> {
        let n = self.n();
        if n == 0 {
            return None;
        }
        let (tp, fp, fn_) = (self.tp as f64, self.fp as f64, self.fn_ as f64);
        let hits_random = (tp + fp) * (tp + fn_) / n as f64;
        ratio(tp - hits_random, tp + fp + fn_ - hits_random)
    }

    /// Frequency bias `(TP + FP) / (TP + FN)`.
    pub fn bias(&self) -> Option<f64> {
        ratio((self.tp + self.fp) as f64, (self.tp + self.fn_) as f64)
    }
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den != 0.0).then(|| num / den)
}

fn check_aligned<T: Real>(retrievals: &[T], observations: &[T]) -> Result<()> {
    if retrievals.len() != observations.len() {
        return Err(Error::LengthMismatch {
            what: "retrievals vs observations",
            left: retrievals.len(),
            right: observations.len(),
        });
    }
    Ok(())
}

pub fn confusion<T: Real>(retrievals: &[T], observations: &[T], threshold: T) -> Result<ConfusionCounts> {
    check_aligned(retrievals, observations)?;
    let mut c = ConfusionCounts::default();
    for (&r, &o) in retrievals.iter().zip(observations) {
        match (r >= threshold, o >= threshold) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradeErrors<T> {
    pub rmse: T,
    /// Mean of `retrieval − observation`; negative means underestimation.
    pub me: T,
    pub n: usize,
}

/// RMSE and ME over samples with `observation >= threshold`; `None` when the
/// grade is empty.
pub fn graded_errors<T: Real>(retrievals: &[T], observations: &[T], threshold: T) -> Result<Option<GradeErrors<T>>> {
    check_aligned(retrievals, observations)?;
    let mut residuals: Vec<T> = retrievals
        .iter()
        .zip(observations)
        .filter(|(_, &o)| o >= threshold)
        .map(|(&r, &o)| r - o)
        .collect();
    if residuals.is_empty() {
        return Ok(None);
    }
    // Sorted so the sums do not depend on sample order.
    residuals.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = T::from_usize_lossy(residuals.len());
    let me = pairwise_sum(&residuals) / n;
    let mut sq: Vec<T> = residuals.iter().map(|&d| d * d).collect();
    sq.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let rmse = (pairwise_sum(&sq) / n).sqrt();
    Ok(Some(GradeErrors { rmse, me, n: residuals.len() }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeRow {
    pub threshold: f64,
    /// Samples with observation >= threshold.
    pub n_grade: usize,
    pub counts: ConfusionCounts,
    pub rmse: Option<f64>,
    pub me: Option<f64>,
    pub pod: Option<f64>,
    pub far: Option<f64>,
    pub ets: Option<f64>,
    pub bias: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradedReport {
    pub n_samples: usize,
    pub rows: Vec<GradeRow>,
}

pub fn full_report<T: Real>(retrievals: &[T], observations: &[T], thresholds: &GradeThresholds<T>) -> Result<GradedReport> {
    check_aligned(retrievals, observations)?;
    let rows = thresholds
        .values()
        .iter()
        .map(|&th| {
            let counts = confusion(retrievals, observations, th)?;
            let errs = graded_errors(retrievals, observations, th)?;
            Ok(GradeRow {
                threshold: th.as_f64(),
                n_grade: errs.map_or(0, |e| e.n),
                counts,
                rmse: errs.map(|e| e.rmse.as_f64()),
                me: errs.map(|e| e.me.as_f64()),
                pod: counts.pod(),
                far: counts.far(),
                ets: counts.ets(),
                bias: counts.bias(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradedReport { n_samples: retrievals.len(), rows })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.17e}")).unwrap_or_default()
}

impl GradeRow {
    /// The row in [`CSV_COLUMNS`] order, without a line terminator.
    pub fn csv_fields(&self) -> String {
        let c = self.counts;
        let mut out = String::new();
        let _ = write!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.threshold,
            self.n_grade,
            c.tp,
            c.fp,
            c.fn_,
            c.tn,
            opt(self.rmse),
            opt(self.me),
            opt(self.pod),
            opt(self.far),
            opt(self.ets),
            opt(self.bias)
        );
        out
    }
}

impl GradedReport {
    pub fn row(&self, threshold: f64) -> Option<&GradeRow> {
        self.rows.iter().find(|r| r.threshold == threshold)
    }

    /// Highest threshold with at least one observed event.
    pub fn top_populated(&self) -> Option<&GradeRow> {
        self.rows.iter().rev().find(|r| r.n_grade > 0)
    }

    /// One header line plus one line per threshold; missing scores are empty
    /// fields.
    pub fn to_csv(&self) -> String {
        let mut out = CSV_COLUMNS.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.csv_fields());
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_forecast_counts() {
        let obs = [0.0, 0.2, 3.0, 11.0];
        let c = confusion(&obs, &obs, 0.1).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        assert_eq!(c.pod(), Some(1.0));
        assert_eq!(c.far(), Some(0.0));
        assert_eq!(c.ets(), Some(1.0));
    }

    #[test]
    fn all_dry_retrieval_against_all_wet() {
        let obs = [1.0, 2.0, 0.5];
        let ret = [0.0; 3];
        let c = confusion(&ret, &obs, 0.1).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 0, fp: 0, fn_: 3, tn: 0 });
        assert_eq!(c.far(), None);
    }

    #[test]
    fn pod_from_counts() {
        let c = ConfusionCounts { tp: 8, fp: 1, fn_: 2, tn: 9 };
        assert!((c.pod().unwrap() - 0.8).abs() < 1e-15);
        assert!((c.far().unwrap() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn zero_denominators_are_missing() {
        let c = ConfusionCounts::default();
        assert_eq!((c.pod(), c.far(), c.ets()), (None, None, None));
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(confusion(&[1.0], &[1.0, 2.0], 0.5).is_err());
        assert!(graded_errors(&[1.0], &[], 0.5).is_err());
    }

    #[test]
    fn offsets_and_empty_grades() {
        let obs = [1.0, 2.0, 5.0];
        let ret: Vec<f64> = obs.iter().map(|o| o + 0.5).collect();
        let e = graded_errors(&ret, &obs, 0.0).unwrap().unwrap();
        assert!((e.me - 0.5).abs() < 1e-15 && (e.rmse - 0.5).abs() < 1e-15);
        assert!(graded_errors(&ret, &obs, 100.0).unwrap().is_none());
    }

    #[test]
    fn thresholds_validation() {
        assert_eq!(GradeThresholds::<f64>::default().values().len(), 12);
        assert!(GradeThresholds::new(vec![0.0, 1.0, 1.0]).is_err());
        assert!(GradeThresholds::<f64>::new(vec![]).is_err());
    }

    #[test]
    fn csv_layout() {
        let obs = [0.0, 0.3, 12.0];
        let rep = full_report(&obs, &obs, &GradeThresholds::default()).unwrap();
        let csv = rep.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 13);
        assert_eq!(lines[0], CSV_COLUMNS.join(","));
        assert!(lines.iter().all(|l| l.split(',').count() == CSV_COLUMNS.len()));
        let back: GradedReport = serde_json::from_str(&rep.to_json()).unwrap();
        assert_eq!(back, rep);
    }
}
