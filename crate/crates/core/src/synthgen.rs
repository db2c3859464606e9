//! Synthetic zero-inflated, long-tailed retrieval problems.
//!
//! Labels follow the hurdle-lognormal marginal. Wet samples produce signals
//! `S_c = gain_c · ln(1 + R) + ε`, `ε ~ N(0, noise_sigma²)`; dry samples draw
//! each channel from `N(dry_signal_mu_c, dry_signal_sigma²)`. Because the
//! forward model is known, the posterior of `R` given a signal can be
//! evaluated on a rate grid, both under a flat rate prior (the ideal
//! inversion model) and under the lognormal marginal (the biased one).

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hurdle_dist::MarginalPrior;
use crate::quadrature::trapezoid;

/// Marginal log-rate location and scale of the reference training data.
pub const DEFAULT_LMU: f64 = 0.46;
pub const DEFAULT_LSIGMA: f64 = 1.28;
/// Dry probability giving a wet:dry ratio of 3.6:1.
pub const DEFAULT_P0: f64 = 1.0 / 4.6;

pub const GRID_POINTS: usize = 2048;

pub fn default_prior() -> MarginalPrior<f64> {
    MarginalPrior::new(DEFAULT_LMU, DEFAULT_LSIGMA, DEFAULT_P0).expect("default prior is valid")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardModel {
    /// Signal change per unit of `ln(1 + R)`, one entry per channel.
    pub gains: Vec<f64>,
    /// Mean dry signal per channel.
    pub dry_signal_mu: Vec<f64>,
    pub dry_signal_sigma: f64,
    pub noise_sigma: f64,
}

impl Default for ForwardModel {
    fn default() -> Self {
        Self::single_channel()
    }
}

impl ForwardModel {
    /// Dry signals are centred on the signal of a 0.1 mm/h rain rate.
    pub fn with_gains(gains: Vec<f64>, noise_sigma: f64) -> Self {
        let dry_signal_mu = gains.iter().map(|g| g * 0.1f64.ln_1p()).collect();
        ForwardModel { gains, dry_signal_mu, dry_signal_sigma: noise_sigma, noise_sigma }
    }

    /// One channel, gain −10, noise 9.
    pub fn single_channel() -> Self {
        Self::with_gains(vec![-10.0], 9.0)
    }

    /// Six channels with distinct gains.
    pub fn six_channel() -> Self {
        Self::with_gains(vec![-10.0, -7.0, -5.0, -4.0, -3.0, -2.0], 9.0)
    }

    pub fn channels(&self) -> usize {
        self.gains.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.gains.is_empty() {
            return Err(Error::Config("forward model needs at least one channel".into()));
        }
        if self.dry_signal_mu.len() != self.gains.len() {
            return Err(Error::Config("dry_signal_mu must have one entry per channel".into()));
        }
        if !(self.noise_sigma > 0.0 && self.dry_signal_sigma > 0.0) {
            return Err(Error::Config("noise_sigma and dry_signal_sigma must be positive".into()));
        }
        if self.gains.iter().chain(&self.dry_signal_mu).any(|v| !v.is_finite()) {
            return Err(Error::Config("forward model parameters must be finite".into()));
        }
        Ok(())
    }

    /// Noise-free wet signal.
    pub fn mean_signal(&self, rate: f64) -> impl Iterator<Item = f64> + '_ {
        let x = rate.ln_1p();
        self.gains.iter().map(move |g| g * x)
    }

    /// `ln F(signal | R = rate)` for `rate > 0`, up to a constant.
    pub fn log_likelihood(&self, signal: &[f64], rate: f64) -> f64 {
        let inv = 1.0 / (2.0 * self.noise_sigma * self.noise_sigma);
        -self.mean_signal(rate).zip(signal).map(|(m, s)| (s - m) * (s - m)).sum::<f64>() * inv
    }

    fn draw<R: Rng>(&self, rate: f64, rng: &mut R, out: &mut Vec<f64>) {
        if rate > 0.0 {
            for m in self.mean_signal(rate) {
                let z: f64 = StandardNormal.sample(rng);
                out.push(m + self.noise_sigma * z);
            }
        } else {
            for &m in &self.dry_signal_mu {
                let z: f64 = StandardNormal.sample(rng);
                out.push(m + self.dry_signal_sigma * z);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u8 {
        self as u8
    }

    fn from_tag(t: u8) -> Result<Self> {
        Split::ALL.get(t as usize).copied().ok_or_else(|| Error::Corrupt(format!("unknown split tag {t}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Row-major `n × channels`.
    pub features: Vec<f64>,
    /// Rain rate in mm/h; zero marks a dry sample.
    pub labels: Vec<f64>,
    pub channels: usize,
    pub split: Split,
    pub seed: u64,
    /// Prior the labels were drawn from.
    pub prior: MarginalPrior<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.channels..(i + 1) * self.channels]
    }
}

/// Draws `n` samples; the stream is a pure function of `seed`.
pub fn generate(prior: &MarginalPrior<f64>, fm: &ForwardModel, n: usize, seed: u64) -> Result<Dataset> {
    generate_split(prior, fm, n, seed, Split::Train)
}

pub fn generate_split(prior: &MarginalPrior<f64>, fm: &ForwardModel, n: usize, seed: u64, split: Split) -> Result<Dataset> {
    fm.validate()?;
    if n == 0 {
        return Err(Error::Empty("sample count"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(n * fm.channels());
    let mut labels = Vec::with_capacity(n);
    let (p0, lmu, lsigma) = (prior.p0(), prior.lmu(), prior.lsigma());
    for _ in 0..n {
        let u: f64 = rng.gen();
        let rate = if u < p0 {
            0.0
        } else {
            let z: f64 = StandardNormal.sample(&mut rng);
            (lmu + lsigma * z).exp()
        };
        fm.draw(rate, &mut rng, &mut features);
        labels.push(rate);
    }
    Ok(Dataset { features, labels, channels: fm.channels(), split, seed, prior: *prior })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    pub const STANDARD: SplitSizes = SplitSizes { train: 200_000, val: 25_000, test: 25_000 };

    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

/// Generator parameters recorded next to the binary split files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub prior: MarginalPrior<f64>,
    pub forward_model: ForwardModel,
    pub seed: u64,
    pub sizes: SplitSizes,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub meta: DatasetMeta,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

fn split_seed(seed: u64, split: Split) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(split.tag() as u64 + 1)
}

/// Three independent streams derived from one seed.
pub fn generate_splits(meta: &DatasetMeta) -> Result<Splits> {
    let make = |s: Split| generate_split(&meta.prior, &meta.forward_model, meta.sizes.get(s), split_seed(meta.seed, s), s);
    Ok(Splits { meta: meta.clone(), train: make(Split::Train)?, val: make(Split::Val)?, test: make(Split::Test)? })
}

const DATASET_MAGIC: [u8; 8] = *b"HIMDLDS\0";
const DATASET_VERSION: u32 = 1;

impl Dataset {
    /// Columnar binary: magic, version, split tag, channels, n, seed, prior,
    /// then one f64 column per channel followed by the label column.
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.len();
        let mut out = Vec::with_capacity(48 + 8 * n * (self.channels + 1));
        out.extend_from_slice(&DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.push(self.split.tag());
        out.extend_from_slice(&(self.channels as u32).to_le_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        for v in [self.prior.lmu(), self.prior.lsigma(), self.prior.p0()] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for c in 0..self.channels {
            for i in 0..n {
                out.extend_from_slice(&self.features[i * self.channels + c].to_le_bytes());
            }
        }
        for y in &self.labels {
            out.extend_from_slice(&y.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |k: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + k).ok_or_else(|| Error::Corrupt(format!("dataset truncated at byte {pos}")))?;
            pos += k;
            Ok(s)
        };
        if take(8)? != DATASET_MAGIC {
            return Err(Error::Corrupt("bad dataset magic".into()));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != DATASET_VERSION {
            return Err(Error::Version { found: version, expected: DATASET_VERSION });
        }
        let split = Split::from_tag(take(1)?[0])?;
        let channels = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let n = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let seed = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let mut f = |k: usize| -> Result<Vec<f64>> {
            let raw = take(k.checked_mul(8).ok_or_else(|| Error::Corrupt("size overflow".into()))?)?;
            Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
        };
        let p = f(3)?;
        let prior = MarginalPrior::new(p[0], p[1], p[2]).map_err(|e| Error::Corrupt(format!("prior: {e}")))?;
        let columns = f(n * channels)?;
        let labels = f(n)?;
        if pos != bytes.len() {
            return Err(Error::Corrupt("trailing bytes after dataset".into()));
        }
        let mut features = vec![0.0; n * channels];
        for c in 0..channels {
            for i in 0..n {
                features[i * channels + c] = columns[c * n + i];
            }
        }
        Ok(Dataset { features, labels, channels, split, seed, prior })
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

pub const META_FILE: &str = "dataset.json";

pub fn split_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.bin", split.name()))
}

impl Splits {
    /// Writes `train.bin`, `val.bin`, `test.bin` and the `dataset.json` sidecar.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for d in [&self.train, &self.val, &self.test] {
            write_file(&split_path(dir, d.split), &d.to_bytes())?;
        }
        let meta = serde_json::to_string_pretty(&self.meta).expect("metadata serialises");
        write_file(&dir.join(META_FILE), meta.as_bytes())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_path = dir.join(META_FILE);
        let meta: DatasetMeta = serde_json::from_slice(&read_file(&meta_path)?)
            .map_err(|e| Error::Corrupt(format!("{}: {e}", meta_path.display())))?;
        let load = |s: Split| -> Result<Dataset> {
            let d = Dataset::from_bytes(&read_file(&split_path(dir, s))?)?;
            if d.split != s || d.len() != meta.sizes.get(s) || d.channels != meta.forward_model.channels() {
                return Err(Error::Corrupt(format!("{} split does not match {META_FILE}", s.name())));
            }
            Ok(d)
        };
        Ok(Splits { train: load(Split::Train)?, val: load(Split::Val)?, test: load(Split::Test)?, meta })
    }
}

/// Log-spaced rate abscissa.
#[derive(Debug, Clone, PartialEq)]
pub struct RateGrid {
    rates: Vec<f64>,
}

impl RateGrid {
    pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if !(lo > 0.0 && hi > lo && n >= 2) {
            return Err(Error::Domain(format!("bad rate grid [{lo}, {hi}] with {n} points")));
        }
        let (a, b) = (lo.ln(), hi.ln());
        let step = (b - a) / (n - 1) as f64;
        Ok(RateGrid { rates: (0..n).map(|i| (a + step * i as f64).exp()).collect() })
    }

    /// `[e^{lμ−6lσ}, e^{lμ+6lσ}]` with [`GRID_POINTS`] points.
    pub fn for_prior(prior: &MarginalPrior<f64>) -> Self {
        let (m, s) = (prior.lmu(), prior.lsigma());
        Self::log_spaced((m - 6.0 * s).exp(), (m + 6.0 * s).exp(), GRID_POINTS).expect("prior grid is valid")
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn covers(&self, prior: &MarginalPrior<f64>) -> bool {
        let (m, s) = (prior.lmu(), prior.lsigma());
        let tol = 1e-9;
        self.rates[0] <= (m - 6.0 * s).exp() * (1.0 + tol)
            && *self.rates.last().unwrap() >= (m + 6.0 * s).exp() * (1.0 - tol)
    }
}

/// A posterior density of the rate on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorRow {
    pub density: Vec<f64>,
    pub mean: f64,
}

fn normalise_log_row(rates: &[f64], logs: Vec<f64>) -> Result<PosteriorRow> {
    let shift = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !shift.is_finite() {
        return Err(Error::Numerical("posterior likelihood underflows on the whole grid".into()));
    }
    let unnorm: Vec<f64> = logs.iter().map(|l| (l - shift).exp()).collect();
    let z = trapezoid(rates, &unnorm);
    if !(z > 0.0 && z.is_finite()) {
        return Err(Error::Numerical("posterior normaliser is not positive".into()));
    }
    let density: Vec<f64> = unnorm.iter().map(|u| u / z).collect();
    let weighted: Vec<f64> = rates.iter().zip(&density).map(|(r, d)| r * d).collect();
    let mean = trapezoid(rates, &weighted);
    Ok(PosteriorRow { density, mean })
}

fn check_signal(fm: &ForwardModel, signal: &[f64]) -> Result<()> {
    if signal.len() != fm.channels() {
        return Err(Error::Dimension { expected: fm.channels(), got: signal.len() });
    }
    Ok(())
}

/// Posterior under a flat rate prior on the grid: `∝ F(signal | r)`.
pub fn ideal_posterior(fm: &ForwardModel, signal: &[f64], grid: &RateGrid) -> Result<PosteriorRow> {
    check_signal(fm, signal)?;
    let logs = grid.rates.iter().map(|&r| fm.log_likelihood(signal, r)).collect();
    normalise_log_row(&grid.rates, logs)
}

/// Posterior under an arbitrary rate prior given as `ln F(r)` up to a constant.
pub fn posterior_with_prior<P: Fn(f64) -> f64>(fm: &ForwardModel, signal: &[f64], grid: &RateGrid, ln_prior: P) -> Result<PosteriorRow> {
    check_signal(fm, signal)?;
    let logs = grid.rates.iter().map(|&r| fm.log_likelihood(signal, r) + ln_prior(r)).collect();
    normalise_log_row(&grid.rates, logs)
}

/// Posterior under the lognormal marginal: `∝ F(signal | r)·F(r)`.
pub fn biased_posterior(fm: &ForwardModel, prior: &MarginalPrior<f64>, signal: &[f64], grid: &RateGrid) -> Result<PosteriorRow> {
    if !grid.covers(prior) {
        return Err(Error::Domain("rate grid must cover lmu ± 6 lsigma".into()));
    }
    let wet = prior.wet();
    posterior_with_prior(fm, signal, grid, |r| wet.ln_pdf_log_axis(r.ln()) - r.ln())
}

/// Posterior rows for a set of signals.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorGrid {
    pub rates: Vec<f64>,
    pub rows: Vec<PosteriorRow>,
}

impl PosteriorGrid {
    /// Ideal rows when `prior` is `None`, biased rows otherwise.
    pub fn evaluate(fm: &ForwardModel, prior: Option<&MarginalPrior<f64>>, signals: &[Vec<f64>], grid: &RateGrid) -> Result<Self> {
        let rows = signals
            .iter()
            .map(|s| match prior {
                None => ideal_posterior(fm, s, grid),
                Some(p) => biased_posterior(fm, p, s, grid),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PosteriorGrid { rates: grid.rates.clone(), rows })
    }

    pub fn means(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.mean).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_dry_prior_gives_zero_labels() {
        let prior = MarginalPrior::new(0.46, 1.28, 1.0).unwrap();
        let d = generate(&prior, &ForwardModel::default(), 1000, 1).unwrap();
        assert!(d.labels.iter().all(|&y| y == 0.0));
    }

    #[test]
    fn generation_is_deterministic() {
        let fm = ForwardModel::six_channel();
        let a = generate(&default_prior(), &fm, 500, 17).unwrap();
        let b = generate(&default_prior(), &fm, 500, 17).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(a.features.len(), 500 * 6);
        let c = generate(&default_prior(), &fm, 500, 18).unwrap();
        assert_ne!(a.labels, c.labels);
    }

    #[test]
    fn dataset_bytes_round_trip() {
        let d = generate_split(&default_prior(), &ForwardModel::six_channel(), 64, 3, Split::Val).unwrap();
        let back = Dataset::from_bytes(&d.to_bytes()).unwrap();
        assert_eq!(back, d);
        let mut bad = d.to_bytes();
        bad[0] = b'X';
        assert!(Dataset::from_bytes(&bad).is_err());
        let bytes = d.to_bytes();
        assert!(Dataset::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(generate(&default_prior(), &ForwardModel::default(), 0, 1).is_err());
        let mut fm = ForwardModel::default();
        fm.noise_sigma = 0.0;
        assert!(generate(&default_prior(), &fm, 10, 1).is_err());
        let grid = RateGrid::for_prior(&default_prior());
        assert!(ideal_posterior(&ForwardModel::default(), &[1.0, 2.0], &grid).is_err());
        let narrow = RateGrid::log_spaced(0.1, 10.0, 100).unwrap();
        assert!(biased_posterior(&ForwardModel::default(), &default_prior(), &[-5.0], &narrow).is_err());
    }

    #[test]
    fn flat_prior_reduces_to_ideal() {
        let fm = ForwardModel::default();
        let grid = RateGrid::for_prior(&default_prior());
        for signal in [-30.0, -12.0, 0.0, 5.0] {
            let ideal = ideal_posterior(&fm, &[signal], &grid).unwrap();
            let flat = posterior_with_prior(&fm, &[signal], &grid, |_| 3.0).unwrap();
            for (a, b) in ideal.density.iter().zip(&flat.density) {
                assert!((a - b).abs() <= 1e-12 * a.max(1.0));
            }
            assert!((ideal.mean - flat.mean).abs() <= 1e-12 * ideal.mean);
        }
    }

    #[test]
    fn rows_are_normalised() {
        let fm = ForwardModel::default();
        let grid = RateGrid::for_prior(&default_prior());
        let row = biased_posterior(&fm, &default_prior(), &[-20.0], &grid).unwrap();
        assert!((trapezoid(grid.rates(), &row.density) - 1.0).abs() < 1e-12);
    }
}
