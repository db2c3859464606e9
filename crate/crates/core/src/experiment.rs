//! Experiment orchestration: configuration, single runs, σ grids and
//! method comparisons, with on-disk run directories.
//!
//! A run directory `<output_dir>/<name>/` holds
//!
//! * `config.toml`: the configuration that produced it,
//! * `checkpoint.bin`, or `occurrence.bin` and `intensity.bin` for the
//!   two-model estimation,
//! * `report.csv` and `report.json`: the graded report on the test split,
//! * `summary.txt`: a short human-readable digest,
//! * `record.json`: the [`RunRecord`].
//!
//! Everything except the wall-clock field of `record.json` is a pure function
//! of the configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hurdle_dist::MarginalPrior;
use crate::losses::{HurdlePart, WeightScheme};
use crate::network::{
    fnv1a, train, two_model_train, Checkpoint, Heads, Mlp, Model, NetConfig, Objective, TrainConfig, TrainData,
    TrainHistory,
};
use crate::synthgen::{self, Dataset, DatasetMeta, ForwardModel, SplitSizes, Splits};
use crate::verify::{full_report, GradeRow, GradeThresholds, GradedReport, CSV_COLUMNS};

/// σ values of the standard sensitivity sweep.
pub const STANDARD_SIGMA_GRID: [f64; 6] = [0.2, 0.3, 0.4, 0.5, 0.6, 0.7];
pub const STANDARD_SEED: u64 = 42;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    HurdleImdl,
    HurdleNoimdl,
    Omse,
    Lwmse,
    Nwmse,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::HurdleImdl, Method::HurdleNoimdl, Method::Omse, Method::Lwmse, Method::Nwmse];

    pub fn name(self) -> &'static str {
        match self {
            Method::HurdleImdl => "hurdle_imdl",
            Method::HurdleNoimdl => "hurdle_noimdl",
            Method::Omse => "omse",
            Method::Lwmse => "lwmse",
            Method::Nwmse => "nwmse",
        }
    }

    pub fn is_hurdle(self) -> bool {
        matches!(self, Method::HurdleImdl | Method::HurdleNoimdl)
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimation {
    /// One network with joint `p` and `μ` heads.
    #[default]
    SingleModel,
    /// Separate occurrence and intensity networks.
    TwoModel,
}

impl FromStr for Estimation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single_model" => Ok(Estimation::SingleModel),
            "two_model" => Ok(Estimation::TwoModel),
            _ => Err(Error::Config(format!("unknown estimation `{s}`"))),
        }
    }
}

fn default_prior() -> MarginalPrior<f64> {
    synthgen::default_prior()
}

fn standard_sizes() -> SplitSizes {
    SplitSizes::STANDARD
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Generated on the fly. `seed` defaults to the experiment seed.
    Synthetic {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
        #[serde(default = "default_prior")]
        prior: MarginalPrior<f64>,
        #[serde(default)]
        forward_model: ForwardModel,
        #[serde(default = "standard_sizes")]
        sizes: SplitSizes,
    },
    /// A directory written by `generate`.
    Files { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Run directory name; also the label used in comparisons.
    pub name: String,
    /// Seeds network initialisation and minibatch order.
    pub seed: u64,
    pub method: Method,
    #[serde(default)]
    pub estimation: Estimation,
    /// σ values for `sigma_grid`; `train.sigma` is used by a plain run.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sigma_grid: Vec<f64>,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub train: TrainConfig,
}

impl ExperimentConfig {
    /// Seed 42, 200k/25k/25k samples, default prior and single-channel
    /// forward model, default training settings.
    pub fn standard_benchmark(method: Method) -> Self {
        ExperimentConfig {
            name: method.name().to_string(),
            seed: STANDARD_SEED,
            method,
            estimation: Estimation::SingleModel,
            sigma_grid: Vec::new(),
            hidden: default_hidden(),
            output_dir: None,
            dataset: DatasetSpec::Synthetic {
                seed: Some(STANDARD_SEED),
                prior: default_prior(),
                forward_model: ForwardModel::single_channel(),
                sizes: SplitSizes::STANDARD,
            },
            train: TrainConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serialises to TOML")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| e.context(format!("config {}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name == "." || self.name == ".." {
            return Err(Error::Config(format!("`{}` is not a usable run name", self.name)));
        }
        if self.estimation == Estimation::TwoModel && !self.method.is_hurdle() {
            return Err(Error::Config(format!("two_model estimation needs a hurdle method, not {}", self.method.name())));
        }
        if let Some(s) = self.sigma_grid.iter().find(|&&s| !(s > 0.0 && s <= 2.0)) {
            return Err(Error::Config(format!("sigma grid value {s} is outside (0, 2]")));
        }
        self.train.validate()?;
        NetConfig { input_dim: 1, hidden: self.hidden.clone(), seed: self.seed, heads: Heads::Joint }.validate()?;
        if let DatasetSpec::Synthetic { prior, forward_model, sizes, .. } = &self.dataset {
            MarginalPrior::new(prior.lmu(), prior.lsigma(), prior.p0()).map_err(|e| Error::Config(e.to_string()))?;
            forward_model.validate()?;
            if sizes.train == 0 || sizes.val == 0 || sizes.test == 0 {
                return Err(Error::Config("every split needs at least one sample".into()));
            }
        }
        Ok(())
    }

    pub fn run_dir(&self) -> Option<PathBuf> {
        self.output_dir.as_ref().map(|d| d.join(&self.name))
    }

    pub fn with_sigma(&self, sigma: f64) -> Self {
        let mut cfg = self.clone();
        cfg.train.sigma = sigma;
        cfg.sigma_grid.clear();
        cfg
    }
}

/// Generates or loads the three splits named by the configuration.
pub fn load_splits(cfg: &ExperimentConfig) -> Result<Splits> {
    match &cfg.dataset {
        DatasetSpec::Synthetic { seed, prior, forward_model, sizes } => synthgen::generate_splits(&DatasetMeta {
            prior: *prior,
            forward_model: forward_model.clone(),
            seed: seed.unwrap_or(cfg.seed),
            sizes: *sizes,
        }),
        DatasetSpec::Files { path } => Splits::load(path),
    }
}

/// Hex digest of the serialised test split.
pub fn fingerprint(test: &Dataset) -> String {
    format!("{:016x}", fnv1a(&test.to_bytes()))
}

/// Turns trained heads into rain-rate retrievals.
#[derive(Debug, Clone)]
pub enum Retriever {
    /// `(1 − p)·exp(μ + σ²/2)` from a joint network.
    Hurdle { model: Model<f64>, sigma: f64 },
    /// The same expectation with `p` and `μ` from separate networks.
    TwoModel { occurrence: Model<f64>, intensity: Model<f64>, sigma: f64 },
    /// Raw regression output clamped at zero.
    Direct { model: Model<f64> },
}

fn objective_of(ck: &Checkpoint) -> Result<Objective<f64>> {
    serde_json::from_value(ck.objective.clone()).map_err(|e| Error::Corrupt(format!("checkpoint objective: {e}")))
}

impl Retriever {
    pub fn from_checkpoints(checkpoints: &[Checkpoint]) -> Result<Self> {
        let objectives = checkpoints.iter().map(objective_of).collect::<Result<Vec<_>>>()?;
        match (checkpoints, objectives.as_slice()) {
            ([ck], [Objective::Hurdle { part: HurdlePart::Full, .. }]) => {
                Ok(Retriever::Hurdle { model: ck.to_model()?, sigma: ck.train.sigma })
            }
            ([ck], [Objective::Weighted { .. }]) => Ok(Retriever::Direct { model: ck.to_model()? }),
            (
                [p, mu],
                [Objective::Hurdle { part: HurdlePart::Occurrence, .. }, Objective::Hurdle { part: HurdlePart::Intensity, .. }],
            ) => Ok(Retriever::TwoModel { occurrence: p.to_model()?, intensity: mu.to_model()?, sigma: mu.train.sigma }),
            _ => Err(Error::Config("checkpoints do not form a single, two-model or regression retriever".into())),
        }
    }

    pub fn retrieve(&self, features: &[f64]) -> Result<Vec<f64>> {
        let expectation = |p: &[f64], mu: &[f64], sigma: f64| -> Vec<f64> {
            let half_var = 0.5 * sigma * sigma;
            p.iter().zip(mu).map(|(&p, &m)| (1.0 - p) * (m + half_var).exp()).collect()
        };
        match self {
            Retriever::Hurdle { model, sigma } => {
                let h = model.forward(features)?;
                Ok(expectation(&h.p, &h.mu, *sigma))
            }
            Retriever::TwoModel { occurrence, intensity, sigma } => {
                let p = occurrence.forward(features)?.p;
                let mu = intensity.forward(features)?.mu;
                Ok(expectation(&p, &mu, *sigma))
            }
            Retriever::Direct { model } => Ok(model.forward(features)?.mu.into_iter().map(|v| v.max(0.0)).collect()),
        }
    }
}

/// Retrieves on `data` and grades against its labels with the default
/// thresholds.
pub fn evaluate(checkpoints: &[Checkpoint], data: &Dataset) -> Result<GradedReport> {
    let retrievals = Retriever::from_checkpoints(checkpoints)?.retrieve(&data.features)?;
    full_report(&retrievals, &data.labels, &GradeThresholds::default())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub seed: u64,
    /// Marginal estimated from the training labels.
    pub prior: MarginalPrior<f64>,
    /// Checkpoint files, empty when the run was not persisted.
    pub checkpoints: Vec<PathBuf>,
    pub histories: Vec<TrainHistory>,
    pub test_fingerprint: String,
    pub report: GradedReport,
    pub wall_clock_secs: f64,
}

/// A finished run with its in-memory artefacts.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub record: RunRecord,
    pub checkpoints: Vec<Checkpoint>,
    pub retrievals: Vec<f64>,
}

fn objective_for(method: Method, prior: MarginalPrior<f64>, part: HurdlePart, labels: &[f64]) -> Result<Objective<f64>> {
    Ok(match method {
        Method::HurdleImdl => Objective::Hurdle { prior, imdl: true, part },
        Method::HurdleNoimdl => Objective::Hurdle { prior, imdl: false, part },
        Method::Omse => Objective::Weighted { scheme: WeightScheme::Omse },
        Method::Lwmse => Objective::Weighted { scheme: WeightScheme::lwmse_default() },
        Method::Nwmse => Objective::Weighted { scheme: WeightScheme::Nwmse { table: None }.fitted(labels)? },
    })
}

fn train_checkpoints(cfg: &ExperimentConfig, splits: &Splits, prior: MarginalPrior<f64>) -> Result<Vec<Checkpoint>> {
    let dim = splits.train.channels;
    let tr = TrainData::new(&splits.train.features, &splits.train.labels);
    let va = TrainData::new(&splits.val.features, &splits.val.labels);
    let net = |heads: Heads, seed: u64| Mlp::new(NetConfig { input_dim: dim, hidden: cfg.hidden.clone(), seed, heads });
    match cfg.estimation {
        Estimation::SingleModel => {
            let objective = objective_for(cfg.method, prior, HurdlePart::Full, &splits.train.labels)?;
            Ok(vec![train(net(objective.heads(), cfg.seed)?, tr, va, &cfg.train, &objective)?])
        }
        Estimation::TwoModel => {
            let imdl = cfg.method == Method::HurdleImdl;
            let p_net = net(Heads::POnly, cfg.seed)?;
            let mu_net = net(Heads::MuOnly, cfg.seed.wrapping_add(1))?;
            let (p, mu) = two_model_train(p_net, mu_net, tr, va, &cfg.train, prior, imdl)?;
            Ok(vec![p, mu])
        }
    }
}

/// Trains and evaluates on already loaded splits without touching the disk.
pub fn run_on(cfg: &ExperimentConfig, splits: &Splits) -> Result<RunOutput> {
    cfg.validate()?;
    let start = Instant::now();
    let prior = MarginalPrior::estimate(&splits.train.labels)?;
    let checkpoints = train_checkpoints(cfg, splits, prior)?;
    let retrievals = Retriever::from_checkpoints(&checkpoints)?.retrieve(&splits.test.features)?;
    let report = full_report(&retrievals, &splits.test.labels, &GradeThresholds::default())?;
    let record = RunRecord {
        config: cfg.clone(),
        seed: cfg.seed,
        prior,
        checkpoints: Vec::new(),
        histories: checkpoints.iter().map(|c| c.history.clone()).collect(),
        test_fingerprint: fingerprint(&splits.test),
        report,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok(RunOutput { record, checkpoints, retrievals })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub const RECORD_FILE: &str = "record.json";

fn checkpoint_names(estimation: Estimation) -> &'static [&'static str] {
    match estimation {
        Estimation::SingleModel => &["checkpoint.bin"],
        Estimation::TwoModel => &["occurrence.bin", "intensity.bin"],
    }
}

/// Writes the run directory and fills in the checkpoint paths.
pub fn persist(out: &mut RunOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let rec = &mut out.record;
    write(&dir.join("config.toml"), rec.config.to_toml())?;
    rec.checkpoints.clear();
    for (ck, name) in out.checkpoints.iter().zip(checkpoint_names(rec.config.estimation)) {
        let path = dir.join(name);
        ck.save(&path)?;
        rec.checkpoints.push(path);
    }
    write(&dir.join("report.csv"), rec.report.to_csv())?;
    write(&dir.join("report.json"), rec.report.to_json())?;
    write(&dir.join("summary.txt"), summary(rec))?;
    let json = serde_json::to_string_pretty(rec).expect("run record serialises");
    write(&dir.join(RECORD_FILE), json)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

/// Plain-text digest of a run.
pub fn summary(rec: &RunRecord) -> String {
    let c = &rec.config;
    let mut s = String::new();
    let _ = writeln!(s, "run        {}", c.name);
    let _ = writeln!(s, "method     {} ({:?})", c.method.name(), c.estimation);
    let _ = writeln!(s, "seed       {}", rec.seed);
    let _ = writeln!(s, "sigma      {}", c.train.sigma);
    let _ = writeln!(
        s,
        "prior      lmu={:.4} lsigma={:.4} p0={:.4}",
        rec.prior.lmu(),
        rec.prior.lsigma(),
        rec.prior.p0()
    );
    for h in &rec.histories {
        let _ = writeln!(s, "training   {} epochs, best epoch {}, val loss {:.6}", h.epochs.len(), h.best_epoch, h.best_val_loss);
    }
    let _ = writeln!(s, "test       {} samples, split {}", rec.report.n_samples, rec.test_fingerprint);
    let _ = writeln!(s);
    let _ = writeln!(s, "{:>9} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}", "threshold", "n", "rmse", "me", "pod", "far", "ets");
    for r in &rec.report.rows {
        let _ = writeln!(
            s,
            "{:>9} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
            r.threshold,
            r.n_grade,
            fmt_opt(r.rmse),
            fmt_opt(r.me),
            fmt_opt(r.pod),
            fmt_opt(r.far),
            fmt_opt(r.ets)
        );
    }
    s
}

/// Loads or generates data, trains, evaluates and, when `output_dir` is set,
/// writes the run directory.
pub fn run(cfg: &ExperimentConfig) -> Result<RunRecord> {
    let splits = load_splits(cfg).map_err(|e| e.context(format!("run {}: loading data", cfg.name)))?;
    run_with(cfg, &splits)
}

fn run_with(cfg: &ExperimentConfig, splits: &Splits) -> Result<RunRecord> {
    let mut out = run_on(cfg, splits).map_err(|e| e.context(format!("run {}", cfg.name)))?;
    if let Some(dir) = cfg.run_dir() {
        persist(&mut out, &dir).map_err(|e| e.context(format!("run directory {}", dir.display())))?;
    }
    Ok(out.record)
}

pub fn load_record(run_dir: impl AsRef<Path>) -> Result<RunRecord> {
    let path = run_dir.as_ref().join(RECORD_FILE);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Corrupt(format!("{}: {e}", path.display())))
}

/// Name of the run for each σ of a grid.
pub fn sigma_run_name(base: &str, sigma: f64) -> String {
    format!("{base}_sigma_{sigma}")
}

/// One run per σ of `cfg.sigma_grid` on shared data and seed.
pub fn sigma_grid(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    if cfg.sigma_grid.is_empty() {
        return Err(Error::Config("sigma_grid is empty".into()));
    }
    let splits = load_splits(cfg).map_err(|e| e.context(format!("grid {}: loading data", cfg.name)))?;
    let records = cfg
        .sigma_grid
        .iter()
        .map(|&sigma| {
            let mut c = cfg.with_sigma(sigma);
            c.name = sigma_run_name(&cfg.name, sigma);
            run_with(&c, &splits)
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = &cfg.output_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write(&dir.join(format!("{}_grid.csv", cfg.name)), sigma_table_csv(&records))?;
    }
    Ok(records)
}

/// `sigma,` followed by the report columns, one line per (σ, threshold).
pub fn sigma_table_csv(records: &[RunRecord]) -> String {
    let mut out = format!("sigma,{}\n", CSV_COLUMNS.join(","));
    for rec in records {
        for row in &rec.report.rows {
            let _ = writeln!(out, "{},{}", rec.config.train.sigma, row.csv_fields());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub method: Method,
    #[serde(flatten)]
    pub row: GradeRow,
}

/// Per-threshold metrics of several runs on one test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub test_fingerprint: String,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut out = format!("name,method,{}\n", CSV_COLUMNS.join(","));
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{}", r.name, r.method.name(), r.row.csv_fields());
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("comparison serialises")
    }

    /// Rows of one run, in threshold order.
    pub fn rows_of<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a GradeRow> + 'a {
        self.rows.iter().filter(move |r| r.name == name).map(|r| &r.row)
    }
}

/// Aligns finished runs; they must share the test split.
pub fn compare(records: &[RunRecord]) -> Result<Comparison> {
    let first = records.first().ok_or(Error::Empty("runs to compare"))?;
    if let Some(other) = records.iter().find(|r| r.test_fingerprint != first.test_fingerprint) {
        return Err(Error::SplitMismatch(format!(
            "{} was tested on split {}, {} on {}",
            first.config.name, first.test_fingerprint, other.config.name, other.test_fingerprint
        )));
    }
    let rows = records
        .iter()
        .flat_map(|rec| {
            rec.report.rows.iter().map(|row| ComparisonRow {
                name: rec.config.name.clone(),
                method: rec.config.method,
                row: row.clone(),
            })
        })
        .collect();
    Ok(Comparison { test_fingerprint: first.test_fingerprint.clone(), rows })
}

/// Runs every configuration and compares the results.
pub fn compare_configs(configs: &[ExperimentConfig]) -> Result<Comparison> {
    let records = configs.iter().map(run).collect::<Result<Vec<_>>>()?;
    compare(&records)
}
