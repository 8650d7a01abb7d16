//! Experiment configuration: built-in defaults, then the run directory's
//! saved config, then `--config` files, then command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use pacbayes_core::data::LabelKind;
use pacbayes_core::pacbayes::{BoundOptConfig, LrPhase};
use pacbayes_core::sgd::SgdConfig;
use pacbayes_core::MlpArchitecture;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const DATA_DIR_ENV: &str = "PACBAYES_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Layer widths, e.g. `"784,600,1"`.
    pub arch: String,
    /// Root seed; every random stream is derived from it.
    pub seed: u64,
    pub init_sigma: f64,
    pub data: DataConfig,
    pub sgd: SgdConfig,
    pub prior: PriorConfig,
    pub bound: BoundOptConfig,
    pub eval: EvalConfig,
    pub pathnorm: PathNormConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dir: Option<PathBuf>,
    pub labels: LabelKind,
    /// Keep only the first this many training examples.
    pub subset: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub b: u32,
    pub c: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_train: u64,
    pub n_test: u64,
    pub delta_prime: f64,
    pub pvalue_samples: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathNormConfig {
    pub rhos: Vec<f64>,
    pub init_sigma: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub eval_every_steps: usize,
    pub delta: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "T-600".into(),
            arch: "784,600,1".into(),
            seed: 0,
            init_sigma: 0.04,
            data: DataConfig::default(),
            sgd: SgdConfig::default(),
            prior: PriorConfig::default(),
            bound: BoundOptConfig::default(),
            eval: EvalConfig::default(),
            pathnorm: PathNormConfig::default(),
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            labels: LabelKind::True,
            subset: None,
        }
    }
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            b: 100,
            c: 0.1,
            delta: 0.025,
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_train: 1000,
            n_test: 1000,
            delta_prime: 0.01,
            pvalue_samples: 10_000,
        }
    }
}

impl Default for PathNormConfig {
    fn default() -> Self {
        Self {
            rhos: vec![0.0, 0.01, 0.05],
            init_sigma: 1e-4,
            learning_rate: 0.005,
            momentum: 0.9,
            batch_size: 100,
            epochs: 5,
            eval_every_steps: 50,
            delta: 0.025,
        }
    }
}

/// Recursively overlays `top` onto `base`.
fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(existing) => merge(existing, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

fn read_toml(path: &Path) -> anyhow::Result<toml::Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

impl ExperimentConfig {
    /// Defaults overlaid with each file in order.
    pub fn layered(files: &[PathBuf]) -> anyhow::Result<Self> {
        let mut value = toml::Value::try_from(Self::default())?;
        for f in files {
            merge(&mut value, read_toml(f)?);
        }
        let cfg: Self = value.try_into().context("invalid configuration")?;
        Ok(cfg)
    }

    pub fn architecture(&self) -> anyhow::Result<MlpArchitecture> {
        self.arch
            .parse()
            .with_context(|| format!("architecture `{}`", self.arch))
    }

    /// Checks every section and derives the per-stream seeds from the root seed.
    pub fn resolve(mut self) -> anyhow::Result<Self> {
        self.architecture()?;
        self.sgd.shuffle_seed = self.seed;
        self.bound.noise_seed = self.seed;
        self.sgd.validate()?;
        self.bound.validate()?;
        if !(self.init_sigma > 0.0) {
            bail!("init_sigma must be positive");
        }
        if !(self.prior.c > 0.0 && self.prior.c < 1.0) || self.prior.b == 0 {
            bail!("prior needs b >= 1 and c in (0, 1)");
        }
        if !(self.prior.delta > 0.0 && self.eval.delta_prime > 0.0 && self.prior.delta + self.eval.delta_prime < 1.0) {
            bail!("delta and delta_prime must be positive with sum below 1");
        }
        if self.eval.n_train == 0 || self.eval.n_test == 0 {
            bail!("Monte-Carlo sample counts must be positive");
        }
        if self.data.subset == Some(0) {
            bail!("data.subset must be positive");
        }
        Ok(self)
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> anyhow::Result<String> {
        let bytes = serde_json::to_vec(self)?;
        Ok(hex::encode(Sha256::digest(bytes)))
    }

    /// Data directory: config value, else the environment, else `./data/mnist`.
    pub fn data_dir(&self) -> PathBuf {
        self.data
            .dir
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data/mnist"))
    }

    /// Settings that differ from the published experimental protocol.
    pub fn deviations(&self) -> Vec<String> {
        let reference = BoundOptConfig::default();
        let mut out = Vec::new();
        if self.bound.iterations != reference.iterations || self.bound.schedule != reference.schedule {
            out.push(format!(
                "bound optimization ran {} iterations with schedule {} (reference: 200000 iterations, 0.001 then 0.0001)",
                self.bound.iterations,
                describe_schedule(&self.bound.schedule)
            ));
        }
        if let Some(bs) = self.bound.minibatch {
            out.push(format!("bound optimization used mini-batches of {bs} instead of the full training set"));
        }
        if self.bound.samples_per_iteration != 1 {
            out.push(format!("{} noise draws per iteration", self.bound.samples_per_iteration));
        }
        if self.eval.n_train != 150_000 {
            out.push(format!("{} Monte-Carlo networks for the training error (reference: 150000)", self.eval.n_train));
        }
        if let Some(n) = self.data.subset {
            out.push(format!("training set restricted to the first {n} examples"));
        }
        out
    }
}

fn describe_schedule(schedule: &[LrPhase]) -> String {
    schedule
        .iter()
        .map(|p| format!("{}x{}", p.iterations, p.rate))
        .collect::<Vec<_>>()
        .join(",")
}

/// Parses `"0.001"` or `"0.001:150000,0.0001:50000"` into schedule phases.
pub fn parse_schedule(text: &str, total: usize) -> anyhow::Result<Vec<LrPhase>> {
    text.split(',')
        .map(|part| {
            let (rate, iters) = match part.split_once(':') {
                Some((r, i)) => (r, i.trim().parse::<usize>().context("schedule iterations")?),
                None => (part, total),
            };
            let rate: f64 = rate.trim().parse().context("schedule rate")?;
            Ok(LrPhase { iterations: iters, rate })
        })
        .collect()
}
