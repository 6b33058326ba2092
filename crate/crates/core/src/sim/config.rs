use std::path::{Path, PathBuf};

use crate::chain::ConsensusKind;
use crate::defense::{FilterConfig, OutlierRule};
use crate::error::{Error, Result};
use crate::fl::{PoisonMode, TrainConfig};
use crate::registry::EligibilityPolicy;
use crate::reputation::ReputationConfig;

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// Synthetic rows in total, before the validation split.
    Synthetic { rows: usize },
    /// A CMAPSS training file.
    Turbofan { path: PathBuf },
}

/// Every knob of a simulation run.
///
/// A config file is flat `key = value` text using the field names below
/// (`data` takes a path, `synthetic` a row count). `#` starts a comment.
#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub seed: u64,
    pub n_clients: usize,
    pub n_rounds: u64,
    pub data: DataSource,
    pub synthetic_noise: f64,
    pub holdout_fraction: f64,
    pub roster: Option<PathBuf>,

    pub poisoner_fraction: f64,
    pub poison_mode: PoisonMode,
    pub straggler_fraction: f64,
    pub straggler_delay_s: f64,
    /// Target noise as a percentage of the target standard deviation.
    pub noise_level: f64,

    pub train: TrainConfig,
    /// Simulated seconds for a committee member to score one row.
    pub eval_sec_per_sample: f64,
    /// Simulated seconds for the aggregator to receive one update.
    pub upload_sec: f64,
    /// Simulated seconds per PoW hash attempt.
    pub hash_sec: f64,

    pub committee_size: usize,
    /// An update is accepted when its CC-score is at least this fraction of
    /// the current global model's CC-score.
    pub cc_floor_ratio: f64,
    pub reputation: ReputationConfig,

    pub consensus: ConsensusKind,
    pub pow_bits: u32,
    pub poet_mean_ms: f64,

    pub eligibility: EligibilityPolicy,

    /// Gaussian obfuscation; 0 disables it.
    pub dp_sigma: f64,
    pub dp_delta: f64,

    pub defense: bool,
    pub outlier_sigma: f64,
    pub kmeans_iters: usize,

    pub early_stop: bool,
    pub convergence_tol: f64,
    pub convergence_window: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 0,
            n_clients: 10,
            n_rounds: 30,
            data: DataSource::Synthetic { rows: 20_000 },
            synthetic_noise: 0.5,
            holdout_fraction: 0.2,
            roster: None,
            poisoner_fraction: 0.0,
            poison_mode: PoisonMode::Amplify(100.0),
            straggler_fraction: 0.0,
            straggler_delay_s: 5.0,
            noise_level: 0.0,
            train: TrainConfig::default(),
            eval_sec_per_sample: 1e-4,
            upload_sec: 0.01,
            hash_sec: 1e-6,
            committee_size: 3,
            cc_floor_ratio: 0.5,
            reputation: ReputationConfig::default(),
            consensus: ConsensusKind::Pow,
            pow_bits: 12,
            poet_mean_ms: 50.0,
            eligibility: EligibilityPolicy::default(),
            dp_sigma: 0.0,
            dp_delta: 1e-5,
            defense: true,
            outlier_sigma: 2.0,
            kmeans_iters: 100,
            early_stop: true,
            convergence_tol: 1e-4,
            convergence_window: 5,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::InvalidArgument(format!("bad value `{value}` for `{key}`")))
}

impl SimConfig {
    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "n_clients" | "clients" => self.n_clients = parse(key, v)?,
            "n_rounds" | "rounds" => self.n_rounds = parse(key, v)?,
            "synthetic" => self.data = DataSource::Synthetic { rows: parse(key, v)? },
            "data" => self.data = DataSource::Turbofan { path: PathBuf::from(v) },
            "synthetic_noise" => self.synthetic_noise = parse(key, v)?,
            "holdout_fraction" => self.holdout_fraction = parse(key, v)?,
            "roster" => self.roster = Some(PathBuf::from(v)),
            "poisoner_fraction" => self.poisoner_fraction = parse(key, v)?,
            "poison_mode" => {
                let m = self.poison_mode.magnitude();
                self.poison_mode = match v {
                    "amplify" => PoisonMode::Amplify(m),
                    "random_noise" => PoisonMode::RandomNoise(m),
                    other => return Err(Error::InvalidArgument(format!("unknown poison_mode `{other}`"))),
                }
            }
            "poison_magnitude" => {
                let m = parse(key, v)?;
                self.poison_mode = match self.poison_mode {
                    PoisonMode::Amplify(_) => PoisonMode::Amplify(m),
                    PoisonMode::RandomNoise(_) => PoisonMode::RandomNoise(m),
                }
            }
            "straggler_fraction" => self.straggler_fraction = parse(key, v)?,
            "straggler_delay_s" => self.straggler_delay_s = parse(key, v)?,
            "noise_level" => self.noise_level = parse(key, v)?,
            "epochs" => self.train.epochs = parse(key, v)?,
            "lr" => self.train.lr = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "train_sec_per_sample" => self.train.sec_per_sample = parse(key, v)?,
            "eval_sec_per_sample" => self.eval_sec_per_sample = parse(key, v)?,
            "upload_sec" => self.upload_sec = parse(key, v)?,
            "hash_sec" => self.hash_sec = parse(key, v)?,
            "committee_size" => self.committee_size = parse(key, v)?,
            "cc_floor_ratio" => self.cc_floor_ratio = parse(key, v)?,
            "reputation_initial" => self.reputation.initial = parse(key, v)?,
            "participation_floor" => self.reputation.participation_floor = parse(key, v)?,
            "delta_interested" => self.reputation.interested = parse(key, v)?,
            "delta_response_delay" => self.reputation.response_delay = parse(key, v)?,
            "delta_successful_update" => self.reputation.successful_update = parse(key, v)?,
            "delta_resource_inability" => self.reputation.resource_inability = parse(key, v)?,
            "delta_divergent_update" => self.reputation.divergent_update = parse(key, v)?,
            "consensus" => self.consensus = v.parse()?,
            "pow_bits" => self.pow_bits = parse(key, v)?,
            "poet_mean_ms" => self.poet_mean_ms = parse(key, v)?,
            "min_free_disk_gb" => self.eligibility.min_free_disk_gb = parse(key, v)?,
            "min_battery_pct_unplugged" => self.eligibility.min_battery_pct_unplugged = parse(key, v)?,
            "max_cpu_util_pct" => self.eligibility.max_cpu_util_pct = parse(key, v)?,
            "min_virtual_mem_gb" => self.eligibility.min_virtual_mem_gb = parse(key, v)?,
            "max_packet_loss_ratio" => self.eligibility.max_packet_loss_ratio = parse(key, v)?,
            "dp_sigma" => self.dp_sigma = parse(key, v)?,
            "dp_delta" => self.dp_delta = parse(key, v)?,
            "defense" => self.defense = parse(key, v)?,
            "outlier_sigma" => self.outlier_sigma = parse(key, v)?,
            "kmeans_iters" => self.kmeans_iters = parse(key, v)?,
            "early_stop" => self.early_stop = parse(key, v)?,
            "convergence_tol" => self.convergence_tol = parse(key, v)?,
            "convergence_window" => self.convergence_window = parse(key, v)?,
            other => return Err(Error::InvalidArgument(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: n + 1,
                msg: format!("expected key = value, got `{line}`"),
            })?;
            self.set(k, v).map_err(|e| Error::Parse { line: n + 1, msg: e.to_string() })?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<SimConfig> {
        let mut cfg = SimConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<SimConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        SimConfig::from_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(0.0..0.5).contains(&self.poisoner_fraction) {
            return bad(format!("poisoner_fraction {} must lie in [0, 0.5)", self.poisoner_fraction));
        }
        if !(0.0..=1.0).contains(&self.straggler_fraction)
            || self.poisoner_fraction + self.straggler_fraction > 1.0
        {
            return bad(format!("straggler_fraction {}", self.straggler_fraction));
        }
        if self.n_rounds == 0 {
            return bad("n_rounds must be at least 1".into());
        }
        if self.n_clients < 2 {
            return bad("need at least 2 clients".into());
        }
        if self.committee_size == 0 {
            return bad("committee_size must be at least 1".into());
        }
        if self.pow_bits > crate::chain::MAX_POW_BITS {
            return bad(format!("pow_bits {} > {}", self.pow_bits, crate::chain::MAX_POW_BITS));
        }
        if !(self.poet_mean_ms > 0.0) {
            return bad(format!("poet_mean_ms {}", self.poet_mean_ms));
        }
        if !(self.train.lr > 0.0) {
            return bad(format!("lr {}", self.train.lr));
        }
        if !(self.dp_sigma >= 0.0) || !(self.dp_delta > 0.0 && self.dp_delta < 1.0) {
            return bad(format!("dp_sigma {} / dp_delta {}", self.dp_sigma, self.dp_delta));
        }
        if !(self.noise_level >= 0.0) || !(self.outlier_sigma > 0.0) {
            return bad("noise_level and outlier_sigma must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) || self.holdout_fraction == 0.0 {
            return bad(format!("holdout_fraction {}", self.holdout_fraction));
        }
        if !(self.poison_mode.magnitude() > 0.0) {
            return bad("poison magnitude must be positive".into());
        }
        Ok(())
    }

    pub(crate) fn filter_config(&self, seed: u64, reference: crate::fl::ParamVector) -> FilterConfig {
        FilterConfig {
            rule: OutlierRule { tau: self.outlier_sigma, reference: Some(reference) },
            kmeans_iters: self.kmeans_iters,
            seed,
        }
    }
}
