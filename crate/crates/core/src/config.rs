//! Training configuration, its `key = value` file format, and flag-style
//! overrides.

use crate::encoder::Variant;
use crate::opt::AdamCfg;
use crate::sampler::StepSchedule;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Malformed { line: usize, text: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value for {key}: {value:?} ({reason})")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Classification head flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Linear,
    Nonlinear,
}

impl FromStr for HeadKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Ok(HeadKind::Linear),
            "nonlinear" => Ok(HeadKind::Nonlinear),
            other => Err(format!("unknown head {other:?} (expected linear|nonlinear)")),
        }
    }
}

/// Which θ^(1) the evaluator feeds the predictive rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThetaMode {
    /// Deterministic variational mean at every layer.
    Mean,
    /// One reparameterized draw.
    Sampled,
}

impl FromStr for ThetaMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mean" => Ok(ThetaMode::Mean),
            "sampled" => Ok(ThetaMode::Sampled),
            other => Err(format!("unknown theta mode {other:?} (expected mean|sampled)")),
        }
    }
}

/// Everything a training run needs. `Default` pins the documented choices;
/// a config file or CLI flags override individual keys.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    pub widths: Vec<usize>,
    pub batch_size: usize,
    pub iterations: u64,
    pub burn_in: u64,
    /// Snapshots collected after burn-in, spread evenly.
    pub collect: usize,
    pub seed: u64,

    /// Dirichlet concentration η^(l); None means 1/K_l per layer.
    pub eta: Option<f64>,
    pub gamma0: f64,
    pub c0: f64,
    pub c: f64,

    pub step_a: f64,
    pub step_b: f64,
    pub step_c: f64,
    pub m_floor: f64,

    pub enc_lr: f64,
    pub grad_clip: f64,
    pub rsvi_b: u32,
    pub mc_samples: usize,

    /// Layer-wise structure learning.
    pub k1_max: usize,
    pub layers: usize,
    pub iters_per_stage: u64,
    pub prune_threshold: f64,

    /// Held-out protocol.
    pub heldout_frac: f64,
    pub split_seed: u64,
    pub theta_mode: ThetaMode,

    /// Supervised head.
    pub head: HeadKind,
    pub label_weight: f64,
    pub unsup_epochs: usize,
    pub sup_epochs: usize,
    pub kl_warmup_epochs: usize,
    pub mlp_a1: usize,
    pub mlp_a2: usize,
    pub n_collect: usize,
    pub classifier_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Whai,
            widths: vec![128],
            batch_size: 200,
            iterations: 3000,
            burn_in: 2000,
            collect: 100,
            seed: 0,
            eta: None,
            gamma0: 1.0,
            c0: 1.0,
            c: 1.0,
            step_a: 0.01,
            step_b: 1000.0,
            step_c: 0.75,
            m_floor: 1e-3,
            enc_lr: 1e-3,
            grad_clip: 10.0,
            rsvi_b: 10,
            mc_samples: 1,
            k1_max: 128,
            layers: 3,
            iters_per_stage: 2000,
            prune_threshold: 0.01,
            heldout_frac: 0.7,
            split_seed: 1,
            theta_mode: ThetaMode::Mean,
            head: HeadKind::Linear,
            label_weight: 1.0,
            unsup_epochs: 100,
            sup_epochs: 300,
            kl_warmup_epochs: 20,
            mlp_a1: 400,
            mlp_a2: 200,
            n_collect: 50,
            classifier_lr: 1e-3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.widths.is_empty() || self.widths.iter().any(|&k| k == 0) {
            return Err(ConfigError::Invalid("widths must be nonempty positive".into()));
        }
        if self.batch_size == 0 {
            return Err(ConfigError::Invalid("batch_size must be positive".into()));
        }
        if self.burn_in > self.iterations {
            return Err(ConfigError::Invalid(format!(
                "burn_in {} exceeds iterations {}",
                self.burn_in, self.iterations
            )));
        }
        if self.collect == 0 {
            return Err(ConfigError::Invalid("collect must be at least 1".into()));
        }
        if self.prune_threshold < 0.0 {
            return Err(ConfigError::Invalid("prune_threshold must be >= 0".into()));
        }
        if !(self.heldout_frac > 0.0 && self.heldout_frac < 1.0) {
            return Err(ConfigError::Invalid("heldout_frac must be in (0,1)".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> StepSchedule {
        StepSchedule {
            a: self.step_a,
            b: self.step_b,
            c: self.step_c,
        }
    }

    pub fn adam(&self) -> AdamCfg {
        AdamCfg {
            lr: self.enc_lr,
            ..Default::default()
        }
    }

    /// Apply one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            value.parse().map_err(|e: T::Err| ConfigError::BadValue {
                key: key.into(),
                value: value.into(),
                reason: e.to_string(),
            })
        }
        match key {
            "variant" => self.variant = parse(key, value)?,
            "widths" => {
                self.widths = value
                    .split([',', '-'])
                    .map(|s| parse::<usize>(key, s.trim()))
                    .collect::<Result<_, _>>()?
            }
            "batch_size" => self.batch_size = parse(key, value)?,
            "iterations" => self.iterations = parse(key, value)?,
            "burn_in" => self.burn_in = parse(key, value)?,
            "collect" => self.collect = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "eta" => self.eta = Some(parse(key, value)?),
            "gamma0" => self.gamma0 = parse(key, value)?,
            "c0" => self.c0 = parse(key, value)?,
            "c" => self.c = parse(key, value)?,
            "step_a" => self.step_a = parse(key, value)?,
            "step_b" => self.step_b = parse(key, value)?,
            "step_c" => self.step_c = parse(key, value)?,
            "m_floor" => self.m_floor = parse(key, value)?,
            "enc_lr" => self.enc_lr = parse(key, value)?,
            "grad_clip" => self.grad_clip = parse(key, value)?,
            "rsvi_b" => self.rsvi_b = parse(key, value)?,
            "mc_samples" => self.mc_samples = parse(key, value)?,
            "k1_max" => self.k1_max = parse(key, value)?,
            "layers" => self.layers = parse(key, value)?,
            "iters_per_stage" => self.iters_per_stage = parse(key, value)?,
            "prune_threshold" => self.prune_threshold = parse(key, value)?,
            "heldout_frac" => self.heldout_frac = parse(key, value)?,
            "split_seed" => self.split_seed = parse(key, value)?,
            "theta_mode" => self.theta_mode = parse(key, value)?,
            "head" => self.head = parse(key, value)?,
            "label_weight" => self.label_weight = parse(key, value)?,
            "unsup_epochs" => self.unsup_epochs = parse(key, value)?,
            "sup_epochs" => self.sup_epochs = parse(key, value)?,
            "kl_warmup_epochs" => self.kl_warmup_epochs = parse(key, value)?,
            "mlp_a1" => self.mlp_a1 = parse(key, value)?,
            "mlp_a2" => self.mlp_a2 = parse(key, value)?,
            "n_collect" => self.n_collect = parse(key, value)?,
            "classifier_lr" => self.classifier_lr = parse(key, value)?,
            other => return Err(ConfigError::UnknownKey(other.into())),
        }
        Ok(())
    }

    /// Parse a `key = value` config body (# starts a comment) over defaults.
    pub fn from_kv_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = TrainConfig::default();
        cfg.merge_kv_str(text)?;
        Ok(cfg)
    }

    pub fn merge_kv_str(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Malformed {
                    line: i + 1,
                    text: raw.into(),
                });
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn load<P: AsRef<std::path::Path>>(path: P) -> Result<Self, ConfigError> {
        Self::from_kv_str(&std::fs::read_to_string(path)?)
    }

    /// Serialize every key; `from_kv_str` of the output reproduces `self`.
    pub fn to_kv_string(&self) -> String {
        let widths = self
            .widths
            .iter()
            .map(|k| k.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let eta = match self.eta {
            Some(e) => format!("eta = {e}\n"),
            None => String::new(),
        };
        format!(
            "variant = {}\nwidths = {}\nbatch_size = {}\niterations = {}\nburn_in = {}\n\
             collect = {}\nseed = {}\n{eta}gamma0 = {}\nc0 = {}\nc = {}\nstep_a = {}\n\
             step_b = {}\nstep_c = {}\nm_floor = {}\nenc_lr = {}\ngrad_clip = {}\n\
             rsvi_b = {}\nmc_samples = {}\nk1_max = {}\nlayers = {}\niters_per_stage = {}\n\
             prune_threshold = {}\nheldout_frac = {}\nsplit_seed = {}\ntheta_mode = {}\n\
             head = {}\nlabel_weight = {}\nunsup_epochs = {}\nsup_epochs = {}\n\
             kl_warmup_epochs = {}\nmlp_a1 = {}\nmlp_a2 = {}\nn_collect = {}\nclassifier_lr = {}\n",
            self.variant.name(),
            widths,
            self.batch_size,
            self.iterations,
            self.burn_in,
            self.collect,
            self.seed,
            self.gamma0,
            self.c0,
            self.c,
            self.step_a,
            self.step_b,
            self.step_c,
            self.m_floor,
            self.enc_lr,
            self.grad_clip,
            self.rsvi_b,
            self.mc_samples,
            self.k1_max,
            self.layers,
            self.iters_per_stage,
            self.prune_threshold,
            self.heldout_frac,
            self.split_seed,
            match self.theta_mode {
                ThetaMode::Mean => "mean",
                ThetaMode::Sampled => "sampled",
            },
            match self.head {
                HeadKind::Linear => "linear",
                HeadKind::Nonlinear => "nonlinear",
            },
            self.label_weight,
            self.unsup_epochs,
            self.sup_epochs,
            self.kl_warmup_epochs,
            self.mlp_a1,
            self.mlp_a2,
            self.n_collect,
            self.classifier_lr,
        )
    }
}
