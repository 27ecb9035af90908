//! Experiment configuration: one flat `key = value` text file, overridable
//! by CLI flags, hashed into the provenance of every artifact.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use umt_core::error::{Error, Result};
use umt_core::eval::{AutoencoderConfig, BaselineMethod, FineTuneConfig, PipelineConfig};
use umt_core::meta::{MetaConfig, MetaMode, SamplingStrategy};
use umt_core::nn::NetSpec;

/// Environment variable supplying the default output directory.
pub const OUT_DIR_ENV: &str = "UMT_OUT_DIR";

/// Built-in experiment sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// Minutes-scale benchmark defaults.
    Desk,
    /// Seconds-scale sizes for smoke tests.
    Smoke,
}

impl Profile {
    pub fn parse(s: &str) -> Result<Profile> {
        match s {
            "desk" => Ok(Profile::Desk),
            "smoke" => Ok(Profile::Smoke),
            other => Err(Error::InvalidArgument(format!(
                "unknown profile `{other}` (expected desk or smoke)"
            ))),
        }
    }
}

/// Every knob of the experiment matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    // Dataset generation.
    pub g: usize,
    pub per_class: usize,
    pub d_in: usize,
    pub separation: f64,
    pub noise: f64,
    pub data_seed: u64,
    pub positive_classes: Vec<usize>,
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    // Network architecture.
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    // Deep clustering.
    pub k: usize,
    pub k_list: Vec<usize>,
    pub dc_rounds: usize,
    pub dc_epochs: usize,
    pub dc_lr: f64,
    // Meta-training.
    pub alpha: f64,
    pub outer_lr: f64,
    pub t: usize,
    pub iterations: usize,
    pub m: usize,
    pub n: usize,
    pub mode: MetaMode,
    pub strategy: SamplingStrategy,
    pub strategy_list: Vec<SamplingStrategy>,
    // Fine-tuning and evaluation.
    pub ft_epochs: usize,
    pub ft_lr: f64,
    pub ft_per_class: usize,
    pub reset_head: bool,
    pub ae_epochs: usize,
    pub ae_lr: f64,
    pub seeds: Vec<u64>,
    pub methods: Vec<BaselineMethod>,
    // Run bookkeeping.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset_file: String,
}

impl Default for ExperimentConfig {
    fn default() -> ExperimentConfig {
        ExperimentConfig {
            g: 8,
            per_class: 40,
            d_in: 32,
            separation: 4.0,
            noise: 1.0,
            data_seed: 7,
            positive_classes: vec![0, 2, 5, 7],
            train_frac: 0.5,
            val_frac: 0.125,
            test_frac: 0.375,
            hidden: vec![],
            feature_dim: 32,
            k: 5,
            k_list: vec![3, 4, 5],
            dc_rounds: 12,
            dc_epochs: 10,
            dc_lr: 0.1,
            alpha: 0.05,
            outer_lr: 0.01,
            t: 4,
            iterations: 1000,
            m: 4,
            n: 16,
            mode: MetaMode::FirstOrder,
            strategy: SamplingStrategy::Random,
            strategy_list: vec![SamplingStrategy::Random, SamplingStrategy::Curriculum],
            ft_epochs: 300,
            ft_lr: 0.1,
            ft_per_class: 10,
            reset_head: false,
            ae_epochs: 200,
            ae_lr: 0.01,
            seeds: (0..10).collect(),
            methods: BaselineMethod::ALL.to_vec(),
            seed: 0,
            out_dir: PathBuf::from("runs"),
            dataset_file: "dataset.csv".to_string(),
        }
    }
}

fn mode_tag(mode: MetaMode) -> &'static str {
    match mode {
        MetaMode::FirstOrder => "first_order",
        MetaMode::ExactFd => "exact_fd",
    }
}

fn parse_mode(s: &str) -> Result<MetaMode> {
    match s {
        "first_order" => Ok(MetaMode::FirstOrder),
        "exact_fd" => Ok(MetaMode::ExactFd),
        other => Err(Error::InvalidArgument(format!("unknown mode `{other}`"))),
    }
}

pub fn strategy_tag(strategy: SamplingStrategy) -> &'static str {
    match strategy {
        SamplingStrategy::Random => "random",
        SamplingStrategy::Curriculum => "curriculum",
    }
}

pub fn parse_strategy(s: &str) -> Result<SamplingStrategy> {
    match s {
        "random" => Ok(SamplingStrategy::Random),
        "curriculum" => Ok(SamplingStrategy::Curriculum),
        other => Err(Error::InvalidArgument(format!(
            "unknown strategy `{other}`"
        ))),
    }
}

fn parse_list<T, F>(value: &str, parse_one: F) -> Result<Vec<T>>
where
    F: Fn(&str) -> Result<T>,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(parse_one)
        .collect()
}

impl ExperimentConfig {
    pub fn with_profile(profile: Profile) -> ExperimentConfig {
        let mut config = ExperimentConfig::default();
        if profile == Profile::Smoke {
            config.g = 4;
            config.per_class = 10;
            config.d_in = 8;
            config.separation = 6.0;
            config.positive_classes = vec![0, 2];
            config.hidden = vec![8];
            config.feature_dim = 4;
            config.k = 3;
            config.k_list = vec![3];
            config.dc_rounds = 3;
            config.dc_epochs = 2;
            config.iterations = 30;
            config.n = 8;
            config.ft_epochs = 40;
            config.ft_per_class = 4;
            config.ae_epochs = 40;
            config.seeds = vec![0, 1];
        }
        config
    }

    /// Parses a `key = value` file over the given base config. Lines starting
    /// with `#` and blank lines are skipped; unknown keys are errors.
    pub fn load(path: &Path, base: ExperimentConfig) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        let mut config = base;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(line_no, format!("`{line}` is not key = value")))?;
            config
                .set(key.trim(), value.trim())
                .map_err(|e| Error::parse(line_no, e.to_string()))?;
        }
        Ok(config)
    }

    /// Applies one key/value pair.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::InvalidArgument(format!("bad {what} `{value}`"));
        match key {
            "g" => self.g = value.parse().map_err(|_| bad("count"))?,
            "per_class" => self.per_class = value.parse().map_err(|_| bad("count"))?,
            "d_in" => self.d_in = value.parse().map_err(|_| bad("count"))?,
            "separation" => self.separation = value.parse().map_err(|_| bad("number"))?,
            "noise" => self.noise = value.parse().map_err(|_| bad("number"))?,
            "data_seed" => self.data_seed = value.parse().map_err(|_| bad("seed"))?,
            "positive_classes" => {
                self.positive_classes =
                    parse_list(value, |s| s.parse().map_err(|_| bad("class list")))?
            }
            "train_frac" => self.train_frac = value.parse().map_err(|_| bad("fraction"))?,
            "val_frac" => self.val_frac = value.parse().map_err(|_| bad("fraction"))?,
            "test_frac" => self.test_frac = value.parse().map_err(|_| bad("fraction"))?,
            "hidden" => {
                self.hidden = parse_list(value, |s| s.parse().map_err(|_| bad("width list")))?
            }
            "feature_dim" => self.feature_dim = value.parse().map_err(|_| bad("count"))?,
            "k" => self.k = value.parse().map_err(|_| bad("count"))?,
            "k_list" => self.k_list = parse_list(value, |s| s.parse().map_err(|_| bad("K list")))?,
            "dc_rounds" => self.dc_rounds = value.parse().map_err(|_| bad("count"))?,
            "dc_epochs" => self.dc_epochs = value.parse().map_err(|_| bad("count"))?,
            "dc_lr" => self.dc_lr = value.parse().map_err(|_| bad("rate"))?,
            "alpha" => self.alpha = value.parse().map_err(|_| bad("rate"))?,
            "outer_lr" => self.outer_lr = value.parse().map_err(|_| bad("rate"))?,
            "t" => self.t = value.parse().map_err(|_| bad("count"))?,
            "iterations" => self.iterations = value.parse().map_err(|_| bad("count"))?,
            "m" => self.m = value.parse().map_err(|_| bad("count"))?,
            "n" => self.n = value.parse().map_err(|_| bad("count"))?,
            "mode" => self.mode = parse_mode(value)?,
            "strategy" => self.strategy = parse_strategy(value)?,
            "strategy_list" => self.strategy_list = parse_list(value, parse_strategy)?,
            "ft_epochs" => self.ft_epochs = value.parse().map_err(|_| bad("count"))?,
            "ft_lr" => self.ft_lr = value.parse().map_err(|_| bad("rate"))?,
            "ft_per_class" => self.ft_per_class = value.parse().map_err(|_| bad("count"))?,
            "reset_head" => {
                self.reset_head = match value {
                    "true" | "1" => true,
                    "false" | "0" => false,
                    _ => return Err(bad("flag")),
                }
            }
            "ae_epochs" => self.ae_epochs = value.parse().map_err(|_| bad("count"))?,
            "ae_lr" => self.ae_lr = value.parse().map_err(|_| bad("rate"))?,
            "seeds" => self.seeds = parse_list(value, |s| s.parse().map_err(|_| bad("seed list")))?,
            "methods" => self.methods = parse_list(value, |s| s.parse())?,
            "seed" => self.seed = value.parse().map_err(|_| bad("seed"))?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "dataset_file" => self.dataset_file = value.to_string(),
            other => {
                return Err(Error::InvalidArgument(format!("unknown config key `{other}`")))
            }
        }
        Ok(())
    }

    /// Checks every knob against the preconditions of the module it feeds.
    pub fn validate(&self) -> Result<()> {
        if self.g < 2 {
            return Err(Error::InvalidArgument("g must be at least 2".into()));
        }
        if self.per_class == 0 || self.d_in == 0 {
            return Err(Error::InvalidArgument(
                "per_class and d_in must be positive".into(),
            ));
        }
        if self.separation <= 0.0 || self.separation.is_nan() || self.noise < 0.0 {
            return Err(Error::InvalidArgument(
                "separation must be positive and noise nonnegative".into(),
            ));
        }
        let positive: BTreeSet<usize> = self.positive_classes.iter().copied().collect();
        if positive.is_empty() || positive.len() >= self.g {
            return Err(Error::InvalidArgument(
                "positive_classes must be a nonempty proper subset of the hidden classes".into(),
            ));
        }
        if positive.iter().any(|&c| c >= self.g) {
            return Err(Error::InvalidArgument(
                "positive_classes reference a class outside 0..g".into(),
            ));
        }
        let frac_sum = self.train_frac + self.val_frac + self.test_frac;
        let fracs_positive =
            self.train_frac > 0.0 && self.val_frac > 0.0 && self.test_frac > 0.0;
        if !fracs_positive || (frac_sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "split fractions must be positive and sum to 1, got {frac_sum}"
            )));
        }
        if self.feature_dim == 0 {
            return Err(Error::InvalidArgument("feature_dim must be positive".into()));
        }
        if self.k < 2 || self.k_list.iter().any(|&k| k < 2) {
            return Err(Error::InvalidArgument(
                "every K must be at least 2".into(),
            ));
        }
        if !self.k_list.contains(&self.k) {
            return Err(Error::InvalidArgument(format!(
                "default k = {} is not in k_list {:?}",
                self.k, self.k_list
            )));
        }
        if self.dc_rounds == 0 {
            return Err(Error::InvalidArgument("dc_rounds must be at least 1".into()));
        }
        let rates_positive = self.dc_lr > 0.0 && self.ft_lr > 0.0 && self.ae_lr > 0.0;
        if !rates_positive {
            return Err(Error::InvalidArgument("learning rates must be positive".into()));
        }
        self.meta_config(self.strategy).validate()?;
        if self.ft_per_class == 0 {
            return Err(Error::InvalidArgument(
                "ft_per_class must be at least 1".into(),
            ));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidArgument("seed list is empty".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::InvalidArgument("method list is empty".into()));
        }
        if self.strategy_list.is_empty() {
            return Err(Error::InvalidArgument("strategy list is empty".into()));
        }
        Ok(())
    }

    pub fn net(&self) -> NetSpec {
        NetSpec::new(self.d_in, self.hidden.clone(), self.feature_dim)
    }

    pub fn meta_config(&self, strategy: SamplingStrategy) -> MetaConfig {
        MetaConfig {
            alpha: self.alpha,
            outer_lr: self.outer_lr,
            t: self.t,
            iterations: self.iterations,
            mode: self.mode,
            strategy,
            m: self.m,
            n: self.n,
            seed: self.seed,
        }
    }

    pub fn pipeline(&self, k: usize, strategy: SamplingStrategy) -> PipelineConfig {
        PipelineConfig {
            net: self.net(),
            k,
            dc_rounds: self.dc_rounds,
            dc_epochs: self.dc_epochs,
            dc_lr: self.dc_lr,
            meta: self.meta_config(strategy),
            ae: AutoencoderConfig {
                epochs: self.ae_epochs,
                lr: self.ae_lr,
            },
            fine_tune: FineTuneConfig {
                epochs: self.ft_epochs,
                lr: self.ft_lr,
            },
            ft_per_class: self.ft_per_class,
            reset_head: self.reset_head,
            seeds: self.seeds.clone(),
        }
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.out_dir.join(&self.dataset_file)
    }

    /// Canonical text form: every key in a fixed order. Feeds the config
    /// hash and documents the full knob set when written next to results.
    pub fn canonical_string(&self) -> String {
        let float = |v: f64| format!("{v:.16e}");
        let list = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let seed_list = |v: &[u64]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut out = String::new();
        let mut push = |key: &str, value: String| {
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&value);
            out.push('\n');
        };
        push("g", self.g.to_string());
        push("per_class", self.per_class.to_string());
        push("d_in", self.d_in.to_string());
        push("separation", float(self.separation));
        push("noise", float(self.noise));
        push("data_seed", self.data_seed.to_string());
        push("positive_classes", list(&self.positive_classes));
        push("train_frac", float(self.train_frac));
        push("val_frac", float(self.val_frac));
        push("test_frac", float(self.test_frac));
        push("hidden", list(&self.hidden));
        push("feature_dim", self.feature_dim.to_string());
        push("k", self.k.to_string());
        push("k_list", list(&self.k_list));
        push("dc_rounds", self.dc_rounds.to_string());
        push("dc_epochs", self.dc_epochs.to_string());
        push("dc_lr", float(self.dc_lr));
        push("alpha", float(self.alpha));
        push("outer_lr", float(self.outer_lr));
        push("t", self.t.to_string());
        push("iterations", self.iterations.to_string());
        push("m", self.m.to_string());
        push("n", self.n.to_string());
        push("mode", mode_tag(self.mode).to_string());
        push("strategy", strategy_tag(self.strategy).to_string());
        push(
            "strategy_list",
            self.strategy_list
                .iter()
                .map(|&s| strategy_tag(s))
                .collect::<Vec<_>>()
                .join(","),
        );
        push("ft_epochs", self.ft_epochs.to_string());
        push("ft_lr", float(self.ft_lr));
        push("ft_per_class", self.ft_per_class.to_string());
        push("reset_head", self.reset_head.to_string());
        push("ae_epochs", self.ae_epochs.to_string());
        push("ae_lr", float(self.ae_lr));
        push("seeds", seed_list(&self.seeds));
        push(
            "methods",
            self.methods
                .iter()
                .map(|m| m.tag())
                .collect::<Vec<_>>()
                .join(","),
        );
        push("seed", self.seed.to_string());
        // Output locations are deliberately not part of the canonical form:
        // the same experiment written elsewhere is the same experiment.
        out
    }

    /// FNV-1a hash of the canonical form, as 16 hex digits.
    pub fn hash(&self) -> String {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for byte in self.canonical_string().bytes() {
            hash ^= u64::from(byte);
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{hash:016x}")
    }
}
