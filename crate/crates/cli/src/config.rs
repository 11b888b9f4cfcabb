//! Flat `key=value` run configuration: built-in defaults, then a config
//! file, then command-line overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use efsa::baselines::FinetuneConfig;
use efsa::episode::{EpisodeConfig, TuningMode};
use efsa::eval::{Method, SuiteConfig};
use efsa::synth::BenchConfig;
use efsa::train::BaseTrainConfig;
use efsa::{Activation, EncoderDims, LoraConfig, LoraTarget, LossConfig, OptimizerConfig};

use crate::error::{CliError, CliResult};

/// Every recognized key with its built-in default, in output order.
pub fn defaults() -> Vec<(&'static str, String)> {
    let b = BenchConfig::default();
    let t = BaseTrainConfig::default();
    let e = EpisodeConfig::default();
    let f = FinetuneConfig::default();
    let tuning = match e.tuning {
        TuningMode::Lora => "lora",
        TuningMode::Full => "full",
    };
    let methods: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
    vec![
        ("data_dir", "data".into()),
        ("model_dir", "model".into()),
        ("index_dir", "index".into()),
        ("out_dir", "reports".into()),
        ("import_pool", String::new()),
        ("n_domains", b.n_domains.to_string()),
        ("items_per_domain", b.items_per_domain.to_string()),
        ("hard_group_size", b.hard_group_size.to_string()),
        ("n_slots", b.n_slots.to_string()),
        ("vocab_size", b.vocab_size.to_string()),
        ("detail_slots", b.detail_slots.to_string()),
        ("detail_salience", b.detail_salience.to_string()),
        ("sigma", b.sigma.to_string()),
        ("signature_scale", b.signature_scale.to_string()),
        ("queries_per_domain", b.queries_per_domain.to_string()),
        ("n_distractors", b.n_distractors.to_string()),
        ("n_background", b.n_background.to_string()),
        ("lookalike_fraction", b.lookalike_fraction.to_string()),
        ("detail_channels", b.detail_channels.to_string()),
        ("detail_shift", b.detail_shift.to_string()),
        ("train_pairs", b.train_pairs.to_string()),
        ("train_domain_fraction", b.train_domain_fraction.to_string()),
        ("caption_slots", b.caption_slots.to_string()),
        ("caption_error", b.caption_error.to_string()),
        ("d_in", b.d_in.to_string()),
        ("bench_seed", b.seed.to_string()),
        ("d_hidden", t.dims.d_hidden.to_string()),
        ("d_e", t.dims.d_e.to_string()),
        ("layers", t.dims.layers.to_string()),
        ("activation", t.activation.name().into()),
        ("base_steps", t.steps.to_string()),
        ("base_batch_size", t.batch_size.to_string()),
        ("base_lr", t.optimizer.learning_rate.to_string()),
        ("base_weight_decay", t.optimizer.weight_decay.to_string()),
        ("base_temperature", t.temperature.to_string()),
        ("base_seed", t.seed.to_string()),
        ("k", e.k.to_string()),
        ("epochs", e.epochs.to_string()),
        ("tau", e.loss.temperature.to_string()),
        ("margin", e.loss.margin.to_string()),
        ("alpha", e.loss.alpha.to_string()),
        ("beta", e.loss.beta.to_string()),
        ("lr", e.optimizer.learning_rate.to_string()),
        ("weight_decay", e.optimizer.weight_decay.to_string()),
        ("adam_beta1", e.optimizer.beta1.to_string()),
        ("adam_beta2", e.optimizer.beta2.to_string()),
        ("adam_epsilon", e.optimizer.epsilon.to_string()),
        ("rank", e.lora.rank.to_string()),
        ("scaling", e.lora.scaling.to_string()),
        ("lora_target", e.lora.target.name().into()),
        ("tuning", tuning.into()),
        ("seed", e.seed.to_string()),
        ("ft_epochs", f.epochs.to_string()),
        ("ft_batch_size", f.batch_size.to_string()),
        ("ft_lr", f.optimizer.learning_rate.to_string()),
        ("ft_seed", f.seed.to_string()),
        ("methods", methods.join(",")),
        ("setting", "multi".into()),
        ("topk_ks", "8,16,32,64".into()),
        ("epoch_list", "1,2,3,4".into()),
        ("storage_pool_size", "1000000".into()),
        ("storage_d_e", "768".into()),
        ("storage_bytes_per_scalar", "4".into()),
        ("storage_caption_tokens", "30".into()),
        ("storage_bytes_per_token", "2".into()),
    ]
}

/// Parses `key=value` lines. Blank lines and `#` comments (whole-line or
/// trailing) are ignored; keys must be known and appear once.
pub fn parse_config(text: &str, origin: &str) -> CliResult<Vec<(String, String)>> {
    let known = defaults();
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CliError::config(format!(
                "{origin}:{}: expected key=value, got `{line}`",
                n + 1
            ))
        })?;
        let key = key.trim();
        check_key(&known, key)
            .map_err(|e| CliError::config(format!("{origin}:{}: {}", n + 1, e.message)))?;
        if seen.insert(key.to_string(), n + 1).is_some() {
            return Err(CliError::config(format!(
                "{origin}:{}: duplicate key `{key}`",
                n + 1
            )));
        }
        out.push((key.to_string(), value.trim().to_string()));
    }
    Ok(out)
}

fn check_key(known: &[(&'static str, String)], key: &str) -> CliResult<()> {
    if known.iter().any(|(k, _)| *k == key) {
        Ok(())
    } else {
        Err(CliError::config(format!("unknown key `{key}`")))
    }
}

/// Resolved settings: every key with its effective value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Settings {
    values: Vec<(&'static str, String)>,
}

impl Settings {
    /// Layers `file` entries, then `overrides`, over the defaults.
    pub fn resolve(file: &[(String, String)], overrides: &[(String, String)]) -> CliResult<Self> {
        let mut values = defaults();
        for (key, value) in file.iter().chain(overrides) {
            let slot = values
                .iter_mut()
                .find(|(k, _)| k == key)
                .ok_or_else(|| CliError::config(format!("unknown key `{key}`")))?;
            slot.1 = value.clone();
        }
        Ok(Self { values })
    }

    pub fn load(config: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let file = match config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    CliError::config(format!("cannot read config {}: {e}", path.display()))
                })?;
                parse_config(&text, &path.display().to_string())?
            }
            None => Vec::new(),
        };
        let known = defaults();
        let mut parsed = Vec::with_capacity(overrides.len());
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::config(format!("--set expects key=value, got `{o}`")))?;
            check_key(&known, k.trim())?;
            parsed.push((k.trim().to_string(), v.trim().to_string()));
        }
        Self::resolve(&file, &parsed)
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v.as_str())
            .unwrap_or_else(|| panic!("unregistered key `{key}`"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> CliResult<T> {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|_| CliError::config(format!("invalid value `{raw}` for `{key}`")))
    }

    fn list(&self, key: &str) -> CliResult<Vec<usize>> {
        let out: Vec<usize> = self
            .raw(key)
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| CliError::config(format!("invalid list entry `{s}` in `{key}`")))
            })
            .collect::<CliResult<_>>()?;
        if out.is_empty() {
            return Err(CliError::config(format!("`{key}` must not be empty")));
        }
        Ok(out)
    }

    /// `key=value` lines for every key, defaults expanded.
    pub fn render(&self) -> String {
        self.values
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Setting {
    Multi,
    Single,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StorageInputs {
    pub pool_size: u64,
    pub d_e: u64,
    pub bytes_per_scalar: u64,
    pub caption_tokens: u64,
    pub bytes_per_token: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub model_dir: PathBuf,
    pub index_dir: PathBuf,
    pub out_dir: PathBuf,
    pub import_pool: Option<PathBuf>,
}

/// Typed, validated view of [`Settings`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub paths: Paths,
    pub bench: BenchConfig,
    pub base: BaseTrainConfig,
    pub suite: SuiteConfig,
    pub setting: Setting,
    pub topk_ks: Vec<usize>,
    pub epoch_list: Vec<usize>,
    pub storage: StorageInputs,
}

impl RunConfig {
    pub fn from_settings(s: &Settings) -> CliResult<Self> {
        let path = |k: &str| PathBuf::from(s.raw(k));
        let import = s.raw("import_pool");
        let paths = Paths {
            data_dir: path("data_dir"),
            model_dir: path("model_dir"),
            index_dir: path("index_dir"),
            out_dir: path("out_dir"),
            import_pool: (!import.is_empty()).then(|| PathBuf::from(import)),
        };
        let bench = BenchConfig {
            n_domains: s.get("n_domains")?,
            items_per_domain: s.get("items_per_domain")?,
            hard_group_size: s.get("hard_group_size")?,
            n_slots: s.get("n_slots")?,
            vocab_size: s.get("vocab_size")?,
            detail_slots: s.get("detail_slots")?,
            detail_salience: s.get("detail_salience")?,
            sigma: s.get("sigma")?,
            signature_scale: s.get("signature_scale")?,
            queries_per_domain: s.get("queries_per_domain")?,
            n_distractors: s.get("n_distractors")?,
            n_background: s.get("n_background")?,
            lookalike_fraction: s.get("lookalike_fraction")?,
            detail_channels: s.get("detail_channels")?,
            detail_shift: s.get("detail_shift")?,
            train_pairs: s.get("train_pairs")?,
            train_domain_fraction: s.get("train_domain_fraction")?,
            caption_slots: s.get("caption_slots")?,
            caption_error: s.get("caption_error")?,
            d_in: s.get("d_in")?,
            seed: s.get("bench_seed")?,
        };
        let activation = Activation::parse(s.raw("activation")).ok_or_else(|| {
            CliError::config(format!("unknown activation `{}`", s.raw("activation")))
        })?;
        let adam = OptimizerConfig {
            beta1: s.get("adam_beta1")?,
            beta2: s.get("adam_beta2")?,
            epsilon: s.get("adam_epsilon")?,
            ..OptimizerConfig::default()
        };
        let base = BaseTrainConfig {
            dims: EncoderDims {
                d_in: bench.d_in,
                d_hidden: s.get("d_hidden")?,
                d_e: s.get("d_e")?,
                layers: s.get("layers")?,
            },
            activation,
            steps: s.get("base_steps")?,
            batch_size: s.get("base_batch_size")?,
            optimizer: OptimizerConfig {
                learning_rate: s.get("base_lr")?,
                weight_decay: s.get("base_weight_decay")?,
                ..adam
            },
            temperature: s.get("base_temperature")?,
            seed: s.get("base_seed")?,
        };
        let loss = LossConfig {
            temperature: s.get("tau")?,
            margin: s.get("margin")?,
            alpha: s.get("alpha")?,
            beta: s.get("beta")?,
        };
        let lora = LoraConfig {
            rank: s.get("rank")?,
            scaling: s.get("scaling")?,
            target: LoraTarget::parse(s.raw("lora_target")).ok_or_else(|| {
                CliError::config(format!("unknown lora_target `{}`", s.raw("lora_target")))
            })?,
        };
        let tuning = match s.raw("tuning") {
            "lora" => TuningMode::Lora,
            "full" => TuningMode::Full,
            other => return Err(CliError::config(format!("unknown tuning `{other}`"))),
        };
        let episode = EpisodeConfig {
            k: s.get("k")?,
            epochs: s.get("epochs")?,
            loss,
            lora,
            optimizer: OptimizerConfig {
                learning_rate: s.get("lr")?,
                weight_decay: s.get("weight_decay")?,
                ..adam
            },
            seed: s.get("seed")?,
            tuning,
        };
        let finetune = FinetuneConfig {
            epochs: s.get("ft_epochs")?,
            batch_size: s.get("ft_batch_size")?,
            loss,
            lora,
            optimizer: OptimizerConfig {
                learning_rate: s.get("ft_lr")?,
                weight_decay: s.get("weight_decay")?,
                ..adam
            },
            seed: s.get("ft_seed")?,
        };
        let mut methods = Vec::new();
        for name in s.raw("methods").split(',').map(str::trim) {
            let m = Method::parse(name)
                .ok_or_else(|| CliError::config(format!("unknown method `{name}`")))?;
            if !methods.contains(&m) {
                methods.push(m);
            }
        }
        let setting = match s.raw("setting") {
            "multi" => Setting::Multi,
            "single" => Setting::Single,
            other => {
                return Err(CliError::config(format!(
                    "unknown setting `{other}` (multi or single)"
                )))
            }
        };
        let storage = StorageInputs {
            pool_size: s.get("storage_pool_size")?,
            d_e: s.get("storage_d_e")?,
            bytes_per_scalar: s.get("storage_bytes_per_scalar")?,
            caption_tokens: s.get("storage_caption_tokens")?,
            bytes_per_token: s.get("storage_bytes_per_token")?,
        };
        let cfg = Self {
            paths,
            bench,
            base,
            suite: SuiteConfig {
                methods,
                episode,
                finetune,
            },
            setting,
            topk_ks: s.list("topk_ks")?,
            epoch_list: s.list("epoch_list")?,
            storage,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> CliResult<()> {
        self.bench.validate()?;
        self.base.validate()?;
        self.suite.episode.validate()?;
        self.suite.finetune.validate()?;
        for &k in &self.topk_ks {
            EpisodeConfig {
                k,
                ..self.suite.episode
            }
            .validate()?;
        }
        for &epochs in &self.epoch_list {
            EpisodeConfig {
                epochs,
                ..self.suite.episode
            }
            .validate()?;
        }
        let s = &self.storage;
        if [
            s.pool_size,
            s.d_e,
            s.bytes_per_scalar,
            s.caption_tokens,
            s.bytes_per_token,
        ]
        .contains(&0)
        {
            return Err(CliError::config("storage inputs must be positive"));
        }
        Ok(())
    }
}
