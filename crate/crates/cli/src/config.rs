//! Run configuration: a flat `key = value` text file with typed fields.
//!
//! Precedence is defaults, then the file, then `--set key=value`, then the
//! dedicated flags. Unknown keys and unparsable values are errors. The
//! resolved configuration is written next to every run's outputs and hashes
//! to a stable id.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use esolm_core::corpus::TokenizeMode;
use esolm_core::masking::Vocab;
use esolm_core::model::{DenoiserConfig, PositionEncoding};
use esolm_core::Variant;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const OUTPUT_ROOT_ENV: &str = "ESOLM_OUTPUT_ROOT";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.txt";

/// A configuration problem; maps to exit status 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub position_encoding: PositionEncoding,
    pub init_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSection {
    pub steps: u64,
    pub lr: f64,
    pub warmup: u64,
    pub batch_size: usize,
    pub mdm_fraction: f64,
    pub weight_decay: f64,
    pub variance_reduced: bool,
    pub log_every: u64,
    pub eval_examples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerSection {
    pub mode: TokenizeMode,
    pub max_vocab: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingSection {
    pub steps: usize,
    pub count: usize,
    pub temperature: f64,
    pub nucleus: Option<f64>,
    pub cache: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSection {
    pub lengths: Vec<usize>,
    /// `0` stands for `T = L`.
    pub steps: Vec<usize>,
    pub modes: String,
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathsSection {
    pub corpus: String,
    pub checkpoint: String,
    /// Empty means `$ESOLM_OUTPUT_ROOT/<command>-<hash prefix>`.
    pub output: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub variant: Variant,
    pub alpha0_train: f64,
    pub alpha0_eval: f64,
    pub context_length: usize,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub tokenizer: TokenizerSection,
    pub sampling: SamplingSection,
    pub bench: BenchSection,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            variant: Variant::B,
            alpha0_train: 0.5,
            alpha0_eval: 0.5,
            context_length: 32,
            model: ModelSection {
                layers: 2,
                model_dim: 64,
                heads: 4,
                position_encoding: PositionEncoding::Rotary,
                init_std: 0.02,
            },
            training: TrainingSection {
                steps: 2000,
                lr: 1e-3,
                warmup: 100,
                batch_size: 8,
                mdm_fraction: 0.5,
                weight_decay: 0.0,
                variance_reduced: false,
                log_every: 50,
                eval_examples: 64,
            },
            tokenizer: TokenizerSection {
                mode: TokenizeMode::Char,
                max_vocab: 256,
            },
            sampling: SamplingSection {
                steps: 32,
                count: 4,
                temperature: 1.0,
                nucleus: None,
                cache: true,
            },
            bench: BenchSection {
                lengths: vec![64, 128],
                steps: vec![0],
                modes: "all".into(),
                repeats: 3,
            },
            paths: PathsSection {
                corpus: "data/tiny_corpus.txt".into(),
                checkpoint: String::new(),
                output: String::new(),
            },
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| ConfigError(format!("bad value `{value}` for `{key}`: {e}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>, ConfigError> {
    value.split(',').map(|v| parse(key, v)).collect()
}

fn join(xs: &[usize]) -> String {
    xs.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Every key in canonical order with its current value.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (m, t, k, s, b, p) = (&self.model, &self.training, &self.tokenizer, &self.sampling, &self.bench, &self.paths);
        vec![
            ("seed", self.seed.to_string()),
            ("variant", self.variant.to_string()),
            ("alpha0_train", self.alpha0_train.to_string()),
            ("alpha0_eval", self.alpha0_eval.to_string()),
            ("context_length", self.context_length.to_string()),
            ("model.layers", m.layers.to_string()),
            ("model.model_dim", m.model_dim.to_string()),
            ("model.heads", m.heads.to_string()),
            ("model.position_encoding", m.position_encoding.to_string()),
            ("model.init_std", m.init_std.to_string()),
            ("training.steps", t.steps.to_string()),
            ("training.lr", t.lr.to_string()),
            ("training.warmup", t.warmup.to_string()),
            ("training.batch_size", t.batch_size.to_string()),
            ("training.mdm_fraction", t.mdm_fraction.to_string()),
            ("training.weight_decay", t.weight_decay.to_string()),
            ("training.variance_reduced", t.variance_reduced.to_string()),
            ("training.log_every", t.log_every.to_string()),
            ("training.eval_examples", t.eval_examples.to_string()),
            ("tokenizer.mode", k.mode.to_string()),
            ("tokenizer.max_vocab", k.max_vocab.to_string()),
            ("sampling.steps", s.steps.to_string()),
            ("sampling.count", s.count.to_string()),
            ("sampling.temperature", s.temperature.to_string()),
            ("sampling.nucleus", s.nucleus.map_or("none".into(), |p| p.to_string())),
            ("sampling.cache", s.cache.to_string()),
            ("bench.lengths", join(&b.lengths)),
            ("bench.steps", join(&b.steps)),
            ("bench.modes", b.modes.clone()),
            ("bench.repeats", b.repeats.to_string()),
            ("paths.corpus", p.corpus.clone()),
            ("paths.checkpoint", p.checkpoint.clone()),
            ("paths.output", p.output.clone()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "variant" => self.variant = parse(key, v)?,
            "alpha0_train" => self.alpha0_train = parse(key, v)?,
            "alpha0_eval" => self.alpha0_eval = parse(key, v)?,
            "context_length" => self.context_length = parse(key, v)?,
            "model.layers" => self.model.layers = parse(key, v)?,
            "model.model_dim" => self.model.model_dim = parse(key, v)?,
            "model.heads" => self.model.heads = parse(key, v)?,
            "model.position_encoding" => self.model.position_encoding = parse(key, v)?,
            "model.init_std" => self.model.init_std = parse(key, v)?,
            "training.steps" => self.training.steps = parse(key, v)?,
            "training.lr" => self.training.lr = parse(key, v)?,
            "training.warmup" => self.training.warmup = parse(key, v)?,
            "training.batch_size" => self.training.batch_size = parse(key, v)?,
            "training.mdm_fraction" => self.training.mdm_fraction = parse(key, v)?,
            "training.weight_decay" => self.training.weight_decay = parse(key, v)?,
            "training.variance_reduced" => self.training.variance_reduced = parse(key, v)?,
            "training.log_every" => self.training.log_every = parse(key, v)?,
            "training.eval_examples" => self.training.eval_examples = parse(key, v)?,
            "tokenizer.mode" => self.tokenizer.mode = parse(key, v)?,
            "tokenizer.max_vocab" => self.tokenizer.max_vocab = parse(key, v)?,
            "sampling.steps" => self.sampling.steps = parse(key, v)?,
            "sampling.count" => self.sampling.count = parse(key, v)?,
            "sampling.temperature" => self.sampling.temperature = parse(key, v)?,
            "sampling.nucleus" => self.sampling.nucleus = if v == "none" { None } else { Some(parse(key, v)?) },
            "sampling.cache" => self.sampling.cache = parse(key, v)?,
            "bench.lengths" => self.bench.lengths = parse_list(key, v)?,
            "bench.steps" => self.bench.steps = parse_list(key, v)?,
            "bench.modes" => self.bench.modes = v.to_string(),
            "bench.repeats" => self.bench.repeats = parse(key, v)?,
            "paths.corpus" => self.paths.corpus = v.to_string(),
            "paths.checkpoint" => self.paths.checkpoint = v.to_string(),
            "paths.output" => self.paths.output = v.to_string(),
            other => return Err(ConfigError(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), ConfigError> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| ConfigError(format!("expected key=value, got `{pair}`")))?;
        self.set(k, v)
    }

    /// Applies every assignment in a config file body. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("line {}: expected key = value, got `{raw}`", n + 1)))?;
            self.set(k, v).map_err(|e| ConfigError(format!("line {}: {}", n + 1, e.0)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError(m));
        for (name, a) in [("alpha0_train", self.alpha0_train), ("alpha0_eval", self.alpha0_eval)] {
            if !(0.0..=1.0).contains(&a) {
                return bad(format!("{name} must lie in [0, 1], got {a}"));
            }
        }
        if self.context_length < 2 {
            return bad("context_length must be at least 2".into());
        }
        let t = &self.training;
        if t.batch_size == 0 || !(0.0..=1.0).contains(&t.mdm_fraction) || t.lr.is_nan() || t.lr <= 0.0 {
            return bad("training needs batch_size >= 1, mdm_fraction in [0, 1] and lr > 0".into());
        }
        if self.sampling.steps == 0 || self.sampling.count == 0 || self.sampling.temperature.is_nan() || self.sampling.temperature < 0.0 {
            return bad("sampling needs steps >= 1, count >= 1 and temperature >= 0".into());
        }
        if let Some(p) = self.sampling.nucleus {
            if !(p > 0.0 && p <= 1.0) {
                return bad(format!("sampling.nucleus must lie in (0, 1], got {p}"));
            }
        }
        if self.bench.lengths.is_empty() || self.bench.lengths.contains(&0) || self.bench.repeats == 0 {
            return bad("bench needs positive lengths and repeats".into());
        }
        if self.tokenizer.max_vocab < 4 {
            return bad("tokenizer.max_vocab must be at least 4".into());
        }
        Ok(())
    }

    /// Canonical text: one `key=value` line per key.
    pub fn canonical(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// SHA-256 of [`RunConfig::canonical`], hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.canonical().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Contents of `resolved_config.txt`.
    pub fn resolved_text(&self) -> String {
        format!("# config_hash={} version={}\n{}", self.hash(), VERSION, self.canonical())
    }

    pub fn denoiser_config(&self, vocab: Vocab, max_positions: usize) -> DenoiserConfig {
        DenoiserConfig {
            layers: self.model.layers,
            model_dim: self.model.model_dim,
            heads: self.model.heads,
            vocab,
            max_positions,
            position_encoding: self.model.position_encoding,
        }
    }

    /// Where a command writes its artifacts.
    pub fn output_dir(&self, command: &str) -> PathBuf {
        if !self.paths.output.is_empty() {
            return PathBuf::from(&self.paths.output);
        }
        let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
        root.join(format!("{command}-{}", &self.hash()[..12]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set_pair("sampling.nucleus=0.9").unwrap();
        cfg.set_pair("bench.lengths=8,16").unwrap();
        cfg.set_pair("variant=a").unwrap();
        cfg.set_pair("training.lr=0.00025").unwrap();
        let back = RunConfig::from_text(&cfg.resolved_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_text("trainig.steps = 5\n").unwrap_err();
        assert!(err.0.contains("unknown config key"), "{err}");
        assert!(RunConfig::from_text("seed = x").is_err());
        assert!(RunConfig::from_text("seed").is_err());
    }

    #[test]
    fn comments_and_spacing() {
        let cfg = RunConfig::from_text("# run\n seed = 7 # trailing\n\nalpha0_eval=0.25\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.alpha0_eval, 0.25);
    }

    #[test]
    fn validation_rejects_bad_alpha() {
        let cfg = RunConfig {
            alpha0_eval: 1.5,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        assert!(RunConfig::default().validate().is_ok());
    }

    #[test]
    fn hash_changes_with_values() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
