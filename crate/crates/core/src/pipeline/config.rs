//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Values may be
//! wrapped in double quotes. Unknown keys are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use crate::fusenet::Architecture;
use crate::numerics::AdamConfig;
use crate::objective::LossWeights;
use crate::perception::{HttpConfig, QuestionSet, DEFAULT_QUESTIONS, QUESTION_COUNT};

#[derive(Debug, thiserror::Error)]
#[error("{source_name}:{line}: {message}")]
pub struct ConfigError {
    pub source_name: String,
    /// 1-based line number; 0 for command-line overrides and validation.
    pub line: usize,
    pub message: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackendKind {
    Stub,
    Http,
}

impl FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "stub" => Ok(Self::Stub),
            "http" => Ok(Self::Http),
            other => Err(format!("unknown backend {other:?} (expected stub or http)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Defaults to `answers.jsonl` inside `out_dir`.
    pub cache_path: Option<PathBuf>,
    pub epochs: usize,
    pub batch_size: usize,
    pub resize: usize,
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub backend: BackendKind,
    /// Seed of the stub answer and text backends.
    pub backend_seed: u64,
    pub backend_url: String,
    pub answer_model: String,
    pub embed_model: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub max_concurrency: usize,
    /// Epochs between refreshes of each fused image's answers.
    pub refresh_interval: usize,
    pub disable_text_guidance: bool,
    pub disable_hier_loss: bool,
    pub channels: usize,
    pub scales: usize,
    pub embed_dim: usize,
    pub attn_dim: usize,
    pub questions: [String; QUESTION_COUNT],
    pub json_log: bool,
    pub resume: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let arch = Architecture::default();
        let adam = AdamConfig::default();
        let weights = LossWeights::default();
        let http = HttpConfig::default();
        Self {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            cache_path: None,
            epochs: 100,
            batch_size: 8,
            resize: 224,
            alpha: weights.alpha,
            beta: weights.beta,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            seed: 0,
            backend: BackendKind::Stub,
            backend_seed: 0,
            backend_url: http.base_url,
            answer_model: "llava-v1.5-7b".into(),
            embed_model: "clip-vit-b-32".into(),
            timeout_secs: http.timeout.as_secs(),
            max_retries: http.max_retries,
            max_concurrency: http.max_concurrency,
            refresh_interval: 1,
            disable_text_guidance: false,
            disable_hier_loss: false,
            channels: arch.channels,
            scales: arch.scales,
            embed_dim: arch.embed_dim,
            attn_dim: arch.attn_dim,
            questions: DEFAULT_QUESTIONS.map(String::from),
            json_log: false,
            resume: false,
        }
    }
}

fn parse<T: FromStr>(value: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| format!("invalid value {value:?}: {e}"))
}

impl TrainConfig {
    pub const KEYS: [&'static str; 34] = [
        "data_dir",
        "out_dir",
        "cache_path",
        "epochs",
        "batch_size",
        "resize",
        "alpha",
        "beta",
        "lr",
        "beta1",
        "beta2",
        "epsilon",
        "seed",
        "backend",
        "backend_seed",
        "backend_url",
        "answer_model",
        "embed_model",
        "timeout_secs",
        "max_retries",
        "max_concurrency",
        "refresh_interval",
        "disable_text_guidance",
        "disable_hier_loss",
        "channels",
        "scales",
        "embed_dim",
        "attn_dim",
        "question1",
        "question2",
        "question3",
        "question4",
        "json_log",
        "resume",
    ];

    /// Assign one key; used by the file parser and command-line overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        let v = v.strip_prefix('"').and_then(|s| s.strip_suffix('"')).unwrap_or(v);
        match key {
            "data_dir" => self.data_dir = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "cache_path" => self.cache_path = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "epochs" => self.epochs = parse(v)?,
            "batch_size" => self.batch_size = parse(v)?,
            "resize" => self.resize = parse(v)?,
            "alpha" => self.alpha = parse(v)?,
            "beta" => self.beta = parse(v)?,
            "lr" => self.lr = parse(v)?,
            "beta1" => self.beta1 = parse(v)?,
            "beta2" => self.beta2 = parse(v)?,
            "epsilon" => self.epsilon = parse(v)?,
            "seed" => self.seed = parse(v)?,
            "backend" => self.backend = parse(v)?,
            "backend_seed" => self.backend_seed = parse(v)?,
            "backend_url" => self.backend_url = v.to_owned(),
            "answer_model" => self.answer_model = v.to_owned(),
            "embed_model" => self.embed_model = v.to_owned(),
            "timeout_secs" => self.timeout_secs = parse(v)?,
            "max_retries" => self.max_retries = parse(v)?,
            "max_concurrency" => self.max_concurrency = parse(v)?,
            "refresh_interval" => self.refresh_interval = parse(v)?,
            "disable_text_guidance" => self.disable_text_guidance = parse(v)?,
            "disable_hier_loss" => self.disable_hier_loss = parse(v)?,
            "channels" => self.channels = parse(v)?,
            "scales" => self.scales = parse(v)?,
            "embed_dim" => self.embed_dim = parse(v)?,
            "attn_dim" => self.attn_dim = parse(v)?,
            "question1" | "question2" | "question3" | "question4" => {
                let i = usize::from(key.as_bytes()[8] - b'1');
                self.questions[i] = v.to_owned();
            }
            "json_log" => self.json_log = parse(v)?,
            "resume" => self.resume = parse(v)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Parse file text over the defaults, then validate.
    pub fn parse(text: &str, source_name: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| ConfigError { source_name: source_name.to_owned(), line: i + 1, message };
            let (key, value) = line.split_once('=').ok_or_else(|| err("expected key = value".into()))?;
            cfg.set(key.trim(), value).map_err(err)?;
        }
        cfg.validate().map_err(|message| ConfigError { source_name: source_name.to_owned(), line: 0, message })?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let name = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            source_name: name.clone(),
            line: 0,
            message: e.to_string(),
        })?;
        Self::parse(&text, &name)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.epochs < 1 {
            return Err("epochs must be at least 1".into());
        }
        if self.batch_size < 2 {
            return Err("batch_size must be at least 2".into());
        }
        if self.resize < 32 {
            return Err("resize must be at least 32".into());
        }
        for (k, w) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(format!("{k} must be a finite non-negative number"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err("lr must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err("beta1 and beta2 must be in [0,1) and epsilon positive".into());
        }
        if self.refresh_interval < 1 {
            return Err("refresh_interval must be at least 1".into());
        }
        if self.max_concurrency < 1 {
            return Err("max_concurrency must be at least 1".into());
        }
        QuestionSet::new(self.questions.clone()).map_err(|e| e.to_string())?;
        self.architecture().validate().map_err(|e| e.to_string())?;
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            channels: self.channels,
            scales: self.scales,
            embed_dim: self.embed_dim,
            attn_dim: self.attn_dim,
            blocks: Architecture::default().blocks,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, epsilon: self.epsilon }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { alpha: self.alpha, beta: self.beta }
    }

    pub fn question_set(&self) -> QuestionSet {
        QuestionSet::new(self.questions.clone()).expect("validated")
    }

    /// HTTP settings; the environment overrides the configured URL.
    pub fn http(&self) -> HttpConfig {
        HttpConfig {
            base_url: self.backend_url.clone(),
            api_key: None,
            timeout: Duration::from_secs(self.timeout_secs),
            max_retries: self.max_retries,
            backoff: HttpConfig::default().backoff,
            max_concurrency: self.max_concurrency,
        }
        .from_env()
    }

    pub fn cache_path(&self) -> PathBuf {
        self.cache_path.clone().unwrap_or_else(|| self.out_dir.join("answers.jsonl"))
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: String| writeln!(out, "{k} = {v}").expect("string write");
        line("data_dir", self.data_dir.display().to_string());
        line("out_dir", self.out_dir.display().to_string());
        line("cache_path", self.cache_path.as_ref().map(|p| p.display().to_string()).unwrap_or_default());
        line("epochs", self.epochs.to_string());
        line("batch_size", self.batch_size.to_string());
        line("resize", self.resize.to_string());
        line("alpha", self.alpha.to_string());
        line("beta", self.beta.to_string());
        line("lr", self.lr.to_string());
        line("beta1", self.beta1.to_string());
        line("beta2", self.beta2.to_string());
        line("epsilon", self.epsilon.to_string());
        line("seed", self.seed.to_string());
        line("backend", if self.backend == BackendKind::Stub { "stub" } else { "http" }.into());
        line("backend_seed", self.backend_seed.to_string());
        line("backend_url", self.backend_url.clone());
        line("answer_model", self.answer_model.clone());
        line("embed_model", self.embed_model.clone());
        line("timeout_secs", self.timeout_secs.to_string());
        line("max_retries", self.max_retries.to_string());
        line("max_concurrency", self.max_concurrency.to_string());
        line("refresh_interval", self.refresh_interval.to_string());
        line("disable_text_guidance", self.disable_text_guidance.to_string());
        line("disable_hier_loss", self.disable_hier_loss.to_string());
        line("channels", self.channels.to_string());
        line("scales", self.scales.to_string());
        line("embed_dim", self.embed_dim.to_string());
        line("attn_dim", self.attn_dim.to_string());
        for (i, q) in self.questions.iter().enumerate() {
            line(&format!("question{}", i + 1), format!("\"{q}\""));
        }
        line("json_log", self.json_log.to_string());
        line("resume", self.resume.to_string());
        out
    }
}
