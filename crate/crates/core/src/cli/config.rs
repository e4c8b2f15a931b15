use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::arch::{param_count, ModelConfig};
use crate::data::{byte_tokenize, load_text_file, load_token_file, synthetic_corpus, TokenStream};
use crate::error::{Error, Result};
use crate::optim::OptimConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable overriding the root that relative output
/// directories are resolved against.
pub const OUT_ENV: &str = "AN_LAB_OUT";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Generated word-level byte corpus; see [`synthetic_corpus`].
    Synthetic { bytes: usize, seed: u64 },
    /// UTF-8 text file, one token per byte.
    Text { path: PathBuf },
    /// Binary token file written by [`crate::data::save_token_file`].
    Tokens { path: PathBuf },
}

fn d_batch() -> usize {
    32
}
fn d_seq() -> usize {
    256
}
fn d_eval_fraction() -> f64 {
    0.05
}
fn d_eval_batches() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_seq")]
    pub seq_len: usize,
    /// Tail fraction of the stream held out for evaluation.
    #[serde(default = "d_eval_fraction")]
    pub eval_fraction: f64,
    #[serde(default = "d_eval_batches")]
    pub eval_batches: usize,
    #[serde(default)]
    pub eval_batch_size: Option<usize>,
    /// Batch-sampling seed; defaults to the run seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn d_one() -> u64 {
    1
}
fn d_trace() -> u64 {
    10
}
fn d_flush() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_one")]
    pub log_every: u64,
    /// 0 evaluates only after the last step.
    #[serde(default)]
    pub eval_every: u64,
    /// 0 writes only the final checkpoint.
    #[serde(default)]
    pub checkpoint_every: u64,
    /// Block norms, α, row and γ norms. 0 disables.
    #[serde(default = "d_trace")]
    pub trace_every: u64,
    /// First-moment variance per matrix. 0 disables.
    #[serde(default = "d_one")]
    pub moment_every: u64,
    /// Metric records buffered between writes.
    #[serde(default = "d_flush")]
    pub flush_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            log_every: 1,
            eval_every: 0,
            checkpoint_every: 0,
            trace_every: d_trace(),
            moment_every: 1,
            flush_every: d_flush(),
        }
    }
}

fn d_schema() -> u32 {
    SCHEMA_VERSION
}
fn d_output() -> String {
    "runs/default".into()
}

/// Everything one training run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "d_schema")]
    pub schema_version: u32,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub data: DataConfig,
    #[serde(default = "d_one")]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    /// Relative paths resolve against `$AN_LAB_OUT` or the working
    /// directory.
    #[serde(default = "d_output")]
    pub output_dir: String,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if c.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                c.schema_version
            )));
        }
        Ok(c)
    }

    /// Reads a config file; relative data paths are made absolute
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let DataSource::Text { path: p } | DataSource::Tokens { path: p } = &mut c.data.source {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(c)
    }

    /// Copy with every default written out.
    pub fn materialized(&self) -> Self {
        let mut c = self.clone();
        c.model = self.model.materialized();
        c.optim = self
            .optim
            .materialized(self.model.variant, param_count(&self.model));
        c.data.seed.get_or_insert(self.seed);
        c.data.eval_batch_size.get_or_insert(self.data.batch_size);
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim
            .materialized(self.model.variant, param_count(&self.model))
            .validate()?;
        let d = &self.data;
        if d.batch_size == 0 || d.seq_len == 0 || d.eval_batches == 0 || d.eval_batch_size == Some(0) {
            return Err(Error::Config("data: batch_size, seq_len and eval_batches must be positive".into()));
        }
        if d.seq_len > self.model.context_len {
            return Err(Error::Config(format!(
                "data.seq_len {} exceeds model.context_len {}",
                d.seq_len, self.model.context_len
            )));
        }
        if !(d.eval_fraction > 0.0 && d.eval_fraction < 1.0) {
            return Err(Error::Config("data.eval_fraction must lie in (0, 1)".into()));
        }
        if self.optim.total_steps == 0 {
            return Err(Error::Config("optim.total_steps must be positive".into()));
        }
        if self.train.log_every == 0 {
            return Err(Error::Config("train.log_every must be positive".into()));
        }
        Ok(())
    }

    /// Output directory after applying `$AN_LAB_OUT`.
    pub fn output_path(&self) -> PathBuf {
        resolve_output(Path::new(&self.output_dir))
    }
}

/// Absolute paths pass through; relative ones land under `$AN_LAB_OUT`
/// when set.
pub fn resolve_output(p: &Path) -> PathBuf {
    if p.is_absolute() {
        return p.to_path_buf();
    }
    match std::env::var_os(OUT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

/// Loads or generates the token stream and checks it against the
/// vocabulary.
pub fn load_stream(cfg: &RunConfig) -> Result<TokenStream> {
    let s = match &cfg.data.source {
        DataSource::Synthetic { bytes, seed } => {
            let mut s = byte_tokenize(&synthetic_corpus(*bytes, *seed));
            s.source = format!("synthetic:{bytes}:{seed}");
            s
        }
        DataSource::Text { path } => load_text_file(path)?,
        DataSource::Tokens { path } => load_token_file(path)?,
    };
    if s.vocab_size > cfg.model.vocab_size {
        return Err(Error::Config(format!(
            "corpus `{}` needs vocab_size {} but model.vocab_size is {}",
            s.source, s.vocab_size, cfg.model.vocab_size
        )));
    }
    Ok(s)
}
