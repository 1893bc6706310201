//! Run configuration: defaults, the flat `key = value` config file, JSON
//! round-tripping, and command-line overrides. Flags beat file values,
//! file values beat defaults.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use dgsagnn_core::graph::{RebuildSchedule, RebuildSource};
use dgsagnn_core::similarity::SimilarityKind;
use dgsagnn_core::train::TrainConfig;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Dgsagnn,
    Lightgcn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Similarity {
    Cosine,
    Jaccard,
    Dpcc,
    Ipij,
    AllFused,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    Interactions,
    Embeddings,
}

impl Similarity {
    /// The view list the model is built over; `AllFused` runs all four.
    pub fn views(self) -> Vec<SimilarityKind> {
        match self {
            Similarity::Cosine => vec![SimilarityKind::Cosine],
            Similarity::Jaccard => vec![SimilarityKind::Jaccard],
            Similarity::Dpcc => vec![SimilarityKind::DiscountPcc],
            Similarity::Ipij => vec![SimilarityKind::IpIj],
            Similarity::AllFused => SimilarityKind::ALL.to_vec(),
        }
    }
}

impl Source {
    pub fn to_core(self) -> RebuildSource {
        match self {
            Source::Interactions => RebuildSource::Interactions,
            Source::Embeddings => RebuildSource::Embeddings,
        }
    }
}

/// Display and FromStr reuse the clap value names so the flat config file,
/// the JSON form, and the flags all accept the same spellings.
macro_rules! string_via_value_enum {
    ($ty:ty) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.to_possible_value().unwrap().get_name())
            }
        }

        impl FromStr for $ty {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                <$ty as ValueEnum>::from_str(s, false)
            }
        }
    };
}

string_via_value_enum!(Method);
string_via_value_enum!(Similarity);
string_via_value_enum!(Source);

/// Everything a run needs. Serializes to JSON as written next to run
/// artifacts; that file reloads to an identical run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub method: Method,
    pub similarity: Similarity,
    pub rebuild_source: Source,
    pub layer_attention: bool,
    /// Hard negative mining for the lightgcn baseline (uniform by default).
    pub baseline_hard_negatives: bool,
    pub data_path: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub epochs: u32,
    pub batch_size: usize,
    pub lr: f64,
    pub l2: f64,
    pub hard_ratio: f64,
    pub pool_size: usize,
    pub clip_norm: f64,
    pub rebuild_epochs: Vec<u32>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: Method::Dgsagnn,
            similarity: Similarity::AllFused,
            rebuild_source: Source::Interactions,
            layer_attention: false,
            baseline_hard_negatives: false,
            data_path: PathBuf::from("data/ml-100k/u.data"),
            out_dir: PathBuf::from("out"),
            seed: 1,
            epochs: 20,
            batch_size: 1024,
            lr: 1e-3,
            l2: 1e-4,
            hard_ratio: 0.7,
            pool_size: 200,
            clip_norm: 5.0,
            rebuild_epochs: RebuildSchedule::default_run().epochs().collect(),
        }
    }
}

impl RunConfig {
    /// Apply a config file on top of the defaults. JSON (as written by
    /// `train`) is detected by a leading brace; anything else parses as
    /// flat `key = value` lines with `#` comments.
    pub fn apply_file(&mut self, contents: &str) -> Result<(), CliError> {
        if contents.trim_start().starts_with('{') {
            *self = serde_json::from_str(contents)
                .map_err(|e| CliError::Usage(format!("bad JSON config: {e}")))?;
            return Ok(());
        }
        for (idx, raw) in contents.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!("config line {}: expected key = value", idx + 1))
            })?;
            self.set(key.trim(), value.trim())
                .map_err(|e| CliError::Usage(format!("config line {}: {e}", idx + 1)))?;
        }
        Ok(())
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String>
        where
            T::Err: fmt::Display,
        {
            value.parse().map_err(|e| format!("{key}: {e}"))
        }

        match key {
            "method" => self.method = parse(key, value)?,
            "similarity" => self.similarity = parse(key, value)?,
            "rebuild_source" => self.rebuild_source = parse(key, value)?,
            "layer_attention" => self.layer_attention = parse(key, value)?,
            "baseline_hard_negatives" => self.baseline_hard_negatives = parse(key, value)?,
            "data_path" => self.data_path = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "seed" => self.seed = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "l2" => self.l2 = parse(key, value)?,
            "hard_ratio" => self.hard_ratio = parse(key, value)?,
            "pool_size" => self.pool_size = parse(key, value)?,
            "clip_norm" => self.clip_norm = parse(key, value)?,
            "rebuild_epochs" => self.rebuild_epochs = parse_epoch_list(value)?,
            other => return Err(format!("unknown key {other:?}")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |msg: String| Err(CliError::Usage(msg));
        if !(0.0..=1.0).contains(&self.hard_ratio) {
            return usage(format!("hard_ratio {} must be in [0, 1]", self.hard_ratio));
        }
        if self.batch_size == 0 || self.pool_size == 0 {
            return usage("batch_size and pool_size must be positive".into());
        }
        if !(self.lr >= 0.0) || !(self.l2 >= 0.0) || !(self.clip_norm > 0.0) {
            return usage(format!(
                "lr {} and l2 {} must be >= 0, clip_norm {} must be > 0",
                self.lr, self.l2, self.clip_norm
            ));
        }
        if self.method == Method::Dgsagnn && !self.rebuild_epochs.contains(&0) {
            return usage("rebuild_epochs must include epoch 0 so the first forward has graphs".into());
        }
        Ok(())
    }

    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            l2: self.l2,
            hard_ratio: self.hard_ratio,
            pool_size: self.pool_size,
            clip_norm: self.clip_norm,
            schedule: RebuildSchedule::from_epochs(self.rebuild_epochs.iter().copied()),
            seed: self.seed,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

fn parse_epoch_list(value: &str) -> Result<Vec<u32>, String> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|part| part.trim().parse::<u32>().map_err(|e| format!("rebuild_epochs: {e}")))
        .collect()
}

/// Shared `--config` plus per-field overrides, flattened into every
/// subcommand that runs the pipeline.
#[derive(Debug, clap::Args)]
pub struct ConfigArgs {
    /// Config file: flat key = value lines, or the JSON written by train
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model to run
    #[arg(long)]
    pub method: Option<Method>,
    /// Similarity view(s) for the graph model
    #[arg(long)]
    pub similarity: Option<Similarity>,
    /// Signal the scheduled graph rebuilds read from
    #[arg(long)]
    pub rebuild_source: Option<Source>,
    /// Mix propagation depths with learned attention weights
    #[arg(long)]
    pub layer_attention: Option<bool>,
    /// Let the lightgcn baseline mine hard negatives too
    #[arg(long)]
    pub baseline_hard_negatives: Option<bool>,
    /// Ratings file (tab-separated user item rating timestamp)
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Directory for run artifacts
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Master seed; split, init, dropout, and sampling derive from it
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training epochs
    #[arg(long)]
    pub epochs: Option<u32>,
    /// Triples per optimization step
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam learning rate
    #[arg(long)]
    pub lr: Option<f64>,
    /// L2 regularization weight
    #[arg(long)]
    pub l2: Option<f64>,
    /// Fraction of negatives drawn from the hard pool
    #[arg(long)]
    pub hard_ratio: Option<f64>,
    /// Hard negative pool size per user
    #[arg(long)]
    pub pool_size: Option<usize>,
    /// Global gradient norm clip
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Comma-separated epochs at which graphs are rebuilt
    #[arg(long)]
    pub rebuild_epochs: Option<String>,
}

impl ConfigArgs {
    /// Defaults, then the config file, then flags; validated at the end.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut config = RunConfig::default();
        if let Some(path) = &self.config {
            let contents = std::fs::read_to_string(path).map_err(|e| {
                CliError::Usage(format!("cannot read config {}: {e}", path.display()))
            })?;
            config.apply_file(&contents)?;
        }
        if let Some(v) = self.method {
            config.method = v;
        }
        if let Some(v) = self.similarity {
            config.similarity = v;
        }
        if let Some(v) = self.rebuild_source {
            config.rebuild_source = v;
        }
        if let Some(v) = self.layer_attention {
            config.layer_attention = v;
        }
        if let Some(v) = self.baseline_hard_negatives {
            config.baseline_hard_negatives = v;
        }
        if let Some(v) = &self.data {
            config.data_path = v.clone();
        }
        if let Some(v) = &self.out {
            config.out_dir = v.clone();
        }
        if let Some(v) = self.seed {
            config.seed = v;
        }
        if let Some(v) = self.epochs {
            config.epochs = v;
        }
        if let Some(v) = self.batch_size {
            config.batch_size = v;
        }
        if let Some(v) = self.lr {
            config.lr = v;
        }
        if let Some(v) = self.l2 {
            config.l2 = v;
        }
        if let Some(v) = self.hard_ratio {
            config.hard_ratio = v;
        }
        if let Some(v) = self.pool_size {
            config.pool_size = v;
        }
        if let Some(v) = self.clip_norm {
            config.clip_norm = v;
        }
        if let Some(v) = &self.rebuild_epochs {
            config.rebuild_epochs = parse_epoch_list(v).map_err(CliError::Usage)?;
        }
        config.validate()?;
        Ok(config)
    }
}
