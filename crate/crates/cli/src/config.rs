//! Flat key-value run configuration.
//!
//! A config file is a TOML document with one level of keys and a mandatory
//! `version`. Relative paths are resolved against the file's directory.
//! Overrides from the command line (`key=value`) replace file keys before
//! validation, and the cache root can also come from [`CACHE_ENV`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ssacrnn::evaluation::{Layout, Mode};
use ssacrnn::features::Framing;
use ssacrnn::model::{CrnnConfig, Stage};
use ssacrnn::pipeline::{RunConfig, Variant};
use ssacrnn::training::{OptimizerConfig, OptimizerKind, RegularizerMode, TauSource, TrainConfig};
use ssacrnn::Error;

pub const VERSION: u32 = 1;

/// Overrides `cache_dir` when set.
pub const CACHE_ENV: &str = "SSA_CRNN_CACHE";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub version: u32,
    pub manifest: PathBuf,
    pub speakers: Option<PathBuf>,
    pub cache_dir: PathBuf,
    pub output_dir: PathBuf,
    /// `iemocap-like`, `atthack-like` or `synthetic`.
    pub layout: String,
    pub synthetic_folds: usize,
    /// `loso` or `speaker_dependent`.
    pub mode: Option<String>,
    pub variant: String,
    pub seed: u64,
    pub emotions: Vec<String>,

    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    pub frames: usize,
    pub log_floor: f64,
    pub delta_width: usize,
    pub segment_seconds: f64,

    pub conv_channels: Vec<usize>,
    pub kernel_time: usize,
    pub kernel_freq: usize,
    pub linear_units: usize,
    pub lstm_cells: usize,
    pub leaky_slope: f64,
    pub speaker_embedding: usize,
    pub emotion_embedding: usize,

    /// `nadam` or `adam`.
    pub optimizer: String,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub balanced: bool,
    pub max_epochs: usize,
    /// 0 disables early stopping.
    pub patience: usize,
    /// 0 disables clipping.
    pub clip_norm: f64,
    /// `reparameterized`, `projection` or `penalty`.
    pub regularizer: String,
    pub penalty_weight: f64,
    /// `current_batch` or `running_average`.
    pub tau_source: String,
    pub tau_momentum: f64,
    pub sp_regularize: bool,
    pub sp_validation_per_cell: usize,

    pub export_embeddings: bool,
    pub parallel: bool,
    pub fold_parallel: bool,
}

impl Default for FileConfig {
    fn default() -> Self {
        let run = RunConfig::default();
        let f = &run.framing;
        let c = &run.crnn;
        let t = &run.train;
        FileConfig {
            version: VERSION,
            manifest: run.manifest.clone(),
            speakers: None,
            cache_dir: run.cache_dir.clone(),
            output_dir: run.output_dir.clone(),
            layout: "iemocap-like".into(),
            synthetic_folds: 2,
            mode: None,
            variant: run.variant.name().into(),
            seed: run.seed,
            emotions: run.emotions.clone(),
            window_ms: f.window_ms,
            hop_ms: f.hop_ms,
            n_mels: f.n_mels,
            frames: f.frames,
            log_floor: f.log_floor,
            delta_width: f.delta_width,
            segment_seconds: f.segment_seconds,
            conv_channels: c.conv_channels.clone(),
            kernel_time: c.kernel_time,
            kernel_freq: c.kernel_freq,
            linear_units: c.linear_units,
            lstm_cells: c.lstm_cells,
            leaky_slope: c.leaky_slope,
            speaker_embedding: run.speaker_embedding,
            emotion_embedding: run.emotion_embedding,
            optimizer: "nadam".into(),
            learning_rate: t.optimizer.learning_rate,
            beta1: t.optimizer.beta1,
            beta2: t.optimizer.beta2,
            epsilon: t.optimizer.epsilon,
            batch_size: t.batch_size,
            balanced: t.balanced,
            max_epochs: t.max_epochs,
            patience: t.patience.unwrap_or(0),
            clip_norm: t.clip_norm.unwrap_or(0.0),
            regularizer: "reparameterized".into(),
            penalty_weight: 1.0,
            tau_source: "current_batch".into(),
            tau_momentum: 0.9,
            sp_regularize: run.sp_regularize,
            sp_validation_per_cell: run.sp_validation_per_cell,
            export_embeddings: run.export_embeddings,
            parallel: run.parallel,
            fold_parallel: run.fold_parallel,
        }
    }
}

fn config_error(msg: impl std::fmt::Display) -> Error {
    Error::Config(msg.to_string())
}

/// Reads `value` as a TOML value, falling back to a bare string.
fn override_value(value: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

impl FileConfig {
    /// Parses a config document and applies `key=value` overrides.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, Error> {
        let mut table: toml::Table = toml::from_str(text).map_err(config_error)?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| config_error(format!("override `{o}` is not key=value")))?;
            table.insert(k.trim().to_string(), override_value(v.trim()));
        }
        match table.get("version") {
            Some(toml::Value::Integer(v)) if *v == i64::from(VERSION) => {}
            Some(v) => return Err(config_error(format!("unsupported config version {v} (expected {VERSION})"))),
            None => return Err(config_error("config has no `version` key")),
        }
        if let Some((k, _)) = table.iter().find(|(_, v)| v.is_table()) {
            return Err(config_error(format!("key `{k}`: nested tables are not allowed")));
        }
        toml::Value::Table(table).try_into().map_err(config_error)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, overrides)
    }

    /// Every key, in declaration order.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    /// Builds the pipeline configuration. Relative paths are taken against
    /// `base`; `cache_override` replaces `cache_dir`.
    pub fn to_run_config(&self, base: &Path, cache_override: Option<PathBuf>) -> Result<RunConfig, Error> {
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let layout = match self.layout.as_str() {
            "iemocap-like" => Layout::IemocapLike,
            "atthack-like" => Layout::AtthackLike,
            "synthetic" => Layout::Synthetic {
                folds: self.synthetic_folds,
            },
            other => return Err(config_error(format!("unknown layout `{other}`"))),
        };
        let mode = self
            .mode
            .as_deref()
            .map(|m| m.parse::<Mode>().map_err(config_error))
            .transpose()?;
        let kind = match self.optimizer.as_str() {
            "nadam" => OptimizerKind::Nadam,
            "adam" => OptimizerKind::Adam,
            other => return Err(config_error(format!("unknown optimizer `{other}`"))),
        };
        let regularizer = match self.regularizer.as_str() {
            "reparameterized" => RegularizerMode::Reparameterized,
            "projection" => RegularizerMode::Projection,
            "penalty" => RegularizerMode::Penalty {
                weight: self.penalty_weight,
            },
            other => return Err(config_error(format!("unknown regularizer `{other}`"))),
        };
        let tau_source = match self.tau_source.as_str() {
            "current_batch" => TauSource::CurrentBatch,
            "running_average" => TauSource::RunningAverage {
                momentum: self.tau_momentum,
            },
            other => return Err(config_error(format!("unknown tau_source `{other}`"))),
        };
        let run = RunConfig {
            manifest: resolve(&self.manifest),
            speakers: self.speakers.as_deref().map(resolve),
            cache_dir: cache_override.unwrap_or_else(|| resolve(&self.cache_dir)),
            output_dir: resolve(&self.output_dir),
            layout,
            mode,
            variant: self.variant.parse::<Variant>()?,
            seed: self.seed,
            emotions: self.emotions.clone(),
            framing: Framing {
                window_ms: self.window_ms,
                hop_ms: self.hop_ms,
                n_mels: self.n_mels,
                frames: self.frames,
                log_floor: self.log_floor,
                delta_width: self.delta_width,
                segment_seconds: self.segment_seconds,
                ..Framing::default()
            },
            crnn: CrnnConfig {
                conv_channels: self.conv_channels.clone(),
                kernel_time: self.kernel_time,
                kernel_freq: self.kernel_freq,
                linear_units: self.linear_units,
                lstm_cells: self.lstm_cells,
                leaky_slope: self.leaky_slope,
                frames: self.frames,
                mel_bands: self.n_mels,
                ..CrnnConfig::default()
            },
            speaker_embedding: self.speaker_embedding,
            emotion_embedding: self.emotion_embedding,
            train: TrainConfig {
                batch_size: self.batch_size,
                optimizer: OptimizerConfig {
                    kind,
                    learning_rate: self.learning_rate,
                    beta1: self.beta1,
                    beta2: self.beta2,
                    epsilon: self.epsilon,
                },
                max_epochs: self.max_epochs,
                patience: (self.patience > 0).then_some(self.patience),
                regularizer,
                tau_source,
                balanced: self.balanced,
                clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
                ..TrainConfig::for_stage(Stage::Em)
            },
            sp_regularize: self.sp_regularize,
            sp_validation_per_cell: self.sp_validation_per_cell,
            export_embeddings: self.export_embeddings,
            parallel: self.parallel,
            fold_parallel: self.fold_parallel,
        };
        run.validate()?;
        Ok(run)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn override_values_are_typed() {
        assert_eq!(override_value("3"), toml::Value::Integer(3));
        assert_eq!(override_value("1e-3"), toml::Value::Float(1e-3));
        assert_eq!(override_value("true"), toml::Value::Boolean(true));
        assert_eq!(override_value("acrnn-r"), toml::Value::String("acrnn-r".into()));
        assert_eq!(
            override_value("[4, 4]"),
            toml::Value::Array(vec![toml::Value::Integer(4), toml::Value::Integer(4)])
        );
    }

    #[test]
    fn defaults_match_the_library() {
        let run = FileConfig {
            mode: Some("loso".into()),
            ..FileConfig::default()
        }
        .to_run_config(Path::new(""), None)
        .unwrap();
        let lib = RunConfig {
            mode: Some(Mode::Loso),
            ..RunConfig::default()
        };
        assert_eq!(run, lib);
    }
}
