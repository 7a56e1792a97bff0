use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::classifier::Classifier;
use super::config::ClassifierSpec;
use super::params::{ParamInfo, ParamSet};
use crate::container;
use crate::error::{Error, Result};

pub const CHECKPOINT_KIND: &str = "checkpoint";

/// Training stage that produced a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Sp,
    Em,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Sp => "sp",
            Stage::Em => "em",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub version: u32,
    pub stage: Stage,
    pub variant: String,
    pub spec: ClassifierSpec,
    pub class_names: Vec<String>,
    pub registry: Vec<ParamInfo>,
    pub seed: u64,
    pub frozen: bool,
    /// Content hash of the speaker checkpoint an emotion model was trained against.
    pub sp_checkpoint_hash: Option<String>,
    /// Speakers withheld from this stage's training data.
    pub excluded_speakers: Vec<String>,
    pub epoch: usize,
    pub validation_uar: f64,
}

/// Everything in the header besides what the classifier itself provides.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub stage: Stage,
    pub variant: String,
    pub seed: u64,
    pub sp_checkpoint_hash: Option<String>,
    pub excluded_speakers: Vec<String>,
    pub epoch: usize,
    pub validation_uar: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn content_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Writes a checkpoint (parameters rounded to `f32`) and returns its content hash.
pub fn save(path: &Path, model: &Classifier, meta: &CheckpointMeta) -> Result<String> {
    let header = CheckpointHeader {
        kind: CHECKPOINT_KIND.into(),
        version: 1,
        stage: meta.stage,
        variant: meta.variant.clone(),
        spec: model.spec().clone(),
        class_names: model.class_names().to_vec(),
        registry: model.params().registry(),
        seed: meta.seed,
        frozen: model.is_frozen(),
        sp_checkpoint_hash: meta.sp_checkpoint_hash.clone(),
        excluded_speakers: meta.excluded_speakers.clone(),
        epoch: meta.epoch,
        validation_uar: meta.validation_uar,
    };
    let payload: Vec<f32> = model.params().flat().iter().map(|&v| v as f32).collect();
    let bytes = container::encode(&header, &payload)?;
    container::write_atomic(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn load(path: &Path) -> Result<(Classifier, CheckpointHeader)> {
    let (header, payload): (CheckpointHeader, Vec<f32>) = container::read(path)?;
    if header.kind != CHECKPOINT_KIND {
        return Err(Error::Format(format!("{}: kind `{}`", path.display(), header.kind)));
    }
    let values: Vec<f64> = payload.into_iter().map(f64::from).collect();
    let params = ParamSet::from_flat(&header.spec, &header.registry, &values)?;
    let mut model = Classifier::from_params(header.spec.clone(), header.class_names.clone(), params)?;
    if header.frozen {
        model.freeze();
    }
    Ok((model, header))
}
