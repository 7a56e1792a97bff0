//! On-disk feature cache: one container file per segment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{FeatureBlock, Framing};
use crate::container;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const BLOCK_KIND: &str = "feature_block";
pub const EXTENSION: &str = "feat";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockHeader {
    pub kind: String,
    pub version: u32,
    pub shape: Vec<usize>,
    pub speaker_id: String,
    pub emotion_label: String,
    pub utterance_id: String,
    pub segment_index: usize,
    pub sample_rate: u32,
    pub framing: Framing,
    /// Hash of the source audio and framing; equal hashes mean the file is
    /// up to date.
    pub source_hash: String,
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

pub fn block_path(dir: &Path, utterance_id: &str, segment_index: usize) -> PathBuf {
    dir.join(format!("{}.{:03}.{EXTENSION}", sanitize(utterance_id), segment_index))
}

pub fn write_block(dir: &Path, block: &FeatureBlock, sample_rate: u32, framing: &Framing, source_hash: &str) -> Result<PathBuf> {
    let header = BlockHeader {
        kind: BLOCK_KIND.into(),
        version: 1,
        shape: block.data.shape().to_vec(),
        speaker_id: block.speaker_id.clone(),
        emotion_label: block.emotion_label.clone(),
        utterance_id: block.utterance_id.clone(),
        segment_index: block.segment_index,
        sample_rate,
        framing: framing.clone(),
        source_hash: source_hash.into(),
    };
    let payload: Vec<f32> = block.data.data().iter().map(|&v| v as f32).collect();
    let path = block_path(dir, &block.utterance_id, block.segment_index);
    container::write(&path, &header, &payload)?;
    Ok(path)
}

pub fn read_block(path: &Path) -> Result<(FeatureBlock, BlockHeader)> {
    let (header, payload): (BlockHeader, Vec<f32>) = container::read(path)?;
    if header.kind != BLOCK_KIND {
        return Err(Error::Format(format!("{}: kind `{}`", path.display(), header.kind)));
    }
    let data = Tensor::new(header.shape.clone(), payload.into_iter().map(f64::from).collect())
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let block = FeatureBlock {
        data,
        speaker_id: header.speaker_id.clone(),
        emotion_label: header.emotion_label.clone(),
        utterance_id: header.utterance_id.clone(),
        segment_index: header.segment_index,
    };
    Ok((block, header))
}

/// All cached blocks in a directory, ordered by utterance then segment.
pub fn load_dir(dir: &Path) -> Result<Vec<FeatureBlock>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == EXTENSION))
        .collect();
    paths.sort();
    let mut blocks = paths
        .iter()
        .map(|p| read_block(p).map(|(b, _)| b))
        .collect::<Result<Vec<_>>>()?;
    blocks.sort_by(|a, b| (&a.utterance_id, a.segment_index).cmp(&(&b.utterance_id, b.segment_index)));
    Ok(blocks)
}
