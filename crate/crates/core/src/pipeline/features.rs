use std::path::PathBuf;

use super::RunConfig;
use crate::container;
use crate::error::{Error, Result};
use crate::features::cache::{block_path, write_block, BlockHeader};
use crate::features::manifest::{self, ManifestEntry};
use crate::features::wav::read_wav;
use crate::features::{extract, segment, UtteranceRecord};
use crate::model::checkpoint::sha256_hex;

pub const ERRORS_FILE: &str = "errors.tsv";

/// An utterance that could not be cached.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureError {
    pub utterance_id: String,
    pub path: PathBuf,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FeaturesReport {
    pub utterances: usize,
    pub segments: usize,
    pub written: usize,
    pub skipped: usize,
    pub errors: Vec<FeatureError>,
}

/// `(written, skipped)` segment counts for one utterance.
fn cache_one(entry: &ManifestEntry, cfg: &RunConfig) -> Result<(usize, usize)> {
    if !cfg.emotions.contains(&entry.emotion_label) {
        return Err(Error::invalid(format!(
            "emotion `{}` is not one of {:?}",
            entry.emotion_label, cfg.emotions
        )));
    }
    let bytes = std::fs::read(&entry.path)?;
    let (audio, sample_rate) = read_wav(&entry.path)?;
    let mut keyed = bytes;
    keyed.extend_from_slice(serde_json::to_string(&cfg.framing)?.as_bytes());
    keyed.extend_from_slice(format!("\n{}\n{}", entry.speaker_id, entry.emotion_label).as_bytes());
    let hash = sha256_hex(&keyed);

    let count = segment(&audio, sample_rate, cfg.framing.segment_seconds).len();
    let fresh = count > 0
        && (0..count).all(|s| {
            container::read_header::<BlockHeader>(&block_path(&cfg.cache_dir, &entry.utterance_id, s))
                .is_ok_and(|h| h.source_hash == hash)
        });
    if fresh {
        return Ok((0, count));
    }
    let record = UtteranceRecord {
        audio,
        sample_rate,
        speaker_id: entry.speaker_id.clone(),
        emotion_label: entry.emotion_label.clone(),
        utterance_id: entry.utterance_id.clone(),
    };
    let blocks = extract(&record, &cfg.framing)?;
    for b in &blocks {
        write_block(&cfg.cache_dir, b, sample_rate, &cfg.framing, &hash)?;
    }
    Ok((blocks.len(), 0))
}

/// Extracts and caches features for every manifest entry. Files that are
/// already cached from identical audio and settings are left alone;
/// unreadable audio is recorded in `errors.tsv` and skipped.
pub fn cmd_features(cfg: &RunConfig) -> Result<FeaturesReport> {
    let entries = manifest::read(&cfg.manifest)?;
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = entries.iter().find(|e| !seen.insert(&e.utterance_id)) {
        return Err(Error::invalid(format!("utterance id `{}` appears twice", dup.utterance_id)));
    }
    std::fs::create_dir_all(&cfg.cache_dir)?;
    let results = cfg.execution().map(&entries, |e| cache_one(e, cfg));

    let mut report = FeaturesReport::default();
    for (e, r) in entries.iter().zip(results) {
        match r {
            Ok((w, s)) => {
                report.utterances += 1;
                report.written += w;
                report.skipped += s;
                report.segments += w + s;
            }
            Err(err) => {
                log::warn!("{}: {err}", e.path.display());
                report.errors.push(FeatureError {
                    utterance_id: e.utterance_id.clone(),
                    path: e.path.clone(),
                    message: err.to_string(),
                });
            }
        }
    }
    let listing: String = report
        .errors
        .iter()
        .map(|e| format!("{}\t{}\t{}\n", e.utterance_id, e.path.display(), e.message.replace(['\t', '\n'], " ")))
        .collect();
    let errors_path = cfg.cache_dir.join(ERRORS_FILE);
    if std::fs::read_to_string(&errors_path).ok().as_deref() != Some(listing.as_str()) {
        container::write_atomic(&errors_path, listing.as_bytes())?;
    }
    Ok(report)
}
