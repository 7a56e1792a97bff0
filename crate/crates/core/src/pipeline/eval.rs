use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::train::{load_corpus, load_speaker_tower};
use super::RunConfig;
use crate::container;
use crate::error::{Error, Result};
use crate::evaluation::{aggregate, Aggregate, ConfusionMatrix};
use crate::features::FeatureBlock;
use crate::model::checkpoint;
use crate::model::Stage;
use crate::training::{emotion_index, score, SegmentSet};

pub const EMBEDDINGS_KIND: &str = "embeddings";

/// Header of the exported utterance embeddings; the payload is row-major
/// `[utterances, dim]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingHeader {
    pub kind: String,
    pub version: u32,
    pub variant: String,
    pub dim: usize,
    pub utterance_ids: Vec<String>,
    pub speaker_ids: Vec<String>,
    pub labels: Vec<String>,
    pub predicted: Vec<String>,
    pub folds: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub fold_uars: Vec<(usize, f64)>,
    pub aggregate: Aggregate,
    /// Utterance-level counts summed over folds.
    pub confusion: ConfusionMatrix,
    pub text: String,
    pub dir: PathBuf,
}

/// Scores every fold's emotion checkpoint on its validation speakers and
/// writes the report, confusion matrices and embeddings.
pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalReport> {
    let corpus = load_corpus(cfg)?;
    let mut missing = Vec::new();
    for plan in &corpus.folds {
        let dir = cfg.fold_dir(plan.fold_index);
        let mut needed = vec![dir.join("em.ckpt")];
        if cfg.variant.uses_speaker_tower() {
            needed.push(dir.join("sp.ckpt"));
        }
        missing.extend(needed.into_iter().filter(|p| !p.is_file()).map(|p| p.display().to_string()));
    }
    if !missing.is_empty() {
        return Err(Error::MissingArtifact(format!(
            "{} checkpoint(s) missing: {}",
            missing.len(),
            missing.join(", ")
        )));
    }

    let exec = cfg.execution();
    let names = &cfg.emotions;
    let mut confusion = ConfusionMatrix::new(names.len());
    let mut fold_uars = Vec::new();
    let mut lines = String::new();
    let mut emb = EmbeddingHeader {
        kind: EMBEDDINGS_KIND.into(),
        version: 1,
        variant: cfg.variant.name().into(),
        dim: 0,
        utterance_ids: Vec::new(),
        speaker_ids: Vec::new(),
        labels: Vec::new(),
        predicted: Vec::new(),
        folds: Vec::new(),
    };
    let mut payload: Vec<f32> = Vec::new();

    for plan in &corpus.folds {
        let dir = cfg.fold_dir(plan.fold_index);
        let (em, header) = checkpoint::load(&dir.join("em.ckpt"))?;
        if header.stage != Stage::Em || em.class_names() != names.as_slice() {
            return Err(Error::Format(format!("fold {}: not an emotion checkpoint for {names:?}", plan.fold_index)));
        }
        let blocks: Vec<&FeatureBlock> = corpus.blocks_of(&plan.valid_speakers).collect();
        let mut set = SegmentSet::from_blocks(blocks.iter().copied(), names, |b| emotion_index(names, &b.emotion_label))?;
        if em.uses_speaker_attention() {
            let (sp, hash) = load_speaker_tower(plan, &dir)?;
            if header.sp_checkpoint_hash.as_deref() != Some(hash.as_str()) {
                return Err(Error::Format(format!(
                    "fold {}: emotion checkpoint was trained against a different speaker checkpoint",
                    plan.fold_index
                )));
            }
            set.attach_speaker_states(&sp, exec)?;
        }
        let scored = score(&em, &set, exec)?;
        let cm = ConfusionMatrix::from_pairs(names.len(), &scored.truth, &scored.predicted)?;
        let uar = cm.uar().or_else(|e| {
            log::warn!("fold {}: {e}; averaging over present classes", plan.fold_index);
            cm.uar_present().ok_or(e)
        })?;
        lines.push_str(&format!(
            "fold {}\tuar {:.4}\tutterances {}\n",
            plan.fold_index,
            uar,
            cm.total()
        ));
        fold_uars.push((plan.fold_index, uar));
        confusion.merge(&cm)?;

        // utterance order in the set follows first appearance in `blocks`
        let mut first: Vec<&FeatureBlock> = Vec::new();
        for b in &blocks {
            if !first.iter().any(|f| f.utterance_id == b.utterance_id) {
                first.push(b);
            }
        }
        for (u, b) in first.iter().enumerate() {
            emb.utterance_ids.push(b.utterance_id.clone());
            emb.speaker_ids.push(b.speaker_id.clone());
            emb.labels.push(names[scored.truth[u]].clone());
            emb.predicted.push(names[scored.predicted[u]].clone());
            emb.folds.push(plan.fold_index);
            emb.dim = scored.embeddings[u].len();
            payload.extend(scored.embeddings[u].iter().map(|&v| v as f32));
        }
    }

    let scores: Vec<f64> = fold_uars.iter().map(|f| f.1).collect();
    let agg = aggregate(&scores)?;
    lines.push_str(&format!("aggregate\t{}\tuar {agg}\n", cfg.variant));

    let dir = cfg.report_dir();
    std::fs::create_dir_all(&dir)?;
    container::write_atomic(&dir.join("report.txt"), lines.as_bytes())?;
    container::write_atomic(&dir.join("confusion.csv"), confusion.to_csv(names).as_bytes())?;
    if let Ok(csv) = confusion.to_normalized_csv(names) {
        container::write_atomic(&dir.join("confusion_normalized.csv"), csv.as_bytes())?;
    }
    if cfg.export_embeddings {
        container::write(&dir.join("embeddings.emb"), &emb, &payload)?;
    }
    Ok(EvalReport {
        fold_uars,
        aggregate: agg,
        confusion,
        text: lines,
        dir,
    })
}
