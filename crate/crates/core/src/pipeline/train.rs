use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use super::{derive_seed, RunConfig};
use crate::container;
use crate::error::{Error, Result};
use crate::evaluation::{parse_speakers, plan_folds, FoldPlan, SpeakerInfo};
use crate::features::cache::load_dir;
use crate::features::manifest::{self, ManifestEntry};
use crate::features::{speaker_normalize, FeatureBlock};
use crate::model::checkpoint::{self, content_hash, CheckpointMeta};
use crate::par::Execution;
use crate::model::{AttentionKind, Classifier, ClassifierSpec, Stage};
use crate::training::{emotion_index, train_stage, SegmentSet, Silent, TrainConfig};

/// Normalized feature blocks plus the speaker list and fold plans.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub blocks: Vec<FeatureBlock>,
    pub speakers: Vec<SpeakerInfo>,
    pub folds: Vec<FoldPlan>,
}

impl Corpus {
    pub fn fold(&self, index: usize) -> Result<&FoldPlan> {
        self.folds
            .iter()
            .find(|f| f.fold_index == index)
            .ok_or_else(|| Error::Config(format!("fold {index} does not exist ({} folds)", self.folds.len())))
    }

    pub fn blocks_of<'a>(&'a self, speakers: &'a [String]) -> impl Iterator<Item = &'a FeatureBlock> + Clone + 'a {
        self.blocks.iter().filter(move |b| speakers.contains(&b.speaker_id))
    }
}

/// Loads cached features of the manifest's utterances, normalizes them per
/// speaker and plans folds.
pub fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    cfg.validate()?;
    let entries = manifest::read(&cfg.manifest)?;
    if !cfg.cache_dir.is_dir() {
        return Err(Error::MissingArtifact(format!(
            "feature cache {} does not exist; run `features` first",
            cfg.cache_dir.display()
        )));
    }
    let wanted: HashSet<&str> = entries.iter().map(|e| e.utterance_id.as_str()).collect();
    let mut blocks: Vec<FeatureBlock> = load_dir(&cfg.cache_dir)?
        .into_iter()
        .filter(|b| wanted.contains(b.utterance_id.as_str()))
        .collect();
    if blocks.is_empty() {
        return Err(Error::MissingArtifact(format!(
            "feature cache {} holds none of the manifest's utterances; run `features` first",
            cfg.cache_dir.display()
        )));
    }
    let cached: HashSet<&str> = blocks.iter().map(|b| b.utterance_id.as_str()).collect();
    let missing = wanted.iter().filter(|u| !cached.contains(*u)).count();
    if missing > 0 {
        log::warn!("{missing} manifest utterances have no cached features and are skipped");
    }
    let expected = cfg.crnn.input_shape();
    if let Some(b) = blocks.iter().find(|b| b.data.shape() != expected) {
        return Err(Error::Config(format!(
            "cached block {} has shape {:?}, the model expects {expected:?}",
            b.utterance_id,
            b.data.shape()
        )));
    }
    speaker_normalize(&mut blocks, None);

    let (speakers, folds) = fold_plans(cfg, &entries)?;
    Ok(Corpus {
        blocks,
        speakers,
        folds,
    })
}

/// Speakers (from the speaker list, else in manifest order) and their fold
/// plans.
pub fn fold_plans(cfg: &RunConfig, entries: &[ManifestEntry]) -> Result<(Vec<SpeakerInfo>, Vec<FoldPlan>)> {
    let speakers = match &cfg.speakers {
        Some(p) => parse_speakers(&std::fs::read_to_string(p)?)?,
        None => {
            let mut ids: Vec<String> = Vec::new();
            for e in entries {
                if !ids.contains(&e.speaker_id) {
                    ids.push(e.speaker_id.clone());
                }
            }
            ids.into_iter().map(|id| SpeakerInfo::new(id, None)).collect()
        }
    };
    let folds = plan_folds(&speakers, cfg.layout, cfg.effective_mode(), cfg.seed)
        .map_err(|e| Error::Config(e.to_string()))?;
    Ok((speakers, folds))
}

/// Where a stage's artifacts went.
#[derive(Clone, Debug, PartialEq)]
pub struct StageSummary {
    pub checkpoint: PathBuf,
    pub hash: String,
    pub log: PathBuf,
    pub best_epoch: usize,
    pub best_uar: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldArtifacts {
    pub fold: usize,
    pub sp: Option<StageSummary>,
    pub em: StageSummary,
}

fn stage_config(cfg: &RunConfig, stage: Stage, fold: usize) -> TrainConfig {
    TrainConfig {
        stage,
        seed: derive_seed(cfg.seed, fold, if stage == Stage::Sp { 11 } else { 12 }),
        regularize: match stage {
            Stage::Sp => cfg.sp_regularize,
            Stage::Em => cfg.variant.regularized(),
        },
        ..cfg.train.clone()
    }
}

/// Splits the speaker tower's data: per (speaker, emotion) cell the last
/// `k` utterances validate, provided the cell keeps at least one for training.
fn sp_split<'a>(blocks: impl Iterator<Item = &'a FeatureBlock>, k: usize) -> (Vec<&'a FeatureBlock>, Vec<&'a FeatureBlock>) {
    let blocks: Vec<&FeatureBlock> = blocks.collect();
    let mut cells: BTreeMap<(&str, &str), Vec<&str>> = BTreeMap::new();
    for b in &blocks {
        let u = cells.entry((&b.speaker_id, &b.emotion_label)).or_default();
        if !u.contains(&b.utterance_id.as_str()) {
            u.push(&b.utterance_id);
        }
    }
    let held: HashSet<&str> = cells
        .values()
        .filter(|u| u.len() > k)
        .flat_map(|u| u[u.len() - k..].iter().copied())
        .collect();
    blocks.into_iter().partition(|b| !held.contains(b.utterance_id.as_str()))
}

fn write_log(path: &Path, text: &str) -> Result<()> {
    container::write_atomic(path, text.as_bytes())
}

fn train_speaker_tower(cfg: &RunConfig, corpus: &Corpus, plan: &FoldPlan, dir: &Path) -> Result<StageSummary> {
    let names: Vec<String> = corpus
        .speakers
        .iter()
        .map(|s| s.id.clone())
        .filter(|s| !plan.sp_excluded_speakers.contains(s))
        .collect();
    let label = |b: &FeatureBlock| {
        names
            .iter()
            .position(|n| *n == b.speaker_id)
            .ok_or_else(|| Error::invalid(format!("speaker `{}` is not a speaker class", b.speaker_id)))
    };
    let (train_blocks, mut valid_blocks) = sp_split(corpus.blocks_of(&names), cfg.sp_validation_per_cell);
    if valid_blocks.is_empty() {
        log::warn!("no utterances could be held out for the speaker stage; selecting on training data");
        valid_blocks = train_blocks.clone();
    }
    let train = SegmentSet::from_blocks(train_blocks, &cfg.emotions, label)?;
    let valid = SegmentSet::from_blocks(valid_blocks, &cfg.emotions, label)?;
    let spec = ClassifierSpec {
        embedding: cfg.speaker_embedding,
        ..ClassifierSpec::speaker(cfg.crnn.clone(), names.len())
    };
    let model = Classifier::new(spec, names, derive_seed(cfg.seed, plan.fold_index, 1))?;
    let tc = stage_config(cfg, Stage::Sp, plan.fold_index);
    let outcome = train_stage(model, &train, &valid, &tc, cfg.execution(), &mut Silent)?;
    let mut best = outcome.model.clone();
    best.freeze();
    let ckpt = dir.join("sp.ckpt");
    let hash = checkpoint::save(
        &ckpt,
        &best,
        &CheckpointMeta {
            stage: Stage::Sp,
            variant: cfg.variant.name().into(),
            seed: tc.seed,
            sp_checkpoint_hash: None,
            excluded_speakers: plan.sp_excluded_speakers.clone(),
            epoch: outcome.best_epoch,
            validation_uar: outcome.best_uar,
        },
    )?;
    let log = dir.join("sp.log");
    write_log(&log, &outcome.log())?;
    Ok(StageSummary {
        checkpoint: ckpt,
        hash,
        log,
        best_epoch: outcome.best_epoch,
        best_uar: outcome.best_uar,
    })
}

/// Loads a fold's frozen speaker tower and checks it was trained under the
/// fold's exclusions.
pub(crate) fn load_speaker_tower(plan: &FoldPlan, dir: &Path) -> Result<(Classifier, String)> {
    let path = dir.join("sp.ckpt");
    if !path.is_file() {
        return Err(Error::MissingArtifact(format!(
            "speaker checkpoint {} is missing; the speaker stage must run first",
            path.display()
        )));
    }
    let (sp, header) = checkpoint::load(&path)?;
    if header.stage != Stage::Sp || !sp.is_frozen() {
        return Err(Error::Format(format!("{} is not a frozen speaker checkpoint", path.display())));
    }
    if header.excluded_speakers != plan.sp_excluded_speakers
        || sp.class_names().iter().any(|s| plan.sp_excluded_speakers.contains(s))
    {
        return Err(Error::Format(format!(
            "{} was trained under different speaker exclusions",
            path.display()
        )));
    }
    Ok((sp, content_hash(&path)?))
}

fn train_emotion_tower(cfg: &RunConfig, corpus: &Corpus, plan: &FoldPlan, dir: &Path) -> Result<StageSummary> {
    let label = |b: &FeatureBlock| emotion_index(&cfg.emotions, &b.emotion_label);
    let mut train = SegmentSet::from_blocks(corpus.blocks_of(&plan.train_speakers), &cfg.emotions, label)?;
    let mut valid = SegmentSet::from_blocks(corpus.blocks_of(&plan.valid_speakers), &cfg.emotions, label)?;
    let (attention, sp_hash) = if cfg.variant.uses_speaker_tower() {
        let (sp, hash) = load_speaker_tower(plan, dir)?;
        train.attach_speaker_states(&sp, cfg.execution())?;
        valid.attach_speaker_states(&sp, cfg.execution())?;
        (AttentionKind::SpeakerAttention, Some(hash))
    } else {
        (AttentionKind::SelfAttention, None)
    };
    let spec = ClassifierSpec {
        crnn: cfg.crnn.clone(),
        attention,
        embedding: cfg.emotion_embedding,
        classes: cfg.emotions.len(),
    };
    let model = Classifier::new(spec, cfg.emotions.clone(), derive_seed(cfg.seed, plan.fold_index, 2))?;
    let tc = stage_config(cfg, Stage::Em, plan.fold_index);
    let outcome = train_stage(model, &train, &valid, &tc, cfg.execution(), &mut Silent)?;
    let ckpt = dir.join("em.ckpt");
    let hash = checkpoint::save(
        &ckpt,
        &outcome.model,
        &CheckpointMeta {
            stage: Stage::Em,
            variant: cfg.variant.name().into(),
            seed: tc.seed,
            sp_checkpoint_hash: sp_hash,
            excluded_speakers: plan.valid_speakers.clone(),
            epoch: outcome.best_epoch,
            validation_uar: outcome.best_uar,
        },
    )?;
    let log = dir.join("em.log");
    write_log(&log, &outcome.log())?;
    Ok(StageSummary {
        checkpoint: ckpt,
        hash,
        log,
        best_epoch: outcome.best_epoch,
        best_uar: outcome.best_uar,
    })
}

/// Trains one fold (or every fold when `fold` is `None`). The
/// speaker-attention variant trains and freezes the speaker tower first.
pub fn cmd_train(cfg: &RunConfig, fold: Option<usize>) -> Result<Vec<FoldArtifacts>> {
    let corpus = load_corpus(cfg)?;
    let plans: Vec<&FoldPlan> = match fold {
        Some(i) => vec![corpus.fold(i)?],
        None => corpus.folds.iter().collect(),
    };
    let run = |plan: &&FoldPlan| -> Result<FoldArtifacts> {
        let dir = cfg.fold_dir(plan.fold_index);
        std::fs::create_dir_all(&dir)?;
        log::info!("fold {} ({}): training", plan.fold_index, cfg.variant);
        let sp = if cfg.variant.uses_speaker_tower() {
            Some(train_speaker_tower(cfg, &corpus, plan, &dir)?)
        } else {
            None
        };
        let em = train_emotion_tower(cfg, &corpus, plan, &dir)?;
        Ok(FoldArtifacts {
            fold: plan.fold_index,
            sp,
            em,
        })
    };
    let outer = if cfg.fold_parallel { cfg.execution() } else { Execution::Sequential };
    outer.map(&plans, run).into_iter().collect()
}
