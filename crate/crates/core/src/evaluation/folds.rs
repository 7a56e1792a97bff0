//! Cross-validation fold plans.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Gender {
    F,
    M,
}

impl FromStr for Gender {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "F" | "FEMALE" => Ok(Gender::F),
            "M" | "MALE" => Ok(Gender::M),
            other => Err(Error::invalid(format!("unknown gender `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpeakerInfo {
    pub id: String,
    pub gender: Option<Gender>,
}

impl SpeakerInfo {
    pub fn new(id: impl Into<String>, gender: Option<Gender>) -> Self {
        SpeakerInfo { id: id.into(), gender }
    }
}

/// Speaker layout of a corpus, which fixes how folds are formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layout {
    /// 10 speakers, one validation speaker per fold.
    IemocapLike,
    /// 12 female and 8 male speakers, two validation speakers per fold.
    AtthackLike,
    /// Any number of speakers split round-robin into `folds` groups.
    Synthetic { folds: usize },
}

impl Layout {
    pub fn name(&self) -> &'static str {
        match self {
            Layout::IemocapLike => "iemocap-like",
            Layout::AtthackLike => "atthack-like",
            Layout::Synthetic { .. } => "synthetic",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Validation speakers are also withheld from the speaker classifier.
    Loso,
    SpeakerDependent,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loso" => Ok(Mode::Loso),
            "speaker_dependent" => Ok(Mode::SpeakerDependent),
            other => Err(Error::invalid(format!("unknown mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Loso => "loso",
            Mode::SpeakerDependent => "speaker_dependent",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldPlan {
    /// 1-based.
    pub fold_index: usize,
    pub train_speakers: Vec<String>,
    pub valid_speakers: Vec<String>,
    /// Speakers the speaker classifier must never see.
    pub sp_excluded_speakers: Vec<String>,
}

fn count_check(speakers: &[SpeakerInfo], layout: Layout) -> Result<()> {
    let count = |g| speakers.iter().filter(|s| s.gender == Some(g)).count();
    let ok = match layout {
        Layout::IemocapLike => speakers.len() == 10,
        Layout::AtthackLike => speakers.len() == 20 && count(Gender::F) == 12 && count(Gender::M) == 8,
        Layout::Synthetic { folds } => folds >= 2 && speakers.len() >= folds,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "{} layout does not fit {} speakers ({} F, {} M)",
            layout.name(),
            speakers.len(),
            count(Gender::F),
            count(Gender::M)
        )))
    }
}

/// Validation groups per fold, before fold plans are built.
fn validation_groups(speakers: &[SpeakerInfo], layout: Layout, rng: &mut ChaCha8Rng) -> Vec<Vec<String>> {
    let mut ids: Vec<String> = speakers.iter().map(|s| s.id.clone()).collect();
    match layout {
        Layout::IemocapLike => {
            ids.shuffle(rng);
            ids.into_iter().map(|s| vec![s]).collect()
        }
        Layout::Synthetic { folds } => {
            ids.shuffle(rng);
            let mut groups = vec![Vec::new(); folds];
            for (i, s) in ids.into_iter().enumerate() {
                groups[i % folds].push(s);
            }
            groups
        }
        Layout::AtthackLike => {
            let pick = |g| -> Vec<String> {
                speakers
                    .iter()
                    .filter(|s| s.gender == Some(g))
                    .map(|s| s.id.clone())
                    .collect()
            };
            let (mut f, mut m) = (pick(Gender::F), pick(Gender::M));
            f.shuffle(rng);
            m.shuffle(rng);
            let mut groups: Vec<Vec<String>> =
                m.iter().zip(&f).map(|(m, f)| vec![f.clone(), m.clone()]).collect();
            for pair in f[m.len()..].chunks(2) {
                groups.push(pair.to_vec());
            }
            groups.shuffle(rng);
            groups
        }
    }
}

pub fn plan_folds(speakers: &[SpeakerInfo], layout: Layout, mode: Mode, seed: u64) -> Result<Vec<FoldPlan>> {
    count_check(speakers, layout)?;
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = speakers.iter().find(|s| !seen.insert(&s.id)) {
        return Err(Error::invalid(format!("speaker `{}` listed twice", dup.id)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = validation_groups(speakers, layout, &mut rng);
    Ok(groups
        .into_iter()
        .enumerate()
        .map(|(i, valid)| FoldPlan {
            fold_index: i + 1,
            train_speakers: speakers
                .iter()
                .filter(|s| !valid.contains(&s.id))
                .map(|s| s.id.clone())
                .collect(),
            sp_excluded_speakers: match mode {
                Mode::Loso => valid.clone(),
                Mode::SpeakerDependent => Vec::new(),
            },
            valid_speakers: valid,
        })
        .collect())
}

/// One line per fold: index, validation, training and excluded speakers.
pub fn render_plans(plans: &[FoldPlan]) -> String {
    plans
        .iter()
        .map(|p| {
            format!(
                "fold {}\tvalid={}\ttrain={}\tsp_excluded={}\n",
                p.fold_index,
                p.valid_speakers.join(","),
                p.train_speakers.join(","),
                p.sp_excluded_speakers.join(",")
            )
        })
        .collect()
}

/// Parses `speaker_id<TAB>gender` lines.
pub fn parse_speakers(text: &str) -> Result<Vec<SpeakerInfo>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let mut parts = l.split('\t');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(id), Some(g), None) if !id.trim().is_empty() => Ok(SpeakerInfo::new(id.trim(), Some(g.parse()?))),
                _ => Err(Error::invalid(format!("speaker list line {}: expected `id<TAB>gender`", i + 1))),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn atthack() -> Vec<SpeakerInfo> {
        (0..12)
            .map(|i| SpeakerInfo::new(format!("f{i}"), Some(Gender::F)))
            .chain((0..8).map(|i| SpeakerInfo::new(format!("m{i}"), Some(Gender::M))))
            .collect()
    }

    #[test]
    fn iemocap_like_validates_everyone_once() {
        let spk: Vec<SpeakerInfo> = (0..10).map(|i| SpeakerInfo::new(format!("s{i}"), None)).collect();
        let plans = plan_folds(&spk, Layout::IemocapLike, Mode::Loso, 3).unwrap();
        assert_eq!(plans.len(), 10);
        let mut valid: Vec<String> = plans.iter().flat_map(|p| p.valid_speakers.clone()).collect();
        valid.sort();
        let mut all: Vec<String> = spk.iter().map(|s| s.id.clone()).collect();
        all.sort();
        assert_eq!(valid, all);
        for p in &plans {
            assert_eq!(p.train_speakers.len(), 9);
            assert_eq!(p.sp_excluded_speakers, p.valid_speakers);
        }
        assert_eq!(plans, plan_folds(&spk, Layout::IemocapLike, Mode::Loso, 3).unwrap());
    }

    #[test]
    fn atthack_like_pairs() {
        let spk = atthack();
        let plans = plan_folds(&spk, Layout::AtthackLike, Mode::SpeakerDependent, 9).unwrap();
        let mixed = plans
            .iter()
            .filter(|p| p.valid_speakers.iter().any(|s| s.starts_with('m')))
            .count();
        assert_eq!(mixed, 8);
        assert!(plans.iter().all(|p| p.valid_speakers.len() == 2 && p.sp_excluded_speakers.is_empty()));
    }

    #[test]
    fn wrong_counts_rejected() {
        let mut spk = atthack();
        spk[0].gender = Some(Gender::M);
        assert!(plan_folds(&spk, Layout::AtthackLike, Mode::Loso, 1).is_err());
        assert!(plan_folds(&spk[..9], Layout::IemocapLike, Mode::Loso, 1).is_err());
        assert!(plan_folds(&spk[..1], Layout::Synthetic { folds: 2 }, Mode::Loso, 1).is_err());
    }

    #[test]
    fn speaker_list_parsing() {
        let s = parse_speakers("a\tF\n\nb\tmale\n").unwrap();
        assert_eq!(s[1], SpeakerInfo::new("b", Some(Gender::M)));
        assert!(parse_speakers("a\tX\n").is_err());
    }
}
