//! Manifest builder for an IEMOCAP release directory.
//!
//! Only improvised dialogs and the neutral, happy, angry and sad categories
//! are kept. Speakers are `Ses0N` plus the gender letter of the utterance
//! id's last field, e.g. `Ses01F_impro01_M003` belongs to `Ses01M`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ssacrnn::features::manifest::ManifestEntry;
use ssacrnn::{Error, Result};

const LABELS: [(&str, &str); 4] = [("neu", "neutral"), ("hap", "happy"), ("ang", "angry"), ("sad", "sad")];

/// Pulls `(utterance id, category)` pairs out of one EmoEvaluation file,
/// whose summary lines look like `[6.29 - 8.23]\tSes01F_impro01_F000\tneu\t[2.5, 2.5, 2.5]`.
pub fn parse_evaluation(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter(|l| l.starts_with('['))
        .filter_map(|l| {
            let mut f = l.split('\t');
            let (_, id, cat) = (f.next()?, f.next()?, f.next()?);
            Some((id.trim().to_string(), cat.trim().to_string()))
        })
        .collect()
}

/// `Ses01F_impro01_M003` → `Ses01M`.
pub fn speaker_of(utterance_id: &str) -> Option<String> {
    let session = utterance_id.get(..5)?;
    let gender = utterance_id.rsplit('_').next()?.chars().next()?;
    matches!(gender, 'F' | 'M').then(|| format!("{session}{gender}"))
}

fn dialog_of(utterance_id: &str) -> Option<&str> {
    utterance_id.rsplit_once('_').map(|(d, _)| d)
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    v.sort();
    Ok(v)
}

/// Walks `root/Session{1..5}` and returns manifest entries plus the
/// `speaker<TAB>gender` listing.
pub fn build(root: &Path) -> Result<(Vec<ManifestEntry>, String)> {
    let mut entries = Vec::new();
    let mut speakers: BTreeMap<String, char> = BTreeMap::new();
    for session in 1..=5 {
        let sdir = root.join(format!("Session{session}"));
        let eval_dir = sdir.join("dialog").join("EmoEvaluation");
        if !eval_dir.is_dir() {
            return Err(Error::Manifest {
                line: 0,
                reason: format!("{} is not a directory", eval_dir.display()),
            });
        }
        for file in read_dir_sorted(&eval_dir)? {
            let name = file.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            if !name.contains("impro") || file.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            for (id, cat) in parse_evaluation(&std::fs::read_to_string(&file)?) {
                let Some(label) = LABELS.iter().find(|(c, _)| *c == cat).map(|l| l.1) else {
                    continue;
                };
                let (Some(speaker), Some(dialog)) = (speaker_of(&id), dialog_of(&id)) else {
                    continue;
                };
                let wav = sdir.join("sentences").join("wav").join(dialog).join(format!("{id}.wav"));
                speakers.insert(speaker.clone(), speaker.chars().last().unwrap_or('F'));
                entries.push(ManifestEntry {
                    path: wav,
                    utterance_id: id,
                    speaker_id: speaker,
                    emotion_label: label.into(),
                });
            }
        }
    }
    let listing = speakers.iter().map(|(s, g)| format!("{s}\t{g}\n")).collect();
    Ok((entries, listing))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn evaluation_lines() {
        let text = "% header\n\n[6.2901 - 8.2357]\tSes01F_impro01_F000\tneu\t[2.5000, 2.5000, 2.5000]\nC-E2:\tNeutral;\t()\n";
        assert_eq!(parse_evaluation(text), vec![("Ses01F_impro01_F000".into(), "neu".into())]);
    }

    #[test]
    fn speakers_follow_the_last_field() {
        assert_eq!(speaker_of("Ses01F_impro01_M003").as_deref(), Some("Ses01M"));
        assert_eq!(speaker_of("Ses03M_impro05b_F010").as_deref(), Some("Ses03F"));
        assert_eq!(speaker_of("bad"), None);
    }
}
