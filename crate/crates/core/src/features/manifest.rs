//! Tab-separated utterance manifests: `path`, `utterance_id`, `speaker_id`,
//! `emotion_label`, one record per line.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub utterance_id: String,
    pub speaker_id: String,
    pub emotion_label: String,
}

/// Parses manifest text. Relative audio paths are resolved against
/// `base_dir`; blank lines are skipped.
pub fn parse(text: &str, base_dir: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Manifest {
                line: line_no,
                reason: format!("expected 4 tab-separated fields, found {}", fields.len()),
            });
        }
        if let Some(pos) = fields.iter().position(|f| f.trim().is_empty()) {
            return Err(Error::Manifest {
                line: line_no,
                reason: format!("field {} is empty", pos + 1),
            });
        }
        let path = PathBuf::from(fields[0]);
        out.push(ManifestEntry {
            path: if path.is_absolute() { path } else { base_dir.join(path) },
            utterance_id: fields[1].to_string(),
            speaker_id: fields[2].to_string(),
            emotion_label: fields[3].to_string(),
        });
    }
    Ok(out)
}

pub fn read(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path)?;
    parse(&text, path.parent().unwrap_or(Path::new(".")))
}

/// Renders entries with paths relative to `base_dir` where possible.
pub fn render(entries: &[ManifestEntry], base_dir: &Path) -> String {
    let mut s = String::new();
    for e in entries {
        let p = e.path.strip_prefix(base_dir).unwrap_or(&e.path);
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            p.display(),
            e.utterance_id,
            e.speaker_id,
            e.emotion_label
        ));
    }
    s
}
