use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::features::{read_features, FeatureSequence};
use crate::error::{Error, Result};

/// A word occurrence over the half-open frame range `[start, end)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WordSpan {
    pub w: String,
    pub start: usize,
    pub end: usize,
}

impl WordSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// One line of a JSON-lines manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipRecord {
    pub id: String,
    pub features: String,
    pub words: Vec<WordSpan>,
}

impl ClipRecord {
    /// Spans must be non-empty, ordered, non-overlapping and, when `frames`
    /// is known, inside `[0, frames)`.
    pub fn validate(&self, frames: Option<usize>) -> Result<()> {
        let bad = |msg: String| Error::Validation {
            clip: self.id.clone(),
            msg,
        };
        let mut prev_end = 0;
        for (i, s) in self.words.iter().enumerate() {
            if s.end <= s.start {
                return Err(bad(format!("word {i} ({}) has empty span [{}, {})", s.w, s.start, s.end)));
            }
            if i > 0 && s.start < prev_end {
                return Err(bad(format!(
                    "word {i} ({}) at [{}, {}) overlaps the previous span ending at {prev_end}",
                    s.w, s.start, s.end
                )));
            }
            if let Some(t) = frames {
                if s.end > t {
                    return Err(bad(format!(
                        "word {i} ({}) span [{}, {}) exceeds {t} frames",
                        s.w, s.start, s.end
                    )));
                }
            }
            prev_end = s.end;
        }
        Ok(())
    }

    /// Transcript word count.
    pub fn word_count(&self) -> usize {
        self.words.len()
    }

    pub fn contains_word(&self, word: &str) -> bool {
        self.words.iter().any(|s| s.w.eq_ignore_ascii_case(word))
    }

    /// Indices `i` such that words `i..i+phrase.len()` spell `phrase`.
    pub fn phrase_occurrences<'a>(&'a self, phrase: &'a [String]) -> impl Iterator<Item = usize> + 'a {
        let n = phrase.len();
        (0..(self.words.len() + 1).saturating_sub(n)).filter(move |&i| {
            n > 0
                && self.words[i..i + n]
                    .iter()
                    .zip(phrase)
                    .all(|(s, w)| s.w.eq_ignore_ascii_case(w))
        })
    }
}

/// A manifest record with its features loaded.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub record: ClipRecord,
    pub features: FeatureSequence,
}

/// Parses JSON-lines text, validating span structure (not frame bounds).
pub fn parse_manifest(text: &str) -> Result<Vec<ClipRecord>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let rec: ClipRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: n + 1,
            msg: e.to_string(),
        })?;
        rec.validate(None)?;
        out.push(rec);
    }
    Ok(out)
}

pub fn serialize_manifest(records: &[ClipRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[ClipRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::from(e).at(path))?;
    f.write_all(serialize_manifest(records).as_bytes())
        .map_err(|e| Error::from(e).at(path))
}

fn resolve(manifest: &Path, features: &str) -> PathBuf {
    let p = Path::new(features);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// Reads a manifest and checks every span against its feature file's frame
/// count (header only).
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ClipRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::from(e).at(path))?;
    let records = parse_manifest(&text).map_err(|e| e.at(path))?;
    for r in &records {
        let fpath = resolve(path, &r.features);
        let mut header = [0u8; 16];
        let mut f = fs::File::open(&fpath).map_err(|e| Error::from(e).at(&fpath))?;
        std::io::Read::read_exact(&mut f, &mut header).map_err(|_| {
            Error::Format {
                offset: 0,
                msg: "truncated header".into(),
            }
            .at(&fpath)
        })?;
        let (t, _) = FeatureSequence::parse_header(&header).map_err(|e| e.at(&fpath))?;
        r.validate(Some(t))?;
    }
    Ok(records)
}

/// Reads a manifest and every feature file it references.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Clip>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::from(e).at(path))?;
    let records = parse_manifest(&text).map_err(|e| e.at(path))?;
    records
        .into_iter()
        .map(|record| {
            let features = read_features(resolve(path, &record.features))?;
            record.validate(Some(features.frames()))?;
            Ok(Clip { record, features })
        })
        .collect()
}
