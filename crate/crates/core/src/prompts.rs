//! Minimum-length candidate prompts from tokenizer vocabularies.
//!
//! Each vocab file holds one decoded token per line. A string that is a single
//! token in many tokenizers is likely a single token in an unknown one too, so
//! candidates are ranked by how many files contain them.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Byte-level BPE space marker.
const BPE_SPACE: char = '\u{0120}';
/// SentencePiece space marker.
const SENTENCEPIECE_SPACE: char = '\u{2581}';

/// Longest allowed encoding of a candidate, in token ids.
pub const MAX_ENCODED_IDS: usize = 2;

#[derive(Debug, Error)]
pub enum PromptsError {
    #[error("no vocabulary files given")]
    NoVocabFiles,
    #[error("failed to read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidatePrompt {
    pub text: String,
    /// Number of vocab files containing this string as a single token.
    pub source_count: u32,
    /// Whether any contributing entry needed a space-marker replacement.
    pub normalized: bool,
}

/// Heuristic for control tokens such as `<|endoftext|>`, `<s>` or `[CLS]`.
pub fn is_special_token(raw: &str) -> bool {
    let t = raw.trim();
    if t.len() < 3 {
        return false;
    }
    let inner_ok = |inner: &str| {
        !inner.is_empty()
            && inner
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '|' | '/' | '-' | '.' | '▁'))
    };
    if let Some(inner) = t.strip_prefix('<').and_then(|s| s.strip_suffix('>')) {
        return inner_ok(inner);
    }
    if let Some(inner) = t.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
        return inner_ok(inner) && inner.chars().any(|c| c.is_ascii_uppercase()) && !inner.chars().any(|c| c.is_ascii_lowercase());
    }
    false
}

/// Maps a decoded vocabulary entry to prompt text, replacing the BPE and
/// SentencePiece space markers with a plain space. `None` for special tokens
/// and entries that end up empty.
pub fn normalize_token(raw: &str) -> Option<String> {
    if raw.is_empty() || is_special_token(raw) {
        return None;
    }
    let text: String = raw
        .chars()
        .map(|c| match c {
            BPE_SPACE | SENTENCEPIECE_SPACE => ' ',
            other => other,
        })
        .collect();
    if text.is_empty() {
        None
    } else {
        Some(text)
    }
}

/// Token-count callback used to drop strings that an encoder splits into
/// more than [`MAX_ENCODED_IDS`] ids.
pub type TokenCounter<'a> = &'a (dyn Fn(&str) -> usize + Sync);

#[derive(Default)]
pub struct RankOptions<'a> {
    pub encoder: Option<TokenCounter<'a>>,
    /// Precomputed list of strings known to encode into too many ids.
    pub exclusions: HashSet<String>,
    /// Extra raw entries to treat as special, on top of [`is_special_token`].
    pub special_tokens: HashSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedCandidates {
    pub candidates: Vec<CandidatePrompt>,
    /// Lines skipped because they were not valid UTF-8.
    pub invalid_utf8_lines: u64,
}

struct LoadedVocab {
    // normalized text -> whether normalization changed it
    entries: BTreeMap<String, bool>,
    invalid_utf8_lines: u64,
}

fn load_vocab(path: &Path, special: &HashSet<String>) -> Result<LoadedVocab, PromptsError> {
    let bytes = std::fs::read(path).map_err(|source| PromptsError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let mut entries = BTreeMap::new();
    let mut invalid = 0u64;
    let body = bytes.strip_suffix(b"\n").unwrap_or(&bytes);
    if body.is_empty() {
        return Ok(LoadedVocab {
            entries,
            invalid_utf8_lines: 0,
        });
    }
    for line in body.split(|&b| b == b'\n') {
        let line = line.strip_suffix(b"\r").unwrap_or(line);
        let Ok(raw) = std::str::from_utf8(line) else {
            invalid += 1;
            continue;
        };
        if special.contains(raw) {
            continue;
        }
        if let Some(text) = normalize_token(raw) {
            let changed = text != raw;
            let e = entries.entry(text).or_insert(false);
            *e |= changed;
        }
    }
    Ok(LoadedVocab {
        entries,
        invalid_utf8_lines: invalid,
    })
}

/// Loads every vocab file, merges entries by normalized text and sorts by
/// descending file membership, breaking ties by byte order of the text.
pub fn rank_candidates<P: AsRef<Path> + Sync>(
    vocab_files: &[P],
    options: &RankOptions<'_>,
) -> Result<RankedCandidates, PromptsError> {
    if vocab_files.is_empty() {
        return Err(PromptsError::NoVocabFiles);
    }
    let loaded: Vec<LoadedVocab> = vocab_files
        .par_iter()
        .map(|p| load_vocab(p.as_ref(), &options.special_tokens))
        .collect::<Result<_, _>>()?;

    let mut merged: BTreeMap<String, (u32, bool)> = BTreeMap::new();
    let mut invalid_utf8_lines = 0;
    for vocab in loaded {
        invalid_utf8_lines += vocab.invalid_utf8_lines;
        for (text, changed) in vocab.entries {
            let e = merged.entry(text).or_insert((0, false));
            e.0 += 1;
            e.1 |= changed;
        }
    }

    let mut candidates: Vec<CandidatePrompt> = merged
        .into_iter()
        .filter(|(text, _)| !options.exclusions.contains(text))
        .filter(|(text, _)| options.encoder.is_none_or(|enc| enc(text) <= MAX_ENCODED_IDS))
        .map(|(text, (source_count, normalized))| CandidatePrompt {
            text,
            source_count,
            normalized,
        })
        .collect();
    candidates.sort_by(|a, b| b.source_count.cmp(&a.source_count).then_with(|| a.text.cmp(&b.text)));

    Ok(RankedCandidates {
        candidates,
        invalid_utf8_lines,
    })
}

/// Reads a newline-separated exclusion list (same line rules as vocab files,
/// no normalization).
pub fn read_exclusions(path: &Path) -> Result<HashSet<String>, PromptsError> {
    let text = std::fs::read_to_string(path).map_err(|source| PromptsError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(text.lines().map(str::to_owned).collect())
}

/// One prompt per line, spaces preserved.
pub fn write_candidates<W: Write>(mut out: W, candidates: &[CandidatePrompt]) -> std::io::Result<()> {
    for c in candidates {
        writeln!(out, "{}", c.text)?;
    }
    Ok(())
}

/// Reads a candidate list written by [`write_candidates`]. Empty lines are skipped.
pub fn read_candidates(path: &Path) -> Result<Vec<String>, PromptsError> {
    let text = std::fs::read_to_string(path).map_err(|source| PromptsError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(text
        .split('\n')
        .map(|l| l.strip_suffix('\r').unwrap_or(l))
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect())
}

/// Distinct texts of a candidate list, in order.
pub fn texts(candidates: &[CandidatePrompt]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    candidates
        .iter()
        .filter(|c| seen.insert(c.text.as_str()))
        .map(|c| c.text.clone())
        .collect()
}
