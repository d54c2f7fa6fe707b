//! Corpus ingestion and chunking.
//!
//! A corpus is laid out as `<root>/<Jurisdiction>/<Topic>/<name>.txt`, where
//! the jurisdiction directory is `Federal`, `International`, or one of the
//! fifty canonical U.S. state names. A `corpus.json` manifest may be used
//! instead of (or placed at the root of) the directory layout; see
//! [`load_corpus`].

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;
use walkdir::WalkDir;

/// Canonical U.S. state names, alphabetical.
pub const STATE_NAMES: [&str; 50] = [
    "Alabama",
    "Alaska",
    "Arizona",
    "Arkansas",
    "California",
    "Colorado",
    "Connecticut",
    "Delaware",
    "Florida",
    "Georgia",
    "Hawaii",
    "Idaho",
    "Illinois",
    "Indiana",
    "Iowa",
    "Kansas",
    "Kentucky",
    "Louisiana",
    "Maine",
    "Maryland",
    "Massachusetts",
    "Michigan",
    "Minnesota",
    "Mississippi",
    "Missouri",
    "Montana",
    "Nebraska",
    "Nevada",
    "New Hampshire",
    "New Jersey",
    "New Mexico",
    "New York",
    "North Carolina",
    "North Dakota",
    "Ohio",
    "Oklahoma",
    "Oregon",
    "Pennsylvania",
    "Rhode Island",
    "South Carolina",
    "South Dakota",
    "Tennessee",
    "Texas",
    "Utah",
    "Vermont",
    "Virginia",
    "Washington",
    "West Virginia",
    "Wisconsin",
    "Wyoming",
];

/// Name of the optional manifest file.
pub const MANIFEST_FILE: &str = "corpus.json";

/// One of the fifty U.S. states, stored as an index into [`STATE_NAMES`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct UsState(u8);

impl UsState {
    /// Case-insensitive lookup; internal whitespace runs are collapsed.
    pub fn from_name(name: &str) -> Option<Self> {
        let wanted = name.split_whitespace().collect::<Vec<_>>().join(" ");
        STATE_NAMES
            .iter()
            .position(|s| s.eq_ignore_ascii_case(&wanted))
            .map(|i| UsState(i as u8))
    }

    pub fn name(self) -> &'static str {
        STATE_NAMES[self.0 as usize]
    }

    pub fn all() -> impl Iterator<Item = UsState> {
        (0..STATE_NAMES.len() as u8).map(UsState)
    }
}

impl fmt::Debug for UsState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Legal jurisdiction a document belongs to. Also the partition key of the
/// vector index.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Jurisdiction {
    Federal,
    State(UsState),
    International,
}

impl Jurisdiction {
    pub fn parse(name: &str) -> Option<Self> {
        let trimmed = name.trim();
        if trimmed.eq_ignore_ascii_case("federal") {
            Some(Jurisdiction::Federal)
        } else if trimmed.eq_ignore_ascii_case("international") {
            Some(Jurisdiction::International)
        } else {
            UsState::from_name(trimmed).map(Jurisdiction::State)
        }
    }

    pub fn state(name: &str) -> Option<Self> {
        UsState::from_name(name).map(Jurisdiction::State)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Jurisdiction::Federal => "Federal",
            Jurisdiction::International => "International",
            Jurisdiction::State(s) => s.name(),
        }
    }

    pub fn is_state(&self) -> bool {
        matches!(self, Jurisdiction::State(_))
    }
}

impl fmt::Display for Jurisdiction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl fmt::Debug for Jurisdiction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("unknown jurisdiction: {0}")]
pub struct UnknownJurisdiction(pub String);

impl FromStr for Jurisdiction {
    type Err = UnknownJurisdiction;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Jurisdiction::parse(s).ok_or_else(|| UnknownJurisdiction(s.to_string()))
    }
}

impl Serialize for Jurisdiction {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Jurisdiction {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

/// One legislative text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub jurisdiction: Jurisdiction,
    pub topic: String,
    pub citation: String,
    pub body: String,
    pub source_path: String,
}

/// A contiguous slice of a document body. Offsets count Unicode scalar
/// values, not bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub doc_id: String,
    pub ordinal: usize,
    pub start_char: usize,
    pub end_char: usize,
    pub text: String,
    pub jurisdiction: Jurisdiction,
    pub citation: String,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("unknown jurisdiction: {name} (at {path})")]
    UnknownJurisdiction { name: String, path: PathBuf },
    #[error("{path}: file is not valid UTF-8")]
    NonUtf8 { path: PathBuf },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid manifest: {reason}")]
    Manifest { path: PathBuf, reason: String },
    #[error("duplicate document id: {0}")]
    DuplicateDocId(String),
    #[error("corpus root does not exist: {0}")]
    MissingRoot(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IngestWarning {
    pub path: String,
    pub message: String,
}

impl fmt::Display for IngestWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub documents: Vec<Document>,
    pub warnings: Vec<IngestWarning>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    path: String,
    jurisdiction: String,
    topic: String,
    #[serde(default)]
    citation: Option<String>,
}

/// Load every document under `root`.
///
/// `root` may be a corpus directory or a manifest file. A directory that
/// contains a `corpus.json` at its top level is loaded through that manifest;
/// manifest paths are relative to the manifest's directory and the manifest's
/// jurisdiction, topic and citation replace the path-derived values.
pub fn load_corpus(root: &Path) -> Result<Corpus, CorpusError> {
    if !root.exists() {
        return Err(CorpusError::MissingRoot(root.to_path_buf()));
    }
    if root.is_file() {
        return load_manifest(root);
    }
    let manifest = root.join(MANIFEST_FILE);
    if manifest.is_file() {
        return load_manifest(&manifest);
    }
    load_directory(root)
}

fn load_directory(root: &Path) -> Result<Corpus, CorpusError> {
    let mut corpus = Corpus::default();
    let walker = WalkDir::new(root)
        .min_depth(1)
        .sort_by(|a, b| a.file_name().cmp(b.file_name()));
    for entry in walker {
        let entry = entry.map_err(|e| CorpusError::Io {
            path: e.path().map(Path::to_path_buf).unwrap_or_else(|| root.to_path_buf()),
            source: e.into(),
        })?;
        let rel = entry
            .path()
            .strip_prefix(root)
            .expect("walkdir yields paths under root");
        let parts: Vec<String> = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect();
        let rel_id = parts.join("/");

        if entry.depth() == 1 {
            if entry.file_type().is_dir() {
                if Jurisdiction::parse(&parts[0]).is_none() {
                    return Err(CorpusError::UnknownJurisdiction {
                        name: parts[0].clone(),
                        path: entry.path().to_path_buf(),
                    });
                }
            } else {
                corpus.warnings.push(IngestWarning {
                    path: rel_id,
                    message: "ignored: file outside any jurisdiction directory".into(),
                });
            }
            continue;
        }
        if !entry.file_type().is_file() {
            continue;
        }
        let is_txt = rel.extension().is_some_and(|e| e.eq_ignore_ascii_case("txt"));
        if entry.depth() != 3 || !is_txt {
            corpus.warnings.push(IngestWarning {
                path: rel_id,
                message: "ignored: expected <Jurisdiction>/<Topic>/<name>.txt".into(),
            });
            continue;
        }
        let jurisdiction = Jurisdiction::parse(&parts[0]).expect("jurisdiction directory validated at depth 1");
        let topic = parts[1].clone();
        push_document(&mut corpus, entry.path(), rel_id, jurisdiction, topic, None)?;
    }
    Ok(corpus)
}

fn load_manifest(path: &Path) -> Result<Corpus, CorpusError> {
    let raw = read_utf8(path)?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&raw).map_err(|e| CorpusError::Manifest {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut corpus = Corpus::default();
    let mut seen = std::collections::HashSet::new();
    for entry in entries {
        let jurisdiction =
            Jurisdiction::parse(&entry.jurisdiction).ok_or_else(|| CorpusError::UnknownJurisdiction {
                name: entry.jurisdiction.clone(),
                path: base.join(&entry.path),
            })?;
        let doc_id = entry.path.replace('\\', "/");
        if !seen.insert(doc_id.clone()) {
            return Err(CorpusError::DuplicateDocId(doc_id));
        }
        let file = base.join(&entry.path);
        push_document(&mut corpus, &file, doc_id, jurisdiction, entry.topic, entry.citation)?;
    }
    Ok(corpus)
}

fn read_utf8(path: &Path) -> Result<String, CorpusError> {
    let bytes = fs::read(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    String::from_utf8(bytes).map_err(|_| CorpusError::NonUtf8 {
        path: path.to_path_buf(),
    })
}

fn push_document(
    corpus: &mut Corpus,
    file: &Path,
    doc_id: String,
    jurisdiction: Jurisdiction,
    topic: String,
    citation: Option<String>,
) -> Result<(), CorpusError> {
    let body = read_utf8(file)?;
    if body.trim().is_empty() {
        corpus.warnings.push(IngestWarning {
            path: doc_id,
            message: "skipped: empty document".into(),
        });
        return Ok(());
    }
    let citation = citation.unwrap_or_else(|| {
        body.lines()
            .map(str::trim)
            .find(|l| !l.is_empty())
            .unwrap_or_default()
            .to_string()
    });
    corpus.documents.push(Document {
        doc_id,
        jurisdiction,
        topic,
        citation,
        body,
        source_path: file.to_string_lossy().into_owned(),
    });
    Ok(())
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ChunkConfigError {
    #[error("max_chars must be at least {MIN_CHUNK_CHARS}, got {0}")]
    MaxTooSmall(usize),
    #[error("overlap_chars ({overlap}) must be smaller than max_chars ({max})")]
    OverlapTooLarge { max: usize, overlap: usize },
}

pub const MIN_CHUNK_CHARS: usize = 64;

/// Validated chunking parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawChunkConfig")]
pub struct ChunkConfig {
    max_chars: usize,
    overlap_chars: usize,
}

#[derive(Deserialize)]
struct RawChunkConfig {
    max_chars: usize,
    overlap_chars: usize,
}

impl TryFrom<RawChunkConfig> for ChunkConfig {
    type Error = ChunkConfigError;

    fn try_from(raw: RawChunkConfig) -> Result<Self, Self::Error> {
        ChunkConfig::new(raw.max_chars, raw.overlap_chars)
    }
}

impl Default for ChunkConfig {
    fn default() -> Self {
        ChunkConfig {
            max_chars: 1000,
            overlap_chars: 200,
        }
    }
}

impl ChunkConfig {
    pub fn new(max_chars: usize, overlap_chars: usize) -> Result<Self, ChunkConfigError> {
        if max_chars < MIN_CHUNK_CHARS {
            return Err(ChunkConfigError::MaxTooSmall(max_chars));
        }
        if overlap_chars >= max_chars {
            return Err(ChunkConfigError::OverlapTooLarge {
                max: max_chars,
                overlap: overlap_chars,
            });
        }
        Ok(ChunkConfig {
            max_chars,
            overlap_chars,
        })
    }

    pub fn max_chars(&self) -> usize {
        self.max_chars
    }

    pub fn overlap_chars(&self) -> usize {
        self.overlap_chars
    }
}

fn is_sentence_end(c: char) -> bool {
    matches!(c, '.' | '?' | '!' | '\n')
}

/// Compute `[start, end)` spans, in chars, covering `text`.
///
/// Each span ends at the last sentence boundary (a `.`, `?`, `!` or newline
/// followed by whitespace; the whitespace stays in the span) that fits within
/// `max_chars`, else after the last whitespace, else at exactly `max_chars`.
/// The next span starts `overlap_chars` before the previous end, but always
/// at least one char after the previous start.
///
/// Only `max_chars >= 1` and `overlap_chars < max_chars` are required here;
/// [`ChunkConfig`] enforces the stricter production bounds.
pub fn split_spans(text: &[char], max_chars: usize, overlap_chars: usize) -> Vec<(usize, usize)> {
    assert!(max_chars >= 1 && overlap_chars < max_chars);
    let n = text.len();
    let mut spans = Vec::new();
    let mut start = 0;
    while start < n {
        if n - start <= max_chars {
            spans.push((start, n));
            break;
        }
        let limit = start + max_chars;
        let sentence = (start + 2..=limit)
            .rev()
            .find(|&e| text[e - 1].is_whitespace() && is_sentence_end(text[e - 2]));
        let end = sentence
            .or_else(|| (start + 1..=limit).rev().find(|&e| text[e - 1].is_whitespace()))
            .unwrap_or(limit);
        spans.push((start, end));
        start = end.saturating_sub(overlap_chars).max(start + 1);
    }
    spans
}

/// Split a document into chunks.
pub fn chunk_document(doc: &Document, config: &ChunkConfig) -> Vec<Chunk> {
    let chars: Vec<char> = doc.body.chars().collect();
    // byte offset of every char boundary, including the end
    let mut byte_at: Vec<usize> = doc.body.char_indices().map(|(i, _)| i).collect();
    byte_at.push(doc.body.len());

    split_spans(&chars, config.max_chars, config.overlap_chars)
        .into_iter()
        .enumerate()
        .map(|(ordinal, (start, end))| Chunk {
            chunk_id: format!("{}#{}", doc.doc_id, ordinal),
            doc_id: doc.doc_id.clone(),
            ordinal,
            start_char: start,
            end_char: end,
            text: doc.body[byte_at[start]..byte_at[end]].to_string(),
            jurisdiction: doc.jurisdiction,
            citation: doc.citation.clone(),
        })
        .collect()
}

pub fn chunk_documents(docs: &[Document], config: &ChunkConfig) -> Vec<Chunk> {
    docs.iter().flat_map(|d| chunk_document(d, config)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(body: &str) -> Document {
        Document {
            doc_id: "Alabama/Digital Crime Act/13A-8-112.txt".into(),
            jurisdiction: Jurisdiction::state("Alabama").unwrap(),
            topic: "Digital Crime Act".into(),
            citation: "Code of Ala. § 13A-8-112".into(),
            body: body.into(),
            source_path: String::new(),
        }
    }

    fn spans(chunks: &[Chunk]) -> Vec<(usize, usize)> {
        chunks.iter().map(|c| (c.start_char, c.end_char)).collect()
    }

    #[test]
    fn state_lookup_is_case_insensitive_and_canonical() {
        let j = Jurisdiction::parse("west   VIRGINIA").unwrap();
        assert_eq!(j.name(), "West Virginia");
        assert_eq!(Jurisdiction::parse("FEDERAL"), Some(Jurisdiction::Federal));
        assert_eq!(Jurisdiction::parse("Albama"), None);
        assert_eq!(UsState::all().count(), 50);
    }

    #[test]
    fn jurisdiction_serializes_as_canonical_name() {
        let j = Jurisdiction::parse("new york").unwrap();
        assert_eq!(serde_json::to_string(&j).unwrap(), "\"New York\"");
        let back: Jurisdiction = serde_json::from_str("\"new york\"").unwrap();
        assert_eq!(back, j);
        assert!(serde_json::from_str::<Jurisdiction>("\"Gotham\"").is_err());
    }

    #[test]
    fn short_body_is_one_chunk() {
        let body = "x".repeat(500);
        let chunks = chunk_document(&doc(&body), &ChunkConfig::new(1000, 200).unwrap());
        assert_eq!(spans(&chunks), vec![(0, 500)]);
        assert_eq!(chunks[0].chunk_id, "Alabama/Digital Crime Act/13A-8-112.txt#0");
    }

    #[test]
    fn hard_cut_with_overlap() {
        let body = "x".repeat(1500);
        let chunks = chunk_document(&doc(&body), &ChunkConfig::new(1000, 200).unwrap());
        assert_eq!(spans(&chunks), vec![(0, 1000), (800, 1500)]);
    }

    #[test]
    fn splits_at_sentence_boundaries() {
        let chars: Vec<char> = "A. B. C.".chars().collect();
        let got = split_spans(&chars, 5, 0);
        assert_eq!(got, vec![(0, 3), (3, 8)]);
    }

    #[test]
    fn prefers_sentence_over_whitespace() {
        let body = format!("{}. {} tail", "a".repeat(40), "b ".repeat(30));
        let chars: Vec<char> = body.chars().collect();
        let got = split_spans(&chars, 80, 0);
        assert_eq!(got[0], (0, 42));
    }

    #[test]
    fn falls_back_to_whitespace() {
        let body = format!("{} {}", "a".repeat(70), "b".repeat(30));
        let chars: Vec<char> = body.chars().collect();
        assert_eq!(split_spans(&chars, 80, 0), vec![(0, 71), (71, 101)]);
    }

    #[test]
    fn offsets_count_chars_not_bytes() {
        let body = "§§§ ".repeat(40);
        let chunks = chunk_document(&doc(&body), &ChunkConfig::new(64, 0).unwrap());
        let rebuilt: String = chunks.iter().map(|c| c.text.as_str()).collect();
        assert_eq!(rebuilt, body);
        assert!(chunks
            .iter()
            .all(|c| c.text.chars().count() == c.end_char - c.start_char));
    }

    #[test]
    fn config_bounds() {
        assert_eq!(ChunkConfig::new(63, 0), Err(ChunkConfigError::MaxTooSmall(63)));
        assert!(ChunkConfig::new(64, 64).is_err());
        assert!(ChunkConfig::new(64, 63).is_ok());
        let cfg: Result<ChunkConfig, _> = serde_json::from_str(r#"{"max_chars":100,"overlap_chars":100}"#);
        assert!(cfg.is_err());
    }
}
