//! Jurisdiction-partitioned flat vector index with exact top-k search.
//!
//! # File format (version 1)
//!
//! ```text
//! {"version":1,"dim":D,"fingerprint":"F"}
//! {"chunk":{...},"vector":[f64, ...]}        one line per chunk
//! ...
//! {"crc32":"xxxxxxxx"}                        CRC-32 of every preceding byte
//! ```
//!
//! Records are written partition by partition in jurisdiction order and, within
//! a partition, in insertion order, so identical inputs produce identical bytes.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Chunk, Jurisdiction};
use crate::embed::{cosine_with_norms, EmbedError, Embedder, Embedding};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error(
        "embedder fingerprint mismatch: index was built with {index}, got {given}; rebuild the index from scratch"
    )]
    FingerprintMismatch { index: String, given: String },
    #[error("duplicate chunk id: {0}")]
    DuplicateChunk(String),
    #[error("dimension mismatch: index dim {expected}, vector dim {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("failed to embed chunk {chunk_id}: {source}")]
    Embed {
        chunk_id: String,
        #[source]
        source: EmbedError,
    },
    #[error("k must be at least 1")]
    InvalidK,
    #[error("unsupported index version {found} (expected {FORMAT_VERSION})")]
    Version { found: u64 },
    #[error("checksum error: {0}")]
    Checksum(String),
    #[error("malformed record at byte offset {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error("index io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub chunk: Chunk,
    pub vector: Embedding,
    norm: f64,
}

impl IndexEntry {
    fn new(chunk: Chunk, vector: Embedding) -> Self {
        let norm = vector.norm();
        IndexEntry { chunk, vector, norm }
    }
}

/// A retrieved chunk with its cosine score and 1-based rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredChunk {
    pub chunk: Chunk,
    pub score: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub hits: Vec<ScoredChunk>,
    /// Partitions that contributed candidates.
    pub searched: Vec<Jurisdiction>,
    /// Requested jurisdictions with no partition in the index.
    pub missing: Vec<Jurisdiction>,
}

/// Score-descending, then chunk-id-ascending.
pub fn rank_order(a_score: f64, a_id: &str, b_score: f64, b_id: &str) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_id.cmp(b_id))
}

struct Candidate<'a> {
    score: f64,
    entry: &'a IndexEntry,
}

impl PartialEq for Candidate<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate<'_> {}

impl PartialOrd for Candidate<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

// Better candidates compare as smaller, so the max-heap root is the worst kept one.
impl Ord for Candidate<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        rank_order(
            self.score,
            &self.entry.chunk.chunk_id,
            other.score,
            &other.entry.chunk.chunk_id,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    dim: usize,
    fingerprint: String,
    partitions: BTreeMap<Jurisdiction, Vec<IndexEntry>>,
    ids: HashSet<String>,
}

impl VectorIndex {
    pub fn new(dim: usize, fingerprint: impl Into<String>) -> Self {
        VectorIndex {
            dim,
            fingerprint: fingerprint.into(),
            partitions: BTreeMap::new(),
            ids: HashSet::new(),
        }
    }

    /// Embed and insert every chunk.
    pub fn build(chunks: &[Chunk], embedder: &dyn Embedder) -> Result<Self, IndexError> {
        let mut index = VectorIndex::new(embedder.dim(), embedder.fingerprint());
        index.append(chunks, embedder)?;
        Ok(index)
    }

    /// Add chunks to an existing index. Nothing is inserted unless every chunk
    /// embeds successfully and every id is new.
    pub fn append(&mut self, chunks: &[Chunk], embedder: &dyn Embedder) -> Result<usize, IndexError> {
        let given = embedder.fingerprint();
        if given != self.fingerprint {
            return Err(IndexError::FingerprintMismatch {
                index: self.fingerprint.clone(),
                given,
            });
        }
        let mut fresh = HashSet::with_capacity(chunks.len());
        for c in chunks {
            if self.ids.contains(&c.chunk_id) || !fresh.insert(c.chunk_id.as_str()) {
                return Err(IndexError::DuplicateChunk(c.chunk_id.clone()));
            }
        }
        let texts: Vec<&str> = chunks.iter().map(|c| c.text.as_str()).collect();
        let vectors = embedder.embed_batch(&texts).map_err(|e| match e {
            EmbedError::Batch { index, source } => IndexError::Embed {
                chunk_id: chunks[index].chunk_id.clone(),
                source: *source,
            },
            other => IndexError::Embed {
                chunk_id: chunks.first().map(|c| c.chunk_id.clone()).unwrap_or_default(),
                source: other,
            },
        })?;
        for v in &vectors {
            if v.dim() != self.dim {
                return Err(IndexError::DimMismatch {
                    expected: self.dim,
                    found: v.dim(),
                });
            }
        }
        for (chunk, vector) in chunks.iter().cloned().zip(vectors) {
            self.insert_unchecked(chunk, vector);
        }
        Ok(chunks.len())
    }

    /// Insert a chunk with a precomputed vector.
    pub fn insert(&mut self, chunk: Chunk, vector: Embedding) -> Result<(), IndexError> {
        if vector.dim() != self.dim {
            return Err(IndexError::DimMismatch {
                expected: self.dim,
                found: vector.dim(),
            });
        }
        if self.ids.contains(&chunk.chunk_id) {
            return Err(IndexError::DuplicateChunk(chunk.chunk_id));
        }
        self.insert_unchecked(chunk, vector);
        Ok(())
    }

    fn insert_unchecked(&mut self, chunk: Chunk, vector: Embedding) {
        self.ids.insert(chunk.chunk_id.clone());
        self.partitions
            .entry(chunk.jurisdiction)
            .or_default()
            .push(IndexEntry::new(chunk, vector));
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn partition_count(&self) -> usize {
        self.partitions.len()
    }

    pub fn partition_sizes(&self) -> BTreeMap<Jurisdiction, usize> {
        self.partitions.iter().map(|(j, v)| (*j, v.len())).collect()
    }

    pub fn jurisdictions(&self) -> impl Iterator<Item = Jurisdiction> + '_ {
        self.partitions.keys().copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = &IndexEntry> {
        self.partitions.values().flatten()
    }

    pub fn contains(&self, chunk_id: &str) -> bool {
        self.ids.contains(chunk_id)
    }

    /// Exact top-k by cosine over all partitions, or only those in `restrict`.
    pub fn search(
        &self,
        query: &Embedding,
        k: usize,
        restrict: Option<&[Jurisdiction]>,
    ) -> Result<SearchResult, IndexError> {
        if k == 0 {
            return Err(IndexError::InvalidK);
        }
        if query.dim() != self.dim {
            return Err(IndexError::DimMismatch {
                expected: self.dim,
                found: query.dim(),
            });
        }
        let mut searched = Vec::new();
        let mut missing = Vec::new();
        match restrict {
            None => searched.extend(self.partitions.keys().copied()),
            Some(list) => {
                for j in list {
                    if searched.contains(j) || missing.contains(j) {
                        continue;
                    }
                    if self.partitions.contains_key(j) {
                        searched.push(*j);
                    } else {
                        missing.push(*j);
                    }
                }
            }
        }

        let qn = query.norm();
        let mut heap: BinaryHeap<Candidate<'_>> = BinaryHeap::with_capacity(k + 1);
        for j in &searched {
            for entry in &self.partitions[j] {
                let score = cosine_with_norms(query.values(), entry.vector.values(), qn, entry.norm);
                let cand = Candidate { score, entry };
                if heap.len() < k {
                    heap.push(cand);
                } else if cand < *heap.peek().expect("heap holds k items") {
                    heap.pop();
                    heap.push(cand);
                }
            }
        }
        let hits = heap
            .into_sorted_vec()
            .into_iter()
            .enumerate()
            .map(|(i, c)| ScoredChunk {
                chunk: c.entry.chunk.clone(),
                score: c.score,
                rank: i + 1,
            })
            .collect();
        Ok(SearchResult {
            hits,
            searched,
            missing,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let header = Header {
            version: u64::from(FORMAT_VERSION),
            dim: self.dim,
            fingerprint: self.fingerprint.clone(),
        };
        serde_json::to_writer(&mut out, &header).expect("header serializes");
        out.push(b'\n');
        for entry in self.entries() {
            let rec = RecordRef {
                chunk: &entry.chunk,
                vector: entry.vector.values(),
            };
            serde_json::to_writer(&mut out, &rec).expect("record serializes");
            out.push(b'\n');
        }
        let crc = crc32fast::hash(&out);
        writeln!(out, "{{\"crc32\":\"{crc:08x}\"}}").expect("write to vec");
        out
    }

    /// Parse an index file. The checksum is verified before any record is
    /// decoded, so a damaged file never yields a partial index.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IndexError> {
        let body = bytes.strip_suffix(b"\n").unwrap_or(bytes);
        let split = body
            .iter()
            .rposition(|&b| b == b'\n')
            .ok_or_else(|| IndexError::Checksum("missing checksum trailer".into()))?;
        let (payload, trailer) = body.split_at(split + 1);
        let trailer: Trailer = serde_json::from_slice(trailer)
            .map_err(|_| IndexError::Checksum("missing or unreadable checksum trailer".into()))?;
        let expected = u32::from_str_radix(&trailer.crc32, 16)
            .map_err(|_| IndexError::Checksum(format!("invalid checksum value {:?}", trailer.crc32)))?;
        let actual = crc32fast::hash(payload);
        if expected != actual {
            return Err(IndexError::Checksum(format!(
                "expected {expected:08x}, computed {actual:08x}"
            )));
        }

        let mut offset = 0;
        let mut lines = payload.split_inclusive(|&b| b == b'\n');
        let header_line = lines.next().ok_or(IndexError::Malformed {
            offset: 0,
            reason: "missing header".into(),
        })?;
        let header: Header = serde_json::from_slice(header_line).map_err(|e| IndexError::Malformed {
            offset: 0,
            reason: format!("header: {e}"),
        })?;
        if header.version != u64::from(FORMAT_VERSION) {
            return Err(IndexError::Version { found: header.version });
        }
        offset += header_line.len();
        let mut index = VectorIndex::new(header.dim, header.fingerprint);
        for line in lines {
            let rec: Record = serde_json::from_slice(line).map_err(|e| IndexError::Malformed {
                offset,
                reason: e.to_string(),
            })?;
            index
                .insert(rec.chunk, Embedding::new(rec.vector))
                .map_err(|e| IndexError::Malformed {
                    offset,
                    reason: e.to_string(),
                })?;
            offset += line.len();
        }
        Ok(index)
    }

    /// Write atomically: temp file in the same directory, then rename.
    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
        tmp_name.push(".tmp");
        let tmp = path.with_file_name(tmp_name);
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u64,
    dim: usize,
    fingerprint: String,
}

#[derive(Serialize)]
struct RecordRef<'a> {
    chunk: &'a Chunk,
    vector: &'a [f64],
}

#[derive(Deserialize)]
struct Record {
    chunk: Chunk,
    vector: Vec<f64>,
}

#[derive(Deserialize)]
struct Trailer {
    crc32: String,
}
