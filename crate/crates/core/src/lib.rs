//! Retrieval-augmented question answering over jurisdiction-partitioned
//! legal corpora.
//!
//! The flow is: [`corpus`] loads and chunks statutes, [`embed`] turns chunks
//! into vectors, [`index`] stores them partitioned by jurisdiction,
//! [`router`] decides whether a question targets specific states, and
//! [`pipeline`] retrieves context and generates a cited answer. [`eval`]
//! scores answers against references and benchmarks the two retrieval
//! strategies.

pub mod corpus;
pub mod embed;
pub mod eval;
pub mod index;
pub mod pipeline;
pub mod router;

pub use corpus::{chunk_document, load_corpus, Chunk, ChunkConfig, Corpus, Document, Jurisdiction, UsState};
pub use embed::{cosine, Embedder, EmbedderKind, EmbedderSpec, Embedding, LocalHashEmbedder};
pub use eval::{bench_strategies, greedy_embed_score, rouge_l, run_eval, EvalReport, MetricScores, QaRecord};
pub use index::{ScoredChunk, SearchResult, VectorIndex};
pub use pipeline::{Answer, Generator, GeneratorSpec, Pipeline, PipelineError, PipelineOptions, NOT_FOUND_SENTINEL};
pub use router::{route, RouterConfig, RoutingDecision, Strategy, StrategyChoice};
