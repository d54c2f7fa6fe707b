//! Retrieve-then-generate query execution.
//!
//! Whole-index queries search every partition and make one generator call.
//! State-wise queries search each routed state's partition separately, make
//! one generator call per state, and concatenate the labeled sections under a
//! `Looking into the following state(s): ...` header.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Jurisdiction;
use crate::embed::{EmbedError, Embedder};
use crate::index::{rank_order, IndexError, ScoredChunk, VectorIndex};
use crate::router::{route, RouterConfig, RoutingDecision, Strategy, StrategyChoice};

/// Fixed answer when retrieval yields nothing relevant enough.
pub const NOT_FOUND_SENTINEL: &str = "I am sorry, I could not find any information to answer the question you asked.";

/// Substring that marks a remote generation as a not-found answer.
pub const NOT_FOUND_MARKER: &str = "could not find any information";

pub const QUESTION_PLACEHOLDER: &str = "{{QUESTION}}";
pub const CONTEXTS_PLACEHOLDER: &str = "{{CONTEXTS}}";

pub const DEFAULT_K: usize = 5;
pub const DEFAULT_THRESHOLD: f64 = 0.25;

pub const DEFAULT_TEMPLATE: &str = "\
You are a legal research assistant. Answer the question using only the numbered statute excerpts below, \
and name the citation of every excerpt you rely on.
If the excerpts are empty or do not contain the answer, reply exactly: \
\"I am sorry, I could not find any information to answer the question you asked.\"

Excerpts:
{{CONTEXTS}}

Question: {{QUESTION}}
Answer:";

const SYSTEM_PROMPT: &str = "You answer questions about legislation strictly from the supplied excerpts.";

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
    #[error("remote model request failed{}: {message}", status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    Remote { status: Option<u16>, message: String },
    #[error("missing credentials: environment variable {0} is not set")]
    MissingCredentials(String),
    #[error("malformed chat response: {0}")]
    MalformedResponse(String),
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("prompt template: {0}")]
    Template(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error("no states named in the question; the state-wise strategy needs at least one")]
    NoStatesNamed,
    #[error("query embedder fingerprint {embedder} does not match index fingerprint {index}")]
    FingerprintMismatch { embedder: String, index: String },
}

/// Prompt template with `{{QUESTION}}` and `{{CONTEXTS}}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate(String);

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate(DEFAULT_TEMPLATE.to_string())
    }
}

impl PromptTemplate {
    pub fn new(text: impl Into<String>) -> Result<Self, PipelineError> {
        let text = text.into();
        for p in [QUESTION_PLACEHOLDER, CONTEXTS_PLACEHOLDER] {
            if !text.contains(p) {
                return Err(PipelineError::Template(format!("missing placeholder {p}")));
            }
        }
        Ok(PromptTemplate(text))
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| PipelineError::Template(format!("{}: {e}", path.display())))?;
        Self::new(text)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Single pass over the template, so placeholder text inside the
    /// substituted values is left alone.
    fn fill(&self, question: &str, contexts: &str) -> String {
        let mut out = String::with_capacity(self.0.len() + question.len() + contexts.len());
        let mut rest = self.0.as_str();
        loop {
            let q = rest.find(QUESTION_PLACEHOLDER);
            let c = rest.find(CONTEXTS_PLACEHOLDER);
            let (at, placeholder, value) = match (q, c) {
                (Some(q), Some(c)) if q < c => (q, QUESTION_PLACEHOLDER, question),
                (Some(q), None) => (q, QUESTION_PLACEHOLDER, question),
                (_, Some(c)) => (c, CONTEXTS_PLACEHOLDER, contexts),
                (None, None) => break,
            };
            out.push_str(&rest[..at]);
            out.push_str(value);
            rest = &rest[at + placeholder.len()..];
        }
        out.push_str(rest);
        out
    }
}

/// Render contexts as `[i] (citation) text` blocks in rank order and fill the
/// template.
pub fn assemble_prompt(question: &str, contexts: &[ScoredChunk], template: &PromptTemplate) -> String {
    let mut block = String::new();
    for (i, c) in contexts.iter().enumerate() {
        if i > 0 {
            block.push_str("\n\n");
        }
        let _ = write!(block, "[{}] ({}) {}", i + 1, c.chunk.citation, c.chunk.text);
    }
    template.fill(question, &block)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    RemoteChat,
    ExtractiveStub,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub kind: GeneratorKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_env_var: Option<String>,
    #[serde(default)]
    pub temperature: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            kind: GeneratorKind::ExtractiveStub,
            endpoint_url: None,
            model_name: None,
            auth_env_var: None,
            temperature: 0.0,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<(), GeneratorError> {
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(GeneratorError::InvalidSpec("temperature must be >= 0".into()));
        }
        if self.kind == GeneratorKind::RemoteChat && self.endpoint_url.as_deref().is_none_or(|u| u.trim().is_empty()) {
            return Err(GeneratorError::InvalidSpec(
                "remote_chat generator requires endpoint_url".into(),
            ));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Arc<dyn Generator>, GeneratorError> {
        self.validate()?;
        Ok(match self.kind {
            GeneratorKind::ExtractiveStub => Arc::new(ExtractiveStub),
            GeneratorKind::RemoteChat => Arc::new(RemoteChat::new(self.clone())?),
        })
    }

    pub fn describe(&self) -> String {
        match self.kind {
            GeneratorKind::ExtractiveStub => "extractive_stub".into(),
            GeneratorKind::RemoteChat => format!(
                "remote_chat:{}:t={}",
                self.model_name.as_deref().unwrap_or(""),
                self.temperature
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    pub text: String,
    pub not_found: bool,
}

pub trait Generator: Send + Sync {
    /// Produce an answer from an assembled prompt. `contexts` are the chunks
    /// rendered into the prompt, best first.
    fn generate(&self, prompt: &str, contexts: &[ScoredChunk], threshold: f64) -> Result<Generation, GeneratorError>;

    /// Merge state-wise sections into one final response. Only used when
    /// summarization is switched on.
    fn summarize(&self, prompt: &str, accumulated: &str) -> Result<String, GeneratorError>;
}

/// Offline generator: quotes the best chunk, or answers with the sentinel
/// when nothing clears the threshold.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExtractiveStub;

impl Generator for ExtractiveStub {
    fn generate(&self, _prompt: &str, contexts: &[ScoredChunk], threshold: f64) -> Result<Generation, GeneratorError> {
        Ok(match contexts.first() {
            Some(top) if top.score >= threshold => Generation {
                text: format!("According to {}: {}", top.chunk.citation, top.chunk.text.trim()),
                not_found: false,
            },
            _ => Generation {
                text: NOT_FOUND_SENTINEL.to_string(),
                not_found: true,
            },
        })
    }

    fn summarize(&self, _prompt: &str, accumulated: &str) -> Result<String, GeneratorError> {
        Ok(accumulated.to_string())
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: String,
}

/// Chat-completion HTTP client.
pub struct RemoteChat {
    spec: GeneratorSpec,
    client: reqwest::blocking::Client,
}

impl std::fmt::Debug for RemoteChat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteChat").field("spec", &self.spec).finish()
    }
}

impl RemoteChat {
    pub fn new(spec: GeneratorSpec) -> Result<Self, GeneratorError> {
        spec.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| GeneratorError::Remote {
                status: None,
                message: e.to_string(),
            })?;
        Ok(RemoteChat { spec, client })
    }

    fn complete(&self, user: &str) -> Result<String, GeneratorError> {
        let body = serde_json::json!({
            "model": self.spec.model_name.as_deref().unwrap_or(""),
            "temperature": self.spec.temperature,
            "messages": [
                {"role": "system", "content": SYSTEM_PROMPT},
                {"role": "user", "content": user},
            ],
        });
        let mut req = self
            .client
            .post(self.spec.endpoint_url.as_deref().unwrap_or_default())
            .json(&body);
        if let Some(var) = &self.spec.auth_env_var {
            let token = std::env::var(var).map_err(|_| GeneratorError::MissingCredentials(var.clone()))?;
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| GeneratorError::Remote {
            status: e.status().map(|s| s.as_u16()),
            message: e.to_string(),
        })?;
        let status = resp.status();
        if !status.is_success() {
            return Err(GeneratorError::Remote {
                status: Some(status.as_u16()),
                message: resp.text().unwrap_or_default(),
            });
        }
        let parsed: ChatResponse = resp
            .json()
            .map_err(|e| GeneratorError::MalformedResponse(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| GeneratorError::MalformedResponse("no choices".into()))
    }
}

impl Generator for RemoteChat {
    fn generate(&self, prompt: &str, _contexts: &[ScoredChunk], _threshold: f64) -> Result<Generation, GeneratorError> {
        let text = self.complete(prompt)?;
        let not_found = text.contains(NOT_FOUND_MARKER);
        Ok(Generation { text, not_found })
    }

    fn summarize(&self, prompt: &str, _accumulated: &str) -> Result<String, GeneratorError> {
        self.complete(prompt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Section {
    pub state: Jurisdiction,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Source {
    pub chunk_id: String,
    pub doc_id: String,
    pub citation: String,
    pub score: f64,
    pub jurisdiction: Jurisdiction,
    /// Retrieved but scored under the not-found threshold.
    pub below_threshold: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub route_ms: f64,
    pub retrieve_ms: f64,
    pub generate_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub text: String,
    pub sections: Vec<Section>,
    pub sources: Vec<Source>,
    pub strategy: RoutingDecision,
    pub not_found: bool,
    /// `None` when timing capture is switched off.
    pub timings: Option<Timings>,
    pub partitions_scanned: usize,
}

/// Knobs for one pipeline instance.
#[derive(Debug, Clone)]
pub struct PipelineOptions {
    pub k: usize,
    pub threshold: f64,
    /// Make a second generator call to merge state-wise sections.
    pub summarize_swi: bool,
    pub capture_timings: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            k: DEFAULT_K,
            threshold: DEFAULT_THRESHOLD,
            summarize_swi: false,
            capture_timings: true,
        }
    }
}

/// Wires an embedder, a generator and a router around a shared index.
#[derive(Clone)]
pub struct Pipeline {
    pub embedder: Arc<dyn Embedder>,
    pub generator: Arc<dyn Generator>,
    pub template: PromptTemplate,
    pub router: RouterConfig,
    pub options: PipelineOptions,
}

#[derive(Default)]
struct Clock {
    route: Duration,
    retrieve: Duration,
    generate: Duration,
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1000.0
}

fn sources_from(hits: &[ScoredChunk], threshold: f64, into: &mut Vec<Source>) {
    for h in hits {
        if into.iter().any(|s| s.chunk_id == h.chunk.chunk_id) {
            continue;
        }
        into.push(Source {
            chunk_id: h.chunk.chunk_id.clone(),
            doc_id: h.chunk.doc_id.clone(),
            citation: h.chunk.citation.clone(),
            score: h.score,
            jurisdiction: h.chunk.jurisdiction,
            below_threshold: h.score < threshold,
        });
    }
}

fn sort_sources(sources: &mut [Source]) {
    sources.sort_by(|a, b| rank_order(a.score, &a.chunk_id, b.score, &b.chunk_id));
}

impl Pipeline {
    pub fn new(embedder: Arc<dyn Embedder>, generator: Arc<dyn Generator>) -> Self {
        Pipeline {
            embedder,
            generator,
            template: PromptTemplate::default(),
            router: RouterConfig::default(),
            options: PipelineOptions::default(),
        }
    }

    fn check_index(&self, index: &VectorIndex) -> Result<(), PipelineError> {
        let fp = self.embedder.fingerprint();
        if fp != index.fingerprint() {
            return Err(PipelineError::FingerprintMismatch {
                embedder: fp,
                index: index.fingerprint().to_string(),
            });
        }
        Ok(())
    }

    /// Route, dispatch and time a question. `k` overrides the configured
    /// top-k when given.
    pub fn answer(
        &self,
        question: &str,
        index: &VectorIndex,
        choice: StrategyChoice,
        k: Option<usize>,
    ) -> Result<Answer, PipelineError> {
        let started = Instant::now();
        let decision = self.decide(question, choice)?;
        let route_time = started.elapsed();
        let k = k.unwrap_or(self.options.k);
        let mut clock = Clock {
            route: route_time,
            ..Clock::default()
        };
        let mut answer = match decision.strategy {
            Strategy::Wdi => self.wdi(question, index, k, &mut clock)?,
            Strategy::Swi => self.swi(question, index, k, decision, &mut clock)?,
        };
        if self.options.capture_timings {
            answer.timings = Some(Timings {
                route_ms: ms(clock.route),
                retrieve_ms: ms(clock.retrieve),
                generate_ms: ms(clock.generate),
                total_ms: ms(started.elapsed()),
            });
        }
        Ok(answer)
    }

    /// Routing outcome for a question under a requested strategy.
    pub fn decide(&self, question: &str, choice: StrategyChoice) -> Result<RoutingDecision, PipelineError> {
        match choice {
            StrategyChoice::Auto => Ok(route(question, &self.router)),
            StrategyChoice::Wdi => Ok(RoutingDecision::wdi()),
            StrategyChoice::Swi => {
                let (states, expanded) = self.router.target_states(question);
                if states.is_empty() {
                    return Err(PipelineError::NoStatesNamed);
                }
                Ok(RoutingDecision {
                    strategy: Strategy::Swi,
                    states,
                    expanded_from_neighbors: expanded,
                })
            }
        }
    }

    pub fn run_wdi(&self, question: &str, index: &VectorIndex, k: usize) -> Result<Answer, PipelineError> {
        let mut clock = Clock::default();
        self.wdi(question, index, k, &mut clock)
    }

    pub fn run_swi(
        &self,
        question: &str,
        index: &VectorIndex,
        k: usize,
        states: &[Jurisdiction],
    ) -> Result<Answer, PipelineError> {
        if states.is_empty() {
            return Err(PipelineError::NoStatesNamed);
        }
        let decision = RoutingDecision {
            strategy: Strategy::Swi,
            states: states.to_vec(),
            expanded_from_neighbors: false,
        };
        let mut clock = Clock::default();
        self.swi(question, index, k, decision, &mut clock)
    }

    fn wdi(&self, question: &str, index: &VectorIndex, k: usize, clock: &mut Clock) -> Result<Answer, PipelineError> {
        self.check_index(index)?;
        let t = Instant::now();
        let query = self.embedder.embed(question)?;
        let result = index.search(&query, k, None)?;
        clock.retrieve += t.elapsed();

        let t = Instant::now();
        let prompt = assemble_prompt(question, &result.hits, &self.template);
        let generation = self.generator.generate(&prompt, &result.hits, self.options.threshold)?;
        clock.generate += t.elapsed();

        let mut sources = Vec::new();
        sources_from(&result.hits, self.options.threshold, &mut sources);
        sort_sources(&mut sources);
        Ok(Answer {
            text: generation.text,
            sections: Vec::new(),
            sources,
            strategy: RoutingDecision::wdi(),
            not_found: generation.not_found,
            timings: None,
            partitions_scanned: index.partition_count(),
        })
    }

    fn swi(
        &self,
        question: &str,
        index: &VectorIndex,
        k: usize,
        decision: RoutingDecision,
        clock: &mut Clock,
    ) -> Result<Answer, PipelineError> {
        self.check_index(index)?;
        let t = Instant::now();
        let query = self.embedder.embed(question)?;
        clock.retrieve += t.elapsed();

        let mut sections = Vec::with_capacity(decision.states.len());
        let mut sources = Vec::new();
        let mut all_not_found = true;
        for state in &decision.states {
            let t = Instant::now();
            let result = index.search(&query, k, Some(std::slice::from_ref(state)))?;
            clock.retrieve += t.elapsed();

            let t = Instant::now();
            let generation = if result.hits.is_empty() {
                Generation {
                    text: NOT_FOUND_SENTINEL.to_string(),
                    not_found: true,
                }
            } else {
                let prompt = assemble_prompt(question, &result.hits, &self.template);
                self.generator.generate(&prompt, &result.hits, self.options.threshold)?
            };
            clock.generate += t.elapsed();

            all_not_found &= generation.not_found;
            sources_from(&result.hits, self.options.threshold, &mut sources);
            sections.push(Section {
                state: *state,
                text: generation.text,
            });
        }
        sort_sources(&mut sources);

        let names: Vec<&str> = decision.states.iter().map(|s| s.name()).collect();
        let mut text = format!("Looking into the following state(s): {}", names.join(", "));
        for s in &sections {
            let _ = write!(text, "\n\n{}: {}", s.state.name(), s.text);
        }
        if self.options.summarize_swi {
            let t = Instant::now();
            let blocks: Vec<String> = sections
                .iter()
                .enumerate()
                .map(|(i, s)| format!("[{}] ({}) {}", i + 1, s.state.name(), s.text))
                .collect();
            let prompt = self.template.fill(question, &blocks.join("\n\n"));
            text = self.generator.summarize(&prompt, &text)?;
            clock.generate += t.elapsed();
        }

        let partitions_scanned = decision.states.len();
        Ok(Answer {
            text,
            sections,
            sources,
            strategy: decision,
            not_found: all_not_found,
            timings: None,
            partitions_scanned,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Chunk;

    fn scored(id: &str, score: f64, rank: usize) -> ScoredChunk {
        ScoredChunk {
            chunk: Chunk {
                chunk_id: format!("{id}#0"),
                doc_id: id.into(),
                ordinal: 0,
                start_char: 0,
                end_char: 4,
                text: format!("text of {id}"),
                jurisdiction: Jurisdiction::parse("Alabama").unwrap(),
                citation: format!("Code of Ala. § {id}"),
            },
            score,
            rank,
        }
    }

    #[test]
    fn template_requires_placeholders() {
        assert!(PromptTemplate::new("{{QUESTION}} only").is_err());
        assert!(PromptTemplate::new("{{CONTEXTS}} only").is_err());
        assert!(PromptTemplate::new("{{QUESTION}} {{CONTEXTS}}").is_ok());
    }

    #[test]
    fn empty_contexts_keep_not_found_instruction() {
        let p = assemble_prompt("Q?", &[], &PromptTemplate::default());
        assert!(p.contains("I could not find any information"));
        assert!(p.contains("Excerpts:\n\n\nQuestion: Q?"));
        assert!(!p.contains("[1]"));
    }

    #[test]
    fn contexts_numbered_in_rank_order() {
        let ctx = vec![scored("a", 0.9, 1), scored("b", 0.8, 2), scored("c", 0.7, 3)];
        let t = PromptTemplate::new("{{CONTEXTS}}|{{QUESTION}}").unwrap();
        let p = assemble_prompt("why", &ctx, &t);
        assert_eq!(
            p,
            "[1] (Code of Ala. § a) text of a\n\n[2] (Code of Ala. § b) text of b\n\n[3] (Code of Ala. § c) text of c|why"
        );
        let odd = assemble_prompt("{{CONTEXTS}}", &ctx[..1], &t);
        assert!(odd.ends_with("|{{CONTEXTS}}"));
        let one = assemble_prompt("why", &ctx[..1], &t);
        assert_eq!(one.matches("[1]").count(), 1);
        assert!(!one.contains("[2]"));
    }

    #[test]
    fn stub_generation() {
        let stub = ExtractiveStub;
        let none = stub.generate("", &[], 0.0).unwrap();
        assert_eq!(none.text, NOT_FOUND_SENTINEL);
        assert!(none.not_found);

        let hit = stub.generate("", &[scored("13A-8-112", 0.95, 1)], 0.25).unwrap();
        assert_eq!(hit.text, "According to Code of Ala. § 13A-8-112: text of 13A-8-112");
        assert!(!hit.not_found);

        let low = stub.generate("", &[scored("x", 0.10, 1)], 0.25).unwrap();
        assert_eq!(low.text, NOT_FOUND_SENTINEL);
        assert!(low.not_found);
    }

    #[test]
    fn generator_spec_validation() {
        let mut spec = GeneratorSpec {
            kind: GeneratorKind::RemoteChat,
            ..GeneratorSpec::default()
        };
        assert!(spec.validate().is_err());
        spec.endpoint_url = Some("http://localhost:1/v1/chat".into());
        assert!(spec.validate().is_ok());
        spec.temperature = -1.0;
        assert!(spec.validate().is_err());
    }
}
