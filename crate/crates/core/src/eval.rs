//! Answer scoring and strategy benchmarking.
//!
//! Two reference-based metrics share one tokenizer ([`tokenize_eval`]):
//! ROUGE-L over the token LCS, and greedy embedding matching in which every
//! token is paired with its most similar token on the other side. Both report
//! precision, recall and the balanced F1.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::Jurisdiction;
use crate::embed::{cosine, EmbedError, Embedder, Embedding};
use crate::index::VectorIndex;
use crate::pipeline::Pipeline;
use crate::router::{RoutingDecision, Strategy, StrategyChoice};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{path}: {reason}")]
    Dataset { path: String, reason: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(c, '\u{2010}'..='\u{2027}' | '\u{2030}'..='\u{205E}')
        || matches!(c, '¡' | '§' | '«' | '¶' | '·' | '»' | '¿')
}

/// Lowercase, split on Unicode whitespace, strip leading and trailing
/// punctuation, drop empties.
pub fn tokenize_eval(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(|t| t.trim_matches(is_punct))
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl MetricScores {
    pub const ZERO: MetricScores = MetricScores {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };

    pub fn from_pr(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        MetricScores { precision, recall, f1 }
    }
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l_tokens<T: PartialEq>(candidate: &[T], reference: &[T]) -> MetricScores {
    let l = lcs_len(candidate, reference) as f64;
    let p = if candidate.is_empty() {
        0.0
    } else {
        l / candidate.len() as f64
    };
    let r = if reference.is_empty() {
        0.0
    } else {
        l / reference.len() as f64
    };
    MetricScores::from_pr(p, r)
}

pub fn rouge_l(candidate: &str, reference: &str) -> MetricScores {
    rouge_l_tokens(&tokenize_eval(candidate), &tokenize_eval(reference))
}

/// Greedy embedding match. Each token is embedded on its own; similarities
/// are clamped to `[0, 1]` before averaging.
pub fn greedy_embed_score(
    candidate: &str,
    reference: &str,
    embedder: &dyn Embedder,
) -> Result<MetricScores, EmbedError> {
    let cand = tokenize_eval(candidate);
    let refs = tokenize_eval(reference);
    if cand.is_empty() || refs.is_empty() {
        return Ok(MetricScores::ZERO);
    }
    let mut vectors: HashMap<&str, Embedding> = HashMap::new();
    for t in cand.iter().chain(&refs) {
        if !vectors.contains_key(t.as_str()) {
            vectors.insert(t, embedder.embed(t)?);
        }
    }
    let best = |from: &[String], to: &[String]| -> Result<f64, EmbedError> {
        let mut total = 0.0;
        for a in from {
            let mut max = f64::NEG_INFINITY;
            for b in to {
                max = max.max(cosine(&vectors[a.as_str()], &vectors[b.as_str()])?);
            }
            total += max.clamp(0.0, 1.0);
        }
        Ok(total / from.len() as f64)
    };
    Ok(MetricScores::from_pr(best(&cand, &refs)?, best(&refs, &cand)?))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaRecord {
    pub id: String,
    pub question: String,
    pub reference_answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_states: Option<Vec<String>>,
}

/// Parse a JSON-lines dataset and check record invariants.
pub fn parse_dataset(text: &str, origin: &str) -> Result<Vec<QaRecord>, EvalError> {
    let bad = |line: usize, reason: String| EvalError::Dataset {
        path: format!("{origin}:{line}"),
        reason,
    };
    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: QaRecord = serde_json::from_str(line).map_err(|e| bad(i + 1, e.to_string()))?;
        if rec.question.trim().is_empty() || rec.reference_answer.trim().is_empty() {
            return Err(bad(
                i + 1,
                format!("record {} has an empty question or reference", rec.id),
            ));
        }
        if let Some(states) = &rec.expected_states {
            if let Some(s) = states.iter().find(|s| Jurisdiction::parse(s).is_none()) {
                return Err(bad(i + 1, format!("unknown expected state {s:?}")));
            }
        }
        if !ids.insert(rec.id.clone()) {
            return Err(bad(i + 1, format!("duplicate id {}", rec.id)));
        }
        records.push(rec);
    }
    Ok(records)
}

pub fn load_dataset(path: &Path) -> Result<Vec<QaRecord>, EvalError> {
    parse_dataset(&std::fs::read_to_string(path)?, &path.display().to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordResult {
    pub id: String,
    pub rouge_l: Option<MetricScores>,
    pub embed_score: Option<MetricScores>,
    pub latency_ms: Option<f64>,
    pub strategy: Option<RoutingDecision>,
    pub routing_correct: Option<bool>,
    pub error: Option<String>,
    /// Scores from external tools, keyed by metric name.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub external: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MeanScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl MeanScores {
    fn of(scores: &[MetricScores]) -> Self {
        if scores.is_empty() {
            return MeanScores::default();
        }
        let n = scores.len() as f64;
        MeanScores {
            precision: scores.iter().map(|s| s.precision).sum::<f64>() / n,
            recall: scores.iter().map(|s| s.recall).sum::<f64>() / n,
            f1: scores.iter().map(|s| s.f1).sum::<f64>() / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReportMeans {
    pub rouge_l: MeanScores,
    pub embed_score: MeanScores,
    /// Fraction of records with expected states whose routing matched.
    pub routing_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub external: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_record: Vec<RecordResult>,
    pub means: ReportMeans,
    /// Ids of failed records, left out of the means.
    pub excluded: Vec<String>,
    pub config_fingerprint: String,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        let mut text = self.to_json();
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    fn recompute_means(&mut self) {
        let ok: Vec<&RecordResult> = self.per_record.iter().filter(|r| r.error.is_none()).collect();
        let rouge: Vec<MetricScores> = ok.iter().filter_map(|r| r.rouge_l).collect();
        let embed: Vec<MetricScores> = ok.iter().filter_map(|r| r.embed_score).collect();
        let routed: Vec<bool> = ok.iter().filter_map(|r| r.routing_correct).collect();
        let mut external: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for r in &ok {
            for (k, v) in &r.external {
                let e = external.entry(k.clone()).or_default();
                e.0 += v;
                e.1 += 1;
            }
        }
        self.means = ReportMeans {
            rouge_l: MeanScores::of(&rouge),
            embed_score: MeanScores::of(&embed),
            routing_accuracy: (!routed.is_empty())
                .then(|| routed.iter().filter(|b| **b).count() as f64 / routed.len() as f64),
            external: external.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
        };
    }

    /// Merge scores produced by external tools. The sidecar is a JSON object
    /// `{record_id: {metric_name: score}}`; unknown ids are ignored.
    pub fn attach_external_scores(&mut self, sidecar: &str) -> Result<(), EvalError> {
        let scores: BTreeMap<String, BTreeMap<String, f64>> = serde_json::from_str(sidecar)?;
        for r in &mut self.per_record {
            if let Some(s) = scores.get(&r.id) {
                r.external.extend(s.iter().map(|(k, v)| (k.clone(), *v)));
            }
        }
        self.recompute_means();
        Ok(())
    }
}

/// Fingerprint of everything that shapes an answer.
pub fn config_fingerprint(pipeline: &Pipeline, generator: &str) -> String {
    let o = &pipeline.options;
    let mut h = Sha256::new();
    h.update(pipeline.embedder.fingerprint().as_bytes());
    h.update([0]);
    h.update(generator.as_bytes());
    h.update([0]);
    h.update(format!(
        "k={};threshold={};swi={};summarize={};federal={};neighbors={}",
        o.k,
        o.threshold,
        pipeline.router.swi_enabled,
        o.summarize_swi,
        pipeline.router.include_federal,
        pipeline.router.adjacency.is_some()
    ));
    h.update([0]);
    h.update(pipeline.template.as_str().as_bytes());
    let digest: String = h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect();
    format!("{}|{}|{}", pipeline.embedder.fingerprint(), generator, digest)
}

fn routing_matches(expected: &[String], decision: &RoutingDecision) -> bool {
    let want: HashSet<Jurisdiction> = expected.iter().filter_map(|s| Jurisdiction::parse(s)).collect();
    let got: HashSet<Jurisdiction> = decision.states.iter().copied().collect();
    want == got
}

/// Answer every record with automatic routing and score it.
pub fn run_eval(
    dataset: &[QaRecord],
    index: &VectorIndex,
    pipeline: &Pipeline,
    config_fingerprint: String,
) -> Result<EvalReport, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let mut per_record = Vec::with_capacity(dataset.len());
    let mut excluded = Vec::new();
    for rec in dataset {
        let started = Instant::now();
        let outcome = pipeline
            .answer(&rec.question, index, StrategyChoice::Auto, None)
            .map_err(|e| e.to_string())
            .and_then(|answer| {
                let embed = greedy_embed_score(&answer.text, &rec.reference_answer, pipeline.embedder.as_ref())
                    .map_err(|e| e.to_string())?;
                Ok((answer, embed))
            });
        let latency = pipeline
            .options
            .capture_timings
            .then(|| started.elapsed().as_secs_f64() * 1000.0);
        per_record.push(match outcome {
            Ok((answer, embed)) => RecordResult {
                id: rec.id.clone(),
                rouge_l: Some(rouge_l(&answer.text, &rec.reference_answer)),
                embed_score: Some(embed),
                latency_ms: latency,
                routing_correct: rec
                    .expected_states
                    .as_deref()
                    .map(|e| routing_matches(e, &answer.strategy)),
                strategy: Some(answer.strategy),
                error: None,
                external: BTreeMap::new(),
            },
            Err(error) => {
                excluded.push(rec.id.clone());
                RecordResult {
                    id: rec.id.clone(),
                    rouge_l: None,
                    embed_score: None,
                    latency_ms: latency,
                    strategy: None,
                    routing_correct: None,
                    error: Some(error),
                    external: BTreeMap::new(),
                }
            }
        });
    }
    let mut report = EvalReport {
        per_record,
        means: ReportMeans::default(),
        excluded,
        config_fingerprint,
    };
    report.recompute_means();
    Ok(report)
}

pub const BENCH_HEADER: [&str; 5] = [
    "query",
    "strategy",
    "latency_ms",
    "partitions_scanned",
    "states_identified",
];
pub const UNROUTABLE: &str = "n/a (no states named)";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub query: String,
    pub strategy: Strategy,
    /// `None` when the query could not run under this strategy.
    pub latency_ms: Option<f64>,
    pub partitions_scanned: Option<usize>,
    pub states_identified: Vec<Jurisdiction>,
}

/// Run each query under forced whole-index and forced state-wise retrieval.
pub fn bench_strategies(
    queries: &[String],
    index: &VectorIndex,
    pipeline: &Pipeline,
    k: Option<usize>,
) -> Result<Vec<BenchRow>, crate::pipeline::PipelineError> {
    let mut rows = Vec::with_capacity(queries.len() * 2);
    for q in queries {
        for choice in [StrategyChoice::Wdi, StrategyChoice::Swi] {
            let strategy = if choice == StrategyChoice::Wdi {
                Strategy::Wdi
            } else {
                Strategy::Swi
            };
            let started = Instant::now();
            match pipeline.answer(q, index, choice, k) {
                Ok(answer) => rows.push(BenchRow {
                    query: q.clone(),
                    strategy,
                    latency_ms: Some(started.elapsed().as_secs_f64() * 1000.0),
                    partitions_scanned: Some(answer.partitions_scanned),
                    states_identified: answer.strategy.states,
                }),
                Err(crate::pipeline::PipelineError::NoStatesNamed) => rows.push(BenchRow {
                    query: q.clone(),
                    strategy,
                    latency_ms: None,
                    partitions_scanned: None,
                    states_identified: Vec::new(),
                }),
                Err(e) => return Err(e),
            }
        }
    }
    Ok(rows)
}

pub fn write_bench_csv<W: std::io::Write>(rows: &[BenchRow], out: W) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(BENCH_HEADER)?;
    for r in rows {
        let states: Vec<&str> = r.states_identified.iter().map(|s| s.name()).collect();
        let (latency, partitions) = match (r.latency_ms, r.partitions_scanned) {
            (Some(l), Some(p)) => (format!("{l:.3}"), p.to_string()),
            _ => (UNROUTABLE.to_string(), UNROUTABLE.to_string()),
        };
        w.write_record([
            r.query.as_str(),
            &r.strategy.to_string(),
            &latency,
            &partitions,
            &states.join(";"),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_rules() {
        assert!(tokenize_eval("").is_empty());
        assert_eq!(tokenize_eval("The cat, sat."), ["the", "cat", "sat"]);
        assert_eq!(tokenize_eval("  \"§ 13A-8-112.\" — ok "), ["13a-8-112", "ok"]);
    }

    #[test]
    fn rouge_hand_case() {
        let s = rouge_l("the cat sat on mat", "the cat was on the mat");
        assert_eq!(s.precision, 0.8);
        assert!((s.recall - 4.0 / 6.0).abs() < 1e-15);
        assert!((s.recall - 0.6667).abs() < 1e-4);
        assert!((s.f1 - 0.7273).abs() < 1e-4);
    }

    #[test]
    fn rouge_extremes() {
        assert_eq!(rouge_l("a b c", "a b c"), MetricScores::from_pr(1.0, 1.0));
        assert_eq!(rouge_l("a b", "c d"), MetricScores::ZERO);
        assert_eq!(rouge_l("", "a"), MetricScores::ZERO);
    }

    #[test]
    fn f1_zero_when_pr_zero() {
        assert_eq!(MetricScores::from_pr(0.0, 0.0).f1, 0.0);
        assert_eq!(MetricScores::from_pr(1.0, 0.5).f1, 2.0 / 3.0);
    }

    #[test]
    fn dataset_validation() {
        let ok = r#"{"id":"1","question":"q","reference_answer":"a","expected_states":["Ohio"]}
{"id":"2","question":"q2","reference_answer":"a2"}"#;
        let recs = parse_dataset(ok, "t").unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].expected_states, None);
        let dup = r#"{"id":"1","question":"q","reference_answer":"a"}
{"id":"1","question":"q","reference_answer":"a"}"#;
        assert!(parse_dataset(dup, "t").is_err());
        assert!(parse_dataset(r#"{"id":"1","question":" ","reference_answer":"a"}"#, "t").is_err());
        assert!(parse_dataset(
            r#"{"id":"1","question":"q","reference_answer":"a","expected_states":["Gotham"]}"#,
            "t"
        )
        .is_err());
    }

    #[test]
    fn bench_csv_layout() {
        let rows = vec![
            BenchRow {
                query: "Alabama, and Kansas".into(),
                strategy: Strategy::Swi,
                latency_ms: Some(1.5),
                partitions_scanned: Some(2),
                states_identified: vec![
                    Jurisdiction::parse("Alabama").unwrap(),
                    Jurisdiction::parse("Kansas").unwrap(),
                ],
            },
            BenchRow {
                query: "plain".into(),
                strategy: Strategy::Swi,
                latency_ms: None,
                partitions_scanned: None,
                states_identified: vec![],
            },
        ];
        let mut out = Vec::new();
        write_bench_csv(&rows, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[0],
            "query,strategy,latency_ms,partitions_scanned,states_identified"
        );
        assert_eq!(lines[1], "\"Alabama, and Kansas\",SWI,1.500,2,Alabama;Kansas");
        assert_eq!(lines[2], "plain,SWI,n/a (no states named),n/a (no states named),");
    }
}
