mod common;

use reqwest::StatusCode;
use serde_json::{json, Value};
use statrag_core::corpus::load_corpus;
use statrag_core::index::VectorIndex;

async fn start(dir: &std::path::Path) -> common::Server {
    common::Server::start(common::state(common::engine(dir, json!({ "capture_timings": false })))).await
}

async fn get(client: &reqwest::Client, url: String) -> (StatusCode, Value) {
    let r = client.get(url).send().await.unwrap();
    (r.status(), r.json().await.unwrap())
}

async fn post(client: &reqwest::Client, url: String, body: impl Into<reqwest::Body>) -> (StatusCode, Value) {
    let r = client
        .post(url)
        .header("content-type", "application/json")
        .body(body)
        .send()
        .await
        .unwrap();
    assert_eq!(r.headers()["content-type"], "application/json");
    (r.status(), r.json().await.unwrap())
}

#[tokio::test(flavor = "multi_thread")]
async fn health_and_stats() {
    let dir = tempfile::tempdir().unwrap();
    let server = start(dir.path()).await;
    let client = reqwest::Client::new();
    let (status, health) = get(&client, server.url("/health")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(health, json!({ "status": "ok", "chunks": 33, "partitions": 16 }));

    let (status, stats) = get(&client, server.url("/stats")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(stats["chunks"], 33);
    assert_eq!(stats["dim"], 256);
    assert_eq!(stats["partitions"]["Alabama"], 5);
    assert_eq!(stats["partitions"]["Federal"], 1);
    let total: u64 = stats["partitions"]
        .as_object()
        .unwrap()
        .values()
        .map(|v| v.as_u64().unwrap())
        .sum();
    assert_eq!(total, 33);

    let (status, body) = get(&client, server.url("/nope")).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(body["error"].is_string());
    server.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn query_matches_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let server = start(dir.path()).await;
    let client = reqwest::Client::new();
    let q = "What does Kansas require after a security breach?";
    let (status, body) = post(
        &client,
        server.url("/query"),
        json!({ "question": q, "k": 3 }).to_string(),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let direct = server
        .state
        .pipeline()
        .answer(q, &server.state.index(), Default::default(), Some(3))
        .unwrap();
    assert_eq!(body, serde_json::to_value(&direct).unwrap());
    assert_eq!(body["strategy"]["states"], json!(["Kansas"]));

    let (status, body) = post(
        &client,
        server.url("/query"),
        json!({ "question": q, "strategy": "wdi" }).to_string(),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["strategy"]["strategy"], "WDI");
    server.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn bad_requests_get_json_errors() {
    let dir = tempfile::tempdir().unwrap();
    let server = start(dir.path()).await;
    let client = reqwest::Client::new();
    let cases: &[(&str, StatusCode)] = &[
        ("not json", StatusCode::BAD_REQUEST),
        ("{}", StatusCode::BAD_REQUEST),
        (r#"{"question": ""}"#, StatusCode::BAD_REQUEST),
        (r#"{"question": 7}"#, StatusCode::BAD_REQUEST),
        (r#"{"question": "x", "k": 0}"#, StatusCode::BAD_REQUEST),
        (r#"{"question": "x", "extra": 1}"#, StatusCode::BAD_REQUEST),
        (r#"{"question": "x", "strategy": "fastest"}"#, StatusCode::NOT_FOUND),
        (
            r#"{"question": "What is a breach?", "strategy": "swi"}"#,
            StatusCode::BAD_REQUEST,
        ),
    ];
    for (body, want) in cases {
        let (status, err) = post(&client, server.url("/query"), body.to_string()).await;
        assert_eq!(status, *want, "{body}");
        assert!(err["error"].as_str().is_some_and(|m| !m.is_empty()), "{body}");
    }
    let (status, _) = post(&client, server.url("/eval"), "").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    server.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn eval_accepts_jsonl_and_arrays() {
    let dir = tempfile::tempdir().unwrap();
    let server = start(dir.path()).await;
    let client = reqwest::Client::new();
    let qa = std::fs::read_to_string(common::fixtures().join("qa.jsonl")).unwrap();
    let (status, jsonl) = post(&client, server.url("/eval"), qa.clone()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(jsonl["per_record"].as_array().unwrap().len(), 59);

    let records: Vec<Value> = qa.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let (status, array) = post(&client, server.url("/eval"), Value::Array(records).to_string()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(jsonl, array);
    server.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn index_swap_is_visible_to_later_requests() {
    let dir = tempfile::tempdir().unwrap();
    let server = start(dir.path()).await;
    let client = reqwest::Client::new();
    let docs = load_corpus(&common::fixtures().join("corpus")).unwrap().documents;
    let kansas: Vec<_> = docs.into_iter().filter(|d| d.jurisdiction.name() == "Kansas").collect();
    let chunks = statrag_core::corpus::chunk_documents(&kansas, &Default::default());
    let smaller = VectorIndex::build(&chunks, server.state.pipeline().embedder.as_ref()).unwrap();
    server.state.replace_index(smaller);
    let (_, health) = get(&client, server.url("/health")).await;
    assert_eq!(health["partitions"], 1);
    assert_eq!(health["chunks"], chunks.len());
    server.stop().await;
}
