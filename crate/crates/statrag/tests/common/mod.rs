#![allow(dead_code)]

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::Value;
use statrag::{AppState, Engine, ServiceConfig};
use tokio::sync::oneshot;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .canonicalize()
        .unwrap()
}

/// Copy of the fixture config with absolute paths, an index inside `dir`,
/// and `overrides` merged on top.
pub fn write_config(dir: &Path, overrides: Value) -> PathBuf {
    let fx = fixtures();
    let mut cfg: Value = serde_json::from_str(&std::fs::read_to_string(fx.join("statrag.json")).unwrap()).unwrap();
    let obj = cfg.as_object_mut().unwrap();
    for key in ["corpus_root", "aliases_path", "adjacency_path", "prompt_template_path"] {
        let rel = obj[key].as_str().unwrap().to_string();
        obj.insert(key.into(), Value::String(fx.join(rel).to_string_lossy().into()));
    }
    obj.insert(
        "index_path".into(),
        Value::String(dir.join("index.jsonl").to_string_lossy().into()),
    );
    if let Value::Object(extra) = overrides {
        obj.extend(extra);
    }
    let path = dir.join("statrag.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

pub fn engine(dir: &Path, overrides: Value) -> Engine {
    Engine::new(ServiceConfig::load(&write_config(dir, overrides)).unwrap()).unwrap()
}

pub fn state(engine: Engine) -> Arc<AppState> {
    let index = engine.open_index().unwrap();
    let fp = engine.fingerprint();
    Arc::new(AppState::new(engine.pipeline, index, fp))
}

pub struct Server {
    pub addr: SocketAddr,
    pub state: Arc<AppState>,
    stop: Option<oneshot::Sender<()>>,
    handle: Option<tokio::task::JoinHandle<std::io::Result<()>>>,
}

impl Server {
    pub async fn start(state: Arc<AppState>) -> Server {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        let (tx, rx) = oneshot::channel();
        let handle = tokio::spawn(statrag::serve(listener, state.clone(), async {
            let _ = rx.await;
        }));
        Server {
            addr,
            state,
            stop: Some(tx),
            handle: Some(handle),
        }
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{}", self.addr, path)
    }

    pub async fn stop(mut self) {
        let _ = self.stop.take().unwrap().send(());
        self.handle.take().unwrap().await.unwrap().unwrap();
    }
}

/// Serialized answer without its wall-clock timings.
pub fn strip_timings(mut v: Value) -> Value {
    if let Some(o) = v.as_object_mut() {
        o.remove("timings");
    }
    v
}
