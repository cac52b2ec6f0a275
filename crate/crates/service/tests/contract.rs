//! Golden-file contract of every endpoint over the deterministic fixture.
//!
//! Set `UPDATE_GOLDEN=1` to rewrite the files under `tests/golden/`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use protosim_client::Client;
use protosim_service::fixture::{
    build_fixture, golden_dir, golden_text, Fixture, TestServer, GOLDEN_REQUESTS,
};
use protosim_service::{AppState, ServiceError};
use sha2::{Digest, Sha256};

async fn capture(fixture: &Fixture, cache: &Path) -> BTreeMap<&'static str, String> {
    let state = Arc::new(AppState::load(&fixture.serve_config(cache)).expect("fixture loads"));
    let server = TestServer::start(state).await.unwrap();
    let client = Client::new(&server.url());
    let mut out = BTreeMap::new();
    for (name, path) in GOLDEN_REQUESTS {
        let r = client.get_raw(path).await.unwrap();
        out.insert(
            *name,
            golden_text(r.status.as_u16(), r.content_type.as_deref().unwrap_or(""), &r.body),
        );
    }
    server.stop().await.unwrap();
    out
}

fn tree_digest(root: &Path) -> BTreeMap<PathBuf, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let bytes = std::fs::read(&p).unwrap();
                out.insert(p, hex::encode(Sha256::digest(&bytes)));
            }
        }
    }
    out
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn golden_responses_are_stable_across_restarts() {
    let dir = tempfile::tempdir().unwrap();
    let fixture = build_fixture(&dir.path().join("fx")).unwrap();
    let before = tree_digest(&fixture.root);

    let first = capture(&fixture, &dir.path().join("cache1")).await;
    // Second start reuses the warm overlay cache, third starts cold again.
    let second = capture(&fixture, &dir.path().join("cache1")).await;
    let third = capture(&fixture, &dir.path().join("cache2")).await;
    assert_eq!(first, second, "responses differ after a restart");
    assert_eq!(first, third, "responses differ with a cold overlay cache");
    assert_eq!(before, tree_digest(&fixture.root), "artifacts were modified");

    let golden = golden_dir();
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(&golden).unwrap();
        for (name, text) in &first {
            std::fs::write(golden.join(format!("{name}.txt")), text).unwrap();
        }
    }
    for (name, text) in &first {
        let path = golden.join(format!("{name}.txt"));
        let expected = std::fs::read_to_string(&path)
            .unwrap_or_else(|_| panic!("missing golden file {}", path.display()));
        assert_eq!(text, &expected, "golden mismatch for {name}");
    }
}

#[tokio::test]
async fn refuses_to_start_on_hash_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let fixture = build_fixture(&dir.path().join("fx")).unwrap();
    let mut ckpt = protosim_core::checkpoint::Checkpoint::load(&fixture.checkpoint).unwrap();
    ckpt.epoch += 1;
    ckpt.save(&fixture.checkpoint).unwrap();
    match AppState::load(&fixture.serve_config(&dir.path().join("cache"))) {
        Err(ServiceError::HashMismatch { artifact, .. }) => assert_eq!(artifact, "index manifest"),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("service started over a foreign checkpoint"),
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_overlay_requests_agree() {
    let dir = tempfile::tempdir().unwrap();
    let fixture = build_fixture(&dir.path().join("fx")).unwrap();
    let cache = dir.path().join("cache");
    let state = Arc::new(AppState::load(&fixture.serve_config(&cache)).unwrap());
    let server = TestServer::start(state).await.unwrap();
    let client = Client::new(&server.url());
    let mut tasks = Vec::new();
    for _ in 0..8 {
        let c = client.clone();
        tasks.push(tokio::spawn(async move {
            c.attention_png(1, Some("B"), "B_003").await.unwrap()
        }));
    }
    let mut bodies = Vec::new();
    for t in tasks {
        bodies.push(t.await.unwrap());
    }
    assert!(bodies.windows(2).all(|w| w[0] == w[1]));
    assert_eq!(&bodies[0][1..4], b"PNG");
    assert_eq!(std::fs::read_dir(&cache).unwrap().count(), 1);
    server.stop().await.unwrap();
}

#[tokio::test]
async fn cors_allows_any_origin_for_get() {
    let dir = tempfile::tempdir().unwrap();
    let fixture = build_fixture(&dir.path().join("fx")).unwrap();
    let state = Arc::new(AppState::load(&fixture.serve_config(&dir.path().join("c"))).unwrap());
    let server = TestServer::start(state).await.unwrap();
    let resp = reqwest::Client::new()
        .get(format!("{}/api/manifest", server.url()))
        .header("Origin", "http://localhost:5173")
        .send()
        .await
        .unwrap();
    assert_eq!(
        resp.headers()
            .get("access-control-allow-origin")
            .map(|v| v.to_str().unwrap()),
        Some("*")
    );
    server.stop().await.unwrap();
}
