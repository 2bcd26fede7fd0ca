mod common;

use std::collections::BTreeMap;

use common::TestServer;
use hybrec::embed::{Embedder, EmbedError, RemoteEmbedder, RemoteEmbedderConfig, EMBED_DIM};
use hybrec::ingest::{load_item_metadata, LiveSource, MetadataSource};
use hybrec::llm::{ChatRequest, Expected, Gateway, LlmError, ProviderConfig, ProviderKind, Structured, WireFormat};
use serde_json::{json, Value};

fn chat_reply(text: &str) -> String {
    json!({ "choices": [{ "message": { "content": text } }] }).to_string()
}

fn remote(url: &str, key_env: &str) -> ProviderConfig {
    ProviderConfig {
        kind: ProviderKind::Remote,
        endpoint: Some(url.to_string()),
        model_name: "test-model".into(),
        api_key_env: key_env.into(),
        max_retries: 3,
        backoff_ms: 1,
        ..ProviderConfig::default()
    }
}

#[test]
fn transient_failures_are_retried() {
    let server = TestServer::start(|n, _, _| if n < 2 { (503, "{}".into()) } else { (200, chat_reply("hello")) });
    std::env::set_var("HYBREC_TEST_KEY_A", "sk-secret-a");
    let gw = Gateway::from_config(remote(&server.url, "HYBREC_TEST_KEY_A")).unwrap();
    let resp = gw.complete(&ChatRequest::single("profile_item", "sys", "hi".into())).unwrap();
    assert_eq!(resp.text, "hello");
    assert_eq!(resp.provider_id, "remote:test-model");
    assert_eq!(server.hits(), 3);
    let reqs = server.requests.lock().unwrap();
    assert_eq!(reqs[0].1, "Bearer sk-secret-a");
    let body: Value = serde_json::from_str(&reqs[2].2).unwrap();
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["messages"][0]["role"], "system");
    assert_eq!(body["messages"][1]["content"], "hi");
}

#[test]
fn exhausted_retries_never_leak_the_key() {
    let server = TestServer::start(|_, _, _| (500, "sk-secret-b".into()));
    std::env::set_var("HYBREC_TEST_KEY_B", "sk-secret-b");
    let gw = Gateway::from_config(remote(&server.url, "HYBREC_TEST_KEY_B")).unwrap();
    let err = gw.complete(&ChatRequest::single("profile_item", "sys", "hi".into())).unwrap_err();
    assert!(matches!(err, LlmError::ProviderUnavailable { attempts: 4, .. }), "{err:?}");
    assert!(!format!("{err} {err:?}").contains("sk-secret-b"));
    assert_eq!(server.hits(), 4);
}

#[test]
fn client_errors_are_not_retried() {
    let server = TestServer::start(|_, _, _| (400, "{}".into()));
    let gw = Gateway::from_config(remote(&server.url, "HYBREC_TEST_UNSET")).unwrap();
    let err = gw.complete(&ChatRequest::single("profile_item", "sys", "hi".into())).unwrap_err();
    assert!(matches!(err, LlmError::ProviderRejected(_)));
    assert_eq!(server.hits(), 1);
    assert_eq!(server.requests.lock().unwrap()[0].1, "");
}

#[test]
fn wire_format_is_configurable() {
    let server = TestServer::start(|_, _, _| (200, json!({ "output": { "text": "ok" } }).to_string()));
    let mut cfg = remote(&server.url, "HYBREC_TEST_UNSET");
    cfg.wire = WireFormat {
        messages_field: "input".into(),
        max_tokens_field: "max_completion_tokens".into(),
        response_pointer: "/output/text".into(),
    };
    let gw = Gateway::from_config(cfg).unwrap();
    assert_eq!(gw.complete(&ChatRequest::single("profile_item", "sys", "hi".into())).unwrap().text, "ok");
    let body: Value = serde_json::from_str(&server.requests.lock().unwrap()[0].2).unwrap();
    assert!(body.get("input").is_some() && body.get("max_completion_tokens").is_some());
}

#[test]
fn structured_calls_repair_bad_answers() {
    let good = "```json\n[2, 1]\n```";
    let server = TestServer::start(move |n, _, _| (200, chat_reply(if n == 0 { "no idea" } else { good })));
    let gw = Gateway::from_config(remote(&server.url, "HYBREC_TEST_UNSET")).unwrap();
    let req = ChatRequest::single("rerank_prompt", "sys", "rank".into());
    let out = gw.complete_structured(&req, &Expected::RankedIdList { candidates: vec![1, 2] }).unwrap();
    assert_eq!(out, Structured::RankedIds(vec![2, 1]));
    let body: Value = serde_json::from_str(&server.requests.lock().unwrap()[1].2).unwrap();
    let messages = body["messages"].as_array().unwrap();
    assert_eq!(messages.len(), 4, "system, prompt, bad answer, repair");
    assert_eq!(messages[2]["content"], "no idea");
}

#[test]
fn remote_embedder_normalizes_and_retries() {
    let server = TestServer::start(|n, _, _| {
        if n == 0 {
            (429, "{}".into())
        } else {
            let v: Vec<f64> = (0..EMBED_DIM).map(|i| if i < 4 { 2.0 } else { 0.0 }).collect();
            (200, json!({ "data": [{ "embedding": v }] }).to_string())
        }
    });
    let e = RemoteEmbedder::new(RemoteEmbedderConfig {
        endpoint: server.url.clone(),
        backoff_ms: 1,
        ..RemoteEmbedderConfig::default()
    })
    .unwrap();
    let v = e.embed("text").unwrap();
    assert!((v.norm() - 1.0).abs() < 1e-6);
    assert_eq!(v.values()[0], 0.5);
    assert_eq!(server.hits(), 2);
    let body: Value = serde_json::from_str(&server.requests.lock().unwrap()[1].2).unwrap();
    assert_eq!(body["input"], "text");
}

#[test]
fn remote_embedder_rejects_wrong_dimension() {
    let server = TestServer::start(|_, _, _| (200, json!({ "data": [{ "embedding": [1.0, 2.0] }] }).to_string()));
    let e = RemoteEmbedder::new(RemoteEmbedderConfig { endpoint: server.url.clone(), ..RemoteEmbedderConfig::default() })
        .unwrap();
    assert!(matches!(e.embed("x"), Err(EmbedError::DimMismatch { got: 2, .. })));
}

#[test]
fn live_metadata_is_fetched_once_and_cached() {
    let server = TestServer::start(|_, path, _| match path {
        "/movie/1" => (200, json!({ "title": "Toy Story", "genres": [{ "name": "Animation" }], "overview": "Toys." }).to_string()),
        _ => (404, "{}".into()),
    });
    let cache = tempfile::tempdir().unwrap();
    let source = MetadataSource::LiveApi {
        live: LiveSource {
            endpoint_template: format!("{}/movie/{{id}}", server.url),
            api_key_env: None,
            max_retries: 1,
            backoff_ms: 1,
            parallelism: 2,
        },
        cache_dir: cache.path().to_path_buf(),
    };
    let hints = BTreeMap::from([(2, "Hinted (1995)".to_string())]);
    let metas = load_item_metadata(&[1, 2], &source, &hints).unwrap();
    assert_eq!(metas[&1].title, "Toy Story");
    assert_eq!(metas[&1].genres, vec!["Animation"]);
    assert!(!metas[&1].missing);
    assert!(metas[&2].missing);
    assert_eq!(metas[&2].title, "Hinted (1995)");
    assert!(cache.path().join("1.json").exists());
    assert_eq!(server.hits(), 2);

    let again = load_item_metadata(&[1, 2], &source, &hints).unwrap();
    assert_eq!(again, metas);
    assert_eq!(server.hits(), 3, "only the missing item is requested again");
}
