mod common;

use std::time::Duration;

use common::world;
use deliberant::backends::*;
use deliberant::benchmark::{question_text, SyntheticGraph};
use deliberant::config::{BackendKind, Config, Runtime};
use deliberant::math::cosine;
use deliberant::orchestrator::exact_match;

fn prompt(source: &str, relations: &[String]) -> String {
    format!("Question: {}", question_text(source, relations))
}

fn isotropic(temperature: f64) -> SyntheticBackendConfig {
    SyntheticBackendConfig {
        temperature,
        anisotropy: 0.0,
        ..SyntheticBackendConfig::default()
    }
}

/// Two hops, each with one correct edge and three decoys that dead-end.
fn forked_graph() -> SyntheticGraph {
    let triples = [
        "a r1 b", "a d1 x1", "a d2 x2", "a d3 x3", "x1 d4 y1", "x2 d5 y2", "x3 d6 y3", "b r2 c", "b d4 z1",
        "b d5 z2", "b d6 z3",
    ];
    SyntheticGraph::from_triples(triples).unwrap()
}

fn relations() -> Vec<String> {
    vec!["r1".into(), "r2".into()]
}

#[test]
fn zero_modulation_picks_uniformly() {
    let b = SyntheticBackend::new(forked_graph(), SyntheticBackendConfig::default()).unwrap();
    let zero = vec![0.0; 64];
    let n = 10_000;
    let hits = (0..n)
        .filter(|&s| {
            let req = BackendRequest::viewpoint(prompt("a", &relations()), zero.clone(), s, 256);
            let text = b.complete(&req).unwrap().text;
            text.ends_with("Answer: c")
        })
        .count();
    let f = hits as f64 / n as f64;
    assert!((f - 0.25 * 0.25).abs() < 0.01, "correct frequency {f}");
}

#[test]
fn aligned_modulation_concentrates_on_the_chain() {
    let b = SyntheticBackend::new(forked_graph(), isotropic(200.0)).unwrap();
    let e = |t: &str| b.embed(t).unwrap().values().to_vec();
    // r1 + r2 with every decoy relation projected out
    let mut m: Vec<f64> = e("r1").iter().zip(e("r2")).map(|(x, y)| x + y).collect();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for d in ["d1", "d2", "d3", "d4", "d5", "d6"] {
        let mut v = e(d);
        for u in &basis {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        basis.push(v);
    }
    for u in &basis {
        let p: f64 = m.iter().zip(u).map(|(a, b)| a * b).sum();
        m.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
    }
    for d in ["d1", "d4", "d6"] {
        assert!(cosine(&m, &e(d)).abs() < 1e-12);
    }
    let hits = (0..1000u64)
        .filter(|&s| b.generate_viewpoint("a", &relations(), &m, s).unwrap().1 == "c")
        .count();
    assert!(hits >= 995, "{hits} of 1000");
}

#[test]
fn embeddings_separate_unrelated_texts() {
    let e = SyntheticEmbedder::new(64, 7, 0.0);
    let a = e.embed("alpha beta").unwrap();
    let same = e.embed("Beta, alpha!").unwrap();
    let other = e.embed("gamma delta").unwrap();
    assert!((cosine(a.values(), same.values()) - 1.0).abs() < 1e-12);
    assert!(cosine(a.values(), other.values()).abs() < 0.5);
    assert_eq!(e.embed("  ...  "), Err(BackendError::EmptyText));
}

fn endpoint(url: String) -> EndpointConfig {
    EndpointConfig {
        base_url: url,
        backoff_base: 0.05,
        max_retries: 3,
        timeout: 5.0,
        ..EndpointConfig::default()
    }
}

fn embedder() -> SyntheticEmbedder {
    let c = SyntheticBackendConfig::default();
    SyntheticEmbedder::new(c.dim, c.embed_seed, c.anisotropy)
}

#[test]
fn http_backend_retries_with_backoff() {
    let stub = StubServer::start(
        StubBehavior {
            fail_first: 2,
            graph: Some(forked_graph()),
            ..StubBehavior::default()
        },
        embedder(),
    )
    .unwrap();
    let http = HttpBackend::with_api_key(endpoint(stub.base_url()), Vec::new(), Some("k".into())).unwrap();
    let v = http.embed("a r1 b").unwrap();
    assert!((cosine(v.values(), embedder().embed("a r1 b").unwrap().values()) - 1.0).abs() < 1e-12);

    let log = stub.log();
    let status: Vec<u16> = log.iter().map(|l| l.status).collect();
    assert_eq!(status, vec![503, 503, 200]);
    let gaps: Vec<f64> = log.windows(2).map(|w| w[1].at - w[0].at).collect();
    assert!(gaps[0] >= 0.05 && gaps[1] >= 0.1, "{gaps:?}");
    assert!(gaps[1] > gaps[0]);
}

#[test]
fn http_backend_gives_up_after_max_retries() {
    let stub = StubServer::start(
        StubBehavior {
            fail_first: 10,
            ..StubBehavior::default()
        },
        embedder(),
    )
    .unwrap();
    let mut cfg = endpoint(stub.base_url());
    cfg.max_retries = 2;
    cfg.backoff_base = 0.01;
    let http = HttpBackend::with_api_key(cfg, Vec::new(), None).unwrap();
    assert!(matches!(http.embed("x"), Err(BackendError::EndpointUnavailable(_))));
    assert_eq!(stub.log().len(), 3);
}

#[test]
fn http_backend_rejects_malformed_chat() {
    let stub = StubServer::start(
        StubBehavior {
            malformed_chat: true,
            ..StubBehavior::default()
        },
        embedder(),
    )
    .unwrap();
    let http = HttpBackend::with_api_key(endpoint(stub.base_url()), Vec::new(), None).unwrap();
    let req = BackendRequest::arbitration("Question: a r1".into(), 0, 64);
    assert!(matches!(http.complete(&req), Err(BackendError::MalformedResponse(_))));
}

#[test]
fn http_backend_slow_reply_times_out() {
    let stub = StubServer::start(
        StubBehavior {
            delay: Duration::from_millis(400),
            ..StubBehavior::default()
        },
        embedder(),
    )
    .unwrap();
    let mut cfg = endpoint(stub.base_url());
    cfg.timeout = 0.1;
    cfg.max_retries = 0;
    let http = HttpBackend::with_api_key(cfg, Vec::new(), None).unwrap();
    assert!(matches!(http.embed("x"), Err(BackendError::Timeout(_))));
}

#[test]
fn deliberation_over_http_matches_the_graph() {
    let bench = world(3, 2, 2, 0, 4);
    let stub = StubServer::start(
        StubBehavior {
            graph: Some(bench.graph.clone()),
            ..StubBehavior::default()
        },
        embedder(),
    )
    .unwrap();
    let mut config = Config::default();
    config.backend.kind = BackendKind::Http;
    config.backend.endpoint = endpoint(stub.base_url());
    config.selfgame.rounds = 1;
    let rt = Runtime::from_knowledge(config, bench.kb.clone()).unwrap();
    let tasks = rt.tasks(&bench.tasks).unwrap();
    let p = rt.initial_policy().unwrap();
    let d = rt.pipeline().deliberate(&tasks[0], &p, &p, 3).unwrap();
    assert!(exact_match(&d.conclusion.answer, &bench.graph.chains[0].answer));
    assert!(stub.log().iter().all(|l| l.status == 200));
}
