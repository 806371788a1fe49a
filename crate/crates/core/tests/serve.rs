use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use tower::ServiceExt;

use mmbee::graph::{build_a2a, build_u2a, SwingConfig};
use mmbee::graphcl::{pretrain, GraphClConfig};
use mmbee::ingest::{generate_synthetic, SyntheticDataset, SyntheticSpec};
use mmbee::metapath::ExpansionConfig;
use mmbee::model::{Checkpoint, GtrConfig, GtrParams};
use mmbee::runtime::{router, ErrorBody, ExpansionStore, ScoreResponse, ScoringState};

fn setup() -> (SyntheticDataset, Arc<ScoringState>) {
    let data = generate_synthetic(&SyntheticSpec {
        num_users: 40,
        num_authors: 6,
        d_m: 4,
        frames: 2,
        impressions_per_user: 3,
        ..Default::default()
    })
    .unwrap();
    let g1 = build_u2a(&data.donations, &data.features).unwrap();
    let g2 = build_a2a(&g1, &SwingConfig::default()).unwrap();
    let theta = pretrain(&g1, &g2, &GraphClConfig { d: 4, epochs: 1, ..Default::default() }).unwrap().table;
    let store = ExpansionStore::precompute(&g1, &g2, &theta, &ExpansionConfig::default()).unwrap();
    let cfg = GtrConfig {
        d: 4,
        d_m: 4,
        hidden: 4,
        ..Default::default()
    };
    let params: GtrParams<f32> = GtrParams::init(cfg, &data.impressions[..60], &theta, &g1).unwrap();
    let mut bytes = Vec::new();
    params.write_checkpoint(&mut bytes, Some(store.build_id())).unwrap();
    let ckpt = Checkpoint::read(&mut bytes.as_slice()).unwrap();
    let state = Arc::new(ScoringState::new(&store, ckpt, data.features.clone()).unwrap());
    (data, state)
}

async fn call(state: &Arc<ScoringState>, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

fn score(body: String) -> Request<Body> {
    Request::post("/score").header("content-type", "application/json").body(Body::from(body)).unwrap()
}

#[tokio::test]
async fn healthz_is_ok() {
    let (_, state) = setup();
    let (status, body) = call(&state, Request::get("/healthz").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(serde_json::from_slice::<serde_json::Value>(&body).unwrap(), serde_json::json!({"status": "ok"}));
}

#[tokio::test]
async fn score_reports_probability_and_cold_flags() {
    let (data, state) = setup();
    let s = &data.impressions[0];
    let (status, body) = call(
        &state,
        score(format!(r#"{{"user_id":"{}","author_id":"{}","segment_id":"{}"}}"#, s.user_id, s.author_id, s.segment_id)),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let r: ScoreResponse = serde_json::from_slice(&body).unwrap();
    assert!(r.gtr > 0.0 && r.gtr < 1.0);
    assert!(!r.cold_user && !r.cold_author);
    assert_eq!(r.store_hits.len(), 5);
    assert!(r.store_hits.values().all(|&h| h));

    let (status, body) =
        call(&state, score(format!(r#"{{"user_id":"ghost","author_id":"ghost","segment_id":"{}"}}"#, s.segment_id))).await;
    assert_eq!(status, StatusCode::OK);
    let r: ScoreResponse = serde_json::from_slice(&body).unwrap();
    assert!(r.cold_user && r.cold_author);
    assert!(r.store_hits.values().all(|&h| !h));
}

#[tokio::test]
async fn unknown_segment_is_404_and_bad_json_is_rejected() {
    let (_, state) = setup();
    let (status, body) = call(&state, score(r#"{"user_id":"u","author_id":"a","segment_id":"nope"}"#.into())).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let err: ErrorBody = serde_json::from_slice(&body).unwrap();
    assert_eq!(err.kind, "unknown_segment");

    let (status, _) = call(&state, score(r#"{"user_id":"u"}"#.into())).await;
    assert!(status.is_client_error());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_requests_share_state() {
    let (data, state) = setup();
    let mut handles = Vec::new();
    for s in data.impressions.iter().take(40).cloned() {
        let state = state.clone();
        handles.push(tokio::spawn(async move {
            let body = format!(r#"{{"user_id":"{}","author_id":"{}","segment_id":"{}"}}"#, s.user_id, s.author_id, s.segment_id);
            let (status, bytes) = call(&state, score(body)).await;
            assert_eq!(status, StatusCode::OK);
            serde_json::from_slice::<ScoreResponse>(&bytes).unwrap().gtr
        }));
    }
    for (h, s) in handles.into_iter().zip(&data.impressions) {
        let served = h.await.unwrap();
        let direct = state
            .score(&mmbee::runtime::ScoreRequest {
                user_id: s.user_id.clone(),
                author_id: s.author_id.clone(),
                segment_id: s.segment_id.clone(),
            })
            .unwrap()
            .gtr;
        assert_eq!(served.to_bits(), direct.to_bits());
    }
}
