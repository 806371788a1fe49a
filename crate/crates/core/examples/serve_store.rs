//! Precomputes the expansion store, builds the scoring service from the
//! store and a checkpoint, and answers requests in process.
//!
//! cargo run --release --example serve_store

use std::sync::Arc;

use axum::body::Body;
use axum::http::Request;
use http_body_util::BodyExt;
use tower::ServiceExt;

use mmbee::graph::{build_a2a, build_u2a, SwingConfig};
use mmbee::graphcl::{pretrain, GraphClConfig};
use mmbee::ingest::{generate_synthetic, SyntheticSpec};
use mmbee::metapath::ExpansionConfig;
use mmbee::model::{resolve_all, train, Checkpoint, GtrConfig, GtrParams, TrainConfig};
use mmbee::runtime::{router, ExpansionStore, ScoringState};

#[tokio::main(flavor = "current_thread")]
async fn main() -> mmbee::Result<()> {
    let data = generate_synthetic(&SyntheticSpec { d_m: 8, ..Default::default() })?;
    let g1 = build_u2a(&data.donations, &data.features)?;
    let g2 = build_a2a(&g1, &SwingConfig::default())?;
    let theta = pretrain(&g1, &g2, &GraphClConfig { d: 8, epochs: 2, ..Default::default() })?.table;

    let store = ExpansionStore::precompute(&g1, &g2, &theta, &ExpansionConfig::default())?;
    println!("store {} covers {} users and {} authors", store.build_id(), store.users().len(), store.authors().len());

    // The model trains on the store's neighborhoods, exactly what serving sees.
    let nb = store.neighborhoods();
    let examples = resolve_all(&data.impressions, &data.features, &nb)?;
    let cfg = GtrConfig { d: 8, d_m: 8, ..Default::default() };
    let mut params: GtrParams<f32> = GtrParams::init(cfg, &data.impressions, &theta, &g1)?;
    train(&mut params, &examples, &[], &TrainConfig { epochs: 2, batch_size: 32, ..Default::default() })?;
    let mut bytes = Vec::new();
    params.write_checkpoint(&mut bytes, Some(store.build_id()))?;

    let state = Arc::new(ScoringState::new(&store, Checkpoint::read(&mut bytes.as_slice())?, data.features.clone())?);
    let app = router(state);
    let sample = &data.impressions[0];
    let bodies = [
        format!(r#"{{"user_id":"{}","author_id":"{}","segment_id":"{}"}}"#, sample.user_id, sample.author_id, sample.segment_id),
        format!(r#"{{"user_id":"newcomer","author_id":"{}","segment_id":"{}"}}"#, sample.author_id, sample.segment_id),
        r#"{"user_id":"u1","author_id":"a1","segment_id":"missing"}"#.to_string(),
    ];
    for body in bodies {
        let req = Request::post("/score").header("content-type", "application/json").body(Body::from(body.clone())).unwrap();
        let resp = app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        println!("{body}\n  -> {status} {}", String::from_utf8_lossy(&bytes));
    }
    Ok(())
}
