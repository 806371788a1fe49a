//! Builds a donation graph with over 100k edges, precomputes the expansion
//! store and compares store lookups against on-the-fly metapath walks.
//!
//! cargo run --release --example latency_bench [requests]

use std::time::Instant;

use mmbee::graph::{build_a2a, build_u2a, SwingConfig};
use mmbee::graphcl::{pretrain, GraphClConfig};
use mmbee::ingest::{generate_synthetic, SyntheticSpec};
use mmbee::metapath::{ExpansionConfig, Metapath};
use mmbee::runtime::{bench, BenchConfig, ExpansionStore};

fn main() -> mmbee::Result<()> {
    let requests = std::env::args().nth(1).map_or(10_000, |a| a.parse().expect("request count"));
    let spec = SyntheticSpec {
        num_users: 20_000,
        num_authors: 500,
        num_communities: 10,
        donation_rate: 0.1,
        impressions_per_user: 1,
        d_m: 4,
        frames: 1,
        ..Default::default()
    };
    let t = Instant::now();
    let data = generate_synthetic(&spec)?;
    let g1 = build_u2a(&data.donations, &data.features)?;
    let g2 = build_a2a(&g1, &SwingConfig::default())?;
    println!("graph: {} users, {} authors, {} edges ({:?})", g1.num_users(), g1.num_authors(), g1.num_edges(), t.elapsed());

    // untrained Θ is enough to time lookups
    let theta = pretrain(&g1, &g2, &GraphClConfig { d: 16, epochs: 0, ..Default::default() })?.table;
    let expansion = ExpansionConfig::default();
    let t = Instant::now();
    let store = ExpansionStore::precompute(&g1, &g2, &theta, &expansion)?;
    println!("store precomputed in {:?}", t.elapsed());

    let report = bench(&store, &g1, &g2, &theta, &expansion, &BenchConfig { requests, ..Default::default() })?;
    report.write_csv(&mut std::io::stdout())?;
    let fly = report.get("on_the_fly", Metapath::U2A2U2A).unwrap().p99_us;
    let hit = report.get("store_lookup", Metapath::U2A2U2A).unwrap().p99_us;
    println!("u2a2u2a p99: on the fly {fly:.1} us, store {hit:.1} us");
    Ok(())
}
