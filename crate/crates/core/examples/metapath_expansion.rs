//! Expands one user and one author along all five metapaths, uncapped and
//! with a small sampling cap.
//!
//! cargo run --example metapath_expansion

use mmbee::graph::{build_a2a, build_u2a, NodeRef, SwingConfig};
use mmbee::ingest::{generate_synthetic, SyntheticSpec};
use mmbee::metapath::{expand, ExpansionConfig, Metapath};

fn main() -> mmbee::Result<()> {
    let data = generate_synthetic(&SyntheticSpec { d_m: 8, ..Default::default() })?;
    let g1 = build_u2a(&data.donations, &data.features)?;
    let g2 = build_a2a(&g1, &SwingConfig::default())?;

    let capped = ExpansionConfig {
        cap: Some(5),
        ..Default::default()
    };
    for origin in [NodeRef::User(0), NodeRef::Author(0)] {
        println!("origin {}", g1.node_id(origin));
        for mp in Metapath::ALL.into_iter().filter(|m| m.starts_at_user() == origin.is_user()) {
            let full = expand(&g1, &g2, origin, mp, &ExpansionConfig::uncapped())?;
            let small = expand(&g1, &g2, origin, mp, &capped)?;
            let sizes: Vec<usize> = full.steps.iter().map(Vec::len).collect();
            let sample: Vec<&str> = small.terminal().iter().map(|&n| g1.node_id(n)).collect();
            println!("  {mp:8} step sizes {sizes:?}, capped terminal {sample:?}");
        }
    }
    Ok(())
}
