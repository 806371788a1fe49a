//! Builds the donation graph and the Swing author graph, then lists the
//! nearest authors of one author.
//!
//! cargo run --example swing_graph

use mmbee::graph::{build_a2a, build_u2a, swing_similarity, SwingConfig};
use mmbee::ingest::{generate_synthetic, DonationEvent, FeatureTable, SyntheticSpec};

fn ev(u: &str, a: &str) -> DonationEvent {
    DonationEvent {
        user_id: u.into(),
        author_id: a.into(),
        amount: 1.0,
        timestamp: 0,
    }
}

fn main() -> mmbee::Result<()> {
    // Three users who all donated to a1 and a2; u3 also donated to a3.
    let log = [
        ev("u1", "a1"),
        ev("u1", "a2"),
        ev("u2", "a1"),
        ev("u2", "a2"),
        ev("u3", "a1"),
        ev("u3", "a2"),
        ev("u3", "a3"),
    ];
    let g = build_u2a(&log, &FeatureTable::new())?;
    let cfg = SwingConfig::default();
    println!("hand example: s(a1, a2) = {:.4}", swing_similarity(&g, "a1", "a2", &cfg)?);
    println!("hand example: s(a1, a3) = {:.4}", swing_similarity(&g, "a1", "a3", &cfg)?);

    let data = generate_synthetic(&SyntheticSpec { d_m: 8, ..Default::default() })?;
    let g1 = build_u2a(&data.donations, &data.features)?;
    let g2 = build_a2a(&g1, &SwingConfig { top_k: 5, ..cfg })?;
    println!("\nU2A: {} users, {} authors, {} edges", g1.num_users(), g1.num_authors(), g1.num_edges());
    println!("A2A: {} edges (top 5 per author)", g2.num_edges());

    let a = 0;
    let name = &g1.authors()[a];
    println!("\nnearest authors of {name} (community {}):", data.author_community[name]);
    let (nbrs, scores) = g2.neighbors(a as u32);
    for (&b, s) in nbrs.iter().zip(scores) {
        let id = &g1.authors()[b as usize];
        println!("  {id}  swing {s:8.3}  community {}", data.author_community[id]);
    }
    Ok(())
}
