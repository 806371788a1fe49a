//! Generates a planted-community dataset and writes the three input files
//! the pipeline consumes.
//!
//! cargo run --example synthetic_data [out_dir]

use std::collections::BTreeMap;

use mmbee::ingest::{generate_synthetic, parse_donations, parse_impressions, SyntheticSpec};

fn main() -> mmbee::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "synthetic_out".into());
    let spec = SyntheticSpec {
        num_users: 300,
        num_authors: 24,
        num_communities: 3,
        d_m: 16,
        ..Default::default()
    };
    let data = generate_synthetic(&spec)?;
    data.write_to_dir(&out)?;

    let donations = parse_donations(format!("{out}/donations.tsv"))?;
    let impressions = parse_impressions(format!("{out}/impressions.tsv"))?;
    let positives = impressions.iter().filter(|s| s.label == 1).count();
    println!("wrote {out}/donations.tsv, impressions.tsv, features.mmbf");
    println!("{} donations, {} impressions, gift rate {:.3}", donations.len(), impressions.len(), positives as f64 / impressions.len() as f64);

    let mut per_community: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for s in &impressions {
        let same = data.user_community[&s.user_id] == data.author_community[&s.author_id];
        let e = per_community.entry(usize::from(same)).or_default();
        e.0 += 1;
        e.1 += usize::from(s.label);
    }
    for (same, (n, pos)) in per_community {
        let kind = if same == 1 { "preferred community" } else { "other communities" };
        println!("  {kind:20} {n:5} impressions, gift rate {:.3}", pos as f64 / n as f64);
    }
    Ok(())
}
