//! Contrastive pretraining of the node embedding table on planted data,
//! reporting the loss curve and how well author communities separate.
//!
//! cargo run --release --example graphcl_pretrain

use mmbee::graph::{build_a2a, build_u2a, SwingConfig};
use mmbee::graphcl::{cosine, pretrain, GraphClConfig};
use mmbee::ingest::{generate_synthetic, SyntheticSpec};

fn main() -> mmbee::Result<()> {
    let data = generate_synthetic(&SyntheticSpec { d_m: 8, ..Default::default() })?;
    let g1 = build_u2a(&data.donations, &data.features)?;
    let g2 = build_a2a(&g1, &SwingConfig::default())?;
    let cfg = GraphClConfig {
        epochs: 10,
        learning_rate: 0.2,
        init_scale: 1.0,
        ..Default::default()
    };
    let pre = pretrain(&g1, &g2, &cfg)?;
    for (i, l) in pre.epoch_losses.iter().enumerate() {
        println!("epoch {:2}  loss {l:.4}", i + 1);
    }

    let authors = g1.authors();
    let (mut same, mut cross) = ((0.0, 0), (0.0, 0));
    for (i, a) in authors.iter().enumerate() {
        for b in &authors[i + 1..] {
            let c = cosine(
                pre.table.row(pre.table.author_node(a).unwrap()),
                pre.table.row(pre.table.author_node(b).unwrap()),
            );
            let slot = if data.author_community[a] == data.author_community[b] { &mut same } else { &mut cross };
            slot.0 += c;
            slot.1 += 1;
        }
    }
    println!(
        "mean author cosine: same community {:.3}, different {:.3}",
        same.0 / same.1 as f64,
        cross.0 / cross.1 as f64
    );
    pre.table.save("theta.mmbe")?;
    println!("saved theta.mmbe ({} rows x {})", pre.table.num_rows(), pre.table.dim());
    Ok(())
}
