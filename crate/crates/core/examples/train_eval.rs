//! End-to-end: graphs, pretrained Θ, expanded neighborhoods, predictor
//! training with a per-epoch metrics trace, and a saved checkpoint.
//!
//! cargo run --release --example train_eval

use mmbee::graph::{build_a2a, build_u2a, SwingConfig};
use mmbee::graphcl::{pretrain, GraphClConfig};
use mmbee::ingest::{generate_synthetic, split_impressions, SyntheticSpec};
use mmbee::metapath::ExpansionConfig;
use mmbee::model::{evaluate, resolve_all, train, write_trace_csv, Checkpoint, GtrConfig, GtrParams, Neighborhoods, TrainConfig};

fn main() -> mmbee::Result<()> {
    let data = generate_synthetic(&SyntheticSpec {
        num_users: 400,
        impressions_per_user: 20,
        affinity_noise: 0.5,
        d_m: 16,
        ..Default::default()
    })?;
    let split = split_impressions(&data.impressions, 0.2, 0.2, 0);
    let g1 = build_u2a(&data.donations, &data.features)?;
    let g2 = build_a2a(&g1, &SwingConfig::default())?;
    let cl = GraphClConfig {
        d: 16,
        epochs: 10,
        learning_rate: 0.2,
        init_scale: 1.0,
        ..Default::default()
    };
    let theta = pretrain(&g1, &g2, &cl)?.table;
    let nb = Neighborhoods::expand(&g1, &g2, &ExpansionConfig::default())?;
    let train_ex = resolve_all(&split.train, &data.features, &nb)?;
    let test_ex = resolve_all(&split.test, &data.features, &nb)?;

    let cfg = GtrConfig {
        d: 16,
        d_m: 16,
        ..Default::default()
    };
    let mut params: GtrParams<f32> = GtrParams::init(cfg, &split.train, &theta, &g1)?;
    let tc = TrainConfig {
        epochs: 10,
        batch_size: 32,
        learning_rate: 0.05,
        ..Default::default()
    };
    let trace = train(&mut params, &train_ex, &test_ex, &tc)?;
    write_trace_csv(&mut std::io::stdout(), &trace)?;

    let (report, loss) = evaluate(&params, &test_ex)?;
    println!(
        "held-out: loss {loss:.4} auc {:.4} uauc {:.4} gauc {:.4} ({} eligible users, {} excluded)",
        report.auc, report.uauc, report.gauc, report.eligible_users, report.excluded_users
    );

    params.save_checkpoint("model.mmbc", None)?;
    let back = Checkpoint::load("model.mmbc")?;
    println!("checkpoint reloads identically: {}", back.params == params);
    Ok(())
}
