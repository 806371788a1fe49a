//! Trains the four ablation arms on planted synthetic data and compares
//! held-out AUC overall and on users never seen in training.
//!
//! cargo run --release --example ablation [seed]

use std::time::Instant;

use mmbee::graph::{build_a2a, build_u2a, SwingConfig};
use mmbee::graphcl::{pretrain, GraphClConfig};
use mmbee::ingest::{generate_synthetic, split_impressions, SyntheticSpec};
use mmbee::metapath::ExpansionConfig;
use mmbee::model::{evaluate, resolve_all, train, Arm, GtrConfig, GtrParams, Neighborhoods, TrainConfig};

fn main() -> mmbee::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(11);
    let spec = SyntheticSpec {
        num_users: 600,
        affinity_noise: 0.5,
        impressions_per_user: 20,
        d_m: 16,
        seed,
        ..Default::default()
    };
    let data = generate_synthetic(&spec)?;
    let split = split_impressions(&data.impressions, 0.35, 0.2, 1);
    let g1 = build_u2a(&data.donations, &data.features)?;
    let g2 = build_a2a(&g1, &SwingConfig::default())?;
    let cl = GraphClConfig {
        d: 16,
        epochs: 10,
        init_scale: 1.0,
        learning_rate: 0.2,
        ..Default::default()
    };
    let theta = pretrain(&g1, &g2, &cl)?.table;
    let nb = Neighborhoods::expand(&g1, &g2, &ExpansionConfig::default())?;
    let train_ex = resolve_all(&split.train, &data.features, &nb)?;
    let test_ex = resolve_all(&split.test, &data.features, &nb)?;
    let cold: Vec<_> = test_ex.iter().copied().filter(|e| split.cold_users.contains(e.user_id)).collect();
    println!("train {} test {} cold-user test {}", train_ex.len(), test_ex.len(), cold.len());

    let tc = TrainConfig {
        epochs: 20,
        batch_size: 32,
        learning_rate: 0.05,
        ..Default::default()
    };
    println!("{:8} {:>8} {:>8} {:>8}", "arm", "auc", "cold", "secs");
    for arm in Arm::ALL {
        let t = Instant::now();
        let cfg = GtrConfig {
            d: 16,
            d_m: 16,
            arm,
            ..Default::default()
        };
        let mut params: GtrParams<f32> = GtrParams::init(cfg, &split.train, &theta, &g1)?;
        train(&mut params, &train_ex, &[], &tc)?;
        let (all, _) = evaluate(&params, &test_ex)?;
        let (cold_m, _) = evaluate(&params, &cold)?;
        println!("{:8} {:8.4} {:8.4} {:8.1}", arm.name(), all.auc, cold_m.auc, t.elapsed().as_secs_f64());
    }
    Ok(())
}
