//! Store lookup vs. on-the-fly expansion latency over one request stream.

use std::hint::black_box;
use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::store::{aggregate, ExpansionStore};
use crate::error::{Error, Result};
use crate::graph::{AuthorGraph, BipartiteGraph, NodeRef};
use crate::graphcl::EmbeddingTable;
use crate::metapath::{expand, ExpansionConfig, Metapath};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub requests: usize,
    pub seed: u64,
    /// Concurrent client threads sharing the stream.
    pub clients: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            requests: 10_000,
            seed: 0,
            clients: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathLatency {
    /// `on_the_fly` or `store_lookup`.
    pub path: String,
    pub metapath: String,
    pub p50_us: f64,
    pub p90_us: f64,
    pub p99_us: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub requests: usize,
    pub clients: usize,
    pub rows: Vec<PathLatency>,
}

impl LatencyReport {
    pub fn get(&self, path: &str, mp: Metapath) -> Option<&PathLatency> {
        self.rows.iter().find(|r| r.path == path && r.metapath == mp.name())
    }

    /// `path,metapath,p50_us,p90_us,p99_us`
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "path,metapath,p50_us,p90_us,p99_us")?;
        for r in &self.rows {
            writeln!(w, "{},{},{:.3},{:.3},{:.3}", r.path, r.metapath, r.p50_us, r.p90_us, r.p99_us)?;
        }
        Ok(())
    }
}

/// Nearest-rank percentile of sorted data, `q` in `(0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Uniformly sampled `(user, author)` pairs; a pure function of the seed.
pub fn request_stream(store: &ExpansionStore, n: usize, seed: u64) -> Result<Vec<(u32, u32)>> {
    if store.users().is_empty() || store.authors().is_empty() {
        return Err(Error::Degenerate("store has no users or no authors".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            (
                rng.random_range(0..store.users().len() as u32),
                rng.random_range(0..store.authors().len() as u32),
            )
        })
        .collect())
}

fn elapsed_us(start: Instant) -> f64 {
    start.elapsed().as_nanos() as f64 / 1e3
}

/// Times, per metapath, a walk plus pooling against a store lookup of the
/// same node.
pub fn bench(
    store: &ExpansionStore,
    g1: &BipartiteGraph,
    g2: &AuthorGraph,
    theta: &EmbeddingTable,
    expansion: &ExpansionConfig,
    cfg: &BenchConfig,
) -> Result<LatencyReport> {
    if cfg.requests == 0 {
        return Err(Error::Config("workload size must be positive".into()));
    }
    if cfg.clients == 0 {
        return Err(Error::Config("clients must be positive".into()));
    }
    store.check_universe(g1.users(), g1.authors())?;
    theta.check_graph(g1)?;
    let stream = request_stream(store, cfg.requests, cfg.seed)?;

    // samples[metapath][0 = on the fly, 1 = store]
    let run = |part: &[(u32, u32)]| -> Result<Vec<[Vec<f64>; 2]>> {
        let mut out: Vec<[Vec<f64>; 2]> = Metapath::ALL.iter().map(|_| [Vec::new(), Vec::new()]).collect();
        for &(u, a) in part {
            for (slot, &mp) in out.iter_mut().zip(Metapath::ALL.iter()) {
                let (origin, id) = if mp.starts_at_user() {
                    (NodeRef::User(u), g1.user_id(u))
                } else {
                    (NodeRef::Author(a), g1.author_id(a))
                };
                let t = Instant::now();
                let set = expand(g1, g2, origin, mp, expansion)?;
                black_box(aggregate(theta, set.terminal()));
                slot[0].push(elapsed_us(t));

                let t = Instant::now();
                let rec = store.lookup(black_box(id), mp).ok_or_else(|| Error::UnknownNode(id.to_string()))?;
                black_box(rec.aggregate.clone());
                slot[1].push(elapsed_us(t));
            }
        }
        Ok(out)
    };

    let chunk = stream.len().div_ceil(cfg.clients);
    let parts: Vec<Result<Vec<[Vec<f64>; 2]>>> = std::thread::scope(|s| {
        let handles: Vec<_> = stream.chunks(chunk).map(|p| s.spawn(move || run(p))).collect();
        handles.into_iter().map(|h| h.join().expect("bench client panicked")).collect()
    });

    let mut merged: Vec<[Vec<f64>; 2]> = Metapath::ALL.iter().map(|_| [Vec::new(), Vec::new()]).collect();
    for part in parts {
        for (m, p) in merged.iter_mut().zip(part?) {
            let [a, b] = p;
            m[0].extend(a);
            m[1].extend(b);
        }
    }
    let mut rows = Vec::new();
    for (path_i, path) in ["on_the_fly", "store_lookup"].iter().enumerate() {
        for (mp, m) in Metapath::ALL.iter().zip(merged.iter_mut()) {
            let xs = &mut m[path_i];
            xs.sort_by(f64::total_cmp);
            rows.push(PathLatency {
                path: path.to_string(),
                metapath: mp.name().into(),
                p50_us: percentile(xs, 0.5),
                p90_us: percentile(xs, 0.9),
                p99_us: percentile(xs, 0.99),
            });
        }
    }
    Ok(LatencyReport {
        requests: cfg.requests,
        clients: cfg.clients,
        rows,
    })
}
