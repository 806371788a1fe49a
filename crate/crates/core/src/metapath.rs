//! The five typed metapaths over the U2A and A2A graphs, and
//! metapath-guided neighbor expansion with optional per-step caps.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{AuthorGraph, BipartiteGraph, NodeRef};

/// One hop of a metapath.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Relation {
    /// User → author along a donation edge.
    Donates,
    /// Author → user along a donation edge.
    DonatedBy,
    /// Author → author along a Swing edge.
    Similar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Metapath {
    #[serde(rename = "u2a2u")]
    U2A2U,
    #[serde(rename = "u2a2u2a")]
    U2A2U2A,
    #[serde(rename = "u2a2a")]
    U2A2A,
    #[serde(rename = "a2a")]
    A2A,
    #[serde(rename = "a2u2a")]
    A2U2A,
}

impl Metapath {
    pub const ALL: [Metapath; 5] = [
        Metapath::U2A2U,
        Metapath::U2A2U2A,
        Metapath::U2A2A,
        Metapath::A2A,
        Metapath::A2U2A,
    ];
    pub const USER: [Metapath; 3] = [Metapath::U2A2U, Metapath::U2A2U2A, Metapath::U2A2A];
    pub const AUTHOR: [Metapath; 2] = [Metapath::A2A, Metapath::A2U2A];

    pub fn name(self) -> &'static str {
        match self {
            Metapath::U2A2U => "u2a2u",
            Metapath::U2A2U2A => "u2a2u2a",
            Metapath::U2A2A => "u2a2a",
            Metapath::A2A => "a2a",
            Metapath::A2U2A => "a2u2a",
        }
    }

    pub fn steps(self) -> &'static [Relation] {
        use Relation::*;
        match self {
            Metapath::U2A2U => &[Donates, DonatedBy],
            Metapath::U2A2U2A => &[Donates, DonatedBy, Donates],
            Metapath::U2A2A => &[Donates, Similar],
            Metapath::A2A => &[Similar],
            Metapath::A2U2A => &[DonatedBy, Donates],
        }
    }

    pub fn starts_at_user(self) -> bool {
        self.steps()[0] == Relation::Donates
    }

    pub fn ends_at_user(self) -> bool {
        *self.steps().last().unwrap() == Relation::DonatedBy
    }

    fn ordinal(self) -> u64 {
        Self::ALL.iter().position(|&m| m == self).unwrap() as u64
    }
}

impl fmt::Display for Metapath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metapath {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metapath::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidValue(format!("unknown metapath {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampling {
    /// Probability proportional to accumulated edge weight.
    #[default]
    Weighted,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpansionConfig {
    /// Per-step limit on the frontier; `None` disables sampling.
    pub cap: Option<usize>,
    pub sampling: Sampling,
    pub seed: u64,
    /// Drop terminal authors the origin user already donated to (u2a2u2a).
    pub exclude_history: bool,
    /// Test hook: keep the origin node in the step sets.
    pub keep_origin: bool,
}

impl Default for ExpansionConfig {
    fn default() -> Self {
        Self {
            cap: Some(50),
            sampling: Sampling::Weighted,
            seed: 0,
            exclude_history: true,
            keep_origin: false,
        }
    }
}

impl ExpansionConfig {
    pub fn uncapped() -> Self {
        Self {
            cap: None,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cap == Some(0) {
            return Err(Error::Config("expansion cap must be >= 1".into()));
        }
        Ok(())
    }
}

/// Nodes reached at each step of a metapath walk from `origin`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborSet {
    pub origin: NodeRef,
    pub metapath: Metapath,
    /// `steps[i]` holds the deduplicated, sorted step-`i + 1` neighbors.
    pub steps: Vec<Vec<NodeRef>>,
}

impl NeighborSet {
    pub fn terminal(&self) -> &[NodeRef] {
        self.steps.last().map_or(&[], |s| s.as_slice())
    }
}

fn check_node(g1: &BipartiteGraph, n: NodeRef) -> Result<()> {
    let ok = match n {
        NodeRef::User(u) => (u as usize) < g1.num_users(),
        NodeRef::Author(a) => (a as usize) < g1.num_authors(),
    };
    if ok {
        Ok(())
    } else {
        Err(Error::UnknownNode(format!("{n:?}")))
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Per-(origin, metapath, step) stream so capped output does not depend on
/// the order in which nodes are expanded.
fn step_rng(cfg: &ExpansionConfig, origin: NodeRef, mp: Metapath, step: usize) -> ChaCha8Rng {
    let kind = u64::from(!origin.is_user());
    let key = splitmix(cfg.seed)
        ^ splitmix((u64::from(origin.index()) << 1) | kind)
        ^ splitmix(mp.ordinal() << 8 | step as u64);
    ChaCha8Rng::seed_from_u64(splitmix(key))
}

fn sample(candidates: BTreeMap<NodeRef, f64>, cap: usize, sampling: Sampling, rng: &mut ChaCha8Rng) -> Vec<NodeRef> {
    let items: Vec<(NodeRef, f64)> = candidates.into_iter().collect();
    let picked = rand::seq::index::sample_weighted(
        rng,
        items.len(),
        |i| match sampling {
            Sampling::Weighted => items[i].1,
            Sampling::Uniform => 1.0,
        },
        cap,
    )
    .expect("edge weights are positive and finite");
    let mut out: Vec<NodeRef> = picked.into_iter().map(|i| items[i].0).collect();
    out.sort_unstable();
    out
}

/// Walks `mp` from `origin`: step `i` is the union of the relation images of
/// step `i - 1`, without the origin. A step whose union exceeds `cfg.cap` is
/// subsampled deterministically under `cfg.seed`; the next step expands the
/// sampled set.
pub fn expand(
    g1: &BipartiteGraph,
    g2: &AuthorGraph,
    origin: NodeRef,
    mp: Metapath,
    cfg: &ExpansionConfig,
) -> Result<NeighborSet> {
    check_node(g1, origin)?;
    if origin.is_user() != mp.starts_at_user() {
        return Err(Error::MetapathType {
            node: g1.node_id(origin).to_string(),
            metapath: mp.name().into(),
        });
    }
    if g2.num_authors() != g1.num_authors() {
        return Err(Error::InvalidValue("author graph does not match donation graph".into()));
    }

    let mut frontier = vec![origin];
    let mut steps = Vec::with_capacity(mp.steps().len());
    for (i, rel) in mp.steps().iter().enumerate() {
        let mut cand: BTreeMap<NodeRef, f64> = BTreeMap::new();
        for &node in &frontier {
            let (targets, weights, wrap): (&[u32], &[f64], fn(u32) -> NodeRef) = match (rel, node) {
                (Relation::Donates, NodeRef::User(u)) => {
                    let (t, w) = g1.donated(u);
                    (t, w, NodeRef::Author)
                }
                (Relation::DonatedBy, NodeRef::Author(a)) => {
                    let (t, w) = g1.donors(a);
                    (t, w, NodeRef::User)
                }
                (Relation::Similar, NodeRef::Author(a)) => {
                    let (t, w) = g2.neighbors(a);
                    (t, w, NodeRef::Author)
                }
                _ => unreachable!("metapath steps alternate node types"),
            };
            for (&t, &w) in targets.iter().zip(weights) {
                *cand.entry(wrap(t)).or_insert(0.0) += w;
            }
        }
        if !cfg.keep_origin {
            cand.remove(&origin);
        }
        if mp == Metapath::U2A2U2A && i == 2 && cfg.exclude_history {
            if let NodeRef::User(u) = origin {
                for &a in g1.donated(u).0 {
                    cand.remove(&NodeRef::Author(a));
                }
            }
        }
        let next = match cfg.cap {
            Some(cap) if cand.len() > cap => sample(cand, cap, cfg.sampling, &mut step_rng(cfg, origin, mp, i)),
            _ => cand.into_keys().collect(),
        };
        steps.push(next.clone());
        frontier = next;
    }
    Ok(NeighborSet {
        origin,
        metapath: mp,
        steps,
    })
}

/// u2a2u, u2a2u2a and u2a2a from a user.
pub fn expand_user(g1: &BipartiteGraph, g2: &AuthorGraph, user: &str, cfg: &ExpansionConfig) -> Result<[NeighborSet; 3]> {
    let u = g1.user_index(user).ok_or_else(|| Error::UnknownNode(user.to_string()))?;
    let origin = NodeRef::User(u);
    Ok([
        expand(g1, g2, origin, Metapath::U2A2U, cfg)?,
        expand(g1, g2, origin, Metapath::U2A2U2A, cfg)?,
        expand(g1, g2, origin, Metapath::U2A2A, cfg)?,
    ])
}

/// a2a and a2u2a from an author.
pub fn expand_author(
    g1: &BipartiteGraph,
    g2: &AuthorGraph,
    author: &str,
    cfg: &ExpansionConfig,
) -> Result<[NeighborSet; 2]> {
    let a = g1.author_index(author).ok_or_else(|| Error::UnknownNode(author.to_string()))?;
    let origin = NodeRef::Author(a);
    Ok([
        expand(g1, g2, origin, Metapath::A2A, cfg)?,
        expand(g1, g2, origin, Metapath::A2U2A, cfg)?,
    ])
}

/// Sorted union of terminal sets.
pub fn terminal_union<'a>(sets: impl IntoIterator<Item = &'a NeighborSet>) -> Vec<NodeRef> {
    let all: BTreeSet<NodeRef> = sets.into_iter().flat_map(|s| s.terminal().iter().copied()).collect();
    all.into_iter().collect()
}
