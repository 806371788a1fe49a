//! Offline metapath store (`MMBS`).
//!
//! Layout: magic, version, `d`, metapath names, build timestamp, build id,
//! user and author id dictionaries, then one record per user (u2a2u,
//! u2a2u2a, u2a2a) and per author (a2a, a2u2a) in dictionary order. A
//! metapath record is a `u32` count, that many `u32` indices into the
//! terminal type's dictionary, and `d` 64-bit means of the neighbors' Θ
//! rows.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};

use crate::binio;
use crate::error::{Error, Result};
use crate::graph::{AuthorGraph, BipartiteGraph, NodeRef};
use crate::graphcl::EmbeddingTable;
use crate::metapath::{expand, ExpansionConfig, Metapath};
use crate::model::Neighborhoods;

pub const STORE_MAGIC: &[u8; 4] = b"MMBS";
pub const STORE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct MetapathRecord {
    pub metapath: Metapath,
    /// Sorted terminal neighbors.
    pub neighbors: Vec<NodeRef>,
    /// Mean of the neighbors' Θ rows; zeros when there are none.
    pub aggregate: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpansionStore {
    d: usize,
    built_at: u64,
    build_id: String,
    users: Vec<String>,
    authors: Vec<String>,
    user_records: Vec<Vec<MetapathRecord>>,
    author_records: Vec<Vec<MetapathRecord>>,
    user_index: HashMap<String, usize>,
    author_index: HashMap<String, usize>,
}

/// Mean of Θ rows in list order, accumulated in 64-bit.
pub fn aggregate(theta: &EmbeddingTable, nodes: &[NodeRef]) -> Vec<f64> {
    let mut acc = vec![0.0f64; theta.dim()];
    for &n in nodes {
        for (a, &x) in acc.iter_mut().zip(theta.row(n)) {
            *a += x as f64;
        }
    }
    if !nodes.is_empty() {
        let k = nodes.len() as f64;
        acc.iter_mut().for_each(|a| *a /= k);
    }
    acc
}

fn index_of(ids: &[String]) -> HashMap<String, usize> {
    ids.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect()
}

fn now_secs() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl ExpansionStore {
    /// Expands every node along its metapaths and stores ids plus
    /// aggregates. The build id hashes the graphs, Θ and `cfg`.
    pub fn precompute(g1: &BipartiteGraph, g2: &AuthorGraph, theta: &EmbeddingTable, cfg: &ExpansionConfig) -> Result<Self> {
        cfg.validate()?;
        g2.check_compatible(g1)?;
        theta.check_graph(g1)?;

        let record = |origin: NodeRef, mp: Metapath| -> Result<MetapathRecord> {
            let set = expand(g1, g2, origin, mp, cfg)?;
            let neighbors = set.terminal().to_vec();
            Ok(MetapathRecord {
                metapath: mp,
                aggregate: aggregate(theta, &neighbors),
                neighbors,
            })
        };
        let user_records = (0..g1.num_users() as u32)
            .map(|u| Metapath::USER.iter().map(|&mp| record(NodeRef::User(u), mp)).collect())
            .collect::<Result<Vec<Vec<_>>>>()?;
        let author_records = (0..g1.num_authors() as u32)
            .map(|a| Metapath::AUTHOR.iter().map(|&mp| record(NodeRef::Author(a), mp)).collect())
            .collect::<Result<Vec<Vec<_>>>>()?;

        let mut hasher = Sha256::new();
        let mut buf = Vec::new();
        g1.write(&mut buf)?;
        g2.write(&mut buf)?;
        theta.write(&mut buf)?;
        buf.extend(serde_json::to_vec(cfg)?);
        hasher.update(&buf);
        let digest = hasher.finalize();
        let build_id: String = digest[..8].iter().map(|b| format!("{b:02x}")).collect();

        Ok(Self {
            d: theta.dim(),
            built_at: now_secs(),
            build_id,
            user_index: index_of(g1.users()),
            author_index: index_of(g1.authors()),
            users: g1.users().to_vec(),
            authors: g1.authors().to_vec(),
            user_records,
            author_records,
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn built_at(&self) -> u64 {
        self.built_at
    }

    pub fn build_id(&self) -> &str {
        &self.build_id
    }

    pub fn users(&self) -> &[String] {
        &self.users
    }

    pub fn authors(&self) -> &[String] {
        &self.authors
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty() && self.authors.is_empty()
    }

    pub fn node_id(&self, n: NodeRef) -> &str {
        match n {
            NodeRef::User(u) => &self.users[u as usize],
            NodeRef::Author(a) => &self.authors[a as usize],
        }
    }

    /// Records of a user, in u2a2u, u2a2u2a, u2a2a order.
    pub fn user(&self, id: &str) -> Option<&[MetapathRecord]> {
        self.user_index.get(id).map(|&i| self.user_records[i].as_slice())
    }

    /// Records of an author, in a2a, a2u2a order.
    pub fn author(&self, id: &str) -> Option<&[MetapathRecord]> {
        self.author_index.get(id).map(|&i| self.author_records[i].as_slice())
    }

    /// Key-exact lookup of one record.
    pub fn lookup(&self, id: &str, mp: Metapath) -> Option<&MetapathRecord> {
        let records = if mp.starts_at_user() { self.user(id)? } else { self.author(id)? };
        records.iter().find(|r| r.metapath == mp)
    }

    /// Sorted union of a node's terminal neighbors.
    fn union(records: &[MetapathRecord]) -> Vec<NodeRef> {
        let mut all: Vec<NodeRef> = records.iter().flat_map(|r| r.neighbors.iter().copied()).collect();
        all.sort_unstable();
        all.dedup();
        all
    }

    pub fn user_side(&self, id: &str) -> Option<Vec<NodeRef>> {
        self.user(id).map(Self::union)
    }

    pub fn author_side(&self, id: &str) -> Option<Vec<NodeRef>> {
        self.author(id).map(Self::union)
    }

    /// The neighbor unions the model consumes, for every stored node.
    pub fn neighborhoods(&self) -> Neighborhoods {
        let mut nb = Neighborhoods::new();
        for (id, recs) in self.users.iter().zip(&self.user_records) {
            nb.insert_user(id.clone(), Self::union(recs));
        }
        for (id, recs) in self.authors.iter().zip(&self.author_records) {
            nb.insert_author(id.clone(), Self::union(recs));
        }
        nb
    }

    /// Requires Θ to cover the same nodes in the same order.
    pub fn check_universe(&self, users: &[String], authors: &[String]) -> Result<()> {
        if self.users != users || self.authors != authors {
            return Err(Error::InvalidValue("store and embedding table cover different node universes".into()));
        }
        Ok(())
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        binio::write_magic(w, STORE_MAGIC, STORE_VERSION)?;
        binio::write_len(w, self.d)?;
        let names: Vec<String> = Metapath::ALL.iter().map(|m| m.name().to_string()).collect();
        binio::write_strs(w, &names)?;
        binio::write_u64(w, self.built_at)?;
        binio::write_str(w, &self.build_id)?;
        binio::write_strs(w, &self.users)?;
        binio::write_strs(w, &self.authors)?;
        for rec in self.user_records.iter().chain(&self.author_records).flatten() {
            binio::write_len(w, rec.neighbors.len())?;
            for n in &rec.neighbors {
                binio::write_u32(w, n.index())?;
            }
            binio::write_f64s(w, &rec.aggregate)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let version = binio::read_magic(r, STORE_MAGIC)?;
        if version != STORE_VERSION {
            return Err(Error::Format(format!("unsupported store version {version}")));
        }
        let d = binio::read_u32(r)? as usize;
        let names = binio::read_strs(r)?;
        let expected: Vec<&str> = Metapath::ALL.iter().map(|m| m.name()).collect();
        if names != expected {
            return Err(Error::Format(format!("unexpected metapath list {names:?}")));
        }
        let built_at = binio::read_u64(r)?;
        let build_id = binio::read_str(r)?;
        let users = binio::read_strs(r)?;
        let authors = binio::read_strs(r)?;
        let (nu, na) = (users.len(), authors.len());
        let mut read_record = |mp: Metapath| -> Result<MetapathRecord> {
            let n = binio::read_u32(r)? as usize;
            let idx = binio::read_u32s(r, n)?;
            let to_user = mp.ends_at_user();
            let neighbors = idx
                .into_iter()
                .map(|i| {
                    let bound = if to_user { nu } else { na };
                    if (i as usize) >= bound {
                        return Err(Error::Format(format!("neighbor index {i} out of range")));
                    }
                    Ok(if to_user { NodeRef::User(i) } else { NodeRef::Author(i) })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(MetapathRecord {
                metapath: mp,
                neighbors,
                aggregate: binio::read_f64s(r, d)?,
            })
        };
        let user_records = (0..nu)
            .map(|_| Metapath::USER.iter().map(|&mp| read_record(mp)).collect())
            .collect::<Result<Vec<Vec<_>>>>()?;
        let author_records = (0..na)
            .map(|_| Metapath::AUTHOR.iter().map(|&mp| read_record(mp)).collect())
            .collect::<Result<Vec<Vec<_>>>>()?;
        binio::expect_eof(r)?;
        Ok(Self {
            d,
            built_at,
            build_id,
            user_index: index_of(&users),
            author_index: index_of(&authors),
            users,
            authors,
            user_records,
            author_records,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(&mut BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_a2a, build_u2a, SwingConfig};
    use crate::ingest::{DonationEvent, FeatureTable};
    use crate::metapath::{expand_author, expand_user, terminal_union};

    fn ev(u: &str, a: &str) -> DonationEvent {
        DonationEvent {
            user_id: u.into(),
            author_id: a.into(),
            amount: 1.0,
            timestamp: 0,
        }
    }

    fn table(g: &BipartiteGraph, d: usize) -> EmbeddingTable {
        let data = (0..g.num_nodes() * d).map(|i| (i as f32 * 0.37).sin()).collect();
        EmbeddingTable::new(g.users().to_vec(), g.authors().to_vec(), d, data).unwrap()
    }

    #[test]
    fn empty_graph_gives_header_only() {
        let g1 = build_u2a(&[], &FeatureTable::new()).unwrap();
        let g2 = build_a2a(&g1, &SwingConfig::default()).unwrap();
        let store = ExpansionStore::precompute(&g1, &g2, &table(&g1, 4), &ExpansionConfig::default()).unwrap();
        assert!(store.is_empty());
        let mut bytes = Vec::new();
        store.write(&mut bytes).unwrap();
        assert_eq!(ExpansionStore::read(&mut bytes.as_slice()).unwrap(), store);
    }

    #[test]
    fn definition_example_record() {
        // u_t donates to a1 and a2; u1, u2 share a1; u3 shares a2.
        let events = [ev("ut", "a1"), ev("ut", "a2"), ev("u1", "a1"), ev("u2", "a1"), ev("u3", "a2")];
        let g1 = build_u2a(&events, &FeatureTable::new()).unwrap();
        let g2 = build_a2a(&g1, &SwingConfig::default()).unwrap();
        let theta = table(&g1, 3);
        let store = ExpansionStore::precompute(&g1, &g2, &theta, &ExpansionConfig::default()).unwrap();
        let rec = store.lookup("ut", Metapath::U2A2U).unwrap();
        let ids: Vec<&str> = rec.neighbors.iter().map(|&n| store.node_id(n)).collect();
        assert_eq!(ids, ["u1", "u2", "u3"]);
        for c in 0..3 {
            let m = ["u1", "u2", "u3"].iter().map(|u| theta.row(theta.user_node(u).unwrap())[c] as f64).sum::<f64>() / 3.0;
            assert!((rec.aggregate[c] - m).abs() < 1e-12);
        }
        assert!(store.lookup("ut", Metapath::A2A).is_none());
        assert!(store.lookup("nobody", Metapath::U2A2U).is_none());
    }

    #[test]
    fn store_matches_on_the_fly_and_round_trips() {
        let events: Vec<DonationEvent> = (0..40)
            .flat_map(|u| (0..6).filter(move |a| (u * 7 + a * 3) % 5 < 2).map(move |a| ev(&format!("u{u:02}"), &format!("a{a}"))))
            .collect();
        let g1 = build_u2a(&events, &FeatureTable::new()).unwrap();
        let g2 = build_a2a(&g1, &SwingConfig::default()).unwrap();
        let theta = table(&g1, 5);
        let cfg = ExpansionConfig {
            cap: Some(6),
            ..Default::default()
        };
        let store = ExpansionStore::precompute(&g1, &g2, &theta, &cfg).unwrap();
        let nb = Neighborhoods::expand(&g1, &g2, &cfg).unwrap();
        assert_eq!(store.neighborhoods(), nb);
        for u in g1.users() {
            let sets = expand_user(&g1, &g2, u, &cfg).unwrap();
            for (rec, set) in store.user(u).unwrap().iter().zip(&sets) {
                assert_eq!(rec.neighbors, set.terminal());
                assert_eq!(rec.aggregate, aggregate(&theta, set.terminal()));
            }
            assert_eq!(store.user_side(u).unwrap(), terminal_union(&sets));
        }
        for a in g1.authors() {
            let sets = expand_author(&g1, &g2, a, &cfg).unwrap();
            assert_eq!(store.author_side(a).unwrap(), terminal_union(&sets));
        }
        let mut bytes = Vec::new();
        store.write(&mut bytes).unwrap();
        let back = ExpansionStore::read(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, store);
        let mut again = Vec::new();
        back.write(&mut again).unwrap();
        assert_eq!(bytes, again);
        assert!(ExpansionStore::read(&mut &bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn universe_mismatch_is_rejected() {
        let g1 = build_u2a(&[ev("u1", "a1")], &FeatureTable::new()).unwrap();
        let other = build_u2a(&[ev("u2", "a1")], &FeatureTable::new()).unwrap();
        let g2 = build_a2a(&g1, &SwingConfig::default()).unwrap();
        assert!(ExpansionStore::precompute(&g1, &g2, &table(&other, 2), &ExpansionConfig::default()).is_err());
    }
}
