//! User-to-author donation graph and author-to-author Swing graph.
//!
//! Node ids are interned into dense indices assigned in ascending id order,
//! so every structure built here is independent of input event order.
//! Adjacency is CSR: `offsets[i]..offsets[i + 1]` indexes the neighbor and
//! weight arrays of node `i`, with neighbors sorted by index.
//!
//! Both graphs serialize to `MMBG` files (a kind tag distinguishes them).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio;
use crate::error::{Error, Result};
use crate::ingest::{DonationEvent, FeatureTable};

pub const GRAPH_MAGIC: &[u8; 4] = b"MMBG";
pub const GRAPH_VERSION: u32 = 1;
const KIND_U2A: u32 = 1;
const KIND_A2A: u32 = 2;

/// Compressed sparse rows with `f64` edge weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Csr {
    offsets: Vec<u64>,
    targets: Vec<u32>,
    weights: Vec<f64>,
}

impl Csr {
    fn from_lists(lists: Vec<Vec<(u32, f64)>>) -> Self {
        let mut csr = Csr {
            offsets: Vec::with_capacity(lists.len() + 1),
            ..Default::default()
        };
        csr.offsets.push(0);
        for list in lists {
            for (t, w) in list {
                csr.targets.push(t);
                csr.weights.push(w);
            }
            csr.offsets.push(csr.targets.len() as u64);
        }
        csr
    }

    pub fn num_rows(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn num_edges(&self) -> usize {
        self.targets.len()
    }

    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let (s, e) = (self.offsets[i] as usize, self.offsets[i + 1] as usize);
        (&self.targets[s..e], &self.weights[s..e])
    }

    fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        binio::write_u64(w, self.offsets.len() as u64)?;
        for &o in &self.offsets {
            binio::write_u64(w, o)?;
        }
        binio::write_u64(w, self.targets.len() as u64)?;
        for &t in &self.targets {
            binio::write_u32(w, t)?;
        }
        binio::write_f64s(w, &self.weights)
    }

    fn read<R: Read>(r: &mut R, expected_rows: usize, target_bound: usize) -> Result<Self> {
        let n_off = binio::read_u64(r)? as usize;
        if n_off != expected_rows + 1 {
            return Err(Error::Format(format!(
                "adjacency has {} rows, dictionary has {expected_rows}",
                n_off.saturating_sub(1)
            )));
        }
        let offsets = binio::read_u64s(r, n_off)?;
        let n_edges = binio::read_u64(r)? as usize;
        let targets = binio::read_u32s(r, n_edges)?;
        let weights = binio::read_f64s(r, n_edges)?;
        let monotone = offsets.first() == Some(&0)
            && offsets.windows(2).all(|w| w[0] <= w[1])
            && offsets.last().copied() == Some(n_edges as u64);
        if !monotone || targets.iter().any(|&t| t as usize >= target_bound) {
            return Err(Error::Format("corrupt adjacency".into()));
        }
        Ok(Csr {
            offsets,
            targets,
            weights,
        })
    }
}

/// A graph node, typed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NodeRef {
    User(u32),
    Author(u32),
}

impl NodeRef {
    pub fn is_user(self) -> bool {
        matches!(self, NodeRef::User(_))
    }

    pub fn index(self) -> u32 {
        match self {
            NodeRef::User(i) | NodeRef::Author(i) => i,
        }
    }
}

/// The U2A donation graph: forward (user → authors) and reverse
/// (author → donors) adjacency weighted by total donated amount, plus each
/// author's aggregated multimodal attribute.
#[derive(Clone, Debug, PartialEq)]
pub struct BipartiteGraph {
    users: Vec<String>,
    authors: Vec<String>,
    user_index: HashMap<String, u32>,
    author_index: HashMap<String, u32>,
    forward: Csr,
    reverse: Csr,
    d_m: usize,
    author_attr: Vec<f32>,
}

fn intern(ids: Vec<String>) -> HashMap<String, u32> {
    ids.into_iter().enumerate().map(|(i, s)| (s, i as u32)).collect()
}

impl BipartiteGraph {
    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_authors(&self) -> usize {
        self.authors.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.users.len() + self.authors.len()
    }

    pub fn num_edges(&self) -> usize {
        self.forward.num_edges()
    }

    pub fn users(&self) -> &[String] {
        &self.users
    }

    pub fn authors(&self) -> &[String] {
        &self.authors
    }

    pub fn user_id(&self, u: u32) -> &str {
        &self.users[u as usize]
    }

    pub fn author_id(&self, a: u32) -> &str {
        &self.authors[a as usize]
    }

    pub fn node_id(&self, n: NodeRef) -> &str {
        match n {
            NodeRef::User(u) => self.user_id(u),
            NodeRef::Author(a) => self.author_id(a),
        }
    }

    pub fn user_index(&self, id: &str) -> Option<u32> {
        self.user_index.get(id).copied()
    }

    pub fn author_index(&self, id: &str) -> Option<u32> {
        self.author_index.get(id).copied()
    }

    /// Authors donated to by `u` (`I_u`), ascending, with summed amounts.
    pub fn donated(&self, u: u32) -> (&[u32], &[f64]) {
        self.forward.row(u as usize)
    }

    /// Donors of author `a` (`U_a`), ascending, with summed amounts.
    pub fn donors(&self, a: u32) -> (&[u32], &[f64]) {
        self.reverse.row(a as usize)
    }

    pub fn d_m(&self) -> usize {
        self.d_m
    }

    pub fn author_attr(&self, a: u32) -> &[f32] {
        let a = a as usize;
        &self.author_attr[a * self.d_m..(a + 1) * self.d_m]
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        binio::write_magic(w, GRAPH_MAGIC, GRAPH_VERSION)?;
        binio::write_u32(w, KIND_U2A)?;
        binio::write_strs(w, &self.users)?;
        binio::write_strs(w, &self.authors)?;
        self.forward.write(w)?;
        self.reverse.write(w)?;
        binio::write_len(w, self.d_m)?;
        binio::write_f32s(w, &self.author_attr)
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        read_header(r, KIND_U2A)?;
        let users = binio::read_strs(r)?;
        let authors = binio::read_strs(r)?;
        let forward = Csr::read(r, users.len(), authors.len())?;
        let reverse = Csr::read(r, authors.len(), users.len())?;
        let d_m = binio::read_u32(r)? as usize;
        let author_attr = binio::read_f32s(r, authors.len() * d_m)?;
        binio::expect_eof(r)?;
        Ok(Self {
            user_index: intern(users.clone()),
            author_index: intern(authors.clone()),
            users,
            authors,
            forward,
            reverse,
            d_m,
            author_attr,
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

fn read_header<R: Read>(r: &mut R, kind: u32) -> Result<()> {
    let version = binio::read_magic(r, GRAPH_MAGIC)?;
    if version != GRAPH_VERSION {
        return Err(Error::Format(format!("unsupported graph version {version}")));
    }
    let found = binio::read_u32(r)?;
    if found != kind {
        return Err(Error::Format(format!("graph kind {found}, expected {kind}")));
    }
    Ok(())
}

/// Builds the U2A graph.
///
/// One edge per distinct (user, author) pair weighted by the summed amount;
/// pairs whose amounts sum to zero carry no edge. The author set is every
/// author seen in donations or features, so authors without donors are
/// present as isolated nodes. An author's attribute is the mean of all
/// feature tokens across all of its segments (zero when it has none).
pub fn build_u2a(donations: &[DonationEvent], features: &FeatureTable) -> Result<BipartiteGraph> {
    let d_m = features.values().next().map_or(0, |s| s.d_m());

    let mut pairs: BTreeMap<(&str, &str), f64> = BTreeMap::new();
    let mut users = BTreeSet::new();
    let mut authors: BTreeSet<&str> = features.values().map(|s| s.author_id.as_str()).collect();
    for e in donations {
        if !(e.amount >= 0.0 && e.amount.is_finite()) {
            return Err(Error::InvalidValue(format!("donation amount {}", e.amount)));
        }
        *pairs.entry((&e.user_id, &e.author_id)).or_insert(0.0) += e.amount;
        users.insert(e.user_id.as_str());
        authors.insert(e.author_id.as_str());
    }
    let users: Vec<String> = users.into_iter().map(String::from).collect();
    let authors: Vec<String> = authors.into_iter().map(String::from).collect();
    let user_index = intern(users.clone());
    let author_index = intern(authors.clone());

    let mut fwd = vec![Vec::new(); users.len()];
    let mut rev = vec![Vec::new(); authors.len()];
    for ((u, a), w) in pairs {
        if w <= 0.0 {
            continue;
        }
        let (ui, ai) = (user_index[u], author_index[a]);
        fwd[ui as usize].push((ai, w));
        rev[ai as usize].push((ui, w));
    }
    for list in fwd.iter_mut().chain(rev.iter_mut()) {
        list.sort_by_key(|&(t, _)| t);
    }

    let mut sums = vec![0f64; authors.len() * d_m];
    let mut counts = vec![0usize; authors.len()];
    for seg in features.values() {
        if seg.d_m() != d_m {
            return Err(Error::Dimension {
                expected: d_m,
                found: seg.d_m(),
            });
        }
        let a = author_index[seg.author_id.as_str()] as usize;
        for m in seg.modalities() {
            for r in 0..m.rows() {
                for (s, &x) in sums[a * d_m..(a + 1) * d_m].iter_mut().zip(m.row(r)) {
                    *s += x as f64;
                }
                counts[a] += 1;
            }
        }
    }
    let author_attr = sums
        .chunks(d_m.max(1))
        .zip(&counts)
        .flat_map(|(row, &n)| row.iter().map(move |&s| if n == 0 { 0.0 } else { (s / n as f64) as f32 }))
        .take(authors.len() * d_m)
        .collect();

    Ok(BipartiteGraph {
        users,
        authors,
        user_index,
        author_index,
        forward: Csr::from_lists(fwd),
        reverse: Csr::from_lists(rev),
        d_m,
        author_attr,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwingConfig {
    /// Smoothing term added to the co-donation overlap.
    pub alpha: f64,
    /// Neighbors kept per author.
    pub top_k: usize,
    /// Skip the `u == v` terms of the double sum.
    pub exclude_diagonal: bool,
}

impl Default for SwingConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            top_k: 20,
            exclude_diagonal: false,
        }
    }
}

impl SwingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be >= 1".into()));
        }
        Ok(())
    }
}

fn intersection_len(a: &[u32], b: &[u32]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

fn intersection(a: &[u32], b: &[u32]) -> Vec<u32> {
    let (mut i, mut j, mut out) = (0, 0, Vec::new());
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out
}

/// Swing double sum over an ascending list of common donors. The fixed
/// iteration order makes `s(i, j)` and `s(j, i)` bitwise equal.
fn swing_over_common(g: &BipartiteGraph, common: &[u32], alpha: f64, exclude_diagonal: bool) -> f64 {
    let mut total = 0.0;
    for &u in common {
        let iu = g.donated(u).0;
        for &v in common {
            if exclude_diagonal && u == v {
                continue;
            }
            let overlap = intersection_len(iu, g.donated(v).0);
            total += 1.0 / (alpha + overlap as f64);
        }
    }
    total
}

/// Swing similarity between two authors by index.
pub fn swing_by_index(g: &BipartiteGraph, i: u32, j: u32, cfg: &SwingConfig) -> f64 {
    let common = intersection(g.donors(i).0, g.donors(j).0);
    swing_over_common(g, &common, cfg.alpha, cfg.exclude_diagonal)
}

/// `s(i, j) = Σ_{u ∈ U_i ∩ U_j} Σ_{v ∈ U_i ∩ U_j} 1 / (α + |I_u ∩ I_v|)`,
/// including the `u = v` terms unless `cfg.exclude_diagonal` is set.
pub fn swing_similarity(g: &BipartiteGraph, i: &str, j: &str, cfg: &SwingConfig) -> Result<f64> {
    if !(cfg.alpha > 0.0) {
        return Err(Error::Config(format!("alpha must be > 0, got {}", cfg.alpha)));
    }
    if i == j {
        return Err(Error::InvalidValue(format!("self-similarity of {i} is undefined")));
    }
    let ii = g.author_index(i).ok_or_else(|| Error::UnknownNode(i.to_string()))?;
    let jj = g.author_index(j).ok_or_else(|| Error::UnknownNode(j.to_string()))?;
    Ok(swing_by_index(g, ii, jj, cfg))
}

/// The A2A graph over the authors of a [`BipartiteGraph`] (same indices).
#[derive(Clone, Debug, PartialEq)]
pub struct AuthorGraph {
    authors: Vec<String>,
    config: SwingConfig,
    edges: Csr,
}

impl AuthorGraph {
    pub fn num_authors(&self) -> usize {
        self.authors.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.num_edges()
    }

    pub fn config(&self) -> &SwingConfig {
        &self.config
    }

    pub fn authors(&self) -> &[String] {
        &self.authors
    }

    /// Similar authors of `a`, best first.
    pub fn neighbors(&self, a: u32) -> (&[u32], &[f64]) {
        self.edges.row(a as usize)
    }

    /// Checks that both graphs index the same author universe.
    pub fn check_compatible(&self, g: &BipartiteGraph) -> Result<()> {
        if self.authors != g.authors {
            return Err(Error::InvalidValue(
                "author graph and donation graph have different author sets".into(),
            ));
        }
        Ok(())
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        binio::write_magic(w, GRAPH_MAGIC, GRAPH_VERSION)?;
        binio::write_u32(w, KIND_A2A)?;
        binio::write_strs(w, &self.authors)?;
        binio::write_f64(w, self.config.alpha)?;
        binio::write_u64(w, self.config.top_k as u64)?;
        binio::write_u8(w, u8::from(self.config.exclude_diagonal))?;
        self.edges.write(w)
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        read_header(r, KIND_A2A)?;
        let authors = binio::read_strs(r)?;
        let config = SwingConfig {
            alpha: binio::read_f64(r)?,
            top_k: binio::read_u64(r)? as usize,
            exclude_diagonal: binio::read_u8(r)? != 0,
        };
        let edges = Csr::read(r, authors.len(), authors.len())?;
        binio::expect_eof(r)?;
        Ok(Self {
            authors,
            config,
            edges,
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

/// Builds the A2A graph by walking co-donation pairs through the inverted
/// index: every user contributes itself to the common-donor list of each
/// author pair it donated to. Each author keeps its `top_k` highest positive
/// scores, ties broken by ascending author id.
pub fn build_a2a(g: &BipartiteGraph, cfg: &SwingConfig) -> Result<AuthorGraph> {
    cfg.validate()?;
    // Users are visited in ascending order, so each list comes out sorted.
    let mut common: HashMap<(u32, u32), Vec<u32>> = HashMap::new();
    for u in 0..g.num_users() as u32 {
        let authors = g.donated(u).0;
        for (x, &i) in authors.iter().enumerate() {
            for &j in &authors[x + 1..] {
                common.entry((i, j)).or_default().push(u);
            }
        }
    }

    let mut lists: Vec<Vec<(u32, f64)>> = vec![Vec::new(); g.num_authors()];
    let mut keyed: Vec<_> = common.into_iter().collect();
    keyed.sort_unstable_by_key(|(k, _)| *k);
    for ((i, j), donors) in keyed {
        let s = swing_over_common(g, &donors, cfg.alpha, cfg.exclude_diagonal);
        if s > 0.0 {
            lists[i as usize].push((j, s));
            lists[j as usize].push((i, s));
        }
    }
    for list in &mut lists {
        list.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        list.truncate(cfg.top_k);
    }

    Ok(AuthorGraph {
        authors: g.authors.clone(),
        config: *cfg,
        edges: Csr::from_lists(lists),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::SegmentFeatures;
    use crate::tensor::Matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::io::Cursor;

    fn ev(u: &str, a: &str, amount: f64) -> DonationEvent {
        DonationEvent {
            user_id: u.into(),
            author_id: a.into(),
            amount,
            timestamp: 0,
        }
    }

    fn random_log(rng: &mut ChaCha8Rng, users: usize, authors: usize, n: usize) -> Vec<DonationEvent> {
        (0..n)
            .map(|_| {
                ev(
                    &format!("u{}", rng.random_range(0..users)),
                    &format!("a{}", rng.random_range(0..authors)),
                    rng.random_range(0.5..10.0),
                )
            })
            .collect()
    }

    #[test]
    fn empty_donations_give_empty_graph() {
        let g = build_u2a(&[], &FeatureTable::new()).unwrap();
        assert_eq!((g.num_users(), g.num_authors(), g.num_edges()), (0, 0, 0));
        let a2a = build_a2a(&g, &SwingConfig::default()).unwrap();
        assert_eq!(a2a.num_edges(), 0);
    }

    #[test]
    fn repeated_pair_sums_amounts() {
        let g = build_u2a(&[ev("u1", "a1", 5.0), ev("u1", "a1", 7.0)], &FeatureTable::new()).unwrap();
        assert_eq!(g.num_edges(), 1);
        assert_eq!(g.donated(0), (&[0u32][..], &[12.0][..]));
        assert_eq!(g.donors(0), (&[0u32][..], &[12.0][..]));
    }

    #[test]
    fn adjacency_matches_naive_accumulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let log = random_log(&mut rng, 5, 3, 25);
        let mut naive: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        for e in &log {
            *naive.entry(e.user_id.clone()).or_default().entry(e.author_id.clone()).or_default() += e.amount;
        }
        let g = build_u2a(&log, &FeatureTable::new()).unwrap();
        for (u, row) in &naive {
            let ui = g.user_index(u).unwrap();
            let (ts, ws) = g.donated(ui);
            let got: BTreeMap<String, f64> =
                ts.iter().zip(ws).map(|(&t, &w)| (g.author_id(t).to_string(), w)).collect();
            assert_eq!(&got, row);
        }
        // transpose consistency
        for u in 0..g.num_users() as u32 {
            let (ts, ws) = g.donated(u);
            for (&a, &w) in ts.iter().zip(ws) {
                let (us, rws) = g.donors(a);
                let pos = us.iter().position(|&x| x == u).unwrap();
                assert_eq!(rws[pos], w);
            }
        }
    }

    #[test]
    fn author_attr_is_token_mean() {
        let seg = |id: &str, v: f32| SegmentFeatures {
            segment_id: id.into(),
            author_id: "a1".into(),
            visual: Matrix::filled(2, 2, v),
            speech: Matrix::filled(1, 2, v + 1.0),
            text: Matrix::filled(1, 2, v + 2.0),
        };
        let table: FeatureTable = [("s1".to_string(), seg("s1", 0.0)), ("s2".to_string(), seg("s2", 4.0))]
            .into_iter()
            .collect();
        let g = build_u2a(&[ev("u1", "a2", 1.0)], &table).unwrap();
        let a1 = g.author_index("a1").unwrap();
        // tokens: 0,0,1,2,4,4,5,6 → mean 22/8
        assert_eq!(g.author_attr(a1), &[2.75, 2.75]);
        assert_eq!(g.author_attr(g.author_index("a2").unwrap()), &[0.0, 0.0]);
        assert!(g.donors(a1).0.is_empty());
    }

    fn four_thirds_graph() -> BipartiteGraph {
        build_u2a(
            &[ev("u1", "a1", 1.0), ev("u1", "a2", 1.0), ev("u2", "a1", 1.0), ev("u2", "a2", 1.0)],
            &FeatureTable::new(),
        )
        .unwrap()
    }

    #[test]
    fn swing_hand_example() {
        let g = four_thirds_graph();
        let cfg = SwingConfig::default();
        let s = swing_similarity(&g, "a1", "a2", &cfg).unwrap();
        assert!((s - 4.0 / 3.0).abs() < 1e-15);
        let a2a = build_a2a(&g, &SwingConfig { top_k: 5, ..cfg }).unwrap();
        assert_eq!(a2a.neighbors(0).0, &[1]);
        assert_eq!(a2a.neighbors(1).0, &[0]);
        assert_eq!(a2a.neighbors(0).1[0], s);
        assert_eq!(a2a.neighbors(1).1[0], s);
        // off-diagonal variant: only (u1,u2),(u2,u1)
        let off = swing_similarity(&g, "a1", "a2", &SwingConfig { exclude_diagonal: true, ..cfg }).unwrap();
        assert!((off - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn swing_errors_and_empty_intersection() {
        let g = build_u2a(&[ev("u1", "a1", 1.0), ev("u2", "a2", 1.0)], &FeatureTable::new()).unwrap();
        let cfg = SwingConfig::default();
        assert_eq!(swing_similarity(&g, "a1", "a2", &cfg).unwrap(), 0.0);
        assert!(swing_similarity(&g, "a1", "a1", &cfg).is_err());
        assert!(matches!(swing_similarity(&g, "a1", "zz", &cfg), Err(Error::UnknownNode(_))));
    }

    #[test]
    fn single_author_has_no_edges() {
        let g = build_u2a(&[ev("u1", "a1", 1.0), ev("u2", "a1", 1.0)], &FeatureTable::new()).unwrap();
        assert_eq!(build_a2a(&g, &SwingConfig::default()).unwrap().num_edges(), 0);
    }

    #[test]
    fn swing_symmetric_on_random_graphs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let log = random_log(&mut rng, 50, 20, 200);
            let g = build_u2a(&log, &FeatureTable::new()).unwrap();
            let cfg = SwingConfig::default();
            for i in 0..g.num_authors() as u32 {
                for j in 0..g.num_authors() as u32 {
                    if i != j {
                        assert_eq!(swing_by_index(&g, i, j, &cfg), swing_by_index(&g, j, i, &cfg));
                    }
                }
            }
        }
    }

    #[test]
    fn a2a_is_event_order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut log = random_log(&mut rng, 30, 10, 120);
        let a = build_a2a(&build_u2a(&log, &FeatureTable::new()).unwrap(), &SwingConfig::default()).unwrap();
        log.reverse();
        let b = build_a2a(&build_u2a(&log, &FeatureTable::new()).unwrap(), &SwingConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn top_k_sorted_with_ties_by_id() {
        // a0 shares identical single donors with a1, a2, a3 → equal scores.
        let log = vec![
            ev("u1", "a0", 1.0),
            ev("u1", "a3", 1.0),
            ev("u2", "a0", 1.0),
            ev("u2", "a1", 1.0),
            ev("u3", "a0", 1.0),
            ev("u3", "a2", 1.0),
        ];
        let g = build_u2a(&log, &FeatureTable::new()).unwrap();
        let a2a = build_a2a(&g, &SwingConfig { top_k: 2, ..Default::default() }).unwrap();
        assert_eq!(a2a.neighbors(0).0, &[1, 2]);
        for a in 0..4 {
            assert!(!a2a.neighbors(a).0.contains(&a));
            assert!(a2a.neighbors(a).1.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn graph_files_roundtrip_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let log = random_log(&mut rng, 20, 8, 60);
        let seg = SegmentFeatures {
            segment_id: "s".into(),
            author_id: "a3".into(),
            visual: Matrix::from_fn(3, 4, |r, c| (r * 4 + c) as f32 * 0.37),
            speech: Matrix::filled(1, 4, -1.25),
            text: Matrix::filled(1, 4, 1e-7),
        };
        let table: FeatureTable = [("s".to_string(), seg)].into_iter().collect();
        let g = build_u2a(&log, &table).unwrap();
        let mut buf = Vec::new();
        g.write(&mut buf).unwrap();
        let back = BipartiteGraph::read(&mut Cursor::new(&buf)).unwrap();
        assert_eq!(back, g);
        let mut again = Vec::new();
        back.write(&mut again).unwrap();
        assert_eq!(buf, again);

        let a2a = build_a2a(&g, &SwingConfig::default()).unwrap();
        let mut buf = Vec::new();
        a2a.write(&mut buf).unwrap();
        let back = AuthorGraph::read(&mut Cursor::new(&buf)).unwrap();
        assert_eq!(back, a2a);
        back.check_compatible(&g).unwrap();
        assert!(BipartiteGraph::read(&mut Cursor::new(&buf)).is_err());
        buf.truncate(buf.len() - 1);
        assert!(AuthorGraph::read(&mut Cursor::new(&buf)).is_err());
    }
}
