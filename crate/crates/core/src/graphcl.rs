//! Contrastive pretraining of the node embedding table.
//!
//! Every epoch visits all nodes in shuffled order. A user anchor takes its
//! two-hop u2a2u neighbors as positives, an author anchor its a2u2a
//! neighbors; negatives are random nodes of the anchor's type. The anchor,
//! positive and negative rows take one SGD step on `CE + λ·InfoNCE`.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::error::{Error, Result};
use crate::graph::{AuthorGraph, BipartiteGraph, NodeRef};
use crate::metapath::{expand, ExpansionConfig, Metapath};
use crate::tensor::sigmoid;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"MMBE";
pub const EMBEDDING_VERSION: u32 = 1;

/// Θ: one row per graph node. User rows come first, then author rows, each
/// in the graph's index order.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    d: usize,
    users: Vec<String>,
    authors: Vec<String>,
    user_index: HashMap<String, u32>,
    author_index: HashMap<String, u32>,
    data: Vec<f32>,
}

impl EmbeddingTable {
    pub fn new(users: Vec<String>, authors: Vec<String>, d: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != (users.len() + authors.len()) * d {
            return Err(Error::Dimension {
                expected: (users.len() + authors.len()) * d,
                found: data.len(),
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidValue("non-finite embedding".into()));
        }
        let index = |ids: &[String]| ids.iter().enumerate().map(|(i, s)| (s.clone(), i as u32)).collect();
        Ok(Self {
            d,
            user_index: index(&users),
            author_index: index(&authors),
            users,
            authors,
            data,
        })
    }

    pub fn zeros_for(g: &BipartiteGraph, d: usize) -> Self {
        Self::new(g.users().to_vec(), g.authors().to_vec(), d, vec![0.0; g.num_nodes() * d])
            .expect("sized from graph")
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn num_rows(&self) -> usize {
        self.users.len() + self.authors.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn users(&self) -> &[String] {
        &self.users
    }

    pub fn authors(&self) -> &[String] {
        &self.authors
    }

    /// Dense row index of a node of the graph this table was built from.
    pub fn row_index(&self, n: NodeRef) -> usize {
        match n {
            NodeRef::User(u) => u as usize,
            NodeRef::Author(a) => self.users.len() + a as usize,
        }
    }

    pub fn row(&self, n: NodeRef) -> &[f32] {
        let r = self.row_index(n);
        &self.data[r * self.d..(r + 1) * self.d]
    }

    pub fn user_node(&self, id: &str) -> Option<NodeRef> {
        self.user_index.get(id).map(|&u| NodeRef::User(u))
    }

    pub fn author_node(&self, id: &str) -> Option<NodeRef> {
        self.author_index.get(id).map(|&a| NodeRef::Author(a))
    }

    pub fn node_id(&self, n: NodeRef) -> &str {
        match n {
            NodeRef::User(u) => &self.users[u as usize],
            NodeRef::Author(a) => &self.authors[a as usize],
        }
    }

    /// Same node universe and order as `g`.
    pub fn check_graph(&self, g: &BipartiteGraph) -> Result<()> {
        if self.users != g.users() || self.authors != g.authors() {
            return Err(Error::InvalidValue(
                "embedding table and graph cover different node universes".into(),
            ));
        }
        Ok(())
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        binio::write_magic(w, EMBEDDING_MAGIC, EMBEDDING_VERSION)?;
        binio::write_len(w, self.d)?;
        binio::write_u64(w, self.num_rows() as u64)?;
        for id in &self.users {
            binio::write_u8(w, 0)?;
            binio::write_str(w, id)?;
        }
        for id in &self.authors {
            binio::write_u8(w, 1)?;
            binio::write_str(w, id)?;
        }
        binio::write_f32s(w, &self.data)
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let version = binio::read_magic(r, EMBEDDING_MAGIC)?;
        if version != EMBEDDING_VERSION {
            return Err(Error::Format(format!("unsupported embedding version {version}")));
        }
        let d = binio::read_u32(r)? as usize;
        let rows = binio::read_u64(r)? as usize;
        let (mut users, mut authors) = (Vec::new(), Vec::new());
        for _ in 0..rows {
            match binio::read_u8(r)? {
                0 if authors.is_empty() => users.push(binio::read_str(r)?),
                1 => authors.push(binio::read_str(r)?),
                k => return Err(Error::Format(format!("bad node kind {k} in embedding dictionary"))),
            }
        }
        let data = binio::read_f32s(r, rows * d)?;
        binio::expect_eof(r)?;
        Self::new(users, authors, d, data)
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

/// Loss value together with its gradient w.r.t. every participating row.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub anchor: Vec<f64>,
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<f64>>,
}

impl LossGrad {
    fn zeros(d: usize, np: usize, nn: usize) -> Self {
        Self {
            loss: 0.0,
            anchor: vec![0.0; d],
            positives: vec![vec![0.0; d]; np],
            negatives: vec![vec![0.0; d]; nn],
        }
    }

    fn accumulate(&mut self, other: &LossGrad, weight: f64) {
        self.loss += weight * other.loss;
        let add = |a: &mut [f64], b: &[f64]| a.iter_mut().zip(b).for_each(|(x, y)| *x += weight * y);
        add(&mut self.anchor, &other.anchor);
        for (a, b) in self.positives.iter_mut().zip(&other.positives) {
            add(a, b);
        }
        for (a, b) in self.negatives.iter_mut().zip(&other.negatives) {
            add(a, b);
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += a * xi);
}

fn check_dims(anchor: &[f64], rows: &[&[f64]]) -> Result<()> {
    for r in rows {
        if r.len() != anchor.len() {
            return Err(Error::Dimension {
                expected: anchor.len(),
                found: r.len(),
            });
        }
    }
    Ok(())
}

/// InfoNCE with its gradient:
/// `-(1/|P|) Σ_i log(exp(a·p_i) / (exp(a·p_i) + Σ_j exp(a·n_j)))`.
pub fn info_nce_grad(anchor: &[f64], positives: &[&[f64]], negatives: &[&[f64]]) -> Result<LossGrad> {
    if positives.is_empty() {
        return Err(Error::Degenerate("InfoNCE needs at least one positive".into()));
    }
    check_dims(anchor, positives)?;
    check_dims(anchor, negatives)?;
    let d = anchor.len();
    let mut out = LossGrad::zeros(d, positives.len(), negatives.len());
    let neg_logits: Vec<f64> = negatives.iter().map(|n| dot(anchor, n)).collect();
    let scale = 1.0 / positives.len() as f64;
    for (i, p) in positives.iter().enumerate() {
        let s = dot(anchor, p);
        let max = neg_logits.iter().copied().fold(s, f64::max);
        let e0 = (s - max).exp();
        let en: Vec<f64> = neg_logits.iter().map(|&z| (z - max).exp()).collect();
        let total = e0 + en.iter().sum::<f64>();
        out.loss += scale * -((e0 / total).ln());
        // d term / d logits: softmax - onehot(0)
        let g0 = scale * (e0 / total - 1.0);
        axpy(&mut out.anchor, g0, p);
        axpy(&mut out.positives[i], g0, anchor);
        for (j, (n, e)) in negatives.iter().zip(&en).enumerate() {
            let gj = scale * e / total;
            axpy(&mut out.anchor, gj, n);
            axpy(&mut out.negatives[j], gj, anchor);
        }
    }
    Ok(out)
}

pub fn info_nce(anchor: &[f64], positives: &[&[f64]], negatives: &[&[f64]]) -> Result<f64> {
    info_nce_grad(anchor, positives, negatives).map(|g| g.loss)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Pairwise binary cross-entropy of `sigmoid(a·x)`, label 1 for positives and
/// 0 for negatives, averaged over all pairs; with its gradient.
pub fn ce_loss_grad(anchor: &[f64], positives: &[&[f64]], negatives: &[&[f64]]) -> Result<LossGrad> {
    let pairs = positives.len() + negatives.len();
    if pairs == 0 {
        return Err(Error::Degenerate("cross-entropy needs at least one pair".into()));
    }
    check_dims(anchor, positives)?;
    check_dims(anchor, negatives)?;
    let mut out = LossGrad::zeros(anchor.len(), positives.len(), negatives.len());
    let scale = 1.0 / pairs as f64;
    let groups = [(positives, 1.0), (negatives, 0.0)];
    for (gi, (rows, label)) in groups.iter().enumerate() {
        for (i, x) in rows.iter().enumerate() {
            let s = dot(anchor, x);
            out.loss += scale * if *label == 1.0 { softplus(-s) } else { softplus(s) };
            let g = scale * (sigmoid(s) - label);
            axpy(&mut out.anchor, g, x);
            let target = if gi == 0 { &mut out.positives[i] } else { &mut out.negatives[i] };
            axpy(target, g, anchor);
        }
    }
    Ok(out)
}

pub fn ce_loss(anchor: &[f64], positives: &[&[f64]], negatives: &[&[f64]]) -> Result<f64> {
    ce_loss_grad(anchor, positives, negatives).map(|g| g.loss)
}

/// `CE + λ·InfoNCE` and its gradient. Without positives only the CE term
/// remains.
pub fn combined_grad(anchor: &[f64], positives: &[&[f64]], negatives: &[&[f64]], lambda: f64) -> Result<LossGrad> {
    let mut total = ce_loss_grad(anchor, positives, negatives)?;
    if !positives.is_empty() && lambda != 0.0 {
        total.accumulate(&info_nce_grad(anchor, positives, negatives)?, lambda);
    }
    Ok(total)
}

/// One SGD step for a single anchor over a row-major `f64` table with row
/// width `d`. Returns the pre-step loss. Rows must be distinct.
pub fn anchor_step(
    table: &mut [f64],
    d: usize,
    anchor: usize,
    positives: &[usize],
    negatives: &[usize],
    lambda: f64,
    learning_rate: f64,
) -> Result<f64> {
    let row = |i: usize| table[i * d..(i + 1) * d].to_vec();
    let a = row(anchor);
    let p: Vec<Vec<f64>> = positives.iter().map(|&i| row(i)).collect();
    let n: Vec<Vec<f64>> = negatives.iter().map(|&i| row(i)).collect();
    let pr: Vec<&[f64]> = p.iter().map(Vec::as_slice).collect();
    let nr: Vec<&[f64]> = n.iter().map(Vec::as_slice).collect();
    let g = combined_grad(&a, &pr, &nr, lambda)?;
    let mut apply = |i: usize, grad: &[f64]| axpy(&mut table[i * d..(i + 1) * d], -learning_rate, grad);
    apply(anchor, &g.anchor);
    for (&i, gr) in positives.iter().zip(&g.positives) {
        apply(i, gr);
    }
    for (&i, gr) in negatives.iter().zip(&g.negatives) {
        apply(i, gr);
    }
    Ok(g.loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphClConfig {
    /// Embedding width.
    pub d: usize,
    /// Passes over all nodes.
    pub epochs: usize,
    pub learning_rate: f64,
    /// Weight of the InfoNCE term.
    pub lambda_nce: f64,
    pub negatives_per_anchor: usize,
    /// Rows start uniform in `±init_scale / sqrt(d)`.
    pub init_scale: f64,
    pub seed: u64,
    /// Positive-set expansion.
    pub expansion: ExpansionConfig,
}

impl Default for GraphClConfig {
    fn default() -> Self {
        Self {
            d: 64,
            epochs: 5,
            learning_rate: 0.05,
            lambda_nce: 1.0,
            negatives_per_anchor: 5,
            init_scale: 0.05,
            seed: 0,
            expansion: ExpansionConfig::default(),
        }
    }
}

impl GraphClConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Config("d must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if !(self.lambda_nce >= 0.0) {
            return Err(Error::Config("lambda_nce must be >= 0".into()));
        }
        if !(self.init_scale >= 0.0) {
            return Err(Error::Config("init_scale must be >= 0".into()));
        }
        self.expansion.validate()
    }
}

#[derive(Clone, Debug)]
pub struct Pretrained {
    pub table: EmbeddingTable,
    /// Mean per-anchor loss of every epoch.
    pub epoch_losses: Vec<f64>,
}

fn sample_negatives(
    rng: &mut ChaCha8Rng,
    pool: usize,
    k: usize,
    anchor: usize,
    positives: &HashSet<usize>,
) -> Vec<usize> {
    let available = pool - 1 - positives.len();
    let k = k.min(available);
    if k == 0 {
        return Vec::new();
    }
    if available <= 2 * k {
        let cands: Vec<usize> = (0..pool).filter(|i| *i != anchor && !positives.contains(i)).collect();
        return cands.choose_multiple(rng, k).copied().collect();
    }
    let mut picked = Vec::with_capacity(k);
    while picked.len() < k {
        let i = rng.random_range(0..pool);
        if i != anchor && !positives.contains(&i) && !picked.contains(&i) {
            picked.push(i);
        }
    }
    picked
}

/// Trains Θ over both graphs. Single-threaded and deterministic under
/// `cfg.seed`.
pub fn pretrain(g1: &BipartiteGraph, g2: &AuthorGraph, cfg: &GraphClConfig) -> Result<Pretrained> {
    cfg.validate()?;
    g2.check_compatible(g1)?;
    if g1.num_nodes() == 0 {
        return Err(Error::Degenerate("graph has no nodes".into()));
    }
    let d = cfg.d;
    let nu = g1.num_users();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bound = cfg.init_scale / (d as f64).sqrt();
    let mut theta: Vec<f64> = (0..g1.num_nodes() * d)
        .map(|_| if bound > 0.0 { rng.random_range(-bound..=bound) } else { 0.0 })
        .collect();

    let nodes: Vec<NodeRef> = (0..nu as u32)
        .map(NodeRef::User)
        .chain((0..g1.num_authors() as u32).map(NodeRef::Author))
        .collect();
    let row = |n: NodeRef| match n {
        NodeRef::User(u) => u as usize,
        NodeRef::Author(a) => nu + a as usize,
    };
    let positives: Vec<Vec<usize>> = nodes
        .iter()
        .map(|&n| {
            let mp = if n.is_user() { Metapath::U2A2U } else { Metapath::A2U2A };
            Ok(expand(g1, g2, n, mp, &cfg.expansion)?.terminal().iter().map(|&p| row(p)).collect())
        })
        .collect::<Result<_>>()?;

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut order = nodes.clone();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut count) = (0.0, 0usize);
        for &n in &order {
            let anchor = row(n);
            let pos = &positives[anchor];
            if pos.is_empty() {
                continue;
            }
            // negatives are drawn within the anchor's type, in type-local indices
            let (offset, pool) = if n.is_user() { (0, nu) } else { (nu, g1.num_authors()) };
            let pos_local: HashSet<usize> = pos.iter().map(|&p| p - offset).collect();
            let neg: Vec<usize> = sample_negatives(&mut rng, pool, cfg.negatives_per_anchor, anchor - offset, &pos_local)
                .into_iter()
                .map(|i| i + offset)
                .collect();
            total += anchor_step(&mut theta, d, anchor, pos, &neg, cfg.lambda_nce, cfg.learning_rate)?;
            count += 1;
        }
        epoch_losses.push(if count == 0 { 0.0 } else { total / count as f64 });
    }

    let table = EmbeddingTable::new(
        g1.users().to_vec(),
        g1.authors().to_vec(),
        d,
        theta.iter().map(|&x| x as f32).collect(),
    )?;
    Ok(Pretrained { table, epoch_losses })
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa.sqrt() * bb.sqrt())
    }
}
