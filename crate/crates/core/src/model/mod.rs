//! The GTR predictor.
//!
//! A sample's logit is a two-layer rectifier perceptron over
//! `[user_emb, author_emb, h_u, h_a, mean(h_m)]`:
//!
//! - `user_emb`, `author_emb`: base id embeddings; ids unseen at
//!   initialization share one cold row per side.
//! - `h_u`: mean over the union of the user's u2a2u, u2a2u2a and u2a2a
//!   terminal neighbors; `h_a`: the same for the author's a2a and a2u2a.
//!   User rows are Θ rows, author rows are `[Θ_a, attr_a] · W_proj`.
//! - `h_m`: the author's query tokens attended over the fused segment.
//!
//! Ablation arms zero the `h_m` slot, the `h_u`/`h_a` slots, or both.

mod checkpoint;
pub mod metrics;
mod train;

use std::collections::{BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{AuthorGraph, BipartiteGraph, NodeRef};
use crate::graphcl::EmbeddingTable;
use crate::ingest::{FeatureTable, ImpressionSample, SegmentFeatures};
use crate::metapath::{expand_author, expand_user, terminal_union, ExpansionConfig};
use crate::mfq::{self, MfqParams, MfqVars, QueryBank, BLOCK_NAMES};
use crate::tensor::{sigmoid, Matrix, Scalar, Tape, Var};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use metrics::{auc, gauc, uauc, MetricsReport, UserAuc, UserGroup};
pub use train::{evaluate, train, write_trace_csv, EpochReport, TrainConfig};

/// Probabilities are kept in `[PROB_EPS, 1 - PROB_EPS]`.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    #[default]
    Full,
    NoMfq,
    NoGie,
    Base,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Full, Arm::NoMfq, Arm::NoGie, Arm::Base];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Full => "full",
            Arm::NoMfq => "no-mfq",
            Arm::NoGie => "no-gie",
            Arm::Base => "base",
        }
    }

    pub fn uses_mfq(self) -> bool {
        matches!(self, Arm::Full | Arm::NoGie)
    }

    pub fn uses_gie(self) -> bool {
        matches!(self, Arm::Full | Arm::NoMfq)
    }
}

impl std::str::FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown arm `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GtrConfig {
    /// Width of base embeddings and of Θ.
    pub d: usize,
    pub d_m: usize,
    pub hidden: usize,
    pub num_queries: usize,
    pub normalize_dissimilarity: bool,
    pub arm: Arm,
    /// Uniform init bound of base embeddings.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for GtrConfig {
    fn default() -> Self {
        Self {
            d: 64,
            d_m: crate::ingest::DEFAULT_D_M,
            hidden: 64,
            num_queries: 4,
            normalize_dissimilarity: false,
            arm: Arm::Full,
            init_scale: 0.05,
            seed: 0,
        }
    }
}

impl GtrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_m == 0 || self.hidden == 0 || self.num_queries == 0 {
            return Err(Error::Config("d, d_m, hidden and num_queries must be positive".into()));
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return Err(Error::Config("init_scale must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        4 * self.d + self.d_m
    }
}

/// Expanded neighbor unions per user and per author.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Neighborhoods {
    users: HashMap<String, Vec<NodeRef>>,
    authors: HashMap<String, Vec<NodeRef>>,
}

impl Neighborhoods {
    pub fn new() -> Self {
        Self::default()
    }

    /// Walks every metapath from every node of `g1`.
    pub fn expand(g1: &BipartiteGraph, g2: &AuthorGraph, cfg: &ExpansionConfig) -> Result<Self> {
        let mut out = Self::new();
        for u in g1.users() {
            let sets = expand_user(g1, g2, u, cfg)?;
            out.users.insert(u.clone(), terminal_union(&sets));
        }
        for a in g1.authors() {
            let sets = expand_author(g1, g2, a, cfg)?;
            out.authors.insert(a.clone(), terminal_union(&sets));
        }
        Ok(out)
    }

    pub fn insert_user(&mut self, id: String, nodes: Vec<NodeRef>) {
        self.users.insert(id, nodes);
    }

    pub fn insert_author(&mut self, id: String, nodes: Vec<NodeRef>) {
        self.authors.insert(id, nodes);
    }

    /// Empty for ids outside the graph.
    pub fn user(&self, id: &str) -> &[NodeRef] {
        self.users.get(id).map_or(&[], Vec::as_slice)
    }

    pub fn author(&self, id: &str) -> &[NodeRef] {
        self.authors.get(id).map_or(&[], Vec::as_slice)
    }

    pub fn has_user(&self, id: &str) -> bool {
        self.users.contains_key(id)
    }

    pub fn has_author(&self, id: &str) -> bool {
        self.authors.contains_key(id)
    }
}

/// Everything the predictor reads for one impression.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub user_id: &'a str,
    pub author_id: &'a str,
    pub features: &'a SegmentFeatures,
    pub user_side: &'a [NodeRef],
    pub author_side: &'a [NodeRef],
    pub label: u8,
}

impl<'a> Example<'a> {
    pub fn resolve(sample: &'a ImpressionSample, features: &'a FeatureTable, nb: &'a Neighborhoods) -> Result<Self> {
        let seg = features
            .get(&sample.segment_id)
            .ok_or_else(|| Error::UnknownSegment(sample.segment_id.clone()))?;
        Ok(Self {
            user_id: &sample.user_id,
            author_id: &sample.author_id,
            features: seg,
            user_side: nb.user(&sample.user_id),
            author_side: nb.author(&sample.author_id),
            label: sample.label,
        })
    }
}

pub fn resolve_all<'a>(
    samples: &'a [ImpressionSample],
    features: &'a FeatureTable,
    nb: &'a Neighborhoods,
) -> Result<Vec<Example<'a>>> {
    samples.iter().map(|s| Example::resolve(s, features, nb)).collect()
}

/// Pooled graph features of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpandedFeatures<T> {
    pub user_side: Vec<NodeRef>,
    pub author_side: Vec<NodeRef>,
    /// One composed row per entry of `user_side`.
    pub e_u: Vec<Vec<T>>,
    pub e_a: Vec<Vec<T>>,
    pub h_u: Vec<T>,
    pub h_a: Vec<T>,
}

/// All trainable state plus the frozen author attributes.
#[derive(Clone, Debug, PartialEq)]
pub struct GtrParams<T> {
    pub config: GtrConfig,
    user_ids: Vec<String>,
    user_index: HashMap<String, usize>,
    author_ids: Vec<String>,
    author_index: HashMap<String, usize>,
    /// `(users + 1) x d`; the last row is the cold row.
    pub user_emb: Matrix<T>,
    pub author_emb: Matrix<T>,
    theta_users: Vec<String>,
    theta_authors: Vec<String>,
    /// Θ rows, users first then authors, in graph index order.
    pub theta: Matrix<T>,
    /// `theta_authors x d_m`, not trained.
    pub author_attr: Matrix<T>,
    /// `(d + d_m) x d`.
    pub proj: Matrix<T>,
    pub mfq: MfqParams<T>,
    pub queries: QueryBank<T>,
    pub w1: Matrix<T>,
    pub b1: Matrix<T>,
    pub w2: Matrix<T>,
    pub b2: Matrix<T>,
}

fn index_of(ids: &[String]) -> HashMap<String, usize> {
    ids.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect()
}

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, r: usize, c: usize, bound: f64) -> Matrix<T> {
    Matrix::from_fn(r, c, |_, _| if bound > 0.0 { T::of(rng.random_range(-bound..bound)) } else { T::zero() })
}

impl<T: Scalar> GtrParams<T> {
    /// Base tables cover the ids seen in `samples`. Θ and the attributes come
    /// from `theta` and `g1`, which must share a node universe.
    pub fn init(
        config: GtrConfig,
        samples: &[ImpressionSample],
        theta: &EmbeddingTable,
        g1: &BipartiteGraph,
    ) -> Result<Self> {
        config.validate()?;
        theta.check_graph(g1)?;
        if theta.dim() != config.d {
            return Err(Error::Dimension {
                expected: config.d,
                found: theta.dim(),
            });
        }
        if g1.d_m() != 0 && g1.d_m() != config.d_m {
            return Err(Error::Dimension {
                expected: config.d_m,
                found: g1.d_m(),
            });
        }
        let users: Vec<String> = samples.iter().map(|s| s.user_id.clone()).collect::<BTreeSet<_>>().into_iter().collect();
        let authors: Vec<String> =
            samples.iter().map(|s| s.author_id.clone()).collect::<BTreeSet<_>>().into_iter().collect();

        let (d, d_m, h) = (config.d, config.d_m, config.hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let user_emb = uniform(&mut rng, users.len() + 1, d, config.init_scale);
        let author_emb = uniform(&mut rng, authors.len() + 1, d, config.init_scale);
        let attr = Matrix::from_fn(g1.num_authors(), d_m, |a, j| {
            if g1.d_m() == 0 {
                T::zero()
            } else {
                T::of(g1.author_attr(a as u32)[j] as f64)
            }
        });
        // Θ passes through unchanged at the start; attributes enter as learned.
        let proj = Matrix::from_fn(d + d_m, d, |r, c| if r == c { T::one() } else { T::zero() });
        let mfq = MfqParams::random(d_m, config.seed.wrapping_add(1));
        let queries = QueryBank::new(config.num_queries, d_m, config.seed.wrapping_add(2));
        let w1 = uniform(&mut rng, config.input_width(), h, (6.0 / (config.input_width() + h) as f64).sqrt());
        let w2 = uniform(&mut rng, h, 1, (6.0 / (h + 1) as f64).sqrt());
        Ok(Self {
            user_index: index_of(&users),
            author_index: index_of(&authors),
            user_ids: users,
            author_ids: authors,
            user_emb,
            author_emb,
            theta_users: theta.users().to_vec(),
            theta_authors: theta.authors().to_vec(),
            theta: Matrix::from_vec(theta.num_rows(), d, theta.data().iter().map(|&x| T::of(x as f64)).collect())?,
            author_attr: attr,
            proj,
            mfq,
            queries,
            w1,
            b1: Matrix::zeros(1, h),
            w2,
            b2: Matrix::zeros(1, 1),
            config,
        })
    }

    /// Sets every trainable value to zero.
    pub fn zero_all(&mut self) {
        for (_, m) in self.groups_mut() {
            m.data_mut().iter_mut().for_each(|x| *x = T::zero());
        }
    }

    pub fn user_ids(&self) -> &[String] {
        &self.user_ids
    }

    pub fn author_ids(&self) -> &[String] {
        &self.author_ids
    }

    pub fn theta_users(&self) -> &[String] {
        &self.theta_users
    }

    pub fn theta_authors(&self) -> &[String] {
        &self.theta_authors
    }

    pub fn is_cold_user(&self, id: &str) -> bool {
        !self.user_index.contains_key(id)
    }

    pub fn is_cold_author(&self, id: &str) -> bool {
        !self.author_index.contains_key(id)
    }

    fn user_row(&self, id: &str) -> usize {
        self.user_index.get(id).copied().unwrap_or(self.user_ids.len())
    }

    fn author_row(&self, id: &str) -> usize {
        self.author_index.get(id).copied().unwrap_or(self.author_ids.len())
    }

    /// Current Θ as a 32-bit table.
    pub fn theta_table(&self) -> Result<EmbeddingTable> {
        EmbeddingTable::new(
            self.theta_users.clone(),
            self.theta_authors.clone(),
            self.config.d,
            self.theta.data().iter().map(|x| x.as_f64() as f32).collect(),
        )
    }

    /// Named trainable blocks. Query banks appear in ascending author order
    /// and only once materialized.
    pub fn groups(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out = Vec::new();
        for (name, block) in BLOCK_NAMES.iter().zip(self.mfq.blocks()) {
            for (part, m) in ["query", "key", "value"].iter().zip(block.mats()) {
                out.push((format!("mfq.{name}.{part}"), m));
            }
        }
        out.push(("proj".into(), &self.proj));
        out.push(("head.w1".into(), &self.w1));
        out.push(("head.b1".into(), &self.b1));
        out.push(("head.w2".into(), &self.w2));
        out.push(("head.b2".into(), &self.b2));
        out.push(("user_emb".into(), &self.user_emb));
        out.push(("author_emb".into(), &self.author_emb));
        out.push(("theta".into(), &self.theta));
        for (a, m) in self.queries.entries() {
            out.push((format!("queries.{a}"), m));
        }
        out
    }

    pub fn groups_mut(&mut self) -> Vec<(String, &mut Matrix<T>)> {
        let mut out = Vec::new();
        for (name, block) in BLOCK_NAMES.iter().zip(self.mfq.blocks_mut()) {
            for (part, m) in ["query", "key", "value"].iter().zip(block.mats_mut()) {
                out.push((format!("mfq.{name}.{part}"), m));
            }
        }
        out.push(("proj".into(), &mut self.proj));
        out.push(("head.w1".into(), &mut self.w1));
        out.push(("head.b1".into(), &mut self.b1));
        out.push(("head.w2".into(), &mut self.w2));
        out.push(("head.b2".into(), &mut self.b2));
        out.push(("user_emb".into(), &mut self.user_emb));
        out.push(("author_emb".into(), &mut self.author_emb));
        out.push(("theta".into(), &mut self.theta));
        for (a, m) in self.queries.entries_mut() {
            out.push((format!("queries.{a}"), m));
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> GtrParams<U> {
        GtrParams {
            config: self.config.clone(),
            user_ids: self.user_ids.clone(),
            user_index: self.user_index.clone(),
            author_ids: self.author_ids.clone(),
            author_index: self.author_index.clone(),
            user_emb: self.user_emb.cast(),
            author_emb: self.author_emb.cast(),
            theta_users: self.theta_users.clone(),
            theta_authors: self.theta_authors.clone(),
            theta: self.theta.cast(),
            author_attr: self.author_attr.cast(),
            proj: self.proj.cast(),
            mfq: self.mfq.cast(),
            queries: self.queries.cast(),
            w1: self.w1.cast(),
            b1: self.b1.cast(),
            w2: self.w2.cast(),
            b2: self.b2.cast(),
        }
    }

    fn theta_row_of(&self, n: NodeRef) -> Result<usize> {
        match n {
            NodeRef::User(u) if (u as usize) < self.theta_users.len() => Ok(u as usize),
            NodeRef::Author(a) if (a as usize) < self.theta_authors.len() => Ok(self.theta_users.len() + a as usize),
            _ => Err(Error::UnknownNode(format!("{n:?}"))),
        }
    }

    /// One composed graph row: Θ for users, `[Θ_a, attr_a] · W_proj` for
    /// authors.
    fn composed_row(&self, n: NodeRef) -> Result<Vec<T>> {
        let r = self.theta_row_of(n)?;
        let theta = self.theta.row(r);
        match n {
            NodeRef::User(_) => Ok(theta.to_vec()),
            NodeRef::Author(a) => {
                let input: Vec<T> = theta.iter().chain(self.author_attr.row(a as usize)).copied().collect();
                let x = Matrix::from_vec(1, input.len(), input)?;
                Ok(x.matmul(&self.proj)?.into_data())
            }
        }
    }

    /// Composed rows of both neighbor sets and their means; an empty set
    /// pools to zeros.
    pub fn pool_expanded(&self, user_side: &[NodeRef], author_side: &[NodeRef]) -> Result<ExpandedFeatures<T>> {
        let d = self.config.d;
        let rows = |nodes: &[NodeRef]| nodes.iter().map(|&n| self.composed_row(n)).collect::<Result<Vec<_>>>();
        let mean = |rows: &[Vec<T>]| {
            let mut acc = vec![T::zero(); d];
            for r in rows {
                acc.iter_mut().zip(r).for_each(|(a, &x)| *a = *a + x);
            }
            if !rows.is_empty() {
                let n = T::of(rows.len() as f64);
                acc.iter_mut().for_each(|a| *a = *a / n);
            }
            acc
        };
        let (e_u, e_a) = (rows(user_side)?, rows(author_side)?);
        Ok(ExpandedFeatures {
            user_side: user_side.to_vec(),
            author_side: author_side.to_vec(),
            h_u: mean(&e_u),
            h_a: mean(&e_a),
            e_u,
            e_a,
        })
    }

    fn plan(&self, batch: &[Example<'_>]) -> Result<Plan<T>> {
        let mut plan = Plan::default();
        let mut user_local = HashMap::new();
        let mut author_local = HashMap::new();
        let mut tu_local = HashMap::new();
        let mut ta_local = HashMap::new();
        let mut bank_local = HashMap::new();
        let gie = self.config.arm.uses_gie();
        let mfq = self.config.arm.uses_mfq();
        let intern = |map: &mut HashMap<usize, usize>, list: &mut Vec<usize>, key: usize| {
            *map.entry(key).or_insert_with(|| {
                list.push(key);
                list.len() - 1
            })
        };

        // Θ users precede Θ authors in the local node matrix, so author
        // positions are fixed after all users are known.
        let mut raw_groups: Vec<(Vec<(bool, usize)>, Vec<(bool, usize)>)> = Vec::new();
        for ex in batch {
            if ex.features.d_m() != self.config.d_m {
                return Err(Error::Dimension {
                    expected: self.config.d_m,
                    found: ex.features.d_m(),
                });
            }
            let u = intern(&mut user_local, &mut plan.user_rows, self.user_row(ex.user_id));
            plan.user_pick.push(vec![u]);
            let a = intern(&mut author_local, &mut plan.author_rows, self.author_row(ex.author_id));
            plan.author_pick.push(vec![a]);
            plan.labels.push(T::of(ex.label as f64));

            if gie {
                let mut side = |nodes: &[NodeRef]| -> Result<Vec<(bool, usize)>> {
                    nodes
                        .iter()
                        .map(|&n| {
                            self.theta_row_of(n)?;
                            Ok(match n {
                                NodeRef::User(u) => (true, intern(&mut tu_local, &mut plan.theta_users, u as usize)),
                                NodeRef::Author(a) => (false, intern(&mut ta_local, &mut plan.theta_authors, a as usize)),
                            })
                        })
                        .collect()
                };
                let gu = side(ex.user_side)?;
                let ga = side(ex.author_side)?;
                raw_groups.push((gu, ga));
            }
            if mfq {
                let b = *bank_local.entry(ex.author_id.to_string()).or_insert_with(|| {
                    plan.bank_authors.push(ex.author_id.to_string());
                    plan.bank_authors.len() - 1
                });
                plan.bank_pick.push(b);
                let [v, s, t] = ex.features.modalities();
                plan.segments.push([v.cast(), s.cast(), t.cast()]);
            }
        }
        let m = plan.theta_users.len();
        let place = |g: &[(bool, usize)]| g.iter().map(|&(is_user, i)| if is_user { i } else { m + i }).collect();
        for (gu, ga) in raw_groups {
            plan.groups_u.push(place(&gu));
            plan.groups_a.push(place(&ga));
        }
        Ok(plan)
    }

    fn forward(&self, tape: &mut Tape<T>, plan: &Plan<T>, mode: Mode) -> Result<Bound> {
        let b = plan.labels.len();
        let d = self.config.d;
        let train = mode != Mode::Infer;
        let leaf = |tape: &mut Tape<T>, m: Matrix<T>, trainable: bool| {
            if trainable {
                tape.param(m)
            } else {
                tape.constant(m)
            }
        };

        let user_leaf = leaf(tape, gather(&self.user_emb, &plan.user_rows), train);
        let author_leaf = leaf(tape, gather(&self.author_emb, &plan.author_rows), train);
        let u_emb = tape.mean_gather(user_leaf, plan.user_pick.clone())?;
        let a_emb = tape.mean_gather(author_leaf, plan.author_pick.clone())?;

        let mut bound = Bound {
            mfq: mfq::bind(tape, &self.mfq, train),
            proj: None,
            w1: leaf(tape, self.w1.clone(), train),
            b1: leaf(tape, self.b1.clone(), train),
            w2: leaf(tape, self.w2.clone(), train),
            b2: leaf(tape, self.b2.clone(), train),
            user_leaf,
            author_leaf,
            theta_users: None,
            theta_authors: None,
            banks: Vec::new(),
            logits: user_leaf,
        };

        let (h_u, h_a) = if self.config.arm.uses_gie() {
            let train_theta = mode == Mode::TrainTheta;
            let mut parts = Vec::new();
            if !plan.theta_users.is_empty() {
                let v = leaf(tape, gather(&self.theta, &plan.theta_users), train_theta);
                bound.theta_users = Some(v);
                parts.push(v);
            }
            if !plan.theta_authors.is_empty() {
                let offset = self.theta_users.len();
                let rows: Vec<usize> = plan.theta_authors.iter().map(|&a| offset + a).collect();
                let ta = leaf(tape, gather(&self.theta, &rows), train_theta);
                bound.theta_authors = Some(ta);
                let attr = tape.constant(gather(&self.author_attr, &plan.theta_authors));
                let proj = leaf(tape, self.proj.clone(), train);
                bound.proj = Some(proj);
                let input = tape.concat_cols(&[ta, attr])?;
                parts.push(tape.matmul(input, proj)?);
            }
            if parts.is_empty() {
                let z = tape.constant(Matrix::zeros(b, d));
                (z, z)
            } else {
                let nodes = tape.concat_rows(&parts)?;
                (
                    tape.mean_gather(nodes, plan.groups_u.clone())?,
                    tape.mean_gather(nodes, plan.groups_a.clone())?,
                )
            }
        } else {
            let z = tape.constant(Matrix::zeros(b, d));
            (z, z)
        };

        let h_m = if self.config.arm.uses_mfq() {
            bound.banks = plan
                .bank_authors
                .iter()
                .map(|a| leaf(tape, self.queries.get(a).into_owned(), train))
                .collect();
            let mut rows = Vec::with_capacity(b);
            for (seg, &bank) in plan.segments.iter().zip(&plan.bank_pick) {
                let [v, s, t] = [0, 1, 2].map(|i| tape.constant(seg[i].clone()));
                let h_f = mfq::fuse(tape, v, s, t, &bound.mfq, self.config.normalize_dissimilarity)?;
                let h = mfq::query_attend(tape, bound.banks[bank], h_f, &bound.mfq)?;
                rows.push(tape.mean_rows(h)?);
            }
            tape.concat_rows(&rows)?
        } else {
            tape.constant(Matrix::zeros(b, self.config.d_m))
        };

        let x = tape.concat_cols(&[u_emb, a_emb, h_u, h_a, h_m])?;
        let z1 = tape.matmul(x, bound.w1)?;
        let z1 = tape.add_row(z1, bound.b1)?;
        let hidden = tape.relu(z1);
        let z2 = tape.matmul(hidden, bound.w2)?;
        bound.logits = tape.add_row(z2, bound.b2)?;
        Ok(bound)
    }

    /// Logits of a batch, one per example, in order.
    pub fn logits(&self, batch: &[Example<'_>]) -> Result<Vec<T>> {
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        let plan = self.plan(batch)?;
        let mut tape = Tape::new();
        let bound = self.forward(&mut tape, &plan, Mode::Infer)?;
        Ok(tape.value(bound.logits).data().to_vec())
    }

    /// Clamped gift-through-rate of one impression.
    pub fn predict(&self, ex: &Example<'_>) -> Result<T> {
        Ok(clamp_prob(sigmoid(self.logits(std::slice::from_ref(ex))?[0])))
    }

    /// Row-wise identical to calling [`predict`](Self::predict) per example.
    pub fn predict_batch(&self, batch: &[Example<'_>], chunk: usize) -> Result<Vec<T>> {
        let mut out = Vec::with_capacity(batch.len());
        for part in batch.chunks(chunk.max(1)) {
            out.extend(self.logits(part)?.into_iter().map(|z| clamp_prob(sigmoid(z))));
        }
        Ok(out)
    }

    /// Mean log-loss of a batch and the gradient of every parameter it
    /// touches.
    pub fn gradients(&self, batch: &[Example<'_>], train_theta: bool) -> Result<Gradients<T>> {
        if batch.is_empty() {
            return Err(Error::Degenerate("empty batch".into()));
        }
        let plan = self.plan(batch)?;
        let mut tape = Tape::new();
        let mode = if train_theta { Mode::TrainTheta } else { Mode::Train };
        let bound = self.forward(&mut tape, &plan, mode)?;
        let n = plan.labels.len();
        let eps = T::of(PROB_EPS);
        let p = tape.sigmoid(bound.logits);
        let y = tape.constant(Matrix::from_vec(n, 1, plan.labels.clone())?);
        let not_y = tape.constant(Matrix::from_vec(n, 1, plan.labels.iter().map(|&l| T::one() - l).collect())?);
        let log_p = tape.ln(p, eps);
        let q = tape.affine(p, -T::one(), T::one());
        let log_q = tape.ln(q, eps);
        let pos = tape.mul(y, log_p)?;
        let neg = tape.mul(not_y, log_q)?;
        let terms = tape.add(pos, neg)?;
        let total = tape.sum(terms);
        let loss = tape.scale(total, -T::one() / T::of(n as f64));
        tape.backward(loss)?;

        let grad = |v: Var| tape.grad(v).cloned().expect("trainable leaf");
        let mut dense = Vec::with_capacity(23);
        for block in bound.mfq.blocks() {
            dense.extend([grad(block.query), grad(block.key), grad(block.value)]);
        }
        dense.push(bound.proj.map_or_else(|| Matrix::zeros(self.proj.rows(), self.proj.cols()), grad));
        dense.extend([grad(bound.w1), grad(bound.b1), grad(bound.w2), grad(bound.b2)]);

        let rows = |v: Option<Var>, idx: &[usize]| match v {
            Some(v) => {
                let g = grad(v);
                idx.iter().enumerate().map(|(i, &r)| (r, g.row(i).to_vec())).collect()
            }
            None => Vec::new(),
        };
        let offset = self.theta_users.len();
        let author_theta_rows: Vec<usize> = plan.theta_authors.iter().map(|&a| offset + a).collect();
        let mut theta_rows = if train_theta { rows(bound.theta_users, &plan.theta_users) } else { Vec::new() };
        if train_theta {
            theta_rows.extend(rows(bound.theta_authors, &author_theta_rows));
        }
        Ok(Gradients {
            loss: tape.value(loss).get(0, 0),
            dense,
            user_rows: rows(Some(bound.user_leaf), &plan.user_rows),
            author_rows: rows(Some(bound.author_leaf), &plan.author_rows),
            theta_rows,
            banks: plan.bank_authors.iter().zip(&bound.banks).map(|(a, &v)| (a.clone(), grad(v))).collect(),
        })
    }

    /// Plain gradient step.
    pub fn apply(&mut self, g: &Gradients<T>, lr: T) {
        let step = |p: &mut [T], g: &[T]| p.iter_mut().zip(g).for_each(|(p, &g)| *p = *p - lr * g);
        let mut dense = Vec::with_capacity(23);
        for block in self.mfq.blocks_mut() {
            dense.extend(block.mats_mut());
        }
        dense.extend([&mut self.proj, &mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]);
        for (p, gm) in dense.into_iter().zip(&g.dense) {
            step(p.data_mut(), gm.data());
        }
        for (r, gr) in &g.user_rows {
            step(self.user_emb.row_mut(*r), gr);
        }
        for (r, gr) in &g.author_rows {
            step(self.author_emb.row_mut(*r), gr);
        }
        for (r, gr) in &g.theta_rows {
            step(self.theta.row_mut(*r), gr);
        }
        for (a, gm) in &g.banks {
            step(self.queries.get_or_init(a).data_mut(), gm.data());
        }
    }
}

fn clamp_prob<T: Scalar>(p: T) -> T {
    let eps = T::of(PROB_EPS);
    p.max(eps).min(T::one() - eps)
}

fn gather<T: Scalar>(m: &Matrix<T>, rows: &[usize]) -> Matrix<T> {
    let mut data = Vec::with_capacity(rows.len() * m.cols());
    for &r in rows {
        data.extend_from_slice(m.row(r));
    }
    Matrix::from_vec(rows.len(), m.cols(), data).expect("sized from rows")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Mode {
    Infer,
    Train,
    TrainTheta,
}

#[derive(Default)]
struct Plan<T> {
    user_rows: Vec<usize>,
    user_pick: Vec<Vec<usize>>,
    author_rows: Vec<usize>,
    author_pick: Vec<Vec<usize>>,
    theta_users: Vec<usize>,
    theta_authors: Vec<usize>,
    groups_u: Vec<Vec<usize>>,
    groups_a: Vec<Vec<usize>>,
    bank_authors: Vec<String>,
    bank_pick: Vec<usize>,
    segments: Vec<[Matrix<T>; 3]>,
    labels: Vec<T>,
}

struct Bound {
    mfq: MfqVars,
    proj: Option<Var>,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
    user_leaf: Var,
    author_leaf: Var,
    theta_users: Option<Var>,
    theta_authors: Option<Var>,
    banks: Vec<Var>,
    logits: Var,
}

/// Gradient of the mean batch log-loss. Dense blocks follow the order of
/// [`GtrParams::groups`] up to `head.b2`; table gradients are per touched row.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub loss: T,
    pub dense: Vec<Matrix<T>>,
    pub user_rows: Vec<(usize, Vec<T>)>,
    pub author_rows: Vec<(usize, Vec<T>)>,
    pub theta_rows: Vec<(usize, Vec<T>)>,
    pub banks: Vec<(String, Matrix<T>)>,
}

impl<T: Scalar> Gradients<T> {
    /// Full-size gradients aligned with `params.groups()`.
    pub fn to_dense(&self, params: &GtrParams<T>) -> Vec<(String, Matrix<T>)> {
        let groups = params.groups();
        let mut out: Vec<(String, Matrix<T>)> = groups
            .iter()
            .map(|(name, m)| (name.clone(), Matrix::zeros(m.rows(), m.cols())))
            .collect();
        for (slot, g) in out.iter_mut().zip(&self.dense) {
            slot.1 = g.clone();
        }
        let mut scatter = |name: &str, rows: &[(usize, Vec<T>)]| {
            if let Some((_, m)) = out.iter_mut().find(|(n, _)| n == name) {
                for (r, g) in rows {
                    m.row_mut(*r).iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y);
                }
            }
        };
        scatter("user_emb", &self.user_rows);
        scatter("author_emb", &self.author_rows);
        scatter("theta", &self.theta_rows);
        for (a, g) in &self.banks {
            let name = format!("queries.{a}");
            if let Some((_, m)) = out.iter_mut().find(|(n, _)| *n == name) {
                *m = g.clone();
            }
        }
        out
    }
}

/// `-(1/N) Σ [y ln p + (1 - y) ln(1 - p)]` with `p` clamped to
/// `[PROB_EPS, 1 - PROB_EPS]`.
pub fn batch_loss(batch: &[(f64, u8)]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Degenerate("empty batch".into()));
    }
    let total: f64 = batch
        .iter()
        .map(|&(p, y)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            if y == 1 {
                p.ln()
            } else {
                (1.0 - p).ln()
            }
        })
        .sum();
    Ok(-total / batch.len() as f64)
}
