//! Multimodal fusion with learnable queries.
//!
//! For a segment with visual, speech and text token matrices:
//!
//! 1. `corr(A, B) = row_softmax(A · Bᵀ)` scores every token of `A` against
//!    the tokens of `B`.
//! 2. The orthogonal projection keeps what the other two modalities add:
//!    `Y = X + (1 - corr(X, O1)) · O1 + (1 - corr(X, O2)) · O2`.
//! 3. Each modality cross-attends from its raw tokens to its projected
//!    tokens, the three results are stacked along the sequence axis and
//!    mixed by self-attention into `h_f`.
//! 4. The author's `N` query tokens cross-attend to `h_f` and then
//!    self-attend, giving `h_m` (`N x d_m`).
//!
//! Attention is single-head `softmax(QKᵀ/√d_m)·V` without biases; the
//! correlation in step 1 is unscaled.

use std::borrow::Cow;
use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Scalar, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MfqConfig {
    pub d_m: usize,
    /// Learnable query tokens per author.
    pub num_queries: usize,
    /// Divide each `(1 - corr) · O` term by `max(L_O - 1, 1)`.
    pub normalize_dissimilarity: bool,
    pub seed: u64,
}

impl Default for MfqConfig {
    fn default() -> Self {
        Self {
            d_m: crate::ingest::DEFAULT_D_M,
            num_queries: 4,
            normalize_dissimilarity: false,
            seed: 0,
        }
    }
}

/// Query/key/value projections of one attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnWeights<T> {
    pub query: Matrix<T>,
    pub key: Matrix<T>,
    pub value: Matrix<T>,
}

impl<T: Scalar> AttnWeights<T> {
    fn random(rng: &mut ChaCha8Rng, d: usize) -> Self {
        // Xavier-style uniform bound for a square projection.
        let bound = (3.0 / d as f64).sqrt();
        let mut m = || Matrix::from_fn(d, d, |_, _| T::of(rng.random_range(-bound..bound)));
        Self {
            query: m(),
            key: m(),
            value: m(),
        }
    }

    fn filled(d: usize, f: impl Fn(usize) -> Matrix<T>) -> Self {
        Self {
            query: f(d),
            key: f(d),
            value: f(d),
        }
    }

    pub fn mats(&self) -> [&Matrix<T>; 3] {
        [&self.query, &self.key, &self.value]
    }

    pub fn mats_mut(&mut self) -> [&mut Matrix<T>; 3] {
        [&mut self.query, &mut self.key, &mut self.value]
    }
}

/// All square `d_m x d_m` projections of the fusion module.
#[derive(Clone, Debug, PartialEq)]
pub struct MfqParams<T> {
    pub visual: AttnWeights<T>,
    pub speech: AttnWeights<T>,
    pub text: AttnWeights<T>,
    pub fusion: AttnWeights<T>,
    pub query_cross: AttnWeights<T>,
    pub query_self: AttnWeights<T>,
}

pub const BLOCK_NAMES: [&str; 6] = ["visual", "speech", "text", "fusion", "query_cross", "query_self"];

impl<T: Scalar> MfqParams<T> {
    pub fn random(d_m: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            visual: AttnWeights::random(&mut rng, d_m),
            speech: AttnWeights::random(&mut rng, d_m),
            text: AttnWeights::random(&mut rng, d_m),
            fusion: AttnWeights::random(&mut rng, d_m),
            query_cross: AttnWeights::random(&mut rng, d_m),
            query_self: AttnWeights::random(&mut rng, d_m),
        }
    }

    pub fn zeros(d_m: usize) -> Self {
        Self::uniform_with(d_m, Matrix::zeros_sq)
    }

    pub fn identity(d_m: usize) -> Self {
        Self::uniform_with(d_m, Matrix::identity)
    }

    fn uniform_with(d_m: usize, f: fn(usize) -> Matrix<T>) -> Self {
        Self {
            visual: AttnWeights::filled(d_m, f),
            speech: AttnWeights::filled(d_m, f),
            text: AttnWeights::filled(d_m, f),
            fusion: AttnWeights::filled(d_m, f),
            query_cross: AttnWeights::filled(d_m, f),
            query_self: AttnWeights::filled(d_m, f),
        }
    }

    pub fn d_m(&self) -> usize {
        self.visual.query.rows()
    }

    pub fn blocks(&self) -> [&AttnWeights<T>; 6] {
        [&self.visual, &self.speech, &self.text, &self.fusion, &self.query_cross, &self.query_self]
    }

    pub fn blocks_mut(&mut self) -> [&mut AttnWeights<T>; 6] {
        [
            &mut self.visual,
            &mut self.speech,
            &mut self.text,
            &mut self.fusion,
            &mut self.query_cross,
            &mut self.query_self,
        ]
    }

    pub fn cast<U: Scalar>(&self) -> MfqParams<U> {
        let c = |w: &AttnWeights<T>| AttnWeights {
            query: w.query.cast(),
            key: w.key.cast(),
            value: w.value.cast(),
        };
        MfqParams {
            visual: c(&self.visual),
            speech: c(&self.speech),
            text: c(&self.text),
            fusion: c(&self.fusion),
            query_cross: c(&self.query_cross),
            query_self: c(&self.query_self),
        }
    }
}

impl<T: Scalar> Matrix<T> {
    fn zeros_sq(d: usize) -> Self {
        Self::zeros(d, d)
    }
}

/// Per-author learnable query tokens. Authors without a stored bank get a
/// deterministic random bank derived from the bank seed and their id.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryBank<T> {
    num_queries: usize,
    d_m: usize,
    seed: u64,
    banks: HashMap<String, Matrix<T>>,
}

fn id_hash(id: &str) -> u64 {
    // FNV-1a
    id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl<T: Scalar> QueryBank<T> {
    pub fn new(num_queries: usize, d_m: usize, seed: u64) -> Self {
        Self {
            num_queries,
            d_m,
            seed,
            banks: HashMap::new(),
        }
    }

    pub fn num_queries(&self) -> usize {
        self.num_queries
    }

    pub fn d_m(&self) -> usize {
        self.d_m
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.banks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.banks.is_empty()
    }

    /// Uniform in `±0.05/√d_m`, keyed by author id.
    pub fn initial(&self, author: &str) -> Matrix<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ id_hash(author));
        let bound = 0.05 / (self.d_m as f64).sqrt();
        Matrix::from_fn(self.num_queries, self.d_m, |_, _| T::of(rng.random_range(-bound..bound)))
    }

    /// Stored bank, or the initial bank without storing it.
    pub fn get(&self, author: &str) -> Cow<'_, Matrix<T>> {
        match self.banks.get(author) {
            Some(m) => Cow::Borrowed(m),
            None => Cow::Owned(self.initial(author)),
        }
    }

    pub fn get_or_init(&mut self, author: &str) -> &mut Matrix<T> {
        if !self.banks.contains_key(author) {
            let init = self.initial(author);
            self.banks.insert(author.to_string(), init);
        }
        self.banks.get_mut(author).unwrap()
    }

    pub fn insert(&mut self, author: String, bank: Matrix<T>) -> Result<()> {
        if bank.shape() != (self.num_queries, self.d_m) {
            return Err(Error::Shape {
                op: "query_bank",
                lhs: (self.num_queries, self.d_m),
                rhs: bank.shape(),
            });
        }
        self.banks.insert(author, bank);
        Ok(())
    }

    /// Banks in ascending author order.
    pub fn entries(&self) -> Vec<(&String, &Matrix<T>)> {
        let mut v: Vec<_> = self.banks.iter().collect();
        v.sort_by(|a, b| a.0.cmp(b.0));
        v
    }

    pub fn entries_mut(&mut self) -> Vec<(&String, &mut Matrix<T>)> {
        let mut v: Vec<_> = self.banks.iter_mut().collect();
        v.sort_by(|a, b| a.0.cmp(b.0));
        v
    }

    pub fn cast<U: Scalar>(&self) -> QueryBank<U> {
        QueryBank {
            num_queries: self.num_queries,
            d_m: self.d_m,
            seed: self.seed,
            banks: self.banks.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

/// Attention weights placed on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AttnVars {
    pub query: Var,
    pub key: Var,
    pub value: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct MfqVars {
    pub visual: AttnVars,
    pub speech: AttnVars,
    pub text: AttnVars,
    pub fusion: AttnVars,
    pub query_cross: AttnVars,
    pub query_self: AttnVars,
}

impl MfqVars {
    pub fn blocks(&self) -> [AttnVars; 6] {
        [self.visual, self.speech, self.text, self.fusion, self.query_cross, self.query_self]
    }
}

/// Puts every projection on the tape, trainable if `trainable`.
pub fn bind<T: Scalar>(tape: &mut Tape<T>, params: &MfqParams<T>, trainable: bool) -> MfqVars {
    let mut put = |w: &AttnWeights<T>| {
        let mut leaf = |m: &Matrix<T>| if trainable { tape.param(m.clone()) } else { tape.constant(m.clone()) };
        AttnVars {
            query: leaf(&w.query),
            key: leaf(&w.key),
            value: leaf(&w.value),
        }
    };
    MfqVars {
        visual: put(&params.visual),
        speech: put(&params.speech),
        text: put(&params.text),
        fusion: put(&params.fusion),
        query_cross: put(&params.query_cross),
        query_self: put(&params.query_self),
    }
}

/// `row_softmax(a · bᵀ)`, shape `L_a x L_b`.
pub fn correlation<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let (da, db) = (tape.shape(a).1, tape.shape(b).1);
    if da != db {
        return Err(Error::Dimension { expected: da, found: db });
    }
    let bt = tape.transpose(b);
    let scores = tape.matmul(a, bt)?;
    Ok(tape.row_softmax(scores))
}

/// `target + Σ_o (1 - corr(target, o)) · o` over the two other modalities.
pub fn orthogonal_project<T: Scalar>(
    tape: &mut Tape<T>,
    target: Var,
    other1: Var,
    other2: Var,
    normalize: bool,
) -> Result<Var> {
    let mut acc = target;
    for other in [other1, other2] {
        let corr = correlation(tape, target, other)?;
        let dissim = tape.affine(corr, -T::one(), T::one());
        let mut term = tape.matmul(dissim, other)?;
        if normalize {
            let l = tape.shape(other).0;
            term = tape.scale(term, T::one() / T::of((l.max(2) - 1) as f64));
        }
        acc = tape.add(acc, term)?;
    }
    Ok(acc)
}

/// `softmax((q_in W_q)(kv_in W_k)ᵀ / √d) (kv_in W_v)`.
pub fn attention<T: Scalar>(tape: &mut Tape<T>, q_in: Var, kv_in: Var, w: &AttnVars) -> Result<Var> {
    let q = tape.matmul(q_in, w.query)?;
    let k = tape.matmul(kv_in, w.key)?;
    let v = tape.matmul(kv_in, w.value)?;
    let kt = tape.transpose(k);
    let scores = tape.matmul(q, kt)?;
    let d = tape.shape(q).1;
    let scaled = tape.scale(scores, T::one() / T::of(d as f64).sqrt());
    let attn = tape.row_softmax(scaled);
    tape.matmul(attn, v)
}

/// `h_f`, shape `(L_v + L_s + L_t) x d_m`.
pub fn fuse<T: Scalar>(
    tape: &mut Tape<T>,
    visual: Var,
    speech: Var,
    text: Var,
    vars: &MfqVars,
    normalize: bool,
) -> Result<Var> {
    let y_v = orthogonal_project(tape, visual, speech, text, normalize)?;
    let y_s = orthogonal_project(tape, speech, text, visual, normalize)?;
    let y_t = orthogonal_project(tape, text, speech, visual, normalize)?;
    let h_v = attention(tape, visual, y_v, &vars.visual)?;
    let h_s = attention(tape, speech, y_s, &vars.speech)?;
    let h_t = attention(tape, text, y_t, &vars.text)?;
    let stacked = tape.concat_rows(&[h_v, h_s, h_t])?;
    attention(tape, stacked, stacked, &vars.fusion)
}

/// `h_m`, shape `N x d_m`.
pub fn query_attend<T: Scalar>(tape: &mut Tape<T>, queries: Var, h_f: Var, vars: &MfqVars) -> Result<Var> {
    let h = attention(tape, queries, h_f, &vars.query_cross)?;
    attention(tape, h, h, &vars.query_self)
}

/// Forward pass outside training: fuses one segment and extracts the
/// author's query summary.
pub fn forward<T: Scalar>(
    params: &MfqParams<T>,
    bank: &QueryBank<T>,
    author: &str,
    modalities: [&Matrix<T>; 3],
    normalize: bool,
) -> Result<Matrix<T>> {
    let mut tape = Tape::new();
    let vars = bind(&mut tape, params, false);
    let [v, s, t] = modalities.map(|m| tape.constant(m.clone()));
    let h_f = fuse(&mut tape, v, s, t, &vars, normalize)?;
    let q = tape.constant(bank.get(author).into_owned());
    let h_m = query_attend(&mut tape, q, h_f, &vars)?;
    Ok(tape.value(h_m).clone())
}
