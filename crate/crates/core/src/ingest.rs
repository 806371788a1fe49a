//! Donation/impression logs, segment multimodal features and planted
//! synthetic datasets.
//!
//! Logs are UTF-8 TSV with `\n` line endings:
//!
//! ```text
//! donations:   user_id  author_id  amount     timestamp
//! impressions: user_id  author_id  segment_id label timestamp
//! ```
//!
//! Feature files start with `MMBF`, a `u32` version, then one record per
//! segment: length-prefixed segment id, length-prefixed author id, and for
//! each of visual/speech/text a `u32` token count, a `u32` width and the
//! row-major little-endian `f32` tokens.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Matrix};

pub const FEATURE_MAGIC: &[u8; 4] = b"MMBF";
pub const FEATURE_VERSION: u32 = 1;

/// Default modality width after input projection.
pub const DEFAULT_D_M: usize = 64;
/// Frames sampled per segment.
pub const DEFAULT_FRAMES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DonationEvent {
    pub user_id: String,
    pub author_id: String,
    pub amount: f64,
    pub timestamp: i64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImpressionSample {
    pub user_id: String,
    pub author_id: String,
    pub segment_id: String,
    pub label: u8,
    pub timestamp: i64,
}

/// Token sequences for one segment. All three matrices share the width `d_m`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentFeatures {
    pub segment_id: String,
    pub author_id: String,
    pub visual: Matrix<f32>,
    pub speech: Matrix<f32>,
    pub text: Matrix<f32>,
}

impl SegmentFeatures {
    pub fn d_m(&self) -> usize {
        self.visual.cols()
    }

    pub fn modalities(&self) -> [&Matrix<f32>; 3] {
        [&self.visual, &self.speech, &self.text]
    }

    fn validate(&self) -> Result<()> {
        let d = self.d_m();
        for m in self.modalities() {
            if m.cols() != d {
                return Err(Error::Dimension {
                    expected: d,
                    found: m.cols(),
                });
            }
            if m.rows() == 0 {
                return Err(Error::InvalidValue(format!(
                    "segment {} has an empty modality",
                    self.segment_id
                )));
            }
            if !m.is_finite() {
                return Err(Error::InvalidValue(format!(
                    "segment {} has non-finite features",
                    self.segment_id
                )));
            }
        }
        Ok(())
    }
}

/// Segment id → features, ordered so serialization is canonical.
pub type FeatureTable = BTreeMap<String, SegmentFeatures>;

fn parse_err(path: &Path, line: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        column,
        message: message.into(),
    }
}

fn split_fields<'a>(path: &Path, lineno: usize, line: &'a str, n: usize) -> Result<Vec<&'a str>> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != n {
        return Err(parse_err(
            path,
            lineno,
            fields.len().min(n) + 1,
            format!("expected {n} tab-separated columns, found {}", fields.len()),
        ));
    }
    for (i, f) in fields.iter().enumerate() {
        if f.is_empty() {
            return Err(parse_err(path, lineno, i + 1, "empty field"));
        }
    }
    Ok(fields)
}

fn parse_field<T: std::str::FromStr>(path: &Path, lineno: usize, col: usize, s: &str, what: &str) -> Result<T> {
    s.parse()
        .map_err(|_| parse_err(path, lineno, col, format!("invalid {what}: {s:?}")))
}

fn lines(path: &Path) -> Result<impl Iterator<Item = (usize, std::io::Result<String>)>> {
    let file = File::open(path)?;
    Ok(BufReader::new(file).lines().enumerate().map(|(i, l)| (i + 1, l)))
}

/// Reads a donation TSV. Blank lines are skipped; anything else must be a
/// well-formed record with a finite, non-negative amount.
pub fn parse_donations(path: impl AsRef<Path>) -> Result<Vec<DonationEvent>> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for (lineno, line) in lines(path)? {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let f = split_fields(path, lineno, &line, 4)?;
        let amount: f64 = parse_field(path, lineno, 3, f[2], "amount")?;
        if !amount.is_finite() {
            return Err(parse_err(path, lineno, 3, "amount must be finite"));
        }
        if amount < 0.0 {
            return Err(parse_err(path, lineno, 3, format!("negative amount {amount}")));
        }
        out.push(DonationEvent {
            user_id: f[0].to_string(),
            author_id: f[1].to_string(),
            amount,
            timestamp: parse_field(path, lineno, 4, f[3], "timestamp")?,
        });
    }
    Ok(out)
}

pub fn parse_impressions(path: impl AsRef<Path>) -> Result<Vec<ImpressionSample>> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for (lineno, line) in lines(path)? {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let f = split_fields(path, lineno, &line, 5)?;
        let label: u8 = match f[3] {
            "0" => 0,
            "1" => 1,
            other => return Err(parse_err(path, lineno, 4, format!("label must be 0 or 1, found {other:?}"))),
        };
        out.push(ImpressionSample {
            user_id: f[0].to_string(),
            author_id: f[1].to_string(),
            segment_id: f[2].to_string(),
            label,
            timestamp: parse_field(path, lineno, 5, f[4], "timestamp")?,
        });
    }
    Ok(out)
}

pub fn write_donations<W: Write>(w: &mut W, events: &[DonationEvent]) -> Result<()> {
    for e in events {
        writeln!(w, "{}\t{}\t{}\t{}", e.user_id, e.author_id, e.amount, e.timestamp)?;
    }
    Ok(())
}

pub fn write_impressions<W: Write>(w: &mut W, samples: &[ImpressionSample]) -> Result<()> {
    for s in samples {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}",
            s.user_id, s.author_id, s.segment_id, s.label, s.timestamp
        )?;
    }
    Ok(())
}

pub fn write_features<W: Write>(w: &mut W, table: &FeatureTable) -> Result<()> {
    binio::write_magic(w, FEATURE_MAGIC, FEATURE_VERSION)?;
    for seg in table.values() {
        seg.validate()?;
        binio::write_str(w, &seg.segment_id)?;
        binio::write_str(w, &seg.author_id)?;
        for m in seg.modalities() {
            binio::write_len(w, m.rows())?;
            binio::write_len(w, m.cols())?;
            binio::write_f32s(w, m.data())?;
        }
    }
    Ok(())
}

pub fn save_features(path: impl AsRef<Path>, table: &FeatureTable) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_features(&mut w, table)?;
    w.flush()?;
    Ok(())
}

/// Decodes a feature stream, rejecting any modality whose width differs
/// from `d_m`.
pub fn read_features<R: BufRead>(r: &mut R, d_m: usize) -> Result<FeatureTable> {
    let version = binio::read_magic(r, FEATURE_MAGIC)?;
    if version != FEATURE_VERSION {
        return Err(Error::Format(format!("unsupported feature file version {version}")));
    }
    let mut table = FeatureTable::new();
    while !r.fill_buf()?.is_empty() {
        let segment_id = binio::read_str(r)?;
        let author_id = binio::read_str(r)?;
        let mut mats = Vec::with_capacity(3);
        for _ in 0..3 {
            let rows = binio::read_u32(r)? as usize;
            let cols = binio::read_u32(r)? as usize;
            if cols != d_m {
                return Err(Error::Dimension {
                    expected: d_m,
                    found: cols,
                });
            }
            let data = binio::read_f32s(r, rows * cols)?;
            mats.push(Matrix::from_vec(rows, cols, data)?);
        }
        let text = mats.pop().unwrap();
        let speech = mats.pop().unwrap();
        let visual = mats.pop().unwrap();
        let seg = SegmentFeatures {
            segment_id: segment_id.clone(),
            author_id,
            visual,
            speech,
            text,
        };
        seg.validate()?;
        if table.insert(segment_id.clone(), seg).is_some() {
            return Err(Error::Format(format!("duplicate segment id {segment_id}")));
        }
    }
    Ok(table)
}

pub fn load_features(path: impl AsRef<Path>, d_m: usize) -> Result<FeatureTable> {
    let mut r = BufReader::new(File::open(path)?);
    read_features(&mut r, d_m)
}

/// Parameters of the planted-community generator.
///
/// Authors are split round-robin into `num_communities` communities, every
/// user prefers one community, and both donations and gift labels follow the
/// preference. Identical specs produce identical datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_users: usize,
    pub num_authors: usize,
    pub num_communities: usize,
    pub affinity_noise: f64,
    /// Probability that a user donates to a given author of their preferred community.
    pub donation_rate: f64,
    /// Target base rate of positive impression labels.
    pub gift_rate: f64,
    pub seed: u64,
    pub impressions_per_user: usize,
    pub d_m: usize,
    pub frames: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_users: 200,
            num_authors: 20,
            num_communities: 2,
            affinity_noise: 0.1,
            donation_rate: 0.3,
            gift_rate: 0.3,
            seed: 7,
            impressions_per_user: 10,
            d_m: DEFAULT_D_M,
            frames: DEFAULT_FRAMES,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_users", self.num_users),
            ("num_authors", self.num_authors),
            ("num_communities", self.num_communities),
            ("d_m", self.d_m),
            ("frames", self.frames),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.num_communities > self.num_authors {
            return Err(Error::Config(format!(
                "num_communities ({}) exceeds num_authors ({})",
                self.num_communities, self.num_authors
            )));
        }
        if !(self.affinity_noise >= 0.0 && self.affinity_noise.is_finite()) {
            return Err(Error::Config("affinity_noise must be finite and >= 0".into()));
        }
        for (name, p) in [("donation_rate", self.donation_rate), ("gift_rate", self.gift_rate)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(self.gift_rate > 0.0 && self.gift_rate < 1.0) {
            return Err(Error::Config("gift_rate must lie strictly inside (0, 1)".into()));
        }
        Ok(())
    }
}

/// Generated logs plus the planted truth used to check recovery.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub donations: Vec<DonationEvent>,
    pub impressions: Vec<ImpressionSample>,
    pub features: FeatureTable,
    /// user id → preferred community.
    pub user_community: BTreeMap<String, usize>,
    /// author id → community.
    pub author_community: BTreeMap<String, usize>,
    pub centroids: Vec<Vec<f32>>,
    /// Intercept of the label model, solved to hit `gift_rate`.
    pub label_bias: f64,
}

impl SyntheticDataset {
    /// TSV and feature bytes in canonical order; used for determinism checks.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        write_donations(&mut buf, &self.donations)?;
        write_impressions(&mut buf, &self.impressions)?;
        write_features(&mut buf, &self.features)?;
        Ok(buf)
    }

    pub fn write_to_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(File::create(dir.join("donations.tsv"))?);
        write_donations(&mut w, &self.donations)?;
        w.flush()?;
        let mut w = BufWriter::new(File::create(dir.join("impressions.tsv"))?);
        write_impressions(&mut w, &self.impressions)?;
        w.flush()?;
        save_features(dir.join("features.mmbf"), &self.features)
    }
}

/// Donation probability toward a non-preferred author, relative to `donation_rate`.
const OFF_COMMUNITY_LEAK: f64 = 0.01;
const MATCH_WEIGHT: f64 = 2.0;
const ALIGNMENT_WEIGHT: f64 = 1.0;
const BASE_TIMESTAMP: i64 = 1_700_000_000;

pub fn user_id(i: usize) -> String {
    format!("u{i:06}")
}

pub fn author_id(i: usize) -> String {
    format!("a{i:06}")
}

/// Draws a planted-community dataset.
///
/// Segment tokens are the author's community centroid plus Gaussian noise of
/// scale `affinity_noise`. A segment's alignment is the standardized
/// projection of its mean token deviation onto the community direction, so it
/// varies per segment and is visible only through content. Labels follow
/// `sigmoid(2 * match + alignment + b)` where `match` says whether the author
/// sits in the user's preferred community and `b` is solved so the mean
/// probability equals `gift_rate`. Each impression yields one sample.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.num_communities;
    let d = spec.d_m;

    let centroids: Vec<Vec<f32>> = (0..k)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter().map(|x| (x / norm) as f32).collect()
        })
        .collect();

    let author_comm: Vec<usize> = (0..spec.num_authors).map(|a| a % k).collect();
    let user_pref: Vec<usize> = (0..spec.num_users).map(|_| rng.random_range(0..k)).collect();

    let mut donations = Vec::new();
    for (u, &pref) in user_pref.iter().enumerate() {
        for (a, &comm) in author_comm.iter().enumerate() {
            let p = if comm == pref {
                spec.donation_rate
            } else {
                spec.donation_rate * OFF_COMMUNITY_LEAK
            };
            if rng.random::<f64>() < p {
                let amount = (rng.random::<f64>() * 100f64.ln()).exp();
                donations.push(DonationEvent {
                    user_id: user_id(u),
                    author_id: author_id(a),
                    amount,
                    timestamp: BASE_TIMESTAMP + rng.random_range(0..86_400 * 30),
                });
            }
        }
    }

    // Impressions: author uniform, one fresh segment each.
    let tokens = spec.frames + 2;
    let mut drafts = Vec::new();
    let mut features = FeatureTable::new();
    let mut seg_counter = 0usize;
    for (u, &pref) in user_pref.iter().enumerate() {
        for _ in 0..spec.impressions_per_user {
            let a = rng.random_range(0..spec.num_authors);
            let comm = author_comm[a];
            let centroid = &centroids[comm];
            let mut rows = Vec::with_capacity(tokens);
            let mut projection = 0.0f64;
            for _ in 0..tokens {
                let row: Vec<f32> = centroid
                    .iter()
                    .map(|&c| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        (c as f64 + spec.affinity_noise * z) as f32
                    })
                    .collect();
                projection += row
                    .iter()
                    .zip(centroid)
                    .map(|(&x, &c)| (x as f64 - c as f64) * c as f64)
                    .sum::<f64>();
                rows.push(row);
            }
            let alignment = if spec.affinity_noise > 0.0 {
                // mean of `tokens` N(0, noise^2) projections, standardized
                (projection / tokens as f64) / (spec.affinity_noise / (tokens as f64).sqrt())
            } else {
                0.0
            };
            let segment_id = format!("s{seg_counter:08}");
            seg_counter += 1;
            let take = |rows: &[Vec<f32>]| {
                Matrix::from_vec(rows.len(), d, rows.concat()).expect("row widths match")
            };
            features.insert(
                segment_id.clone(),
                SegmentFeatures {
                    segment_id: segment_id.clone(),
                    author_id: author_id(a),
                    visual: take(&rows[..spec.frames]),
                    speech: take(&rows[spec.frames..spec.frames + 1]),
                    text: take(&rows[spec.frames + 1..]),
                },
            );
            let matched = if comm == pref { 1.0 } else { 0.0 };
            let signal = MATCH_WEIGHT * matched + ALIGNMENT_WEIGHT * alignment;
            drafts.push((u, a, segment_id, signal, rng.random::<f64>(), rng.random_range(0..86_400 * 30)));
        }
    }

    let label_bias = solve_bias(drafts.iter().map(|d| d.3), spec.gift_rate);
    let impressions = drafts
        .into_iter()
        .map(|(u, a, segment_id, signal, draw, ts)| ImpressionSample {
            user_id: user_id(u),
            author_id: author_id(a),
            segment_id,
            label: u8::from(draw < sigmoid(signal + label_bias)),
            timestamp: BASE_TIMESTAMP + ts,
        })
        .collect();

    Ok(SyntheticDataset {
        donations,
        impressions,
        features,
        user_community: user_pref.iter().enumerate().map(|(u, &c)| (user_id(u), c)).collect(),
        author_community: author_comm.iter().enumerate().map(|(a, &c)| (author_id(a), c)).collect(),
        centroids,
        label_bias,
    })
}

/// Bisection for `b` with `mean(sigmoid(s_i + b)) = target`.
fn solve_bias(signals: impl Iterator<Item = f64>, target: f64) -> f64 {
    let signals: Vec<f64> = signals.collect();
    if signals.is_empty() {
        return (target / (1.0 - target)).ln();
    }
    let mean_at = |b: f64| signals.iter().map(|&s| sigmoid(s + b)).sum::<f64>() / signals.len() as f64;
    let (mut lo, mut hi) = (-50.0, 50.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_at(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Split of impressions into train and held-out sets where a fraction of
/// users is entirely unseen in training.
#[derive(Clone, Debug, Default)]
pub struct ImpressionSplit {
    pub train: Vec<ImpressionSample>,
    pub test: Vec<ImpressionSample>,
    pub cold_users: std::collections::BTreeSet<String>,
}

/// Marks `cold_fraction` of users as cold (all their impressions go to test)
/// and sends `test_fraction` of every warm user's impressions to test.
pub fn split_impressions(
    samples: &[ImpressionSample],
    cold_fraction: f64,
    test_fraction: f64,
    seed: u64,
) -> ImpressionSplit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut users: Vec<&str> = samples.iter().map(|s| s.user_id.as_str()).collect();
    users.sort_unstable();
    users.dedup();
    users.shuffle(&mut rng);
    let n_cold = (users.len() as f64 * cold_fraction).ceil() as usize;
    let cold_users: std::collections::BTreeSet<String> =
        users[..n_cold.min(users.len())].iter().map(|s| s.to_string()).collect();

    let mut split = ImpressionSplit {
        cold_users,
        ..Default::default()
    };
    for s in samples {
        if split.cold_users.contains(&s.user_id) || rng.random::<f64>() < test_fraction {
            split.test.push(s.clone());
        } else {
            split.train.push(s.clone());
        }
    }
    split
}

/// Reads everything from a reader into bytes; convenience for checksum tests.
pub fn read_all<R: Read>(mut r: R) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    Ok(buf)
}
