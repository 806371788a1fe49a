//! `MMBC` checkpoint: magic, version, config JSON, store build id, id
//! dictionaries, then named row-major 32-bit blocks.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{index_of, GtrConfig, GtrParams};
use crate::binio;
use crate::error::{Error, Result};
use crate::mfq::{MfqParams, QueryBank};
use crate::tensor::{Matrix, Scalar};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MMBC";
pub const CHECKPOINT_VERSION: u32 = 1;

impl<T: Scalar> GtrParams<T> {
    /// Writes all parameters as 32-bit floats. `store_build_id` ties the
    /// checkpoint to the expansion store it was trained against.
    pub fn write_checkpoint<W: Write>(&self, w: &mut W, store_build_id: Option<&str>) -> Result<()> {
        binio::write_magic(w, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        binio::write_str(w, &serde_json::to_string(&self.config)?)?;
        binio::write_str(w, store_build_id.unwrap_or(""))?;
        binio::write_strs(w, &self.user_ids)?;
        binio::write_strs(w, &self.author_ids)?;
        binio::write_strs(w, &self.theta_users)?;
        binio::write_strs(w, &self.theta_authors)?;
        let mut blocks = self.groups();
        blocks.push(("author_attr".into(), &self.author_attr));
        binio::write_len(w, blocks.len())?;
        for (name, m) in blocks {
            binio::write_str(w, &name)?;
            binio::write_len(w, m.rows())?;
            binio::write_len(w, m.cols())?;
            let data: Vec<f32> = m.data().iter().map(|x| x.as_f64() as f32).collect();
            binio::write_f32s(w, &data)?;
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>, store_build_id: Option<&str>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_checkpoint(&mut w, store_build_id)?;
        w.flush()?;
        Ok(())
    }
}

/// A loaded checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: GtrParams<f32>,
    pub store_build_id: Option<String>,
}

impl Checkpoint {
    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let version = binio::read_magic(r, CHECKPOINT_MAGIC)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let config: GtrConfig = serde_json::from_str(&binio::read_str(r)?)?;
        config.validate()?;
        let build = binio::read_str(r)?;
        let user_ids = binio::read_strs(r)?;
        let author_ids = binio::read_strs(r)?;
        let theta_users = binio::read_strs(r)?;
        let theta_authors = binio::read_strs(r)?;
        let count = binio::read_u32(r)? as usize;
        let mut blocks: HashMap<String, Matrix<f32>> = HashMap::with_capacity(count);
        let mut bank_names = Vec::new();
        for _ in 0..count {
            let name = binio::read_str(r)?;
            let rows = binio::read_u32(r)? as usize;
            let cols = binio::read_u32(r)? as usize;
            let data = binio::read_f32s(r, rows * cols)?;
            if name.starts_with("queries.") {
                bank_names.push(name.clone());
            }
            blocks.insert(name, Matrix::from_vec(rows, cols, data)?);
        }
        binio::expect_eof(r)?;

        let (d, d_m, h) = (config.d, config.d_m, config.hidden);
        let mut take = |name: &str, shape: (usize, usize)| -> Result<Matrix<f32>> {
            let m = blocks
                .remove(name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks block `{name}`")))?;
            if m.shape() != shape {
                return Err(Error::Format(format!("block `{name}` has shape {:?}, expected {shape:?}", m.shape())));
            }
            Ok(m)
        };
        let mut mfq = MfqParams::zeros(d_m);
        for (bname, block) in crate::mfq::BLOCK_NAMES.iter().zip(mfq.blocks_mut()) {
            for (part, m) in ["query", "key", "value"].iter().zip(block.mats_mut()) {
                *m = take(&format!("mfq.{bname}.{part}"), (d_m, d_m))?;
            }
        }
        let mut queries = QueryBank::new(config.num_queries, d_m, config.seed.wrapping_add(2));
        for name in bank_names {
            let m = take(&name, (config.num_queries, d_m))?;
            queries.insert(name["queries.".len()..].to_string(), m)?;
        }
        let params = GtrParams {
            proj: take("proj", (d + d_m, d))?,
            w1: take("head.w1", (config.input_width(), h))?,
            b1: take("head.b1", (1, h))?,
            w2: take("head.w2", (h, 1))?,
            b2: take("head.b2", (1, 1))?,
            user_emb: take("user_emb", (user_ids.len() + 1, d))?,
            author_emb: take("author_emb", (author_ids.len() + 1, d))?,
            theta: take("theta", (theta_users.len() + theta_authors.len(), d))?,
            author_attr: take("author_attr", (theta_authors.len(), d_m))?,
            mfq,
            queries,
            user_index: index_of(&user_ids),
            author_index: index_of(&author_ids),
            user_ids,
            author_ids,
            theta_users,
            theta_authors,
            config,
        };
        if let Some(extra) = blocks.keys().next() {
            return Err(Error::Format(format!("unexpected checkpoint block `{extra}`")));
        }
        Ok(Self {
            params,
            store_build_id: (!build.is_empty()).then_some(build),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(&mut BufReader::new(File::open(path)?))
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        self.params.write_checkpoint(w, self.store_build_id.as_deref())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.params.save_checkpoint(path, self.store_build_id.as_deref())
    }
}
