use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{batch_loss, Example, GtrParams, MetricsReport};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Update Θ rows along with everything else.
    pub fine_tune_theta: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 256,
            learning_rate: 0.01,
            fine_tune_theta: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be finite and positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    /// Mean training log-loss over the epoch.
    pub loss: f64,
    /// Validation metrics; absent without a validation set.
    pub metrics: Option<MetricsReport>,
}

/// Scores every example and summarizes them.
pub fn evaluate<T: Scalar>(params: &GtrParams<T>, examples: &[Example<'_>]) -> Result<(MetricsReport, f64)> {
    let scores = params.predict_batch(examples, 256)?;
    let pairs: Vec<(f64, u8)> = scores.iter().zip(examples).map(|(p, e)| (p.as_f64(), e.label)).collect();
    let loss = batch_loss(&pairs)?;
    let report = MetricsReport::compute(examples.iter().zip(&pairs).map(|(e, &(p, y))| (e.user_id, p, y)))?;
    Ok((report, loss))
}

/// Mini-batch gradient descent on the mean log-loss. Deterministic under
/// `cfg.seed`.
pub fn train<T: Scalar>(
    params: &mut GtrParams<T>,
    train: &[Example<'_>],
    valid: &[Example<'_>],
    cfg: &TrainConfig,
) -> Result<Vec<EpochReport>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let lr = T::of(cfg.learning_rate);
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut seen) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Example<'_>> = chunk.iter().map(|&i| train[i]).collect();
            let g = params.gradients(&batch, cfg.fine_tune_theta)?;
            total += g.loss.as_f64() * batch.len() as f64;
            seen += batch.len();
            params.apply(&g, lr);
        }
        let metrics = if valid.is_empty() {
            None
        } else {
            Some(evaluate(params, valid)?.0)
        };
        let loss = if seen == 0 { f64::NAN } else { total / seen as f64 };
        log::info!("epoch {epoch}: train loss {loss:.5}");
        trace.push(EpochReport { epoch, loss, metrics });
    }
    Ok(trace)
}

/// `epoch,loss,auc,uauc,gauc`; missing metrics are left empty.
pub fn write_trace_csv<W: Write>(w: &mut W, trace: &[EpochReport]) -> Result<()> {
    writeln!(w, "epoch,loss,auc,uauc,gauc")?;
    for r in trace {
        match &r.metrics {
            Some(m) => writeln!(w, "{},{},{},{},{}", r.epoch, r.loss, m.auc, m.uauc, m.gauc)?,
            None => writeln!(w, "{},{},,,", r.epoch, r.loss)?,
        }
    }
    Ok(())
}
