use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::SeededRng;

use super::model::{FusionModel, ModalityInit, Mode, TrainingPair};
use super::ModelConfig;

/// Every `(x_1..x_t, x_{t+1})` inside each session.
pub fn training_pairs<S: AsRef<[usize]>>(sessions: &[S]) -> Vec<TrainingPair<'_>> {
    let mut out = Vec::new();
    for s in sessions {
        let s = s.as_ref();
        for t in 1..s.len() {
            out.push(TrainingPair {
                prefix: &s[..t],
                target: s[t],
            });
        }
    }
    out
}

/// Groups pairs by prefix length, shuffles within each length and cuts
/// batches that never mix lengths; the batch order is then shuffled too.
pub fn bucketed_batches<'a>(
    pairs: &[TrainingPair<'a>],
    batch_size: usize,
    rng: &mut SeededRng,
) -> Vec<Vec<TrainingPair<'a>>> {
    let mut buckets: BTreeMap<usize, Vec<TrainingPair<'a>>> = BTreeMap::new();
    for p in pairs {
        buckets.entry(p.prefix.len()).or_default().push(*p);
    }
    let mut batches = Vec::new();
    for (_, mut bucket) in buckets {
        rng.shuffle(&mut bucket);
        batches.extend(bucket.chunks(batch_size.max(1)).map(<[_]>::to_vec));
    }
    rng.shuffle(&mut batches);
    batches
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub model: FusionModel,
    /// Mean training loss of each epoch.
    pub loss_curve: Vec<f64>,
}

pub fn train_model<S: AsRef<[usize]>>(
    train_sessions: &[S],
    init: &ModalityInit,
    vocab_hash: &str,
    config: &ModelConfig,
    rng: &mut SeededRng,
) -> Result<TrainedModel> {
    let pairs = training_pairs(train_sessions);
    if pairs.is_empty() {
        return Err(Error::Empty("no training pairs (sessions shorter than 2?)".into()));
    }
    let mut model = FusionModel::new(config.clone(), init, vocab_hash, rng)?;
    let dropout_seed = rng.next_u64();
    let mut loss_curve = Vec::with_capacity(config.epochs);
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        let batches = bucketed_batches(&pairs, config.batch_size, rng);
        let mut total = 0.0;
        for batch in &batches {
            let mode = Mode::Train {
                seed: dropout_seed,
                step,
            };
            total += model.training_step(batch, mode)? * batch.len() as f64;
            step += 1;
        }
        let mean = total / pairs.len() as f64;
        log::debug!("epoch {} mean loss {:.6}", epoch + 1, mean);
        loss_curve.push(mean);
    }
    Ok(TrainedModel { model, loss_curve })
}
