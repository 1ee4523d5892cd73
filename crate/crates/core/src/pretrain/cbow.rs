use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingMatrix, Provenance};
use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, log_sigmoid, sigmoid, SeededRng, Tensor};

/// CBOW with negative sampling. Defaults follow the usual word2vec toolkit
/// settings, with the dimension raised to the model's embedding width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CbowConfig {
    pub dim: usize,
    pub window: usize,
    pub negative: usize,
    pub epochs: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub min_count: usize,
    /// Frequent-item downsampling threshold; 0 disables it.
    pub subsample: f64,
}

impl Default for CbowConfig {
    fn default() -> Self {
        CbowConfig {
            dim: 150,
            window: 5,
            negative: 5,
            epochs: 5,
            lr: 0.025,
            min_lr: 0.0001,
            min_count: 1,
            subsample: 0.0,
        }
    }
}

impl CbowConfig {
    fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.window == 0 || self.epochs == 0 || !(self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "cbow config needs positive dim/window/epochs/lr: {:?}",
                self
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct CbowOutput {
    pub embeddings: EmbeddingMatrix,
    /// Mean negative-sampling loss per (center, target) update, per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains input vectors on `sessions` (each a sequence of track indices below
/// `vocab_size`). The context of a position is the mean of the input vectors
/// inside a randomly shrunk window of the same session; the center track is
/// the positive target and negatives come from the unigram^0.75 table.
pub fn train_cbow<S: AsRef<[usize]>>(
    sessions: &[S],
    vocab_size: usize,
    config: &CbowConfig,
    rng: &mut SeededRng,
) -> Result<CbowOutput> {
    config.validate()?;
    let mut counts = vec![0u64; vocab_size];
    for s in sessions {
        for &t in s.as_ref() {
            if t >= vocab_size {
                return Err(Error::InvalidArgument(format!(
                    "track {} outside vocabulary of {}",
                    t, vocab_size
                )));
            }
            counts[t] += 1;
        }
    }
    let kept = |t: usize| counts[t] >= config.min_count as u64;
    let corpus: Vec<Vec<usize>> = sessions
        .iter()
        .map(|s| s.as_ref().iter().copied().filter(|&t| kept(t)).collect::<Vec<_>>())
        .filter(|s: &Vec<usize>| !s.is_empty())
        .collect();
    let total_words: u64 = corpus.iter().map(|s| s.len() as u64).sum();
    if total_words == 0 {
        return Err(Error::Empty("cbow training corpus".into()));
    }

    let dim = config.dim;
    let bound = 0.5 / dim as f64;
    let mut input = Tensor::from_fn(&[vocab_size, dim], |_| rng.uniform(-bound, bound));
    let mut output = Tensor::zeros(&[vocab_size, dim]);

    let mut cumulative = Vec::with_capacity(vocab_size);
    let mut acc = 0.0;
    for t in 0..vocab_size {
        if kept(t) {
            acc += (counts[t] as f64).powf(0.75);
        }
        cumulative.push(acc);
    }
    let keep_prob: Vec<f64> = counts
        .iter()
        .map(|&c| {
            if config.subsample <= 0.0 || c == 0 {
                1.0
            } else {
                let threshold = config.subsample * total_words as f64;
                ((c as f64 / threshold).sqrt() + 1.0) * threshold / c as f64
            }
        })
        .collect();

    let total_work = (config.epochs as u64 * total_words) as f64;
    let mut processed = 0u64;
    let mut hidden = vec![0.0; dim];
    let mut err = vec![0.0; dim];
    let mut context = Vec::with_capacity(2 * config.window);
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for _ in 0..config.epochs {
        let mut loss_sum = 0.0;
        let mut updates = 0u64;
        for session in &corpus {
            let sentence: Vec<usize> = if config.subsample > 0.0 {
                session
                    .iter()
                    .copied()
                    .filter(|&t| rng.unit() < keep_prob[t])
                    .collect()
            } else {
                session.clone()
            };
            for pos in 0..sentence.len() {
                let lr = (config.lr
                    - (config.lr - config.min_lr) * processed as f64 / total_work)
                    .max(config.min_lr);
                processed += 1;
                let reduced = config.window - rng.index(config.window);
                let lo = pos.saturating_sub(reduced);
                let hi = (pos + reduced + 1).min(sentence.len());
                context.clear();
                context.extend((lo..hi).filter(|&p| p != pos).map(|p| sentence[p]));
                if context.is_empty() {
                    continue;
                }
                hidden.fill(0.0);
                for &c in &context {
                    axpy(1.0, input.row(c), &mut hidden);
                }
                let inv = 1.0 / context.len() as f64;
                hidden.iter_mut().for_each(|h| *h *= inv);
                err.fill(0.0);

                let center = sentence[pos];
                for d in 0..=config.negative {
                    let (target, label) = if d == 0 {
                        (center, 1.0)
                    } else {
                        let t = rng.cumulative_index(&cumulative);
                        if t == center {
                            continue;
                        }
                        (t, 0.0)
                    };
                    let out_row = output.row_mut(target);
                    let score = dot(&hidden, out_row);
                    loss_sum -= if label == 1.0 {
                        log_sigmoid(score)
                    } else {
                        log_sigmoid(-score)
                    };
                    updates += 1;
                    let g = (label - sigmoid(score)) * lr;
                    axpy(g, out_row, &mut err);
                    axpy(g, &hidden, out_row);
                }
                // The context vector is a mean, so each member gets its share.
                for &c in &context {
                    axpy(inv, &err, input.row_mut(c));
                }
            }
        }
        epoch_losses.push(if updates == 0 {
            0.0
        } else {
            loss_sum / updates as f64
        });
    }
    Ok(CbowOutput {
        embeddings: EmbeddingMatrix::new(input, Provenance::Cbow)?,
        epoch_losses,
    })
}
