use std::collections::BTreeMap;

use crate::embedding::{EmbeddingMatrix, Provenance};
use crate::error::{Error, Result};
use crate::exec;
use crate::numerics::{ParamStore, SeededRng, Tensor};

use super::network::{accumulate_head, gru_names, HeadGrad, Net, NetGrads};
use super::{Baseline, Modality, ModelConfig, GRAD_CHUNK};

/// One `(prefix, next track)` example.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainingPair<'a> {
    pub prefix: &'a [usize],
    pub target: usize,
}

/// Dropout switch. In training mode example `i` of a batch draws its masks
/// from a stream keyed by `(seed, step, i)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { seed: u64, step: u64 },
}

impl Mode {
    fn rng(self, example: usize) -> Option<SeededRng> {
        match self {
            Mode::Eval => None,
            Mode::Train { seed, step } => Some(SeededRng::keyed(seed, &[step, example as u64])),
        }
    }
}

/// Initial tables for each modality. Missing modalities must stay disabled.
#[derive(Clone, Debug)]
pub struct ModalityInit {
    pub track: EmbeddingMatrix,
    pub acoustic: Option<EmbeddingMatrix>,
    pub lyrics: Option<EmbeddingMatrix>,
    pub tags: Option<EmbeddingMatrix>,
}

impl ModalityInit {
    pub fn track_only(track: EmbeddingMatrix) -> Self {
        ModalityInit {
            track,
            acoustic: None,
            lyrics: None,
            tags: None,
        }
    }

    pub fn get(&self, m: Modality) -> Option<&EmbeddingMatrix> {
        match m {
            Modality::Track => Some(&self.track),
            Modality::Acoustic => self.acoustic.as_ref(),
            Modality::Lyrics => self.lyrics.as_ref(),
            Modality::Tags => self.tags.as_ref(),
        }
    }
}

/// Intermediate values of one evaluation-mode forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub hidden: Vec<Vec<f64>>,
    /// For the GRU4REC baseline this is one-hot on the last position.
    pub attention: Vec<f64>,
    /// Active contexts in concatenation order.
    pub contexts: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct FusionModel {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub vocab_hash: String,
    /// Initializer of each embedding table, keyed by table name.
    pub provenance: BTreeMap<String, Provenance>,
    pub params: ParamStore,
}

fn uniform(shape: &[usize], bound: f64, rng: &mut SeededRng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform(-bound, bound))
}

impl FusionModel {
    pub fn new(
        config: ModelConfig,
        init: &ModalityInit,
        vocab_hash: &str,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        config.validate()?;
        let vocab = init.track.rows();
        if vocab == 0 {
            return Err(Error::Empty("empty vocabulary".into()));
        }
        let (d, h, f) = (config.embed_dim, config.hidden_dim, config.fusion_dim);
        let mut params = ParamStore::new();
        let mut provenance = BTreeMap::new();
        let modalities = config.modalities();
        for &m in &modalities {
            let table = init.get(m).ok_or_else(|| {
                Error::InvalidArgument(format!("no initializer for {:?} embeddings", m))
            })?;
            if table.rows() != vocab || table.dim() != d {
                return Err(Error::Shape(format!(
                    "{} initializer is {}x{}, expected {}x{}",
                    m.table(),
                    table.rows(),
                    table.dim(),
                    vocab,
                    d
                )));
            }
            params.insert(m.table(), table.table.clone());
            provenance.insert(m.table().to_string(), table.provenance);
        }

        let gb = 1.0 / (h as f64).sqrt();
        let dirs: &[&str] = if config.baseline == Baseline::Gru4rec {
            &["gru_f"]
        } else {
            &["gru_f", "gru_b"]
        };
        for dir in dirs {
            for name in gru_names(dir) {
                let shape: Vec<usize> = match name.rsplit('.').next().unwrap().as_bytes()[0] {
                    b'W' => vec![h, d],
                    b'U' => vec![h, h],
                    _ => vec![h],
                };
                params.insert(name, uniform(&shape, gb, rng));
            }
        }
        let head_in = if config.baseline == Baseline::Gru4rec {
            h
        } else {
            params.insert("att.W", uniform(&[h, h], gb, rng));
            params.insert("att.b", Tensor::zeros(&[h]));
            params.insert("att.v", uniform(&[h], gb, rng));
            let fin = h + d * (modalities.len() - 1);
            let b1 = 1.0 / (fin as f64).sqrt();
            params.insert("fc1.W", uniform(&[f, fin], b1, rng));
            params.insert("fc1.b", uniform(&[f], b1, rng));
            f
        };
        let b2 = 1.0 / (head_in as f64).sqrt();
        params.insert("fc2.W", uniform(&[vocab, head_in], b2, rng));
        params.insert("fc2.b", uniform(&[vocab], b2, rng));

        Ok(FusionModel {
            config,
            vocab_size: vocab,
            vocab_hash: vocab_hash.to_string(),
            provenance,
            params,
        })
    }

    pub(crate) fn net(&self) -> Result<Net<'_>> {
        Net::new(&self.params, &self.config, self.vocab_size)
    }

    /// Row lookups of every active table, dropout applied when `rng` is given.
    pub fn embed_lookup(
        &self,
        prefix: &[usize],
        rng: Option<&mut SeededRng>,
    ) -> Result<Vec<Vec<Vec<f64>>>> {
        Ok(self.net()?.embed(prefix, rng)?.0)
    }

    pub fn forward_trace(&self, prefix: &[usize]) -> Result<ForwardTrace> {
        let cache = self.net()?.forward(prefix, None)?;
        Ok(ForwardTrace {
            output: cache.probabilities(),
            hidden: cache.hidden,
            attention: cache.alpha,
            contexts: cache.contexts,
        })
    }

    pub fn probabilities(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        Ok(self.net()?.forward(prefix, None)?.probabilities())
    }

    /// The `k` most probable next tracks, ties broken by ascending index.
    pub fn predict_topk(&self, prefix: &[usize], k: usize) -> Result<Vec<usize>> {
        if k > self.vocab_size {
            return Err(Error::InvalidArgument(format!(
                "k = {} exceeds vocabulary size {}",
                k, self.vocab_size
            )));
        }
        let logits = self.net()?.forward(prefix, None)?.logits;
        Ok(top_k(&logits, k))
    }

    /// Mean cross-entropy of a batch without touching gradients.
    pub fn batch_loss(&self, batch: &[TrainingPair<'_>], mode: Mode) -> Result<f64> {
        batch_loss_with(&self.params, &self.config, self.vocab_size, batch, mode)
    }

    /// Zeroes and fills the gradient buffers with the batch-mean gradient.
    /// Returns the mean loss.
    pub fn compute_gradients(&mut self, batch: &[TrainingPair<'_>], mode: Mode) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Empty("empty training batch".into()));
        }
        let scale = 1.0 / batch.len() as f64;
        let (loss, grads, heads) = {
            let net = self.net()?;
            let chunks: Vec<&[TrainingPair<'_>]> = batch.chunks(GRAD_CHUNK).collect();
            let parts = exec::map_range(chunks.len(), |c| -> Result<(f64, NetGrads, Vec<HeadGrad>)> {
                let mut g = net.zero_grads();
                let mut loss = 0.0;
                let mut heads = Vec::with_capacity(chunks[c].len());
                for (j, pair) in chunks[c].iter().enumerate() {
                    let mut rng = mode.rng(c * GRAD_CHUNK + j);
                    let cache = net.forward(pair.prefix, rng.as_mut())?;
                    let (l, h) = net.backward(&cache, pair.prefix, pair.target, scale, &mut g)?;
                    loss += l;
                    heads.push(h);
                }
                Ok((loss, g, heads))
            });
            let mut parts = parts.into_iter();
            let (mut loss, mut total, mut heads) = parts.next().expect("non-empty batch")?;
            for p in parts {
                let (l, g, h) = p?;
                loss += l;
                total.add(&g);
                heads.extend(h);
            }
            (loss * scale, total, heads)
        };
        self.params.zero_grads();
        grads.write_into(&mut self.params, &self.config.modalities())?;
        let mut gw = std::mem::replace(self.params.grad_mut("fc2.W")?, Tensor::zeros(&[0]));
        accumulate_head(&heads, gw.data_mut(), self.params.grad_mut("fc2.b")?.data_mut());
        *self.params.grad_mut("fc2.W")? = gw;
        Ok(loss)
    }

    /// Gradient computation followed by one Adam update.
    pub fn training_step(&mut self, batch: &[TrainingPair<'_>], mode: Mode) -> Result<f64> {
        let loss = self.compute_gradients(batch, mode)?;
        self.params.adam_step(self.config.lr)?;
        Ok(loss)
    }
}

/// Batch loss against an arbitrary parameter store, used by gradient checks.
pub fn batch_loss_with(
    store: &ParamStore,
    config: &ModelConfig,
    vocab_size: usize,
    batch: &[TrainingPair<'_>],
    mode: Mode,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("empty training batch".into()));
    }
    let net = Net::new(store, config, vocab_size)?;
    let mut total = 0.0;
    for (i, pair) in batch.iter().enumerate() {
        let mut rng = mode.rng(i);
        let cache = net.forward(pair.prefix, rng.as_mut())?;
        total += crate::numerics::cross_entropy_loss(&cache.logits, pair.target)?.loss;
    }
    Ok(total / batch.len() as f64)
}

/// Indices of the `k` largest scores, descending, ties by ascending index.
pub(crate) fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let cmp = |a: &usize, b: &usize| {
        scores[*b]
            .partial_cmp(&scores[*a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(b))
    };
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if k == 0 {
        return Vec::new();
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    idx
}
