//! Attentive next-track model: per-modality embedding tables, a bidirectional
//! GRU over the track path, one queryless additive attention pass whose
//! weights are shared by every modality context, and a two-layer head with a
//! softmax over the whole vocabulary.

mod checkpoint;
mod model;
mod network;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embedding::Provenance;
use crate::error::{Error, Result};

pub use model::{batch_loss_with, ForwardTrace, FusionModel, ModalityInit, Mode, TrainingPair};
pub(crate) use model::top_k;

pub use train::{bucketed_batches, train_model, training_pairs, TrainedModel};

/// Examples per gradient chunk. Chunks are reduced in index order, so the
/// summation order never depends on the execution mode.
pub const GRAD_CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    #[default]
    None,
    /// Forward GRU only; the last hidden state feeds the output layer.
    Gru4rec,
    /// Track path only, same architecture as the full model.
    Ann,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Modality {
    Track,
    Acoustic,
    Lyrics,
    Tags,
}

impl Modality {
    pub const ALL: [Modality; 4] = [
        Modality::Track,
        Modality::Acoustic,
        Modality::Lyrics,
        Modality::Tags,
    ];

    /// Name of the embedding table in the parameter store.
    pub fn table(self) -> &'static str {
        match self {
            Modality::Track => "E1",
            Modality::Acoustic => "E2",
            Modality::Lyrics => "E3",
            Modality::Tags => "E4",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub use_acoustic: bool,
    pub use_lyrics: bool,
    pub use_tags: bool,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub fusion_dim: usize,
    pub dropout: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub leaky_slope: f64,
    pub baseline: Baseline,
    pub epochs: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            use_acoustic: false,
            use_lyrics: false,
            use_tags: false,
            embed_dim: 150,
            hidden_dim: 150,
            fusion_dim: 256,
            dropout: 0.2,
            lr: 1e-3,
            batch_size: 32,
            leaky_slope: 0.01,
            baseline: Baseline::None,
            epochs: 5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.fusion_dim == 0 {
            return Err(Error::InvalidArgument("model dimensions must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!(
                "dropout {} outside [0, 1]",
                self.dropout
            )));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(Error::InvalidArgument("lr and batch size must be positive".into()));
        }
        if self.baseline != Baseline::None && (self.use_acoustic || self.use_lyrics || self.use_tags) {
            return Err(Error::InvalidArgument(format!(
                "baseline {:?} has no modality paths",
                self.baseline
            )));
        }
        Ok(())
    }

    /// Active modalities in concatenation order.
    pub fn modalities(&self) -> Vec<Modality> {
        let mut out = vec![Modality::Track];
        for (on, m) in [
            (self.use_acoustic, Modality::Acoustic),
            (self.use_lyrics, Modality::Lyrics),
            (self.use_tags, Modality::Tags),
        ] {
            if on {
                out.push(m);
            }
        }
        out
    }
}

/// The named model configurations compared in the reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Gru4rec,
    Ann,
    AnnLsa,
    Annw,
    AnnwAcoustic,
    AnnwLyrics,
    AnnwAcousticLyrics,
    AnnwAcousticLyricsTags,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Gru4rec,
        Variant::Ann,
        Variant::AnnLsa,
        Variant::Annw,
        Variant::AnnwAcoustic,
        Variant::AnnwLyrics,
        Variant::AnnwAcousticLyrics,
        Variant::AnnwAcousticLyricsTags,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Gru4rec => "gru4rec",
            Variant::Ann => "ann",
            Variant::AnnLsa => "ann-lsa",
            Variant::Annw => "annw",
            Variant::AnnwAcoustic => "annw+acoustic",
            Variant::AnnwLyrics => "annw+lyrics",
            Variant::AnnwAcousticLyrics => "annw+acoustic+lyrics",
            Variant::AnnwAcousticLyricsTags => "annw+acoustic+lyrics+tags",
        }
    }

    /// Initializer of the track table.
    pub fn track_init(self) -> Provenance {
        match self {
            Variant::Gru4rec | Variant::Ann => Provenance::Random,
            Variant::AnnLsa => Provenance::Lsa,
            _ => Provenance::Cbow,
        }
    }

    /// `base` with the variant's structural switches applied.
    pub fn configure(self, base: &ModelConfig) -> ModelConfig {
        let mut c = base.clone();
        c.use_acoustic = false;
        c.use_lyrics = false;
        c.use_tags = false;
        c.baseline = Baseline::None;
        match self {
            Variant::Gru4rec => c.baseline = Baseline::Gru4rec,
            Variant::Ann | Variant::AnnLsa => c.baseline = Baseline::Ann,
            Variant::Annw => {}
            Variant::AnnwAcoustic => c.use_acoustic = true,
            Variant::AnnwLyrics => c.use_lyrics = true,
            Variant::AnnwAcousticLyrics => {
                c.use_acoustic = true;
                c.use_lyrics = true;
            }
            Variant::AnnwAcousticLyricsTags => {
                c.use_acoustic = true;
                c.use_lyrics = true;
                c.use_tags = true;
            }
        }
        c
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::InvalidArgument(format!(
                    "unknown variant `{}` (expected one of {})",
                    s,
                    names.join(", ")
                ))
            })
    }
}
