//! Track-embedding pretraining: CBOW over sessions-as-sentences and LSA over
//! the session-track count matrix.

mod cbow;
mod lsa;

pub use cbow::{train_cbow, CbowConfig, CbowOutput};
pub use lsa::{train_lsa_embeddings, SessionTrackMatrix};

use crate::embedding::EmbeddingMatrix;
use crate::numerics::SeededRng;

/// Re-draws rows of tracks absent from training from
/// `uniform(-0.5/d, 0.5/d)`, leaving every other row untouched.
/// Returns the number of replaced rows.
pub fn init_unseen_tracks(
    matrix: &mut EmbeddingMatrix,
    seen: &[bool],
    rng: &mut SeededRng,
) -> usize {
    let bound = 0.5 / matrix.dim() as f64;
    let mut replaced = 0;
    for (t, _) in seen.iter().enumerate().filter(|(_, s)| !**s) {
        if t >= matrix.rows() {
            break;
        }
        for v in matrix.row_mut(t) {
            *v = rng.uniform(-bound, bound);
        }
        replaced += 1;
    }
    replaced
}
