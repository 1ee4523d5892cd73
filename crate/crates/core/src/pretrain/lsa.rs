use crate::embedding::{EmbeddingMatrix, Provenance};
use crate::error::{Error, Result};
use crate::numerics::{truncated_svd, Tensor};

/// Sparse session x track play-count matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionTrackMatrix {
    pub n_tracks: usize,
    /// Per session, `(track, count)` sorted by track.
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl SessionTrackMatrix {
    pub fn from_sessions<S: AsRef<[usize]>>(sessions: &[S], n_tracks: usize) -> Self {
        let rows = sessions
            .iter()
            .map(|s| {
                let mut tracks: Vec<usize> = s.as_ref().to_vec();
                tracks.sort_unstable();
                let mut row: Vec<(usize, f64)> = Vec::new();
                for t in tracks {
                    match row.last_mut() {
                        Some((last, c)) if *last == t => *c += 1.0,
                        _ => row.push((t, 1.0)),
                    }
                }
                row
            })
            .collect();
        SessionTrackMatrix { n_tracks, rows }
    }

    pub fn to_dense(&self) -> Tensor {
        let mut m = Tensor::zeros(&[self.rows.len(), self.n_tracks]);
        for (i, r) in self.rows.iter().enumerate() {
            for &(j, v) in r {
                m.set(i, j, v);
            }
        }
        m
    }
}

/// Track `t`'s embedding is row `t` of `V diag(S)` from a rank-`rank`
/// truncated SVD. A rank beyond `min(rows, cols)` is clamped and the missing
/// trailing dimensions are zero.
pub fn train_lsa_embeddings(matrix: &SessionTrackMatrix, rank: usize) -> Result<EmbeddingMatrix> {
    if rank == 0 {
        return Err(Error::InvalidArgument("rank must be positive".into()));
    }
    if matrix.rows.iter().all(|r| r.iter().all(|(_, v)| *v == 0.0)) {
        return Err(Error::Empty("session-track matrix has no entries".into()));
    }
    let dense = matrix.to_dense();
    let effective = rank.min(dense.rows()).min(dense.cols());
    let svd = truncated_svd(&dense, effective)?;
    let mut table = Tensor::zeros(&[matrix.n_tracks, rank]);
    for t in 0..matrix.n_tracks {
        let vrow = svd.v.row(t);
        let out = table.row_mut(t);
        for k in 0..effective {
            out[k] = vrow[k] * svd.s[k];
        }
    }
    EmbeddingMatrix::new(table, Provenance::Lsa)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{cosine, dot};

    #[test]
    fn counts_and_row_sums() {
        let m = SessionTrackMatrix::from_sessions(&[vec![2, 0, 2, 2, 1]], 4);
        assert_eq!(m.rows[0], vec![(0, 1.0), (1, 1.0), (2, 3.0)]);
        let sum: f64 = m.rows[0].iter().map(|(_, v)| v).sum();
        assert_eq!(sum, 5.0);
    }

    #[test]
    fn repeated_pattern_gives_collinear_vectors() {
        let sessions = vec![vec![0, 1, 1, 2, 3]; 6];
        let e = train_lsa_embeddings(&SessionTrackMatrix::from_sessions(&sessions, 4), 3).unwrap();
        for t in 1..4 {
            assert!((cosine(e.row(0), e.row(t)).abs() - 1.0).abs() < 1e-9);
        }
        assert!(e.row(0)[1].abs() < 1e-9 && e.row(0)[2].abs() < 1e-9);
    }

    #[test]
    fn block_diagonal_communities() {
        let mut sessions = Vec::new();
        for i in 0..10 {
            sessions.push(vec![i % 3, (i + 1) % 3, 0, 1, 2]);
            sessions.push(vec![3 + i % 3, 3 + (i + 2) % 3, 3, 4, 5]);
        }
        let e = train_lsa_embeddings(&SessionTrackMatrix::from_sessions(&sessions, 6), 4).unwrap();
        let intra = cosine(e.row(0), e.row(1));
        let inter = cosine(e.row(0), e.row(4));
        assert!(intra > inter + 0.5, "{intra} vs {inter}");
    }

    #[test]
    fn rank_is_clamped_and_padded() {
        let sessions = vec![vec![0, 1, 2, 3, 4], vec![0, 0, 1, 1, 2]];
        let e = train_lsa_embeddings(&SessionTrackMatrix::from_sessions(&sessions, 5), 8).unwrap();
        assert_eq!(e.dim(), 8);
        for t in 0..5 {
            assert!(e.row(t)[2..].iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn dot_products_match_low_rank_reconstruction() {
        // Oracle: explicit rank-r reconstruction restricted to track columns.
        let sessions: Vec<Vec<usize>> = (0..12)
            .map(|i| (0..6).map(|j| (i * 7 + j * j) % 9).collect())
            .collect();
        let m = SessionTrackMatrix::from_sessions(&sessions, 9);
        let r = 4;
        let e = train_lsa_embeddings(&m, r).unwrap();
        let svd = truncated_svd(&m.to_dense(), r).unwrap();
        let approx = svd.reconstruct();
        // (M_r)ᵀ M_r = V S² Vᵀ
        for a in 0..9 {
            for b in 0..9 {
                let oracle: f64 = (0..approx.rows()).map(|i| approx.get(i, a) * approx.get(i, b)).sum();
                assert!((dot(e.row(a), e.row(b)) - oracle).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn all_zero_matrix_is_an_error() {
        let m = SessionTrackMatrix {
            n_tracks: 3,
            rows: vec![vec![], vec![]],
        };
        assert!(train_lsa_embeddings(&m, 2).is_err());
    }
}
