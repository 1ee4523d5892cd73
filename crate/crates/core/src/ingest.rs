//! Loaders for precomputed lyric and tag vectors, the synthetic dataset
//! generator, and the embedding cache.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::acoustic::{write_features, AcousticFeatureVector};
use crate::embedding::{EmbeddingMatrix, Provenance};
use crate::error::{Error, Result};
use crate::eval::{write_user_metadata, UserMetadata};
use crate::numerics::{axpy, dot, pca_reduce, Pca, SeededRng, Tensor};
use crate::sessions::{canonical_key, write_events, Vocabulary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VectorKind {
    Lyrics,
    Tags,
}

impl VectorKind {
    fn as_str(self) -> &'static str {
        match self {
            VectorKind::Lyrics => "lyrics",
            VectorKind::Tags => "tags",
        }
    }
}

/// Contents of a `dim=<d> kind=<lyrics|tags>` vector file.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorFile {
    pub dim: usize,
    pub kind: VectorKind,
    pub records: Vec<(String, Vec<f64>)>,
}

pub fn read_vector_file<R: BufRead>(r: R) -> Result<VectorFile> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::parse(1, "missing header"))??;
    let fields = crate::embedding::header_fields(&header, 1)?;
    let dim: usize = crate::embedding::lookup(&fields, "dim", 1)?
        .parse()
        .map_err(|_| Error::parse(1, "bad dim"))?;
    if dim == 0 {
        return Err(Error::parse(1, "dim must be positive"));
    }
    let kind = match crate::embedding::lookup(&fields, "kind", 1)? {
        "lyrics" => VectorKind::Lyrics,
        "tags" => VectorKind::Tags,
        other => return Err(Error::parse(1, format!("unknown kind `{}`", other))),
    };
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (key, values) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(lineno, "expected `track_key<TAB>values`"))?;
        let key = canonical_key(key);
        if key.is_empty() {
            return Err(Error::parse(lineno, "empty track_key"));
        }
        let v = values
            .split_whitespace()
            .map(|s| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::parse(lineno, format!("bad value `{}`", s)))
            })
            .collect::<Result<Vec<f64>>>()?;
        if v.len() != dim {
            return Err(Error::parse(
                lineno,
                format!("expected {} values, found {}", dim, v.len()),
            ));
        }
        records.push((key, v));
    }
    Ok(VectorFile { dim, kind, records })
}

pub fn write_vector_file<W: Write>(mut w: W, file: &VectorFile) -> Result<()> {
    writeln!(w, "dim={} kind={}", file.dim, file.kind.as_str())?;
    let mut line = String::new();
    for (key, v) in &file.records {
        line.clear();
        line.push_str(key);
        line.push('\t');
        for (i, x) in v.iter().enumerate() {
            if i > 0 {
                line.push(' ');
            }
            line.push_str(&format!("{:?}", x));
        }
        line.push('\n');
        w.write_all(line.as_bytes())?;
    }
    Ok(())
}

/// Mean of per-tag word vectors and the number of tags averaged.
pub fn average_vectors(vectors: &[Vec<f64>]) -> Result<(Vec<f64>, usize)> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::Empty("no tag vectors to average".into()))?;
    let mut mean = vec![0.0; first.len()];
    for v in vectors {
        if v.len() != mean.len() {
            return Err(Error::Shape("tag vectors of mixed length".into()));
        }
        axpy(1.0, v, &mut mean);
    }
    let n = vectors.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok((mean, vectors.len()))
}

#[derive(Clone, Debug)]
pub struct LoadedEmbeddings {
    pub matrix: EmbeddingMatrix,
    /// Vocabulary tracks with a vector.
    pub covered: usize,
    pub coverage: f64,
    /// Keys in the file that are not in the vocabulary.
    pub unknown: Vec<String>,
    pub pca: Option<Pca>,
}

fn align<'a>(file: &'a VectorFile, vocab: &Vocabulary, what: &str) -> (Vec<(usize, &'a [f64])>, Vec<String>) {
    let mut rows = Vec::new();
    let mut unknown = Vec::new();
    let mut seen = vec![false; vocab.len()];
    for (key, v) in &file.records {
        match vocab.index_of(key) {
            Some(i) if !seen[i] => {
                seen[i] = true;
                rows.push((i, v.as_slice()));
            }
            Some(_) => log::warn!("{}: duplicate vector for `{}` ignored", what, key),
            None => unknown.push(key.clone()),
        }
    }
    if !unknown.is_empty() {
        log::warn!("{}: skipped {} unknown track keys", what, unknown.len());
    }
    rows.sort_by_key(|(i, _)| *i);
    (rows, unknown)
}

fn finish(
    mut matrix: EmbeddingMatrix,
    rows: &[(usize, Vec<f64>)],
    unknown: Vec<String>,
    pca: Option<Pca>,
    what: &str,
) -> LoadedEmbeddings {
    for (i, v) in rows {
        matrix.row_mut(*i).copy_from_slice(v);
    }
    let total = matrix.rows().max(1);
    let coverage = rows.len() as f64 / total as f64;
    if rows.is_empty() {
        log::warn!("{}: no vocabulary track has a vector (coverage 0)", what);
    }
    LoadedEmbeddings {
        matrix,
        covered: rows.len(),
        coverage,
        unknown,
        pca,
    }
}

/// Lyric vectors reduced to `out_dim` by PCA fit on covered tracks only;
/// files already at `out_dim` pass through. Uncovered tracks get zero rows.
pub fn load_lyric_embeddings(file: &VectorFile, vocab: &Vocabulary, out_dim: usize) -> Result<LoadedEmbeddings> {
    if file.kind != VectorKind::Lyrics {
        return Err(Error::Format("expected a lyrics vector file".into()));
    }
    if file.dim < out_dim {
        return Err(Error::Shape(format!(
            "lyric vectors have {} dims, fewer than {}",
            file.dim, out_dim
        )));
    }
    let (aligned, unknown) = align(file, vocab, "lyrics");
    let matrix = EmbeddingMatrix::zeros(vocab.len(), out_dim, Provenance::Lyrics);
    if file.dim == out_dim || aligned.is_empty() {
        let rows: Vec<(usize, Vec<f64>)> = aligned.iter().map(|(i, v)| (*i, v.to_vec())).collect();
        return Ok(finish(matrix, &rows, unknown, None, "lyrics"));
    }
    let data: Vec<f64> = aligned.iter().flat_map(|(_, v)| v.iter().copied()).collect();
    let raw = Tensor::from_vec(&[aligned.len(), file.dim], data)?;
    let (projected, pca) = pca_reduce(&raw, out_dim)?;
    let rows: Vec<(usize, Vec<f64>)> = aligned
        .iter()
        .enumerate()
        .map(|(r, (i, _))| (*i, projected.row(r).to_vec()))
        .collect();
    Ok(finish(matrix, &rows, unknown, Some(pca), "lyrics"))
}

/// Tag vectors mapped through `projection` (`out x in`); uncovered tracks
/// get zero rows.
pub fn load_tag_embeddings(file: &VectorFile, vocab: &Vocabulary, projection: &Tensor) -> Result<LoadedEmbeddings> {
    if file.kind != VectorKind::Tags {
        return Err(Error::Format("expected a tags vector file".into()));
    }
    if projection.rank() != 2 || projection.cols() != file.dim {
        return Err(Error::Shape(format!(
            "projection {:?} does not accept {}-d tag vectors",
            projection.shape(),
            file.dim
        )));
    }
    let (aligned, unknown) = align(file, vocab, "tags");
    let out = projection.rows();
    let rows: Vec<(usize, Vec<f64>)> = aligned
        .iter()
        .map(|(i, v)| (*i, (0..out).map(|k| dot(projection.row(k), v)).collect()))
        .collect();
    let matrix = EmbeddingMatrix::zeros(vocab.len(), out, Provenance::Tags);
    Ok(finish(matrix, &rows, unknown, None, "tags"))
}

/// `out x in` matrix with orthonormal rows from Gram-Schmidt on Gaussian draws.
pub fn random_orthonormal_projection(in_dim: usize, out_dim: usize, rng: &mut SeededRng) -> Result<Tensor> {
    if out_dim == 0 || out_dim > in_dim {
        return Err(Error::InvalidArgument(format!(
            "cannot build {}x{} orthonormal rows",
            out_dim, in_dim
        )));
    }
    let mut m = Tensor::zeros(&[out_dim, in_dim]);
    let mut k = 0;
    while k < out_dim {
        let mut v: Vec<f64> = (0..in_dim).map(|_| rng.normal()).collect();
        // Two passes keep the basis orthogonal to working precision.
        for _ in 0..2 {
            for j in 0..k {
                let p = dot(m.row(j), &v);
                axpy(-p, m.row(j), &mut v);
            }
        }
        let n = dot(&v, &v).sqrt();
        if n < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= n);
        m.row_mut(k).copy_from_slice(&v);
        k += 1;
    }
    Ok(m)
}

/// Persists a matrix together with the vocabulary hash it was built for.
pub fn cache_embeddings(matrix: &EmbeddingMatrix, path: &Path, vocab: &Vocabulary) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    matrix.write(&mut w, &vocab.hash())?;
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Loads a cached matrix, refusing one built for another vocabulary.
pub fn load_cached(path: &Path, vocab: &Vocabulary) -> Result<EmbeddingMatrix> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let (matrix, hash) = EmbeddingMatrix::read(BufReader::new(f))?;
    let expected = vocab.hash();
    if hash != expected {
        return Err(Error::VocabMismatch {
            expected,
            found: hash,
        });
    }
    if matrix.rows() != vocab.len() {
        return Err(Error::Shape(format!(
            "cached matrix has {} rows for a vocabulary of {}",
            matrix.rows(),
            vocab.len()
        )));
    }
    Ok(matrix)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub users: usize,
    pub clusters: usize,
    pub tracks_per_cluster: usize,
    /// Probability that the next track stays in the current cluster.
    pub beta_m: f64,
    pub sessions_per_user: usize,
    pub min_session_len: usize,
    pub max_session_len: usize,
    /// Exponent of the within-cluster popularity law.
    pub zipf_exponent: f64,
    /// Favourite clusters per user and the chance a session starts in one.
    pub favorite_clusters: usize,
    pub favorite_bias: f64,
    pub at_risk_fraction: f64,
    pub no_risk_fraction: f64,
    /// Chance of replaying a same-cluster track already heard in the session.
    pub base_repeat_prob: f64,
    /// Multiplier on `base_repeat_prob` for at-risk users.
    pub repetition_multiplier: f64,
    pub acoustic_coverage: f64,
    pub lyric_coverage: f64,
    pub tag_coverage: f64,
    pub lyric_dim: usize,
    pub tag_dim: usize,
    /// Per-dimension spread of cluster centres and of tracks around them.
    pub modality_center_scale: f64,
    pub modality_noise: f64,
    pub start_timestamp: i64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            users: 200,
            clusters: 25,
            tracks_per_cluster: 100,
            beta_m: 0.8,
            sessions_per_user: 6,
            min_session_len: 5,
            max_session_len: 8,
            zipf_exponent: 0.8,
            favorite_clusters: 3,
            favorite_bias: 0.7,
            at_risk_fraction: 0.35,
            no_risk_fraction: 0.45,
            base_repeat_prob: 0.05,
            repetition_multiplier: 8.0,
            acoustic_coverage: 1.0,
            lyric_coverage: 0.8,
            tag_coverage: 0.6,
            lyric_dim: 768,
            tag_dim: 300,
            modality_center_scale: 0.1,
            modality_noise: 0.04,
            start_timestamp: 1_609_459_200,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.clusters == 0 || self.tracks_per_cluster == 0 || self.users == 0 {
            return bad("users, clusters and tracks per cluster must be positive".into());
        }
        if self.clusters == 1 && self.beta_m < 1.0 {
            return bad("a single cluster requires beta_m = 1".into());
        }
        for (name, p) in [
            ("beta_m", self.beta_m),
            ("favorite_bias", self.favorite_bias),
            ("at_risk_fraction", self.at_risk_fraction),
            ("no_risk_fraction", self.no_risk_fraction),
            ("acoustic_coverage", self.acoustic_coverage),
            ("lyric_coverage", self.lyric_coverage),
            ("tag_coverage", self.tag_coverage),
            ("base_repeat_prob", self.base_repeat_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{} = {} is not a probability", name, p));
            }
        }
        if self.at_risk_fraction + self.no_risk_fraction > 1.0 {
            return bad("cohort fractions exceed 1".into());
        }
        if !(self.base_repeat_prob * self.repetition_multiplier <= 1.0) || self.repetition_multiplier < 0.0 {
            return bad("repetition probability exceeds 1".into());
        }
        if self.min_session_len == 0 || self.min_session_len > self.max_session_len {
            return bad("session length range is empty".into());
        }
        if self.lyric_dim == 0 || self.tag_dim == 0 {
            return bad("vector dims must be positive".into());
        }
        Ok(())
    }

    pub fn num_tracks(&self) -> usize {
        self.clusters * self.tracks_per_cluster
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SyntheticCohort {
    AtRisk,
    NoRisk,
    Neither,
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    /// `(user, artist, title, timestamp)` plays.
    pub events: Vec<(String, String, String, i64)>,
    pub features: Vec<(String, AcousticFeatureVector)>,
    pub lyrics: VectorFile,
    pub tags: VectorFile,
    pub metadata: UserMetadata,
    /// Canonical key and cluster of every generated track.
    pub tracks: Vec<(String, usize)>,
    pub cohorts: Vec<(String, SyntheticCohort)>,
    /// Cluster of each consecutive pair of plays within a session.
    pub transitions: Vec<(usize, usize)>,
}

fn artist_title(track: usize) -> (String, String) {
    (format!("Artist {:04}", track / 4), format!("Track {:05}", track))
}

struct ClusterProfile {
    unit: [f64; 7],
    loudness: f64,
    tempo: f64,
    duration: f64,
    major: f64,
}

fn draw_features(p: &ClusterProfile, rng: &mut SeededRng) -> AcousticFeatureVector {
    let u = |i: usize, rng: &mut SeededRng| rng.gaussian(p.unit[i], 0.05).clamp(0.0, 1.0);
    AcousticFeatureVector {
        acousticness: u(0, rng),
        danceability: u(1, rng),
        duration_ms: rng.gaussian(p.duration, 15_000.0).max(30_000.0).round(),
        energy: u(2, rng),
        instrumentalness: u(3, rng),
        liveness: u(4, rng),
        loudness: rng.gaussian(p.loudness, 1.5).clamp(-60.0, 0.0),
        mode: if rng.bernoulli(p.major) { 1.0 } else { 0.0 },
        speechiness: u(5, rng),
        tempo: rng.gaussian(p.tempo, 5.0).max(30.0),
        valence: u(6, rng),
    }
}

pub fn generate_synthetic_dataset(config: &SyntheticConfig) -> Result<SyntheticDataset> {
    config.validate()?;
    let c = config;
    let mut rng = SeededRng::new(c.seed);
    let n_tracks = c.num_tracks();
    let cluster_of = |t: usize| t / c.tracks_per_cluster;

    let weights: Vec<f64> = (0..c.tracks_per_cluster)
        .map(|r| 1.0 / ((r + 1) as f64).powf(c.zipf_exponent))
        .collect();
    let cumulative: Vec<f64> = weights
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w;
            Some(*acc)
        })
        .collect();
    // Popularity rank differs from in-cluster position.
    let ranks: Vec<Vec<usize>> = (0..c.clusters)
        .map(|k| {
            let mut members: Vec<usize> = (k * c.tracks_per_cluster..(k + 1) * c.tracks_per_cluster).collect();
            rng.shuffle(&mut members);
            members
        })
        .collect();
    let mut appeal = vec![0.0; n_tracks];
    for members in &ranks {
        for (r, &t) in members.iter().enumerate() {
            appeal[t] = weights[r];
        }
    }

    let mut metadata = UserMetadata::default();
    let mut cohorts = Vec::with_capacity(c.users);
    let mut events = Vec::new();
    let mut transitions = Vec::new();
    let uwidth = c.users.to_string().len().max(3);
    for u in 0..c.users {
        let user = format!("user{:0width$}", u, width = uwidth);
        let roll = rng.unit();
        let (cohort, score) = if roll < c.at_risk_fraction {
            (SyntheticCohort::AtRisk, 29 + rng.index(22) as u32)
        } else if roll < c.at_risk_fraction + c.no_risk_fraction {
            (SyntheticCohort::NoRisk, 10 + rng.index(10) as u32)
        } else {
            (SyntheticCohort::Neither, 20 + rng.index(9) as u32)
        };
        metadata.scores.insert(user.clone(), score);
        cohorts.push((user.clone(), cohort));
        let repeat = if cohort == SyntheticCohort::AtRisk {
            c.base_repeat_prob * c.repetition_multiplier
        } else {
            c.base_repeat_prob
        };
        let favorites: Vec<usize> = (0..c.favorite_clusters.min(c.clusters))
            .map(|_| rng.index(c.clusters))
            .collect();

        let mut ts = c.start_timestamp + rng.index(86_400) as i64;
        for _ in 0..c.sessions_per_user {
            let len = c.min_session_len + rng.index(c.max_session_len - c.min_session_len + 1);
            let mut cluster = if !favorites.is_empty() && rng.bernoulli(c.favorite_bias) {
                favorites[rng.index(favorites.len())]
            } else {
                rng.index(c.clusters)
            };
            let mut played: Vec<usize> = Vec::with_capacity(len);
            for pos in 0..len {
                if pos > 0 {
                    let prev = cluster;
                    if !rng.bernoulli(c.beta_m) {
                        let other = rng.index(c.clusters - 1);
                        cluster = if other >= prev { other + 1 } else { other };
                    }
                    transitions.push((prev, cluster));
                }
                let replay: Vec<usize> = played.iter().copied().filter(|&t| cluster_of(t) == cluster).collect();
                let track = if !replay.is_empty() && rng.bernoulli(repeat) {
                    // Replays favour the tracks with the most appeal.
                    let cum: Vec<f64> = replay
                        .iter()
                        .scan(0.0, |acc, &t| {
                            *acc += appeal[t];
                            Some(*acc)
                        })
                        .collect();
                    replay[rng.cumulative_index(&cum)]
                } else {
                    ranks[cluster][rng.cumulative_index(&cumulative)]
                };
                played.push(track);
                let (artist, title) = artist_title(track);
                events.push((user.clone(), artist, title, ts));
                ts += 150 + rng.index(150) as i64;
            }
            ts += 3 * 3600 + rng.index(4 * 86_400) as i64;
        }
    }

    let tracks: Vec<(String, usize)> = (0..n_tracks)
        .map(|t| {
            let (a, b) = artist_title(t);
            (crate::sessions::track_key(&a, &b), cluster_of(t))
        })
        .collect();

    let profiles: Vec<ClusterProfile> = (0..c.clusters)
        .map(|_| {
            let mut unit = [0.0; 7];
            unit.iter_mut().for_each(|v| *v = rng.uniform(0.1, 0.9));
            ClusterProfile {
                unit,
                loudness: rng.uniform(-20.0, -4.0),
                tempo: rng.uniform(70.0, 170.0),
                duration: rng.uniform(150_000.0, 300_000.0),
                major: if rng.bernoulli(0.5) { 0.8 } else { 0.2 },
            }
        })
        .collect();
    let mut features = Vec::new();
    for (t, (key, k)) in tracks.iter().enumerate() {
        let f = draw_features(&profiles[*k], &mut rng);
        if rng.bernoulli(c.acoustic_coverage) {
            features.push((key.clone(), f));
        }
        let _ = t;
    }

    let modality = |dim: usize, coverage: f64, kind: VectorKind, rng: &mut SeededRng| {
        let centers: Vec<Vec<f64>> = (0..c.clusters)
            .map(|_| (0..dim).map(|_| rng.gaussian(0.0, c.modality_center_scale)).collect())
            .collect();
        let mut records = Vec::new();
        for (key, k) in &tracks {
            let v: Vec<f64> = centers[*k]
                .iter()
                .map(|m| m + rng.gaussian(0.0, c.modality_noise))
                .collect();
            if rng.bernoulli(coverage) {
                records.push((key.clone(), v));
            }
        }
        VectorFile { dim, kind, records }
    };
    let lyrics = modality(c.lyric_dim, c.lyric_coverage, VectorKind::Lyrics, &mut rng);
    let tags = modality(c.tag_dim, c.tag_coverage, VectorKind::Tags, &mut rng);

    Ok(SyntheticDataset {
        events,
        features,
        lyrics,
        tags,
        metadata,
        tracks,
        cohorts,
        transitions,
    })
}

/// File names written by [`SyntheticDataset::write_to`].
pub const EVENTS_FILE: &str = "events.tsv";
pub const FEATURES_FILE: &str = "features.csv";
pub const LYRICS_FILE: &str = "lyrics.vec";
pub const TAGS_FILE: &str = "tags.vec";
pub const USERS_FILE: &str = "users.csv";
pub const CLUSTERS_FILE: &str = "clusters.tsv";

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?))
}

impl SyntheticDataset {
    /// Writes every artifact into `dir` and returns the paths in a fixed order.
    pub fn write_to(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = |n: &str| dir.join(n);
        let mut out = Vec::new();

        let p = path(EVENTS_FILE);
        let mut w = create(&p)?;
        write_events(&mut w, &self.events)?;
        w.flush().map_err(|e| Error::io(&p, e))?;
        out.push(p);

        let p = path(FEATURES_FILE);
        write_features(create(&p)?, &self.features)?;
        out.push(p);

        for (name, file) in [(LYRICS_FILE, &self.lyrics), (TAGS_FILE, &self.tags)] {
            let p = path(name);
            let mut w = create(&p)?;
            write_vector_file(&mut w, file)?;
            w.flush().map_err(|e| Error::io(&p, e))?;
            out.push(p);
        }

        let p = path(USERS_FILE);
        let mut w = create(&p)?;
        write_user_metadata(&mut w, &self.metadata)?;
        w.flush().map_err(|e| Error::io(&p, e))?;
        out.push(p);

        let p = path(CLUSTERS_FILE);
        let mut w = create(&p)?;
        writeln!(w, "track_key\tcluster")?;
        for (key, k) in &self.tracks {
            writeln!(w, "{}\t{}", key, k)?;
        }
        w.flush().map_err(|e| Error::io(&p, e))?;
        out.push(p);
        Ok(out)
    }

    /// Fraction of within-session transitions that stay in the same cluster.
    pub fn self_transition_rate(&self) -> f64 {
        let stay = self.transitions.iter().filter(|(a, b)| a == b).count();
        stay as f64 / self.transitions.len().max(1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sessions::{parse_events, Dataset, ParseMode};

    fn vocab(keys: &[&str]) -> Vocabulary {
        Vocabulary::from_keys(keys.iter().map(|s| s.to_string())).unwrap()
    }

    #[test]
    fn vector_file_round_trip_and_errors() {
        let f = VectorFile {
            dim: 3,
            kind: VectorKind::Tags,
            records: vec![("a".into(), vec![0.1, -2.0, 3.5e-9]), ("b".into(), vec![1.0, 2.0, 3.0])],
        };
        let mut buf = Vec::new();
        write_vector_file(&mut buf, &f).unwrap();
        assert_eq!(read_vector_file(buf.as_slice()).unwrap(), f);
        let mixed = "dim=3 kind=lyrics\na\t1 2 3\nb\t1 2\n";
        assert!(matches!(read_vector_file(mixed.as_bytes()), Err(Error::Parse { line: 3, .. })));
        assert!(read_vector_file("dim=3 kind=audio\n".as_bytes()).is_err());
        assert!(read_vector_file("dim=2 kind=tags\na\t1 nan\n".as_bytes()).is_err());
    }

    #[test]
    fn lyrics_coverage_and_pass_through() {
        let v = vocab(&["a", "b", "c"]);
        let empty = VectorFile { dim: 4, kind: VectorKind::Lyrics, records: vec![] };
        let l = load_lyric_embeddings(&empty, &v, 2).unwrap();
        assert_eq!(l.coverage, 0.0);
        assert!(l.matrix.table.data().iter().all(|x| *x == 0.0));

        let reduced = VectorFile {
            dim: 2,
            kind: VectorKind::Lyrics,
            records: vec![("c".into(), vec![1.0, 2.0]), ("zzz".into(), vec![0.0, 0.0])],
        };
        let l = load_lyric_embeddings(&reduced, &v, 2).unwrap();
        assert!(l.pca.is_none());
        assert_eq!(l.matrix.row(2), &[1.0, 2.0]);
        assert_eq!(l.matrix.row(0), &[0.0, 0.0]);
        assert_eq!(l.unknown, vec!["zzz".to_string()]);
        assert!((l.coverage - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn lyrics_in_subspace_reconstruct_exactly() {
        let mut rng = SeededRng::new(1);
        let (d, r, n) = (40, 6, 30);
        let basis: Vec<Vec<f64>> = (0..r).map(|_| (0..d).map(|_| rng.normal()).collect()).collect();
        let keys: Vec<String> = (0..n).map(|i| format!("t{i}")).collect();
        let records: Vec<(String, Vec<f64>)> = keys
            .iter()
            .map(|k| {
                let mut v = vec![0.0; d];
                for b in &basis {
                    axpy(rng.normal(), b, &mut v);
                }
                (k.clone(), v)
            })
            .collect();
        let v = Vocabulary::from_keys(keys.iter().cloned().chain(["extra".to_string()])).unwrap();
        let file = VectorFile { dim: d, kind: VectorKind::Lyrics, records: records.clone() };
        let l = load_lyric_embeddings(&file, &v, r).unwrap();
        let pca = l.pca.as_ref().unwrap();
        for (i, (_, raw)) in records.iter().enumerate() {
            let back = pca.reconstruct(l.matrix.row(i));
            let err: f64 = back.iter().zip(raw).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!(err <= 1e-9, "{err}");
        }
        assert!(l.matrix.row(n).iter().all(|x| *x == 0.0));
    }

    #[test]
    fn tag_projection_properties() {
        let mut rng = SeededRng::new(2);
        let p = random_orthonormal_projection(30, 10, &mut rng).unwrap();
        for i in 0..10 {
            for j in 0..10 {
                let d = dot(p.row(i), p.row(j));
                assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
        let words: Vec<Vec<f64>> = (0..4).map(|_| (0..30).map(|_| rng.normal()).collect()).collect();
        let (mean, count) = average_vectors(&words).unwrap();
        assert_eq!(count, 4);
        let v = vocab(&["a", "b", "c"]);
        let file = VectorFile {
            dim: 30,
            kind: VectorKind::Tags,
            records: vec![("a".into(), mean.clone()), ("b".into(), mean.clone())],
        };
        let l = load_tag_embeddings(&file, &v, &p).unwrap();
        assert_eq!(l.matrix.row(0), l.matrix.row(1));
        assert!(l.matrix.row(2).iter().all(|x| *x == 0.0));
        for k in 0..10 {
            let proj_mean = words.iter().map(|w| dot(p.row(k), w)).sum::<f64>() / 4.0;
            assert!((proj_mean - l.matrix.row(0)[k]).abs() < 1e-12);
        }
        let zero = load_tag_embeddings(&file, &v, &Tensor::zeros(&[10, 30])).unwrap();
        assert!(zero.matrix.table.data().iter().all(|x| *x == 0.0));
        assert!(load_tag_embeddings(&file, &v, &Tensor::zeros(&[10, 29])).is_err());
    }

    #[test]
    fn cache_round_trip_and_staleness() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.emb");
        let v = vocab(&["a", "b"]);
        let mut rng = SeededRng::new(3);
        let m = EmbeddingMatrix::random(2, 5, &mut rng);
        cache_embeddings(&m, &path, &v).unwrap();
        assert_eq!(load_cached(&path, &v).unwrap(), m);
        assert!(matches!(load_cached(&path, &vocab(&["a", "c"])), Err(Error::VocabMismatch { .. })));
        fs::write(&path, "dim=five provenance=cbow vocab_hash=x\n0 1\n").unwrap();
        assert!(matches!(load_cached(&path, &v), Err(Error::Parse { line: 1, .. })));
    }

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            users: 30,
            clusters: 4,
            tracks_per_cluster: 20,
            lyric_dim: 12,
            tag_dim: 10,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn full_stickiness_keeps_sessions_in_one_cluster() {
        let cfg = SyntheticConfig { beta_m: 1.0, ..small() };
        let ds = generate_synthetic_dataset(&cfg).unwrap();
        assert_eq!(ds.self_transition_rate(), 1.0);
        let cluster: std::collections::HashMap<&str, usize> =
            ds.tracks.iter().map(|(k, c)| (k.as_str(), *c)).collect();
        let mut buf = Vec::new();
        write_events(&mut buf, &ds.events).unwrap();
        let parsed = parse_events(buf.as_slice(), ParseMode::Strict).unwrap();
        let data = Dataset::from_events(&parsed.events);
        assert_eq!(data.sessions.len(), 30 * cfg.sessions_per_user);
        for s in &data.sessions {
            let first = cluster[data.vocab.key(s.tracks[0]).unwrap()];
            assert!(s.tracks.iter().all(|&t| cluster[data.vocab.key(t).unwrap()] == first));
        }
    }

    #[test]
    fn self_transition_rate_tracks_beta() {
        let cfg = SyntheticConfig { users: 300, sessions_per_user: 8, ..small() };
        let ds = generate_synthetic_dataset(&cfg).unwrap();
        assert!(ds.transitions.len() >= 10_000);
        assert!((ds.self_transition_rate() - 0.8).abs() <= 0.02);
    }

    #[test]
    fn uniform_stickiness_gives_independent_clusters() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let cfg = SyntheticConfig { users: 300, sessions_per_user: 8, beta_m: 0.25, ..small() };
        let ds = generate_synthetic_dataset(&cfg).unwrap();
        let k = cfg.clusters;
        let mut table = vec![vec![0.0; k]; k];
        for (a, b) in &ds.transitions {
            table[*a][*b] += 1.0;
        }
        let n: f64 = ds.transitions.len() as f64;
        let rows: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
        let cols: Vec<f64> = (0..k).map(|j| table.iter().map(|r| r[j]).sum()).collect();
        let mut chi2 = 0.0;
        for i in 0..k {
            for j in 0..k {
                let e = rows[i] * cols[j] / n;
                chi2 += (table[i][j] - e).powi(2) / e;
            }
        }
        let p = 1.0 - ChiSquared::new(((k - 1) * (k - 1)) as f64).unwrap().cdf(chi2);
        assert!(p > 0.01, "chi2 {chi2} p {p}");
    }

    #[test]
    fn same_seed_same_bytes_and_valid_outputs() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let pa = generate_synthetic_dataset(&small()).unwrap().write_to(a.path()).unwrap();
        let pb = generate_synthetic_dataset(&small()).unwrap().write_to(b.path()).unwrap();
        for (x, y) in pa.iter().zip(&pb) {
            assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{}", x.display());
        }
        let feats = crate::acoustic::read_features(fs::File::open(a.path().join(FEATURES_FILE)).unwrap(), ParseMode::Strict).unwrap();
        assert_eq!(feats.records.len(), 80);
        let meta = crate::eval::read_user_metadata(fs::File::open(a.path().join(USERS_FILE)).unwrap()).unwrap();
        assert_eq!(meta.scores.len(), 30);
        let lyr = read_vector_file(BufReader::new(fs::File::open(a.path().join(LYRICS_FILE)).unwrap())).unwrap();
        assert_eq!(lyr.dim, 12);
        assert!(generate_synthetic_dataset(&SyntheticConfig { clusters: 0, ..small() }).is_err());
    }
}
