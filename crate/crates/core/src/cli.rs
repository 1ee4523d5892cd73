//! Pipeline orchestration behind the `mmrec` binary: `synth`, `prepare`,
//! `train`, `eval` and `report`, all driven by one [`RunConfig`].
//!
//! Work directory layout:
//!
//! ```text
//! data/       synthetic inputs written by `synth`
//! prepared/   manifest.json, vocab, session splits, embedding caches
//! models/     <variant>.ckpt and <variant>.loss.jsonl
//! reports/    eval/cohorts tables (.txt) and records (.jsonl), summary.txt
//! ```

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::acoustic::{align_features, export_acoustic_embeddings, read_features, train_vae, VaeConfig};
use crate::embedding::{EmbeddingMatrix, Provenance};
use crate::eval::{
    cohort_evaluate, evaluate_hit_ratio, iterate_test_prefixes, read_user_metadata, render_report,
    Averaging, Cohort, HitRatioReport, UniformRanker, UserMetadata, DEFAULT_KS,
};
use crate::fusion::{train_model, FusionModel, ModalityInit, ModelConfig, Variant};
use crate::ingest::{
    self, cache_embeddings, generate_synthetic_dataset, load_cached, load_lyric_embeddings,
    load_tag_embeddings, random_orthonormal_projection, read_vector_file, SyntheticConfig,
};
use crate::numerics::{derive_seed, SeededRng};
use crate::pretrain::{init_unseen_tracks, train_cbow, train_lsa_embeddings, CbowConfig, SessionTrackMatrix};
use crate::sessions::{
    compute_stats, parse_events, read_sessions, split_train_test, write_sessions, Dataset, DatasetSplit,
    ParseMode, Session, UserSplit, Vocabulary,
};

pub type Result<T> = anyhow::Result<T>;

pub const WORK_DIR_ENV: &str = "MMREC_WORK_DIR";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub events: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub lyrics: Option<PathBuf>,
    pub tags: Option<PathBuf>,
    pub metadata: Option<PathBuf>,
    pub work_dir: PathBuf,
}

/// Optional preparation stages. A stage whose input path is unset is skipped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stages {
    pub lsa: bool,
    pub acoustic: bool,
    pub lyrics: bool,
    pub tags: bool,
}

impl Default for Stages {
    fn default() -> Self {
        Stages {
            lsa: true,
            acoustic: true,
            lyrics: true,
            tags: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub ks: Vec<usize>,
    /// Skip malformed event/feature records instead of failing.
    pub lenient: bool,
    pub paths: Paths,
    pub stages: Stages,
    pub model: ModelConfig,
    pub cbow: CbowConfig,
    pub vae: VaeConfig,
    pub synthetic: SyntheticConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            ks: DEFAULT_KS.to_vec(),
            lenient: false,
            paths: Paths {
                work_dir: PathBuf::from("work"),
                ..Paths::default()
            },
            stages: Stages::default(),
            model: ModelConfig::default(),
            // Session corpora are tiny next to text corpora, so CBOW needs
            // many more passes than the usual five.
            cbow: CbowConfig {
                epochs: 100,
                ..CbowConfig::default()
            },
            vae: VaeConfig::default(),
            synthetic: SyntheticConfig::default(),
        }
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Applies a TOML file on top of `self`; keys present in the file win.
    pub fn with_file(self, path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).with_context(|| format!("config {}", path.display()))?;
        let over: toml::Value = text
            .parse()
            .with_context(|| format!("config {}: invalid TOML", path.display()))?;
        let mut base = toml::Value::try_from(&self).context("serializing run config")?;
        merge(&mut base, over);
        base.try_into()
            .with_context(|| format!("config {}: bad field", path.display()))
    }

    pub fn parse_mode(&self) -> ParseMode {
        if self.lenient {
            ParseMode::Lenient
        } else {
            ParseMode::Strict
        }
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, stage)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.paths.work_dir.join("data")
    }

    pub fn prepared_dir(&self) -> PathBuf {
        self.paths.work_dir.join("prepared")
    }

    pub fn models_dir(&self) -> PathBuf {
        self.paths.work_dir.join("models")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.paths.work_dir.join("reports")
    }

    /// Explicit path, else the synthetic default when that file exists.
    fn input(&self, explicit: &Option<PathBuf>, default_name: &str) -> Option<PathBuf> {
        explicit.clone().or_else(|| {
            let p = self.data_dir().join(default_name);
            p.exists().then_some(p)
        })
    }

    pub fn events_path(&self) -> PathBuf {
        self.paths
            .events
            .clone()
            .unwrap_or_else(|| self.data_dir().join(ingest::EVENTS_FILE))
    }

    pub fn metadata_path(&self) -> Option<PathBuf> {
        self.input(&self.paths.metadata, ingest::USERS_FILE)
    }
}

fn stage_err(stage: &str, path: &Path) -> String {
    format!("stage `{}`: {}", stage, path.display())
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let f = fs::File::create(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(())
}

fn open(path: &Path) -> Result<BufReader<fs::File>> {
    let f = fs::File::open(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(BufReader::new(f))
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn fingerprint(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("config serializes")
}

// ---------------------------------------------------------------- synth

#[derive(Clone, Debug)]
pub struct SynthSummary {
    pub files: Vec<PathBuf>,
    pub table: String,
}

/// Generates the synthetic dataset into `out` (default `<work>/data`).
pub fn cmd_synth(cfg: &RunConfig, out: Option<&Path>) -> Result<SynthSummary> {
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.data_dir());
    let data = generate_synthetic_dataset(&cfg.synthetic).context("stage `synth`")?;
    let files = data
        .write_to(&dir)
        .with_context(|| stage_err("synth", &dir))?;
    let events = parse_events(open(&files[0])?, ParseMode::Strict)
        .with_context(|| stage_err("synth", &files[0]))?;
    let dataset = Dataset::from_events(&events.events);
    let table = compute_stats(&dataset.sessions).render();
    Ok(SynthSummary { files, table })
}

// -------------------------------------------------------------- prepare

pub const MANIFEST_FILE: &str = "manifest.json";
pub const VOCAB_FILE: &str = "vocab.tsv";
pub const TRAIN_FILE: &str = "sessions.train.tsv";
pub const TEST_FILE: &str = "sessions.test.tsv";
pub const STATS_FILE: &str = "stats.txt";
pub const VAE_FILE: &str = "vae.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub files: Vec<String>,
    pub fingerprint: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub vocab_hash: String,
    pub artifacts: BTreeMap<String, ArtifactEntry>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Manifest> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path)
            .with_context(|| format!("{} (run `prepare` first)", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("{}: corrupt manifest", path.display()))
    }

    fn fresh(&self, dir: &Path, stage: &str, fp: &str) -> bool {
        self.artifacts
            .get(stage)
            .map(|a| a.fingerprint == fp && a.files.iter().all(|f| dir.join(f).exists()))
            .unwrap_or(false)
    }

    pub fn has(&self, stage: &str) -> bool {
        self.artifacts.contains_key(stage)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PrepareSummary {
    pub built: Vec<String>,
    pub reused: Vec<String>,
    pub stats: String,
}

/// Vocabulary and split restored from the prepared directory.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub manifest: Manifest,
    pub vocab: Vocabulary,
    pub split: DatasetSplit,
}

fn regroup(train: Vec<Session>, test: Vec<Session>) -> DatasetSplit {
    let mut users: BTreeMap<String, UserSplit> = BTreeMap::new();
    for (s, is_train) in train.into_iter().map(|s| (s, true)).chain(test.into_iter().map(|s| (s, false))) {
        let u = users.entry(s.user_id.clone()).or_insert_with(|| UserSplit {
            user_id: s.user_id.clone(),
            ..UserSplit::default()
        });
        if is_train {
            u.train.push(s);
        } else {
            u.test.push(s);
        }
    }
    DatasetSplit {
        users: users.into_values().collect(),
    }
}

impl Prepared {
    pub fn load(cfg: &RunConfig) -> Result<Prepared> {
        let dir = cfg.prepared_dir();
        let manifest = Manifest::load(&dir)?;
        let vocab = Vocabulary::read(open(&dir.join(VOCAB_FILE))?)
            .with_context(|| dir.join(VOCAB_FILE).display().to_string())?;
        if vocab.hash() != manifest.vocab_hash {
            bail!(
                "{}: vocabulary hash {} does not match manifest {}",
                dir.join(VOCAB_FILE).display(),
                vocab.hash(),
                manifest.vocab_hash
            );
        }
        let read = |name: &str| -> Result<Vec<Session>> {
            let p = dir.join(name);
            read_sessions(open(&p)?).with_context(|| p.display().to_string())
        };
        let split = regroup(read(TRAIN_FILE)?, read(TEST_FILE)?);
        Ok(Prepared {
            manifest,
            vocab,
            split,
        })
    }

    pub fn train_tracks(&self) -> Vec<Vec<usize>> {
        self.split.train_sessions().map(|s| s.tracks.clone()).collect()
    }

    /// Cached table of a prepared stage.
    pub fn embedding(&self, cfg: &RunConfig, stage: &str) -> Result<EmbeddingMatrix> {
        let entry = self
            .manifest
            .artifacts
            .get(stage)
            .ok_or_else(|| anyhow!("no `{}` embeddings were prepared", stage))?;
        let path = cfg.prepared_dir().join(&entry.files[0]);
        load_cached(&path, &self.vocab).with_context(|| stage_err(stage, &path))
    }
}

fn emb_name(stage: &str) -> String {
    format!("{stage}.emb")
}

fn required_input(stage: &str, path: &Path) -> Result<String> {
    if !path.exists() {
        bail!("stage `{}`: input {} does not exist", stage, path.display());
    }
    file_digest(path).with_context(|| stage_err(stage, path))
}

/// Builds or reuses every prepared artifact. A stage is rebuilt only when its
/// fingerprint (input digests, configuration, derived seed) changed.
pub fn cmd_prepare(cfg: &RunConfig) -> Result<PrepareSummary> {
    let dir = cfg.prepared_dir();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let old = Manifest::load(&dir).unwrap_or_default();
    let mut manifest = Manifest::default();
    let mut summary = PrepareSummary::default();
    let d = cfg.model.embed_dim;

    // sessions
    let events_path = cfg.events_path();
    let events_digest = required_input("sessions", &events_path)?;
    let session_fp = fingerprint(&["sessions", &events_digest, &json(&cfg.lenient)]);
    let files = vec![VOCAB_FILE.to_string(), TRAIN_FILE.to_string(), TEST_FILE.to_string(), STATS_FILE.to_string()];
    let (vocab, split) = if old.fresh(&dir, "sessions", &session_fp) {
        summary.reused.push("sessions".into());
        let vocab = Vocabulary::read(open(&dir.join(VOCAB_FILE))?)?;
        let train = read_sessions(open(&dir.join(TRAIN_FILE))?)?;
        let test = read_sessions(open(&dir.join(TEST_FILE))?)?;
        (vocab, regroup(train, test))
    } else {
        let parsed = parse_events(open(&events_path)?, cfg.parse_mode())
            .with_context(|| stage_err("sessions", &events_path))?;
        for e in &parsed.skipped {
            log::warn!("{}: line {}: {}", events_path.display(), e.line, e.message);
        }
        let dataset = Dataset::from_events(&parsed.events);
        if dataset.sessions.is_empty() {
            bail!("stage `sessions`: {} yields no sessions", events_path.display());
        }
        let split = split_train_test(&dataset.sessions);
        let mut w = create(&dir.join(VOCAB_FILE))?;
        dataset.vocab.write(&mut w)?;
        w.flush()?;
        let mut w = create(&dir.join(TRAIN_FILE))?;
        write_sessions(&mut w, split.train_sessions())?;
        w.flush()?;
        let mut w = create(&dir.join(TEST_FILE))?;
        write_sessions(&mut w, split.test_sessions())?;
        w.flush()?;
        write_text(&dir.join(STATS_FILE), &compute_stats(&dataset.sessions).render())?;
        summary.built.push("sessions".into());
        (dataset.vocab, split)
    };
    let vocab_hash = vocab.hash();
    manifest.vocab_hash = vocab_hash.clone();
    manifest.artifacts.insert(
        "sessions".into(),
        ArtifactEntry {
            files,
            fingerprint: session_fp.clone(),
        },
    );
    summary.stats = fs::read_to_string(dir.join(STATS_FILE))?;
    let train: Vec<Vec<usize>> = split.train_sessions().map(|s| s.tracks.clone()).collect();
    let seen = split.train_track_mask(vocab.len());

    let mut stage = |name: &str,
                     fp: String,
                     extra: &[&str],
                     build: &mut dyn FnMut() -> Result<EmbeddingMatrix>|
     -> Result<()> {
        let mut files = vec![emb_name(name)];
        files.extend(extra.iter().map(|s| s.to_string()));
        if old.fresh(&dir, name, &fp) {
            summary.reused.push(name.into());
        } else {
            let m = build()?;
            let path = dir.join(emb_name(name));
            cache_embeddings(&m, &path, &vocab).with_context(|| stage_err(name, &path))?;
            summary.built.push(name.into());
        }
        manifest.artifacts.insert(
            name.into(),
            ArtifactEntry {
                files,
                fingerprint: fp,
            },
        );
        Ok(())
    };

    let cbow_cfg = CbowConfig {
        dim: d,
        ..cfg.cbow.clone()
    };
    let cbow_seed = cfg.stage_seed("prepare/cbow");
    stage(
        "cbow",
        fingerprint(&["cbow", &session_fp, &json(&cbow_cfg), &cbow_seed.to_string()]),
        &[],
        &mut || {
            let mut rng = SeededRng::new(cbow_seed);
            let out = train_cbow(&train, vocab.len(), &cbow_cfg, &mut rng).context("stage `cbow`")?;
            log::info!("cbow epoch losses {:?}", out.epoch_losses);
            let mut m = out.embeddings;
            init_unseen_tracks(&mut m, &seen, &mut rng);
            Ok(m)
        },
    )?;

    if cfg.stages.lsa {
        let lsa_seed = cfg.stage_seed("prepare/lsa");
        stage(
            "lsa",
            fingerprint(&["lsa", &session_fp, &d.to_string(), &lsa_seed.to_string()]),
            &[],
            &mut || {
                let counts = SessionTrackMatrix::from_sessions(&train, vocab.len());
                let mut m = train_lsa_embeddings(&counts, d).context("stage `lsa`")?;
                init_unseen_tracks(&mut m, &seen, &mut SeededRng::new(lsa_seed));
                Ok(m)
            },
        )?;
    }

    if cfg.stages.acoustic {
        if let Some(path) = cfg.input(&cfg.paths.features, ingest::FEATURES_FILE) {
            let digest = required_input("acoustic", &path)?;
            let vae_cfg = VaeConfig {
                latent_dim: d,
                ..cfg.vae.clone()
            };
            let seed = cfg.stage_seed("prepare/acoustic");
            let fp = fingerprint(&["acoustic", &session_fp, &digest, &json(&vae_cfg), &seed.to_string()]);
            let vae_path = dir.join(VAE_FILE);
            stage("acoustic", fp, &[VAE_FILE], &mut || {
                let file = read_features(open(&path)?, cfg.parse_mode()).with_context(|| stage_err("acoustic", &path))?;
                for (line, msg) in &file.skipped {
                    log::warn!("{}: line {}: {}", path.display(), line, msg);
                }
                let aligned = align_features(&file.records, &vocab);
                let rows: Vec<_> = aligned.iter().flatten().copied().collect();
                log::info!("acoustic coverage {}/{}", rows.len(), vocab.len());
                let vae = train_vae(&rows, &vae_cfg, &mut SeededRng::new(seed)).with_context(|| stage_err("acoustic", &path))?;
                let mut w = create(&vae_path)?;
                serde_json::to_writer(&mut w, &vae)?;
                w.flush()?;
                Ok(export_acoustic_embeddings(&vae, &aligned)?)
            })?;
        }
    }

    if cfg.stages.lyrics {
        if let Some(path) = cfg.input(&cfg.paths.lyrics, ingest::LYRICS_FILE) {
            let digest = required_input("lyrics", &path)?;
            let fp = fingerprint(&["lyrics", &session_fp, &digest, &d.to_string()]);
            stage("lyrics", fp, &[], &mut || {
                let file = read_vector_file(open(&path)?).with_context(|| stage_err("lyrics", &path))?;
                let loaded = load_lyric_embeddings(&file, &vocab, d).with_context(|| stage_err("lyrics", &path))?;
                log::info!("lyrics coverage {:.3}", loaded.coverage);
                Ok(loaded.matrix)
            })?;
        }
    }

    if cfg.stages.tags {
        if let Some(path) = cfg.input(&cfg.paths.tags, ingest::TAGS_FILE) {
            let digest = required_input("tags", &path)?;
            let seed = cfg.stage_seed("prepare/tags");
            let fp = fingerprint(&["tags", &session_fp, &digest, &d.to_string(), &seed.to_string()]);
            stage("tags", fp, &[], &mut || {
                let file = read_vector_file(open(&path)?).with_context(|| stage_err("tags", &path))?;
                let proj = random_orthonormal_projection(file.dim, d, &mut SeededRng::new(seed))
                    .with_context(|| stage_err("tags", &path))?;
                let loaded = load_tag_embeddings(&file, &vocab, &proj).with_context(|| stage_err("tags", &path))?;
                log::info!("tags coverage {:.3}", loaded.coverage);
                Ok(loaded.matrix)
            })?;
        }
    }

    let mut w = create(&dir.join(MANIFEST_FILE))?;
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(summary)
}

// ---------------------------------------------------------------- train

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub loss_curve: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct LossRecord {
    variant: String,
    epoch: usize,
    loss: f64,
}

/// Initial tables for a variant from the prepared caches.
pub fn variant_init(cfg: &RunConfig, prepared: &Prepared, variant: Variant, rng: &mut SeededRng) -> Result<ModalityInit> {
    let model_cfg = variant.configure(&cfg.model);
    let track = match variant.track_init() {
        Provenance::Random => EmbeddingMatrix::random(prepared.vocab.len(), cfg.model.embed_dim, rng),
        Provenance::Lsa => prepared.embedding(cfg, "lsa")?,
        _ => prepared.embedding(cfg, "cbow")?,
    };
    let mut init = ModalityInit::track_only(track);
    let need = |on: bool, stage: &str| -> Result<Option<EmbeddingMatrix>> {
        if !on {
            return Ok(None);
        }
        if !prepared.manifest.has(stage) {
            bail!(
                "variant `{}` needs {} embeddings, which `prepare` did not produce (missing input?)",
                variant,
                stage
            );
        }
        prepared.embedding(cfg, stage).map(Some)
    };
    init.acoustic = need(model_cfg.use_acoustic, "acoustic")?;
    init.lyrics = need(model_cfg.use_lyrics, "lyrics")?;
    init.tags = need(model_cfg.use_tags, "tags")?;
    Ok(init)
}

pub fn checkpoint_path(cfg: &RunConfig, variant: Variant) -> PathBuf {
    cfg.models_dir().join(format!("{}.ckpt", variant.name()))
}

pub fn cmd_train(cfg: &RunConfig, variant: Variant) -> Result<TrainSummary> {
    let prepared = Prepared::load(cfg).context("stage `train`")?;
    let stage = format!("train/{}", variant.name());
    let mut rng = SeededRng::new(cfg.stage_seed(&stage));
    let init = variant_init(cfg, &prepared, variant, &mut rng).with_context(|| format!("stage `{stage}`"))?;
    let model_cfg = variant.configure(&cfg.model);
    let trained = train_model(&prepared.train_tracks(), &init, &prepared.manifest.vocab_hash, &model_cfg, &mut rng)
        .with_context(|| format!("stage `{stage}`"))?;

    let ckpt = checkpoint_path(cfg, variant);
    let mut w = create(&ckpt)?;
    trained.model.save(&mut w).with_context(|| stage_err(&stage, &ckpt))?;
    w.flush()?;
    let mut records = String::new();
    for (i, loss) in trained.loss_curve.iter().enumerate() {
        records.push_str(&json(&LossRecord {
            variant: variant.name().into(),
            epoch: i + 1,
            loss: *loss,
        }));
        records.push('\n');
    }
    write_text(&ckpt.with_extension("loss.jsonl"), &records)?;
    Ok(TrainSummary {
        checkpoint: ckpt,
        loss_curve: trained.loss_curve,
    })
}

// ----------------------------------------------------------------- eval

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    /// Empty means every checkpoint in `models/`, in variant order.
    pub checkpoints: Vec<PathBuf>,
    pub cohorts: bool,
    pub random_baseline: bool,
    pub top_n: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct EvalSummary {
    pub reports: Vec<HitRatioReport>,
    pub cohort_reports: Vec<HitRatioReport>,
    pub table: String,
    pub cohort_table: Option<String>,
}

pub const EVAL_TABLE: &str = "eval.txt";
pub const EVAL_RECORDS: &str = "eval.jsonl";
pub const COHORT_TABLE: &str = "cohorts.txt";
pub const COHORT_RECORDS: &str = "cohorts.jsonl";
pub const SUMMARY_FILE: &str = "summary.txt";

fn discover_checkpoints(cfg: &RunConfig) -> Vec<PathBuf> {
    Variant::ALL
        .iter()
        .map(|v| checkpoint_path(cfg, *v))
        .filter(|p| p.exists())
        .collect()
}

fn label_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

pub fn load_checkpoint(path: &Path, vocab_hash: &str) -> Result<FusionModel> {
    FusionModel::load(open(path)?, Some(vocab_hash)).with_context(|| format!("stage `eval`: checkpoint {}", path.display()))
}

pub fn cmd_eval(cfg: &RunConfig, opts: &EvalOptions) -> Result<EvalSummary> {
    let prepared = Prepared::load(cfg).context("stage `eval`")?;
    let hash = &prepared.manifest.vocab_hash;
    let paths = if opts.checkpoints.is_empty() {
        discover_checkpoints(cfg)
    } else {
        opts.checkpoints.clone()
    };
    if paths.is_empty() && !opts.random_baseline {
        bail!("stage `eval`: no checkpoints in {}", cfg.models_dir().display());
    }
    let models = paths
        .iter()
        .map(|p| Ok((label_of(p), load_checkpoint(p, hash)?)))
        .collect::<Result<Vec<_>>>()?;
    let tasks = iterate_test_prefixes(&prepared.split);
    let random = UniformRanker {
        vocab_size: prepared.vocab.len(),
        seed: cfg.stage_seed("eval/random"),
    };

    let mut reports = Vec::new();
    if opts.random_baseline {
        reports.push(evaluate_hit_ratio(&random, &tasks, &cfg.ks, Averaging::Micro, "random")?);
    }
    for (label, m) in &models {
        reports.push(evaluate_hit_ratio(m, &tasks, &cfg.ks, Averaging::Micro, label).context("stage `eval`")?);
    }
    let rendered = render_report(&reports);
    write_text(&cfg.reports_dir().join(EVAL_TABLE), &rendered.table)?;
    write_text(&cfg.reports_dir().join(EVAL_RECORDS), &rendered.records)?;

    let mut cohort_reports = Vec::new();
    let mut cohort_table = None;
    if opts.cohorts {
        let meta_path = cfg
            .metadata_path()
            .ok_or_else(|| anyhow!("stage `eval`: --cohorts needs a user metadata file"))?;
        let meta: UserMetadata = read_user_metadata(open(&meta_path)?).with_context(|| stage_err("eval", &meta_path))?;
        let cohorts: Vec<Cohort> = [Cohort::at_risk(), Cohort::no_risk()]
            .into_iter()
            .map(|c| match opts.top_n {
                Some(n) => c.with_top_n(n),
                None => c,
            })
            .collect();
        for (label, m) in &models {
            let pairs: Vec<(Cohort, &FusionModel)> = cohorts.iter().map(|c| (c.clone(), m)).collect();
            for (name, r) in cohort_evaluate(&pairs, &prepared.split, &meta, &cfg.ks, label) {
                cohort_reports.push(r.with_context(|| format!("stage `eval`: cohort {name}"))?);
            }
        }
        let rendered = render_report(&cohort_reports);
        write_text(&cfg.reports_dir().join(COHORT_TABLE), &rendered.table)?;
        write_text(&cfg.reports_dir().join(COHORT_RECORDS), &rendered.records)?;
        cohort_table = Some(rendered.table);
    }
    Ok(EvalSummary {
        reports,
        cohort_reports,
        table: rendered.table,
        cohort_table,
    })
}

// --------------------------------------------------------------- report

/// Collects dataset stats, loss curves and evaluation tables into one file.
pub fn cmd_report(cfg: &RunConfig) -> Result<String> {
    let mut out = String::new();
    let stats = cfg.prepared_dir().join(STATS_FILE);
    out.push_str("Dataset\n");
    out.push_str(&fs::read_to_string(&stats).with_context(|| format!("stage `report`: {}", stats.display()))?);
    let curves: Vec<PathBuf> = Variant::ALL
        .iter()
        .map(|v| checkpoint_path(cfg, *v).with_extension("loss.jsonl"))
        .filter(|p| p.exists())
        .collect();
    if !curves.is_empty() {
        out.push_str("\nTraining loss (first -> last epoch)\n");
        for p in curves {
            let text = fs::read_to_string(&p)?;
            let recs = text
                .lines()
                .map(|l| serde_json::from_str::<LossRecord>(l))
                .collect::<std::result::Result<Vec<_>, _>>()
                .with_context(|| format!("stage `report`: {}", p.display()))?;
            if let (Some(a), Some(b)) = (recs.first(), recs.last()) {
                out.push_str(&format!("{:<32} {:.4} -> {:.4}\n", a.variant, a.loss, b.loss));
            }
        }
    }
    for (title, name) in [("HitRatio@k (%)", EVAL_TABLE), ("Cohorts (%)", COHORT_TABLE)] {
        let p = cfg.reports_dir().join(name);
        if p.exists() {
            out.push_str(&format!("\n{title}\n"));
            out.push_str(&fs::read_to_string(&p)?);
        }
    }
    write_text(&cfg.reports_dir().join(SUMMARY_FILE), &out)?;
    Ok(out)
}

// ------------------------------------------------------------------ args

#[derive(Debug, Parser)]
#[command(name = "mmrec", version, about = "Multimodal sequential music recommendation pipeline")]
pub struct Cli {
    /// TOML run configuration; its keys override flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, env = WORK_DIR_ENV)]
    pub work_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Comma-separated cutoffs, e.g. 10,20,30,40,50.
    #[arg(long, global = true, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset and print its statistics.
    Synth(SynthArgs),
    /// Sessionize, split and pretrain every embedding table.
    Prepare(PrepareArgs),
    /// Train one model variant.
    Train(TrainArgs),
    /// Score checkpoints on the test split.
    Eval(EvalArgs),
    /// Summarize everything in the work directory.
    Report,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory (default `<work>/data`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub users: Option<usize>,
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long)]
    pub tracks_per_cluster: Option<usize>,
    #[arg(long)]
    pub beta_m: Option<f64>,
    #[arg(long)]
    pub sessions_per_user: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[arg(long)]
    pub events: Option<PathBuf>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub lyrics: Option<PathBuf>,
    #[arg(long)]
    pub tags: Option<PathBuf>,
    #[arg(long)]
    pub lenient: bool,
    #[arg(long)]
    pub no_lsa: bool,
    #[arg(long)]
    pub no_acoustic: bool,
    #[arg(long)]
    pub no_lyrics: bool,
    #[arg(long)]
    pub no_tags: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub variant: Variant,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long = "checkpoint")]
    pub checkpoints: Vec<PathBuf>,
    /// Add at-risk / no-risk rows (needs user metadata).
    #[arg(long)]
    pub cohorts: bool,
    #[arg(long)]
    pub metadata: Option<PathBuf>,
    #[arg(long)]
    pub top_n: Option<usize>,
    #[arg(long)]
    pub random_baseline: bool,
}

impl Cli {
    /// Flags first, then the config file on top.
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(w) = &self.work_dir {
            cfg.paths.work_dir = w.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(ks) = &self.ks {
            cfg.ks = ks.clone();
        }
        match &self.command {
            Command::Synth(a) => {
                let s = &mut cfg.synthetic;
                a.users.map(|v| s.users = v);
                a.clusters.map(|v| s.clusters = v);
                a.tracks_per_cluster.map(|v| s.tracks_per_cluster = v);
                a.beta_m.map(|v| s.beta_m = v);
                a.sessions_per_user.map(|v| s.sessions_per_user = v);
            }
            Command::Prepare(a) => {
                let p = &mut cfg.paths;
                p.events = a.events.clone().or(p.events.take());
                p.features = a.features.clone().or(p.features.take());
                p.lyrics = a.lyrics.clone().or(p.lyrics.take());
                p.tags = a.tags.clone().or(p.tags.take());
                cfg.lenient |= a.lenient;
                cfg.stages.lsa &= !a.no_lsa;
                cfg.stages.acoustic &= !a.no_acoustic;
                cfg.stages.lyrics &= !a.no_lyrics;
                cfg.stages.tags &= !a.no_tags;
            }
            Command::Train(a) => {
                let m = &mut cfg.model;
                a.epochs.map(|v| m.epochs = v);
                a.lr.map(|v| m.lr = v);
                a.batch_size.map(|v| m.batch_size = v);
            }
            Command::Eval(a) => {
                if a.metadata.is_some() {
                    cfg.paths.metadata = a.metadata.clone();
                }
            }
            Command::Report => {}
        }
        match &self.config {
            Some(path) => cfg.with_file(path),
            None => Ok(cfg),
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    let cfg = cli.run_config()?;
    match &cli.command {
        Command::Synth(a) => {
            let s = cmd_synth(&cfg, a.out.as_deref())?;
            for f in &s.files {
                println!("wrote {}", f.display());
            }
            print!("{}", s.table);
        }
        Command::Prepare(_) => {
            let s = cmd_prepare(&cfg)?;
            for b in &s.built {
                println!("built  {b}");
            }
            for r in &s.reused {
                println!("reused {r}");
            }
            print!("{}", s.stats);
        }
        Command::Train(a) => {
            let s = cmd_train(&cfg, a.variant)?;
            for (i, l) in s.loss_curve.iter().enumerate() {
                println!("epoch {:>3}  loss {:.6}", i + 1, l);
            }
            println!("wrote {}", s.checkpoint.display());
        }
        Command::Eval(a) => {
            let s = cmd_eval(
                &cfg,
                &EvalOptions {
                    checkpoints: a.checkpoints.clone(),
                    cohorts: a.cohorts,
                    random_baseline: a.random_baseline,
                    top_n: a.top_n,
                },
            )?;
            print!("{}", s.table);
            if let Some(t) = s.cohort_table {
                println!();
                print!("{t}");
            }
        }
        Command::Report => print!("{}", cmd_report(&cfg)?),
    }
    Ok(())
}

/// Entry point shared by the binary and tests. Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_overrides_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "seed = 9\n[model]\nepochs = 2\n[paths]\nwork_dir = \"elsewhere\"\n").unwrap();
        let cli = Cli::try_parse_from(["mmrec", "--seed", "3", "--config", path.to_str().unwrap(), "train", "--variant", "annw", "--epochs", "7", "--lr", "0.01"]).unwrap();
        let cfg = cli.run_config().unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.model.epochs, 2);
        assert_eq!(cfg.model.lr, 0.01);
        assert_eq!(cfg.paths.work_dir, PathBuf::from("elsewhere"));
        fs::write(&path, "[model]\nepochs = \"many\"\n").unwrap();
        assert!(cli.run_config().is_err());
    }

    #[test]
    fn unknown_variant_is_a_usage_error() {
        assert_eq!(run(["mmrec", "train", "--variant", "annw+video"]), 2);
    }

    #[test]
    fn stage_seeds_are_stable_and_distinct() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.stage_seed("prepare/cbow"), RunConfig::default().stage_seed("prepare/cbow"));
        assert_ne!(cfg.stage_seed("prepare/cbow"), cfg.stage_seed("prepare/lsa"));
    }

    #[test]
    fn regroup_restores_split() {
        let s = |u: &str, t: i64| Session {
            user_id: u.into(),
            tracks: vec![0, 1],
            start: t,
            end: t,
        };
        let split = regroup(vec![s("b", 0), s("a", 1), s("a", 2)], vec![s("a", 3)]);
        assert_eq!(split.users.len(), 2);
        assert_eq!(split.users[0].user_id, "a");
        assert_eq!(split.users[0].train.len(), 2);
        assert_eq!(split.users[0].test.len(), 1);
    }
}
