//! Acoustic features and the variational autoencoder that maps them into a
//! continuous latent space used to initialize the acoustic embedding table.

use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingMatrix, Provenance};
use crate::error::{Error, Result};
use crate::exec;
use crate::numerics::{axpy, matvec, matvec_t_add, outer_add, ParamStore, SeededRng, Tensor};
use crate::sessions::{canonical_key, ParseMode, Vocabulary};

pub const NUM_FEATURES: usize = 11;

/// Column order of the feature file after `track_key`.
pub const FEATURE_NAMES: [&str; NUM_FEATURES] = [
    "acousticness",
    "danceability",
    "duration_ms",
    "energy",
    "instrumentalness",
    "liveness",
    "loudness",
    "mode",
    "speechiness",
    "tempo",
    "valence",
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcousticFeatureVector {
    pub acousticness: f64,
    pub danceability: f64,
    pub duration_ms: f64,
    pub energy: f64,
    pub instrumentalness: f64,
    pub liveness: f64,
    pub loudness: f64,
    pub mode: f64,
    pub speechiness: f64,
    pub tempo: f64,
    pub valence: f64,
}

impl AcousticFeatureVector {
    pub fn from_array(a: [f64; NUM_FEATURES]) -> Self {
        AcousticFeatureVector {
            acousticness: a[0],
            danceability: a[1],
            duration_ms: a[2],
            energy: a[3],
            instrumentalness: a[4],
            liveness: a[5],
            loudness: a[6],
            mode: a[7],
            speechiness: a[8],
            tempo: a[9],
            valence: a[10],
        }
    }

    pub fn to_array(&self) -> [f64; NUM_FEATURES] {
        [
            self.acousticness,
            self.danceability,
            self.duration_ms,
            self.energy,
            self.instrumentalness,
            self.liveness,
            self.loudness,
            self.mode,
            self.speechiness,
            self.tempo,
            self.valence,
        ]
    }

    /// Checks the documented ranges of every feature.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let a = self.to_array();
        for (name, v) in FEATURE_NAMES.iter().zip(a) {
            if !v.is_finite() {
                return Err(format!("{} is not finite", name));
            }
        }
        for (name, v) in [
            ("acousticness", self.acousticness),
            ("danceability", self.danceability),
            ("energy", self.energy),
            ("instrumentalness", self.instrumentalness),
            ("liveness", self.liveness),
            ("speechiness", self.speechiness),
            ("valence", self.valence),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{} = {} outside [0, 1]", name, v));
            }
        }
        if !(-60.0..=0.0).contains(&self.loudness) {
            return Err(format!("loudness = {} dB outside [-60, 0]", self.loudness));
        }
        if self.tempo <= 0.0 {
            return Err(format!("tempo = {} must be positive", self.tempo));
        }
        if self.duration_ms <= 0.0 {
            return Err(format!("duration_ms = {} must be positive", self.duration_ms));
        }
        if self.mode != 0.0 && self.mode != 1.0 {
            return Err(format!("mode = {} must be 0 or 1", self.mode));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct FeatureFile {
    pub records: Vec<(String, AcousticFeatureVector)>,
    /// `(line, message)` for records skipped in lenient mode.
    pub skipped: Vec<(usize, String)>,
}

/// Reads `track_key,acousticness,...,valence` CSV. Out-of-range values are
/// fatal in strict mode and skipped in lenient mode.
pub fn read_features<R: Read>(reader: R, mode: ParseMode) -> Result<FeatureFile> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::parse(1, e.to_string()))?
        .clone();
    let expected: Vec<&str> = std::iter::once("track_key").chain(FEATURE_NAMES).collect();
    if headers.iter().map(str::trim).collect::<Vec<_>>() != expected {
        return Err(Error::parse(
            1,
            format!("expected header `{}`", expected.join(",")),
        ));
    }
    let mut out = FeatureFile::default();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::parse(line, e.to_string()))?;
        let parsed = (|| -> std::result::Result<(String, AcousticFeatureVector), String> {
            let key = canonical_key(rec.get(0).unwrap_or(""));
            if key.is_empty() {
                return Err("empty track_key".into());
            }
            let mut a = [0.0; NUM_FEATURES];
            for (j, slot) in a.iter_mut().enumerate() {
                let raw = rec.get(j + 1).unwrap_or("").trim();
                *slot = raw
                    .parse()
                    .map_err(|_| format!("{}: bad number `{}`", FEATURE_NAMES[j], raw))?;
            }
            let f = AcousticFeatureVector::from_array(a);
            f.validate()?;
            Ok((key, f))
        })();
        match parsed {
            Ok(r) => out.records.push(r),
            Err(m) if mode == ParseMode::Lenient => out.skipped.push((line, m)),
            Err(m) => return Err(Error::parse(line, m)),
        }
    }
    Ok(out)
}

pub fn write_features<W: std::io::Write>(
    w: W,
    records: &[(String, AcousticFeatureVector)],
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let header: Vec<&str> = std::iter::once("track_key").chain(FEATURE_NAMES).collect();
    wtr.write_record(&header).map_err(csv_err)?;
    for (key, f) in records {
        let mut row = vec![key.clone()];
        row.extend(f.to_array().iter().map(|v| format!("{:?}", v)));
        wtr.write_record(&row).map_err(csv_err)?;
    }
    wtr.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// Per-track feature rows aligned with the vocabulary; unknown keys ignored.
pub fn align_features(
    records: &[(String, AcousticFeatureVector)],
    vocab: &Vocabulary,
) -> Vec<Option<[f64; NUM_FEATURES]>> {
    let mut out = vec![None; vocab.len()];
    for (key, f) in records {
        if let Some(i) = vocab.index_of(key) {
            out[i] = Some(f.to_array());
        }
    }
    out
}

/// Z-scoring fitted on training tracks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStandardizer {
    pub mean: [f64; NUM_FEATURES],
    /// 1.0 for constant features, which are only centered.
    pub std: [f64; NUM_FEATURES],
    pub constant: [bool; NUM_FEATURES],
}

impl FeatureStandardizer {
    pub fn fit(rows: &[[f64; NUM_FEATURES]]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty("no feature rows to standardize".into()));
        }
        let n = rows.len() as f64;
        let mut mean = [0.0; NUM_FEATURES];
        for r in rows {
            for j in 0..NUM_FEATURES {
                mean[j] += r[j];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut std = [0.0; NUM_FEATURES];
        for r in rows {
            for j in 0..NUM_FEATURES {
                std[j] += (r[j] - mean[j]).powi(2);
            }
        }
        std.iter_mut().for_each(|v| *v /= n);
        let mut constant = [false; NUM_FEATURES];
        for j in 0..NUM_FEATURES {
            std[j] = std[j].sqrt();
            if !(std[j] > 1e-12 * mean[j].abs().max(1.0)) {
                constant[j] = true;
                std[j] = 1.0;
            }
        }
        Ok(FeatureStandardizer {
            mean,
            std,
            constant,
        })
    }

    pub fn transform(&self, x: &[f64; NUM_FEATURES]) -> [f64; NUM_FEATURES] {
        let mut out = [0.0; NUM_FEATURES];
        for j in 0..NUM_FEATURES {
            out[j] = (x[j] - self.mean[j]) / self.std[j];
        }
        out
    }

    pub fn inverse(&self, z: &[f64; NUM_FEATURES]) -> [f64; NUM_FEATURES] {
        let mut out = [0.0; NUM_FEATURES];
        for j in 0..NUM_FEATURES {
            out[j] = z[j] * self.std[j] + self.mean[j];
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub hidden_dim: usize,
    /// Weight of the KL term.
    pub beta: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// `log σ²` is clamped to `[-logvar_clamp, logvar_clamp]`.
    pub logvar_clamp: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            latent_dim: 150,
            hidden_dim: 64,
            beta: 0.01,
            lr: 1e-3,
            batch_size: 32,
            epochs: 40,
            logvar_clamp: 10.0,
        }
    }
}

/// Loss decomposition for one input. `total = recon + beta * kl`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VaeLoss {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
}

/// KL divergence of `N(mu, exp(logvar))` from the standard normal.
pub fn kl_divergence(mu: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(logvar)
        .map(|(m, lv)| m * m + lv.exp() - lv - 1.0)
        .sum::<f64>()
}

/// Encoder `11 -> hidden -> {mu, logvar}` and decoder `latent -> hidden -> 11`,
/// tanh on both hidden layers.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VaeParams {
    pub store: ParamStore,
    pub config: VaeConfig,
}

struct Pass {
    h1: Vec<f64>,
    mu: Vec<f64>,
    logvar_raw: Vec<f64>,
    logvar: Vec<f64>,
    z: Vec<f64>,
    h3: Vec<f64>,
    y: Vec<f64>,
}

fn linear(store: &ParamStore, name: &str, x: &[f64]) -> Vec<f64> {
    let w = store.get(&format!("{name}.w")).expect("registered");
    let b = store.get(&format!("{name}.b")).expect("registered");
    let mut out = b.data().to_vec();
    let mut tmp = vec![0.0; out.len()];
    matvec(w.data(), w.cols(), x, &mut tmp);
    axpy(1.0, &tmp, &mut out);
    out
}

impl VaeParams {
    pub fn new(config: VaeConfig, rng: &mut SeededRng) -> Self {
        let mut store = ParamStore::new();
        let (h, l) = (config.hidden_dim, config.latent_dim);
        for (name, out, inp) in [
            ("enc", h, NUM_FEATURES),
            ("mu", l, h),
            ("logvar", l, h),
            ("dec", h, l),
            ("out", NUM_FEATURES, h),
        ] {
            let bound = 1.0 / (inp as f64).sqrt();
            store.insert(
                format!("{name}.w"),
                Tensor::from_fn(&[out, inp], |_| rng.uniform(-bound, bound)),
            );
            store.insert(
                format!("{name}.b"),
                Tensor::from_fn(&[out], |_| rng.uniform(-bound, bound)),
            );
        }
        VaeParams { store, config }
    }

    /// Posterior mean and clamped log-variance for a standardized input.
    pub fn encode(&self, s: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if s.len() != NUM_FEATURES {
            return Err(Error::Shape(format!(
                "expected {} features, got {}",
                NUM_FEATURES,
                s.len()
            )));
        }
        if !s.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("vae input".into()));
        }
        let (h1, mu, _, logvar) = self.encode_parts(s);
        let _ = h1;
        Ok((mu, logvar))
    }

    fn encode_parts(&self, s: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let c = self.config.logvar_clamp;
        let h1: Vec<f64> = linear(&self.store, "enc", s).into_iter().map(f64::tanh).collect();
        let mu = linear(&self.store, "mu", &h1);
        let raw = linear(&self.store, "logvar", &h1);
        let logvar = raw.iter().map(|v| v.clamp(-c, c)).collect();
        (h1, mu, raw, logvar)
    }

    pub fn decode(&self, z: &[f64]) -> Vec<f64> {
        let h3: Vec<f64> = linear(&self.store, "dec", z).into_iter().map(f64::tanh).collect();
        linear(&self.store, "out", &h3)
    }

    fn forward(&self, s: &[f64], noise: &[f64]) -> Pass {
        let (h1, mu, logvar_raw, logvar) = self.encode_parts(s);
        let z: Vec<f64> = mu
            .iter()
            .zip(&logvar)
            .zip(noise)
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect();
        let h3: Vec<f64> = linear(&self.store, "dec", &z).into_iter().map(f64::tanh).collect();
        let y = linear(&self.store, "out", &h3);
        Pass {
            h1,
            mu,
            logvar_raw,
            logvar,
            z,
            h3,
            y,
        }
    }

    fn loss_of(&self, s: &[f64], pass: &Pass) -> VaeLoss {
        let recon = pass
            .y
            .iter()
            .zip(s)
            .map(|(y, x)| (y - x).powi(2))
            .sum::<f64>()
            / NUM_FEATURES as f64;
        let kl = kl_divergence(&pass.mu, &pass.logvar);
        VaeLoss {
            total: recon + self.config.beta * kl,
            recon,
            kl,
        }
    }

    /// Loss with the reparameterization noise supplied explicitly.
    pub fn loss_with_noise(&self, s: &[f64], noise: &[f64]) -> VaeLoss {
        let pass = self.forward(s, noise);
        self.loss_of(s, &pass)
    }

    /// Loss with `eps ~ N(0, I)` drawn from `rng`.
    pub fn loss(&self, s: &[f64], rng: &mut SeededRng) -> Result<VaeLoss> {
        self.encode(s)?;
        let noise: Vec<f64> = (0..self.config.latent_dim).map(|_| rng.normal()).collect();
        Ok(self.loss_with_noise(s, &noise))
    }

    /// Adds `scale * d(loss)/d(params)` into the store's gradient buffers.
    pub fn accumulate_gradients(&mut self, s: &[f64], noise: &[f64], scale: f64) -> VaeLoss {
        let pass = self.forward(s, noise);
        let loss = self.loss_of(s, &pass);
        let beta = self.config.beta;
        let c = self.config.logvar_clamp;
        let st = &mut self.store;

        let dy: Vec<f64> = pass
            .y
            .iter()
            .zip(s)
            .map(|(y, x)| scale * 2.0 * (y - x) / NUM_FEATURES as f64)
            .collect();
        outer_add(&dy, &pass.h3, st.grad_mut("out.w").unwrap().data_mut());
        axpy(1.0, &dy, st.grad_mut("out.b").unwrap().data_mut());
        let mut dh3 = vec![0.0; pass.h3.len()];
        {
            let w = st.get("out.w").unwrap();
            matvec_t_add(w.data(), w.cols(), &dy, &mut dh3);
        }
        let da3: Vec<f64> = dh3
            .iter()
            .zip(&pass.h3)
            .map(|(d, h)| d * (1.0 - h * h))
            .collect();
        outer_add(&da3, &pass.z, st.grad_mut("dec.w").unwrap().data_mut());
        axpy(1.0, &da3, st.grad_mut("dec.b").unwrap().data_mut());
        let mut dz = vec![0.0; pass.z.len()];
        {
            let w = st.get("dec.w").unwrap();
            matvec_t_add(w.data(), w.cols(), &da3, &mut dz);
        }
        let dmu: Vec<f64> = dz
            .iter()
            .zip(&pass.mu)
            .map(|(d, m)| d + scale * beta * m)
            .collect();
        let dlv: Vec<f64> = (0..dz.len())
            .map(|k| {
                let lv = pass.logvar[k];
                let raw = pass.logvar_raw[k];
                if raw <= -c || raw >= c {
                    return 0.0;
                }
                let sigma = (0.5 * lv).exp();
                dz[k] * noise[k] * 0.5 * sigma + scale * beta * 0.5 * (lv.exp() - 1.0)
            })
            .collect();
        outer_add(&dmu, &pass.h1, st.grad_mut("mu.w").unwrap().data_mut());
        axpy(1.0, &dmu, st.grad_mut("mu.b").unwrap().data_mut());
        outer_add(&dlv, &pass.h1, st.grad_mut("logvar.w").unwrap().data_mut());
        axpy(1.0, &dlv, st.grad_mut("logvar.b").unwrap().data_mut());
        let mut dh1 = vec![0.0; pass.h1.len()];
        {
            let w = st.get("mu.w").unwrap();
            matvec_t_add(w.data(), w.cols(), &dmu, &mut dh1);
            let w = st.get("logvar.w").unwrap();
            matvec_t_add(w.data(), w.cols(), &dlv, &mut dh1);
        }
        let da1: Vec<f64> = dh1
            .iter()
            .zip(&pass.h1)
            .map(|(d, h)| d * (1.0 - h * h))
            .collect();
        outer_add(&da1, s, st.grad_mut("enc.w").unwrap().data_mut());
        axpy(1.0, &da1, st.grad_mut("enc.b").unwrap().data_mut());
        loss
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainedVae {
    pub standardizer: FeatureStandardizer,
    pub params: VaeParams,
    /// Entry 0 is the mean loss before any update; entry `e` the mean batch
    /// loss of epoch `e`.
    pub loss_curve: Vec<f64>,
}

/// Fits the standardizer and trains the VAE with Adam on mini-batches.
pub fn train_vae(
    features: &[[f64; NUM_FEATURES]],
    config: &VaeConfig,
    rng: &mut SeededRng,
) -> Result<TrainedVae> {
    if features.len() < 2 {
        return Err(Error::Empty(format!(
            "need at least 2 tracks with acoustic features, got {}",
            features.len()
        )));
    }
    if config.batch_size == 0 || config.latent_dim == 0 || config.hidden_dim == 0 {
        return Err(Error::InvalidArgument(format!("bad vae config {:?}", config)));
    }
    let standardizer = FeatureStandardizer::fit(features)?;
    let data: Vec<[f64; NUM_FEATURES]> = features.iter().map(|f| standardizer.transform(f)).collect();
    let mut params = VaeParams::new(config.clone(), rng);
    let latent = config.latent_dim;

    let mut eval_rng = SeededRng::derive(rng.seed(), "vae-initial-loss");
    let initial = data
        .iter()
        .map(|s| params.loss(s, &mut eval_rng).map(|l| l.total))
        .sum::<Result<f64>>()?
        / data.len() as f64;
    let mut loss_curve = vec![initial];

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut noise = vec![0.0; latent];
    for _ in 0..config.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            params.store.zero_grads();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                noise.iter_mut().for_each(|e| *e = rng.normal());
                total += params.accumulate_gradients(&data[i], &noise, scale).total;
            }
            params.store.adam_step(config.lr)?;
        }
        loss_curve.push(total / data.len() as f64);
    }
    Ok(TrainedVae {
        standardizer,
        params,
        loss_curve,
    })
}

impl TrainedVae {
    /// Posterior mean of a raw feature vector.
    pub fn embed(&self, raw: &[f64; NUM_FEATURES]) -> Result<Vec<f64>> {
        Ok(self.params.encode(&self.standardizer.transform(raw))?.0)
    }
}

/// Row `t` is the posterior mean of track `t`'s standardized features; tracks
/// without features get a zero row.
pub fn export_acoustic_embeddings(
    model: &TrainedVae,
    features: &[Option<[f64; NUM_FEATURES]>],
) -> Result<EmbeddingMatrix> {
    let dim = model.params.config.latent_dim;
    let rows = exec::map(features, |f| match f {
        Some(raw) => model.embed(raw),
        None => Ok(vec![0.0; dim]),
    });
    let mut table = Tensor::zeros(&[features.len(), dim]);
    for (t, r) in rows.into_iter().enumerate() {
        table.row_mut(t).copy_from_slice(&r?);
    }
    EmbeddingMatrix::new(table, Provenance::Vae)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;

    fn small_config() -> VaeConfig {
        VaeConfig {
            latent_dim: 6,
            hidden_dim: 5,
            ..VaeConfig::default()
        }
    }

    fn sample_features(rng: &mut SeededRng) -> [f64; NUM_FEATURES] {
        AcousticFeatureVector {
            acousticness: rng.unit(),
            danceability: rng.unit(),
            duration_ms: rng.uniform(1.2e5, 4e5),
            energy: rng.unit(),
            instrumentalness: rng.unit(),
            liveness: rng.unit(),
            loudness: rng.uniform(-30.0, -2.0),
            mode: if rng.bernoulli(0.5) { 1.0 } else { 0.0 },
            speechiness: rng.unit(),
            tempo: rng.uniform(60.0, 180.0),
            valence: rng.unit(),
        }
        .to_array()
    }

    #[test]
    fn zero_weights_give_bias_mean() {
        let mut p = VaeParams::new(small_config(), &mut SeededRng::new(1));
        for name in ["enc.w", "mu.w", "mu.b", "logvar.w", "logvar.b"] {
            p.store.get_mut(name).unwrap().fill(0.0);
        }
        let (mu, lv) = p.encode(&[0.7; NUM_FEATURES]).unwrap();
        assert!(mu.iter().all(|m| *m == 0.0));
        assert!(lv.iter().all(|v| *v == 0.0));
        p.store.get_mut("mu.b").unwrap().fill(0.25);
        let (mu, _) = p.encode(&[0.7; NUM_FEATURES]).unwrap();
        assert!(mu.iter().all(|m| *m == 0.25));
    }

    #[test]
    fn encode_is_deterministic_and_clamped() {
        let mut rng = SeededRng::new(2);
        let mut p = VaeParams::new(small_config(), &mut rng);
        let s: Vec<f64> = (0..NUM_FEATURES).map(|_| rng.normal()).collect();
        assert_eq!(p.encode(&s).unwrap(), p.encode(&s).unwrap());
        p.store.get_mut("logvar.b").unwrap().fill(50.0);
        let (mu, lv) = p.encode(&s).unwrap();
        assert!(mu.iter().all(|m| m.is_finite()));
        assert!(lv.iter().all(|v| *v == 10.0));
        assert!(p.encode(&[f64::NAN; NUM_FEATURES]).is_err());
        assert!(p.encode(&[0.0; 3]).is_err());
    }

    #[test]
    fn kl_of_standard_normal_is_zero() {
        assert_eq!(kl_divergence(&[0.0; 4], &[0.0; 4]), 0.0);
        assert!(kl_divergence(&[0.3, -1.0], &[0.5, -2.0]) > 0.0);
    }

    #[test]
    fn perfect_reconstruction_has_zero_recon_term() {
        let mut rng = SeededRng::new(3);
        let mut p = VaeParams::new(small_config(), &mut rng);
        p.store.get_mut("out.w").unwrap().fill(0.0);
        let s = [0.4; NUM_FEATURES];
        p.store.get_mut("out.b").unwrap().fill(0.4);
        let l = p.loss(&s, &mut rng).unwrap();
        assert!(l.recon.abs() < 1e-30);
        assert!(l.total >= p.config.beta * l.kl && l.kl >= 0.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = SeededRng::new(4);
        let mut p = VaeParams::new(small_config(), &mut rng);
        let s: Vec<f64> = (0..NUM_FEATURES).map(|_| rng.normal()).collect();
        let noise: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        p.store.zero_grads();
        p.accumulate_gradients(&s, &noise, 1.0);
        let cfg = p.config.clone();
        let r = grad_check(&p.store, 1e-5, |st| {
            let probe = VaeParams {
                store: st.clone(),
                config: cfg.clone(),
            };
            Ok(probe.loss_with_noise(&s, &noise).total)
        })
        .unwrap();
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
    }

    #[test]
    fn standardizer_round_trip_and_constant_features() {
        let mut rng = SeededRng::new(5);
        let mut rows: Vec<[f64; NUM_FEATURES]> = (0..50).map(|_| sample_features(&mut rng)).collect();
        for r in rows.iter_mut() {
            r[7] = 1.0;
        }
        let st = FeatureStandardizer::fit(&rows).unwrap();
        assert!(st.constant[7] && !st.constant[0]);
        for r in &rows {
            let back = st.inverse(&st.transform(r));
            for j in 0..NUM_FEATURES {
                assert!((back[j] - r[j]).abs() <= 1e-12 * r[j].abs().max(1.0));
            }
            assert_eq!(st.transform(r)[7], 0.0);
        }
    }

    #[test]
    fn single_repeated_track_reconstructs() {
        let mut rng = SeededRng::new(6);
        let f = sample_features(&mut rng);
        let data = vec![f; 64];
        let cfg = VaeConfig {
            latent_dim: 8,
            hidden_dim: 8,
            epochs: 60,
            ..VaeConfig::default()
        };
        let trained = train_vae(&data, &cfg, &mut rng).unwrap();
        let last = *trained.loss_curve.last().unwrap();
        assert!(last < 0.05 * trained.loss_curve[0].max(1e-3) + 0.05, "{:?}", trained.loss_curve);
    }

    #[test]
    fn training_is_deterministic_and_export_handles_missing() {
        let mut rng = SeededRng::new(7);
        let data: Vec<_> = (0..40).map(|_| sample_features(&mut rng)).collect();
        let cfg = VaeConfig {
            latent_dim: 4,
            hidden_dim: 6,
            epochs: 3,
            ..VaeConfig::default()
        };
        let a = train_vae(&data, &cfg, &mut SeededRng::new(1)).unwrap();
        let b = train_vae(&data, &cfg, &mut SeededRng::new(1)).unwrap();
        assert_eq!(a.loss_curve, b.loss_curve);
        let feats = vec![Some(data[0]), None, Some(data[0])];
        let e1 = export_acoustic_embeddings(&a, &feats).unwrap();
        let e2 = export_acoustic_embeddings(&b, &feats).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(e1.row(0), e1.row(2));
        assert!(e1.row(1).iter().all(|v| *v == 0.0));
        assert!(train_vae(&[], &cfg, &mut rng).is_err());
    }

    #[test]
    fn clustered_features_train_and_decode_stays_bounded() {
        let mut rng = SeededRng::new(9);
        let centers: Vec<[f64; NUM_FEATURES]> = (0..3).map(|_| sample_features(&mut rng)).collect();
        let data: Vec<[f64; NUM_FEATURES]> = (0..200)
            .map(|i| {
                let mut f = centers[i % 3];
                for (j, v) in f.iter_mut().enumerate() {
                    if j != 7 {
                        *v *= 1.0 + 0.05 * rng.normal();
                    }
                }
                f
            })
            .collect();
        let trained = train_vae(&data, &VaeConfig::default(), &mut rng).unwrap();
        let c = &trained.loss_curve;
        assert!(*c.last().unwrap() <= 0.8 * c[0], "{c:?}");

        let mu = trained.embed(&data[0]).unwrap();
        for _ in 0..1000 {
            let mut delta: Vec<f64> = mu.iter().map(|_| rng.normal()).collect();
            let n = crate::numerics::norm(&delta);
            let radius = 3.0 * rng.unit();
            delta.iter_mut().for_each(|d| *d *= radius / n);
            let z: Vec<f64> = mu.iter().zip(&delta).map(|(m, d)| m + d).collect();
            let y = trained.params.decode(&z);
            assert!(y.iter().all(|v| v.is_finite() && v.abs() <= 6.0), "{y:?}");
        }
    }

    #[test]
    fn feature_file_strict_and_lenient() {
        let mut rng = SeededRng::new(8);
        let recs = vec![
            ("a\u{241F}x".to_string(), AcousticFeatureVector::from_array(sample_features(&mut rng))),
            ("b\u{241F}y".to_string(), AcousticFeatureVector::from_array(sample_features(&mut rng))),
        ];
        let mut buf = Vec::new();
        write_features(&mut buf, &recs).unwrap();
        let back = read_features(buf.as_slice(), ParseMode::Strict).unwrap();
        assert_eq!(back.records, recs);

        let mut text = String::from_utf8(buf).unwrap();
        text.push_str("c,2.0,0.5,1000,0.5,0.5,0.5,-5,1,0.5,120,0.5\n");
        assert!(matches!(
            read_features(text.as_bytes(), ParseMode::Strict),
            Err(Error::Parse { line: 4, .. })
        ));
        let lenient = read_features(text.as_bytes(), ParseMode::Lenient).unwrap();
        assert_eq!(lenient.records.len(), 2);
        assert_eq!(lenient.skipped[0].0, 4);
        assert!(read_features("key,a\n".as_bytes(), ParseMode::Strict).is_err());
    }
}
