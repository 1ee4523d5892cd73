use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use mmrec::embedding::EmbeddingMatrix;
use mmrec::eval::{evaluate_hit_ratio, session_prefixes, Averaging, DEFAULT_KS};
use mmrec::exec::{set_execution, Execution};
use mmrec::fusion::{training_pairs, FusionModel, ModalityInit, ModelConfig, Mode};
use mmrec::numerics::SeededRng;
use mmrec::sessions::Session;

const VOCAB: usize = 500;

fn fixture() -> (FusionModel, Vec<Session>) {
    let mut rng = SeededRng::new(11);
    let cfg = ModelConfig {
        use_acoustic: true,
        use_lyrics: true,
        embed_dim: 64,
        hidden_dim: 64,
        fusion_dim: 128,
        ..ModelConfig::default()
    };
    let mut table = || EmbeddingMatrix::random(VOCAB, 64, &mut rng);
    let init = ModalityInit {
        track: table(),
        acoustic: Some(table()),
        lyrics: Some(table()),
        tags: None,
    };
    let model = FusionModel::new(cfg, &init, "bench", &mut rng).unwrap();
    let sessions = (0..40)
        .map(|u| Session {
            user_id: format!("u{u}"),
            tracks: (0..6).map(|_| rng.index(VOCAB)).collect(),
            start: 0,
            end: 0,
        })
        .collect();
    (model, sessions)
}

fn modes() -> Vec<(&'static str, Execution)> {
    let mut m = vec![("sequential", Execution::Sequential)];
    if cfg!(feature = "parallel") {
        m.push(("parallel", Execution::Parallel));
    }
    m
}

fn gradients(c: &mut Criterion) {
    let (mut model, sessions) = fixture();
    let tracks: Vec<Vec<usize>> = sessions.iter().map(|s| s.tracks.clone()).collect();
    let pairs = training_pairs(&tracks);
    let batch: Vec<_> = pairs.iter().filter(|p| p.prefix.len() == 3).take(32).copied().collect();
    let mut group = c.benchmark_group("batch_gradients");
    for (name, mode) in modes() {
        set_execution(mode);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| model.compute_gradients(&batch, Mode::Train { seed: 1, step: 0 }).unwrap())
        });
    }
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let (model, sessions) = fixture();
    let tasks = session_prefixes(&sessions);
    let mut group = c.benchmark_group("hit_ratio_eval");
    group.sample_size(10);
    for (name, mode) in modes() {
        set_execution(mode);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| evaluate_hit_ratio(&model, &tasks, &DEFAULT_KS, Averaging::Micro, "bench").unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, gradients, evaluation);
criterion_main!(benches);
