use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use plid_core::config::TrainConfig;
use plid_core::corpus::{make_synthetic_dataset, SplitKind, SynthSpec};
use plid_core::evaluation::score_test_set;
use plid_core::exec::Execution;
use plid_core::model::ModelParams;
use plid_core::objective::{total_loss_and_grad, Example, StepNoise, TrainingProblem};
use plid_core::session::{BackendKind, Session};

fn fixture() -> (tempfile::TempDir, Session, TrainConfig) {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec::new(5, 6, 0.6, 20, 16, 7);
    make_synthetic_dataset(&spec, dir.path()).unwrap();
    let cfg = TrainConfig::desk();
    let session = Session::open(dir.path(), BackendKind::Synthetic, &cfg, Execution::Parallel).unwrap();
    (dir, session, cfg)
}

fn bench_loss(c: &mut Criterion) {
    let (_dir, session, cfg) = fixture();
    let seen = session.seen_classes().to_vec();
    let vocab = &session.dataset.vocab;
    let problem = TrainingProblem::new(
        session.backend.text(),
        seen.clone(),
        session.descriptions(&seen).unwrap(),
        vocab.num_states(),
        vocab.num_objects(),
        false,
        Execution::Parallel,
    )
    .unwrap();
    let params = ModelParams::init(session.backend.text(), vocab, cfg.context_len, cfg.seed).unwrap();
    let train = session.samples(SplitKind::Train);
    let settings = cfg.loss_settings();
    let noise = StepNoise::eval(cfg.eval_lambda());

    let mut group = c.benchmark_group("loss_and_grad");
    for size in [16usize, 64] {
        let batch: Vec<Example> = train
            .iter()
            .take(size)
            .map(|s| Example {
                views: session.features.image(&s.image_key).unwrap(),
                target: session.class_of(s.pair()).unwrap(),
            })
            .collect();
        for (name, exec) in [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)] {
            group.bench_with_input(BenchmarkId::new(name, size), &batch, |b, batch| {
                b.iter(|| total_loss_and_grad(&params, &problem, batch, &noise, &settings, exec).unwrap())
            });
        }
    }
    group.finish();
}

fn bench_scoring(c: &mut Criterion) {
    let (_dir, session, cfg) = fixture();
    let params =
        ModelParams::init(session.backend.text(), &session.dataset.vocab, cfg.context_len, cfg.seed).unwrap();
    let test = session.samples(SplitKind::Test);
    let candidates = session.dataset.split.closed_world_pairs();
    let mut group = c.benchmark_group("score_test_set");
    group.sample_size(20);
    for (name, exec) in [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)] {
        group.bench_function(name, |b| {
            b.iter(|| score_test_set(&params, &session, &test, &candidates, cfg.eval_lambda(), exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_loss, bench_scoring);
criterion_main!(benches);
