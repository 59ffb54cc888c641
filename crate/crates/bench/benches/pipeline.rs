use asd_bench::{clip, small_corpus, small_dims};
use asd_core::data::Condition;
use asd_core::dsp::{log_mel, MelConfig};
use asd_core::eval::{auc, pauc, ScoredClip};
use asd_core::features::{FeatureExtractor, TgramConfig, TgramParams};
use asd_core::losses::{LossConfig, LossVariant};
use asd_core::model::{init_params, ModelDims};
use asd_core::trainer::{train_with_dims, TrainConfig};
use criterion::{black_box, criterion_group, criterion_main, Criterion};

fn features(c: &mut Criterion) {
    let w = clip();
    let mel = MelConfig::default();
    c.bench_function("log_mel 2s", |b| b.iter(|| log_mel(black_box(&w), &mel).unwrap()));
    let fx = FeatureExtractor::new(mel.clone()).unwrap();
    let p = TgramParams::init(0, TgramConfig::for_mel(&mel));
    c.bench_function("feature stack 2s", |b| b.iter(|| fx.stack(black_box(&w), &p).unwrap()));
}

fn inference(c: &mut Criterion) {
    let w = clip();
    let dims = ModelDims::new(MelConfig::default(), 8);
    let model = init_params(0, &dims).unwrap();
    let fx = FeatureExtractor::new(dims.mel.clone()).unwrap();
    c.bench_function("default model inference 2s", |b| b.iter(|| model.infer(&fx, black_box(&w)).unwrap()));
}

fn metrics(c: &mut Criterion) {
    let clips: Vec<ScoredClip> = (0..10_000)
        .map(|i| ScoredClip {
            machine_type: "fan".into(),
            machine_id: 0,
            condition: if i % 3 == 0 { Condition::Anomaly } else { Condition::Normal },
            score: ((i * 7919) % 1000) as f64 / 1000.0,
        })
        .collect();
    c.bench_function("auc 10k", |b| b.iter(|| auc(black_box(&clips)).unwrap()));
    c.bench_function("pauc 10k", |b| b.iter(|| pauc(black_box(&clips), 0.1).unwrap()));
}

fn training(c: &mut Criterion) {
    let manifest = small_corpus();
    let dims = small_dims(manifest.n_classes());
    let config = TrainConfig {
        epochs: 1,
        batch_size: 8,
        learning_rate: 1e-3,
        loss: LossConfig {
            variant: LossVariant::NoisyArcmix,
            ..LossConfig::default()
        },
        ..TrainConfig::default()
    };
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("noisy_arcmix epoch, 32 clips", |b| {
        b.iter(|| train_with_dims(&manifest, &dims, &config).unwrap())
    });
    group.finish();
}

criterion_group!(benches, features, inference, metrics, training);
criterion_main!(benches);
