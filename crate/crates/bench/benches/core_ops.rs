use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use upix_core::attention::{attention_forward, build_hybrid_mask};
use upix_core::dataset::gen_synthetic_dataset;
use upix_core::model::{init_params, ModelConfig};
use upix_core::objectives::{
    train_step, AdamState, BatchItem, FeatureNet, LossWeights, TimestepSampler, TrainHyper,
};
use upix_core::sampling::{sample, SamplerConfig};
use upix_core::tensor::Tensor;
use upix_core::tokenize::SegmentKind;

fn bench_mask(c: &mut Criterion) {
    let mut kinds = vec![SegmentKind::Condition; 16];
    kinds.extend(vec![SegmentKind::Text; 24]);
    kinds.push(SegmentKind::Timestep);
    kinds.extend(vec![SegmentKind::Generation; 215]);
    c.bench_function("hybrid_mask_L256", |b| {
        b.iter(|| build_hybrid_mask(black_box(&kinds)).unwrap())
    });
}

fn bench_attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (h, l, d) = (4, 128, 16);
    let q = Tensor::randn(&[h, l, d], 1.0, &mut rng);
    let k = Tensor::randn(&[h, l, d], 1.0, &mut rng);
    let v = Tensor::randn(&[h, l, d], 1.0, &mut rng);
    let mut kinds = vec![SegmentKind::Text; 32];
    kinds.extend(vec![SegmentKind::Generation; 96]);
    let mask = build_hybrid_mask(&kinds).unwrap();
    c.bench_function("attention_forward_4x128x16", |b| {
        b.iter(|| attention_forward(black_box(&q), black_box(&k), black_box(&v), &mask).unwrap())
    });
}

fn bench_train_step(c: &mut Criterion) {
    let cfg = ModelConfig::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut params = init_params(&cfg, &mut rng);
    let mut opt = AdamState::new(&params);
    let net = FeatureNet::new(3, 8, 1);
    let weights = LossWeights::default();
    let hyper = TrainHyper {
        lr: 1e-3,
        batch_size: 4,
    };
    let records = gen_synthetic_dataset(4, 16, 0).unwrap();
    let batch: Vec<BatchItem> = records.iter().map(BatchItem::from_record).collect();
    let sampler = TimestepSampler::Uniform;
    c.bench_function("train_step_16x16_b4", |b| {
        b.iter(|| {
            train_step(
                &cfg, &mut params, &mut opt, &net, &weights, &hyper, &sampler, &batch, &mut rng, 0,
            )
            .unwrap()
        })
    });
}

fn bench_sample(c: &mut Criterion) {
    let cfg = ModelConfig::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let params = init_params(&cfg, &mut rng);
    let config = SamplerConfig { steps: 8 };
    c.bench_function("sample_16x16_8steps", |b| {
        b.iter(|| sample(&cfg, &params, b"red square center", &[], 16, &config, 0).unwrap())
    });
}

criterion_group!(
    benches,
    bench_mask,
    bench_attention,
    bench_train_step,
    bench_sample
);
criterion_main!(benches);
