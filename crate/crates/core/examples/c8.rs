use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use upix_core::dataset::gen_synthetic_dataset;
use upix_core::distill::*;
use upix_core::model::{init_params, ModelConfig};
use upix_core::objectives::*;

fn main() {
    let teacher_steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(150);
    let distill_lr: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(4e-3);
    let t0 = std::time::Instant::now();
    let cfg = ModelConfig::toy();
    let resolution = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut teacher = init_params(&cfg, &mut rng);
    let mut opt = AdamState::new(&teacher);
    let net = FeatureNet::new(3, 8, 1);
    let weights = LossWeights::default();
    let hyper = TrainHyper { lr: 4e-3, batch_size: 8 };
    let records = gen_synthetic_dataset(32, resolution, 0).unwrap();
    let items: Vec<BatchItem> = records.iter().map(BatchItem::from_record).collect();
    let sampler = TimestepSampler::LogitNormal { mu: 0.0, sigma: 1.0 };
    for step in 0..teacher_steps {
        let at = (step * 8) % items.len();
        let batch: Vec<BatchItem> = (0..8).map(|i| items[(at + i) % items.len()].clone()).collect();
        train_step(&cfg, &mut teacher, &mut opt, &net, &weights, &hyper, &sampler, &batch, &mut rng, step).unwrap();
    }
    println!("teacher trained {} steps in {:?}", teacher_steps, t0.elapsed());
    let fake_lr: f64 = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(5e-4);
    let config = DistillConfig { steps: 300, lr: distill_lr, fake_lr, batch_size: 4, student_steps: 4, ..DistillConfig::default() };
    let probe_records = gen_synthetic_dataset(16, resolution, 123).unwrap();
    let before = flow_probe(&cfg, &teacher, &net, &probe_records, 55).unwrap();
    let (student, stream) = run_distillation(&cfg, &teacher, &records, &config, &net, 0, |step, m| {
        if step % 100 == 0 { println!("  {}", m.to_line(step)); }
    }).unwrap();
    let after = flow_probe(&cfg, &student, &net, &probe_records, 55).unwrap();
    println!("C8: probe {before:.4} -> {after:.4} (ratio {:.3}), dmd last {:.4}, wall {:?}",
        after / before, stream.last().unwrap().dmd, t0.elapsed());
}
