use std::collections::BTreeMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use upix_core::dataset::gen_synthetic_dataset;
use upix_core::model::{init_params, ModelConfig};
use upix_core::objectives::*;

fn main() {
    let cfg = ModelConfig::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut params = init_params(&cfg, &mut rng);
    let net = FeatureNet::new(3, 8, 1);
    let weights = LossWeights::default();
    let hyper = TrainHyper { lr: 5e-3, batch_size: 24 };
    let mut data = BTreeMap::new();
    data.insert(16, gen_synthetic_dataset(32, 16, 0).unwrap());
    let plan = StagePlan {
        stages: vec![StageConfig {
            name: "main".into(), resolution: 16, steps: 300,
            t2i_weight: 0.9, lm_weight: 0.1, condition_prob: 0.0,
            sampler: TimestepSampler::LogitNormal { mu: -2.5, sigma: 0.8 },
        }],
        refine_steps: 200,
    };
    let t0 = std::time::Instant::now();
    let mut first_flow = None;
    let mut tail = Vec::new();
    let mut last_lm = f64::NAN;
    let mut count = 0usize;
    run_stage_schedule(&cfg, &plan, &data, &mut params, &net, &weights, &hyper, 0, |r| {
        if first_flow.is_none() { first_flow = r.metrics.flow; }
        if count >= 480 { if let Some(f) = r.metrics.flow { tail.push(f); } }
        if let Some(l) = r.metrics.lm { last_lm = l; }
        count += 1;
    }).unwrap();
    let first = first_flow.unwrap();
    let final_flow = tail.iter().sum::<f64>() / tail.len() as f64;
    println!("C6 phased: flow {first:.4} -> {final_flow:.4} (ratio {:.3}), lm {last_lm:.4} (bound {:.3}), wall {:?}",
        final_flow / first, 0.5 * 259f64.ln(), t0.elapsed());
}
