use std::collections::BTreeMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use upix_core::dataset::*;
use upix_core::evaluate::evaluate;
use upix_core::model::{init_params, ModelConfig};
use upix_core::objectives::*;
use upix_core::sampling::SamplerConfig;

fn main() {
    let a: Vec<String> = std::env::args().collect();
    let s1: usize = a[1].parse().unwrap();
    let s2: usize = a[2].parse().unwrap();
    let mu: f64 = a[3].parse().unwrap();
    let sigma: f64 = a[4].parse().unwrap();
    let lr: f64 = a[5].parse().unwrap();
    let batch: usize = a[6].parse().unwrap();
    let cfg = ModelConfig::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut params = init_params(&cfg, &mut rng);
    let net = FeatureNet::new(3, 8, 1);
    let weights = LossWeights::default();
    let hyper = TrainHyper { lr, batch_size: batch };
    let mut data = BTreeMap::new();
    data.insert(16, gen_synthetic_dataset(512, 16, 0).unwrap());
    let stage = |name: &str, steps: usize, sampler: TimestepSampler| StageConfig {
        name: name.into(), resolution: 16, steps,
        t2i_weight: 0.9, lm_weight: 0.1, condition_prob: 0.0, sampler,
    };
    let plan = StagePlan {
        stages: vec![
            stage("phase1", s1, TimestepSampler::LogitNormal { mu, sigma }),
        ],
        refine_steps: s2,
    };
    let t0 = std::time::Instant::now();
    run_stage_schedule(&cfg, &plan, &data, &mut params, &net, &weights, &hyper, 0, |_| {}).unwrap();
    println!("trained {s1}+{s2} steps lr {lr} batch {batch} LN({mu},{sigma})+uniform in {:?}", t0.elapsed());
    let train = &data[&16];
    let subset: Vec<DatasetRecord> = train.iter().filter(|r| r.tag == TaskTag::T2i).take(24).cloned().collect();
    let rep = evaluate(&cfg, &params, &net, &subset, &SamplerConfig { steps: 50 }, 4242).unwrap();
    println!("TRAIN accuracy {:.3} ({} clauses) flow {:.4}", rep.caption_accuracy, rep.clauses, rep.flow);
    let eval_records = gen_synthetic_dataset(64, 16, 9999).unwrap();
    for steps in [4usize, 8, 16, 28, 50] {
        let rep = evaluate(&cfg, &params, &net, &eval_records, &SamplerConfig { steps }, 9999).unwrap();
        println!("HELD-OUT accuracy @N={steps}: {:.3} ({} clauses) flow {:.4} lm {:.4}", rep.caption_accuracy, rep.clauses, rep.flow, rep.lm);
    }
}
