use std::collections::BTreeMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use upix_core::dataset::*;
use upix_core::evaluate::evaluate;
use upix_core::model::{init_params, ModelConfig};
use upix_core::objectives::*;
use upix_core::sampling::{predict_clean_image, sample, SamplerConfig};
use upix_core::tensor::Tensor;

fn main() {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3000);
    let uniform: bool = std::env::args().nth(3).map(|s| s == "u").unwrap_or(false);
    let lr: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(4e-3);
    let cfg = ModelConfig::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut params = init_params(&cfg, &mut rng);
    let net = FeatureNet::new(3, 8, 1);
    let weights = LossWeights::default();
    let hyper = TrainHyper { lr, batch_size: 8 };
    let mut data = BTreeMap::new();
    data.insert(16, gen_synthetic_dataset(512, 16, 0).unwrap());
    let plan = StagePlan {
        stages: vec![StageConfig {
            name: "d".into(), resolution: 16, steps,
            t2i_weight: 0.8, lm_weight: 0.2, condition_prob: 0.0,
            sampler: if uniform { TimestepSampler::Uniform } else { TimestepSampler::LogitNormal { mu: 0.0, sigma: 1.0 } },
        }],
        refine_steps: 0,
    };
    run_stage_schedule(&cfg, &plan, &data, &mut params, &net, &weights, &hyper, 0, |_| {}).unwrap();
    println!("trained {steps} steps at lr {lr}");

    // One-step x-prediction from pure noise at t=0, train prompts:
    let train = &data[&16];
    let mut mse0 = 0.0;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(42);
    for r in train.iter().take(16).filter(|r| r.tag == TaskTag::T2i) {
        let eps = Tensor::randn(&[16, 16, 3], 1.0, &mut noise_rng);
        let xhat = predict_clean_image(&cfg, &params, r.caption.as_bytes(), &[], &eps, 0.0).unwrap();
        let d: f64 = xhat.data().iter().zip(r.target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / xhat.numel() as f64;
        mse0 += d;
    }
    println!("mean one-step MSE at t=0 (train prompts): {:.4}", mse0 / 16.0);

    // Per-t x-pred MSE on one train sample (interpolated x_t from TRUE target):
    let r = train.iter().find(|r| r.tag == TaskTag::T2i).unwrap();
    for t in [0.01, 0.1, 0.3, 0.5, 0.7, 0.9, 0.99] {
        let eps = Tensor::randn(&[16, 16, 3], 1.0, &mut noise_rng);
        let xt = upix_core::tokenize::interpolate(&r.target, &eps, t).unwrap();
        let xhat = predict_clean_image(&cfg, &params, r.caption.as_bytes(), &[], &xt, t).unwrap();
        let d: f64 = xhat.data().iter().zip(r.target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / xhat.numel() as f64;
        println!("  xpred MSE at t={t}: {d:.4}");
    }

    // Full-sampler accuracy on TRAIN prompts vs held-out:
    let train_subset: Vec<DatasetRecord> = train.iter().filter(|r| r.tag == TaskTag::T2i).take(32).cloned().collect();
    let rep_train = evaluate(&cfg, &params, &net, &train_subset, &SamplerConfig { steps: 50 }, 4242).unwrap();
    println!("TRAIN prompts: accuracy {:.3} over {} clauses (flow {:.4} lm {:.4})", rep_train.caption_accuracy, rep_train.clauses, rep_train.flow, rep_train.lm);
    let eval_records = gen_synthetic_dataset(64, 16, 9999).unwrap();
    let rep = evaluate(&cfg, &params, &net, &eval_records, &SamplerConfig { steps: 50 }, 9999).unwrap();
    println!("HELD-OUT prompts: accuracy {:.3} over {} clauses", rep.caption_accuracy, rep.clauses);

    // Show the sampler's trajectory MSE for one train prompt:
    let img = sample(&cfg, &params, r.caption.as_bytes(), &[], 16, &SamplerConfig { steps: 50 }, 7).unwrap();
    let d: f64 = img.data().iter().zip(r.target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / img.numel() as f64;
    println!("sampled-vs-target MSE (train prompt \"{}\"): {d:.4}", r.caption);
    // cell classification of the sample:
    for spec in parse_caption(&r.caption).unwrap() {
        let got = classify_cell(&img, spec.cell, 16);
        println!("  cell {}: want ({}, {}), got {:?}", CELL_NAMES[spec.cell], spec.shape.name(), COLOR_NAMES[spec.color], got.map(|(s, c)| (s.name(), COLOR_NAMES[c])));
    }
}
