use std::collections::BTreeMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use upix_core::dataset::*;
use upix_core::model::{init_params, ModelConfig};
use upix_core::objectives::*;
use upix_core::sampling::predict_clean_image;
use upix_core::tensor::Tensor;

fn main() {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let lr: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(4e-3);
    let mu: f64 = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(0.0);
    let sigma: f64 = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(1.0);
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
            name: "p".into(), resolution: 16, steps,
            t2i_weight: 0.9, lm_weight: 0.1, condition_prob: 0.0,
            sampler: TimestepSampler::LogitNormal { mu, sigma },
        }],
        refine_steps: 0,
    };
    run_stage_schedule(&cfg, &plan, &data, &mut params, &net, &weights, &hyper, 0, |_| {}).unwrap();
    println!("trained {steps} steps lr {lr} logitnormal({mu},{sigma})");

    let train = &data[&16];
    let t2i: Vec<&DatasetRecord> = train.iter().filter(|r| r.tag == TaskTag::T2i).collect();
    let mut noise_rng = ChaCha8Rng::seed_from_u64(42);

    // caption sensitivity at t=0 and t=0.5
    for t in [0.0, 0.3, 0.5] {
        let eps = Tensor::randn(&[16, 16, 3], 1.0, &mut noise_rng);
        let r = t2i[0];
        let xt = if t == 0.0 { eps.clone() } else { upix_core::tokenize::interpolate(&r.target, &eps, t).unwrap() };
        let a = predict_clean_image(&cfg, &params, r.caption.as_bytes(), &[], &xt, t).unwrap();
        let b = predict_clean_image(&cfg, &params, t2i[1].caption.as_bytes(), &[], &xt, t).unwrap();
        let d = a.max_abs_diff(&b);
        println!("t={t}: caption-swap max-abs effect on x_hat: {d:.4}  (bitwise same: {})", a.bitwise_eq(&b));
    }

    // one-step MSE at t=0 against own target vs dataset-mean baseline
    let mut mse = 0.0; let mut n = 0;
    for r in t2i.iter().take(24) {
        let eps = Tensor::randn(&[16, 16, 3], 1.0, &mut noise_rng);
        let xhat = predict_clean_image(&cfg, &params, r.caption.as_bytes(), &[], &eps, 0.0).unwrap();
        mse += xhat.data().iter().zip(r.target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / xhat.numel() as f64;
        n += 1;
    }
    println!("one-step t=0 MSE (train): {:.4}", mse / n as f64);

    // train-prompt clause accuracy with full sampler
    let subset: Vec<DatasetRecord> = t2i.iter().take(24).map(|r| (*r).clone()).collect();
    let rep = upix_core::evaluate::evaluate(&cfg, &params, &net, &subset, &upix_core::sampling::SamplerConfig { steps: 50 }, 4242).unwrap();
    println!("TRAIN accuracy {:.3} ({} clauses)", rep.caption_accuracy, rep.clauses);
    let eval_records = gen_synthetic_dataset(64, 16, 9999).unwrap();
    let rep = upix_core::evaluate::evaluate(&cfg, &params, &net, &eval_records, &upix_core::sampling::SamplerConfig { steps: 50 }, 9999).unwrap();
    println!("HELD-OUT accuracy {:.3} ({} clauses)", rep.caption_accuracy, rep.clauses);
}
