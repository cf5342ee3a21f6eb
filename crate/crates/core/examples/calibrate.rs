use std::collections::BTreeMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use upix_core::dataset::gen_synthetic_dataset;
use upix_core::evaluate::evaluate;
use upix_core::model::{init_params, ModelConfig};
use upix_core::objectives::*;
use upix_core::sampling::SamplerConfig;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("c6");
    match mode {
        "c6" => criterion6(),
        "c9" => criterion9(
            args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3000),
            args.get(3).and_then(|s| s.parse().ok()).unwrap_or(4e-3),
            args.get(4).and_then(|s| s.parse().ok()).unwrap_or(8),
        ),
        _ => eprintln!("unknown mode"),
    }
}

fn criterion6() {
    let start = Instant::now();
    let cfg = ModelConfig::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut params = init_params(&cfg, &mut rng);
    let mut opt = AdamState::new(&params);
    let net = FeatureNet::new(3, 8, 1);
    let weights = LossWeights::default();
    let hyper = TrainHyper { lr: 4e-3, batch_size: 8 };
    let records = gen_synthetic_dataset(32, 16, 0).unwrap();
    let items: Vec<BatchItem> = records.iter().map(BatchItem::from_record).collect();
    let sampler = TimestepSampler::LogitNormal { mu: 0.0, sigma: 1.0 };
    let mut first_flow = None;
    let mut first_lm = None;
    let (mut last_flow, mut last_lm) = (0.0, 0.0);
    for step in 0..500 {
        // round-robin batches of 8 over the 32 samples
        let at = (step * 8) % items.len();
        let batch: Vec<BatchItem> = (0..8).map(|i| items[(at + i) % items.len()].clone()).collect();
        let m = train_step(&cfg, &mut params, &mut opt, &net, &weights, &hyper, &sampler, &batch, &mut rng, step).unwrap();
        if first_flow.is_none() { first_flow = m.flow; first_lm = m.lm; }
        last_flow = m.flow.unwrap_or(f64::NAN);
        last_lm = m.lm.unwrap_or(f64::NAN);
        if step % 100 == 0 {
            println!("step {step}: flow {:.4} lm {:.4} ({:?})", last_flow, last_lm, start.elapsed());
        }
    }
    println!("C6: flow {:.4} -> {:.4} (ratio {:.3}), lm {:.4} -> {:.4} (bound {:.3}), wall {:?}",
        first_flow.unwrap(), last_flow, last_flow / first_flow.unwrap(),
        first_lm.unwrap(), last_lm, 0.5 * (259f64).ln(), start.elapsed());
}

fn criterion9(steps: usize, lr: f64, batch: usize) {
    let start = Instant::now();
    let cfg = ModelConfig::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut params = init_params(&cfg, &mut rng);
    let net = FeatureNet::new(3, 8, 1);
    let weights = LossWeights::default();
    let hyper = TrainHyper { lr, batch_size: batch };
    let mut data = BTreeMap::new();
    data.insert(16, gen_synthetic_dataset(512, 16, 0).unwrap());
    let plan = StagePlan {
        stages: vec![StageConfig {
            name: "c9".into(),
            resolution: 16,
            steps,
            t2i_weight: 0.8,
            lm_weight: 0.2,
            condition_prob: 0.0,
            sampler: TimestepSampler::LogitNormal { mu: 0.0, sigma: 1.0 },
        }],
        refine_steps: 0,
    };
    let mut last = None;
    run_stage_schedule(&cfg, &plan, &data, &mut params, &net, &weights, &hyper, 0, |r| {
        if r.step % 250 == 0 {
            println!("{} ({:?})", r.to_line(), start.elapsed());
        }
        last = Some(r.metrics);
    }).unwrap();
    println!("train done in {:?}; last: flow {:?} lm {:?}", start.elapsed(), last.unwrap().flow, last.unwrap().lm);

    let eval_records = gen_synthetic_dataset(64, 16, 9999).unwrap();
    let report = evaluate(&cfg, &params, &net, &eval_records, &SamplerConfig { steps: 50 }, 9999).unwrap();
    println!("C9 eval: flow {:.4} lm {:.4} accuracy {:.3} ({} prompts, {} clauses), wall {:?}",
        report.flow, report.lm, report.caption_accuracy, report.prompts, report.clauses, start.elapsed());
}
