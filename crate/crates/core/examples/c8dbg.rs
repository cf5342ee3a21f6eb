use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use upix_core::dataset::{gen_synthetic_dataset, TaskTag};
use upix_core::distill::*;
use upix_core::model::{init_params, ModelConfig};
use upix_core::objectives::*;
use upix_core::sampling::predict_clean_image;
use upix_core::tensor::Tensor;

fn main() {
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
    for step in 0..150 {
        let at = (step * 8) % items.len();
        let batch: Vec<BatchItem> = (0..8).map(|i| items[(at + i) % items.len()].clone()).collect();
        train_step(&cfg, &mut teacher, &mut opt, &net, &weights, &hyper, &sampler, &batch, &mut rng, step).unwrap();
    }

    // magnitudes at distillation start
    let mut nets = DistillNets::new(&cfg, teacher.clone(), &mut rng);
    let config = DistillConfig { steps: 300, lr: 4e-3, batch_size: 4, student_steps: 4, ..DistillConfig::default() };
    let pool: Vec<_> = records.iter().filter(|r| r.tag == TaskTag::T2i).collect();

    for outer in 0..3 {
        // fake updates like distill_step does
        let batch: Vec<_> = (0..4).map(|_| pool[rng.gen_range(0..pool.len())]).collect();
        let mut samples = Vec::new();
        for r in &batch {
            let noise = Tensor::randn(r.target.shape(), 1.0, &mut rng);
            let image = student_rollout(&cfg, &nets.student, r.caption.as_bytes(), &[], noise, 4).unwrap();
            samples.push(StudentSample { caption: r.caption.clone().into_bytes(), conditions: vec![], image });
        }
        for _ in 0..config.fake_ratio {
            update_fake_score(&cfg, &mut nets.fake, &mut nets.fake_opt, &net, &samples, config.lr, &mut rng).unwrap();
        }
        // measure numerator/normalizer on one sample
        let s = &samples[0];
        let t = 0.5;
        let eps = Tensor::randn(s.image.shape(), 1.0, &mut rng);
        let xt = upix_core::tokenize::interpolate(&s.image, &eps, t).unwrap();
        let xt_t = predict_clean_image(&cfg, &nets.teacher, &s.caption, &[], &xt, t).unwrap();
        let xt_f = predict_clean_image(&cfg, &nets.fake, &s.caption, &[], &xt, t).unwrap();
        let numer = xt_f.data().iter().zip(xt_t.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / xt_f.numel() as f64;
        let resid = xt_t.data().iter().zip(s.image.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / xt_t.numel() as f64;
        println!("outer {outer}: mean|fake-teacher| {numer:.4}, normalizer (teacher resid) {resid:.4}, |g| ~ {:.3}", numer / (resid + 1e-8));

        // per-term student gradient norms
        let items_b: Vec<BatchItem> = batch.iter().map(|r| BatchItem::from_record(r)).collect();
        let draws: Vec<StudentDraws> = items_b.iter().map(|item| {
            let shape = item.clean.as_ref().unwrap().shape().to_vec();
            StudentDraws {
                rollout_noise: Tensor::randn(&shape, 1.0, &mut rng),
                t_dmd: sample_timestep(&TimestepSampler::Uniform, &mut rng).unwrap(),
                eps_dmd: Tensor::randn(&shape, 1.0, &mut rng),
                diff_draw: ItemDraw { t: sample_timestep(&TimestepSampler::Uniform, &mut rng).unwrap(), noise: Some(Tensor::randn(&shape, 1.0, &mut rng)) },
                t_adv: sample_timestep(&TimestepSampler::Uniform, &mut rng).unwrap(),
                eps_adv: Tensor::randn(&shape, 1.0, &mut rng),
            }
        }).collect();
        let norm_of = |ld: f64, la: f64| {
            let c = DistillConfig { lambda_diff: ld, lambda_adv: la, ..config };
            let (g, m) = student_gradients(&cfg, &nets.teacher, &nets.student, &nets.fake, &nets.disc, &net, &c, &items_b, &draws).unwrap();
            let norm: f64 = g.values().map(|t| t.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
            (norm, m)
        };
        let (n_dmd, m) = norm_of(0.0, 0.0);
        let (n_all, _) = norm_of(0.25, 0.01);
        println!("  grad norms: dmd-only {n_dmd:.3}, full {n_all:.3}; metrics dmd {:.3} diff {:.3} adv {:.3}", m.dmd, m.diff, m.adv);
    }
}
