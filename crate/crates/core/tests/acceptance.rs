//! Acceptance suite: one test per criterion, each printing a PASS line with
//! its measured numbers. Run with `cargo test --test acceptance -- --nocapture`
//! to see the report.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use upix_core::attention::{apply_rope, build_hybrid_mask, RopeParams};
use upix_core::check::finite_difference_check;
use upix_core::checkpoint::{decode_checkpoint, encode_checkpoint};
use upix_core::dataset::gen_synthetic_dataset;
use upix_core::distill::{
    dmd_generator_gradient, flow_probe, init_disc_params, run_distillation, student_rollout,
    DistillConfig,
};
use upix_core::evaluate::evaluate;
use upix_core::model::{init_params, init_params_dense, ModelConfig};
use upix_core::objectives::{
    build_item_loss, draw_batch, lm_loss, perceptual_loss, run_stage_schedule, train_step,
    AdamState, BatchItem, FeatureNet, ItemDraw, LossWeights, StageConfig, StagePlan,
    TimestepSampler, TrainHyper,
};
use upix_core::params::{ParamNodes, ParamTree};
use upix_core::pixmap::{decode_ppm, encode_ppm};
use upix_core::sampling::{sample_with, SamplerConfig};
use upix_core::tensor::{patchify, unpatchify, Tensor};
use upix_core::tokenize::{decode_text_ids, encode_text_ids, DiffusionState, SegmentKind};
use upix_core::{NodeId, Tape};

/// Linear anchor term keeping every checked coordinate's gradient well
/// above finite-difference noise; exact under central differences.
fn anchored(tape: &mut Tape, nodes: &ParamNodes, data_loss: NodeId, seed: u64) -> NodeId {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = data_loss;
    let names: Vec<String> = nodes.iter().map(|(n, _)| n.clone()).collect();
    for name in names {
        let node = nodes.get(&name).unwrap();
        let shape = tape.value(node).shape().to_vec();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| {
                let mag = 1.0 + rng.gen::<f64>();
                if rng.gen::<bool>() {
                    mag
                } else {
                    -mag
                }
            })
            .collect();
        let r = tape.constant(Tensor::from_vec(shape, data).unwrap());
        let prod = tape.mul(node, r).unwrap();
        let s = tape.sum_all(prod).unwrap();
        total = tape.add(total, s).unwrap();
    }
    total
}

#[test]
fn criterion_1_mask_oracle_equivalence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let pool = [
        SegmentKind::Condition,
        SegmentKind::Text,
        SegmentKind::Timestep,
        SegmentKind::Generation,
    ];
    for _ in 0..1000 {
        let len = rng.gen_range(1..=32);
        let mut kinds: Vec<SegmentKind> = (0..len).map(|_| pool[rng.gen_range(0..4)]).collect();
        kinds.sort();
        let mask = build_hybrid_mask(&kinds).unwrap();
        // Brute-force evaluator: the two sentence-level rules applied
        // token-pair by token-pair.
        for i in 0..len {
            for j in 0..len {
                let expect = match kinds[i] {
                    SegmentKind::Generation => true,
                    _ => j <= i,
                };
                assert_eq!(mask.allowed(i, j), expect, "kinds {kinds:?} at ({i},{j})");
            }
        }
    }
    let wall = start.elapsed();
    assert!(wall.as_secs_f64() < 5.0, "took {wall:?}");
    println!("criterion 1 (mask oracle equivalence): PASS — 1000 sequences exact in {wall:?}");
}

#[test]
fn criterion_2_gradient_fidelity() {
    let start = Instant::now();

    // Full toy model: 1 block, D = 16, all loss terms, every parameter.
    let cfg = ModelConfig::gradcheck_tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let params = init_params_dense(&cfg, 0.25, &mut rng);
    let net = FeatureNet::new(cfg.channels, 8, 3);
    let clean = Tensor::randn(&[4, 4, 3], 0.5, &mut rng);
    let noise = Tensor::randn(&[4, 4, 3], 1.0, &mut rng);
    let cond = Tensor::randn(&[4, 4, 3], 0.5, &mut rng);
    let item = BatchItem {
        caption: b"A".to_vec(),
        clean: Some(clean),
        conditions: vec![cond],
    };
    let draw = ItemDraw {
        t: 0.42,
        noise: Some(noise),
    };
    let weights = LossWeights::default();
    let model_err = finite_difference_check(
        |tape, nodes| {
            let loss = build_item_loss(tape, &cfg, nodes, &net, &weights, &item, &draw)?;
            Ok(anchored(tape, nodes, loss.total, 52))
        },
        &params,
        1e-5,
    )
    .unwrap();
    assert!(model_err <= 1e-5, "full model: {model_err}");

    // Flow loss: targets offset from the prediction by at least 0.5 so no
    // coordinate gradient sits near the noise floor.
    let mut rng = ChaCha8Rng::seed_from_u64(201);
    let pred0 = Tensor::randn(&[8, 12], 0.5, &mut rng);
    let gap = pred0.map(|_| 0.0);
    let mut gap = gap;
    for v in gap.data_mut() {
        let mag = 0.5 + rng.gen::<f64>();
        *v = if rng.gen::<bool>() { mag } else { -mag };
    }
    let target = pred0.zip_map(&gap, |p, g| p + g).unwrap();
    let mut params_flow = ParamTree::new();
    params_flow.insert("pred", pred0);
    let flow_err = finite_difference_check(
        |tape, nodes| {
            let pred = nodes.get("pred")?;
            let t = tape.constant(target.clone());
            tape.mse(pred, t)
        },
        &params_flow,
        1e-5,
    )
    .unwrap();
    assert!(flow_err <= 1e-5, "flow: {flow_err}");

    // Perceptual loss with respect to the predicted image.
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let pred_img = Tensor::randn(&[8, 8, 3], 0.6, &mut rng);
    let target_img = Tensor::randn(&[8, 8, 3], 0.6, &mut rng);
    let mut params_perc = ParamTree::new();
    params_perc.insert("pred", pred_img);
    let pnet = FeatureNet::new(3, 8, 7);
    let perc_err = finite_difference_check(
        |tape, nodes| {
            let pred = nodes.get("pred")?;
            let t = tape.constant(target_img.clone());
            let loss = perceptual_loss(tape, &pnet, pred, t)?;
            Ok(anchored(tape, nodes, loss, 203))
        },
        &params_perc,
        1e-5,
    )
    .unwrap();
    assert!(perc_err <= 1e-5, "perceptual: {perc_err}");

    // LM loss with respect to the logits.
    let mut rng = ChaCha8Rng::seed_from_u64(204);
    let ids = encode_text_ids(b"hey");
    let logits0 = Tensor::randn(&[ids.len(), 259], 1.0, &mut rng);
    let mut params_lm = ParamTree::new();
    params_lm.insert("logits", logits0);
    let lm_err = finite_difference_check(
        |tape, nodes| {
            let logits = nodes.get("logits")?;
            let loss = lm_loss(tape, logits, &ids)?;
            Ok(anchored(tape, nodes, loss, 205))
        },
        &params_lm,
        1e-5,
    )
    .unwrap();
    assert!(lm_err <= 1e-5, "lm: {lm_err}");

    // Adversarial loss with respect to the discriminator heads.
    let mut rng = ChaCha8Rng::seed_from_u64(206);
    let teacher = init_params_dense(&cfg, 0.15, &mut rng);
    let disc = init_disc_params(&cfg, &mut rng);
    let real = Tensor::randn(&[4, 4, 3], 0.5, &mut rng);
    let fake_img = Tensor::randn(&[4, 4, 3], 0.5, &mut rng);
    let eps_r = Tensor::randn(&[4, 4, 3], 1.0, &mut rng);
    let eps_f = Tensor::randn(&[4, 4, 3], 1.0, &mut rng);
    let t_shared = 0.45;
    let noisy_r = upix_core::tokenize::interpolate(&real, &eps_r, t_shared).unwrap();
    let noisy_f = upix_core::tokenize::interpolate(&fake_img, &eps_f, t_shared).unwrap();
    let adv_err = finite_difference_check(
        |tape, disc_nodes| {
            let teacher_nodes = teacher.load_onto(tape, false);
            let nr = tape.constant(noisy_r.clone());
            let nf = tape.constant(noisy_f.clone());
            let lr = upix_core::distill::discriminator_logit(
                tape,
                &cfg,
                &teacher_nodes,
                disc_nodes,
                nr,
                t_shared,
            )?;
            let lf = upix_core::distill::discriminator_logit(
                tape,
                &cfg,
                &teacher_nodes,
                disc_nodes,
                nf,
                t_shared,
            )?;
            let neg_r = tape.neg(lr)?;
            let sp_r = tape.softplus(neg_r)?;
            let sp_f = tape.softplus(lf)?;
            let loss = tape.add(sp_r, sp_f)?;
            Ok(anchored(tape, disc_nodes, loss, 207))
        },
        &disc,
        1e-5,
    )
    .unwrap();
    assert!(adv_err <= 1e-5, "adversarial: {adv_err}");

    let wall = start.elapsed();
    assert!(wall.as_secs_f64() < 120.0, "took {wall:?}");
    println!(
        "criterion 2 (gradient fidelity): PASS — model {model_err:.2e}, flow {flow_err:.2e}, \
         perceptual {perc_err:.2e}, lm {lm_err:.2e}, adversarial {adv_err:.2e} in {wall:?}"
    );
}

#[test]
fn criterion_3_interpolation_and_sampler_exactness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3001);

    // Endpoints exact.
    for _ in 0..20 {
        let clean = Tensor::randn(&[4, 4, 3], 0.7, &mut rng);
        let noise = Tensor::randn(&[4, 4, 3], 1.0, &mut rng);
        let s1 = DiffusionState::new(clean.clone(), noise.clone(), 1.0).unwrap();
        assert!(s1.noisy.bitwise_eq(&clean));
        let s0 = DiffusionState::new(clean, noise.clone(), 0.0).unwrap();
        assert!(s0.noisy.bitwise_eq(&noise));
    }

    // Oracle-predictor sampling recovers ground truth to 1e-9 for
    // N in {1, 4, 28, 50} over 50 random instances.
    let mut worst = 0.0f64;
    for instance in 0..50 {
        let truth = Tensor::randn(&[4, 4, 3], 0.4, &mut rng).map(|v| v.clamp(-0.95, 0.95));
        let noise = Tensor::randn(&[4, 4, 3], 1.0, &mut rng);
        for steps in [1, 4, 28, 50] {
            let out = sample_with(
                |_x, _t| Ok(truth.clone()),
                noise.clone(),
                &SamplerConfig { steps },
            )
            .unwrap();
            let err = out.max_abs_diff(&truth);
            worst = worst.max(err);
            assert!(err <= 1e-9, "instance {instance}, N={steps}: {err:.3e}");
        }
    }
    let wall = start.elapsed();
    assert!(wall.as_secs_f64() < 30.0, "took {wall:?}");
    println!(
        "criterion 3 (interpolation + sampler exactness): PASS — worst error {worst:.2e} in {wall:?}"
    );
}

#[test]
fn criterion_4_roundtrips() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4001);

    // Patchify / unpatchify exact.
    for _ in 0..100 {
        let img = Tensor::randn(&[8, 12, 3], 1.0, &mut rng);
        let patches = patchify(&img, 2).unwrap();
        assert!(unpatchify(&patches, 4, 6, 2, 3).unwrap().bitwise_eq(&img));
    }

    // Text encode / decode exact.
    for _ in 0..1000 {
        let len = rng.gen_range(0..64);
        let bytes: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
        assert_eq!(decode_text_ids(&encode_text_ids(&bytes)).unwrap(), bytes);
    }

    // Checkpoint save / load bitwise.
    let cfg = ModelConfig::gradcheck_tiny();
    let params = init_params(&cfg, &mut rng);
    let bytes = encode_checkpoint(&cfg, &params).unwrap();
    let (cfg2, params2) = decode_checkpoint(&bytes).unwrap();
    assert_eq!(cfg, cfg2);
    assert!(params.bitwise_eq(&params2));

    // Image write / read within the quantization bound.
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let img = Tensor::randn(&[6, 6, 3], 0.6, &mut rng).map(|v| v.clamp(-1.0, 1.0));
        let back = decode_ppm(&encode_ppm(&img).unwrap()).unwrap();
        worst = worst.max(back.max_abs_diff(&img));
    }
    assert!(worst <= 1.0 / 127.5 + 1e-12, "quantization error {worst}");

    let wall = start.elapsed();
    assert!(wall.as_secs_f64() < 30.0, "took {wall:?}");
    println!(
        "criterion 4 (round-trips): PASS — image quantization worst {worst:.5} <= {:.5} in {wall:?}",
        1.0 / 127.5
    );
}

#[test]
fn criterion_5_rope_properties() {
    let start = Instant::now();
    let params = RopeParams {
        base: 10000.0,
        split: [8, 4, 4],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5001);

    // Position-0 identity, exact.
    let x = Tensor::randn(&[2, 6, 16], 1.0, &mut rng);
    let zero: Vec<upix_core::tokenize::TokenPosition> = (0..6)
        .map(|_| upix_core::tokenize::TokenPosition {
            stream: 0,
            row: -1,
            col: -1,
        })
        .collect();
    assert!(apply_rope(&x, &zero, &params).unwrap().bitwise_eq(&x));

    // Norm preservation and relative-shift invariance over 100 trials.
    let mut worst_norm = 0.0f64;
    let mut worst_shift = 0.0f64;
    for _ in 0..100 {
        let q = Tensor::randn(&[1, 16], 1.0, &mut rng);
        let k = Tensor::randn(&[1, 16], 1.0, &mut rng);
        let p = upix_core::tokenize::TokenPosition {
            stream: rng.gen_range(0..30),
            row: rng.gen_range(0..10),
            col: rng.gen_range(0..10),
        };
        let r = upix_core::tokenize::TokenPosition {
            stream: rng.gen_range(0..30),
            row: rng.gen_range(0..10),
            col: rng.gen_range(0..10),
        };
        let s = (
            rng.gen_range(0..10usize),
            rng.gen_range(0..6i64),
            rng.gen_range(0..6i64),
        );
        let shifted = |pos: &upix_core::tokenize::TokenPosition| upix_core::tokenize::TokenPosition {
            stream: pos.stream + s.0,
            row: pos.row + s.1,
            col: pos.col + s.2,
        };
        let rq = apply_rope(&q, &[p], &params).unwrap();
        worst_norm = worst_norm.max((rq.l2_norm() - q.l2_norm()).abs());
        let dot = |a: &Tensor, b: &Tensor| {
            a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>()
        };
        let base = dot(&rq, &apply_rope(&k, &[r], &params).unwrap());
        let moved = dot(
            &apply_rope(&q, &[shifted(&p)], &params).unwrap(),
            &apply_rope(&k, &[shifted(&r)], &params).unwrap(),
        );
        worst_shift = worst_shift.max((base - moved).abs());
    }
    assert!(worst_norm <= 1e-9, "norm drift {worst_norm:.3e}");
    assert!(worst_shift <= 1e-9, "shift variance {worst_shift:.3e}");

    let wall = start.elapsed();
    assert!(wall.as_secs_f64() < 10.0, "took {wall:?}");
    println!(
        "criterion 5 (rope): PASS — norm {worst_norm:.2e}, shift {worst_shift:.2e} in {wall:?}"
    );
}

#[test]
fn criterion_6_training_convergence() {
    let start = Instant::now();
    let cfg = ModelConfig::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut params = init_params(&cfg, &mut rng);
    let mut opt = AdamState::new(&params);
    let net = FeatureNet::new(3, 8, 1);
    let weights = LossWeights::default();
    let hyper = TrainHyper {
        lr: 4e-3,
        batch_size: 8,
    };
    let records = gen_synthetic_dataset(32, 16, 0).unwrap();
    let items: Vec<BatchItem> = records.iter().map(BatchItem::from_record).collect();
    let sampler = TimestepSampler::LogitNormal { mu: 0.0, sigma: 1.0 };

    let mut first_flow = None;
    let mut tail_flow = Vec::new();
    let mut last_lm = f64::NAN;
    for step in 0..500 {
        let at = (step * 8) % items.len();
        let batch: Vec<BatchItem> = (0..8)
            .map(|i| items[(at + i) % items.len()].clone())
            .collect();
        let m = train_step(
            &cfg, &mut params, &mut opt, &net, &weights, &hyper, &sampler, &batch, &mut rng, step,
        )
        .unwrap();
        let flow = m.flow.unwrap();
        if first_flow.is_none() {
            first_flow = Some(flow);
        }
        if step >= 480 {
            tail_flow.push(flow);
        }
        if let Some(lm) = m.lm {
            last_lm = lm;
        }
    }
    let first = first_flow.unwrap();
    let final_flow = tail_flow.iter().sum::<f64>() / tail_flow.len() as f64;
    let lm_bound = 0.5 * 259f64.ln();
    assert!(
        final_flow < 0.1 * first,
        "flow {first:.4} -> {final_flow:.4} (needs < {:.4})",
        0.1 * first
    );
    assert!(last_lm < lm_bound, "lm {last_lm:.4} vs bound {lm_bound:.4}");

    let wall = start.elapsed();
    assert!(wall.as_secs_f64() < 600.0, "took {wall:?}");
    println!(
        "criterion 6 (training convergence): PASS — flow {first:.4} -> {final_flow:.4} \
         ({:.1}%), lm {last_lm:.4} < {lm_bound:.4} in {wall:?}",
        100.0 * final_flow / first
    );
}

#[test]
fn criterion_7_stage_schedule() {
    let start = Instant::now();
    let cfg = ModelConfig::toy();
    let plan = StagePlan::toy();
    let mut data = BTreeMap::new();
    for stage in &plan.stages {
        data.entry(stage.resolution).or_insert_with(|| {
            gen_synthetic_dataset(40, stage.resolution, 0).unwrap()
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut params = init_params(&cfg, &mut rng);
    let net = FeatureNet::new(3, 8, 1);
    let hyper = TrainHyper {
        lr: 2e-3,
        batch_size: 8,
    };
    let mut lines = Vec::new();
    let logs = run_stage_schedule(
        &cfg,
        &plan,
        &data,
        &mut params,
        &net,
        &LossWeights::default(),
        &hyper,
        0,
        |r| lines.push((r.stage.clone(), r.step)),
    )
    .unwrap();
    assert_eq!(
        logs.iter().map(|l| (l.name.as_str(), l.resolution)).collect::<Vec<_>>(),
        [("stage1", 8), ("stage2", 16), ("stage3", 32), ("refine", 32)]
    );
    let expected_lines: usize = plan.stages.iter().map(|s| s.steps).sum::<usize>() + plan.refine_steps;
    assert_eq!(lines.len(), expected_lines);

    // Stage I batches contain zero Condition tokens.
    let stage1 = &plan.stages[0];
    let records8 = &data[&8];
    let mut draw_rng = ChaCha8Rng::seed_from_u64(7001);
    for _ in 0..1250 {
        let batch = draw_batch(records8, stage1, 8, &mut draw_rng).unwrap();
        assert!(batch.iter().all(|item| item.conditions.is_empty()));
    }

    // Stage II condition frequency within ±0.05 of configured over 1e4
    // image-item draws.
    let stage2 = &plan.stages[1];
    let records16 = &data[&16];
    let mut image_items = 0usize;
    let mut conditioned = 0usize;
    while image_items < 10_000 {
        let batch = draw_batch(records16, stage2, 8, &mut draw_rng).unwrap();
        for item in &batch {
            if item.clean.is_some() {
                image_items += 1;
                if !item.conditions.is_empty() {
                    conditioned += 1;
                }
            }
        }
    }
    let freq = conditioned as f64 / image_items as f64;
    assert!(
        (freq - stage2.condition_prob).abs() <= 0.05,
        "condition frequency {freq:.4} vs {}",
        stage2.condition_prob
    );

    let wall = start.elapsed();
    assert!(wall.as_secs_f64() < 1200.0, "took {wall:?}");
    println!(
        "criterion 7 (stage schedule): PASS — stages 8->16->32 + refine ran, stage-I clean, \
         stage-II condition frequency {freq:.3} in {wall:?}"
    );
}

#[test]
fn criterion_8_distillation() {
    let start = Instant::now();
    let cfg = ModelConfig::toy();
    let resolution = 8;

    // Teacher: a short training run, leaving headroom for the student.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut teacher = init_params(&cfg, &mut rng);
    let mut opt = AdamState::new(&teacher);
    let net = FeatureNet::new(3, 8, 1);
    let weights = LossWeights::default();
    let hyper = TrainHyper {
        lr: 4e-3,
        batch_size: 8,
    };
    let records = gen_synthetic_dataset(32, resolution, 0).unwrap();
    let items: Vec<BatchItem> = records.iter().map(BatchItem::from_record).collect();
    let sampler = TimestepSampler::LogitNormal { mu: 0.0, sigma: 1.0 };
    for step in 0..150 {
        let at = (step * 8) % items.len();
        let batch: Vec<BatchItem> = (0..8)
            .map(|i| items[(at + i) % items.len()].clone())
            .collect();
        train_step(
            &cfg, &mut teacher, &mut opt, &net, &weights, &hyper, &sampler, &batch, &mut rng, step,
        )
        .unwrap();
    }

    // Teacher-equality null: student == fake == teacher gives an exactly
    // zero DMD gradient on every sample.
    let mut null_rng = ChaCha8Rng::seed_from_u64(808);
    for record in records.iter().take(4) {
        let noise = Tensor::randn(record.target.shape(), 1.0, &mut null_rng);
        let x_g = student_rollout(&cfg, &teacher, record.caption.as_bytes(), &[], noise, 4).unwrap();
        let eps = Tensor::randn(record.target.shape(), 1.0, &mut null_rng);
        let g = dmd_generator_gradient(
            &cfg,
            &teacher,
            &teacher,
            record.caption.as_bytes(),
            &[],
            &x_g,
            0.35,
            &eps,
        )
        .unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0), "nonzero null gradient");
    }

    // 300 distillation steps at student N = 4, seed 0.
    let teacher_before = teacher.clone();
    let config = DistillConfig {
        steps: 300,
        lr: 4e-3,
        batch_size: 4,
        student_steps: 4,
        ..DistillConfig::default()
    };
    let probe_records = gen_synthetic_dataset(16, resolution, 123).unwrap();
    let probe_before = flow_probe(&cfg, &teacher, &net, &probe_records, 55).unwrap();
    let (student, stream) =
        run_distillation(&cfg, &teacher, &records, &config, &net, 0, |_, _| {}).unwrap();
    assert_eq!(stream.len(), 300);
    assert!(teacher.bitwise_eq(&teacher_before), "teacher drifted");
    let probe_after = flow_probe(&cfg, &student, &net, &probe_records, 55).unwrap();
    assert!(
        probe_after <= 0.5 * probe_before,
        "flow-consistency probe {probe_before:.4} -> {probe_after:.4} (needs <= {:.4})",
        0.5 * probe_before
    );

    let wall = start.elapsed();
    assert!(wall.as_secs_f64() < 600.0, "took {wall:?}");
    println!(
        "criterion 8 (distillation): PASS — null gradient exact, teacher frozen, \
         flow probe {probe_before:.4} -> {probe_after:.4} in {wall:?}"
    );
}

#[test]
fn criterion_9_instruction_fidelity() {
    let start = Instant::now();
    let cfg = ModelConfig::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut params = init_params(&cfg, &mut rng);
    let net = FeatureNet::new(3, 8, 1);
    let weights = LossWeights::default();
    let hyper = TrainHyper {
        lr: 4e-3,
        batch_size: 8,
    };
    let mut data = BTreeMap::new();
    data.insert(16, gen_synthetic_dataset(512, 16, 0).unwrap());
    let plan = StagePlan {
        stages: vec![StageConfig {
            name: "extended".into(),
            resolution: 16,
            steps: 3000,
            t2i_weight: 0.8,
            lm_weight: 0.2,
            condition_prob: 0.0,
            sampler: TimestepSampler::LogitNormal { mu: 0.0, sigma: 1.0 },
        }],
        refine_steps: 0,
    };
    run_stage_schedule(
        &cfg,
        &plan,
        &data,
        &mut params,
        &net,
        &weights,
        &hyper,
        0,
        |_| {},
    )
    .unwrap();

    let eval_records = gen_synthetic_dataset(64, 16, 9999).unwrap();
    let report = evaluate(
        &cfg,
        &params,
        &net,
        &eval_records,
        &SamplerConfig { steps: 50 },
        9999,
    )
    .unwrap();
    assert!(
        report.caption_accuracy >= 0.70,
        "caption accuracy {:.3} on {} clauses (needs >= 0.70)",
        report.caption_accuracy,
        report.clauses
    );

    let wall = start.elapsed();
    assert!(wall.as_secs_f64() < 2700.0, "took {wall:?}");
    println!(
        "criterion 9 (instruction fidelity): PASS — accuracy {:.3} over {} prompts / {} clauses, \
         flow {:.4}, lm {:.4} in {wall:?}",
        report.caption_accuracy, report.prompts, report.clauses, report.flow, report.lm
    );
}
