//! Few-step distillation: distribution-matching gradients from a frozen
//! teacher and a concurrently trained fake-score net, an auxiliary standard
//! diffusion loss, and an adversarial term whose discriminator reads
//! multi-level features of the frozen teacher backbone.
//!
//! Per outer step: `fake_ratio` fake-score updates, one discriminator
//! update, one student update with
//! `L_total = L_DMD + λ_diff * L_diff + λ_adv * L_adv`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::build_hybrid_mask;
use crate::dataset::{DatasetRecord, TaskTag};
use crate::error::{Error, Result};
use crate::graph::unpatchify_node;
use crate::model::{forward_model, forward_states, ModelConfig};
use crate::objectives::{
    adam_step, build_item_loss, draw_for_batch, sample_timestep, train_step_prepared, AdamState,
    BatchItem, FeatureNet, ItemDraw, LossWeights, TimestepSampler, TrainHyper,
};
use crate::params::{ParamNodes, ParamTree};
use crate::sampling::{euler_step, predict_clean_image, time_grid, xpred_to_velocity, TERMINAL_GUARD};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::tokenize::{
    assemble_sequence, encode_condition, encode_text, generation_fragment, interpolate,
    timestep_token, Fragment,
};

/// Distillation settings. `fake_ratio` is the number of fake-score updates
/// per outer step.
#[derive(Clone, Copy, Debug)]
pub struct DistillConfig {
    pub lambda_diff: f64,
    pub lambda_adv: f64,
    pub student_steps: usize,
    pub fake_ratio: usize,
    pub steps: usize,
    pub lr: f64,
    /// Fake-score learning rate; kept below the student rate so the fake
    /// net tracks the student instead of overshooting the teacher.
    pub fake_lr: f64,
    pub batch_size: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            lambda_diff: 0.25,
            lambda_adv: 0.01,
            student_steps: 4,
            fake_ratio: 5,
            steps: 300,
            lr: 4e-3,
            fake_lr: 5e-4,
            batch_size: 4,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_diff < 0.0 || self.lambda_adv < 0.0 {
            return Err(Error::InvalidConfig(
                "distillation loss weights must be nonnegative".into(),
            ));
        }
        if self.fake_ratio < 1 {
            return Err(Error::InvalidConfig(
                "fake-score update ratio must be >= 1".into(),
            ));
        }
        if self.student_steps < 1 {
            return Err(Error::InvalidConfig("student needs >= 1 sampling step".into()));
        }
        Ok(())
    }
}

/// Block indices (zero-based) whose activations the discriminator reads:
/// after blocks ceil(L/2) and L.
pub fn discriminator_taps(layers: usize) -> Vec<usize> {
    let mut taps = vec![layers.div_ceil(2).saturating_sub(1), layers.saturating_sub(1)];
    taps.dedup();
    taps
}

/// Per-level linear heads over frozen-teacher activations plus a scalar
/// combiner.
pub fn init_disc_params<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> ParamTree {
    let taps = discriminator_taps(cfg.layers);
    let mut params = ParamTree::new();
    for (level, _) in taps.iter().enumerate() {
        params.insert(
            format!("level{level}.w"),
            Tensor::randn(&[cfg.dim, 1], 0.02, rng),
        );
    }
    params.insert("combine.w", Tensor::filled(&[taps.len()], 1.0));
    params.insert("combine.b", Tensor::scalar(0.0));
    params
}

/// Discriminator logit for one re-noised image: the frozen teacher runs
/// over a (timestep, generation) sequence, generation-token activations at
/// the tapped blocks are mean-pooled through the level heads, and the
/// combiner mixes the level logits into one scalar.
pub fn discriminator_logit(
    tape: &mut Tape,
    cfg: &ModelConfig,
    teacher: &ParamNodes,
    disc: &ParamNodes,
    noisy: NodeId,
    t: f64,
) -> Result<NodeId> {
    let time = timestep_token(tape, cfg, teacher, t)?;
    let gen = generation_fragment(tape, cfg, teacher.get("patch_embed.w")?, noisy)?;
    let (seq, layout) = assemble_sequence(tape, &[time, gen])?;
    let mask = build_hybrid_mask(&layout.kinds)?;
    let states = forward_states(tape, cfg, teacher, seq, &layout, &mask)?;

    let taps = discriminator_taps(cfg.layers);
    let mut level_logits = Vec::with_capacity(taps.len());
    for (level, &tap) in taps.iter().enumerate() {
        let acts = states.block_outputs[tap];
        let gen_rows = tape.slice(acts, 0, layout.gen_start, layout.gen_len)?;
        let pooled = tape.mean_axis(gen_rows, 0)?;
        let head = disc.get(&format!("level{level}.w"))?;
        let logit = tape.matmul(pooled, head)?;
        level_logits.push(tape.reshape(logit, &[1])?);
    }
    let stacked = if level_logits.len() == 1 {
        level_logits[0]
    } else {
        tape.concat(&level_logits, 0)?
    };
    let combined = tape.mul(stacked, disc.get("combine.w")?)?;
    let summed = tape.sum_all(combined)?;
    tape.add(summed, disc.get("combine.b")?)
}

/// Distribution-matching gradient with explicit predictors; both
/// predictions are treated as constants. The raw difference
/// `x̂_fake - x̂_teacher` is normalized by the mean absolute teacher
/// residual `mean|x̂_teacher - x_g|`.
pub fn dmd_gradient_with<T, F>(
    x_g: &Tensor,
    t: f64,
    eps: &Tensor,
    teacher_pred: T,
    fake_pred: F,
) -> Result<Tensor>
where
    T: FnOnce(&Tensor, f64) -> Result<Tensor>,
    F: FnOnce(&Tensor, f64) -> Result<Tensor>,
{
    // Timestep draws are clamped to [δ, 1-δ]; the guard zone starts
    // strictly above that support.
    if t > 1.0 - TERMINAL_GUARD {
        return Err(Error::InvalidArgument(format!(
            "re-noising timestep {t} is inside the terminal guard zone"
        )));
    }
    let x_t = interpolate(x_g, eps, t)?;
    let teacher_hat = teacher_pred(&x_t, t)?;
    let fake_hat = fake_pred(&x_t, t)?;
    let residual = teacher_hat
        .data()
        .iter()
        .zip(x_g.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / x_g.numel() as f64;
    let normalizer = residual + 1e-8;
    fake_hat.zip_map(&teacher_hat, |f, tv| (f - tv) / normalizer)
}

/// DMD gradient using the actual teacher and fake-score networks as
/// x-predictors, conditioned on the sample's prompt.
pub fn dmd_generator_gradient(
    cfg: &ModelConfig,
    teacher: &ParamTree,
    fake: &ParamTree,
    prompt: &[u8],
    conditions: &[Tensor],
    x_g: &Tensor,
    t: f64,
    eps: &Tensor,
) -> Result<Tensor> {
    dmd_gradient_with(
        x_g,
        t,
        eps,
        |x_t, tt| predict_clean_image(cfg, teacher, prompt, conditions, x_t, tt),
        |x_t, tt| predict_clean_image(cfg, fake, prompt, conditions, x_t, tt),
    )
}

/// One student sample used as fake data.
#[derive(Clone, Debug)]
pub struct StudentSample {
    pub caption: Vec<u8>,
    pub conditions: Vec<Tensor>,
    pub image: Tensor,
}

/// Untracked few-step student rollout (no final clamp: the fake net and the
/// discriminator see the student's raw output distribution).
pub fn student_rollout(
    cfg: &ModelConfig,
    student: &ParamTree,
    caption: &[u8],
    conditions: &[Tensor],
    noise: Tensor,
    steps: usize,
) -> Result<Tensor> {
    let grid = time_grid(steps);
    let mut x = noise;
    for window in grid.windows(2) {
        let (t, t_next) = (window[0], window[1]);
        let x_hat = predict_clean_image(cfg, student, caption, conditions, &x, t)?;
        let v = xpred_to_velocity(&x_hat, &x, t)?;
        x = euler_step(&x, &v, t_next - t)?;
    }
    Ok(x)
}

/// One flow-matching training step of the fake-score net on re-noised
/// student samples; the student samples are the clean targets. Returns the
/// fake net's flow loss.
pub fn update_fake_score(
    cfg: &ModelConfig,
    fake: &mut ParamTree,
    opt: &mut AdamState,
    net: &FeatureNet,
    samples: &[StudentSample],
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let batch: Vec<BatchItem> = samples
        .iter()
        .map(|s| BatchItem {
            caption: s.caption.clone(),
            clean: Some(s.image.clone()),
            conditions: s.conditions.clone(),
        })
        .collect();
    let draws = draw_for_batch(&batch, &TimestepSampler::Uniform, rng)?;
    let weights = LossWeights {
        lambda_perceptual: 0.0,
        lambda_lm: 0.0,
    };
    let hyper = TrainHyper {
        lr,
        batch_size: batch.len(),
    };
    let metrics = train_step_prepared(
        cfg, fake, opt, net, &weights, &hyper, &batch, &draws, opt.step as usize,
    )?;
    Ok(metrics.flow.unwrap_or(f64::NAN))
}

/// Outcome of one discriminator update.
pub struct AdvOutcome {
    pub disc_loss: f64,
    pub generator_loss: f64,
    pub disc_grads: BTreeMap<String, Tensor>,
}

/// Non-saturating logistic adversarial step: real and student images are
/// re-noised at one shared timestep, classified through frozen-teacher
/// features, and the discriminator loss
/// `softplus(-logit_real) + softplus(logit_fake)` is averaged over the
/// batch. Gradients cover discriminator heads only.
pub fn adversarial_step(
    cfg: &ModelConfig,
    teacher: &ParamTree,
    disc: &ParamTree,
    real: &[Tensor],
    student_images: &[Tensor],
    rng: &mut ChaCha8Rng,
) -> Result<AdvOutcome> {
    if real.len() != student_images.len() || real.is_empty() {
        return Err(Error::InvalidArgument(
            "adversarial step needs matched non-empty real/student batches".into(),
        ));
    }
    let t = sample_timestep(&TimestepSampler::Uniform, rng)?;
    let mut tape = Tape::new();
    let teacher_nodes = teacher.load_onto(&mut tape, false);
    let disc_nodes = disc.load_onto(&mut tape, true);

    let mut disc_terms = Vec::new();
    let mut gen_terms = Vec::new();
    for (r, s) in real.iter().zip(student_images) {
        let eps_r = Tensor::randn(r.shape(), 1.0, rng);
        let eps_s = Tensor::randn(s.shape(), 1.0, rng);
        let noisy_r = tape.constant(interpolate(r, &eps_r, t)?);
        let noisy_s = tape.constant(interpolate(s, &eps_s, t)?);
        let logit_r = discriminator_logit(&mut tape, cfg, &teacher_nodes, &disc_nodes, noisy_r, t)?;
        let logit_s = discriminator_logit(&mut tape, cfg, &teacher_nodes, &disc_nodes, noisy_s, t)?;
        let neg_r = tape.neg(logit_r)?;
        let sp_r = tape.softplus(neg_r)?;
        let sp_s = tape.softplus(logit_s)?;
        disc_terms.push(tape.add(sp_r, sp_s)?);
        let neg_s = tape.neg(logit_s)?;
        gen_terms.push(tape.softplus(neg_s)?);
    }
    let mut disc_sum = disc_terms[0];
    for &term in &disc_terms[1..] {
        disc_sum = tape.add(disc_sum, term)?;
    }
    let disc_loss = tape.scale(disc_sum, 1.0 / disc_terms.len() as f64)?;
    let gen_mean = gen_terms
        .iter()
        .map(|&n| tape.value(n).scalar_value())
        .sum::<f64>()
        / gen_terms.len() as f64;

    let grads = tape.backward(disc_loss)?;
    Ok(AdvOutcome {
        disc_loss: tape.value(disc_loss).scalar_value(),
        generator_loss: gen_mean,
        disc_grads: disc_nodes.grads_by_name(&grads)?,
    })
}

/// Partial untracked rollout: integrates `k` of `steps` intervals and
/// returns the intermediate state and its timestep.
pub fn partial_rollout(
    cfg: &ModelConfig,
    student: &ParamTree,
    caption: &[u8],
    conditions: &[Tensor],
    noise: Tensor,
    steps: usize,
    k: usize,
) -> Result<(Tensor, f64)> {
    let grid = time_grid(steps);
    let mut x = noise;
    for window in grid.windows(2).take(k) {
        let (t, t_next) = (window[0], window[1]);
        let x_hat = predict_clean_image(cfg, student, caption, conditions, &x, t)?;
        let v = xpred_to_velocity(&x_hat, &x, t)?;
        x = euler_step(&x, &v, t_next - t)?;
    }
    Ok((x, grid[k]))
}

/// The student's clean-image proposal at one trajectory state, with
/// gradients: a single tracked forward from `(x_k, t_k)`. This is the
/// generator output the DMD and adversarial gradients act on; truncating
/// the earlier integration steps keeps the update scale commensurate with
/// the other loss terms while a random `k` covers every student timestep.
pub fn student_proposal_node(
    tape: &mut Tape,
    cfg: &ModelConfig,
    student: &ParamNodes,
    caption: &[u8],
    conditions: &[Tensor],
    x_k: &Tensor,
    t_k: f64,
) -> Result<NodeId> {
    let shape = x_k.shape().to_vec();
    let [h, w, _c] = match shape.as_slice() {
        [h, w, c] => [*h, *w, *c],
        other => {
            return Err(Error::shape(
                "student proposal",
                format!("expected [h, w, c] state, got {other:?}"),
            ))
        }
    };
    let (rows, cols) = (h / cfg.patch_size, w / cfg.patch_size);
    let mut fragments: Vec<Fragment> = Vec::new();
    for cond in conditions {
        fragments.push(encode_condition(tape, cfg, student, cond)?);
    }
    fragments.push(encode_text(tape, student.get("text_embed.table")?, caption)?);
    fragments.push(timestep_token(tape, cfg, student, t_k)?);
    let state = tape.constant(x_k.clone());
    fragments.push(generation_fragment(
        tape,
        cfg,
        student.get("patch_embed.w")?,
        state,
    )?);
    let (seq, layout) = assemble_sequence(tape, &fragments)?;
    let mask = build_hybrid_mask(&layout.kinds)?;
    let out = forward_model(tape, cfg, student, seq, &layout, &mask, true)?;
    unpatchify_node(
        tape,
        out.patch_pred.expect("patches requested"),
        rows,
        cols,
        cfg.patch_size,
        cfg.channels,
    )
}

/// Generator-side adversarial loss `softplus(-logit_fake)` with gradient
/// flowing through the re-noised student output into `x_g`; teacher and
/// discriminator parameters enter as constants.
pub fn generator_adv_loss_node(
    tape: &mut Tape,
    cfg: &ModelConfig,
    teacher: &ParamNodes,
    disc: &ParamNodes,
    x_g: NodeId,
    t: f64,
    eps: &Tensor,
) -> Result<NodeId> {
    let scaled = tape.scale(x_g, t)?;
    let noise_part = tape.constant(eps.map(|v| (1.0 - t) * v));
    let noisy = tape.add(scaled, noise_part)?;
    let logit = discriminator_logit(tape, cfg, teacher, disc, noisy, t)?;
    let neg = tape.neg(logit)?;
    tape.softplus(neg)
}

/// Stochastic draws for one student-update item. `truncate_step` picks the
/// trajectory state whose clean-image proposal receives the DMD and
/// adversarial gradients.
#[derive(Clone, Debug)]
pub struct StudentDraws {
    pub rollout_noise: Tensor,
    pub truncate_step: usize,
    pub t_dmd: f64,
    pub eps_dmd: Tensor,
    pub diff_draw: ItemDraw,
    pub t_adv: f64,
    pub eps_adv: Tensor,
}

/// Per-step metric triple.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillMetrics {
    /// Mean absolute normalized DMD gradient.
    pub dmd: f64,
    /// Standard flow-matching loss of the student on real data.
    pub diff: f64,
    /// Generator adversarial loss.
    pub adv: f64,
}

impl DistillMetrics {
    pub fn to_line(&self, step: usize) -> String {
        format!(
            "step={} dmd={:.6} diff={:.6} adv={:.6}",
            step, self.dmd, self.diff, self.adv
        )
    }
}

/// Student gradients over a batch with explicit draws:
/// `L_total = L_DMD + λ_diff * L_diff + λ_adv * L_adv` per item, averaged.
#[allow(clippy::too_many_arguments)]
pub fn student_gradients(
    cfg: &ModelConfig,
    teacher: &ParamTree,
    student: &ParamTree,
    fake: &ParamTree,
    disc: &ParamTree,
    net: &FeatureNet,
    config: &DistillConfig,
    items: &[BatchItem],
    draws: &[StudentDraws],
) -> Result<(BTreeMap<String, Tensor>, DistillMetrics)> {
    if items.len() != draws.len() || items.is_empty() {
        return Err(Error::InvalidArgument(
            "student update needs matched non-empty items/draws".into(),
        ));
    }
    let mut tape = Tape::new();
    let student_nodes = student.load_onto(&mut tape, true);
    let teacher_nodes = teacher.load_onto(&mut tape, false);
    let disc_nodes = disc.load_onto(&mut tape, false);

    let flow_only = LossWeights {
        lambda_perceptual: 0.0,
        lambda_lm: 0.0,
    };
    let mut item_totals = Vec::new();
    let mut dmd_mags = Vec::new();
    let mut diff_vals = Vec::new();
    let mut adv_vals = Vec::new();
    for (item, draw) in items.iter().zip(draws) {
        let (x_k, t_k) = partial_rollout(
            cfg,
            student,
            &item.caption,
            &item.conditions,
            draw.rollout_noise.clone(),
            config.student_steps,
            draw.truncate_step.min(config.student_steps - 1),
        )?;
        let x_g_node = student_proposal_node(
            &mut tape,
            cfg,
            &student_nodes,
            &item.caption,
            &item.conditions,
            &x_k,
            t_k,
        )?;
        let x_g = tape.value(x_g_node).clone();

        // Both predictors are evaluated off-tape: they are constants to the
        // student update.
        let g = dmd_generator_gradient(
            cfg,
            teacher,
            fake,
            &item.caption,
            &item.conditions,
            &x_g,
            draw.t_dmd,
            &draw.eps_dmd,
        )?;
        dmd_mags.push(g.data().iter().map(|v| v.abs()).sum::<f64>() / g.numel() as f64);
        // Mean-reduced coupling: the DMD term then scales like the other
        // (mean-square) loss terms instead of growing with pixel count.
        let g_node = tape.constant(g);
        let weighted = tape.mul(g_node, x_g_node)?;
        let dmd_surrogate = tape.mean_all(weighted)?;

        let diff_loss = build_item_loss(
            &mut tape,
            cfg,
            &student_nodes,
            net,
            &flow_only,
            item,
            &draw.diff_draw,
        )?;
        let flow_node = diff_loss
            .flow
            .ok_or_else(|| Error::InvalidArgument("distillation items must carry images".into()))?;
        diff_vals.push(tape.value(flow_node).scalar_value());

        let adv_node = generator_adv_loss_node(
            &mut tape,
            cfg,
            &teacher_nodes,
            &disc_nodes,
            x_g_node,
            draw.t_adv,
            &draw.eps_adv,
        )?;
        adv_vals.push(tape.value(adv_node).scalar_value());

        let diff_scaled = tape.scale(flow_node, config.lambda_diff)?;
        let adv_scaled = tape.scale(adv_node, config.lambda_adv)?;
        let partial = tape.add(dmd_surrogate, diff_scaled)?;
        item_totals.push(tape.add(partial, adv_scaled)?);
    }
    let mut total = item_totals[0];
    for &t in &item_totals[1..] {
        total = tape.add(total, t)?;
    }
    let total = tape.scale(total, 1.0 / items.len() as f64)?;
    let grads = tape.backward(total)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok((
        student_nodes.grads_by_name(&grads)?,
        DistillMetrics {
            dmd: mean(&dmd_mags),
            diff: mean(&diff_vals),
            adv: mean(&adv_vals),
        },
    ))
}

/// The four networks and their optimizer slots.
pub struct DistillNets {
    pub teacher: ParamTree,
    pub student: ParamTree,
    pub fake: ParamTree,
    pub disc: ParamTree,
    pub student_opt: AdamState,
    pub fake_opt: AdamState,
    pub disc_opt: AdamState,
}

impl DistillNets {
    /// Student and fake score start as copies of the teacher.
    pub fn new(cfg: &ModelConfig, teacher: ParamTree, rng: &mut ChaCha8Rng) -> DistillNets {
        let student = teacher.clone();
        let fake = teacher.clone();
        let disc = init_disc_params(cfg, rng);
        DistillNets {
            student_opt: AdamState::new(&student),
            fake_opt: AdamState::new(&fake),
            disc_opt: AdamState::new(&disc),
            teacher,
            student,
            fake,
            disc,
        }
    }
}

/// One outer distillation step: `fake_ratio` fake-score updates on fresh
/// student samples, one discriminator update, one student update.
pub fn distill_step(
    cfg: &ModelConfig,
    nets: &mut DistillNets,
    config: &DistillConfig,
    records: &[DatasetRecord],
    net: &FeatureNet,
    rng: &mut ChaCha8Rng,
) -> Result<DistillMetrics> {
    config.validate()?;
    let pool: Vec<&DatasetRecord> = records.iter().filter(|r| r.tag == TaskTag::T2i).collect();
    if pool.is_empty() {
        return Err(Error::Dataset("no t2i records for distillation".into()));
    }
    let batch: Vec<&DatasetRecord> = (0..config.batch_size)
        .map(|_| pool[rng.gen_range(0..pool.len())])
        .collect();

    // Student samples for the fake net and the discriminator.
    let mut samples = Vec::with_capacity(batch.len());
    for record in &batch {
        let shape = record.target.shape();
        let noise = Tensor::randn(shape, 1.0, rng);
        let image = student_rollout(
            cfg,
            &nets.student,
            record.caption.as_bytes(),
            &[],
            noise,
            config.student_steps,
        )?;
        samples.push(StudentSample {
            caption: record.caption.clone().into_bytes(),
            conditions: Vec::new(),
            image,
        });
    }

    for _ in 0..config.fake_ratio {
        update_fake_score(
            cfg,
            &mut nets.fake,
            &mut nets.fake_opt,
            net,
            &samples,
            config.fake_lr,
            rng,
        )?;
    }

    let real: Vec<Tensor> = batch.iter().map(|r| r.target.clone()).collect();
    let student_images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    let adv = adversarial_step(cfg, &nets.teacher, &nets.disc, &real, &student_images, rng)?;
    adam_step(&mut nets.disc, &adv.disc_grads, &mut nets.disc_opt, config.lr)?;

    // Student update with fresh draws.
    let items: Vec<BatchItem> = batch.iter().map(|r| BatchItem::from_record(r)).collect();
    let draws: Result<Vec<StudentDraws>> = items
        .iter()
        .map(|item| {
            let shape = item.clean.as_ref().expect("image item").shape().to_vec();
            Ok(StudentDraws {
                rollout_noise: Tensor::randn(&shape, 1.0, rng),
                truncate_step: rng.gen_range(0..config.student_steps),
                t_dmd: sample_timestep(&TimestepSampler::Uniform, rng)?,
                eps_dmd: Tensor::randn(&shape, 1.0, rng),
                diff_draw: ItemDraw {
                    t: sample_timestep(&TimestepSampler::Uniform, rng)?,
                    noise: Some(Tensor::randn(&shape, 1.0, rng)),
                },
                t_adv: sample_timestep(&TimestepSampler::Uniform, rng)?,
                eps_adv: Tensor::randn(&shape, 1.0, rng),
            })
        })
        .collect();
    let (grads, metrics) = student_gradients(
        cfg,
        &nets.teacher,
        &nets.student,
        &nets.fake,
        &nets.disc,
        net,
        config,
        &items,
        &draws?,
    )?;
    adam_step(&mut nets.student, &grads, &mut nets.student_opt, config.lr)?;
    Ok(metrics)
}

/// Full distillation run; returns the student and the metric stream.
pub fn run_distillation(
    cfg: &ModelConfig,
    teacher: &ParamTree,
    records: &[DatasetRecord],
    config: &DistillConfig,
    net: &FeatureNet,
    seed: u64,
    mut on_metrics: impl FnMut(usize, &DistillMetrics),
) -> Result<(ParamTree, Vec<DistillMetrics>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nets = DistillNets::new(cfg, teacher.clone(), &mut rng);
    let mut stream = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let metrics = distill_step(cfg, &mut nets, config, records, net, &mut rng)?;
        on_metrics(step, &metrics);
        stream.push(metrics);
    }
    Ok((nets.student, stream))
}

/// Flow-matching loss of `params` on a fixed probe: deterministic draws,
/// used to track student flow consistency across a distillation run.
pub fn flow_probe(
    cfg: &ModelConfig,
    params: &ParamTree,
    net: &FeatureNet,
    records: &[DatasetRecord],
    seed: u64,
) -> Result<f64> {
    let items: Vec<BatchItem> = records
        .iter()
        .filter(|r| r.tag == TaskTag::T2i)
        .map(BatchItem::from_record)
        .collect();
    if items.is_empty() {
        return Err(Error::Dataset("no t2i records for the probe".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws = draw_for_batch(&items, &TimestepSampler::Uniform, &mut rng)?;
    let weights = LossWeights {
        lambda_perceptual: 0.0,
        lambda_lm: 0.0,
    };
    let mut total = 0.0;
    for (item, draw) in items.iter().zip(&draws) {
        let mut tape = Tape::new();
        let nodes = params.load_onto(&mut tape, false);
        let loss = build_item_loss(&mut tape, cfg, &nodes, net, &weights, item, draw)?;
        let flow = loss
            .flow
            .ok_or_else(|| Error::InvalidArgument("probe items must carry images".into()))?;
        total += tape.value(flow).scalar_value();
    }
    Ok(total / items.len() as f64)
}
