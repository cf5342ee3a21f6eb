//! Training objectives and the optimization loop: flow-matching (clean-patch
//! MSE), frozen-random-feature perceptual distance, byte-level language
//! modeling, timestep samplers, Adam with gradient clipping, and the
//! progressive stage schedule.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::attention::build_hybrid_mask;
use crate::dataset::{DatasetRecord, TaskTag};
use crate::error::{Error, Result};
use crate::graph::patchify_node;
use crate::model::{forward_model, reassemble_node, ModelConfig};
use crate::params::{ParamNodes, ParamTree};
use crate::tape::{NodeId, Tape};
use crate::tensor::{patchify, Tensor};
use crate::tokenize::{
    assemble_sequence, encode_text, make_generation_tokens, timestep_token,
    Fragment,
};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.95;
pub const ADAM_EPS: f64 = 1e-8;
pub const CLIP_NORM: f64 = 1.0;
/// Support guard for timestep draws: samples live in [δ, 1-δ].
pub const TIMESTEP_GUARD: f64 = 1e-4;

/// Weights of the auxiliary loss terms; the flow-matching weight is fixed
/// at 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_perceptual: f64,
    pub lambda_lm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_perceptual: 0.1,
            lambda_lm: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_perceptual < 0.0 || self.lambda_lm < 0.0 {
            return Err(Error::InvalidConfig(
                "loss weights must be nonnegative".to_string(),
            ));
        }
        Ok(())
    }
}

/// Timestep distribution for training draws.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TimestepSampler {
    LogitNormal { mu: f64, sigma: f64 },
    Uniform,
}

/// One draw from the sampler, clamped to `[δ, 1-δ]` so downstream
/// `1/(1-t)` factors stay finite.
pub fn sample_timestep(sampler: &TimestepSampler, rng: &mut ChaCha8Rng) -> Result<f64> {
    let t = match sampler {
        TimestepSampler::LogitNormal { mu, sigma } => {
            if !(*sigma > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "logit-normal sigma must be positive, got {sigma}"
                )));
            }
            let z: f64 = rng.sample(StandardNormal);
            let logit = mu + sigma * z;
            1.0 / (1.0 + (-logit).exp())
        }
        TimestepSampler::Uniform => rng.gen::<f64>(),
    };
    Ok(t.clamp(TIMESTEP_GUARD, 1.0 - TIMESTEP_GUARD))
}

/// Frozen random conv stack for the perceptual distance: three levels at
/// strides 1, 2, 4 (a 1x1 projection, then two stride-2 stages). Weights
/// live outside every parameter tree, so they are excluded from
/// optimization by construction.
#[derive(Clone, Debug)]
pub struct FeatureNet {
    channels: usize,
    features: usize,
    weights: [Tensor; 3],
}

impl FeatureNet {
    pub fn new(channels: usize, features: usize, seed: u64) -> FeatureNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = |fan_in: usize| (1.0 / fan_in as f64).sqrt();
        let weights = [
            Tensor::randn(&[channels, features], scale(channels), &mut rng),
            Tensor::randn(&[4 * features, features], scale(4 * features), &mut rng),
            Tensor::randn(&[4 * features, features], scale(4 * features), &mut rng),
        ];
        FeatureNet {
            channels,
            features,
            weights,
        }
    }

    pub fn weights(&self) -> &[Tensor; 3] {
        &self.weights
    }

    /// Feature maps of an on-tape image at the three levels.
    fn features(&self, tape: &mut Tape, image: NodeId) -> Result<[NodeId; 3]> {
        let shape = tape.value(image).shape().to_vec();
        let [h, w, c] = match shape.as_slice() {
            [h, w, c] => [*h, *w, *c],
            other => {
                return Err(Error::shape(
                    "perceptual features",
                    format!("expected [h, w, c], got {other:?}"),
                ))
            }
        };
        if c != self.channels {
            return Err(Error::shape(
                "perceptual features",
                format!("{c} channels vs feature net {}", self.channels),
            ));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape(
                "perceptual features",
                format!("image {h}x{w} must be divisible by 4 (stride-4 level)"),
            ));
        }
        let f = self.features;
        let w0 = tape.constant(self.weights[0].clone());
        let flat = tape.reshape(image, &[h * w, c])?;
        let l0 = tape.matmul(flat, w0)?;
        let f0 = tape.silu(l0)?;

        let f0_img = tape.reshape(f0, &[h, w, f])?;
        let w1 = tape.constant(self.weights[1].clone());
        let p1 = patchify_node(tape, f0_img, 2)?;
        let l1 = tape.matmul(p1, w1)?;
        let f1 = tape.silu(l1)?;

        let f1_img = tape.reshape(f1, &[h / 2, w / 2, f])?;
        let w2 = tape.constant(self.weights[2].clone());
        let p2 = patchify_node(tape, f1_img, 2)?;
        let l2 = tape.matmul(p2, w2)?;
        let f2 = tape.silu(l2)?;
        Ok([f0, f1, f2])
    }
}

/// Mean squared error over all coordinates; the flow-matching objective on
/// clean-patch predictions.
pub fn flow_matching_loss(tape: &mut Tape, predicted: NodeId, target: NodeId) -> Result<NodeId> {
    tape.mse(predicted, target)
}

/// Sum over feature levels of the mean squared feature distance.
pub fn perceptual_loss(
    tape: &mut Tape,
    net: &FeatureNet,
    predicted: NodeId,
    target: NodeId,
) -> Result<NodeId> {
    let fa = net.features(tape, predicted)?;
    let fb = net.features(tape, target)?;
    let mut total = None;
    for (a, b) in fa.into_iter().zip(fb) {
        let level = tape.mse(a, b)?;
        total = Some(match total {
            None => level,
            Some(acc) => tape.add(acc, level)?,
        });
    }
    Ok(total.expect("three levels"))
}

/// Next-token cross-entropy over the text block: position i predicts
/// `ids[i+1]`, so BOS predicts the first byte and EOS receives no target.
pub fn lm_loss(tape: &mut Tape, logits: NodeId, ids: &[u32]) -> Result<NodeId> {
    let n = ids.len();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "text block shorter than 2 tokens has no LM targets".to_string(),
        ));
    }
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[0] != n {
        return Err(Error::shape(
            "lm_loss",
            format!("logits {shape:?} vs {n} text tokens"),
        ));
    }
    let vocab = shape[1];
    let preds = tape.slice(logits, 0, 0, n - 1)?;
    let probs = tape.softmax(preds)?;
    let mut onehot = vec![0.0; (n - 1) * vocab];
    for (row, &id) in ids[1..].iter().enumerate() {
        onehot[row * vocab + id as usize] = 1.0;
    }
    let onehot = tape.constant(Tensor::from_vec(vec![n - 1, vocab], onehot)?);
    let picked = tape.mul(probs, onehot)?;
    let p = tape.sum_axis(picked, 1)?;
    let logp = tape.log(p)?;
    let mean = tape.mean_all(logp)?;
    tape.neg(mean)
}

/// `flow + λ_perceptual * perceptual + λ_lm * lm`; absent terms contribute
/// nothing.
pub fn total_loss(
    tape: &mut Tape,
    flow: Option<NodeId>,
    perceptual: Option<NodeId>,
    lm: Option<NodeId>,
    weights: &LossWeights,
) -> Result<NodeId> {
    let mut total = flow;
    if let Some(p) = perceptual {
        let scaled = tape.scale(p, weights.lambda_perceptual)?;
        total = Some(match total {
            None => scaled,
            Some(acc) => tape.add(acc, scaled)?,
        });
    }
    if let Some(l) = lm {
        let scaled = tape.scale(l, weights.lambda_lm)?;
        total = Some(match total {
            None => scaled,
            Some(acc) => tape.add(acc, scaled)?,
        });
    }
    total.ok_or_else(|| Error::InvalidArgument("no loss terms".to_string()))
}

// ---- optimizer ---------------------------------------------------------------

/// Training hyperparameters that are configurable; Adam betas, epsilon, and
/// the clip norm are contract constants.
#[derive(Clone, Copy, Debug)]
pub struct TrainHyper {
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            lr: 4e-3,
            batch_size: 8,
        }
    }
}

/// Adam first/second-moment slots, keyed like the parameter tree.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamTree) -> AdamState {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, t) in params.iter() {
            m.insert(name.clone(), Tensor::zeros(t.shape()));
            v.insert(name.clone(), Tensor::zeros(t.shape()));
        }
        AdamState { step: 0, m, v }
    }
}

/// Global-norm clip at [`CLIP_NORM`] followed by one Adam update. Returns
/// the pre-clip gradient norm. Parameters are updated in name order.
pub fn adam_step(
    params: &mut ParamTree,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
) -> Result<f64> {
    let mut sq = 0.0;
    for g in grads.values() {
        for &x in g.data() {
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite {
            op: "gradient norm".to_string(),
        });
    }
    let scale = if norm > CLIP_NORM { CLIP_NORM / norm } else { 1.0 };

    state.step += 1;
    let bias1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
    let bias2 = 1.0 - ADAM_BETA2.powi(state.step as i32);
    let names: Vec<String> = params.names().cloned().collect();
    for name in &names {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no gradient for `{name}`")))?;
        let m = state.m.get_mut(name).expect("adam slot");
        let v = state.v.get_mut(name).expect("adam slot");
        let w = params.get_mut(name)?;
        for i in 0..w.numel() {
            let gi = g.data()[i] * scale;
            let mi = ADAM_BETA1 * m.data()[i] + (1.0 - ADAM_BETA1) * gi;
            let vi = ADAM_BETA2 * v.data()[i] + (1.0 - ADAM_BETA2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let update = lr * (mi / bias1) / ((vi / bias2).sqrt() + ADAM_EPS);
            w.data_mut()[i] -= update;
        }
        if !w.all_finite() {
            return Err(Error::NonFinite {
                op: format!("adam update of `{name}`"),
            });
        }
    }
    Ok(norm)
}

// ---- one training step --------------------------------------------------------

/// One batch element before timestep/noise draws. `clean = None` marks a
/// text-only language-modeling item.
#[derive(Clone, Debug)]
pub struct BatchItem {
    pub caption: Vec<u8>,
    pub clean: Option<Tensor>,
    pub conditions: Vec<Tensor>,
}

impl BatchItem {
    pub fn from_record(record: &DatasetRecord) -> BatchItem {
        BatchItem {
            caption: record.caption.clone().into_bytes(),
            clean: Some(record.target.clone()),
            conditions: record.condition.iter().cloned().collect(),
        }
    }

    pub fn text_only(caption: &str) -> BatchItem {
        BatchItem {
            caption: caption.as_bytes().to_vec(),
            clean: None,
            conditions: Vec::new(),
        }
    }
}

/// The stochastic draws for one item, separated from the loss formulas so
/// the sampler mode can only ever influence the distribution of `t`.
#[derive(Clone, Debug)]
pub struct ItemDraw {
    pub t: f64,
    pub noise: Option<Tensor>,
}

/// Draws `(t, noise)` for every image item of the batch, in batch order.
pub fn draw_for_batch(
    batch: &[BatchItem],
    sampler: &TimestepSampler,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ItemDraw>> {
    batch
        .iter()
        .map(|item| match &item.clean {
            Some(clean) => Ok(ItemDraw {
                t: sample_timestep(sampler, rng)?,
                noise: Some(Tensor::randn(clean.shape(), 1.0, rng)),
            }),
            None => Ok(ItemDraw { t: 0.5, noise: None }),
        })
        .collect()
}

/// Loss nodes of one batch item on an existing tape.
pub struct ItemLoss {
    pub total: NodeId,
    pub flow: Option<NodeId>,
    pub perceptual: Option<NodeId>,
    pub lm: Option<NodeId>,
}

/// Builds one item's training loss on the given tape: tokenize, assemble,
/// forward, then `flow + λp*perceptual + λlm*lm` (text-only items carry the
/// LM term alone).
pub fn build_item_loss(
    tape: &mut Tape,
    cfg: &ModelConfig,
    nodes: &ParamNodes,
    net: &FeatureNet,
    weights: &LossWeights,
    item: &BatchItem,
    draw: &ItemDraw,
) -> Result<ItemLoss> {
    let mut fragments: Vec<Fragment> = Vec::new();
    for cond in &item.conditions {
        fragments.push(crate::tokenize::encode_condition(tape, cfg, nodes, cond)?);
    }
    let table = nodes.get("text_embed.table")?;
    fragments.push(encode_text(tape, table, &item.caption)?);

    let state_clean = match (&item.clean, &draw.noise) {
        (Some(clean), Some(noise)) => {
            fragments.push(timestep_token(tape, cfg, nodes, draw.t)?);
            let (state, gen) = make_generation_tokens(
                tape,
                cfg,
                nodes.get("patch_embed.w")?,
                clean.clone(),
                noise.clone(),
                draw.t,
            )?;
            fragments.push(gen);
            Some(state)
        }
        _ => None,
    };

    let (seq, layout) = assemble_sequence(tape, &fragments)?;
    let mask = build_hybrid_mask(&layout.kinds)?;
    let out = forward_model(tape, cfg, nodes, seq, &layout, &mask, state_clean.is_some())?;

    let mut flow = None;
    let mut perceptual = None;
    if let Some(state) = &state_clean {
        let pred = out.patch_pred.expect("patch predictions requested");
        let target = tape.constant(patchify(&state.clean, cfg.patch_size)?);
        flow = Some(flow_matching_loss(tape, pred, target)?);
        if weights.lambda_perceptual > 0.0 {
            let (rows, cols) = layout.gen_grid.expect("generation grid");
            let pred_img =
                reassemble_node(tape, pred, rows, cols, cfg.patch_size, cfg.channels)?;
            let clean_node = tape.constant(state.clean.clone());
            perceptual = Some(perceptual_loss(tape, net, pred_img, clean_node)?);
        }
    }
    let lm = match out.text_logits {
        Some(logits) if layout.text_len >= 2 => Some(lm_loss(tape, logits, &layout.text_ids)?),
        _ => None,
    };

    let total = total_loss(tape, flow, perceptual, lm, weights)?;
    Ok(ItemLoss {
        total,
        flow,
        perceptual,
        lm,
    })
}

struct SampleOutcome {
    grads: BTreeMap<String, Tensor>,
    total: f64,
    flow: Option<f64>,
    perceptual: Option<f64>,
    lm: Option<f64>,
}

fn sample_pass(
    cfg: &ModelConfig,
    params: &ParamTree,
    net: &FeatureNet,
    weights: &LossWeights,
    item: &BatchItem,
    draw: &ItemDraw,
) -> Result<SampleOutcome> {
    let mut tape = Tape::new();
    let nodes = params.load_onto(&mut tape, true);
    let loss = build_item_loss(&mut tape, cfg, &nodes, net, weights, item, draw)?;
    let total_value = tape.value(loss.total).scalar_value();
    let grads = tape.backward(loss.total)?;
    Ok(SampleOutcome {
        grads: nodes.grads_by_name(&grads)?,
        total: total_value,
        flow: loss.flow.map(|n| tape.value(n).scalar_value()),
        perceptual: loss.perceptual.map(|n| tape.value(n).scalar_value()),
        lm: loss.lm.map(|n| tape.value(n).scalar_value()),
    })
}

/// Fixed pairwise-tree summation over per-sample gradients: the reduction
/// order depends only on batch indices, never on thread scheduling.
fn tree_reduce_grads(mut level: Vec<BTreeMap<String, Tensor>>) -> BTreeMap<String, Tensor> {
    while level.len() > 1 {
        let mut next = Vec::with_capacity(level.len().div_ceil(2));
        let mut iter = level.into_iter();
        while let Some(mut a) = iter.next() {
            if let Some(b) = iter.next() {
                for (name, gb) in b {
                    let ga = a.get_mut(&name).expect("aligned gradient trees");
                    for (x, y) in ga.data_mut().iter_mut().zip(gb.data()) {
                        *x += y;
                    }
                }
            }
            next.push(a);
        }
        level = next;
    }
    level.into_iter().next().unwrap_or_default()
}

/// Per-step training metrics; term values are batch means over the items
/// that carry the term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub total: f64,
    pub flow: Option<f64>,
    pub perceptual: Option<f64>,
    pub lm: Option<f64>,
    pub grad_norm: f64,
}

fn mean_of(values: Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Loss/backward over a prepared batch without touching the parameters.
/// Sample passes run in parallel; gradients combine in pairwise-tree order
/// over batch indices, then average.
pub fn batch_gradients(
    cfg: &ModelConfig,
    params: &ParamTree,
    net: &FeatureNet,
    weights: &LossWeights,
    batch: &[BatchItem],
    draws: &[ItemDraw],
) -> Result<(BTreeMap<String, Tensor>, StepMetrics)> {
    if batch.is_empty() || batch.len() != draws.len() {
        return Err(Error::InvalidArgument(format!(
            "batch of {} items with {} draws",
            batch.len(),
            draws.len()
        )));
    }
    let outcomes: Result<Vec<SampleOutcome>> = batch
        .par_iter()
        .zip(draws.par_iter())
        .map(|(item, draw)| sample_pass(cfg, params, net, weights, item, draw))
        .collect();
    let outcomes = outcomes?;

    let inv = 1.0 / batch.len() as f64;
    let total = outcomes.iter().map(|o| o.total).sum::<f64>() * inv;
    let metrics = StepMetrics {
        total,
        flow: mean_of(outcomes.iter().filter_map(|o| o.flow).collect()),
        perceptual: mean_of(outcomes.iter().filter_map(|o| o.perceptual).collect()),
        lm: mean_of(outcomes.iter().filter_map(|o| o.lm).collect()),
        grad_norm: 0.0,
    };
    let mut grads = tree_reduce_grads(outcomes.into_iter().map(|o| o.grads).collect());
    for g in grads.values_mut() {
        for x in g.data_mut() {
            *x *= inv;
        }
    }
    Ok((grads, metrics))
}

/// One optimization step over an already-drawn batch. Deterministic in its
/// inputs; the timestep-sampler mode never appears here, so with `t` held
/// fixed the metrics are identical under either mode.
pub fn train_step_prepared(
    cfg: &ModelConfig,
    params: &mut ParamTree,
    opt: &mut AdamState,
    net: &FeatureNet,
    weights: &LossWeights,
    hyper: &TrainHyper,
    batch: &[BatchItem],
    draws: &[ItemDraw],
    step_index: usize,
) -> Result<StepMetrics> {
    let (grads, mut metrics) =
        batch_gradients(cfg, params, net, weights, batch, draws).map_err(|e| match e {
            Error::NonFinite { op } => Error::StepAborted {
                step: step_index,
                detail: format!("non-finite loss ({op})"),
            },
            other => other,
        })?;
    if !metrics.total.is_finite() {
        return Err(Error::StepAborted {
            step: step_index,
            detail: format!("non-finite total loss {}", metrics.total),
        });
    }
    metrics.grad_norm =
        adam_step(params, &grads, opt, hyper.lr).map_err(|e| Error::StepAborted {
            step: step_index,
            detail: e.to_string(),
        })?;
    Ok(metrics)
}

/// Draws timesteps and noise with the given sampler, then takes one step.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    cfg: &ModelConfig,
    params: &mut ParamTree,
    opt: &mut AdamState,
    net: &FeatureNet,
    weights: &LossWeights,
    hyper: &TrainHyper,
    sampler: &TimestepSampler,
    batch: &[BatchItem],
    rng: &mut ChaCha8Rng,
    step_index: usize,
) -> Result<StepMetrics> {
    let draws = draw_for_batch(batch, sampler, rng)?;
    train_step_prepared(
        cfg, params, opt, net, weights, hyper, batch, &draws, step_index,
    )
}

// ---- stage schedule ------------------------------------------------------------

/// One progressive-training stage.
#[derive(Clone, Debug)]
pub struct StageConfig {
    pub name: String,
    pub resolution: usize,
    pub steps: usize,
    pub t2i_weight: f64,
    pub lm_weight: f64,
    pub condition_prob: f64,
    pub sampler: TimestepSampler,
}

/// Ordered stages plus a final refinement pass that switches to the
/// uniform timestep sampler at the top resolution.
#[derive(Clone, Debug)]
pub struct StagePlan {
    pub stages: Vec<StageConfig>,
    pub refine_steps: usize,
}

impl StagePlan {
    /// Desk-scale analogue of the three-stage progression: foundational
    /// alignment (8), in-context learning with condition samples (16),
    /// high-fidelity refinement restricted to the top resolution (32),
    /// then a uniform-sampler refinement pass.
    pub fn toy() -> StagePlan {
        let logit_normal = TimestepSampler::LogitNormal { mu: 0.0, sigma: 1.0 };
        StagePlan {
            stages: vec![
                StageConfig {
                    name: "stage1".to_string(),
                    resolution: 8,
                    steps: 40,
                    t2i_weight: 0.8,
                    lm_weight: 0.2,
                    condition_prob: 0.0,
                    sampler: logit_normal,
                },
                StageConfig {
                    name: "stage2".to_string(),
                    resolution: 16,
                    steps: 40,
                    t2i_weight: 0.8,
                    lm_weight: 0.2,
                    condition_prob: 0.3,
                    sampler: logit_normal,
                },
                StageConfig {
                    name: "stage3".to_string(),
                    resolution: 32,
                    steps: 20,
                    t2i_weight: 0.9,
                    lm_weight: 0.1,
                    condition_prob: 0.3,
                    sampler: logit_normal,
                },
            ],
            refine_steps: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::InvalidConfig("stage plan has no stages".to_string()));
        }
        let mut last = 0;
        for stage in &self.stages {
            if stage.resolution < last {
                return Err(Error::InvalidConfig(format!(
                    "stage resolutions must be non-decreasing ({} after {last})",
                    stage.resolution
                )));
            }
            last = stage.resolution;
            if stage.t2i_weight < 0.0
                || stage.lm_weight < 0.0
                || stage.t2i_weight + stage.lm_weight <= 0.0
            {
                return Err(Error::InvalidConfig(format!(
                    "stage `{}` task mix must be nonnegative and not all zero",
                    stage.name
                )));
            }
            if !(0.0..=1.0).contains(&stage.condition_prob) {
                return Err(Error::InvalidConfig(format!(
                    "stage `{}` condition probability outside [0, 1]",
                    stage.name
                )));
            }
        }
        Ok(())
    }
}

/// Draws one batch under a stage's task mix: T2I versus text-only LM items
/// by weight, and condition-carrying records at the configured probability
/// among image items.
pub fn draw_batch(
    records: &[DatasetRecord],
    stage: &StageConfig,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<BatchItem>> {
    if records.is_empty() {
        return Err(Error::Dataset("empty record set".to_string()));
    }
    let t2i: Vec<usize> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.tag == TaskTag::T2i)
        .map(|(i, _)| i)
        .collect();
    let conditioned: Vec<usize> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.condition.is_some())
        .map(|(i, _)| i)
        .collect();
    if t2i.is_empty() {
        return Err(Error::Dataset("no t2i records".to_string()));
    }
    if stage.condition_prob > 0.0 && conditioned.is_empty() {
        return Err(Error::Dataset(
            "stage draws condition samples but the record set has none".to_string(),
        ));
    }

    let image_share = stage.t2i_weight / (stage.t2i_weight + stage.lm_weight);
    let mut batch = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        if rng.gen::<f64>() < image_share {
            let pool = if stage.condition_prob > 0.0 && rng.gen::<f64>() < stage.condition_prob {
                &conditioned
            } else {
                &t2i
            };
            let record = &records[pool[rng.gen_range(0..pool.len())]];
            batch.push(BatchItem::from_record(record));
        } else {
            let record = &records[rng.gen_range(0..records.len())];
            batch.push(BatchItem::text_only(&record.caption));
        }
    }
    Ok(batch)
}

/// One metrics line: `stage=<name> step=<i> total=... [flow=...] ...`.
#[derive(Clone, Debug)]
pub struct MetricsRecord {
    pub stage: String,
    pub step: usize,
    pub metrics: StepMetrics,
}

impl MetricsRecord {
    pub fn to_line(&self) -> String {
        let mut line = format!(
            "stage={} step={} total={:.6}",
            self.stage, self.step, self.metrics.total
        );
        if let Some(v) = self.metrics.flow {
            line.push_str(&format!(" flow={v:.6}"));
        }
        if let Some(v) = self.metrics.perceptual {
            line.push_str(&format!(" perceptual={v:.6}"));
        }
        if let Some(v) = self.metrics.lm {
            line.push_str(&format!(" lm={v:.6}"));
        }
        line.push_str(&format!(" grad_norm={:.6}", self.metrics.grad_norm));
        line
    }
}

/// Summary of one executed stage.
#[derive(Clone, Debug)]
pub struct StageLog {
    pub name: String,
    pub resolution: usize,
    pub steps_run: usize,
    pub first_total: f64,
    pub last_total: f64,
}

/// Runs the stages in order over per-resolution record sets, then the
/// uniform-sampler refinement pass at the final resolution. One Adam state
/// spans the whole run.
#[allow(clippy::too_many_arguments)]
pub fn run_stage_schedule(
    cfg: &ModelConfig,
    plan: &StagePlan,
    data: &BTreeMap<usize, Vec<DatasetRecord>>,
    params: &mut ParamTree,
    net: &FeatureNet,
    weights: &LossWeights,
    hyper: &TrainHyper,
    seed: u64,
    mut on_metrics: impl FnMut(&MetricsRecord),
) -> Result<Vec<StageLog>> {
    plan.validate()?;
    weights.validate()?;
    let mut stages = plan.stages.clone();
    if plan.refine_steps > 0 {
        let last = stages.last().expect("validated non-empty").clone();
        stages.push(StageConfig {
            name: "refine".to_string(),
            steps: plan.refine_steps,
            sampler: TimestepSampler::Uniform,
            ..last
        });
    }
    for stage in &stages {
        if !data.contains_key(&stage.resolution) {
            return Err(Error::Dataset(format!(
                "no records at stage resolution {}",
                stage.resolution
            )));
        }
        if stage.resolution % cfg.patch_size != 0 || stage.resolution % cfg.cond_stride != 0 {
            return Err(Error::InvalidConfig(format!(
                "stage resolution {} not divisible by patch size / encoder stride",
                stage.resolution
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = AdamState::new(params);
    let mut logs = Vec::new();
    let mut global_step = 0usize;
    for stage in &stages {
        let records = &data[&stage.resolution];
        let mut first_total = f64::NAN;
        let mut last_total = f64::NAN;
        for step in 0..stage.steps {
            let batch = draw_batch(records, stage, hyper.batch_size, &mut rng)?;
            let metrics = train_step(
                cfg,
                params,
                &mut opt,
                net,
                weights,
                hyper,
                &stage.sampler,
                &batch,
                &mut rng,
                global_step,
            )?;
            if step == 0 {
                first_total = metrics.total;
            }
            last_total = metrics.total;
            on_metrics(&MetricsRecord {
                stage: stage.name.clone(),
                step,
                metrics,
            });
            global_step += 1;
        }
        logs.push(StageLog {
            name: stage.name.clone(),
            resolution: stage.resolution,
            steps_run: stage.steps,
            first_total,
            last_total,
        });
    }
    Ok(logs)
}
