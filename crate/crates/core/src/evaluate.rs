//! Held-out evaluation: flow and LM losses on a fixed split plus the
//! rule-based caption-consistency accuracy of sampled images.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{check_scene, parse_caption, DatasetRecord, TaskTag};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objectives::{
    build_item_loss, draw_for_batch, BatchItem, FeatureNet, LossWeights, TimestepSampler,
};
use crate::params::ParamTree;
use crate::sampling::{sample, SamplerConfig};
use crate::tape::Tape;

#[derive(Clone, Copy, Debug)]
pub struct EvalReport {
    pub flow: f64,
    pub lm: f64,
    /// Fraction of described (shape, color, cell) clauses the rendered
    /// samples satisfy.
    pub caption_accuracy: f64,
    pub prompts: usize,
    pub clauses: usize,
}

impl EvalReport {
    pub fn to_lines(&self) -> Vec<String> {
        vec![
            format!("eval flow={:.6}", self.flow),
            format!("eval lm={:.6}", self.lm),
            format!(
                "eval caption_accuracy={:.4} prompts={} clauses={}",
                self.caption_accuracy, self.prompts, self.clauses
            ),
        ]
    }
}

/// Evaluates `params` on held-out records: deterministic loss probes over
/// every record, then one sampled image per T2I prompt checked clause by
/// clause against the caption grammar.
pub fn evaluate(
    cfg: &ModelConfig,
    params: &ParamTree,
    net: &FeatureNet,
    records: &[DatasetRecord],
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::Dataset("empty evaluation split".into()));
    }
    let items: Vec<BatchItem> = records.iter().map(BatchItem::from_record).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws = draw_for_batch(&items, &TimestepSampler::Uniform, &mut rng)?;
    // Only flow and lm are reported; skipping the perceptual term keeps the
    // report independent of any feature-net seed.
    let weights = LossWeights {
        lambda_perceptual: 0.0,
        lambda_lm: 1.0,
    };
    let mut flow_sum = 0.0;
    let mut flow_n = 0usize;
    let mut lm_sum = 0.0;
    let mut lm_n = 0usize;
    for (item, draw) in items.iter().zip(&draws) {
        let mut tape = Tape::new();
        let nodes = params.load_onto(&mut tape, false);
        let loss = build_item_loss(&mut tape, cfg, &nodes, net, &weights, item, draw)?;
        if let Some(f) = loss.flow {
            flow_sum += tape.value(f).scalar_value();
            flow_n += 1;
        }
        if let Some(l) = loss.lm {
            lm_sum += tape.value(l).scalar_value();
            lm_n += 1;
        }
    }

    let mut clauses = 0usize;
    let mut hits = 0usize;
    let mut prompts = 0usize;
    for (index, record) in records.iter().enumerate() {
        if record.tag != TaskTag::T2i {
            continue;
        }
        let resolution = record.target.shape()[0];
        let specs = parse_caption(&record.caption)?;
        let image = sample(
            cfg,
            params,
            record.caption.as_bytes(),
            &[],
            resolution,
            sampler,
            seed.wrapping_add(index as u64).wrapping_mul(0x9E3779B97F4A7C15),
        )?;
        let ok = check_scene(&image, &specs, resolution);
        clauses += ok.len();
        hits += ok.iter().filter(|&&b| b).count();
        prompts += 1;
    }
    if prompts == 0 {
        return Err(Error::Dataset("evaluation split has no t2i prompts".into()));
    }
    Ok(EvalReport {
        flow: flow_sum / flow_n.max(1) as f64,
        lm: lm_sum / lm_n.max(1) as f64,
        caption_accuracy: hits as f64 / clauses.max(1) as f64,
        prompts,
        clauses,
    })
}
