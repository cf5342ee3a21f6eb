//! Flat key-value run configuration (`key = value` lines, `#` comments)
//! with a closed schema: unknown or duplicate keys are refusals, values are
//! validated on parse.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objectives::{LossWeights, StagePlan, TimestepSampler, TrainHyper};
use crate::sampling::SamplerConfig;

/// Everything a run needs: model shape, loss weights, optimizer settings,
/// the stage plan, sampler and distillation settings, seeds and data sizes.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub hyper: TrainHyper,
    pub plan: StagePlan,
    pub sampler: SamplerConfig,
    pub distill: DistillConfig,
    pub seed: u64,
    pub data_count: usize,
    pub eval_count: usize,
    pub eval_seed: u64,
    pub logit_mu: f64,
    pub logit_sigma: f64,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::toy(),
            weights: LossWeights::default(),
            hyper: TrainHyper::default(),
            plan: StagePlan::toy(),
            sampler: SamplerConfig::teacher_default(),
            distill: DistillConfig::default(),
            seed: 0,
            data_count: 128,
            eval_count: 64,
            eval_seed: 9999,
            logit_mu: 0.0,
            logit_sigma: 1.0,
            out_dir: "out".to_string(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        self.plan.validate()?;
        self.sampler.validate()?;
        self.distill.validate()?;
        if self.hyper.batch_size == 0 {
            return Err(Error::InvalidConfig("train.batch_size must be >= 1".into()));
        }
        if self.data_count == 0 || self.eval_count == 0 {
            return Err(Error::InvalidConfig("data counts must be >= 1".into()));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeSet::new();
        let mut stage_pairs: Vec<(usize, String, String)> = Vec::new();
        let mut stage_count: Option<usize> = None;

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::InvalidConfig(format!(
                    "line {}: expected `key = value`, got `{raw}`",
                    lineno + 1
                )));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if !seen.insert(key.clone()) {
                return Err(Error::InvalidConfig(format!("duplicate key `{key}`")));
            }

            if let Some(rest) = key.strip_prefix("stage.") {
                if rest == "count" {
                    stage_count = Some(parse_num(&key, &value)?);
                    continue;
                }
                let Some((index, field)) = rest.split_once('.') else {
                    return Err(Error::InvalidConfig(format!("unknown key `{key}`")));
                };
                let index: usize = index
                    .parse()
                    .map_err(|_| Error::InvalidConfig(format!("bad stage index in `{key}`")))?;
                if index == 0 {
                    return Err(Error::InvalidConfig("stage indices start at 1".into()));
                }
                stage_pairs.push((index, field.to_string(), value));
                continue;
            }

            apply_flat_key(&mut cfg, &key, &value)?;
        }

        if let Some(count) = stage_count {
            if count == 0 {
                return Err(Error::InvalidConfig("stage.count must be >= 1".into()));
            }
            while cfg.plan.stages.len() > count {
                cfg.plan.stages.pop();
            }
            while cfg.plan.stages.len() < count {
                let mut next = cfg.plan.stages.last().expect("non-empty default").clone();
                next.name = format!("stage{}", cfg.plan.stages.len() + 1);
                cfg.plan.stages.push(next);
            }
        }
        for (index, field, value) in stage_pairs {
            let n = cfg.plan.stages.len();
            let stage = cfg.plan.stages.get_mut(index - 1).ok_or_else(|| {
                Error::InvalidConfig(format!("stage index {index} exceeds stage.count {n}"))
            })?;
            match field.as_str() {
                "resolution" => stage.resolution = parse_num(&field, &value)?,
                "steps" => stage.steps = parse_num(&field, &value)?,
                "t2i_weight" => stage.t2i_weight = parse_float(&field, &value)?,
                "lm_weight" => stage.lm_weight = parse_float(&field, &value)?,
                "condition_prob" => stage.condition_prob = parse_float(&field, &value)?,
                "sampler" => stage.sampler = parse_sampler(&value, cfg.logit_mu, cfg.logit_sigma)?,
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "unknown stage field `{other}`"
                    )))
                }
            }
        }

        // Keep logit-normal stages in sync with configured mu/sigma.
        for stage in &mut cfg.plan.stages {
            if let TimestepSampler::LogitNormal { .. } = stage.sampler {
                stage.sampler = TimestepSampler::LogitNormal {
                    mu: cfg.logit_mu,
                    sigma: cfg.logit_sigma,
                };
            }
        }

        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)?;
        RunConfig::parse(&text)
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("bad value `{value}` for `{key}`")))
}

fn parse_float(key: &str, value: &str) -> Result<f64> {
    parse_num(key, value)
}

fn parse_sampler(value: &str, mu: f64, sigma: f64) -> Result<TimestepSampler> {
    match value {
        "uniform" => Ok(TimestepSampler::Uniform),
        "logit-normal" => Ok(TimestepSampler::LogitNormal { mu, sigma }),
        other => Err(Error::InvalidConfig(format!(
            "unknown sampler `{other}` (uniform | logit-normal)"
        ))),
    }
}

fn apply_flat_key(cfg: &mut RunConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "seed" => cfg.seed = parse_num(key, value)?,
        "out.dir" => cfg.out_dir = value.to_string(),
        "model.layers" => cfg.model.layers = parse_num(key, value)?,
        "model.dim" => cfg.model.dim = parse_num(key, value)?,
        "model.heads" => cfg.model.heads = parse_num(key, value)?,
        "model.mlp_expansion" => cfg.model.mlp_expansion = parse_num(key, value)?,
        "model.patch_size" => cfg.model.patch_size = parse_num(key, value)?,
        "model.channels" => cfg.model.channels = parse_num(key, value)?,
        "model.vocab" => cfg.model.vocab = parse_num(key, value)?,
        "model.cond_stride" => cfg.model.cond_stride = parse_num(key, value)?,
        "model.rope_base" => cfg.model.rope.base = parse_float(key, value)?,
        "model.rope_split" => {
            let parts: Vec<&str> = value.split(',').collect();
            if parts.len() != 3 {
                return Err(Error::InvalidConfig(format!(
                    "model.rope_split wants three comma-separated values, got `{value}`"
                )));
            }
            for (slot, part) in cfg.model.rope.split.iter_mut().zip(parts) {
                *slot = parse_num(key, part.trim())?;
            }
        }
        "loss.lambda_perceptual" => cfg.weights.lambda_perceptual = parse_float(key, value)?,
        "loss.lambda_lm" => cfg.weights.lambda_lm = parse_float(key, value)?,
        "train.lr" => cfg.hyper.lr = parse_float(key, value)?,
        "train.batch_size" => cfg.hyper.batch_size = parse_num(key, value)?,
        "sampler.mu" => cfg.logit_mu = parse_float(key, value)?,
        "sampler.sigma" => cfg.logit_sigma = parse_float(key, value)?,
        "sample.steps" => cfg.sampler.steps = parse_num(key, value)?,
        "data.count" => cfg.data_count = parse_num(key, value)?,
        "data.eval_count" => cfg.eval_count = parse_num(key, value)?,
        "data.eval_seed" => cfg.eval_seed = parse_num(key, value)?,
        "refine.steps" => cfg.plan.refine_steps = parse_num(key, value)?,
        "distill.lambda_diff" => cfg.distill.lambda_diff = parse_float(key, value)?,
        "distill.lambda_adv" => cfg.distill.lambda_adv = parse_float(key, value)?,
        "distill.student_steps" => cfg.distill.student_steps = parse_num(key, value)?,
        "distill.fake_ratio" => cfg.distill.fake_ratio = parse_num(key, value)?,
        "distill.steps" => cfg.distill.steps = parse_num(key, value)?,
        "distill.lr" => cfg.distill.lr = parse_float(key, value)?,
        "distill.fake_lr" => cfg.distill.fake_lr = parse_float(key, value)?,
        "distill.batch_size" => cfg.distill.batch_size = parse_num(key, value)?,
        other => return Err(Error::InvalidConfig(format!("unknown key `{other}`"))),
    }
    Ok(())
}
