//! Deterministic ODE sampling: integrate the straight interpolation path
//! from noise (t = 0) to image (t = 1) using the model's clean-image
//! predictions converted to velocities.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::build_hybrid_mask;
use crate::error::{Error, Result};
use crate::model::{forward_model, ModelConfig};
use crate::params::ParamTree;
use crate::tape::Tape;
use crate::tensor::{unpatchify, Tensor};
use crate::tokenize::{
    assemble_sequence, encode_condition, encode_text, generation_fragment, timestep_token,
    Fragment,
};

/// Cap on the `1/(1-t)` factor when converting predictions near `t = 1`.
pub const TERMINAL_GUARD: f64 = 1e-4;
/// Default step count of the full model.
pub const TEACHER_STEPS: usize = 50;
/// Default step count of the distilled variant.
pub const DISTILLED_STEPS: usize = 28;

/// Sampler settings: a uniform time grid with `steps` intervals over
/// `0 = t_0 < ... < t_N = 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
}

impl SamplerConfig {
    pub fn teacher_default() -> SamplerConfig {
        SamplerConfig {
            steps: TEACHER_STEPS,
        }
    }

    pub fn distilled_default() -> SamplerConfig {
        SamplerConfig {
            steps: DISTILLED_STEPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidConfig("sampler needs at least 1 step".into()));
        }
        Ok(())
    }
}

/// Uniform grid with exact endpoints.
pub fn time_grid(steps: usize) -> Vec<f64> {
    (0..=steps).map(|i| i as f64 / steps as f64).collect()
}

/// Velocity implied by a clean-image prediction under the linear path:
/// `v = (x_hat - x_t) / (1 - t)`.
pub fn xpred_to_velocity(x_hat: &Tensor, x_t: &Tensor, t: f64) -> Result<Tensor> {
    if t >= 1.0 - TERMINAL_GUARD {
        return Err(Error::InvalidArgument(format!(
            "timestep {t} is inside the terminal guard zone (denominator 1-t singular)"
        )));
    }
    let inv = 1.0 / (1.0 - t);
    x_hat.zip_map(x_t, |xh, xt| (xh - xt) * inv)
}

/// One explicit Euler step `x + dt * v`.
pub fn euler_step(x: &Tensor, v: &Tensor, dt: f64) -> Result<Tensor> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "euler step size must be positive, got {dt}"
        )));
    }
    x.zip_map(v, |xv, vv| xv + dt * vv)
}

fn integrate<P>(
    mut predictor: P,
    noise: Tensor,
    config: &SamplerConfig,
    mut trace: Option<&mut Vec<Tensor>>,
) -> Result<Tensor>
where
    P: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    config.validate()?;
    let grid = time_grid(config.steps);
    let mut x = noise;
    if let Some(tr) = trace.as_deref_mut() {
        tr.push(x.clone());
    }
    for window in grid.windows(2) {
        let (t, t_next) = (window[0], window[1]);
        let x_hat = predictor(&x, t)?;
        let v = xpred_to_velocity(&x_hat, &x, t)?;
        x = euler_step(&x, &v, t_next - t)?;
        if !x.all_finite() {
            return Err(Error::NonFinite {
                op: format!("sampler state at t={t_next}"),
            });
        }
        if let Some(tr) = trace.as_deref_mut() {
            tr.push(x.clone());
        }
    }
    Ok(x)
}

/// Integrates from a given noise draw with an arbitrary clean-image
/// predictor. Intermediate states are never clamped; the final output is
/// clamped to `[-1, 1]`.
pub fn sample_with<P>(predictor: P, noise: Tensor, config: &SamplerConfig) -> Result<Tensor>
where
    P: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    let x = integrate(predictor, noise, config, None)?;
    Ok(x.map(|v| v.clamp(-1.0, 1.0)))
}

/// Like [`sample_with`] but also returns every state along the trajectory
/// (unclamped, including the initial noise).
pub fn sample_trajectory_with<P>(
    predictor: P,
    noise: Tensor,
    config: &SamplerConfig,
) -> Result<(Tensor, Vec<Tensor>)>
where
    P: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    let mut states = Vec::with_capacity(config.steps + 1);
    let x = integrate(predictor, noise, config, Some(&mut states))?;
    Ok((x.map(|v| v.clamp(-1.0, 1.0)), states))
}

/// Clean-image prediction of a parameterized model at `(x_t, t)`: the token
/// sequence is rebuilt exactly as in training (condition, text, timestep,
/// generation), run through the backbone, and the predicted patches are
/// reassembled.
pub fn predict_clean_image(
    cfg: &ModelConfig,
    params: &ParamTree,
    prompt: &[u8],
    conditions: &[Tensor],
    x_t: &Tensor,
    t: f64,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let nodes = params.load_onto(&mut tape, false);
    let mut fragments: Vec<Fragment> = Vec::new();
    for cond in conditions {
        fragments.push(encode_condition(&mut tape, cfg, &nodes, cond)?);
    }
    fragments.push(encode_text(&mut tape, nodes.get("text_embed.table")?, prompt)?);
    fragments.push(timestep_token(&mut tape, cfg, &nodes, t)?);
    let noisy = tape.constant(x_t.clone());
    fragments.push(generation_fragment(
        &mut tape,
        cfg,
        nodes.get("patch_embed.w")?,
        noisy,
    )?);
    let (seq, layout) = assemble_sequence(&mut tape, &fragments)?;
    let mask = build_hybrid_mask(&layout.kinds)?;
    let out = forward_model(&mut tape, cfg, &nodes, seq, &layout, &mask, true)?;
    let patches = tape.value(out.patch_pred.expect("patches requested")).clone();
    let (rows, cols) = layout.gen_grid.expect("generation grid");
    unpatchify(&patches, rows, cols, cfg.patch_size, cfg.channels)
}

/// Full sampling entry point: seed fixes the initial noise draw; the output
/// is deterministic in all arguments.
pub fn sample(
    cfg: &ModelConfig,
    params: &ParamTree,
    prompt: &[u8],
    conditions: &[Tensor],
    resolution: usize,
    config: &SamplerConfig,
    seed: u64,
) -> Result<Tensor> {
    if resolution % cfg.patch_size != 0 {
        return Err(Error::InvalidArgument(format!(
            "resolution {resolution} not divisible by patch size {}",
            cfg.patch_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Tensor::randn(&[resolution, resolution, cfg.channels], 1.0, &mut rng);
    sample_with(
        |x_t, t| predict_clean_image(cfg, params, prompt, conditions, x_t, t),
        noise,
        config,
    )
}
