//! The decoder-only unified transformer: pre-norm blocks of masked rotary
//! attention and SwiGLU MLPs over the shared token sequence, with linear
//! heads predicting clean image patches and text logits.

use std::collections::BTreeMap;

use rand::Rng;

use crate::attention::{apply_rope_node, attention_head_node, AttentionMask, RopeParams};
use crate::error::{Error, Result};
use crate::graph::unpatchify_node;
use crate::params::{ParamNodes, ParamTree};
use crate::tape::{NodeId, Tape};
use crate::tensor::{unpatchify, Tensor};
use crate::tokenize::{PatchGrid, SequenceLayout, VOCAB_SIZE};

pub const RMSNORM_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

/// Structural hyperparameters. Every parameter tensor's shape is a function
/// of this struct alone.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_expansion: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub vocab: usize,
    pub cond_stride: usize,
    pub rope: RopeParams,
}

impl ModelConfig {
    /// Desk-scale default: 2 blocks, width 64, 4 heads, 2x2 patches on RGB
    /// images.
    pub fn toy() -> ModelConfig {
        ModelConfig {
            layers: 2,
            dim: 64,
            heads: 4,
            mlp_expansion: 4,
            patch_size: 2,
            channels: 3,
            vocab: VOCAB_SIZE,
            cond_stride: 4,
            rope: RopeParams {
                base: 10000.0,
                split: [8, 4, 4],
            },
        }
    }

    /// Single-block width-16 model used by the gradient-fidelity checks.
    pub fn gradcheck_tiny() -> ModelConfig {
        ModelConfig {
            layers: 1,
            dim: 16,
            heads: 2,
            mlp_expansion: 2,
            patch_size: 2,
            channels: 3,
            vocab: VOCAB_SIZE,
            cond_stride: 4,
            rope: RopeParams {
                base: 10000.0,
                split: [4, 2, 2],
            },
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Stride-2 stages in the condition encoder.
    pub fn cond_layers(&self) -> usize {
        self.cond_stride.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::InvalidConfig(msg));
        if self.dim == 0 || self.heads == 0 || self.mlp_expansion == 0 {
            return err("dim, heads, and mlp expansion must be >= 1".into());
        }
        if self.dim % self.heads != 0 {
            return err(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.patch_size == 0 || self.channels == 0 {
            return err("patch size and channels must be >= 1".into());
        }
        if self.vocab != VOCAB_SIZE {
            return err(format!("vocabulary is fixed at {VOCAB_SIZE}, got {}", self.vocab));
        }
        if self.cond_stride < 2 || !self.cond_stride.is_power_of_two() {
            return err(format!(
                "condition-encoder stride must be a power of two >= 2, got {}",
                self.cond_stride
            ));
        }
        self.rope.validate()?;
        if self.rope.head_dim() != self.head_dim() {
            return err(format!(
                "rope split {:?} must sum to head dim {}",
                self.rope.split,
                self.head_dim()
            ));
        }
        Ok(())
    }
}

/// Shapes of every named parameter tensor, derived from config alone.
pub fn expected_shapes(cfg: &ModelConfig) -> BTreeMap<String, Vec<usize>> {
    let d = cfg.dim;
    let mut shapes = BTreeMap::new();
    shapes.insert("text_embed.table".to_string(), vec![cfg.vocab, d]);
    for layer in 0..cfg.cond_layers() {
        let in_ch = if layer == 0 { cfg.channels } else { d };
        shapes.insert(format!("cond.conv{layer}.w"), vec![4 * in_ch, d]);
    }
    shapes.insert("cond.proj.w".to_string(), vec![d, d]);
    shapes.insert("time.proj1.w".to_string(), vec![d, d]);
    shapes.insert("time.proj2.w".to_string(), vec![d, d]);
    shapes.insert("patch_embed.w".to_string(), vec![cfg.patch_len(), d]);
    for b in 0..cfg.layers {
        shapes.insert(format!("block{b}.attn.wq"), vec![d, d]);
        shapes.insert(format!("block{b}.attn.wk"), vec![d, d]);
        shapes.insert(format!("block{b}.attn.wv"), vec![d, d]);
        shapes.insert(format!("block{b}.attn.wo"), vec![d, d]);
        shapes.insert(format!("block{b}.mlp.w_gate"), vec![d, cfg.mlp_expansion * d]);
        shapes.insert(format!("block{b}.mlp.w_up"), vec![d, cfg.mlp_expansion * d]);
        shapes.insert(format!("block{b}.mlp.w_out"), vec![cfg.mlp_expansion * d, d]);
        shapes.insert(format!("block{b}.norm1.gain"), vec![d]);
        shapes.insert(format!("block{b}.norm2.gain"), vec![d]);
    }
    shapes.insert("final_norm.gain".to_string(), vec![d]);
    shapes.insert("patch_head.w".to_string(), vec![d, cfg.patch_len()]);
    shapes.insert("text_head.w".to_string(), vec![d, cfg.vocab]);
    shapes
}

/// Training initialization: normals with deviation 0.02 everywhere except
/// RMSNorm gains (ones) and the attention/MLP output projections (zeros),
/// which makes every block the identity map at init.
pub fn init_params<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> ParamTree {
    let mut params = ParamTree::new();
    for (name, shape) in expected_shapes(cfg) {
        let tensor = if name.ends_with(".gain") {
            Tensor::filled(&shape, 1.0)
        } else if name.ends_with("attn.wo") || name.ends_with("mlp.w_out") {
            Tensor::zeros(&shape)
        } else {
            Tensor::randn(&shape, INIT_STD, rng)
        };
        params.insert(name, tensor);
    }
    params
}

/// Fully random initialization for gradient checks: every weight nonzero so
/// every backward path is exercised, with magnitudes that keep all
/// coordinate gradients well above finite-difference noise.
pub fn init_params_dense<R: Rng>(cfg: &ModelConfig, std: f64, rng: &mut R) -> ParamTree {
    let mut params = ParamTree::new();
    for (name, shape) in expected_shapes(cfg) {
        let tensor = if name.ends_with(".gain") {
            let noise = Tensor::randn(&shape, std * 0.5, rng);
            noise.map(|v| 1.0 + v)
        } else {
            Tensor::randn(&shape, std, rng)
        };
        params.insert(name, tensor);
    }
    params
}

/// Verifies a parameter tree against the config-derived shape table:
/// no missing names, no extras, every shape exact.
pub fn validate_params(cfg: &ModelConfig, params: &ParamTree) -> Result<()> {
    let shapes = expected_shapes(cfg);
    for (name, shape) in &shapes {
        let t = params
            .get(name)
            .map_err(|_| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {:?}, config implies {shape:?}",
                t.shape()
            )));
        }
    }
    for name in params.names() {
        if !shapes.contains_key(name) {
            return Err(Error::Checkpoint(format!("unexpected tensor `{name}`")));
        }
    }
    Ok(())
}

/// Per-row RMS normalization with learned gain:
/// `x / sqrt(mean(x^2) + eps) * gain`.
pub fn rmsnorm_node(tape: &mut Tape, x: NodeId, gain: NodeId) -> Result<NodeId> {
    let shape = tape.value(x).shape().to_vec();
    let sq = tape.mul(x, x)?;
    let ms = tape.mean_axis(sq, shape.len() - 1)?;
    let stabilized = tape.add_scalar(ms, RMSNORM_EPS)?;
    let inv = tape.power(stabilized, -0.5)?;
    let inv_b = tape.broadcast_to(inv, &shape)?;
    let normed = tape.mul(x, inv_b)?;
    let gain_b = tape.broadcast_to(gain, &shape)?;
    tape.mul(normed, gain_b)
}

/// Bias-free gated MLP: `W_out( silu(W_gate x) ⊙ (W_up x) )`.
pub fn swiglu_node(
    tape: &mut Tape,
    x: NodeId,
    w_gate: NodeId,
    w_up: NodeId,
    w_out: NodeId,
) -> Result<NodeId> {
    let gate = tape.matmul(x, w_gate)?;
    let act = tape.silu(gate)?;
    let up = tape.matmul(x, w_up)?;
    let gated = tape.mul(act, up)?;
    tape.matmul(gated, w_out)
}

/// One pre-norm block: `x + Attn(RMSNorm(x))` then `+ MLP(RMSNorm(.))`.
pub fn transformer_block_node(
    tape: &mut Tape,
    cfg: &ModelConfig,
    nodes: &ParamNodes,
    block: usize,
    x: NodeId,
    mask_bias: NodeId,
    layout: &SequenceLayout,
) -> Result<NodeId> {
    let d = cfg.dim;
    let dh = cfg.head_dim();
    let prefix = format!("block{block}");

    let gain1 = nodes.get(&format!("{prefix}.norm1.gain"))?;
    let normed = rmsnorm_node(tape, x, gain1)?;
    let q = tape.matmul(normed, nodes.get(&format!("{prefix}.attn.wq"))?)?;
    let k = tape.matmul(normed, nodes.get(&format!("{prefix}.attn.wk"))?)?;
    let v = tape.matmul(normed, nodes.get(&format!("{prefix}.attn.wv"))?)?;

    let mut head_outputs = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = tape.slice(q, 1, h * dh, dh)?;
        let kh = tape.slice(k, 1, h * dh, dh)?;
        let vh = tape.slice(v, 1, h * dh, dh)?;
        let qr = apply_rope_node(tape, qh, &layout.positions, &cfg.rope)?;
        let kr = apply_rope_node(tape, kh, &layout.positions, &cfg.rope)?;
        head_outputs.push(attention_head_node(tape, qr, kr, vh, mask_bias)?);
    }
    let merged = if head_outputs.len() == 1 {
        head_outputs[0]
    } else {
        tape.concat(&head_outputs, 1)?
    };
    let attn_out = tape.matmul(merged, nodes.get(&format!("{prefix}.attn.wo"))?)?;
    let x = tape.add(x, attn_out)?;

    let gain2 = nodes.get(&format!("{prefix}.norm2.gain"))?;
    let normed2 = rmsnorm_node(tape, x, gain2)?;
    let mlp = swiglu_node(
        tape,
        normed2,
        nodes.get(&format!("{prefix}.mlp.w_gate"))?,
        nodes.get(&format!("{prefix}.mlp.w_up"))?,
        nodes.get(&format!("{prefix}.mlp.w_out"))?,
    )?;
    debug_assert_eq!(tape.value(mlp).shape(), &[layout.len(), d]);
    tape.add(x, mlp)
}

/// Model outputs: one clean-patch prediction per Generation token, one
/// vocabulary logit row per Text token.
pub struct ForwardOutput {
    pub patch_pred: Option<NodeId>,
    pub text_logits: Option<NodeId>,
}

/// Backbone activations: the residual stream after every block, plus the
/// final normalized state the heads read.
pub struct BackboneStates {
    pub block_outputs: Vec<NodeId>,
    pub normed: NodeId,
}

/// Runs the block stack and final norm, exposing per-block activations
/// (the distillation discriminator reads two of them from the frozen
/// teacher).
pub fn forward_states(
    tape: &mut Tape,
    cfg: &ModelConfig,
    nodes: &ParamNodes,
    seq: NodeId,
    layout: &SequenceLayout,
    mask: &AttentionMask,
) -> Result<BackboneStates> {
    let len = layout.len();
    if tape.value(seq).shape() != [len, cfg.dim] {
        return Err(Error::shape(
            "forward_model",
            format!(
                "sequence {:?} vs layout length {len}",
                tape.value(seq).shape()
            ),
        ));
    }
    if mask.len() != len {
        return Err(Error::shape(
            "forward_model",
            format!("mask {} vs sequence {len}", mask.len()),
        ));
    }
    let mask_bias = tape.constant(mask.bias_tensor());
    let mut x = seq;
    let mut block_outputs = Vec::with_capacity(cfg.layers);
    for b in 0..cfg.layers {
        x = transformer_block_node(tape, cfg, nodes, b, x, mask_bias, layout)?;
        block_outputs.push(x);
    }
    let final_gain = nodes.get("final_norm.gain")?;
    let normed = rmsnorm_node(tape, x, final_gain)?;
    Ok(BackboneStates {
        block_outputs,
        normed,
    })
}

/// Runs the backbone over an assembled sequence. `want_patches` demands a
/// non-empty Generation block.
pub fn forward_model(
    tape: &mut Tape,
    cfg: &ModelConfig,
    nodes: &ParamNodes,
    seq: NodeId,
    layout: &SequenceLayout,
    mask: &AttentionMask,
    want_patches: bool,
) -> Result<ForwardOutput> {
    if want_patches && layout.gen_len == 0 {
        return Err(Error::InvalidArgument(
            "patch predictions requested but the sequence has no generation tokens".to_string(),
        ));
    }
    let states = forward_states(tape, cfg, nodes, seq, layout, mask)?;
    let x = states.normed;

    let patch_pred = if want_patches {
        let gen_rows = tape.slice(x, 0, layout.gen_start, layout.gen_len)?;
        Some(tape.matmul(gen_rows, nodes.get("patch_head.w")?)?)
    } else {
        None
    };
    let text_logits = if layout.text_len > 0 {
        let text_rows = tape.slice(x, 0, layout.text_start, layout.text_len)?;
        Some(tape.matmul(text_rows, nodes.get("text_head.w")?)?)
    } else {
        None
    };
    Ok(ForwardOutput {
        patch_pred,
        text_logits,
    })
}

/// Reassembles predicted patches into an image; exact inverse of the
/// patchify layout.
pub fn reassemble(grid: &PatchGrid) -> Result<Tensor> {
    unpatchify(
        &grid.patches,
        grid.rows,
        grid.cols,
        grid.patch_size,
        grid.channels,
    )
}

/// On-tape reassembly of `[N, p*p*C]` patch predictions.
pub fn reassemble_node(
    tape: &mut Tape,
    patches: NodeId,
    rows: usize,
    cols: usize,
    p: usize,
    c: usize,
) -> Result<NodeId> {
    unpatchify_node(tape, patches, rows, cols, p, c)
}
