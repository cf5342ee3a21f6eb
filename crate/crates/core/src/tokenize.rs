//! Unified multimodal tokenization: text bytes, condition images, the
//! diffusion timestep, and noisy target patches all map into one shared
//! token space and concatenate into a single sequence.

use crate::error::{Error, Result};
use crate::graph::patchify_node;
use crate::model::ModelConfig;
use crate::params::ParamNodes;
use crate::tape::{NodeId, Tape};
use crate::tensor::{image_dims, patchify, Tensor};

/// Byte-level vocabulary: 256 byte values plus BOS, EOS, PAD.
pub const VOCAB_SIZE: usize = 259;
pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;

/// The four token populations of the shared sequence, in their fixed block
/// order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum SegmentKind {
    Condition,
    Text,
    Timestep,
    Generation,
}

/// Per-token position triple. `row`/`col` are -1 for non-spatial tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenPosition {
    pub stream: usize,
    pub row: i64,
    pub col: i64,
}

/// One kind-homogeneous run of tokens living on a tape.
#[derive(Clone)]
pub struct Fragment {
    pub kind: SegmentKind,
    pub embeddings: NodeId,
    pub len: usize,
    /// Grid dimensions for Generation fragments.
    pub grid: Option<(usize, usize)>,
    /// Vocabulary ids for Text fragments.
    pub text_ids: Option<Vec<u32>>,
}

/// Structural description of an assembled sequence: everything the backbone
/// needs besides the embedding values themselves.
#[derive(Clone, Debug)]
pub struct SequenceLayout {
    pub kinds: Vec<SegmentKind>,
    pub positions: Vec<TokenPosition>,
    pub text_ids: Vec<u32>,
    pub text_start: usize,
    pub text_len: usize,
    pub gen_start: usize,
    pub gen_len: usize,
    pub gen_grid: Option<(usize, usize)>,
}

impl SequenceLayout {
    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }
}

/// An assembled sequence with materialized embedding values.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    pub embeddings: Tensor,
    pub layout: SequenceLayout,
}

impl TokenSequence {
    /// Snapshots an assembled on-tape sequence into owned values.
    pub fn from_tape(tape: &Tape, embeddings: NodeId, layout: SequenceLayout) -> TokenSequence {
        TokenSequence {
            embeddings: tape.value(embeddings).clone(),
            layout,
        }
    }

    pub fn kinds(&self) -> &[SegmentKind] {
        &self.layout.kinds
    }

    pub fn positions(&self) -> &[TokenPosition] {
        &self.layout.positions
    }

    pub fn text_ids(&self) -> &[u32] {
        &self.layout.text_ids
    }
}

/// One training/sampling instance of the interpolation path
/// `x_t = t*x + (1-t)*noise`.
#[derive(Clone, Debug)]
pub struct DiffusionState {
    pub clean: Tensor,
    pub noise: Tensor,
    pub t: f64,
    pub noisy: Tensor,
}

impl DiffusionState {
    /// Builds the state for any `t` in `[0, 1]`; the endpoints reproduce
    /// `noise` and `clean` exactly. Training draws stay strictly inside.
    pub fn new(clean: Tensor, noise: Tensor, t: f64) -> Result<DiffusionState> {
        if clean.shape() != noise.shape() {
            return Err(Error::shape(
                "diffusion state",
                format!("{:?} vs {:?}", clean.shape(), noise.shape()),
            ));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} outside [0, 1]"
            )));
        }
        let noisy = interpolate(&clean, &noise, t)?;
        Ok(DiffusionState {
            clean,
            noise,
            t,
            noisy,
        })
    }
}

/// `t*clean + (1-t)*noise`, elementwise in exactly that form so the `t = 0`
/// and `t = 1` endpoints are bitwise exact.
pub fn interpolate(clean: &Tensor, noise: &Tensor, t: f64) -> Result<Tensor> {
    clean.zip_map(noise, |c, n| t * c + (1.0 - t) * n)
}

/// Non-overlapping patch decomposition of one image.
#[derive(Clone, Debug)]
pub struct PatchGrid {
    pub patches: Tensor,
    pub rows: usize,
    pub cols: usize,
    pub patch_size: usize,
    pub channels: usize,
}

/// Splits `image` into raster-ordered p×p patches.
pub fn patchify_image(image: &Tensor, p: usize) -> Result<PatchGrid> {
    let [h, w, c] = image_dims(image)?;
    let patches = patchify(image, p)?;
    Ok(PatchGrid {
        patches,
        rows: h / p,
        cols: w / p,
        patch_size: p,
        channels: c,
    })
}

pub fn encode_text_ids(text: &[u8]) -> Vec<u32> {
    let mut ids = Vec::with_capacity(text.len() + 2);
    ids.push(BOS);
    ids.extend(text.iter().map(|&b| b as u32));
    ids.push(EOS);
    ids
}

/// Inverse of [`encode_text_ids`].
pub fn decode_text_ids(ids: &[u32]) -> Result<Vec<u8>> {
    if ids.len() < 2 || ids[0] != BOS || *ids.last().unwrap() != EOS {
        return Err(Error::InvalidArgument(
            "text ids must be BOS .. EOS".to_string(),
        ));
    }
    ids[1..ids.len() - 1]
        .iter()
        .map(|&id| {
            u8::try_from(id).map_err(|_| {
                Error::InvalidArgument(format!("id {id} is not a byte value"))
            })
        })
        .collect()
}

fn one_hot_rows(ids: &[u32], width: usize) -> Tensor {
    let mut data = vec![0.0; ids.len() * width];
    for (row, &id) in ids.iter().enumerate() {
        data[row * width + id as usize] = 1.0;
    }
    Tensor::from_vec(vec![ids.len(), width], data).expect("one-hot shape")
}

/// Text fragment: `[BOS] ++ bytes ++ [EOS]` looked up in the embedding
/// table (as a one-hot product, so table gradients flow).
pub fn encode_text(tape: &mut Tape, table: NodeId, text: &[u8]) -> Result<Fragment> {
    let table_shape = tape.value(table).shape().to_vec();
    if table_shape.len() != 2 || table_shape[0] != VOCAB_SIZE {
        return Err(Error::shape(
            "encode_text",
            format!("embedding table must be [{VOCAB_SIZE}, d], got {table_shape:?}"),
        ));
    }
    let ids = encode_text_ids(text);
    let onehot = tape.constant(one_hot_rows(&ids, VOCAB_SIZE));
    let embeddings = tape.matmul(onehot, table)?;
    Ok(Fragment {
        kind: SegmentKind::Text,
        embeddings,
        len: ids.len(),
        grid: None,
        text_ids: Some(ids),
    })
}

/// Condition fragment: the reference image runs through a small strided
/// conv stand-in (stride-2 layers built from patchify + matmul + silu until
/// the configured stride is reached) and a learned projection into the
/// shared space. Emits `(h/s)*(w/s)` tokens.
pub fn encode_condition(
    tape: &mut Tape,
    cfg: &ModelConfig,
    nodes: &ParamNodes,
    image: &Tensor,
) -> Result<Fragment> {
    let [h, w, _c] = image_dims(image)?;
    let s = cfg.cond_stride;
    if h % s != 0 || w % s != 0 {
        return Err(Error::shape(
            "encode_condition",
            format!("image {h}x{w} not divisible by encoder stride {s}"),
        ));
    }
    let mut x = tape.constant(image.clone());
    for layer in 0..cfg.cond_layers() {
        let grid = patchify_node(tape, x, 2)?;
        let weight = nodes.get(&format!("cond.conv{layer}.w"))?;
        let lin = tape.matmul(grid, weight)?;
        let act = tape.silu(lin)?;
        let shape = tape.value(x).shape().to_vec();
        x = tape.reshape(act, &[shape[0] / 2, shape[1] / 2, cfg.dim])?;
    }
    let tokens = (h / s) * (w / s);
    let flat = tape.reshape(x, &[tokens, cfg.dim])?;
    let proj = nodes.get("cond.proj.w")?;
    let embeddings = tape.matmul(flat, proj)?;
    Ok(Fragment {
        kind: SegmentKind::Condition,
        embeddings,
        len: tokens,
        grid: None,
        text_ids: None,
    })
}

/// Generation fragment from an already-noised image: patchify then the
/// learned patch embedding. Used by training (through
/// [`make_generation_tokens`]) and directly by the sampler at ODE states.
pub fn generation_fragment(
    tape: &mut Tape,
    cfg: &ModelConfig,
    patch_embed: NodeId,
    noisy: NodeId,
) -> Result<Fragment> {
    let shape = tape.value(noisy).shape().to_vec();
    let [h, w, _c] = match shape.as_slice() {
        [h, w, c] => [*h, *w, *c],
        other => {
            return Err(Error::shape(
                "generation tokens",
                format!("expected [h, w, c], got {other:?}"),
            ))
        }
    };
    let p = cfg.patch_size;
    let grid = patchify_node(tape, noisy, p)?;
    let embeddings = tape.matmul(grid, patch_embed)?;
    Ok(Fragment {
        kind: SegmentKind::Generation,
        embeddings,
        len: (h / p) * (w / p),
        grid: Some((h / p, w / p)),
        text_ids: None,
    })
}

/// Training-side generation tokens: interpolates `x_t` from clean image and
/// noise at `t` in the open interval, then embeds its patches.
pub fn make_generation_tokens(
    tape: &mut Tape,
    cfg: &ModelConfig,
    patch_embed: NodeId,
    clean: Tensor,
    noise: Tensor,
    t: f64,
) -> Result<(DiffusionState, Fragment)> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "training timestep must lie strictly inside (0, 1), got {t}"
        )));
    }
    let state = DiffusionState::new(clean, noise, t)?;
    let noisy = tape.constant(state.noisy.clone());
    let fragment = generation_fragment(tape, cfg, patch_embed, noisy)?;
    Ok((state, fragment))
}

/// Geometric frequency ladder for the timestep features, ascending from 1.
pub fn timestep_frequencies(dim: usize) -> Vec<f64> {
    let half = dim / 2;
    (0..half)
        .map(|k| 1000f64.powf(k as f64 / half as f64))
        .collect()
}

/// Sinusoidal features of `t` followed by the learned two-layer projection;
/// a single token of kind Timestep.
pub fn timestep_token(
    tape: &mut Tape,
    cfg: &ModelConfig,
    nodes: &ParamNodes,
    t: f64,
) -> Result<Fragment> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!(
            "timestep {t} outside [0, 1]"
        )));
    }
    let freqs = timestep_frequencies(cfg.dim);
    let mut feat = Vec::with_capacity(cfg.dim);
    for &w in &freqs {
        feat.push((w * t).sin());
        feat.push((w * t).cos());
    }
    feat.resize(cfg.dim, 0.0);
    let features = tape.constant(Tensor::from_vec(vec![1, cfg.dim], feat)?);
    let w1 = nodes.get("time.proj1.w")?;
    let w2 = nodes.get("time.proj2.w")?;
    let hidden = tape.matmul(features, w1)?;
    let act = tape.silu(hidden)?;
    let embeddings = tape.matmul(act, w2)?;
    Ok(Fragment {
        kind: SegmentKind::Timestep,
        embeddings,
        len: 1,
        grid: None,
        text_ids: None,
    })
}

/// Concatenates fragments in the fixed block order Condition, Text,
/// Timestep, Generation and assigns stream indices. Multiple Condition
/// fragments are legal (multi-reference conditioning) and keep their input
/// order; the other kinds appear at most once.
pub fn assemble_sequence(
    tape: &mut Tape,
    fragments: &[Fragment],
) -> Result<(NodeId, SequenceLayout)> {
    if fragments.is_empty() {
        return Err(Error::InvalidArgument("empty sequence".to_string()));
    }
    let mut last_rank = -1i32;
    let mut seen_text = false;
    let mut seen_time = false;
    let mut seen_gen = false;
    for frag in fragments {
        let rank = frag.kind as i32;
        if rank < last_rank {
            return Err(Error::InvalidArgument(format!(
                "fragment kinds out of order: {:?} after rank {last_rank}",
                frag.kind
            )));
        }
        let dup = match frag.kind {
            SegmentKind::Condition => false,
            SegmentKind::Text => std::mem::replace(&mut seen_text, true),
            SegmentKind::Timestep => std::mem::replace(&mut seen_time, true),
            SegmentKind::Generation => std::mem::replace(&mut seen_gen, true),
        };
        if dup {
            return Err(Error::InvalidArgument(format!(
                "duplicate {:?} fragment",
                frag.kind
            )));
        }
        last_rank = rank;
    }

    let mut kinds = Vec::new();
    let mut positions = Vec::new();
    let mut text_ids = Vec::new();
    let (mut text_start, mut text_len) = (0, 0);
    let (mut gen_start, mut gen_len) = (0, 0);
    let mut gen_grid = None;
    let mut stream = 0usize;
    for frag in fragments {
        match frag.kind {
            SegmentKind::Text => {
                text_start = stream;
                text_len = frag.len;
                text_ids = frag
                    .text_ids
                    .clone()
                    .ok_or_else(|| Error::InvalidArgument("text fragment without ids".into()))?;
            }
            SegmentKind::Generation => {
                gen_start = stream;
                gen_len = frag.len;
                gen_grid = frag.grid;
            }
            _ => {}
        }
        match (frag.kind, frag.grid) {
            (SegmentKind::Generation, Some((rows, cols))) => {
                for r in 0..rows {
                    for c in 0..cols {
                        kinds.push(frag.kind);
                        positions.push(TokenPosition {
                            stream,
                            row: r as i64,
                            col: c as i64,
                        });
                        stream += 1;
                    }
                }
            }
            (SegmentKind::Generation, None) => {
                return Err(Error::InvalidArgument(
                    "generation fragment without grid".to_string(),
                ))
            }
            _ => {
                for _ in 0..frag.len {
                    kinds.push(frag.kind);
                    positions.push(TokenPosition {
                        stream,
                        row: -1,
                        col: -1,
                    });
                    stream += 1;
                }
            }
        }
    }

    let nodes: Vec<NodeId> = fragments.iter().map(|f| f.embeddings).collect();
    let embeddings = if nodes.len() == 1 {
        nodes[0]
    } else {
        tape.concat(&nodes, 0)?
    };
    Ok((
        embeddings,
        SequenceLayout {
            kinds,
            positions,
            text_ids,
            text_start,
            text_len,
            gen_start,
            gen_len,
            gen_grid,
        },
    ))
}
