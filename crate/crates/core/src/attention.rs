//! Hybrid unified attention: causal rows for condition/text/timestep tokens,
//! full-attention rows for generation tokens, plus axial rotary position
//! encoding and masked scaled-dot-product attention.

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::tokenize::{SegmentKind, TokenPosition};

/// Additive mask bias for disallowed pairs. Finite, but large enough that
/// `exp(bias - row_max)` underflows to exactly zero, so masked keys carry
/// exactly zero attention weight.
pub const MASK_BIAS: f64 = -1e30;

/// Per-pair visibility table; `allowed(i, j)` says query `i` may attend
/// key `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    len: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn allowed(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.len + key]
    }

    /// Additive bias tensor `[L, L]`: 0 where allowed, [`MASK_BIAS`] where
    /// not.
    pub fn bias_tensor(&self) -> Tensor {
        let data = self
            .allowed
            .iter()
            .map(|&a| if a { 0.0 } else { MASK_BIAS })
            .collect();
        Tensor::from_vec(vec![self.len, self.len], data).expect("mask shape")
    }
}

/// Builds the hybrid mask from the spec'd two rules: Generation rows see
/// everything; Condition, Text, and Timestep rows are causal.
pub fn build_hybrid_mask(kinds: &[SegmentKind]) -> Result<AttentionMask> {
    if kinds.is_empty() {
        return Err(Error::InvalidArgument("empty sequence".to_string()));
    }
    let len = kinds.len();
    let mut allowed = vec![false; len * len];
    for (i, kind) in kinds.iter().enumerate() {
        let row = &mut allowed[i * len..(i + 1) * len];
        match kind {
            SegmentKind::Generation => row.fill(true),
            _ => row[..=i].fill(true),
        }
    }
    Ok(AttentionMask { len, allowed })
}

/// Axial rotary parameters: one base frequency and the split of the head
/// dimension into (stream, row, column) sub-dimensions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RopeParams {
    pub base: f64,
    pub split: [usize; 3],
}

impl RopeParams {
    pub fn head_dim(&self) -> usize {
        self.split.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base > 1.0) {
            return Err(Error::InvalidConfig(format!(
                "rope base must exceed 1, got {}",
                self.base
            )));
        }
        for (axis, &d) in self.split.iter().enumerate() {
            if d < 2 || d % 2 != 0 {
                return Err(Error::InvalidConfig(format!(
                    "rope axis {axis} sub-dimension {d} must be even and >= 2"
                )));
            }
        }
        Ok(())
    }
}

/// Axis position values used for rotation: non-spatial rows/columns (-1)
/// rotate by angle zero.
fn axis_positions(pos: &TokenPosition) -> [f64; 3] {
    [
        pos.stream as f64,
        pos.row.max(0) as f64,
        pos.col.max(0) as f64,
    ]
}

/// Cosine/sine tables per axis section: each is `[L, section/2]`.
fn rope_tables(positions: &[TokenPosition], params: &RopeParams) -> [(Tensor, Tensor); 3] {
    std::array::from_fn(|axis| {
        let half = params.split[axis] / 2;
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for pos in positions {
            let p = axis_positions(pos)[axis];
            for i in 0..half {
                let freq = params.base.powf(-(i as f64) / half as f64);
                let angle = p * freq;
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        (
            Tensor::from_vec(vec![positions.len(), half], cos).expect("rope table"),
            Tensor::from_vec(vec![positions.len(), half], sin).expect("rope table"),
        )
    })
}

/// Pure rotary application over `[heads, L, d]` (or `[L, d]`) vectors.
/// Within each axis section the pairing is half-split: coordinate `i`
/// rotates with coordinate `i + section/2`.
pub fn apply_rope(
    vectors: &Tensor,
    positions: &[TokenPosition],
    params: &RopeParams,
) -> Result<Tensor> {
    let shape = vectors.shape().to_vec();
    let (heads, len, d) = match shape.as_slice() {
        [l, d] => (1, *l, *d),
        [h, l, d] => (*h, *l, *d),
        other => {
            return Err(Error::shape(
                "apply_rope",
                format!("expected [heads, L, d] or [L, d], got {other:?}"),
            ))
        }
    };
    if d != params.head_dim() {
        return Err(Error::shape(
            "apply_rope",
            format!("vector dim {d} != rope split sum {}", params.head_dim()),
        ));
    }
    if len != positions.len() {
        return Err(Error::shape(
            "apply_rope",
            format!("{len} tokens vs {} positions", positions.len()),
        ));
    }
    let mut out = vectors.data().to_vec();
    for h in 0..heads {
        for (l, pos) in positions.iter().enumerate() {
            let token = &mut out[(h * len + l) * d..(h * len + l + 1) * d];
            let mut offset = 0;
            for (axis, &sec) in params.split.iter().enumerate() {
                let half = sec / 2;
                let p = axis_positions(pos)[axis];
                for i in 0..half {
                    let freq = params.base.powf(-(i as f64) / half as f64);
                    let angle = p * freq;
                    let (s, c) = (angle.sin(), angle.cos());
                    let x = token[offset + i];
                    let y = token[offset + half + i];
                    token[offset + i] = x * c - y * s;
                    token[offset + half + i] = x * s + y * c;
                }
                offset += sec;
            }
        }
    }
    Tensor::from_vec(shape, out)
}

/// On-tape rotary application for one head's `[L, d]` vectors.
pub fn apply_rope_node(
    tape: &mut Tape,
    x: NodeId,
    positions: &[TokenPosition],
    params: &RopeParams,
) -> Result<NodeId> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 2 || shape[1] != params.head_dim() {
        return Err(Error::shape(
            "apply_rope",
            format!("expected [L, {}], got {shape:?}", params.head_dim()),
        ));
    }
    if shape[0] != positions.len() {
        return Err(Error::shape(
            "apply_rope",
            format!("{} tokens vs {} positions", shape[0], positions.len()),
        ));
    }
    let tables = rope_tables(positions, params);
    let mut sections = Vec::with_capacity(3);
    let mut offset = 0;
    for (axis, &sec) in params.split.iter().enumerate() {
        let half = sec / 2;
        let (cos_t, sin_t) = &tables[axis];
        let cos = tape.constant(cos_t.clone());
        let sin = tape.constant(sin_t.clone());
        let lo = tape.slice(x, 1, offset, half)?;
        let hi = tape.slice(x, 1, offset + half, half)?;
        let lo_cos = tape.mul(lo, cos)?;
        let hi_sin = tape.mul(hi, sin)?;
        let rot_lo = tape.sub(lo_cos, hi_sin)?;
        let lo_sin = tape.mul(lo, sin)?;
        let hi_cos = tape.mul(hi, cos)?;
        let rot_hi = tape.add(lo_sin, hi_cos)?;
        sections.push(tape.concat(&[rot_lo, rot_hi], 1)?);
        offset += sec;
    }
    tape.concat(&sections, 1)
}

/// One head of masked scaled-dot-product attention on the tape. Scores are
/// scaled by `1/sqrt(d)`, the mask enters as an additive bias, and the
/// softmax runs over allowed keys only.
pub fn attention_head_node(
    tape: &mut Tape,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    mask_bias: NodeId,
) -> Result<NodeId> {
    let d = tape.value(q).shape()[1];
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
    let biased = tape.add(scaled, mask_bias)?;
    let weights = tape.softmax(biased)?;
    tape.matmul(weights, v)
}

/// Pure spec-level attention over `[heads, L, d]` tensors with an explicit
/// mask; evaluates the tape path head by head.
pub fn attention_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &AttentionMask,
) -> Result<Tensor> {
    let shape = q.shape().to_vec();
    let [heads, len, d] = match shape.as_slice() {
        [h, l, d] => [*h, *l, *d],
        other => {
            return Err(Error::shape(
                "attention_forward",
                format!("expected [heads, L, d], got {other:?}"),
            ))
        }
    };
    if k.shape() != shape.as_slice() || v.shape() != shape.as_slice() {
        return Err(Error::shape(
            "attention_forward",
            "q, k, v must share one shape".to_string(),
        ));
    }
    if mask.len() != len {
        return Err(Error::shape(
            "attention_forward",
            format!("mask length {} vs sequence {len}", mask.len()),
        ));
    }
    let mut out = Vec::with_capacity(q.numel());
    let mut tape = Tape::new();
    let bias = tape.constant(mask.bias_tensor());
    for h in 0..heads {
        let chunk = len * d;
        let slice = |t: &Tensor| {
            Tensor::from_vec(
                vec![len, d],
                t.data()[h * chunk..(h + 1) * chunk].to_vec(),
            )
            .expect("head slice")
        };
        let qh = tape.constant(slice(q));
        let kh = tape.constant(slice(k));
        let vh = tape.constant(slice(v));
        let oh = attention_head_node(&mut tape, qh, kh, vh, bias)?;
        out.extend_from_slice(tape.value(oh).data());
    }
    Tensor::from_vec(shape, out)
}
