//! Composed tape operations shared across modules: patch extraction and
//! reassembly as differentiable data movement.

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};

/// On-tape version of [`crate::tensor::patchify`]: `[h, w, c]` to
/// `[(h/p)(w/p), p*p*c]`, raster order, built from slices and concats so
/// gradients scatter back exactly.
pub fn patchify_node(tape: &mut Tape, image: NodeId, p: usize) -> Result<NodeId> {
    let shape = tape.value(image).shape().to_vec();
    let [h, w, c] = match shape.as_slice() {
        [h, w, c] => [*h, *w, *c],
        other => {
            return Err(Error::shape(
                "patchify",
                format!("expected [h, w, c], got {other:?}"),
            ))
        }
    };
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::shape(
            "patchify",
            format!("image {h}x{w} not divisible by patch size {p}"),
        ));
    }
    let (rows, cols) = (h / p, w / p);
    let mut patches = Vec::with_capacity(rows * cols);
    for gr in 0..rows {
        let strip = tape.slice(image, 0, gr * p, p)?;
        for gc in 0..cols {
            let block = tape.slice(strip, 1, gc * p, p)?;
            patches.push(tape.reshape(block, &[1, p * p * c])?);
        }
    }
    if patches.len() == 1 {
        return Ok(patches[0]);
    }
    tape.concat(&patches, 0)
}

/// On-tape inverse of [`patchify_node`].
pub fn unpatchify_node(
    tape: &mut Tape,
    patches: NodeId,
    rows: usize,
    cols: usize,
    p: usize,
    c: usize,
) -> Result<NodeId> {
    let shape = tape.value(patches).shape().to_vec();
    if shape != [rows * cols, p * p * c] {
        return Err(Error::shape(
            "unpatchify",
            format!("expected [{}, {}], got {shape:?}", rows * cols, p * p * c),
        ));
    }
    let mut strips = Vec::with_capacity(rows);
    for gr in 0..rows {
        let mut blocks = Vec::with_capacity(cols);
        for gc in 0..cols {
            let patch = tape.slice(patches, 0, gr * cols + gc, 1)?;
            blocks.push(tape.reshape(patch, &[p, p, c])?);
        }
        strips.push(if blocks.len() == 1 {
            blocks[0]
        } else {
            tape.concat(&blocks, 1)?
        });
    }
    if strips.len() == 1 {
        return Ok(strips[0]);
    }
    tape.concat(&strips, 0)
}
