//! Dense row-major f64 tensors.
//!
//! All numerics in this crate run in double precision: the acceptance story
//! rests on tight finite-difference gradient checks, and f64 keeps those
//! margins comfortable at toy scale. Scalars are rank-0 tensors (empty
//! shape, one element).

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Dense tensor: a shape and a flat row-major payload.
///
/// `grad_tracked` marks leaves whose gradients the tape must report; it is
/// set by [`crate::tape::Tape::leaf`] and propagated through primitives.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad_tracked: bool,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "tensor axes must be >= 1, got {shape:?}"
            )));
        }
        if data.len() != numel {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad_tracked: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            grad_tracked: false,
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Tensor {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            grad_tracked: false,
        }
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
            grad_tracked: false,
        }
    }

    /// I.i.d. normal draws with the given standard deviation.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z * std
            })
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            grad_tracked: false,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Value of a rank-0 tensor.
    pub fn scalar_value(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn grad_tracked(&self) -> bool {
        self.grad_tracked
    }

    pub(crate) fn set_grad_tracked(&mut self, tracked: bool) {
        self.grad_tracked = tracked;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element at a multi-axis index (row-major).
    pub fn at(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, &ix) in index.iter().enumerate() {
            debug_assert!(ix < self.shape[i]);
            flat = flat * self.shape[i] + ix;
        }
        self.data[flat]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad_tracked: false,
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "zip_map",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            grad_tracked: false,
        })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Bitwise equality of shape and payload (`-0.0 != 0.0`, NaN != NaN).
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Raw 2-D matrix product: `a` is m×k, `b` is k×n, output m×n.
pub(crate) fn matmul_2d(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for i in 0..m {
        let row_out = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            let row_b = &b[p * n..(p + 1) * n];
            for (o, &bv) in row_out.iter_mut().zip(row_b) {
                *o += a_ip * bv;
            }
        }
    }
}

/// Splits an image `[h, w, c]` into non-overlapping p×p patches, raster
/// order over the grid; each patch is flattened row-major over pixels with
/// channels last, i.e. element `(dy*p + dx)*c + ch`.
pub fn patchify(image: &Tensor, p: usize) -> Result<Tensor> {
    let [h, w, c] = image_dims(image)?;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::shape(
            "patchify",
            format!("image {h}x{w} not divisible by patch size {p}"),
        ));
    }
    let (rows, cols) = (h / p, w / p);
    let mut out = vec![0.0; rows * cols * p * p * c];
    let src = image.data();
    let patch_len = p * p * c;
    for gr in 0..rows {
        for gc in 0..cols {
            let base = (gr * cols + gc) * patch_len;
            for dy in 0..p {
                for dx in 0..p {
                    for ch in 0..c {
                        out[base + (dy * p + dx) * c + ch] =
                            src[((gr * p + dy) * w + gc * p + dx) * c + ch];
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![rows * cols, patch_len], out)
}

/// Exact inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, rows: usize, cols: usize, p: usize, c: usize) -> Result<Tensor> {
    let shape = patches.shape();
    if shape.len() != 2 || shape[0] != rows * cols || shape[1] != p * p * c {
        return Err(Error::shape(
            "unpatchify",
            format!(
                "expected [{}, {}], got {shape:?}",
                rows * cols,
                p * p * c
            ),
        ));
    }
    let (h, w) = (rows * p, cols * p);
    let mut out = vec![0.0; h * w * c];
    let src = patches.data();
    let patch_len = p * p * c;
    for gr in 0..rows {
        for gc in 0..cols {
            let base = (gr * cols + gc) * patch_len;
            for dy in 0..p {
                for dx in 0..p {
                    for ch in 0..c {
                        out[((gr * p + dy) * w + gc * p + dx) * c + ch] =
                            src[base + (dy * p + dx) * c + ch];
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![h, w, c], out)
}

pub(crate) fn image_dims(image: &Tensor) -> Result<[usize; 3]> {
    match image.shape() {
        [h, w, c] => Ok([*h, *w, *c]),
        other => Err(Error::shape(
            "image",
            format!("expected rank-3 [h, w, c], got {other:?}"),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn from_vec_rejects_bad_lengths() {
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_vec(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn scalar_is_rank_zero() {
        let s = Tensor::scalar(2.5);
        assert!(s.is_scalar());
        assert_eq!(s.numel(), 1);
        assert_eq!(s.scalar_value(), 2.5);
    }

    #[test]
    fn patchify_shape_and_indicator() {
        // 4x4x1 image, p=2 -> 4 patches of length 4.
        let mut img = Tensor::zeros(&[4, 4, 1]);
        img.data_mut()[0] = 7.0;
        let patches = patchify(&img, 2).unwrap();
        assert_eq!(patches.shape(), &[4, 4]);
        assert_eq!(&patches.data()[0..4], &[7.0, 0.0, 0.0, 0.0]);
        assert!(patches.data()[4..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patchify_layout_p2() {
        // patch (0,0) holds pixels (0,0),(0,1),(1,0),(1,1) in that order.
        let mut img = Tensor::zeros(&[4, 4, 1]);
        img.data_mut()[0 * 4 + 0] = 1.0;
        img.data_mut()[0 * 4 + 1] = 2.0;
        img.data_mut()[1 * 4 + 0] = 3.0;
        img.data_mut()[1 * 4 + 1] = 4.0;
        let patches = patchify(&img, 2).unwrap();
        assert_eq!(&patches.data()[0..4], &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn patchify_roundtrip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let img = Tensor::randn(&[8, 12, 3], 1.0, &mut rng);
            let patches = patchify(&img, 2).unwrap();
            let back = unpatchify(&patches, 4, 6, 2, 3).unwrap();
            assert!(back.bitwise_eq(&img));
        }
    }

    #[test]
    fn patchify_rejects_indivisible() {
        let img = Tensor::zeros(&[5, 4, 1]);
        assert!(patchify(&img, 2).is_err());
    }

    #[test]
    fn matmul_2d_small() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut out = [0.0; 4];
        matmul_2d(&a, &b, 2, 2, 2, &mut out);
        assert_eq!(out, [19.0, 22.0, 43.0, 50.0]);
    }
}
