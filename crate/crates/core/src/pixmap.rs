//! Binary portable pixmap (P6) image I/O with the fixed value mapping
//! `byte = round((v + 1) * 127.5)` and inverse `v = byte / 127.5 - 1`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{image_dims, Tensor};

/// Encodes a 3-channel image in `[-1, 1]` as P6 bytes.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let [h, w, c] = image_dims(image)?;
    if c != 3 {
        return Err(Error::ImageFormat(format!(
            "P6 wants 3 channels, image has {c}"
        )));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(h * w * 3);
    for &v in image.data() {
        let byte = ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
        out.push(byte);
    }
    Ok(out)
}

/// Decodes P6 bytes back to an image tensor.
pub fn decode_ppm(data: &[u8]) -> Result<Tensor> {
    let mut at = 0;
    let mut token = |what: &str| -> Result<Vec<u8>> {
        while at < data.len() && data[at].is_ascii_whitespace() {
            at += 1;
        }
        let start = at;
        while at < data.len() && !data[at].is_ascii_whitespace() {
            at += 1;
        }
        if start == at {
            return Err(Error::ImageFormat(format!("missing {what} in header")));
        }
        Ok(data[start..at].to_vec())
    };
    if token("magic")? != b"P6" {
        return Err(Error::ImageFormat("not a P6 pixmap".into()));
    }
    let parse = |bytes: Vec<u8>, what: &str| -> Result<usize> {
        std::str::from_utf8(&bytes)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::ImageFormat(format!("bad {what} in header")))
    };
    let w = parse(token("width")?, "width")?;
    let h = parse(token("height")?, "height")?;
    let maxval = parse(token("maxval")?, "maxval")?;
    if maxval != 255 {
        return Err(Error::ImageFormat(format!("maxval {maxval}, expected 255")));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if at >= data.len() || !data[at].is_ascii_whitespace() {
        return Err(Error::ImageFormat("missing header terminator".into()));
    }
    at += 1;
    let need = w * h * 3;
    let payload = &data[at..];
    if payload.len() != need {
        return Err(Error::ImageFormat(format!(
            "payload of {} bytes, {w}x{h} image needs {need}",
            payload.len()
        )));
    }
    let values = payload.iter().map(|&b| b as f64 / 127.5 - 1.0).collect();
    Tensor::from_vec(vec![h, w, 3], values)
}

pub fn write_image(path: &Path, image: &Tensor) -> Result<()> {
    let bytes = encode_ppm(image)?;
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_ppm(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn endpoint_mapping() {
        let mut img = Tensor::filled(&[1, 2, 3], -1.0);
        img.data_mut()[3] = 1.0;
        img.data_mut()[4] = 1.0;
        img.data_mut()[5] = 1.0;
        let bytes = encode_ppm(&img).unwrap();
        let payload = &bytes[bytes.len() - 6..];
        assert_eq!(payload, &[0, 0, 0, 255, 255, 255]);
    }

    #[test]
    fn header_layout() {
        let img = Tensor::zeros(&[2, 2, 3]);
        let bytes = encode_ppm(&img).unwrap();
        assert!(bytes.starts_with(b"P6\n2 2\n255\n"));
    }

    #[test]
    fn roundtrip_within_quantization_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        for _ in 0..20 {
            let img = Tensor::randn(&[5, 7, 3], 0.6, &mut rng).map(|v| v.clamp(-1.0, 1.0));
            let back = decode_ppm(&encode_ppm(&img).unwrap()).unwrap();
            assert_eq!(back.shape(), img.shape());
            assert!(back.max_abs_diff(&img) <= 1.0 / 127.5 + 1e-12);
        }
    }

    #[test]
    fn malformed_headers_are_refused() {
        assert!(decode_ppm(b"P5\n2 2\n255\n....").is_err());
        assert!(decode_ppm(b"P6\n2 2\n127\n").is_err());
        assert!(decode_ppm(b"P6\n2 x\n255\n").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\nshort").is_err());
        assert!(decode_ppm(b"").is_err());
    }

    #[test]
    fn rejects_non_rgb() {
        let img = Tensor::zeros(&[2, 2, 1]);
        assert!(encode_ppm(&img).is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let img = Tensor::filled(&[3, 3, 3], 0.25);
        write_image(&path, &img).unwrap();
        let back = read_image(&path).unwrap();
        assert!(back.max_abs_diff(&img) <= 1.0 / 127.5 + 1e-12);
    }
}
