//! Binary netpbm image I/O: 8-bit PGM (P5) for single-channel images and
//! PPM (P6) for three-channel ones. Values are quantized as
//! `round(v * 255)`, so `read(write(x))` reproduces the quantized image
//! exactly.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::path::Path;

/// Quantize a unit-range value to its 8-bit representative in [0, 1].
pub fn quantize(v: f64) -> f64 {
    to_byte(v) as f64 / 255.0
}

fn to_byte(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Encode a [C,H,W] image (C = 1 or 3, values in [0,1]) as P5/P6 bytes.
pub fn encode(img: &Tensor) -> Result<Vec<u8>> {
    if img.shape.len() != 3 || (img.shape[0] != 1 && img.shape[0] != 3) {
        return Err(Error::Input(format!(
            "expected [1|3, H, W] image, got {:?}",
            img.shape
        )));
    }
    let (c, h, w) = (img.shape[0], img.shape[1], img.shape[2]);
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    for p in 0..plane {
        for ch in 0..c {
            out.push(to_byte(img.data[ch * plane + p]));
        }
    }
    Ok(out)
}

/// Decode P5/P6 bytes into a [C,H,W] image with values in [0,1].
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0usize;
    let fail = |offset: usize, msg: &str| Error::Format {
        offset,
        msg: msg.to_string(),
    };

    if bytes.len() < 2 {
        return Err(fail(0, "file shorter than a magic number"));
    }
    let channels = match &bytes[0..2] {
        b"P5" => 1,
        b"P6" => 3,
        _ => return Err(fail(0, "magic is not P5 or P6")),
    };
    pos += 2;

    // three header integers separated by whitespace; '#' starts a comment
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // skip whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(fail(pos, "header truncated")),
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(fail(pos, "expected a decimal header field"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap();
        *field = text
            .parse()
            .map_err(|_| fail(start, "header field out of range"))?;
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(fail(pos, "only maxval 255 is supported"));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(fail(pos, "expected single whitespace before payload")),
    }
    if w == 0 || h == 0 {
        return Err(fail(2, "zero image dimension"));
    }

    let need = w * h * channels;
    if bytes.len() - pos < need {
        return Err(fail(bytes.len(), "payload truncated"));
    }
    let payload = &bytes[pos..pos + need];
    let plane = w * h;
    let mut data = vec![0.0; channels * plane];
    for p in 0..plane {
        for ch in 0..channels {
            data[ch * plane + p] = payload[p * channels + ch] as f64 / 255.0;
        }
    }
    Ok(Tensor::from_vec(&[channels, h, w], data))
}

pub fn write_image(path: &Path, img: &Tensor) -> Result<()> {
    std::fs::write(path, encode(img)?)?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prng::Prng;

    #[test]
    fn all_black_2x2_exact_bytes() {
        let img = Tensor::zeros(&[1, 2, 2]);
        let bytes = encode(&img).unwrap();
        assert_eq!(&bytes, b"P5\n2 2\n255\n\0\0\0\0");
    }

    #[test]
    fn roundtrip_is_quantization() {
        let mut rng = Prng::seed(50);
        for &c in &[1usize, 3] {
            let data: Vec<f64> = (0..c * 6 * 5).map(|_| rng.uniform()).collect();
            let img = Tensor::from_vec(&[c, 6, 5], data);
            let back = decode(&encode(&img).unwrap()).unwrap();
            assert_eq!(back.shape, img.shape);
            for (a, b) in back.data.iter().zip(&img.data) {
                assert_eq!(*a, quantize(*b));
            }
        }
    }

    #[test]
    fn wrong_maxval_rejected() {
        let bytes = b"P5\n2 2\n127\n\0\0\0\0";
        assert!(matches!(decode(bytes), Err(Error::Format { .. })));
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let bytes = b"P5\n2 2\n255\n\0\0";
        match decode(bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, bytes.len()),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn comments_in_header_accepted() {
        let bytes = b"P5\n# made by hand\n2 1\n255\n\x10\x20";
        let img = decode(bytes).unwrap();
        assert_eq!(img.shape, vec![1, 1, 2]);
    }

    #[test]
    fn bad_magic_rejected() {
        assert!(matches!(
            decode(b"P4\n1 1\n255\n\0"),
            Err(Error::Format { offset: 0, .. })
        ));
    }
}
