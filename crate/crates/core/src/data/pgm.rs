//! Binary greymap (`P5`, maxval 255) encoding.

use std::path::Path;

use super::Sample;
use crate::error::{Error, Result};

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "pixel count must match {width}x{height}");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Returns `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let err = |offset: usize, reason: &str| Error::Parse {
        offset,
        reason: reason.to_string(),
    };
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(err(0, "missing P5 magic"));
    }
    let mut pos = 2;
    let mut field = |name: &str| -> Result<(usize, usize)> {
        // whitespace and comments before each header field
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(err(pos, &format!("header ends before {name}"))),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(err(start, &format!("expected decimal {name}")));
        }
        std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map(|v| (v, start))
            .map_err(|_| err(start, &format!("{name} out of range")))
    };
    let (width, _) = field("width")?;
    let (height, _) = field("height")?;
    let (maxval, maxval_at) = field("maxval")?;
    if maxval != 255 {
        return Err(err(maxval_at, &format!("maxval {maxval} unsupported (255 only)")));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(err(pos, "expected single whitespace after maxval")),
    }
    let need = width * height;
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(err(
            bytes.len(),
            &format!("truncated payload: {} of {need} bytes", payload.len()),
        ));
    }
    if payload.len() > need {
        return Err(err(pos + need, "trailing bytes after payload"));
    }
    Ok((width, height, payload.to_vec()))
}

/// Quantizes `[0, 1]` intensities with `round(v * 255)`.
pub fn image_to_bytes(image: &[f64]) -> Vec<u8> {
    image
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

pub fn image_from_bytes(bytes: &[u8]) -> Vec<f64> {
    bytes.iter().map(|&b| f64::from(b) / 255.0).collect()
}

/// Binary masks are stored as 0 (sea) and 255 (land).
pub fn mask_to_bytes(mask: &[u8]) -> Vec<u8> {
    mask.iter().map(|&m| if m == 0 { 0 } else { 255 }).collect()
}

pub fn mask_from_bytes(bytes: &[u8], payload_offset: usize) -> Result<Vec<u8>> {
    bytes
        .iter()
        .enumerate()
        .map(|(i, &b)| match b {
            0 => Ok(0),
            255 => Ok(1),
            other => Err(Error::Parse {
                offset: payload_offset + i,
                reason: format!("mask byte {other} is neither 0 nor 255"),
            }),
        })
        .collect()
}

pub fn write_image(path: &Path, width: usize, height: usize, image: &[f64]) -> Result<()> {
    std::fs::write(path, encode_pgm(width, height, &image_to_bytes(image)))?;
    Ok(())
}

pub fn write_mask(path: &Path, width: usize, height: usize, mask: &[u8]) -> Result<()> {
    std::fs::write(path, encode_pgm(width, height, &mask_to_bytes(mask)))?;
    Ok(())
}

/// Returns `(width, height, intensities)`.
pub fn read_image(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let (w, h, px) = decode_pgm(&std::fs::read(path)?)?;
    Ok((w, h, image_from_bytes(&px)))
}

/// Returns `(width, height, class ids)`.
pub fn read_mask(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path)?;
    let (w, h, px) = decode_pgm(&bytes)?;
    let offset = bytes.len() - px.len();
    Ok((w, h, mask_from_bytes(&px, offset)?))
}

impl Sample {
    pub fn load(image: &Path, mask: &Path) -> Result<Sample> {
        let (w, h, img) = read_image(image)?;
        let (mw, mh, m) = read_mask(mask)?;
        if (w, h) != (mw, mh) {
            return Err(Error::shape(
                "sample",
                format!("image {w}x{h} and mask {mw}x{mh} differ ({})", mask.display()),
            ));
        }
        Sample::new(h, w, img, m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_semantics() {
        let mut bytes = b"P5\n4 3\n255\n".to_vec();
        bytes.extend(0..12u8);
        let (w, h, px) = decode_pgm(&bytes).unwrap();
        assert_eq!((w, h), (4, 3));
        assert_eq!(px, (0..12).collect::<Vec<u8>>());
    }

    #[test]
    fn quantization() {
        let bytes = image_to_bytes(&[0.0, 1.0 / 255.0, 254.0 / 255.0, 1.0]);
        assert_eq!(bytes, vec![0, 1, 254, 255]);
        let encoded = encode_pgm(2, 2, &bytes);
        assert_eq!(&encoded[encoded.len() - 4..], &[0, 1, 254, 255]);
    }

    #[test]
    fn comments_are_skipped() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([7, 9]);
        assert_eq!(decode_pgm(&bytes).unwrap(), (2, 1, vec![7, 9]));
    }

    #[test]
    fn malformed_inputs_report_offsets() {
        let cases: [(&[u8], usize); 4] = [
            (b"P6\n1 1\n255\n\0", 0),
            (b"P5\n1 x\n255\n\0", 5),
            (b"P5\n1 1\n65535\n\0\0", 7),
            (b"P5\n2 2\n255\n\0\0", 13),
        ];
        for (bytes, offset) in cases {
            match decode_pgm(bytes) {
                Err(Error::Parse { offset: o, .. }) => assert_eq!(o, offset, "{bytes:?}"),
                other => panic!("expected parse error for {bytes:?}, got {other:?}"),
            }
        }
    }

    #[test]
    fn mask_bytes_must_be_binary() {
        assert_eq!(mask_from_bytes(&[0, 255], 10).unwrap(), vec![0, 1]);
        assert!(matches!(
            mask_from_bytes(&[0, 128], 10),
            Err(Error::Parse { offset: 11, .. })
        ));
    }
}
