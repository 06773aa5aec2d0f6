//! Binary 8-bit PPM (P6) and PGM (P5).

use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::Tensor;

fn format_err(kind: &'static str, pos: usize, msg: impl Into<String>) -> Error {
    Error::Format { kind, pos, msg: msg.into() }
}

struct Header {
    width: usize,
    height: usize,
    /// Offset of the first payload byte.
    data: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2], kind: &'static str) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(format_err(kind, 0, format!("expected magic {}", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(kind, pos, format!("expected header field {}", i + 1)));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format_err(kind, start, "header number out of range"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(format_err(kind, pos, "expected whitespace after maxval"));
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(format_err(kind, pos, format!("maxval {maxval}, only 255 is supported")));
    }
    if width == 0 || height == 0 {
        return Err(format_err(kind, pos, "zero image dimension"));
    }
    Ok(Header { width, height, data: pos + 1 })
}

fn payload<'a>(bytes: &'a [u8], h: &Header, channels: usize, kind: &'static str) -> Result<&'a [u8]> {
    let need = h.width * h.height * channels;
    let have = bytes.len() - h.data;
    if have < need {
        return Err(format_err(kind, bytes.len(), format!("truncated payload, {have} of {need} bytes")));
    }
    Ok(&bytes[h.data..h.data + need])
}

/// Decodes a P6 image into a `(1, 3, H, W)` tensor in `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let h = parse_header(bytes, b"P6", "PPM")?;
    let px = payload(bytes, &h, 3, "PPM")?;
    let plane = h.width * h.height;
    let mut data = vec![0f32; 3 * plane];
    for (i, rgb) in px.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = rgb[c] as f32 / 255.0;
        }
    }
    Tensor::from_vec([1, 3, h.height, h.width], data)
}

/// Encodes the first image of a 3-channel tensor, rounding to 8 bits.
pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let [_, c, hh, w] = image.shape().0;
    if c != 3 {
        return Err(Error::InvalidArgument(format!("PPM needs 3 channels, got {c}")));
    }
    let plane = hh * w;
    let mut out = format!("P6\n{w} {hh}\n255\n").into_bytes();
    out.reserve(3 * plane);
    let d = image.data();
    for i in 0..plane {
        for ch in 0..3 {
            out.push((d[ch * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Mask> {
    let h = parse_header(bytes, b"P5", "PGM")?;
    let px = payload(bytes, &h, 1, "PGM")?;
    Mask::from_vec(1, h.height, h.width, px.to_vec())
}

/// Encodes plane 0 of a mask.
pub fn encode_pgm(mask: &Mask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.extend_from_slice(mask.plane(0));
    out
}

/// Inserts a `#` comment line after the magic number of an encoded file.
pub fn annotate(mut encoded: Vec<u8>, comment: &str) -> Vec<u8> {
    let line: String = comment.chars().map(|c| if c == '\n' || c == '\r' { ' ' } else { c }).collect();
    let at = encoded.iter().position(|&b| b == b'\n').map_or(encoded.len(), |i| i + 1);
    encoded.splice(at..at, format!("# {line}\n").into_bytes());
    encoded
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    decode_ppm(&read(path.as_ref())?)
}

pub fn write_image(path: impl AsRef<Path>, image: &Tensor<f32>) -> Result<()> {
    write(path.as_ref(), &encode_ppm(image)?)
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask> {
    decode_pgm(&read(path.as_ref())?)
}

pub fn write_mask(path: impl AsRef<Path>, mask: &Mask) -> Result<()> {
    write(path.as_ref(), &encode_pgm(mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn annotated_files_still_decode() {
        let m = Mask::from_vec(1, 2, 3, vec![0, 1, 2, 3, 4, 5]).unwrap();
        let bytes = annotate(encode_pgm(&m), "run abc\nseed 1");
        assert!(bytes.starts_with(b"P5\n# run abc seed 1\n"));
        assert_eq!(decode_pgm(&bytes).unwrap(), m);
    }

    #[test]
    fn single_pixel_class_round_trips() {
        let m = Mask::from_vec(1, 1, 1, vec![7]).unwrap();
        let back = decode_pgm(&encode_pgm(&m)).unwrap();
        assert_eq!(back.data, vec![7]);
    }

    #[test]
    fn image_round_trip_is_bit_exact() {
        let img = Tensor::<f32>::from_fn([1, 3, 5, 4], |[_, c, y, x]| ((c * 31 + y * 7 + x * 50) % 256) as f32 / 255.0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ppm");
        write_image(&p, &img).unwrap();
        assert_eq!(read_image(&p).unwrap(), img);
    }

    #[test]
    fn comments_in_header_are_skipped() {
        let bytes = b"P5\n# made by hand\n2 1\n255\n\x03\x04";
        assert_eq!(decode_pgm(bytes).unwrap().data, vec![3, 4]);
    }

    #[test]
    fn truncated_payload_is_rejected_with_position() {
        let m = Mask::from_vec(1, 2, 2, vec![1, 2, 3, 4]).unwrap();
        let mut bytes = encode_pgm(&m);
        bytes.pop();
        match decode_pgm(&bytes) {
            Err(Error::Format { kind: "PGM", pos, .. }) => assert_eq!(pos, bytes.len()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_headers_are_rejected() {
        assert!(matches!(decode_pgm(b"P6\n1 1\n255\n\0"), Err(Error::Format { pos: 0, .. })));
        assert!(matches!(decode_pgm(b"P5\n1 x\n255\n\0"), Err(Error::Format { pos: 5, .. })));
        assert!(matches!(decode_pgm(b"P5\n1 1\n65535\n\0\0"), Err(Error::Format { .. })));
        assert!(matches!(decode_ppm(b"P6\n1 1\n255"), Err(Error::Format { .. })));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn mask_round_trip(w in 1usize..20, h in 1usize..20, seed in any::<u64>()) {
                let data: Vec<u8> = (0..w * h).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 7) as u8).collect();
                let m = Mask::from_vec(1, h, w, data).unwrap();
                prop_assert_eq!(decode_pgm(&encode_pgm(&m)).unwrap(), m);
            }
        }
    }
}
