//! Portable float maps: ASCII header, then raw 32-bit floats stored with the
//! bottom row first. A negative scale marks little-endian data.

use std::path::Path;

use crate::error::{Error, Result};

use super::{ImageBuffer, Samples};

fn header_token<'a>(bytes: &'a [u8], at: &mut usize) -> Result<&'a str> {
    while *at < bytes.len() && bytes[*at].is_ascii_whitespace() {
        *at += 1;
    }
    let start = *at;
    while *at < bytes.len() && !bytes[*at].is_ascii_whitespace() {
        *at += 1;
    }
    if start == *at {
        return Err(Error::format("pfm", "header ends early"));
    }
    std::str::from_utf8(&bytes[start..*at]).map_err(|_| Error::format("pfm", "header is not ASCII"))
}

pub fn decode_pfm(bytes: &[u8]) -> Result<ImageBuffer> {
    let mut at = 0;
    let channels = match header_token(bytes, &mut at)? {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(Error::format("pfm", format!("unknown magic {:?}", other))),
    };
    let dim = |s: &str| {
        s.parse::<usize>()
            .ok()
            .filter(|v| *v > 0)
            .ok_or_else(|| Error::format("pfm", format!("bad dimension {:?}", s)))
    };
    let width = dim(header_token(bytes, &mut at)?)?;
    let height = dim(header_token(bytes, &mut at)?)?;
    let scale: f64 = header_token(bytes, &mut at)?
        .parse()
        .ok()
        .filter(|s: &f64| s.is_finite() && *s != 0.0)
        .ok_or_else(|| Error::format("pfm", "bad scale"))?;
    // exactly one whitespace byte separates the header from the payload
    if at >= bytes.len() || !bytes[at].is_ascii_whitespace() {
        return Err(Error::format("pfm", "missing payload"));
    }
    at += 1;
    let count = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Error::format("pfm", "dimensions overflow"))?;
    let payload = &bytes[at..];
    if payload.len() != 4 * count {
        return Err(Error::format(
            "pfm",
            format!("expected {} payload bytes, found {}", 4 * count, payload.len()),
        ));
    }
    let little = scale < 0.0;
    let row = width * channels;
    let mut data = vec![0.0f32; count];
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let b: [u8; 4] = chunk.try_into().unwrap();
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (file_row, col) = (i / row, i % row);
        data[(height - 1 - file_row) * row + col] = v;
    }
    ImageBuffer::new(width, height, channels, Samples::F32(data))
}

/// Little-endian encoding; interleaved channels in `buf` are kept as is.
pub fn encode_pfm(buf: &ImageBuffer) -> Result<Vec<u8>> {
    let Samples::F32(data) = &buf.samples else {
        return Err(Error::InvalidArgument("pfm holds float samples only".into()));
    };
    let magic = match buf.channels {
        1 => "Pf",
        3 => "PF",
        c => return Err(Error::InvalidArgument(format!("pfm cannot hold {} channels", c))),
    };
    let mut out = format!("{}\n{} {}\n-1\n", magic, buf.width, buf.height).into_bytes();
    let row = buf.width * buf.channels;
    for y in (0..buf.height).rev() {
        for v in &data[y * row..(y + 1) * row] {
            out.extend(v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    decode_pfm(&std::fs::read(path)?)
}

pub fn write_pfm(buf: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_pfm(buf)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn big_endian_bottom_up_file() {
        // 2x2 grayscale, positive scale, rows stored bottom first
        let mut bytes = b"Pf\n2 2\n1.0\n".to_vec();
        for v in [3.0f32, 4.0, 1.0, 2.0] {
            bytes.extend(v.to_be_bytes());
        }
        let img = decode_pfm(&bytes).unwrap();
        assert_eq!(img.samples, Samples::F32(vec![1.0, 2.0, 3.0, 4.0]));
    }

    #[test]
    fn colour_header() {
        let mut bytes = b"PF 1 1 -1\n".to_vec();
        for v in [1.0f32, 2.0, 3.0] {
            bytes.extend(v.to_le_bytes());
        }
        assert_eq!(decode_pfm(&bytes).unwrap().channels, 3);
    }

    #[test]
    fn malformed_files_are_rejected() {
        assert!(decode_pfm(b"P6\n1 1\n-1\n").is_err());
        assert!(decode_pfm(b"Pf\n2 x\n-1\n").is_err());
        assert!(decode_pfm(b"Pf\n1 1\n-1\n\0\0").is_err());
        assert!(decode_pfm(b"Pf\n1 1\n0\n\0\0\0\0").is_err());
    }
}
