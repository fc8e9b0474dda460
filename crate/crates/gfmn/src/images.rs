//! Binary PNM output for generated samples.

use std::path::{Path, PathBuf};

use gfmn_core::Tensor;

use crate::error::{write_atomic, IoError, Result};

/// Maps `[-1, 1]` linearly onto `0..=255`.
pub fn quantize(x: f32) -> u8 {
    ((x.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Encodes one `[C, H, W]` plane set as P5 (C = 1) or P6 (C = 3).
pub fn encode_pnm(channels: usize, height: usize, width: usize, chw: &[f32]) -> std::result::Result<Vec<u8>, String> {
    let magic = match channels {
        1 => "P5",
        3 => "P6",
        c => return Err(format!("cannot write {c}-channel images")),
    };
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    let plane = height * width;
    for p in 0..plane {
        for c in 0..channels {
            out.push(quantize(chw[c * plane + p]));
        }
    }
    Ok(out)
}

/// Parsed PNM image: channel count, height, width and interleaved bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

pub fn decode_pnm(bytes: &[u8]) -> std::result::Result<Pnm, String> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if bytes.get(pos) == Some(&b'#') {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated PNM header".into());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| "bad PNM header")?.to_string());
    }
    pos += 1;
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(format!("unsupported PNM type {m}")),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad PNM number `{s}`"));
    let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    let len = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or("PNM dims overflow")?;
    let pixels = bytes.get(pos..).filter(|p| p.len() == len).ok_or("PNM payload length mismatch")?;
    Ok(Pnm {
        channels,
        height,
        width,
        pixels: pixels.to_vec(),
    })
}

/// Tiles a `[N, C, H, W]` batch into one image with a one-pixel black gutter.
pub fn tile(batch: &Tensor) -> Result<(usize, usize, Vec<f32>)> {
    let s = batch.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let cols = (1..=n).find(|k| k * k >= n).unwrap_or(1);
    let rows = n.div_ceil(cols);
    let (gh, gw) = (rows * (h + 1) + 1, cols * (w + 1) + 1);
    let mut grid = vec![-1.0f32; c * gh * gw];
    for i in 0..n {
        let (oy, ox) = ((i / cols) * (h + 1) + 1, (i % cols) * (w + 1) + 1);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    grid[ch * gh * gw + (oy + y) * gw + ox + x] = batch.data()[((i * c + ch) * h + y) * w + x];
                }
            }
        }
    }
    Ok((gh, gw, grid))
}

/// Writes every image of a `[N, C, H, W]` batch plus a tiled grid into `dir`.
pub fn write_images(batch: &Tensor, dir: &Path) -> Result<Vec<PathBuf>> {
    let s = batch.shape();
    if s.len() != 4 {
        return Err(IoError::format(dir, format!("expected [N, C, H, W] images, got {s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let ext = if c == 1 { "pgm" } else { "ppm" };
    std::fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
    let mut written = Vec::with_capacity(n + 1);
    for i in 0..n {
        let path = dir.join(format!("sample_{i:04}.{ext}"));
        let img = &batch.data()[i * c * h * w..(i + 1) * c * h * w];
        let bytes = encode_pnm(c, h, w, img).map_err(|m| IoError::format(&path, m))?;
        write_atomic(&path, &bytes)?;
        written.push(path);
    }
    let (gh, gw, grid) = tile(batch)?;
    let path = dir.join(format!("grid.{ext}"));
    let bytes = encode_pnm(c, gh, gw, &grid).map_err(|m| IoError::format(&path, m))?;
    write_atomic(&path, &bytes)?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        assert_eq!(quantize(-1.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.0), 128);
    }

    #[test]
    fn header_and_payload() {
        let b = encode_pnm(1, 1, 2, &[-1.0, 1.0]).unwrap();
        assert_eq!(b, b"P5\n2 1\n255\n\x00\xff");
        let p = decode_pnm(&b).unwrap();
        assert_eq!((p.channels, p.height, p.width), (1, 1, 2));
        assert_eq!(p.pixels, vec![0, 255]);
    }

    #[test]
    fn grid_layout() {
        let batch = Tensor::full(&[3, 1, 2, 2], 1.0f32);
        let (h, w, g) = tile(&batch).unwrap();
        assert_eq!((h, w), (7, 7));
        assert_eq!(g.iter().filter(|&&v| v == 1.0).count(), 12);
    }
}
