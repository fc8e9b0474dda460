//! Image datasets: the native `TNSR` container and IDX files.

use std::path::Path;

use gfmn_core::Tensor;

use crate::error::{write_atomic, IoError, Result};

pub const TNSR_MAGIC: &[u8; 4] = b"TNSR";
pub const TNSR_VERSION: u32 = 1;
pub const IDX_IMAGES: u32 = 0x0000_0803;
pub const IDX_LABELS: u32 = 0x0000_0801;

/// Slack allowed outside `[-1, 1]` for stored values.
const RANGE_TOL: f32 = 1e-6;

fn checked_len(dims: &[usize], elem: usize) -> std::result::Result<usize, String> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(elem))
        .ok_or_else(|| format!("dims {dims:?} overflow"))
}

pub fn encode_tnsr(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * t.len());
    out.extend_from_slice(TNSR_MAGIC);
    out.extend_from_slice(&TNSR_VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn le_u32(b: &[u8], at: usize) -> std::result::Result<u32, String> {
    b.get(at..at + 4)
        .map(|s| u32::from_le_bytes(s.try_into().expect("4 bytes")))
        .ok_or_else(|| "truncated header".to_string())
}

fn be_u32(b: &[u8], at: usize) -> std::result::Result<u32, String> {
    b.get(at..at + 4)
        .map(|s| u32::from_be_bytes(s.try_into().expect("4 bytes")))
        .ok_or_else(|| "truncated header".to_string())
}

pub fn decode_tnsr(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    if bytes.get(..4) != Some(TNSR_MAGIC) {
        return Err("bad TNSR magic".into());
    }
    let version = le_u32(bytes, 4)?;
    if version != TNSR_VERSION {
        return Err(format!("unsupported TNSR version {version}"));
    }
    let rank = le_u32(bytes, 8)? as usize;
    if rank == 0 || rank > 8 {
        return Err(format!("unsupported rank {rank}"));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| le_u32(bytes, 12 + 4 * i).map(|d| d as usize))
        .collect::<std::result::Result<_, _>>()?;
    let header = 12 + 4 * rank;
    let len = checked_len(&dims, 4)?;
    if bytes.len() - header != len {
        return Err(format!(
            "payload is {} bytes, dims {dims:?} need {len}",
            bytes.len() - header
        ));
    }
    let data: Vec<f32> = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if let Some(bad) = data.iter().find(|v| !(v.abs() <= 1.0 + RANGE_TOL)) {
        return Err(format!("value {bad} outside [-1, 1]"));
    }
    Tensor::new(&dims, data).map_err(|e| e.to_string())
}

/// Checks the IDX header and returns its dims and the payload offset.
fn idx_header(bytes: &[u8], magic: u32) -> std::result::Result<(Vec<usize>, usize), String> {
    let got = be_u32(bytes, 0)?;
    if got != magic {
        return Err(format!("IDX magic {got:#010x}, expected {magic:#010x}"));
    }
    let rank = (magic & 0xff) as usize;
    let dims: Vec<usize> = (0..rank)
        .map(|i| be_u32(bytes, 4 + 4 * i).map(|d| d as usize))
        .collect::<std::result::Result<_, _>>()?;
    let header = 4 + 4 * rank;
    let len = checked_len(&dims, 1)?;
    if bytes.len() - header != len {
        return Err(format!("payload is {} bytes, dims {dims:?} need {len}", bytes.len() - header));
    }
    Ok((dims, header))
}

/// IDX `u8` images `[N, H, W]` as `[N, 1, H, W]` rescaled to `[-1, 1]`.
pub fn decode_idx_images(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let (dims, header) = idx_header(bytes, IDX_IMAGES)?;
    let data = bytes[header..].iter().map(|&b| b as f32 / 127.5 - 1.0).collect();
    Tensor::new(&[dims[0], 1, dims[1], dims[2]], data).map_err(|e| e.to_string())
}

pub fn decode_idx_labels(bytes: &[u8]) -> std::result::Result<Vec<u8>, String> {
    let (_, header) = idx_header(bytes, IDX_LABELS)?;
    Ok(bytes[header..].to_vec())
}

pub fn encode_idx_images(images: &[u8], n: usize, h: usize, w: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len());
    out.extend_from_slice(&IDX_IMAGES.to_be_bytes());
    for d in [n, h, w] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(images);
    out
}

/// Loads a `TNSR` or IDX image file, chosen by its magic.
pub fn load_dataset(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| IoError::io(path, e))?;
    let decoded = if bytes.starts_with(TNSR_MAGIC) {
        decode_tnsr(&bytes)
    } else if bytes.starts_with(&IDX_IMAGES.to_be_bytes()) {
        decode_idx_images(&bytes)
    } else {
        Err("unrecognised dataset format".into())
    };
    decoded.map_err(|m| IoError::format(path, m))
}

pub fn load_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path).map_err(|e| IoError::io(path, e))?;
    decode_idx_labels(&bytes).map_err(|m| IoError::format(path, m))
}

pub fn save_tnsr(path: &Path, t: &Tensor) -> Result<()> {
    write_atomic(path, &encode_tnsr(t))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tnsr_round_trip() {
        let t = Tensor::from_fn(&[2, 1, 2, 3], |i| i as f32 / 12.0 - 0.5);
        assert_eq!(decode_tnsr(&encode_tnsr(&t)).unwrap(), t);
    }

    #[test]
    fn rejects_inconsistent_lengths() {
        let mut b = encode_tnsr(&Tensor::zeros(&[2, 2]));
        b.pop();
        assert!(decode_tnsr(&b).is_err());
        let mut huge = b"TNSR".to_vec();
        huge.extend_from_slice(&1u32.to_le_bytes());
        huge.extend_from_slice(&2u32.to_le_bytes());
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode_tnsr(&huge).is_err());
    }

    #[test]
    fn rejects_out_of_range_values() {
        let t = Tensor::full(&[1, 2], 1.5f32);
        assert!(decode_tnsr(&encode_tnsr(&t)).is_err());
    }

    #[test]
    fn idx_endpoints() {
        let b = encode_idx_images(&[0, 255, 0, 255], 1, 2, 2);
        let t = decode_idx_images(&b).unwrap();
        assert_eq!(t.shape(), &[1, 1, 2, 2]);
        assert_eq!(t.data(), &[-1.0, 1.0, -1.0, 1.0]);
    }

    #[test]
    fn idx_labels() {
        let mut b = IDX_LABELS.to_be_bytes().to_vec();
        b.extend_from_slice(&3u32.to_be_bytes());
        b.extend_from_slice(&[7, 1, 2]);
        assert_eq!(decode_idx_labels(&b).unwrap(), vec![7, 1, 2]);
        assert!(decode_idx_images(&b).is_err());
    }
}
