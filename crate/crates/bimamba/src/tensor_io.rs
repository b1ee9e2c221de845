//! Flat binary tensors: `"BMT1"`, `u32` rank, `u64` dims, little-endian
//! `f64` payload. Several records may follow each other in one file.

use std::path::Path;

use bimamba_core::Tensor;

use crate::error::{read, write, Error, Result};

pub const MAGIC: &[u8; 4] = b"BMT1";

pub fn encode_into(t: &Tensor, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * t.rank() + 8 * t.len());
    encode_into(t, &mut out);
    out
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize, what: &str) -> std::result::Result<&'a [u8], String> {
    let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| {
        format!("truncated {what} at byte {}: need {n} bytes, {} left", *pos, bytes.len() - *pos)
    })?;
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

/// Decodes one record starting at `*pos` and advances past it.
pub fn decode_at(bytes: &[u8], pos: &mut usize) -> std::result::Result<Tensor, String> {
    let start = *pos;
    if take(bytes, pos, 4, "magic")? != MAGIC {
        return Err(format!("bad magic at byte {start}, expected BMT1"));
    }
    let rank = u32::from_le_bytes(take(bytes, pos, 4, "rank")?.try_into().unwrap()) as usize;
    if rank > 8 {
        return Err(format!("rank {rank} at byte {} exceeds 8", start + 4));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u64::from_le_bytes(take(bytes, pos, 8, "dimension")?.try_into().unwrap());
        shape.push(usize::try_from(d).map_err(|_| format!("dimension {d} too large"))?);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|n| n.checked_mul(8).is_some())
        .ok_or_else(|| format!("shape {shape:?} overflows"))?;
    let payload = take(bytes, pos, n * 8, "payload")?;
    let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(&shape, data).map_err(|e| e.to_string())
}

pub fn decode_all(bytes: &[u8]) -> std::result::Result<Vec<Tensor>, String> {
    let mut pos = 0;
    let mut out = Vec::new();
    while pos < bytes.len() {
        out.push(decode_at(bytes, &mut pos)?);
    }
    Ok(out)
}

pub fn save(path: &Path, t: &Tensor) -> Result<()> {
    write(path, encode(t))
}

/// Reads a file holding exactly one tensor.
pub fn load(path: &Path) -> Result<Tensor> {
    let bytes = read(path)?;
    let mut pos = 0;
    let t = decode_at(&bytes, &mut pos).map_err(|m| Error::format(path, m))?;
    if pos != bytes.len() {
        return Err(Error::format(path, format!("{} trailing bytes after tensor", bytes.len() - pos)));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_exact() {
        let t = Tensor::new(&[2, 1], vec![1.0, -0.5]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"BMT1");
        assert_eq!(&b[4..8], &2u32.to_le_bytes());
        assert_eq!(&b[8..16], &2u64.to_le_bytes());
        assert_eq!(&b[16..24], &1u64.to_le_bytes());
        assert_eq!(&b[24..32], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 40);
        assert_eq!(decode_all(&b).unwrap(), vec![t]);
    }

    #[test]
    fn scalar_and_concatenation() {
        let a = Tensor::scalar(3.0);
        let c = Tensor::zeros(&[0, 4]);
        let mut b = encode(&a);
        encode_into(&c, &mut b);
        assert_eq!(decode_all(&b).unwrap(), vec![a, c]);
    }

    #[test]
    fn errors_name_offsets() {
        let b = encode(&Tensor::vector(vec![1.0, 2.0]));
        assert!(decode_all(&b[..b.len() - 1]).unwrap_err().contains("truncated payload"));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(decode_all(&bad).unwrap_err().contains("byte 0"));
        let mut two = b.clone();
        two.extend_from_slice(b"BMT2");
        assert!(decode_all(&two).unwrap_err().contains(&format!("byte {}", b.len())));
    }
}
