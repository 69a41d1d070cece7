//! `CPXT` binary tensor files: magic `CPXT`, `u32` rank, `rank` x `u32`
//! extents, then the row-major little-endian `f32` payload.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::tensor::{Tensor, MAX_RANK};
use crate::scalar::Scalar;

pub const TENSOR_MAGIC: &[u8; 4] = b"CPXT";

pub fn write_tensor<T: Scalar, W: Write>(out: &mut W, t: &Tensor<T>) -> std::io::Result<()> {
    out.write_all(TENSOR_MAGIC)?;
    out.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    out.write_all(&buf)
}

/// Encoded size of `t` in bytes.
pub fn encoded_len<T: Scalar>(t: &Tensor<T>) -> usize {
    8 + 4 * t.rank() + 4 * t.len()
}

pub fn encode_tensor<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut v = Vec::with_capacity(encoded_len(t));
    write_tensor(&mut v, t).expect("writing to a Vec cannot fail");
    v
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads one tensor; `origin` names the source in error messages.
pub fn read_tensor<T: Scalar, R: Read>(r: &mut R, origin: &Path) -> Result<Tensor<T>> {
    let io = |e| Error::io(origin, e);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::format(origin, "bad tensor magic"));
    }
    let rank = read_u32(r).map_err(io)? as usize;
    if rank > MAX_RANK {
        return Err(Error::format(origin, format!("rank {rank} exceeds {MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r).map_err(io)? as usize);
    }
    let n: usize = shape.iter().product();
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf).map_err(io)?;
    let data = buf
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::new(&shape, data)
}

pub fn save_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    std::fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn load_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = bytes.as_slice();
    let t = read_tensor(&mut cur, path)?;
    if !cur.is_empty() {
        return Err(Error::format(path, "trailing bytes after tensor"));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::<f32>::new(&[1, 2], vec![1.0, -2.5]).unwrap();
        let b = encode_tensor(&t);
        assert_eq!(&b[..4], b"CPXT");
        assert_eq!(&b[4..8], &2u32.to_le_bytes());
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..16], &2u32.to_le_bytes());
        assert_eq!(&b[16..20], &1.0f32.to_le_bytes());
        assert_eq!(&b[20..24], &(-2.5f32).to_le_bytes());
        assert_eq!(b.len(), encoded_len(&t));
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let t = Tensor::<f32>::zeros(&[3]);
        let mut b = encode_tensor(&t);
        let mut cur = &b[..b.len() - 1];
        assert!(read_tensor::<f32, _>(&mut cur, Path::new("x")).is_err());
        b[0] = b'X';
        let mut cur = b.as_slice();
        assert!(read_tensor::<f32, _>(&mut cur, Path::new("x")).is_err());
    }

    proptest! {
        #[test]
        fn round_trips_f32_payloads(shape in proptest::collection::vec(1usize..4, 0..=4), seed in any::<u32>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n).map(|i| ((i as u32).wrapping_mul(2654435761) ^ seed) as f32 * 1e-6).collect();
            let t = Tensor::<f32>::new(&shape, data).unwrap();
            let b = encode_tensor(&t);
            let mut cur = b.as_slice();
            let back: Tensor<f32> = read_tensor(&mut cur, Path::new("mem")).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
