//! Raw planar image tensors: `"GUPI"`, rank (u32), extents (u64 each),
//! dtype tag (u8), little-endian data.

use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: &[u8; 4] = b"GUPI";

pub fn encode_image<S: Scalar>(t: &Tensor<S>) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(IMAGE_MAGIC);
    w.u32(t.rank() as u32);
    for &e in t.shape() {
        w.u64(e as u64);
    }
    w.u8(S::DTYPE as u8);
    for &v in t.data() {
        v.write_le(&mut w.buf);
    }
    w.buf
}

pub fn decode_image<S: Scalar>(bytes: &[u8]) -> Result<Tensor<S>> {
    let mut r = Reader::new(bytes, "image");
    if r.take(4)? != IMAGE_MAGIC {
        return Err(Error::Format("bad image magic, expected GUPI".into()));
    }
    let rank = r.u32()? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::Format(format!("image rank {rank} is implausible")));
    }
    let shape = (0..rank)
        .map(|_| r.u64().map(|e| e as usize))
        .collect::<Result<Vec<_>>>()?;
    let tag = r.u8()?;
    let dtype = DType::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown dtype tag {tag}")))?;
    let numel = shape
        .iter()
        .try_fold(1usize, |a, &e| a.checked_mul(e))
        .ok_or_else(|| Error::Format("image extents overflow".into()))?;
    let bytes = r.take(numel * dtype.size())?;
    if !r.is_at_end() {
        return Err(Error::Format("trailing bytes after image data".into()));
    }
    let data = match dtype {
        DType::F32 => bytes.chunks_exact(4).map(|c| S::from_f64(f32::read_le(c) as f64)).collect(),
        DType::F64 => bytes.chunks_exact(8).map(|c| S::from_f64(f64::read_le(c))).collect(),
    };
    Tensor::new(&shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_image<S: Scalar>(path: &Path, t: &Tensor<S>) -> Result<()> {
    std::fs::write(path, encode_image(t))?;
    Ok(())
}

pub fn read_image<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    decode_image(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_truncation() {
        let t = Tensor::<f32>::from_fn(&[3, 4, 5], |i| i as f32 * 0.5).unwrap();
        let bytes = encode_image(&t);
        assert_eq!(decode_image::<f32>(&bytes).unwrap(), t);
        assert!(decode_image::<f32>(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes;
        bad[3] = b'Z';
        assert!(matches!(decode_image::<f32>(&bad), Err(Error::Format(_))));
    }
}
