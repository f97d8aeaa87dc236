//! Little-endian binary helpers shared by the checkpoint and raw-image formats.

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self { buf: Vec::new() }
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    /// dtype tag, rank, extents, raw data.
    pub fn tensor<S: Scalar>(&mut self, t: &Tensor<S>) {
        self.u8(S::DTYPE as u8);
        self.u32(t.rank() as u32);
        for &e in t.shape() {
            self.u64(e as u64);
        }
        self.buf.reserve(t.numel() * S::DTYPE.size());
        for &v in t.data() {
            v.write_le(&mut self.buf);
        }
    }
}

pub(crate) struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub fn new(data: &'a [u8], what: &'static str) -> Self {
        Self { data, pos: 0, what }
    }

    pub fn is_at_end(&self) -> bool {
        self.pos == self.data.len()
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len()).ok_or_else(|| {
            Error::Format(format!(
                "{} truncated: need {n} bytes at offset {}, file has {}",
                self.what,
                self.pos,
                self.data.len()
            ))
        })?;
        let out = &self.data[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// Reads a tensor written by [`Writer::tensor`], converting to `S`.
    pub fn tensor<S: Scalar>(&mut self) -> Result<Tensor<S>> {
        let tag = self.u8()?;
        let dtype = DType::from_tag(tag)
            .ok_or_else(|| Error::Format(format!("{}: unknown dtype tag {tag}", self.what)))?;
        let rank = self.u32()? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Format(format!("{}: implausible rank {rank}", self.what)));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for _ in 0..rank {
            let e = usize::try_from(self.u64()?)
                .map_err(|_| Error::Format(format!("{}: extent overflows usize", self.what)))?;
            numel = numel
                .checked_mul(e)
                .ok_or_else(|| Error::Format(format!("{}: element count overflows", self.what)))?;
            shape.push(e);
        }
        let bytes = self.take(numel.checked_mul(dtype.size()).ok_or_else(|| {
            Error::Format(format!("{}: byte count overflows", self.what))
        })?)?;
        let data: Vec<S> = match dtype {
            DType::F32 => bytes.chunks_exact(4).map(|c| S::from_f64(f32::read_le(c) as f64)).collect(),
            DType::F64 => bytes.chunks_exact(8).map(|c| S::from_f64(f64::read_le(c))).collect(),
        };
        Tensor::new(&shape, data).map_err(|e| Error::Format(format!("{}: {e}", self.what)))
    }
}
