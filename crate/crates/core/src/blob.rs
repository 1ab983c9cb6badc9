//! Little-endian framing for persisted sketch state.

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"FSKBLOB\0";
pub(crate) const BLOB_VERSION: u16 = 1;

pub(crate) const KIND_LOGSUM: u8 = 1;
pub(crate) const KIND_POLYSUM: u8 = 2;

pub(crate) struct BlobWriter {
    buf: Vec<u8>,
}

impl BlobWriter {
    pub fn new(kind: u8) -> Self {
        let mut buf = Vec::with_capacity(64);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&BLOB_VERSION.to_le_bytes());
        buf.push(kind);
        Self { buf }
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

    pub fn i64(&mut self, v: i64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn i128(&mut self, v: i128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn opt_f64(&mut self, v: Option<f64>) {
        self.u8(v.is_some() as u8);
        self.f64(v.unwrap_or(0.0));
    }

    pub fn opt_u64(&mut self, v: Option<u64>) {
        self.u8(v.is_some() as u8);
        self.u64(v.unwrap_or(0));
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        self.u64(vs.len() as u64);
        for &v in vs {
            self.f64(v);
        }
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct BlobReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> BlobReader<'a> {
    pub fn new(buf: &'a [u8], kind: u8) -> Result<Self> {
        let mut r = Self { buf, pos: 0 };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(Error::format(0, "bad blob magic"));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != BLOB_VERSION {
            return Err(Error::format(8, format!("unsupported blob version {version}")));
        }
        let got = r.u8()?;
        if got != kind {
            return Err(Error::format(10, format!("blob kind {got}, expected {kind}")));
        }
        Ok(r)
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < len {
            return Err(Error::format(self.pos as u64, "truncated blob"));
        }
        let s = &self.buf[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn i128(&mut self) -> Result<i128> {
        Ok(i128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn opt_f64(&mut self) -> Result<Option<f64>> {
        let some = self.u8()? != 0;
        let v = self.f64()?;
        Ok(some.then_some(v))
    }

    pub fn opt_u64(&mut self) -> Result<Option<u64>> {
        let some = self.u8()? != 0;
        let v = self.u64()?;
        Ok(some.then_some(v))
    }

    /// Length-prefixed `f64` slice; the length is checked against what remains.
    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let len = self.len_prefix(8)?;
        (0..len).map(|_| self.f64()).collect()
    }

    /// Reads a count whose elements take `elem_bytes` each, rejecting counts
    /// that cannot fit in the rest of the buffer.
    pub fn len_prefix(&mut self, elem_bytes: usize) -> Result<usize> {
        let at = self.pos as u64;
        let len = self.u64()?;
        let remaining = (self.buf.len() - self.pos) as u64;
        if len.saturating_mul(elem_bytes as u64) > remaining {
            return Err(Error::format(at, format!("length {len} exceeds blob size")));
        }
        Ok(len as usize)
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(self.pos as u64, "trailing bytes after blob"));
        }
        Ok(())
    }
}
