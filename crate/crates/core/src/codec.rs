//! Little-endian binary encoding shared by the weights container and the
//! checkpoint format.
//!
//! A tensor record is: `u16` name length, UTF-8 name, `u8` rank, `rank × u32`
//! dims, then `Π dims` little-endian `f32` values.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl RawTensor {
    /// Encodes `tensor` keeping the trailing `rank` extents (leading extents
    /// must be one).
    pub fn from_tensor<T: Scalar>(name: impl Into<String>, tensor: &Tensor<T>, rank: usize) -> Self {
        let dims = tensor.shape().dims();
        debug_assert!(dims[..4 - rank].iter().all(|&d| d == 1));
        RawTensor {
            name: name.into(),
            dims: dims[4 - rank..].iter().map(|&d| d as u32).collect(),
            data: tensor.data().iter().map(|v| v.as_f32()).collect(),
        }
    }

    pub fn dims_usize(&self) -> Vec<usize> {
        self.dims.iter().map(|&d| d as usize).collect()
    }

    /// Left-pads the dims with ones to four.
    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        if self.dims.len() > 4 {
            return Err(Error::Malformed {
                what: "tensor",
                detail: format!("{}: rank {} exceeds 4", self.name, self.dims.len()),
            });
        }
        let mut d = [1usize; 4];
        for (slot, &v) in d[4 - self.dims.len()..].iter_mut().zip(&self.dims) {
            *slot = v as usize;
        }
        let shape = Shape::new(d[0], d[1], d[2], d[3])?;
        Tensor::from_vec(shape, self.data.iter().map(|&v| T::from_f32(v)).collect())
    }
}

pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Writer { buf: Vec::new() }
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn tensor(&mut self, t: &RawTensor) {
        let name = t.name.as_bytes();
        self.u16(u16::try_from(name.len()).expect("tensor name longer than 65535 bytes"));
        self.bytes(name);
        self.u8(t.dims.len() as u8);
        for &d in &t.dims {
            self.u32(d);
        }
        self.buf.reserve(t.data.len() * 4);
        for &v in &t.data {
            self.f32(v);
        }
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

impl Default for Writer {
    fn default() -> Self {
        Self::new()
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8], what: &'static str) -> Self {
        Reader { buf, pos: 0, what }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated {
                what: self.what,
                detail: format!("needed {n} bytes at offset {}, {} left", self.pos, self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found: [u8; 4] = self.take(4)?.try_into().expect("4 bytes");
        if found != expected {
            return Err(Error::BadMagic { what: self.what, expected, found });
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn utf8(&mut self, len: usize) -> Result<String> {
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|e| Error::Malformed { what: self.what, detail: format!("invalid UTF-8: {e}") })
    }

    pub fn tensor(&mut self) -> Result<RawTensor> {
        let name_len = self.u16()? as usize;
        let name = self.utf8(name_len)?;
        let rank = self.u8()? as usize;
        let dims = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let count = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d as usize)).ok_or_else(|| {
            Error::Malformed { what: self.what, detail: format!("{name}: element count overflows") }
        })?;
        let bytes = self.take(count.checked_mul(4).ok_or_else(|| Error::Malformed {
            what: self.what,
            detail: format!("{name}: payload size overflows"),
        })?)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Ok(RawTensor { name, dims, data })
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Malformed {
                what: self.what,
                detail: format!("{} trailing bytes", self.buf.len() - self.pos),
            });
        }
        Ok(())
    }
}
