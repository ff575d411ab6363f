//! Binary containers: `RPKT` for a single NCHW tensor and `RPKW` for named
//! weight records. All integers and floats are little endian.
//!
//! ```text
//! RPKT: "RPKT" u32 version  u32 n c h w  f32 * (n*c*h*w)
//! RPKW: "RPKW" u32 version  u32 count
//!       { u16 name_len  name  u8 rank  u32 * rank  f32 * prod(dims) } * count
//! ```

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"RPKT";
pub const WEIGHTS_MAGIC: &[u8; 4] = b"RPKW";
pub const FORMAT_VERSION: u32 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let len = n.checked_mul(4).ok_or_else(|| Error::Format("payload size overflow".into()))?;
        Ok(self.take(len)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        let m = self.take(4)?;
        if m != magic {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(m),
                String::from_utf8_lossy(magic)
            )));
        }
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + 4 * t.data().len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for d in t.shape().dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader { bytes, pos: 0 };
    r.header(TENSOR_MAGIC)?;
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
    let data = r.f32s(shape.numel())?;
    r.finish()?;
    Tensor::new(shape, data)
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    decode_tensor(&bytes)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode_tensor(t)).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightRecord {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

/// Ordered set of uniquely named weight arrays.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightContainer {
    records: Vec<WeightRecord>,
    names: HashSet<String>,
}

impl WeightContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[WeightRecord] {
        &self.records
    }

    pub fn get(&self, name: &str) -> Option<&WeightRecord> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn push(&mut self, name: &str, dims: Vec<u32>, data: Vec<f32>) -> Result<()> {
        if name.len() > u16::MAX as usize {
            return Err(Error::Format(format!("record name of {} bytes is too long", name.len())));
        }
        if dims.len() > u8::MAX as usize {
            return Err(Error::Format(format!("record {name:?} has rank {}", dims.len())));
        }
        let numel: usize = dims.iter().map(|&d| d as usize).product();
        if numel != data.len() {
            return Err(Error::Format(format!(
                "record {name:?}: dims {dims:?} describe {numel} values, got {}",
                data.len()
            )));
        }
        if !self.names.insert(name.to_string()) {
            return Err(Error::Format(format!("duplicate record name {name:?}")));
        }
        self.records.push(WeightRecord { name: name.to_string(), dims, data });
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u16).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(r.dims.len() as u8);
            for d in &r.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &r.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        r.header(WEIGHTS_MAGIC)?;
        let count = r.u32()?;
        let mut out = WeightContainer::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("record name is not utf-8".into()))?
                .to_string();
            let rank = r.u8()? as usize;
            let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let numel = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d as usize));
            let numel = numel.ok_or_else(|| Error::Format(format!("record {name:?} is too large")))?;
            let data = r.f32s(numel)?;
            out.push(&name, dims, data)?;
        }
        r.finish()?;
        Ok(out)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        Self::decode(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip() {
        let t = Tensor::from_fn(Shape::new(2, 3, 4, 5), |[n, c, h, w]| (n * 1000 + c * 100 + h * 10 + w) as f32 - 0.5)
            .unwrap();
        let bytes = encode_tensor(&t);
        assert_eq!(&bytes[..4], b"RPKT");
        assert_eq!(bytes.len(), 24 + 4 * 120);
        let back = decode_tensor(&bytes).unwrap();
        assert_eq!(back, t);
        assert_eq!(encode_tensor(&back), bytes);
    }

    #[test]
    fn tensor_rejects_bad_input() {
        let t = Tensor::zeros(Shape::new(1, 1, 2, 2)).unwrap();
        let bytes = encode_tensor(&t);
        assert!(decode_tensor(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_tensor(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(decode_tensor(&magic).is_err());
        let mut version = bytes;
        version[4] = 2;
        assert!(decode_tensor(&version).is_err());
    }

    #[test]
    fn weights_round_trip_keeps_order() {
        let mut w = WeightContainer::new();
        w.push("z.weight", vec![2, 1, 1, 1], vec![1.0, -2.0]).unwrap();
        w.push("a.bias", vec![2], vec![0.5, f32::MIN_POSITIVE]).unwrap();
        w.push("scalar", vec![], vec![3.0]).unwrap();
        let bytes = w.encode();
        let back = WeightContainer::decode(&bytes).unwrap();
        assert_eq!(back, w);
        assert_eq!(back.records()[0].name, "z.weight");
        assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn weights_reject_duplicates_and_size_mismatch() {
        let mut w = WeightContainer::new();
        w.push("a", vec![1], vec![1.0]).unwrap();
        assert!(w.push("a", vec![1], vec![1.0]).is_err());
        assert!(w.push("b", vec![2], vec![1.0]).is_err());
        assert!(WeightContainer::decode(b"RPKW\x01\x00\x00\x00\x01\x00\x00\x00").is_err());
    }
}
