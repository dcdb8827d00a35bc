//! Named-tensor container: `"NIDS"`, version, record count, then per record a
//! length-prefixed UTF-8 name, dtype code, rank, `u64` dims and row-major
//! little-endian data. All integers are little-endian; counts are `u32`.

use std::path::Path;

use crate::error::{NidsError, Result};

pub const MAGIC: [u8; 4] = *b"NIDS";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
    U8,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
            Dtype::U8 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            2 => Ok(Dtype::U8),
            other => Err(NidsError::UnknownDtype(other)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
            TensorData::U8(_) => Dtype::U8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: TensorData,
}

fn element_count(dims: &[usize]) -> Option<usize> {
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self> {
        match element_count(&dims) {
            Some(n) if n == data.len() => Ok(Self { dims, data }),
            _ => Err(NidsError::InvalidShape(format!("dims {dims:?} do not hold {} elements", data.len()))),
        }
    }

    /// Stores `f64` values as `f32`.
    pub fn f32_from(dims: Vec<usize>, values: &[f64]) -> Result<Self> {
        Self::new(dims, TensorData::F32(values.iter().map(|&v| v as f32).collect()))
    }

    pub fn f64(dims: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        Self::new(dims, TensorData::F64(values))
    }

    pub fn u8(dims: Vec<usize>, values: Vec<u8>) -> Result<Self> {
        Self::new(dims, TensorData::U8(values))
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn dtype(&self) -> Dtype {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Values widened to `f64`, whatever the stored dtype.
    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TensorData::F64(v) => v.clone(),
            TensorData::U8(v) => v.iter().map(|&x| f64::from(x)).collect(),
        }
    }

    pub fn as_u8(&self) -> Option<&[u8]> {
        match &self.data {
            TensorData::U8(v) => Some(v),
            _ => None,
        }
    }
}

/// Ordered set of uniquely named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorContainer {
    records: Vec<(String, Tensor)>,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(NidsError::DuplicateName(name));
        }
        self.records.push((name, tensor));
        Ok(())
    }

    /// Inserts or replaces, keeping the original position of a replaced record.
    pub fn set(&mut self, name: &str, tensor: Tensor) {
        match self.records.iter_mut().find(|(n, _)| n == name) {
            Some((_, t)) => *t = tensor,
            None => self.records.push((name.to_string(), tensor)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| NidsError::MissingRecord(name.to_string()))
    }

    pub fn records(&self) -> &[(String, Tensor)] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.records.is_empty() {
            return Err(NidsError::InvalidShape("container has no records".into()));
        }
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&u32_len(self.records.len())?.to_le_bytes());
        for (name, t) in &self.records {
            out.extend_from_slice(&u32_len(name.len())?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dtype().code());
            out.extend_from_slice(&u32_len(t.dims.len())?.to_le_bytes());
            for &d in &t.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::U8(v) => out.extend_from_slice(v),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(NidsError::BadMagic(magic));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(NidsError::UnsupportedVersion(version));
        }
        let count = r.u32("record count")?;
        let mut out = Self::new();
        for i in 0..count {
            let name_len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "record name")?)
                .map_err(|_| NidsError::InvalidShape(format!("record {i} name is not UTF-8")))?
                .to_string();
            let dtype = Dtype::from_code(r.take(1, "dtype")?[0])?;
            let ndim = r.u32("rank")? as usize;
            // each dim takes 8 bytes; bound before allocating
            if ndim > r.remaining() / 8 {
                return Err(NidsError::TruncatedFile(format!("dims of record {name:?}")));
            }
            let dims: Vec<usize> = (0..ndim)
                .map(|_| r.u64("dim").and_then(|d| usize::try_from(d).map_err(|_| too_big(&name))))
                .collect::<Result<_>>()?;
            let n = element_count(&dims).ok_or_else(|| too_big(&name))?;
            let byte_len = n.checked_mul(dtype.size()).ok_or_else(|| too_big(&name))?;
            let raw = r.take(byte_len, "tensor data")?;
            let data = match dtype {
                Dtype::F32 => TensorData::F32(
                    raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect(),
                ),
                Dtype::F64 => TensorData::F64(
                    raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
                ),
                Dtype::U8 => TensorData::U8(raw.to_vec()),
            };
            out.push(name, Tensor { dims, data })?;
        }
        if r.remaining() != 0 {
            return Err(NidsError::InvalidShape(format!("{} trailing bytes after last record", r.remaining())));
        }
        Ok(out)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn u32_len(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| NidsError::InvalidShape(format!("length {n} does not fit in u32")))
}

fn too_big(name: &str) -> NidsError {
    NidsError::InvalidShape(format!("record {name:?} is too large"))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(NidsError::TruncatedFile(format!(
                "{what}: need {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> TensorContainer {
        let mut c = TensorContainer::new();
        c.push(
            "a",
            Tensor::new(vec![2, 3], TensorData::F32(vec![1.0, -2.5, 3.25, 0.0, f32::MIN_POSITIVE, 7.0])).unwrap(),
        )
        .unwrap();
        c.push("b", Tensor::f64(vec![2], vec![std::f64::consts::PI, -0.0]).unwrap()).unwrap();
        c.push("mask_0", Tensor::u8(vec![2, 2], vec![0, 1, 1, 0]).unwrap()).unwrap();
        c.push("scalar", Tensor::f64(vec![], vec![42.0]).unwrap()).unwrap();
        c
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = TensorContainer::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn single_f32_layout() {
        let mut c = TensorContainer::new();
        let vals = [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0];
        c.push("t", Tensor::new(vec![2, 3], TensorData::F32(vals.to_vec())).unwrap()).unwrap();
        let bytes = c.to_bytes().unwrap();
        let mut expected = b"NIDS".to_vec();
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.push(b't');
        expected.push(0);
        expected.extend(2u32.to_le_bytes());
        expected.extend(2u64.to_le_bytes());
        expected.extend(3u64.to_le_bytes());
        vals.iter().for_each(|v| expected.extend(v.to_le_bytes()));
        assert_eq!(bytes, expected);
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(TensorContainer::from_bytes(&bytes), Err(NidsError::BadMagic(m)) if &m == b"XXXX"));
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4] = 2;
        assert!(matches!(TensorContainer::from_bytes(&bytes), Err(NidsError::UnsupportedVersion(2))));
    }

    #[test]
    fn short_data_is_truncated() {
        let mut c = TensorContainer::new();
        c.push("m", Tensor::f32_from(vec![4, 4], &[0.5; 16]).unwrap()).unwrap();
        let bytes = c.to_bytes().unwrap();
        let header = bytes.len() - 64;
        assert!(matches!(TensorContainer::from_bytes(&bytes[..header + 60]), Err(NidsError::TruncatedFile(_))));
    }

    #[test]
    fn every_truncation_rejected() {
        let bytes = sample().to_bytes().unwrap();
        for cut in 0..bytes.len() {
            assert!(TensorContainer::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn duplicate_and_dtype_errors() {
        let mut c = sample();
        assert!(matches!(c.push("a", Tensor::u8(vec![1], vec![0]).unwrap()), Err(NidsError::DuplicateName(_))));
        let mut bytes = sample().to_bytes().unwrap();
        // dtype byte of the first record sits after magic, version, count, name length, "a"
        bytes[4 + 4 + 4 + 4 + 1] = 9;
        assert!(matches!(TensorContainer::from_bytes(&bytes), Err(NidsError::UnknownDtype(9))));
        // a second record renamed onto the first
        let mut bytes = sample().to_bytes().unwrap();
        let pos = bytes.windows(1).enumerate().skip(17).find(|(_, w)| w == b"b").unwrap().0;
        bytes[pos] = b'a';
        assert!(matches!(TensorContainer::from_bytes(&bytes), Err(NidsError::DuplicateName(_))));
        assert!(TensorContainer::new().to_bytes().is_err());
    }

    #[test]
    fn absurd_dims_do_not_allocate() {
        let mut bytes = b"NIDS".to_vec();
        bytes.extend(1u32.to_le_bytes());
        bytes.extend(1u32.to_le_bytes());
        bytes.extend(1u32.to_le_bytes());
        bytes.push(b'x');
        bytes.push(1);
        bytes.extend(u32::MAX.to_le_bytes());
        assert!(TensorContainer::from_bytes(&bytes).is_err());
        let mut bytes2 = bytes[..bytes.len() - 4].to_vec();
        bytes2.extend(2u32.to_le_bytes());
        bytes2.extend(u64::MAX.to_le_bytes());
        bytes2.extend(u64::MAX.to_le_bytes());
        assert!(TensorContainer::from_bytes(&bytes2).is_err());
    }

    proptest! {
        #[test]
        fn random_round_trip(
            f in proptest::collection::vec(any::<f32>(), 0..20),
            d in proptest::collection::vec(any::<f64>(), 1..20),
            u in proptest::collection::vec(any::<u8>(), 0..20),
        ) {
            let mut c = TensorContainer::new();
            c.push("f", Tensor::new(vec![f.len()], TensorData::F32(f)).unwrap()).unwrap();
            c.push("d", Tensor::f64(vec![d.len(), 1], d).unwrap()).unwrap();
            c.push("u", Tensor::u8(vec![1, u.len()], u).unwrap()).unwrap();
            let bytes = c.to_bytes().unwrap();
            let back = TensorContainer::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        }

        #[test]
        fn random_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
            let mut framed = b"NIDS\x01\x00\x00\x00".to_vec();
            framed.extend(bytes);
            let _ = TensorContainer::from_bytes(&framed);
        }
    }
}
