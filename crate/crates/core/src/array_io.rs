//! Portable array format.
//!
//! Layout: magic `KMTR`, u8 version, u8 dtype code, u8 rank, `rank` little-endian
//! u32 dimensions, then the row-major little-endian payload. Complex arrays are
//! stored with a trailing dimension of 2 holding (real, imag).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{KmtrError, Result};

pub const MAGIC: &[u8; 4] = b"KMTR";
pub const VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    U8 = 2,
    I32 = 3,
}

impl DType {
    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            2 => Ok(DType::U8),
            3 => Ok(DType::I32),
            other => Err(KmtrError::Format(format!("unknown dtype code {other}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    I32(Vec<i32>),
}

impl ArrayData {
    pub fn dtype(&self) -> DType {
        match self {
            ArrayData::F32(_) => DType::F32,
            ArrayData::F64(_) => DType::F64,
            ArrayData::U8(_) => DType::U8,
            ArrayData::I32(_) => DType::I32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::U8(v) => v.len(),
            ArrayData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Lossless widening to f64 for every dtype.
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            ArrayData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            ArrayData::F64(v) => v.clone(),
            ArrayData::U8(v) => v.iter().map(|&x| x as f64).collect(),
            ArrayData::I32(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PortableArray {
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl PortableArray {
    pub fn new(shape: Vec<usize>, data: ArrayData) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(KmtrError::Format(format!(
                "shape {shape:?} holds {expected} elements but payload has {}",
                data.len()
            )));
        }
        if shape.len() > u8::MAX as usize {
            return Err(KmtrError::Format(format!("rank {} too large", shape.len())));
        }
        if shape.iter().any(|&d| d > u32::MAX as usize) {
            return Err(KmtrError::Format(format!("dimension too large in {shape:?}")));
        }
        Ok(Self { shape, data })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&[VERSION, self.data.dtype() as u8, self.shape.len() as u8])?;
        for &d in &self.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        match &self.data {
            ArrayData::F32(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
            ArrayData::F64(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
            ArrayData::U8(v) => w.write_all(v)?,
            ArrayData::I32(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut head = [0u8; 7];
        r.read_exact(&mut head)?;
        if &head[..4] != MAGIC {
            return Err(KmtrError::Format("bad magic bytes".into()));
        }
        if head[4] != VERSION {
            return Err(KmtrError::Format(format!("unsupported version {}", head[4])));
        }
        let dtype = DType::from_code(head[5])?;
        let rank = head[6] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            shape.push(u32::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut payload = vec![0u8; n * dtype.size()];
        r.read_exact(&mut payload)?;
        let data = match dtype {
            DType::F32 => ArrayData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => ArrayData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::U8 => ArrayData::U8(payload),
            DType::I32 => ArrayData::I32(
                payload
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        PortableArray::new(shape, data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(7 + 4 * self.shape.len() + self.data.len() * self.data.dtype().size());
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(KmtrError::MissingArtifact(path.to_path_buf()));
        }
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let a = PortableArray::new(vec![2, 3], ArrayData::U8(vec![1, 2, 3, 4, 5, 6])).unwrap();
        let b = a.to_bytes();
        assert_eq!(&b[..4], b"KMTR");
        assert_eq!(b[4], 1);
        assert_eq!(b[5], 2);
        assert_eq!(b[6], 2);
        assert_eq!(&b[7..11], &2u32.to_le_bytes());
        assert_eq!(&b[11..15], &3u32.to_le_bytes());
        assert_eq!(&b[15..], &[1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn rejects_bad_magic_and_short_payload() {
        let mut b = PortableArray::new(vec![1], ArrayData::F32(vec![1.0])).unwrap().to_bytes();
        b[0] = b'X';
        assert!(PortableArray::read_from(&b[..]).is_err());
        let b = PortableArray::new(vec![4], ArrayData::F64(vec![0.0; 4])).unwrap().to_bytes();
        assert!(PortableArray::read_from(&b[..b.len() - 1]).is_err());
    }

    #[test]
    fn shape_payload_mismatch_is_error() {
        assert!(PortableArray::new(vec![2, 2], ArrayData::I32(vec![1, 2, 3])).is_err());
    }

    proptest! {
        #[test]
        fn f64_roundtrip(vals in proptest::collection::vec(any::<f64>(), 1..64)) {
            let n = vals.len();
            let a = PortableArray::new(vec![n, 1], ArrayData::F64(vals)).unwrap();
            let back = PortableArray::read_from(&a.to_bytes()[..]).unwrap();
            prop_assert_eq!(a.shape, back.shape);
            // bitwise comparison so NaN payloads count too
            match (a.data, back.data) {
                (ArrayData::F64(x), ArrayData::F64(y)) => {
                    prop_assert!(x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits()))
                }
                _ => prop_assert!(false),
            }
        }

        #[test]
        fn i32_roundtrip(vals in proptest::collection::vec(any::<i32>(), 0..32)) {
            let n = vals.len();
            let a = PortableArray::new(vec![n], ArrayData::I32(vals)).unwrap();
            prop_assert_eq!(PortableArray::read_from(&a.to_bytes()[..]).unwrap(), a);
        }
    }
}
