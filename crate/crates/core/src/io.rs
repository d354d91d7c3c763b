//! Binary tensor container and the multi-tensor checkpoint bundle.
//!
//! Tensor container, little-endian throughout:
//!
//! ```text
//! "BRTK1\0" | u32 rank | rank x u64 dims | u8 dtype | payload (row-major)
//! ```
//!
//! with dtype 0 = f64 and 1 = f32. Bundles hold a text header and a list of
//! named tensor records:
//!
//! ```text
//! "BRCK1\0" | u32 header_len | header (UTF-8) | u32 count |
//!     count x (u32 name_len | name (UTF-8) | tensor container)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 6] = b"BRTK1\0";
pub const BUNDLE_MAGIC: &[u8; 6] = b"BRCK1\0";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F64 = 0,
    F32 = 1,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
        }
    }
}

pub fn encode_tensor(t: &Tensor, dtype: DType, out: &mut Vec<u8>) {
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.push(dtype as u8);
    match dtype {
        DType::F64 => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        DType::F32 => t
            .data()
            .iter()
            .for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated {what}: need {n} bytes at offset {}, have {}",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn decode_tensor_at(r: &mut Reader<'_>) -> Result<(Tensor, DType)> {
    let magic = r.take(6, "magic")?;
    if magic != TENSOR_MAGIC {
        return Err(Error::Format(format!(
            "bad tensor magic {magic:02x?}, expected {TENSOR_MAGIC:02x?}"
        )));
    }
    let rank = r.u32("rank")? as usize;
    if rank > 16 {
        return Err(Error::Format(format!("unsupported rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u64("dims")? as usize);
    }
    let dtype = match r.take(1, "dtype")?[0] {
        0 => DType::F64,
        1 => DType::F32,
        other => return Err(Error::Format(format!("unknown dtype tag {other}"))),
    };
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("shape {shape:?} overflows")))?;
    let bytes = n
        .checked_mul(dtype.width())
        .ok_or_else(|| Error::Format(format!("shape {shape:?} overflows")))?;
    let payload = r.take(bytes, "payload")?;
    let data: Vec<f64> = match dtype {
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    Ok((Tensor::new(shape, data)?, dtype))
}

/// Decodes one container occupying the whole buffer.
pub fn decode_tensor(buf: &[u8]) -> Result<(Tensor, DType)> {
    let mut r = Reader { buf, pos: 0 };
    let out = decode_tensor_at(&mut r)?;
    if r.pos != buf.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after tensor payload",
            buf.len() - r.pos
        )));
    }
    Ok(out)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    save_tensor_as(path, t, DType::F64)
}

pub fn save_tensor_as(path: impl AsRef<Path>, t: &Tensor, dtype: DType) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(32 + t.len() * dtype.width());
    encode_tensor(t, dtype, &mut buf);
    write_file(path, &buf)
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&buf)
        .map(|(t, _)| t)
        .map_err(|e| e.context(path.display()))
}

/// A text header plus named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Bundle {
    pub header: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Bundle {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(BUNDLE_MAGIC);
        out.extend_from_slice(&(self.header.len() as u32).to_le_bytes());
        out.extend_from_slice(self.header.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            encode_tensor(t, DType::F64, &mut out);
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Bundle> {
        let mut r = Reader { buf, pos: 0 };
        let magic = r.take(6, "magic")?;
        if magic != BUNDLE_MAGIC {
            return Err(Error::Format(format!(
                "bad checkpoint magic {magic:02x?}, expected {BUNDLE_MAGIC:02x?}"
            )));
        }
        let hlen = r.u32("header length")? as usize;
        let header = String::from_utf8(r.take(hlen, "header")?.to_vec())
            .map_err(|_| Error::Format("checkpoint header is not UTF-8".into()))?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let nlen = r.u32("name length")? as usize;
            let name = String::from_utf8(r.take(nlen, "name")?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let (t, _) = decode_tensor_at(&mut r)?;
            tensors.push((name, t));
        }
        if r.pos != buf.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint",
                buf.len() - r.pos
            )));
        }
        Ok(Bundle { header, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.encode())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Bundle> {
        let path = path.as_ref();
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Bundle::decode(&buf).map_err(|e| e.context(path.display()))
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_exact() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        encode_tensor(&t, DType::F64, &mut buf);
        let mut expect = b"BRTK1\0".to_vec();
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&1u64.to_le_bytes());
        expect.extend_from_slice(&2u64.to_le_bytes());
        expect.push(0);
        expect.extend_from_slice(&1.0f64.to_le_bytes());
        expect.extend_from_slice(&(-2.5f64).to_le_bytes());
        assert_eq!(buf, expect);
    }

    #[test]
    fn bad_magic_rejected() {
        let mut buf = Vec::new();
        encode_tensor(&Tensor::zeros(&[2]), DType::F64, &mut buf);
        buf[0] = b'X';
        let err = decode_tensor(&buf).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn truncated_and_bad_dtype_rejected() {
        let mut buf = Vec::new();
        encode_tensor(&Tensor::zeros(&[3]), DType::F64, &mut buf);
        assert!(decode_tensor(&buf[..buf.len() - 1]).is_err());
        let dtype_at = 6 + 4 + 8;
        buf[dtype_at] = 7;
        assert!(decode_tensor(&buf).unwrap_err().to_string().contains("dtype"));
    }

    #[test]
    fn empty_batch_round_trips() {
        let t = Tensor::zeros(&[0, 1, 16, 16]);
        let mut buf = Vec::new();
        encode_tensor(&t, DType::F64, &mut buf);
        assert_eq!(decode_tensor(&buf).unwrap().0, t);
    }

    #[test]
    fn f32_payload_is_read() {
        let t = Tensor::new(vec![3], vec![0.5, -1.0, 0.25]).unwrap();
        let mut buf = Vec::new();
        encode_tensor(&t, DType::F32, &mut buf);
        let (back, dt) = decode_tensor(&buf).unwrap();
        assert_eq!(dt, DType::F32);
        assert_eq!(back, t);
    }

    #[test]
    fn file_round_trip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.brt");
        let t = Tensor::from_fn(&[2, 3], |i| (i as f64).exp() * 1e-3);
        save_tensor(&p, &t).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let back = load_tensor(&p).unwrap();
        assert_eq!(back, t);
        let q = dir.path().join("b.brt");
        save_tensor(&q, &back).unwrap();
        assert_eq!(std::fs::read(&q).unwrap(), bytes);
    }

    #[test]
    fn bundle_round_trip() {
        let b = Bundle {
            header: "kind = mlp\nT = 4\n".into(),
            tensors: vec![
                ("g.in.w".into(), Tensor::from_fn(&[2, 2], |i| i as f64)),
                ("d.out.b".into(), Tensor::zeros(&[1])),
            ],
        };
        let bytes = b.encode();
        let back = Bundle::decode(&bytes).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.encode(), bytes);
        let mut bad = bytes.clone();
        bad[2] = 0;
        assert!(Bundle::decode(&bad).is_err());
    }

    proptest! {
        #[test]
        fn any_f64_tensor_round_trips(
            shape in proptest::collection::vec(0usize..4, 1..4),
            seed in any::<u64>(),
        ) {
            let n: usize = shape.iter().product();
            let mut s = seed;
            let data: Vec<f64> = (0..n).map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
                f64::from_bits(s >> 2)
            }).collect();
            let t = Tensor::new(shape, data).unwrap();
            let mut buf = Vec::new();
            encode_tensor(&t, DType::F64, &mut buf);
            let (back, _) = decode_tensor(&buf).unwrap();
            let same = back.shape() == t.shape()
                && back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
        }
    }
}
