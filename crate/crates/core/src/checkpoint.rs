//! Binary tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FRSR"  version:u32  count:u32
//! count × { name_len:u16  name:utf8  dtype:u8 (0 = f32)  ndim:u8  dims:u32×ndim  payload:f32×numel }
//! crc32:u32 over every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"FRSR";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

pub fn encode(tensors: &[(&str, &Tensor<f32>)]) -> Result<Vec<u8>> {
    let payload: usize = tensors.iter().map(|(n, t)| n.len() + 4 + 4 * (t.ndim() + t.numel())).sum();
    let mut out = Vec::with_capacity(16 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(tensors.len()).map_err(|_| Error::Contract("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in tensors {
        let len =
            u16::try_from(name.len()).map_err(|_| Error::Contract(format!("tensor name `{name}` is too long")))?;
        let ndim = u8::try_from(t.ndim()).map_err(|_| Error::Contract(format!("`{name}` has too many dimensions")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(ndim);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Contract(format!("`{name}` dim {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Corruption(format!("truncated at byte {} (wanted {n} more)", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::Corruption("missing FRSR header".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Corruption(format!("CRC mismatch: stored {stored:08x}, computed {actual:08x}")));
    }
    let mut r = Reader { bytes: body, pos: 8 };
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Corruption("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Corruption(format!("`{name}` has unknown dtype code {dtype}")));
        }
        let ndim = r.u8()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Corruption(format!("`{name}` shape overflows")))?;
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Corruption("payload overflows".into()))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let tensor = Tensor::new(shape, data).map_err(|e| Error::Corruption(e.to_string()))?;
        out.push((name, tensor));
    }
    if r.pos != body.len() {
        return Err(Error::Corruption(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(out)
}

pub fn write_tensors(path: &Path, tensors: &[(&str, &Tensor<f32>)]) -> Result<()> {
    let bytes = encode(tensors)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Serializes every parameter, in registration order, as f32.
pub fn encode_params<T: Scalar>(store: &ParamStore<T>) -> Result<Vec<u8>> {
    let cast: Vec<(String, Tensor<f32>)> = store.iter().map(|p| (p.name.clone(), p.value.cast())).collect();
    let refs: Vec<(&str, &Tensor<f32>)> = cast.iter().map(|(n, t)| (n.as_str(), t)).collect();
    encode(&refs)
}

pub fn save_params<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let bytes = encode_params(store)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Replaces every parameter of `store` with the decoded values. The store is
/// left untouched unless names and shapes match exactly.
pub fn apply_params<T: Scalar>(store: &mut ParamStore<T>, tensors: Vec<(String, Tensor<f32>)>) -> Result<()> {
    let mut seen = vec![false; store.len()];
    for (name, t) in &tensors {
        let id = store.id(name).ok_or_else(|| Error::Compatibility(format!("unknown tensor `{name}`")))?;
        if std::mem::replace(&mut seen[id.index()], true) {
            return Err(Error::Compatibility(format!("tensor `{name}` appears twice")));
        }
        if store.get(id).shape() != t.shape() {
            return Err(Error::Compatibility(format!(
                "`{name}` has shape {:?} in the model, {:?} in the checkpoint",
                store.get(id).shape(),
                t.shape()
            )));
        }
    }
    if let Some(missing) = store.iter().zip(&seen).find(|(_, &s)| !s) {
        return Err(Error::Compatibility(format!("checkpoint lacks `{}`", missing.0.name)));
    }
    for (name, t) in tensors {
        store.set(&name, t.cast())?;
    }
    Ok(())
}

pub fn load_params<T: Scalar>(store: &mut ParamStore<T>, path: &Path) -> Result<()> {
    apply_params(store, read_tensors(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<(String, Tensor<f32>)> {
        vec![
            ("a.weight".into(), Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, -0.0, 1e-30]).unwrap()),
            ("b".into(), Tensor::new(vec![1], vec![f32::MAX]).unwrap()),
        ]
    }

    fn encoded() -> Vec<u8> {
        let s = sample();
        let refs: Vec<_> = s.iter().map(|(n, t)| (n.as_str(), t)).collect();
        encode(&refs).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let back = decode(&encoded()).unwrap();
        let orig = sample();
        for ((n0, t0), (n1, t1)) in orig.iter().zip(&back) {
            assert_eq!(n0, n1);
            assert_eq!(t0.shape(), t1.shape());
            let bits0: Vec<u32> = t0.data().iter().map(|v| v.to_bits()).collect();
            let bits1: Vec<u32> = t1.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits0, bits1);
        }
    }

    #[test]
    fn header_layout() {
        let bytes = encoded();
        assert_eq!(&bytes[..4], b"FRSR");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &[2, 0, 0, 0]);
        assert_eq!(&bytes[12..14], &[8, 0]);
        assert_eq!(&bytes[14..22], b"a.weight");
        assert_eq!(bytes[22], 0);
        assert_eq!(bytes[23], 2);
    }

    #[test]
    fn every_single_bit_flip_is_detected() {
        let bytes = encoded();
        for i in 0..bytes.len() {
            for bit in 0..8 {
                let mut b = bytes.clone();
                b[i] ^= 1 << bit;
                assert!(decode(&b).is_err(), "flip at byte {i} bit {bit} went unnoticed");
            }
        }
    }

    #[test]
    fn version_gate() {
        let mut bytes = encoded();
        bytes[4] = 2;
        assert!(matches!(decode(&bytes), Err(Error::UnsupportedVersion(2))));
    }

    #[test]
    fn truncation_is_corruption() {
        let bytes = encoded();
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(Error::Corruption(_))));
        assert!(matches!(decode(&bytes[..10]), Err(Error::Corruption(_))));
    }

    #[test]
    fn apply_rejects_mismatches_without_partial_writes() {
        let mut store = ParamStore::<f64>::new();
        store.register("a.weight", Tensor::zeros(vec![2, 3])).unwrap();
        store.register("b", Tensor::zeros(vec![2])).unwrap();
        let err = apply_params(&mut store, sample()).unwrap_err();
        assert!(matches!(err, Error::Compatibility(_)));
        assert_eq!(store.by_name("a.weight").unwrap().sum(), 0.0);

        let mut extra = sample();
        extra.push(("c".into(), Tensor::zeros(vec![1])));
        let mut store = ParamStore::<f64>::new();
        store.register("a.weight", Tensor::zeros(vec![2, 3])).unwrap();
        store.register("b", Tensor::zeros(vec![1])).unwrap();
        assert!(matches!(apply_params(&mut store, extra), Err(Error::Compatibility(_))));
        apply_params(&mut store, sample()).unwrap();
        assert_eq!(store.by_name("b").unwrap().data(), &[f32::MAX as f64]);
    }
}
