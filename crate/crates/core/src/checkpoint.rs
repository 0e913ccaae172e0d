//! Versioned binary container of named, shape-tagged dense arrays plus
//! string metadata. Little-endian throughout; round-trips bit-exactly.
//!
//! Layout: magic `VGCKPT\0\0`, `u32` version, `u32` metadata count, then
//! `(key, value)` strings, `u32` array count, then per array: name string,
//! `u8` dtype, `u32` rank, `u64` dims, raw data. Strings are `u32` length
//! plus UTF-8 bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};

const MAGIC: &[u8; 8] = b"VGCKPT\0\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
}

impl ArrayData {
    fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::U64(v) => v.len(),
        }
    }

    fn tag(&self) -> u8 {
        match self {
            ArrayData::F32(_) => 0,
            ArrayData::F64(_) => 1,
            ArrayData::U64(_) => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl Array {
    pub fn from_tensor<F: Real>(t: &Tensor<F>) -> Self {
        let data = if F::DTYPE == "f32" {
            ArrayData::F32(t.data().iter().map(|x| x.to_f32().expect("f32")).collect())
        } else {
            ArrayData::F64(t.data().iter().map(|x| x.f64()).collect())
        };
        Array {
            shape: t.shape().to_vec(),
            data,
        }
    }

    pub fn to_tensor<F: Real>(&self) -> Result<Tensor<F>> {
        let data: Vec<F> = match (&self.data, F::DTYPE) {
            (ArrayData::F32(v), "f32") => v.iter().map(|&x| F::of(x as f64)).collect(),
            (ArrayData::F64(v), "f64") => v.iter().map(|&x| F::of(x)).collect(),
            (ArrayData::U64(_), _) => return Err(Error::invalid("integer array read as real tensor")),
            (_, want) => return Err(Error::invalid(format!("array dtype does not match {want}"))),
        };
        Tensor::new(&self.shape, data)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub arrays: BTreeMap<String, Array>,
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_u32::<LE>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_str(r: &mut impl Read) -> std::io::Result<String> {
    let n = r.read_u32::<LE>()? as usize;
    let mut buf = vec![0; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn insert(&mut self, name: impl Into<String>, a: Array) {
        self.arrays.insert(name.into(), a);
    }

    pub fn insert_tensor<F: Real>(&mut self, name: impl Into<String>, t: &Tensor<F>) {
        self.insert(name, Array::from_tensor(t));
    }

    pub fn insert_u64(&mut self, name: impl Into<String>, v: Vec<u64>) {
        let shape = vec![v.len()];
        self.insert(
            name,
            Array {
                shape,
                data: ArrayData::U64(v),
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<&Array> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::invalid(format!("checkpoint has no array {name:?}")))
    }

    pub fn tensor<F: Real>(&self, name: &str) -> Result<Tensor<F>> {
        self.get(name)?.to_tensor()
    }

    pub fn u64s(&self, name: &str) -> Result<Vec<u64>> {
        match &self.get(name)?.data {
            ArrayData::U64(v) => Ok(v.clone()),
            _ => Err(Error::invalid(format!("array {name:?} is not integer"))),
        }
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.arrays.keys().any(|k| k.starts_with(prefix))
    }

    /// Stores every parameter under `prefix.name`.
    pub fn put_store<F: Real>(&mut self, prefix: &str, store: &ParamStore<F>) {
        for (name, t) in store.iter() {
            self.insert_tensor(format!("{prefix}.{name}"), t);
        }
    }

    /// Overwrites `store` with the arrays under `prefix`, checking shapes.
    pub fn load_store<F: Real>(&self, prefix: &str, store: &mut ParamStore<F>) -> Result<()> {
        let names: Vec<String> = store.names().to_vec();
        for (i, name) in names.iter().enumerate() {
            let t: Tensor<F> = self.tensor(&format!("{prefix}.{name}"))?;
            let slot = &mut store.tensors_mut()[i];
            if t.shape() != slot.shape() {
                return Err(Error::shape(format!(
                    "checkpoint {prefix}.{name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LE>(VERSION)?;
        w.write_u32::<LE>(self.meta.len() as u32)?;
        for (k, v) in &self.meta {
            write_str(w, k)?;
            write_str(w, v)?;
        }
        w.write_u32::<LE>(self.arrays.len() as u32)?;
        for (name, a) in &self.arrays {
            write_str(w, name)?;
            w.write_u8(a.data.tag())?;
            w.write_u32::<LE>(a.shape.len() as u32)?;
            for &d in &a.shape {
                w.write_u64::<LE>(d as u64)?;
            }
            match &a.data {
                ArrayData::F32(v) => v.iter().try_for_each(|&x| w.write_f32::<LE>(x))?,
                ArrayData::F64(v) => v.iter().try_for_each(|&x| w.write_f64::<LE>(x))?,
                ArrayData::U64(v) => v.iter().try_for_each(|&x| w.write_u64::<LE>(x))?,
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> std::result::Result<Self, String> {
        let io = |e: std::io::Error| e.to_string();
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err("not a checkpoint file (bad magic)".into());
        }
        let version = r.read_u32::<LE>().map_err(io)?;
        if version != VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let mut ck = Checkpoint::new();
        for _ in 0..r.read_u32::<LE>().map_err(io)? {
            let k = read_str(r).map_err(io)?;
            let v = read_str(r).map_err(io)?;
            ck.meta.insert(k, v);
        }
        for _ in 0..r.read_u32::<LE>().map_err(io)? {
            let name = read_str(r).map_err(io)?;
            let tag = r.read_u8().map_err(io)?;
            let rank = r.read_u32::<LE>().map_err(io)? as usize;
            if rank > 16 {
                return Err(format!("array {name}: implausible rank {rank}"));
            }
            let shape: Vec<usize> = (0..rank)
                .map(|_| r.read_u64::<LE>().map(|d| d as usize))
                .collect::<std::io::Result<_>>()
                .map_err(io)?;
            let n: usize = shape.iter().product();
            let data = match tag {
                0 => ArrayData::F32((0..n).map(|_| r.read_f32::<LE>()).collect::<std::io::Result<_>>().map_err(io)?),
                1 => ArrayData::F64((0..n).map(|_| r.read_f64::<LE>()).collect::<std::io::Result<_>>().map_err(io)?),
                2 => ArrayData::U64((0..n).map(|_| r.read_u64::<LE>()).collect::<std::io::Result<_>>().map_err(io)?),
                t => return Err(format!("array {name}: unknown dtype tag {t}")),
            };
            debug_assert_eq!(data.len(), n);
            ck.arrays.insert(name, Array { shape, data });
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let file = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(&tmp, e))?;
        drop(w);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut std::io::BufReader::new(file)).map_err(|m| Error::format(path, m))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_bit_exactly() {
        let mut ck = Checkpoint::new();
        ck.set_meta("epoch", 3);
        ck.insert_tensor("a.w", &Tensor::<f32>::new(&[2, 2], vec![1.5, -0.0, f32::MIN_POSITIVE, 1e-30]).unwrap());
        ck.insert_tensor("b", &Tensor::<f64>::from_vec(vec![std::f64::consts::PI, -1e300]));
        ck.insert_u64("ids", vec![0, u64::MAX, 7]);
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ck);
        let t: Tensor<f32> = back.tensor("a.w").unwrap();
        assert_eq!(t.data()[1].to_bits(), (-0.0f32).to_bits());
        assert!(back.tensor::<f64>("a.w").is_err());
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::read_from(&mut &b"nope"[..]).is_err());
        let mut buf = Vec::new();
        Checkpoint::new().write_to(&mut buf).unwrap();
        buf[8] = 9;
        assert!(Checkpoint::read_from(&mut buf.as_slice()).is_err());
    }
}
