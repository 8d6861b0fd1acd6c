//! JSON and binary encodings of [`Tensor`].
//!
//! JSON: `{"shape": [..], "data": [[re, im], ..]}` in row-major order.
//! Binary: the 16-byte [`BINARY_MAGIC`], the rank as little-endian `u64`,
//! each extent as `u64`, then every value as two little-endian `f64`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{Tensor, C64};
use crate::error::{Error, Result};

pub const BINARY_MAGIC: &[u8; 16] = b"RECYCLETN-TENS01";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorJson {
    pub shape: Vec<usize>,
    pub data: Vec<[f64; 2]>,
}

impl From<&Tensor> for TensorJson {
    fn from(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|z| [z.re, z.im]).collect(),
        }
    }
}

impl TryFrom<TensorJson> for Tensor {
    type Error = Error;

    fn try_from(j: TensorJson) -> Result<Self> {
        Tensor::new(j.shape, j.data.into_iter().map(|[re, im]| C64::new(re, im)).collect())
    }
}

impl Serialize for Tensor {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        TensorJson::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Tensor {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let j = TensorJson::deserialize(d)?;
        Tensor::try_from(j).map_err(serde::de::Error::custom)
    }
}

pub fn write_binary<W: Write>(t: &Tensor, mut w: W) -> Result<()> {
    w.write_all(BINARY_MAGIC)?;
    w.write_all(&(t.rank() as u64).to_le_bytes())?;
    for &n in t.shape() {
        w.write_all(&(n as u64).to_le_bytes())?;
    }
    for z in t.data() {
        w.write_all(&z.re.to_le_bytes())?;
        w.write_all(&z.im.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_binary<R: Read>(mut r: R) -> Result<Tensor> {
    let mut magic = [0u8; 16];
    r.read_exact(&mut magic)?;
    if &magic != BINARY_MAGIC {
        return Err(Error::Numeric("bad tensor magic header".into()));
    }
    let mut word = [0u8; 8];
    r.read_exact(&mut word)?;
    let rank = u64::from_le_bytes(word) as usize;
    if rank > 64 {
        return Err(Error::Numeric(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut word)?;
        shape.push(u64::from_le_bytes(word) as usize);
    }
    let len: usize = shape.iter().product();
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        r.read_exact(&mut word)?;
        let re = f64::from_le_bytes(word);
        r.read_exact(&mut word)?;
        let im = f64::from_le_bytes(word);
        data.push(C64::new(re, im));
    }
    Tensor::new(shape, data)
}
