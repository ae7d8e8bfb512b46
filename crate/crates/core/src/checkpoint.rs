// SPDX-License-Identifier: Apache-2.0

//! Binary checkpoint container.
//!
//! Layout, little-endian:
//!
//! ```text
//! magic "NCVK" | version u32 | metadata length u64 | metadata (JSON, UTF-8)
//! | Adam step u64 | parameter count u32
//! | per parameter: name length u32, name, rank u32, dims u64 × rank,
//! |                value, first moment, second moment (f64 × len each)
//! ```
//!
//! JSON floats are written in shortest round-trip form, so metadata and
//! parameters both reload bit for bit.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gradcore::{Array, Parameter, ParameterSet};
use crate::toydata::write_atomic;

pub const MAGIC: [u8; 4] = *b"NCVK";
pub const VERSION: u32 = 1;

pub fn to_bytes<M: Serialize>(meta: &M, params: &ParameterSet) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(meta).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&params.step().to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, p) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let shape = p.value.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for a in [&p.value, &p.first_moment, &p.second_moment] {
            for v in a.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
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
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length overflows".into()))
    }

    fn array(&mut self, shape: &[usize], count: usize) -> Result<Array> {
        let raw = self.take(
            count
                .checked_mul(8)
                .ok_or_else(|| Error::Format("array too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Array::new(shape.to_vec(), data).map_err(|e| Error::Format(e.to_string()))
    }
}

pub fn from_bytes<M: DeserializeOwned>(bytes: &[u8]) -> Result<(M, ParameterSet)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let meta_len = r.len()?;
    let meta: M =
        serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::Format(e.to_string()))?;
    let step = r.u64()?;
    let count = r.u32()?;
    let mut params = ParameterSet::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, d| acc.checked_mul(*d))
            .ok_or_else(|| Error::Format(format!("{name}: shape overflows")))?;
        let param = Parameter {
            value: r.array(&shape, n)?,
            first_moment: r.array(&shape, n)?,
            second_moment: r.array(&shape, n)?,
        };
        params.insert_with_state(&name, param)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    params.set_step(step);
    Ok((meta, params))
}

pub fn save<M: Serialize>(path: &Path, meta: &M, params: &ParameterSet) -> Result<()> {
    write_atomic(path, &to_bytes(meta, params)?)
}

pub fn load<M: DeserializeOwned>(path: &Path) -> Result<(M, ParameterSet)> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Meta {
        seed: u64,
        values: Vec<f64>,
    }

    fn sample() -> (Meta, ParameterSet) {
        let mut p = ParameterSet::new();
        p.insert(
            "a.w",
            Array::matrix(2, 3, vec![0.1, -2.5e-300, 3.0, 1.0 / 3.0, 7e10, -0.0]).unwrap(),
        );
        p.insert("b", Array::vector(vec![std::f64::consts::PI]));
        let mut grads = std::collections::BTreeMap::new();
        grads.insert("b".to_string(), Array::vector(vec![0.3]));
        p.adam_update(&grads, &Default::default()).unwrap();
        let meta = Meta {
            seed: 9,
            values: vec![0.1 + 0.2, 1e-320, f64::MAX, 2.0f64.sqrt()],
        };
        (meta, p)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (meta, params) = sample();
        let bytes = to_bytes(&meta, &params).unwrap();
        let (m2, p2): (Meta, ParameterSet) = from_bytes(&bytes).unwrap();
        assert_eq!(p2.step(), params.step());
        for (name, p) in params.iter() {
            let q = p2.entry(name).unwrap();
            for (a, b) in [
                (&p.value, &q.value),
                (&p.first_moment, &q.first_moment),
                (&p.second_moment, &q.second_moment),
            ] {
                let bits = |x: &Array| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(a), bits(b), "{name}");
            }
        }
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&m2.values), bits(&meta.values));
        assert_eq!(to_bytes(&m2, &p2).unwrap(), bytes);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let (meta, params) = sample();
        let bytes = to_bytes(&meta, &params).unwrap();
        for cut in [3, 10, bytes.len() - 1] {
            assert!(matches!(
                from_bytes::<Meta>(&bytes[..cut]),
                Err(Error::Format(_))
            ));
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(from_bytes::<Meta>(&extra).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(from_bytes::<Meta>(&bad).is_err());
    }
}
