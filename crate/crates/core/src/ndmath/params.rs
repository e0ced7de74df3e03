//! Named parameter arrays with gradient and optimizer-moment slots.

use std::collections::BTreeMap;

use super::tape::{BoundParams, Gradients};
use crate::error::{Error, Result};

const STORE_MAGIC: &[u8; 8] = b"PSTORE\0\0";
const STORE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Vec<f64>,
    pub(crate) m: Vec<f64>,
    pub(crate) v: Vec<f64>,
}

impl Param {
    fn new(shape: Vec<usize>, value: Vec<f64>) -> Self {
        let n = value.len();
        Self {
            shape,
            value,
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn value(&self) -> &[f64] {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut [f64] {
        &mut self.value
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        &mut self.grad
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut [f64], &[f64], &mut [f64], &mut [f64]) {
        (&mut self.value, &self.grad, &mut self.m, &mut self.v)
    }
}

/// Ordered map from parameter name to its array. Iteration order is the
/// lexicographic name order, which fixes every reduction order downstream.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterStore {
    entries: BTreeMap<String, Param>,
    pub(crate) step: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], value: Vec<f64>) -> Result<()> {
        let expected: usize = shape.iter().product();
        if value.len() != expected || shape.is_empty() || expected == 0 {
            return Err(Error::shape(format!("parameter {name}"), expected, value.len()));
        }
        if self.entries.contains_key(name) {
            return Err(Error::Model(format!("duplicate parameter {name:?}")));
        }
        self.entries.insert(name.to_string(), Param::new(shape.to_vec(), value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    /// Value array of `name`, or a model error if it is missing.
    pub fn value(&self, name: &str) -> Result<&[f64]> {
        self.get(name)
            .map(Param::value)
            .ok_or_else(|| Error::Model(format!("missing parameter {name:?}")))
    }

    /// Overwrites the values of `name`, keeping its shape.
    pub fn set_value(&mut self, name: &str, value: &[f64]) -> Result<()> {
        let p = self
            .get_mut(name)
            .ok_or_else(|| Error::Model(format!("missing parameter {name:?}")))?;
        if p.value.len() != value.len() {
            return Err(Error::shape(format!("parameter {name}"), p.value.len(), value.len()));
        }
        p.value.copy_from_slice(value);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// Number of optimizer steps applied so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn zero_grad(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds `weight * d(output)/d(param)` into each gradient slot.
    pub fn accumulate(&mut self, bound: &BoundParams, grads: &Gradients, weight: f64) -> Result<()> {
        for (name, var) in bound.iter() {
            let p = self
                .entries
                .get_mut(name)
                .ok_or_else(|| Error::Model(format!("bound parameter {name:?} not in store")))?;
            if let Some(g) = grads.get(var) {
                for (slot, gi) in p.grad.iter_mut().zip(g) {
                    *slot += weight * gi;
                }
            }
        }
        Ok(())
    }

    /// Adds another store's gradients, matched by name.
    pub fn accumulate_store_grads(&mut self, other: &ParameterStore) -> Result<()> {
        for (name, p) in self.entries.iter_mut() {
            let o = other
                .get(name)
                .ok_or_else(|| Error::Model(format!("missing parameter {name:?}")))?;
            for (a, b) in p.grad.iter_mut().zip(&o.grad) {
                *a += b;
            }
        }
        Ok(())
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Same names, shapes and bit-identical values.
    pub fn same_values(&self, other: &ParameterStore) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((ka, a), (kb, b))| {
                ka == kb && a.shape == b.shape && a.value.iter().zip(&b.value).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    /// Versioned binary encoding of names, shapes and little-endian values.
    /// Gradients and optimizer moments are not written.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.num_scalars());
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, p) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
            for &d in &p.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &p.value {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Decodes [`Self::to_bytes`] output, returning the store and the number of
    /// bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != STORE_MAGIC {
            return Err(Error::Checkpoint("bad parameter store magic".into()));
        }
        let version = r.u32()?;
        if version != STORE_VERSION {
            return Err(Error::Checkpoint(format!(
                "parameter store version {version}, expected {STORE_VERSION}"
            )));
        }
        let count = r.u32()? as usize;
        let mut store = ParameterStore::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(
                n.checked_mul(8)
                    .ok_or_else(|| Error::Checkpoint("shape overflow".into()))?,
            )?;
            let value = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store
                .insert(&name, &shape, value)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        Ok((store, r.pos))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint("truncated or corrupt file".into()));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert(
            "a.weight",
            &[2, 3],
            vec![0.1, -2.5, 3.0, 1e-300, f64::MIN_POSITIVE, 7.0],
        )
        .unwrap();
        s.insert("a.bias", &[2], vec![0.0, -0.0]).unwrap();
        s
    }

    #[test]
    fn binary_round_trip_is_bit_exact() {
        let s = store();
        let bytes = s.to_bytes();
        let (back, used) = ParameterStore::from_bytes(&bytes).unwrap();
        assert_eq!(used, bytes.len());
        assert!(s.same_values(&back));
    }

    #[test]
    fn truncated_bytes_are_rejected() {
        let bytes = store().to_bytes();
        for cut in [0, 5, 12, bytes.len() - 1] {
            assert!(matches!(
                ParameterStore::from_bytes(&bytes[..cut]),
                Err(Error::Checkpoint(_))
            ));
        }
    }

    #[test]
    fn duplicate_and_misshaped_inserts_fail() {
        let mut s = store();
        assert!(s.insert("a.bias", &[2], vec![0.0; 2]).is_err());
        assert!(s.insert("b", &[2, 2], vec![0.0; 3]).is_err());
        assert!(s.set_value("a.bias", &[1.0]).is_err());
    }
}
