//! Named parameter containers and their on-disk checkpoint format.
//!
//! Layout (little-endian):
//! `b"NDGC"`, `u32` format version, `u32` entry count, then per entry:
//! `u32` name length, UTF-8 name, `u8` trainable flag, `u32` rank, `u32`
//! extents, and row-major `f32` values.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::array::Array;
use crate::error::{contract, Error, Result};
use crate::tape::{Grads, Tape, Var};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NDGC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Ordered collection of named arrays. Non-trainable entries (running
/// statistics) are stored alongside weights but never bound as parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Array>,
    trainable: Vec<bool>,
    index: HashMap<String, usize>,
}

/// Tape handles for every entry of a [`ParamSet`], in insertion order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: usize) -> Var {
        self.vars[id]
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Array) -> usize {
        self.insert_with(name, value, true)
    }

    pub fn insert_buffer(&mut self, name: &str, value: Array) -> usize {
        self.insert_with(name, value, false)
    }

    fn insert_with(&mut self, name: &str, value: Array, trainable: bool) -> usize {
        assert!(!self.index.contains_key(name), "duplicate parameter name `{}`", name);
        self.names.push(name.to_string());
        self.values.push(value);
        self.trainable.push(trainable);
        self.index.insert(name.to_string(), self.names.len() - 1);
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn value(&self, id: usize) -> &Array {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Array {
        &mut self.values[id]
    }

    pub fn is_trainable(&self, id: usize) -> bool {
        self.trainable[id]
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.id(name).map(|i| &self.values[i])
    }

    pub fn param_count(&self) -> usize {
        self.values.iter().zip(&self.trainable).filter(|(_, &t)| t).map(|(v, _)| v.len()).sum()
    }

    /// Pushes every entry onto `tape`; trainable entries become gradient
    /// leaves only when `trainable` is set.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .zip(&self.trainable)
            .map(|(v, &t)| if trainable && t { tape.param(v.clone()) } else { tape.constant(v.clone()) })
            .collect();
        Bound { vars }
    }

    /// Gradients aligned with entries (zeros for buffers and unused entries).
    pub fn collect_grads(&self, grads: &Grads, bound: &Bound) -> Vec<Array> {
        bound.vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    }

    pub fn zero_grads(&self) -> Vec<Array> {
        self.values.iter().map(|v| Array::zeros(v.shape())).collect()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.values.len() as u32).to_le_bytes())?;
        for ((name, value), &t) in self.names.iter().zip(&self.values).zip(&self.trainable) {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[t as u8])?;
            w.write_all(&(value.ndim() as u32).to_le_bytes())?;
            for &d in value.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &x in value.data() {
                w.write_all(&(x as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad magic header".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported version {}", version)));
        }
        let count = read_u32(&mut r)? as usize;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("name is not UTF-8".into()))?;
            let mut flag = [0u8; 1];
            r.read_exact(&mut flag)?;
            let rank = read_u32(&mut r)? as usize;
            let shape = (0..rank).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut buf = vec![0u8; 4 * n];
            r.read_exact(&mut buf)?;
            let data = buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
            if set.index.contains_key(&name) {
                return Err(Error::Format(format!("duplicate entry `{}`", name)));
            }
            set.insert_with(&name, Array::new(&shape, data)?, flag[0] != 0);
        }
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }

    /// Copies values from `other` for every name present in both, checking shapes.
    pub fn load_values_from(&mut self, other: &ParamSet) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let src = other
                .get(name)
                .ok_or_else(|| contract("load_values_from", format!("missing entry `{}`", name)))?;
            if src.shape() != self.values[i].shape() {
                return Err(Error::ShapeMismatch {
                    op: "load_values_from",
                    expected: self.values[i].shape().to_vec(),
                    got: src.shape().to_vec(),
                });
            }
        }
        for i in 0..self.names.len() {
            self.values[i] = other.get(&self.names[i]).unwrap().clone();
        }
        Ok(())
    }

    /// Rounds every value through `f32`, the checkpoint storage precision.
    pub fn quantize_f32(&mut self) {
        for v in &mut self.values {
            for x in v.data_mut() {
                *x = *x as f32 as f64;
            }
        }
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
