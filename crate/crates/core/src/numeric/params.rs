//! Named parameter collections and the `OVA1` checkpoint format.
//!
//! Layout, all integers little-endian `u32`:
//! `"OVA1"`, then per parameter until EOF: name length, name bytes, rank,
//! `rank` dims, `f32` payload.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use super::kernels::Real;
use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::binio::{write_u32, ByteReader};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"OVA1";

/// Ordered map from parameter name to tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.tensors[i] = tensor,
            None => {
                self.index.insert(name.clone(), self.names.len());
                self.names.push(name);
                self.tensors.push(tensor);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Copies every parameter of `other` whose name starts with `prefix`.
    pub fn copy_prefixed(&mut self, other: &ParamStore, prefix: &str) -> usize {
        let mut n = 0;
        for (name, t) in other.iter() {
            if name.starts_with(prefix) {
                self.insert(name, t.clone());
                n += 1;
            }
        }
        n
    }

    /// Records every parameter on `tape` as a differentiable leaf.
    pub fn bind<T: Real>(&self, tape: &mut Tape<T>) -> Result<Bound> {
        let vars = self
            .tensors
            .iter()
            .map(|t| tape.variable(t))
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound {
            vars,
            index: self.index.clone(),
        })
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        for (name, t) in self.iter() {
            write_u32(&mut w, name.len())?;
            w.write_all(name.as_bytes())?;
            write_u32(&mut w, t.rank())?;
            for &d in t.shape() {
                write_u32(&mut w, d)?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut rd = ByteReader::new(&bytes, "checkpoint");
        if rd.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("checkpoint magic is not OVA1".into()));
        }
        let mut store = ParamStore::new();
        while !rd.at_end() {
            let len = rd.u32()?;
            let name = rd.string(len)?;
            let rank = rd.u32()?;
            let shape = (0..rank).map(|_| rd.u32()).collect::<Result<Vec<_>>>()?;
            let data = rd.f32s(shape.iter().product())?;
            if store.get(&name).is_some() {
                return Err(Error::Format(format!("duplicate parameter `{name}`")));
            }
            store.insert(name, Tensor::new(shape, data)?);
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

/// Tape handles of a bound [`ParamStore`], index-aligned with it.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Copy with the handle of `name` replaced by `v`.
    pub fn with_var(&self, name: &str, v: Var) -> Result<Bound> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?;
        let mut b = self.clone();
        b.vars[i] = v;
        Ok(b)
    }

    /// Gradients index-aligned with the store; unreached parameters get zeros.
    pub fn collect_grads<T: Real>(&self, tape: &Tape<T>, grads: &Gradients<T>) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|&v| {
                grads
                    .wrt(tape, v)
                    .unwrap_or_else(|| Tensor::zeros(tape.shape(v).to_vec()))
            })
            .collect()
    }
}
