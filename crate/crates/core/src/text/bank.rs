//! Precomputed embedding variants per query, and the `OVB1` bank file.
//!
//! File layout (little-endian): `"OVB1"`, `u32` dim, `u32` K, `u32` query
//! count, then per query `u32` id length, id bytes, `K * dim` `f32`.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use super::embed::{embed, hash64, make_variants, QueryText};
use super::templates::{render_templates, TemplateList};
use crate::binio::{write_u32, ByteReader};
use crate::error::{Error, Result};

pub const BANK_MAGIC: &[u8; 4] = b"OVB1";

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBank {
    dim: usize,
    k: usize,
    dropout_rate: Option<f64>,
    seed: Option<u64>,
    ids: Vec<String>,
    index: HashMap<String, usize>,
    /// `entries[q][k]` is a unit vector of length `dim`.
    entries: Vec<Vec<Vec<f32>>>,
}

fn query_seed(seed: u64, id: &str) -> u64 {
    let mut bytes = seed.to_le_bytes().to_vec();
    bytes.extend_from_slice(id.as_bytes());
    hash64(&bytes)
}

impl EmbeddingBank {
    /// Embeds each `(id, text)` and expands it into `k` dropout variants.
    /// Masks are independent per (query, variant).
    pub fn build(
        queries: &[(String, QueryText)],
        dim: usize,
        k: usize,
        rate: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut bank = Self {
            dim,
            k,
            dropout_rate: Some(rate),
            seed: Some(seed),
            ids: Vec::new(),
            index: HashMap::new(),
            entries: Vec::new(),
        };
        for (id, text) in queries {
            if bank.index.contains_key(id) {
                continue;
            }
            let base = embed(text, dim)?;
            let variants = make_variants(&base, k, rate, query_seed(seed, id))?;
            bank.push(id.clone(), variants);
        }
        Ok(bank)
    }

    /// Class-name queries rendered with the default template.
    pub fn for_classes(
        names: &[String],
        dim: usize,
        k: usize,
        rate: f64,
        seed: u64,
    ) -> Result<Self> {
        let templates = TemplateList::default();
        let queries = names
            .iter()
            .map(|n| Ok((n.clone(), render_templates(n, &templates)?.remove(0))))
            .collect::<Result<Vec<_>>>()?;
        Self::build(&queries, dim, k, rate, seed)
    }

    /// Queries whose id is already the full text (captions).
    pub fn for_texts(texts: &[String], dim: usize, k: usize, rate: f64, seed: u64) -> Result<Self> {
        let queries = texts
            .iter()
            .map(|t| Ok((t.clone(), QueryText::new(t.clone())?)))
            .collect::<Result<Vec<_>>>()?;
        Self::build(&queries, dim, k, rate, seed)
    }

    fn push(&mut self, id: String, variants: Vec<Vec<f32>>) {
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.entries.push(variants);
    }

    /// Adds the entries of `other` that are not already present.
    pub fn merge(&mut self, other: &EmbeddingBank) -> Result<()> {
        if other.dim != self.dim || other.k != self.k {
            return Err(Error::Config(format!(
                "cannot merge banks of (dim {}, K {}) and (dim {}, K {})",
                self.dim, self.k, other.dim, other.k
            )));
        }
        for (id, e) in other.ids.iter().zip(&other.entries) {
            if !self.index.contains_key(id) {
                self.push(id.clone(), e.clone());
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dropout_rate(&self) -> Option<f64> {
        self.dropout_rate
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn variants(&self, id: &str) -> Result<&[Vec<f32>]> {
        self.index
            .get(id)
            .map(|&i| self.entries[i].as_slice())
            .ok_or_else(|| Error::UnknownQuery(id.to_string()))
    }

    /// Variant 0, the unperturbed embedding used at inference.
    pub fn base(&self, id: &str) -> Result<&[f32]> {
        Ok(&self.variants(id)?[0])
    }

    /// Uniformly chosen variant; consumes one draw from `rng`.
    pub fn sample<R: Rng + ?Sized>(&self, id: &str, rng: &mut R) -> Result<&[f32]> {
        let variants = self.variants(id)?;
        Ok(&variants[rng.random_range(0..variants.len())])
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(BANK_MAGIC)?;
        for v in [self.dim, self.k, self.ids.len()] {
            write_u32(&mut w, v)?;
        }
        for (id, entry) in self.ids.iter().zip(&self.entries) {
            write_u32(&mut w, id.len())?;
            w.write_all(id.as_bytes())?;
            for x in entry.iter().flatten() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut rd = ByteReader::new(&bytes, "embedding bank");
        if rd.take(4)? != BANK_MAGIC {
            return Err(Error::Format("embedding bank magic is not OVB1".into()));
        }
        let dim = rd.u32()?;
        let k = rd.u32()?;
        let count = rd.u32()?;
        if dim == 0 || k == 0 {
            return Err(Error::Format(format!(
                "embedding bank with dim {dim}, K {k}"
            )));
        }
        let mut bank = Self {
            dim,
            k,
            dropout_rate: None,
            seed: None,
            ids: Vec::new(),
            index: HashMap::new(),
            entries: Vec::new(),
        };
        for _ in 0..count {
            let len = rd.u32()?;
            let id = rd.string(len)?;
            let flat = rd.f32s(k * dim)?;
            bank.push(id, flat.chunks(dim).map(<[f32]>::to_vec).collect());
        }
        Ok(bank)
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
