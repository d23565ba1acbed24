//! Deterministic stand-in for a frozen text encoder, plus dropout variants.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Maximum number of redraws when a dropout mask zeroes the whole vector.
pub const MAX_MASK_RETRIES: u64 = 8;

/// Text to be embedded; `raw` is the fully rendered string.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueryText {
    raw: String,
    template_id: Option<usize>,
}

impl QueryText {
    pub fn new(raw: impl Into<String>) -> Result<Self> {
        let raw = raw.into();
        if raw.trim().is_empty() {
            return Err(Error::Input("query text is empty".into()));
        }
        Ok(Self {
            raw,
            template_id: None,
        })
    }

    pub fn with_template(mut self, id: usize) -> Self {
        self.template_id = Some(id);
        self
    }

    pub fn raw(&self) -> &str {
        &self.raw
    }

    pub fn template_id(&self) -> Option<usize> {
        self.template_id
    }
}

/// First 8 bytes of SHA-256, little-endian.
pub fn hash64(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

fn normalize(v: &[f64]) -> Option<Vec<f32>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    Some(v.iter().map(|x| (x / norm) as f32).collect())
}

/// Unit vector determined by the bytes of the text: a ChaCha stream seeded
/// with [`hash64`] supplies `dim` standard normals, then L2 normalization.
pub fn embed(text: &QueryText, dim: usize) -> Result<Vec<f32>> {
    if dim < 8 {
        return Err(Error::Input(format!("embedding dim {dim} < 8")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hash64(text.raw.as_bytes()));
    let draws: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    normalize(&draws).ok_or_else(|| Error::Numeric("degenerate embedding draw".into()))
}

/// `K` unit vectors: index 0 is `base`, index `k` renormalizes
/// `base * mask_k / (1 - rate)` with `mask_k ~ Bernoulli(1 - rate)` drawn from
/// ChaCha stream `(k << 8) | retry` under `seed`.
pub fn make_variants(base: &[f32], k: usize, rate: f64, seed: u64) -> Result<Vec<Vec<f32>>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Input(format!("dropout rate {rate} outside [0, 1)")));
    }
    if k == 0 {
        return Err(Error::Input("variant count must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(k);
    out.push(base.to_vec());
    let keep_scale = 1.0 / (1.0 - rate);
    for idx in 1..k as u64 {
        let mut variant = None;
        for retry in 0..=MAX_MASK_RETRIES {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((idx << 8) | retry);
            let masked: Vec<f64> = base
                .iter()
                .map(|&b| {
                    let u: f64 = rng.random();
                    if u < rate {
                        0.0
                    } else {
                        f64::from(b) * keep_scale
                    }
                })
                .collect();
            if let Some(v) = normalize(&masked) {
                variant = Some(v);
                break;
            }
        }
        out.push(variant.ok_or_else(|| {
            Error::Numeric(format!(
                "dropout mask for variant {idx} zeroed the embedding {} times",
                MAX_MASK_RETRIES + 1
            ))
        })?);
    }
    Ok(out)
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum();
    let na: f64 = a.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}
