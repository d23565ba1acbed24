//! Learning-rate schedule and AdamW with adaptive gradient clipping.

use crate::error::{Error, Result};
use crate::net::clamp_gate;
use crate::numeric::{ParamStore, Tensor};

use super::config::TrainConfig;

/// Linear warm-up from 0, then `base`, `base / 10`, `base / 100` split at
/// the configured drop fractions.
pub fn lr_at(step: usize, total_steps: usize, base: f64, cfg: &TrainConfig) -> f64 {
    let total = total_steps.max(1);
    let warmup = ((cfg.warmup_fraction() * total as f64).ceil() as usize).max(1);
    if step < warmup {
        return base * step as f64 / warmup as f64;
    }
    let frac = step as f64 / total as f64;
    if frac < cfg.lr_drops[0] {
        base
    } else if frac < cfg.lr_drops[1] {
        base / 10.0
    } else {
        base / 100.0
    }
}

/// Multiplier applied to a gradient so `|g| / max(|w|, 1e-3)` does not exceed
/// `clip`.
pub fn agc_scale(grad_norm: f64, param_norm: f64, clip: f64) -> f64 {
    let ratio = grad_norm / param_norm.max(1e-3);
    if ratio > clip {
        clip / ratio
    } else {
        1.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip: f64,
    /// Learning-rate multipliers for parameters whose name starts with the
    /// given prefix; the first match wins.
    pub lr_scales: Vec<(String, f64)>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(weight_decay: f64, clip: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            clip,
            lr_scales: Vec::new(),
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn with_lr_scale(mut self, prefix: &str, scale: f64) -> Self {
        self.lr_scales.push((prefix.to_string(), scale));
        self
    }

    fn lr_scale(&self, name: &str) -> f64 {
        self.lr_scales
            .iter()
            .find(|(p, _)| name.starts_with(p.as_str()))
            .map_or(1.0, |(_, s)| *s)
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// One update. `grads` are index-aligned with `params`. Parameters named
    /// `*.gate` are clamped to the valid gate range afterwards.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if g.shape() != p.shape() {
                return Err(Error::Shape(format!(
                    "gradient of `{name}` has shape {:?}",
                    g.shape()
                )));
            }
            if let Some(i) = g.data().iter().position(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in `{name}` at element {i}"
                )));
            }
        }
        if self.m.is_empty() {
            self.m = params
                .tensors()
                .iter()
                .map(|t| vec![0.0; t.numel()])
                .collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let names: Vec<String> = params.names().to_vec();
        let rates: Vec<f64> = names.iter().map(|n| lr * self.lr_scale(n)).collect();
        for (i, (p, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
            let scale = agc_scale(g.norm(), p.norm(), self.clip);
            let is_gate = names[i].ends_with(".gate");
            let lr = rates[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                let gk = f64::from(g.data()[k]) * scale;
                m[k] = b1 * m[k] + (1.0 - b1) * gk;
                v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                let update = (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
                let wk = f64::from(*w);
                let mut nw = (wk - lr * (update + self.weight_decay * wk)) as f32;
                if is_gate {
                    nw = clamp_gate(nw);
                }
                *w = nw;
            }
        }
        Ok(())
    }
}
