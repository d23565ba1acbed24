//! Trainable gates and the dimension-changing projections of the
//! alignment-preserving wiring.

use std::f64::consts::FRAC_PI_2;

use super::config::GateForm;
use crate::error::{Error, Result};
use crate::numeric::{Real, Tape, Tensor, Var};

/// Gate angles are kept strictly inside `(-pi/2, pi/2)` so `tan` stays finite.
pub const GATE_LIMIT: f64 = FRAC_PI_2 - 1e-3;

pub fn clamp_gate(alpha: f32) -> f32 {
    alpha.clamp(-GATE_LIMIT as f32, GATE_LIMIT as f32)
}

/// Mixes `x` (passed at init) with `y` (blocked at init) under angle `alpha`.
pub fn gate<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    y: Var,
    alpha: Var,
    form: GateForm,
) -> Result<Var> {
    if tape.shape(x) != tape.shape(y) {
        return Err(Error::Shape(format!(
            "gate inputs differ: {:?} vs {:?}",
            tape.shape(x),
            tape.shape(y)
        )));
    }
    let t = tape.tan(alpha)?;
    let yt = tape.mul_scalar(y, t)?;
    match form {
        GateForm::Subtractive => {
            let neg = tape.neg(t)?;
            let keep = tape.offset(neg, 1.0)?;
            let xk = tape.mul_scalar(x, keep)?;
            tape.add(xk, yt)
        }
        GateForm::Flamingo => tape.add(x, yt),
    }
}

/// Tape-free evaluation of [`gate`].
pub fn apply_gate(x: &Tensor, y: &Tensor, alpha: f32, form: GateForm) -> Result<Tensor> {
    let mut tape = Tape::<f32>::new();
    let xv = tape.constant(x)?;
    let yv = tape.constant(y)?;
    let a = tape.constant(&Tensor::scalar(alpha))?;
    let o = gate(&mut tape, xv, yv, a, form)?;
    Ok(tape.value(o))
}

/// `[rows, cols]` matrix with ones on the leading diagonal: the axis-aligned
/// orthogonal projection that keeps the first `min(rows, cols)` channels.
pub fn cropped_identity(rows: usize, cols: usize) -> Tensor {
    let mut t = Tensor::zeros([rows, cols]);
    for i in 0..rows.min(cols) {
        t.data_mut()[i * cols + i] = 1.0;
    }
    t
}

/// A linear channel map stored as `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub weight: Tensor,
}

impl Projection {
    /// `d_b -> fpn_dim`, initialised to the cropped identity.
    pub fn reduce(d_b: usize, fpn_dim: usize) -> Result<Self> {
        if fpn_dim > d_b {
            return Err(Error::Config(format!(
                "fpn dim {fpn_dim} exceeds backbone dim {d_b}"
            )));
        }
        Ok(Self {
            weight: cropped_identity(fpn_dim, d_b),
        })
    }

    /// `fpn_dim -> cls_dim`, initialised to the transpose of [`Self::reduce`].
    pub fn expand(fpn_dim: usize, cls_dim: usize) -> Result<Self> {
        if fpn_dim > cls_dim {
            return Err(Error::Config(format!(
                "fpn dim {fpn_dim} exceeds class dim {cls_dim}"
            )));
        }
        Ok(Self {
            weight: cropped_identity(cls_dim, fpn_dim),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn apply(&self, x: &[f32]) -> Result<Vec<f32>> {
        if x.len() != self.in_dim() {
            return Err(Error::Shape(format!(
                "projection expects {} inputs, got {}",
                self.in_dim(),
                x.len()
            )));
        }
        let w = self.weight.data();
        Ok((0..self.out_dim())
            .map(|o| {
                w[o * x.len()..(o + 1) * x.len()]
                    .iter()
                    .zip(x)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect())
    }

    /// As a `[out, in, 1, 1]` convolution kernel.
    pub fn as_kernel(&self) -> Tensor {
        self.weight
            .clone()
            .reshape([self.out_dim(), self.in_dim(), 1, 1])
            .expect("same element count")
    }
}

/// `<cls_feat, query> + bias`.
pub fn classify(cls_feat: &[f32], query: &[f32], bias: f32) -> Result<f32> {
    if cls_feat.len() != query.len() {
        return Err(Error::Shape(format!(
            "classification feature dim {} vs query dim {}",
            cls_feat.len(),
            query.len()
        )));
    }
    let dot: f64 = cls_feat
        .iter()
        .zip(query)
        .map(|(&a, &b)| f64::from(a) * f64::from(b))
        .sum();
    Ok((dot + f64::from(bias)) as f32)
}
