use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GateForm {
    /// `x (1 - tan a) + y tan a`
    #[default]
    Subtractive,
    /// `x + y tan a`
    Flamingo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Output channels of each stride-2 stage; the last entry is the final
    /// feature dimension `d_b`.
    pub channels: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 64],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FpnConfig {
    pub dim: usize,
    pub levels: usize,
}

impl Default for FpnConfig {
    fn default() -> Self {
        Self { dim: 32, levels: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub depth: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { depth: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ApaConfig {
    pub enabled: bool,
    pub gate_form: GateForm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiasConfig {
    pub prior_p: f64,
}

impl Default for BiasConfig {
    fn default() -> Self {
        Self { prior_p: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub backbone: BackboneConfig,
    pub fpn: FpnConfig,
    pub head: HeadConfig,
    pub apa: ApaConfig,
    pub bias: BiasConfig,
    /// Classification feature dimension; equals the text embedding dim.
    pub cls_dim: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            fpn: FpnConfig::default(),
            head: HeadConfig::default(),
            apa: ApaConfig {
                enabled: true,
                gate_form: GateForm::Subtractive,
            },
            bias: BiasConfig::default(),
            cls_dim: 64,
        }
    }
}

impl DetectorConfig {
    pub fn final_dim(&self) -> usize {
        *self.backbone.channels.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.backbone.channels;
        if c.is_empty() || c.contains(&0) {
            return Err(Error::Config(format!(
                "backbone.channels {c:?} must be non-empty and positive"
            )));
        }
        if self.fpn.levels != c.len() {
            return Err(Error::Config(format!(
                "fpn.levels ({}) must equal the number of backbone stages ({})",
                self.fpn.levels,
                c.len()
            )));
        }
        if self.fpn.dim == 0 || self.fpn.dim > self.final_dim() {
            return Err(Error::Config(format!(
                "fpn.dim ({}) must be in 1..={} (final backbone dim)",
                self.fpn.dim,
                self.final_dim()
            )));
        }
        if self.fpn.dim > self.cls_dim {
            return Err(Error::Config(format!(
                "fpn.dim ({}) exceeds cls_dim ({})",
                self.fpn.dim, self.cls_dim
            )));
        }
        if !(self.bias.prior_p > 0.0 && self.bias.prior_p < 1.0) {
            return Err(Error::Config(format!(
                "bias.prior_p {} outside (0, 1)",
                self.bias.prior_p
            )));
        }
        Ok(())
    }

    /// Stride of pyramid level `i` relative to the input image.
    pub fn level_stride(&self, level: usize) -> usize {
        4 << level
    }

    /// Input sides must be multiples of this.
    pub fn size_divisor(&self) -> usize {
        self.level_stride(self.fpn.levels - 1)
    }
}

/// `-ln((1 - p) / p)`, the focal-loss prior initialisation.
pub fn prior_bias(p: f64) -> f64 {
    -((1.0 - p) / p).ln()
}
