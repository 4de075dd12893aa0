use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Kind of a network layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerKind {
    Affine,
    BatchNorm,
    Relu,
    Sigmoid,
    Dropout { rate: f64 },
}

/// One layer of a [`Network`](super::Network): its kind and widths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl LayerSpec {
    pub fn affine(input_dim: usize, output_dim: usize) -> Self {
        Self {
            kind: LayerKind::Affine,
            input_dim,
            output_dim,
        }
    }

    fn same(kind: LayerKind, dim: usize) -> Self {
        Self {
            kind,
            input_dim: dim,
            output_dim: dim,
        }
    }

    pub fn batch_norm(dim: usize) -> Self {
        Self::same(LayerKind::BatchNorm, dim)
    }

    pub fn relu(dim: usize) -> Self {
        Self::same(LayerKind::Relu, dim)
    }

    pub fn sigmoid(dim: usize) -> Self {
        Self::same(LayerKind::Sigmoid, dim)
    }

    pub fn dropout(dim: usize, rate: f64) -> Self {
        Self::same(LayerKind::Dropout { rate }, dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config(format!("layer `{self}` has a zero width")));
        }
        match self.kind {
            LayerKind::Affine => Ok(()),
            LayerKind::Dropout { rate } if !(0.0..1.0).contains(&rate) => {
                Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")))
            }
            _ if self.input_dim != self.output_dim => Err(Error::Config(format!(
                "layer `{self}` must preserve its width"
            ))),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            LayerKind::Affine => f.write_str("affine")?,
            LayerKind::BatchNorm => f.write_str("batch_norm")?,
            LayerKind::Relu => f.write_str("relu")?,
            LayerKind::Sigmoid => f.write_str("sigmoid")?,
            LayerKind::Dropout { rate } => write!(f, "dropout:{rate}")?,
        }
        write!(f, " {} {}", self.input_dim, self.output_dim)
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Checkpoint(format!("bad layer spec `{s}`"));
        let mut parts = s.split_whitespace();
        let kind = match parts.next().ok_or_else(bad)? {
            "affine" => LayerKind::Affine,
            "batch_norm" => LayerKind::BatchNorm,
            "relu" => LayerKind::Relu,
            "sigmoid" => LayerKind::Sigmoid,
            other => {
                let rate = other
                    .strip_prefix("dropout:")
                    .and_then(|r| r.parse().ok())
                    .ok_or_else(bad)?;
                LayerKind::Dropout { rate }
            }
        };
        let mut dim = || -> Result<usize> { parts.next().and_then(|d| d.parse().ok()).ok_or_else(bad) };
        let spec = Self {
            kind,
            input_dim: dim()?,
            output_dim: dim()?,
        };
        spec.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(spec)
    }
}

/// Feature extractor stack: `hidden` blocks of affine, batch-norm, relu,
/// then a linear affine projection to `embed_dim`.
pub fn branch_specs(input_dim: usize, hidden: &[usize], embed_dim: usize) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    let mut width = input_dim;
    for &h in hidden {
        specs.extend([LayerSpec::affine(width, h), LayerSpec::batch_norm(h), LayerSpec::relu(h)]);
        width = h;
    }
    specs.push(LayerSpec::affine(width, embed_dim));
    specs
}

/// Regression head: `hidden` blocks of affine, batch-norm, relu and (when
/// `dropout > 0`) dropout, then an affine output squashed by a sigmoid.
pub fn predictor_specs(input_dim: usize, hidden: &[usize], output_dim: usize, dropout: f64) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    let mut width = input_dim;
    for &h in hidden {
        specs.extend([LayerSpec::affine(width, h), LayerSpec::batch_norm(h), LayerSpec::relu(h)]);
        if dropout > 0.0 {
            specs.push(LayerSpec::dropout(h, dropout));
        }
        width = h;
    }
    specs.push(LayerSpec::affine(width, output_dim));
    specs.push(LayerSpec::sigmoid(output_dim));
    specs
}
