use serde::{Deserialize, Serialize};

use super::Activation;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    DownConv,
    UpConv,
    Residual,
    Activation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    None,
    Instance,
}

/// One row of a network layer table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub filter_size: usize,
    pub out_channels: usize,
    pub norm: Norm,
    pub activation: Activation,
    pub stride: usize,
    pub shared: bool,
}

impl LayerSpec {
    /// Zero padding that keeps a stride-1 map the same size.
    pub fn padding(&self) -> usize {
        self.filter_size / 2
    }
}
