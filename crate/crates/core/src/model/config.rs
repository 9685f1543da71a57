use alloc::format;

use serde::{Deserialize, Serialize};

use crate::data::CLASS_COUNT;
use crate::error::{Error, Result};

/// Feature extractor family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExtractorKind {
    /// Convolutional region branch plus recurrent channel branch.
    CnnLstm,
    /// Two token-attention branches (channel tokens and time tokens).
    Transformer,
}

impl ExtractorKind {
    pub fn name(self) -> &'static str {
        match self {
            ExtractorKind::CnnLstm => "CnnLstm",
            ExtractorKind::Transformer => "Transformer",
        }
    }
}

/// Two-layer 1-D convolution stack of the region branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvSpec {
    pub kernels: [usize; 2],
    pub strides: [usize; 2],
    pub channels: [usize; 2],
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self {
            kernels: [50, 10],
            strides: [10, 2],
            channels: [32, 16],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerSpec {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ffn_mult: usize,
}

impl Default for TransformerSpec {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_heads: 4,
            n_layers: 1,
            ffn_mult: 4,
        }
    }
}

/// Architecture of one peer network.
///
/// For [`ExtractorKind::CnnLstm`] the recurrent hidden width equals
/// `embed_ch_dim`, since the channel embedding is the final hidden state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PeerConfig {
    pub kind: ExtractorKind,
    /// Channels per chromophore (`n`).
    pub channels: usize,
    /// Samples per trial (`T`).
    pub samples: usize,
    pub classes: usize,
    pub embed_rg_dim: usize,
    pub embed_ch_dim: usize,
    /// Width of the contrastive projections.
    pub contrastive_dim: usize,
    pub conv: ConvSpec,
    pub lstm_layers: usize,
    pub transformer: TransformerSpec,
    pub init_seed: u64,
}

impl Default for PeerConfig {
    fn default() -> Self {
        Self {
            kind: ExtractorKind::CnnLstm,
            channels: 24,
            samples: 600,
            classes: CLASS_COUNT,
            embed_rg_dim: 64,
            embed_ch_dim: 64,
            contrastive_dim: 64,
            conv: ConvSpec::default(),
            lstm_layers: 2,
            transformer: TransformerSpec::default(),
            init_seed: 0,
        }
    }
}

impl PeerConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.init_seed = seed;
        self
    }

    /// Output lengths of the two convolutions.
    pub fn conv_lengths(&self) -> Result<[usize; 2]> {
        let mut len = self.samples;
        let mut out = [0; 2];
        for (i, slot) in out.iter_mut().enumerate() {
            let (k, s) = (self.conv.kernels[i], self.conv.strides[i]);
            if k == 0 || s == 0 {
                return Err(Error::Config(format!("conv layer {}: kernel and stride must be positive", i + 1)));
            }
            if k > len {
                return Err(Error::Config(format!(
                    "conv layer {}: kernel {} larger than input length {}",
                    i + 1,
                    k,
                    len
                )));
            }
            len = (len - k) / s + 1;
            *slot = len;
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("channels", self.channels),
            ("samples", self.samples),
            ("classes", self.classes),
            ("embed_rg_dim", self.embed_rg_dim),
            ("embed_ch_dim", self.embed_ch_dim),
            ("contrastive_dim", self.contrastive_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{} must be positive", name)));
        }
        match self.kind {
            ExtractorKind::CnnLstm => {
                if self.conv.channels.contains(&0) {
                    return Err(Error::Config("conv channels must be positive".into()));
                }
                if self.lstm_layers == 0 {
                    return Err(Error::Config("lstm_layers must be positive".into()));
                }
                self.conv_lengths()?;
            }
            ExtractorKind::Transformer => {
                let t = &self.transformer;
                if t.d_model == 0 || t.n_heads == 0 || t.n_layers == 0 || t.ffn_mult == 0 {
                    return Err(Error::Config("transformer dims must be positive".into()));
                }
                if !t.d_model.is_multiple_of(t.n_heads) {
                    return Err(Error::Config(format!(
                        "d_model {} not divisible by n_heads {}",
                        t.d_model, t.n_heads
                    )));
                }
            }
        }
        Ok(())
    }
}
