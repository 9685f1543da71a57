//! Parameter manifest derived from a [`PeerConfig`].
//!
//! The layout fixes parameter names, shapes, order and initialisation. Head
//! parameters (contrastive projections) always come last, so a head-stripped
//! parameter list is a prefix of the full one.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::config::{ExtractorKind, PeerConfig};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
    Ones,
    Zeros,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    /// Contrastive projection parameter, dropped for deployment.
    pub head: bool,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LinearIx {
    pub w: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvIx {
    pub w: usize,
    pub b: usize,
    pub stride: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LstmIx {
    pub w_ih: usize,
    pub w_hh: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct BlockIx {
    pub q: LinearIx,
    pub k: LinearIx,
    pub v: LinearIx,
    pub o: LinearIx,
    pub ln1: (usize, usize),
    pub ff1: LinearIx,
    pub ff2: LinearIx,
    pub ln2: (usize, usize),
}

#[derive(Clone, Debug)]
pub(crate) struct BranchIx {
    pub tokens: usize,
    pub proj: LinearIx,
    pub blocks: Vec<BlockIx>,
    pub out: LinearIx,
}

#[derive(Clone, Debug)]
pub(crate) enum ExtractorIx {
    CnnLstm {
        conv1: ConvIx,
        conv2: ConvIx,
        fc: LinearIx,
        lstm: Vec<LstmIx>,
    },
    Transformer {
        rg: BranchIx,
        ch: BranchIx,
        heads: usize,
    },
}

#[derive(Clone, Debug)]
pub struct Layout {
    pub specs: Vec<ParamSpec>,
    pub(crate) extractor: ExtractorIx,
    pub(crate) classifier: LinearIx,
    pub(crate) proj_rg: LinearIx,
    pub(crate) proj_ch: LinearIx,
}

struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init, head: bool) -> usize {
        self.specs.push(ParamSpec { name, shape, init, head });
        self.specs.len() - 1
    }

    fn linear(&mut self, name: &str, inp: usize, out: usize, head: bool) -> LinearIx {
        let bound = 1.0 / libm::sqrt(inp as f64);
        LinearIx {
            w: self.push(format!("{}.weight", name), vec![out, inp], Init::Uniform(bound), head),
            b: self.push(format!("{}.bias", name), vec![out], Init::Uniform(bound), head),
        }
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> ConvIx {
        let bound = 1.0 / libm::sqrt((cin * k) as f64);
        ConvIx {
            w: self.push(format!("{}.weight", name), vec![cout, cin, k], Init::Uniform(bound), false),
            b: self.push(format!("{}.bias", name), vec![cout], Init::Uniform(bound), false),
            stride,
        }
    }

    fn lstm(&mut self, name: &str, inp: usize, hidden: usize) -> LstmIx {
        let bound = 1.0 / libm::sqrt(hidden as f64);
        LstmIx {
            w_ih: self.push(format!("{}.weight_ih", name), vec![4 * hidden, inp], Init::Uniform(bound), false),
            w_hh: self.push(format!("{}.weight_hh", name), vec![4 * hidden, hidden], Init::Uniform(bound), false),
            b: self.push(format!("{}.bias", name), vec![4 * hidden], Init::Uniform(bound), false),
        }
    }

    fn layer_norm(&mut self, name: &str, d: usize) -> (usize, usize) {
        (
            self.push(format!("{}.gain", name), vec![d], Init::Ones, false),
            self.push(format!("{}.bias", name), vec![d], Init::Zeros, false),
        )
    }

    fn branch(&mut self, name: &str, tokens: usize, width: usize, cfg: &PeerConfig, embed: usize) -> BranchIx {
        let t = cfg.transformer;
        let d = t.d_model;
        let proj = self.linear(&format!("{}.token_proj", name), width, d, false);
        let blocks = (0..t.n_layers)
            .map(|l| {
                let p = format!("{}.block{}", name, l);
                BlockIx {
                    q: self.linear(&format!("{}.attn_q", p), d, d, false),
                    k: self.linear(&format!("{}.attn_k", p), d, d, false),
                    v: self.linear(&format!("{}.attn_v", p), d, d, false),
                    o: self.linear(&format!("{}.attn_out", p), d, d, false),
                    ln1: self.layer_norm(&format!("{}.norm1", p), d),
                    ff1: self.linear(&format!("{}.ffn1", p), d, t.ffn_mult * d, false),
                    ff2: self.linear(&format!("{}.ffn2", p), t.ffn_mult * d, d, false),
                    ln2: self.layer_norm(&format!("{}.norm2", p), d),
                }
            })
            .collect();
        let out = self.linear(&format!("{}.embed", name), d, embed, false);
        BranchIx { tokens, proj, blocks, out }
    }
}

impl Layout {
    pub fn new(cfg: &PeerConfig) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder { specs: Vec::new() };
        let (n, t) = (cfg.channels, cfg.samples);
        let extractor = match cfg.kind {
            ExtractorKind::CnnLstm => {
                let lens = cfg.conv_lengths()?;
                let c = cfg.conv;
                let conv1 = b.conv("region.conv1", 2 * n, c.channels[0], c.kernels[0], c.strides[0]);
                let conv2 = b.conv("region.conv2", c.channels[0], c.channels[1], c.kernels[1], c.strides[1]);
                let fc = b.linear("region.fc", c.channels[1] * lens[1], cfg.embed_rg_dim, false);
                let h = cfg.embed_ch_dim;
                let lstm = (0..cfg.lstm_layers)
                    .map(|l| b.lstm(&format!("channel.lstm{}", l), if l == 0 { 2 * n } else { h }, h))
                    .collect();
                ExtractorIx::CnnLstm { conv1, conv2, fc, lstm }
            }
            ExtractorKind::Transformer => ExtractorIx::Transformer {
                rg: b.branch("region", n, 2 * t, cfg, cfg.embed_rg_dim),
                ch: b.branch("channel", t, 2 * n, cfg, cfg.embed_ch_dim),
                heads: cfg.transformer.n_heads,
            },
        };
        let classifier = b.linear("classifier", cfg.embed_rg_dim + cfg.embed_ch_dim, cfg.classes, false);
        let proj_rg = b.linear("proj_rg", cfg.embed_rg_dim, cfg.contrastive_dim, true);
        let proj_ch = b.linear("proj_ch", cfg.embed_ch_dim, cfg.contrastive_dim, true);
        Ok(Self {
            specs: b.specs,
            extractor,
            classifier,
            proj_rg,
            proj_ch,
        })
    }

    /// Number of parameters kept for deployment (heads excluded).
    pub fn inference_len(&self) -> usize {
        self.specs.iter().take_while(|s| !s.head).count()
    }
}
