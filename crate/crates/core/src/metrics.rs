//! Accuracy aggregation, parameter/compute accounting and embedding rows.
//!
//! Compute is counted per sample and per forward pass: one MAC per weight
//! application (attention products included), 1 MAC = 2 FLOPs, and every
//! nonlinearity or normalisation output element adds 1 FLOP.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{count_params, ExtractorKind, Layout, PeerConfig, PeerInput, PeerNet, Phase};
use crate::real::Real;
use crate::trainer::FoldResult;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComputeCost {
    pub macs: u64,
    /// Nonlinearity and normalisation outputs.
    pub elementwise: u64,
}

impl ComputeCost {
    pub fn flops(&self) -> u64 {
        2 * self.macs + self.elementwise
    }
}

/// Analytic per-sample forward cost of one peer, with or without the
/// projection heads.
pub fn forward_cost(cfg: &PeerConfig, heads: bool) -> Result<ComputeCost> {
    cfg.validate()?;
    let (n, t) = (cfg.channels as u64, cfg.samples as u64);
    let (erg, ech) = (cfg.embed_rg_dim as u64, cfg.embed_ch_dim as u64);
    let mut c = ComputeCost::default();
    match cfg.kind {
        ExtractorKind::CnnLstm => {
            let lens = cfg.conv_lengths()?;
            let (l1, l2) = (lens[0] as u64, lens[1] as u64);
            let conv = cfg.conv;
            let (c1, c2) = (conv.channels[0] as u64, conv.channels[1] as u64);
            c.macs += c1 * 2 * n * conv.kernels[0] as u64 * l1;
            c.macs += c2 * c1 * conv.kernels[1] as u64 * l2;
            c.macs += c2 * l2 * erg;
            c.elementwise += c1 * l1 + c2 * l2;
            let h = ech;
            for l in 0..cfg.lstm_layers {
                let inp = if l == 0 { 2 * n } else { h };
                c.macs += t * (inp + h) * 4 * h;
                c.elementwise += t * 5 * h;
            }
        }
        ExtractorKind::Transformer => {
            let tr = cfg.transformer;
            let (d, heads_n, f) = (tr.d_model as u64, tr.n_heads as u64, (tr.ffn_mult * tr.d_model) as u64);
            for (tokens, width, embed) in [(n, 2 * t, erg), (t, 2 * n, ech)] {
                c.macs += tokens * width * d;
                for _ in 0..tr.n_layers {
                    c.macs += 4 * tokens * d * d + 2 * tokens * tokens * d + 2 * tokens * d * f;
                    c.elementwise += heads_n * tokens * tokens + 2 * tokens * d + tokens * f;
                }
                c.macs += d * embed;
            }
        }
    }
    c.macs += (erg + ech) * cfg.classes as u64;
    if heads {
        let d = cfg.contrastive_dim as u64;
        c.macs += (erg + ech) * d;
        c.elementwise += 2 * d;
    }
    Ok(c)
}

/// Training-time system (M peers with heads) against the deployed peer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub peers: usize,
    pub train_params: u64,
    pub infer_params: u64,
    pub macs_train: u64,
    pub macs_infer: u64,
    pub flops_train: u64,
    pub flops_infer: u64,
    pub compression_ratio: f64,
}

/// `1 - infer / train`.
pub fn compression_ratio(train_params: f64, infer_params: f64) -> f64 {
    if train_params <= 0.0 {
        return 0.0;
    }
    1.0 - infer_params / train_params
}

impl CompressionReport {
    /// Report for externally supplied parameter counts; compute fields are 0.
    pub fn from_counts(train_params: u64, infer_params: u64) -> Self {
        Self {
            peers: 0,
            train_params,
            infer_params,
            macs_train: 0,
            macs_infer: 0,
            flops_train: 0,
            flops_infer: 0,
            compression_ratio: compression_ratio(train_params as f64, infer_params as f64),
        }
    }
}

/// Accounting for `peers` copies of `cfg` trained with (or, if
/// `train_heads` is false, without) projection heads.
pub fn compression_report(cfg: &PeerConfig, peers: usize, train_heads: bool) -> Result<CompressionReport> {
    let layout = Layout::new(cfg)?;
    let per_peer = count_params(&layout, if train_heads { Phase::Training } else { Phase::Inference }) as u64;
    let infer = count_params(&layout, Phase::Inference) as u64;
    let train_cost = forward_cost(cfg, train_heads)?;
    let infer_cost = forward_cost(cfg, false)?;
    let m = peers as u64;
    let train = m * per_peer;
    Ok(CompressionReport {
        peers,
        train_params: train,
        infer_params: infer,
        macs_train: m * train_cost.macs,
        macs_infer: infer_cost.macs,
        flops_train: m * train_cost.flops(),
        flops_infer: infer_cost.flops(),
        compression_ratio: compression_ratio(train as f64, infer as f64),
    })
}

/// Per-fold selected accuracies and their mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub per_fold: Vec<f64>,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl FoldSummary {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("no fold results to aggregate"));
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        Ok(Self {
            per_fold: values.to_vec(),
            mean,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

pub fn aggregate_folds(results: &[FoldResult]) -> Result<FoldSummary> {
    let values: Vec<f64> = results.iter().map(|r| r.selected_accuracy).collect();
    FoldSummary::from_values(&values)
}

/// Pre-projection embeddings of one record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub subject_id: String,
    pub label: usize,
    pub fold: usize,
    pub peer: usize,
    pub e_rg: Vec<f32>,
    pub e_ch: Vec<f32>,
}

/// One row per record of `data`, in record order.
pub fn embedding_rows<T: Real>(
    peer: &PeerNet<T>,
    peer_index: usize,
    fold: usize,
    data: &Dataset,
    batch: usize,
) -> Result<Vec<EmbeddingRow>> {
    if data.is_empty() {
        return Err(Error::Empty("embedding subset"));
    }
    let mut rows = Vec::with_capacity(data.len());
    for chunk in data.records().chunks(batch.max(1)) {
        let signals: Vec<_> = chunk.iter().map(|r| &r.signal).collect();
        let (erg, ech) = peer.embeddings(&PeerInput::from_signals(peer.config().kind, &signals)?)?;
        for (i, r) in chunk.iter().enumerate() {
            rows.push(EmbeddingRow {
                subject_id: r.subject_id.clone(),
                label: r.label.index(),
                fold,
                peer: peer_index,
                e_rg: erg.row(i).iter().map(|v| v.as_f64() as f32).collect(),
                e_ch: ech.row(i).iter().map(|v| v.as_f64() as f32).collect(),
            });
        }
    }
    Ok(rows)
}
