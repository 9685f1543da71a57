//! Training objectives: label-smoothed cross-entropy, distillation from
//! temperature-softened labels, and the cross-network inter-subject
//! contrastive loss at region and channel level.
//!
//! Every loss returns its value together with the gradient with respect to
//! its direct inputs (logits or normalised embeddings); the trainer seeds the
//! peers' tapes with those gradients.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::softmax_in_place;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Floor applied to predicted probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;
/// Tolerance on the unit norm of contrastive embeddings.
pub const UNIT_NORM_TOL: f64 = 1e-4;

/// Coefficients of the composite objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Distillation temperature `T`; the KL term is weighted by `T^2`.
    pub temperature: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Weight of the region-level contrastive term.
    pub alpha: f64,
    /// Weight of the channel-level contrastive term.
    pub beta: f64,
    pub label_smoothing: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            temperature: 2.0,
            tau: 0.1,
            alpha: 0.2,
            beta: 0.2,
            label_smoothing: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = self.temperature.is_finite()
            && self.temperature > 0.0
            && self.tau.is_finite()
            && self.tau > 0.0
            && self.alpha.is_finite()
            && self.alpha >= 0.0
            && self.beta.is_finite()
            && self.beta >= 0.0
            && (0.0..1.0).contains(&self.label_smoothing);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid loss weights {:?}", self)))
        }
    }
}

/// Which terms of the composite objective contribute to the gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossTerms {
    pub kl: bool,
    pub cr_rg: bool,
    pub cr_ch: bool,
}

impl Default for LossTerms {
    fn default() -> Self {
        Self::FULL
    }
}

impl LossTerms {
    pub const FULL: Self = Self {
        kl: true,
        cr_rg: true,
        cr_ch: true,
    };
    /// Independent cross-entropy learners.
    pub const BASELINE: Self = Self {
        kl: false,
        cr_rg: false,
        cr_ch: false,
    };
    pub const NO_KL: Self = Self {
        kl: false,
        cr_rg: true,
        cr_ch: true,
    };
    /// Region-level representations only.
    pub const NO_KL_NO_CR_CH: Self = Self {
        kl: false,
        cr_rg: true,
        cr_ch: false,
    };
    /// Channel-level representations only.
    pub const NO_KL_NO_CR_RG: Self = Self {
        kl: false,
        cr_rg: false,
        cr_ch: true,
    };

    /// Parses the ablation names used on the command line.
    pub fn from_ablation(name: &str) -> Option<Self> {
        match name {
            "none" | "full" => Some(Self::FULL),
            "baseline" => Some(Self::BASELINE),
            "no-kl" => Some(Self::NO_KL),
            "no-kl-cr-ch" => Some(Self::NO_KL_NO_CR_CH),
            "no-kl-cr-rg" => Some(Self::NO_KL_NO_CR_RG),
            _ => None,
        }
    }

    pub fn ablation_name(&self) -> &'static str {
        match (self.kl, self.cr_rg, self.cr_ch) {
            (true, true, true) => "full",
            (false, false, false) => "baseline",
            (false, true, true) => "no-kl",
            (false, true, false) => "no-kl-cr-ch",
            (false, false, true) => "no-kl-cr-rg",
            _ => "custom",
        }
    }
}

fn check_finite<T: Real>(x: &Tensor<T>, what: &str) -> Result<()> {
    if x.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            layer: format!("{} (loss input)", what),
        })
    }
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), rows)));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label: l, classes });
    }
    Ok(())
}

/// Row-wise softmax computed from max-shifted exponentials.
pub fn softmax_prob<T: Real>(z: &Tensor<T>) -> Result<Tensor<T>> {
    soften_logits(z, 1.0)
}

/// Row-wise softmax of `z / temperature`.
pub fn soften_logits<T: Real>(z: &Tensor<T>, temperature: f64) -> Result<Tensor<T>> {
    check_finite(z, "logits")?;
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::Config(format!("temperature {} must be positive", temperature)));
    }
    let inv = T::of(1.0 / temperature);
    let mut out: Vec<T> = z.data().iter().map(|v| *v * inv).collect();
    for row in out.chunks_mut(z.last_dim()) {
        softmax_in_place(row);
    }
    Tensor::from_vec(z.shape(), out)
}

/// Softmax of the one-hot label vector divided by `temperature`.
pub fn soften_label<T: Real>(label: usize, classes: usize, temperature: f64) -> Vec<T> {
    let mut row: Vec<T> = (0..classes)
        .map(|c| T::of(if c == label { 1.0 / temperature } else { 0.0 }))
        .collect();
    softmax_in_place(&mut row);
    row
}

pub fn soft_labels<T: Real>(labels: &[usize], classes: usize, temperature: f64) -> Result<Tensor<T>> {
    check_labels(labels, labels.len(), classes)?;
    let data = labels.iter().flat_map(|&l| soften_label::<T>(l, classes, temperature)).collect();
    Tensor::from_vec(&[labels.len(), classes], data)
}

/// Per-peer losses and their sum over peers.
#[derive(Clone, Debug, PartialEq)]
pub struct PeerLosses<T> {
    pub per_peer: Vec<T>,
    pub total: T,
}

impl<T: Real> PeerLosses<T> {
    fn from_vec(per_peer: Vec<T>) -> Self {
        let total = per_peer.iter().copied().sum();
        Self { per_peer, total }
    }
}

/// Batch-mean cross-entropy of one peer against label-smoothed targets,
/// with the gradient with respect to the logits.
pub fn ce_with_grad<T: Real>(z: &Tensor<T>, labels: &[usize], smoothing: f64) -> Result<(T, Tensor<T>)> {
    check_finite(z, "logits")?;
    let (n, c) = (z.rows(), z.last_dim());
    check_labels(labels, n, c)?;
    if n == 0 {
        return Err(Error::Empty("cross-entropy batch"));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Config(format!("label smoothing {} outside [0, 1)", smoothing)));
    }
    let inv_n = T::of(1.0 / n as f64);
    let off = T::of(smoothing / c as f64);
    let on = T::of(1.0 - smoothing) + off;
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(n * c);
    for (i, &y) in labels.iter().enumerate() {
        let row = z.row(i);
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|v| (*v - m).exp()).sum::<T>().ln() + m;
        for (k, v) in row.iter().enumerate() {
            let target = if k == y { on } else { off };
            let logp = *v - lse;
            loss = loss - target * logp;
            grad.push((logp.exp() - target) * inv_n);
        }
    }
    Ok((loss * inv_n, Tensor::from_vec(&[n, c], grad)?))
}

/// Cross-entropy for every peer; `total` is the sum over peers.
pub fn ce_loss<T: Real>(z_per_peer: &[&Tensor<T>], labels: &[usize], smoothing: f64) -> Result<PeerLosses<T>> {
    let per = z_per_peer
        .iter()
        .map(|z| ce_with_grad(z, labels, smoothing).map(|(l, _)| l))
        .collect::<Result<Vec<_>>>()?;
    Ok(PeerLosses::from_vec(per))
}

fn check_distribution<T: Real>(p: &Tensor<T>, what: &str) -> Result<()> {
    check_finite(p, what)?;
    for (i, row) in p.data().chunks(p.last_dim()).enumerate() {
        let s: f64 = row.iter().map(|v| v.as_f64()).sum();
        if row.iter().any(|v| *v < T::zero()) || (s - 1.0).abs() > 1e-4 {
            return Err(Error::Validation(format!("{} row {} is not a distribution (sum {})", what, i, s)));
        }
    }
    Ok(())
}

fn kl_value<T: Real>(q: &Tensor<T>, p: &Tensor<T>) -> T {
    let floor = T::of(PROB_FLOOR);
    let mut s = T::zero();
    for (qv, pv) in q.data().iter().zip(p.data()) {
        if *qv > T::zero() {
            s = s + *qv * (qv.ln() - pv.max(floor).ln());
        }
    }
    s / T::of(q.rows() as f64)
}

/// Batch-mean `KL(soft_label || prediction)` for every peer.
pub fn kl_loss<T: Real>(soft_labels: &Tensor<T>, soft_preds_per_peer: &[&Tensor<T>]) -> Result<PeerLosses<T>> {
    check_distribution(soft_labels, "soft labels")?;
    if soft_labels.rows() == 0 {
        return Err(Error::Empty("distillation batch"));
    }
    let per = soft_preds_per_peer
        .iter()
        .map(|p| {
            if p.shape() != soft_labels.shape() {
                return Err(Error::Shape(format!(
                    "prediction {:?} vs labels {:?}",
                    p.shape(),
                    soft_labels.shape()
                )));
            }
            check_distribution(p, "soft predictions")?;
            Ok(kl_value(soft_labels, p))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PeerLosses::from_vec(per))
}

/// Distillation loss of one peer from its raw logits, with the gradient with
/// respect to those logits (chain rule through the tempered softmax and the
/// probability floor).
pub fn kl_with_grad<T: Real>(soft_labels: &Tensor<T>, z: &Tensor<T>, temperature: f64) -> Result<(T, Tensor<T>)> {
    if z.shape() != soft_labels.shape() {
        return Err(Error::Shape(format!("logits {:?} vs labels {:?}", z.shape(), soft_labels.shape())));
    }
    let p = soften_logits(z, temperature)?;
    let value = kl_value(soft_labels, &p);
    let (n, c) = (z.rows(), z.last_dim());
    let floor = T::of(PROB_FLOOR);
    let scale = T::of(1.0 / (n as f64 * temperature));
    let mut grad = vec![T::zero(); n * c];
    let mut dp = vec![T::zero(); c];
    for i in 0..n {
        let (q, pr) = (soft_labels.row(i), p.row(i));
        for k in 0..c {
            dp[k] = if q[k] > T::zero() && pr[k] > floor {
                -q[k] / pr[k]
            } else {
                T::zero()
            };
        }
        let dot: T = dp.iter().zip(pr).map(|(a, b)| *a * *b).sum();
        for k in 0..c {
            grad[i * c + k] = pr[k] * (dp[k] - dot) * scale;
        }
    }
    Ok((value, Tensor::from_vec(&[n, c], grad)?))
}

fn check_unit_rows<T: Real>(v: &Tensor<T>) -> Result<()> {
    check_finite(v, "contrastive embedding")?;
    for (row, r) in v.data().chunks(v.last_dim()).enumerate() {
        let norm = libm::sqrt(r.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>());
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::NotNormalized { row, norm });
        }
    }
    Ok(())
}

/// Class counts of a contrastive batch; every present class needs a second
/// member so that some anchor has a positive besides itself.
fn positive_counts(labels: &[usize]) -> Result<Vec<usize>> {
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; classes];
    for &l in labels {
        counts[l] += 1;
    }
    if let Some((class, &count)) = counts.iter().enumerate().find(|(_, &c)| c == 1) {
        return Err(Error::InsufficientPositives { class, count });
    }
    Ok(counts)
}

/// Directed contrastive loss from anchors `v_a` to contrast set `v_b`, with
/// gradients for both sides.
///
/// For anchor `i` with positives `j` (same label, `j = i` included) and
/// negatives `k`, each positive contributes
/// `-log(e^{s_ij} / (e^{s_ij} + sum_k e^{s_ik})) / N_{y_i}` where
/// `s = v_a v_b^T / tau`. The sum runs over anchors without a `1/N` factor.
pub fn isicr_pair_with_grad<T: Real>(v_a: &Tensor<T>, v_b: &Tensor<T>, labels: &[usize], tau: f64) -> Result<(T, Tensor<T>, Tensor<T>)> {
    if v_a.shape() != v_b.shape() || v_a.shape().len() != 2 {
        return Err(Error::Shape(format!("contrastive pair {:?} vs {:?}", v_a.shape(), v_b.shape())));
    }
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::Config(format!("tau {} must be positive", tau)));
    }
    let (n, d) = (v_a.rows(), v_a.last_dim());
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {} embeddings", labels.len(), n)));
    }
    if n == 0 {
        return Err(Error::Empty("contrastive batch"));
    }
    check_unit_rows(v_a)?;
    check_unit_rows(v_b)?;
    let counts = positive_counts(labels)?;

    let inv_tau = T::of(1.0 / tau);
    let mut s = vec![T::zero(); n * n];
    crate::real::gemm(n, d, n, v_a.data(), false, v_b.data(), true, &mut s, false);
    s.iter_mut().for_each(|x| *x = *x * inv_tau);

    let mut loss = T::zero();
    // gradient of the loss with respect to the scaled similarities
    let mut gs = vec![T::zero(); n * n];
    for i in 0..n {
        let row = &s[i * n..(i + 1) * n];
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let yi = labels[i];
        let neg: T = row.iter().zip(labels).filter(|(_, &y)| y != yi).map(|(x, _)| (*x - m).exp()).sum();
        let w = T::one() / T::of(counts[yi] as f64);
        let grow = &mut gs[i * n..(i + 1) * n];
        let mut neg_coeff = T::zero();
        for j in 0..n {
            if labels[j] != yi {
                continue;
            }
            let pos = (row[j] - m).exp();
            let denom = pos + neg;
            loss = loss + w * (denom.ln() + m - row[j]);
            // d/ds_ij = -Z/(e^s_ij + Z); d/ds_ik (k negative) = e^s_ik/(e^s_ij + Z)
            grow[j] = grow[j] - w * neg / denom;
            neg_coeff = neg_coeff + w / denom;
        }
        for k in 0..n {
            if labels[k] != yi {
                grow[k] = grow[k] + neg_coeff * (row[k] - m).exp();
            }
        }
    }
    gs.iter_mut().for_each(|x| *x = *x * inv_tau);
    let mut ga = vec![T::zero(); n * d];
    let mut gb = vec![T::zero(); n * d];
    crate::real::gemm(n, n, d, &gs, false, v_b.data(), false, &mut ga, false);
    crate::real::gemm(n, n, d, &gs, true, v_a.data(), false, &mut gb, false);
    Ok((loss, Tensor::from_vec(&[n, d], ga)?, Tensor::from_vec(&[n, d], gb)?))
}

pub fn isicr_pair<T: Real>(v_a: &Tensor<T>, v_b: &Tensor<T>, labels: &[usize], tau: f64) -> Result<T> {
    isicr_pair_with_grad(v_a, v_b, labels, tau).map(|(l, _, _)| l)
}

/// Sum over unordered peer pairs of both directed losses, with one gradient
/// per peer.
pub fn isicr_total_with_grad<T: Real>(v_per_peer: &[&Tensor<T>], labels: &[usize], tau: f64) -> Result<(T, Vec<Tensor<T>>)> {
    let m = v_per_peer.len();
    if m < 2 {
        return Err(Error::Config(format!("contrastive loss needs at least 2 peers, got {}", m)));
    }
    let shape = v_per_peer[0].shape();
    if let Some(v) = v_per_peer.iter().find(|v| v.shape() != shape) {
        return Err(Error::Shape(format!("peer embeddings {:?} vs {:?}", v.shape(), shape)));
    }
    let mut grads: Vec<Tensor<T>> = (0..m).map(|_| Tensor::zeros(shape)).collect();
    let mut total = T::zero();
    for a in 0..m {
        for b in a + 1..m {
            for (x, y) in [(a, b), (b, a)] {
                let (l, gx, gy) = isicr_pair_with_grad(v_per_peer[x], v_per_peer[y], labels, tau)?;
                total = total + l;
                add_assign(&mut grads[x], &gx);
                add_assign(&mut grads[y], &gy);
            }
        }
    }
    Ok((total, grads))
}

pub fn isicr_total<T: Real>(v_per_peer: &[&Tensor<T>], labels: &[usize], tau: f64) -> Result<T> {
    isicr_total_with_grad(v_per_peer, labels, tau).map(|(l, _)| l)
}

fn add_assign<T: Real>(dst: &mut Tensor<T>, src: &Tensor<T>) {
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d = *d + *s;
    }
}

/// Values of every term of one step, reported in `f64`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub kl: f64,
    pub cr_rg: f64,
    pub cr_ch: f64,
    pub total: f64,
    pub ce_per_peer: Vec<f64>,
    pub kl_per_peer: Vec<f64>,
    /// Effective coefficients: `total = ce + kl_weight*kl + alpha*cr_rg + beta*cr_ch`.
    pub kl_weight: f64,
    pub alpha: f64,
    pub beta: f64,
}

/// Per-peer network outputs entering the composite loss.
pub struct LossInputs<'a, T> {
    pub logits: Vec<&'a Tensor<T>>,
    pub v_rg: Vec<&'a Tensor<T>>,
    pub v_ch: Vec<&'a Tensor<T>>,
    pub labels: &'a [usize],
}

/// Gradients of the total with respect to each peer's outputs.
#[derive(Clone, Debug)]
pub struct LossGrads<T> {
    pub logits: Vec<Tensor<T>>,
    pub v_rg: Vec<Tensor<T>>,
    pub v_ch: Vec<Tensor<T>>,
}

/// Composite objective `ce + T^2 kl + alpha cr_rg + beta cr_ch`.
///
/// Disabled terms are still evaluated and reported, but contribute with
/// weight zero.
pub fn total_loss<T: Real>(inputs: &LossInputs<'_, T>, weights: &LossWeights, terms: LossTerms) -> Result<(LossBreakdown, LossGrads<T>)> {
    weights.validate()?;
    let m = inputs.logits.len();
    if m == 0 || inputs.v_rg.len() != m || inputs.v_ch.len() != m {
        return Err(Error::Shape(format!(
            "loss inputs for {} / {} / {} peers",
            m,
            inputs.v_rg.len(),
            inputs.v_ch.len()
        )));
    }
    let classes = inputs.logits[0].last_dim();
    let q = soft_labels::<T>(inputs.labels, classes, weights.temperature)?;
    let kl_weight = if terms.kl { weights.temperature * weights.temperature } else { 0.0 };
    let alpha = if terms.cr_rg { weights.alpha } else { 0.0 };
    let beta = if terms.cr_ch { weights.beta } else { 0.0 };

    let mut ce_per_peer = Vec::with_capacity(m);
    let mut kl_per_peer = Vec::with_capacity(m);
    let mut dz = Vec::with_capacity(m);
    for z in &inputs.logits {
        let (ce, mut g) = ce_with_grad(z, inputs.labels, weights.label_smoothing)?;
        let (kl, gk) = kl_with_grad(&q, z, weights.temperature)?;
        if kl_weight != 0.0 {
            let w = T::of(kl_weight);
            for (a, b) in g.data_mut().iter_mut().zip(gk.data()) {
                *a = *a + w * *b;
            }
        }
        ce_per_peer.push(ce.as_f64());
        kl_per_peer.push(kl.as_f64());
        dz.push(g);
    }
    let scaled = |(l, gs): (T, Vec<Tensor<T>>), w: f64| {
        let w_t = T::of(w);
        let gs = gs
            .into_iter()
            .map(|mut g| {
                g.data_mut().iter_mut().for_each(|x| *x = *x * w_t);
                g
            })
            .collect::<Vec<_>>();
        (l.as_f64(), gs)
    };
    let (cr_rg, dv_rg) = if m >= 2 {
        scaled(isicr_total_with_grad(&inputs.v_rg, inputs.labels, weights.tau)?, alpha)
    } else {
        (0.0, inputs.v_rg.iter().map(|v| Tensor::zeros(v.shape())).collect())
    };
    let (cr_ch, dv_ch) = if m >= 2 {
        scaled(isicr_total_with_grad(&inputs.v_ch, inputs.labels, weights.tau)?, beta)
    } else {
        (0.0, inputs.v_ch.iter().map(|v| Tensor::zeros(v.shape())).collect())
    };
    let ce: f64 = ce_per_peer.iter().sum();
    let kl: f64 = kl_per_peer.iter().sum();
    let total = ce + kl_weight * kl + alpha * cr_rg + beta * cr_ch;
    Ok((
        LossBreakdown {
            ce,
            kl,
            cr_rg,
            cr_ch,
            total,
            ce_per_peer,
            kl_per_peer,
            kl_weight,
            alpha,
            beta,
        },
        LossGrads {
            logits: dz,
            v_rg: dv_rg,
            v_ch: dv_ch,
        },
    ))
}

#[cfg(test)]
mod tests;
