//! Peer networks: construction, forward passes, parameter accounting and
//! best-peer selection.

mod config;
mod layout;

pub use config::{ConvSpec, ExtractorKind, PeerConfig, TransformerSpec};
pub use layout::{Init, Layout, ParamSpec};

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::data::Signal;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng;
use crate::tensor::Tensor;
use layout::{BlockIx, BranchIx, ExtractorIx, LinearIx};

/// Which parameter set is being counted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Everything optimised during training, projection heads included.
    Training,
    /// The deployed classifier path only.
    Inference,
}

/// Batched network input, laid out for the extractor kind.
#[derive(Clone, Debug, PartialEq)]
pub enum PeerInput<T> {
    CnnLstm {
        /// `[B, 2n, T]` stacked chromophores.
        stacked: Tensor<T>,
        /// `[B, T, 2n]` time-major frames for the recurrent branch.
        frames: Tensor<T>,
    },
    Transformer {
        /// `[B, n, 2T]` one token per channel.
        region: Tensor<T>,
        /// `[B, T, 2n]` one token per time step.
        time: Tensor<T>,
    },
}

impl<T: Real> PeerInput<T> {
    pub fn from_signals(kind: ExtractorKind, signals: &[&Signal]) -> Result<Self> {
        let first = signals.first().ok_or(Error::Empty("input batch"))?;
        let (n, t) = (first.channels(), first.samples());
        if let Some(s) = signals.iter().find(|s| s.channels() != n || s.samples() != t) {
            return Err(Error::Shape(format!(
                "batch mixes [2][{}][{}] with [2][{}][{}]",
                n,
                t,
                s.channels(),
                s.samples()
            )));
        }
        let b = signals.len();
        let gather = |f: &dyn Fn(&Signal) -> Vec<f32>| -> Vec<T> {
            let mut out = Vec::with_capacity(b * 2 * n * t);
            for s in signals {
                out.extend(f(s).into_iter().map(|v| T::of(v as f64)));
            }
            out
        };
        let frames = Tensor::from_vec(&[b, t, 2 * n], gather(&Signal::to_time_tokens))?;
        Ok(match kind {
            ExtractorKind::CnnLstm => PeerInput::CnnLstm {
                stacked: Tensor::from_vec(&[b, 2 * n, t], gather(&Signal::to_cnn))?,
                frames,
            },
            ExtractorKind::Transformer => PeerInput::Transformer {
                region: Tensor::from_vec(&[b, n, 2 * t], gather(&Signal::to_region_tokens))?,
                time: frames,
            },
        })
    }

    pub fn batch_size(&self) -> usize {
        match self {
            PeerInput::CnnLstm { frames, .. } => frames.shape()[0],
            PeerInput::Transformer { time, .. } => time.shape()[0],
        }
    }

    pub fn kind(&self) -> ExtractorKind {
        match self {
            PeerInput::CnnLstm { .. } => ExtractorKind::CnnLstm,
            PeerInput::Transformer { .. } => ExtractorKind::Transformer,
        }
    }
}

/// Tape handles of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// Bound parameter leaves, in layout order.
    pub params: Vec<Var>,
    pub z: Var,
    pub e_rg: Var,
    pub e_ch: Var,
    pub v_rg: Option<Var>,
    pub v_ch: Option<Var>,
}

/// Materialised outputs of [`PeerNet::forward_full`].
#[derive(Clone, Debug, PartialEq)]
pub struct FullOutput<T> {
    pub z: Tensor<T>,
    pub e_rg: Tensor<T>,
    pub e_ch: Tensor<T>,
    pub v_rg: Tensor<T>,
    pub v_ch: Tensor<T>,
}

/// One peer: multi-level extractor, linear classifier and two projection heads.
#[derive(Clone, Debug)]
pub struct PeerNet<T> {
    config: PeerConfig,
    layout: Layout,
    params: Vec<Tensor<T>>,
}

impl<T: Real> PeerNet<T> {
    /// Builds a freshly initialised peer; initialisation depends only on
    /// `config.init_seed`.
    pub fn build(config: &PeerConfig) -> Result<Self> {
        let layout = Layout::new(config)?;
        let mut r = rng::stream(config.init_seed, &[0x1417]);
        let params = layout
            .specs
            .iter()
            .map(|s| match s.init {
                Init::Uniform(bound) => Tensor::from_fn(&s.shape, |_| T::of(r.random_range(-bound..bound))),
                Init::Ones => Tensor::from_fn(&s.shape, |_| T::one()),
                Init::Zeros => Tensor::zeros(&s.shape),
            })
            .collect();
        Ok(Self {
            config: *config,
            layout,
            params,
        })
    }

    /// Reassembles a peer from stored parameters. A head-stripped list
    /// (deployment prefix) is accepted.
    pub fn from_parts(config: &PeerConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        let layout = Layout::new(config)?;
        if params.len() != layout.specs.len() && params.len() != layout.inference_len() {
            return Err(Error::Shape(format!(
                "expected {} (or {} without heads) parameter tensors, got {}",
                layout.specs.len(),
                layout.inference_len(),
                params.len()
            )));
        }
        for (p, s) in params.iter().zip(&layout.specs) {
            if p.shape() != s.shape.as_slice() {
                return Err(Error::Shape(format!("{}: expected {:?}, got {:?}", s.name, s.shape, p.shape())));
            }
        }
        Ok(Self {
            config: *config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &PeerConfig {
        &self.config
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.layout.specs[..self.params.len()]
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn has_heads(&self) -> bool {
        self.params.len() == self.layout.specs.len()
    }

    /// Copy of the deployable part (projection heads dropped).
    pub fn without_heads(&self) -> Self {
        Self {
            config: self.config,
            layout: self.layout.clone(),
            params: self.params[..self.layout.inference_len()].to_vec(),
        }
    }

    pub fn cast<U: Real>(&self) -> PeerNet<U> {
        PeerNet {
            config: self.config,
            layout: self.layout.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// Parameter count from the architecture; independent of whether heads
    /// are currently stored.
    pub fn count_params(&self, phase: Phase) -> usize {
        count_params(&self.layout, phase)
    }

    /// Records the forward pass on `tape`.
    ///
    /// With `heads` false the projection heads are neither bound nor run.
    /// Parameters are bound as gradient-tracking leaves when `track` is set.
    pub fn forward_on(&self, tape: &mut Tape<T>, input: &PeerInput<T>, heads: bool, track: bool) -> Result<ForwardVars> {
        if input.kind() != self.config.kind {
            return Err(Error::Shape(format!(
                "{} peer given {} input",
                self.config.kind.name(),
                input.kind().name()
            )));
        }
        if heads && !self.has_heads() {
            return Err(Error::MissingHeads);
        }
        let bound = if heads { self.params.len() } else { self.layout.inference_len() };
        let p: Vec<Var> = self.params[..bound].iter().map(|t| tape.leaf(t.clone(), track)).collect();
        let (e_rg, e_ch) = match (&self.layout.extractor, input) {
            (ExtractorIx::CnnLstm { conv1, conv2, fc, lstm }, PeerInput::CnnLstm { stacked, frames }) => {
                self.check_input(stacked.shape(), &[2 * self.config.channels, self.config.samples])?;
                let x = tape.leaf(stacked.clone(), false);
                let h1 = tape.conv1d(x, p[conv1.w], p[conv1.b], conv1.stride)?;
                let h1 = tape.relu(h1)?;
                tape.ensure_finite(h1, "region.conv1")?;
                let h2 = tape.conv1d(h1, p[conv2.w], p[conv2.b], conv2.stride)?;
                let h2 = tape.relu(h2)?;
                tape.ensure_finite(h2, "region.conv2")?;
                let s = tape.shape(h2).to_vec();
                let flat = tape.reshape(h2, &[s[0], s[1] * s[2]])?;
                let e_rg = tape.linear(flat, p[fc.w], Some(p[fc.b]))?;
                tape.ensure_finite(e_rg, "region.fc")?;
                let seq = tape.leaf(frames.clone(), false);
                let e_ch = self.lstm_forward(tape, &p, lstm, seq)?;
                (e_rg, e_ch)
            }
            (ExtractorIx::Transformer { rg, ch, heads }, PeerInput::Transformer { region, time }) => {
                let (n, t) = (self.config.channels, self.config.samples);
                self.check_input(region.shape(), &[n, 2 * t])?;
                self.check_input(time.shape(), &[t, 2 * n])?;
                let xr = tape.leaf(region.clone(), false);
                let xc = tape.leaf(time.clone(), false);
                let e_rg = branch_forward(tape, &p, rg, *heads, xr, "region")?;
                let e_ch = branch_forward(tape, &p, ch, *heads, xc, "channel")?;
                (e_rg, e_ch)
            }
            _ => unreachable!("input kind checked above"),
        };
        let joint = tape.concat_last(&[e_rg, e_ch])?;
        let z = linear(tape, &p, self.layout.classifier, joint)?;
        tape.ensure_finite(z, "classifier")?;
        let (v_rg, v_ch) = if heads {
            let a = linear(tape, &p, self.layout.proj_rg, e_rg)?;
            let a = tape.l2_normalize(a)?;
            tape.ensure_finite(a, "proj_rg")?;
            let b = linear(tape, &p, self.layout.proj_ch, e_ch)?;
            let b = tape.l2_normalize(b)?;
            tape.ensure_finite(b, "proj_ch")?;
            (Some(a), Some(b))
        } else {
            (None, None)
        };
        Ok(ForwardVars {
            params: p,
            z,
            e_rg,
            e_ch,
            v_rg,
            v_ch,
        })
    }

    fn check_input(&self, shape: &[usize], want: &[usize]) -> Result<()> {
        if shape.len() != 3 || shape[1..] != *want {
            return Err(Error::Shape(format!("input {:?}, expected [B, {}, {}]", shape, want[0], want[1])));
        }
        Ok(())
    }

    fn lstm_forward(&self, tape: &mut Tape<T>, p: &[Var], layers: &[layout::LstmIx], seq: Var) -> Result<Var> {
        let h = self.config.embed_ch_dim;
        let s = tape.shape(seq).to_vec();
        let (b, steps) = (s[0], s[1]);
        let mut input = seq;
        let mut last = None;
        for (li, l) in layers.iter().enumerate() {
            let width = tape.shape(input)[2];
            let flat = tape.reshape(input, &[b * steps, width])?;
            let proj = tape.linear(flat, p[l.w_ih], Some(p[l.b]))?;
            let proj = tape.reshape(proj, &[b, steps, 4 * h])?;
            let mut hv = tape.leaf(Tensor::zeros(&[b, h]), false);
            let mut cv = tape.leaf(Tensor::zeros(&[b, h]), false);
            let keep = li + 1 < layers.len();
            let mut hs = Vec::with_capacity(if keep { steps } else { 0 });
            for t in 0..steps {
                let xt = tape.step(proj, t)?;
                let rec = tape.linear(hv, p[l.w_hh], None)?;
                let gates = tape.add(xt, rec)?;
                let hc = tape.lstm_cell(gates, cv)?;
                hv = tape.slice_last(hc, 0, h)?;
                cv = tape.slice_last(hc, h, h)?;
                if keep {
                    hs.push(hv);
                }
            }
            tape.ensure_finite(hv, "channel.lstm")?;
            last = Some(hv);
            if keep {
                input = tape.stack(&hs)?;
            }
        }
        Ok(last.expect("at least one recurrent layer"))
    }

    /// Logits, embeddings and normalised contrastive projections.
    pub fn forward_full(&self, input: &PeerInput<T>) -> Result<FullOutput<T>> {
        let mut tape = Tape::new();
        let f = self.forward_on(&mut tape, input, true, false)?;
        let get = |v: Option<Var>| tape.value(v.expect("heads bound")).clone();
        Ok(FullOutput {
            z: tape.value(f.z).clone(),
            e_rg: tape.value(f.e_rg).clone(),
            e_ch: tape.value(f.e_ch).clone(),
            v_rg: get(f.v_rg),
            v_ch: get(f.v_ch),
        })
    }

    /// Logits only; projection heads are skipped.
    pub fn forward_inference(&self, input: &PeerInput<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let f = self.forward_on(&mut tape, input, false, false)?;
        Ok(tape.value(f.z).clone())
    }

    /// Pre-projection embeddings `(e_rg, e_ch)`.
    pub fn embeddings(&self, input: &PeerInput<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let f = self.forward_on(&mut tape, input, false, false)?;
        Ok((tape.value(f.e_rg).clone(), tape.value(f.e_ch).clone()))
    }

    /// Per-parameter gradients after `tape.backward`, zero where none arrived.
    pub fn collect_grads(&self, tape: &Tape<T>, vars: &ForwardVars) -> Vec<Vec<T>> {
        vars.params
            .iter()
            .zip(&self.params)
            .map(|(v, p)| tape.grad(*v).map(<[T]>::to_vec).unwrap_or_else(|| alloc::vec![T::zero(); p.len()]))
            .collect()
    }
}

fn linear<T: Real>(tape: &mut Tape<T>, p: &[Var], ix: LinearIx, x: Var) -> Result<Var> {
    tape.linear(x, p[ix.w], Some(p[ix.b]))
}

fn sinusoidal_encoding<T: Real>(tokens: usize, d: usize) -> Tensor<T> {
    Tensor::from_fn(&[tokens, d], |i| {
        let (pos, j) = (i / d, i % d);
        let freq = libm::pow(10000.0, -((j - j % 2) as f64) / d as f64);
        let angle = pos as f64 * freq;
        T::of(if j % 2 == 0 { libm::sin(angle) } else { libm::cos(angle) })
    })
}

fn block_forward<T: Real>(tape: &mut Tape<T>, p: &[Var], blk: &BlockIx, heads: usize, x: Var) -> Result<Var> {
    let d = tape.shape(x)[2];
    let q = linear(tape, p, blk.q, x)?;
    let k = linear(tape, p, blk.k, x)?;
    let v = linear(tape, p, blk.v, x)?;
    let (q, k, v) = (
        tape.split_heads(q, heads)?,
        tape.split_heads(k, heads)?,
        tape.split_heads(v, heads)?,
    );
    let scores = tape.batch_matmul(q, k, true)?;
    let scores = tape.scale(scores, T::of(1.0 / libm::sqrt((d / heads) as f64)))?;
    let attn = tape.softmax_last(scores)?;
    let ctx = tape.batch_matmul(attn, v, false)?;
    let ctx = tape.merge_heads(ctx, heads)?;
    let o = linear(tape, p, blk.o, ctx)?;
    let r1 = tape.add(x, o)?;
    let n1 = tape.layer_norm(r1, p[blk.ln1.0], p[blk.ln1.1])?;
    let f = linear(tape, p, blk.ff1, n1)?;
    let f = tape.relu(f)?;
    let f = linear(tape, p, blk.ff2, f)?;
    let r2 = tape.add(n1, f)?;
    tape.layer_norm(r2, p[blk.ln2.0], p[blk.ln2.1])
}

fn branch_forward<T: Real>(tape: &mut Tape<T>, p: &[Var], br: &BranchIx, heads: usize, x: Var, name: &str) -> Result<Var> {
    debug_assert_eq!(tape.shape(x)[1], br.tokens);
    let h = linear(tape, p, br.proj, x)?;
    let d = tape.shape(h)[2];
    let pe = tape.leaf(sinusoidal_encoding(br.tokens, d), false);
    let mut h = tape.add_broadcast(h, pe)?;
    for blk in &br.blocks {
        h = block_forward(tape, p, blk, heads, h)?;
    }
    tape.ensure_finite(h, name)?;
    let pooled = tape.mean_tokens(h)?;
    let e = linear(tape, p, br.out, pooled)?;
    tape.ensure_finite(e, name)?;
    Ok(e)
}

pub fn count_params(layout: &Layout, phase: Phase) -> usize {
    layout
        .specs
        .iter()
        .filter(|s| phase == Phase::Training || !s.head)
        .map(ParamSpec::numel)
        .sum()
}

/// M peers sharing one architecture, each with its own initialisation seed.
#[derive(Clone, Debug)]
pub struct PeerEnsemble<T> {
    pub peers: Vec<PeerNet<T>>,
}

impl<T: Real> PeerEnsemble<T> {
    /// Peer `m` is initialised from `derive_seed(base_seed, [m])`.
    pub fn build(config: &PeerConfig, peers: usize, base_seed: u64) -> Result<Self> {
        if peers == 0 {
            return Err(Error::Config("ensemble needs at least one peer".into()));
        }
        let peers = (0..peers)
            .map(|m| PeerNet::build(&config.with_seed(rng::derive_seed(base_seed, &[0x9ee2, m as u64]))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { peers })
    }

    pub fn len(&self) -> usize {
        self.peers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.peers.is_empty()
    }

    pub fn config(&self) -> &PeerConfig {
        self.peers[0].config()
    }

    pub fn count_params(&self, phase: Phase) -> usize {
        self.peers.iter().map(|p| p.count_params(phase)).sum()
    }
}

/// Index of the highest accuracy; ties go to the lowest index.
pub fn select_best(accuracies: &[f64]) -> Result<usize> {
    if accuracies.is_empty() {
        return Err(Error::Empty("no peer accuracies to select from"));
    }
    if let Some(a) = accuracies.iter().find(|a| !a.is_finite()) {
        return Err(Error::Validation(format!("accuracy {} is not finite", a)));
    }
    let mut best = 0;
    for (i, &a) in accuracies.iter().enumerate() {
        if a > accuracies[best] {
            best = i;
        }
    }
    Ok(best)
}
