//! Joint optimisation of M peers with the composite objective, evaluation,
//! and the multi-fold cross-subject protocol.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::{plan_balanced_batches, BatchPlan, Dataset, SplitPlan, CLASS_COUNT};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBreakdown, LossInputs, LossTerms, LossWeights};
use crate::model::{select_best, ExtractorKind, ForwardVars, PeerConfig, PeerEnsemble, PeerInput, PeerNet};
use crate::optim::{AdamWConfig, AdamWState, CosineSchedule};
use crate::real::Real;
use crate::rng;
use crate::tensor::Tensor;

/// Execution mode of a training step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    /// Peers are processed one after another in index order.
    #[default]
    Deterministic,
    /// Peers run on separate threads (requires the `std` feature; falls
    /// back to sequential otherwise).
    Fast,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Number of peers `M`.
    pub peers: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub adam: AdamWConfig,
    pub weights: LossWeights,
    pub terms: LossTerms,
    /// Samples of each class per batch.
    pub per_class: usize,
    pub seed: u64,
    #[serde(skip)]
    pub mode: TrainMode,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_setup(ExtractorKind::CnnLstm, 3)
    }
}

impl TrainConfig {
    /// Published protocol: 60 epochs / decay 2 for two peers, 90 epochs /
    /// decay 3 otherwise; learning rate by extractor.
    pub fn for_setup(kind: ExtractorKind, peers: usize) -> Self {
        let two = peers <= 2;
        Self {
            peers,
            epochs: if two { 60 } else { 90 },
            base_lr: match kind {
                ExtractorKind::CnnLstm => 5e-5,
                ExtractorKind::Transformer => 2e-4,
            },
            adam: AdamWConfig {
                weight_decay: if two { 2.0 } else { 3.0 },
                ..AdamWConfig::default()
            },
            weights: LossWeights::default(),
            terms: LossTerms::FULL,
            per_class: 16,
            seed: 0,
            mode: TrainMode::Deterministic,
            eval_batch: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.peers < 2 {
            return Err(Error::Config(format!(
                "{} peer(s); online distillation needs at least 2",
                self.peers
            )));
        }
        if self.epochs == 0 || self.eval_batch == 0 {
            return Err(Error::Config("epochs and eval_batch must be positive".into()));
        }
        if self.per_class < 2 {
            return Err(Error::Config(format!(
                "per_class {} leaves anchors without positives; need at least 2",
                self.per_class
            )));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::Config(format!("base_lr {} must be positive", self.base_lr)));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps >= 0.0 && a.weight_decay >= 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings {:?}", a)));
        }
        self.weights.validate()
    }
}

/// Per-epoch record: mean loss terms over the epoch's batches and running
/// training accuracy of each peer.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Learning rate of the epoch's first step.
    pub lr: f64,
    pub loss: LossBreakdown,
    pub train_accuracy: Vec<f64>,
    pub batches: usize,
    /// Order in which peers received their updates.
    pub update_order: Vec<usize>,
    pub wall_time_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub peer_accuracy: Vec<f64>,
    pub selected_peer: usize,
    pub selected_accuracy: f64,
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub ensemble: PeerEnsemble<T>,
    pub optim: Vec<AdamWState<T>>,
    /// Completed epochs; also the sampler cursor.
    pub epoch: usize,
    pub step: u64,
    pub schedule: CosineSchedule,
}

impl<T: Real> TrainState<T> {
    pub fn fresh(ensemble: PeerEnsemble<T>, schedule: CosineSchedule) -> Self {
        let optim = ensemble.peers.iter().map(|p| AdamWState::new(p.params())).collect();
        Self {
            ensemble,
            optim,
            epoch: 0,
            step: 0,
            schedule,
        }
    }
}

fn batches_per_epoch(labels: &[usize], per_class: usize) -> Result<usize> {
    let mut counts = [0usize; CLASS_COUNT];
    for &l in labels {
        if l >= CLASS_COUNT {
            return Err(Error::LabelOutOfRange {
                label: l,
                classes: CLASS_COUNT,
            });
        }
        counts[l] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::MissingClass(c));
    }
    let n = counts.iter().map(|&c| c / per_class).min().unwrap_or(0);
    if n == 0 {
        return Err(Error::Validation(format!(
            "class counts {:?} cannot fill a single batch of {} per class",
            counts, per_class
        )));
    }
    Ok(n)
}

/// Drives epochs over one training set.
pub struct Trainer<'a, T> {
    config: TrainConfig,
    data: &'a Dataset,
    labels: Vec<usize>,
    state: TrainState<T>,
}

struct PeerPass<T: Real> {
    tape: Tape<T>,
    vars: ForwardVars,
}

fn forward_peer<T: Real>(peer: &PeerNet<T>, input: &PeerInput<T>) -> Result<PeerPass<T>> {
    let mut tape = Tape::new();
    let vars = peer.forward_on(&mut tape, input, true, true)?;
    Ok(PeerPass { tape, vars })
}

fn backward_peer<T: Real>(
    peer: &mut PeerNet<T>,
    optim: &mut AdamWState<T>,
    pass: &mut PeerPass<T>,
    seeds: [(Var, &Tensor<T>); 3],
    lr: f64,
    adam: &AdamWConfig,
) -> Result<()> {
    let seeds: Vec<(Var, &[T])> = seeds.iter().map(|(v, g)| (*v, g.data())).collect();
    pass.tape.backward(&seeds)?;
    let grads = peer.collect_grads(&pass.tape, &pass.vars);
    optim.update(peer.params_mut(), &grads, lr, adam)
}

impl<'a, T: Real> Trainer<'a, T> {
    pub fn new(ensemble: PeerEnsemble<T>, train_set: &'a Dataset, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let labels = train_set.labels();
        let per_epoch = batches_per_epoch(&labels, config.per_class)?;
        let schedule = CosineSchedule {
            base_lr: config.base_lr,
            total_steps: (per_epoch * config.epochs) as u64,
        };
        Self::from_state(TrainState::fresh(ensemble, schedule), train_set, config)
    }

    /// Continues from a saved state. The state must have been produced with
    /// the same peer count, architecture and step budget.
    pub fn from_state(state: TrainState<T>, train_set: &'a Dataset, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        if state.ensemble.len() != config.peers || state.optim.len() != config.peers {
            return Err(Error::ConfigMismatch(format!(
                "state holds {} peers, configuration asks for {}",
                state.ensemble.len(),
                config.peers
            )));
        }
        if let Some(p) = state.ensemble.peers.iter().find(|p| !p.has_heads()) {
            return Err(Error::ConfigMismatch(format!(
                "peer with seed {} has no projection heads",
                p.config().init_seed
            )));
        }
        let labels = train_set.labels();
        let per_epoch = batches_per_epoch(&labels, config.per_class)?;
        if state.schedule.total_steps != (per_epoch * config.epochs) as u64 || state.schedule.base_lr != config.base_lr {
            return Err(Error::ConfigMismatch(format!(
                "schedule {:?} does not match {} epochs x {} batches at lr {}",
                state.schedule, config.epochs, per_epoch, config.base_lr
            )));
        }
        let cfg = state.ensemble.config();
        if cfg.channels != train_set.channels() || cfg.samples != train_set.samples() {
            return Err(Error::ConfigMismatch(format!(
                "peers expect [2][{}][{}] trials, data is [2][{}][{}]",
                cfg.channels,
                cfg.samples,
                train_set.channels(),
                train_set.samples()
            )));
        }
        Ok(Self {
            config: *config,
            data: train_set,
            labels,
            state,
        })
    }

    pub fn state(&self) -> &TrainState<T> {
        &self.state
    }

    pub fn into_state(self) -> TrainState<T> {
        self.state
    }

    pub fn finished(&self) -> bool {
        self.state.epoch >= self.config.epochs
    }

    /// Batches drawn for `epoch`, as indices into the training set.
    pub fn batch_plan(&self, epoch: usize) -> Result<BatchPlan> {
        plan_balanced_batches(
            &self.labels,
            CLASS_COUNT,
            self.config.per_class,
            rng::derive_seed(self.config.seed, &[0xe90c, epoch as u64]),
        )
    }

    /// Runs one epoch of balanced batches. `wall_time_secs` is left at 0.
    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let epoch = self.state.epoch;
        let plan = self.batch_plan(epoch)?;
        let m = self.config.peers;
        let kind = self.state.ensemble.config().kind;
        let lr0 = self.state.schedule.lr(self.state.step);
        let mut sum = LossBreakdown {
            ce_per_peer: alloc::vec![0.0; m],
            kl_per_peer: alloc::vec![0.0; m],
            ..LossBreakdown::default()
        };
        let mut correct = alloc::vec![0usize; m];
        let mut seen = 0usize;
        for (bi, batch) in plan.batches.iter().enumerate() {
            let signals: Vec<_> = batch.iter().map(|&i| &self.data.records()[i].signal).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| self.labels[i]).collect();
            let input = PeerInput::<T>::from_signals(kind, &signals)?;
            let lr = self.state.schedule.lr(self.state.step);
            let bd = self.step(&input, &labels, lr).map_err(|e| match e {
                Error::Diverged { .. } => Error::Diverged { epoch, batch: bi },
                other => other,
            })?;
            accumulate(&mut sum, &bd.0);
            for (c, k) in correct.iter_mut().zip(bd.1) {
                *c += k;
            }
            seen += labels.len();
            self.state.step += 1;
        }
        let nb = plan.batches.len() as f64;
        scale_breakdown(&mut sum, 1.0 / nb);
        self.state.epoch += 1;
        Ok(EpochLog {
            epoch,
            lr: lr0,
            loss: sum,
            train_accuracy: correct.iter().map(|&c| c as f64 / seen as f64).collect(),
            batches: plan.batches.len(),
            update_order: (0..m).collect(),
            wall_time_secs: 0.0,
        })
    }

    /// One optimisation step on every peer. Returns the loss breakdown and
    /// per-peer correct-prediction counts.
    fn step(&mut self, input: &PeerInput<T>, labels: &[usize], lr: f64) -> Result<(LossBreakdown, Vec<usize>)> {
        let peers = &mut self.state.ensemble.peers;
        let mut passes = run_peers(self.config.mode, peers.iter().collect(), |p| forward_peer(p, input))?;
        let (bd, grads) = {
            let z: Vec<&Tensor<T>> = passes.iter().map(|p| p.tape.value(p.vars.z)).collect();
            let v_rg = passes.iter().map(|p| p.tape.value(p.vars.v_rg.expect("heads"))).collect();
            let v_ch = passes.iter().map(|p| p.tape.value(p.vars.v_ch.expect("heads"))).collect();
            total_loss(
                &LossInputs {
                    logits: z,
                    v_rg,
                    v_ch,
                    labels,
                },
                &self.config.weights,
                self.config.terms,
            )?
        };
        if !bd.total.is_finite() {
            return Err(Error::Diverged { epoch: 0, batch: 0 });
        }
        let correct = passes.iter().map(|p| count_correct(p.tape.value(p.vars.z), labels)).collect();
        let adam = self.config.adam;
        let jobs: Vec<_> = peers
            .iter_mut()
            .zip(self.state.optim.iter_mut())
            .zip(passes.iter_mut())
            .enumerate()
            .map(|(i, ((peer, opt), pass))| (peer, opt, pass, i))
            .collect();
        run_peers(self.config.mode, jobs, |(peer, opt, pass, i)| {
            let seeds = [
                (pass.vars.z, &grads.logits[i]),
                (pass.vars.v_rg.expect("heads"), &grads.v_rg[i]),
                (pass.vars.v_ch.expect("heads"), &grads.v_ch[i]),
            ];
            backward_peer(peer, opt, pass, seeds, lr, &adam)
        })?;
        Ok((bd, correct))
    }
}

/// Applies `f` to every item, sequentially or on scoped threads; results
/// keep item order.
fn run_peers<I: Send, R: Send>(mode: TrainMode, items: Vec<I>, f: impl Fn(I) -> Result<R> + Sync) -> Result<Vec<R>> {
    #[cfg(feature = "std")]
    if mode == TrainMode::Fast && items.len() > 1 {
        return std::thread::scope(|s| {
            let handles: Vec<_> = items.into_iter().map(|it| s.spawn(|| f(it))).collect();
            handles.into_iter().map(|h| h.join().expect("peer worker panicked")).collect()
        });
    }
    let _ = mode;
    items.into_iter().map(f).collect()
}

fn accumulate(sum: &mut LossBreakdown, b: &LossBreakdown) {
    sum.ce += b.ce;
    sum.kl += b.kl;
    sum.cr_rg += b.cr_rg;
    sum.cr_ch += b.cr_ch;
    sum.total += b.total;
    for (s, v) in sum.ce_per_peer.iter_mut().zip(&b.ce_per_peer) {
        *s += v;
    }
    for (s, v) in sum.kl_per_peer.iter_mut().zip(&b.kl_per_peer) {
        *s += v;
    }
    sum.kl_weight = b.kl_weight;
    sum.alpha = b.alpha;
    sum.beta = b.beta;
}

fn scale_breakdown(b: &mut LossBreakdown, f: f64) {
    b.ce *= f;
    b.kl *= f;
    b.cr_rg *= f;
    b.cr_ch *= f;
    b.total *= f;
    b.ce_per_peer.iter_mut().for_each(|v| *v *= f);
    b.kl_per_peer.iter_mut().for_each(|v| *v *= f);
}

fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn count_correct<T: Real>(z: &Tensor<T>, labels: &[usize]) -> usize {
    labels.iter().enumerate().filter(|(i, &y)| argmax(z.row(*i)) == y).count()
}

/// Trains every peer for `config.epochs` epochs on `train_set`.
pub fn train<T: Real>(ensemble: PeerEnsemble<T>, train_set: &Dataset, config: &TrainConfig) -> Result<(PeerEnsemble<T>, Vec<EpochLog>)> {
    let mut trainer = Trainer::new(ensemble, train_set, config)?;
    let mut logs = Vec::with_capacity(config.epochs);
    while !trainer.finished() {
        logs.push(trainer.run_epoch()?);
    }
    Ok((trainer.into_state().ensemble, logs))
}

/// Arg-max class predictions over a dataset, using the deployment path.
pub fn predict<T: Real>(peer: &PeerNet<T>, data: &Dataset, batch: usize) -> Result<Vec<usize>> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.records().chunks(batch.max(1)) {
        let signals: Vec<_> = chunk.iter().map(|r| &r.signal).collect();
        let z = peer.forward_inference(&PeerInput::from_signals(peer.config().kind, &signals)?)?;
        out.extend((0..z.rows()).map(|i| argmax(z.row(i))));
    }
    Ok(out)
}

/// Fraction of records whose arg-max logit equals the label.
pub fn evaluate<T: Real>(peer: &PeerNet<T>, data: &Dataset, batch: usize) -> Result<f64> {
    let pred = predict(peer, data, batch)?;
    let hits = pred.iter().zip(data.records()).filter(|(p, r)| **p == r.label.index()).count();
    Ok(hits as f64 / data.len() as f64)
}

pub fn evaluate_ensemble<T: Real>(ensemble: &PeerEnsemble<T>, data: &Dataset, batch: usize) -> Result<Vec<f64>> {
    ensemble.peers.iter().map(|p| evaluate(p, data, batch)).collect()
}

/// Hooks into [`run_protocol`] for logging, checkpointing and resuming.
pub trait ProtocolObserver<T: Real> {
    type Error: From<Error>;

    /// A saved state to continue this fold from, if any.
    fn resume(&mut self, _fold: usize) -> core::result::Result<Option<TrainState<T>>, Self::Error> {
        Ok(None)
    }

    fn epoch_started(&mut self, _fold: usize, _epoch: usize) {}

    fn epoch_finished(&mut self, _fold: usize, _log: &mut EpochLog, _state: &TrainState<T>) -> core::result::Result<(), Self::Error> {
        Ok(())
    }

    fn fold_finished(&mut self, _result: &FoldResult, _ensemble: &PeerEnsemble<T>) -> core::result::Result<(), Self::Error> {
        Ok(())
    }
}

/// Observer that does nothing.
pub struct Silent;

impl<T: Real> ProtocolObserver<T> for Silent {
    type Error = Error;
}

/// Ensemble seed for a fold; peers derive their own seeds from it.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    rng::derive_seed(seed, &[0xf01d, fold as u64])
}

/// Cross-subject protocol: a fresh ensemble per fold, trained on the fold's
/// training subjects, evaluated per peer on its unseen test subjects, best
/// peer selected.
pub fn run_protocol<T: Real, O: ProtocolObserver<T>>(
    dataset: &Dataset,
    split: &SplitPlan,
    peer: &PeerConfig,
    config: &TrainConfig,
    observer: &mut O,
) -> core::result::Result<Vec<FoldResult>, O::Error> {
    config.validate()?;
    split.validate()?;
    // every fold is checked before any training starts
    let folds = (0..split.folds.len())
        .map(|f| split.fold_indices(dataset, f))
        .collect::<Result<Vec<_>>>()?;
    let mut results = Vec::with_capacity(folds.len());
    for (f, (train_idx, test_idx)) in folds.iter().enumerate() {
        let train_set = dataset.subset(train_idx)?;
        let test_set = dataset.subset(test_idx)?;
        let fold_cfg = TrainConfig {
            seed: fold_seed(config.seed, f),
            ..*config
        };
        let mut trainer = match observer.resume(f)? {
            Some(state) => Trainer::from_state(state, &train_set, &fold_cfg)?,
            None => {
                let ensemble = PeerEnsemble::build(peer, config.peers, fold_cfg.seed)?;
                Trainer::new(ensemble, &train_set, &fold_cfg)?
            }
        };
        while !trainer.finished() {
            observer.epoch_started(f, trainer.state().epoch);
            let mut log = trainer.run_epoch()?;
            observer.epoch_finished(f, &mut log, trainer.state())?;
        }
        let ensemble = trainer.into_state().ensemble;
        let acc = evaluate_ensemble(&ensemble, &test_set, config.eval_batch)?;
        let selected = select_best(&acc)?;
        let result = FoldResult {
            fold: f,
            selected_accuracy: acc[selected],
            peer_accuracy: acc,
            selected_peer: selected,
        };
        observer.fold_finished(&result, &ensemble)?;
        results.push(result);
    }
    Ok(results)
}

#[cfg(test)]
mod tests;
