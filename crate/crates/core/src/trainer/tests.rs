use super::*;
use crate::data::{make_subject_folds, synth_generate, Fold, SynthConfig};
use crate::model::{ConvSpec, PeerNet};
use alloc::vec;

fn tiny_peer() -> PeerConfig {
    PeerConfig {
        channels: 3,
        samples: 40,
        embed_rg_dim: 6,
        embed_ch_dim: 5,
        contrastive_dim: 4,
        conv: ConvSpec {
            kernels: [8, 3],
            strides: [4, 2],
            channels: [4, 3],
        },
        ..PeerConfig::default()
    }
}

fn tiny_data(subjects: usize) -> Dataset {
    synth_generate(&SynthConfig {
        n_subjects: subjects,
        trials_per_class_per_subject: 4,
        channels: 3,
        samples: 40,
        sample_rate_hz: 10.0,
        seed: 5,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn tiny_train(peers: usize, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        base_lr: 1e-3,
        per_class: 4,
        seed: 17,
        ..TrainConfig::for_setup(ExtractorKind::CnnLstm, peers)
    }
}

#[test]
fn published_defaults_depend_on_peer_count() {
    let two = TrainConfig::for_setup(ExtractorKind::CnnLstm, 2);
    assert_eq!((two.epochs, two.adam.weight_decay), (60, 2.0));
    let three = TrainConfig::default();
    assert_eq!((three.peers, three.epochs, three.adam.weight_decay), (3, 90, 3.0));
    assert_eq!(three.base_lr, 5e-5);
    assert_eq!((three.adam.beta1, three.adam.beta2), (0.9, 0.999));
    assert_eq!(three.per_class, 16);
    assert_eq!(TrainConfig::for_setup(ExtractorKind::Transformer, 4).base_lr, 2e-4);
}

#[test]
fn invalid_configs_are_rejected() {
    for bad in [
        TrainConfig {
            peers: 1,
            ..TrainConfig::default()
        },
        TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            per_class: 1,
            ..TrainConfig::default()
        },
        TrainConfig {
            base_lr: -1.0,
            ..TrainConfig::default()
        },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))), "{:?}", bad);
    }
}

#[test]
fn deterministic_reruns_are_bit_identical() {
    let data = tiny_data(4);
    let cfg = tiny_train(2, 3);
    let run = || {
        let ens = PeerEnsemble::<f32>::build(&tiny_peer(), 2, 1).unwrap();
        train(ens, &data, &cfg).unwrap()
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(la, lb);
    for (p, q) in a.peers.iter().zip(&b.peers) {
        assert_eq!(p.params(), q.params());
    }
    assert_eq!(la.len(), 3);
    assert!(la
        .iter()
        .enumerate()
        .all(|(i, l)| l.epoch == i && l.batches == 4 && l.update_order == [0, 1]));
    assert!(la.iter().all(|l| l.loss.total.is_finite() && l.train_accuracy.len() == 2));
}

#[test]
fn epochs_draw_fresh_balanced_batches() {
    let data = tiny_data(4);
    let t = Trainer::new(PeerEnsemble::<f32>::build(&tiny_peer(), 2, 1).unwrap(), &data, &tiny_train(2, 3)).unwrap();
    let labels = data.labels();
    let plans: Vec<_> = (0..3).map(|e| t.batch_plan(e).unwrap()).collect();
    for plan in &plans {
        assert_eq!(plan.batches.len(), 4);
        for b in &plan.batches {
            let mut counts = [0; CLASS_COUNT];
            b.iter().for_each(|&i| counts[labels[i]] += 1);
            assert_eq!(counts, [4; CLASS_COUNT]);
        }
    }
    assert_ne!(plans[0], plans[1]);
    assert_eq!(plans[2], t.batch_plan(2).unwrap());
}

#[test]
fn logged_learning_rate_follows_the_schedule() {
    let data = tiny_data(4);
    let cfg = tiny_train(2, 4);
    let ens = PeerEnsemble::<f32>::build(&tiny_peer(), 2, 1).unwrap();
    let (_, logs) = train(ens, &data, &cfg).unwrap();
    let sched = CosineSchedule {
        base_lr: 1e-3,
        total_steps: 16,
    };
    assert_eq!(logs[0].lr, 1e-3);
    for (e, l) in logs.iter().enumerate() {
        assert_eq!(l.lr, sched.lr(4 * e as u64));
    }
    assert!(logs.windows(2).all(|w| w[1].lr <= w[0].lr));
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let data = tiny_data(4);
    let cfg = tiny_train(3, 4);
    let ens = PeerEnsemble::<f32>::build(&tiny_peer(), 3, 2).unwrap();
    let (full, full_logs) = train(ens.clone(), &data, &cfg).unwrap();

    let mut t = Trainer::new(ens, &data, &cfg).unwrap();
    let mut logs = vec![t.run_epoch().unwrap(), t.run_epoch().unwrap()];
    let saved = t.into_state();
    assert_eq!((saved.epoch, saved.step), (2, 8));
    let mut t = Trainer::from_state(saved.clone(), &data, &cfg).unwrap();
    while !t.finished() {
        logs.push(t.run_epoch().unwrap());
    }
    assert_eq!(logs, full_logs);
    for (p, q) in t.state().ensemble.peers.iter().zip(&full.peers) {
        assert_eq!(p.params(), q.params());
    }

    let other_m = TrainConfig { peers: 2, ..cfg };
    assert!(matches!(
        Trainer::from_state(saved.clone(), &data, &other_m),
        Err(Error::ConfigMismatch(_))
    ));
    let other_epochs = TrainConfig { epochs: 5, ..cfg };
    assert!(matches!(
        Trainer::from_state(saved, &data, &other_epochs),
        Err(Error::ConfigMismatch(_))
    ));
}

#[test]
fn baseline_peers_train_independently() {
    let data = tiny_data(4);
    let base = |m| TrainConfig {
        terms: LossTerms::BASELINE,
        adam: AdamWConfig::default(),
        ..tiny_train(m, 2)
    };
    let (two, _) = train(PeerEnsemble::<f32>::build(&tiny_peer(), 2, 3).unwrap(), &data, &base(2)).unwrap();
    let (three, _) = train(PeerEnsemble::<f32>::build(&tiny_peer(), 3, 3).unwrap(), &data, &base(3)).unwrap();
    assert_eq!(two.peers[0].params(), three.peers[0].params());
    assert_eq!(two.peers[1].params(), three.peers[1].params());

    let (full, _) = train(PeerEnsemble::<f32>::build(&tiny_peer(), 2, 3).unwrap(), &data, &tiny_train(2, 2)).unwrap();
    assert_ne!(full.peers[0].params(), two.peers[0].params());
}

#[test]
fn ablations_keep_the_forward_count() {
    let data = tiny_data(4);
    let run = |terms| {
        let cfg = TrainConfig { terms, ..tiny_train(2, 1) };
        train(PeerEnsemble::<f32>::build(&tiny_peer(), 2, 3).unwrap(), &data, &cfg)
            .unwrap()
            .1
    };
    let full = run(LossTerms::FULL);
    let base = run(LossTerms::BASELINE);
    assert_eq!(full[0].batches, base[0].batches);
    // identical first-step inputs: every term is evaluated even when disabled
    assert_eq!(base[0].loss.kl_weight, 0.0);
    assert!(base[0].loss.kl > 0.0 && base[0].loss.cr_rg > 0.0);
}

#[test]
fn one_small_step_decreases_the_total() {
    let data = tiny_data(2);
    let cfg = TrainConfig {
        adam: AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
        ..tiny_train(2, 1)
    };
    let ens = PeerEnsemble::<f64>::build(&tiny_peer(), 2, 4).unwrap();
    let mut t = Trainer::new(ens, &data, &cfg).unwrap();
    let batch: Vec<usize> = (0..data.len()).collect();
    let sigs: Vec<_> = batch.iter().map(|&i| &data.records()[i].signal).collect();
    let labels = data.labels();
    let input = PeerInput::<f64>::from_signals(ExtractorKind::CnnLstm, &sigs).unwrap();
    let before = t.step(&input, &labels, 1e-5).unwrap().0.total;
    let after = t.step(&input, &labels, 0.0).unwrap().0.total;
    assert!(after < before, "{} -> {}", before, after);
}

#[test]
fn evaluation_uses_the_deployment_path() {
    let data = tiny_data(2);
    let peer = PeerNet::<f32>::build(&tiny_peer()).unwrap();
    let pred = predict(&peer, &data, 5).unwrap();
    assert_eq!(pred.len(), data.len());
    let sigs: Vec<_> = data.records().iter().map(|r| &r.signal).collect();
    let full = peer
        .forward_full(&PeerInput::from_signals(ExtractorKind::CnnLstm, &sigs).unwrap())
        .unwrap();
    for (i, p) in pred.iter().enumerate() {
        assert_eq!(*p, argmax(full.z.row(i)));
    }
    let acc = evaluate(&peer.without_heads(), &data, 7).unwrap();
    let hits = pred.iter().zip(data.labels()).filter(|(p, y)| **p == *y).count();
    assert_eq!(acc, hits as f64 / data.len() as f64);
}

#[test]
fn protocol_reports_one_result_per_fold() {
    let data = tiny_data(5);
    let split = make_subject_folds(&data, 2, 0.8, 9).unwrap();
    let cfg = tiny_train(2, 1);
    let res = run_protocol::<f32, _>(&data, &split, &tiny_peer(), &cfg, &mut Silent).unwrap();
    assert_eq!(res.len(), 2);
    for (f, r) in res.iter().enumerate() {
        assert_eq!(r.fold, f);
        assert_eq!(r.peer_accuracy.len(), 2);
        let best = r.peer_accuracy.iter().copied().fold(f64::MIN, f64::max);
        assert_eq!(r.selected_accuracy, best);
        assert_eq!(r.peer_accuracy[r.selected_peer], best);
    }
}

#[test]
fn leaking_split_fails_before_training() {
    let data = tiny_data(3);
    let split = SplitPlan {
        folds: vec![Fold {
            train_subjects: vec!["S01".into(), "S02".into()],
            test_subjects: vec!["S02".into(), "S03".into()],
        }],
        seed: 0,
    };
    struct Count(usize);
    impl ProtocolObserver<f32> for Count {
        type Error = Error;
        fn epoch_started(&mut self, _: usize, _: usize) {
            self.0 += 1;
        }
    }
    let mut obs = Count(0);
    let err = run_protocol::<f32, _>(&data, &split, &tiny_peer(), &tiny_train(2, 1), &mut obs).unwrap_err();
    assert!(matches!(err, Error::SubjectLeakage { .. }), "{:?}", err);
    assert_eq!(obs.0, 0);
}

#[cfg(feature = "std")]
#[test]
fn fast_mode_matches_deterministic_mode() {
    let data = tiny_data(4);
    let det = tiny_train(3, 2);
    let fast = TrainConfig {
        mode: TrainMode::Fast,
        ..det
    };
    let ens = PeerEnsemble::<f32>::build(&tiny_peer(), 3, 6).unwrap();
    let (_, a) = train(ens.clone(), &data, &det).unwrap();
    let (_, b) = train(ens, &data, &fast).unwrap();
    assert_eq!(a, b);
}
