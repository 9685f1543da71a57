mod common;

use std::path::Path;

use common::{tiny_config, tiny_data};
use omcrd::checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, RunIdentity};
use omcrd::dataset::{decode_dataset, encode_dataset, load_dataset, save_dataset};
use omcrd::embeddings::{load_embeddings, save_embeddings, EmbeddingDump};
use omcrd::model_file::{decode_peer, encode_peer, export_peer, import_peer, import_peer_with_header};
use omcrd::text::{append_epoch, load_json, read_epoch_log, save_json, EpochRecord};
use omcrd::Error;
use omcrd_core::data::make_subject_folds;
use omcrd_core::metrics::embedding_rows;
use omcrd_core::model::PeerInput;
use omcrd_core::trainer::{train, Trainer};
use omcrd_core::{PeerEnsemble, PeerNet, Phase, SplitPlan};

fn p() -> &'static Path {
    Path::new("mem")
}

#[test]
fn dataset_round_trips_bit_exactly() {
    let data = tiny_data();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested").join("d.omcrd");
    save_dataset(&path, &data).unwrap();
    assert_eq!(load_dataset(&path).unwrap(), data);
    assert_eq!(std::fs::read(&path).unwrap(), encode_dataset(&data).unwrap());
}

#[test]
fn damaged_datasets_are_rejected() {
    let bytes = encode_dataset(&tiny_data()).unwrap();
    let cut = &bytes[..bytes.len() - 3];
    assert!(matches!(decode_dataset(cut, p()), Err(Error::Integrity { .. })));

    let mut extra = bytes.clone();
    extra.extend_from_slice(&[0; 4]);
    assert!(matches!(decode_dataset(&extra, p()), Err(Error::Format { .. })));

    let text = String::from_utf8_lossy(&bytes).replacen("version = 1", "version = 7", 1);
    let bumped: Vec<u8> = text.bytes().collect();
    let header_len = bytes.windows(5).position(|w| w == b"\nend\n").unwrap();
    let mut bumped_bytes = bumped[..header_len].to_vec();
    bumped_bytes.extend_from_slice(&bytes[header_len..]);
    assert!(matches!(
        decode_dataset(&bumped_bytes, p()),
        Err(Error::Version { found: 7, expected: 1, .. })
    ));

    assert!(matches!(decode_dataset(b"not a dataset\nend\n", p()), Err(Error::Format { .. })));
}

#[test]
fn exported_models_reproduce_logits() {
    let cfg = tiny_config(Path::new("unused"), &[]);
    let peer = PeerNet::<f32>::build(&cfg.peer).unwrap();
    let data = tiny_data();
    let sigs: Vec<_> = data.records().iter().map(|r| &r.signal).collect();
    let input = PeerInput::<f32>::from_signals(cfg.peer.kind, &sigs).unwrap();
    let dir = tempfile::tempdir().unwrap();

    let full = dir.path().join("full.model");
    let lean = dir.path().join("lean.model");
    export_peer(&full, &peer, true).unwrap();
    export_peer(&lean, &peer, false).unwrap();
    let (back, header) = import_peer_with_header(&full).unwrap();
    assert!(header.heads && back.has_heads());
    assert_eq!(back.params(), peer.params());
    let stripped = import_peer(&lean).unwrap();
    assert!(!stripped.has_heads());

    let z = peer.forward_inference(&input).unwrap();
    assert_eq!(stripped.forward_inference(&input).unwrap(), z);
    assert!(std::fs::metadata(&lean).unwrap().len() < std::fs::metadata(&full).unwrap().len());
    assert_eq!(stripped.count_params(Phase::Inference), peer.count_params(Phase::Inference));
}

#[test]
fn damaged_models_are_rejected() {
    let cfg = tiny_config(Path::new("unused"), &[]);
    let peer = PeerNet::<f32>::build(&cfg.peer).unwrap();
    let bytes = encode_peer(&peer, true, Default::default());
    assert!(decode_peer(&bytes, p()).is_ok());
    assert!(matches!(decode_peer(&bytes[..bytes.len() - 8], p()), Err(Error::Integrity { .. })));
    let mut flipped = bytes.clone();
    let last = flipped.len() - 1;
    flipped[last] ^= 0x40;
    assert!(matches!(decode_peer(&flipped, p()), Err(Error::Integrity { .. })));
    let mut version = bytes.clone();
    version[8] = 9;
    assert!(matches!(decode_peer(&version, p()), Err(Error::Version { found: 9, .. })));
    let mut magic = bytes;
    magic[0] = b'X';
    assert!(matches!(decode_peer(&magic, p()), Err(Error::Format { .. })));
}

#[test]
fn checkpoints_resume_bit_exactly() {
    let cfg = tiny_config(Path::new("unused"), &[("train.epochs", 4.into())]);
    let data = tiny_data();
    let ens = PeerEnsemble::<f32>::build(&cfg.peer, 2, 3).unwrap();
    let (full, full_logs) = train(ens.clone(), &data, &cfg.train).unwrap();

    let identity = RunIdentity {
        peer: cfg.peer,
        train: cfg.train,
        fold: 0,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fold0.ckpt");
    let mut t = Trainer::new(ens, &data, &cfg.train).unwrap();
    let mut logs = vec![t.run_epoch().unwrap(), t.run_epoch().unwrap()];
    save_checkpoint(&path, t.state(), &identity).unwrap();
    drop(t);

    let state = load_checkpoint(&path, &identity).unwrap();
    assert_eq!((state.epoch, state.step), (2, 10));
    let mut t = Trainer::from_state(state, &data, &cfg.train).unwrap();
    while !t.finished() {
        logs.push(t.run_epoch().unwrap());
    }
    assert_eq!(logs, full_logs);
    for (a, b) in t.state().ensemble.peers.iter().zip(&full.peers) {
        assert_eq!(a.params(), b.params());
    }
}

#[test]
fn checkpoints_refuse_a_different_configuration() {
    let cfg = tiny_config(Path::new("unused"), &[]);
    let data = tiny_data();
    let t = Trainer::new(PeerEnsemble::<f32>::build(&cfg.peer, 2, 3).unwrap(), &data, &cfg.train).unwrap();
    let identity = RunIdentity {
        peer: cfg.peer,
        train: cfg.train,
        fold: 0,
    };
    let bytes = encode_checkpoint(t.state(), &identity).unwrap();
    assert!(decode_checkpoint(&bytes, p(), &identity).is_ok());

    let three = tiny_config(Path::new("unused"), &[("train.peers", 3.into())]);
    let other = RunIdentity {
        train: three.train,
        ..identity.clone()
    };
    assert_ne!(other.hash(), identity.hash());
    match decode_checkpoint(&bytes, p(), &other) {
        Err(Error::Core(omcrd_core::Error::ConfigMismatch(msg))) => assert!(msg.contains("train.peers"), "{}", msg),
        other => panic!("expected a mismatch, got {:?}", other.map(|s| s.epoch)),
    }
    assert!(matches!(
        decode_checkpoint(&bytes[..bytes.len() / 2], p(), &identity),
        Err(Error::Integrity { .. })
    ));
}

#[test]
fn embedding_dumps_round_trip() {
    let cfg = tiny_config(Path::new("unused"), &[]);
    let peer = PeerNet::<f32>::build(&cfg.peer).unwrap();
    let data = tiny_data();
    let rows = embedding_rows(&peer, 1, 0, &data, 7).unwrap();
    assert_eq!(rows.len(), data.len());
    let dump = EmbeddingDump::new(rows).unwrap();
    assert_eq!((dump.rg_dim, dump.ch_dim), (6, 5));

    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.emb");
    let b = dir.path().join("b.emb");
    save_embeddings(&a, &dump).unwrap();
    let back = load_embeddings(&a).unwrap();
    assert_eq!(back, dump);
    save_embeddings(&b, &back).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn text_artifacts_round_trip() {
    let data = tiny_data();
    let dir = tempfile::tempdir().unwrap();
    let split = make_subject_folds(&data, 3, 0.8, 4).unwrap();
    let path = dir.path().join("split.json");
    save_json(&path, &split).unwrap();
    assert_eq!(load_json::<SplitPlan>(&path).unwrap(), split);

    let cfg = tiny_config(Path::new("unused"), &[]);
    let (_, logs) = train(PeerEnsemble::<f32>::build(&cfg.peer, 2, 3).unwrap(), &data, &cfg.train).unwrap();
    let log = dir.path().join("epochs.jsonl");
    for l in &logs {
        append_epoch(&log, &EpochRecord { fold: 2, log: l.clone() }).unwrap();
    }
    let back = read_epoch_log(&log).unwrap();
    assert_eq!(back.len(), logs.len());
    assert!(back.iter().zip(&logs).all(|(r, l)| r.fold == 2 && r.log == *l));
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), logs.len());
}
