//! Exported peer networks.

use std::path::Path;

use omcrd_core::{PeerConfig, PeerNet, Tensor};
use serde::{Deserialize, Serialize};

use crate::bytes::{put_f32s, read_file, write_file, Reader};
use crate::error::{Error, Result};
use crate::framed;

const MAGIC: &[u8; 8] = b"OMCRDMDL";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub config: PeerConfig,
    pub heads: bool,
    pub tensors: Vec<TensorInfo>,
    /// Free-form provenance (fold, peer index, accuracy, ...).
    #[serde(default)]
    pub notes: serde_json::Map<String, serde_json::Value>,
}

pub(crate) fn tensor_infos(peer: &PeerNet<f32>) -> Vec<TensorInfo> {
    peer.specs()
        .iter()
        .map(|s| TensorInfo {
            name: s.name.clone(),
            shape: s.shape.clone(),
        })
        .collect()
}

pub(crate) fn read_tensors(rd: &mut Reader<'_>, infos: &[TensorInfo]) -> Result<Vec<Tensor<f32>>> {
    infos
        .iter()
        .map(|t| {
            let data = rd.f32s(t.shape.iter().product())?;
            Ok(Tensor::from_vec(&t.shape, data)?)
        })
        .collect()
}

/// Serializes `peer`; projection heads are written only when `heads` is set
/// and the peer still has them.
pub fn encode_peer(peer: &PeerNet<f32>, heads: bool, notes: serde_json::Map<String, serde_json::Value>) -> Vec<u8> {
    let peer = if heads { peer.clone() } else { peer.without_heads() };
    let header = ModelHeader {
        config: *peer.config(),
        heads: peer.has_heads(),
        tensors: tensor_infos(&peer),
        notes,
    };
    let mut payload = Vec::new();
    for p in peer.params() {
        put_f32s(&mut payload, p.data());
    }
    framed::encode(MAGIC, MODEL_VERSION, &header, &payload)
}

pub fn decode_peer(bytes: &[u8], path: &Path) -> Result<(PeerNet<f32>, ModelHeader)> {
    let (header, payload): (ModelHeader, _) = framed::decode(bytes, path, MAGIC, MODEL_VERSION)?;
    let mut rd = Reader::new(payload, path);
    let params = read_tensors(&mut rd, &header.tensors)?;
    rd.finish()?;
    let peer = PeerNet::from_parts(&header.config, params)?;
    if peer.has_heads() != header.heads {
        return Err(Error::format(path, "head flag disagrees with the stored tensors"));
    }
    for (spec, info) in peer.specs().iter().zip(&header.tensors) {
        if spec.name != info.name {
            return Err(Error::format(
                path,
                format!("tensor {:?} stored where {:?} belongs", info.name, spec.name),
            ));
        }
    }
    Ok((peer, header))
}

pub fn export_peer(path: &Path, peer: &PeerNet<f32>, heads: bool) -> Result<()> {
    export_peer_with_notes(path, peer, heads, Default::default())
}

pub fn export_peer_with_notes(
    path: &Path,
    peer: &PeerNet<f32>,
    heads: bool,
    notes: serde_json::Map<String, serde_json::Value>,
) -> Result<()> {
    write_file(path, &encode_peer(peer, heads, notes))
}

pub fn import_peer(path: &Path) -> Result<PeerNet<f32>> {
    Ok(decode_peer(&read_file(path)?, path)?.0)
}

pub fn import_peer_with_header(path: &Path) -> Result<(PeerNet<f32>, ModelHeader)> {
    decode_peer(&read_file(path)?, path)
}
