//! Binary framing for model and checkpoint files:
//! `magic | u32 version | u32 header length | JSON header | payload`.
//! The header carries the payload length and its SHA-256.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bytes::{put_u32, sha256_hex, Reader};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct Envelope<H> {
    meta: H,
    payload_len: u64,
    sha256: String,
}

pub(crate) fn encode<H: Serialize>(magic: &[u8; 8], version: u32, meta: &H, payload: &[u8]) -> Vec<u8> {
    let env = Envelope {
        meta,
        payload_len: payload.len() as u64,
        sha256: sha256_hex(payload),
    };
    let header = serde_json::to_vec(&env).expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(magic);
    put_u32(&mut out, version);
    put_u32(&mut out, header.len() as u32);
    out.extend_from_slice(&header);
    out.extend_from_slice(payload);
    out
}

pub(crate) fn decode<'a, H: DeserializeOwned>(bytes: &'a [u8], path: &'a Path, magic: &[u8; 8], version: u32) -> Result<(H, &'a [u8])> {
    let mut rd = Reader::new(bytes, path);
    if rd.take(8)? != magic {
        return Err(Error::format(
            path,
            format!("bad magic, expected {}", String::from_utf8_lossy(magic)),
        ));
    }
    let found = rd.u32()?;
    if found != version {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found,
            expected: version,
        });
    }
    let len = rd.u32()? as usize;
    let env: Envelope<H> = serde_json::from_slice(rd.take(len)?).map_err(|e| Error::format(path, format!("header: {}", e)))?;
    let payload = rd.rest();
    if (payload.len() as u64) < env.payload_len {
        return Err(Error::integrity(
            path,
            format!("truncated payload: {} of {} bytes", payload.len(), env.payload_len),
        ));
    }
    if payload.len() as u64 != env.payload_len {
        return Err(Error::format(
            path,
            format!("{} trailing bytes", payload.len() as u64 - env.payload_len),
        ));
    }
    if sha256_hex(payload) != env.sha256 {
        return Err(Error::integrity(path, "payload checksum mismatch"));
    }
    Ok((env.meta, payload))
}
