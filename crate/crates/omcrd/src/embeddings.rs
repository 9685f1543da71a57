//! Embedding dumps: a fixed binary header followed by one row per record
//! `(u16 id length, id bytes, u8 label, u32 fold, u32 peer, f32 e_rg.., f32 e_ch..)`,
//! all little-endian.

use std::path::Path;

use omcrd_core::metrics::EmbeddingRow;

use crate::bytes::{put_f32s, put_u32, put_u64, read_file, write_file, Reader};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"OMCRDEMB";
pub const EMBEDDING_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDump {
    pub rg_dim: usize,
    pub ch_dim: usize,
    pub rows: Vec<EmbeddingRow>,
}

impl EmbeddingDump {
    pub fn new(rows: Vec<EmbeddingRow>) -> Result<Self> {
        let first = rows.first().ok_or(omcrd_core::Error::Empty("embedding dump has no rows"))?;
        let (rg_dim, ch_dim) = (first.e_rg.len(), first.e_ch.len());
        if let Some(i) = rows.iter().position(|r| r.e_rg.len() != rg_dim || r.e_ch.len() != ch_dim) {
            return Err(omcrd_core::Error::Shape(format!("row {} widths differ from [{}, {}]", i, rg_dim, ch_dim)).into());
        }
        Ok(Self { rg_dim, ch_dim, rows })
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, EMBEDDING_VERSION);
        put_u32(&mut out, self.rg_dim as u32);
        put_u32(&mut out, self.ch_dim as u32);
        put_u64(&mut out, self.rows.len() as u64);
        for r in &self.rows {
            let id = r.subject_id.as_bytes();
            let len = u16::try_from(id.len()).map_err(|_| Error::Usage(format!("subject id {:?} is too long", r.subject_id)))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(id);
            out.push(r.label as u8);
            put_u32(&mut out, r.fold as u32);
            put_u32(&mut out, r.peer as u32);
            put_f32s(&mut out, &r.e_rg);
            put_f32s(&mut out, &r.e_ch);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut rd = Reader::new(bytes, path);
        if rd.take(8)? != MAGIC {
            return Err(Error::format(path, "not an embedding dump"));
        }
        let found = rd.u32()?;
        if found != EMBEDDING_VERSION {
            return Err(Error::Version {
                path: path.to_path_buf(),
                found,
                expected: EMBEDDING_VERSION,
            });
        }
        let rg_dim = rd.u32()? as usize;
        let ch_dim = rd.u32()? as usize;
        let count = rd.u64()? as usize;
        let mut rows = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let len = rd.u16()? as usize;
            let subject_id = String::from_utf8(rd.take(len)?.to_vec()).map_err(|_| Error::format(path, "subject id is not UTF-8"))?;
            rows.push(EmbeddingRow {
                subject_id,
                label: rd.u8()? as usize,
                fold: rd.u32()? as usize,
                peer: rd.u32()? as usize,
                e_rg: rd.f32s(rg_dim)?,
                e_ch: rd.f32s(ch_dim)?,
            });
        }
        rd.finish()?;
        Ok(Self { rg_dim, ch_dim, rows })
    }
}

pub fn save_embeddings(path: &Path, dump: &EmbeddingDump) -> Result<()> {
    write_file(path, &dump.encode()?)
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingDump> {
    EmbeddingDump::decode(&read_file(path)?, path)
}
