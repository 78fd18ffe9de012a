//! `FCACHE01` feature cache.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FCACHE01"
//! record*:  u32 id_len | id bytes (UTF-8) | u8 ear (0 = L, 1 = R)
//!           | u8 backbone (0 = canary, 1 = wavlm) | f64 frame_rate_hz
//!           | u32 T | u32 d | T·d f32 row-major | u64 crc(record bytes)
//! index:    u64 offset × n | u64 n | u64 index_start | u64 crc(index bytes)
//! ```
//!
//! Every byte after the magic is covered by exactly one checksum, and the
//! reader also checks that the index offsets match the record positions,
//! so any single-byte change is reported.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crc::{Crc, CRC_64_XZ};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::fusion::Ear;

pub const MAGIC: &[u8; 8] = b"FCACHE01";

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

pub fn crc64(bytes: &[u8]) -> u64 {
    CRC64.checksum(bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Backbone {
    Canary,
    Wavlm,
}

impl Backbone {
    pub const BOTH: [Backbone; 2] = [Backbone::Canary, Backbone::Wavlm];

    pub fn as_str(self) -> &'static str {
        match self {
            Backbone::Canary => "canary",
            Backbone::Wavlm => "wavlm",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheRecord {
    pub utterance_id: String,
    pub ear: Ear,
    pub backbone: Backbone,
    pub frame_rate_hz: f64,
    /// `T×d`, every frame valid.
    pub values: Array2<f32>,
}

impl CacheRecord {
    pub fn validate(&self) -> Result<()> {
        let ctx = || format!("record {} ({:?}, {})", self.utterance_id, self.ear, self.backbone.as_str());
        if self.utterance_id.is_empty() || self.utterance_id.len() > u32::MAX as usize {
            return Err(Error::format(ctx(), "utterance id must be non-empty"));
        }
        let (t, d) = self.values.dim();
        if t == 0 || d == 0 || t > u32::MAX as usize || d > u32::MAX as usize {
            return Err(Error::format(ctx(), format!("unsupported extent {t}x{d}")));
        }
        if !(self.frame_rate_hz.is_finite() && self.frame_rate_hz > 0.0) {
            return Err(Error::format(ctx(), format!("frame rate {}", self.frame_rate_hz)));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(ctx(), "non-finite feature value"));
        }
        Ok(())
    }

    fn encode(&self, out: &mut Vec<u8>) {
        let start = out.len();
        out.extend_from_slice(&(self.utterance_id.len() as u32).to_le_bytes());
        out.extend_from_slice(self.utterance_id.as_bytes());
        out.push(self.ear as u8);
        out.push(self.backbone as u8);
        out.extend_from_slice(&self.frame_rate_hz.to_le_bytes());
        let (t, d) = self.values.dim();
        out.extend_from_slice(&(t as u32).to_le_bytes());
        out.extend_from_slice(&(d as u32).to_le_bytes());
        for v in self.values.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc64(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
    }
}

/// Serializes records to bytes; fails on the first invalid record.
pub fn encode_cache(records: &[CacheRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::from(&MAGIC[..]);
    let mut offsets = Vec::with_capacity(records.len());
    for r in records {
        r.validate()?;
        offsets.push(out.len() as u64);
        r.encode(&mut out);
    }
    let index_start = out.len();
    for o in &offsets {
        out.extend_from_slice(&o.to_le_bytes());
    }
    out.extend_from_slice(&(records.len() as u64).to_le_bytes());
    out.extend_from_slice(&(index_start as u64).to_le_bytes());
    let crc = crc64(&out[index_start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn write_cache(path: &Path, records: &[CacheRecord]) -> Result<()> {
    let bytes = encode_cache(records)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    context: String,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.context.clone(), "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn decode_record(bytes: &[u8], start: usize, limit: usize, index: usize) -> Result<(CacheRecord, usize)> {
    let mut c = Cursor { bytes: &bytes[..limit], pos: start, context: format!("record {index}") };
    let id_len = c.u32()? as usize;
    let id_bytes = c.take(id_len)?;
    // Read the remaining header before trusting any of it, so a damaged
    // extent is reported as a checksum or truncation error.
    let ear = c.u8()?;
    let backbone = c.u8()?;
    let frame_rate_hz = c.f64()?;
    let t = c.u32()? as usize;
    let d = c.u32()? as usize;
    let n = t.checked_mul(d).and_then(|n| n.checked_mul(4)).ok_or_else(|| Error::format(c.context.clone(), "extent overflow"))?;
    let payload = c.take(n)?;
    let body_end = c.pos;
    let stored = c.u64()?;
    if crc64(&bytes[start..body_end]) != stored {
        return Err(Error::format(c.context, "checksum mismatch"));
    }
    let id = String::from_utf8(id_bytes.to_vec()).map_err(|_| Error::format(c.context.clone(), "id is not UTF-8"))?;
    let ctx = format!("record {index} ({id})");
    let ear = match ear {
        0 => Ear::L,
        1 => Ear::R,
        v => return Err(Error::format(ctx, format!("ear byte {v}"))),
    };
    let backbone = match backbone {
        0 => Backbone::Canary,
        1 => Backbone::Wavlm,
        v => return Err(Error::format(ctx, format!("backbone byte {v}"))),
    };
    let vals: Vec<f32> = payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
    let values = Array2::from_shape_vec((t, d), vals).expect("length checked");
    let rec = CacheRecord { utterance_id: id, ear, backbone, frame_rate_hz, values };
    rec.validate().map_err(|e| match e {
        Error::Format { detail, .. } => Error::format(ctx.clone(), detail),
        other => other,
    })?;
    Ok((rec, c.pos))
}

pub fn decode_cache(bytes: &[u8]) -> Result<Vec<CacheRecord>> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::format("cache", "bad magic"));
    }
    let mut tail = Cursor { bytes, pos: 0, context: "cache index".into() };
    if bytes.len() < MAGIC.len() + 24 {
        return Err(Error::format("cache index", "truncated"));
    }
    tail.pos = bytes.len() - 24;
    let count = tail.u64()?;
    let index_start = tail.u64()?;
    let stored = tail.u64()?;
    let footer_ok = count
        .checked_mul(8)
        .and_then(|n| n.checked_add(index_start))
        .and_then(|n| n.checked_add(16))
        .is_some_and(|end| end == (bytes.len() - 8) as u64);
    if !footer_ok || index_start < MAGIC.len() as u64 {
        return Err(Error::format("cache index", "inconsistent footer"));
    }
    let index_start = index_start as usize;
    if crc64(&bytes[index_start..bytes.len() - 8]) != stored {
        return Err(Error::format("cache index", "checksum mismatch"));
    }
    let mut idx = Cursor { bytes, pos: index_start, context: "cache index".into() };
    let mut records = Vec::with_capacity(count as usize);
    let mut pos = MAGIC.len();
    for i in 0..count as usize {
        let offset = idx.u64()?;
        if offset != pos as u64 {
            return Err(Error::format(format!("record {i}"), format!("index offset {offset}, record at {pos}")));
        }
        let (rec, next) = decode_record(bytes, pos, index_start, i)?;
        records.push(rec);
        pos = next;
    }
    if pos != index_start {
        return Err(Error::format("cache", "unindexed bytes before the index"));
    }
    Ok(records)
}

pub fn read_cache(path: &Path) -> Result<Vec<CacheRecord>> {
    let bytes = std::fs::read(path)?;
    decode_cache(&bytes).map_err(|e| match e {
        Error::Format { context, detail } => Error::format(format!("{}: {context}", path.display()), detail),
        other => other,
    })
}
