//! Payload layouts for the storage protocol, plus the error reply codec.
//!
//! Every request body is a sequence of [`WireWriter`] fields. A successful
//! exchange ends in a `Reply`; a failed one ends in an `Error` frame whose
//! payload is `code: u8` followed by a message string.

use super::index::RecordIndex;
use super::store::{FileMeta, FilePart};
use super::NodeError;
use crate::transport::{ChannelPool, Message, MessageKind, NodeAddr};
use crate::wire::{WireError, WireReader, WireWriter};

/// Chunk size for bulk transfers (uploads, downloads, replica pulls).
pub const CHUNK_BYTES: usize = 4 * 1024 * 1024;

pub mod code {
    pub const NOT_FOUND: u8 = 1;
    pub const ACCESS_DENIED: u8 = 2;
    pub const INTEGRITY: u8 = 3;
    pub const RANGE: u8 = 4;
    pub const BAD_REQUEST: u8 = 5;
    pub const OPERATOR: u8 = 6;
    pub const UNAVAILABLE: u8 = 7;
    pub const INTERNAL: u8 = 255;
}

pub fn error_message(err: &NodeError) -> Message {
    let (c, text) = err.wire_parts();
    let mut w = WireWriter::new();
    w.u8(c).str(&text);
    Message::new(MessageKind::Error, 0, w.finish())
}

/// Turn a terminal response into its payload, or the error it carries.
pub fn expect_reply(resp: Message) -> Result<Vec<u8>, NodeError> {
    match resp.kind {
        MessageKind::Reply => Ok(resp.payload),
        MessageKind::Error => {
            let mut r = WireReader::new(&resp.payload);
            let c = r.u8()?;
            let text = r.str()?.to_string();
            Err(NodeError::from_wire(c, text))
        }
        other => Err(NodeError::BadRequest(format!("unexpected {other:?} frame in reply"))),
    }
}

pub fn call(pool: &ChannelPool, peer: &NodeAddr, kind: MessageKind, payload: Vec<u8>) -> Result<Vec<u8>, NodeError> {
    expect_reply(pool.call(peer, kind, payload)?)
}

pub fn write_meta(w: &mut WireWriter, m: &FileMeta) {
    w.u64(m.size).u64(m.records).bool(m.indexed);
}

pub fn read_meta(r: &mut WireReader<'_>) -> Result<FileMeta, WireError> {
    Ok(FileMeta { size: r.u64()?, records: r.u64()?, indexed: r.bool()? })
}

pub fn encode_meta(m: &FileMeta) -> Vec<u8> {
    let mut w = WireWriter::new();
    write_meta(&mut w, m);
    w.finish()
}

pub fn decode_meta(b: &[u8]) -> Result<FileMeta, WireError> {
    let mut r = WireReader::new(b);
    let m = read_meta(&mut r)?;
    r.finish()?;
    Ok(m)
}

/// Where a file lives, as served by its ring owner.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileLocations {
    pub name: String,
    pub meta: FileMeta,
    pub holders: Vec<NodeAddr>,
}

impl FileLocations {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = WireWriter::new();
        w.str(&self.name);
        write_meta(&mut w, &self.meta);
        let hs: Vec<&str> = self.holders.iter().map(NodeAddr::as_str).collect();
        w.strs(&hs);
        w.finish()
    }

    pub fn decode(b: &[u8]) -> Result<Self, WireError> {
        let mut r = WireReader::new(b);
        let name = r.str()?.to_string();
        let meta = read_meta(&mut r)?;
        let holders = r.strs()?.into_iter().map(NodeAddr::new).collect();
        r.finish()?;
        Ok(Self { name, meta, holders })
    }
}

pub fn name_payload(name: &str) -> Vec<u8> {
    let mut w = WireWriter::new();
    w.str(name);
    w.finish()
}

pub fn decode_name(b: &[u8]) -> Result<String, WireError> {
    let mut r = WireReader::new(b);
    let n = r.str()?.to_string();
    r.finish()?;
    Ok(n)
}

pub fn register_payload(name: &str, holder: &NodeAddr, meta: &FileMeta) -> Vec<u8> {
    let mut w = WireWriter::new();
    w.str(name).str(holder.as_str());
    write_meta(&mut w, meta);
    w.finish()
}

pub fn decode_register(b: &[u8]) -> Result<(String, NodeAddr, FileMeta), WireError> {
    let mut r = WireReader::new(b);
    let name = r.str()?.to_string();
    let holder = NodeAddr::new(r.str()?);
    let meta = read_meta(&mut r)?;
    r.finish()?;
    Ok((name, holder, meta))
}

pub fn holds_reply(meta: Option<FileMeta>) -> Vec<u8> {
    let mut w = WireWriter::new();
    w.bool(meta.is_some());
    if let Some(m) = meta {
        write_meta(&mut w, &m);
    }
    w.finish()
}

pub fn decode_holds(b: &[u8]) -> Result<Option<FileMeta>, WireError> {
    let mut r = WireReader::new(b);
    let m = if r.bool()? { Some(read_meta(&mut r)?) } else { None };
    r.finish()?;
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ByteRange {
    pub name: String,
    pub part: FilePart,
    pub offset: u64,
    pub len: u64,
}

impl ByteRange {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = WireWriter::new();
        w.str(&self.name).u8(self.part.code()).u64(self.offset).u64(self.len);
        w.finish()
    }

    pub fn decode(b: &[u8]) -> Result<Self, WireError> {
        let mut r = WireReader::new(b);
        let name = r.str()?.to_string();
        let pc = r.u8()?;
        let part = FilePart::from_code(pc).ok_or(WireError::BadValue { field: "part", value: pc as u64 })?;
        let offset = r.u64()?;
        let len = r.u64()?;
        r.finish()?;
        Ok(Self { name, part, offset, len })
    }
}

pub fn chunk_payload(name: &str, part: FilePart, offset: u64, bytes: &[u8]) -> Vec<u8> {
    let mut w = WireWriter::with_capacity(bytes.len() + name.len() + 32);
    w.str(name).u8(part.code()).u64(offset).bytes(bytes);
    w.finish()
}

pub fn decode_chunk(b: &[u8]) -> Result<(String, FilePart, u64, &[u8]), WireError> {
    let mut r = WireReader::new(b);
    let name = r.str()?.to_string();
    let pc = r.u8()?;
    let part = FilePart::from_code(pc).ok_or(WireError::BadValue { field: "part", value: pc as u64 })?;
    let offset = r.u64()?;
    let bytes = r.bytes()?;
    r.finish()?;
    Ok((name, part, offset, bytes))
}

pub fn commit_payload(name: &str, has_index: bool) -> Vec<u8> {
    let mut w = WireWriter::new();
    w.str(name).bool(has_index);
    w.finish()
}

pub fn decode_commit(b: &[u8]) -> Result<(String, bool), WireError> {
    let mut r = WireReader::new(b);
    let name = r.str()?.to_string();
    let has_index = r.bool()?;
    r.finish()?;
    Ok((name, has_index))
}

pub fn records_request(name: &str, first: u64, count: u64) -> Vec<u8> {
    let mut w = WireWriter::new();
    w.str(name).u64(first).u64(count);
    w.finish()
}

pub fn decode_records_request(b: &[u8]) -> Result<(String, u64, u64), WireError> {
    let mut r = WireReader::new(b);
    let name = r.str()?.to_string();
    let first = r.u64()?;
    let count = r.u64()?;
    r.finish()?;
    Ok((name, first, count))
}

pub fn batch_payload(data: &[u8], index: &RecordIndex) -> Vec<u8> {
    let mut w = WireWriter::with_capacity(data.len() + index.len() * 16 + 16);
    w.bytes(data).bytes(&index.encode());
    w.finish()
}

pub fn decode_batch(b: &[u8]) -> Result<super::RecordBatch, NodeError> {
    let mut r = WireReader::new(b);
    let data = r.bytes()?.to_vec();
    let index = RecordIndex::decode(r.bytes()?).map_err(|e| NodeError::Integrity(e.to_string()))?;
    r.finish()?;
    index.validate(data.len() as u64).map_err(|e| NodeError::Integrity(e.to_string()))?;
    Ok(super::RecordBatch { data, index })
}

pub fn replicate_payload(name: &str, sources: &[NodeAddr]) -> Vec<u8> {
    let mut w = WireWriter::new();
    let s: Vec<&str> = sources.iter().map(NodeAddr::as_str).collect();
    w.str(name).strs(&s);
    w.finish()
}

pub fn decode_replicate(b: &[u8]) -> Result<(String, Vec<NodeAddr>), WireError> {
    let mut r = WireReader::new(b);
    let name = r.str()?.to_string();
    let sources = r.strs()?.into_iter().map(NodeAddr::new).collect();
    r.finish()?;
    Ok((name, sources))
}

pub fn addrs_payload(addrs: &[NodeAddr]) -> Vec<u8> {
    let s: Vec<&str> = addrs.iter().map(NodeAddr::as_str).collect();
    let mut w = WireWriter::new();
    w.strs(&s);
    w.finish()
}

pub fn decode_addrs(b: &[u8]) -> Result<Vec<NodeAddr>, WireError> {
    let mut r = WireReader::new(b);
    let v = r.strs()?.into_iter().map(NodeAddr::new).collect();
    r.finish()?;
    Ok(v)
}

pub fn append_payload(name: &str, data: &[u8], sizes: &[u64]) -> Vec<u8> {
    let mut w = WireWriter::with_capacity(data.len() + sizes.len() * 8 + name.len() + 16);
    w.str(name).bytes(data).u32(sizes.len() as u32);
    for &s in sizes {
        w.u64(s);
    }
    w.finish()
}

pub fn decode_append(b: &[u8]) -> Result<(String, &[u8], Vec<u64>), WireError> {
    let mut r = WireReader::new(b);
    let name = r.str()?.to_string();
    let data = r.bytes()?;
    let n = r.u32()? as usize;
    let sizes = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>, _>>()?;
    r.finish()?;
    Ok((name, data, sizes))
}

pub fn listing_payload(files: &[(String, FileMeta)]) -> Vec<u8> {
    let mut w = WireWriter::new();
    w.u32(files.len() as u32);
    for (n, m) in files {
        w.str(n);
        write_meta(&mut w, m);
    }
    w.finish()
}

pub fn decode_listing(b: &[u8]) -> Result<Vec<(String, FileMeta)>, WireError> {
    let mut r = WireReader::new(b);
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let name = r.str()?.to_string();
        out.push((name, read_meta(&mut r)?));
    }
    r.finish()?;
    Ok(out)
}

/// Send a whole file to `dest` as chunks followed by a commit.
pub fn push_file(
    pool: &ChannelPool,
    dest: &NodeAddr,
    name: &str,
    data: &[u8],
    index: Option<&RecordIndex>,
) -> Result<FileMeta, NodeError> {
    let ch = pool.open_channel(dest)?;
    let send = |part: FilePart, bytes: &[u8]| -> Result<(), NodeError> {
        for (i, c) in bytes.chunks(CHUNK_BYTES).enumerate() {
            let off = (i * CHUNK_BYTES) as u64;
            expect_reply(ch.call(MessageKind::StoreChunk, chunk_payload(name, part, off, c))?)?;
        }
        Ok(())
    };
    send(FilePart::Data, data)?;
    if let Some(idx) = index {
        send(FilePart::Index, &idx.encode())?;
    }
    let meta = expect_reply(ch.call(MessageKind::StoreCommit, commit_payload(name, index.is_some()))?)?;
    Ok(decode_meta(&meta)?)
}

/// Fetch one part of a file from `src` in chunks.
pub fn pull_part(pool: &ChannelPool, src: &NodeAddr, name: &str, part: FilePart, len: u64) -> Result<Vec<u8>, NodeError> {
    let ch = pool.open_channel(src)?;
    let mut out = Vec::with_capacity(len as usize);
    while (out.len() as u64) < len {
        let want = (len - out.len() as u64).min(CHUNK_BYTES as u64);
        let req = ByteRange { name: name.to_string(), part, offset: out.len() as u64, len: want };
        let got = expect_reply(ch.call(MessageKind::ReadBytes, req.encode())?)?;
        if got.is_empty() {
            return Err(NodeError::Integrity(format!("{name}: {src} returned a short {part:?} part")));
        }
        out.extend_from_slice(&got);
    }
    Ok(out)
}
