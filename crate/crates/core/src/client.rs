//! Client library: find a file through any known node, then move the bytes
//! directly to or from the nodes that hold it.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use log::{debug, warn};
use thiserror::Error;

use crate::node::protocol::{self, call, FileLocations, CHUNK_BYTES};
use crate::node::{FileMeta, FilePart, NodeError, RecordBatch, RecordIndex};
use crate::routing::RingView;
use crate::sphere::{Stream, StreamFile};
use crate::transport::{ChannelPool, LinkProfile, MessageKind, NodeAddr, SharedTransport};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error(transparent)]
    Node(#[from] NodeError),
    #[error("download of {name} broke off after {written} bytes: {reason}")]
    PartialDownload { name: String, written: u64, reason: String },
    #[error("{path}: {source}")]
    LocalIo { path: PathBuf, source: io::Error },
}

impl ClientError {
    pub fn is_not_found(&self) -> bool {
        matches!(self, ClientError::Node(e) if e.is_not_found())
    }

    fn local(path: &Path) -> impl FnOnce(io::Error) -> ClientError + '_ {
        move |source| ClientError::LocalIo { path: path.to_path_buf(), source }
    }
}

pub struct ClientSession {
    entry: NodeAddr,
    pool: ChannelPool,
    profile: Option<LinkProfile>,
    resolved: Mutex<HashMap<String, FileLocations>>,
}

impl ClientSession {
    /// A session that reaches the cloud through `entry`, calling from `addr`.
    pub fn new(transport: SharedTransport, addr: impl Into<NodeAddr>, entry: impl Into<NodeAddr>) -> Self {
        Self {
            pool: ChannelPool::new(transport, addr.into()),
            entry: entry.into(),
            profile: None,
            resolved: Mutex::default(),
        }
    }

    /// Order locations by round-trip time from this client.
    pub fn with_profile(mut self, profile: LinkProfile) -> Self {
        self.profile = Some(profile);
        self
    }

    pub fn addr(&self) -> &NodeAddr {
        self.pool.local()
    }

    pub fn entry(&self) -> &NodeAddr {
        &self.entry
    }

    pub fn pool(&self) -> &ChannelPool {
        &self.pool
    }

    /// Current ring members, as the entry node sees them.
    pub fn members(&self) -> Result<Vec<NodeAddr>, NodeError> {
        let b = call(&self.pool, &self.entry, MessageKind::Members, Vec::new())?;
        Ok(protocol::decode_addrs(&b)?)
    }

    fn sort_by_rtt(&self, holders: &mut [NodeAddr]) {
        if let Some(p) = &self.profile {
            let me = self.addr();
            holders.sort_by_key(|h| p.rtt(me, h));
        }
    }

    /// Ask the cloud where `name` lives, bypassing the cache.
    pub fn lookup(&self, name: &str) -> Result<FileLocations, NodeError> {
        let b = call(&self.pool, &self.entry, MessageKind::Lookup, protocol::name_payload(name));
        let b = match b {
            Ok(b) => b,
            Err(e) => {
                if e.is_not_found() {
                    self.forget(name);
                }
                return Err(e);
            }
        };
        let mut locs = FileLocations::decode(&b)?;
        self.sort_by_rtt(&mut locs.holders);
        self.resolved.lock().unwrap().insert(name.to_string(), locs.clone());
        Ok(locs)
    }

    /// Replica locations of `name`, nearest first when a link profile is set.
    pub fn locate(&self, name: &str) -> Result<Vec<NodeAddr>, NodeError> {
        Ok(self.lookup(name)?.holders)
    }

    /// Cached lookup.
    pub fn resolve(&self, name: &str) -> Result<FileLocations, NodeError> {
        if let Some(l) = self.resolved.lock().unwrap().get(name) {
            return Ok(l.clone());
        }
        self.lookup(name)
    }

    pub fn forget(&self, name: &str) {
        self.resolved.lock().unwrap().remove(name);
    }

    /// Run `f` against the cached locations, refreshing them once if every
    /// cached holder says the file is gone.
    fn with_locations<T>(
        &self,
        name: &str,
        mut f: impl FnMut(&FileLocations) -> Result<T, ClientError>,
    ) -> Result<T, ClientError> {
        let locs = self.resolve(name)?;
        match f(&locs) {
            Err(e) if e.is_not_found() => {
                self.forget(name);
                f(&self.lookup(name)?)
            }
            r => r,
        }
    }

    /// Upload a local file (and its index, if given) to the node responsible
    /// for `name`. Returns the locations holding it afterwards.
    pub fn upload(&self, local_path: &Path, name: &str, index: Option<&RecordIndex>) -> Result<Vec<NodeAddr>, ClientError> {
        let data = fs::read(local_path).map_err(ClientError::local(local_path))?;
        self.upload_bytes(name, &data, index)
    }

    pub fn upload_bytes(&self, name: &str, data: &[u8], index: Option<&RecordIndex>) -> Result<Vec<NodeAddr>, ClientError> {
        let ring = RingView::from_addrs(&self.members()?).map_err(NodeError::from)?;
        let owner = ring.owner_of(name).map_err(NodeError::from)?.addr.clone();
        protocol::push_file(&self.pool, &owner, name, data, index)?;
        self.forget(name);
        Ok(self.locate(name)?)
    }

    /// Download `name` to `dest` (and `dest.idx` when the file is indexed).
    /// Replicas are tried in order; a failed attempt leaves nothing behind.
    pub fn download(&self, name: &str, dest: &Path) -> Result<u64, ClientError> {
        let mut dest_idx = dest.as_os_str().to_owned();
        dest_idx.push(".idx");
        let dest_idx = PathBuf::from(dest_idx);
        let mut written_max = 0u64;
        let mut broke: Option<String> = None;
        let result = self.with_locations(name, |locs| {
            let mut last: Option<ClientError> = None;
            for h in &locs.holders {
                match self.download_from(h, name, dest, &dest_idx) {
                    Ok(n) => return Ok(n),
                    Err((written, e)) => {
                        let _ = fs::remove_file(dest);
                        let _ = fs::remove_file(&dest_idx);
                        warn!("download of {name} from {h} failed after {written} bytes: {e}");
                        if written > 0 {
                            written_max = written_max.max(written);
                            broke = Some(e.to_string());
                        }
                        last = Some(e);
                    }
                }
            }
            Err(last.unwrap_or_else(|| NodeError::NotFound(name.to_string()).into()))
        });
        match result {
            Ok(n) => Ok(n),
            Err(e) if broke.is_some() && !e.is_not_found() => {
                Err(ClientError::PartialDownload { name: name.to_string(), written: written_max, reason: broke.unwrap() })
            }
            Err(e) => Err(e),
        }
    }

    fn download_from(&self, src: &NodeAddr, name: &str, dest: &Path, dest_idx: &Path) -> Result<u64, (u64, ClientError)> {
        let meta: FileMeta = protocol::decode_holds(
            &call(&self.pool, src, MessageKind::Holds, protocol::name_payload(name)).map_err(|e| (0, e.into()))?,
        )
        .map_err(|e| (0, NodeError::from(e).into()))?
        .ok_or_else(|| (0, NodeError::NotFound(format!("{name} on {src}")).into()))?;
        let mut written = 0u64;
        let copy = |part: FilePart, len: u64, path: &Path, written: &mut u64| -> Result<(), ClientError> {
            let mut f = File::create(path).map_err(ClientError::local(path))?;
            let ch = self.pool.open_channel(src).map_err(NodeError::from)?;
            let mut off = 0u64;
            while off < len {
                let want = (len - off).min(CHUNK_BYTES as u64);
                let req = protocol::ByteRange { name: name.to_string(), part, offset: off, len: want };
                let got = protocol::expect_reply(ch.call(MessageKind::ReadBytes, req.encode()).map_err(NodeError::from)?)?;
                if got.is_empty() {
                    return Err(NodeError::Integrity(format!("{name}: {src} served a short file")).into());
                }
                f.write_all(&got).map_err(ClientError::local(path))?;
                off += got.len() as u64;
                *written += got.len() as u64;
            }
            f.sync_all().map_err(ClientError::local(path))?;
            Ok(())
        };
        copy(FilePart::Data, meta.size, dest, &mut written).map_err(|e| (written, e))?;
        if meta.indexed {
            copy(FilePart::Index, meta.records * 16, dest_idx, &mut written).map_err(|e| (written, e))?;
        }
        debug!("downloaded {name} from {src}: {} bytes", meta.size);
        Ok(meta.size)
    }

    /// Records `[first, first+count)` of `name`, from the first replica
    /// that answers.
    pub fn read_records(&self, name: &str, first: u64, count: u64) -> Result<RecordBatch, ClientError> {
        self.with_locations(name, |locs| {
            let mut last = ClientError::from(NodeError::NotFound(name.to_string()));
            for h in &locs.holders {
                match call(&self.pool, h, MessageKind::ReadRecords, protocol::records_request(name, first, count)) {
                    Ok(b) => return Ok(protocol::decode_batch(&b)?),
                    Err(e @ NodeError::Range(_)) => return Err(e.into()),
                    Err(e) => last = e.into(),
                }
            }
            Err(last)
        })
    }

    /// Visit every record of `name` in order, a batch at a time.
    pub fn for_each_batch(&self, name: &str, mut f: impl FnMut(&RecordBatch)) -> Result<u64, ClientError> {
        let meta = self.resolve(name)?.meta;
        if meta.records == 0 {
            return Ok(0);
        }
        let mean = (meta.size / meta.records).max(1);
        let step = ((8 << 20) / mean).max(1);
        let mut first = 0;
        while first < meta.records {
            let n = step.min(meta.records - first);
            f(&self.read_records(name, first, n)?);
            first += n;
        }
        Ok(meta.records)
    }

    /// Look up every name and assemble a stream, in the given order.
    pub fn resolve_stream<S: AsRef<str>>(&self, names: &[S]) -> Result<Stream, NodeError> {
        let files = names
            .iter()
            .map(|n| {
                let l = self.lookup(n.as_ref())?;
                Ok(StreamFile { name: l.name, meta: l.meta, locations: l.holders })
            })
            .collect::<Result<Vec<_>, NodeError>>()?;
        Ok(Stream::new(files))
    }
}
