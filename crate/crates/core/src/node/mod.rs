//! The storage daemon.
//!
//! A node stores whole files with their record indexes, keeps the location
//! registry for the names it owns on the ring, and, as owner, tops up the
//! replica count of those names. Holders announce themselves to the owner;
//! after a membership change every node re-announces what it holds.

pub mod index;
pub mod protocol;
pub mod store;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use index::{IndexEntry, IndexError, RecordBatch, RecordIndex};
use protocol::{call, code, FileLocations};
pub use store::{FileMeta, FilePart, FileStore};

use crate::routing::{RingView, RoutingError, SharedRing};
use crate::sphere::operator::OperatorRegistry;
use crate::sphere::spe::SpeHost;
use crate::transport::{ChannelPool, Message, MessageKind, NodeAddr, RequestContext, Server, Service, SharedTransport, TransportError};
use crate::wire::WireError;

#[derive(Debug, Error)]
pub enum NodeError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("access denied for {0}")]
    AccessDenied(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("operator failed: {0}")]
    Operator(String),
    #[error("unavailable: {0}")]
    Unavailable(String),
    #[error("remote error {code}: {message}")]
    Remote { code: u8, message: String },
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Routing(#[from] RoutingError),
    #[error("malformed payload: {0}")]
    Wire(#[from] WireError),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

impl NodeError {
    fn wire_parts(&self) -> (u8, String) {
        match self {
            NodeError::NotFound(s) => (code::NOT_FOUND, s.clone()),
            NodeError::AccessDenied(s) => (code::ACCESS_DENIED, s.clone()),
            NodeError::Integrity(s) => (code::INTEGRITY, s.clone()),
            NodeError::Range(s) => (code::RANGE, s.clone()),
            NodeError::BadRequest(s) => (code::BAD_REQUEST, s.clone()),
            NodeError::Operator(s) => (code::OPERATOR, s.clone()),
            NodeError::Unavailable(s) => (code::UNAVAILABLE, s.clone()),
            NodeError::Remote { code, message } => (*code, message.clone()),
            NodeError::Transport(e) => (code::UNAVAILABLE, e.to_string()),
            NodeError::Routing(e) => (code::UNAVAILABLE, e.to_string()),
            NodeError::Wire(e) => (code::BAD_REQUEST, e.to_string()),
            NodeError::Io(e) => (code::INTERNAL, e.to_string()),
        }
    }

    fn from_wire(c: u8, message: String) -> Self {
        match c {
            code::NOT_FOUND => NodeError::NotFound(message),
            code::ACCESS_DENIED => NodeError::AccessDenied(message),
            code::INTEGRITY => NodeError::Integrity(message),
            code::RANGE => NodeError::Range(message),
            code::BAD_REQUEST => NodeError::BadRequest(message),
            code::OPERATOR => NodeError::Operator(message),
            code::UNAVAILABLE => NodeError::Unavailable(message),
            code => NodeError::Remote { code, message },
        }
    }

    pub fn is_not_found(&self) -> bool {
        matches!(self, NodeError::NotFound(_))
    }
}

/// Write access list. Entries are bare hosts or full `host:port` addresses.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Acl {
    writers: BTreeSet<String>,
}

impl Acl {
    pub fn new<S: Into<String>>(writers: impl IntoIterator<Item = S>) -> Self {
        Self { writers: writers.into_iter().map(Into::into).collect() }
    }

    pub fn permits(&self, addr: &NodeAddr) -> bool {
        self.writers.contains(addr.host()) || self.writers.contains(addr.as_str())
    }

    pub fn writers(&self) -> impl Iterator<Item = &str> {
        self.writers.iter().map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplicaPolicy {
    target: usize,
    pub check_interval: Duration,
}

impl ReplicaPolicy {
    pub const DEFAULT_TARGET: usize = 3;

    pub fn new(target: usize, check_interval: Duration) -> Result<Self, NodeError> {
        if target == 0 {
            return Err(NodeError::BadRequest("replica target must be at least 1".into()));
        }
        Ok(Self { target, check_interval })
    }

    pub fn target(&self) -> usize {
        self.target
    }
}

impl Default for ReplicaPolicy {
    fn default() -> Self {
        Self { target: Self::DEFAULT_TARGET, check_interval: Duration::from_secs(24 * 3600) }
    }
}

#[derive(Debug, Clone)]
pub struct NodeConfig {
    pub addr: NodeAddr,
    pub data_dir: PathBuf,
    pub acl: Acl,
    pub policy: ReplicaPolicy,
    /// Seed for replica placement.
    pub seed: u64,
    /// Processing elements this node can host at once.
    pub spe_slots: usize,
}

impl NodeConfig {
    pub fn new(addr: impl Into<NodeAddr>, data_dir: impl Into<PathBuf>) -> Self {
        Self {
            addr: addr.into(),
            data_dir: data_dir.into(),
            acl: Acl::default(),
            policy: ReplicaPolicy::default(),
            seed: 0,
            spe_slots: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReplicationAction {
    /// A new replica of `name` was created on `target`.
    Copied { name: String, target: NodeAddr },
    /// Not enough eligible nodes to reach the target.
    Shortfall { name: String, have: usize, target: usize },
}

#[derive(Debug, Default)]
struct Registration {
    meta: Option<FileMeta>,
    holders: BTreeSet<NodeAddr>,
}

#[derive(Default)]
struct Staging {
    data: Vec<u8>,
    index: Vec<u8>,
}

pub struct Node {
    me: std::sync::Weak<Node>,
    addr: NodeAddr,
    store: FileStore,
    acl: Acl,
    policy: ReplicaPolicy,
    ring: SharedRing,
    pool: ChannelPool,
    transport: SharedTransport,
    registry: Mutex<BTreeMap<String, Registration>>,
    staging: Mutex<HashMap<(NodeAddr, String), Staging>>,
    rng: Mutex<ChaCha8Rng>,
    operators: Arc<OperatorRegistry>,
    pub(crate) spes: SpeHost,
    server: Mutex<Option<Server>>,
    stopped: Arc<AtomicBool>,
    cycles: AtomicU64,
}

impl std::fmt::Debug for Node {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Node").field("addr", &self.addr).finish_non_exhaustive()
    }
}

impl Node {
    pub fn new(
        config: NodeConfig,
        transport: SharedTransport,
        ring: SharedRing,
        operators: Arc<OperatorRegistry>,
    ) -> Result<Arc<Self>, NodeError> {
        let store = FileStore::open(&config.data_dir)?;
        let seed = config.seed ^ u64::from_le_bytes(crate::routing::hash_name(config.addr.as_str())?.as_bytes()[..8].try_into().unwrap());
        Ok(Arc::new_cyclic(|me| Self {
            me: me.clone(),
            pool: ChannelPool::new(transport.clone(), config.addr.clone()),
            addr: config.addr,
            store,
            acl: config.acl,
            policy: config.policy,
            ring,
            transport,
            registry: Mutex::default(),
            staging: Mutex::default(),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
            operators,
            spes: SpeHost::new(config.spe_slots),
            server: Mutex::default(),
            stopped: Arc::default(),
            cycles: AtomicU64::new(0),
        }))
    }

    pub fn addr(&self) -> &NodeAddr {
        &self.addr
    }

    pub(crate) fn arc(&self) -> Arc<Node> {
        self.me.upgrade().expect("node is alive while serving")
    }

    pub fn store(&self) -> &FileStore {
        &self.store
    }

    pub fn ring(&self) -> Arc<RingView> {
        self.ring.current()
    }

    pub fn pool(&self) -> &ChannelPool {
        &self.pool
    }

    pub fn policy(&self) -> &ReplicaPolicy {
        &self.policy
    }

    pub fn operators(&self) -> &Arc<OperatorRegistry> {
        &self.operators
    }

    /// Begin serving requests.
    pub fn start(self: &Arc<Self>) -> Result<(), NodeError> {
        let svc: Arc<dyn Service> = Arc::new(NodeService(self.clone()));
        let server = Server::start(self.transport.clone(), self.addr.clone(), svc)?;
        *self.server.lock().unwrap() = Some(server);
        self.stopped.store(false, Ordering::SeqCst);
        info!("{} serving", self.addr);
        Ok(())
    }

    /// Stop serving and drop every connection; stored files stay on disk.
    pub fn stop(&self) {
        self.stopped.store(true, Ordering::SeqCst);
        if let Some(s) = self.server.lock().unwrap().take() {
            s.stop();
        }
        self.spes.release_all();
        self.pool.close_all();
    }

    pub fn is_running(&self) -> bool {
        self.server.lock().unwrap().is_some()
    }

    /// Replication cycles completed by the background task.
    pub fn cycles_completed(&self) -> u64 {
        self.cycles.load(Ordering::SeqCst)
    }

    /// Run `replicate_check` every `check_interval` on the transport clock.
    pub fn spawn_replicator(self: &Arc<Self>) {
        let node = Arc::downgrade(self);
        let stopped = self.stopped.clone();
        let clock = self.transport.clock();
        let every = self.policy.check_interval;
        std::thread::Builder::new()
            .name(format!("replicator-{}", self.addr))
            .spawn(move || loop {
                clock.sleep(every);
                if stopped.load(Ordering::SeqCst) {
                    return;
                }
                let Some(n) = node.upgrade() else { return };
                match n.replicate_check() {
                    Ok(actions) => debug!("{}: replication cycle, {} actions", n.addr, actions.len()),
                    Err(e) => warn!("{}: replication cycle failed: {e}", n.addr),
                }
                n.cycles.fetch_add(1, Ordering::SeqCst);
            })
            .expect("spawn replicator");
    }

    /// Ring hosts may always write: over TCP a peer node calls from an
    /// ephemeral port, so only its host identifies it.
    fn may_write(&self, client: &NodeAddr) -> bool {
        let ring = self.ring.current();
        self.acl.permits(client) || ring.contains(client) || ring.contains_host(client.host())
    }

    /// Store a client's file here. The client must be on the write list.
    pub fn store_file(
        &self,
        client: &NodeAddr,
        name: &str,
        data: &[u8],
        index: Option<&RecordIndex>,
    ) -> Result<FileMeta, NodeError> {
        if !self.may_write(client) {
            return Err(NodeError::AccessDenied(client.to_string()));
        }
        self.store_local(name, data, index)
    }

    /// Store a file produced by this node itself and register it.
    pub fn store_local(&self, name: &str, data: &[u8], index: Option<&RecordIndex>) -> Result<FileMeta, NodeError> {
        let meta = self.store.put(name, data, index)?;
        self.announce(name, meta)?;
        Ok(meta)
    }

    /// Tell the owner of `name` that this node holds it.
    pub fn announce(&self, name: &str, meta: FileMeta) -> Result<(), NodeError> {
        let ring = self.ring.current();
        let owner = ring.owner_of(name)?.addr.clone();
        if owner == self.addr {
            self.register(name, self.addr.clone(), meta);
            Ok(())
        } else {
            call(&self.pool, &owner, MessageKind::Register, protocol::register_payload(name, &self.addr, &meta)).map(drop)
        }
    }

    /// Re-announce every local file; used after the ring changes.
    pub fn announce_all(&self) -> Result<usize, NodeError> {
        let files = self.store.list();
        for (name, meta) in &files {
            if let Err(e) = self.announce(name, *meta) {
                warn!("{}: announcing {name} failed: {e}", self.addr);
            }
        }
        Ok(files.len())
    }

    /// Forget registry entries for names this node no longer owns.
    pub fn prune_registry(&self) {
        let ring = self.ring.current();
        self.registry
            .lock()
            .unwrap()
            .retain(|name, _| ring.owner_of(name).map(|m| m.addr == self.addr).unwrap_or(false));
    }

    fn register(&self, name: &str, holder: NodeAddr, meta: FileMeta) {
        let mut reg = self.registry.lock().unwrap();
        let r = reg.entry(name.to_string()).or_default();
        r.meta = Some(meta);
        r.holders.insert(holder);
    }

    /// Registry view for a name this node owns.
    pub fn registered(&self, name: &str) -> Option<FileLocations> {
        let reg = self.registry.lock().unwrap();
        let r = reg.get(name)?;
        if r.holders.is_empty() {
            return None;
        }
        Some(FileLocations { name: name.to_string(), meta: r.meta?, holders: r.holders.iter().cloned().collect() })
    }

    /// All replica locations of `name`, asked of its ring owner. If the owner
    /// cannot be reached, every member is asked directly.
    pub fn lookup(&self, name: &str) -> Result<FileLocations, NodeError> {
        let ring = self.ring.current();
        let owner = ring.owner_of(name)?.addr.clone();
        if owner == self.addr {
            return self.registered(name).ok_or_else(|| NodeError::NotFound(name.to_string()));
        }
        match call(&self.pool, &owner, MessageKind::Locate, protocol::name_payload(name)) {
            Ok(b) => Ok(FileLocations::decode(&b)?),
            Err(NodeError::Transport(e)) => {
                warn!("{}: owner {owner} of {name} unreachable ({e}); asking all members", self.addr);
                self.scatter_lookup(&ring, name)
            }
            Err(e) => Err(e),
        }
    }

    fn scatter_lookup(&self, ring: &RingView, name: &str) -> Result<FileLocations, NodeError> {
        let mut holders = Vec::new();
        let mut meta = None;
        for m in ring.members() {
            let held = if m.addr == self.addr {
                self.store.meta(name)
            } else {
                match call(&self.pool, &m.addr, MessageKind::Holds, protocol::name_payload(name)) {
                    Ok(b) => protocol::decode_holds(&b)?,
                    Err(_) => None,
                }
            };
            if let Some(h) = held {
                meta = Some(h);
                holders.push(m.addr.clone());
            }
        }
        match meta {
            Some(meta) => Ok(FileLocations { name: name.to_string(), meta, holders }),
            None => Err(NodeError::NotFound(name.to_string())),
        }
    }

    /// Records `[first, first+count)` of `name`, from local disk if held
    /// here, otherwise from a replica holder.
    pub fn read_records(&self, name: &str, first: u64, count: u64) -> Result<RecordBatch, NodeError> {
        if self.store.contains(name) {
            return self.store.read_records(name, first, count);
        }
        let locs = self.lookup(name)?;
        self.read_records_from(name, first, count, &locs.holders).map(|(b, _)| b)
    }

    /// Like [`Node::read_records`] but tries the given holders in order. Also
    /// reports which node served the read.
    pub fn read_records_from(
        &self,
        name: &str,
        first: u64,
        count: u64,
        holders: &[NodeAddr],
    ) -> Result<(RecordBatch, NodeAddr), NodeError> {
        if self.store.contains(name) && (holders.is_empty() || holders.contains(&self.addr)) {
            return Ok((self.store.read_records(name, first, count)?, self.addr.clone()));
        }
        let mut last = NodeError::NotFound(name.to_string());
        for h in holders.iter().filter(|h| **h != self.addr) {
            match call(&self.pool, h, MessageKind::ReadRecords, protocol::records_request(name, first, count)) {
                Ok(b) => return Ok((protocol::decode_batch(&b)?, h.clone())),
                Err(e @ NodeError::Range(_)) => return Err(e),
                Err(e) => {
                    debug!("{}: read of {name} from {h} failed: {e}", self.addr);
                    last = e;
                }
            }
        }
        Err(last)
    }

    fn holds_remote(&self, holder: &NodeAddr, name: &str) -> bool {
        if *holder == self.addr {
            return self.store.contains(name);
        }
        match call(&self.pool, holder, MessageKind::Holds, protocol::name_payload(name)) {
            Ok(b) => matches!(protocol::decode_holds(&b), Ok(Some(_))),
            Err(_) => false,
        }
    }

    /// One maintenance pass over the names this node owns: drop dead holders
    /// from the registry, then add replicas on randomly chosen eligible
    /// members until each name reaches the target count.
    pub fn replicate_check(&self) -> Result<Vec<ReplicationAction>, NodeError> {
        let ring = self.ring.current();
        let owned: Vec<(String, Vec<NodeAddr>)> = {
            let reg = self.registry.lock().unwrap();
            reg.iter()
                .filter(|(n, _)| ring.owner_of(n).map(|m| m.addr == self.addr).unwrap_or(false))
                .map(|(n, r)| (n.clone(), r.holders.iter().cloned().collect()))
                .collect()
        };
        let target = self.policy.target;
        let mut actions = Vec::new();
        for (name, holders) in owned {
            let (live, dead): (Vec<NodeAddr>, Vec<NodeAddr>) = holders.into_iter().partition(|h| self.holds_remote(h, &name));
            if !dead.is_empty() {
                let mut reg = self.registry.lock().unwrap();
                if let Some(r) = reg.get_mut(&name) {
                    for d in &dead {
                        r.holders.remove(d);
                    }
                }
            }
            if live.is_empty() {
                warn!("{}: no live replica of {name}", self.addr);
                continue;
            }
            if live.len() >= target {
                continue;
            }
            let eligible: Vec<NodeAddr> = ring.addrs().into_iter().filter(|a| !live.contains(a)).collect();
            let need = target - live.len();
            let chosen: Vec<NodeAddr> = {
                let mut rng = self.rng.lock().unwrap();
                eligible.choose_multiple(&mut *rng, need.min(eligible.len())).cloned().collect()
            };
            let mut have = live.len();
            for c in chosen {
                let result = if c == self.addr {
                    self.pull_replica(&name, &live).map(drop)
                } else {
                    call(&self.pool, &c, MessageKind::Replicate, protocol::replicate_payload(&name, &live)).map(drop)
                };
                match result {
                    Ok(()) => {
                        have += 1;
                        let meta = self.registry.lock().unwrap().get(&name).and_then(|r| r.meta);
                        if let Some(m) = meta {
                            self.register(&name, c.clone(), m);
                        }
                        actions.push(ReplicationAction::Copied { name: name.clone(), target: c });
                    }
                    Err(e) => warn!("{}: replicating {name} to {c} failed: {e}", self.addr),
                }
            }
            if have < target {
                warn!("{}: {name} has {have} of {target} replicas", self.addr);
                actions.push(ReplicationAction::Shortfall { name, have, target });
            }
        }
        Ok(actions)
    }

    /// Copy `name` (data and index) here from the first source that serves it.
    pub fn pull_replica(&self, name: &str, sources: &[NodeAddr]) -> Result<FileMeta, NodeError> {
        let mut last = NodeError::NotFound(name.to_string());
        for src in sources.iter().filter(|s| **s != self.addr) {
            let attempt = || -> Result<FileMeta, NodeError> {
                let meta = protocol::decode_holds(&call(&self.pool, src, MessageKind::Holds, protocol::name_payload(name))?)?
                    .ok_or_else(|| NodeError::NotFound(format!("{name} on {src}")))?;
                let data = protocol::pull_part(&self.pool, src, name, FilePart::Data, meta.size)?;
                let index = if meta.indexed {
                    let raw = protocol::pull_part(&self.pool, src, name, FilePart::Index, meta.records * 16)?;
                    Some(RecordIndex::decode(&raw).map_err(|e| NodeError::Integrity(e.to_string()))?)
                } else {
                    None
                };
                self.store.put(name, &data, index.as_ref())
            };
            match attempt() {
                Ok(m) => return Ok(m),
                Err(e) => {
                    debug!("{}: pulling {name} from {src} failed: {e}", self.addr);
                    last = e;
                }
            }
        }
        Err(last)
    }

    fn handle(&self, ctx: &RequestContext, req: &Message) -> Result<Vec<u8>, NodeError> {
        let p = &req.payload[..];
        match req.kind {
            MessageKind::Ping => Ok(p.to_vec()),
            MessageKind::Members => Ok(protocol::addrs_payload(&self.ring.current().addrs())),
            MessageKind::Lookup => {
                let name = protocol::decode_name(p)?;
                Ok(self.lookup(&name)?.encode())
            }
            MessageKind::Locate => {
                let name = protocol::decode_name(p)?;
                self.registered(&name).map(|l| l.encode()).ok_or(NodeError::NotFound(name))
            }
            MessageKind::Register => {
                let (name, holder, meta) = protocol::decode_register(p)?;
                self.register(&name, holder, meta);
                Ok(Vec::new())
            }
            MessageKind::Holds => {
                let name = protocol::decode_name(p)?;
                Ok(protocol::holds_reply(self.store.meta(&name)))
            }
            MessageKind::StoreChunk => {
                let (name, part, offset, bytes) = protocol::decode_chunk(p)?;
                if !self.may_write(ctx.from()) {
                    return Err(NodeError::AccessDenied(ctx.from().to_string()));
                }
                store::check_name(&name)?;
                let mut staging = self.staging.lock().unwrap();
                let st = staging.entry((ctx.from().clone(), name.clone())).or_default();
                let buf = match part {
                    FilePart::Data => &mut st.data,
                    FilePart::Index => &mut st.index,
                };
                if offset == 0 {
                    buf.clear();
                }
                if offset != buf.len() as u64 {
                    return Err(NodeError::BadRequest(format!("{name}: chunk at {offset}, expected {}", buf.len())));
                }
                buf.extend_from_slice(bytes);
                Ok(Vec::new())
            }
            MessageKind::StoreCommit => {
                let (name, has_index) = protocol::decode_commit(p)?;
                let st = self.staging.lock().unwrap().remove(&(ctx.from().clone(), name.clone())).unwrap_or_default();
                let index = if has_index {
                    Some(RecordIndex::decode(&st.index).map_err(|e| NodeError::Integrity(format!("{name}: {e}")))?)
                } else {
                    None
                };
                let meta = self.store_file(ctx.from(), &name, &st.data, index.as_ref())?;
                Ok(protocol::encode_meta(&meta))
            }
            MessageKind::ReadBytes => {
                let r = protocol::ByteRange::decode(p)?;
                self.store.read_bytes(&r.name, r.part, r.offset, r.len)
            }
            MessageKind::ReadRecords => {
                let (name, first, count) = protocol::decode_records_request(p)?;
                let b = self.store.read_records(&name, first, count)?;
                Ok(protocol::batch_payload(&b.data, &b.index))
            }
            MessageKind::Replicate => {
                if !self.ring.current().contains(ctx.from()) {
                    return Err(NodeError::AccessDenied(ctx.from().to_string()));
                }
                let (name, sources) = protocol::decode_replicate(p)?;
                let meta = self.pull_replica(&name, &sources)?;
                Ok(protocol::encode_meta(&meta))
            }
            MessageKind::ShuffleAppend => {
                if !self.may_write(ctx.from()) {
                    return Err(NodeError::AccessDenied(ctx.from().to_string()));
                }
                let (name, data, sizes) = protocol::decode_append(p)?;
                self.store.append(&name, data, &sizes)?;
                Ok(Vec::new())
            }
            MessageKind::SealOutput => {
                let prefix = protocol::decode_name(p)?;
                let files = self.store.list_prefix(&prefix);
                for (n, m) in &files {
                    self.announce(n, *m)?;
                }
                Ok(protocol::listing_payload(&files))
            }
            MessageKind::SpeStart | MessageKind::SpeSegment | MessageKind::SpeRelease => {
                crate::sphere::spe::serve(self, ctx, req)
            }
            MessageKind::Pong | MessageKind::Progress | MessageKind::Reply | MessageKind::Error => {
                Err(NodeError::BadRequest(format!("{:?} is not a request", req.kind)))
            }
        }
    }
}

struct NodeService(Arc<Node>);

impl Service for NodeService {
    fn handle(&self, ctx: &RequestContext, request: Message) -> Message {
        let kind = request.kind;
        match self.0.handle(ctx, &request) {
            Ok(payload) if kind == MessageKind::Ping => Message::new(MessageKind::Pong, 0, payload),
            Ok(payload) => Message::reply(payload),
            Err(e) => {
                debug!("{}: {kind:?} from {} failed: {e}", self.0.addr, ctx.from());
                protocol::error_message(&e)
            }
        }
    }
}
